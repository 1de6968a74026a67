//! Training regimes: layerwise attention-output alignment, full-layer
//! hidden-state alignment, task-specific soft-probability distillation and
//! plain classification fine-tuning.
//!
//! Every regime shares one loop: per micro-batch, each example gets its own
//! tape and dropout stream (evaluated in parallel), per-example gradients
//! are averaged in index order, micro-batches are averaged over the
//! accumulation window, and one AdamW step is applied.

use std::sync::Arc;

use rand::RngCore;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{Regime, RunConfig, TrainConfig};
use crate::data::{epoch_batches, Batch, Dataset};
use crate::encoder::{
    forward_sequence, BoundParams, ForwardValues, Mode, ModelState, SequenceInput, TrainableSelector,
};
use crate::error::{Error, Result};
use crate::optim::{mean_grads, AdamWState, GradAccumulator, Grads};
use crate::seeds;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// One line of a loss log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    pub phase: String,
    pub layer: Option<usize>,
    pub loss: f64,
    pub lr: f64,
    pub seed: u64,
}

/// Per-example loss builder: `(tape, student, bound params, input, label,
/// mode, dropout rng) → scalar loss`.
pub type LossFn<'a> = dyn Fn(&mut Tape, &ModelState, &BoundParams, SequenceInput<'_>, Option<usize>, Mode, &mut dyn RngCore) -> Result<Var>
    + Sync
    + 'a;

/// Mean squared difference between a student activation and a detached
/// teacher activation over valid (non-padding) rows and all features.
pub fn attention_output_mse(tape: &mut Tape, student: Var, teacher: &Tensor, valid: &[bool]) -> Result<Var> {
    tape.mse(student, Arc::new(teacher.clone()), Some(valid))
}

/// `T² · KL(softmax(t/T) ‖ softmax(s/T))`, averaged over rows.
pub fn soft_prob_distill_loss(tape: &mut Tape, student_logits: Var, teacher_logits: &Tensor, temperature: f64) -> Result<Var> {
    tape.soft_kd(student_logits, teacher_logits, temperature)
}

/// Gradient-free evaluation-mode forward of one sequence.
pub fn eval_forward(model: &ModelState, input: SequenceInput<'_>) -> Result<ForwardValues> {
    let mut tape = Tape::new();
    let params = BoundParams::bind(&mut tape, model, false);
    let mut rng = seeds::rng(0, 0);
    Ok(forward_sequence(&mut tape, model, &params, input, Mode::Eval, &mut rng)?.values(&tape))
}

fn check_pair(teacher: &ModelState, student: &ModelState) -> Result<()> {
    if !teacher.config().same_extents(student.config()) {
        return Err(Error::contract(format!(
            "teacher and student configs differ: {:?} vs {:?}",
            teacher.config(),
            student.config()
        )));
    }
    Ok(())
}

struct PhaseSpec<'a> {
    phase: &'a str,
    layer: Option<usize>,
    epochs: usize,
    seed: u64,
}

/// Loss and per-example-mean gradients of one micro-batch.
fn micro_batch_grads(student: &ModelState, batch: &Batch, loss_fn: &LossFn<'_>, stream: u64) -> Result<(f64, Grads)> {
    let inputs = batch.inputs();
    let labels = batch.labels.as_deref();
    let per_example: Vec<(f64, Grads)> = inputs
        .par_iter()
        .enumerate()
        .map(|(i, input)| {
            let mut tape = Tape::new();
            let params = BoundParams::bind(&mut tape, student, true);
            let mut rng = seeds::rng(stream, i as u64);
            let loss = loss_fn(&mut tape, student, &params, *input, labels.map(|l| l[i]), Mode::Train, &mut rng)?;
            let value = tape.value(loss).item();
            tape.backward(loss)?;
            Ok((value, params.take_grads(&mut tape, student)))
        })
        .collect::<Result<_>>()?;
    let n = per_example.len() as f64;
    let loss = per_example.iter().map(|(l, _)| l).sum::<f64>() / n;
    Ok((loss, mean_grads(per_example.into_iter().map(|(_, g)| g).collect())?))
}

/// Runs one optimization phase on the student's current trainable set.
fn train_phase(
    student: &mut ModelState,
    data: &Dataset,
    train: &TrainConfig,
    spec: &PhaseSpec<'_>,
    loss_fn: &LossFn<'_>,
    log: &mut Vec<LossRecord>,
    on_epoch_end: &mut dyn FnMut(&ModelState) -> Result<()>,
) -> Result<usize> {
    let n_batches = data.len().div_ceil(train.batch_size);
    let total = train.total_steps(n_batches, spec.epochs);
    let schedule = train.schedule(total as u64)?;
    let mut optimizer = AdamWState::for_model(train.adam, student)?;
    let accumulation = train.accumulation();
    let mut micro = 0u64;
    for epoch in 0..spec.epochs {
        let batches = epoch_batches(data, train.batch_size, train.seq_len, spec.seed, epoch)?;
        let mut acc = GradAccumulator::new();
        let mut window_loss = 0.0;
        let last = batches.len() - 1;
        for (b, batch) in batches.iter().enumerate() {
            if optimizer.t as usize >= total {
                break;
            }
            let stream = seeds::derive(spec.seed ^ 0x5EED, micro);
            micro += 1;
            let (loss, grads) = micro_batch_grads(student, batch, loss_fn, stream)?;
            window_loss += loss;
            acc.add(grads)?;
            if acc.count() == accumulation || b == last {
                let k = acc.count() as f64;
                let mean = acc.take_mean()?;
                let lr = schedule.lr_at(optimizer.t)?;
                optimizer.step_model(student, &mean, lr)?;
                log.push(LossRecord {
                    step: log.len() as u64,
                    phase: spec.phase.to_string(),
                    layer: spec.layer,
                    loss: window_loss / k,
                    lr,
                    seed: spec.seed,
                });
                window_loss = 0.0;
            }
        }
        on_epoch_end(student)?;
    }
    Ok(optimizer.t as usize)
}

/// Mean evaluation-mode loss over a dataset, examples in order.
pub fn eval_loss(student: &ModelState, data: &Dataset, seq_len: usize, loss_fn: &LossFn<'_>) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::input("evaluation dataset is empty"));
    }
    let refs: Vec<_> = data.examples.iter().collect();
    let batch = Batch::from_examples(&refs, seq_len)?;
    let inputs = batch.inputs();
    let losses: Vec<f64> = inputs
        .par_iter()
        .enumerate()
        .map(|(i, input)| {
            let mut tape = Tape::new();
            let params = BoundParams::bind(&mut tape, student, false);
            let mut rng = seeds::rng(0, i as u64);
            let label = batch.labels.as_ref().map(|l| l[i]);
            let loss = loss_fn(&mut tape, student, &params, *input, label, Mode::Eval, &mut rng)?;
            Ok(tape.value(loss).item())
        })
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// Attention-output MSE at `layer` between teacher (eval mode) and student.
pub fn layer_loss_fn(teacher: &ModelState, layer: usize) -> impl Fn(&mut Tape, &ModelState, &BoundParams, SequenceInput<'_>, Option<usize>, Mode, &mut dyn RngCore) -> Result<Var> + Sync + '_ {
    move |tape, student, params, input, _label, mode, rng| {
        let target = eval_forward(teacher, input)?;
        let out = forward_sequence(tape, student, params, input, mode, rng)?;
        attention_output_mse(tape, out.attn_outputs[layer], &target.attn_outputs[layer], input.valid)
    }
}

/// Mean over the full hidden-state stack (embeddings and every layer) of
/// the per-entry MSE, teacher entry `ℓ` aligned with student entry `ℓ`.
pub fn hidden_stack_loss_fn(teacher: &ModelState) -> impl Fn(&mut Tape, &ModelState, &BoundParams, SequenceInput<'_>, Option<usize>, Mode, &mut dyn RngCore) -> Result<Var> + Sync + '_ {
    move |tape, student, params, input, _label, mode, rng| {
        let target = eval_forward(teacher, input)?;
        let out = forward_sequence(tape, student, params, input, mode, rng)?;
        let mut terms = Vec::with_capacity(out.hiddens.len());
        for (h, t) in out.hiddens.iter().zip(&target.hiddens) {
            terms.push(attention_output_mse(tape, *h, t, input.valid)?);
        }
        mean_of(tape, &terms)
    }
}

fn mean_of(tape: &mut Tape, terms: &[Var]) -> Result<Var> {
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = tape.add(total, t)?;
    }
    tape.scale(total, None, 1.0 / terms.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerPhase {
    pub layer: usize,
    /// Tensors made trainable for this phase.
    pub census: Vec<String>,
    /// Tensors whose bits changed during the phase.
    pub changed: Vec<String>,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub steps: usize,
}

impl LayerPhase {
    /// Only census members changed, and all of them did.
    pub fn audit_ok(&self) -> bool {
        self.changed == self.census
    }
}

fn changed_tensors(before: &ModelState, after: &ModelState) -> Vec<String> {
    before
        .params()
        .iter()
        .zip(after.params())
        .filter(|(a, b)| !a.value.bitwise_eq(&b.value))
        .map(|(a, _)| a.name.clone())
        .collect()
}

/// Bottom-up layerwise regime. For each scheduled layer: make only that
/// layer's query/key/value projections (and γ/η/δ for inhibitor students)
/// trainable, train with a fresh optimizer and schedule, and record the
/// evaluation loss before and after plus a freeze audit.
pub fn run_layerwise(
    teacher: &ModelState,
    student: &mut ModelState,
    data: &Dataset,
    eval_data: &Dataset,
    cfg: &RunConfig,
    seed: u64,
    log: &mut Vec<LossRecord>,
) -> Result<Vec<LayerPhase>> {
    check_pair(teacher, student)?;
    let schedule = cfg.layer_schedule();
    if !schedule.windows(2).all(|w| w[0] < w[1]) {
        return Err(Error::contract("layer_schedule must be strictly increasing"));
    }
    let mut phases = Vec::with_capacity(schedule.len());
    for &layer in &schedule {
        let census = student.set_trainable(TrainableSelector::QkvOfLayer(layer))?;
        let loss_fn = layer_loss_fn(teacher, layer);
        let initial_loss = eval_loss(student, eval_data, cfg.train.seq_len, &loss_fn)?;
        let before = student.clone();
        let spec = PhaseSpec {
            phase: "layerwise",
            layer: Some(layer),
            epochs: cfg.train.epochs,
            seed: seeds::derive(seed, layer as u64),
        };
        let steps = train_phase(student, data, &cfg.train, &spec, &loss_fn, log, &mut |_| Ok(()))?;
        let final_loss = eval_loss(student, eval_data, cfg.train.seq_len, &loss_fn)?;
        phases.push(LayerPhase {
            layer,
            census,
            changed: changed_tensors(&before, student),
            initial_loss,
            final_loss,
            steps,
        });
    }
    Ok(phases)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhaseSummary {
    pub initial_loss: f64,
    pub final_loss: f64,
    pub steps: usize,
}

/// Full-layer regime: every parameter trainable, loss is the mean hidden
/// stack MSE with identity layer mapping.
pub fn run_full_layer(
    teacher: &ModelState,
    student: &mut ModelState,
    data: &Dataset,
    eval_data: &Dataset,
    cfg: &RunConfig,
    seed: u64,
    log: &mut Vec<LossRecord>,
) -> Result<PhaseSummary> {
    if teacher.config().n_layers != student.config().n_layers {
        return Err(Error::contract(format!(
            "identity layer mapping needs equal depth, teacher has {} layers and student {}",
            teacher.config().n_layers,
            student.config().n_layers
        )));
    }
    check_pair(teacher, student)?;
    student.set_trainable(TrainableSelector::All)?;
    let loss_fn = hidden_stack_loss_fn(teacher);
    let initial_loss = eval_loss(student, eval_data, cfg.train.seq_len, &loss_fn)?;
    let spec = PhaseSpec {
        phase: "full_layer",
        layer: None,
        epochs: cfg.train.epochs,
        seed,
    };
    let steps = train_phase(student, data, &cfg.train, &spec, &loss_fn, log, &mut |_| Ok(()))?;
    let final_loss = eval_loss(student, eval_data, cfg.train.seq_len, &loss_fn)?;
    Ok(PhaseSummary {
        initial_loss,
        final_loss,
        steps,
    })
}

/// Student layer `s` ↦ teacher layer. `None` picks identity for equal
/// depth and `s ↦ 2s+1` for a teacher twice as deep.
pub fn resolve_layer_mapping(
    teacher_layers: usize,
    student_layers: usize,
    explicit: Option<&[usize]>,
) -> Result<Vec<usize>> {
    let map = match explicit {
        Some(m) => m.to_vec(),
        None if teacher_layers == student_layers => (0..student_layers).collect(),
        None if teacher_layers == 2 * student_layers => (0..student_layers).map(|s| 2 * s + 1).collect(),
        None => {
            return Err(Error::contract(format!(
                "no default layer mapping from {student_layers} student layers to {teacher_layers} teacher layers"
            )))
        }
    };
    if map.len() != student_layers {
        return Err(Error::contract(format!(
            "layer mapping covers {} student layers, model has {student_layers}",
            map.len()
        )));
    }
    if let Some((s, &t)) = map.iter().enumerate().find(|(_, &t)| t >= teacher_layers) {
        return Err(Error::contract(format!(
            "student layer {s} mapped to teacher layer {t}, teacher has {teacher_layers}"
        )));
    }
    Ok(map)
}

/// `distill_weight · soft loss + hidden_weight · mean mapped-layer MSE`.
pub fn task_loss_fn<'a>(
    teacher: &'a ModelState,
    mapping: &'a [usize],
    temperature: f64,
    distill_weight: f64,
    hidden_weight: f64,
) -> impl Fn(&mut Tape, &ModelState, &BoundParams, SequenceInput<'_>, Option<usize>, Mode, &mut dyn RngCore) -> Result<Var> + Sync + 'a {
    move |tape, student, params, input, _label, mode, rng| {
        let target = eval_forward(teacher, input)?;
        let out = forward_sequence(tape, student, params, input, mode, rng)?;
        let (Some(s_logits), Some(t_logits)) = (out.logits, target.logits.as_ref()) else {
            return Err(Error::contract("task-specific distillation needs classifier heads on both models"));
        };
        let soft = soft_prob_distill_loss(tape, s_logits, t_logits, temperature)?;
        let mut terms = Vec::with_capacity(mapping.len());
        for (s, &t) in mapping.iter().enumerate() {
            terms.push(attention_output_mse(tape, out.hiddens[s + 1], &target.hiddens[t + 1], input.valid)?);
        }
        let hidden = mean_of(tape, &terms)?;
        let a = tape.scale(soft, None, distill_weight)?;
        let b = tape.scale(hidden, None, hidden_weight)?;
        tape.add(a, b)
    }
}

fn check_task_pair(teacher: &ModelState, student: &ModelState, cfg: &RunConfig) -> Result<Vec<usize>> {
    let (tc, sc) = (teacher.config(), student.config());
    if tc.d_model != sc.d_model || tc.vocab_size != sc.vocab_size || tc.max_seq_len != sc.max_seq_len {
        return Err(Error::contract("teacher and student must share d_model, vocabulary and max_seq_len"));
    }
    match (teacher.num_labels(), student.num_labels()) {
        (Some(a), Some(b)) if a == b => {}
        _ => return Err(Error::contract("teacher and student need classifier heads with equal label counts")),
    }
    let d = &cfg.distill;
    if (d.distill_weight + d.hidden_weight - 1.0).abs() > 1e-12 {
        return Err(Error::contract("distill_weight + hidden_weight must equal 1"));
    }
    resolve_layer_mapping(tc.n_layers, sc.n_layers, d.layer_mapping.as_deref())
}

/// Evaluation-mode task-specific loss averaged over a batch.
pub fn task_specific_loss(teacher: &ModelState, student: &ModelState, batch: &Batch, cfg: &RunConfig) -> Result<f64> {
    let mapping = check_task_pair(teacher, student, cfg)?;
    let d = &cfg.distill;
    let loss_fn = task_loss_fn(teacher, &mapping, d.temperature, d.distill_weight, d.hidden_weight);
    let inputs = batch.inputs();
    let mut total = 0.0;
    for input in &inputs {
        let mut tape = Tape::new();
        let params = BoundParams::bind(&mut tape, student, false);
        let mut rng = seeds::rng(0, 0);
        let loss = loss_fn(&mut tape, student, &params, *input, None, Mode::Eval, &mut rng)?;
        total += tape.value(loss).item();
    }
    Ok(total / inputs.len() as f64)
}

/// Task-specific regime: all student parameters trainable.
pub fn run_task_specific(
    teacher: &ModelState,
    student: &mut ModelState,
    data: &Dataset,
    eval_data: &Dataset,
    cfg: &RunConfig,
    seed: u64,
    log: &mut Vec<LossRecord>,
) -> Result<PhaseSummary> {
    let mapping = check_task_pair(teacher, student, cfg)?;
    student.set_trainable(TrainableSelector::All)?;
    let d = &cfg.distill;
    let loss_fn = task_loss_fn(teacher, &mapping, d.temperature, d.distill_weight, d.hidden_weight);
    let initial_loss = eval_loss(student, eval_data, cfg.train.seq_len, &loss_fn)?;
    let spec = PhaseSpec {
        phase: "task_specific",
        layer: None,
        epochs: cfg.train.epochs,
        seed,
    };
    let steps = train_phase(student, data, &cfg.train, &spec, &loss_fn, log, &mut |_| Ok(()))?;
    let final_loss = eval_loss(student, eval_data, cfg.train.seq_len, &loss_fn)?;
    Ok(PhaseSummary {
        initial_loss,
        final_loss,
        steps,
    })
}

/// Cross-entropy of the classifier logits against the example label.
pub fn classification_loss(
    tape: &mut Tape,
    student: &ModelState,
    params: &BoundParams,
    input: SequenceInput<'_>,
    label: Option<usize>,
    mode: Mode,
    rng: &mut dyn RngCore,
) -> Result<Var> {
    let label = label.ok_or_else(|| Error::input("fine-tuning needs labeled examples"))?;
    let out = forward_sequence(tape, student, params, input, mode, rng)?;
    let logits = out
        .logits
        .ok_or_else(|| Error::contract("fine-tuning needs a classifier head"))?;
    tape.cross_entropy(logits, &[label])
}

fn check_labels(model: &ModelState, data: &Dataset) -> Result<()> {
    let n = model
        .num_labels()
        .ok_or_else(|| Error::contract("model has no classifier head"))?;
    for (i, e) in data.examples.iter().enumerate() {
        match e.label {
            Some(l) if l < n => {}
            Some(l) => {
                return Err(Error::input(format!(
                    "example {i} has label {l}, classifier has {n} classes"
                )))
            }
            None => return Err(Error::input(format!("example {i} is unlabeled"))),
        }
    }
    Ok(())
}

/// Predicted class per example (evaluation mode, first maximal logit).
pub fn predict(model: &ModelState, data: &Dataset, seq_len: usize) -> Result<Vec<usize>> {
    if data.is_empty() {
        return Err(Error::input("dataset is empty"));
    }
    let refs: Vec<_> = data.examples.iter().collect();
    let batch = Batch::from_examples(&refs, seq_len)?;
    batch
        .inputs()
        .par_iter()
        .map(|input| {
            let out = eval_forward(model, *input)?;
            let logits = out
                .logits
                .ok_or_else(|| Error::contract("model has no classifier head"))?;
            let mut best = 0;
            for (j, &v) in logits.data().iter().enumerate() {
                if v > logits.data()[best] {
                    best = j;
                }
            }
            Ok(best)
        })
        .collect()
}

pub fn accuracy(model: &ModelState, data: &Dataset, seq_len: usize) -> Result<f64> {
    check_labels(model, data)?;
    let pred = predict(model, data, seq_len)?;
    let hits = pred
        .iter()
        .zip(&data.examples)
        .filter(|(p, e)| Some(**p) == e.label)
        .count();
    Ok(hits as f64 / data.len() as f64)
}

/// Mean squared error between the two models' final hidden states over
/// valid positions.
pub fn hidden_mse(reference: &ModelState, model: &ModelState, data: &Dataset, seq_len: usize) -> Result<f64> {
    let loss_fn = move |tape: &mut Tape,
                        student: &ModelState,
                        params: &BoundParams,
                        input: SequenceInput<'_>,
                        _label: Option<usize>,
                        mode: Mode,
                        rng: &mut dyn RngCore| {
        let target = eval_forward(reference, input)?;
        let out = forward_sequence(tape, student, params, input, mode, rng)?;
        let last = out.hiddens.len() - 1;
        attention_output_mse(tape, out.hiddens[last], &target.hiddens[last], input.valid)
    };
    eval_loss(model, data, seq_len, &loss_fn)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneReport {
    /// Held-out accuracy after each epoch.
    pub epoch_accuracy: Vec<f64>,
    pub steps: usize,
}

/// Cross-entropy fine-tuning of every parameter, one epoch at a time,
/// scoring the held-out split after each epoch.
pub fn finetune(
    model: &mut ModelState,
    data: &Dataset,
    heldout: &Dataset,
    cfg: &RunConfig,
    seed: u64,
    log: &mut Vec<LossRecord>,
) -> Result<FinetuneReport> {
    check_labels(model, data)?;
    check_labels(model, heldout)?;
    model.set_trainable(TrainableSelector::All)?;
    let spec = PhaseSpec {
        phase: Regime::Finetune.as_str(),
        layer: None,
        epochs: cfg.train.epochs,
        seed,
    };
    let mut epoch_accuracy = Vec::with_capacity(cfg.train.epochs);
    let steps = train_phase(model, data, &cfg.train, &spec, &classification_loss, log, &mut |m| {
        epoch_accuracy.push(accuracy(m, heldout, cfg.train.seq_len)?);
        Ok(())
    })?;
    Ok(FinetuneReport { epoch_accuracy, steps })
}

/// Serializes records as JSON lines.
pub fn to_jsonl(records: &[LossRecord]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn from_jsonl(text: &str) -> Result<Vec<LossRecord>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}
