use rand::RngCore;
use rayon::prelude::*;

use super::{EncoderParams, ModelState, LAYER_NORM_EPS};
use crate::attention::{keep_mask, multi_head_forward, AttentionMask, AttnDropout};
use crate::error::{Error, Result};
use crate::seeds;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Dropout active.
    Train,
    /// Deterministic; dropout off.
    Eval,
}

/// One token sequence and its key-validity mask (false marks padding).
#[derive(Debug, Clone, Copy)]
pub struct SequenceInput<'a> {
    pub tokens: &'a [usize],
    pub valid: &'a [bool],
}

/// Model parameters registered as tape leaves.
pub struct BoundParams {
    pub vars: Vec<Var>,
    pub tree: EncoderParams<Var>,
}

impl BoundParams {
    /// Leaves require gradients only when `with_grads` is set and the
    /// parameter is trainable.
    pub fn bind(tape: &mut Tape, state: &ModelState, with_grads: bool) -> Self {
        let vars: Vec<Var> = state
            .params()
            .iter()
            .map(|p| tape.leaf_shared(p.value.clone(), with_grads && p.trainable))
            .collect();
        let tree = state.layout().map(&mut |&i| vars[i]);
        Self { vars, tree }
    }

    /// Gradient per parameter in canonical order: `None` for frozen
    /// parameters, zeros for trainable ones that received no gradient.
    pub fn take_grads(&self, tape: &mut Tape, state: &ModelState) -> Vec<Option<Vec<f64>>> {
        self.vars
            .iter()
            .zip(state.params())
            .map(|(&v, p)| {
                p.trainable
                    .then(|| tape.take_grad(v).unwrap_or_else(|| vec![0.0; p.value.len()]))
            })
            .collect()
    }
}

/// Graph handles produced by one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// Embedding output followed by each layer's output (`n_layers + 1`).
    pub hiddens: Vec<Var>,
    /// Per-layer attention output after `W_o`/`b_o`, before the residual.
    pub attn_outputs: Vec<Var>,
    /// `1 × num_labels` when the model has a classifier.
    pub logits: Option<Var>,
}

/// Detached values of a [`ForwardOutput`].
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardValues {
    pub hiddens: Vec<Tensor>,
    pub attn_outputs: Vec<Tensor>,
    pub logits: Option<Tensor>,
}

impl ForwardOutput {
    pub fn values(&self, tape: &Tape) -> ForwardValues {
        ForwardValues {
            hiddens: self.hiddens.iter().map(|&v| tape.value(v).clone()).collect(),
            attn_outputs: self.attn_outputs.iter().map(|&v| tape.value(v).clone()).collect(),
            logits: self.logits.map(|v| tape.value(v).clone()),
        }
    }
}

fn check_input(state: &ModelState, input: &SequenceInput<'_>) -> Result<()> {
    let c = state.config();
    let n = input.tokens.len();
    if n == 0 {
        return Err(Error::input("empty token sequence"));
    }
    if n > c.max_seq_len {
        return Err(Error::input(format!(
            "sequence length {n} exceeds max_seq_len {}",
            c.max_seq_len
        )));
    }
    if input.valid.len() != n {
        return Err(Error::input(format!(
            "mask length {} does not match sequence length {n}",
            input.valid.len()
        )));
    }
    if let Some((pos, id)) = input.tokens.iter().enumerate().find(|(_, &t)| t >= c.vocab_size) {
        return Err(Error::input(format!(
            "token id {id} at position {pos} outside vocabulary of size {}",
            c.vocab_size
        )));
    }
    if !input.valid.iter().any(|&b| b) {
        return Err(Error::input("sequence has no valid positions"));
    }
    Ok(())
}

fn maybe_dropout(tape: &mut Tape, x: Var, rate: f64, rng: Option<&mut dyn RngCore>) -> Result<Var> {
    match rng {
        Some(rng) if rate > 0.0 => {
            let keep = keep_mask(rng, tape.value(x).len(), rate);
            tape.dropout(x, keep)
        }
        _ => Ok(x),
    }
}

/// Builds the forward graph for one sequence. `rng` drives dropout in
/// [`Mode::Train`] and is ignored in [`Mode::Eval`].
pub fn forward_sequence(
    tape: &mut Tape,
    state: &ModelState,
    params: &BoundParams,
    input: SequenceInput<'_>,
    mode: Mode,
    rng: &mut dyn RngCore,
) -> Result<ForwardOutput> {
    check_input(state, &input)?;
    let c = state.config();
    let p = &params.tree;
    let n = input.tokens.len();
    let train = mode == Mode::Train;
    let positions: Vec<usize> = (0..n).collect();
    let mask = if input.valid.iter().all(|&b| b) {
        None
    } else {
        Some(AttentionMask::from_key_padding(n, input.valid)?)
    };

    let tok = tape.gather_rows(p.token_emb, input.tokens)?;
    let pos = tape.gather_rows(p.position_emb, &positions)?;
    let emb = tape.add(tok, pos)?;
    let emb = tape.layer_norm(emb, p.emb_ln_scale, p.emb_ln_bias, LAYER_NORM_EPS)?;
    let mut h = maybe_dropout(tape, emb, c.dropout, train.then_some(&mut *rng))?;

    let mut hiddens = vec![h];
    let mut attn_outputs = Vec::with_capacity(c.n_layers);
    for layer in &p.layers {
        let drop = (train && c.attention_dropout > 0.0).then(|| AttnDropout {
            rate: c.attention_dropout,
            rng: &mut *rng,
        });
        let attn = multi_head_forward(tape, h, &layer.attn, mask.as_ref(), c.attention_variant, drop)?;
        attn_outputs.push(attn);
        let res = tape.add(attn, h)?;
        let x = tape.layer_norm(res, layer.attn_ln_scale, layer.attn_ln_bias, LAYER_NORM_EPS)?;

        let f = tape.matmul(x, layer.ffn_w1)?;
        let f = tape.add_row(f, layer.ffn_b1)?;
        let f = tape.gelu(f)?;
        let f = tape.matmul(f, layer.ffn_w2)?;
        let f = tape.add_row(f, layer.ffn_b2)?;
        let f = maybe_dropout(tape, f, c.dropout, train.then_some(&mut *rng))?;
        let res = tape.add(f, x)?;
        h = tape.layer_norm(res, layer.out_ln_scale, layer.out_ln_bias, LAYER_NORM_EPS)?;
        hiddens.push(h);
    }

    let logits = match &p.classifier {
        Some(head) => {
            let first = tape.select_rows(h, 0, 1)?;
            let z = tape.matmul(first, head.pre_w)?;
            let z = tape.add_row(z, head.pre_b)?;
            let z = tape.tanh(z)?;
            let z = maybe_dropout(tape, z, c.dropout, train.then_some(&mut *rng))?;
            let z = tape.matmul(z, head.out_w)?;
            Some(tape.add_row(z, head.out_b)?)
        }
        None => None,
    };
    Ok(ForwardOutput {
        hiddens,
        attn_outputs,
        logits,
    })
}

/// Gradient-free forward over a batch of sequences. Example `i` draws its
/// dropout stream from `(seed, i)`, so results do not depend on thread
/// scheduling.
pub fn model_forward(
    state: &ModelState,
    inputs: &[SequenceInput<'_>],
    mode: Mode,
    seed: u64,
) -> Result<Vec<ForwardValues>> {
    inputs
        .par_iter()
        .enumerate()
        .map(|(i, input)| {
            let mut tape = Tape::new();
            let params = BoundParams::bind(&mut tape, state, false);
            let mut rng = seeds::rng(seed, i as u64);
            let out = forward_sequence(&mut tape, state, &params, *input, mode, &mut rng)?;
            Ok(out.values(&tape))
        })
        .collect()
}
