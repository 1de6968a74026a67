//! Command-line entry point. Exit codes: 0 success, 1 runtime or check
//! failure, 2 usage or config error.

mod manifest;

pub use manifest::{
    create_out_dir, version_string, RunManifest, LOSSES_FILE, MANIFEST_FILE, METRICS_FILE, MODEL_FILE, REPORT_FILE,
};

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

use crate::attention::AttentionVariant;
use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::config::{load_config, Regime, RunConfig};
use crate::cost_model::{compare_report, parse_grid, DEFAULT_GRID};
use crate::data::synthetic::{random_text, PlantedTask};
use crate::data::{load_text, load_tsv, write_text, write_tsv, Dataset, Tokenizer};
use crate::distill::{
    accuracy, finetune, from_jsonl, hidden_mse, run_full_layer, run_layerwise, run_task_specific, to_jsonl,
    LossRecord,
};
use crate::encoder::{init_student_from_teacher, ModelState};
use crate::error::Error;
use crate::gradcheck::{run_suite, TOLERANCE};

#[derive(Debug, Parser)]
#[command(name = "inhibitor", version, about = "Inhibitor attention: gradient checks, distillation, fine-tuning and cost reports")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Compare analytic gradients against central differences.
    Gradcheck(GradcheckArgs),
    /// Write a seeded, randomly initialized model checkpoint.
    Init(InitArgs),
    /// Run one distillation phase.
    Distill(DistillArgs),
    /// Train a classifier on a labeled dataset.
    Finetune(FinetuneArgs),
    /// Score a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Write the operation-count comparison of both attention variants.
    Bench(BenchArgs),
    /// Summarize the loss log of a finished run.
    Report(ReportArgs),
    /// Write a synthetic dataset.
    GenData(GenDataArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum VariantArg {
    Inhibitor,
    DotProduct,
    All,
}

impl VariantArg {
    fn variant(self) -> Option<AttentionVariant> {
        match self {
            VariantArg::Inhibitor => Some(AttentionVariant::Inhibitor),
            VariantArg::DotProduct => Some(AttentionVariant::DotProduct),
            VariantArg::All => None,
        }
    }
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, env = "INHIBITOR_SEED", default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value = "all")]
    pub variant: VariantArg,
    /// Random instances per checked operation.
    #[arg(long, default_value_t = 5, value_parser = clap::value_parser!(u64).range(1..))]
    pub trials: u64,
}

#[derive(Debug, Args)]
pub struct InitArgs {
    /// Config file or preset name; model section only.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub variant: Option<ModelVariantArg>,
    /// Attach a classifier head with this many labels.
    #[arg(long)]
    pub labels: Option<usize>,
    #[arg(long, env = "INHIBITOR_SEED", default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModelVariantArg {
    Inhibitor,
    DotProduct,
}

impl From<ModelVariantArg> for AttentionVariant {
    fn from(v: ModelVariantArg) -> Self {
        match v {
            ModelVariantArg::Inhibitor => AttentionVariant::Inhibitor,
            ModelVariantArg::DotProduct => AttentionVariant::DotProduct,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PhaseArg {
    Layerwise,
    Full,
    Task,
}

impl PhaseArg {
    fn regime(self) -> Regime {
        match self {
            PhaseArg::Layerwise => Regime::Layerwise,
            PhaseArg::Full => Regime::FullLayer,
            PhaseArg::Task => Regime::TaskSpecific,
        }
    }
}

#[derive(Debug, Args)]
pub struct DistillArgs {
    #[arg(long, value_enum)]
    pub phase: PhaseArg,
    /// Config file or preset name (layerwise, fulllayer, taskkd, finetune).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Teacher checkpoint.
    #[arg(long)]
    pub teacher: Option<PathBuf>,
    /// Starting student checkpoint; defaults to a copy of the teacher with
    /// the config's attention variant.
    #[arg(long)]
    pub student: Option<PathBuf>,
    /// Training data: plain text (layerwise, full) or labeled TSV (task).
    /// Defaults to a seeded synthetic corpus.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Documents in the synthetic corpus when --data is absent.
    #[arg(long, default_value_t = 512)]
    pub synthetic_docs: usize,
    /// Overrides the config's max_steps.
    #[arg(long)]
    pub max_steps: Option<usize>,
    #[arg(long, env = "INHIBITOR_SEED", default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Starting checkpoint; defaults to a fresh model from the config.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Labeled TSV; defaults to the synthetic planted-signal task.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Held-out TSV; defaults to a seeded 20% split of the training data.
    #[arg(long)]
    pub heldout: Option<PathBuf>,
    #[arg(long, default_value_t = 1000)]
    pub synthetic_docs: usize,
    #[arg(long)]
    pub max_steps: Option<usize>,
    #[arg(long, env = "INHIBITOR_SEED", default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricArg {
    Accuracy,
    Mse,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Labeled TSV for accuracy, plain text for mse.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value = "accuracy")]
    pub metric: MetricArg,
    /// Reference model for the mse metric (final hidden states).
    #[arg(long)]
    pub reference: Option<PathBuf>,
    #[arg(long, default_value_t = 32)]
    pub seq_len: usize,
    /// Directory for metrics.json and manifest.json.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Shapes separated by `;`, each `n=..,d=..,dv=..` (or `nq`/`nk`).
    #[arg(long, default_value = DEFAULT_GRID)]
    pub grid: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Output directory of a previous run.
    #[arg(long)]
    pub run: PathBuf,
    /// Trailing window for the smoothed loss.
    #[arg(long, default_value_t = 100)]
    pub window: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DataKind {
    /// Labeled planted-signal classification task (TSV).
    Planted,
    /// Unlabeled random text, one document per line.
    Text,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long, value_enum)]
    pub kind: DataKind,
    #[arg(long, default_value_t = 1000)]
    pub n: usize,
    #[arg(long, default_value_t = 2)]
    pub classes: usize,
    /// Characters per document.
    #[arg(long)]
    pub length: Option<usize>,
    #[arg(long, env = "INHIBITOR_SEED", default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Self {
            code: 2,
            message: message.into(),
        }
    }

    fn runtime(message: impl Into<String>) -> Self {
        Self {
            code: 1,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = if matches!(e, Error::Config { .. }) { 2 } else { 1 };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

type CliResult<T = ()> = std::result::Result<T, Failure>;

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let raw: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&raw) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let argv: Vec<String> = raw.iter().skip(1).map(|a| a.to_string_lossy().into_owned()).collect();
    match dispatch(cli.command, &argv) {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}

fn dispatch(command: Command, argv: &[String]) -> CliResult {
    match command {
        Command::Gradcheck(a) => cmd_gradcheck(&a),
        Command::Init(a) => cmd_init(&a, argv),
        Command::Distill(a) => cmd_distill(&a, argv),
        Command::Finetune(a) => cmd_finetune(&a, argv),
        Command::Eval(a) => cmd_eval(&a, argv),
        Command::Bench(a) => cmd_bench(&a, argv),
        Command::Report(a) => cmd_report(&a),
        Command::GenData(a) => cmd_gen_data(&a),
    }
}

fn cmd_gradcheck(a: &GradcheckArgs) -> CliResult {
    let results = run_suite(a.seed, a.trials as usize, a.variant.variant())?;
    println!("{:<24} {:>9} {:>14}  status", "operation", "instances", "max_rel_error");
    for r in &results {
        println!(
            "{:<24} {:>9} {:>14.3e}  {}",
            r.name,
            r.instances,
            r.max_rel_error,
            if r.passed() { "ok" } else { "FAIL" }
        );
    }
    let failed = results.iter().filter(|r| !r.passed()).count();
    if failed > 0 {
        return Err(Failure::runtime(format!(
            "{failed} operation(s) exceeded relative error {TOLERANCE:e}"
        )));
    }
    println!("all {} operations within {TOLERANCE:e}", results.len());
    Ok(())
}

/// Loads the config (path or preset name) and its text for hashing.
fn read_config(path: Option<&Path>) -> CliResult<(RunConfig, String)> {
    let cfg = match path {
        Some(p) => load_config(p).map_err(|e| match e {
            Error::Io { .. } => Failure::usage(e.to_string()),
            other => Failure::usage(other.to_string()),
        })?,
        None => RunConfig::default(),
    };
    let text = cfg.to_text();
    Ok((cfg, text))
}

fn warn_scale(cfg: &RunConfig) {
    if cfg.exceeds_desk_scale() {
        eprintln!(
            "warning: model is {}-layer, d_model={}; runs at this scale need far more memory and time than a laptop provides",
            cfg.model.n_layers, cfg.model.d_model
        );
    }
}

/// The student shares the teacher's extents; variant, eta_init and dropout
/// come from the config.
fn adopt_extents(cfg: &mut RunConfig, from: &crate::encoder::EncoderConfig) {
    let m = &cfg.model;
    cfg.model = crate::encoder::EncoderConfig {
        attention_variant: m.attention_variant,
        eta_init: m.eta_init,
        dropout: m.dropout,
        attention_dropout: m.attention_dropout,
        ..from.clone()
    };
}

fn load_model(path: &Path, what: &str) -> CliResult<Checkpoint> {
    load_checkpoint(path).map_err(|e| Failure::runtime(format!("cannot load {what} {}: {e}", path.display())))
}

fn out_dir(path: &Path) -> CliResult<PathBuf> {
    create_out_dir(path).map_err(Failure::usage)
}

fn write_file(path: &Path, contents: &str) -> CliResult {
    fs::write(path, contents).map_err(|e| Failure::from(Error::io(path, e)))
}

fn write_json(path: &Path, value: &impl Serialize) -> CliResult {
    let text = serde_json::to_string_pretty(value).map_err(Error::from)?;
    write_file(path, &(text + "\n"))
}

fn cmd_init(a: &InitArgs, argv: &[String]) -> CliResult {
    let (mut cfg, text) = read_config(a.config.as_deref())?;
    if let Some(v) = a.variant {
        cfg.model.attention_variant = v.into();
    }
    warn_scale(&cfg);
    let model = ModelState::new(cfg.model.clone(), a.labels, a.seed)?;
    let dir = out_dir(&a.out)?;
    let mut manifest = RunManifest::start("init", argv, a.config.as_deref(), &text, a.seed, Vec::new(), &dir);
    save_checkpoint(&model, Some(&manifest.run_id), &dir.join(MODEL_FILE))?;
    manifest.finish();
    manifest.write(&dir)?;
    println!("wrote {} ({} scalars)", dir.join(MODEL_FILE).display(), model.num_scalars());
    Ok(())
}

fn text_dataset(path: Option<&Path>, docs: usize, length: usize, seed: u64) -> CliResult<Dataset> {
    let tok = Tokenizer::byte_level();
    match path {
        Some(p) => Ok(load_text(p, &tok).map_err(|e| Failure::runtime(e.to_string()))?),
        None => Ok(Dataset::new(
            random_text(docs, length, seed)
                .iter()
                .map(|t| crate::data::Example {
                    tokens: tok.encode(t),
                    label: None,
                })
                .collect(),
        )),
    }
}

fn labeled_dataset(path: Option<&Path>, docs: usize, task: &PlantedTask, seed: u64) -> CliResult<Dataset> {
    let tok = Tokenizer::byte_level();
    match path {
        Some(p) => Ok(load_tsv(p, &tok).map_err(|e| Failure::runtime(e.to_string()))?),
        None => Ok(Dataset::new(
            task.generate(docs, seed)?
                .into_iter()
                .map(|(l, t)| crate::data::Example {
                    tokens: tok.encode(&t),
                    label: Some(l),
                })
                .collect(),
        )),
    }
}

fn cmd_distill(a: &DistillArgs, argv: &[String]) -> CliResult {
    let regime = a.phase.regime();
    let teacher_path = a
        .teacher
        .as_deref()
        .ok_or_else(|| Failure::usage("--teacher is required for every distillation phase"))?;
    let (mut cfg, text) = read_config(a.config.as_deref())?;
    if let Some(r) = cfg.distill.regime {
        if r != regime {
            return Err(Failure::usage(format!(
                "config is for the {r} regime but --phase selects {regime}"
            )));
        }
    }
    if let Some(m) = a.max_steps {
        cfg.train.max_steps = m;
    }
    let teacher = load_model(teacher_path, "teacher")?;
    let mut parents: Vec<String> = teacher.run_id.iter().cloned().collect();
    let mut student = match &a.student {
        Some(p) => {
            let s = load_model(p, "student")?;
            parents.extend(s.run_id.iter().cloned());
            adopt_extents(&mut cfg, s.state.config());
            let mut st = s.state;
            st.set_dropout(cfg.model.dropout, cfg.model.attention_dropout)?;
            st
        }
        None => {
            adopt_extents(&mut cfg, teacher.state.config());
            init_student_from_teacher(&teacher.state, &cfg.model, cfg.model.attention_variant)?
        }
    };
    warn_scale(&cfg);
    if regime == Regime::Layerwise {
        if let Some(&l) = cfg.layer_schedule().iter().find(|&&l| l >= cfg.model.n_layers) {
            return Err(Failure::usage(format!(
                "layer_schedule names layer {l} but the student has {} layers",
                cfg.model.n_layers
            )));
        }
    }
    let dir = out_dir(&a.out)?;
    let mut manifest = RunManifest::start("distill", argv, a.config.as_deref(), &text, a.seed, parents, &dir);

    let mut log: Vec<LossRecord> = Vec::new();
    let metrics = match regime {
        Regime::Layerwise | Regime::FullLayer => {
            let length = cfg.train.seq_len.saturating_sub(1).max(1);
            let data = text_dataset(a.data.as_deref(), a.synthetic_docs, length, a.seed)?;
            let eval = text_dataset(None, 64, length, a.seed ^ 0xE7A1)?;
            if regime == Regime::Layerwise {
                let phases = run_layerwise(&teacher.state, &mut student, &data, &eval, &cfg, a.seed, &mut log)?;
                for p in &phases {
                    println!(
                        "layer {}: attention-output mse {:.4e} -> {:.4e} over {} steps (audit {})",
                        p.layer,
                        p.initial_loss,
                        p.final_loss,
                        p.steps,
                        if p.audit_ok() { "ok" } else { "MISMATCH" }
                    );
                }
                json!({ "regime": regime, "phases": phases })
            } else {
                let s = run_full_layer(&teacher.state, &mut student, &data, &eval, &cfg, a.seed, &mut log)?;
                println!(
                    "hidden-state mse {:.4e} -> {:.4e} over {} steps",
                    s.initial_loss, s.final_loss, s.steps
                );
                json!({ "regime": regime, "summary": s })
            }
        }
        Regime::TaskSpecific => {
            let task = PlantedTask {
                num_classes: teacher.state.num_labels().unwrap_or(2).min(6),
                ..Default::default()
            };
            let data = labeled_dataset(a.data.as_deref(), a.synthetic_docs, &task, a.seed)?;
            let (train, heldout) = data.split(0.2, a.seed)?;
            let s = run_task_specific(&teacher.state, &mut student, &train, &heldout, &cfg, a.seed, &mut log)?;
            let acc = accuracy(&student, &heldout, cfg.train.seq_len)?;
            println!(
                "task loss {:.4e} -> {:.4e} over {} steps; held-out accuracy {acc:.4}",
                s.initial_loss, s.final_loss, s.steps
            );
            json!({ "regime": regime, "summary": s, "heldout_accuracy": acc })
        }
        Regime::Finetune => unreachable!("not a distillation phase"),
    };
    write_file(&dir.join(LOSSES_FILE), &to_jsonl(&log)?)?;
    write_json(&dir.join(METRICS_FILE), &metrics)?;
    save_checkpoint(&student, Some(&manifest.run_id), &dir.join(MODEL_FILE))?;
    manifest.finish();
    manifest.write(&dir)?;
    println!("run {} written to {}", manifest.run_id, dir.display());
    Ok(())
}

fn cmd_finetune(a: &FinetuneArgs, argv: &[String]) -> CliResult {
    let (mut cfg, text) = read_config(a.config.as_deref())?;
    if let Some(m) = a.max_steps {
        cfg.train.max_steps = m;
    }
    let task = PlantedTask::default();
    let data = labeled_dataset(a.data.as_deref(), a.synthetic_docs, &task, a.seed)?;
    let (train, heldout) = match &a.heldout {
        Some(p) => (data, labeled_dataset(Some(p), 0, &task, a.seed)?),
        None => data.split(0.2, a.seed)?,
    };
    let labels = train
        .num_labels()
        .max(heldout.num_labels())
        .ok_or_else(|| Failure::runtime("training data must be labeled"))?;
    let mut parents = Vec::new();
    let mut model = match &a.model {
        Some(p) => {
            let c = load_model(p, "model")?;
            parents.extend(c.run_id.iter().cloned());
            adopt_extents(&mut cfg, c.state.config());
            let mut m = c.state;
            m.set_dropout(cfg.model.dropout, cfg.model.attention_dropout)?;
            if m.num_labels() != Some(labels) {
                m = m.with_classifier(labels, a.seed)?;
            }
            m
        }
        None => ModelState::new(cfg.model.clone(), Some(labels), a.seed)?,
    };
    warn_scale(&cfg);
    let dir = out_dir(&a.out)?;
    let mut manifest = RunManifest::start("finetune", argv, a.config.as_deref(), &text, a.seed, parents, &dir);
    let mut log = Vec::new();
    let report = finetune(&mut model, &train, &heldout, &cfg, a.seed, &mut log)?;
    for (e, acc) in report.epoch_accuracy.iter().enumerate() {
        println!("epoch {}: held-out accuracy {acc:.4}", e + 1);
    }
    write_file(&dir.join(LOSSES_FILE), &to_jsonl(&log)?)?;
    write_json(
        &dir.join(METRICS_FILE),
        &json!({ "regime": Regime::Finetune, "variant": model.variant(), "report": report }),
    )?;
    save_checkpoint(&model, Some(&manifest.run_id), &dir.join(MODEL_FILE))?;
    manifest.finish();
    manifest.write(&dir)?;
    println!("run {} written to {}", manifest.run_id, dir.display());
    Ok(())
}

fn cmd_eval(a: &EvalArgs, argv: &[String]) -> CliResult {
    let model = load_model(&a.model, "model")?;
    let tok = Tokenizer::byte_level();
    let mut parents: Vec<String> = model.run_id.iter().cloned().collect();
    let value = match a.metric {
        MetricArg::Accuracy => {
            let data = load_tsv(&a.data, &tok).map_err(|e| Failure::runtime(e.to_string()))?;
            accuracy(&model.state, &data, a.seq_len)?
        }
        MetricArg::Mse => {
            let reference = a
                .reference
                .as_deref()
                .ok_or_else(|| Failure::usage("--metric mse needs --reference"))?;
            let reference = load_model(reference, "reference model")?;
            parents.extend(reference.run_id.iter().cloned());
            let data = load_text(&a.data, &tok).map_err(|e| Failure::runtime(e.to_string()))?;
            hidden_mse(&reference.state, &model.state, &data, a.seq_len)?
        }
    };
    let metric = match a.metric {
        MetricArg::Accuracy => "accuracy",
        MetricArg::Mse => "mse",
    };
    println!("{metric}: {value}");
    if let Some(out) = &a.out {
        let dir = out_dir(out)?;
        let mut manifest = RunManifest::start("eval", argv, None, "", 0, parents, &dir);
        write_json(
            &dir.join(METRICS_FILE),
            &json!({ "metric": metric, "value": value, "variant": model.state.variant() }),
        )?;
        manifest.finish();
        manifest.write(&dir)?;
    }
    Ok(())
}

fn cmd_bench(a: &BenchArgs, argv: &[String]) -> CliResult {
    let grid = parse_grid(&a.grid).map_err(|e| Failure::usage(format!("bad --grid: {e}")))?;
    let report = compare_report(&grid)?;
    let dir = out_dir(&a.out)?;
    let mut manifest = RunManifest::start("bench", argv, None, &a.grid, 0, Vec::new(), &dir);
    write_file(&dir.join(REPORT_FILE), &report.to_csv())?;
    let table = report.to_table();
    write_file(&dir.join("report.txt"), &table)?;
    print!("{table}");
    manifest.finish();
    manifest.write(&dir)?;
    Ok(())
}

fn cmd_report(a: &ReportArgs) -> CliResult {
    if a.window == 0 {
        return Err(Failure::usage("--window must be >= 1"));
    }
    let path = a.run.join(LOSSES_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Failure::runtime(format!("cannot read {}: {e}", path.display())))?;
    let records = from_jsonl(&text)?;
    if let Ok(m) = RunManifest::read(&a.run) {
        println!("run {} ({}), seed {}", m.run_id, m.command, m.seed);
    }
    type Key = (String, Option<usize>);
    let mut groups: Vec<(Key, Vec<f64>)> = Vec::new();
    for r in &records {
        let key = (r.phase.clone(), r.layer);
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, v)) => v.push(r.loss),
            None => groups.push((key, vec![r.loss])),
        }
    }
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<14} {:>5} {:>7} {:>13} {:>13} {:>13}",
        "phase", "layer", "steps", "first_loss", "last_loss", "smoothed_end"
    );
    for ((phase, layer), losses) in &groups {
        let tail = &losses[losses.len().saturating_sub(a.window)..];
        let smoothed = tail.iter().sum::<f64>() / tail.len() as f64;
        let _ = writeln!(
            out,
            "{:<14} {:>5} {:>7} {:>13.4e} {:>13.4e} {:>13.4e}",
            phase,
            layer.map_or("-".to_string(), |l| l.to_string()),
            losses.len(),
            losses[0],
            losses[losses.len() - 1],
            smoothed
        );
    }
    print!("{out}");
    Ok(())
}

fn cmd_gen_data(a: &GenDataArgs) -> CliResult {
    if a.out.exists() {
        return Err(Failure::usage(format!("{} already exists", a.out.display())));
    }
    match a.kind {
        DataKind::Planted => {
            let task = PlantedTask {
                num_classes: a.classes,
                length: a.length.unwrap_or(PlantedTask::default().length),
                ..Default::default()
            };
            let rows = task.generate(a.n, a.seed).map_err(|e| Failure::usage(e.to_string()))?;
            write_tsv(&a.out, &rows)?;
        }
        DataKind::Text => write_text(&a.out, &random_text(a.n, a.length.unwrap_or(31), a.seed))?,
    }
    println!("wrote {} documents to {}", a.n, a.out.display());
    Ok(())
}
