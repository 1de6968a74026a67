//! Run configuration files.
//!
//! Grammar, one item per line:
//!
//! ```text
//! # comment            (also allowed after a value)
//! [section]            model | train | distill
//! key = value
//! ```
//!
//! Unknown sections or keys, duplicate keys and unparsable values are
//! errors reporting the line number. Missing keys keep their defaults:
//!
//! | section   | key                           | default                      |
//! |-----------|-------------------------------|------------------------------|
//! | model     | n_layers, d_model, d_ffn      | 2, 32, 64                    |
//! | model     | n_heads, d_head               | 4, 8                         |
//! | model     | vocab_size, max_seq_len       | 256, 64                      |
//! | model     | dropout, attention_dropout    | 0.1, 0.1                     |
//! | model     | attention                     | inhibitor                    |
//! | model     | eta_init                      | 1                            |
//! | train     | learning_rate                 | 5e-4 (peak of the schedule)  |
//! | train     | warmup_ratio                  | 0                            |
//! | train     | batch_size                    | 16                           |
//! | train     | gradient_accumulation_steps   | 1 (0 also means 1)           |
//! | train     | epochs                        | 1                            |
//! | train     | lr_decay                      | linear (or cosine)           |
//! | train     | adam_epsilon, adam_beta1/2    | 1e-8, 0.9, 0.999             |
//! | train     | weight_decay                  | 0.01 (matrices only)         |
//! | train     | seq_len                       | 32                           |
//! | train     | max_steps                     | 0 (no cap)                   |
//! | distill   | regime                        | unset                        |
//! | distill   | layer_schedule                | all layers, bottom-up        |
//! | distill   | temperature                   | 4                            |
//! | distill   | distill_weight, hidden_weight | 0.5, 0.5                     |
//! | distill   | layer_mapping                 | auto                         |
//!
//! `layer_schedule` is a comma-separated list of layer indices.
//! `layer_mapping` is `auto` or a comma-separated list whose `s`-th entry is
//! the teacher layer aligned with student layer `s`.

use std::collections::HashSet;
use std::fmt;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attention::AttentionVariant;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::optim::{AdamWConfig, Decay, LrSchedule};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Layerwise,
    FullLayer,
    TaskSpecific,
    Finetune,
}

impl Regime {
    pub fn as_str(self) -> &'static str {
        match self {
            Regime::Layerwise => "layerwise",
            Regime::FullLayer => "full_layer",
            Regime::TaskSpecific => "task_specific",
            Regime::Finetune => "finetune",
        }
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "layerwise" => Ok(Regime::Layerwise),
            "full_layer" | "full" => Ok(Regime::FullLayer),
            "task_specific" | "task" => Ok(Regime::TaskSpecific),
            "finetune" => Ok(Regime::Finetune),
            other => Err(Error::contract(format!(
                "unknown regime `{other}` (expected layerwise, full_layer, task_specific or finetune)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub warmup_ratio: f64,
    pub batch_size: usize,
    /// As written; 0 and 1 both mean one micro-batch per step.
    pub gradient_accumulation_steps: usize,
    pub epochs: usize,
    pub lr_decay: Decay,
    pub adam: AdamWConfig,
    pub seq_len: usize,
    /// Cap on optimizer steps per phase; 0 disables the cap.
    pub max_steps: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-4,
            warmup_ratio: 0.0,
            batch_size: 16,
            gradient_accumulation_steps: 1,
            epochs: 1,
            lr_decay: Decay::Linear,
            adam: AdamWConfig::default(),
            seq_len: 32,
            max_steps: 0,
        }
    }
}

impl TrainConfig {
    pub fn accumulation(&self) -> usize {
        self.gradient_accumulation_steps.max(1)
    }

    pub fn schedule(&self, total_steps: u64) -> Result<LrSchedule> {
        LrSchedule::new(self.learning_rate, self.warmup_ratio, total_steps.max(1), self.lr_decay)
    }

    /// Applied optimizer steps for `micro_batches` micro-batches per epoch,
    /// after the `max_steps` cap.
    pub fn total_steps(&self, micro_batches: usize, epochs: usize) -> usize {
        let per_epoch = micro_batches.div_ceil(self.accumulation());
        let total = per_epoch * epochs;
        if self.max_steps > 0 {
            total.min(self.max_steps)
        } else {
            total
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 || self.seq_len == 0 {
            return Err(Error::contract("batch_size, epochs and seq_len must be >= 1"));
        }
        self.adam.validate()?;
        LrSchedule::new(self.learning_rate, self.warmup_ratio, 1, self.lr_decay).map(|_| ())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    pub regime: Option<Regime>,
    /// Empty means every layer, bottom-up.
    pub layer_schedule: Vec<usize>,
    pub temperature: f64,
    pub distill_weight: f64,
    pub hidden_weight: f64,
    /// `None` means the automatic mapping.
    pub layer_mapping: Option<Vec<usize>>,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            regime: None,
            layer_schedule: Vec::new(),
            temperature: 4.0,
            distill_weight: 0.5,
            hidden_weight: 0.5,
            layer_mapping: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: EncoderConfig,
    pub train: TrainConfig,
    pub distill: DistillConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: EncoderConfig::desk(AttentionVariant::Inhibitor),
            train: TrainConfig::default(),
            distill: DistillConfig::default(),
        }
    }
}

const SECTIONS: [&str; 3] = ["model", "train", "distill"];
const MODEL_KEYS: [&str; 11] = [
    "n_layers",
    "d_model",
    "d_ffn",
    "n_heads",
    "d_head",
    "vocab_size",
    "max_seq_len",
    "dropout",
    "attention_dropout",
    "attention",
    "eta_init",
];
const TRAIN_KEYS: [&str; 12] = [
    "learning_rate",
    "warmup_ratio",
    "batch_size",
    "gradient_accumulation_steps",
    "epochs",
    "lr_decay",
    "adam_epsilon",
    "adam_beta1",
    "adam_beta2",
    "weight_decay",
    "seq_len",
    "max_steps",
];
const DISTILL_KEYS: [&str; 6] = [
    "regime",
    "layer_schedule",
    "temperature",
    "distill_weight",
    "hidden_weight",
    "layer_mapping",
];

fn keys_of(section: &str) -> &'static [&'static str] {
    match section {
        "model" => &MODEL_KEYS,
        "train" => &TRAIN_KEYS,
        _ => &DISTILL_KEYS,
    }
}

fn nearest<'a>(word: &str, candidates: impl IntoIterator<Item = &'a str>) -> Option<&'a str> {
    candidates
        .into_iter()
        .map(|c| (strsim::levenshtein(word, c), c))
        .min()
        .map(|(_, c)| c)
}

fn config_err(line: usize, message: impl Into<String>) -> Error {
    Error::Config {
        line,
        message: message.into(),
    }
}

fn parse_val<T: FromStr>(key: &str, value: &str, line: usize, what: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| config_err(line, format!("key `{key}`: expected {what}, got `{value}`")))
}

fn parse_list(key: &str, value: &str, line: usize) -> Result<Vec<usize>> {
    if value.is_empty() {
        return Ok(Vec::new());
    }
    value
        .split(',')
        .map(|v| parse_val(key, v.trim(), line, "a comma-separated list of integers"))
        .collect()
}

fn join(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut section: Option<&'static str> = None;
        let mut seen = HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            if let Some(name) = content.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
                let name = name.trim();
                section = Some(SECTIONS.iter().copied().find(|s| *s == name).ok_or_else(|| {
                    let hint = nearest(name, SECTIONS).map(|s| format!("; did you mean `{s}`?")).unwrap_or_default();
                    config_err(line, format!("unknown section `[{name}]`{hint}"))
                })?);
                continue;
            }
            let (key, value) = content
                .split_once('=')
                .ok_or_else(|| config_err(line, format!("expected `key = value`, got `{content}`")))?;
            let (key, value) = (key.trim(), value.trim());
            let sec = section.ok_or_else(|| config_err(line, format!("key `{key}` appears before any [section]")))?;
            if !keys_of(sec).contains(&key) {
                let hint = nearest(key, keys_of(sec).iter().copied())
                    .map(|k| format!("; did you mean `{k}`?"))
                    .unwrap_or_default();
                return Err(config_err(line, format!("unknown key `{key}` in [{sec}]{hint}")));
            }
            if !seen.insert((sec, key)) {
                return Err(config_err(line, format!("duplicate key `{key}` in [{sec}]")));
            }
            cfg.set(sec, key, value, line)?;
        }
        cfg.validate().map_err(|e| config_err(0, e.to_string()))?;
        Ok(cfg)
    }

    fn set(&mut self, section: &str, key: &str, v: &str, line: usize) -> Result<()> {
        const INT: &str = "a non-negative integer";
        const REAL: &str = "a real number";
        let m = &mut self.model;
        let t = &mut self.train;
        let d = &mut self.distill;
        match (section, key) {
            ("model", "n_layers") => m.n_layers = parse_val(key, v, line, INT)?,
            ("model", "d_model") => m.d_model = parse_val(key, v, line, INT)?,
            ("model", "d_ffn") => m.d_ffn = parse_val(key, v, line, INT)?,
            ("model", "n_heads") => m.n_heads = parse_val(key, v, line, INT)?,
            ("model", "d_head") => m.d_head = parse_val(key, v, line, INT)?,
            ("model", "vocab_size") => m.vocab_size = parse_val(key, v, line, INT)?,
            ("model", "max_seq_len") => m.max_seq_len = parse_val(key, v, line, INT)?,
            ("model", "dropout") => m.dropout = parse_val(key, v, line, REAL)?,
            ("model", "attention_dropout") => m.attention_dropout = parse_val(key, v, line, REAL)?,
            ("model", "attention") => m.attention_variant = parse_val(key, v, line, "inhibitor or dot_product")?,
            ("model", "eta_init") => m.eta_init = parse_val(key, v, line, REAL)?,
            ("train", "learning_rate") => t.learning_rate = parse_val(key, v, line, REAL)?,
            ("train", "warmup_ratio") => t.warmup_ratio = parse_val(key, v, line, REAL)?,
            ("train", "batch_size") => t.batch_size = parse_val(key, v, line, INT)?,
            ("train", "gradient_accumulation_steps") => {
                t.gradient_accumulation_steps = parse_val(key, v, line, INT)?
            }
            ("train", "epochs") => t.epochs = parse_val(key, v, line, INT)?,
            ("train", "lr_decay") => t.lr_decay = parse_val(key, v, line, "cosine or linear")?,
            ("train", "adam_epsilon") => t.adam.eps = parse_val(key, v, line, REAL)?,
            ("train", "adam_beta1") => t.adam.beta1 = parse_val(key, v, line, REAL)?,
            ("train", "adam_beta2") => t.adam.beta2 = parse_val(key, v, line, REAL)?,
            ("train", "weight_decay") => t.adam.weight_decay = parse_val(key, v, line, REAL)?,
            ("train", "seq_len") => t.seq_len = parse_val(key, v, line, INT)?,
            ("train", "max_steps") => t.max_steps = parse_val(key, v, line, INT)?,
            ("distill", "regime") => d.regime = Some(parse_val(key, v, line, "a regime name")?),
            ("distill", "layer_schedule") => d.layer_schedule = parse_list(key, v, line)?,
            ("distill", "temperature") => d.temperature = parse_val(key, v, line, REAL)?,
            ("distill", "distill_weight") => d.distill_weight = parse_val(key, v, line, REAL)?,
            ("distill", "hidden_weight") => d.hidden_weight = parse_val(key, v, line, REAL)?,
            ("distill", "layer_mapping") => {
                d.layer_mapping = if v == "auto" { None } else { Some(parse_list(key, v, line)?) }
            }
            _ => return Err(Error::Internal(format!("unhandled key {section}.{key}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        let d = &self.distill;
        if !(d.temperature > 0.0) {
            return Err(Error::contract(format!("temperature must be > 0, got {}", d.temperature)));
        }
        for (name, w) in [("distill_weight", d.distill_weight), ("hidden_weight", d.hidden_weight)] {
            if !(0.0..=1.0).contains(&w) {
                return Err(Error::contract(format!("{name} must lie in [0, 1], got {w}")));
            }
        }
        if d.regime == Some(Regime::TaskSpecific) && (d.distill_weight + d.hidden_weight - 1.0).abs() > 1e-12 {
            return Err(Error::contract("distill_weight + hidden_weight must equal 1"));
        }
        if !d.layer_schedule.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::contract("layer_schedule must be strictly increasing"));
        }
        if let Some(&l) = d.layer_schedule.iter().find(|&&l| l >= self.model.n_layers) {
            return Err(Error::contract(format!(
                "layer_schedule entry {l} outside a {}-layer model",
                self.model.n_layers
            )));
        }
        Ok(())
    }

    /// Layers trained by the layerwise regime, in order.
    pub fn layer_schedule(&self) -> Vec<usize> {
        if self.distill.layer_schedule.is_empty() {
            (0..self.model.n_layers).collect()
        } else {
            self.distill.layer_schedule.clone()
        }
    }

    /// Canonical text form; `parse(to_text(c)) == c`.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        let d = &self.distill;
        let mut s = String::new();
        let _ = writeln!(s, "[model]");
        let _ = writeln!(s, "n_layers = {}", m.n_layers);
        let _ = writeln!(s, "d_model = {}", m.d_model);
        let _ = writeln!(s, "d_ffn = {}", m.d_ffn);
        let _ = writeln!(s, "n_heads = {}", m.n_heads);
        let _ = writeln!(s, "d_head = {}", m.d_head);
        let _ = writeln!(s, "vocab_size = {}", m.vocab_size);
        let _ = writeln!(s, "max_seq_len = {}", m.max_seq_len);
        let _ = writeln!(s, "dropout = {}", m.dropout);
        let _ = writeln!(s, "attention_dropout = {}", m.attention_dropout);
        let _ = writeln!(s, "attention = {}", m.attention_variant);
        let _ = writeln!(s, "eta_init = {}", m.eta_init);
        let _ = writeln!(s, "\n[train]");
        let _ = writeln!(s, "learning_rate = {:e}", t.learning_rate);
        let _ = writeln!(s, "warmup_ratio = {}", t.warmup_ratio);
        let _ = writeln!(s, "batch_size = {}", t.batch_size);
        let _ = writeln!(s, "gradient_accumulation_steps = {}", t.gradient_accumulation_steps);
        let _ = writeln!(s, "epochs = {}", t.epochs);
        let _ = writeln!(s, "lr_decay = {}", t.lr_decay);
        let _ = writeln!(s, "adam_epsilon = {:e}", t.adam.eps);
        let _ = writeln!(s, "adam_beta1 = {}", t.adam.beta1);
        let _ = writeln!(s, "adam_beta2 = {}", t.adam.beta2);
        let _ = writeln!(s, "weight_decay = {}", t.adam.weight_decay);
        let _ = writeln!(s, "seq_len = {}", t.seq_len);
        let _ = writeln!(s, "max_steps = {}", t.max_steps);
        let _ = writeln!(s, "\n[distill]");
        if let Some(r) = d.regime {
            let _ = writeln!(s, "regime = {r}");
        }
        let _ = writeln!(s, "layer_schedule = {}", join(&d.layer_schedule));
        let _ = writeln!(s, "temperature = {}", d.temperature);
        let _ = writeln!(s, "distill_weight = {}", d.distill_weight);
        let _ = writeln!(s, "hidden_weight = {}", d.hidden_weight);
        match &d.layer_mapping {
            Some(map) => {
                let _ = writeln!(s, "layer_mapping = {}", join(map));
            }
            None => {
                let _ = writeln!(s, "layer_mapping = auto");
            }
        }
        s
    }

    /// Hyperparameter table in the layout of the published tables for this
    /// config's regime (row label, value).
    pub fn hyperparameter_table(&self) -> Vec<(&'static str, String)> {
        let m = &self.model;
        let t = &self.train;
        let d = &self.distill;
        let regime = d.regime.unwrap_or(Regime::Finetune);
        let warmup = if t.warmup_ratio == 0.0 {
            "0".to_string()
        } else {
            format!("{}%", (t.warmup_ratio * 1e6).round() / 1e4)
        };
        let mut rows = vec![
            ("Number of Layers", m.n_layers.to_string()),
            ("Hidden size", m.d_model.to_string()),
            ("FFN inner hidden size", m.d_ffn.to_string()),
            ("Attention heads", m.n_heads.to_string()),
            ("Attention head size", m.d_head.to_string()),
            ("Dropout", m.dropout.to_string()),
            ("Attention Dropout", m.attention_dropout.to_string()),
            ("Warmup Ratio", warmup),
            ("Peak Learning Rate", format!("{:e}", t.learning_rate)),
            ("Batch Size", t.batch_size.to_string()),
        ];
        if regime != Regime::Finetune {
            rows.push(("Gradient accumulation steps", t.gradient_accumulation_steps.to_string()));
        }
        let decay = match t.lr_decay {
            Decay::Cosine => "Cosine",
            Decay::Linear => "Linear",
        };
        rows.extend([
            ("Epochs", t.epochs.to_string()),
            ("Learning Rate Decay", decay.to_string()),
            ("Adam ε", format!("{:e}", t.adam.eps)),
            ("Adam β₁", t.adam.beta1.to_string()),
            ("Adam β₂", t.adam.beta2.to_string()),
        ]);
        if regime == Regime::TaskSpecific {
            rows.extend([
                ("Temperature", d.temperature.to_string()),
                ("Distillation loss weight", d.distill_weight.to_string()),
                ("Hidden state loss weight", d.hidden_weight.to_string()),
            ]);
        }
        rows
    }

    /// True when the model is larger than laptop-friendly sizes.
    pub fn exceeds_desk_scale(&self) -> bool {
        let m = &self.model;
        m.d_model > 256 || m.n_layers > 4 || m.vocab_size > 4096 || m.d_ffn > 1024
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Layerwise,
    FullLayer,
    TaskKd,
    Finetune,
}

impl Preset {
    pub const ALL: [Preset; 4] = [Preset::Layerwise, Preset::FullLayer, Preset::TaskKd, Preset::Finetune];

    pub fn file_name(self) -> &'static str {
        match self {
            Preset::Layerwise => "layerwise.cfg",
            Preset::FullLayer => "fulllayer.cfg",
            Preset::TaskKd => "taskkd.cfg",
            Preset::Finetune => "finetune.cfg",
        }
    }

    pub fn text(self) -> &'static str {
        match self {
            Preset::Layerwise => include_str!("../presets/layerwise.cfg"),
            Preset::FullLayer => include_str!("../presets/fulllayer.cfg"),
            Preset::TaskKd => include_str!("../presets/taskkd.cfg"),
            Preset::Finetune => include_str!("../presets/finetune.cfg"),
        }
    }

    /// Accepts the file name with or without `.cfg`, plus the aliases
    /// `full`, `full_layer`, `task`, `task_specific`.
    pub fn from_name(name: &str) -> Option<Preset> {
        let stem = name.strip_suffix(".cfg").unwrap_or(name);
        match stem {
            "layerwise" => Some(Preset::Layerwise),
            "fulllayer" | "full_layer" | "full" => Some(Preset::FullLayer),
            "taskkd" | "task_specific" | "task" => Some(Preset::TaskKd),
            "finetune" => Some(Preset::Finetune),
            _ => None,
        }
    }

    pub fn load(self) -> RunConfig {
        RunConfig::parse(self.text()).expect("shipped presets parse")
    }
}

/// Loads a config file; a bare preset name that is not an existing path
/// resolves to the shipped preset.
pub fn load_config(path: &Path) -> Result<RunConfig> {
    if !path.exists() {
        if let Some(p) = path.to_str().and_then(Preset::from_name) {
            return Ok(p.load());
        }
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    RunConfig::parse(&text)
}
