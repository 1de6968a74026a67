use std::collections::HashMap;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{EncoderConfig, INIT_STD};
use crate::attention::{AttentionVariant, Head, HeadParams, INIT_DELTA, INIT_GAMMA};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T> {
    pub attn: HeadParams<T>,
    pub attn_ln_scale: T,
    pub attn_ln_bias: T,
    pub ffn_w1: T,
    pub ffn_b1: T,
    pub ffn_w2: T,
    pub ffn_b2: T,
    pub out_ln_scale: T,
    pub out_ln_bias: T,
}

/// First-token pooling head: `tanh(h₀·W_pre + b_pre)·W_out + b_out`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierParams<T> {
    pub pre_w: T,
    pub pre_b: T,
    pub out_w: T,
    pub out_b: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams<T> {
    pub token_emb: T,
    pub position_emb: T,
    pub emb_ln_scale: T,
    pub emb_ln_bias: T,
    pub layers: Vec<LayerParams<T>>,
    pub classifier: Option<ClassifierParams<T>>,
}

impl<T> LayerParams<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> LayerParams<U> {
        LayerParams {
            attn: self.attn.map(f),
            attn_ln_scale: f(&self.attn_ln_scale),
            attn_ln_bias: f(&self.attn_ln_bias),
            ffn_w1: f(&self.ffn_w1),
            ffn_b1: f(&self.ffn_b1),
            ffn_w2: f(&self.ffn_w2),
            ffn_b2: f(&self.ffn_b2),
            out_ln_scale: f(&self.out_ln_scale),
            out_ln_bias: f(&self.out_ln_bias),
        }
    }
}

impl<T> ClassifierParams<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> ClassifierParams<U> {
        ClassifierParams {
            pre_w: f(&self.pre_w),
            pre_b: f(&self.pre_b),
            out_w: f(&self.out_w),
            out_b: f(&self.out_b),
        }
    }
}

impl<T> EncoderParams<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> EncoderParams<U> {
        EncoderParams {
            token_emb: f(&self.token_emb),
            position_emb: f(&self.position_emb),
            emb_ln_scale: f(&self.emb_ln_scale),
            emb_ln_bias: f(&self.emb_ln_bias),
            layers: self.layers.iter().map(|l| l.map(f)).collect(),
            classifier: self.classifier.as_ref().map(|c| c.map(f)),
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum Init {
    Normal,
    Zeros,
    Ones,
    Const(f64),
}

#[derive(Debug, Clone)]
struct ParamSpec {
    name: String,
    shape: Vec<usize>,
    init: Init,
}

struct LayoutBuilder {
    specs: Vec<ParamSpec>,
}

impl LayoutBuilder {
    fn add(&mut self, name: String, shape: &[usize], init: Init) -> usize {
        self.specs.push(ParamSpec {
            name,
            shape: shape.to_vec(),
            init,
        });
        self.specs.len() - 1
    }
}

/// Canonical parameter order and names for a config. Indices in the returned
/// tree point into the spec list.
fn build_layout(config: &EncoderConfig, num_labels: Option<usize>) -> (EncoderParams<usize>, Vec<ParamSpec>) {
    let mut b = LayoutBuilder { specs: Vec::new() };
    let d = config.d_model;
    let token_emb = b.add("embeddings.token".into(), &[config.vocab_size, d], Init::Normal);
    let position_emb = b.add("embeddings.position".into(), &[config.max_seq_len, d], Init::Normal);
    let emb_ln_scale = b.add("embeddings.ln.scale".into(), &[d], Init::Ones);
    let emb_ln_bias = b.add("embeddings.ln.bias".into(), &[d], Init::Zeros);
    let mut layers = Vec::with_capacity(config.n_layers);
    for l in 0..config.n_layers {
        let p = |s: &str| format!("layer.{l}.{s}");
        let heads = (0..config.n_heads)
            .map(|h| {
                let hp = |s: &str| format!("layer.{l}.attn.head.{h}.{s}");
                Head {
                    w_q: b.add(hp("w_q"), &[d, config.d_head], Init::Normal),
                    w_k: b.add(hp("w_k"), &[d, config.d_head], Init::Normal),
                    w_v: b.add(hp("w_v"), &[d, config.d_head], Init::Normal),
                    gamma: b.add(hp("gamma"), &[1], Init::Const(INIT_GAMMA)),
                    eta: b.add(hp("eta"), &[1], Init::Const(config.eta_init)),
                    delta: b.add(hp("delta"), &[1], Init::Const(INIT_DELTA)),
                }
            })
            .collect();
        let attn = HeadParams {
            heads,
            w_o: b.add(p("attn.w_o"), &[config.n_heads * config.d_head, d], Init::Normal),
            b_o: b.add(p("attn.b_o"), &[d], Init::Zeros),
        };
        layers.push(LayerParams {
            attn,
            attn_ln_scale: b.add(p("attn_ln.scale"), &[d], Init::Ones),
            attn_ln_bias: b.add(p("attn_ln.bias"), &[d], Init::Zeros),
            ffn_w1: b.add(p("ffn.w1"), &[d, config.d_ffn], Init::Normal),
            ffn_b1: b.add(p("ffn.b1"), &[config.d_ffn], Init::Zeros),
            ffn_w2: b.add(p("ffn.w2"), &[config.d_ffn, d], Init::Normal),
            ffn_b2: b.add(p("ffn.b2"), &[d], Init::Zeros),
            out_ln_scale: b.add(p("out_ln.scale"), &[d], Init::Ones),
            out_ln_bias: b.add(p("out_ln.bias"), &[d], Init::Zeros),
        });
    }
    let classifier = num_labels.map(|n| ClassifierParams {
        pre_w: b.add("classifier.pre.w".into(), &[d, d], Init::Normal),
        pre_b: b.add("classifier.pre.b".into(), &[d], Init::Zeros),
        out_w: b.add("classifier.out.w".into(), &[d, n], Init::Normal),
        out_b: b.add("classifier.out.b".into(), &[n], Init::Zeros),
    });
    let tree = EncoderParams {
        token_emb,
        position_emb,
        emb_ln_scale,
        emb_ln_bias,
        layers,
        classifier,
    };
    (tree, b.specs)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Arc<Tensor>,
    /// Gates optimizer updates only; forward math ignores it.
    pub trainable: bool,
}

impl Param {
    /// Matrices take weight decay; vectors (biases, layer-norm) and the
    /// per-head scalars do not.
    pub fn decays(&self) -> bool {
        self.value.rank() == 2
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainableSelector {
    /// Query/key/value projections of one layer, plus that layer's γ, η, δ
    /// for the inhibitor variant.
    QkvOfLayer(usize),
    All,
    ClassifierOnly,
}

/// Full learnable state of an encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    config: EncoderConfig,
    num_labels: Option<usize>,
    params: Vec<Param>,
    layout: EncoderParams<usize>,
    by_name: HashMap<String, usize>,
}

impl ModelState {
    /// Seeded random initialization: matrices `N(0, 0.02²)`, biases 0,
    /// layer-norm scales 1, `γ = 1`, `η = eta_init`, `δ = 0`.
    pub fn new(config: EncoderConfig, num_labels: Option<usize>, seed: u64) -> Result<Self> {
        config.validate()?;
        if num_labels == Some(0) {
            return Err(Error::contract("classifier needs at least one label"));
        }
        let (layout, specs) = build_layout(&config, num_labels);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = specs
            .into_iter()
            .map(|s| {
                let value = match s.init {
                    Init::Normal => Tensor::randn(&s.shape, INIT_STD, &mut rng),
                    Init::Zeros => Tensor::zeros(&s.shape),
                    Init::Ones => Tensor::filled(&s.shape, 1.0),
                    Init::Const(c) => Tensor::filled(&s.shape, c),
                };
                Param {
                    name: s.name,
                    value: Arc::new(value),
                    trainable: true,
                }
            })
            .collect();
        Ok(Self::assemble(config, num_labels, params, layout))
    }

    /// Rebuilds a state from named tensors, checking names, order and shapes
    /// against the layout implied by `config`.
    pub fn from_named(
        config: EncoderConfig,
        num_labels: Option<usize>,
        named: Vec<(String, Tensor, bool)>,
    ) -> Result<Self> {
        config.validate()?;
        let (layout, specs) = build_layout(&config, num_labels);
        if named.len() != specs.len() {
            return Err(Error::contract(format!(
                "expected {} tensors for this config, got {}",
                specs.len(),
                named.len()
            )));
        }
        let params = specs
            .iter()
            .zip(named)
            .map(|(spec, (name, value, trainable))| {
                if spec.name != name {
                    return Err(Error::contract(format!("expected tensor `{}`, found `{name}`", spec.name)));
                }
                if spec.shape != value.shape() {
                    return Err(Error::dim("ModelState::from_named", &spec.shape, value.shape()));
                }
                Ok(Param {
                    name,
                    value: Arc::new(value),
                    trainable,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self::assemble(config, num_labels, params, layout))
    }

    fn assemble(
        config: EncoderConfig,
        num_labels: Option<usize>,
        params: Vec<Param>,
        layout: EncoderParams<usize>,
    ) -> Self {
        let by_name = params.iter().enumerate().map(|(i, p)| (p.name.clone(), i)).collect();
        Self {
            config,
            num_labels,
            params,
            layout,
            by_name,
        }
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn variant(&self) -> AttentionVariant {
        self.config.attention_variant
    }

    pub fn num_labels(&self) -> Option<usize> {
        self.num_labels
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn layout(&self) -> &EncoderParams<usize> {
        &self.layout
    }

    pub fn param(&self, name: &str) -> Option<&Param> {
        self.by_name.get(name).map(|&i| &self.params[i])
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.param(name).map(|p| p.value.as_ref())
    }

    /// Replaces a tensor by name, keeping its shape.
    pub fn set_tensor(&mut self, name: &str, value: Tensor) -> Result<()> {
        let i = *self
            .by_name
            .get(name)
            .ok_or_else(|| Error::contract(format!("no parameter named `{name}`")))?;
        if self.params[i].value.shape() != value.shape() {
            return Err(Error::dim("set_tensor", self.params[i].value.shape(), value.shape()));
        }
        self.params[i].value = Arc::new(value);
        Ok(())
    }

    /// Switches the attention variant tag, leaving all weights untouched.
    pub fn set_variant(&mut self, variant: AttentionVariant) {
        self.config.attention_variant = variant;
    }

    /// Overrides dropout rates (e.g. to switch off stochasticity).
    pub fn set_dropout(&mut self, dropout: f64, attention_dropout: f64) -> Result<()> {
        let mut c = self.config.clone();
        c.dropout = dropout;
        c.attention_dropout = attention_dropout;
        c.validate()?;
        self.config = c;
        Ok(())
    }

    /// Names of the trainable tensors, in canonical order.
    pub fn trainable_census(&self) -> Vec<String> {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.name.clone())
            .collect()
    }

    /// Makes exactly the selected tensors trainable and returns the census.
    pub fn set_trainable(&mut self, selector: TrainableSelector) -> Result<Vec<String>> {
        let selected: Vec<usize> = match selector {
            TrainableSelector::All => (0..self.params.len()).collect(),
            TrainableSelector::QkvOfLayer(l) => {
                let layer = self.layout.layers.get(l).ok_or_else(|| {
                    Error::contract(format!(
                        "layer {l} out of range for a {}-layer model",
                        self.config.n_layers
                    ))
                })?;
                let inhibitor = self.variant() == AttentionVariant::Inhibitor;
                layer
                    .attn
                    .heads
                    .iter()
                    .flat_map(|h| {
                        let mut v = vec![h.w_q, h.w_k, h.w_v];
                        if inhibitor {
                            v.extend([h.gamma, h.eta, h.delta]);
                        }
                        v
                    })
                    .collect()
            }
            TrainableSelector::ClassifierOnly => {
                let c = self
                    .layout
                    .classifier
                    .as_ref()
                    .ok_or_else(|| Error::contract("model has no classifier head"))?;
                vec![c.pre_w, c.pre_b, c.out_w, c.out_b]
            }
        };
        for p in &mut self.params {
            p.trainable = false;
        }
        for i in selected {
            self.params[i].trainable = true;
        }
        Ok(self.trainable_census())
    }

    /// Adds a freshly initialized classification head (or replaces one with
    /// a different label count). Encoder weights are kept.
    pub fn with_classifier(&self, num_labels: usize, seed: u64) -> Result<ModelState> {
        let fresh = ModelState::new(self.config.clone(), Some(num_labels), seed)?;
        let mut out = fresh;
        for p in &self.params {
            if p.name.starts_with("classifier.") && self.num_labels != Some(num_labels) {
                continue;
            }
            let i = out.by_name[&p.name];
            out.params[i] = p.clone();
        }
        Ok(out)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn bitwise_eq(&self, other: &ModelState) -> bool {
        self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|(a, b)| a.name == b.name && a.value.bitwise_eq(&b.value))
    }
}

/// Copies every shared weight of `teacher` into a student with
/// `student_config`'s rates and the requested variant. The inhibitor
/// scalars are reset to `γ = 1`, `η = eta_init`, `δ = 0`.
pub fn init_student_from_teacher(
    teacher: &ModelState,
    student_config: &EncoderConfig,
    variant: AttentionVariant,
) -> Result<ModelState> {
    if !teacher.config.same_extents(student_config) {
        return Err(Error::contract(format!(
            "teacher and student extents differ: {:?} vs {:?}",
            teacher.config, student_config
        )));
    }
    let mut config = student_config.clone();
    config.attention_variant = variant;
    config.validate()?;
    let mut student = teacher.clone();
    student.config = config;
    let eta_init = student.config.eta_init;
    let resets: Vec<(usize, f64)> = student
        .layout
        .layers
        .iter()
        .flat_map(|l| l.attn.heads.iter())
        .flat_map(|h| [(h.gamma, INIT_GAMMA), (h.eta, eta_init), (h.delta, INIT_DELTA)])
        .collect();
    for (i, v) in resets {
        student.params[i].value = Arc::new(Tensor::scalar(v));
    }
    for p in &mut student.params {
        p.trainable = true;
    }
    Ok(student)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn desk(v: AttentionVariant) -> EncoderConfig {
        EncoderConfig::desk(v)
    }

    #[test]
    fn layout_names_are_unique_and_ordered() {
        let s = ModelState::new(desk(AttentionVariant::Inhibitor), Some(3), 1).unwrap();
        let mut names: Vec<_> = s.params().iter().map(|p| p.name.clone()).collect();
        assert_eq!(names[0], "embeddings.token");
        let n = names.len();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), n);
        assert_eq!(s.tensor("layer.1.attn.head.3.gamma").unwrap().data(), &[1.0]);
        assert_eq!(s.tensor("classifier.out.w").unwrap().shape(), &[32, 3]);
    }

    #[test]
    fn qkv_selector_census() {
        let mut s = ModelState::new(desk(AttentionVariant::Inhibitor), None, 1).unwrap();
        let census = s.set_trainable(TrainableSelector::QkvOfLayer(0)).unwrap();
        assert_eq!(census.len(), 4 * 6);
        assert!(census.iter().all(|n| n.starts_with("layer.0.attn.head.")));
        assert!(census.contains(&"layer.0.attn.head.2.delta".to_string()));

        let mut d = ModelState::new(desk(AttentionVariant::DotProduct), None, 1).unwrap();
        let census = d.set_trainable(TrainableSelector::QkvOfLayer(1)).unwrap();
        assert_eq!(census.len(), 4 * 3);
        assert!(census.iter().all(|n| n.ends_with("w_q") || n.ends_with("w_k") || n.ends_with("w_v")));

        assert!(s.set_trainable(TrainableSelector::QkvOfLayer(2)).is_err());
        assert!(s.set_trainable(TrainableSelector::ClassifierOnly).is_err());
        let all = s.set_trainable(TrainableSelector::All).unwrap();
        assert_eq!(all.len(), s.params().len());
    }

    #[test]
    fn student_copies_and_resets() {
        let mut teacher = ModelState::new(desk(AttentionVariant::DotProduct), None, 9).unwrap();
        teacher
            .set_tensor("layer.0.attn.head.0.gamma", Tensor::scalar(3.0))
            .unwrap();
        let student =
            init_student_from_teacher(&teacher, &desk(AttentionVariant::Inhibitor), AttentionVariant::Inhibitor)
                .unwrap();
        assert_eq!(student.variant(), AttentionVariant::Inhibitor);
        for l in 0..2 {
            for h in 0..4 {
                let name = format!("layer.{l}.attn.head.{h}.w_q");
                assert!(student.tensor(&name).unwrap().bitwise_eq(teacher.tensor(&name).unwrap()));
                let g = |s: &str| student.tensor(&format!("layer.{l}.attn.head.{h}.{s}")).unwrap().item();
                assert_eq!((g("gamma"), g("eta"), g("delta")), (1.0, 1.0, 0.0));
            }
        }
        let mut other = desk(AttentionVariant::Inhibitor);
        other.n_layers = 3;
        assert!(init_student_from_teacher(&teacher, &other, AttentionVariant::Inhibitor).is_err());
    }

    #[test]
    fn classifier_attach_keeps_encoder() {
        let s = ModelState::new(desk(AttentionVariant::Inhibitor), None, 4).unwrap();
        let c = s.with_classifier(2, 5).unwrap();
        assert_eq!(c.num_labels(), Some(2));
        assert!(c.tensor("layer.1.ffn.w2").unwrap().bitwise_eq(s.tensor("layer.1.ffn.w2").unwrap()));
    }
}
