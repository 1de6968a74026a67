//! AdamW with decoupled weight decay, warmup + decay learning-rate
//! schedules, and fixed-order gradient accumulation.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::encoder::ModelState;
use crate::error::{Error, Result};

/// Per-parameter gradient in canonical order; `None` marks a frozen tensor.
pub type Grads = Vec<Option<Vec<f64>>>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Applied only to parameters flagged as decaying (matrices).
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::contract("Adam betas must lie in [0, 1)"));
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::contract("eps must be > 0 and weight_decay >= 0"));
        }
        Ok(())
    }
}

/// A mutable view of one parameter for [`AdamWState::step`].
pub struct ParamSlot<'a> {
    pub value: &'a mut [f64],
    pub trainable: bool,
    pub decays: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamWState {
    pub config: AdamWConfig,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    /// Number of applied steps.
    pub t: u64,
}

impl AdamWState {
    /// Zeroed moments for parameters of the given sizes.
    pub fn new(config: AdamWConfig, sizes: &[usize]) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        })
    }

    pub fn for_model(config: AdamWConfig, model: &ModelState) -> Result<Self> {
        let sizes: Vec<usize> = model.params().iter().map(|p| p.value.len()).collect();
        Self::new(config, &sizes)
    }

    /// One bias-corrected AdamW update. Frozen slots are skipped entirely;
    /// a trainable slot without a gradient is treated as a zero gradient.
    pub fn step(&mut self, params: &mut [ParamSlot<'_>], grads: &[Option<Vec<f64>>], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(Error::contract(format!(
                "optimizer tracks {} parameters, got {} values and {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        if !(lr >= 0.0) || !lr.is_finite() {
            return Err(Error::contract(format!("learning rate must be finite and >= 0, got {lr}")));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.value.len() != self.m[i].len() {
                return Err(Error::dim("adamw_step", &[self.m[i].len()], &[p.value.len()]));
            }
            if let Some(g) = g {
                if g.len() != p.value.len() {
                    return Err(Error::dim("adamw_step", &[p.value.len()], &[g.len()]));
                }
            }
        }
        self.t += 1;
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            if !p.trainable {
                continue;
            }
            let wd = if p.decays { weight_decay } else { 0.0 };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.value.len() {
                let gj = g.as_ref().map_or(0.0, |g| g[j]);
                m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
                v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                let x = p.value[j];
                p.value[j] = x - lr * (m_hat / (v_hat.sqrt() + eps) + wd * x);
            }
        }
        Ok(())
    }

    /// [`step`](Self::step) applied to a model's parameters in place.
    pub fn step_model(&mut self, model: &mut ModelState, grads: &[Option<Vec<f64>>], lr: f64) -> Result<()> {
        let mut slots: Vec<ParamSlot<'_>> = model
            .params_mut()
            .iter_mut()
            .map(|p| {
                let trainable = p.trainable;
                let decays = p.decays();
                ParamSlot {
                    value: Arc::make_mut(&mut p.value).data_mut(),
                    trainable,
                    decays,
                }
            })
            .collect();
        self.step(&mut slots, grads, lr)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decay {
    Cosine,
    Linear,
}

impl Decay {
    pub fn as_str(self) -> &'static str {
        match self {
            Decay::Cosine => "cosine",
            Decay::Linear => "linear",
        }
    }
}

impl fmt::Display for Decay {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Decay {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "cosine" => Ok(Decay::Cosine),
            "linear" => Ok(Decay::Linear),
            other => Err(Error::contract(format!("unknown decay `{other}` (expected cosine or linear)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub peak_lr: f64,
    pub warmup_ratio: f64,
    pub total_steps: u64,
    pub decay: Decay,
}

impl LrSchedule {
    pub fn new(peak_lr: f64, warmup_ratio: f64, total_steps: u64, decay: Decay) -> Result<Self> {
        let s = Self {
            peak_lr,
            warmup_ratio,
            total_steps,
            decay,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return Err(Error::contract(format!(
                "warmup_ratio must lie in [0, 1), got {}",
                self.warmup_ratio
            )));
        }
        if !(self.peak_lr >= 0.0) || !self.peak_lr.is_finite() {
            return Err(Error::contract(format!("peak_lr must be finite and >= 0, got {}", self.peak_lr)));
        }
        if self.total_steps == 0 {
            return Err(Error::contract("total_steps must be >= 1"));
        }
        Ok(())
    }

    /// `round(warmup_ratio · total_steps)`.
    pub fn warmup_steps(&self) -> u64 {
        (self.warmup_ratio * self.total_steps as f64).round() as u64
    }

    pub fn lr_at(&self, step: u64) -> Result<f64> {
        if step > self.total_steps {
            return Err(Error::contract(format!(
                "step {step} beyond schedule end {}",
                self.total_steps
            )));
        }
        let warmup = self.warmup_steps();
        if step < warmup {
            return Ok(self.peak_lr * step as f64 / warmup as f64);
        }
        let span = self.total_steps - warmup;
        if span == 0 {
            return Ok(self.peak_lr);
        }
        let progress = (step - warmup) as f64 / span as f64;
        let factor = match self.decay {
            Decay::Cosine => 0.5 * (1.0 + (PI * progress).cos()),
            Decay::Linear => 1.0 - progress,
        };
        Ok((self.peak_lr * factor).max(0.0))
    }
}

/// Sums micro-batch gradients in arrival order and yields their mean.
#[derive(Debug, Clone, Default)]
pub struct GradAccumulator {
    sum: Option<Grads>,
    count: usize,
}

impl GradAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn add(&mut self, grads: Grads) -> Result<()> {
        match &mut self.sum {
            None => self.sum = Some(grads),
            Some(sum) => {
                if sum.len() != grads.len() {
                    return Err(Error::contract("micro-batch gradients disagree in parameter count"));
                }
                for (s, g) in sum.iter_mut().zip(grads) {
                    match (s.as_mut(), g) {
                        (Some(s), Some(g)) => {
                            if s.len() != g.len() {
                                return Err(Error::dim("accumulate", &[s.len()], &[g.len()]));
                            }
                            for (a, b) in s.iter_mut().zip(g) {
                                *a += b;
                            }
                        }
                        (None, None) => {}
                        _ => return Err(Error::contract("micro-batch gradients disagree on frozen parameters")),
                    }
                }
            }
        }
        self.count += 1;
        Ok(())
    }

    /// Mean of the accumulated gradients; resets the accumulator.
    pub fn take_mean(&mut self) -> Result<Grads> {
        let sum = self
            .sum
            .take()
            .ok_or_else(|| Error::contract("no gradients accumulated"))?;
        let n = self.count as f64;
        self.count = 0;
        Ok(sum
            .into_iter()
            .map(|g| {
                g.map(|mut g| {
                    g.iter_mut().for_each(|x| *x /= n);
                    g
                })
            })
            .collect())
    }
}

/// Mean of per-example gradients, summed in index order.
pub fn mean_grads(per_example: Vec<Grads>) -> Result<Grads> {
    let mut acc = GradAccumulator::new();
    for g in per_example {
        acc.add(g)?;
    }
    acc.take_mean()
}

/// Averages `micro_batches` gradients in windows of `accumulation_steps`,
/// applying one optimizer step per complete or trailing window. `lr_for`
/// maps the applied-step index (starting at `optimizer.t`) to a rate.
pub fn accumulate_and_step(
    model: &mut ModelState,
    optimizer: &mut AdamWState,
    micro_batches: Vec<Grads>,
    accumulation_steps: usize,
    mut lr_for: impl FnMut(u64) -> Result<f64>,
) -> Result<usize> {
    if accumulation_steps == 0 {
        return Err(Error::contract("accumulation_steps must be >= 1"));
    }
    let mut applied = 0;
    let mut acc = GradAccumulator::new();
    let total = micro_batches.len();
    for (i, g) in micro_batches.into_iter().enumerate() {
        acc.add(g)?;
        if acc.count() == accumulation_steps || i + 1 == total {
            let mean = acc.take_mean()?;
            let lr = lr_for(optimizer.t)?;
            optimizer.step_model(model, &mean, lr)?;
            applied += 1;
        }
    }
    Ok(applied)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(p: f64, g: f64, cfg: AdamWConfig, lr: f64) -> f64 {
        let mut st = AdamWState::new(cfg, &[1]).unwrap();
        let mut v = [p];
        st.step(
            &mut [ParamSlot {
                value: &mut v,
                trainable: true,
                decays: true,
            }],
            &[Some(vec![g])],
            lr,
        )
        .unwrap();
        v[0]
    }

    #[test]
    fn single_update_and_decay() {
        let no_wd = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        assert!((one(1.0, 0.5, no_wd, 0.1) - 0.9).abs() < 1e-6);
        let wd = AdamWConfig {
            weight_decay: 0.1,
            ..Default::default()
        };
        assert!((one(2.0, 0.0, wd, 0.1) - 2.0 * 0.99).abs() < 1e-15);
        assert_eq!(one(1.5, 0.0, no_wd, 0.3), 1.5);
    }

    #[test]
    fn frozen_untouched() {
        let mut st = AdamWState::new(AdamWConfig::default(), &[2, 2]).unwrap();
        let mut a = [1.0, 2.0];
        let mut b = [3.0, 4.0];
        let mut slots = [
            ParamSlot {
                value: &mut a,
                trainable: false,
                decays: true,
            },
            ParamSlot {
                value: &mut b,
                trainable: true,
                decays: true,
            },
        ];
        st.step(&mut slots, &[None, Some(vec![1.0, 1.0])], 0.1).unwrap();
        assert_eq!(a, [1.0, 2.0]);
        assert_eq!(st.m[0], [0.0, 0.0]);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn schedule_endpoints() {
        let s = LrSchedule::new(1.0, 0.05, 100, Decay::Cosine).unwrap();
        assert_eq!(s.lr_at(0).unwrap(), 0.0);
        assert_eq!(s.lr_at(5).unwrap(), 1.0);
        assert!(s.lr_at(100).unwrap().abs() < 1e-15);
        assert!(s.lr_at(101).is_err());
        let c = LrSchedule::new(5e-4, 0.05, 105, Decay::Cosine).unwrap();
        assert_eq!(c.warmup_steps(), 5);
        assert!((c.lr_at(55).unwrap() - 2.5e-4).abs() < 1e-15);
        let l = LrSchedule::new(2e-5, 0.0, 10, Decay::Linear).unwrap();
        assert_eq!(l.lr_at(0).unwrap(), 2e-5);
        assert!((l.lr_at(5).unwrap() - 1e-5).abs() < 1e-20);
        assert!(LrSchedule::new(1.0, 1.0, 10, Decay::Linear).is_err());
        assert_eq!("Linear".parse::<Decay>().unwrap(), Decay::Linear);
    }

    #[test]
    fn accumulator_mean() {
        let mut acc = GradAccumulator::new();
        acc.add(vec![Some(vec![1.0, 2.0]), None]).unwrap();
        acc.add(vec![Some(vec![3.0, 6.0]), None]).unwrap();
        assert_eq!(acc.take_mean().unwrap(), vec![Some(vec![2.0, 4.0]), None]);
        assert!(acc.take_mean().is_err());
        let mut acc = GradAccumulator::new();
        acc.add(vec![Some(vec![1.0])]).unwrap();
        assert!(acc.add(vec![None]).is_err());
    }
}
