//! Central-difference gradient checking.
//!
//! Relative error per coordinate is
//! `|analytic − numeric| / max(1, |analytic|, |numeric|)`; checks report the
//! maximum over all coordinates of all inputs.
//!
//! Central differences are meaningless across a kink of `|·|` or a
//! rectifier, so inputs are moved off kinks first: elementwise primitives
//! nudge offending coordinates by [`KINK_NUDGE`]; composed heads resample
//! until every live kink argument is at least [`KINK_MARGIN`] away from 0.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{self, AttentionMask, AttentionVariant};
use crate::error::{Error, Result};
use crate::tape::{Sign, Tape, Var};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-5;
pub const KINK_MARGIN: f64 = 1e-3;
pub const KINK_NUDGE: f64 = 2e-3;

/// Max relative error between the tape gradient of scalar `f` and central
/// differences with steps `±h`, over every coordinate of every input.
pub fn grad_check<F>(f: F, inputs: &[Tensor], h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = f(&mut tape, &vars)?;
    if !tape.value(out).is_scalar() {
        return Err(Error::contract(format!(
            "grad_check needs a scalar function, got shape {:?}",
            tape.shape(out)
        )));
    }
    tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| tape.grad(*v).map_or_else(|| vec![0.0; t.len()], <[f64]>::to_vec))
        .collect();

    let eval = |vals: &[Tensor]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = vals.iter().map(|x| t.leaf(x.clone(), false)).collect();
        let o = f(&mut t, &vs)?;
        Ok(t.value(o).item())
    };

    let mut worst: f64 = 0.0;
    let mut probe = inputs.to_vec();
    for (which, grads) in analytic.iter().enumerate() {
        for idx in 0..inputs[which].len() {
            let orig = inputs[which].data()[idx];
            probe[which].data_mut()[idx] = orig + h;
            let up = eval(&probe)?;
            probe[which].data_mut()[idx] = orig - h;
            let down = eval(&probe)?;
            probe[which].data_mut()[idx] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = grads[idx];
            let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

/// Moves every coordinate within [`KINK_MARGIN`] of zero up by [`KINK_NUDGE`].
pub fn nudge_off_zero(t: &mut Tensor) {
    for v in t.data_mut() {
        if v.abs() < KINK_MARGIN {
            *v += KINK_NUDGE;
        }
    }
}

/// Nudges `q` until no `|q[i][k] − kk[j][k]|` is within [`KINK_MARGIN`].
pub fn nudge_pairwise(q: &mut Tensor, kk: &Tensor) {
    let d = q.shape()[1];
    let n = kk.shape()[0];
    for idx in 0..q.len() {
        let c = idx % d;
        // Each nudge can land near another key; the key count bounds the passes.
        for _ in 0..=n {
            let v = q.data()[idx];
            if (0..n).all(|j| (v - kk.data()[j * d + c]).abs() >= KINK_MARGIN) {
                break;
            }
            q.data_mut()[idx] += KINK_NUDGE;
        }
    }
}

/// Smallest distance to a kink over all live kink arguments of an inhibitor
/// head, computed with plain loops.
#[allow(clippy::too_many_arguments)]
pub fn inhibitor_head_kink_margin(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    gamma: f64,
    delta: f64,
    mask: Option<&AttentionMask>,
) -> f64 {
    let (nq, d) = (q.shape()[0], q.shape()[1]);
    let nk = k.shape()[0];
    let dv = v.shape()[1];
    let live = |i: usize, j: usize| mask.is_none_or(|m| m.get(i, j));
    let mut margin = f64::INFINITY;
    let mut z = vec![0.0; nq * nk];
    for i in 0..nq {
        for j in 0..nk {
            let mut s = 0.0;
            for c in 0..d {
                let diff = q.at(i, c) - k.at(j, c);
                margin = margin.min(diff.abs());
                s += diff.abs();
            }
            z[i * nk + j] = gamma / (d as f64).sqrt() * s;
        }
    }
    for x in v.data() {
        margin = margin.min(x.abs());
    }
    for i in 0..nq {
        let cols: Vec<usize> = (0..nk).filter(|&j| live(i, j)).collect();
        let mean = cols.iter().map(|&j| z[i * nk + j]).sum::<f64>() / cols.len() as f64;
        for &j in &cols {
            let arg = z[i * nk + j] - mean - delta;
            margin = margin.min(arg.abs());
            let zbar = arg.max(0.0);
            for l in 0..dv {
                let val = v.at(j, l);
                if val > 0.0 {
                    margin = margin.min((val - zbar).abs());
                } else {
                    margin = margin.min((val + zbar).abs());
                }
            }
        }
    }
    margin
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub instances: usize,
    pub max_rel_error: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

/// Weighted sum `Σ w ⊙ out` with fixed weights, so that identities such
/// as "softmax rows sum to one" cannot hide gradient errors.
fn project(tape: &mut Tape, out: Var, weights: &Tensor) -> Result<Var> {
    let w = tape.constant(weights.clone());
    let p = tape.mul(out, w)?;
    tape.sum(p)
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::randn(shape, 1.0, rng)
}

fn random_key_mask(rng: &mut ChaCha8Rng, nq: usize, nk: usize) -> Option<AttentionMask> {
    if nk < 2 || rng.random::<f64>() < 0.5 {
        return None;
    }
    let mut valid: Vec<bool> = (0..nk).map(|_| rng.random::<f64>() < 0.7).collect();
    valid[rng.random_range(0..nk)] = true;
    Some(AttentionMask::from_key_padding(nq, &valid).expect("one key forced valid"))
}

type CheckFn = fn(&mut ChaCha8Rng) -> Result<f64>;

const INHIBITOR_CHECKS: &[(&str, CheckFn)] = &[
    ("halfrect", check_halfrect),
    ("abs_diff_sum", check_abs_diff_sum),
    ("manhattan_scores", check_manhattan_scores),
    ("center_shift", check_center_shift),
    ("inhibitor_mix", check_inhibitor_mix),
    ("inhibitor_head", check_inhibitor_head),
];

const DOT_PRODUCT_CHECKS: &[(&str, CheckFn)] = &[
    ("softmax_rows", check_softmax_rows),
    ("dot_product_attention", check_dot_product_attention),
];

const SHARED_CHECKS: &[(&str, CheckFn)] = &[
    ("matmul", check_matmul),
    ("reduce_mean_axis", check_reduce_mean),
    ("layer_norm", check_layer_norm),
    ("gelu", check_gelu),
    ("tanh", check_tanh),
    ("mse_loss", check_mse),
    ("cross_entropy_loss", check_cross_entropy),
    ("soft_prob_distill_loss", check_soft_kd),
];

/// Names of the checks [`run_suite`] would execute for `variant`.
pub fn suite_names(variant: Option<AttentionVariant>) -> Vec<&'static str> {
    selected(variant).iter().map(|(n, _)| *n).collect()
}

fn selected(variant: Option<AttentionVariant>) -> Vec<(&'static str, CheckFn)> {
    let mut v = Vec::new();
    if variant != Some(AttentionVariant::DotProduct) {
        v.extend_from_slice(INHIBITOR_CHECKS);
    }
    if variant != Some(AttentionVariant::Inhibitor) {
        v.extend_from_slice(DOT_PRODUCT_CHECKS);
    }
    v.extend_from_slice(SHARED_CHECKS);
    v
}

/// Runs every selected check on `trials` seeded random instances. `None`
/// selects both variants. Output order is fixed.
pub fn run_suite(seed: u64, trials: usize, variant: Option<AttentionVariant>) -> Result<Vec<CheckResult>> {
    if trials == 0 {
        return Err(Error::contract("trials must be at least 1"));
    }
    selected(variant)
        .into_iter()
        .enumerate()
        .map(|(idx, (name, check))| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9).wrapping_add(idx as u64));
            let mut worst: f64 = 0.0;
            for _ in 0..trials {
                worst = worst.max(check(&mut rng)?);
            }
            Ok(CheckResult {
                name,
                instances: trials,
                max_rel_error: worst,
            })
        })
        .collect()
}

fn dims(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    rng.random_range(lo..=hi)
}

fn check_matmul(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (m, k, n) = (dims(rng, 1, 5), dims(rng, 1, 5), dims(rng, 1, 5));
    let a = randn(rng, &[m, k]);
    let b = randn(rng, &[k, n]);
    let w = randn(rng, &[m, n]);
    grad_check(
        |t, v| {
            let c = t.matmul(v[0], v[1])?;
            project(t, c, &w)
        },
        &[a, b],
        DEFAULT_STEP,
    )
}

fn check_halfrect(rng: &mut ChaCha8Rng) -> Result<f64> {
    let n = dims(rng, 1, 12);
    let mut x = randn(rng, &[n]);
    nudge_off_zero(&mut x);
    let w = randn(rng, &[n]);
    let pos = grad_check(
        |t, v| {
            let y = t.halfrect(v[0], Sign::Positive)?;
            project(t, y, &w)
        },
        std::slice::from_ref(&x),
        DEFAULT_STEP,
    )?;
    let neg = grad_check(
        |t, v| {
            let y = t.halfrect(v[0], Sign::Negative)?;
            project(t, y, &w)
        },
        &[x],
        DEFAULT_STEP,
    )?;
    Ok(pos.max(neg))
}

fn check_abs_diff_sum(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (m, n, d) = (dims(rng, 1, 5), dims(rng, 1, 5), dims(rng, 1, 8));
    let mut q = randn(rng, &[m, d]);
    let k = randn(rng, &[n, d]);
    nudge_pairwise(&mut q, &k);
    let w = randn(rng, &[m, n]);
    grad_check(
        |t, v| {
            let z = t.abs_diff_sum(v[0], v[1])?;
            project(t, z, &w)
        },
        &[q, k],
        DEFAULT_STEP,
    )
}

fn check_manhattan_scores(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (m, n, d) = (dims(rng, 1, 5), dims(rng, 1, 5), dims(rng, 1, 8));
    let mut q = randn(rng, &[m, d]);
    let k = randn(rng, &[n, d]);
    nudge_pairwise(&mut q, &k);
    let gamma = Tensor::scalar(rng.random_range(0.5..1.5));
    let w = randn(rng, &[m, n]);
    grad_check(
        |t, v| {
            let z = attention::manhattan_scores(t, v[0], v[1], v[2])?;
            project(t, z, &w)
        },
        &[q, k, gamma],
        DEFAULT_STEP,
    )
}

fn check_center_shift(rng: &mut ChaCha8Rng) -> Result<f64> {
    loop {
        let (m, n) = (dims(rng, 1, 5), dims(rng, 2, 6));
        let z = Tensor::uniform(&[m, n], 0.0, 4.0, rng);
        let delta = rng.random_range(-0.3..0.3);
        let mask = random_key_mask(rng, m, n);
        let off_kink = (0..m).all(|i| {
            let live: Vec<usize> = (0..n).filter(|&j| mask.as_ref().is_none_or(|mk| mk.get(i, j))).collect();
            let mean = live.iter().map(|&j| z.at(i, j)).sum::<f64>() / live.len() as f64;
            live.iter().all(|&j| (z.at(i, j) - mean - delta).abs() >= KINK_MARGIN)
        });
        if !off_kink {
            continue;
        }
        // Masked entries hold the sentinel; weight them 0 so the check
        // focuses on live entries (their gradient is 0 either way).
        let mut w = randn(rng, &[m, n]);
        if let Some(mk) = &mask {
            for (wv, keep) in w.data_mut().iter_mut().zip(mk.as_slice()) {
                if !keep {
                    *wv = 0.0;
                }
            }
        }
        return grad_check(
            |t, v| {
                let zb = attention::center_shift(t, v[0], v[1], mask.as_ref())?;
                project(t, zb, &w)
            },
            &[z, Tensor::scalar(delta)],
            DEFAULT_STEP,
        );
    }
}

fn check_inhibitor_mix(rng: &mut ChaCha8Rng) -> Result<f64> {
    loop {
        let (m, n, dv) = (dims(rng, 1, 5), dims(rng, 1, 5), dims(rng, 1, 6));
        let zbar = Tensor::uniform(&[m, n], 0.05, 1.5, rng);
        let v = randn(rng, &[n, dv]);
        let eta = Tensor::scalar(rng.random_range(0.5..1.5));
        let off_kink = (0..m).all(|i| {
            (0..n).all(|j| {
                (0..dv).all(|l| {
                    let val = v.at(j, l);
                    let z = zbar.at(i, j);
                    val.abs() >= KINK_MARGIN && (val.abs() - z).abs() >= KINK_MARGIN
                })
            })
        });
        if !off_kink {
            continue;
        }
        let w = randn(rng, &[m, dv]);
        return grad_check(
            |t, vars| {
                let h = attention::inhibitor_mix(t, vars[0], vars[1], vars[2], None)?;
                project(t, h, &w)
            },
            &[zbar, v, eta],
            DEFAULT_STEP,
        );
    }
}

fn check_inhibitor_head(rng: &mut ChaCha8Rng) -> Result<f64> {
    loop {
        let (nq, nk, d, dv) = (dims(rng, 1, 5), dims(rng, 1, 5), dims(rng, 1, 8), dims(rng, 1, 4));
        let q = randn(rng, &[nq, d]);
        let k = randn(rng, &[nk, d]);
        let v = randn(rng, &[nk, dv]);
        let gamma = rng.random_range(0.5..1.5);
        let eta = rng.random_range(0.5..1.5);
        let delta = rng.random_range(-0.3..0.3);
        let mask = random_key_mask(rng, nq, nk);
        if inhibitor_head_kink_margin(&q, &k, &v, gamma, delta, mask.as_ref()) < KINK_MARGIN {
            continue;
        }
        let w = randn(rng, &[nq, dv]);
        return grad_check(
            |t, x| {
                let h = attention::inhibitor_attention(t, x[0], x[1], x[2], x[3], x[4], x[5], mask.as_ref(), None)?;
                project(t, h, &w)
            },
            &[q, k, v, Tensor::scalar(gamma), Tensor::scalar(eta), Tensor::scalar(delta)],
            DEFAULT_STEP,
        );
    }
}

fn check_softmax_rows(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (m, n) = (dims(rng, 1, 5), dims(rng, 1, 6));
    let x = randn(rng, &[m, n]);
    let mask = random_key_mask(rng, m, n);
    let w = randn(rng, &[m, n]);
    grad_check(
        |t, v| {
            let y = t.softmax_rows(v[0], mask.as_ref().map(AttentionMask::as_slice))?;
            project(t, y, &w)
        },
        &[x],
        DEFAULT_STEP,
    )
}

fn check_dot_product_attention(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (nq, nk, d, dv) = (dims(rng, 1, 5), dims(rng, 1, 5), dims(rng, 1, 8), dims(rng, 1, 4));
    let q = randn(rng, &[nq, d]);
    let k = randn(rng, &[nk, d]);
    let v = randn(rng, &[nk, dv]);
    let mask = random_key_mask(rng, nq, nk);
    let w = randn(rng, &[nq, dv]);
    grad_check(
        |t, x| {
            let h = attention::dot_product_attention(t, x[0], x[1], x[2], mask.as_ref(), None)?;
            project(t, h, &w)
        },
        &[q, k, v],
        DEFAULT_STEP,
    )
}

fn check_reduce_mean(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (m, n) = (dims(rng, 1, 4), dims(rng, 1, 5));
    let x = randn(rng, &[m, n]);
    let axis = rng.random_range(0..2);
    let mut mask: Vec<bool> = (0..m * n).map(|_| rng.random::<f64>() < 0.7).collect();
    // keep at least one entry per reduced slice
    if axis == 1 {
        for r in 0..m {
            mask[r * n] = true;
        }
    } else {
        mask[..n].iter_mut().for_each(|b| *b = true);
    }
    let out_len = if axis == 1 { m } else { n };
    let w = randn(rng, &[out_len]);
    grad_check(
        |t, v| {
            let y = t.reduce_mean_axis(v[0], axis, Some(&mask))?;
            project(t, y, &w)
        },
        &[x],
        DEFAULT_STEP,
    )
}

fn check_layer_norm(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (m, n) = (dims(rng, 1, 4), dims(rng, 2, 8));
    let x = randn(rng, &[m, n]);
    let g = Tensor::uniform(&[n], 0.5, 1.5, rng);
    let b = randn(rng, &[n]);
    let w = randn(rng, &[m, n]);
    grad_check(
        |t, v| {
            let y = t.layer_norm(v[0], v[1], v[2], 1e-12)?;
            project(t, y, &w)
        },
        &[x, g, b],
        DEFAULT_STEP,
    )
}

fn check_gelu(rng: &mut ChaCha8Rng) -> Result<f64> {
    let n = dims(rng, 1, 10);
    let x = randn(rng, &[n]);
    let w = randn(rng, &[n]);
    grad_check(
        |t, v| {
            let y = t.gelu(v[0])?;
            project(t, y, &w)
        },
        &[x],
        DEFAULT_STEP,
    )
}

fn check_tanh(rng: &mut ChaCha8Rng) -> Result<f64> {
    let n = dims(rng, 1, 10);
    let x = randn(rng, &[n]);
    let w = randn(rng, &[n]);
    grad_check(
        |t, v| {
            let y = t.tanh(v[0])?;
            project(t, y, &w)
        },
        &[x],
        DEFAULT_STEP,
    )
}

fn check_mse(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (m, n) = (dims(rng, 1, 5), dims(rng, 1, 6));
    let x = randn(rng, &[m, n]);
    let target = Arc::new(randn(rng, &[m, n]));
    let mut rows: Vec<bool> = (0..m).map(|_| rng.random::<f64>() < 0.7).collect();
    rows[0] = true;
    grad_check(|t, v| t.mse(v[0], Arc::clone(&target), Some(&rows)), &[x], DEFAULT_STEP)
}

fn check_cross_entropy(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (b, c) = (dims(rng, 1, 4), dims(rng, 2, 5));
    let x = randn(rng, &[b, c]);
    let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..c)).collect();
    grad_check(|t, v| t.cross_entropy(v[0], &labels), &[x], DEFAULT_STEP)
}

fn check_soft_kd(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (b, c) = (dims(rng, 1, 4), dims(rng, 2, 5));
    let x = randn(rng, &[b, c]);
    let teacher = Tensor::randn(&[b, c], 2.0, rng);
    let temp = rng.random_range(0.5..5.0);
    grad_check(|t, v| t.soft_kd(v[0], &teacher, temp), &[x], DEFAULT_STEP)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let err = grad_check(
            |t, v| {
                let sq = t.mul(v[0], v[0])?;
                t.sum(sq)
            },
            &[Tensor::scalar(3.0)],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn non_scalar_output_rejected() {
        let r = grad_check(|t, v| t.halfrect(v[0], Sign::Positive), &[Tensor::filled(&[3], 1.0)], 1e-5);
        assert!(matches!(r, Err(Error::Contract(_))));
    }

    #[test]
    fn wrong_gradient_is_caught() {
        let err = grad_check(
            |t, v| {
                let y = t.halfrect(v[0], Sign::Positive)?;
                t.sum(y)
            },
            // 1e-6 sits inside the step, so the numeric slope is 0.55, not 1.
            &[Tensor::scalar(1e-6)],
            1e-5,
        )
        .unwrap();
        assert!(err > 0.1);
    }

    #[test]
    fn nudge_moves_off_kinks() {
        let mut q = Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let k = Tensor::from_rows(&[vec![1.0005, 5.0], vec![1.0025, -1.0]]).unwrap();
        nudge_pairwise(&mut q, &k);
        for j in 0..2 {
            assert!((q.at(0, 0) - k.at(j, 0)).abs() >= KINK_MARGIN);
        }
    }

    #[test]
    fn suite_runs_and_passes() {
        let results = run_suite(3, 3, None).unwrap();
        assert_eq!(results.len(), suite_names(None).len());
        for r in &results {
            assert!(r.passed(), "{} failed with {}", r.name, r.max_rel_error);
        }
    }

    #[test]
    fn suite_filters_by_variant() {
        let inh = suite_names(Some(AttentionVariant::Inhibitor));
        assert!(inh.contains(&"inhibitor_head"));
        assert!(!inh.contains(&"softmax_rows"));
        assert!(run_suite(0, 0, None).is_err());
    }
}
