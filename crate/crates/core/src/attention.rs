//! Inhibitor attention and the scaled dot-product baseline.
//!
//! Inhibitor head, per query `i`, key `j`, feature `k` and value column `l`:
//!
//! ```text
//! Z[i][j]  = (γ/√d) · Σ_k |Q[i][k] − K[j][k]|
//! Z̄[i][j]  = (Z[i][j] − mean_j Z[i][j] − δ)⁺
//! H'[i][l] = η · Σ_j ((V⁺[j][l] − Z̄[i][j])⁺ + (V⁻[j][l] + Z̄[i][j])⁻)
//! ```
//!
//! with `(x)⁺ = max(x, 0)` and `(x)⁻ = min(x, 0)`. A key whose `Z̄` exceeds
//! `|V[j][l]|` contributes nothing to column `l`; `Z̄ = 0` lets the value
//! through unchanged. `γ`, `η`, `δ` are learnable per head.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Sign, Tape, Var};

/// Value written into masked entries of `Z̄`. Any finite value row with
/// magnitude below this is fully inhibited, so masked keys add exactly 0.
pub const MASK_SENTINEL: f64 = 1e9;

pub const INIT_GAMMA: f64 = 1.0;
pub const INIT_ETA: f64 = 1.0;
pub const INIT_DELTA: f64 = 0.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionVariant {
    Inhibitor,
    DotProduct,
}

impl AttentionVariant {
    pub const ALL: [AttentionVariant; 2] = [AttentionVariant::Inhibitor, AttentionVariant::DotProduct];

    pub fn as_str(self) -> &'static str {
        match self {
            AttentionVariant::Inhibitor => "inhibitor",
            AttentionVariant::DotProduct => "dot_product",
        }
    }
}

impl fmt::Display for AttentionVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AttentionVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "inhibitor" => Ok(AttentionVariant::Inhibitor),
            "dot_product" | "dot-product" | "dotproduct" => Ok(AttentionVariant::DotProduct),
            other => Err(Error::contract(format!(
                "unknown attention variant `{other}` (expected inhibitor or dot_product)"
            ))),
        }
    }
}

/// Boolean `n_queries × n_keys` matrix, `true` = attend. Every query row
/// has at least one `true`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    n_queries: usize,
    n_keys: usize,
    keep: Vec<bool>,
}

impl AttentionMask {
    pub fn new(n_queries: usize, n_keys: usize, keep: Vec<bool>) -> Result<Self> {
        if keep.len() != n_queries * n_keys {
            return Err(Error::dim("AttentionMask", &[n_queries, n_keys], &[keep.len()]));
        }
        if let Some(r) = (0..n_queries).find(|&r| !keep[r * n_keys..(r + 1) * n_keys].iter().any(|&b| b)) {
            return Err(Error::DegenerateReduction {
                op: "AttentionMask",
                detail: format!("query row {r} attends to no key"),
            });
        }
        Ok(Self {
            n_queries,
            n_keys,
            keep,
        })
    }

    pub fn full(n_queries: usize, n_keys: usize) -> Self {
        Self {
            n_queries,
            n_keys,
            keep: vec![true; n_queries * n_keys],
        }
    }

    /// Every query attends to exactly the valid keys.
    pub fn from_key_padding(n_queries: usize, key_valid: &[bool]) -> Result<Self> {
        let keep = (0..n_queries).flat_map(|_| key_valid.iter().copied()).collect();
        Self::new(n_queries, key_valid.len(), keep)
    }

    pub fn n_queries(&self) -> usize {
        self.n_queries
    }

    pub fn n_keys(&self) -> usize {
        self.n_keys
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.keep
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.keep[i * self.n_keys + j]
    }

    fn check(&self, n_q: usize, n_k: usize) -> Result<()> {
        if self.n_queries != n_q || self.n_keys != n_k {
            return Err(Error::dim(
                "attention mask",
                &[self.n_queries, self.n_keys],
                &[n_q, n_k],
            ));
        }
        Ok(())
    }
}

/// Per-head projection matrices and inhibitor scalars.
#[derive(Debug, Clone, PartialEq)]
pub struct Head<T> {
    pub w_q: T,
    pub w_k: T,
    pub w_v: T,
    pub gamma: T,
    pub eta: T,
    pub delta: T,
}

/// Projection weights of one multi-head attention sublayer.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams<T> {
    pub heads: Vec<Head<T>>,
    pub w_o: T,
    pub b_o: T,
}

impl<T> Head<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> Head<U> {
        Head {
            w_q: f(&self.w_q),
            w_k: f(&self.w_k),
            w_v: f(&self.w_v),
            gamma: f(&self.gamma),
            eta: f(&self.eta),
            delta: f(&self.delta),
        }
    }
}

impl<T> HeadParams<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> HeadParams<U> {
        HeadParams {
            heads: self.heads.iter().map(|h| h.map(f)).collect(),
            w_o: f(&self.w_o),
            b_o: f(&self.b_o),
        }
    }
}

/// Optional training-time attention dropout.
pub struct AttnDropout<'a> {
    pub rate: f64,
    pub rng: &'a mut dyn RngCore,
}

impl AttnDropout<'_> {
    fn keep_mask(&mut self, n: usize) -> Vec<f64> {
        keep_mask(&mut *self.rng, n, self.rate)
    }
}

/// Inverted-dropout mask: each entry is `0` with probability `rate`,
/// otherwise `1/(1 − rate)`.
pub fn keep_mask(rng: &mut dyn RngCore, n: usize, rate: f64) -> Vec<f64> {
    let scale = 1.0 / (1.0 - rate);
    (0..n)
        .map(|_| if rng.random::<f64>() < rate { 0.0 } else { scale })
        .collect()
}

/// `Z = (γ/√d) · abs_diff_sum(Q, K)` with `d` the feature width of `Q`.
pub fn manhattan_scores(tape: &mut Tape, q: Var, k: Var, gamma: Var) -> Result<Var> {
    let d = tape.value(q).dims2("manhattan_scores")?.1;
    let dist = tape.abs_diff_sum(q, k)?;
    tape.scale(dist, Some(gamma), 1.0 / (d as f64).sqrt())
}

/// `Z̄ = (Z − mean_j Z − δ)⁺`, the mean taken over unmasked keys only.
/// Masked entries are set to [`MASK_SENTINEL`].
pub fn center_shift(tape: &mut Tape, z: Var, delta: Var, mask: Option<&AttentionMask>) -> Result<Var> {
    let (n_q, n_k) = tape.value(z).dims2("center_shift")?;
    if let Some(m) = mask {
        m.check(n_q, n_k)?;
    }
    let keep = mask.map(AttentionMask::as_slice);
    let mean = tape.reduce_mean_axis(z, 1, keep)?;
    let centered = tape.sub_rows(z, mean)?;
    let shifted = tape.sub_scalar(centered, delta)?;
    let zbar = tape.halfrect(shifted, Sign::Positive)?;
    match keep {
        Some(k) if k.iter().any(|b| !b) => tape.mask_fill(zbar, k, MASK_SENTINEL),
        _ => Ok(zbar),
    }
}

/// `H' = η · Σ_j ((V⁺ − Z̄)⁺ + (V⁻ + Z̄)⁻)`. With dropout, whole per-key
/// summands are dropped before the sum over keys.
pub fn inhibitor_mix(
    tape: &mut Tape,
    zbar: Var,
    v: Var,
    eta: Var,
    dropout: Option<&mut AttnDropout<'_>>,
) -> Result<Var> {
    let keep = match dropout {
        Some(d) if d.rate > 0.0 => Some(d.keep_mask(tape.value(zbar).len())),
        _ => None,
    };
    let mixed = tape.inhibitor_mix(zbar, v, keep)?;
    tape.scale(mixed, Some(eta), 1.0)
}

/// Full inhibitor head from projected `Q`, `K`, `V`.
#[allow(clippy::too_many_arguments)]
pub fn inhibitor_attention(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    gamma: Var,
    eta: Var,
    delta: Var,
    mask: Option<&AttentionMask>,
    dropout: Option<&mut AttnDropout<'_>>,
) -> Result<Var> {
    let z = manhattan_scores(tape, q, k, gamma)?;
    let zbar = center_shift(tape, z, delta, mask)?;
    inhibitor_mix(tape, zbar, v, eta, dropout)
}

/// `softmax(Q·Kᵀ/√d) · V`, masked entries excluded from the softmax.
pub fn dot_product_attention(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    mask: Option<&AttentionMask>,
    dropout: Option<&mut AttnDropout<'_>>,
) -> Result<Var> {
    let (n_q, d) = tape.value(q).dims2("dot_product_attention")?;
    let (n_k, d_k) = tape.value(k).dims2("dot_product_attention")?;
    if d != d_k {
        return Err(Error::dim("dot_product_attention", tape.shape(q), tape.shape(k)));
    }
    if let Some(m) = mask {
        m.check(n_q, n_k)?;
    }
    let kt = tape.transpose(k)?;
    let raw = tape.matmul(q, kt)?;
    let scores = tape.scale(raw, None, 1.0 / (d as f64).sqrt())?;
    let mut weights = tape.softmax_rows(scores, mask.map(AttentionMask::as_slice))?;
    if let Some(drop) = dropout {
        if drop.rate > 0.0 {
            let keep = drop.keep_mask(n_q * n_k);
            weights = tape.dropout(weights, keep)?;
        }
    }
    tape.matmul(weights, v)
}

/// Multi-head attention over `x` (`n × d_model`): per head project by
/// `W_q`/`W_k`/`W_v`, apply the selected variant, concatenate, then apply
/// `W_o` and `b_o`.
pub fn multi_head_forward(
    tape: &mut Tape,
    x: Var,
    params: &HeadParams<Var>,
    mask: Option<&AttentionMask>,
    variant: AttentionVariant,
    mut dropout: Option<AttnDropout<'_>>,
) -> Result<Var> {
    let (_, d_model) = tape.value(x).dims2("multi_head_forward")?;
    let n_heads = params.heads.len();
    if n_heads == 0 {
        return Err(Error::contract("attention needs at least one head"));
    }
    let d_head = tape.value(params.heads[0].w_q).dims2("multi_head_forward")?.1;
    if d_model != n_heads * d_head {
        return Err(Error::dim(
            "multi_head_forward",
            &[d_model],
            &[n_heads, d_head],
        ));
    }
    let mut outputs = Vec::with_capacity(n_heads);
    for h in &params.heads {
        let q = tape.matmul(x, h.w_q)?;
        let k = tape.matmul(x, h.w_k)?;
        let v = tape.matmul(x, h.w_v)?;
        let out = match variant {
            AttentionVariant::Inhibitor => inhibitor_attention(
                tape,
                q,
                k,
                v,
                h.gamma,
                h.eta,
                h.delta,
                mask,
                dropout.as_mut(),
            )?,
            AttentionVariant::DotProduct => {
                dot_product_attention(tape, q, k, v, mask, dropout.as_mut())?
            }
        };
        outputs.push(out);
    }
    let concat = if outputs.len() == 1 {
        outputs[0]
    } else {
        tape.concat_cols(&outputs)?
    };
    let projected = tape.matmul(concat, params.w_o)?;
    tape.add_row(projected, params.b_o)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn mat(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn manhattan_example() {
        let mut t = Tape::new();
        let q = t.constant(mat(&[&[1.0, 0.0]]));
        let k = t.constant(mat(&[&[0.0, 1.0], &[1.0, 0.0]]));
        let g = t.constant(Tensor::scalar(1.0));
        let z = manhattan_scores(&mut t, q, k, g).unwrap();
        let zv = t.value(z);
        assert!((zv.at(0, 0) - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(zv.at(0, 1), 0.0);
    }

    #[test]
    fn gamma_zero_annihilates() {
        let mut t = Tape::new();
        let q = t.constant(mat(&[&[1.0, -3.0], &[0.5, 2.0]]));
        let k = t.constant(mat(&[&[4.0, 1.0]]));
        let g = t.constant(Tensor::scalar(0.0));
        let z = manhattan_scores(&mut t, q, k, g).unwrap();
        assert!(t.value(z).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn center_shift_examples() {
        let mut t = Tape::new();
        let z = t.constant(mat(&[&[2.0, 0.0]]));
        let d0 = t.constant(Tensor::scalar(0.0));
        let zb = center_shift(&mut t, z, d0, None).unwrap();
        assert_eq!(t.value(zb).data(), &[1.0, 0.0]);

        let single = t.constant(mat(&[&[3.7]]));
        let d = t.constant(Tensor::scalar(0.25));
        let zb = center_shift(&mut t, single, d, None).unwrap();
        assert_eq!(t.value(zb).data(), &[0.0]);

        let d10 = t.constant(Tensor::scalar(10.0));
        let zb = center_shift(&mut t, z, d10, None).unwrap();
        assert_eq!(t.value(zb).data(), &[0.0, 0.0]);
    }

    #[test]
    fn center_shift_rejects_fully_masked_row() {
        assert!(AttentionMask::new(2, 2, vec![true, false, false, false]).is_err());
    }

    #[test]
    fn mix_example() {
        let mut t = Tape::new();
        let zb = t.constant(mat(&[&[0.70711, 0.0]]));
        let v = t.constant(mat(&[&[1.0, -1.0], &[2.0, 0.0]]));
        let eta = t.constant(Tensor::scalar(1.0));
        let h = inhibitor_mix(&mut t, zb, v, eta, None).unwrap();
        let hv = t.value(h);
        assert!((hv.at(0, 0) - 2.29289).abs() < 1e-12);
        assert!((hv.at(0, 1) + 0.29289).abs() < 1e-12);
    }

    #[test]
    fn variant_parses() {
        assert_eq!("inhibitor".parse::<AttentionVariant>().unwrap(), AttentionVariant::Inhibitor);
        assert_eq!("dot_product".parse::<AttentionVariant>().unwrap(), AttentionVariant::DotProduct);
        assert!(matches!("cosine".parse::<AttentionVariant>(), Err(Error::Contract(_))));
    }
}
