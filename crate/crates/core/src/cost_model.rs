//! Arithmetic operation counts for one attention head, closed-form and
//! measured.
//!
//! Closed forms for a head with `n_q` queries, `n_k` keys, feature width `d`
//! and value width `d_v` (no mask, inference mode):
//!
//! Dot product, `softmax(Q·Kᵀ/√d)·V`:
//! - mults     = n_q·n_k·d + n_q·n_k + n_q·n_k·d_v
//! - adds_subs = n_q·n_k·(d−1) + n_q·n_k + n_q·(n_k−1) + n_q·d_v·(n_k−1)
//! - exps      = n_q·n_k
//! - divs      = n_q·n_k (row normalization)
//!
//! Inhibitor:
//! - mults     = n_q·n_k (folded γ/√d) + n_q·d_v (η)
//! - adds_subs = n_q·n_k·(2d−1) (distance) + n_q·(n_k−1) (row sums)
//!   + 2·n_q·n_k (centering and δ) + 2·n_q·n_k·d_v + n_q·d_v·(2n_k−1) (mixing)
//! - abs_ops   = n_q·n_k·d
//! - relu_ops  = n_q·n_k (shift) + 2·n_k·d_v (V⁺, V⁻) + 2·n_q·n_k·d_v (mixing)
//! - exps      = 0
//! - divs      = n_q (row means)
//!
//! Row-max comparisons inside the softmax are not tallied.

use std::fmt::Write as _;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{self, AttentionVariant};
use crate::counters::OpCounters;
use crate::error::{Error, Result};
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Extents of one attention head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct HeadShape {
    pub n_q: usize,
    pub n_k: usize,
    pub d: usize,
    pub d_v: usize,
}

impl HeadShape {
    pub fn new(n_q: usize, n_k: usize, d: usize, d_v: usize) -> Self {
        Self { n_q, n_k, d, d_v }
    }

    pub fn square(n: usize, d: usize, d_v: usize) -> Self {
        Self::new(n, n, d, d_v)
    }

    fn validate(&self) -> Result<()> {
        if self.n_q == 0 || self.n_k == 0 || self.d == 0 || self.d_v == 0 {
            return Err(Error::contract(format!("head extents must be >= 1, got {self:?}")));
        }
        Ok(())
    }
}

pub fn closed_form_counts(variant: AttentionVariant, shape: HeadShape) -> Result<OpCounters> {
    shape.validate()?;
    let HeadShape { n_q, n_k, d, d_v } = shape;
    let (nq, nk, d, dv) = (n_q as u64, n_k as u64, d as u64, d_v as u64);
    Ok(match variant {
        AttentionVariant::DotProduct => OpCounters {
            mults: nq * nk * d + nq * nk + nq * nk * dv,
            adds_subs: nq * nk * (d - 1) + nq * nk + nq * (nk - 1) + nq * dv * (nk - 1),
            abs_ops: 0,
            relu_ops: 0,
            exps: nq * nk,
            divs: nq * nk,
        },
        AttentionVariant::Inhibitor => OpCounters {
            mults: nq * nk + nq * dv,
            adds_subs: nq * nk * (2 * d - 1)
                + nq * (nk - 1)
                + 2 * nq * nk
                + 2 * nq * nk * dv
                + nq * dv * (2 * nk - 1),
            abs_ops: nq * nk * d,
            relu_ops: nq * nk + 2 * nk * dv + 2 * nq * nk * dv,
            exps: 0,
            divs: nq,
        },
    })
}

/// Runs `f` on an instrumented tape and returns only the arithmetic it
/// recorded.
pub fn measure<T>(tape: &mut Tape, f: impl FnOnce(&mut Tape) -> Result<T>) -> Result<(T, OpCounters)> {
    let before = tape
        .counters()
        .ok_or_else(|| Error::contract("instrumentation is disabled on this tape"))?;
    let out = f(tape)?;
    let after = tape.counters().expect("instrumentation cannot switch off mid-run");
    Ok((out, after.since(&before)))
}

/// Counts measured over one head forward pass on seeded random inputs.
pub fn instrumented_counts(variant: AttentionVariant, shape: HeadShape, seed: u64) -> Result<OpCounters> {
    shape.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tape = Tape::instrumented();
    let q = tape.constant(Tensor::randn(&[shape.n_q, shape.d], 1.0, &mut rng));
    let k = tape.constant(Tensor::randn(&[shape.n_k, shape.d], 1.0, &mut rng));
    let v = tape.constant(Tensor::randn(&[shape.n_k, shape.d_v], 1.0, &mut rng));
    let gamma = tape.constant(Tensor::scalar(attention::INIT_GAMMA));
    let eta = tape.constant(Tensor::scalar(attention::INIT_ETA));
    let delta = tape.constant(Tensor::scalar(attention::INIT_DELTA));
    let (_, counts) = measure(&mut tape, |t| match variant {
        AttentionVariant::Inhibitor => {
            attention::inhibitor_attention(t, q, k, v, gamma, eta, delta, None, None)
        }
        AttentionVariant::DotProduct => attention::dot_product_attention(t, q, k, v, None, None),
    })?;
    Ok(counts)
}

pub const CSV_HEADER: &str = "variant,n_q,n_k,d,d_v,mults,adds_subs,abs_ops,relu_ops,exps,divs";

pub const DEFAULT_GRID: &str =
    "n=2,d=2,dv=2;n=16,d=64,dv=64;n=64,d=64,dv=64;n=128,d=64,dv=64;n=512,d=64,dv=64";

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub shape: HeadShape,
    pub inhibitor: OpCounters,
    pub dot_product: OpCounters,
}

impl ReportRow {
    /// Dot-product multiplications per inhibitor multiplication.
    pub fn mult_ratio(&self) -> f64 {
        self.dot_product.mults as f64 / self.inhibitor.mults as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub rows: Vec<ReportRow>,
}

pub fn compare_report(grid: &[HeadShape]) -> Result<Report> {
    if grid.is_empty() {
        return Err(Error::contract("shape grid is empty"));
    }
    let rows = grid
        .iter()
        .map(|&shape| {
            Ok(ReportRow {
                shape,
                inhibitor: closed_form_counts(AttentionVariant::Inhibitor, shape)?,
                dot_product: closed_form_counts(AttentionVariant::DotProduct, shape)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(Report { rows })
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
struct CsvRecord {
    variant: AttentionVariant,
    n_q: usize,
    n_k: usize,
    d: usize,
    d_v: usize,
    mults: u64,
    adds_subs: u64,
    abs_ops: u64,
    relu_ops: u64,
    exps: u64,
    divs: u64,
}

impl CsvRecord {
    fn new(variant: AttentionVariant, s: HeadShape, c: OpCounters) -> Self {
        Self {
            variant,
            n_q: s.n_q,
            n_k: s.n_k,
            d: s.d,
            d_v: s.d_v,
            mults: c.mults,
            adds_subs: c.adds_subs,
            abs_ops: c.abs_ops,
            relu_ops: c.relu_ops,
            exps: c.exps,
            divs: c.divs,
        }
    }

    fn counters(&self) -> OpCounters {
        OpCounters {
            mults: self.mults,
            adds_subs: self.adds_subs,
            abs_ops: self.abs_ops,
            relu_ops: self.relu_ops,
            exps: self.exps,
            divs: self.divs,
        }
    }
}

impl Report {
    /// Two lines per shape (inhibitor first) under [`CSV_HEADER`].
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(CsvRecord::new(AttentionVariant::Inhibitor, r.shape, r.inhibitor))
                .expect("in-memory csv write");
            w.serialize(CsvRecord::new(AttentionVariant::DotProduct, r.shape, r.dot_product))
                .expect("in-memory csv write");
        }
        String::from_utf8(w.into_inner().expect("in-memory csv flush")).expect("csv is utf-8")
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(text.as_bytes());
        let header = rdr
            .headers()
            .map_err(|e| Error::input(format!("csv header: {e}")))?
            .iter()
            .collect::<Vec<_>>()
            .join(",");
        if header != CSV_HEADER {
            return Err(Error::input(format!("unexpected csv header `{header}`")));
        }
        let recs: Vec<CsvRecord> = rdr
            .deserialize()
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::input(format!("csv record: {e}")))?;
        let mut rows = Vec::new();
        for pair in recs.chunks(2) {
            let [inh, dot] = pair else {
                return Err(Error::input("csv rows must come in variant pairs"));
            };
            if inh.variant != AttentionVariant::Inhibitor || dot.variant != AttentionVariant::DotProduct {
                return Err(Error::input("csv pair out of order"));
            }
            rows.push(ReportRow {
                shape: HeadShape::new(inh.n_q, inh.n_k, inh.d, inh.d_v),
                inhibitor: inh.counters(),
                dot_product: dot.counters(),
            });
        }
        Ok(Report { rows })
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:>5} {:>5} {:>4} {:>4}  {:<11} {:>12} {:>12} {:>10} {:>10} {:>10} {:>10}  {:>9}",
            "n_q", "n_k", "d", "d_v", "variant", "mults", "adds_subs", "abs", "relu", "exps", "divs", "mult x"
        );
        for r in &self.rows {
            for (variant, c) in [
                (AttentionVariant::Inhibitor, r.inhibitor),
                (AttentionVariant::DotProduct, r.dot_product),
            ] {
                let ratio = if variant == AttentionVariant::Inhibitor {
                    format!("{:.2}", r.mult_ratio())
                } else {
                    String::new()
                };
                let _ = writeln!(
                    s,
                    "{:>5} {:>5} {:>4} {:>4}  {:<11} {:>12} {:>12} {:>10} {:>10} {:>10} {:>10}  {:>9}",
                    r.shape.n_q,
                    r.shape.n_k,
                    r.shape.d,
                    r.shape.d_v,
                    variant.as_str(),
                    c.mults,
                    c.adds_subs,
                    c.abs_ops,
                    c.relu_ops,
                    c.exps,
                    c.divs,
                    ratio
                );
            }
        }
        s
    }
}

/// Parses `n=2,d=2,dv=2;n=512,d=64,dv=64`. Keys: `n` (sets both query and
/// key counts), `nq`, `nk`, `d`, `dv` (defaults to `d`).
pub fn parse_grid(spec: &str) -> Result<Vec<HeadShape>> {
    let mut out = Vec::new();
    for (idx, item) in spec.split(';').map(str::trim).filter(|s| !s.is_empty()).enumerate() {
        let bad = |msg: String| Error::input(format!("grid entry {} `{item}`: {msg}", idx + 1));
        let (mut nq, mut nk, mut d, mut dv) = (None, None, None, None);
        for kv in item.split(',') {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| bad(format!("expected key=value, got `{kv}`")))?;
            let v = usize::from_str(v.trim()).map_err(|e| bad(format!("`{}`: {e}", v.trim())))?;
            match k.trim() {
                "n" => {
                    nq = Some(v);
                    nk = Some(v);
                }
                "nq" | "n_q" => nq = Some(v),
                "nk" | "n_k" => nk = Some(v),
                "d" => d = Some(v),
                "dv" | "d_v" => dv = Some(v),
                other => return Err(bad(format!("unknown key `{other}`"))),
            }
        }
        let d = d.ok_or_else(|| bad("missing d".into()))?;
        let shape = HeadShape {
            n_q: nq.ok_or_else(|| bad("missing n or nq".into()))?,
            n_k: nk.ok_or_else(|| bad("missing n or nk".into()))?,
            d,
            d_v: dv.unwrap_or(d),
        };
        shape.validate().map_err(|e| bad(e.to_string()))?;
        out.push(shape);
    }
    if out.is_empty() {
        return Err(Error::input("grid is empty"));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_shape_mults() {
        let s = HeadShape::square(2, 2, 2);
        let dot = closed_form_counts(AttentionVariant::DotProduct, s).unwrap();
        let inh = closed_form_counts(AttentionVariant::Inhibitor, s).unwrap();
        assert_eq!(dot.mults, 8 + 4 + 8);
        assert_eq!(inh.mults, 4 + 4);
        assert_eq!(inh.exps, 0);
    }

    #[test]
    fn full_scale_ratio() {
        let r = compare_report(&[HeadShape::square(64, 64, 64)]).unwrap();
        // (64³ + 64² + 64³) / (64² + 64²)
        assert_eq!(r.rows[0].mult_ratio(), 64.5);
    }

    #[test]
    fn measured_matches_closed_form_small() {
        for v in AttentionVariant::ALL {
            let s = HeadShape::new(3, 4, 5, 2);
            assert_eq!(instrumented_counts(v, s, 1).unwrap(), closed_form_counts(v, s).unwrap());
        }
    }

    #[test]
    fn measure_requires_instrumentation() {
        let mut t = Tape::new();
        assert!(matches!(measure(&mut t, |_| Ok(())), Err(Error::Contract(_))));
    }

    #[test]
    fn counters_zero_outside_region() {
        let mut t = Tape::instrumented();
        let a = t.constant(Tensor::filled(&[2, 2], 1.0));
        let (_, c) = measure(&mut t, |t| t.matmul(a, a)).unwrap();
        assert_eq!(c.mults, 8);
        let (_, idle) = measure(&mut t, |_| Ok(())).unwrap();
        assert!(idle.is_zero());
    }

    #[test]
    fn grid_parsing() {
        let g = parse_grid("n=2,d=2,dv=2").unwrap();
        assert_eq!(g, vec![HeadShape::square(2, 2, 2)]);
        let g = parse_grid("nq=3,nk=5,d=4; n=8,d=2").unwrap();
        assert_eq!(g[0], HeadShape::new(3, 5, 4, 4));
        assert_eq!(g[1], HeadShape::square(8, 2, 2));
        assert!(parse_grid("n=2,d=2,zz=1").is_err());
        assert!(parse_grid("n=2").is_err());
        assert!(parse_grid("n=0,d=1").is_err());
        assert!(parse_grid("").is_err());
    }

    #[test]
    fn single_shape_single_row() {
        let r = compare_report(&[HeadShape::square(2, 2, 2)]).unwrap();
        assert_eq!(r.rows.len(), 1);
        assert!(compare_report(&[]).is_err());
    }
}
