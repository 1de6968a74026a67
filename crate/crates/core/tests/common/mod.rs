#![allow(dead_code)]

use inhibitor::attention::{center_shift, dot_product_attention, inhibitor_attention, manhattan_scores, AttentionMask};
use inhibitor::data::synthetic::{random_text, PlantedTask};
use inhibitor::data::{Dataset, Example, Tokenizer};
use inhibitor::{Tape, Tensor};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Matrix = Vec<Vec<f64>>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_matrix(rng: &mut impl Rng, rows: usize, cols: usize) -> Matrix {
    (0..rows)
        .map(|_| (0..cols).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect()
}

pub fn tensor(m: &Matrix) -> Tensor {
    Tensor::from_rows(m).unwrap()
}

pub fn rows(t: &Tensor) -> Matrix {
    let (r, _) = t.dims2("rows").unwrap();
    (0..r).map(|i| t.row(i).to_vec()).collect()
}

pub fn max_abs_diff(a: &Matrix, b: &Matrix) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| {
            assert_eq!(x.len(), y.len());
            x.iter().zip(y).map(|(p, q)| (p - q).abs())
        })
        .fold(0.0, f64::max)
}

/// Scalar-loop `Z̄`. Masked entries are reported as `None`.
pub fn naive_zbar(q: &Matrix, k: &Matrix, gamma: f64, delta: f64, keep: Option<&[bool]>) -> Vec<Vec<Option<f64>>> {
    let n_k = k.len();
    let d = q[0].len();
    let kept = |i: usize, j: usize| keep.is_none_or(|m| m[i * n_k + j]);
    let mut out = Vec::new();
    for (i, qi) in q.iter().enumerate() {
        let mut z = vec![0.0; n_k];
        for (j, kj) in k.iter().enumerate() {
            let mut dist = 0.0;
            for c in 0..d {
                dist += (qi[c] - kj[c]).abs();
            }
            z[j] = gamma * dist / (d as f64).sqrt();
        }
        let mut sum = 0.0;
        let mut count = 0.0;
        for j in 0..n_k {
            if kept(i, j) {
                sum += z[j];
                count += 1.0;
            }
        }
        let mean = sum / count;
        out.push(
            (0..n_k)
                .map(|j| kept(i, j).then(|| (z[j] - mean - delta).max(0.0)))
                .collect(),
        );
    }
    out
}

/// Scalar-loop inhibitor head; masked keys are skipped outright.
pub fn naive_inhibitor(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    gamma: f64,
    eta: f64,
    delta: f64,
    keep: Option<&[bool]>,
) -> Matrix {
    let zbar = naive_zbar(q, k, gamma, delta, keep);
    let d_v = v[0].len();
    zbar.iter()
        .map(|zi| {
            (0..d_v)
                .map(|c| {
                    let mut acc = 0.0;
                    for (j, z) in zi.iter().enumerate() {
                        let Some(z) = z else { continue };
                        let x = v[j][c];
                        let pos = (x.max(0.0) - z).max(0.0);
                        let neg = (x.min(0.0) + z).min(0.0);
                        acc += pos + neg;
                    }
                    eta * acc
                })
                .collect()
        })
        .collect()
}

/// Scalar-loop scaled dot-product head with a max-shifted softmax.
pub fn naive_dot(q: &Matrix, k: &Matrix, v: &Matrix, keep: Option<&[bool]>) -> Matrix {
    let n_k = k.len();
    let d = q[0].len();
    let d_v = v[0].len();
    let kept = |i: usize, j: usize| keep.is_none_or(|m| m[i * n_k + j]);
    q.iter()
        .enumerate()
        .map(|(i, qi)| {
            let s: Vec<f64> = k
                .iter()
                .map(|kj| qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() / (d as f64).sqrt())
                .collect();
            let max = (0..n_k).filter(|&j| kept(i, j)).map(|j| s[j]).fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = (0..n_k)
                .map(|j| if kept(i, j) { (s[j] - max).exp() } else { 0.0 })
                .collect();
            let total: f64 = e.iter().sum();
            (0..d_v)
                .map(|c| (0..n_k).map(|j| e[j] / total * v[j][c]).sum())
                .collect()
        })
        .collect()
}

/// Scalar-loop layer norm over each row.
pub fn naive_layer_norm(x: &Matrix, scale: &[f64], bias: &[f64], eps: f64) -> Matrix {
    x.iter()
        .map(|r| {
            let n = r.len() as f64;
            let mean = r.iter().sum::<f64>() / n;
            let var = r.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
            r.iter()
                .enumerate()
                .map(|(c, a)| (a - mean) / (var + eps).sqrt() * scale[c] + bias[c])
                .collect()
        })
        .collect()
}

pub struct HeadInputs {
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
    pub gamma: f64,
    pub eta: f64,
    pub delta: f64,
}

impl HeadInputs {
    pub fn random(rng: &mut impl Rng, n_q: usize, n_k: usize, d: usize, d_v: usize) -> Self {
        Self {
            q: rand_matrix(rng, n_q, d),
            k: rand_matrix(rng, n_k, d),
            v: rand_matrix(rng, n_k, d_v),
            gamma: rng.random_range(0.25..2.0),
            eta: rng.random_range(0.25..2.0),
            delta: rng.random_range(-0.5..0.5),
        }
    }

    pub fn inhibitor(&self, mask: Option<&AttentionMask>) -> Tensor {
        let mut tape = Tape::new();
        let q = tape.leaf(tensor(&self.q), false);
        let k = tape.leaf(tensor(&self.k), false);
        let v = tape.leaf(tensor(&self.v), false);
        let g = tape.leaf(Tensor::scalar(self.gamma), false);
        let e = tape.leaf(Tensor::scalar(self.eta), false);
        let d = tape.leaf(Tensor::scalar(self.delta), false);
        let out = inhibitor_attention(&mut tape, q, k, v, g, e, d, mask, None).unwrap();
        tape.value(out).clone()
    }

    pub fn zbar(&self, mask: Option<&AttentionMask>) -> Tensor {
        let mut tape = Tape::new();
        let q = tape.leaf(tensor(&self.q), false);
        let k = tape.leaf(tensor(&self.k), false);
        let g = tape.leaf(Tensor::scalar(self.gamma), false);
        let d = tape.leaf(Tensor::scalar(self.delta), false);
        let z = manhattan_scores(&mut tape, q, k, g).unwrap();
        let zbar = center_shift(&mut tape, z, d, mask).unwrap();
        tape.value(zbar).clone()
    }

    pub fn dot(&self, mask: Option<&AttentionMask>) -> Tensor {
        let mut tape = Tape::new();
        let q = tape.leaf(tensor(&self.q), false);
        let k = tape.leaf(tensor(&self.k), false);
        let v = tape.leaf(tensor(&self.v), false);
        let out = dot_product_attention(&mut tape, q, k, v, mask, None).unwrap();
        tape.value(out).clone()
    }
}

/// Random keep-mask with at least one kept key per query.
pub fn random_mask(rng: &mut impl Rng, n_q: usize, n_k: usize) -> Vec<bool> {
    let mut keep: Vec<bool> = (0..n_q * n_k).map(|_| rng.random_bool(0.7)).collect();
    for i in 0..n_q {
        let j = rng.random_range(0..n_k);
        keep[i * n_k + j] = true;
    }
    keep
}

pub fn text_dataset(n: usize, length: usize, seed: u64) -> Dataset {
    let tok = Tokenizer::byte_level();
    Dataset::new(
        random_text(n, length, seed)
            .iter()
            .map(|t| Example {
                tokens: tok.encode(t),
                label: None,
            })
            .collect(),
    )
}

pub fn planted_dataset(task: &PlantedTask, n: usize, seed: u64) -> Dataset {
    let tok = Tokenizer::byte_level();
    Dataset::new(
        task.generate(n, seed)
            .unwrap()
            .into_iter()
            .map(|(l, t)| Example {
                tokens: tok.encode(&t),
                label: Some(l),
            })
            .collect(),
    )
}
