//! Forward primitives. Each records one tape node and, on an instrumented
//! tape, its arithmetic:
//!
//! | primitive        | mults   | adds_subs          | abs   | relu        | exps | divs        |
//! |------------------|---------|--------------------|-------|-------------|------|-------------|
//! | matmul m×k·k×n   | m·n·k   | m·n·(k−1)          |       |             |      |             |
//! | add/sub/add_row  |         | numel              |       |             |      |             |
//! | mul, scale       | numel   |                    |       |             |      |             |
//! | sub_rows/_scalar |         | numel              |       |             |      |             |
//! | halfrect         |         |                    |       | numel       |      |             |
//! | abs_diff_sum     |         | m·n·d + m·n·(d−1)  | m·n·d |             |      |             |
//! | reduce_mean      |         | Σ(count−1)         |       |             |      | slices      |
//! | softmax_rows     |         | c + (c−1) per row  |       |             | c    | c per row   |
//! | inhibitor_mix    | see [`Tape::inhibitor_mix`]                                              |
//! | sum              |         | numel−1            |       |             |      |             |
//!
//! `c` is the number of unmasked entries of a row. Layer norm, GELU, tanh,
//! dropout, gathers and the loss primitives are not tallied.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tape::{gelu, split_axis, Op, Sign, Tape, Var};
use crate::tensor::Tensor;

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(op, a.shape(), b.shape()));
    }
    Ok(())
}

fn check_mask(op: &'static str, mask: &[bool], shape: &[usize]) -> Result<()> {
    let n: usize = shape.iter().product();
    if mask.len() != n {
        return Err(Error::dim(op, shape, &[mask.len()]));
    }
    Ok(())
}

fn log_softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    row.iter().map(|x| x - lse).collect()
}

impl Tape {
    /// `C[i][j] = Σ_k A[i][k]·B[k][j]`, reduced in ascending `k`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let av = self.shared_value(a);
        let bv = self.shared_value(b);
        let (m, k) = av.dims2("matmul")?;
        let (k2, n) = bv.dims2("matmul")?;
        if k != k2 {
            return Err(Error::dim("matmul", av.shape(), bv.shape()));
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for kk in 0..k {
                let a_ik = av.data()[i * k + kk];
                let b_row = &bv.data()[kk * n..(kk + 1) * n];
                for (o, b) in row.iter_mut().zip(b_row) {
                    *o += a_ik * b;
                }
            }
        }
        let (m, n, k) = (m as u64, n as u64, k as u64);
        self.count(|c| {
            c.mults += m * n * k;
            c.adds_subs += m * n * (k - 1);
        });
        Ok(self.push(Tensor::new(vec![m as usize, n as usize], out)?, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).transpose()?;
        Ok(self.push(t, Op::Transpose(x)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a, b), true)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub(a, b), true)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul(a, b), false)
    }

    fn zip_with(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
        additive: bool,
    ) -> Result<Var> {
        let av = self.shared_value(a);
        let bv = self.shared_value(b);
        same_shape(name, &av, &bv)?;
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| f(*x, *y)).collect();
        let n = av.len() as u64;
        self.count(|c| {
            if additive {
                c.adds_subs += n
            } else {
                c.mults += n
            }
        });
        Ok(self.push(Tensor::new(av.shape().to_vec(), data)?, op))
    }

    /// Adds vector `b` (length `n`) to every row of `x` (`m×n`).
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let xv = self.shared_value(x);
        let bv = self.shared_value(b);
        let (_, n) = xv.dims2("add_row")?;
        if bv.len() != n {
            return Err(Error::dim("add_row", xv.shape(), bv.shape()));
        }
        let data = xv
            .data()
            .chunks(n)
            .flat_map(|row| row.iter().zip(bv.data()).map(|(a, b)| a + b))
            .collect();
        let cnt = xv.len() as u64;
        self.count(|c| c.adds_subs += cnt);
        Ok(self.push(Tensor::new(xv.shape().to_vec(), data)?, Op::AddRow(x, b)))
    }

    /// `x · (by · constant)`. The factor is formed once and applied with a
    /// single multiply per element.
    pub fn scale(&mut self, x: Var, by: Option<Var>, constant: f64) -> Result<Var> {
        let s = match by {
            Some(b) => {
                let bv = self.value(b);
                if !bv.is_scalar() {
                    return Err(Error::dim("scale", bv.shape(), &[1]));
                }
                bv.item() * constant
            }
            None => constant,
        };
        let xv = self.shared_value(x);
        let data = xv.data().iter().map(|v| v * s).collect();
        let n = xv.len() as u64;
        self.count(|c| c.mults += n);
        Ok(self.push(
            Tensor::new(xv.shape().to_vec(), data)?,
            Op::Scale { x, by, constant },
        ))
    }

    /// `x[i][j] − r[i]`.
    pub fn sub_rows(&mut self, x: Var, r: Var) -> Result<Var> {
        let xv = self.shared_value(x);
        let rv = self.shared_value(r);
        let (m, n) = xv.dims2("sub_rows")?;
        if rv.len() != m {
            return Err(Error::dim("sub_rows", xv.shape(), rv.shape()));
        }
        let data = xv
            .data()
            .chunks(n)
            .zip(rv.data())
            .flat_map(|(row, r)| row.iter().map(move |v| v - r))
            .collect();
        let cnt = xv.len() as u64;
        self.count(|c| c.adds_subs += cnt);
        Ok(self.push(Tensor::new(xv.shape().to_vec(), data)?, Op::SubRows(x, r)))
    }

    /// `x − s` for a scalar node `s`.
    pub fn sub_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        let sv = self.value(s);
        if !sv.is_scalar() {
            return Err(Error::dim("sub_scalar", sv.shape(), &[1]));
        }
        let s_val = sv.item();
        let xv = self.shared_value(x);
        let data = xv.data().iter().map(|v| v - s_val).collect();
        let cnt = xv.len() as u64;
        self.count(|c| c.adds_subs += cnt);
        Ok(self.push(Tensor::new(xv.shape().to_vec(), data)?, Op::SubScalar(x, s)))
    }

    /// `(x)+ = max(x, 0)` or `(x)- = min(x, 0)`, elementwise.
    pub fn halfrect(&mut self, x: Var, sign: Sign) -> Result<Var> {
        let xv = self.shared_value(x);
        let data = xv
            .data()
            .iter()
            .map(|&v| match sign {
                Sign::Positive => v.max(0.0),
                Sign::Negative => v.min(0.0),
            })
            .collect();
        let cnt = xv.len() as u64;
        self.count(|c| c.relu_ops += cnt);
        Ok(self.push(Tensor::new(xv.shape().to_vec(), data)?, Op::HalfRect(x, sign)))
    }

    /// Unscaled Manhattan distance between every row of `q` and every row of `k`.
    pub fn abs_diff_sum(&mut self, q: Var, k: Var) -> Result<Var> {
        let qv = self.shared_value(q);
        let kv = self.shared_value(k);
        let (m, d) = qv.dims2("abs_diff_sum")?;
        let (n, d2) = kv.dims2("abs_diff_sum")?;
        if d != d2 {
            return Err(Error::dim("abs_diff_sum", qv.shape(), kv.shape()));
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let qi = &qv.data()[i * d..(i + 1) * d];
            for j in 0..n {
                let kj = &kv.data()[j * d..(j + 1) * d];
                out[i * n + j] = qi.iter().zip(kj).map(|(a, b)| (a - b).abs()).sum();
            }
        }
        let (m, n, d) = (m as u64, n as u64, d as u64);
        self.count(|c| {
            c.adds_subs += m * n * d + m * n * (d - 1);
            c.abs_ops += m * n * d;
        });
        Ok(self.push(
            Tensor::new(vec![m as usize, n as usize], out)?,
            Op::AbsDiffSum(q, k),
        ))
    }

    /// Mean over `axis`, restricted to entries where `mask` is true.
    /// The mask must have `x`'s element count.
    pub fn reduce_mean_axis(&mut self, x: Var, axis: usize, mask: Option<&[bool]>) -> Result<Var> {
        let xv = self.shared_value(x);
        let shape = xv.shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::contract(format!(
                "axis {axis} out of range for rank {}",
                shape.len()
            )));
        }
        if let Some(m) = mask {
            check_mask("reduce_mean_axis", m, &shape)?;
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let mut out = vec![0.0; outer * inner];
        let mut counts = vec![0usize; outer * inner];
        for o in 0..outer {
            for r in 0..inner {
                let mut sum = 0.0;
                let mut cnt = 0;
                for a in 0..len {
                    let idx = (o * len + a) * inner + r;
                    if mask.is_none_or(|m| m[idx]) {
                        sum += xv.data()[idx];
                        cnt += 1;
                    }
                }
                if cnt == 0 {
                    return Err(Error::DegenerateReduction {
                        op: "reduce_mean_axis",
                        detail: format!("slice {} along axis {axis} is fully masked", o * inner + r),
                    });
                }
                out[o * inner + r] = sum / cnt as f64;
                counts[o * inner + r] = cnt;
            }
        }
        let adds: u64 = counts.iter().map(|&c| c as u64 - 1).sum();
        let slices = counts.len() as u64;
        self.count(|c| {
            c.adds_subs += adds;
            c.divs += slices;
        });
        let mut out_shape: Vec<usize> = shape.clone();
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        Ok(self.push(
            Tensor::new(out_shape, out)?,
            Op::ReduceMean {
                x,
                axis,
                mask: mask.map(Arc::from),
                counts,
            },
        ))
    }

    /// Overwrites entries where `keep` is false with `fill`; those entries
    /// receive zero gradient.
    pub fn mask_fill(&mut self, x: Var, keep: &[bool], fill: f64) -> Result<Var> {
        let xv = self.shared_value(x);
        check_mask("mask_fill", keep, xv.shape())?;
        let data = xv
            .data()
            .iter()
            .zip(keep)
            .map(|(&v, &k)| if k { v } else { fill })
            .collect();
        Ok(self.push(
            Tensor::new(xv.shape().to_vec(), data)?,
            Op::MaskFill {
                x,
                mask: Arc::from(keep),
            },
        ))
    }

    /// Row softmax with row-max subtraction. Masked entries act as −∞ and
    /// come out exactly 0.
    pub fn softmax_rows(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let xv = self.shared_value(x);
        let (m, n) = xv.dims2("softmax_rows")?;
        if let Some(mk) = mask {
            check_mask("softmax_rows", mk, xv.shape())?;
        }
        let mut out = vec![0.0; m * n];
        let mut active_total = 0u64;
        for r in 0..m {
            let live = |c: usize| mask.is_none_or(|mk| mk[r * n + c]);
            let row = xv.row(r);
            let max = (0..n)
                .filter(|&c| live(c))
                .map(|c| row[c])
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(Error::DegenerateReduction {
                    op: "softmax_rows",
                    detail: format!("row {r} is fully masked"),
                });
            }
            let mut sum = 0.0;
            for c in 0..n {
                if live(c) {
                    let e = (row[c] - max).exp();
                    out[r * n + c] = e;
                    sum += e;
                    active_total += 1;
                }
            }
            for c in 0..n {
                if live(c) {
                    out[r * n + c] /= sum;
                }
            }
        }
        let rows = m as u64;
        self.count(|c| {
            c.adds_subs += active_total + (active_total - rows);
            c.exps += active_total;
            c.divs += active_total;
        });
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::Softmax(x)))
    }

    /// ReLU-gated value mixing:
    /// `out[i][l] = Σ_j keep[i][j]·((V⁺[j][l] − Z̄[i][j])⁺ + (V⁻[j][l] + Z̄[i][j])⁻)`.
    ///
    /// `keep` (optional, `n_q×n_k`) scales each key's summand and implements
    /// attention dropout. Without it the primitive tallies
    /// `relu = 2·n_k·d_v + 2·n_q·n_k·d_v` and
    /// `adds_subs = 2·n_q·n_k·d_v + n_q·d_v·(2·n_k − 1)` with no multiplies.
    pub fn inhibitor_mix(&mut self, zbar: Var, v: Var, keep: Option<Vec<f64>>) -> Result<Var> {
        let zv = self.shared_value(zbar);
        let vv = self.shared_value(v);
        let (nq, nk) = zv.dims2("inhibitor_mix")?;
        let (nk2, dv) = vv.dims2("inhibitor_mix")?;
        if nk != nk2 {
            return Err(Error::dim("inhibitor_mix", zv.shape(), vv.shape()));
        }
        if let Some(k) = &keep {
            if k.len() != nq * nk {
                return Err(Error::dim("inhibitor_mix", zv.shape(), &[k.len()]));
            }
        }
        let vp: Vec<f64> = vv.data().iter().map(|x| x.max(0.0)).collect();
        let vn: Vec<f64> = vv.data().iter().map(|x| x.min(0.0)).collect();
        let mut out = vec![0.0; nq * dv];
        for i in 0..nq {
            for j in 0..nk {
                let z = zv.data()[i * nk + j];
                let s = keep.as_ref().map_or(1.0, |k| k[i * nk + j]);
                let row = &mut out[i * dv..(i + 1) * dv];
                for (l, o) in row.iter_mut().enumerate() {
                    let term = (vp[j * dv + l] - z).max(0.0) + (vn[j * dv + l] + z).min(0.0);
                    *o += if keep.is_some() { s * term } else { term };
                }
            }
        }
        let (nq, nk, dv) = (nq as u64, nk as u64, dv as u64);
        let dropout = keep.is_some();
        self.count(|c| {
            c.relu_ops += 2 * nk * dv + 2 * nq * nk * dv;
            c.adds_subs += 2 * nq * nk * dv + nq * dv * (2 * nk - 1);
            if dropout {
                c.mults += nq * nk * dv;
            }
        });
        Ok(self.push(
            Tensor::new(vec![nq as usize, dv as usize], out)?,
            Op::InhibitorMix { zbar, v, keep },
        ))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let xv = self.shared_value(x);
        let s = xv.data().iter().sum();
        let n = xv.len() as u64;
        self.count(|c| c.adds_subs += n - 1);
        Ok(self.push(Tensor::scalar(s), Op::Sum(x)))
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let xv = self.shared_value(x);
        let data = xv.data().iter().map(|&v| gelu(v)).collect();
        Ok(self.push(Tensor::new(xv.shape().to_vec(), data)?, Op::Gelu(x)))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let xv = self.shared_value(x);
        let data = xv.data().iter().map(|v| v.tanh()).collect();
        Ok(self.push(Tensor::new(xv.shape().to_vec(), data)?, Op::Tanh(x)))
    }

    /// Row-wise layer normalization with affine `gamma`, `beta` (length `n`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let xv = self.shared_value(x);
        let (m, n) = xv.dims2("layer_norm")?;
        let gv = self.shared_value(gamma);
        let bv = self.shared_value(beta);
        if gv.len() != n || bv.len() != n {
            return Err(Error::dim("layer_norm", xv.shape(), gv.shape()));
        }
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for c in 0..n {
                let h = (row[c] - mean) * is;
                xhat[r * n + c] = h;
                out[r * n + c] = h * gv.data()[c] + bv.data()[c];
            }
        }
        Ok(self.push(
            Tensor::new(vec![m, n], out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        ))
    }

    /// Rows of `table` selected by `ids`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.shared_value(table);
        let (rows, d) = tv.dims2("gather_rows")?;
        if ids.is_empty() {
            return Err(Error::input("gather_rows needs at least one id"));
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= rows {
                return Err(Error::input(format!("id {id} out of range for table of {rows} rows")));
            }
            out.extend_from_slice(tv.row(id));
        }
        Ok(self.push(
            Tensor::new(vec![ids.len(), d], out)?,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::contract("concat_cols needs at least one part"))?;
        let (m, _) = self.value(*first).dims2("concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let (pm, w) = self.value(*p).dims2("concat_cols")?;
            if pm != m {
                return Err(Error::dim("concat_cols", self.shape(*first), self.shape(*p)));
            }
            widths.push(w);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for r in 0..m {
            for p in parts {
                out.extend_from_slice(self.value(*p).row(r));
            }
        }
        Ok(self.push(Tensor::new(vec![m, total], out)?, Op::ConcatCols(parts.to_vec())))
    }

    /// Rows `start .. start + count` of a matrix.
    pub fn select_rows(&mut self, x: Var, start: usize, count: usize) -> Result<Var> {
        let xv = self.shared_value(x);
        let (m, n) = xv.dims2("select_rows")?;
        if count == 0 || start + count > m {
            return Err(Error::contract(format!(
                "row range {start}..{} outside 0..{m}",
                start + count
            )));
        }
        let data = xv.data()[start * n..(start + count) * n].to_vec();
        Ok(self.push(Tensor::new(vec![count, n], data)?, Op::SelectRows { x, start }))
    }

    /// Multiplies by a precomputed keep mask (entries `0` or `1/(1−p)`).
    pub fn dropout(&mut self, x: Var, keep: Vec<f64>) -> Result<Var> {
        let xv = self.shared_value(x);
        if keep.len() != xv.len() {
            return Err(Error::dim("dropout", xv.shape(), &[keep.len()]));
        }
        let data = xv.data().iter().zip(&keep).map(|(a, k)| a * k).collect();
        Ok(self.push(Tensor::new(xv.shape().to_vec(), data)?, Op::Dropout { x, keep }))
    }

    /// Mean squared difference against a detached target, over rows where
    /// `rows` is true (all rows if `None`) and all features.
    pub fn mse(&mut self, x: Var, target: Arc<Tensor>, rows: Option<&[bool]>) -> Result<Var> {
        let xv = self.shared_value(x);
        same_shape("mse", &xv, &target)?;
        let m = xv.shape()[0];
        let n = xv.len() / m;
        if let Some(r) = rows {
            if r.len() != m {
                return Err(Error::dim("mse", xv.shape(), &[r.len()]));
            }
        }
        let live_rows = rows.map_or(m, |r| r.iter().filter(|&&b| b).count());
        if live_rows == 0 {
            return Err(Error::DegenerateReduction {
                op: "mse",
                detail: "every row is masked".into(),
            });
        }
        let denom = (live_rows * n) as f64;
        let mut s = 0.0;
        for (idx, (a, b)) in xv.data().iter().zip(target.data()).enumerate() {
            if rows.is_none_or(|r| r[idx / n]) {
                s += (a - b) * (a - b);
            }
        }
        Ok(self.push(
            Tensor::scalar(s / denom),
            Op::Mse {
                x,
                target,
                rows: rows.map(<[bool]>::to_vec),
                denom,
            },
        ))
    }

    /// Mean over the batch of `−log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.shared_value(logits);
        let (b, c) = lv.dims2("cross_entropy")?;
        if labels.len() != b {
            return Err(Error::dim("cross_entropy", lv.shape(), &[labels.len()]));
        }
        let mut probs = Vec::with_capacity(b * c);
        let mut loss = 0.0;
        for (r, &y) in labels.iter().enumerate() {
            if y >= c {
                return Err(Error::input(format!("label {y} out of range for {c} classes")));
            }
            let ls = log_softmax_row(lv.row(r));
            loss -= ls[y];
            probs.extend(ls.iter().map(|v| v.exp()));
        }
        Ok(self.push(
            Tensor::scalar(loss / b as f64),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// `T² · mean_b KL(softmax(teacher/T) ‖ softmax(student/T))`; the teacher
    /// side is a detached constant.
    pub fn soft_kd(&mut self, student_logits: Var, teacher_logits: &Tensor, temperature: f64) -> Result<Var> {
        if !(temperature > 0.0) || !temperature.is_finite() {
            return Err(Error::contract(format!(
                "temperature must be positive, got {temperature}"
            )));
        }
        let sv = self.shared_value(student_logits);
        same_shape("soft_kd", &sv, teacher_logits)?;
        let (b, c) = sv.dims2("soft_kd")?;
        let mut teacher_probs = Vec::with_capacity(b * c);
        let mut student_probs = Vec::with_capacity(b * c);
        let mut kl = 0.0;
        for r in 0..b {
            let lt = log_softmax_row(&teacher_logits.row(r).iter().map(|v| v / temperature).collect::<Vec<_>>());
            let ls = log_softmax_row(&sv.row(r).iter().map(|v| v / temperature).collect::<Vec<_>>());
            for k in 0..c {
                let pt = lt[k].exp();
                if pt > 0.0 {
                    kl += pt * (lt[k] - ls[k]);
                }
                teacher_probs.push(pt);
                student_probs.push(ls[k].exp());
            }
        }
        // KL is non-negative; clamp roundoff below zero.
        let loss = (temperature * temperature * kl / b as f64).max(0.0);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftKd {
                logits: student_logits,
                teacher_probs,
                student_probs,
                temperature,
            },
        ))
    }
}
