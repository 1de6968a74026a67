//! Reverse-mode differentiation over a linear record of primitive ops.
//!
//! Every primitive appends one node holding its output value and the handles
//! of its operands. Operands always precede their results, so a single
//! reverse sweep over the node list is a valid topological traversal.

use std::sync::Arc;

use crate::counters::OpCounters;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which half of the rectifier pair: `(x)+ = max(x, 0)`, `(x)- = min(x, 0)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sign {
    Positive,
    Negative,
}

#[derive(Debug)]
pub(crate) enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale {
        x: Var,
        by: Option<Var>,
        constant: f64,
    },
    SubRows(Var, Var),
    SubScalar(Var, Var),
    HalfRect(Var, Sign),
    AbsDiffSum(Var, Var),
    ReduceMean {
        x: Var,
        axis: usize,
        mask: Option<Arc<[bool]>>,
        counts: Vec<usize>,
    },
    MaskFill {
        x: Var,
        mask: Arc<[bool]>,
    },
    Softmax(Var),
    InhibitorMix {
        zbar: Var,
        v: Var,
        keep: Option<Vec<f64>>,
    },
    Sum(Var),
    Gelu(Var),
    Tanh(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    ConcatCols(Vec<Var>),
    SelectRows {
        x: Var,
        start: usize,
    },
    Dropout {
        x: Var,
        keep: Vec<f64>,
    },
    Mse {
        x: Var,
        target: Arc<Tensor>,
        rows: Option<Vec<bool>>,
        denom: f64,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    SoftKd {
        logits: Var,
        teacher_probs: Vec<f64>,
        student_probs: Vec<f64>,
        temperature: f64,
    },
}

impl Op {
    fn operands(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            MatMul(a, b) | Add(a, b) | Sub(a, b) | Mul(a, b) | AddRow(a, b) | SubRows(a, b)
            | SubScalar(a, b) | AbsDiffSum(a, b) => vec![*a, *b],
            Transpose(x) | HalfRect(x, _) | Softmax(x) | Sum(x) | Gelu(x) | Tanh(x) => vec![*x],
            Scale { x, by, .. } => std::iter::once(*x).chain(*by).collect(),
            ReduceMean { x, .. } | MaskFill { x, .. } | SelectRows { x, .. } | Dropout { x, .. } => {
                vec![*x]
            }
            InhibitorMix { zbar, v, .. } => vec![*zbar, *v],
            LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Gather { table, .. } => vec![*table],
            ConcatCols(parts) => parts.clone(),
            Mse { x, .. } => vec![*x],
            CrossEntropy { logits, .. } | SoftKd { logits, .. } => vec![*logits],
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Ordered record of executed primitives (the gradient tape).
///
/// A tape is owned by one thread at a time; independent tapes may run
/// concurrently against shared read-only parameters.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    counters: Option<OpCounters>,
    swept: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape that tallies arithmetic for every primitive it records.
    pub fn instrumented() -> Self {
        Self {
            counters: Some(OpCounters::ZERO),
            ..Self::default()
        }
    }

    /// Snapshot of the running tallies, `None` if instrumentation is off.
    pub fn counters(&self) -> Option<OpCounters> {
        self.counters
    }

    pub(crate) fn count(&mut self, f: impl FnOnce(&mut OpCounters)) {
        if let Some(c) = self.counters.as_mut() {
            f(c);
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.leaf_shared(Arc::new(value), requires_grad)
    }

    pub fn leaf_shared(&mut self, value: Arc<Tensor>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub(crate) fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = op
            .operands()
            .iter()
            .any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shared_value(&self, v: Var) -> Arc<Tensor> {
        Arc::clone(&self.nodes[v.0].value)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<f64>> {
        self.nodes[v.0].grad.take()
    }

    /// Clears every gradient buffer so `backward` may run again.
    pub fn reset_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.swept = false;
    }

    fn accumulate(&mut self, v: Var, contrib: &[f64]) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        match node.grad.as_mut() {
            Some(g) => {
                for (a, b) in g.iter_mut().zip(contrib) {
                    *a += b;
                }
            }
            None => node.grad = Some(contrib.to_vec()),
        }
    }

    fn accumulate_with(&mut self, v: Var, f: impl FnOnce(&mut [f64])) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        let n = node.value.len();
        f(node.grad.get_or_insert_with(|| vec![0.0; n]));
    }

    /// Populates `dloss/dx` for every `requires_grad` node reachable from
    /// `loss`. Gradients add up across multiple uses of a node.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.swept {
            return Err(Error::contract(
                "backward already ran on this tape; call reset_grads first",
            ));
        }
        if !self.value(loss).is_scalar() {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.swept = true;
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            for p in self.nodes[i].op.operands() {
                if p.0 >= i {
                    return Err(Error::Internal(format!(
                        "tape record {i} depends on later record {}",
                        p.0
                    )));
                }
            }
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            self.backprop_node(i, &g)?;
            self.nodes[i].grad = Some(g);
        }
        Ok(())
    }

    fn backprop_node(&mut self, i: usize, g: &[f64]) -> Result<()> {
        let out = Arc::clone(&self.nodes[i].value);
        // Temporarily move the op out so operand grads can be mutated.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        let res = self.backprop_op(&op, &out, g);
        self.nodes[i].op = op;
        res
    }

    fn backprop_op(&mut self, op: &Op, out: &Tensor, g: &[f64]) -> Result<()> {
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let av = self.shared_value(*a);
                let bv = self.shared_value(*b);
                let (m, k) = av.dims2("matmul")?;
                let n = bv.shape()[1];
                if self.requires_grad(*a) {
                    // dA = dC * B^T
                    let mut da = vec![0.0; m * k];
                    for r in 0..m {
                        for c in 0..k {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += g[r * n + j] * bv.data()[c * n + j];
                            }
                            da[r * k + c] = s;
                        }
                    }
                    self.accumulate(*a, &da);
                }
                if self.requires_grad(*b) {
                    // dB = A^T * dC
                    let mut db = vec![0.0; k * n];
                    for r in 0..m {
                        for c in 0..k {
                            let a_rc = av.data()[r * k + c];
                            for j in 0..n {
                                db[c * n + j] += a_rc * g[r * n + j];
                            }
                        }
                    }
                    self.accumulate(*b, &db);
                }
            }
            Op::Transpose(x) => {
                let (m, n) = out.dims2("transpose")?;
                let mut dx = vec![0.0; m * n];
                for r in 0..m {
                    for c in 0..n {
                        dx[c * m + r] = g[r * n + c];
                    }
                }
                self.accumulate(*x, &dx);
            }
            Op::Add(a, b) => {
                self.accumulate(*a, g);
                self.accumulate(*b, g);
            }
            Op::Sub(a, b) => {
                self.accumulate(*a, g);
                let neg: Vec<f64> = g.iter().map(|x| -x).collect();
                self.accumulate(*b, &neg);
            }
            Op::Mul(a, b) => {
                let av = self.shared_value(*a);
                let bv = self.shared_value(*b);
                let da: Vec<f64> = g.iter().zip(bv.data()).map(|(g, b)| g * b).collect();
                let db: Vec<f64> = g.iter().zip(av.data()).map(|(g, a)| g * a).collect();
                self.accumulate(*a, &da);
                self.accumulate(*b, &db);
            }
            Op::AddRow(x, b) => {
                self.accumulate(*x, g);
                let n = self.value(*b).len();
                self.accumulate_with(*b, |db| {
                    for row in g.chunks(n) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                });
            }
            Op::Scale { x, by, constant } => {
                let s = by.map_or(1.0, |b| self.value(b).item()) * constant;
                let dx: Vec<f64> = g.iter().map(|g| g * s).collect();
                self.accumulate(*x, &dx);
                if let Some(b) = by {
                    let xv = self.shared_value(*x);
                    let ds: f64 = g.iter().zip(xv.data()).map(|(g, x)| g * x).sum::<f64>() * constant;
                    self.accumulate(*b, &[ds]);
                }
            }
            Op::SubRows(x, r) => {
                self.accumulate(*x, g);
                let m = self.value(*r).len();
                let n = g.len() / m;
                let dr: Vec<f64> = g.chunks(n).map(|row| -row.iter().sum::<f64>()).collect();
                self.accumulate(*r, &dr);
            }
            Op::SubScalar(x, s) => {
                self.accumulate(*x, g);
                let ds = -g.iter().sum::<f64>();
                self.accumulate(*s, &[ds]);
            }
            Op::HalfRect(x, sign) => {
                let xv = self.shared_value(*x);
                let dx: Vec<f64> = g
                    .iter()
                    .zip(xv.data())
                    .map(|(g, &x)| {
                        let active = match sign {
                            Sign::Positive => x > 0.0,
                            Sign::Negative => x < 0.0,
                        };
                        if active {
                            *g
                        } else {
                            0.0
                        }
                    })
                    .collect();
                self.accumulate(*x, &dx);
            }
            Op::AbsDiffSum(q, k) => {
                let qv = self.shared_value(*q);
                let kv = self.shared_value(*k);
                let (m, d) = qv.dims2("abs_diff_sum")?;
                let n = kv.shape()[0];
                let mut dq = vec![0.0; m * d];
                let mut dk = vec![0.0; n * d];
                for i in 0..m {
                    for j in 0..n {
                        let gij = g[i * n + j];
                        if gij == 0.0 {
                            continue;
                        }
                        for c in 0..d {
                            let s = sign0(qv.data()[i * d + c] - kv.data()[j * d + c]);
                            dq[i * d + c] += gij * s;
                            dk[j * d + c] -= gij * s;
                        }
                    }
                }
                self.accumulate(*q, &dq);
                self.accumulate(*k, &dk);
            }
            Op::ReduceMean {
                x,
                axis,
                mask,
                counts,
            } => {
                let shape = self.shape(*x).to_vec();
                let (outer, len, inner) = split_axis(&shape, *axis);
                let mut dx = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    for r in 0..inner {
                        let slot = o * inner + r;
                        let share = g[slot] / counts[slot] as f64;
                        for a in 0..len {
                            let idx = (o * len + a) * inner + r;
                            if mask.as_ref().is_none_or(|m| m[idx]) {
                                dx[idx] = share;
                            }
                        }
                    }
                }
                self.accumulate(*x, &dx);
            }
            Op::MaskFill { x, mask } => {
                let dx: Vec<f64> = g
                    .iter()
                    .zip(mask.iter())
                    .map(|(g, &keep)| if keep { *g } else { 0.0 })
                    .collect();
                self.accumulate(*x, &dx);
            }
            Op::Softmax(x) => {
                let (_, n) = out.dims2("softmax_rows")?;
                let mut dx = vec![0.0; out.len()];
                for (r, (y, gy)) in out.data().chunks(n).zip(g.chunks(n)).enumerate() {
                    let dot: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                    for c in 0..n {
                        dx[r * n + c] = y[c] * (gy[c] - dot);
                    }
                }
                self.accumulate(*x, &dx);
            }
            Op::InhibitorMix { zbar, v, keep } => {
                let zv = self.shared_value(*zbar);
                let vv = self.shared_value(*v);
                let (nq, nk) = zv.dims2("inhibitor_mix")?;
                let dv_cols = vv.shape()[1];
                let mut dz = vec![0.0; nq * nk];
                let mut dvv = vec![0.0; nk * dv_cols];
                for i in 0..nq {
                    for j in 0..nk {
                        let z = zv.data()[i * nk + j];
                        let scale = keep.as_ref().map_or(1.0, |k| k[i * nk + j]);
                        if scale == 0.0 {
                            continue;
                        }
                        for l in 0..dv_cols {
                            let gil = g[i * dv_cols + l] * scale;
                            let val = vv.data()[j * dv_cols + l];
                            let (vp, vn) = (val.max(0.0), val.min(0.0));
                            if vp - z > 0.0 {
                                dz[i * nk + j] -= gil;
                                if val > 0.0 {
                                    dvv[j * dv_cols + l] += gil;
                                }
                            }
                            if vn + z < 0.0 {
                                dz[i * nk + j] += gil;
                                if val < 0.0 {
                                    dvv[j * dv_cols + l] += gil;
                                }
                            }
                        }
                    }
                }
                self.accumulate(*zbar, &dz);
                self.accumulate(*v, &dvv);
            }
            Op::Sum(x) => {
                let n = self.value(*x).len();
                self.accumulate(*x, &vec![g[0]; n]);
            }
            Op::Gelu(x) => {
                let xv = self.shared_value(*x);
                let dx: Vec<f64> = g
                    .iter()
                    .zip(xv.data())
                    .map(|(g, &x)| g * gelu_grad(x))
                    .collect();
                self.accumulate(*x, &dx);
            }
            Op::Tanh(x) => {
                let dx: Vec<f64> = g
                    .iter()
                    .zip(out.data())
                    .map(|(g, y)| g * (1.0 - y * y))
                    .collect();
                self.accumulate(*x, &dx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let gv = self.shared_value(*gamma);
                let n = gv.len();
                let m = xhat.len() / n;
                if self.requires_grad(*x) {
                    let mut dx = vec![0.0; m * n];
                    for r in 0..m {
                        let row = r * n..(r + 1) * n;
                        let dxhat: Vec<f64> = g[row.clone()]
                            .iter()
                            .zip(gv.data())
                            .map(|(g, w)| g * w)
                            .collect();
                        let sum_d: f64 = dxhat.iter().sum();
                        let sum_dx: f64 = dxhat.iter().zip(&xhat[row.clone()]).map(|(a, b)| a * b).sum();
                        for c in 0..n {
                            dx[r * n + c] = inv_std[r] / n as f64
                                * (n as f64 * dxhat[c] - sum_d - xhat[r * n + c] * sum_dx);
                        }
                    }
                    self.accumulate(*x, &dx);
                }
                let mut dg = vec![0.0; n];
                let mut db = vec![0.0; n];
                for r in 0..m {
                    for c in 0..n {
                        dg[c] += g[r * n + c] * xhat[r * n + c];
                        db[c] += g[r * n + c];
                    }
                }
                self.accumulate(*gamma, &dg);
                self.accumulate(*beta, &db);
            }
            Op::Gather { table, ids } => {
                let d = self.shape(*table)[1];
                self.accumulate_with(*table, |dt| {
                    for (r, &id) in ids.iter().enumerate() {
                        for c in 0..d {
                            dt[id * d + c] += g[r * d + c];
                        }
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let (m, total) = out.dims2("concat_cols")?;
                let mut offset = 0;
                for p in parts {
                    let w = self.shape(*p)[1];
                    let mut dp = vec![0.0; m * w];
                    for r in 0..m {
                        dp[r * w..(r + 1) * w]
                            .copy_from_slice(&g[r * total + offset..r * total + offset + w]);
                    }
                    self.accumulate(*p, &dp);
                    offset += w;
                }
            }
            Op::SelectRows { x, start } => {
                let n = out.shape()[1];
                let len = self.value(*x).len();
                let mut dx = vec![0.0; len];
                dx[start * n..start * n + g.len()].copy_from_slice(g);
                self.accumulate(*x, &dx);
            }
            Op::Dropout { x, keep } => {
                let dx: Vec<f64> = g.iter().zip(keep).map(|(g, k)| g * k).collect();
                self.accumulate(*x, &dx);
            }
            Op::Mse {
                x,
                target,
                rows,
                denom,
            } => {
                let xv = self.shared_value(*x);
                let n = xv.len() / xv.shape()[0];
                let dx: Vec<f64> = xv
                    .data()
                    .iter()
                    .zip(target.data())
                    .enumerate()
                    .map(|(idx, (a, b))| {
                        if rows.as_ref().is_none_or(|r| r[idx / n]) {
                            g[0] * 2.0 * (a - b) / denom
                        } else {
                            0.0
                        }
                    })
                    .collect();
                self.accumulate(*x, &dx);
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let c = self.shape(*logits)[1];
                let b = labels.len() as f64;
                let mut dx: Vec<f64> = probs.iter().map(|p| g[0] * p / b).collect();
                for (r, &y) in labels.iter().enumerate() {
                    dx[r * c + y] -= g[0] / b;
                }
                self.accumulate(*logits, &dx);
            }
            Op::SoftKd {
                logits,
                teacher_probs,
                student_probs,
                temperature,
            } => {
                let b = self.shape(*logits)[0] as f64;
                let dx: Vec<f64> = student_probs
                    .iter()
                    .zip(teacher_probs)
                    .map(|(ps, pt)| g[0] * temperature * (ps - pt) / b)
                    .collect();
                self.accumulate(*logits, &dx);
            }
        }
        Ok(())
    }
}

/// `sign(x)` with `sign(0) = 0`.
pub(crate) fn sign0(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
        + x * FRAC_1_SQRT_2PI * (-0.5 * x * x).exp()
}
