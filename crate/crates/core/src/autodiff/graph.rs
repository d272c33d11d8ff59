//! Define-by-run reverse-mode differentiation.
//!
//! A [`Graph`] is an append-only list of nodes. Every operation pushes one
//! node whose inputs already exist, so insertion order is a topological
//! order and `backward` simply walks the list in reverse.

use super::tensor::{l2_norm, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Linear(Var, Var),
    Relu(Var),
    Log(Var),
    Exp(Var),
    Sum(Var),
    SumRows(Var),
    SumCols(Var),
    SliceRows(Var, usize),
    ConcatRows(Var, Var),
    Normalize(Var),
    Softmax(Var, f64),
    LogSoftmax(Var, f64),
    Kl(Var, Var),
    KlLogits(Var, Var, f64),
    /// Batch standardization; keeps the per-column `sqrt(var + eps)`.
    Standardize(Var, Vec<f64>),
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    op: Op,
    requires_grad: bool,
}

#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn check_finite(op: &str, t: &Tensor) -> Result<()> {
    if t.all_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(op.to_string()))
    }
}

/// Max-shifted exponentials of `row / t`: returns the shift, the
/// exponentials and their sum.
fn shifted_exp(row: &[f64], t: f64) -> (f64, Vec<f64>, f64) {
    let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b)) / t;
    let e: Vec<f64> = row.iter().map(|&v| (v / t - m).exp()).collect();
    let s = e.iter().sum();
    (m, e, s)
}

/// `log Σ exp(row / t)`. The arg-max term contributes exactly 1 to the
/// shifted sum, so the rest goes through `ln_1p` and log-probabilities of
/// near-certain classes keep full relative precision.
fn log_sum_exp(row: &[f64], t: f64) -> f64 {
    let (m, e, _) = shifted_exp(row, t);
    let top = argmax(row);
    let rest: f64 = e.iter().enumerate().filter(|&(c, _)| c != top).map(|(_, v)| v).sum();
    m + rest.ln_1p()
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, grad: None, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Constant copy of `v`'s current value; gradients stop here.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape("add", va, vb)?;
        let out = va.zip_map(vb, |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape("sub", va, vb)?;
        let out = va.zip_map(vb, |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape("mul", va, vb)?;
        let out = va.zip_map(vb, |x, y| x * y);
        check_finite("mul", &out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    /// `x[i, j] + b[j]`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (vx, vb) = (self.value(x), self.value(b));
        if vb.len() != vx.cols() {
            return Err(Error::shape("add_row", format!("{:?} + {:?}", vx.shape(), vb.shape())));
        }
        let mut out = vx.clone();
        let c = vx.cols();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v += vb.data()[i % c];
        }
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(out, Op::AddRow(x, b), rg))
    }

    /// `x[i, j] * s[j]`.
    pub fn mul_row(&mut self, x: Var, s: Var) -> Result<Var> {
        let (vx, vs) = (self.value(x), self.value(s));
        if vs.len() != vx.cols() {
            return Err(Error::shape("mul_row", format!("{:?} * {:?}", vx.shape(), vs.shape())));
        }
        let mut out = vx.clone();
        let c = vx.cols();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v *= vs.data()[i % c];
        }
        let rg = self.rg(x) || self.rg(s);
        Ok(self.push(out, Op::MulRow(x, s), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).scaled(c);
        check_finite("scale", &out)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Scale(a, c), rg))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    /// Affine map without bias: `x · wᵀ` for `x: [n, k]` (or `[k]`) and `w: [m, k]`.
    pub fn linear(&mut self, x: Var, w: Var) -> Result<Var> {
        let (vx, vw) = (self.value(x), self.value(w));
        if vw.shape().len() != 2 || vw.cols() != vx.cols() {
            return Err(Error::shape("linear", format!("x {:?} · wᵀ {:?}", vx.shape(), vw.shape())));
        }
        let (n, k, m) = (vx.rows(), vx.cols(), vw.rows());
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let xi = &vx.data()[i * k..(i + 1) * k];
            for j in 0..m {
                let wj = &vw.data()[j * k..(j + 1) * k];
                out[i * m + j] = xi.iter().zip(wj).map(|(a, b)| a * b).sum();
            }
        }
        let shape = if vx.shape().len() == 1 { vec![m] } else { vec![n, m] };
        let out = Tensor::new(shape, out)?;
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(out, Op::Linear(x, w), rg))
    }

    /// Matrix-vector product `w · v`.
    pub fn matvec(&mut self, w: Var, v: Var) -> Result<Var> {
        if self.value(v).shape().len() != 1 {
            return Err(Error::shape("matvec", format!("expected a vector, got {:?}", self.value(v).shape())));
        }
        self.linear(v, w)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|v| if v > 0.0 { v } else { 0.0 });
        let rg = self.rg(a);
        Ok(self.push(out, Op::Relu(a), rg))
    }

    /// Natural log; non-positive entries are an error rather than `-inf`/NaN.
    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(i) = self.value(a).data().iter().position(|&v| v <= 0.0 || !v.is_finite()) {
            return Err(Error::NonFinite(format!("log of {} at index {i}", self.value(a).data()[i])));
        }
        let out = self.value(a).map(f64::ln);
        let rg = self.rg(a);
        Ok(self.push(out, Op::Log(a), rg))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::exp);
        check_finite("exp", &out)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Exp(a), rg))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(a);
        Ok(self.push(out, Op::Sum(a), rg))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        if n == 0 {
            return Err(Error::shape("mean", "empty tensor"));
        }
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Per-row sums: `[n, m] -> [n]`.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        let out = Tensor::vector(va.row_iter().map(|r| r.iter().sum()).collect());
        let rg = self.rg(a);
        Ok(self.push(out, Op::SumRows(a), rg))
    }

    /// Column sums of `[n, c]` as a `[c]` vector.
    pub fn sum_cols(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        let mut out = vec![0.0; va.cols()];
        for r in va.row_iter() {
            out.iter_mut().zip(r).for_each(|(o, v)| *o += v);
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::vector(out), Op::SumCols(a), rg))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let va = self.value(a);
        if start > end || end > va.rows() {
            return Err(Error::shape("slice_rows", format!("{start}..{end} of {} rows", va.rows())));
        }
        let out = va.slice_rows(start, end);
        let rg = self.rg(a);
        Ok(self.push(out, Op::SliceRows(a, start), rg))
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).concat_rows(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::ConcatRows(a, b), rg))
    }

    /// Row-wise ℓ2 normalization. A zero row is a degenerate-input error.
    pub fn normalize_l2(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        let mut out = va.clone();
        for i in 0..va.rows() {
            let n = l2_norm(va.row(i));
            if n == 0.0 {
                return Err(Error::degenerate("normalize_l2", format!("row {i} has zero norm")));
            }
            out.row_mut(i).iter_mut().for_each(|v| *v /= n);
        }
        check_finite("normalize_l2", &out)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Normalize(a), rg))
    }

    /// Row-wise ℓ2 normalization that maps an exactly-zero row to zero with a
    /// zero gradient. Only meant for activations behind a ReLU, where an
    /// all-zero row already receives no upstream gradient.
    pub fn normalize_l2_or_zero(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        let mut out = va.clone();
        for i in 0..va.rows() {
            let n = l2_norm(va.row(i));
            if n > 0.0 {
                out.row_mut(i).iter_mut().for_each(|v| *v /= n);
            }
        }
        check_finite("normalize_l2_or_zero", &out)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Normalize(a), rg))
    }

    /// Row-wise `softmax(row / t)`.
    pub fn softmax(&mut self, a: Var, t: f64) -> Result<Var> {
        if !(t > 0.0) {
            return Err(Error::InvalidArgument(format!("softmax temperature must be positive, got {t}")));
        }
        let va = self.value(a);
        check_finite("softmax input", va)?;
        let mut out = va.clone();
        for i in 0..va.rows() {
            let (_, e, s) = shifted_exp(va.row(i), t);
            for (o, ei) in out.row_mut(i).iter_mut().zip(e) {
                *o = ei / s;
            }
        }
        let rg = self.rg(a);
        Ok(self.push(out, Op::Softmax(a, t), rg))
    }

    /// Row-wise `log softmax(row / t)` via log-sum-exp.
    pub fn log_softmax(&mut self, a: Var, t: f64) -> Result<Var> {
        if !(t > 0.0) {
            return Err(Error::InvalidArgument(format!("softmax temperature must be positive, got {t}")));
        }
        let va = self.value(a);
        check_finite("log_softmax input", va)?;
        let mut out = va.clone();
        for i in 0..va.rows() {
            let lse = log_sum_exp(va.row(i), t);
            out.row_mut(i).iter_mut().for_each(|v| *v = *v / t - lse);
        }
        let rg = self.rg(a);
        Ok(self.push(out, Op::LogSoftmax(a, t), rg))
    }

    /// Row-wise `KL(p || q) = Σ p log(p / q)` with `0 · log 0 = 0`.
    ///
    /// The derivative w.r.t. `p_c` is taken as 0 where `p_c = 0` (the one-sided
    /// derivative there is unbounded).
    pub fn kl_divergence(&mut self, p: Var, q: Var) -> Result<Var> {
        let (vp, vq) = (self.value(p), self.value(q));
        same_shape("kl_divergence", vp, vq)?;
        let mut out = Vec::with_capacity(vp.rows());
        for i in 0..vp.rows() {
            let mut acc = 0.0;
            for (c, (&pc, &qc)) in vp.row(i).iter().zip(vq.row(i)).enumerate() {
                if pc < 0.0 || qc < 0.0 {
                    return Err(Error::InvalidArgument(format!("negative probability at row {i} class {c}")));
                }
                if pc > 0.0 {
                    if qc == 0.0 {
                        return Err(Error::KlUndefined { row: i, class: c });
                    }
                    acc += pc * (pc / qc).ln();
                }
            }
            out.push(acc);
        }
        let out = Tensor::vector(out);
        check_finite("kl_divergence", &out)?;
        let rg = self.rg(p) || self.rg(q);
        Ok(self.push(out, Op::Kl(p, q), rg))
    }

    /// Row-wise `KL(p || softmax(l / t))` from logits `l`, fused for stability.
    ///
    /// The gradient w.r.t. `l` is `(q - p) / t`; for each row's arg-max class
    /// it is formed as minus the sum of the other classes, which avoids the
    /// `1 - 1` cancellation when predictions are nearly one-hot.
    pub fn kl_logits(&mut self, p: Var, logits: Var, t: f64) -> Result<Var> {
        if !(t > 0.0) {
            return Err(Error::InvalidArgument(format!("softmax temperature must be positive, got {t}")));
        }
        let (vp, vl) = (self.value(p), self.value(logits));
        same_shape("kl_logits", vp, vl)?;
        check_finite("kl_logits input", vl)?;
        let mut out = Vec::with_capacity(vp.rows());
        for i in 0..vp.rows() {
            let lse = log_sum_exp(vl.row(i), t);
            let mut acc = 0.0;
            for (&pc, &lc) in vp.row(i).iter().zip(vl.row(i)) {
                if pc < 0.0 {
                    return Err(Error::InvalidArgument(format!("negative probability in row {i}")));
                }
                if pc > 0.0 {
                    acc += pc * (pc.ln() - (lc / t - lse));
                }
            }
            out.push(acc);
        }
        let out = Tensor::vector(out);
        check_finite("kl_logits", &out)?;
        let rg = self.rg(p) || self.rg(logits);
        Ok(self.push(out, Op::KlLogits(p, logits, t), rg))
    }

    /// Column-wise standardization with batch statistics (biased variance).
    pub fn standardize(&mut self, a: Var, eps: f64) -> Result<Var> {
        let va = self.value(a);
        let (n, m) = (va.rows(), va.cols());
        if n == 0 {
            return Err(Error::shape("standardize", "empty batch"));
        }
        let (mean, var) = column_moments(va);
        let std: Vec<f64> = var.iter().map(|v| (v + eps).sqrt()).collect();
        let mut out = va.clone();
        for i in 0..n {
            for j in 0..m {
                out.data_mut()[i * m + j] = (va.data()[i * m + j] - mean[j]) / std[j];
            }
        }
        check_finite("standardize", &out)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Standardize(a, std), rg))
    }

    /// Reverse pass from a scalar `loss`. Previous gradients are cleared, then
    /// every node reachable from `loss` receives `∂loss/∂node`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = &self.nodes[loss.0].value;
        if !lv.is_scalar() {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        let seed = Tensor::filled(self.nodes[loss.0].value.shape(), 1.0);
        self.nodes[loss.0].grad = Some(seed);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(gy) = self.nodes[i].grad.take() else { continue };
            let contributions = self.vjp(i, &gy);
            self.nodes[i].grad = Some(gy);
            for (v, g) in contributions {
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                match &mut self.nodes[v.0].grad {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(())
    }

    /// Vector-Jacobian products of node `i` for upstream gradient `gy`.
    fn vjp(&self, i: usize, gy: &Tensor) -> Vec<(Var, Tensor)> {
        let node = &self.nodes[i];
        let y = &node.value;
        match &node.op {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![(*a, gy.clone()), (*b, gy.clone())],
            Op::Sub(a, b) => vec![(*a, gy.clone()), (*b, gy.scaled(-1.0))],
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                vec![(*a, gy.zip_map(vb, |g, x| g * x)), (*b, gy.zip_map(va, |g, x| g * x))]
            }
            Op::AddRow(x, b) => {
                let vb = self.value(*b);
                let c = vb.len();
                let mut gb = vec![0.0; c];
                for (k, g) in gy.data().iter().enumerate() {
                    gb[k % c] += g;
                }
                vec![(*x, gy.clone()), (*b, Tensor::new(vb.shape().to_vec(), gb).expect("bias shape"))]
            }
            Op::MulRow(x, s) => {
                let (vx, vs) = (self.value(*x), self.value(*s));
                let c = vs.len();
                let mut gx = gy.clone();
                let mut gs = vec![0.0; c];
                for (k, g) in gx.data_mut().iter_mut().enumerate() {
                    gs[k % c] += *g * vx.data()[k];
                    *g *= vs.data()[k % c];
                }
                vec![(*x, gx), (*s, Tensor::new(vs.shape().to_vec(), gs).expect("scale shape"))]
            }
            Op::Scale(a, c) => vec![(*a, gy.scaled(*c))],
            Op::Linear(x, w) => {
                let (vx, vw) = (self.value(*x), self.value(*w));
                let (n, k, m) = (vx.rows(), vx.cols(), vw.rows());
                let (g, xd, wd) = (gy.data(), vx.data(), vw.data());
                let mut gx = vec![0.0; n * k];
                let mut gw = vec![0.0; m * k];
                for r in 0..n {
                    for j in 0..m {
                        let gij = g[r * m + j];
                        if gij == 0.0 {
                            continue;
                        }
                        for t in 0..k {
                            gx[r * k + t] += gij * wd[j * k + t];
                            gw[j * k + t] += gij * xd[r * k + t];
                        }
                    }
                }
                vec![
                    (*x, Tensor::new(vx.shape().to_vec(), gx).expect("x shape")),
                    (*w, Tensor::new(vw.shape().to_vec(), gw).expect("w shape")),
                ]
            }
            // Subgradient 0 at the kink.
            Op::Relu(a) => vec![(*a, gy.zip_map(self.value(*a), |g, x| if x > 0.0 { g } else { 0.0 }))],
            Op::Log(a) => vec![(*a, gy.zip_map(self.value(*a), |g, x| g / x))],
            Op::Exp(a) => vec![(*a, gy.zip_map(y, |g, e| g * e))],
            Op::Sum(a) => {
                let g = gy.item();
                vec![(*a, Tensor::filled(self.value(*a).shape(), g))]
            }
            Op::SumRows(a) => {
                let va = self.value(*a);
                let c = va.cols();
                let mut ga = va.zeros_like();
                for (k, v) in ga.data_mut().iter_mut().enumerate() {
                    *v = gy.data()[k / c];
                }
                vec![(*a, ga)]
            }
            Op::SumCols(a) => {
                let va = self.value(*a);
                let c = va.cols();
                let mut ga = va.zeros_like();
                for (k, v) in ga.data_mut().iter_mut().enumerate() {
                    *v = gy.data()[k % c];
                }
                vec![(*a, ga)]
            }
            Op::SliceRows(a, start) => {
                let va = self.value(*a);
                let c = va.cols();
                let mut ga = va.zeros_like();
                ga.data_mut()[start * c..start * c + gy.len()].copy_from_slice(gy.data());
                vec![(*a, ga)]
            }
            Op::ConcatRows(a, b) => {
                let na = self.value(*a).len();
                let ga = Tensor::new(self.value(*a).shape().to_vec(), gy.data()[..na].to_vec()).expect("a");
                let gb = Tensor::new(self.value(*b).shape().to_vec(), gy.data()[na..].to_vec()).expect("b");
                vec![(*a, ga), (*b, gb)]
            }
            Op::Normalize(a) => {
                // J(v) = (I - v vᵀ / vᵀv) / ‖v‖ is symmetric, so gx = J gy = (gy - y (yᵀgy)) / ‖v‖.
                let va = self.value(*a);
                let mut ga = va.zeros_like();
                for r in 0..va.rows() {
                    let n = l2_norm(va.row(r));
                    if n == 0.0 {
                        continue;
                    }
                    let (yr, gr) = (y.row(r), gy.row(r));
                    let proj: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((o, &yi), &gi) in ga.row_mut(r).iter_mut().zip(yr).zip(gr) {
                        *o = (gi - yi * proj) / n;
                    }
                }
                vec![(*a, ga)]
            }
            Op::Softmax(a, t) => {
                let mut ga = y.clone();
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), gy.row(r));
                    let s: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((o, &yi), &gi) in ga.row_mut(r).iter_mut().zip(yr).zip(gr) {
                        *o = yi * (gi - s) / t;
                    }
                }
                vec![(*a, ga)]
            }
            Op::LogSoftmax(a, t) => {
                let mut ga = y.clone();
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), gy.row(r));
                    let s: f64 = gr.iter().sum();
                    for ((o, &yi), &gi) in ga.row_mut(r).iter_mut().zip(yr).zip(gr) {
                        *o = (gi - yi.exp() * s) / t;
                    }
                }
                vec![(*a, ga)]
            }
            Op::Kl(p, q) => {
                let (vp, vq) = (self.value(*p), self.value(*q));
                let c = vp.cols();
                let mut gp = vp.zeros_like();
                let mut gq = vq.zeros_like();
                for k in 0..vp.len() {
                    let g = gy.data()[k / c];
                    let (pk, qk) = (vp.data()[k], vq.data()[k]);
                    if pk > 0.0 {
                        gp.data_mut()[k] = g * ((pk / qk).ln() + 1.0);
                        gq.data_mut()[k] = -g * pk / qk;
                    }
                }
                vec![(*p, gp), (*q, gq)]
            }
            Op::KlLogits(p, l, t) => {
                let (vp, vl) = (self.value(*p), self.value(*l));
                let mut gp = vp.zeros_like();
                let mut gl = vl.zeros_like();
                for r in 0..vp.rows() {
                    let g = gy.data()[r];
                    let lr = vl.row(r);
                    let lse = log_sum_exp(lr, *t);
                    let top = argmax(lr);
                    let pr = vp.row(r);
                    let mut rest = 0.0;
                    for c in 0..lr.len() {
                        let logq = lr[c] / t - lse;
                        if c != top {
                            let d = logq.exp() - pr[c];
                            rest += d;
                            gl.row_mut(r)[c] = g * d / t;
                        }
                        if pr[c] > 0.0 {
                            gp.row_mut(r)[c] = g * (pr[c].ln() - logq + 1.0);
                        }
                    }
                    gl.row_mut(r)[top] = -g * rest / t;
                }
                vec![(*p, gp), (*l, gl)]
            }
            Op::Standardize(a, std) => {
                let (n, m) = (y.rows(), y.cols());
                let nf = n as f64;
                let mut ga = y.zeros_like();
                for j in 0..m {
                    let mut sg = 0.0;
                    let mut sgy = 0.0;
                    for r in 0..n {
                        let g = gy.data()[r * m + j];
                        sg += g;
                        sgy += g * y.data()[r * m + j];
                    }
                    for r in 0..n {
                        let k = r * m + j;
                        ga.data_mut()[k] = (gy.data()[k] - sg / nf - y.data()[k] * sgy / nf) / std[j];
                    }
                }
                vec![(*a, ga)]
            }
        }
    }
}

/// Per-column mean and biased variance of a matrix.
pub fn column_moments(t: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let (n, m) = (t.rows(), t.cols());
    let mut mean = vec![0.0; m];
    for r in t.row_iter() {
        for (a, v) in mean.iter_mut().zip(r) {
            *a += v;
        }
    }
    mean.iter_mut().for_each(|v| *v /= n as f64);
    let mut var = vec![0.0; m];
    for r in t.row_iter() {
        for ((a, v), mu) in var.iter_mut().zip(r).zip(&mean) {
            *a += (v - mu) * (v - mu);
        }
    }
    var.iter_mut().for_each(|v| *v /= n as f64);
    (mean, var)
}
