//! Composite differentiable functions shared by perturbations and losses.

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Per-row `KL(p || softmax(logits / t))` with `p` held constant.
pub fn kl_rows(g: &mut Graph, p: &Tensor, logits: Var, t: f64) -> Result<Var> {
    let pv = g.constant(p.clone());
    g.kl_logits(pv, logits, t)
}

/// Per-row `-log softmax(logits / t)[label]`.
pub fn cross_entropy_rows(g: &mut Graph, logits: Var, labels: &[usize], t: f64) -> Result<Var> {
    let lv = g.value(logits);
    let (n, c) = (lv.rows(), lv.cols());
    if labels.len() != n {
        return Err(Error::shape("cross_entropy_rows", format!("{} labels for {n} rows", labels.len())));
    }
    let mut onehot = vec![0.0; n * c];
    for (i, &y) in labels.iter().enumerate() {
        if y >= c {
            return Err(Error::InvalidArgument(format!("label {y} out of range for {c} classes")));
        }
        onehot[i * c + y] = 1.0;
    }
    let mask = g.constant(Tensor::new(lv.shape().to_vec(), onehot)?);
    let logq = g.log_softmax(logits, t)?;
    let picked = g.mul(mask, logq)?;
    let s = g.sum_rows(picked)?;
    g.neg(s)
}

/// Per-row Shannon entropy of `softmax(logits / t)`.
pub fn entropy_rows(g: &mut Graph, logits: Var, t: f64) -> Result<Var> {
    let q = g.softmax(logits, t)?;
    let logq = g.log_softmax(logits, t)?;
    let ql = g.mul(q, logq)?;
    let s = g.sum_rows(ql)?;
    g.neg(s)
}

/// `Σ_i w_i v_i / n` for per-row values `v` and constant weights `w`.
pub fn weighted_mean(g: &mut Graph, rows: Var, weights: &[f64]) -> Result<Var> {
    let n = g.value(rows).len();
    if weights.len() != n || n == 0 {
        return Err(Error::shape("weighted_mean", format!("{} weights for {n} rows", weights.len())));
    }
    let w = g.constant(Tensor::vector(weights.to_vec()));
    let wv = g.mul(rows, w)?;
    let s = g.sum(wv)?;
    g.scale(s, 1.0 / n as f64)
}

/// Plain (non-graph) softmax of one row at temperature `t`.
pub fn softmax_row(logits: &[f64], t: f64) -> Vec<f64> {
    let m = logits.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let e: Vec<f64> = logits.iter().map(|&l| ((l - m) / t).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_diff_check;

    #[test]
    fn entropy_extremes() {
        let mut g = Graph::new();
        let l = g.constant(Tensor::matrix(2, 3, vec![0.0, 0.0, 0.0, 50.0, 0.0, 0.0]).unwrap());
        let h = entropy_rows(&mut g, l, 1.0).unwrap();
        let hv = g.value(h).data();
        assert!((hv[0] - 3f64.ln()).abs() < 1e-15);
        assert!(hv[1].abs() < 1e-18);
    }

    #[test]
    fn cross_entropy_matches_direct() {
        let mut g = Graph::new();
        let l = g.constant(Tensor::matrix(1, 3, vec![1.0, 2.0, 0.5]).unwrap());
        let ce = cross_entropy_rows(&mut g, l, &[1], 1.0).unwrap();
        let p = softmax_row(&[1.0, 2.0, 0.5], 1.0);
        assert!((g.value(ce).item() + p[1].ln()).abs() < 1e-14);
    }

    #[test]
    fn fused_kl_agrees_with_probability_kl() {
        let p = Tensor::matrix(2, 3, vec![0.2, 0.5, 0.3, 0.0, 0.9, 0.1]).unwrap();
        let logits = Tensor::matrix(2, 3, vec![0.3, -0.2, 0.1, 1.0, 0.0, -1.0]).unwrap();
        let mut g = Graph::new();
        let l = g.constant(logits.clone());
        let fused = kl_rows(&mut g, &p, l, 0.7).unwrap();
        let q = g.softmax(l, 0.7).unwrap();
        let pv = g.constant(p.clone());
        let direct = g.kl_divergence(pv, q).unwrap();
        assert!(g.value(fused).max_abs_diff(g.value(direct)) < 1e-14);
    }

    #[test]
    fn fused_kl_gradient() {
        let p = Tensor::matrix(2, 4, vec![0.1, 0.2, 0.3, 0.4, 0.7, 0.1, 0.1, 0.1]).unwrap();
        let f = |g: &mut Graph, x: Var| {
            let k = kl_rows(g, &p, x, 0.5)?;
            g.sum(k)
        };
        let x = Tensor::matrix(2, 4, vec![0.3, -0.4, 0.9, 0.1, -0.2, 0.5, 0.05, -0.7]).unwrap();
        let r = finite_diff_check(f, &x, 1e-5).unwrap();
        assert!(r.max_rel_err < 1e-6, "{}", r.max_rel_err);
    }

    #[test]
    fn fused_kl_gradient_is_accurate_when_saturated() {
        // p one-hot-ish at T = 0.05: the dominant class gradient must equal
        // minus the sum of the others rather than rounding noise.
        let mut g = Graph::new();
        let pl = g.constant(Tensor::vector(vec![3.0, 0.0, -1.0]));
        let p = g.softmax(pl, 0.05).unwrap();
        let p = g.value(p).clone();
        let l = g.param(Tensor::vector(vec![2.9, 0.05, -1.0]));
        let k = kl_rows(&mut g, &p, l, 0.05).unwrap();
        let s = g.sum(k).unwrap();
        g.backward(s).unwrap();
        let gl = g.grad(l).unwrap().data().to_vec();
        assert!(gl[1] > 0.0 && gl[0] < 0.0);
        assert!((gl.iter().sum::<f64>()).abs() <= 1e-12 * gl[1].abs());
    }
}
