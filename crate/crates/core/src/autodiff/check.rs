//! Central finite-difference verification of reverse-mode gradients.

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Gradient magnitudes below this are compared on an absolute scale.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub analytic: Tensor,
    pub numeric: Tensor,
    pub max_abs_err: f64,
    pub max_rel_err: f64,
}

/// `|a - n| / max(|a|, |n|, REL_FLOOR)`.
pub fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

fn eval<F>(f: &F, point: Tensor) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let x = g.constant(point);
    let y = f(&mut g, x)?;
    let v = g.value(y);
    if !v.is_scalar() {
        return Err(Error::NonScalarLoss(v.shape().to_vec()));
    }
    Ok(v.item())
}

/// Compare the backward gradient of `f` at `point` with the central
/// difference `(f(x + h e_i) - f(x - h e_i)) / 2h` in every coordinate.
///
/// Errors raised by `f` (e.g. a degenerate normalization) propagate.
pub fn finite_diff_check<F>(f: F, point: &Tensor, h: f64) -> Result<GradCheck>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(Error::InvalidArgument(format!("step h must be positive, got {h}")));
    }
    let mut g = Graph::new();
    let x = g.param(point.clone());
    let y = f(&mut g, x)?;
    g.backward(y)?;
    let analytic = g.grad(x).cloned().unwrap_or_else(|| point.zeros_like());

    let mut numeric = point.zeros_like();
    for i in 0..point.len() {
        let mut plus = point.clone();
        plus.data_mut()[i] += h;
        let mut minus = point.clone();
        minus.data_mut()[i] -= h;
        numeric.data_mut()[i] = (eval(&f, plus)? - eval(&f, minus)?) / (2.0 * h);
    }

    let mut max_abs_err: f64 = 0.0;
    let mut max_rel_err: f64 = 0.0;
    for (&a, &n) in analytic.data().iter().zip(numeric.data()) {
        max_abs_err = max_abs_err.max((a - n).abs());
        max_rel_err = max_rel_err.max(relative_error(a, n));
    }
    Ok(GradCheck { analytic, numeric, max_abs_err, max_rel_err })
}
