//! Adversarial perturbations of penultimate activations.
//!
//! Both variants maximize the same inner divergence
//! `KL(g_σ(z̄) || g_σ(normalize(base + r)))` over `‖r‖ ≤ ε`, where `base` is
//! the raw activation `z` (un-normalized variant) or its unit direction `z̄`
//! (normalized variant). The activation and the classifier are constants
//! throughout; only `r` moves.
//!
//! Batched entry points (`*_rows`) work on `[n, d]` matrices and are what the
//! training losses call. The single-sample functions wrap them.

use serde::{Deserialize, Serialize};

use crate::autodiff::{l2_norm, Graph, Tensor};
use crate::error::{Error, Result};
use crate::model::{ActivationRecord, LinearClassifier, Model};
use crate::ops::{cross_entropy_rows, kl_rows};
use crate::rng::{random_unit, rng_from};

/// Fresh random directions tried before a vanished probe gradient is an error.
pub const MAX_PROBE_RETRIES: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Perturb `z`, then normalize.
    #[serde(rename = "u")]
    Unnormalized,
    /// Perturb `z̄` (followed by projection back onto the sphere).
    #[serde(rename = "n")]
    Normalized,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Space {
    Input,
    /// Output of extractor layers `0..split`.
    Intermediate(usize),
    PenultUnnormalized,
    PenultNormalized,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Perturbation {
    pub r: Tensor,
    pub epsilon: f64,
    pub space: Space,
    /// False once a mapping or projection has moved `r` off its original budget.
    pub budgeted: bool,
}

impl Perturbation {
    pub fn new(r: Tensor, epsilon: f64, space: Space) -> Self {
        Perturbation { r, epsilon, space, budgeted: true }
    }

    pub fn zero(dim: usize, space: Space) -> Self {
        Perturbation::new(Tensor::zeros(&[dim]), 0.0, space)
    }

    pub fn norm(&self) -> f64 {
        self.r.norm()
    }

    pub fn within_budget(&self) -> bool {
        !self.budgeted || self.norm() <= self.epsilon + 1e-9
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbParams {
    pub epsilon: f64,
    /// Scale of the finite-difference probe `ξ d`.
    pub xi: f64,
    pub seed: u64,
}

impl PerturbParams {
    pub fn new(epsilon: f64, xi: f64, seed: u64) -> Result<Self> {
        if !(epsilon > 0.0) || !(xi > 0.0) {
            return Err(Error::InvalidArgument(format!("epsilon and xi must be positive (got {epsilon}, {xi})")));
        }
        Ok(PerturbParams { epsilon, xi, seed })
    }

    /// `ξ = 10, ε = 30` for the un-normalized variant, `ξ = 1, ε = 1` for the
    /// normalized one.
    pub fn defaults_for(variant: Variant, seed: u64) -> Self {
        match variant {
            Variant::Unnormalized => PerturbParams { epsilon: 30.0, xi: 10.0, seed },
            Variant::Normalized => PerturbParams { epsilon: 1.0, xi: 1.0, seed },
        }
    }
}

/// Identifies the random probe direction of one sample at one step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ProbeKey {
    pub step: u64,
    pub index: u64,
}

/// Batched one-step result. Rows listed in `failed` kept a vanishing probe
/// gradient through every retry and carry `r = 0`.
#[derive(Clone, Debug)]
pub struct RowsOutcome {
    pub r: Tensor,
    pub failed: Vec<usize>,
}

/// Multi-start projected gradient ascent settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AscentConfig {
    pub restarts: usize,
    pub steps: usize,
    /// Initial step length as a fraction of ε.
    pub step_fraction: f64,
}

impl Default for AscentConfig {
    fn default() -> Self {
        AscentConfig { restarts: 8, steps: 200, step_fraction: 1.0 / 20.0 }
    }
}

/// Point the perturbation is added to: `z` or `z̄`, row-wise.
pub fn base_rows(z: &Tensor, variant: Variant) -> Result<Tensor> {
    match variant {
        Variant::Unnormalized => Ok(z.clone()),
        Variant::Normalized => normalize_rows(z),
    }
}

fn normalize_rows(z: &Tensor) -> Result<Tensor> {
    let mut out = z.clone();
    for i in 0..z.rows() {
        let n = l2_norm(z.row(i));
        if n == 0.0 {
            return Err(Error::degenerate("perturb", format!("row {i}: zero activation")));
        }
        out.row_mut(i).iter_mut().for_each(|v| *v /= n);
    }
    Ok(out)
}

fn as_matrix(t: &Tensor) -> Tensor {
    t.clone().reshape(vec![t.rows(), t.cols()]).expect("matrix view")
}

/// Clean predictions `g_σ(z̄)` for each row of `z`.
pub fn clean_probs(z: &Tensor, clf: &LinearClassifier) -> Result<Tensor> {
    clf.probs(&normalize_rows(&as_matrix(z))?)
}

/// Per-row inner divergence `KL(p_ref || g_σ(normalize(base + r)))` and its
/// gradient w.r.t. `r`.
pub fn inner_objective(
    clf: &LinearClassifier,
    p_ref: &Tensor,
    base: &Tensor,
    r: &Tensor,
) -> Result<(Vec<f64>, Tensor)> {
    let mut g = Graph::new();
    let rv = g.param(r.clone());
    let bv = g.constant(base.clone());
    let w = g.constant(clf.weight.clone());
    let b = g.constant(clf.bias.clone());
    let s = g.add(bv, rv)?;
    let zeta = g.normalize_l2(s)?;
    let l = g.linear(zeta, w)?;
    let l = g.add_row(l, b)?;
    let kl = kl_rows(&mut g, p_ref, l, clf.temperature)?;
    let values = g.value(kl).data().to_vec();
    let total = g.sum(kl)?;
    g.backward(total)?;
    let grad = g.grad(rv).cloned().unwrap_or_else(|| r.zeros_like());
    Ok((values, grad))
}

/// Per-row `-log g_σ(normalize(base + r))[class]` and its gradient w.r.t. `r`.
fn class_objective(
    clf: &LinearClassifier,
    classes: &[usize],
    base: &Tensor,
    r: &Tensor,
) -> Result<(Vec<f64>, Tensor)> {
    let mut g = Graph::new();
    let rv = g.param(r.clone());
    let bv = g.constant(base.clone());
    let w = g.constant(clf.weight.clone());
    let b = g.constant(clf.bias.clone());
    let s = g.add(bv, rv)?;
    let zeta = g.normalize_l2(s)?;
    let l = g.linear(zeta, w)?;
    let l = g.add_row(l, b)?;
    let ce = cross_entropy_rows(&mut g, l, classes, clf.temperature)?;
    let values = g.value(ce).data().to_vec();
    let total = g.sum(ce)?;
    g.backward(total)?;
    let grad = g.grad(rv).cloned().unwrap_or_else(|| r.zeros_like());
    Ok((values, grad))
}

/// One-step approximation for a batch: `r = ε · normalize(∇_r ℓ_r(ξ d))`,
/// followed by projection for the normalized variant.
///
/// Each row's direction `d` is drawn from `(params.seed, key.step, key.index)`.
pub fn approx_perturbation_rows(
    z: &Tensor,
    clf: &LinearClassifier,
    params: &PerturbParams,
    variant: Variant,
    keys: &[ProbeKey],
) -> Result<RowsOutcome> {
    approx_rows(z, clf, params, variant, keys, true)
}

/// As [`approx_perturbation_rows`] but never projects, so normalized-space
/// rows keep `‖r‖ = ε` and leave the unit sphere.
pub fn approx_perturbation_rows_unprojected(
    z: &Tensor,
    clf: &LinearClassifier,
    params: &PerturbParams,
    variant: Variant,
    keys: &[ProbeKey],
) -> Result<RowsOutcome> {
    approx_rows(z, clf, params, variant, keys, false)
}

fn approx_rows(
    z: &Tensor,
    clf: &LinearClassifier,
    params: &PerturbParams,
    variant: Variant,
    keys: &[ProbeKey],
    project: bool,
) -> Result<RowsOutcome> {
    let z = as_matrix(z);
    let (n, d) = (z.rows(), z.cols());
    if keys.len() != n {
        return Err(Error::shape("approx_perturbation", format!("{} keys for {n} rows", keys.len())));
    }
    let base = base_rows(&z, variant)?;
    let p_ref = clean_probs(&z, clf)?;

    let mut r = Tensor::zeros(&[n, d]);
    let mut pending: Vec<usize> = (0..n).collect();
    for attempt in 0..=MAX_PROBE_RETRIES {
        if pending.is_empty() {
            break;
        }
        let mut probe = Tensor::zeros(&[pending.len(), d]);
        for (k, &i) in pending.iter().enumerate() {
            let mut rng = rng_from(&[params.seed, keys[i].step, keys[i].index, attempt as u64]);
            let dir = random_unit(&mut rng, d);
            probe.row_mut(k).iter_mut().zip(dir).for_each(|(p, v)| *p = params.xi * v);
        }
        let sub_base = base.select_rows(&pending);
        let sub_p = p_ref.select_rows(&pending);
        let (_, grad) = inner_objective(clf, &sub_p, &sub_base, &probe)?;
        let mut still = Vec::new();
        for (k, &i) in pending.iter().enumerate() {
            let gn = l2_norm(grad.row(k));
            if gn > 0.0 && gn.is_finite() {
                for (o, &gv) in r.row_mut(i).iter_mut().zip(grad.row(k)) {
                    *o = params.epsilon * gv / gn;
                }
            } else {
                still.push(i);
            }
        }
        pending = still;
    }

    if project && variant == Variant::Normalized {
        let mut rows_ok: Vec<usize> = (0..n).collect();
        rows_ok.retain(|i| !pending.contains(i));
        for i in rows_ok {
            let projected = project_row(base.row(i), r.row(i))?;
            r.row_mut(i).copy_from_slice(&projected);
        }
    }
    Ok(RowsOutcome { r, failed: pending })
}

/// Single-sample one-step approximation.
pub fn approx_perturbation(
    z: &ActivationRecord,
    clf: &LinearClassifier,
    params: &PerturbParams,
    variant: Variant,
) -> Result<Perturbation> {
    approx_perturbation_keyed(z, clf, params, variant, ProbeKey { step: 0, index: 0 })
}

pub fn approx_perturbation_keyed(
    z: &ActivationRecord,
    clf: &LinearClassifier,
    params: &PerturbParams,
    variant: Variant,
    key: ProbeKey,
) -> Result<Perturbation> {
    let out = approx_perturbation_rows(&z.z, clf, params, variant, &[key])?;
    if !out.failed.is_empty() {
        return Err(Error::ZeroGradient { row: 0, retries: MAX_PROBE_RETRIES });
    }
    let r = Tensor::vector(out.r.row(0).to_vec());
    Ok(match variant {
        Variant::Unnormalized => Perturbation::new(r, params.epsilon, Space::PenultUnnormalized),
        Variant::Normalized => Perturbation {
            r,
            epsilon: params.epsilon,
            space: Space::PenultNormalized,
            budgeted: false,
        },
    })
}

/// Value of the inner divergence at `r` for one sample.
pub fn inner_kl(z: &ActivationRecord, clf: &LinearClassifier, r: &Tensor, variant: Variant) -> Result<f64> {
    let base = match variant {
        Variant::Unnormalized => &z.z,
        Variant::Normalized => &z.z_norm,
    };
    let p = clf.probs(&z.z_norm)?;
    let (v, _) = inner_objective(clf, &as_matrix(&p), &as_matrix(base), &as_matrix(r))?;
    Ok(v[0])
}

fn project_row(z_norm: &[f64], r: &[f64]) -> Result<Vec<f64>> {
    let s: Vec<f64> = z_norm.iter().zip(r).map(|(a, b)| a + b).collect();
    let n = l2_norm(&s);
    if n == 0.0 {
        return Err(Error::degenerate("project_perturbation", "z_norm + r is the zero vector"));
    }
    Ok(s.iter().zip(z_norm).map(|(v, z)| v / n - z).collect())
}

/// `normalize(z̄ + r) - z̄`, row-wise: moves the perturbed point back onto the
/// unit sphere.
pub fn project_perturbation(z_norm: &Tensor, r: &Tensor) -> Result<Tensor> {
    if z_norm.shape() != r.shape() {
        return Err(Error::shape("project_perturbation", format!("{:?} vs {:?}", z_norm.shape(), r.shape())));
    }
    let mut out = r.clone();
    for i in 0..r.rows() {
        let p = project_row(z_norm.row(i), r.row(i))?;
        out.row_mut(i).copy_from_slice(&p);
    }
    Ok(out)
}

fn degenerate_sum(base: &[f64], r: &[f64]) -> bool {
    let s: Vec<f64> = base.iter().zip(r).map(|(a, b)| a + b).collect();
    l2_norm(&s) <= 1e-12 * l2_norm(base).max(1.0)
}

/// Row-wise projected ascent with normalized steps. A row only moves when
/// its objective improves; a rejected step halves that row's step length.
fn ascend<F>(objective: F, base: &Tensor, init: Tensor, epsilon: f64, steps: usize, step0: f64) -> Result<(Tensor, Vec<f64>)>
where
    F: Fn(&Tensor) -> Result<(Vec<f64>, Tensor)>,
{
    let n = init.rows();
    let mut cur = init;
    let (mut val, mut grad) = objective(&cur)?;
    let mut step = vec![step0; n];
    let min_step = epsilon * 1e-12;
    for _ in 0..steps {
        let mut cand = cur.clone();
        let mut moved = vec![false; n];
        for i in 0..n {
            let gn = l2_norm(grad.row(i));
            if gn == 0.0 || !gn.is_finite() || step[i] < min_step {
                continue;
            }
            let mut c: Vec<f64> = cur.row(i).iter().zip(grad.row(i)).map(|(r, g)| r + step[i] * g / gn).collect();
            let cn = l2_norm(&c);
            if cn > epsilon {
                c.iter_mut().for_each(|v| *v *= epsilon / cn);
            }
            if degenerate_sum(base.row(i), &c) {
                step[i] *= 0.5;
                continue;
            }
            cand.row_mut(i).copy_from_slice(&c);
            moved[i] = true;
        }
        if !moved.iter().any(|&m| m) {
            break;
        }
        let (cv, cg) = objective(&cand)?;
        for i in 0..n {
            if !moved[i] {
                continue;
            }
            if cv[i] > val[i] {
                cur.row_mut(i).copy_from_slice(cand.row(i));
                grad.row_mut(i).copy_from_slice(cg.row(i));
                val[i] = cv[i];
            } else {
                step[i] *= 0.5;
            }
        }
    }
    Ok((cur, val))
}

/// Best-effort maximizer of the inner divergence by multi-start projected
/// gradient ascent; the reference the one-step approximation is judged against.
///
/// Restart `k` starts from a seeded random direction at radius
/// `ε (k + 1) / restarts`. Returns the perturbation and its divergence.
pub fn oracle_perturbation(
    z: &ActivationRecord,
    clf: &LinearClassifier,
    epsilon: f64,
    variant: Variant,
    cfg: &AscentConfig,
    seed: u64,
) -> Result<(Perturbation, f64)> {
    let d = z.z.len();
    let space = match variant {
        Variant::Unnormalized => Space::PenultUnnormalized,
        Variant::Normalized => Space::PenultNormalized,
    };
    if epsilon == 0.0 {
        return Ok((Perturbation::new(Tensor::zeros(&[d]), 0.0, space), 0.0));
    }
    if !(epsilon > 0.0) {
        return Err(Error::InvalidArgument(format!("epsilon must be non-negative, got {epsilon}")));
    }
    let restarts = cfg.restarts.max(1);
    let base_vec = match variant {
        Variant::Unnormalized => z.z.data().to_vec(),
        Variant::Normalized => z.z_norm.data().to_vec(),
    };
    let base = Tensor::from_rows(&vec![base_vec.clone(); restarts])?;
    let p = clf.probs(&z.z_norm)?;
    let p_ref = Tensor::from_rows(&vec![p.data().to_vec(); restarts])?;

    let mut rng = rng_from(&[seed, 0x0AC1E]);
    let mut init = Tensor::zeros(&[restarts, d]);
    for k in 0..restarts {
        let radius = epsilon * (k + 1) as f64 / restarts as f64;
        loop {
            let dir = random_unit(&mut rng, d);
            let row: Vec<f64> = dir.iter().map(|v| v * radius).collect();
            if !degenerate_sum(&base_vec, &row) {
                init.row_mut(k).copy_from_slice(&row);
                break;
            }
        }
    }
    let objective = |r: &Tensor| inner_objective(clf, &p_ref, &base, r);
    let (r, vals) = ascend(objective, &base, init, epsilon, cfg.steps, epsilon * cfg.step_fraction)?;
    let best = (0..restarts).fold(0, |b, k| if vals[k] > vals[b] { k } else { b });
    let mut best_r = r.row(best).to_vec();
    let mut budgeted = true;
    if variant == Variant::Normalized {
        best_r = project_row(&base_vec, &best_r)?;
        budgeted = false;
    }
    Ok((Perturbation { r: Tensor::vector(best_r), epsilon, space, budgeted }, vals[best]))
}

/// Class indices of the `k` largest probabilities: descending probability,
/// ties broken by ascending index.
pub fn topk_classes(p: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..p.len()).collect();
    idx.sort_by(|&a, &b| p[b].partial_cmp(&p[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Batched top-k perturbation `Σ_c w_c r_c`, where `r_c` maximizes the
/// cross-entropy of class `c` (projected ascent from `r = 0`) and `w_c` is the
/// clean probability of `c`, summed over each row's `k` most probable classes.
pub fn topk_perturbation_rows(
    z: &Tensor,
    clf: &LinearClassifier,
    epsilon: f64,
    k: usize,
    variant: Variant,
    steps: usize,
    step_fraction: f64,
) -> Result<Tensor> {
    let terms = topk_rank_terms(z, clf, epsilon, k, variant, steps, step_fraction)?;
    let mut total = terms[0].zeros_like();
    for t in &terms {
        total.add_assign(t);
    }
    Ok(total)
}

/// The weighted summands `w_c r_c` of the top-k perturbation, one tensor per
/// rank `0..k`. Partial sums give the perturbation for every smaller `k`.
pub fn topk_rank_terms(
    z: &Tensor,
    clf: &LinearClassifier,
    epsilon: f64,
    k: usize,
    variant: Variant,
    steps: usize,
    step_fraction: f64,
) -> Result<Vec<Tensor>> {
    let z = as_matrix(z);
    let (n, d) = (z.rows(), z.cols());
    let classes = clf.classes();
    if k == 0 || k > classes {
        return Err(Error::InvalidArgument(format!("top-k needs 1 <= k <= {classes}, got {k}")));
    }
    if epsilon == 0.0 {
        return Ok(vec![Tensor::zeros(&[n, d]); k]);
    }
    let base = base_rows(&z, variant)?;
    let p = clean_probs(&z, clf)?;
    let ranked: Vec<Vec<usize>> = p.row_iter().map(|row| topk_classes(row, k)).collect();
    let mut terms = Vec::with_capacity(k);
    for rank in 0..k {
        let targets: Vec<usize> = ranked.iter().map(|r| r[rank]).collect();
        let objective = |r: &Tensor| class_objective(clf, &targets, &base, r);
        let (mut r, _) = ascend(objective, &base, Tensor::zeros(&[n, d]), epsilon, steps, epsilon * step_fraction)?;
        for i in 0..n {
            let w = p.row(i)[targets[i]];
            r.row_mut(i).iter_mut().for_each(|v| *v *= w);
        }
        terms.push(r);
    }
    Ok(terms)
}

pub fn topk_perturbation(
    z: &ActivationRecord,
    clf: &LinearClassifier,
    epsilon: f64,
    k: usize,
    variant: Variant,
    cfg: &AscentConfig,
) -> Result<Perturbation> {
    let r = topk_perturbation_rows(&z.z, clf, epsilon, k, variant, cfg.steps, cfg.step_fraction)?;
    let space = match variant {
        Variant::Unnormalized => Space::PenultUnnormalized,
        Variant::Normalized => Space::PenultNormalized,
    };
    Ok(Perturbation::new(Tensor::vector(r.row(0).to_vec()), epsilon, space))
}

/// `f^b(f^a(x) + r_i) - f(x)`: re-expresses an intermediate-layer
/// perturbation as a change of the penultimate activation.
pub fn map_intermediate_to_penult(x: &Tensor, model: &Model, r_i: &Perturbation) -> Result<Perturbation> {
    let Space::Intermediate(split) = r_i.space else {
        return Err(Error::InvalidArgument(format!("expected an intermediate perturbation, got {:?}", r_i.space)));
    };
    let (a, z) = model.forward_split_at(x, split)?;
    if a.len() != r_i.r.len() {
        return Err(Error::shape("map_intermediate_to_penult", format!("{} vs {}", a.len(), r_i.r.len())));
    }
    let moved = a.zip_map(&r_i.r, |u, v| u + v);
    let z_pert = model.upper(&moved, split)?;
    let r = z_pert.zip_map(&z, |u, v| u - v);
    Ok(Perturbation { r, epsilon: r_i.epsilon, space: Space::PenultUnnormalized, budgeted: false })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MapDirection {
    /// `r_n · ‖z‖`
    NormToUnnorm,
    /// `normalize(z + r_u) - z̄`
    UnnormToNorm,
}

pub fn map_norm_unnorm(r: &Perturbation, z: &ActivationRecord, direction: MapDirection) -> Result<Perturbation> {
    if z.norm == 0.0 {
        return Err(Error::degenerate("map_norm_unnorm", "zero activation"));
    }
    match direction {
        MapDirection::NormToUnnorm => {
            if r.space != Space::PenultNormalized {
                return Err(Error::InvalidArgument(format!("n→u mapping expects a normalized-space r, got {:?}", r.space)));
            }
            Ok(Perturbation {
                r: r.r.scaled(z.norm),
                epsilon: r.epsilon * z.norm,
                space: Space::PenultUnnormalized,
                budgeted: false,
            })
        }
        MapDirection::UnnormToNorm => {
            if r.space != Space::PenultUnnormalized {
                return Err(Error::InvalidArgument(format!("u→n mapping expects an un-normalized r, got {:?}", r.space)));
            }
            let s = z.z.zip_map(&r.r, |a, b| a + b);
            let n = s.norm();
            if n == 0.0 {
                return Err(Error::degenerate("map_norm_unnorm", "z + r is the zero vector"));
            }
            let mapped = s.scaled(1.0 / n).zip_map(&z.z_norm, |a, b| a - b);
            Ok(Perturbation { r: mapped, epsilon: r.epsilon, space: Space::PenultNormalized, budgeted: false })
        }
    }
}

/// `‖z + r_u‖ / ‖z‖`, the loss weight that undoes the gradient shrinking of
/// the un-normalized variant.
pub fn norm_compensation(z: &Tensor, r_u: &Tensor) -> Result<f64> {
    let zn = z.norm();
    if zn == 0.0 {
        return Err(Error::degenerate("norm_compensation", "zero activation"));
    }
    Ok(z.zip_map(r_u, |a, b| a + b).norm() / zn)
}
