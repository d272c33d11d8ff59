//! Diagnostics: perturbation / gradient / activation-change correlations,
//! gradient shrinking, top-k agreement and hyperparameter sweeps.

use std::collections::hash_map::DefaultHasher;
use std::hash::Hasher;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{l2_norm, Graph, Tensor};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::losses::{adversarial_rows, penult_loss, LossKind, OuterForm};
use crate::model::{Mode, Model};
use crate::ops::kl_rows;
use crate::perturb::{
    approx_perturbation_rows, approx_perturbation_rows_unprojected, map_norm_unnorm,
    topk_rank_terms, MapDirection, PerturbParams, Perturbation, ProbeKey, Space, Variant,
};
use crate::rng::{random_unit, rng_from};
use crate::train::{run_adapt_stage, AdaptConfig, RunRecord};

/// Cosine of two vectors, `None` when either has zero norm.
pub fn guarded_cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let (na, nb) = (l2_norm(a), l2_norm(b));
    if na == 0.0 || nb == 0.0 || !na.is_finite() || !nb.is_finite() {
        return None;
    }
    let c = a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb);
    Some(c.clamp(-1.0, 1.0))
}

/// Row-wise cosines averaged over the rows where both vectors are nonzero.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchCosine {
    pub mean: f64,
    pub valid: usize,
    pub excluded: usize,
}

pub fn batch_cosine(a: &Tensor, b: &Tensor) -> BatchCosine {
    let mut sum = 0.0;
    let mut valid = 0;
    for i in 0..a.rows() {
        if let Some(c) = guarded_cosine(a.row(i), b.row(i)) {
            sum += c;
            valid += 1;
        }
    }
    let mean = if valid == 0 { f64::NAN } else { sum / valid as f64 };
    BatchCosine { mean, valid, excluded: a.rows() - valid }
}

/// Trailing moving average; the first entries average what is available.
/// NaN entries are skipped.
pub fn moving_average(values: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    (0..values.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(window);
            let finite: Vec<f64> = values[lo..=i].iter().copied().filter(|v| v.is_finite()).collect();
            if finite.is_empty() {
                f64::NAN
            } else {
                finite.iter().sum::<f64>() / finite.len() as f64
            }
        })
        .collect()
}

/// Hash of every parameter and running statistic, bit-exact.
pub fn param_hash(model: &Model) -> u64 {
    let mut h = DefaultHasher::new();
    for t in model.param_tensors() {
        for v in t.data() {
            h.write_u64(v.to_bits());
        }
    }
    for layer in &model.extractor.layers {
        for v in layer.running_mean.iter().chain(&layer.running_var) {
            h.write_u64(v.to_bits());
        }
    }
    h.finish()
}

/// Deterministic subset of `data` used as the probe batch.
pub fn probe_batch(data: &Dataset, size: usize, seed: u64) -> Tensor {
    use rand::seq::SliceRandom;
    let mut idx: Vec<usize> = (0..data.x.rows()).collect();
    idx.shuffle(&mut rng_from(&[seed, 0x70726f6265]));
    idx.truncate(size.min(idx.len()));
    idx.sort_unstable();
    data.x.select_rows(&idx)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub batch_size: usize,
    /// Learning rate of the single descent step that produces `δ`.
    pub lr: f64,
    /// Fraction of the run treated as warm-up when summarizing.
    pub warmup_fraction: f64,
    pub smoothing_window: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig { batch_size: 256, lr: 1e-3, warmup_fraction: 0.1, smoothing_window: 10, seed: 0 }
    }
}

/// Names of the vectors compared by [`probe_correlations`], in field order.
pub const PROBE_VECTORS: [&str; 7] = ["r_u", "r_n", "grad_u", "grad_n", "delta_u", "delta_n", "delta_i"];

#[derive(Clone, Debug)]
pub struct ProbeSample {
    pub step: u64,
    pub r_u: Tensor,
    pub r_n: Tensor,
    /// `∂ℓ^(p_u)/∂z`
    pub grad_u: Tensor,
    /// `∂ℓ^(p_n)/∂z̄`
    pub grad_n: Tensor,
    pub delta_u: Tensor,
    pub delta_n: Tensor,
    pub delta_i: Tensor,
    /// Batch cosines for every pair of [`PROBE_VECTORS`], keyed `"a~b"`.
    pub cosines: Vec<(String, BatchCosine)>,
    /// No row had a usable adversarial gradient.
    pub skipped: bool,
}

impl ProbeSample {
    pub fn vectors(&self) -> [&Tensor; 7] {
        [&self.r_u, &self.r_n, &self.grad_u, &self.grad_n, &self.delta_u, &self.delta_n, &self.delta_i]
    }

    pub fn cosine(&self, a: &str, b: &str) -> Option<BatchCosine> {
        let key = format!("{a}~{b}");
        let alt = format!("{b}~{a}");
        self.cosines.iter().find(|(k, _)| *k == key || *k == alt).map(|(_, c)| *c)
    }
}

fn descend(model: &mut Model, grads: &[Tensor], lr: f64) {
    for (p, g) in model.param_tensors_mut().into_iter().zip(grads) {
        for (v, d) in p.data_mut().iter_mut().zip(g.data()) {
            *v -= lr * d;
        }
    }
}

fn normalized_rows(z: &Tensor) -> Tensor {
    let mut out = z.clone();
    for i in 0..out.rows() {
        let n = l2_norm(out.row(i));
        if n > 0.0 {
            out.row_mut(i).iter_mut().for_each(|v| *v /= n);
        }
    }
    out
}

/// Change of the normalized activations after one plain descent step on a
/// penultimate adversarial loss, together with the activation gradient.
fn penult_step(model: &Model, x: &Tensor, r: &Tensor, form: OuterForm, lr: f64) -> Result<(Tensor, Tensor)> {
    let mut g = Graph::new();
    let vars = model.bind(&mut g);
    let xv = g.constant(x.clone());
    let fwd = model.forward(&mut g, &vars, xv, Mode::Eval)?;
    let p = g.softmax(fwd.logits, model.temperature())?;
    let p_ref = g.value(p).clone();
    let rows = adversarial_rows(&mut g, model, &vars, fwd.z, fwd.z_norm, &p_ref, r, form)?;
    let loss = g.mean(rows)?;
    g.backward(loss)?;
    let wrt = match form {
        OuterForm::Unnormalized => fwd.z,
        _ => fwd.z_norm,
    };
    let grad = g.grad(wrt).cloned().unwrap_or_else(|| g.value(wrt).zeros_like());
    let grads: Vec<Tensor> =
        vars.all().iter().map(|&v| g.grad(v).cloned().unwrap_or_else(|| g.value(v).zeros_like())).collect();
    let before = normalized_rows(g.value(fwd.z));
    let mut moved = model.clone();
    descend(&mut moved, &grads, lr);
    let after = normalized_rows(&moved.activations(x)?);
    Ok((after.zip_map(&before, |a, b| a - b), grad))
}

/// One-step adversarial perturbation after extractor layer `split`, with
/// `ξ` and `ε` scaled by each row's activation norm at that layer.
pub fn intermediate_perturbation(model: &Model, x: &Tensor, split: usize, params: &PerturbParams, step: u64) -> Result<Tensor> {
    let a = model.lower(x, split)?;
    let p_ref = model.predict_proba(x)?;
    let layers = model.extractor.layers.len();
    let (n, d) = (a.rows(), a.cols());
    let norms: Vec<f64> = a.row_iter().map(l2_norm).collect();
    let mut probe = Tensor::zeros(&[n, d]);
    for i in 0..n {
        let mut rng = rng_from(&[params.seed, step, i as u64, 0x696e]);
        let dir = random_unit(&mut rng, d);
        probe.row_mut(i).iter_mut().zip(dir).for_each(|(p, v)| *p = params.xi * norms[i] * v);
    }
    let mut g = Graph::new();
    let vars = model.bind_constant(&mut g);
    let av = g.constant(a);
    let rv = g.param(probe);
    let moved = g.add(av, rv)?;
    let (z, _) = model.extract_range(&mut g, &vars, moved, split..layers, Mode::Eval)?;
    let zeta = g.normalize_l2_or_zero(z)?;
    let logits = model.head(&mut g, &vars, zeta)?;
    let kl = kl_rows(&mut g, &p_ref, logits, model.temperature())?;
    let total = g.sum(kl)?;
    g.backward(total)?;
    let mut r = g.grad(rv).cloned().unwrap_or_else(|| Tensor::zeros(&[n, d]));
    for i in 0..n {
        let gn = l2_norm(r.row(i));
        let s = if gn > 0.0 && gn.is_finite() { params.epsilon * norms[i] / gn } else { 0.0 };
        r.row_mut(i).iter_mut().for_each(|v| *v *= s);
    }
    Ok(r)
}

fn intermediate_step(model: &Model, x: &Tensor, split: usize, r_i: &Tensor, lr: f64) -> Result<Tensor> {
    let p_ref = model.predict_proba(x)?;
    let layers = model.extractor.layers.len();
    let mut g = Graph::new();
    let vars = model.bind(&mut g);
    let xv = g.constant(x.clone());
    let (a, _) = model.extract_range(&mut g, &vars, xv, 0..split, Mode::Eval)?;
    let rv = g.constant(r_i.clone());
    let a = g.add(a, rv)?;
    let (z, _) = model.extract_range(&mut g, &vars, a, split..layers, Mode::Eval)?;
    let zeta = g.normalize_l2_or_zero(z)?;
    let logits = model.head(&mut g, &vars, zeta)?;
    let kl = kl_rows(&mut g, &p_ref, logits, model.temperature())?;
    let loss = g.mean(kl)?;
    g.backward(loss)?;
    let grads: Vec<Tensor> =
        vars.all().iter().map(|&v| g.grad(v).cloned().unwrap_or_else(|| g.value(v).zeros_like())).collect();
    let before = normalized_rows(&model.activations(x)?);
    let mut moved = model.clone();
    descend(&mut moved, &grads, lr);
    let after = normalized_rows(&moved.activations(x)?);
    Ok(after.zip_map(&before, |a, b| a - b))
}

/// Perturbations, activation gradients and one-step activation changes for
/// the un-normalized, normalized and intermediate adversarial losses, with
/// all pairwise batch cosines. `model` is cloned, never modified.
pub fn probe_correlations(x: &Tensor, model: &Model, cfg: &ProbeConfig, step: u64) -> Result<ProbeSample> {
    let z = model.activations(x)?;
    let n = z.rows();
    let keys: Vec<ProbeKey> = (0..n as u64).map(|index| ProbeKey { step, index }).collect();
    let clf = &model.classifier;
    let zero_rows: Vec<usize> = (0..n).filter(|&i| l2_norm(z.row(i)) == 0.0).collect();
    let mut z_safe = z.clone();
    for &i in &zero_rows {
        z_safe.row_mut(i)[0] = 1.0;
    }
    let params_u = PerturbParams::defaults_for(Variant::Unnormalized, cfg.seed);
    let params_n = PerturbParams::defaults_for(Variant::Normalized, cfg.seed);
    let mut r_u = approx_perturbation_rows(&z_safe, clf, &params_u, Variant::Unnormalized, &keys)?;
    let mut r_n = approx_perturbation_rows(&z_safe, clf, &params_n, Variant::Normalized, &keys)?;
    for &i in &zero_rows {
        r_u.r.row_mut(i).iter_mut().for_each(|v| *v = 0.0);
        r_n.r.row_mut(i).iter_mut().for_each(|v| *v = 0.0);
    }
    let usable = (0..n).filter(|&i| l2_norm(r_n.r.row(i)) > 0.0 || l2_norm(r_u.r.row(i)) > 0.0).count();

    let (delta_u, grad_u) = penult_step(model, x, &r_u.r, OuterForm::Unnormalized, cfg.lr)?;
    let (delta_n, grad_n) = penult_step(model, x, &r_n.r, OuterForm::Projected, cfg.lr)?;
    let split = model.extractor.split;
    let r_i = intermediate_perturbation(model, x, split, &params_n, step)?;
    let delta_i = intermediate_step(model, x, split, &r_i, cfg.lr)?;

    let mut sample = ProbeSample {
        step,
        r_u: r_u.r,
        r_n: r_n.r,
        grad_u,
        grad_n,
        delta_u,
        delta_n,
        delta_i,
        cosines: Vec::new(),
        skipped: usable == 0,
    };
    let vs = sample.vectors();
    let mut cosines = Vec::new();
    for a in 0..vs.len() {
        for b in a + 1..vs.len() {
            cosines.push((format!("{}~{}", PROBE_VECTORS[a], PROBE_VECTORS[b]), batch_cosine(vs[a], vs[b])));
        }
    }
    sample.cosines = cosines;
    Ok(sample)
}

/// Sign agreement of the probes after warm-up.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignSummary {
    pub probes: usize,
    /// Fraction with batch-averaged `cos(r_n, ∇_n) > 0`.
    pub grad_positive: f64,
    /// Fraction with batch-averaged `cos(r_n, δ_n) < 0`.
    pub delta_negative: f64,
    pub skipped: usize,
}

pub fn correlation_signs(samples: &[ProbeSample], warmup_steps: u64) -> SignSummary {
    let after: Vec<&ProbeSample> = samples.iter().filter(|s| s.step >= warmup_steps).collect();
    let used: Vec<&&ProbeSample> = after.iter().filter(|s| !s.skipped).collect();
    let frac = |pred: &dyn Fn(&ProbeSample) -> bool| {
        if used.is_empty() {
            f64::NAN
        } else {
            used.iter().filter(|s| pred(s)).count() as f64 / used.len() as f64
        }
    };
    let positive = |s: &ProbeSample| s.cosine("r_n", "grad_n").is_some_and(|c| c.mean > 0.0);
    let negative = |s: &ProbeSample| s.cosine("r_n", "delta_n").is_some_and(|c| c.mean < 0.0);
    SignSummary {
        probes: used.len(),
        grad_positive: frac(&positive),
        delta_negative: frac(&negative),
        skipped: after.len() - used.len(),
    }
}

pub fn warmup_steps(cfg: &AdaptConfig, probe: &ProbeConfig) -> u64 {
    (cfg.adapt_steps as f64 * probe.warmup_fraction).ceil() as u64
}

#[derive(Clone, Debug)]
pub struct ProbedRun {
    pub records: Vec<RunRecord>,
    pub samples: Vec<ProbeSample>,
}

/// Adaptation run with [`probe_correlations`] evaluated on a fixed target
/// batch at every evaluation step.
pub fn run_correlation_probe(
    cfg: &AdaptConfig,
    start: &Model,
    source: Option<&Dataset>,
    target: &Dataset,
    probe: &ProbeConfig,
) -> Result<ProbedRun> {
    let x = probe_batch(target, probe.batch_size, probe.seed);
    let mut samples = Vec::new();
    let mut observer = |model: &Model, step: u64| -> Result<Vec<(String, f64)>> {
        let s = probe_correlations(&x, model, probe, step)?;
        let out = [("r_n", "grad_n"), ("r_n", "delta_n"), ("r_n", "grad_u"), ("r_n", "delta_u"), ("r_n", "delta_i")]
            .iter()
            .map(|(a, b)| (format!("cos_{a}_{b}"), s.cosine(a, b).map_or(f64::NAN, |c| c.mean)))
            .collect();
        samples.push(s);
        Ok(out)
    };
    let outcome = run_adapt_stage(cfg, start, source, target, Some(&mut observer))?;
    Ok(ProbedRun { records: outcome.records, samples })
}

/// Batch cosines between the one-step APA perturbation and the top-k
/// perturbation for `k = 1..=k_max`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TopkProbe {
    pub step: u64,
    pub cosines: Vec<BatchCosine>,
}

impl TopkProbe {
    pub fn monotone(&self) -> bool {
        self.cosines.windows(2).all(|w| !(w[1].mean < w[0].mean))
    }
}

/// For the normalized variant the reference perturbation is taken before
/// projection, matching the renormalized objective the top-k terms maximize.
pub fn probe_topk(
    x: &Tensor,
    model: &Model,
    variant: Variant,
    k_max: usize,
    ascent_steps: usize,
    seed: u64,
    step: u64,
) -> Result<TopkProbe> {
    let z = model.activations(x)?;
    let active: Vec<usize> = (0..z.rows()).filter(|&i| l2_norm(z.row(i)) > 0.0).collect();
    let z = z.select_rows(&active);
    let clf = &model.classifier;
    let params = PerturbParams::defaults_for(variant, seed);
    let keys: Vec<ProbeKey> = (0..z.rows() as u64).map(|index| ProbeKey { step, index }).collect();
    let reference = approx_perturbation_rows_unprojected(&z, clf, &params, variant, &keys)?.r;
    let terms = topk_rank_terms(&z, clf, params.epsilon, k_max, variant, ascent_steps, 1.0 / 20.0)?;
    let mut partial = reference.zeros_like();
    let mut cosines = Vec::with_capacity(k_max);
    for t in &terms {
        partial.add_assign(t);
        cosines.push(batch_cosine(&reference, &partial));
    }
    Ok(TopkProbe { step, cosines })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TopkSummary {
    pub probes: usize,
    /// Fraction of probes where every `k` has a positive batch cosine.
    pub all_positive: f64,
    /// Fraction of probes whose cosines decrease somewhere along `k`.
    pub monotone_violations: f64,
}

pub fn topk_summary(probes: &[TopkProbe]) -> TopkSummary {
    let n = probes.len().max(1) as f64;
    TopkSummary {
        probes: probes.len(),
        all_positive: probes.iter().filter(|p| p.cosines.iter().all(|c| c.mean > 0.0)).count() as f64 / n,
        monotone_violations: probes.iter().filter(|p| !p.monotone()).count() as f64 / n,
    }
}

/// Mean over probes of the batch cosine for each `k`.
pub fn topk_mean_curve(probes: &[TopkProbe]) -> Vec<f64> {
    let k = probes.first().map_or(0, |p| p.cosines.len());
    (0..k)
        .map(|j| {
            let v: Vec<f64> = probes.iter().map(|p| p.cosines[j].mean).filter(|v| v.is_finite()).collect();
            v.iter().sum::<f64>() / v.len().max(1) as f64
        })
        .collect()
}

pub struct TopkRun {
    pub records: Vec<RunRecord>,
    pub probes: Vec<TopkProbe>,
}

/// Adaptation run with [`probe_topk`] at every evaluation step.
pub fn run_topk_probe(
    cfg: &AdaptConfig,
    start: &Model,
    source: Option<&Dataset>,
    target: &Dataset,
    probe: &ProbeConfig,
    variant: Variant,
    k_max: usize,
) -> Result<TopkRun> {
    let x = probe_batch(target, probe.batch_size, probe.seed);
    let mut probes = Vec::new();
    let steps = cfg.loss.topk_steps;
    let mut observer = |model: &Model, step: u64| -> Result<Vec<(String, f64)>> {
        let p = probe_topk(&x, model, variant, k_max, steps, probe.seed, step)?;
        let out = p.cosines.iter().enumerate().map(|(k, c)| (format!("cos_k{}", k + 1), c.mean)).collect();
        probes.push(p);
        Ok(out)
    };
    let outcome = run_adapt_stage(cfg, start, source, target, Some(&mut observer))?;
    Ok(TopkRun { records: outcome.records, probes })
}

/// One row of the gradient-shrinking table.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShrinkRow {
    pub epsilon: f64,
    /// Mean of `‖∂ℓ_u/∂z‖ · ‖z + r_u‖ / ‖∂ℓ_n/∂z̄‖` with `r_n` mapped from `r_u`.
    pub ratio_mean: f64,
    pub ratio_min: f64,
    pub ratio_max: f64,
    /// Mean `‖z + r_u‖ / ‖z‖`, the compensation weight.
    pub norm_ratio: f64,
    pub valid: usize,
    pub excluded: usize,
}

/// Per-row ratio `‖∂ℓ_u/∂z‖ · ‖z + r_u‖ / ‖∂ℓ_n/∂z̄‖` where `ℓ_n` uses the
/// normalized-space image of `r_u`, so both losses share their value.
pub fn shrink_ratios(z: &Tensor, model: &Model, r_u: &Tensor) -> Result<Vec<Option<f64>>> {
    let clf = &model.classifier;
    let n = z.rows();
    let mut r_n = r_u.zeros_like();
    for i in 0..n {
        let rec = crate::model::ActivationRecord::from_activation(Tensor::vector(z.row(i).to_vec()))?;
        let pu = Perturbation::new(Tensor::vector(r_u.row(i).to_vec()), f64::INFINITY, Space::PenultUnnormalized);
        let pn = map_norm_unnorm(&pu, &rec, MapDirection::UnnormToNorm)?;
        r_n.row_mut(i).copy_from_slice(pn.r.data());
    }
    let gu = penult_loss(z, clf, r_u, OuterForm::Unnormalized)?;
    let gn = penult_loss(z, clf, &r_n, OuterForm::Projected)?;
    Ok((0..n)
        .map(|i| {
            let s: Vec<f64> = z.row(i).iter().zip(r_u.row(i)).map(|(a, b)| a + b).collect();
            let denom = l2_norm(gn.grad_z_norm.row(i));
            let num = l2_norm(gu.grad_z.row(i)) * l2_norm(&s);
            (denom > 0.0 && num.is_finite()).then(|| num / denom)
        })
        .collect())
}

/// Shrinking ratios and compensation weights of the one-step un-normalized
/// perturbation for every `ε` in `grid`.
pub fn probe_shrinking(x: &Tensor, model: &Model, grid: &[f64], seed: u64) -> Result<Vec<ShrinkRow>> {
    let z = model.activations(x)?;
    let active: Vec<usize> = (0..z.rows()).filter(|&i| l2_norm(z.row(i)) > 0.0).collect();
    let z = z.select_rows(&active);
    let dropped = x.rows() - active.len();
    let keys: Vec<ProbeKey> = (0..z.rows() as u64).map(|index| ProbeKey { step: 0, index }).collect();
    let defaults = PerturbParams::defaults_for(Variant::Unnormalized, seed);
    let mut rows = Vec::with_capacity(grid.len());
    for &epsilon in grid {
        let params = PerturbParams::new(epsilon, defaults.xi, seed)?;
        let out = approx_perturbation_rows(&z, &model.classifier, &params, Variant::Unnormalized, &keys)?;
        let ratios = shrink_ratios(&z, model, &out.r)?;
        let mut valid = Vec::new();
        let mut comp = 0.0;
        for (i, r) in ratios.iter().enumerate() {
            if let (Some(v), false) = (r, out.failed.contains(&i)) {
                valid.push(*v);
                let s: Vec<f64> = z.row(i).iter().zip(out.r.row(i)).map(|(a, b)| a + b).collect();
                comp += l2_norm(&s) / l2_norm(z.row(i));
            }
        }
        let k = valid.len();
        rows.push(ShrinkRow {
            epsilon,
            ratio_mean: if k == 0 { f64::NAN } else { valid.iter().sum::<f64>() / k as f64 },
            ratio_min: valid.iter().copied().fold(f64::INFINITY, f64::min),
            ratio_max: valid.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            norm_ratio: if k == 0 { f64::NAN } else { comp / k as f64 },
            valid: k,
            excluded: z.rows() - k + dropped,
        });
    }
    Ok(rows)
}

/// `ε` grid of the shrinking probe and the `ε` sweep.
pub const EPSILON_GRID: [f64; 5] = [1.0, 3.0, 10.0, 30.0, 100.0];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepParam {
    Eps,
    Beta,
    Topk,
}

impl std::str::FromStr for SweepParam {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "eps" | "epsilon" => Ok(SweepParam::Eps),
            "beta" => Ok(SweepParam::Beta),
            "topk" | "k" => Ok(SweepParam::Topk),
            other => Err(Error::InvalidArgument(format!("unknown sweep parameter {other:?} (eps, beta, topk)"))),
        }
    }
}

impl std::fmt::Display for SweepParam {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SweepParam::Eps => "eps",
            SweepParam::Beta => "beta",
            SweepParam::Topk => "topk",
        })
    }
}

impl SweepParam {
    /// `cfg` with the swept value applied. A top-k sweep switches a
    /// penultimate loss to its top-k form of the same variant.
    pub fn apply(self, cfg: &AdaptConfig, value: f64) -> Result<AdaptConfig> {
        let mut c = cfg.clone();
        match self {
            SweepParam::Eps => c.loss.perturb.epsilon = value,
            SweepParam::Beta => c.beta = value,
            SweepParam::Topk => {
                if value < 1.0 || value.fract() != 0.0 {
                    return Err(Error::InvalidArgument(format!("top-k value must be a positive integer, got {value}")));
                }
                c.loss.topk = value as usize;
                c.loss.kind = match c.loss.kind {
                    LossKind::ApaU | LossKind::ApaUComp | LossKind::ApaTopkU => LossKind::ApaTopkU,
                    _ => LossKind::ApaTopkN,
                };
            }
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub param: SweepParam,
    pub value: f64,
    pub seed: u64,
    pub loss: String,
    pub final_class_acc: f64,
    pub final_acc: f64,
}

/// One adaptation run per value from the shared stage-1 model `start`,
/// at most `jobs` at a time. Rows come back in `values` order.
pub fn sweep(
    cfg: &AdaptConfig,
    start: &Model,
    source: Option<&Dataset>,
    target: &Dataset,
    param: SweepParam,
    values: &[f64],
    jobs: usize,
) -> Result<Vec<SweepRow>> {
    let configs: Vec<AdaptConfig> = values.iter().map(|&v| param.apply(cfg, v)).collect::<Result<_>>()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    pool.install(|| {
        configs
            .par_iter()
            .zip(values.par_iter())
            .map(|(c, &value)| {
                let out = run_adapt_stage(c, start, source, target, None)?;
                let last = out.records.last().ok_or_else(|| Error::EmptyDataset("run produced no records".into()))?;
                Ok(SweepRow {
                    param,
                    value,
                    seed: c.seed,
                    loss: c.loss.kind.name().to_string(),
                    final_class_acc: last.target_class_acc,
                    final_acc: last.target_acc,
                })
            })
            .collect()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::TaskSpec;
    use crate::losses::LossSettings;
    use crate::model::Architecture;
    use crate::rng::standard_normal;

    fn model(seed: u64) -> Model {
        Model::new(Architecture::new(6, 3), seed).unwrap()
    }

    fn batch(n: usize, seed: u64) -> Tensor {
        let mut rng = rng_from(&[seed, 9]);
        Tensor::matrix(n, 6, (0..n * 6).map(|_| standard_normal(&mut rng)).collect()).unwrap()
    }

    #[test]
    fn guarded_cosine_excludes_zero_vectors() {
        assert_eq!(guarded_cosine(&[0.0, 0.0], &[1.0, 0.0]), None);
        assert_eq!(guarded_cosine(&[2.0, 0.0], &[3.0, 0.0]), Some(1.0));
        let a = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let b = Tensor::matrix(2, 2, vec![-1.0, 0.0, 1.0, 1.0]).unwrap();
        let c = batch_cosine(&a, &b);
        assert_eq!((c.mean, c.valid, c.excluded), (-1.0, 1, 1));
    }

    #[test]
    fn moving_average_is_trailing() {
        let m = moving_average(&[1.0, 3.0, 5.0, f64::NAN, 7.0], 2);
        assert_eq!(m[..3], [1.0, 2.0, 4.0]);
        assert_eq!(m[3], 5.0);
        assert_eq!(m[4], 7.0);
    }

    #[test]
    fn probes_leave_the_model_untouched() {
        let m = model(3);
        let before = param_hash(&m);
        let x = batch(32, 1);
        let s = probe_correlations(&x, &m, &ProbeConfig::default(), 0).unwrap();
        probe_shrinking(&x, &m, &[1.0, 30.0], 0).unwrap();
        probe_topk(&x, &m, Variant::Normalized, 3, 10, 0, 0).unwrap();
        assert_eq!(param_hash(&m), before);
        assert_eq!(s.cosines.len(), 21);
        for (_, c) in &s.cosines {
            assert!(c.mean.is_nan() || (-1.0..=1.0).contains(&c.mean));
        }
    }

    #[test]
    fn symmetric_classifier_is_flagged() {
        let mut m = model(4);
        m.classifier.weight = m.classifier.weight.zeros_like();
        m.classifier.bias = m.classifier.bias.zeros_like();
        let s = probe_correlations(&batch(8, 2), &m, &ProbeConfig::default(), 0).unwrap();
        assert!(s.skipped);
        assert!(s.cosine("r_n", "grad_n").unwrap().mean.is_nan());
        assert_eq!(correlation_signs(&[s], 0).probes, 0);
    }

    #[test]
    fn adversarial_direction_matches_gradient_sign() {
        let m = model(5);
        let s = probe_correlations(&batch(64, 3), &m, &ProbeConfig::default(), 0).unwrap();
        assert!(s.cosine("r_n", "grad_n").unwrap().mean > 0.0);
        assert!(s.cosine("r_n", "delta_n").unwrap().mean < 0.0);
    }

    #[test]
    fn shrink_ratio_is_exact_for_orthogonal_gradients() {
        // Class weights along e₂ and z + r with no e₂ component: the upstream
        // gradient is orthogonal to the normalized point.
        let mut m = Model::new(Architecture { bottleneck: 3, ..Architecture::new(6, 2) }, 0).unwrap();
        m.classifier.weight = Tensor::matrix(2, 3, vec![0.0, 1.0, 0.0, 0.0, -1.0, 0.0]).unwrap();
        m.classifier.bias = Tensor::vector(vec![0.0, 0.0]);
        let z = Tensor::matrix(1, 3, vec![3.0, 1.0, 0.0]).unwrap();
        let r = Tensor::matrix(1, 3, vec![0.0, -1.0, 2.0]).unwrap();
        let v = shrink_ratios(&z, &m, &r).unwrap()[0].unwrap();
        assert!((v - 1.0).abs() < 1e-8, "{v}");
    }

    #[test]
    fn sweep_single_value_equals_single_run() {
        let task = TaskSpec { samples: 200, ..Default::default() };
        let (s, t) = task.generate().unwrap();
        let mut cfg = AdaptConfig::new(LossSettings::new(LossKind::ApaN, 0), 0);
        cfg.source_steps = 20;
        cfg.adapt_steps = 20;
        cfg.eval_interval = 10;
        let src = crate::train::run_source_stage(&cfg, Architecture::new(8, 4), &s, None).unwrap();
        let rows = sweep(&cfg, &src.model, Some(&s), &t, SweepParam::Beta, &[0.1], 1).unwrap();
        let single = run_adapt_stage(&cfg, &src.model, Some(&s), &t, None).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].final_class_acc.to_bits(), single.records.last().unwrap().target_class_acc.to_bits());
        let topk = SweepParam::Topk.apply(&cfg, 2.0).unwrap();
        assert_eq!((topk.loss.kind, topk.loss.topk), (LossKind::ApaTopkN, 2));
        assert!(SweepParam::Topk.apply(&cfg, 1.5).is_err());
    }
}
