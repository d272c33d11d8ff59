//! Target-domain losses and the full adaptation objectives.
//!
//! Every loss is built inside a caller-owned [`Graph`] on top of a model
//! forward pass, so gradients reach all model parameters. Clean predictions
//! used as divergence targets are constants.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{l2_norm, Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::{LinearClassifier, Mode, Model, ModelVars};
use crate::ops::{argmax, cross_entropy_rows, entropy_rows, kl_rows, softmax_row, weighted_mean};
use crate::perturb::{
    approx_perturbation_rows, approx_perturbation_rows_unprojected, topk_perturbation_rows, PerturbParams,
    ProbeKey, RowsOutcome, Variant,
};
use crate::rng::{random_unit, rng_from, standard_normal};

#[derive(Clone, Copy, Debug)]
pub struct LossTerm {
    pub name: &'static str,
    pub value: Var,
    pub weight: f64,
}

impl LossTerm {
    pub fn scalar(&self, g: &Graph) -> f64 {
        g.value(self.value).item()
    }
}

/// Where the perturbed prediction is evaluated relative to `z` and `z̄`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OuterForm {
    /// `normalize(z + r)`
    Unnormalized,
    /// `z̄ + r`
    Projected,
    /// `normalize(z̄ + r)`
    Renormalized,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// No target term (source-only control).
    None,
    ApaU,
    /// APA^u weighted by `‖z + r‖ / ‖z‖`.
    ApaUComp,
    ApaN,
    /// Normalized perturbation without projection, re-normalized instead.
    ApaNPrime,
    ApaTopkU,
    ApaTopkN,
    Vat,
    Ent,
    Mi,
    Fixmatch,
    Sentry,
}

impl LossKind {
    pub const ALL: [LossKind; 12] = [
        LossKind::None,
        LossKind::ApaU,
        LossKind::ApaUComp,
        LossKind::ApaN,
        LossKind::ApaNPrime,
        LossKind::ApaTopkU,
        LossKind::ApaTopkN,
        LossKind::Vat,
        LossKind::Ent,
        LossKind::Mi,
        LossKind::Fixmatch,
        LossKind::Sentry,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::None => "none",
            LossKind::ApaU => "apa_u",
            LossKind::ApaUComp => "apa_u_comp",
            LossKind::ApaN => "apa_n",
            LossKind::ApaNPrime => "apa_n_prime",
            LossKind::ApaTopkU => "apa_topk_u",
            LossKind::ApaTopkN => "apa_topk_n",
            LossKind::Vat => "vat",
            LossKind::Ent => "ent",
            LossKind::Mi => "mi",
            LossKind::Fixmatch => "fixmatch",
            LossKind::Sentry => "sentry",
        }
    }

    /// Perturbation variant for the penultimate-space losses.
    pub fn variant(self) -> Option<Variant> {
        match self {
            LossKind::ApaU | LossKind::ApaUComp | LossKind::ApaTopkU => Some(Variant::Unnormalized),
            LossKind::ApaN | LossKind::ApaNPrime | LossKind::ApaTopkN => Some(Variant::Normalized),
            _ => None,
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = LossKind::ALL.iter().map(|k| k.name()).collect();
                Error::InvalidArgument(format!("unknown loss '{s}' (expected one of {})", names.join(", ")))
            })
    }
}

/// Parametric stand-in for data augmentation: Gaussian noise scaled by the
/// per-feature spread, then random coordinate masking.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Jitter {
    pub sigma: f64,
    pub mask_rate: f64,
}

impl Jitter {
    pub const WEAK: Jitter = Jitter { sigma: 0.05, mask_rate: 0.0 };
    pub const STRONG: Jitter = Jitter { sigma: 0.25, mask_rate: 0.2 };

    pub fn apply(&self, x: &Tensor, scale: &[f64], seed: &[u64]) -> Result<Tensor> {
        if x.cols() != scale.len() {
            return Err(Error::shape("jitter", format!("{} features, {} scales", x.cols(), scale.len())));
        }
        let mut rng = rng_from(seed);
        let mut out = x.clone();
        for i in 0..out.rows() {
            for (v, s) in out.row_mut(i).iter_mut().zip(scale) {
                *v += self.sigma * s * standard_normal(&mut rng);
                if self.mask_rate > 0.0 && rand::Rng::random::<f64>(&mut rng) < self.mask_rate {
                    *v = 0.0;
                }
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CommitteeConfig {
    pub size: usize,
    pub jitter: Jitter,
    /// Window length of the running mean prediction.
    pub history: usize,
    /// A sample is consistent when at least this many views agree with the
    /// clean prediction.
    pub majority: usize,
}

impl Default for CommitteeConfig {
    fn default() -> Self {
        CommitteeConfig { size: 3, jitter: Jitter::STRONG, history: 256, majority: 2 }
    }
}

impl CommitteeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.size < 2 || self.history < 1 || self.majority == 0 || self.majority > self.size {
            return Err(Error::Config(format!("invalid committee {self:?}")));
        }
        Ok(())
    }
}

/// Running mean over the most recent `capacity` prediction vectors.
#[derive(Clone, Debug)]
pub struct PredictionWindow {
    capacity: usize,
    classes: usize,
    items: VecDeque<Vec<f64>>,
}

impl PredictionWindow {
    pub fn new(capacity: usize, classes: usize) -> Self {
        PredictionWindow { capacity: capacity.max(1), classes, items: VecDeque::new() }
    }

    pub fn push(&mut self, p: &[f64]) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(p.to_vec());
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Window mean, summed in insertion order.
    pub fn mean(&self) -> Vec<f64> {
        let n = self.items.len().max(1) as f64;
        let mut m = vec![0.0; self.classes];
        for it in &self.items {
            m.iter_mut().zip(it).for_each(|(a, b)| *a += b);
        }
        m.into_iter().map(|v| v / n).collect()
    }
}

/// Everything a target loss needs besides the batch itself.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossSettings {
    pub kind: LossKind,
    pub perturb: PerturbParams,
    /// Scale the loss by the norm ratio (un-normalized variants only).
    pub compensate: bool,
    pub topk: usize,
    pub topk_steps: usize,
    pub vat_epsilon: f64,
    pub vat_xi: f64,
    pub tau: f64,
    pub weak: Jitter,
    pub strong: Jitter,
    pub committee: CommitteeConfig,
}

impl LossSettings {
    pub fn new(kind: LossKind, seed: u64) -> Self {
        let variant = kind.variant().unwrap_or(Variant::Normalized);
        LossSettings {
            kind,
            perturb: PerturbParams::defaults_for(variant, seed),
            compensate: kind == LossKind::ApaUComp,
            topk: 1,
            topk_steps: 50,
            vat_epsilon: 1.0,
            vat_xi: 1e-6,
            tau: 0.75,
            weak: Jitter::WEAK,
            strong: Jitter::STRONG,
            committee: CommitteeConfig::default(),
        }
    }
}

/// Mutable state carried across steps (SENTRY history).
#[derive(Clone, Debug)]
pub struct LossState {
    pub window: PredictionWindow,
}

impl LossState {
    pub fn new(settings: &LossSettings, classes: usize) -> Self {
        LossState { window: PredictionWindow::new(settings.committee.history, classes) }
    }
}

/// Target rows of the current forward pass.
#[derive(Clone, Copy, Debug)]
pub struct TargetBatch<'a> {
    pub x: &'a Tensor,
    /// Dataset indices, used to key per-sample randomness.
    pub indices: &'a [usize],
    pub z: Var,
    pub z_norm: Var,
    pub logits: Var,
}

#[derive(Clone, Debug)]
pub struct TargetLoss {
    pub term: LossTerm,
    /// Penultimate perturbation rows (adversarial losses only).
    pub r: Option<Tensor>,
    /// Rows excluded from the loss (zero activation or vanished probe).
    pub skipped: usize,
}

fn zero_scalar(g: &mut Graph) -> Var {
    g.constant(Tensor::scalar(0.0))
}

fn probs_of(g: &Graph, logits: Var, t: f64) -> Tensor {
    let l = g.value(logits);
    let mut out = l.clone().reshape(vec![l.rows(), l.cols()]).expect("matrix");
    for i in 0..out.rows() {
        let p = softmax_row(out.row(i), t);
        out.row_mut(i).copy_from_slice(&p);
    }
    out
}

/// Per-row divergence between the constant `p_ref` and the prediction at the
/// perturbed penultimate point.
pub fn adversarial_rows(
    g: &mut Graph,
    model: &Model,
    vars: &ModelVars,
    z: Var,
    z_norm: Var,
    p_ref: &Tensor,
    r: &Tensor,
    form: OuterForm,
) -> Result<Var> {
    let rv = g.constant(r.clone());
    let point = match form {
        OuterForm::Unnormalized => {
            let s = g.add(z, rv)?;
            g.normalize_l2_or_zero(s)?
        }
        OuterForm::Projected => g.add(z_norm, rv)?,
        OuterForm::Renormalized => {
            let s = g.add(z_norm, rv)?;
            g.normalize_l2_or_zero(s)?
        }
    };
    let logits = model.head(g, vars, point)?;
    kl_rows(g, p_ref, logits, model.temperature())
}

/// Adversarial loss on penultimate activations (all APA variants).
pub fn apa_loss(
    g: &mut Graph,
    model: &Model,
    vars: &ModelVars,
    batch: &TargetBatch,
    settings: &LossSettings,
    step: u64,
) -> Result<TargetLoss> {
    let kind = settings.kind;
    let variant = kind
        .variant()
        .ok_or_else(|| Error::InvalidArgument(format!("{kind} is not a penultimate adversarial loss")))?;
    let z = g.value(batch.z).clone();
    let (n, d) = (z.rows(), z.cols());
    let active: Vec<usize> = (0..n).filter(|&i| l2_norm(z.row(i)) > 0.0).collect();
    let mut r = Tensor::zeros(&[n, d]);
    let mut ok = vec![false; n];
    if !active.is_empty() {
        let sub = z.select_rows(&active);
        let clf = &model.classifier;
        let keys: Vec<ProbeKey> =
            active.iter().map(|&i| ProbeKey { step, index: batch.indices[i] as u64 }).collect();
        let outcome = match kind {
            LossKind::ApaTopkU | LossKind::ApaTopkN => {
                let mut rk = topk_perturbation_rows(
                    &sub,
                    clf,
                    settings.perturb.epsilon,
                    settings.topk,
                    variant,
                    settings.topk_steps,
                    1.0 / 20.0,
                )?;
                if variant == Variant::Normalized {
                    let zn = crate::perturb::base_rows(&sub, Variant::Normalized)?;
                    rk = crate::perturb::project_perturbation(&zn, &rk)?;
                }
                RowsOutcome { r: rk, failed: Vec::new() }
            }
            LossKind::ApaNPrime => approx_perturbation_rows_unprojected(&sub, clf, &settings.perturb, variant, &keys)?,
            _ => approx_perturbation_rows(&sub, clf, &settings.perturb, variant, &keys)?,
        };
        for (k, &i) in active.iter().enumerate() {
            if !outcome.failed.contains(&k) {
                r.row_mut(i).copy_from_slice(outcome.r.row(k));
                ok[i] = true;
            }
        }
    }
    let form = match kind {
        LossKind::ApaU | LossKind::ApaUComp | LossKind::ApaTopkU => OuterForm::Unnormalized,
        LossKind::ApaNPrime => OuterForm::Renormalized,
        _ => OuterForm::Projected,
    };
    let compensate = settings.compensate && variant == Variant::Unnormalized;
    let weights: Vec<f64> = (0..n)
        .map(|i| {
            if !ok[i] {
                0.0
            } else if compensate {
                let s: Vec<f64> = z.row(i).iter().zip(r.row(i)).map(|(a, b)| a + b).collect();
                l2_norm(&s) / l2_norm(z.row(i))
            } else {
                1.0
            }
        })
        .collect();
    let p_ref = probs_of(g, batch.logits, model.temperature());
    let rows = adversarial_rows(g, model, vars, batch.z, batch.z_norm, &p_ref, &r, form)?;
    let value = weighted_mean(g, rows, &weights)?;
    let skipped = ok.iter().filter(|&&v| !v).count();
    Ok(TargetLoss { term: LossTerm { name: kind.name(), value, weight: 1.0 }, r: Some(r), skipped })
}

/// Input-space virtual adversarial loss.
pub fn vat_loss(
    g: &mut Graph,
    model: &Model,
    vars: &ModelVars,
    batch: &TargetBatch,
    settings: &LossSettings,
    step: u64,
) -> Result<TargetLoss> {
    let x = batch.x;
    let (n, d) = (x.rows(), x.cols());
    if settings.vat_epsilon == 0.0 {
        let value = zero_scalar(g);
        return Ok(TargetLoss { term: LossTerm { name: "vat", value, weight: 1.0 }, r: None, skipped: 0 });
    }
    let p_ref = probs_of(g, batch.logits, model.temperature());
    let seed = settings.perturb.seed;

    let mut r = Tensor::zeros(&[n, d]);
    let mut pending: Vec<usize> = (0..n).collect();
    for attempt in 0..=crate::perturb::MAX_PROBE_RETRIES {
        if pending.is_empty() {
            break;
        }
        let mut probe = Tensor::zeros(&[n, d]);
        for &i in &pending {
            let mut rng = rng_from(&[seed, step, batch.indices[i] as u64, attempt as u64, 0x7A7]);
            let dir = random_unit(&mut rng, d);
            probe.row_mut(i).iter_mut().zip(dir).for_each(|(p, v)| *p = settings.vat_xi * v);
        }
        let mut pg = Graph::new();
        let cv = model.bind_constant(&mut pg);
        let xv = pg.constant(x.clone());
        let rv = pg.param(probe);
        let xp = pg.add(xv, rv)?;
        let f = model.forward(&mut pg, &cv, xp, Mode::BatchStats)?;
        let kl = kl_rows(&mut pg, &p_ref, f.logits, model.temperature())?;
        let total = pg.sum(kl)?;
        pg.backward(total)?;
        let grad = pg.grad(rv).cloned().unwrap_or_else(|| Tensor::zeros(&[n, d]));
        let mut still = Vec::new();
        for &i in &pending {
            let gn = l2_norm(grad.row(i));
            if gn > 0.0 && gn.is_finite() {
                for (o, &gv) in r.row_mut(i).iter_mut().zip(grad.row(i)) {
                    *o = settings.vat_epsilon * gv / gn;
                }
            } else {
                still.push(i);
            }
        }
        pending = still;
    }
    let weights: Vec<f64> = (0..n).map(|i| if pending.contains(&i) { 0.0 } else { 1.0 }).collect();
    let xp = g.constant(x.zip_map(&r, |a, b| a + b));
    let f = model.forward(g, vars, xp, Mode::BatchStats)?;
    let rows = kl_rows(g, &p_ref, f.logits, model.temperature())?;
    let value = weighted_mean(g, rows, &weights)?;
    Ok(TargetLoss { term: LossTerm { name: "vat", value, weight: 1.0 }, r: None, skipped: pending.len() })
}

/// Mean conditional entropy of the predictions.
pub fn ent_loss(g: &mut Graph, logits: Var, t: f64) -> Result<LossTerm> {
    if g.value(logits).is_empty() {
        return Err(Error::EmptyDataset("entropy loss on an empty batch".into()));
    }
    let h = entropy_rows(g, logits, t)?;
    let value = g.mean(h)?;
    Ok(LossTerm { name: "ent", value, weight: 1.0 })
}

/// Entropy plus the negative entropy of the batch-mean prediction.
pub fn mi_loss(g: &mut Graph, logits: Var, t: f64) -> Result<LossTerm> {
    let ent = ent_loss(g, logits, t)?;
    let n = g.value(logits).rows();
    let q = g.softmax(logits, t)?;
    let s = g.sum_cols(q)?;
    let pbar = g.scale(s, 1.0 / n as f64)?;
    // shift keeps log finite for classes the batch never predicts
    let tiny = g.constant(Tensor::filled(&[g.value(pbar).len()], f64::MIN_POSITIVE));
    let shifted = g.add(pbar, tiny)?;
    let logp = g.log(shifted)?;
    let pl = g.mul(pbar, logp)?;
    let neg_h = g.sum(pl)?;
    let value = g.add(ent.value, neg_h)?;
    Ok(LossTerm { name: "mi", value, weight: 1.0 })
}

/// Confidence-masked cross-entropy of the strong view against the weak
/// view's argmax. Returns the loss and the mask.
pub fn fixmatch_terms(g: &mut Graph, weak_logits: &Tensor, strong_logits: Var, t: f64, tau: f64) -> Result<(LossTerm, Vec<f64>)> {
    let n = weak_logits.rows();
    let mut labels = Vec::with_capacity(n);
    let mut mask = Vec::with_capacity(n);
    for row in weak_logits.row_iter() {
        let q = softmax_row(row, t);
        let c = argmax(&q);
        labels.push(c);
        mask.push(if q[c] >= tau { 1.0 } else { 0.0 });
    }
    let ce = cross_entropy_rows(g, strong_logits, &labels, t)?;
    let value = weighted_mean(g, ce, &mask)?;
    Ok((LossTerm { name: "fixmatch", value, weight: 1.0 }, mask))
}

pub fn fixmatch_loss(
    g: &mut Graph,
    model: &Model,
    vars: &ModelVars,
    batch: &TargetBatch,
    settings: &LossSettings,
    scale: &[f64],
    step: u64,
) -> Result<TargetLoss> {
    let seed = settings.perturb.seed;
    let weak = settings.weak.apply(batch.x, scale, &[seed, step, 0xF1])?;
    let strong = settings.strong.apply(batch.x, scale, &[seed, step, 0xF2])?;
    let mut wg = Graph::new();
    let cv = model.bind_constant(&mut wg);
    let wx = wg.constant(weak);
    let wf = model.forward(&mut wg, &cv, wx, Mode::BatchStats)?;
    let weak_logits = wg.value(wf.logits).clone();
    let sx = g.constant(strong);
    let sf = model.forward(g, vars, sx, Mode::BatchStats)?;
    let (term, _) = fixmatch_terms(g, &weak_logits, sf.logits, model.temperature(), settings.tau)?;
    Ok(TargetLoss { term, r: None, skipped: 0 })
}

/// Per-sample view selection for the committee loss: `+1` picks a view for
/// entropy minimization, `-1` for maximization.
#[derive(Clone, Debug, PartialEq)]
pub struct CommitteeVote {
    pub view: usize,
    pub sign: f64,
}

/// Decide consistency of each sample from the clean and view predictions and
/// pick one view per sample uniformly among the agreeing (resp. disagreeing)
/// views.
pub fn committee_votes(
    clean: &[usize],
    views: &[Vec<usize>],
    majority: usize,
    rng: &mut impl rand::Rng,
) -> Vec<CommitteeVote> {
    clean
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            let agree: Vec<usize> = (0..views.len()).filter(|&v| views[v][i] == c).collect();
            let disagree: Vec<usize> = (0..views.len()).filter(|&v| views[v][i] != c).collect();
            if agree.len() >= majority {
                CommitteeVote { view: agree[rng.random_range(0..agree.len())], sign: 1.0 }
            } else {
                CommitteeVote { view: disagree[rng.random_range(0..disagree.len())], sign: -1.0 }
            }
        })
        .collect()
}

pub fn sentry_loss(
    g: &mut Graph,
    model: &Model,
    vars: &ModelVars,
    batch: &TargetBatch,
    settings: &LossSettings,
    state: &mut LossState,
    scale: &[f64],
    step: u64,
) -> Result<TargetLoss> {
    let cfg = settings.committee;
    cfg.validate()?;
    let t = model.temperature();
    let n = batch.x.rows();
    let seed = settings.perturb.seed;

    let mut stacked = settings.committee.jitter.apply(batch.x, scale, &[seed, step, 0x5E, 0])?;
    for v in 1..cfg.size {
        let view = cfg.jitter.apply(batch.x, scale, &[seed, step, 0x5E, v as u64])?;
        stacked = stacked.concat_rows(&view)?;
    }
    let xv = g.constant(stacked);
    let f = model.forward(g, vars, xv, Mode::BatchStats)?;
    let view_logits = g.value(f.logits).clone();
    let views: Vec<Vec<usize>> =
        (0..cfg.size).map(|v| (0..n).map(|i| argmax(view_logits.row(v * n + i))).collect()).collect();
    let clean_p = probs_of(g, batch.logits, t);
    let clean: Vec<usize> = clean_p.row_iter().map(argmax).collect();
    let mut rng = rng_from(&[seed, step, 0x5E1]);
    let votes = committee_votes(&clean, &views, cfg.majority, &mut rng);

    let mut weights = vec![0.0; cfg.size * n];
    for (i, vote) in votes.iter().enumerate() {
        weights[vote.view * n + i] = vote.sign * cfg.size as f64;
    }
    let h = entropy_rows(g, f.logits, t)?;
    let selective = weighted_mean(g, h, &weights)?;

    for row in clean_p.row_iter() {
        state.window.push(row);
    }
    let qbar: Vec<f64> = state.window.mean().into_iter().map(|v| v.max(f64::MIN_POSITIVE).ln()).collect();
    let logq = g.constant(Tensor::from_rows(&vec![qbar; n])?);
    let hq = g.softmax(batch.logits, t)?;
    let prod = g.mul(hq, logq)?;
    let per = g.sum_rows(prod)?;
    let diversity = g.mean(per)?;
    let value = g.add(selective, diversity)?;
    Ok(TargetLoss { term: LossTerm { name: "sentry", value, weight: 1.0 }, r: None, skipped: 0 })
}

/// Dispatch on `settings.kind`.
pub fn target_loss(
    g: &mut Graph,
    model: &Model,
    vars: &ModelVars,
    batch: &TargetBatch,
    settings: &LossSettings,
    state: &mut LossState,
    scale: &[f64],
    step: u64,
) -> Result<TargetLoss> {
    let plain = |term| TargetLoss { term, r: None, skipped: 0 };
    match settings.kind {
        LossKind::None => {
            let value = zero_scalar(g);
            Ok(plain(LossTerm { name: "none", value, weight: 1.0 }))
        }
        LossKind::Vat => vat_loss(g, model, vars, batch, settings, step),
        LossKind::Ent => Ok(plain(ent_loss(g, batch.logits, model.temperature())?)),
        LossKind::Mi => Ok(plain(mi_loss(g, batch.logits, model.temperature())?)),
        LossKind::Fixmatch => fixmatch_loss(g, model, vars, batch, settings, scale, step),
        LossKind::Sentry => sentry_loss(g, model, vars, batch, settings, state, scale, step),
        _ => apa_loss(g, model, vars, batch, settings, step),
    }
}

/// Weighted sum of loss terms.
pub fn combine(g: &mut Graph, terms: &[LossTerm]) -> Result<Var> {
    let mut total: Option<Var> = None;
    for t in terms {
        let w = g.scale(t.value, t.weight)?;
        total = Some(match total {
            Some(acc) => g.add(acc, w)?,
            None => w,
        });
    }
    total.ok_or_else(|| Error::InvalidArgument("no loss terms".into()))
}

/// Source cross-entropy plus `β` times the target term.
pub fn objective_standard(
    g: &mut Graph,
    source_logits: Var,
    labels: &[usize],
    target: LossTerm,
    beta: f64,
    t: f64,
) -> Result<(Var, Vec<LossTerm>)> {
    let ce = cross_entropy_rows(g, source_logits, labels, t)?;
    let ce = g.mean(ce)?;
    let terms = vec![LossTerm { name: "ce", value: ce, weight: 1.0 }, LossTerm { weight: beta, ..target }];
    Ok((combine(g, &terms)?, terms))
}

/// `1[conf ≥ τ]` per sample.
pub fn confidence_gate(confidence: &[f64], tau: f64) -> Vec<f64> {
    confidence.iter().map(|&c| if c >= tau { 1.0 } else { 0.0 }).collect()
}

/// Gated pseudo-label cross-entropy plus `β` times the target term.
pub fn objective_sourcefree(
    g: &mut Graph,
    target_logits: Var,
    pseudo: &[usize],
    confidence: &[f64],
    tau: f64,
    target: LossTerm,
    beta: f64,
    t: f64,
) -> Result<(Var, Vec<LossTerm>)> {
    let ce = cross_entropy_rows(g, target_logits, pseudo, t)?;
    let gate = confidence_gate(confidence, tau);
    let ce = weighted_mean(g, ce, &gate)?;
    let terms = vec![LossTerm { name: "pseudo_ce", value: ce, weight: 1.0 }, LossTerm { weight: beta, ..target }];
    Ok((combine(g, &terms)?, terms))
}

/// Value and gradients of a penultimate adversarial loss for a single sample
/// with `r` held fixed.
#[derive(Clone, Debug)]
pub struct PenultGrad {
    pub value: f64,
    /// `∂ℓ/∂z`
    pub grad_z: Tensor,
    /// `∂ℓ/∂z̄`
    pub grad_z_norm: Tensor,
}

pub fn penult_loss(z: &Tensor, clf: &LinearClassifier, r: &Tensor, form: OuterForm) -> Result<PenultGrad> {
    let mut g = Graph::new();
    let zv = g.param(z.clone());
    let zn = g.normalize_l2(zv)?;
    let p_ref = clf.probs(g.value(zn))?;
    let w = g.constant(clf.weight.clone());
    let b = g.constant(clf.bias.clone());
    let rv = g.constant(r.clone());
    let point = match form {
        OuterForm::Unnormalized => {
            let s = g.add(zv, rv)?;
            g.normalize_l2(s)?
        }
        OuterForm::Projected => g.add(zn, rv)?,
        OuterForm::Renormalized => {
            let s = g.add(zn, rv)?;
            g.normalize_l2(s)?
        }
    };
    let l = g.linear(point, w)?;
    let l = g.add_row(l, b)?;
    let kl = kl_rows(&mut g, &p_ref, l, clf.temperature)?;
    let total = g.sum(kl)?;
    g.backward(total)?;
    Ok(PenultGrad {
        value: g.value(total).item(),
        grad_z: g.grad(zv).cloned().unwrap_or_else(|| z.zeros_like()),
        grad_z_norm: g.grad(zn).cloned().unwrap_or_else(|| z.zeros_like()),
    })
}

/// Value and flattened parameter gradient of a loss built by `build`.
pub fn loss_with_param_grad<F>(model: &Model, build: F) -> Result<(f64, Vec<f64>)>
where
    F: FnOnce(&mut Graph, &ModelVars) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars = model.bind(&mut g);
    let loss = build(&mut g, &vars)?;
    g.backward(loss)?;
    let mut grad = Vec::new();
    for v in vars.all() {
        match g.grad(v) {
            Some(t) => grad.extend_from_slice(t.data()),
            None => grad.extend(std::iter::repeat(0.0).take(g.value(v).len())),
        }
    }
    Ok((g.value(loss).item(), grad))
}

/// Divergence with the perturbation `r_i` added after extractor layer
/// `split` (evaluation-mode normalization statistics).
pub fn intermediate_loss(g: &mut Graph, model: &Model, vars: &ModelVars, x: &Tensor, r_i: &Tensor, split: usize) -> Result<Var> {
    let p_ref = model.predict_proba(x)?;
    let layers = model.extractor.layers.len();
    let xv = g.constant(x.clone());
    let (a, _) = model.extract_range(g, vars, xv, 0..split, Mode::Eval)?;
    let rv = g.constant(r_i.clone());
    let a = g.add(a, rv)?;
    let (z, _) = model.extract_range(g, vars, a, split..layers, Mode::Eval)?;
    let zeta = g.normalize_l2_or_zero(z)?;
    let logits = model.head(g, vars, zeta)?;
    let kl = kl_rows(g, &p_ref, logits, model.temperature())?;
    g.sum(kl)
}

/// Divergence with `r_p` added to the penultimate activation.
pub fn mapped_loss(g: &mut Graph, model: &Model, vars: &ModelVars, x: &Tensor, r_p: &Tensor) -> Result<Var> {
    let p_ref = model.predict_proba(x)?;
    let layers = model.extractor.layers.len();
    let xv = g.constant(x.clone());
    let (z, _) = model.extract_range(g, vars, xv, 0..layers, Mode::Eval)?;
    let rv = g.constant(r_p.clone());
    let s = g.add(z, rv)?;
    let zeta = g.normalize_l2_or_zero(s)?;
    let logits = model.head(g, vars, zeta)?;
    let kl = kl_rows(g, &p_ref, logits, model.temperature())?;
    g.sum(kl)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Architecture;

    fn model(seed: u64) -> Model {
        Model::new(Architecture::new(5, 3), seed).unwrap()
    }

    fn batch_x(n: usize, seed: u64) -> Tensor {
        let mut rng = rng_from(&[seed, 5]);
        Tensor::matrix(n, 5, (0..n * 5).map(|_| standard_normal(&mut rng)).collect()).unwrap()
    }

    fn run_target(kind: LossKind, eps: Option<f64>) -> f64 {
        let m = model(1);
        let x = batch_x(8, 1);
        let idx: Vec<usize> = (0..8).collect();
        let mut settings = LossSettings::new(kind, 3);
        if let Some(e) = eps {
            settings.perturb.epsilon = e;
            settings.vat_epsilon = e;
        }
        let mut state = LossState::new(&settings, 3);
        let mut g = Graph::new();
        let vars = m.bind(&mut g);
        let xv = g.constant(x.clone());
        let f = m.forward(&mut g, &vars, xv, Mode::Train).unwrap();
        let batch = TargetBatch { x: &x, indices: &idx, z: f.z, z_norm: f.z_norm, logits: f.logits };
        let out = target_loss(&mut g, &m, &vars, &batch, &settings, &mut state, &[1.0; 5], 0).unwrap();
        let v = out.term.scalar(&g);
        g.backward(out.term.value).unwrap();
        v
    }

    #[test]
    fn names_round_trip() {
        for k in LossKind::ALL {
            assert_eq!(k.name().parse::<LossKind>().unwrap(), k);
        }
        assert!("apa".parse::<LossKind>().is_err());
    }

    #[test]
    fn adversarial_losses_nonnegative() {
        for k in [LossKind::ApaU, LossKind::ApaUComp, LossKind::ApaN, LossKind::ApaNPrime, LossKind::Vat, LossKind::ApaTopkU] {
            let v = run_target(k, None);
            assert!(v >= 0.0 && v.is_finite(), "{k}: {v}");
        }
    }

    #[test]
    fn vat_zero_budget_is_zero() {
        assert_eq!(run_target(LossKind::Vat, Some(0.0)), 0.0);
    }

    #[test]
    fn zero_perturbation_gives_zero_loss() {
        let z = Tensor::vector(vec![1.0, -2.0, 0.5]);
        let clf = LinearClassifier {
            weight: Tensor::matrix(2, 3, vec![1.0, 0.0, 0.3, -0.5, 1.0, 0.0]).unwrap(),
            bias: Tensor::vector(vec![0.1, 0.0]),
            temperature: 0.05,
        };
        for form in [OuterForm::Unnormalized, OuterForm::Projected, OuterForm::Renormalized] {
            let out = penult_loss(&z, &clf, &Tensor::zeros(&[3]), form).unwrap();
            assert!(out.value.abs() < 1e-15);
        }
    }

    #[test]
    fn entropy_and_mi_extremes() {
        let mut g = Graph::new();
        let uniform = g.constant(Tensor::zeros(&[4, 3]));
        let e = ent_loss(&mut g, uniform, 0.05).unwrap();
        assert!((e.scalar(&g) - 3f64.ln()).abs() < 1e-14);
        let collapsed = g.constant(Tensor::matrix(2, 3, vec![40.0, 0.0, 0.0, 40.0, 0.0, 0.0]).unwrap());
        let mi = mi_loss(&mut g, collapsed, 0.05).unwrap();
        // entropy 0, batch mean one-hot: no diversity reward either
        assert!(mi.scalar(&g).abs() < 1e-12);
        let spread = g.constant(Tensor::matrix(2, 3, vec![40.0, 0.0, 0.0, 0.0, 40.0, 0.0]).unwrap());
        let mi2 = mi_loss(&mut g, spread, 0.05).unwrap();
        assert!((mi2.scalar(&g) + 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn fixmatch_mask() {
        let mut g = Graph::new();
        let weak = Tensor::matrix(2, 2, vec![0.0, 0.01, 1.0, 0.0]).unwrap();
        let strong = g.constant(weak.clone());
        let (t, mask) = fixmatch_terms(&mut g, &weak, strong, 0.05, 0.75).unwrap();
        assert_eq!(mask, vec![0.0, 1.0]);
        let direct = -softmax_row(&[1.0, 0.0], 0.05)[0].ln() / 2.0;
        assert!((t.scalar(&g) - direct).abs() < 1e-15);
        let low = Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap();
        let s = g.constant(low.clone());
        let (t, _) = fixmatch_terms(&mut g, &low, s, 0.05, 0.75).unwrap();
        assert_eq!(t.scalar(&g), 0.0);
    }

    #[test]
    fn committee_rules() {
        let mut rng = rng_from(&[1]);
        let clean = vec![0, 1];
        let all_agree = vec![vec![0, 1]; 3];
        assert!(committee_votes(&clean, &all_agree, 2, &mut rng).iter().all(|v| v.sign == 1.0));
        let all_disagree = vec![vec![2, 0]; 3];
        assert!(committee_votes(&clean, &all_disagree, 2, &mut rng).iter().all(|v| v.sign == -1.0));
        let mixed = vec![vec![0, 0], vec![1, 1], vec![2, 1]];
        let votes = committee_votes(&clean, &mixed, 2, &mut rng);
        assert_eq!(votes[0].sign, -1.0);
        assert!(mixed[votes[0].view][0] != 0);
        assert_eq!(votes[1].sign, 1.0);
        assert!(mixed[votes[1].view][1] == 1);
    }

    #[test]
    fn window_matches_direct_recomputation() {
        let mut w = PredictionWindow::new(4, 2);
        let items: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64 / 10.0, 1.0 - i as f64 / 10.0]).collect();
        for (k, it) in items.iter().enumerate() {
            w.push(it);
            let lo = (k + 1).saturating_sub(4);
            let direct: f64 = items[lo..=k].iter().map(|v| v[0]).sum::<f64>() / (k + 1 - lo) as f64;
            assert!((w.mean()[0] - direct).abs() < 1e-15);
        }
        assert_eq!(w.len(), 4);
    }

    #[test]
    fn losses_are_deterministic() {
        for k in [LossKind::ApaN, LossKind::Vat, LossKind::Fixmatch, LossKind::Sentry, LossKind::Mi] {
            assert_eq!(run_target(k, None).to_bits(), run_target(k, None).to_bits(), "{k}");
        }
    }

    #[test]
    fn sourcefree_gate() {
        assert_eq!(confidence_gate(&[0.5, 0.75, 0.9], 0.75), vec![0.0, 1.0, 1.0]);
        let mut g = Graph::new();
        let l = g.constant(Tensor::zeros(&[2, 3]));
        let adv = g.constant(Tensor::scalar(0.3));
        let term = LossTerm { name: "apa_n", value: adv, weight: 1.0 };
        let (total, _) = objective_sourcefree(&mut g, l, &[0, 1], &[0.1, 0.2], 0.75, term, 0.1, 0.05).unwrap();
        assert!((g.value(total).item() - 0.03).abs() < 1e-15);
    }
}
