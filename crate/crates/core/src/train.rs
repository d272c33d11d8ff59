//! Source training followed by target adaptation.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor};
use crate::data::{is_refresh_step, refresh_pseudo_labels, BalancedSampler, Dataset, PseudoLabelTable};
use crate::error::{Error, Result};
use crate::losses::{objective_sourcefree, objective_standard, target_loss, LossSettings, LossState, TargetBatch};
use crate::model::{classifier_drift, Architecture, Mode, Model};
use crate::ops::argmax;

/// Loss above which a run is declared divergent.
pub const DIVERGENCE_LIMIT: f64 = 1e3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Setting {
    /// Labeled source batches are available during adaptation.
    Standard,
    /// Only the source-trained model and target data.
    SourceFree,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Source,
    Adapt,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Source => "source",
            Stage::Adapt => "adapt",
        })
    }
}

impl FromStr for Setting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(Setting::Standard),
            "source-free" => Ok(Setting::SourceFree),
            _ => Err(Error::InvalidArgument(format!("unknown setting '{s}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub momentum: f64,
    pub weight_decay: f64,
    /// Learning rate of the source stage (constant).
    pub source_lr: f64,
    /// Initial adaptation learning rate `η0`.
    pub eta0: f64,
    pub lr_coeff: f64,
    pub lr_power: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig { momentum: 0.8, weight_decay: 5e-4, source_lr: 1e-3, eta0: 1e-3, lr_coeff: 1e-4, lr_power: 0.75 }
    }
}

impl OptimConfig {
    /// `η0 · (1 + coeff · i)^(-power)`
    pub fn lr_at(&self, step: u64) -> f64 {
        lr_at(step, self.eta0, self.lr_coeff, self.lr_power)
    }
}

pub fn lr_at(step: u64, eta0: f64, coeff: f64, power: f64) -> f64 {
    eta0 * (1.0 + coeff * step as f64).powf(-power)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptConfig {
    pub setting: Setting,
    pub loss: LossSettings,
    pub optim: OptimConfig,
    pub beta: f64,
    pub tau: f64,
    pub batch_size: usize,
    pub source_steps: u64,
    pub adapt_steps: u64,
    pub refresh_interval: u64,
    pub eval_interval: u64,
    pub freeze_classifier: bool,
    /// Soft lower bound on the classifier drift cosine, reported per run.
    pub drift_threshold: f64,
    pub seed: u64,
}

impl AdaptConfig {
    pub fn new(loss: LossSettings, seed: u64) -> Self {
        AdaptConfig {
            setting: Setting::Standard,
            tau: loss.tau,
            loss,
            optim: OptimConfig::default(),
            beta: 0.1,
            batch_size: 16,
            source_steps: 2000,
            adapt_steps: 4000,
            refresh_interval: 100,
            eval_interval: 50,
            freeze_classifier: false,
            drift_threshold: 0.9,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let o = &self.optim;
        let positive = [
            ("eta0", o.eta0),
            ("source_lr", o.source_lr),
            ("epsilon", self.loss.perturb.epsilon),
            ("xi", self.loss.perturb.xi),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        let nonneg = [
            ("beta", self.beta),
            ("momentum", o.momentum),
            ("weight_decay", o.weight_decay),
            ("lr_coeff", o.lr_coeff),
            ("lr_power", o.lr_power),
        ];
        for (name, v) in nonneg {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be non-negative, got {v}")));
            }
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::Config(format!("tau must lie in [0, 1], got {}", self.tau)));
        }
        if self.batch_size == 0 || self.eval_interval == 0 || self.refresh_interval == 0 {
            return Err(Error::Config("batch_size, eval_interval and refresh_interval must be positive".into()));
        }
        let k = self.loss.topk;
        if k == 0 {
            return Err(Error::Config("topk must be at least 1".into()));
        }
        self.loss.committee.validate()
    }
}

/// One evaluation row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub step: u64,
    pub stage: Stage,
    pub lr: f64,
    /// Mean weighted total loss since the previous record (NaN at step 0).
    pub loss_total: f64,
    /// `(column, mean value)` for every loss term, column named `name*weight`.
    pub losses: Vec<(String, f64)>,
    pub source_acc: f64,
    pub target_acc: f64,
    pub target_class_acc: f64,
    pub pseudo_acc: f64,
    pub drift: f64,
    pub extras: Vec<(String, f64)>,
}

fn fmt_num(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        format!("{v}")
    }
}

/// Write records as CSV; every record must share the first one's columns.
pub fn write_records_csv(records: &[RunRecord], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let Some(first) = records.first() else {
        w.flush()?;
        return Ok(());
    };
    let mut header: Vec<String> =
        ["step", "stage", "lr", "loss_total"].iter().map(|s| s.to_string()).collect();
    header.extend(first.losses.iter().map(|(k, _)| k.clone()));
    header.extend(["source_acc", "target_acc", "target_class_acc", "pseudo_acc", "drift"].map(String::from));
    header.extend(first.extras.iter().map(|(k, _)| k.clone()));
    w.write_record(&header)?;
    for r in records {
        let same = |a: &[(String, f64)], b: &[(String, f64)]| a.iter().map(|x| &x.0).eq(b.iter().map(|x| &x.0));
        if !same(&r.losses, &first.losses) || !same(&r.extras, &first.extras) {
            return Err(Error::Format(format!("record at step {} has a different column layout", r.step)));
        }
        let mut row = vec![r.step.to_string(), r.stage.to_string(), fmt_num(r.lr), fmt_num(r.loss_total)];
        row.extend(r.losses.iter().map(|(_, v)| fmt_num(*v)));
        row.extend([r.source_acc, r.target_acc, r.target_class_acc, r.pseudo_acc, r.drift].map(fmt_num));
        row.extend(r.extras.iter().map(|(_, v)| fmt_num(*v)));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SgdState {
    velocity: Vec<Tensor>,
}

/// Classical momentum with weight decay folded into the gradient:
/// `v ← μ v + g + λ p`, `p ← p − η v`. Entries of `update` set to false are
/// left untouched (their velocity included).
pub fn sgd_step(
    params: &mut [&mut Tensor],
    grads: &[Tensor],
    state: &mut SgdState,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
    update: &[bool],
) -> Result<()> {
    if params.len() != grads.len() || update.len() != params.len() {
        return Err(Error::shape("sgd_step", format!("{} params, {} grads", params.len(), grads.len())));
    }
    for (k, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() {
            return Err(Error::shape("sgd_step", format!("param {k}: {:?} vs grad {:?}", p.shape(), g.shape())));
        }
        if !g.all_finite() {
            return Err(Error::NonFinite(format!("gradient of parameter {k}")));
        }
    }
    if state.velocity.is_empty() {
        state.velocity = params.iter().map(|p| p.zeros_like()).collect();
    }
    for (k, p) in params.iter_mut().enumerate() {
        if !update[k] {
            continue;
        }
        let v = &mut state.velocity[k];
        for ((vi, gi), pi) in v.data_mut().iter_mut().zip(grads[k].data()).zip(p.data_mut().iter_mut()) {
            *vi = momentum * *vi + gi + weight_decay * *pi;
            *pi -= lr * *vi;
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Accuracy {
    pub overall: f64,
    /// Mean of per-class accuracies over classes present in the data.
    pub per_class: f64,
}

/// Evaluation-mode predictions, fanned out over row chunks.
pub fn predict_labels(model: &Model, x: &Tensor) -> Result<Vec<usize>> {
    const CHUNK: usize = 256;
    let n = x.rows();
    let starts: Vec<usize> = (0..n).step_by(CHUNK).collect();
    let parts: Vec<Result<Vec<usize>>> = starts
        .par_iter()
        .map(|&s| {
            let p = model.predict_proba(&x.slice_rows(s, (s + CHUNK).min(n)))?;
            Ok(p.row_iter().map(argmax).collect())
        })
        .collect();
    let mut out = Vec::with_capacity(n);
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

pub fn accuracy(pred: &[usize], truth: &[usize], classes: usize) -> Accuracy {
    let mut hit = vec![0usize; classes];
    let mut tot = vec![0usize; classes];
    for (&p, &t) in pred.iter().zip(truth) {
        tot[t] += 1;
        if p == t {
            hit[t] += 1;
        }
    }
    let overall = 100.0 * hit.iter().sum::<usize>() as f64 / truth.len().max(1) as f64;
    let present: Vec<f64> =
        (0..classes).filter(|&c| tot[c] > 0).map(|c| 100.0 * hit[c] as f64 / tot[c] as f64).collect();
    let per_class = present.iter().sum::<f64>() / present.len().max(1) as f64;
    Accuracy { overall, per_class }
}

pub fn evaluate(model: &Model, data: &Dataset) -> Result<Accuracy> {
    Ok(accuracy(&predict_labels(model, &data.x)?, &data.labels, data.classes))
}

/// Hook called at every evaluation; returns extra record columns.
pub type Observer<'a> = dyn FnMut(&Model, u64) -> Result<Vec<(String, f64)>> + 'a;

#[derive(Clone, Debug)]
pub struct SourceOutcome {
    pub model: Model,
    /// Classifier weights at the end of the source stage.
    pub w0: Tensor,
    pub records: Vec<RunRecord>,
}

fn param_grads(g: &Graph, vars: &[crate::autodiff::Var]) -> Vec<Tensor> {
    vars.iter().map(|&v| g.grad(v).cloned().unwrap_or_else(|| g.value(v).zeros_like())).collect()
}

struct LossMeter {
    sums: Vec<(String, f64)>,
    total: f64,
    count: usize,
}

impl LossMeter {
    fn new() -> Self {
        LossMeter { sums: Vec::new(), total: 0.0, count: 0 }
    }

    fn add(&mut self, total: f64, terms: &[(String, f64)]) {
        if self.sums.is_empty() {
            self.sums = terms.iter().map(|(k, _)| (k.clone(), 0.0)).collect();
        }
        for ((_, s), (_, v)) in self.sums.iter_mut().zip(terms) {
            *s += v;
        }
        self.total += total;
        self.count += 1;
    }

    fn take(&mut self, layout: &[String]) -> (f64, Vec<(String, f64)>) {
        let n = self.count as f64;
        let out = if self.count == 0 {
            (f64::NAN, layout.iter().map(|k| (k.clone(), f64::NAN)).collect())
        } else {
            (self.total / n, self.sums.iter().map(|(k, s)| (k.clone(), s / n)).collect())
        };
        *self = LossMeter::new();
        out
    }
}

fn column(name: &str, weight: f64) -> String {
    format!("{name}*{weight}")
}

fn check_divergence(step: u64, loss: f64) -> Result<()> {
    if !loss.is_finite() || loss > DIVERGENCE_LIMIT {
        return Err(Error::Divergence { step: step as usize, loss });
    }
    Ok(())
}

/// Cross-entropy training on class-balanced source batches at a fixed
/// learning rate.
pub fn run_source_stage(
    cfg: &AdaptConfig,
    arch: Architecture,
    source: &Dataset,
    target: Option<&Dataset>,
) -> Result<SourceOutcome> {
    cfg.validate()?;
    let mut model = Model::new(arch, cfg.seed)?;
    let t = model.temperature();
    let mut sampler = BalancedSampler::from_labels(&source.labels, source.classes, &[cfg.seed, 1])?;
    let mut sgd = SgdState::default();
    let update = vec![true; model.param_tensors().len()];
    let mut meter = LossMeter::new();
    let layout = vec![column("ce", 1.0)];
    let mut records = Vec::new();
    for step in 0..=cfg.source_steps {
        if step % cfg.eval_interval == 0 || step == cfg.source_steps {
            let src = evaluate(&model, source)?;
            let tgt = match target {
                Some(t) => evaluate(&model, t)?,
                None => Accuracy { overall: f64::NAN, per_class: f64::NAN },
            };
            let (loss_total, losses) = meter.take(&layout);
            records.push(RunRecord {
                step,
                stage: Stage::Source,
                lr: cfg.optim.source_lr,
                loss_total,
                losses,
                source_acc: src.overall,
                target_acc: tgt.overall,
                target_class_acc: tgt.per_class,
                pseudo_acc: f64::NAN,
                drift: f64::NAN,
                extras: Vec::new(),
            });
        }
        if step == cfg.source_steps {
            break;
        }
        let idx = sampler.next_batch(cfg.batch_size);
        let (x, y) = source.batch(&idx);
        let mut g = Graph::new();
        let vars = model.bind(&mut g);
        let xv = g.constant(x);
        let fwd = model.forward(&mut g, &vars, xv, Mode::Train)?;
        let ce = crate::ops::cross_entropy_rows(&mut g, fwd.logits, &y, t)?;
        let loss = g.mean(ce)?;
        let lv = g.value(loss).item();
        check_divergence(step, lv)?;
        meter.add(lv, &[(layout[0].clone(), lv)]);
        g.backward(loss)?;
        let grads = param_grads(&g, &vars.all());
        let mut params = model.param_tensors_mut();
        sgd_step(&mut params, &grads, &mut sgd, cfg.optim.source_lr, cfg.optim.momentum, cfg.optim.weight_decay, &update)?;
        model.update_running_stats(&fwd.stats);
    }
    let w0 = model.classifier.weight.clone();
    Ok(SourceOutcome { model, w0, records })
}

#[derive(Clone, Debug)]
pub struct AdaptOutcome {
    pub model: Model,
    pub records: Vec<RunRecord>,
    pub pseudo: PseudoLabelTable,
    /// Rows excluded from the adversarial loss over the whole run.
    pub skipped_rows: usize,
    /// Pseudo-class balancing skipped at least one empty class this many times.
    pub empty_class_refreshes: usize,
}

/// Adaptation with the objective selected by `cfg.setting` and `cfg.loss`.
/// `source` is required for the standard setting and ignored otherwise.
pub fn run_adapt_stage(
    cfg: &AdaptConfig,
    start: &Model,
    source: Option<&Dataset>,
    target: &Dataset,
    observer: Option<&mut Observer<'_>>,
) -> Result<AdaptOutcome> {
    cfg.validate()?;
    let mut observer = observer;
    let mut model = start.clone();
    let w0 = start.classifier.weight.clone();
    let t = model.temperature();
    let classes = model.classes();
    let source = match cfg.setting {
        Setting::Standard => Some(source.ok_or_else(|| {
            Error::InvalidArgument("the standard setting needs the source dataset".into())
        })?),
        Setting::SourceFree => None,
    };
    let mut src_sampler = match source {
        Some(s) => Some(BalancedSampler::from_labels(&s.labels, s.classes, &[cfg.seed, 2])?),
        None => None,
    };
    let scale = target.feature_scale();
    let mut state = LossState::new(&cfg.loss, classes);
    let mut sgd = SgdState::default();
    let cls = model.classifier_param_range();
    let update: Vec<bool> =
        (0..model.param_tensors().len()).map(|k| !(cfg.freeze_classifier && cls.contains(&k))).collect();
    let layout = {
        let mut l = vec![match cfg.setting {
            Setting::Standard => column("ce", 1.0),
            Setting::SourceFree => column("pseudo_ce", 1.0),
        }];
        l.push(column(cfg.loss.kind.name(), cfg.beta));
        l
    };
    let mut meter = LossMeter::new();
    let mut records = Vec::new();
    let mut pseudo = refresh_pseudo_labels(&model, &target.x, 0)?;
    let mut tgt_sampler = pseudo_sampler(&pseudo, classes, cfg.seed, 0)?;
    let mut empty_class_refreshes = usize::from(!tgt_sampler.skipped_classes().is_empty());
    let mut skipped_rows = 0;

    for step in 0..=cfg.adapt_steps {
        if step % cfg.eval_interval == 0 || step == cfg.adapt_steps {
            let src = match source {
                Some(s) => evaluate(&model, s)?.overall,
                None => f64::NAN,
            };
            let tgt = evaluate(&model, target)?;
            let (loss_total, losses) = meter.take(&layout);
            let extras = match observer.as_mut() {
                Some(f) => f(&model, step)?,
                None => Vec::new(),
            };
            records.push(RunRecord {
                step,
                stage: Stage::Adapt,
                lr: cfg.optim.lr_at(step),
                loss_total,
                losses,
                source_acc: src,
                target_acc: tgt.overall,
                target_class_acc: tgt.per_class,
                pseudo_acc: pseudo.accuracy(&target.labels),
                drift: classifier_drift(&w0, &model.classifier.weight)?.mean_cosine,
                extras,
            });
        }
        if step == cfg.adapt_steps {
            break;
        }
        if step > 0 && is_refresh_step(step, cfg.refresh_interval) {
            pseudo = refresh_pseudo_labels(&model, &target.x, step)?;
            tgt_sampler = pseudo_sampler(&pseudo, classes, cfg.seed, step)?;
            empty_class_refreshes += usize::from(!tgt_sampler.skipped_classes().is_empty());
        }

        let tidx = tgt_sampler.next_batch(cfg.batch_size);
        let (tx, _) = target.batch(&tidx);
        let mut g = Graph::new();
        let vars = model.bind(&mut g);
        let bs = cfg.batch_size;
        let (fwd, src_rows) = match (source, src_sampler.as_mut()) {
            (Some(s), Some(sampler)) => {
                let sidx = sampler.next_batch(bs);
                let (sx, sy) = s.batch(&sidx);
                let xv = g.constant(sx.concat_rows(&tx)?);
                (model.forward(&mut g, &vars, xv, Mode::Train)?, Some(sy))
            }
            _ => {
                let xv = g.constant(tx.clone());
                (model.forward(&mut g, &vars, xv, Mode::Train)?, None)
            }
        };
        let off = if src_rows.is_some() { bs } else { 0 };
        let z = g.slice_rows(fwd.z, off, off + bs)?;
        let z_norm = g.slice_rows(fwd.z_norm, off, off + bs)?;
        let logits = g.slice_rows(fwd.logits, off, off + bs)?;
        let batch = TargetBatch { x: &tx, indices: &tidx, z, z_norm, logits };
        let tl = target_loss(&mut g, &model, &vars, &batch, &cfg.loss, &mut state, &scale, step)?;
        skipped_rows += tl.skipped;
        let (total, terms) = match src_rows {
            Some(sy) => {
                let sl = g.slice_rows(fwd.logits, 0, bs)?;
                objective_standard(&mut g, sl, &sy, tl.term, cfg.beta, t)?
            }
            None => {
                let labels: Vec<usize> = tidx.iter().map(|&i| pseudo.labels[i]).collect();
                let conf: Vec<f64> = tidx.iter().map(|&i| pseudo.confidence[i]).collect();
                objective_sourcefree(&mut g, logits, &labels, &conf, cfg.tau, tl.term, cfg.beta, t)?
            }
        };
        let lv = g.value(total).item();
        check_divergence(step, lv)?;
        let named: Vec<(String, f64)> =
            layout.iter().zip(&terms).map(|(k, term)| (k.clone(), term.scalar(&g))).collect();
        meter.add(lv, &named);
        g.backward(total)?;
        let grads = param_grads(&g, &vars.all());
        let lr = cfg.optim.lr_at(step);
        let mut params = model.param_tensors_mut();
        sgd_step(&mut params, &grads, &mut sgd, lr, cfg.optim.momentum, cfg.optim.weight_decay, &update)?;
        model.update_running_stats(&fwd.stats);
    }
    Ok(AdaptOutcome { model, records, pseudo, skipped_rows, empty_class_refreshes })
}

fn pseudo_sampler(table: &PseudoLabelTable, classes: usize, seed: u64, step: u64) -> Result<BalancedSampler> {
    let labels: Vec<Option<usize>> = table.labels.iter().map(|&y| Some(y)).collect();
    BalancedSampler::new(&labels, classes, &[seed, 3, step])
}

/// Final metrics plus the effective configuration.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunSummary {
    pub stage: Stage,
    pub seed: u64,
    pub config: AdaptConfig,
    pub final_record: RunRecord,
    pub min_drift: f64,
    pub drift_ok: bool,
    pub skipped_rows: usize,
}

impl RunSummary {
    pub fn new(stage: Stage, cfg: &AdaptConfig, records: &[RunRecord], skipped_rows: usize) -> Result<Self> {
        let last = records.last().cloned().ok_or_else(|| Error::InvalidArgument("run produced no records".into()))?;
        let min_drift = records.iter().map(|r| r.drift).filter(|d| !d.is_nan()).fold(f64::INFINITY, f64::min);
        let min_drift = if min_drift.is_finite() { min_drift } else { f64::NAN };
        Ok(RunSummary {
            stage,
            seed: cfg.seed,
            config: cfg.clone(),
            final_record: last,
            min_drift,
            drift_ok: min_drift.is_nan() || min_drift > cfg.drift_threshold,
            skipped_rows,
        })
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        // NaN metrics serialize as null
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n")?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::TaskSpec;
    use crate::losses::LossKind;

    #[test]
    fn schedule_values() {
        assert_eq!(lr_at(0, 1e-3, 1e-4, 0.75), 1e-3);
        assert!((lr_at(10_000, 1e-3, 1e-4, 0.75) - 1e-3 * 2f64.powf(-0.75)).abs() < 1e-18);
        let mut last = f64::INFINITY;
        for i in (0..100_000).step_by(997) {
            let v = lr_at(i, 1e-3, 1e-4, 0.75);
            assert!(v <= last);
            last = v;
        }
    }

    #[test]
    fn sgd_plain_and_zero() {
        let mut p = Tensor::vector(vec![1.0, 2.0]);
        let mut st = SgdState::default();
        sgd_step(&mut [&mut p], &[Tensor::vector(vec![0.5, -1.0])], &mut st, 0.1, 0.0, 0.0, &[true]).unwrap();
        assert_eq!(p.data(), &[0.95, 2.1]);
        sgd_step(&mut [&mut p], &[Tensor::vector(vec![0.0, 0.0])], &mut SgdState::default(), 0.1, 0.0, 0.0, &[true])
            .unwrap();
        assert_eq!(p.data(), &[0.95, 2.1]);
    }

    #[test]
    fn sgd_matches_scalar_recursion() {
        // f(p) = p²/2 ⇒ g = p
        let (lr, mu, wd) = (0.1, 0.8, 0.01);
        let mut p = Tensor::vector(vec![1.0]);
        let mut st = SgdState::default();
        let (mut ep, mut ev) = (1.0f64, 0.0f64);
        for _ in 0..2 {
            let g = Tensor::vector(vec![p.data()[0]]);
            sgd_step(&mut [&mut p], &[g], &mut st, lr, mu, wd, &[true]).unwrap();
            ev = mu * ev + ep + wd * ep;
            ep -= lr * ev;
        }
        assert_eq!(p.data()[0], ep);
        assert!((ep - (1.0 - 0.1 * 1.01 - 0.1 * (0.8 * 1.01 + 1.01 * 0.899))).abs() < 1e-15);
    }

    #[test]
    fn sgd_rejects_non_finite() {
        let mut p = Tensor::vector(vec![1.0]);
        let r = sgd_step(&mut [&mut p], &[Tensor::vector(vec![f64::NAN])], &mut SgdState::default(), 0.1, 0.0, 0.0, &[true]);
        assert!(matches!(r, Err(Error::NonFinite(_))));
        assert_eq!(p.data(), &[1.0]);
    }

    #[test]
    fn decay_only_shrinks() {
        let mut p = Tensor::vector(vec![3.0, -4.0]);
        sgd_step(&mut [&mut p], &[Tensor::vector(vec![0.0, 0.0])], &mut SgdState::default(), 0.1, 0.8, 5e-4, &[true])
            .unwrap();
        assert!(p.norm() < 5.0);
    }

    #[test]
    fn per_class_accuracy() {
        let a = accuracy(&[0, 0, 1, 1], &[0, 0, 0, 1], 3);
        assert_eq!(a.overall, 75.0);
        assert!((a.per_class - (200.0 / 3.0 + 100.0) / 2.0).abs() < 1e-12);
    }

    fn tiny() -> (Dataset, Dataset, AdaptConfig) {
        let (s, t) = TaskSpec { samples: 200, ..Default::default() }.generate().unwrap();
        let mut cfg = AdaptConfig::new(LossSettings::new(LossKind::ApaN, 1), 1);
        cfg.source_steps = 40;
        cfg.adapt_steps = 30;
        cfg.eval_interval = 10;
        (s, t, cfg)
    }

    #[test]
    fn frozen_classifier_does_not_move() {
        let (s, t, mut cfg) = tiny();
        cfg.freeze_classifier = true;
        let src = run_source_stage(&cfg, Architecture::new(8, 4), &s, Some(&t)).unwrap();
        let out = run_adapt_stage(&cfg, &src.model, Some(&s), &t, None).unwrap();
        assert_eq!(out.model.classifier.weight, src.w0);
        assert!(out.records.iter().all(|r| r.drift == 1.0 || (r.drift - 1.0).abs() < 1e-15));
    }

    #[test]
    fn runs_are_deterministic() {
        let (s, t, cfg) = tiny();
        let a = run_source_stage(&cfg, Architecture::new(8, 4), &s, Some(&t)).unwrap();
        let b = run_source_stage(&cfg, Architecture::new(8, 4), &s, Some(&t)).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.w0, a.model.classifier.weight);
        let x = run_adapt_stage(&cfg, &a.model, Some(&s), &t, None).unwrap();
        let y = run_adapt_stage(&cfg, &a.model, Some(&s), &t, None).unwrap();
        assert_eq!(format!("{:?}", x.records), format!("{:?}", y.records));
        assert_eq!(x.records.len(), 4);
    }

    #[test]
    fn source_free_requires_no_source() {
        let (_, t, mut cfg) = tiny();
        cfg.setting = Setting::SourceFree;
        let (s, _) = TaskSpec { samples: 200, ..Default::default() }.generate().unwrap();
        let src = run_source_stage(&cfg, Architecture::new(8, 4), &s, None).unwrap();
        let out = run_adapt_stage(&cfg, &src.model, None, &t, None).unwrap();
        assert!(out.records.iter().all(|r| r.source_acc.is_nan()));
    }
}
