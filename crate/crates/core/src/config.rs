//! Run configuration file: TOML with one table per concern. Unknown keys
//! are rejected; missing keys take the defaults below.

use serde::{Deserialize, Serialize};

use crate::analysis::{ProbeConfig, EPSILON_GRID};
use crate::data::TaskSpec;
use crate::error::{Error, Result};
use crate::losses::{LossKind, LossSettings};
use crate::model::Architecture;
use crate::perturb::{PerturbParams, Variant};
use crate::train::{AdaptConfig, OptimConfig, Setting};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub seed: u64,
    pub setting: Setting,
    /// Output directory; falls back to `$APA_OUT_DIR`, then `./apa-out`.
    pub out_dir: Option<String>,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection { seed: 0, setting: Setting::Standard, out_dir: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub hidden: Vec<usize>,
    pub bottleneck: usize,
    pub temperature: f64,
    pub split: usize,
    pub feature_gain: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let a = Architecture::new(1, 2);
        ModelSection {
            hidden: a.hidden,
            bottleneck: a.bottleneck,
            temperature: a.temperature,
            split: a.split,
            feature_gain: a.feature_gain,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub beta: f64,
    pub tau: f64,
    pub batch_size: usize,
    pub source_steps: u64,
    pub adapt_steps: u64,
    pub refresh_interval: u64,
    pub eval_interval: u64,
    pub freeze_classifier: bool,
    pub drift_threshold: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let c = AdaptConfig::new(LossSettings::new(LossKind::ApaN, 0), 0);
        TrainSection {
            beta: c.beta,
            tau: c.tau,
            batch_size: c.batch_size,
            source_steps: c.source_steps,
            adapt_steps: c.adapt_steps,
            refresh_interval: c.refresh_interval,
            eval_interval: c.eval_interval,
            freeze_classifier: c.freeze_classifier,
            drift_threshold: c.drift_threshold,
        }
    }
}

/// `epsilon`, `xi` and `compensate` default per loss kind when absent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossSection {
    pub kind: LossKind,
    pub epsilon: Option<f64>,
    pub xi: Option<f64>,
    pub compensate: Option<bool>,
    pub topk: usize,
    pub topk_steps: usize,
    pub vat_epsilon: f64,
    pub vat_xi: f64,
}

impl Default for LossSection {
    fn default() -> Self {
        let s = LossSettings::new(LossKind::ApaN, 0);
        LossSection {
            kind: LossKind::ApaN,
            epsilon: None,
            xi: None,
            compensate: None,
            topk: s.topk,
            topk_steps: s.topk_steps,
            vat_epsilon: s.vat_epsilon,
            vat_xi: s.vat_xi,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeSection {
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_fraction: f64,
    pub smoothing_window: usize,
    pub topk_max: usize,
    pub shrink_grid: Vec<f64>,
    /// Also record top-k agreement during the correlation probe run.
    pub topk: bool,
}

impl Default for ProbeSection {
    fn default() -> Self {
        let p = ProbeConfig::default();
        ProbeSection {
            batch_size: p.batch_size,
            lr: p.lr,
            warmup_fraction: p.warmup_fraction,
            smoothing_window: p.smoothing_window,
            topk_max: 4,
            shrink_grid: EPSILON_GRID.to_vec(),
            topk: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub eps: Vec<f64>,
    pub beta: Vec<f64>,
    pub topk: Vec<f64>,
}

impl Default for SweepSection {
    fn default() -> Self {
        SweepSection { eps: EPSILON_GRID.to_vec(), beta: vec![0.0, 0.05, 0.1, 0.2], topk: vec![1.0, 2.0, 3.0, 4.0] }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub run: RunSection,
    pub data: TaskSpec,
    pub model: ModelSection,
    pub train: TrainSection,
    pub optim: OptimConfig,
    pub loss: LossSection,
    pub probe: ProbeSection,
    pub sweep: SweepSection,
}

impl RunConfig {
    /// Parse errors carry the line and column of the offending key.
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Effective configuration, every key spelled out.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let (s, t, _) = self.data.specs().map_err(|e| Error::Config(format!("[data] {e}")))?;
        for spec in [s, t] {
            spec.validate().map_err(|e| Error::Config(format!("[data] {e}")))?;
        }
        self.architecture().validate().map_err(|e| Error::Config(format!("[model] {e}")))?;
        self.adapt_config()?.validate()
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            hidden: self.model.hidden.clone(),
            bottleneck: self.model.bottleneck,
            temperature: self.model.temperature,
            split: self.model.split,
            feature_gain: self.model.feature_gain,
            ..Architecture::new(self.data.input_dim, self.data.classes)
        }
    }

    pub fn adapt_config(&self) -> Result<AdaptConfig> {
        let seed = self.run.seed;
        let l = &self.loss;
        let mut settings = LossSettings::new(l.kind, seed);
        let defaults = PerturbParams::defaults_for(l.kind.variant().unwrap_or(Variant::Normalized), seed);
        settings.perturb = PerturbParams::new(l.epsilon.unwrap_or(defaults.epsilon), l.xi.unwrap_or(defaults.xi), seed)
            .map_err(|e| Error::Config(format!("[loss] {e}")))?;
        if let Some(c) = l.compensate {
            settings.compensate = c;
        }
        settings.topk = l.topk;
        settings.topk_steps = l.topk_steps;
        settings.vat_epsilon = l.vat_epsilon;
        settings.vat_xi = l.vat_xi;
        settings.tau = self.train.tau;
        let t = &self.train;
        let mut c = AdaptConfig::new(settings, seed);
        c.setting = self.run.setting;
        c.optim = self.optim;
        c.beta = t.beta;
        c.tau = t.tau;
        c.batch_size = t.batch_size;
        c.source_steps = t.source_steps;
        c.adapt_steps = t.adapt_steps;
        c.refresh_interval = t.refresh_interval;
        c.eval_interval = t.eval_interval;
        c.freeze_classifier = t.freeze_classifier;
        c.drift_threshold = t.drift_threshold;
        Ok(c)
    }

    pub fn probe_config(&self) -> ProbeConfig {
        ProbeConfig {
            batch_size: self.probe.batch_size,
            lr: self.probe.lr,
            warmup_fraction: self.probe.warmup_fraction,
            smoothing_window: self.probe.smoothing_window,
            seed: self.run.seed,
        }
    }

    /// A loss override keeps explicit `epsilon`/`xi`/`compensate` keys and
    /// re-derives the rest from the new kind.
    pub fn with_loss(&self, kind: LossKind) -> RunConfig {
        let mut c = self.clone();
        c.loss.kind = kind;
        c
    }

    /// Copy with every per-kind default written out, as echoed into outputs.
    pub fn resolved(&self) -> Result<RunConfig> {
        let a = self.adapt_config()?;
        let mut c = self.clone();
        c.loss.epsilon = Some(a.loss.perturb.epsilon);
        c.loss.xi = Some(a.loss.perturb.xi);
        c.loss.compensate = Some(a.loss.compensate);
        Ok(c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_all_defaults() {
        let c = RunConfig::from_toml("").unwrap();
        assert_eq!(c, RunConfig::default());
        let a = c.adapt_config().unwrap();
        assert_eq!(a.loss.perturb.epsilon, 1.0);
        assert_eq!(a.batch_size, 16);
        assert_eq!(c.architecture().input_dim, 8);
    }

    #[test]
    fn per_kind_perturbation_defaults() {
        let c = RunConfig::from_toml("[loss]\nkind = \"apa_u\"\n").unwrap();
        let a = c.adapt_config().unwrap();
        assert_eq!((a.loss.perturb.epsilon, a.loss.perturb.xi), (30.0, 10.0));
        let c = RunConfig::from_toml("[loss]\nkind = \"apa_u\"\nepsilon = 100.0\ncompensate = true\n").unwrap();
        let a = c.adapt_config().unwrap();
        assert_eq!(a.loss.perturb.epsilon, 100.0);
        assert!(a.loss.compensate);
    }

    #[test]
    fn unknown_key_is_rejected_with_line() {
        let err = RunConfig::from_toml("[train]\nbeta = 0.1\nbetta = 0.2\n").unwrap_err().to_string();
        assert!(err.contains("line 3"), "{err}");
        assert!(err.contains("betta"), "{err}");
        assert!(RunConfig::from_toml("[nosuch]\n").is_err());
    }

    #[test]
    fn invalid_values_are_config_errors() {
        assert!(matches!(RunConfig::from_toml("[train]\nbeta = -1.0\n"), Err(Error::Config(_))));
        assert!(RunConfig::from_toml("[loss]\nkind = \"nope\"\n").is_err());
    }

    #[test]
    fn effective_config_round_trips() {
        let c = RunConfig::from_toml("[run]\nseed = 7\n[data]\nsamples = 300\n").unwrap();
        let back = RunConfig::from_toml(&c.to_toml().unwrap()).unwrap();
        assert_eq!(c, back);
        let r = c.with_loss(LossKind::ApaU).resolved().unwrap();
        assert_eq!(r.loss.epsilon, Some(30.0));
        let back = RunConfig::from_toml(&r.to_toml().unwrap()).unwrap();
        assert_eq!(back.adapt_config().unwrap(), r.adapt_config().unwrap());
    }
}
