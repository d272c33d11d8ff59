//! Classifier `h = g ∘ f`: a standardized MLP feature extractor `f` followed by
//! a linear head `g` on ℓ2-normalized penultimate activations.

use std::ops::Range;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{column_moments, cosine, l2_norm, Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::rng_from;

pub const CHECKPOINT_VERSION: u32 = 1;

/// How feature standardization gets its statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; the caller folds them into the running averages.
    Train,
    /// Batch statistics, running averages untouched (auxiliary passes).
    BatchStats,
    /// Running averages.
    Eval,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub bottleneck: usize,
    pub classes: usize,
    pub temperature: f64,
    /// Layer boundary splitting `f = f^b ∘ f^a`.
    pub split: usize,
    /// Initial standardization scale of the last extractor layer. Sets the
    /// typical `‖z‖`; `z̄` and the predictions do not depend on it.
    pub feature_gain: f64,
}

impl Architecture {
    pub fn new(input_dim: usize, classes: usize) -> Self {
        Architecture {
            input_dim,
            hidden: vec![32, 32],
            bottleneck: 16,
            classes,
            temperature: 0.05,
            split: 1,
            feature_gain: 10.0,
        }
    }

    pub fn layer_count(&self) -> usize {
        self.hidden.len() + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.bottleneck == 0 || self.classes < 2 {
            return Err(Error::InvalidArgument(format!("degenerate architecture {self:?}")));
        }
        if !(self.feature_gain > 0.0) {
            return Err(Error::InvalidArgument("feature gain must be positive".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::InvalidArgument("temperature must be positive".into()));
        }
        if self.split > self.layer_count() {
            return Err(Error::InvalidSplit { index: self.split, layers: self.layer_count() });
        }
        Ok(())
    }
}

/// Affine → feature standardization → ReLU.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub weight: Tensor,
    pub bias: Tensor,
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureExtractor {
    pub layers: Vec<DenseLayer>,
    pub split: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearClassifier {
    /// `[C, d]`
    pub weight: Tensor,
    /// `[C]`
    pub bias: Tensor,
    pub temperature: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub version: u32,
    pub arch: Architecture,
    pub extractor: FeatureExtractor,
    pub classifier: LinearClassifier,
    pub seed: u64,
    pub std_eps: f64,
    /// Running statistics keep this fraction of their previous value.
    pub stats_momentum: f64,
}

/// Penultimate activation of one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationRecord {
    pub z: Tensor,
    pub z_norm: Tensor,
    pub norm: f64,
}

impl ActivationRecord {
    pub fn from_activation(z: Tensor) -> Result<Self> {
        let norm = z.norm();
        if norm == 0.0 {
            return Err(Error::degenerate("ActivationRecord", "zero activation"));
        }
        let z_norm = z.scaled(1.0 / norm);
        Ok(ActivationRecord { z, z_norm, norm })
    }
}

/// Graph handles for one layer's parameters.
#[derive(Clone, Copy, Debug)]
pub struct LayerVars {
    pub weight: Var,
    pub bias: Var,
    pub gamma: Var,
    pub beta: Var,
}

/// Graph handles for all parameters, in [`Model::param_tensors`] order.
#[derive(Clone, Debug)]
pub struct ModelVars {
    pub layers: Vec<LayerVars>,
    pub cls_weight: Var,
    pub cls_bias: Var,
}

impl ModelVars {
    pub fn all(&self) -> Vec<Var> {
        let mut v: Vec<Var> = self.layers.iter().flat_map(|l| [l.weight, l.bias, l.gamma, l.beta]).collect();
        v.push(self.cls_weight);
        v.push(self.cls_bias);
        v
    }
}

/// Batch mean and biased variance seen by one standardization layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub count: usize,
}

#[derive(Clone, Debug)]
pub struct Forward {
    pub z: Var,
    pub z_norm: Var,
    pub logits: Var,
    pub stats: Vec<BatchStats>,
}

fn uniform_tensor<R: Rng>(rng: &mut R, shape: &[usize], bound: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

impl Model {
    /// Seeded initialization: weights and biases uniform in `±1/√fan_in`,
    /// standardization scale 1 and shift 0.
    pub fn new(arch: Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = rng_from(&[seed, 0x1A17]);
        let mut dims = vec![arch.input_dim];
        dims.extend(&arch.hidden);
        dims.push(arch.bottleneck);
        let last = dims.len() - 2;
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let (fan_in, out) = (w[0], w[1]);
                let bound = 1.0 / (fan_in as f64).sqrt();
                DenseLayer {
                    weight: uniform_tensor(&mut rng, &[out, fan_in], bound),
                    bias: uniform_tensor(&mut rng, &[out], bound),
                    gamma: Tensor::filled(&[out], if i == last { arch.feature_gain } else { 1.0 }),
                    beta: Tensor::zeros(&[out]),
                    running_mean: vec![0.0; out],
                    running_var: vec![1.0; out],
                }
            })
            .collect();
        let bound = 1.0 / (arch.bottleneck as f64).sqrt();
        let classifier = LinearClassifier {
            weight: uniform_tensor(&mut rng, &[arch.classes, arch.bottleneck], bound),
            bias: uniform_tensor(&mut rng, &[arch.classes], bound),
            temperature: arch.temperature,
        };
        Ok(Model {
            version: CHECKPOINT_VERSION,
            extractor: FeatureExtractor { layers, split: arch.split },
            arch,
            classifier,
            seed,
            std_eps: 1e-5,
            stats_momentum: 0.9,
        })
    }

    pub fn classes(&self) -> usize {
        self.arch.classes
    }

    pub fn input_dim(&self) -> usize {
        self.arch.input_dim
    }

    pub fn penultimate_dim(&self) -> usize {
        self.arch.bottleneck
    }

    pub fn temperature(&self) -> f64 {
        self.classifier.temperature
    }

    /// Every trainable tensor: per layer `weight, bias, gamma, beta`, then the
    /// classifier `weight, bias`.
    pub fn param_tensors(&self) -> Vec<&Tensor> {
        let mut v: Vec<&Tensor> =
            self.extractor.layers.iter().flat_map(|l| [&l.weight, &l.bias, &l.gamma, &l.beta]).collect();
        v.push(&self.classifier.weight);
        v.push(&self.classifier.bias);
        v
    }

    pub fn param_tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v: Vec<&mut Tensor> = self
            .extractor
            .layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias, &mut l.gamma, &mut l.beta])
            .collect();
        v.push(&mut self.classifier.weight);
        v.push(&mut self.classifier.bias);
        v
    }

    /// Indices into [`Model::param_tensors`] that belong to the classifier.
    pub fn classifier_param_range(&self) -> Range<usize> {
        let n = 4 * self.extractor.layers.len();
        n..n + 2
    }

    /// Register all parameters as differentiable leaves.
    pub fn bind(&self, g: &mut Graph) -> ModelVars {
        let layers = self
            .extractor
            .layers
            .iter()
            .map(|l| LayerVars {
                weight: g.param(l.weight.clone()),
                bias: g.param(l.bias.clone()),
                gamma: g.param(l.gamma.clone()),
                beta: g.param(l.beta.clone()),
            })
            .collect();
        ModelVars {
            layers,
            cls_weight: g.param(self.classifier.weight.clone()),
            cls_bias: g.param(self.classifier.bias.clone()),
        }
    }

    /// Register all parameters as constants (inference-only graphs).
    pub fn bind_constant(&self, g: &mut Graph) -> ModelVars {
        let layers = self
            .extractor
            .layers
            .iter()
            .map(|l| LayerVars {
                weight: g.constant(l.weight.clone()),
                bias: g.constant(l.bias.clone()),
                gamma: g.constant(l.gamma.clone()),
                beta: g.constant(l.beta.clone()),
            })
            .collect();
        ModelVars {
            layers,
            cls_weight: g.constant(self.classifier.weight.clone()),
            cls_bias: g.constant(self.classifier.bias.clone()),
        }
    }

    fn check_split(&self, split: usize) -> Result<()> {
        let layers = self.extractor.layers.len();
        if split > layers {
            return Err(Error::InvalidSplit { index: split, layers });
        }
        Ok(())
    }

    /// Apply extractor layers `range` to `x`.
    pub fn extract_range(
        &self,
        g: &mut Graph,
        vars: &ModelVars,
        x: Var,
        range: Range<usize>,
        mode: Mode,
    ) -> Result<(Var, Vec<BatchStats>)> {
        if range.end > self.extractor.layers.len() || range.start > range.end {
            return Err(Error::InvalidSplit { index: range.end, layers: self.extractor.layers.len() });
        }
        let mut h = x;
        let mut stats = Vec::new();
        for i in range {
            let (layer, lv) = (&self.extractor.layers[i], &vars.layers[i]);
            let a = g.linear(h, lv.weight)?;
            let a = g.add_row(a, lv.bias)?;
            let s = match mode {
                Mode::Train | Mode::BatchStats => {
                    let (mean, var) = column_moments(g.value(a));
                    stats.push(BatchStats { mean, var, count: g.value(a).rows() });
                    g.standardize(a, self.std_eps)?
                }
                Mode::Eval => {
                    let shift = g.constant(Tensor::vector(layer.running_mean.iter().map(|m| -m).collect()));
                    let inv = g.constant(Tensor::vector(
                        layer.running_var.iter().map(|v| 1.0 / (v + self.std_eps).sqrt()).collect(),
                    ));
                    let c = g.add_row(a, shift)?;
                    g.mul_row(c, inv)?
                }
            };
            let s = g.mul_row(s, lv.gamma)?;
            let s = g.add_row(s, lv.beta)?;
            h = g.relu(s)?;
        }
        Ok((h, stats))
    }

    /// `g(z̄) = W z̄ + B` (logits before temperature).
    pub fn head(&self, g: &mut Graph, vars: &ModelVars, z_norm: Var) -> Result<Var> {
        let l = g.linear(z_norm, vars.cls_weight)?;
        g.add_row(l, vars.cls_bias)
    }

    /// Full pass: activations `z`, normalized `z̄` (zero rows stay zero) and logits.
    pub fn forward(&self, g: &mut Graph, vars: &ModelVars, x: Var, mode: Mode) -> Result<Forward> {
        let d_in = g.value(x).cols();
        if d_in != self.input_dim() {
            return Err(Error::shape("forward", format!("input width {d_in}, model expects {}", self.input_dim())));
        }
        let (z, stats) = self.extract_range(g, vars, x, 0..self.extractor.layers.len(), mode)?;
        let z_norm = g.normalize_l2_or_zero(z)?;
        let logits = self.head(g, vars, z_norm)?;
        Ok(Forward { z, z_norm, logits, stats })
    }

    /// Fold batch statistics into the running averages.
    pub fn update_running_stats(&mut self, stats: &[BatchStats]) {
        let m = self.stats_momentum;
        for (layer, s) in self.extractor.layers.iter_mut().zip(stats) {
            let unbias = if s.count > 1 { s.count as f64 / (s.count - 1) as f64 } else { 1.0 };
            for j in 0..layer.running_mean.len() {
                layer.running_mean[j] = m * layer.running_mean[j] + (1.0 - m) * s.mean[j];
                layer.running_var[j] = m * layer.running_var[j] + (1.0 - m) * s.var[j] * unbias;
            }
        }
    }

    /// Evaluation-mode penultimate activations for a batch `[n, in]`.
    pub fn activations(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let vars = self.bind_constant(&mut g);
        let xv = g.constant(x.clone());
        let (z, _) = self.extract_range(&mut g, &vars, xv, 0..self.extractor.layers.len(), Mode::Eval)?;
        Ok(g.value(z).clone())
    }

    /// Evaluation-mode class probabilities for a batch `[n, in]`.
    pub fn predict_proba(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let vars = self.bind_constant(&mut g);
        let xv = g.constant(x.clone());
        let fwd = self.forward(&mut g, &vars, xv, Mode::Eval)?;
        let p = g.softmax(fwd.logits, self.temperature())?;
        Ok(g.value(p).clone())
    }

    /// One sample through the whole model in evaluation mode.
    pub fn forward_full(&self, x: &Tensor) -> Result<(ActivationRecord, Tensor)> {
        if x.shape().len() != 1 || x.len() != self.input_dim() {
            return Err(Error::shape("forward_full", format!("expected [{}], got {:?}", self.input_dim(), x.shape())));
        }
        let z = self.activations(x)?;
        let record = ActivationRecord::from_activation(z)?;
        let probs = self.classifier.probs(&record.z_norm)?;
        Ok((record, probs))
    }

    /// `(f^a(x), f^b(f^a(x)))` at the model's split index.
    pub fn forward_split(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        self.forward_split_at(x, self.extractor.split)
    }

    pub fn forward_split_at(&self, x: &Tensor, split: usize) -> Result<(Tensor, Tensor)> {
        self.check_split(split)?;
        let a = self.lower(x, split)?;
        let z = self.upper(&a, split)?;
        Ok((a, z))
    }

    /// `f^a`: layers below `split` (identity when `split == 0`), evaluation mode.
    pub fn lower(&self, x: &Tensor, split: usize) -> Result<Tensor> {
        self.check_split(split)?;
        let mut g = Graph::new();
        let vars = self.bind_constant(&mut g);
        let xv = g.constant(x.clone());
        let (a, _) = self.extract_range(&mut g, &vars, xv, 0..split, Mode::Eval)?;
        Ok(g.value(a).clone())
    }

    /// `f^b`: layers from `split` on (identity when `split` is the last boundary).
    pub fn upper(&self, a: &Tensor, split: usize) -> Result<Tensor> {
        self.check_split(split)?;
        let mut g = Graph::new();
        let vars = self.bind_constant(&mut g);
        let av = g.constant(a.clone());
        let (z, _) = self.extract_range(&mut g, &vars, av, split..self.extractor.layers.len(), Mode::Eval)?;
        Ok(g.value(z).clone())
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(self)?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let model: Model = serde_json::from_str(&text)?;
        if model.version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("checkpoint version {} unsupported", model.version)));
        }
        Ok(model)
    }
}

impl LinearClassifier {
    pub fn classes(&self) -> usize {
        self.weight.rows()
    }

    pub fn dim(&self) -> usize {
        self.weight.cols()
    }

    /// Logits `W v + B` for a vector or a batch of rows.
    pub fn logits(&self, v: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let w = g.constant(self.weight.clone());
        let b = g.constant(self.bias.clone());
        let x = g.constant(v.clone());
        let l = g.linear(x, w)?;
        let l = g.add_row(l, b)?;
        Ok(g.value(l).clone())
    }

    /// `softmax((W v + B) / T)`.
    pub fn probs(&self, v: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let l = g.constant(self.logits(v)?);
        let p = g.softmax(l, self.temperature)?;
        Ok(g.value(p).clone())
    }
}

/// Mean cosine similarity between matching rows of two weight matrices.
#[derive(Clone, Debug, PartialEq)]
pub struct Drift {
    pub mean_cosine: f64,
    /// Rows skipped because one side was zero.
    pub excluded: usize,
}

pub fn classifier_drift(initial: &Tensor, current: &Tensor) -> Result<Drift> {
    if initial.shape() != current.shape() {
        return Err(Error::shape("classifier_drift", format!("{:?} vs {:?}", initial.shape(), current.shape())));
    }
    let mut sum = 0.0;
    let mut used = 0usize;
    let mut excluded = 0usize;
    for (a, b) in initial.row_iter().zip(current.row_iter()) {
        match cosine(a, b) {
            Some(c) => {
                sum += c;
                used += 1;
            }
            None => excluded += 1,
        }
    }
    let mean_cosine = if used == 0 { f64::NAN } else { sum / used as f64 };
    Ok(Drift { mean_cosine, excluded })
}

/// ℓ2 norm of every row.
pub fn row_norms(t: &Tensor) -> Vec<f64> {
    t.row_iter().map(l2_norm).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::standard_normal;

    fn small_model(seed: u64) -> Model {
        Model::new(Architecture::new(5, 3), seed).unwrap()
    }

    fn random_input(seed: u64, d: usize) -> Tensor {
        let mut rng = rng_from(&[seed]);
        Tensor::vector((0..d).map(|_| standard_normal(&mut rng)).collect())
    }

    #[test]
    fn zero_head_is_uniform() {
        let mut m = small_model(1);
        m.classifier.weight = Tensor::zeros(&[3, 16]);
        m.classifier.bias = Tensor::zeros(&[3]);
        let (_, p) = m.forward_full(&random_input(2, 5)).unwrap();
        for &pc in p.data() {
            assert!((pc - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn two_class_head_matches_scalar_softmax() {
        let clf = LinearClassifier {
            weight: Tensor::matrix(2, 2, vec![1.0, 0.0, -1.0, 0.0]).unwrap(),
            bias: Tensor::zeros(&[2]),
            temperature: 1.0,
        };
        let p = clf.probs(&Tensor::vector(vec![1.0, 0.0])).unwrap();
        let e = 1f64.exp();
        let expected = [e / (e + 1.0 / e), (1.0 / e) / (e + 1.0 / e)];
        assert!((p.data()[0] - expected[0]).abs() < 1e-15);
        assert!((p.data()[1] - expected[1]).abs() < 1e-15);
    }

    #[test]
    fn activation_records_are_consistent() {
        let m = small_model(3);
        for s in 0..100 {
            let (rec, p) = m.forward_full(&random_input(100 + s, 5)).unwrap();
            assert!((rec.z_norm.norm() - 1.0).abs() < 1e-12);
            let back = rec.z_norm.scaled(rec.norm);
            assert!(back.max_abs_diff(&rec.z) < 1e-10);
            assert!((p.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn split_recomposes_exactly() {
        let m = small_model(4);
        let x = random_input(9, 5);
        let (rec, _) = m.forward_full(&x).unwrap();
        for split in 0..=m.extractor.layers.len() {
            let (a, z) = m.forward_split_at(&x, split).unwrap();
            assert_eq!(z.data(), rec.z.data(), "split {split}");
            if split == 0 {
                assert_eq!(a.data(), x.data());
            }
            if split == m.extractor.layers.len() {
                assert_eq!(a.data(), rec.z.data());
            }
        }
        assert!(matches!(m.forward_split_at(&x, 4), Err(Error::InvalidSplit { .. })));
    }

    #[test]
    fn head_is_affine() {
        let m = small_model(5);
        let z1 = random_input(1, 16);
        let z2 = random_input(2, 16);
        let alpha = 0.37;
        let mix = z1.scaled(alpha).zip_map(&z2.scaled(1.0 - alpha), |a, b| a + b);
        let l1 = m.classifier.logits(&z1).unwrap();
        let l2 = m.classifier.logits(&z2).unwrap();
        let lm = m.classifier.logits(&mix).unwrap();
        let expected = l1.scaled(alpha).zip_map(&l2.scaled(1.0 - alpha), |a, b| a + b);
        assert!(lm.max_abs_diff(&expected) < 1e-10);
    }

    #[test]
    fn probs_depend_only_on_direction() {
        let m = small_model(6);
        let z = random_input(3, 16);
        let p = m.classifier.probs(&z.scaled(1.0 / z.norm())).unwrap();
        for alpha in [0.01, 1.0, 42.0] {
            let zs = z.scaled(alpha);
            let q = m.classifier.probs(&zs.scaled(1.0 / zs.norm())).unwrap();
            assert!(p.max_abs_diff(&q) < 1e-10);
        }
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let m = small_model(7);
        assert!(m.forward_full(&random_input(1, 4)).is_err());
    }

    #[test]
    fn drift_examples() {
        let w0 = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(classifier_drift(&w0, &w0).unwrap().mean_cosine, 1.0);
        assert_eq!(classifier_drift(&w0, &w0.scaled(-1.0)).unwrap().mean_cosine, -1.0);
        let swapped = Tensor::matrix(2, 2, vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        assert_eq!(classifier_drift(&w0, &swapped).unwrap().mean_cosine, 0.0);
        let zero_row = Tensor::matrix(2, 2, vec![0.0, 0.0, 0.0, 1.0]).unwrap();
        let d = classifier_drift(&w0, &zero_row).unwrap();
        assert_eq!((d.mean_cosine, d.excluded), (1.0, 1));
    }

    #[test]
    fn checkpoint_round_trips_bit_exactly() {
        let mut m = small_model(8);
        m.extractor.layers[0].running_mean[0] = 0.1 + 0.2;
        m.extractor.layers[1].running_var[3] = std::f64::consts::PI * 1e-17;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        m.save_checkpoint(&path).unwrap();
        let back = Model::load_checkpoint(&path).unwrap();
        assert_eq!(back, m);
        for (a, b) in m.param_tensors().iter().zip(back.param_tensors()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn initialization_is_seeded() {
        assert_eq!(small_model(11), small_model(11));
        assert_ne!(small_model(11), small_model(12));
    }
}
