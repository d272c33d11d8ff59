//! Synthetic domain pairs, class-balanced sampling and pseudo-labels.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rand::distr::{weighted::WeightedIndex, Distribution};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::ops::argmax;
use crate::rng::{rng_from, standard_normal, SeededRng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Domain::Source => "source",
            Domain::Target => "target",
        })
    }
}

impl FromStr for Domain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "source" => Ok(Domain::Source),
            "target" => Ok(Domain::Target),
            _ => Err(Error::Format(format!("unknown domain '{s}'"))),
        }
    }
}

/// Gaussian-mixture description of one domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub classes: usize,
    pub input_dim: usize,
    /// One mean per class.
    pub means: Vec<Vec<f64>>,
    /// Isotropic standard deviation per class.
    pub scales: Vec<f64>,
    pub label_dist: Vec<f64>,
    pub samples: usize,
    pub seed: u64,
}

impl DomainSpec {
    pub fn validate(&self) -> Result<()> {
        let c = self.classes;
        if c < 2 || self.input_dim == 0 {
            return Err(Error::Config(format!("need ≥ 2 classes and a positive input dim (got {c}, {})", self.input_dim)));
        }
        if self.means.len() != c || self.means.iter().any(|m| m.len() != self.input_dim) {
            return Err(Error::Config(format!("expected {c} means of length {}", self.input_dim)));
        }
        if self.scales.len() != c {
            return Err(Error::Config(format!("expected {c} class scales, got {}", self.scales.len())));
        }
        if let Some((k, s)) = self.scales.iter().enumerate().find(|(_, s)| !(**s > 0.0 && s.is_finite())) {
            return Err(Error::degenerate("generate_domain_pair", format!("class {k} has covariance scale {s}")));
        }
        let total: f64 = self.label_dist.iter().sum();
        if self.label_dist.len() != c || self.label_dist.iter().any(|p| !(*p >= 0.0)) || (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("label distribution {:?} is not on the {c}-simplex", self.label_dist)));
        }
        if self.samples < c {
            return Err(Error::Config(format!("{} samples for {c} classes", self.samples)));
        }
        Ok(())
    }
}

/// Covariate and label shift applied to the target domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Shift {
    /// Translation added to every target sample.
    pub offset: Vec<f64>,
    /// Rotation angle in degrees within the plane of input dims 0 and 1.
    pub rotation_deg: f64,
    /// Geometric imbalance ratio between the most and least frequent class;
    /// the source is skewed one way and the target the other. 1 = balanced.
    pub label_skew: f64,
}

impl Shift {
    pub fn none(input_dim: usize) -> Self {
        Shift { offset: vec![0.0; input_dim], rotation_deg: 0.0, label_skew: 1.0 }
    }

    pub fn apply(&self, x: &mut [f64]) {
        if x.len() >= 2 && self.rotation_deg != 0.0 {
            let (s, c) = self.rotation_deg.to_radians().sin_cos();
            let (a, b) = (x[0], x[1]);
            x[0] = c * a - s * b;
            x[1] = s * a + c * b;
        }
        x.iter_mut().zip(&self.offset).for_each(|(v, o)| *v += o);
    }
}

/// Geometric label distribution with `max / min = ratio`, decreasing in class
/// index (or increasing when `reversed`).
pub fn skewed_labels(classes: usize, ratio: f64, reversed: bool) -> Vec<f64> {
    let step = if classes > 1 { ratio.powf(-1.0 / (classes - 1) as f64) } else { 1.0 };
    let w: Vec<f64> = (0..classes).map(|k| step.powi(k as i32)).collect();
    let s: f64 = w.iter().sum();
    let mut p: Vec<f64> = w.into_iter().map(|v| v / s).collect();
    if reversed {
        p.reverse();
    }
    p
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub x: Tensor,
    pub labels: Vec<usize>,
    pub domain: Domain,
    pub classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.x.cols()
    }

    pub fn batch(&self, idx: &[usize]) -> (Tensor, Vec<usize>) {
        (self.x.select_rows(idx), idx.iter().map(|&i| self.labels[i]).collect())
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.classes];
        for &y in &self.labels {
            c[y] += 1;
        }
        c
    }

    /// Per-feature standard deviation (population).
    pub fn feature_scale(&self) -> Vec<f64> {
        let (_, var) = crate::autodiff::column_moments(&self.x);
        var.into_iter().map(f64::sqrt).collect()
    }

    /// `feat_0..feat_{d-1},label,domain`, 17 significant digits.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let d = self.input_dim();
        let mut header: Vec<String> = (0..d).map(|j| format!("feat_{j}")).collect();
        header.push("label".into());
        header.push("domain".into());
        w.write_record(&header)?;
        for (i, &y) in self.labels.iter().enumerate() {
            let mut rec: Vec<String> = self.x.row(i).iter().map(|v| format!("{v:.16e}")).collect();
            rec.push(y.to_string());
            rec.push(self.domain.to_string());
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path, classes: usize) -> Result<Dataset> {
        let mut r = csv::Reader::from_path(path)?;
        let header = r.headers()?.clone();
        let d = header.len().checked_sub(2).ok_or_else(|| Error::Format("dataset header too short".into()))?;
        for (j, h) in header.iter().take(d).enumerate() {
            if h != format!("feat_{j}") {
                return Err(Error::Format(format!("column {j}: expected feat_{j}, found '{h}'")));
            }
        }
        if &header[d] != "label" || &header[d + 1] != "domain" {
            return Err(Error::Format("dataset header must end with label,domain".into()));
        }
        let mut data = Vec::new();
        let mut labels = Vec::new();
        let mut domain = None;
        for (line, rec) in r.records().enumerate() {
            let rec = rec?;
            let bad = |what: &str| Error::Format(format!("row {}: bad {what}", line + 2));
            for j in 0..d {
                data.push(rec[j].parse::<f64>().map_err(|_| bad("feature"))?);
            }
            let y: usize = rec[d].parse().map_err(|_| bad("label"))?;
            if y >= classes {
                return Err(bad("label"));
            }
            labels.push(y);
            let dm: Domain = rec[d + 1].parse()?;
            if *domain.get_or_insert(dm) != dm {
                return Err(bad("domain (mixed domains)"));
            }
        }
        let domain = domain.ok_or_else(|| Error::EmptyDataset(path.display().to_string()))?;
        Ok(Dataset { x: Tensor::matrix(labels.len(), d, data)?, labels, domain, classes })
    }
}

fn sample_domain(spec: &DomainSpec, shift: Option<&Shift>, domain: Domain) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = rng_from(&[spec.seed, domain as u64]);
    let picker = WeightedIndex::new(&spec.label_dist).map_err(|e| Error::Config(format!("label distribution: {e}")))?;
    let d = spec.input_dim;
    let mut data = Vec::with_capacity(spec.samples * d);
    let mut labels = Vec::with_capacity(spec.samples);
    for _ in 0..spec.samples {
        let y = picker.sample(&mut rng);
        let mut x: Vec<f64> =
            spec.means[y].iter().map(|m| m + spec.scales[y] * standard_normal(&mut rng)).collect();
        if let Some(s) = shift {
            s.apply(&mut x);
        }
        data.extend(x);
        labels.push(y);
    }
    Ok(Dataset { x: Tensor::matrix(spec.samples, d, data)?, labels, domain, classes: spec.classes })
}

/// Draw the source set from `spec_s` and the target set from `spec_t` with
/// the covariate shift applied to every target sample.
pub fn generate_domain_pair(spec_s: &DomainSpec, spec_t: &DomainSpec, shift: &Shift) -> Result<(Dataset, Dataset)> {
    if spec_s.classes != spec_t.classes || spec_s.input_dim != spec_t.input_dim {
        return Err(Error::Config("source and target specs disagree on classes or input dim".into()));
    }
    if shift.offset.len() != spec_t.input_dim {
        return Err(Error::Config(format!("shift offset has {} entries, expected {}", shift.offset.len(), spec_t.input_dim)));
    }
    Ok((sample_domain(spec_s, None, Domain::Source)?, sample_domain(spec_t, Some(shift), Domain::Target)?))
}

/// Description of the default shifted task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskSpec {
    pub classes: usize,
    pub input_dim: usize,
    pub samples: usize,
    /// Distance of each class mean from the origin, in units of the noise scale.
    pub separation: f64,
    pub noise: f64,
    pub offset_sigma: f64,
    pub rotation_deg: f64,
    pub label_skew: f64,
    pub seed: u64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        TaskSpec {
            classes: 4,
            input_dim: 8,
            samples: 2000,
            separation: 6.0,
            noise: 1.0,
            offset_sigma: 1.5,
            rotation_deg: 38.0,
            label_skew: 4.0,
            seed: 0,
        }
    }
}

impl TaskSpec {
    /// Class means evenly spaced on a circle in the dims-0/1 plane; the
    /// target is rotated in that plane and offset along the all-ones
    /// direction.
    pub fn specs(&self) -> Result<(DomainSpec, DomainSpec, Shift)> {
        if self.input_dim < 2 {
            return Err(Error::Config("the task needs at least 2 input dims".into()));
        }
        let c = self.classes;
        let radius = self.separation * self.noise;
        let means: Vec<Vec<f64>> = (0..c)
            .map(|k| {
                let a = 2.0 * std::f64::consts::PI * k as f64 / c as f64;
                let mut m = vec![0.0; self.input_dim];
                m[0] = radius * a.cos();
                m[1] = radius * a.sin();
                m
            })
            .collect();
        let base = DomainSpec {
            classes: c,
            input_dim: self.input_dim,
            means,
            scales: vec![self.noise; c],
            label_dist: skewed_labels(c, self.label_skew, false),
            samples: self.samples,
            seed: self.seed,
        };
        let target = DomainSpec { label_dist: skewed_labels(c, self.label_skew, true), ..base.clone() };
        let along = self.offset_sigma * self.noise / (self.input_dim as f64).sqrt();
        let shift = Shift { offset: vec![along; self.input_dim], rotation_deg: self.rotation_deg, label_skew: self.label_skew };
        Ok((base, target, shift))
    }

    pub fn generate(&self) -> Result<(Dataset, Dataset)> {
        let (s, t, shift) = self.specs()?;
        generate_domain_pair(&s, &t, &shift)
    }
}

/// Draws indices so that every represented class is equally likely.
#[derive(Clone, Debug)]
pub struct BalancedSampler {
    by_class: Vec<Vec<usize>>,
    skipped: Vec<usize>,
    rng: SeededRng,
}

impl BalancedSampler {
    /// `labels[i]` is the (pseudo-)class of sample `i`; `None` excludes it.
    pub fn new(labels: &[Option<usize>], classes: usize, seed: &[u64]) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::EmptyDataset("balanced sampler over an empty dataset".into()));
        }
        let mut groups = vec![Vec::new(); classes];
        for (i, y) in labels.iter().enumerate() {
            if let Some(y) = *y {
                if y >= classes {
                    return Err(Error::InvalidArgument(format!("label {y} for {classes} classes")));
                }
                groups[y].push(i);
            }
        }
        let skipped: Vec<usize> = (0..classes).filter(|&c| groups[c].is_empty()).collect();
        let by_class: Vec<Vec<usize>> = groups.into_iter().filter(|g| !g.is_empty()).collect();
        if by_class.is_empty() {
            return Err(Error::EmptyDataset("no labeled samples to balance".into()));
        }
        Ok(BalancedSampler { by_class, skipped, rng: rng_from(seed) })
    }

    pub fn from_labels(labels: &[usize], classes: usize, seed: &[u64]) -> Result<Self> {
        let l: Vec<Option<usize>> = labels.iter().map(|&y| Some(y)).collect();
        BalancedSampler::new(&l, classes, seed)
    }

    /// Classes with no samples, excluded from balancing.
    pub fn skipped_classes(&self) -> &[usize] {
        &self.skipped
    }

    pub fn next_index(&mut self) -> usize {
        let g = &self.by_class[self.rng.random_range(0..self.by_class.len())];
        g[self.rng.random_range(0..g.len())]
    }

    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        (0..size).map(|_| self.next_index()).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelTable {
    pub labels: Vec<usize>,
    pub confidence: Vec<f64>,
    pub refreshed_at: u64,
}

impl PseudoLabelTable {
    pub fn accuracy(&self, truth: &[usize]) -> f64 {
        let hit = self.labels.iter().zip(truth).filter(|(a, b)| a == b).count();
        100.0 * hit as f64 / truth.len().max(1) as f64
    }
}

/// True at steps `0, interval, 2·interval, …`.
pub fn is_refresh_step(step: u64, interval: u64) -> bool {
    interval > 0 && step % interval == 0
}

/// Evaluation-mode pass over the whole target set.
pub fn refresh_pseudo_labels(model: &Model, target: &Tensor, step: u64) -> Result<PseudoLabelTable> {
    let p = model.predict_proba(target)?;
    let mut labels = Vec::with_capacity(p.rows());
    let mut confidence = Vec::with_capacity(p.rows());
    for row in p.row_iter() {
        let c = argmax(row);
        labels.push(c);
        confidence.push(row[c].clamp(0.0, 1.0));
    }
    Ok(PseudoLabelTable { labels, confidence, refreshed_at: step })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn skew_is_reversed() {
        let s = skewed_labels(4, 4.0, false);
        let t = skewed_labels(4, 4.0, true);
        assert!((s[0] / s[3] - 4.0).abs() < 1e-12);
        assert_eq!(s.iter().rev().copied().collect::<Vec<_>>(), t);
    }

    #[test]
    fn zero_shift_matches_distribution() {
        let spec = TaskSpec { offset_sigma: 0.0, rotation_deg: 0.0, label_skew: 1.0, samples: 4000, ..Default::default() };
        let (s, t, mut shift) = spec.specs().unwrap();
        shift.label_skew = 1.0;
        let (a, b) = generate_domain_pair(&s, &t, &shift).unwrap();
        let (ma, _) = crate::autodiff::column_moments(&a.x);
        let (mb, _) = crate::autodiff::column_moments(&b.x);
        // total per-feature spread is below 4 for this mixture
        let tol = 3.0 * 4.0 / (4000f64).sqrt();
        for j in 0..8 {
            assert!((ma[j] - mb[j]).abs() < tol, "feature {j}");
        }
    }

    #[test]
    fn degenerate_covariance_rejected() {
        let (mut s, t, shift) = TaskSpec::default().specs().unwrap();
        s.scales[1] = 0.0;
        assert!(matches!(generate_domain_pair(&s, &t, &shift), Err(Error::Degenerate { .. })));
    }

    #[test]
    fn generation_is_reproducible() {
        let (a1, b1) = TaskSpec::default().generate().unwrap();
        let (a2, b2) = TaskSpec::default().generate().unwrap();
        assert_eq!(a1, a2);
        assert_eq!(b1, b2);
        let c = a1.class_counts();
        assert!(c[0] > c[3]);
        let ct = b1.class_counts();
        assert!(ct[3] > ct[0]);
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let spec = TaskSpec { samples: 50, ..Default::default() };
        let (s, _) = spec.generate().unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.csv");
        s.write_csv(&p).unwrap();
        assert_eq!(Dataset::read_csv(&p, 4).unwrap(), s);
    }

    #[test]
    fn sampler_balances_imbalanced_classes() {
        let labels: Vec<usize> = (0..1000).map(|i| if i < 900 { 0 } else { 1 }).collect();
        let mut s = BalancedSampler::from_labels(&labels, 2, &[7]).unwrap();
        let draws = s.next_batch(10_000);
        let ones = draws.iter().filter(|&&i| labels[i] == 1).count() as f64 / 10_000.0;
        assert!((ones - 0.5).abs() < 0.02, "{ones}");
        assert!(draws.iter().all(|&i| i < 1000));
    }

    #[test]
    fn sampler_skips_empty_classes() {
        let s = BalancedSampler::from_labels(&[0, 0, 2], 3, &[1]).unwrap();
        assert_eq!(s.skipped_classes(), &[1]);
        assert!(BalancedSampler::new(&[], 3, &[1]).is_err());
    }

    #[test]
    fn refresh_schedule() {
        let steps: Vec<u64> = (0..350).filter(|&s| is_refresh_step(s, 100)).collect();
        assert_eq!(steps, vec![0, 100, 200, 300]);
    }
}
