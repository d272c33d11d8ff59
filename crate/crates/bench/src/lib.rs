//! Shared fixtures for the benchmarks.

use apa_core::data::{Dataset, TaskSpec};
use apa_core::{Architecture, Model, Tensor};

/// Default-task datasets at a reduced sample count.
pub fn task(samples: usize) -> (Dataset, Dataset) {
    TaskSpec { samples, ..TaskSpec::default() }.generate().expect("default task")
}

/// Freshly initialized default model for `data`.
pub fn model(data: &Dataset) -> Model {
    Model::new(Architecture::new(data.input_dim(), data.classes), 0).expect("default architecture")
}

/// First `n` rows of `data` with their labels.
pub fn batch(data: &Dataset, n: usize) -> (Tensor, Vec<usize>) {
    let idx: Vec<usize> = (0..n.min(data.len())).collect();
    data.batch(&idx)
}
