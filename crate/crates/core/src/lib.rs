pub mod analysis;
pub mod autodiff;
pub mod config;
pub mod data;
pub mod error;
pub mod losses;
pub mod model;
pub mod ops;
pub mod perturb;
pub mod plot;
pub mod rng;
pub mod train;
pub mod verify;

pub use autodiff::{Graph, Tensor, Var};
pub use error::{Error, Result};
pub use model::{ActivationRecord, Architecture, LinearClassifier, Model, Mode};
pub use perturb::{PerturbParams, Perturbation, Space, Variant};
