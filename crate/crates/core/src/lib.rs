//! Semi-supervised semantic segmentation with perturbed and strict mean
//! teachers: two exponentially averaged teachers guide one student through a
//! confidence-weighted consistency loss, with adversarial feature
//! perturbation and input mixing.

pub mod ablate;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod perturb;
pub mod rng;
pub mod scalar;
pub mod teachers;
pub mod tensor;
pub mod trainer;

pub use config::RunConfig;
pub use error::{Error, Result};
pub use eval::EvalReport;
pub use model::{ArchDescriptor, SegModel};
pub use scalar::Scalar;
pub use teachers::TeacherPair;
pub use tensor::{LabelMask, Tensor};
pub use trainer::{run_training, RunOutput, TrainState};

/// Training-precision model.
pub type SegModelF32 = SegModel<f32>;
/// Double-precision model for numerical verification.
pub type SegModelF64 = SegModel<f64>;
