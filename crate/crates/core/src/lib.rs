//! Continual learning for steganalysis-style detectors: MAS and
//! curvature-augmented (APIE) parameter importance, Peak-Weight
//! consolidation across tasks, and a sequential-training harness over
//! synthetic cover/stego tasks.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below pin the `f64` instantiation the harness uses.

pub mod autodiff;
pub mod consolidation;
pub mod error;
pub mod harness;
pub mod importance;
mod io;
pub mod models;
pub mod params;
pub mod rng;
pub mod scalar;
pub mod tasks;
pub mod tensor;

pub use autodiff::{
    forward, loss_grad, output_l2sq_diag_hessian, output_l2sq_grad, HessianMethod, LossKind,
};
pub use consolidation::{
    accumulate_mas, peak_weight, penalty, penalty_grad, Accumulation, ImportanceHistory,
    RegularizerConfig,
};
pub use error::{Error, Result};
pub use importance::{
    apie_importance, combined_importance, curvature, mas_importance, Estimator, ImportanceVector,
};
pub use models::{accuracy, init_params, Checkpoint, LabelVector, ModelKind, ModelSpec};
pub use params::{GradVector, LambdaGroup, ParamVector, Segment};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor64 = Tensor<f64>;
pub type ParamVector64 = ParamVector<f64>;
pub type GradVector64 = GradVector<f64>;
pub type ImportanceVector64 = ImportanceVector<f64>;
pub type ImportanceHistory64 = ImportanceHistory<f64>;
pub type Checkpoint64 = Checkpoint<f64>;

pub type Tensor32 = Tensor<f32>;
pub type ParamVector32 = ParamVector<f32>;
