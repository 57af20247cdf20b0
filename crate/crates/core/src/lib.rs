//! Ordinal fundus-image grading: a small, fully self-contained multi-task
//! pipeline that trains a three-head network (classification, regression,
//! ordinal) over five severity grades, evaluates with quadratic weighted
//! kappa, and ensembles test-time-augmented predictions with a trimmed mean.
//!
//! Everything numeric is generic over the scalar type through [`Scalar`];
//! [`Model32`]/[`Model64`] and friends are the concrete aliases most callers
//! want.

pub mod augment;
pub mod config;
pub mod data;
pub mod ensemble;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod preprocess;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::{Dtype, Scalar};

/// Upper clamp applied to continuous grade scores before rounding; keeps a
/// score like 4.6 from rounding past the top grade while still letting
/// values in [4.0, 4.499] round to 4.
pub const GRADE_CAP: f64 = 4.499;

/// Concrete single-precision aliases.
pub type Tensor32 = tensor::Tensor<f32>;
pub type Model32 = nn::ThreeHeadModel<f32>;
pub type Dataset32 = data::Dataset<f32>;

/// Concrete double-precision aliases.
pub type Tensor64 = tensor::Tensor<f64>;
pub type Model64 = nn::ThreeHeadModel<f64>;
pub type Dataset64 = data::Dataset<f64>;
