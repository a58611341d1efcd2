//! Jackknife Anderson-Rubin inference, JIVE, and a weak-identification
//! pre-test for linear IV models with many instruments.
//!
//! The estimators are generic over the floating point type (`f32` or `f64`,
//! see [`Real`]). Type aliases for both precisions are exported here.

pub mod artest;
pub mod confset;
pub mod dataio;
pub mod dist;
pub mod error;
pub mod forms;
pub mod jive;
pub mod kernels;
pub mod linalg;
pub mod pretest;
pub mod rng;
pub mod scalar;
pub mod simulate;

pub use error::{Error, Result};
pub use scalar::Real;

pub type Dataset64 = dataio::Dataset<f64>;
pub type Dataset32 = dataio::Dataset<f32>;
pub type ProjectionCache64 = kernels::ProjectionCache<f64>;
pub type ProjectionCache32 = kernels::ProjectionCache<f32>;
pub type JackknifeForms64 = forms::JackknifeForms<f64>;
pub type JackknifeForms32 = forms::JackknifeForms<f32>;
pub type ArResult64 = artest::ArResult<f64>;
pub type JiveResult64 = jive::JiveResult<f64>;
pub type PretestResult64 = pretest::PretestResult<f64>;
pub type TwoStepResult64 = pretest::TwoStepResult<f64>;
