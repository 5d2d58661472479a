//! Correlation adapters for unsupervised domain adaptation of multivariate
//! time series classifiers, with the statistics and closed-form alignment
//! oracles used to verify them.
//!
//! The numeric core (arrays, the differentiable graph, linear algebra and the
//! statistics) is generic over [`Real`]; the learning pipeline runs on `f64`
//! through the aliases below.

pub mod align;
pub mod array;
pub mod backbone;
pub mod cats;
pub mod data;
pub mod diff;
pub mod error;
pub mod linalg;
pub mod losses;
pub mod scalar;
pub mod stats;
pub mod train;

pub use error::{Error, ErrorKind, Result};
pub use scalar::Real;

pub type Tensor = array::NdArray<f64>;
pub type Graph = diff::DiffGraph<f64>;
pub type Params = diff::ParamStore<f64>;
