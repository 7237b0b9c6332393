//! Homotopy and Langevin ensemble methods for Bayesian logistic regression.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod ensemble;
pub mod error;
pub mod harness;
pub mod homotopy;
pub mod langevin;
pub mod model;

pub use ensemble::{DropoutPolicy, Ensemble, TransformMatrix};
pub use error::{Error, Result};
pub use model::{ClipPolicy, DataTerm, Dataset, GaussianPrior, Problem};
