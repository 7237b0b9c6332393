use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use super::Dataset;
use crate::error::{Error, Result};

type Evaluator = dyn Fn(&DVector<f64>, usize) -> f64 + Send + Sync;

/// Activations `f_n(θ)` of a possibly nonlinear logistic model, one per data
/// point. Only values are exposed; derivative-free methods never need `∇f_n`.
#[derive(Clone)]
pub struct FeatureFunction {
    dim: usize,
    num_data: usize,
    eval: Arc<Evaluator>,
    linear: bool,
}

impl fmt::Debug for FeatureFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FeatureFunction")
            .field("dim", &self.dim)
            .field("num_data", &self.num_data)
            .field("linear", &self.linear)
            .finish_non_exhaustive()
    }
}

impl FeatureFunction {
    /// A general activation map on `R^dim` for `num_data` points.
    pub fn new<F>(dim: usize, num_data: usize, eval: F) -> Self
    where
        F: Fn(&DVector<f64>, usize) -> f64 + Send + Sync + 'static,
    {
        FeatureFunction {
            dim,
            num_data,
            eval: Arc::new(eval),
            linear: false,
        }
    }

    /// `f_n(θ) = θᵀφ_n` for the columns of a dataset.
    pub fn linear(data: &Dataset) -> Self {
        let phi = data.features().clone();
        FeatureFunction {
            dim: phi.nrows(),
            num_data: phi.ncols(),
            eval: Arc::new(move |theta, n| phi.column(n).dot(theta)),
            linear: true,
        }
    }

    /// Mark a user-supplied map as linear in the features of `data`, after
    /// checking `f_n(θ) = θᵀφ_n` at `checks` random points.
    pub fn assert_linear<R: Rng + ?Sized>(
        mut self,
        data: &Dataset,
        checks: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if data.dim() != self.dim || data.len() != self.num_data {
            return Err(Error::invalid("feature function and dataset shapes differ"));
        }
        for _ in 0..checks {
            let theta = DVector::from_fn(self.dim, |_, _| rng.sample::<f64, _>(StandardNormal));
            for n in 0..self.num_data {
                let expected = data.features().column(n).dot(&theta);
                let got = self.eval(&theta, n);
                if (got - expected).abs() > 1e-10 * (1.0 + expected.abs()) {
                    return Err(Error::invalid(format!(
                        "feature function is not linear in the data features at point {n}"
                    )));
                }
            }
        }
        self.linear = true;
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_data(&self) -> usize {
        self.num_data
    }

    pub fn is_linear(&self) -> bool {
        self.linear
    }

    pub fn eval(&self, theta: &DVector<f64>, n: usize) -> f64 {
        (self.eval)(theta, n)
    }

    /// `(f_1(θ), …, f_N(θ))`.
    pub fn values(&self, theta: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(self.num_data, |n, _| self.eval(theta, n))
    }

    /// `N × M` matrix whose column `i` holds the activations of particle `i`.
    pub fn values_all(&self, particles: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.num_data, particles.ncols());
        for (i, c) in particles.column_iter().enumerate() {
            out.set_column(i, &self.values(&c.clone_owned()));
        }
        out
    }
}
