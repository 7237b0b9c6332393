use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use super::{sigmoid, softplus, weighted_gram, DataTerm};
use crate::error::{Error, Result};

type FeatureMap = dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync;

/// Point process with intensity `λ_x(θ) = λ* σ(θᵀφ_x)` on an axis-aligned box.
#[derive(Clone)]
pub struct CoxModel {
    lambda_star: f64,
    feature_dim: usize,
    feature_map: Arc<FeatureMap>,
    events: Vec<DVector<f64>>,
    lower: DVector<f64>,
    upper: DVector<f64>,
}

impl fmt::Debug for CoxModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CoxModel")
            .field("lambda_star", &self.lambda_star)
            .field("feature_dim", &self.feature_dim)
            .field("events", &self.events.len())
            .field("lower", &self.lower)
            .field("upper", &self.upper)
            .finish_non_exhaustive()
    }
}

impl CoxModel {
    pub fn new<F>(
        lambda_star: f64,
        feature_dim: usize,
        feature_map: F,
        events: Vec<DVector<f64>>,
        lower: DVector<f64>,
        upper: DVector<f64>,
    ) -> Result<Self>
    where
        F: Fn(&DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
    {
        if !(lambda_star > 0.0 && lambda_star.is_finite()) {
            return Err(Error::invalid(format!(
                "intensity bound {lambda_star} must be positive"
            )));
        }
        if lower.len() != upper.len() || lower.is_empty() {
            return Err(Error::invalid(
                "domain bounds must be non-empty and of equal length",
            ));
        }
        if lower.iter().zip(upper.iter()).any(|(l, u)| !(l < u)) {
            return Err(Error::invalid("domain is empty"));
        }
        for (n, x) in events.iter().enumerate() {
            if x.len() != lower.len() {
                return Err(Error::dims("event location", lower.len(), x.len()));
            }
            let inside = x
                .iter()
                .zip(lower.iter().zip(upper.iter()))
                .all(|(v, (l, u))| v >= l && v <= u);
            if !inside {
                return Err(Error::invalid(format!("event {n} lies outside the domain")));
            }
        }
        let model = CoxModel {
            lambda_star,
            feature_dim,
            feature_map: Arc::new(feature_map),
            events,
            lower,
            upper,
        };
        let probe = model.features(&model.lower);
        if probe.len() != feature_dim {
            return Err(Error::dims("feature map output", feature_dim, probe.len()));
        }
        Ok(model)
    }

    pub fn lambda_star(&self) -> f64 {
        self.lambda_star
    }

    pub fn dim(&self) -> usize {
        self.feature_dim
    }

    pub fn events(&self) -> &[DVector<f64>] {
        &self.events
    }

    pub fn features(&self, x: &DVector<f64>) -> DVector<f64> {
        (self.feature_map)(x)
    }

    /// Lebesgue measure of the domain box.
    pub fn volume(&self) -> f64 {
        self.lower
            .iter()
            .zip(self.upper.iter())
            .map(|(l, u)| u - l)
            .product()
    }

    /// `count` points drawn uniformly from the domain.
    pub fn sample_domain<R: Rng + ?Sized>(&self, count: usize, rng: &mut R) -> Vec<DVector<f64>> {
        (0..count)
            .map(|_| {
                DVector::from_fn(self.lower.len(), |k, _| {
                    rng.random_range(self.lower[k]..self.upper[k])
                })
            })
            .collect()
    }

    fn feature_matrix(&self, points: &[DVector<f64>]) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.feature_dim, points.len());
        for (i, x) in points.iter().enumerate() {
            m.set_column(i, &self.features(x));
        }
        m
    }

    /// One realisation of the quadrature-based likelihood, with `quadrature`
    /// fresh uniform nodes.
    pub fn sample_term<R: Rng + ?Sized>(&self, quadrature: usize, rng: &mut R) -> Result<CoxTerm> {
        if quadrature == 0 {
            return Err(Error::invalid("at least one quadrature node is required"));
        }
        let nodes = self.sample_domain(quadrature, rng);
        Ok(CoxTerm {
            events: self.feature_matrix(&self.events),
            nodes: self.feature_matrix(&nodes),
            weight: self.lambda_star * self.volume() / quadrature as f64,
            log_lambda: self.lambda_star.ln(),
        })
    }
}

/// `(λ*|𝒳|/I) Σ_i σ(θᵀφ_{x̂_i}) - Σ_n ln σ(θᵀφ_{x_n}) - N ln λ*` for one
/// draw of `I` uniform nodes.
pub fn cox_nll_estimator<R: Rng + ?Sized>(
    theta: &DVector<f64>,
    model: &CoxModel,
    quadrature: usize,
    rng: &mut R,
) -> Result<f64> {
    if theta.len() != model.dim() {
        return Err(Error::dims("parameter vector", model.dim(), theta.len()));
    }
    Ok(model.sample_term(quadrature, rng)?.potential(theta))
}

/// A frozen realisation of the Cox estimator, usable wherever a [`DataTerm`]
/// is expected. Draw a new one per time step to keep the flow unbiased.
#[derive(Debug, Clone)]
pub struct CoxTerm {
    events: DMatrix<f64>,
    nodes: DMatrix<f64>,
    weight: f64,
    log_lambda: f64,
}

impl DataTerm for CoxTerm {
    fn dim(&self) -> usize {
        self.events.nrows()
    }

    fn num_data(&self) -> usize {
        self.events.ncols()
    }

    fn potential(&self, theta: &DVector<f64>) -> f64 {
        let integral: f64 = self.nodes.tr_mul(theta).iter().map(|&a| sigmoid(a)).sum();
        let log_terms: f64 = self
            .events
            .tr_mul(theta)
            .iter()
            .map(|&a| softplus(-a))
            .sum();
        self.weight * integral + log_terms - self.events.ncols() as f64 * self.log_lambda
    }

    fn gradient(&self, theta: &DVector<f64>) -> DVector<f64> {
        let mut w_nodes = self.nodes.tr_mul(theta);
        w_nodes.apply(|a| {
            let y = sigmoid(*a);
            *a = self.weight * y * (1.0 - y);
        });
        let mut w_events = self.events.tr_mul(theta);
        w_events.apply(|a| *a = sigmoid(*a) - 1.0);
        &self.nodes * w_nodes + &self.events * w_events
    }

    fn hessian(&self, theta: &DVector<f64>) -> DMatrix<f64> {
        let mut w_nodes = self.nodes.tr_mul(theta);
        w_nodes.apply(|a| {
            let y = sigmoid(*a);
            *a = self.weight * y * (1.0 - y) * (1.0 - 2.0 * y);
        });
        let mut w_events = self.events.tr_mul(theta);
        w_events.apply(|a| {
            let y = sigmoid(*a);
            *a = y * (1.0 - y);
        });
        weighted_gram(&self.nodes, &w_nodes) + weighted_gram(&self.events, &w_events)
    }
}
