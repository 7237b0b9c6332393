//! Particle flows over the homotopy `τ ∈ [0, 1]` that carry a prior ensemble
//! to the posterior.

mod fpf;
mod kalman;

pub use fpf::{
    fixed_point_residual, fpf_drift, fpf_fixed_point, fpf_fixed_point_cg, fpf_markov_matrix,
    DiffusionMap, FixedPoint, FpfOptions, FpfSolver, FpfWorkspace,
};
pub use kalman::{
    enkbf_drift, enkbf_step, enkbf_step_gradient_free, enkbf_step_stochastic, enkbf_step_tamed,
    enkbf_step_tamed_data_space, gradient_free_correlation, second_order_step,
};

use std::borrow::Cow;

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::Rng;

use crate::ensemble::{spectral_norm, DropoutPolicy, Ensemble};
use crate::error::{Error, Result};
use crate::model::{DataTerm, LogisticTerm, Problem, Subsample};

/// Which particle flow to integrate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Diffusion-map feedback particle filter.
    Fpf,
    /// Mean and deviation equations with ensemble-averaged Hessian.
    SecondOrder,
    /// Ensemble Kalman–Bucy filter, forward Euler.
    Enkbf,
    /// Ensemble Kalman–Bucy filter, linearly implicit step.
    EnkbfTamed,
    /// Ensemble Kalman–Bucy filter with perturbed innovations.
    EnkbfStochastic,
}

impl Method {
    pub fn tag(&self) -> &'static str {
        match self {
            Method::Fpf => "fpf",
            Method::SecondOrder => "second-order",
            Method::Enkbf => "enkbf",
            Method::EnkbfTamed => "enkbf-tamed",
            Method::EnkbfStochastic => "enkbf-stochastic",
        }
    }
}

/// Time step, method and method parameters of a homotopy run.
#[derive(Debug, Clone, PartialEq)]
pub struct HomotopyConfig {
    pub method: Method,
    /// `Δτ`; `1/Δτ` must be an integer.
    pub dt: f64,
    pub fpf: FpfOptions,
    /// Inflation `α ∈ [1, 2)` of the EnKBF potential.
    pub alpha: f64,
    pub dropout: DropoutPolicy,
    /// Mini-batch size `N′`; `None` uses all data in every step.
    pub batch_size: Option<usize>,
    /// Record mean and covariance norm after each step.
    pub trace: bool,
    /// Accumulate the log-evidence integral; costs two potential
    /// evaluations per particle and step.
    pub evidence: bool,
}

impl HomotopyConfig {
    pub fn new(method: Method, dt: f64) -> Result<Self> {
        let cfg = HomotopyConfig {
            method,
            dt,
            fpf: FpfOptions::default(),
            alpha: 1.0,
            dropout: DropoutPolicy::none(),
            batch_size: None,
            trace: false,
            evidence: true,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_epsilon(mut self, epsilon: f64) -> Self {
        self.fpf.epsilon = epsilon;
        self
    }

    pub fn with_alpha(mut self, alpha: f64) -> Self {
        self.alpha = alpha;
        self
    }

    pub fn with_dropout(mut self, dropout: DropoutPolicy) -> Self {
        self.dropout = dropout;
        self
    }

    pub fn with_batch_size(mut self, batch: Option<usize>) -> Self {
        self.batch_size = batch;
        self
    }

    pub fn with_trace(mut self, trace: bool) -> Self {
        self.trace = trace;
        self
    }

    pub fn with_evidence(mut self, evidence: bool) -> Self {
        self.evidence = evidence;
        self
    }

    /// Number of steps `K = 1/Δτ`.
    pub fn steps(&self) -> usize {
        (1.0 / self.dt).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt <= 1.0) {
            return Err(Error::invalid(format!("step {} outside (0, 1]", self.dt)));
        }
        let k = (1.0 / self.dt).round();
        if (k * self.dt - 1.0).abs() >= 1e-12 {
            return Err(Error::invalid(format!(
                "step {} does not divide the unit interval",
                self.dt
            )));
        }
        if !(1.0..2.0).contains(&self.alpha) {
            return Err(Error::invalid(format!(
                "inflation {} outside [1, 2)",
                self.alpha
            )));
        }
        if !(self.fpf.epsilon > 0.0 && self.fpf.epsilon.is_finite()) {
            return Err(Error::invalid(format!(
                "bandwidth {} must be positive",
                self.fpf.epsilon
            )));
        }
        if self.batch_size == Some(0) {
            return Err(Error::invalid("mini-batch size must be at least 1"));
        }
        Ok(())
    }
}

/// A uniformly drawn subset of `N′` out of `N` indices, with the unbiasing
/// scale `N/N′`.
pub fn minibatch_indices<R: Rng + ?Sized>(
    n: usize,
    batch: usize,
    rng: &mut R,
) -> Result<(Vec<usize>, f64)> {
    if batch == 0 || batch > n {
        return Err(Error::invalid(format!(
            "mini-batch size {batch} must lie in 1..={n}"
        )));
    }
    let mut idx = sample(rng, n, batch).into_vec();
    idx.sort_unstable();
    Ok((idx, n as f64 / batch as f64))
}

/// A freshly drawn mini-batch of a data term.
pub fn minibatch_view<T: Subsample, R: Rng + ?Sized>(
    term: &T,
    batch: usize,
    rng: &mut R,
) -> Result<T> {
    let (idx, scale) = minibatch_indices(term.num_data(), batch, rng)?;
    term.subsample(&idx, scale)
}

/// Ensemble summary after one step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepSummary {
    pub tau: f64,
    pub mean: DVector<f64>,
    pub covariance_norm: f64,
}

/// Result of a homotopy run.
#[derive(Debug, Clone)]
pub struct HomotopyOutput {
    pub ensemble: Ensemble,
    pub trace: Vec<StepSummary>,
    /// `-∫ π̂_τ[Ψ_data] dτ` by the trapezoidal rule along the flow, an
    /// estimate of the log evidence `ln ∫ e^{-Ψ_data} dπ_prior`. Zero when
    /// the integral is switched off.
    pub log_evidence: f64,
}

/// Advance the ensemble by one step of the configured method.
pub struct Flow {
    config: HomotopyConfig,
    warm: Option<DVector<f64>>,
}

impl Flow {
    pub fn new(config: HomotopyConfig) -> Result<Self> {
        config.validate()?;
        Ok(Flow { config, warm: None })
    }

    pub fn config(&self) -> &HomotopyConfig {
        &self.config
    }

    /// One step; `term` is the data term for this step (already batched).
    pub fn step<T: DataTerm + StochasticInnovation, R: Rng + ?Sized>(
        &mut self,
        e: &Ensemble,
        term: &T,
        rng: &mut R,
    ) -> Result<Ensemble> {
        let cfg = &self.config;
        let dt = cfg.dt;
        match cfg.method {
            Method::Fpf => {
                let ws = FpfWorkspace::build(e, term, &cfg.fpf, self.warm.as_ref())?;
                let drift = fpf_drift(e, &ws, cfg.fpf.epsilon)?;
                self.warm = Some(ws.potential);
                let next = e.particles() - drift * dt;
                if next.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite("particle state after FPF step".into()));
                }
                Ensemble::new(next)
            }
            Method::SecondOrder => {
                let cov = e.dropout_covariance(cfg.dropout, rng)?;
                second_order_step(e, term, &cov, dt)
            }
            Method::Enkbf => {
                let cov = e.dropout_covariance(cfg.dropout, rng)?;
                enkbf_step(e, term, &cov, dt, cfg.alpha)
            }
            Method::EnkbfTamed => {
                let cov = e.dropout_covariance(cfg.dropout, rng)?;
                enkbf_step_tamed(e, term, &cov, dt, cfg.alpha)
            }
            Method::EnkbfStochastic => {
                let cov = e.dropout_covariance(cfg.dropout, rng)?;
                let logistic = term.as_logistic().ok_or_else(|| {
                    Error::invalid("perturbed innovations need a binary logistic data term")
                })?;
                enkbf_step_stochastic(e, logistic, &cov, dt, rng)
            }
        }
    }
}

/// Data terms that may drive the perturbed-innovation EnKBF.
pub trait StochasticInnovation {
    fn as_logistic(&self) -> Option<&LogisticTerm> {
        None
    }
}

impl StochasticInnovation for LogisticTerm {
    fn as_logistic(&self) -> Option<&LogisticTerm> {
        Some(self)
    }
}

impl StochasticInnovation for crate::model::LinearGaussianTerm {}
impl StochasticInnovation for crate::model::MultiClassTerm {}
impl StochasticInnovation for crate::model::CoxTerm {}
impl<T: DataTerm> StochasticInnovation for crate::model::AffineReparam<T> {}

/// Run `K` steps from `init`, drawing the data term of step `k` from
/// `term_at(k, rng)`. This is the entry point for randomised likelihoods
/// such as mini-batches or quadrature estimators.
pub fn run_homotopy_with<'a, T, R, F>(
    init: Ensemble,
    config: &HomotopyConfig,
    rng: &mut R,
    mut term_at: F,
) -> Result<HomotopyOutput>
where
    T: DataTerm + StochasticInnovation + Clone + 'a,
    R: Rng + ?Sized,
    F: FnMut(usize, &mut R) -> Result<Cow<'a, T>>,
{
    let mut flow = Flow::new(config.clone())?;
    let k_steps = config.steps();
    let mut e = init;
    let mut trace = Vec::with_capacity(if config.trace { k_steps } else { 0 });
    let mut integral = 0.0;
    for k in 0..k_steps {
        let term = term_at(k, rng)?;
        if config.evidence {
            let before = term.potentials(e.particles()).mean();
            e = flow.step(&e, term.as_ref(), rng)?;
            let after = term.potentials(e.particles()).mean();
            integral += 0.5 * config.dt * (before + after);
        } else {
            e = flow.step(&e, term.as_ref(), rng)?;
        }
        if config.trace {
            let cov = e.covariance()?;
            trace.push(StepSummary {
                tau: (k + 1) as f64 * config.dt,
                mean: e.mean(),
                covariance_norm: spectral_norm(&cov)?,
            });
        }
    }
    if !integral.is_finite() {
        return Err(Error::NonFinite("evidence integral".into()));
    }
    Ok(HomotopyOutput {
        ensemble: e,
        trace,
        log_evidence: -integral,
    })
}

/// Run the configured flow on a problem from `init`, with a fresh mini-batch
/// each step when `config.batch_size` is set.
pub fn run_homotopy<T, R>(
    problem: &Problem<T>,
    init: Ensemble,
    config: &HomotopyConfig,
    rng: &mut R,
) -> Result<HomotopyOutput>
where
    T: Subsample + StochasticInnovation + Clone,
    R: Rng + ?Sized,
{
    if init.dim() != problem.term.dim() {
        return Err(Error::dims(
            "initial ensemble",
            problem.term.dim(),
            init.dim(),
        ));
    }
    match config.batch_size {
        Some(b) if b < problem.term.num_data() => {
            if b == 0 {
                return Err(Error::invalid("mini-batch size must be at least 1"));
            }
            run_homotopy_with(init, config, rng, |_, rng| {
                minibatch_view(&problem.term, b, rng).map(Cow::<T>::Owned)
            })
        }
        Some(b) if b > problem.term.num_data() => Err(Error::invalid(format!(
            "mini-batch size {b} exceeds the {} data points",
            problem.term.num_data()
        ))),
        _ => run_homotopy_with(init, config, rng, |_, _| Ok(Cow::Borrowed(&problem.term))),
    }
}

/// Log evidences and normalised posterior model probabilities.
#[derive(Debug, Clone)]
pub struct BayesFactors {
    /// `ln P_1` per model: prior log probability plus flow log evidence.
    pub log_probabilities: Vec<f64>,
    pub posterior_probabilities: Vec<f64>,
}

/// Run one flow per model and accumulate `d ln P/dτ = -π̂_τ[Ψ_data]`.
pub fn bayes_factor_trace<T, R>(
    models: &[(Problem<T>, f64)],
    ensemble_size: usize,
    config: &HomotopyConfig,
    rng: &mut R,
) -> Result<BayesFactors>
where
    T: Subsample + StochasticInnovation + Clone,
    R: Rng + ?Sized,
{
    if models.is_empty() {
        return Err(Error::invalid("no models to compare"));
    }
    let mut logs = Vec::with_capacity(models.len());
    for (problem, prior_prob) in models {
        if !(*prior_prob > 0.0) {
            return Err(Error::invalid(format!(
                "prior model probability {prior_prob} must be positive"
            )));
        }
        let init = problem.prior.sample_ensemble(ensemble_size, rng)?;
        let out = run_homotopy(problem, init, config, rng)?;
        logs.push(prior_prob.ln() + out.log_evidence);
    }
    let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let unnorm: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = unnorm.iter().sum();
    Ok(BayesFactors {
        log_probabilities: logs,
        posterior_probabilities: unnorm.iter().map(|u| u / total).collect(),
    })
}

/// `ln ∫ exp(-½|Gθ - t|²_Γ⁻¹) N(θ; m₀, Σ₀) dθ` in closed form.
pub fn linear_gaussian_log_evidence(
    forward: &DMatrix<f64>,
    data: &DVector<f64>,
    noise: &DMatrix<f64>,
    prior_mean: &DVector<f64>,
    prior_cov: &DMatrix<f64>,
) -> Result<f64> {
    let s = noise + forward * prior_cov * forward.transpose();
    let r = data - forward * prior_mean;
    let chol_s = nalgebra::Cholesky::new(s)
        .ok_or_else(|| Error::Singular("predictive covariance".into()))?;
    let chol_g = nalgebra::Cholesky::new(noise.clone())
        .ok_or_else(|| Error::Singular("noise covariance".into()))?;
    let logdet = |c: &nalgebra::Cholesky<f64, nalgebra::Dyn>| {
        2.0 * c.l().diagonal().iter().map(|v| v.ln()).sum::<f64>()
    };
    // det(I + Γ⁻¹GΣ₀Gᵀ) = det(Γ + GΣ₀Gᵀ) / det(Γ).
    Ok(-0.5 * (logdet(&chol_s) - logdet(&chol_g)) - 0.5 * r.dot(&chol_s.solve(&r)))
}
