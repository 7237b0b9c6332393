//! Synthetic data sets, repeated-trial experiments and report files.

mod data;
mod oracle;
mod report;

pub use data::{
    class_mle, gen_cox_gaussian_data, gen_example2_data, gen_example3_data,
    gen_linear_gaussian_data, gen_logistic_data, ClassEstimates, CoxGaussianExample, Example2,
    Example3, GaussianClasses, LinearGaussianExample, COX_GAUSSIAN_DIM, EXAMPLE2_POINTS,
    EXAMPLE3_DIM, EXAMPLE3_POINTS, LINEAR_GAUSSIAN_DIM, LINEAR_GAUSSIAN_POINTS,
};
pub use oracle::{
    kalman_oracle, matrix_from_rows, matrix_to_rows, GradientNoise, KalmanState,
    LinearGaussianOracle, OracleFile,
};
pub use report::{
    emit_report, read_summary, read_trials_csv, write_summary_json, write_trials_csv, ReportFormat,
    ReportPaths, SummaryFile, SUMMARY_FILE, TRIALS_FILE,
};

use std::borrow::Cow;
use std::path::PathBuf;
use std::time::Instant;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::ensemble::{spectral_norm, DropoutPolicy, Ensemble};
use crate::error::{Error, Result};
use crate::homotopy::{
    run_homotopy, run_homotopy_with, HomotopyConfig, Method, StochasticInnovation,
};
use crate::langevin::{run_aldi, run_mkv, AldiScheme, LangevinConfig};
use crate::model::{ClipPolicy, LinearGaussianTerm, LogisticTerm, Problem, Subsample};

/// Which synthetic problem a run is performed on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExampleTag {
    /// Two Gaussian classes in the plane, prior `N(θ_true, I)`.
    Example2Informative,
    /// Same data, prior `N(0, 4I)`.
    Example2Weak,
    /// `D = 50`, `N = 1000` logistic data, prior `N(0, I)`.
    Example3,
    /// `D = 5` linear-Gaussian regression.
    LinearGaussian,
    /// Polynomial least squares with a resampled Monte-Carlo integral.
    CoxGaussian,
}

impl ExampleTag {
    pub fn tag(&self) -> &'static str {
        match self {
            ExampleTag::Example2Informative => "example2-informative",
            ExampleTag::Example2Weak => "example2-weak",
            ExampleTag::Example3 => "example3",
            ExampleTag::LinearGaussian => "linear-gaussian",
            ExampleTag::CoxGaussian => "cox-gaussian",
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            ExampleTag::Example2Informative | ExampleTag::Example2Weak => 3,
            ExampleTag::Example3 => EXAMPLE3_DIM,
            ExampleTag::LinearGaussian => LINEAR_GAUSSIAN_DIM,
            ExampleTag::CoxGaussian => COX_GAUSSIAN_DIM,
        }
    }
}

/// Homotopy flows plus the two long-time samplers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MethodTag {
    Fpf,
    SecondOrder,
    Enkbf,
    EnkbfTamed,
    EnkbfStochastic,
    Mkv,
    Aldi,
}

impl MethodTag {
    pub fn tag(&self) -> &'static str {
        match self {
            MethodTag::Mkv => "mkv",
            MethodTag::Aldi => "aldi",
            other => other.homotopy().map_or("", |m| m.tag()),
        }
    }

    /// The flow for homotopy methods, `None` for the samplers.
    pub fn homotopy(&self) -> Option<Method> {
        match self {
            MethodTag::Fpf => Some(Method::Fpf),
            MethodTag::SecondOrder => Some(Method::SecondOrder),
            MethodTag::Enkbf => Some(Method::Enkbf),
            MethodTag::EnkbfTamed => Some(Method::EnkbfTamed),
            MethodTag::EnkbfStochastic => Some(Method::EnkbfStochastic),
            MethodTag::Mkv | MethodTag::Aldi => None,
        }
    }
}

fn default_trials() -> usize {
    100
}
fn default_epsilon() -> f64 {
    0.1
}
fn default_alpha() -> f64 {
    1.0
}
fn default_tau_end() -> f64 {
    10.0
}
fn default_quadrature() -> usize {
    100
}

/// One experiment: `L` independent trials of a method on an example.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub example: ExampleTag,
    pub method: MethodTag,
    /// Ensemble size `M`.
    #[serde(alias = "M")]
    pub ensemble_size: usize,
    /// Number of trials `L`.
    #[serde(alias = "L", default = "default_trials")]
    pub trials: usize,
    #[serde(default)]
    pub seed: u64,
    /// Step `Δτ`; `None` picks the per-example default (see [`ExperimentConfig::step`]).
    #[serde(default)]
    pub dt: Option<f64>,
    /// Diffusion-map bandwidth `ε` of the FPF.
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    /// EnKBF inflation `α`.
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Dropout rate `μ`.
    #[serde(default)]
    pub dropout: f64,
    /// Mini-batch size `N′`.
    #[serde(default)]
    pub batch_size: Option<usize>,
    /// Horizon of the MKV and ALDI samplers.
    #[serde(default = "default_tau_end")]
    pub tau_end: f64,
    /// Uniform nodes per step for the cox-gaussian estimator.
    #[serde(default = "default_quadrature")]
    pub quadrature: usize,
    #[serde(default)]
    pub aldi_scheme: AldiScheme,
    /// Keep one data set for all trials instead of regenerating per trial.
    #[serde(default)]
    pub fixed_data: bool,
    /// Record wall-clock seconds; off by default so reports are reproducible
    /// byte for byte.
    #[serde(default)]
    pub timing: bool,
    /// Directory for report files.
    #[serde(default)]
    pub output: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn new(
        example: ExampleTag,
        method: MethodTag,
        ensemble_size: usize,
        trials: usize,
    ) -> Self {
        ExperimentConfig {
            example,
            method,
            ensemble_size,
            trials,
            seed: 0,
            dt: None,
            epsilon: default_epsilon(),
            alpha: default_alpha(),
            dropout: 0.0,
            batch_size: None,
            tau_end: default_tau_end(),
            quadrature: default_quadrature(),
            aldi_scheme: AldiScheme::default(),
            fixed_data: false,
            timing: false,
            output: None,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_dt(mut self, dt: f64) -> Self {
        self.dt = Some(dt);
        self
    }

    pub fn with_dropout(mut self, rate: f64) -> Self {
        self.dropout = rate;
        self
    }

    pub fn with_batch_size(mut self, batch: usize) -> Self {
        self.batch_size = Some(batch);
        self
    }

    /// Step size in use: the configured one, else `10⁻²` for the samplers,
    /// `1/200` for example3, `10⁻²` for cox-gaussian and `10⁻³` otherwise.
    pub fn step(&self) -> f64 {
        self.dt
            .unwrap_or(match (self.method.homotopy(), self.example) {
                (None, _) => 1e-2,
                (Some(_), ExampleTag::Example3) => 1.0 / 200.0,
                (Some(_), ExampleTag::CoxGaussian) => 1e-2,
                (Some(_), _) => 1e-3,
            })
    }

    pub fn homotopy_config(&self) -> Result<Option<HomotopyConfig>> {
        let Some(method) = self.method.homotopy() else {
            return Ok(None);
        };
        let cfg = HomotopyConfig::new(method, self.step())?
            .with_epsilon(self.epsilon)
            .with_alpha(self.alpha)
            .with_dropout(DropoutPolicy::new(self.dropout)?)
            .with_batch_size(self.batch_size)
            .with_evidence(false);
        cfg.validate()?;
        Ok(Some(cfg))
    }

    pub fn langevin_config(&self) -> Result<LangevinConfig> {
        let mut cfg = LangevinConfig::new(self.step(), self.tau_end)?;
        cfg.aldi_scheme = self.aldi_scheme;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.ensemble_size < 2 {
            return Err(Error::invalid(format!(
                "ensemble size {} must be at least 2",
                self.ensemble_size
            )));
        }
        if self.trials == 0 {
            return Err(Error::invalid("at least one trial is required"));
        }
        if self.quadrature == 0 {
            return Err(Error::invalid("at least one quadrature node is required"));
        }
        match self.method.homotopy() {
            Some(_) => {
                self.homotopy_config()?;
            }
            None => {
                self.langevin_config()?;
                if self.dropout != 0.0 || self.batch_size.is_some() {
                    return Err(Error::invalid(
                        "dropout and mini-batching apply to homotopy methods only",
                    ));
                }
            }
        }
        if self.example == ExampleTag::CoxGaussian && self.batch_size.is_some() {
            return Err(Error::invalid(
                "cox-gaussian resamples quadrature nodes; mini-batching does not apply",
            ));
        }
        Ok(())
    }
}

/// Outcome of one trial.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrialReport {
    pub trial: usize,
    /// Final ensemble mean.
    pub mean: Vec<f64>,
    /// Spectral norm of the final ensemble covariance.
    pub spectral_norm: f64,
    /// `‖m̂ - θ_ref‖₂`. The reference is the generating parameter, except
    /// for cox-gaussian where it is the exact posterior mean.
    pub l2_error: Option<f64>,
    /// Wall-clock time; zero unless timing is enabled.
    pub seconds: f64,
}

/// Trial-averaged statistics; standard deviations use `L - 1`.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Summary {
    pub trials: usize,
    pub mean_of_means: Vec<f64>,
    pub std_of_means: Vec<f64>,
    pub mean_spectral_norm: f64,
    pub std_spectral_norm: f64,
    pub mean_l2_error: Option<f64>,
    pub std_l2_error: Option<f64>,
    pub mean_seconds: f64,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, std)
}

impl Summary {
    pub fn from_reports(reports: &[TrialReport]) -> Result<Self> {
        let first = reports
            .first()
            .ok_or_else(|| Error::invalid("no trial reports to summarise"))?;
        let d = first.mean.len();
        if let Some(bad) = reports.iter().find(|r| r.mean.len() != d) {
            return Err(Error::dims("trial mean", d, bad.mean.len()));
        }
        let (mean_of_means, std_of_means) = (0..d)
            .map(|k| mean_std(&reports.iter().map(|r| r.mean[k]).collect::<Vec<_>>()))
            .unzip();
        let norms: Vec<f64> = reports.iter().map(|r| r.spectral_norm).collect();
        let (mean_spectral_norm, std_spectral_norm) = mean_std(&norms);
        let errors: Option<Vec<f64>> = reports.iter().map(|r| r.l2_error).collect();
        let (mean_l2_error, std_l2_error) = match errors {
            Some(e) => {
                let (m, s) = mean_std(&e);
                (Some(m), Some(s))
            }
            None => (None, None),
        };
        let seconds: Vec<f64> = reports.iter().map(|r| r.seconds).collect();
        Ok(Summary {
            trials: reports.len(),
            mean_of_means,
            std_of_means,
            mean_spectral_norm,
            std_spectral_norm,
            mean_l2_error,
            std_l2_error,
            mean_seconds: mean_std(&seconds).0,
        })
    }
}

/// Reports sorted by trial index plus their summary.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentOutcome {
    pub config: ExperimentConfig,
    pub reports: Vec<TrialReport>,
    pub summary: Summary,
}

/// SplitMix64 finaliser.
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Generator of trial `i`: ChaCha8 seeded with `splitmix64(seed ⊕ i)`.
pub fn trial_rng(seed: u64, trial: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix64(seed ^ trial as u64))
}

/// Stream used for the shared data set when `fixed_data` is on.
const FIXED_DATA_STREAM: u64 = 0xda7a_5e7d_a7a5_e7d0;

fn data_rng(config: &ExperimentConfig) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix64(config.seed ^ FIXED_DATA_STREAM))
}

fn run_sampler_or_flow<T, R>(
    problem: &Problem<T>,
    config: &ExperimentConfig,
    rng: &mut R,
) -> Result<Ensemble>
where
    T: Subsample + StochasticInnovation + Clone,
    R: Rng + ?Sized,
{
    let init = problem.prior.sample_ensemble(config.ensemble_size, rng)?;
    match config.method {
        MethodTag::Mkv => run_mkv(problem, init, &config.langevin_config()?, rng),
        MethodTag::Aldi => run_aldi(problem, init, &config.langevin_config()?, rng),
        _ => {
            let cfg = config
                .homotopy_config()?
                .expect("homotopy method has a flow configuration");
            Ok(run_homotopy(problem, init, &cfg, rng)?.ensemble)
        }
    }
}

/// Final ensemble and reference parameter of one trial.
fn trial_ensemble<R: Rng>(
    config: &ExperimentConfig,
    rng: &mut R,
) -> Result<(Ensemble, DVector<f64>)> {
    let mut shared = data_rng(config);
    let fixed = config.fixed_data;
    macro_rules! data {
        ($gen:expr) => {
            if fixed {
                $gen(&mut shared)
            } else {
                $gen(&mut *rng)
            }
        };
    }
    let clip = ClipPolicy::default();
    match config.example {
        ExampleTag::Example2Informative | ExampleTag::Example2Weak => {
            let ex: Example2 = data!(gen_example2_data)?;
            let prior = if config.example == ExampleTag::Example2Informative {
                ex.informative
            } else {
                ex.weak
            };
            let problem = Problem::new(LogisticTerm::new(ex.data, clip), prior)?;
            Ok((run_sampler_or_flow(&problem, config, rng)?, ex.theta_true))
        }
        ExampleTag::Example3 => {
            let ex: Example3 = data!(gen_example3_data)?;
            let problem = Problem::new(LogisticTerm::new(ex.data, clip), ex.prior)?;
            Ok((run_sampler_or_flow(&problem, config, rng)?, ex.theta_ref))
        }
        ExampleTag::LinearGaussian => {
            let ex: LinearGaussianExample = data!(gen_linear_gaussian_data)?;
            let problem = Problem::new(ex.term()?, ex.prior.clone())?;
            Ok((run_sampler_or_flow(&problem, config, rng)?, ex.theta_true))
        }
        ExampleTag::CoxGaussian => {
            let ex = gen_cox_gaussian_data()?;
            let reference = ex.posterior_mean()?;
            let problem = Problem::new(ex.exact_term()?, ex.prior.clone())?;
            let Some(cfg) = config.homotopy_config()? else {
                return Ok((run_sampler_or_flow(&problem, config, rng)?, reference));
            };
            let init = ex.prior.sample_ensemble(config.ensemble_size, rng)?;
            let nodes = config.quadrature;
            let out = run_homotopy_with(init, &cfg, rng, |_, rng| {
                ex.sample_term(nodes, rng)
                    .map(Cow::<LinearGaussianTerm>::Owned)
            })?;
            Ok((out.ensemble, reference))
        }
    }
}

/// Run trial `trial` of an experiment.
pub fn run_trial(config: &ExperimentConfig, trial: usize) -> Result<TrialReport> {
    let mut rng = trial_rng(config.seed, trial);
    let start = Instant::now();
    let (ensemble, reference) = trial_ensemble(config, &mut rng)?;
    let seconds = if config.timing {
        start.elapsed().as_secs_f64()
    } else {
        0.0
    };
    let mean = ensemble.mean();
    let spectral = spectral_norm(&ensemble.covariance()?)?;
    let report = TrialReport {
        trial,
        mean: mean.iter().copied().collect(),
        spectral_norm: spectral,
        l2_error: Some((&mean - reference).norm()),
        seconds,
    };
    if report.mean.iter().any(|v| !v.is_finite()) || !report.spectral_norm.is_finite() {
        return Err(Error::NonFinite("trial summary".into()));
    }
    Ok(report)
}

/// All trials of an experiment in parallel; the first failure (by trial
/// index) aborts the run.
pub fn run_trials(config: &ExperimentConfig) -> Result<ExperimentOutcome> {
    config.validate()?;
    let results: Vec<Result<TrialReport>> = (0..config.trials)
        .into_par_iter()
        .map(|i| run_trial(config, i))
        .collect();
    let mut reports = Vec::with_capacity(results.len());
    for (trial, r) in results.into_iter().enumerate() {
        reports.push(r.map_err(|e| Error::Trial {
            trial,
            source: Box::new(e),
        })?);
    }
    let summary = Summary::from_reports(&reports)?;
    Ok(ExperimentOutcome {
        config: config.clone(),
        reports,
        summary,
    })
}
