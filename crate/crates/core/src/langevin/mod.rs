//! Long-time samplers: the McKean–Vlasov SDE with an NETF assimilation step,
//! and the ALDI reference sampler.

use nalgebra::{Cholesky, DMatrix};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::ensemble::{importance_weights, netf_factor, random_rotation, sym_sqrt, Ensemble};
use crate::error::{Error, Result};
use crate::model::{DataTerm, GaussianPrior, Problem};

/// Inner assimilation transform of the McKean–Vlasov sampler.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TransformKind {
    #[default]
    Netf,
}

/// Time stepping of the ALDI drift.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AldiScheme {
    /// Plain Euler–Maruyama.
    #[default]
    EulerMaruyama,
    /// Gradient drift preconditioned by `(I + Δτ Σ̂ H̄)⁻¹`, with `H̄` the
    /// ensemble-averaged posterior Hessian. Stable for stiff initial spreads.
    LinearlyImplicit,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LangevinConfig {
    pub dt: f64,
    pub tau_end: f64,
    pub transform: TransformKind,
    /// Follow each NETF step with a random mean-preserving rotation of the
    /// deviations. Without it the deterministic transform drives the
    /// ensemble towards a shell and the equilibrium spread is too wide.
    pub rotate: bool,
    /// Add the finite-ensemble drift `((D+1)/(M-1))(θ - m̂)` to ALDI.
    pub correction: bool,
    /// Add the analogous term, halved for the unit noise scale, to the MKV
    /// diffusion step.
    pub mkv_correction: bool,
    pub aldi_scheme: AldiScheme,
}

impl Default for LangevinConfig {
    fn default() -> Self {
        LangevinConfig {
            dt: 1e-2,
            tau_end: 10.0,
            transform: TransformKind::Netf,
            rotate: true,
            correction: true,
            mkv_correction: false,
            aldi_scheme: AldiScheme::EulerMaruyama,
        }
    }
}

impl LangevinConfig {
    pub fn new(dt: f64, tau_end: f64) -> Result<Self> {
        let cfg = LangevinConfig {
            dt,
            tau_end,
            ..LangevinConfig::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::invalid(format!("step {} must be positive", self.dt)));
        }
        if !(self.tau_end >= self.dt && self.tau_end.is_finite()) {
            return Err(Error::invalid(format!(
                "horizon {} shorter than the step {}",
                self.tau_end, self.dt
            )));
        }
        Ok(())
    }

    /// Number of steps, `τ_end/Δτ` rounded to the nearest integer.
    pub fn steps(&self) -> usize {
        (self.tau_end / self.dt).round() as usize
    }
}

fn require_pair(e: &Ensemble) -> Result<()> {
    if e.size() < 2 {
        return Err(Error::DegenerateEnsemble(format!(
            "need at least two particles, found {}",
            e.size()
        )));
    }
    Ok(())
}

/// Reweight by `exp(-Δτ Ψ_data)` and resample deterministically with the
/// NETF transform.
pub fn mkv_assimilation_step<T: DataTerm>(e: &Ensemble, term: &T, dt: f64) -> Result<Ensemble> {
    require_pair(e)?;
    if term.dim() != e.dim() {
        return Err(Error::dims("data term", e.dim(), term.dim()));
    }
    if dt == 0.0 {
        return Ok(e.clone());
    }
    let potentials = term.potentials(e.particles());
    let w = importance_weights(&potentials, dt)?;
    netf_factor(&w)?.apply(e)
}

/// Noise factor `L` with `LLᵀ = Σ̂`, either `D × M` (deviations) or `D × D`.
fn covariance_factor(e: &Ensemble, cov: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if e.size() <= e.dim() {
        Ok(e.deviations() / ((e.size() - 1) as f64).sqrt())
    } else {
        sym_sqrt(cov)
    }
}

fn gaussian_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

/// Tamed Euler–Maruyama step of the prior-drift diffusion
/// `dθ = -½ Σ Σ_prior⁻¹(θ + m - 2m_prior) dτ + Σ^{1/2} dW`.
pub fn mkv_diffusion_step<R: Rng + ?Sized>(
    e: &Ensemble,
    prior: &GaussianPrior,
    dt: f64,
    correction: bool,
    rng: &mut R,
) -> Result<Ensemble> {
    require_pair(e)?;
    if prior.dim() != e.dim() {
        return Err(Error::dims("prior", e.dim(), prior.dim()));
    }
    let (d, m) = (e.dim(), e.size());
    let cov = e.covariance()?;
    let mean = e.mean();
    let mut bracket = e.particles().clone();
    let shift = &mean - prior.mean() * 2.0;
    for mut col in bracket.column_iter_mut() {
        col += &shift;
    }
    let chol = Cholesky::new(prior.covariance() + &cov * dt)
        .ok_or_else(|| Error::Singular("prior covariance plus scaled spread".into()))?;
    let mut next = e.particles() - &cov * chol.solve(&bracket) * (0.5 * dt);
    if correction {
        next += e.deviations() * (0.5 * dt * (d + 1) as f64 / (m - 1) as f64);
    }
    let factor = covariance_factor(e, &cov)?;
    let noise = &factor * gaussian_matrix(factor.ncols(), m, rng);
    next += noise * dt.sqrt();
    if next.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(
            "particle state after diffusion step".into(),
        ));
    }
    Ensemble::new(next)
}

/// Alternate assimilation and diffusion from `init` up to `τ_end`.
pub fn run_mkv<T: DataTerm, R: Rng + ?Sized>(
    problem: &Problem<T>,
    init: Ensemble,
    config: &LangevinConfig,
    rng: &mut R,
) -> Result<Ensemble> {
    config.validate()?;
    if init.dim() != problem.term.dim() {
        return Err(Error::dims(
            "initial ensemble",
            problem.term.dim(),
            init.dim(),
        ));
    }
    let mut e = init;
    for _ in 0..config.steps() {
        e = match config.transform {
            TransformKind::Netf => mkv_assimilation_step(&e, &problem.term, config.dt)?,
        };
        if config.rotate {
            e = random_rotation(&e, rng)?;
        }
        e = mkv_diffusion_step(&e, &problem.prior, config.dt, config.mkv_correction, rng)?;
    }
    Ok(e)
}

/// One ALDI step:
/// `dθᵢ = -Σ̂∇Ψ_post(θᵢ)dτ + ((D+1)/(M-1))(θᵢ - m̂)dτ + √(2/(M-1)) Θ dWᵢ`
/// with `Θ` the `D × M` deviations and `Wᵢ` an `M`-dimensional Brownian motion.
pub fn aldi_step<T: DataTerm, R: Rng + ?Sized>(
    e: &Ensemble,
    problem: &Problem<T>,
    dt: f64,
    correction: bool,
    scheme: AldiScheme,
    rng: &mut R,
) -> Result<Ensemble> {
    require_pair(e)?;
    if problem.term.dim() != e.dim() {
        return Err(Error::dims("problem", e.dim(), problem.term.dim()));
    }
    if dt == 0.0 {
        return Ok(e.clone());
    }
    let (d, m) = (e.dim(), e.size());
    let cov = e.covariance()?;
    let dev = e.deviations();
    let mut drift = &cov * problem.gradients(e.particles());
    if scheme == AldiScheme::LinearlyImplicit {
        let h = problem.term.mean_hessian(e.particles()) + problem.prior.precision();
        let a = DMatrix::identity(d, d) + &cov * h * dt;
        drift = a
            .lu()
            .solve(&drift)
            .ok_or_else(|| Error::Singular("ALDI implicit drift".into()))?;
    }
    let mut next = e.particles() - drift * dt;
    if correction {
        next += &dev * (dt * (d + 1) as f64 / (m - 1) as f64);
    }
    let noise = &dev * gaussian_matrix(m, m, rng);
    next += noise * (2.0 * dt / (m - 1) as f64).sqrt();
    if next.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("particle state after ALDI step".into()));
    }
    Ensemble::new(next)
}

pub fn run_aldi<T: DataTerm, R: Rng + ?Sized>(
    problem: &Problem<T>,
    init: Ensemble,
    config: &LangevinConfig,
    rng: &mut R,
) -> Result<Ensemble> {
    config.validate()?;
    if init.dim() != problem.term.dim() {
        return Err(Error::dims(
            "initial ensemble",
            problem.term.dim(),
            init.dim(),
        ));
    }
    let mut e = init;
    for _ in 0..config.steps() {
        e = aldi_step(
            &e,
            problem,
            config.dt,
            config.correction,
            config.aldi_scheme,
            rng,
        )?;
    }
    Ok(e)
}
