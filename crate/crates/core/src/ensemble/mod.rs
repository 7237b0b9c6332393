//! Particle ensembles and the linear algebra built on them.

mod netf;

pub use netf::{netf_factor, netf_transform, random_rotation, NetfFactor, TransformMatrix};

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;

use crate::error::{Error, Result};

/// `D × M` matrix of particles; column `i` is `θ^{(i)}`.
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble(DMatrix<f64>);

impl Ensemble {
    pub fn new(particles: DMatrix<f64>) -> Result<Self> {
        if particles.ncols() == 0 {
            return Err(Error::invalid("ensemble has no particles"));
        }
        if let Some(bad) = particles.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("ensemble entry {bad}")));
        }
        Ok(Ensemble(particles))
    }

    /// Particles `mean + deviations[:, i]`.
    pub fn from_mean_deviations(mean: &DVector<f64>, deviations: &DMatrix<f64>) -> Result<Self> {
        if mean.len() != deviations.nrows() {
            return Err(Error::dims("ensemble mean", deviations.nrows(), mean.len()));
        }
        let mut p = deviations.clone();
        for mut col in p.column_iter_mut() {
            col += mean;
        }
        Ensemble::new(p)
    }

    pub fn particles(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.0
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    /// Ensemble size `M`.
    pub fn size(&self) -> usize {
        self.0.ncols()
    }

    pub fn particle(&self, i: usize) -> DVector<f64> {
        self.0.column(i).clone_owned()
    }

    pub fn mean(&self) -> DVector<f64> {
        self.0.column_mean()
    }

    /// `Θ`, the particles minus their mean.
    pub fn deviations(&self) -> DMatrix<f64> {
        let m = self.mean();
        let mut dev = self.0.clone();
        for mut col in dev.column_iter_mut() {
            col -= &m;
        }
        dev
    }

    fn require_pair(&self) -> Result<()> {
        if self.size() < 2 {
            return Err(Error::DegenerateEnsemble(format!(
                "covariance needs at least two particles, found {}",
                self.size()
            )));
        }
        Ok(())
    }

    /// `ΘΘᵀ / (M - 1)`.
    pub fn covariance(&self) -> Result<DMatrix<f64>> {
        self.require_pair()?;
        Ok(outer_gram(&self.deviations(), (self.size() - 1) as f64))
    }

    /// Covariance of a copy of the ensemble in which each particle entry is
    /// zeroed independently with probability `μ`, rescaled by `1 / (1 - μ)`.
    /// Deviations are taken from the mean of the masked copy. In expectation
    /// off-diagonals shrink by `1 - μ` and the diagonal becomes
    /// `(1 - μ/M) σ² + μ m̂²`. At `μ = 0` no random numbers are drawn and the
    /// result is [`Ensemble::covariance`] bit for bit.
    pub fn dropout_covariance<R: Rng + ?Sized>(
        &self,
        policy: DropoutPolicy,
        rng: &mut R,
    ) -> Result<DMatrix<f64>> {
        self.require_pair()?;
        let mu = policy.rate();
        if mu == 0.0 {
            return self.covariance();
        }
        let mut masked = self.particles().clone();
        for v in masked.iter_mut() {
            let eta: f64 = rng.random();
            if eta < mu {
                *v = 0.0;
            }
        }
        let mean = masked.column_mean();
        for mut col in masked.column_iter_mut() {
            col -= &mean;
        }
        Ok(outer_gram(&masked, (1.0 - mu) * (self.size() - 1) as f64))
    }

    /// Column `j` of the result is `Σ_i θ^{(i)} s_{ij}`.
    pub fn apply_transform(&self, s: &TransformMatrix) -> Result<Ensemble> {
        if s.size() != self.size() {
            return Err(Error::dims("transform matrix", self.size(), s.size()));
        }
        Ensemble::new(&self.0 * s.matrix())
    }

    /// `A θ^{(i)} + b` for every particle.
    pub fn affine_map(&self, a: &DMatrix<f64>, b: &DVector<f64>) -> Result<Ensemble> {
        if a.ncols() != self.dim() || b.len() != a.nrows() {
            return Err(Error::dims("affine map", self.dim(), a.ncols()));
        }
        let mut p = a * &self.0;
        for mut col in p.column_iter_mut() {
            col += b;
        }
        Ensemble::new(p)
    }
}

fn outer_gram(dev: &DMatrix<f64>, denom: f64) -> DMatrix<f64> {
    let mut c = dev * dev.transpose();
    c /= denom;
    crate::model::symmetrise(&mut c);
    c
}

/// Entry-wise dropout applied to particle entries before the covariance is formed.
#[derive(Debug, Clone, Copy, PartialEq, Default, serde::Serialize, serde::Deserialize)]
pub struct DropoutPolicy {
    rate: f64,
}

impl DropoutPolicy {
    pub fn new(rate: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::invalid(format!(
                "dropout rate {rate} outside [0, 1)"
            )));
        }
        Ok(DropoutPolicy { rate })
    }

    pub fn none() -> Self {
        DropoutPolicy { rate: 0.0 }
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    pub fn is_active(&self) -> bool {
        self.rate > 0.0
    }
}

fn check_symmetric(a: &DMatrix<f64>, what: &str) -> Result<()> {
    if !a.is_square() {
        return Err(Error::invalid(format!("{what} is not square")));
    }
    let scale = a.amax().max(f64::MIN_POSITIVE);
    let asym = (a - a.transpose()).amax();
    if asym > 1e-10 * scale {
        return Err(Error::invalid(format!(
            "{what} is not symmetric (asymmetry {asym:.3e})"
        )));
    }
    Ok(())
}

/// Symmetric positive semi-definite square root via eigendecomposition.
///
/// Eigenvalues in `[-1e-10‖A‖, 0)` are treated as round-off and clamped; more
/// negative ones are rejected. Positive eigenvalues below `dε‖A‖` are also
/// round-off and map to zero, so projections are fixed points.
pub fn sym_sqrt(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_symmetric(a, "matrix")?;
    let mut sym = a.clone();
    crate::model::symmetrise(&mut sym);
    let eig = SymmetricEigen::new(sym);
    let norm = eig.eigenvalues.amax();
    let min = eig.eigenvalues.min();
    if min < -1e-10 * norm {
        return Err(Error::invalid(format!(
            "matrix is not positive semi-definite (eigenvalue {min:.3e})"
        )));
    }
    let floor = a.nrows() as f64 * f64::EPSILON * norm;
    let roots = eig
        .eigenvalues
        .map(|l| if l > floor { l.sqrt() } else { 0.0 });
    let mut scaled = eig.eigenvectors.clone();
    for (mut col, r) in scaled.column_iter_mut().zip(roots.iter()) {
        col *= *r;
    }
    let mut s = scaled * eig.eigenvectors.transpose();
    crate::model::symmetrise(&mut s);
    Ok(s)
}

/// Largest absolute eigenvalue of a symmetric matrix.
pub fn spectral_norm(a: &DMatrix<f64>) -> Result<f64> {
    check_symmetric(a, "matrix")?;
    if a.is_empty() {
        return Ok(0.0);
    }
    let mut sym = a.clone();
    crate::model::symmetrise(&mut sym);
    Ok(SymmetricEigen::new(sym).eigenvalues.amax())
}

/// Normalised weights `w_i ∝ exp(-scale · Ψ_i)`.
pub fn importance_weights(potentials: &DVector<f64>, scale: f64) -> Result<DVector<f64>> {
    if potentials.is_empty() {
        return Err(Error::invalid("no potential values"));
    }
    if let Some(bad) = potentials.iter().find(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("potential value {bad}")));
    }
    if !(scale >= 0.0 && scale.is_finite()) {
        return Err(Error::invalid(format!(
            "weight scale {scale} must be non-negative"
        )));
    }
    let logits = potentials.map(|p| -scale * p);
    let max = logits.max();
    let mut w = logits.map(|l| (l - max).exp());
    let total = w.sum();
    w /= total;
    Ok(w)
}
