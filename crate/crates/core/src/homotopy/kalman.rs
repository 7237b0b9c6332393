//! Moment-based flows: the second-order filter and the ensemble Kalman–Bucy
//! filter family.

use nalgebra::{DMatrix, DVector, LU};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::ensemble::Ensemble;
use crate::error::{Error, Result};
use crate::model::{sigmoid, DataTerm, FeatureFunction, LogisticTerm};

fn check_cov(e: &Ensemble, cov: &DMatrix<f64>) -> Result<()> {
    if cov.nrows() != e.dim() || cov.ncols() != e.dim() {
        return Err(Error::dims("ensemble covariance", e.dim(), cov.nrows()));
    }
    Ok(())
}

fn check_term<T: DataTerm>(e: &Ensemble, term: &T) -> Result<()> {
    if term.dim() != e.dim() {
        return Err(Error::dims("data term", e.dim(), term.dim()));
    }
    Ok(())
}

fn finite(e: DMatrix<f64>) -> Result<Ensemble> {
    if e.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("particle state after update".into()));
    }
    Ensemble::new(e)
}

/// Forward Euler step of the mean/deviation equations
/// `ṁ = -Σ̂ π̂[∇Ψ]`, `Θ̇ = -½ Σ̂ π̂[D²Ψ] Θ`.
pub fn second_order_step<T: DataTerm>(
    e: &Ensemble,
    term: &T,
    cov: &DMatrix<f64>,
    dt: f64,
) -> Result<Ensemble> {
    check_term(e, term)?;
    check_cov(e, cov)?;
    let x = e.particles();
    let mean_grad = term.gradients(x).column_mean();
    let hess = term.mean_hessian(x);
    let mean = e.mean() - cov * mean_grad * dt;
    let dev = e.deviations();
    let dev = &dev - (cov * hess * &dev) * (0.5 * dt);
    let particles = Ensemble::from_mean_deviations(&mean, &dev)?;
    finite(particles.into_inner())
}

/// `[(2-α)∇Ψ(θ_i) + α∇Ψ(m̂)] / 2` for every particle.
fn kbf_innovation<T: DataTerm>(e: &Ensemble, term: &T, alpha: f64) -> DMatrix<f64> {
    let mut g = term.gradients(e.particles());
    let gm = term.gradient(&e.mean());
    g *= 0.5 * (2.0 - alpha);
    for mut col in g.column_iter_mut() {
        col.axpy(0.5 * alpha, &gm, 1.0);
    }
    g
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(1.0..2.0).contains(&alpha) {
        return Err(Error::invalid(format!("inflation {alpha} outside [1, 2)")));
    }
    Ok(())
}

/// Time derivative of every particle under the EnKBF,
/// `-½ Σ̂ [(2-α)∇Ψ(θ_i) + α∇Ψ(m̂)]`. With `α = 1` and the logistic term this
/// is `-½ Σ̂ Φ (y_i + y(m̂) - 2t)`.
pub fn enkbf_drift<T: DataTerm>(
    e: &Ensemble,
    term: &T,
    cov: &DMatrix<f64>,
    alpha: f64,
) -> Result<DMatrix<f64>> {
    check_term(e, term)?;
    check_cov(e, cov)?;
    check_alpha(alpha)?;
    Ok(-(cov * kbf_innovation(e, term, alpha)))
}

/// Forward Euler step of the EnKBF.
pub fn enkbf_step<T: DataTerm>(
    e: &Ensemble,
    term: &T,
    cov: &DMatrix<f64>,
    dt: f64,
    alpha: f64,
) -> Result<Ensemble> {
    let drift = enkbf_drift(e, term, cov, alpha)?;
    finite(e.particles() + drift * dt)
}

/// Linearly implicit ("tamed") EnKBF step
/// `θ_i ← θ_i - Δτ (I + Δτ Σ̂ π̂[D²Ψ])⁻¹ Σ̂ [(2-α)∇Ψ(θ_i) + α∇Ψ(m̂)] / 2`.
///
/// For the logistic model this is the data-space form
/// `Σ̂Φ(I + ΔτR̂ΦᵀΣ̂Φ)⁻¹` rewritten by the push-through identity, so the
/// linear solve is `D × D` rather than `N × N`.
pub fn enkbf_step_tamed<T: DataTerm>(
    e: &Ensemble,
    term: &T,
    cov: &DMatrix<f64>,
    dt: f64,
    alpha: f64,
) -> Result<Ensemble> {
    check_term(e, term)?;
    check_cov(e, cov)?;
    check_alpha(alpha)?;
    let d = e.dim();
    let hess = term.mean_hessian(e.particles());
    let system = DMatrix::identity(d, d) + cov * hess * dt;
    let rhs = cov * kbf_innovation(e, term, alpha);
    let lu = LU::new(system);
    let update = lu
        .solve(&rhs)
        .ok_or_else(|| Error::Singular("tamed EnKBF system".into()))?;
    finite(e.particles() - update * dt)
}

/// The tamed step written exactly as in data space, solving the `N × N`
/// system `I + ΔτR̂ΦᵀΣ̂Φ`. Kept as a cross-check of [`enkbf_step_tamed`].
pub fn enkbf_step_tamed_data_space(
    e: &Ensemble,
    term: &LogisticTerm,
    cov: &DMatrix<f64>,
    dt: f64,
) -> Result<Ensemble> {
    check_term(e, term)?;
    check_cov(e, cov)?;
    let phi = term.data().features() * term.scale().sqrt();
    let t = term.data().labels();
    let n = phi.ncols();
    let x = e.particles();
    let y = term.outputs(x);
    let mut r_hat = DVector::zeros(n);
    for col in y.column_iter() {
        r_hat.zip_apply(&col, |acc, y| *acc += y * (1.0 - y));
    }
    r_hat /= e.size() as f64;
    let cov_phi = cov * &phi;
    let mut system = phi.tr_mul(&cov_phi) * dt;
    for (mut row, r) in system.row_iter_mut().zip(r_hat.iter()) {
        row *= *r;
    }
    for i in 0..n {
        system[(i, i)] += 1.0;
    }
    let ym = term.data().features().tr_mul(&e.mean()).map(sigmoid);
    let mut innov = y;
    for mut col in innov.column_iter_mut() {
        col += &ym;
        col.axpy(-2.0, t, 1.0);
    }
    innov *= term.scale().sqrt();
    let solved = LU::new(system)
        .solve(&innov)
        .ok_or_else(|| Error::Singular("tamed EnKBF data-space system".into()))?;
    finite(x - cov_phi * solved * (0.5 * dt))
}

/// Euler–Maruyama step of the stochastic-innovation EnKBF
/// `dθ_i = -Σ̂Φ(y_i dτ + R̂ dW_i - t dτ)` with independent `N`-dimensional
/// Brownian increments.
pub fn enkbf_step_stochastic<R: Rng + ?Sized>(
    e: &Ensemble,
    term: &LogisticTerm,
    cov: &DMatrix<f64>,
    dt: f64,
    rng: &mut R,
) -> Result<Ensemble> {
    check_term(e, term)?;
    check_cov(e, cov)?;
    if dt == 0.0 {
        return Ok(e.clone());
    }
    let x = e.particles();
    let n = term.num_data();
    let m = e.size();
    let y = term.outputs(x);
    let mut r_hat = DVector::zeros(n);
    for col in y.column_iter() {
        r_hat.zip_apply(&col, |acc, y| *acc += y * (1.0 - y));
    }
    r_hat /= m as f64;
    let sqrt_dt = dt.sqrt();
    let mut innov = y * dt;
    let t = term.data().labels();
    for mut col in innov.column_iter_mut() {
        for k in 0..n {
            let dw: f64 = rng.sample(StandardNormal);
            col[k] += r_hat[k] * dw * sqrt_dt - t[k] * dt;
        }
    }
    let phi = term.data().features();
    let update = cov * (phi * innov) * term.scale();
    finite(x - update)
}

/// `C = (1/(M-1)) Σ_i (θ_i - m̂) f(θ_i)ᵀ`, the ensemble cross-covariance of
/// parameters and activations (`D × N`).
pub fn gradient_free_correlation(e: &Ensemble, f: &FeatureFunction) -> Result<DMatrix<f64>> {
    if f.dim() != e.dim() {
        return Err(Error::dims("feature function", e.dim(), f.dim()));
    }
    if e.size() < 2 {
        return Err(Error::DegenerateEnsemble(
            "need at least two particles".into(),
        ));
    }
    let values = f.values_all(e.particles());
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("activation value".into()));
    }
    Ok(e.deviations() * values.transpose() / (e.size() - 1) as f64)
}

/// Derivative-free EnKBF step, with `C` in place of `Σ̂Φ`:
/// `θ_i ← θ_i - (Δτ/2) C (σ(f(θ_i)) + σ(f(m̂)) - 2t)`.
pub fn enkbf_step_gradient_free(
    e: &Ensemble,
    f: &FeatureFunction,
    labels: &DVector<f64>,
    dt: f64,
) -> Result<Ensemble> {
    if labels.len() != f.num_data() {
        return Err(Error::dims("labels", f.num_data(), labels.len()));
    }
    let c = gradient_free_correlation(e, f)?;
    let mut y = f.values_all(e.particles());
    y.apply(|a| *a = sigmoid(*a));
    let ym = f.values(&e.mean()).map(sigmoid);
    for mut col in y.column_iter_mut() {
        col += &ym;
        col.axpy(-2.0, labels, 1.0);
    }
    finite(e.particles() - c * y * (0.5 * dt))
}
