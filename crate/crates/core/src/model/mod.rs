//! Logistic regression as a Bayesian inference problem.
//!
//! The central abstraction is [`DataTerm`], a negative log-likelihood
//! `Ψ_data(θ)` together with its gradient and Hessian. Every particle flow and
//! sampler in this crate is written against that trait, so the same
//! integrators run on the binary logistic model ([`LogisticTerm`]), the
//! linear-Gaussian surrogate ([`LinearGaussianTerm`]), the soft-max model
//! ([`MultiClassTerm`]) and affinely reparametrised versions of any of them
//! ([`AffineReparam`]).
//!
//! Log-likelihood evaluations of the logistic model go through a
//! [`ClipPolicy`]; gradients and Hessians always use the exact sigmoid.

mod cox;
mod feature;
mod multiclass;

pub use cox::{cox_nll_estimator, CoxModel, CoxTerm};
pub use feature::FeatureFunction;
pub use multiclass::{
    multiclass_grad, multiclass_hessian, multiclass_nll, MultiClassDataset, MultiClassTerm,
};

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::ensemble::Ensemble;
use crate::error::{Error, Result};

/// Logistic sigmoid `1 / (1 + e^{-a})`.
#[inline]
pub fn sigmoid(a: f64) -> f64 {
    1.0 / (1.0 + (-a).exp())
}

/// `ln(1 + e^a)` without overflow.
#[inline]
pub fn softplus(a: f64) -> f64 {
    a.max(0.0) + (-a.abs()).exp().ln_1p()
}

/// Affine squashing `scale·σ(a) + offset` applied wherever the logistic
/// output is fed to a logarithm.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ClipPolicy {
    scale: f64,
    offset: f64,
}

impl Default for ClipPolicy {
    fn default() -> Self {
        ClipPolicy {
            scale: 0.99,
            offset: 0.005,
        }
    }
}

impl ClipPolicy {
    pub fn new(scale: f64, offset: f64) -> Result<Self> {
        if !(scale > 0.0 && scale <= 1.0) {
            return Err(Error::invalid(format!("clip scale {scale} outside (0, 1]")));
        }
        if !(offset >= 0.0) {
            return Err(Error::invalid(format!("clip offset {offset} is negative")));
        }
        if scale + 2.0 * offset > 1.0 + 1e-15 {
            return Err(Error::invalid(format!(
                "clip scale {scale} and offset {offset} map outside (0, 1)"
            )));
        }
        Ok(ClipPolicy { scale, offset })
    }

    /// No clipping; log terms are then evaluated with a stable log-sigmoid.
    pub fn identity() -> Self {
        ClipPolicy {
            scale: 1.0,
            offset: 0.0,
        }
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn offset(&self) -> f64 {
        self.offset
    }

    pub fn is_identity(&self) -> bool {
        self.scale == 1.0 && self.offset == 0.0
    }

    /// Contribution `-[t ln y + (1-t) ln(1-y)]` of one datum with activation `a`.
    #[inline]
    pub(crate) fn cross_entropy(&self, a: f64, t: f64) -> f64 {
        if self.is_identity() {
            t * softplus(-a) + (1.0 - t) * softplus(a)
        } else {
            let y = self.scale * sigmoid(a) + self.offset;
            if t == 1.0 {
                -y.ln()
            } else if t == 0.0 {
                -(1.0 - y).ln()
            } else {
                -(t * y.ln() + (1.0 - t) * (1.0 - y).ln())
            }
        }
    }
}

/// Clipped sigmoid `clip.scale·σ(a) + clip.offset`.
pub fn sigmoid_clipped(a: f64, clip: &ClipPolicy) -> Result<f64> {
    if !a.is_finite() {
        return Err(Error::invalid(format!("activation {a} is not finite")));
    }
    Ok(clip.scale * sigmoid(a) + clip.offset)
}

/// Binary classification data: feature columns `φ_n` and labels `t_n ∈ {0,1}`.
#[derive(Debug, Clone)]
pub struct Dataset {
    features: DMatrix<f64>,
    labels: DVector<f64>,
}

impl Dataset {
    /// `features` is `D × N`, one column per data point.
    pub fn new(features: DMatrix<f64>, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != features.ncols() {
            return Err(Error::dims(
                "dataset labels",
                features.ncols(),
                labels.len(),
            ));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("features contain non-finite entries"));
        }
        if let Some(bad) = labels.iter().find(|&&t| t > 1) {
            return Err(Error::invalid(format!("label {bad} is not 0 or 1")));
        }
        let labels = DVector::from_iterator(labels.len(), labels.iter().map(|&t| t as f64));
        Ok(Dataset { features, labels })
    }

    /// Number of parameters `D`.
    pub fn dim(&self) -> usize {
        self.features.nrows()
    }

    /// Number of data points `N`.
    pub fn len(&self) -> usize {
        self.features.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn features(&self) -> &DMatrix<f64> {
        &self.features
    }

    /// Labels as reals, ready for arithmetic with `y(θ)`.
    pub fn labels(&self) -> &DVector<f64> {
        &self.labels
    }

    pub fn label(&self, n: usize) -> u8 {
        self.labels[n] as u8
    }

    /// Data restricted to the given columns.
    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(Error::invalid(format!("subset index {bad} out of range")));
        }
        let features = self.features.select_columns(indices);
        let labels = DVector::from_iterator(indices.len(), indices.iter().map(|&i| self.labels[i]));
        Ok(Dataset { features, labels })
    }

    fn check_theta(&self, theta: &DVector<f64>) -> Result<()> {
        if theta.len() != self.dim() {
            return Err(Error::dims("parameter vector", self.dim(), theta.len()));
        }
        Ok(())
    }
}

/// Cross-entropy `Ψ_data(θ)` with clipped outputs inside the logarithms.
pub fn nll_data(theta: &DVector<f64>, data: &Dataset, clip: &ClipPolicy) -> Result<f64> {
    data.check_theta(theta)?;
    let a = data.features.tr_mul(theta);
    Ok(a.iter()
        .zip(data.labels.iter())
        .map(|(&a, &t)| clip.cross_entropy(a, t))
        .sum())
}

/// Gradient `Φ (y(θ) - t)` using the exact sigmoid.
pub fn grad_nll(theta: &DVector<f64>, data: &Dataset) -> Result<DVector<f64>> {
    data.check_theta(theta)?;
    let mut innovation = data.features.tr_mul(theta);
    innovation.zip_apply(&data.labels, |a, t| *a = sigmoid(*a) - t);
    Ok(&data.features * innovation)
}

/// Diagonal weights `r_n = y_n (1 - y_n)` and the assembled Hessian `Φ R Φᵀ`.
#[derive(Debug, Clone)]
pub struct HessianFactors {
    pub weights: DVector<f64>,
    pub hessian: DMatrix<f64>,
}

pub fn hessian_factors(theta: &DVector<f64>, data: &Dataset) -> Result<HessianFactors> {
    data.check_theta(theta)?;
    let mut weights = data.features.tr_mul(theta);
    weights.apply(|a| {
        let y = sigmoid(*a);
        *a = y * (1.0 - y);
    });
    let hessian = weighted_gram(&data.features, &weights);
    Ok(HessianFactors { weights, hessian })
}

/// `Φ diag(r) Φᵀ`, symmetrised.
pub(crate) fn weighted_gram(phi: &DMatrix<f64>, r: &DVector<f64>) -> DMatrix<f64> {
    let mut scaled = phi.clone();
    for (mut col, &w) in scaled.column_iter_mut().zip(r.iter()) {
        col *= w;
    }
    let mut h = scaled * phi.transpose();
    symmetrise(&mut h);
    h
}

pub(crate) fn symmetrise(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Gaussian prior `N(m_prior, Σ_prior)`.
#[derive(Debug, Clone)]
pub struct GaussianPrior {
    mean: DVector<f64>,
    covariance: DMatrix<f64>,
    precision: DMatrix<f64>,
    factor: DMatrix<f64>,
}

impl GaussianPrior {
    pub fn new(mean: DVector<f64>, covariance: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        if covariance.nrows() != d || covariance.ncols() != d {
            return Err(Error::dims("prior covariance", d, covariance.nrows()));
        }
        let asym = (&covariance - covariance.transpose()).amax();
        if asym > 1e-12 * covariance.amax().max(1.0) {
            return Err(Error::invalid("prior covariance is not symmetric"));
        }
        let min_eig = SymmetricEigen::new(covariance.clone()).eigenvalues.min();
        if !(min_eig > 0.0) {
            return Err(Error::invalid(format!(
                "prior covariance is not positive definite (smallest eigenvalue {min_eig:.3e})"
            )));
        }
        let chol = Cholesky::new(covariance.clone())
            .ok_or_else(|| Error::invalid("prior covariance Cholesky factorisation failed"))?;
        let precision = chol.inverse();
        let factor = chol.l();
        Ok(GaussianPrior {
            mean,
            covariance,
            precision,
            factor,
        })
    }

    /// `N(m, s² I)`.
    pub fn isotropic(mean: DVector<f64>, variance: f64) -> Result<Self> {
        let d = mean.len();
        GaussianPrior::new(mean, DMatrix::identity(d, d) * variance)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.covariance
    }

    pub fn precision(&self) -> &DMatrix<f64> {
        &self.precision
    }

    /// `½ (θ - m)ᵀ Σ⁻¹ (θ - m)`.
    pub fn potential(&self, theta: &DVector<f64>) -> f64 {
        let r = theta - &self.mean;
        0.5 * r.dot(&(&self.precision * &r))
    }

    pub fn gradient(&self, theta: &DVector<f64>) -> DVector<f64> {
        &self.precision * (theta - &self.mean)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let xi = DVector::from_fn(self.dim(), |_, _| rng.sample::<f64, _>(StandardNormal));
        &self.mean + &self.factor * xi
    }

    /// `size` independent draws as an ensemble.
    pub fn sample_ensemble<R: Rng + ?Sized>(&self, size: usize, rng: &mut R) -> Result<Ensemble> {
        let d = self.dim();
        let xi = DMatrix::from_fn(d, size, |_, _| rng.sample::<f64, _>(StandardNormal));
        let mut particles = &self.factor * xi;
        for mut col in particles.column_iter_mut() {
            col += &self.mean;
        }
        Ensemble::new(particles)
    }

    /// The prior seen by `θ̄` under `θ = A θ̄ + b`.
    pub fn reparametrised(&self, a: &DMatrix<f64>, b: &DVector<f64>) -> Result<GaussianPrior> {
        let lu = a.clone().lu();
        let a_inv = lu
            .try_inverse()
            .ok_or_else(|| Error::Singular("reparametrisation matrix".into()))?;
        let mean = &a_inv * (&self.mean - b);
        let mut cov = &a_inv * &self.covariance * a_inv.transpose();
        symmetrise(&mut cov);
        GaussianPrior::new(mean, cov)
    }
}

/// A negative log-likelihood `Ψ_data` with first and second derivatives.
///
/// Batched methods take a `D × M` matrix of particles. Their defaults loop over
/// columns; implementations override them when a matrix product is cheaper.
/// Dimensions are validated where problems are assembled, so these methods
/// assume consistent shapes.
pub trait DataTerm: Send + Sync {
    fn dim(&self) -> usize;

    /// Number of data points backing the term (`N`).
    fn num_data(&self) -> usize;

    fn potential(&self, theta: &DVector<f64>) -> f64;

    /// The potential whose derivatives are [`DataTerm::gradient`] and
    /// [`DataTerm::hessian`]. Differs from [`DataTerm::potential`] only for
    /// terms that clip inside logarithms; optimisers use it for line searches.
    fn smooth_potential(&self, theta: &DVector<f64>) -> f64 {
        self.potential(theta)
    }

    fn gradient(&self, theta: &DVector<f64>) -> DVector<f64>;

    fn hessian(&self, theta: &DVector<f64>) -> DMatrix<f64>;

    fn potentials(&self, particles: &DMatrix<f64>) -> DVector<f64> {
        DVector::from_iterator(
            particles.ncols(),
            particles
                .column_iter()
                .map(|c| self.potential(&c.clone_owned())),
        )
    }

    fn gradients(&self, particles: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.dim(), particles.ncols());
        for (i, c) in particles.column_iter().enumerate() {
            out.set_column(i, &self.gradient(&c.clone_owned()));
        }
        out
    }

    /// Ensemble average of the Hessian, `π̂[D²Ψ_data]`.
    fn mean_hessian(&self, particles: &DMatrix<f64>) -> DMatrix<f64> {
        let d = self.dim();
        let m = particles.ncols().max(1) as f64;
        let mut acc = DMatrix::zeros(d, d);
        for c in particles.column_iter() {
            acc += self.hessian(&c.clone_owned());
        }
        acc / m
    }
}

/// Data terms that can be restricted to a subset of their data points, with
/// the contribution rescaled by `scale` (mini-batching).
pub trait Subsample: DataTerm + Sized {
    fn subsample(&self, indices: &[usize], scale: f64) -> Result<Self>;
}

/// Binary logistic regression likelihood, optionally scaled.
#[derive(Debug, Clone)]
pub struct LogisticTerm {
    data: Dataset,
    clip: ClipPolicy,
    scale: f64,
}

impl LogisticTerm {
    pub fn new(data: Dataset, clip: ClipPolicy) -> Self {
        LogisticTerm {
            data,
            clip,
            scale: 1.0,
        }
    }

    pub fn data(&self) -> &Dataset {
        &self.data
    }

    pub fn clip(&self) -> &ClipPolicy {
        &self.clip
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    /// `Φᵀ X`, the activations of every particle at every data point (`N × M`).
    pub fn activations(&self, particles: &DMatrix<f64>) -> DMatrix<f64> {
        self.data.features.tr_mul(particles)
    }

    /// Exact sigmoid outputs `y(θ^{(i)})` as an `N × M` matrix.
    pub fn outputs(&self, particles: &DMatrix<f64>) -> DMatrix<f64> {
        let mut y = self.activations(particles);
        y.apply(|a| *a = sigmoid(*a));
        y
    }
}

impl DataTerm for LogisticTerm {
    fn dim(&self) -> usize {
        self.data.dim()
    }

    fn num_data(&self) -> usize {
        self.data.len()
    }

    fn potential(&self, theta: &DVector<f64>) -> f64 {
        let a = self.data.features.tr_mul(theta);
        let s: f64 = a
            .iter()
            .zip(self.data.labels.iter())
            .map(|(&a, &t)| self.clip.cross_entropy(a, t))
            .sum();
        self.scale * s
    }

    fn smooth_potential(&self, theta: &DVector<f64>) -> f64 {
        let exact = ClipPolicy::identity();
        let a = self.data.features.tr_mul(theta);
        let s: f64 = a
            .iter()
            .zip(self.data.labels.iter())
            .map(|(&a, &t)| exact.cross_entropy(a, t))
            .sum();
        self.scale * s
    }

    fn gradient(&self, theta: &DVector<f64>) -> DVector<f64> {
        let mut innovation = self.data.features.tr_mul(theta);
        innovation.zip_apply(&self.data.labels, |a, t| *a = sigmoid(*a) - t);
        (&self.data.features * innovation) * self.scale
    }

    fn hessian(&self, theta: &DVector<f64>) -> DMatrix<f64> {
        let mut r = self.data.features.tr_mul(theta);
        r.apply(|a| {
            let y = sigmoid(*a);
            *a = self.scale * y * (1.0 - y);
        });
        weighted_gram(&self.data.features, &r)
    }

    fn potentials(&self, particles: &DMatrix<f64>) -> DVector<f64> {
        let a = self.activations(particles);
        let t = &self.data.labels;
        DVector::from_iterator(
            particles.ncols(),
            a.column_iter().map(|col| {
                let s: f64 = col
                    .iter()
                    .zip(t.iter())
                    .map(|(&a, &t)| self.clip.cross_entropy(a, t))
                    .sum();
                self.scale * s
            }),
        )
    }

    fn gradients(&self, particles: &DMatrix<f64>) -> DMatrix<f64> {
        let mut innov = self.activations(particles);
        let t = &self.data.labels;
        for mut col in innov.column_iter_mut() {
            col.zip_apply(t, |a, t| *a = sigmoid(*a) - t);
        }
        let mut g = &self.data.features * innov;
        if self.scale != 1.0 {
            g *= self.scale;
        }
        g
    }

    fn mean_hessian(&self, particles: &DMatrix<f64>) -> DMatrix<f64> {
        let a = self.activations(particles);
        let m = particles.ncols() as f64;
        let mut r = DVector::zeros(self.data.len());
        for col in a.column_iter() {
            r.zip_apply(&col, |acc, a| {
                let y = sigmoid(a);
                *acc += y * (1.0 - y);
            });
        }
        r *= self.scale / m;
        weighted_gram(&self.data.features, &r)
    }
}

impl Subsample for LogisticTerm {
    fn subsample(&self, indices: &[usize], scale: f64) -> Result<Self> {
        Ok(LogisticTerm {
            data: self.data.subset(indices)?,
            clip: self.clip,
            scale: self.scale * scale,
        })
    }
}

/// Quadratic loss `½ (Gθ - t)ᵀ Γ⁻¹ (Gθ - t)` of a linear forward map.
#[derive(Debug, Clone)]
pub struct LinearGaussianTerm {
    forward: DMatrix<f64>,
    data: DVector<f64>,
    noise: DMatrix<f64>,
    noise_precision: DMatrix<f64>,
    scale: f64,
}

impl LinearGaussianTerm {
    /// `forward` is `N × D`, `data` has length `N`, `noise` is the `N × N`
    /// SPD covariance `Γ`.
    pub fn new(forward: DMatrix<f64>, data: DVector<f64>, noise: DMatrix<f64>) -> Result<Self> {
        let n = forward.nrows();
        if data.len() != n {
            return Err(Error::dims("linear-Gaussian data", n, data.len()));
        }
        if noise.nrows() != n || noise.ncols() != n {
            return Err(Error::dims(
                "linear-Gaussian noise covariance",
                n,
                noise.nrows(),
            ));
        }
        if forward.iter().chain(data.iter()).any(|v| !v.is_finite()) {
            return Err(Error::invalid(
                "linear-Gaussian inputs contain non-finite entries",
            ));
        }
        let noise_precision = Cholesky::new(noise.clone())
            .ok_or_else(|| Error::invalid("noise covariance is not positive definite"))?
            .inverse();
        Ok(LinearGaussianTerm {
            forward,
            data,
            noise,
            noise_precision,
            scale: 1.0,
        })
    }

    pub fn forward(&self) -> &DMatrix<f64> {
        &self.forward
    }

    pub fn data(&self) -> &DVector<f64> {
        &self.data
    }

    pub fn noise(&self) -> &DMatrix<f64> {
        &self.noise
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    /// Multiply the whole loss by `scale`.
    pub fn scaled(mut self, scale: f64) -> Self {
        self.scale *= scale;
        self
    }

    fn residuals(&self, particles: &DMatrix<f64>) -> DMatrix<f64> {
        let mut r = &self.forward * particles;
        for mut col in r.column_iter_mut() {
            col -= &self.data;
        }
        r
    }
}

impl DataTerm for LinearGaussianTerm {
    fn dim(&self) -> usize {
        self.forward.ncols()
    }

    fn num_data(&self) -> usize {
        self.forward.nrows()
    }

    fn potential(&self, theta: &DVector<f64>) -> f64 {
        let r = &self.forward * theta - &self.data;
        0.5 * self.scale * r.dot(&(&self.noise_precision * &r))
    }

    fn gradient(&self, theta: &DVector<f64>) -> DVector<f64> {
        let r = &self.forward * theta - &self.data;
        self.forward.tr_mul(&(&self.noise_precision * r)) * self.scale
    }

    fn hessian(&self, _theta: &DVector<f64>) -> DMatrix<f64> {
        let mut h = self
            .forward
            .tr_mul(&(&self.noise_precision * &self.forward))
            * self.scale;
        symmetrise(&mut h);
        h
    }

    fn potentials(&self, particles: &DMatrix<f64>) -> DVector<f64> {
        let r = self.residuals(particles);
        let w = &self.noise_precision * &r;
        DVector::from_iterator(
            particles.ncols(),
            r.column_iter()
                .zip(w.column_iter())
                .map(|(r, w)| 0.5 * self.scale * r.dot(&w)),
        )
    }

    fn gradients(&self, particles: &DMatrix<f64>) -> DMatrix<f64> {
        let r = self.residuals(particles);
        self.forward.tr_mul(&(&self.noise_precision * r)) * self.scale
    }

    fn mean_hessian(&self, _particles: &DMatrix<f64>) -> DMatrix<f64> {
        self.hessian(&DVector::zeros(self.dim()))
    }
}

impl Subsample for LinearGaussianTerm {
    fn subsample(&self, indices: &[usize], scale: f64) -> Result<Self> {
        let n = self.num_data();
        for i in 0..n {
            for j in 0..n {
                if i != j && self.noise[(i, j)] != 0.0 {
                    return Err(Error::invalid(
                        "mini-batching a linear-Gaussian term requires diagonal noise",
                    ));
                }
            }
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(Error::invalid(format!("subset index {bad} out of range")));
        }
        let forward = self.forward.select_rows(indices);
        let data = DVector::from_iterator(indices.len(), indices.iter().map(|&i| self.data[i]));
        let noise = DMatrix::from_diagonal(&DVector::from_iterator(
            indices.len(),
            indices.iter().map(|&i| self.noise[(i, i)]),
        ));
        Ok(LinearGaussianTerm::new(forward, data, noise)?.scaled(self.scale * scale))
    }
}

/// The data term seen by `θ̄` under the reparametrisation `θ = A θ̄ + b`.
#[derive(Debug, Clone)]
pub struct AffineReparam<T> {
    inner: T,
    a: DMatrix<f64>,
    b: DVector<f64>,
}

impl<T: DataTerm> AffineReparam<T> {
    pub fn new(inner: T, a: DMatrix<f64>, b: DVector<f64>) -> Result<Self> {
        let d = inner.dim();
        if a.nrows() != d || a.ncols() != d {
            return Err(Error::dims("reparametrisation matrix", d, a.nrows()));
        }
        if b.len() != d {
            return Err(Error::dims("reparametrisation offset", d, b.len()));
        }
        Ok(AffineReparam { inner, a, b })
    }

    pub fn inner(&self) -> &T {
        &self.inner
    }

    fn forward(&self, theta_bar: &DVector<f64>) -> DVector<f64> {
        &self.a * theta_bar + &self.b
    }

    fn forward_all(&self, particles: &DMatrix<f64>) -> DMatrix<f64> {
        let mut x = &self.a * particles;
        for mut col in x.column_iter_mut() {
            col += &self.b;
        }
        x
    }
}

impl<T: DataTerm> DataTerm for AffineReparam<T> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn num_data(&self) -> usize {
        self.inner.num_data()
    }

    fn potential(&self, theta: &DVector<f64>) -> f64 {
        self.inner.potential(&self.forward(theta))
    }

    fn smooth_potential(&self, theta: &DVector<f64>) -> f64 {
        self.inner.smooth_potential(&self.forward(theta))
    }

    fn gradient(&self, theta: &DVector<f64>) -> DVector<f64> {
        self.a.tr_mul(&self.inner.gradient(&self.forward(theta)))
    }

    fn hessian(&self, theta: &DVector<f64>) -> DMatrix<f64> {
        self.a.tr_mul(&self.inner.hessian(&self.forward(theta))) * &self.a
    }

    fn potentials(&self, particles: &DMatrix<f64>) -> DVector<f64> {
        self.inner.potentials(&self.forward_all(particles))
    }

    fn gradients(&self, particles: &DMatrix<f64>) -> DMatrix<f64> {
        self.a
            .tr_mul(&self.inner.gradients(&self.forward_all(particles)))
    }

    fn mean_hessian(&self, particles: &DMatrix<f64>) -> DMatrix<f64> {
        self.a
            .tr_mul(&self.inner.mean_hessian(&self.forward_all(particles)))
            * &self.a
    }
}

impl<T: Subsample> Subsample for AffineReparam<T> {
    fn subsample(&self, indices: &[usize], scale: f64) -> Result<Self> {
        Ok(AffineReparam {
            inner: self.inner.subsample(indices, scale)?,
            a: self.a.clone(),
            b: self.b.clone(),
        })
    }
}

/// A data term paired with its Gaussian prior.
#[derive(Debug, Clone)]
pub struct Problem<T> {
    pub term: T,
    pub prior: GaussianPrior,
}

impl<T: DataTerm> Problem<T> {
    pub fn new(term: T, prior: GaussianPrior) -> Result<Self> {
        if term.dim() != prior.dim() {
            return Err(Error::dims("prior dimension", term.dim(), prior.dim()));
        }
        Ok(Problem { term, prior })
    }

    /// `Ψ_post = Ψ_data + Ψ_prior`.
    pub fn potential(&self, theta: &DVector<f64>) -> f64 {
        self.term.potential(theta) + self.prior.potential(theta)
    }

    /// `Ψ_post` with the data term's [`DataTerm::smooth_potential`].
    pub fn smooth_potential(&self, theta: &DVector<f64>) -> f64 {
        self.term.smooth_potential(theta) + self.prior.potential(theta)
    }

    pub fn gradient(&self, theta: &DVector<f64>) -> DVector<f64> {
        self.term.gradient(theta) + self.prior.gradient(theta)
    }

    pub fn hessian(&self, theta: &DVector<f64>) -> DMatrix<f64> {
        self.term.hessian(theta) + self.prior.precision()
    }

    /// `∇Ψ_post` at every particle.
    pub fn gradients(&self, particles: &DMatrix<f64>) -> DMatrix<f64> {
        let mut g = self.term.gradients(particles);
        let mut centred = particles.clone();
        for mut col in centred.column_iter_mut() {
            col -= self.prior.mean();
        }
        g += self.prior.precision() * centred;
        g
    }
}

/// `Ψ_post(θ)` for the logistic model.
pub fn nll_post(
    theta: &DVector<f64>,
    data: &Dataset,
    prior: &GaussianPrior,
    clip: &ClipPolicy,
) -> Result<f64> {
    check_prior(data, prior)?;
    Ok(nll_data(theta, data, clip)? + prior.potential(theta))
}

/// `∇Ψ_post(θ)` for the logistic model (exact sigmoid).
pub fn grad_post(
    theta: &DVector<f64>,
    data: &Dataset,
    prior: &GaussianPrior,
) -> Result<DVector<f64>> {
    check_prior(data, prior)?;
    Ok(grad_nll(theta, data)? + prior.gradient(theta))
}

fn check_prior(data: &Dataset, prior: &GaussianPrior) -> Result<()> {
    if prior.dim() != data.dim() {
        return Err(Error::dims("prior dimension", data.dim(), prior.dim()));
    }
    Ok(())
}

/// MAP point and Laplace covariance `(D²Ψ_post(θ_MAP))⁻¹`.
#[derive(Debug, Clone)]
pub struct Laplace {
    pub mode: DVector<f64>,
    pub covariance: DMatrix<f64>,
    pub iterations: usize,
    pub gradient_norm: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct NewtonOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        NewtonOptions {
            tol: 1e-10,
            max_iter: 100,
        }
    }
}

/// Newton's method on `Ψ_post` with step halving whenever neither the
/// potential nor the gradient norm improves.
pub fn map_laplace<T: DataTerm>(problem: &Problem<T>, opts: NewtonOptions) -> Result<Laplace> {
    let mut theta = problem.prior.mean().clone();
    let mut value = problem.smooth_potential(&theta);
    let mut grad = problem.gradient(&theta);
    let mut iterations = 0;
    while grad.norm() >= opts.tol {
        if iterations == opts.max_iter {
            return Err(Error::NonConvergence {
                what: "Newton MAP iteration",
                iterations,
                residual: grad.norm(),
            });
        }
        iterations += 1;
        let hess = problem.hessian(&theta);
        let step = Cholesky::new(hess)
            .ok_or_else(|| Error::Singular("posterior Hessian is not positive definite".into()))?
            .solve(&grad);
        let mut alpha = 1.0;
        let mut candidate = &theta - &step * alpha;
        let mut cand_value = problem.smooth_potential(&candidate);
        let mut cand_grad = problem.gradient(&candidate);
        let mut halvings = 0;
        // Near the mode the potential stops resolving progress; a halved
        // gradient norm is accepted instead.
        while !(cand_value <= value || cand_grad.norm() < 0.5 * grad.norm()) && halvings < 60 {
            alpha *= 0.5;
            halvings += 1;
            candidate = &theta - &step * alpha;
            cand_value = problem.smooth_potential(&candidate);
            cand_grad = problem.gradient(&candidate);
        }
        if halvings == 60 && cand_grad.norm() >= grad.norm() {
            // No descent possible at floating-point resolution.
            break;
        }
        theta = candidate;
        value = cand_value;
        grad = cand_grad;
    }
    if grad.norm() >= opts.tol.max(1e-8) {
        return Err(Error::NonConvergence {
            what: "Newton MAP iteration",
            iterations,
            residual: grad.norm(),
        });
    }
    let hess = problem.hessian(&theta);
    let mut covariance = Cholesky::new(hess)
        .ok_or_else(|| Error::Singular("posterior Hessian is not positive definite".into()))?
        .inverse();
    symmetrise(&mut covariance);
    Ok(Laplace {
        mode: theta,
        covariance,
        iterations,
        gradient_norm: grad.norm(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_dataset(d: usize, n: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let features = DMatrix::from_fn(d, n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let labels = (0..n).map(|_| rng.random_range(0..2u8)).collect();
        Dataset::new(features, labels).unwrap()
    }

    fn central_difference(f: impl Fn(&DVector<f64>) -> f64, x: &DVector<f64>) -> DVector<f64> {
        let h = 1e-5;
        DVector::from_fn(x.len(), |i, _| {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[i] += h;
            xm[i] -= h;
            (f(&xp) - f(&xm)) / (2.0 * h)
        })
    }

    #[test]
    fn clipped_sigmoid_limits() {
        let clip = ClipPolicy::default();
        assert_eq!(sigmoid_clipped(0.0, &clip).unwrap(), 0.5);
        assert!((sigmoid_clipped(800.0, &clip).unwrap() - 0.995).abs() < 1e-15);
        assert!((sigmoid_clipped(-800.0, &clip).unwrap() - 0.005).abs() < 1e-15);
        assert!(sigmoid_clipped(f64::NAN, &clip).is_err());
        assert!(sigmoid_clipped(f64::INFINITY, &clip).is_err());
    }

    #[test]
    fn clip_policy_validation() {
        assert!(ClipPolicy::new(0.99, 0.005).is_ok());
        assert!(ClipPolicy::new(0.0, 0.0).is_err());
        assert!(ClipPolicy::new(1.2, 0.0).is_err());
        assert!(ClipPolicy::new(0.9, 0.2).is_err());
        assert!(ClipPolicy::new(0.9, -0.1).is_err());
    }

    #[test]
    fn nll_at_origin_is_n_ln2() {
        let data = random_dataset(3, 17, 1);
        let v = nll_data(&DVector::zeros(3), &data, &ClipPolicy::default()).unwrap();
        assert!((v - 17.0 * std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn nll_saturated_point() {
        let data = Dataset::new(DMatrix::from_element(1, 1, 1.0), vec![1]).unwrap();
        let v = nll_data(
            &DVector::from_element(1, 1e3),
            &data,
            &ClipPolicy::default(),
        )
        .unwrap();
        assert!((v - (-(0.995f64).ln())).abs() < 1e-15);
        assert!((v - 5.0125e-3).abs() < 1e-6);
        let v = nll_data(&DVector::zeros(1), &data, &ClipPolicy::identity()).unwrap();
        assert!((v - std::f64::consts::LN_2).abs() < 1e-15);
        // Stable log-sigmoid keeps the unclipped loss finite far out.
        let v = nll_data(
            &DVector::from_element(1, -1e4),
            &data,
            &ClipPolicy::identity(),
        )
        .unwrap();
        assert!((v - 1e4).abs() < 1e-9);
    }

    #[test]
    fn nll_rejects_bad_dimensions() {
        let data = random_dataset(3, 4, 2);
        assert!(matches!(
            nll_data(&DVector::zeros(2), &data, &ClipPolicy::default()),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(grad_nll(&DVector::zeros(4), &data).is_err());
        assert!(Dataset::new(DMatrix::zeros(2, 3), vec![0, 1]).is_err());
        assert!(Dataset::new(DMatrix::zeros(2, 2), vec![0, 2]).is_err());
        let mut f = DMatrix::zeros(2, 2);
        f[(0, 0)] = f64::NAN;
        assert!(Dataset::new(f, vec![0, 1]).is_err());
    }

    #[test]
    fn gradient_single_point() {
        let data = Dataset::new(DMatrix::from_element(1, 1, 1.0), vec![0]).unwrap();
        let g = grad_nll(&DVector::zeros(1), &data).unwrap();
        assert_eq!(g[0], 0.5);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let data = random_dataset(3, 10, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let theta = DVector::from_fn(3, |_, _| rng.sample::<f64, _>(StandardNormal));
            let g = grad_nll(&theta, &data).unwrap();
            let fd = central_difference(
                |x| nll_data(x, &data, &ClipPolicy::identity()).unwrap(),
                &theta,
            );
            assert!((&g - &fd).norm() / g.norm() < 1e-6, "{g} vs {fd}");
        }
    }

    #[test]
    fn gradient_small_near_perfect_fit() {
        // Activations at logit(t ± δ) leave residuals of at most δ.
        let delta = 1e-3;
        let d = 2;
        let features = DMatrix::from_row_slice(d, 2, &[1.0, 0.0, 0.0, 1.0]);
        let data = Dataset::new(features, vec![1, 0]).unwrap();
        let logit = |p: f64| (p / (1.0 - p)).ln();
        let theta = DVector::from_vec(vec![logit(1.0 - delta), logit(delta)]);
        let g = grad_nll(&theta, &data).unwrap();
        assert!(g.norm() <= 2.0 * delta * 1.0 + 1e-12);
    }

    #[test]
    fn hessian_at_origin_and_psd() {
        let data = random_dataset(4, 30, 5);
        let h = hessian_factors(&DVector::zeros(4), &data).unwrap();
        let expected = data.features() * data.features().transpose() * 0.25;
        assert!((&h.hessian - expected).amax() < 1e-12);
        let one = Dataset::new(DMatrix::from_element(1, 1, 1.0), vec![1]).unwrap();
        let h1 = hessian_factors(&DVector::zeros(1), &one).unwrap();
        assert_eq!(h1.hessian[(0, 0)], 0.25);

        let theta = DVector::from_vec(vec![3.0, -2.0, 0.5, 1.0]);
        let h = hessian_factors(&theta, &data).unwrap();
        assert!(h.weights.iter().all(|&r| r > 0.0 && r <= 0.25));
        let eig = SymmetricEigen::new(h.hessian.clone()).eigenvalues;
        assert!(eig.min() >= -1e-12);
    }

    #[test]
    fn term_hessian_matches_gradient_differences() {
        let data = random_dataset(3, 12, 6);
        let term = LogisticTerm::new(data, ClipPolicy::default());
        let theta = DVector::from_vec(vec![0.3, -0.7, 1.1]);
        let h = term.hessian(&theta);
        let eps = 1e-6;
        for j in 0..3 {
            let mut tp = theta.clone();
            let mut tm = theta.clone();
            tp[j] += eps;
            tm[j] -= eps;
            let col = (term.gradient(&tp) - term.gradient(&tm)) / (2.0 * eps);
            for i in 0..3 {
                assert!((col[i] - h[(i, j)]).abs() < 1e-6 * h.amax());
            }
        }
    }

    #[test]
    fn batched_term_methods_agree_with_columnwise() {
        let data = random_dataset(3, 25, 7);
        let term = LogisticTerm::new(data, ClipPolicy::default());
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = DMatrix::from_fn(3, 6, |_, _| rng.sample::<f64, _>(StandardNormal));
        let p = term.potentials(&x);
        let g = term.gradients(&x);
        let mut h = DMatrix::zeros(3, 3);
        for i in 0..6 {
            let c = x.column(i).clone_owned();
            assert!((p[i] - term.potential(&c)).abs() < 1e-12);
            assert!((g.column(i) - term.gradient(&c)).amax() < 1e-12);
            h += term.hessian(&c) / 6.0;
        }
        assert!((term.mean_hessian(&x) - h).amax() < 1e-12);
    }

    #[test]
    fn posterior_without_data_is_prior() {
        let data = Dataset::new(DMatrix::zeros(2, 0), vec![]).unwrap();
        let prior = GaussianPrior::new(
            DVector::from_vec(vec![1.0, -2.0]),
            DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]),
        )
        .unwrap();
        let m = prior.mean().clone();
        assert_eq!(
            nll_post(&m, &data, &prior, &ClipPolicy::default()).unwrap(),
            0.0
        );
        assert_eq!(grad_post(&m, &data, &prior).unwrap().norm(), 0.0);
        let problem = Problem::new(
            LogisticTerm::new(data, ClipPolicy::identity()),
            prior.clone(),
        )
        .unwrap();
        let lap = map_laplace(&problem, NewtonOptions::default()).unwrap();
        assert!((&lap.mode - prior.mean()).norm() < 1e-12);
        assert!((&lap.covariance - prior.covariance()).amax() < 1e-12);
    }

    #[test]
    fn posterior_gradient_matches_finite_differences() {
        let data = random_dataset(3, 15, 9);
        let prior = GaussianPrior::new(
            DVector::from_vec(vec![0.5, 0.0, -1.0]),
            DMatrix::from_row_slice(3, 3, &[2.0, 0.2, 0.0, 0.2, 1.0, 0.1, 0.0, 0.1, 0.5]),
        )
        .unwrap();
        let theta = DVector::from_vec(vec![-0.4, 1.2, 0.3]);
        let g = grad_post(&theta, &data, &prior).unwrap();
        let fd = central_difference(
            |x| nll_post(x, &data, &prior, &ClipPolicy::identity()).unwrap(),
            &theta,
        );
        assert!((&g - &fd).norm() / g.norm() < 1e-6);
    }

    #[test]
    fn prior_rejects_indefinite_covariance() {
        let cov = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(GaussianPrior::new(DVector::zeros(2), cov).is_err());
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(GaussianPrior::new(DVector::zeros(2), asym).is_err());
    }

    #[test]
    fn laplace_on_quadratic_surrogate_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let g = DMatrix::from_fn(6, 3, |_, _| rng.sample::<f64, _>(StandardNormal));
        let t = DVector::from_fn(6, |_, _| rng.sample::<f64, _>(StandardNormal));
        let gamma = DMatrix::from_diagonal(&DVector::from_vec(vec![0.5, 1.0, 2.0, 0.7, 0.3, 1.5]));
        let term = LinearGaussianTerm::new(g.clone(), t.clone(), gamma.clone()).unwrap();
        let prior = GaussianPrior::new(
            DVector::from_vec(vec![0.1, -0.2, 0.3]),
            DMatrix::from_row_slice(3, 3, &[1.0, 0.2, 0.0, 0.2, 2.0, 0.0, 0.0, 0.0, 0.5]),
        )
        .unwrap();
        let problem = Problem::new(term, prior.clone()).unwrap();
        let lap = map_laplace(&problem, NewtonOptions::default()).unwrap();
        let gi = gamma.clone().try_inverse().unwrap();
        let post_prec = g.transpose() * &gi * &g + prior.precision();
        let post_cov = post_prec.clone().try_inverse().unwrap();
        let post_mean = prior.mean() - &post_cov * g.transpose() * &gi * (&g * prior.mean() - &t);
        assert!((&lap.mode - post_mean).amax() < 1e-10);
        assert!((&lap.covariance - post_cov).amax() < 1e-10);
    }

    #[test]
    fn laplace_is_affine_invariant() {
        let data = random_dataset(3, 40, 11);
        let prior = GaussianPrior::isotropic(DVector::zeros(3), 4.0).unwrap();
        let problem = Problem::new(
            LogisticTerm::new(data.clone(), ClipPolicy::identity()),
            prior.clone(),
        )
        .unwrap();
        let lap = map_laplace(&problem, NewtonOptions::default()).unwrap();
        assert!(problem.gradient(&lap.mode).norm() < 1e-8);

        let a = DMatrix::from_row_slice(3, 3, &[2.0, 0.5, 0.0, -0.3, 1.0, 0.2, 0.1, 0.0, 0.7]);
        let b = DVector::from_vec(vec![1.0, -0.5, 0.25]);
        let term = AffineReparam::new(
            LogisticTerm::new(data, ClipPolicy::identity()),
            a.clone(),
            b.clone(),
        )
        .unwrap();
        let bar = Problem::new(term, prior.reparametrised(&a, &b).unwrap()).unwrap();
        let lap_bar = map_laplace(&bar, NewtonOptions::default()).unwrap();
        let mapped = &a * &lap_bar.mode + &b;
        assert!((mapped - &lap.mode).amax() < 1e-6);
        let cov = &a * &lap_bar.covariance * a.transpose();
        assert!((cov - &lap.covariance).amax() < 1e-6);
    }

    #[test]
    fn subsample_scales_gradient() {
        let data = random_dataset(2, 6, 12);
        let term = LogisticTerm::new(data, ClipPolicy::default());
        let all: Vec<usize> = (0..6).collect();
        let same = term.subsample(&all, 1.0).unwrap();
        let theta = DVector::from_vec(vec![0.2, -0.1]);
        assert_eq!(same.gradient(&theta), term.gradient(&theta));
        let one = term.subsample(&[3], 6.0).unwrap();
        assert_eq!(one.scale(), 6.0);
    }

    #[test]
    fn linear_gaussian_subsample_requires_diagonal_noise() {
        let g = DMatrix::identity(2, 2);
        let t = DVector::zeros(2);
        let noise = DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.1, 1.0]);
        let term = LinearGaussianTerm::new(g, t, noise).unwrap();
        assert!(term.subsample(&[0], 2.0).is_err());
    }
}
