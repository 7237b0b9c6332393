use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::model::{sigmoid, Dataset, GaussianPrior, LinearGaussianTerm};

/// Two-class Gaussian mixture with identity class covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianClasses {
    pub mean_1: DVector<f64>,
    pub mean_2: DVector<f64>,
    /// `π(C₁)`.
    pub prior_1: f64,
}

impl GaussianClasses {
    /// `μ₁ = (-1,-1)`, `μ₂ = (2,2)`, equal class probabilities.
    pub fn example2() -> Self {
        GaussianClasses {
            mean_1: DVector::from_vec(vec![-1.0, -1.0]),
            mean_2: DVector::from_vec(vec![2.0, 2.0]),
            prior_1: 0.5,
        }
    }

    /// Parameter of the exact class posterior `π(C₁|x) = σ(θᵀ(x, 1))`.
    pub fn optimal_parameter(&self) -> DVector<f64> {
        let j = self.mean_1.len();
        let mut theta = DVector::zeros(j + 1);
        theta
            .rows_mut(0, j)
            .copy_from(&(&self.mean_1 - &self.mean_2));
        theta[j] = -0.5 * self.mean_1.norm_squared()
            + 0.5 * self.mean_2.norm_squared()
            + (self.prior_1 / (1.0 - self.prior_1)).ln();
        theta
    }

    /// `n` labelled points; label 1 marks class `C₁`. Features are `(x, 1)`.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Dataset> {
        let j = self.mean_1.len();
        let mut features = DMatrix::zeros(j + 1, n);
        let mut labels = Vec::with_capacity(n);
        for col in 0..n {
            let first = rng.random::<f64>() < self.prior_1;
            let mean = if first { &self.mean_1 } else { &self.mean_2 };
            for k in 0..j {
                let z: f64 = rng.sample(StandardNormal);
                features[(k, col)] = mean[k] + z;
            }
            features[(j, col)] = 1.0;
            labels.push(u8::from(first));
        }
        Dataset::new(features, labels)
    }
}

/// Closed-form maximum likelihood estimates of the class model.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassEstimates {
    pub prior_1: f64,
    pub mean_1: DVector<f64>,
    pub mean_2: DVector<f64>,
    pub covariance: DMatrix<f64>,
}

/// Estimates from labelled data whose last feature is the constant 1.
pub fn class_mle(data: &Dataset) -> Result<ClassEstimates> {
    let j = data.dim() - 1;
    let n = data.len();
    let x = data.features().rows(0, j);
    let n1 = (0..n).filter(|&i| data.label(i) == 1).count();
    if n1 == 0 || n1 == n {
        return Err(Error::invalid("both classes must be present"));
    }
    let mut m1 = DVector::zeros(j);
    let mut m2 = DVector::zeros(j);
    for i in 0..n {
        if data.label(i) == 1 {
            m1 += x.column(i);
        } else {
            m2 += x.column(i);
        }
    }
    m1 /= n1 as f64;
    m2 /= (n - n1) as f64;
    let mut b = DMatrix::zeros(j, j);
    for i in 0..n {
        let d = if data.label(i) == 1 {
            x.column(i) - &m1
        } else {
            x.column(i) - &m2
        };
        b += &d * d.transpose();
    }
    b /= n as f64;
    Ok(ClassEstimates {
        prior_1: n1 as f64 / n as f64,
        mean_1: m1,
        mean_2: m2,
        covariance: b,
    })
}

/// Data, true parameter and the two priors of the two-class example.
#[derive(Debug, Clone)]
pub struct Example2 {
    pub data: Dataset,
    pub theta_true: DVector<f64>,
    /// `N(θ_true, I)`.
    pub informative: GaussianPrior,
    /// `N(0, 4I)`.
    pub weak: GaussianPrior,
}

pub const EXAMPLE2_POINTS: usize = 100;

pub fn gen_example2_data<R: Rng + ?Sized>(rng: &mut R) -> Result<Example2> {
    let classes = GaussianClasses::example2();
    let theta_true = classes.optimal_parameter();
    let data = classes.sample(EXAMPLE2_POINTS, rng)?;
    let informative = GaussianPrior::isotropic(theta_true.clone(), 1.0)?;
    let weak = GaussianPrior::isotropic(DVector::zeros(theta_true.len()), 4.0)?;
    Ok(Example2 {
        data,
        theta_true,
        informative,
        weak,
    })
}

/// Data, reference parameter and prior of the high-dimensional example.
#[derive(Debug, Clone)]
pub struct Example3 {
    pub data: Dataset,
    pub theta_ref: DVector<f64>,
    pub prior: GaussianPrior,
}

pub const EXAMPLE3_DIM: usize = 50;
pub const EXAMPLE3_POINTS: usize = 1000;

pub fn gen_example3_data<R: Rng + ?Sized>(rng: &mut R) -> Result<Example3> {
    gen_logistic_data(EXAMPLE3_DIM, EXAMPLE3_POINTS, rng)
}

/// `θ_ref ~ N(0, I_D)`, `x_n ~ N(0, I_D)`, `t_n ~ Bernoulli(σ(θ_refᵀx_n))`.
pub fn gen_logistic_data<R: Rng + ?Sized>(dim: usize, n: usize, rng: &mut R) -> Result<Example3> {
    let theta_ref = DVector::from_fn(dim, |_, _| rng.sample(StandardNormal));
    let features = DMatrix::from_fn(dim, n, |_, _| rng.sample(StandardNormal));
    let activations = features.tr_mul(&theta_ref);
    let labels = activations
        .iter()
        .map(|&a| u8::from(rng.random::<f64>() < sigmoid(a)))
        .collect();
    Ok(Example3 {
        data: Dataset::new(features, labels)?,
        theta_ref,
        prior: GaussianPrior::isotropic(DVector::zeros(dim), 1.0)?,
    })
}

/// Linear-Gaussian test problem with a known generating parameter.
#[derive(Debug, Clone)]
pub struct LinearGaussianExample {
    pub forward: DMatrix<f64>,
    pub data: DVector<f64>,
    pub noise: DMatrix<f64>,
    pub prior: GaussianPrior,
    pub theta_true: DVector<f64>,
}

impl LinearGaussianExample {
    pub fn term(&self) -> Result<LinearGaussianTerm> {
        LinearGaussianTerm::new(self.forward.clone(), self.data.clone(), self.noise.clone())
    }
}

pub const LINEAR_GAUSSIAN_DIM: usize = 5;
pub const LINEAR_GAUSSIAN_POINTS: usize = 10;
const LINEAR_GAUSSIAN_NOISE: f64 = 0.5;

/// `D = 5`, `N = 10` observations `t = Gθ + η` with `G` standard normal,
/// `η ~ N(0, ½I)` and prior `N(0, I)`.
pub fn gen_linear_gaussian_data<R: Rng + ?Sized>(rng: &mut R) -> Result<LinearGaussianExample> {
    let (d, n) = (LINEAR_GAUSSIAN_DIM, LINEAR_GAUSSIAN_POINTS);
    let forward = DMatrix::from_fn(n, d, |_, _| rng.sample(StandardNormal));
    let theta_true = DVector::from_fn(d, |_, _| rng.sample(StandardNormal));
    let eta = DVector::from_fn(n, |_, _| {
        LINEAR_GAUSSIAN_NOISE.sqrt() * rng.sample::<f64, _>(StandardNormal)
    });
    let data = &forward * &theta_true + eta;
    Ok(LinearGaussianExample {
        forward,
        data,
        noise: DMatrix::identity(n, n) * LINEAR_GAUSSIAN_NOISE,
        prior: GaussianPrior::isotropic(DVector::zeros(d), 1.0)?,
        theta_true,
    })
}

/// Least-squares fit of the polynomial features `(1, x, x²)` to a constant
/// level `t` over `x ∈ [0, 1]`:
/// `Ψ(θ) = ½ ∫₀¹ (θᵀφ_x - t)² dx`.
///
/// Each step of a flow sees a Monte-Carlo estimate of the integral with
/// fresh uniform nodes, the Gaussian analogue of the quadrature estimator of
/// the sigmoidal Cox likelihood.
#[derive(Debug, Clone)]
pub struct CoxGaussianExample {
    pub level: f64,
    pub prior: GaussianPrior,
}

pub const COX_GAUSSIAN_DIM: usize = 3;

pub fn gen_cox_gaussian_data() -> Result<CoxGaussianExample> {
    Ok(CoxGaussianExample {
        level: 1.0,
        prior: GaussianPrior::isotropic(DVector::zeros(COX_GAUSSIAN_DIM), 1.0)?,
    })
}

impl CoxGaussianExample {
    pub fn features(x: f64) -> DVector<f64> {
        DVector::from_vec(vec![1.0, x, x * x])
    }

    /// `∫₀¹ φφᵀ dx`, the 3 × 3 Hilbert matrix.
    pub fn gram() -> DMatrix<f64> {
        DMatrix::from_fn(COX_GAUSSIAN_DIM, COX_GAUSSIAN_DIM, |i, j| {
            1.0 / (i + j + 1) as f64
        })
    }

    /// `∫₀¹ φ dx`.
    pub fn moment() -> DVector<f64> {
        DVector::from_fn(COX_GAUSSIAN_DIM, |i, _| 1.0 / (i + 1) as f64)
    }

    /// Exact term `½|Lᵀθ - c|²` with `LLᵀ = ∫φφᵀ` and `Lc = t∫φ`; equal to
    /// `Ψ` up to an additive constant.
    pub fn exact_term(&self) -> Result<LinearGaussianTerm> {
        let chol = Cholesky::new(Self::gram())
            .ok_or_else(|| Error::Singular("feature Gram matrix".into()))?;
        let l = chol.l();
        let c = l
            .solve_lower_triangular(&(Self::moment() * self.level))
            .ok_or_else(|| Error::Singular("feature Gram factor".into()))?;
        let d = COX_GAUSSIAN_DIM;
        LinearGaussianTerm::new(l.transpose(), c, DMatrix::identity(d, d))
    }

    /// Estimate with `nodes` uniform nodes: rows `φ_{x̂ᵢ}ᵀ/√I`, data `t/√I`.
    pub fn sample_term<R: Rng + ?Sized>(
        &self,
        nodes: usize,
        rng: &mut R,
    ) -> Result<LinearGaussianTerm> {
        if nodes == 0 {
            return Err(Error::invalid("at least one quadrature node is required"));
        }
        let scale = 1.0 / (nodes as f64).sqrt();
        let mut forward = DMatrix::zeros(nodes, COX_GAUSSIAN_DIM);
        for i in 0..nodes {
            let phi = Self::features(rng.random::<f64>());
            forward.row_mut(i).copy_from(&(phi.transpose() * scale));
        }
        let data = DVector::from_element(nodes, self.level * scale);
        LinearGaussianTerm::new(forward, data, DMatrix::identity(nodes, nodes))
    }

    /// Posterior mean under the exact integral.
    pub fn posterior_mean(&self) -> Result<DVector<f64>> {
        let precision = self.prior.precision() + Self::gram();
        let rhs = self.prior.precision() * self.prior.mean() + Self::moment() * self.level;
        Cholesky::new(precision)
            .map(|c| c.solve(&rhs))
            .ok_or_else(|| Error::Singular("posterior precision".into()))
    }
}
