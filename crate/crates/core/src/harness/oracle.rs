use nalgebra::{Cholesky, DMatrix, DVector};

use crate::ensemble::spectral_norm;
use crate::error::{Error, Result};

/// Linear-Gaussian inverse problem `t = Gθ + η`, `η ~ N(0, Γ)`, with prior
/// `N(μ₀, Σ₀)`, for which the homotopy is solved by the Kalman–Bucy filter.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(try_from = "OracleFile", into = "OracleFile")]
pub struct LinearGaussianOracle {
    forward: DMatrix<f64>,
    noise: DMatrix<f64>,
    prior_mean: DVector<f64>,
    prior_cov: DMatrix<f64>,
    data: DVector<f64>,
    gradient_noise: Option<GradientNoise>,
}

/// Covariance `Ω` of the gradient noise in a stochastic EnKBF step of size
/// `Δτ`, used for the spread bound of the conditional mean.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientNoise {
    pub covariance: DMatrix<f64>,
    pub dt: f64,
}

fn is_spd(a: &DMatrix<f64>) -> bool {
    a.is_square()
        && (a - a.transpose()).amax() <= 1e-12 * a.amax().max(1.0)
        && Cholesky::new(a.clone()).is_some()
}

impl LinearGaussianOracle {
    pub fn new(
        forward: DMatrix<f64>,
        noise: DMatrix<f64>,
        prior_mean: DVector<f64>,
        prior_cov: DMatrix<f64>,
        data: DVector<f64>,
    ) -> Result<Self> {
        let (n, d) = forward.shape();
        if noise.shape() != (n, n) {
            return Err(Error::dims("noise covariance", n, noise.nrows()));
        }
        if prior_cov.shape() != (d, d) {
            return Err(Error::dims("prior covariance", d, prior_cov.nrows()));
        }
        if prior_mean.len() != d {
            return Err(Error::dims("prior mean", d, prior_mean.len()));
        }
        if data.len() != n {
            return Err(Error::dims("data", n, data.len()));
        }
        if !is_spd(&noise) {
            return Err(Error::invalid(
                "noise covariance must be symmetric positive definite",
            ));
        }
        if !is_spd(&prior_cov) {
            return Err(Error::invalid(
                "prior covariance must be symmetric positive definite",
            ));
        }
        Ok(LinearGaussianOracle {
            forward,
            noise,
            prior_mean,
            prior_cov,
            data,
            gradient_noise: None,
        })
    }

    pub fn with_gradient_noise(mut self, covariance: DMatrix<f64>, dt: f64) -> Result<Self> {
        let d = self.dim();
        if covariance.shape() != (d, d) {
            return Err(Error::dims(
                "gradient-noise covariance",
                d,
                covariance.nrows(),
            ));
        }
        if !(dt > 0.0) {
            return Err(Error::invalid(format!("step {dt} must be positive")));
        }
        self.gradient_noise = Some(GradientNoise { covariance, dt });
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.forward.ncols()
    }

    pub fn forward(&self) -> &DMatrix<f64> {
        &self.forward
    }

    pub fn noise(&self) -> &DMatrix<f64> {
        &self.noise
    }

    pub fn prior_mean(&self) -> &DVector<f64> {
        &self.prior_mean
    }

    pub fn prior_cov(&self) -> &DMatrix<f64> {
        &self.prior_cov
    }

    pub fn data(&self) -> &DVector<f64> {
        &self.data
    }

    pub fn gradient_noise(&self) -> Option<&GradientNoise> {
        self.gradient_noise.as_ref()
    }
}

/// Kalman–Bucy solution at pseudo-time `τ`.
#[derive(Debug, Clone, PartialEq)]
pub struct KalmanState {
    pub tau: f64,
    pub gain: DMatrix<f64>,
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
    /// `(Δτ/2)‖Σ_τ Ω Σ_τ‖₂` when gradient noise is configured.
    pub mean_spread_bound: Option<f64>,
}

/// `K_τ = τΣ₀Gᵀ(Γ + τGΣ₀Gᵀ)⁻¹`, `μ_τ = μ₀ - K_τ(Gμ₀ - t)`,
/// `Σ_τ = Σ₀ - K_τGΣ₀`.
pub fn kalman_oracle(oracle: &LinearGaussianOracle, tau: f64) -> Result<KalmanState> {
    if !(tau >= 0.0 && tau.is_finite()) {
        return Err(Error::invalid(format!(
            "pseudo-time {tau} must be non-negative"
        )));
    }
    let g = &oracle.forward;
    let s0g = &oracle.prior_cov * g.transpose();
    let s = &oracle.noise + g * &s0g * tau;
    let chol = Cholesky::new(s).ok_or_else(|| Error::Singular("innovation covariance".into()))?;
    // K = τ Σ₀Gᵀ S⁻¹, formed as (S⁻¹ G Σ₀)ᵀ τ using the symmetry of S and Σ₀.
    let gain = chol.solve(&s0g.transpose()).transpose() * tau;
    let mean = &oracle.prior_mean - &gain * (g * &oracle.prior_mean - &oracle.data);
    let mut covariance = &oracle.prior_cov - &gain * s0g.transpose();
    covariance = (&covariance + covariance.transpose()) * 0.5;
    let mean_spread_bound = match &oracle.gradient_noise {
        Some(gn) => {
            Some(0.5 * gn.dt * spectral_norm(&(&covariance * &gn.covariance * &covariance))?)
        }
        None => None,
    };
    Ok(KalmanState {
        tau,
        gain,
        mean,
        covariance,
        mean_spread_bound,
    })
}

/// On-disk form: row-major nested arrays.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct OracleFile {
    pub forward: Vec<Vec<f64>>,
    pub noise: Vec<Vec<f64>>,
    pub prior_mean: Vec<f64>,
    pub prior_cov: Vec<Vec<f64>>,
    pub data: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gradient_noise: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dt: Option<f64>,
}

pub fn matrix_from_rows(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.is_empty() || ncols == 0 {
        return Err(Error::invalid("matrix must be non-empty"));
    }
    if let Some(bad) = rows.iter().find(|r| r.len() != ncols) {
        return Err(Error::dims("matrix row", ncols, bad.len()));
    }
    Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

pub fn matrix_to_rows(a: &DMatrix<f64>) -> Vec<Vec<f64>> {
    a.row_iter().map(|r| r.iter().copied().collect()).collect()
}

impl TryFrom<OracleFile> for LinearGaussianOracle {
    type Error = Error;

    fn try_from(f: OracleFile) -> Result<Self> {
        let oracle = LinearGaussianOracle::new(
            matrix_from_rows(&f.forward)?,
            matrix_from_rows(&f.noise)?,
            DVector::from_vec(f.prior_mean),
            matrix_from_rows(&f.prior_cov)?,
            DVector::from_vec(f.data),
        )?;
        match (f.gradient_noise, f.dt) {
            (Some(omega), Some(dt)) => oracle.with_gradient_noise(matrix_from_rows(&omega)?, dt),
            (None, None) => Ok(oracle),
            _ => Err(Error::invalid(
                "gradient_noise and dt must be given together",
            )),
        }
    }
}

impl From<LinearGaussianOracle> for OracleFile {
    fn from(o: LinearGaussianOracle) -> Self {
        OracleFile {
            forward: matrix_to_rows(&o.forward),
            noise: matrix_to_rows(&o.noise),
            prior_mean: o.prior_mean.iter().copied().collect(),
            prior_cov: matrix_to_rows(&o.prior_cov),
            data: o.data.iter().copied().collect(),
            gradient_noise: o
                .gradient_noise
                .as_ref()
                .map(|g| matrix_to_rows(&g.covariance)),
            dt: o.gradient_noise.as_ref().map(|g| g.dt),
        }
    }
}
