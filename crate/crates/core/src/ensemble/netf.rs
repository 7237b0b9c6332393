use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use super::Ensemble;
use crate::error::{Error, Result};

/// `M × M` matrix `S` acting on ensembles from the right, with unit column sums.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformMatrix(DMatrix<f64>);

impl TransformMatrix {
    pub fn new(s: DMatrix<f64>) -> Result<Self> {
        if !s.is_square() {
            return Err(Error::dims(
                "transform matrix columns",
                s.nrows(),
                s.ncols(),
            ));
        }
        if s.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("transform matrix entry".into()));
        }
        for (j, col) in s.column_iter().enumerate() {
            let sum = col.sum();
            if (sum - 1.0).abs() > 1e-10 {
                return Err(Error::invalid(format!(
                    "transform column {j} sums to {sum}"
                )));
            }
        }
        Ok(TransformMatrix(s))
    }

    pub fn identity(size: usize) -> Self {
        TransformMatrix(DMatrix::identity(size, size))
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn size(&self) -> usize {
        self.0.nrows()
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.0
    }
}

/// Spectral factorisation of the NETF transform
/// `S = w𝟙ᵀ + √M (diag(w) - wwᵀ)^{1/2}`.
///
/// The square root is kept as `V diag(√λ) Vᵀ` so that it can be applied to a
/// `D × M` ensemble in `O(D M r)` operations, `r` being the number of
/// non-zero eigenvalues.
#[derive(Debug, Clone)]
pub struct NetfFactor {
    weights: DVector<f64>,
    vectors: DMatrix<f64>,
    roots: DVector<f64>,
}

/// Factor the NETF transform for normalised weights `w`.
pub fn netf_factor(weights: &DVector<f64>) -> Result<NetfFactor> {
    check_simplex(weights)?;
    let w: Vec<f64> = weights.iter().map(|&v| v.max(0.0)).collect();
    let (values, vectors) = diag_minus_rank_one(&w, &w);
    // Round-off negatives (the null direction 𝟙) get a zero root.
    let roots = DVector::from_iterator(values.len(), values.iter().map(|v| v.max(0.0).sqrt()));
    Ok(NetfFactor {
        weights: weights.clone(),
        vectors,
        roots,
    })
}

/// The explicit NETF transform matrix.
pub fn netf_transform(weights: &DVector<f64>) -> Result<TransformMatrix> {
    netf_factor(weights)?.to_transform()
}

fn check_simplex(w: &DVector<f64>) -> Result<()> {
    if w.is_empty() {
        return Err(Error::invalid("empty weight vector"));
    }
    if let Some(bad) = w.iter().find(|v| !v.is_finite() || **v < -1e-10) {
        return Err(Error::invalid(format!("weight {bad} is not a probability")));
    }
    let total = w.sum();
    if (total - 1.0).abs() > 1e-10 {
        return Err(Error::invalid(format!("weights sum to {total}, not 1")));
    }
    Ok(())
}

/// Remove the component along `𝟙` from every column, or from every row when
/// `rows` is set.
fn centre(m: &mut DMatrix<f64>, rows: bool) {
    if rows {
        for mut row in m.row_iter_mut() {
            let mean = row.mean();
            row.add_scalar_mut(-mean);
        }
    } else {
        for mut col in m.column_iter_mut() {
            let mean = col.mean();
            col.add_scalar_mut(-mean);
        }
    }
}

impl NetfFactor {
    pub fn weights(&self) -> &DVector<f64> {
        &self.weights
    }

    pub fn size(&self) -> usize {
        self.weights.len()
    }

    /// `(diag(w) - wwᵀ)^{1/2}`. The exact square root annihilates `𝟙`; the
    /// result is projected accordingly so that round-off near the zero
    /// eigenvalue cannot leak into the column sums.
    pub fn sqrt_matrix(&self) -> DMatrix<f64> {
        let mut scaled = self.vectors.clone();
        for (mut col, r) in scaled.column_iter_mut().zip(self.roots.iter()) {
            col *= *r;
        }
        let mut s = scaled * self.vectors.transpose();
        crate::model::symmetrise(&mut s);
        centre(&mut s, false);
        centre(&mut s, true);
        s
    }

    pub fn to_transform(&self) -> Result<TransformMatrix> {
        let m = self.size();
        let mut s = self.sqrt_matrix() * (m as f64).sqrt();
        for (i, mut row) in s.row_iter_mut().enumerate() {
            row.add_scalar_mut(self.weights[i]);
        }
        TransformMatrix::new(s)
    }

    /// Transform an ensemble without forming the `M × M` matrix.
    pub fn apply(&self, e: &Ensemble) -> Result<Ensemble> {
        let m = self.size();
        if e.size() != m {
            return Err(Error::dims("NETF transform", m, e.size()));
        }
        let x = e.particles();
        let weighted_mean = x * &self.weights;
        let mut left = e.deviations() * &self.vectors;
        for (mut col, r) in left.column_iter_mut().zip(self.roots.iter()) {
            col *= *r * (m as f64).sqrt();
        }
        let mut spread = (&self.vectors * left.transpose()).transpose();
        centre(&mut spread, true);
        Ensemble::from_mean_deviations(&weighted_mean, &spread)
    }
}

/// Right-multiply the deviations by a Haar-distributed orthogonal matrix
/// `Ω` with `Ω𝟙 = 𝟙`, leaving mean and covariance unchanged.
///
/// `Ω` depends on the random stream only, so the map commutes with affine
/// transformations of the particles. Cost is `O(D M²)`.
pub fn random_rotation<R: Rng + ?Sized>(e: &Ensemble, rng: &mut R) -> Result<Ensemble> {
    let m = e.size();
    let mut z = e.deviations();
    if m < 2 {
        return Ok(e.clone());
    }
    // Householder map swapping e_M and 𝟙/√M.
    let mut u = DVector::from_element(m, -1.0 / (m as f64).sqrt());
    u[m - 1] += 1.0;
    let reflect = |z: &mut DMatrix<f64>, v: &DVector<f64>, start: usize| {
        let vv = v.norm_squared();
        if vv == 0.0 {
            return;
        }
        let mut block = z.columns_mut(start, v.len());
        let zv = &block * v;
        block.ger(-2.0 / vv, &zv, v, 1.0);
    };
    reflect(&mut z, &u, 0);
    // Haar rotation of the first M-1 coordinates as a product of reflections
    // built from fresh Gaussian vectors of decreasing length.
    let n = m - 1;
    for k in 0..n {
        let mut x = DVector::from_fn(n - k, |_, _| rng.sample::<f64, _>(StandardNormal));
        let sign = if x[0] >= 0.0 { 1.0 } else { -1.0 };
        x[0] += sign * x.norm();
        reflect(&mut z, &x, k);
        if sign > 0.0 {
            z.column_mut(k).neg_mut();
        }
    }
    reflect(&mut z, &u, 0);
    Ensemble::from_mean_deviations(&e.mean(), &z)
}

/// Eigendecomposition of `diag(d) - zzᵀ` in `O(n²)` via the secular equation.
///
/// Returns eigenvalues (unordered) and the matching orthonormal eigenvectors
/// as columns.
pub(crate) fn diag_minus_rank_one(d: &[f64], z: &[f64]) -> (Vec<f64>, DMatrix<f64>) {
    let n = d.len();
    debug_assert_eq!(z.len(), n);
    let rho: f64 = z.iter().map(|v| v * v).sum();
    if rho == 0.0 || n == 0 {
        return (d.to_vec(), DMatrix::identity(n, n));
    }
    let norm = rho.sqrt();
    // Work with diag(δ) + ρuuᵀ, δ = -d, whose spectrum is the negated one.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| d[b].total_cmp(&d[a]));
    let mut delta: Vec<f64> = order.iter().map(|&i| -d[i]).collect();
    let mut u: Vec<f64> = order.iter().map(|&i| z[i] / norm).collect();

    let dmax = delta.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let tol = 8.0 * f64::EPSILON * dmax.max(rho);

    // Eigenvectors are assembled in sorted-slot coordinates; the deflating
    // Givens rotations and the sort permutation are applied at the end.
    let mut values = Vec::with_capacity(n);
    let mut w = DMatrix::zeros(n, n);
    let mut found = 0;
    let mut rotations: Vec<(usize, usize, f64, f64)> = Vec::new();
    let mut active: Vec<usize> = Vec::with_capacity(n);

    for slot in 0..n {
        if rho * u[slot].abs() <= tol {
            values.push(-delta[slot]);
            w[(slot, found)] = 1.0;
            found += 1;
            continue;
        }
        if let Some(&prev) = active.last() {
            let t = u[prev].hypot(u[slot]);
            let c = u[slot] / t;
            let s = -u[prev] / t;
            if ((delta[slot] - delta[prev]) * c * s).abs() <= tol {
                rotations.push((prev, slot, c, s));
                let (dp, ds) = (delta[prev], delta[slot]);
                delta[prev] = c * c * dp + s * s * ds;
                delta[slot] = s * s * dp + c * c * ds;
                u[prev] = 0.0;
                u[slot] = t;
                active.pop();
                values.push(-delta[prev]);
                w[(prev, found)] = 1.0;
                found += 1;
            }
        }
        active.push(slot);
    }

    active.sort_by(|&a, &b| delta[a].total_cmp(&delta[b]));
    let dk: Vec<f64> = active.iter().map(|&s| delta[s]).collect();
    let uk: Vec<f64> = active.iter().map(|&s| u[s]).collect();
    let k = dk.len();
    if k > 0 {
        let r2: Vec<f64> = uk.iter().map(|v| rho * v * v).collect();
        let mut shift = Vec::with_capacity(k);
        let roots: Vec<(usize, f64)> = (0..k)
            .map(|j| secular_root(&dk, &r2, j, &mut shift))
            .collect();
        // Löwner recomputation of the update vector for orthogonal eigenvectors.
        let gap = |root: usize, j: usize| {
            let (o, tau) = roots[root];
            (dk[o] - dk[j]) + tau
        };
        let zhat: Vec<f64> = (0..k)
            .map(|j| {
                let mut p = gap(k - 1, j) / rho;
                for r in 0..j {
                    p *= gap(r, j) / (dk[r] - dk[j]);
                }
                for r in j..k - 1 {
                    p *= gap(r, j) / (dk[r + 1] - dk[j]);
                }
                p.abs().sqrt().copysign(uk[j])
            })
            .collect();
        let mut v = vec![0.0; k];
        for &(o, tau) in roots.iter() {
            for j in 0..k {
                v[j] = zhat[j] / ((dk[j] - dk[o]) - tau);
            }
            let vn = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            for (j, &slot) in active.iter().enumerate() {
                w[(slot, found)] = v[j] / vn;
            }
            values.push(-(dk[o] + tau));
            found += 1;
        }
    }
    // Column by column, so each pass stays in cache.
    let mut buf = vec![0.0; n];
    for mut col in w.column_iter_mut() {
        buf.copy_from_slice(col.as_slice());
        for &(prev, slot, c, s) in rotations.iter().rev() {
            let (a, b) = (buf[prev], buf[slot]);
            buf[prev] = c * a - s * b;
            buf[slot] = s * a + c * b;
        }
        for (slot, &i) in order.iter().enumerate() {
            col[i] = buf[slot];
        }
    }
    debug_assert_eq!(found, n);
    (values, w)
}

/// Root `j` of `1 + Σ r_i / (δ_i - λ)` for strictly increasing `δ` and
/// `r_i = ρu_i² > 0`, returned as `(o, τ)` with `λ = δ_o + τ`.
fn secular_root(delta: &[f64], r2: &[f64], j: usize, shift: &mut Vec<f64>) -> (usize, f64) {
    let k = delta.len();
    if k == 1 {
        return (0, r2[0]);
    }
    let last = j == k - 1;
    let (lp, rp) = if last { (k - 2, k - 1) } else { (j, j + 1) };
    // Poles relative to the origin; the split at `lp` separates the two
    // partial sums used by the rational model.
    let eval = |shift: &[f64], tau: f64| {
        let mut f = 1.0;
        let mut abs_sum = 0.0;
        let mut dpsi = 0.0;
        let mut dphi = 0.0;
        for (s, r) in shift[..=lp].iter().zip(&r2[..=lp]) {
            let inv = 1.0 / (s - tau);
            let t = r * inv;
            f += t;
            abs_sum += t.abs();
            dpsi += t * inv;
        }
        for (s, r) in shift[lp + 1..].iter().zip(&r2[lp + 1..]) {
            let inv = 1.0 / (s - tau);
            let t = r * inv;
            f += t;
            abs_sum += t.abs();
            dphi += t * inv;
        }
        (f, abs_sum, dpsi, dphi)
    };
    let set_origin = |shift: &mut Vec<f64>, o: usize| {
        shift.clear();
        shift.extend(delta.iter().map(|d| d - delta[o]));
    };

    let (origin, mut lo, mut hi) = if last {
        (k - 1, 0.0, r2.iter().sum::<f64>())
    } else {
        let h = 0.5 * (delta[rp] - delta[lp]);
        set_origin(shift, lp);
        let (fm, ..) = eval(shift, h);
        if fm >= 0.0 {
            (lp, 0.0, h)
        } else {
            (rp, -(delta[rp] - delta[lp]) + h, 0.0)
        }
    };
    set_origin(shift, origin);
    let mut tau = 0.5 * (lo + hi);
    for _ in 0..400 {
        let (f, abs_sum, dpsi, dphi) = eval(shift, tau);
        if f == 0.0 {
            break;
        }
        if f < 0.0 {
            lo = tau;
        } else {
            hi = tau;
        }
        if f.abs() <= 4.0 * f64::EPSILON * k as f64 * (1.0 + abs_sum)
            || hi - lo <= 2.0 * f64::EPSILON * lo.abs().max(hi.abs())
        {
            break;
        }
        let dl = shift[lp] - tau;
        let dr = shift[rp] - tau;
        let df = dpsi + dphi;
        let a = (dl + dr) * f - dl * dr * df;
        let b = dl * dr * f;
        let c = f - dl * dpsi - dr * dphi;
        let disc = (a * a - 4.0 * b * c).abs().sqrt();
        let mut eta = if c == 0.0 {
            b / a
        } else if a <= 0.0 {
            (a - disc) / (2.0 * c)
        } else {
            2.0 * b / (a + disc)
        };
        if f * eta >= 0.0 {
            eta = -f / df;
        }
        let next = tau + eta;
        tau = if next.is_finite() && next > lo && next < hi {
            next
        } else {
            0.5 * (lo + hi)
        };
    }
    (origin, tau)
}
