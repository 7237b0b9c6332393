//! Affine-invariant feedback particle filter with a diffusion-map gain.

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::ensemble::Ensemble;
use crate::error::{Error, Result};
use crate::model::DataTerm;

/// How the fixed-point equation `Ṽ = TṼ + εΔΨ` is solved.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FpfSolver {
    /// Plain fixed-point sweeps with the mean removed after each sweep.
    Richardson,
    /// Preconditioned conjugate gradients on the equivalent symmetric
    /// graph-Laplacian system.
    ConjugateGradient,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FpfOptions {
    /// Kernel bandwidth `ε`.
    pub epsilon: f64,
    /// Residual tolerance, relative to `1 + ‖εΔΨ‖_∞`.
    pub tol: f64,
    pub max_iter: usize,
    pub solver: FpfSolver,
}

impl Default for FpfOptions {
    fn default() -> Self {
        FpfOptions {
            epsilon: 0.1,
            tol: 1e-9,
            max_iter: 10_000,
            solver: FpfSolver::ConjugateGradient,
        }
    }
}

/// Diffusion-map discretisation on the current ensemble.
#[derive(Debug, Clone)]
pub struct DiffusionMap {
    kernel: DMatrix<f64>,
    degree: DVector<f64>,
    markov: DMatrix<f64>,
}

impl DiffusionMap {
    /// Symmetric normalised kernel `k_ε(θ_i, θ_j)`.
    pub fn kernel(&self) -> &DMatrix<f64> {
        &self.kernel
    }

    /// Row sums `n_ε(θ_i)` of the kernel.
    pub fn degree(&self) -> &DVector<f64> {
        &self.degree
    }

    /// Row-stochastic matrix `T_ij = k_ij / n_i`.
    pub fn markov(&self) -> &DMatrix<f64> {
        &self.markov
    }

    pub fn size(&self) -> usize {
        self.degree.len()
    }
}

/// Build `T` from the Gaussian kernel in the Mahalanobis metric of the
/// (slightly regularised) ensemble covariance.
pub fn fpf_markov_matrix(e: &Ensemble, epsilon: f64) -> Result<DiffusionMap> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::invalid(format!(
            "bandwidth {epsilon} must be positive"
        )));
    }
    let d = e.dim();
    let mut cov = e.covariance()?;
    let trace = cov.trace();
    if !(trace > 0.0) {
        return Err(Error::DegenerateEnsemble(
            "ensemble has collapsed to a point".into(),
        ));
    }
    for i in 0..d {
        cov[(i, i)] += 1e-10 * trace / d as f64;
    }
    let chol = Cholesky::new(cov)
        .ok_or_else(|| Error::DegenerateEnsemble("ensemble covariance is singular".into()))?;
    let white = chol
        .l()
        .solve_lower_triangular(&e.deviations())
        .ok_or_else(|| Error::DegenerateEnsemble("ensemble covariance is singular".into()))?;
    let m = e.size();
    let gram = white.tr_mul(&white);
    let sq = gram.diagonal();
    let mut g = DMatrix::identity(m, m);
    for j in 0..m {
        for i in 0..j {
            let dist = (sq[i] + sq[j] - 2.0 * gram[(i, j)]).max(0.0);
            let v = (-dist / (4.0 * epsilon)).exp();
            g[(i, j)] = v;
            g[(j, i)] = v;
        }
    }
    let q = g.column_sum();
    let inv_sqrt = q.map(|v| 1.0 / v.sqrt());
    let kernel = DMatrix::from_fn(m, m, |i, j| g[(i, j)] * inv_sqrt[i] * inv_sqrt[j]);
    let degree = kernel.column_sum();
    let markov = DMatrix::from_fn(m, m, |i, j| kernel[(i, j)] / degree[i]);
    Ok(DiffusionMap {
        kernel,
        degree,
        markov,
    })
}

/// Solution of the fixed-point equation with solver diagnostics.
#[derive(Debug, Clone)]
pub struct FixedPoint {
    pub potential: DVector<f64>,
    pub iterations: usize,
    pub residual: f64,
}

/// `‖Ṽ - TṼ - c‖_∞` after the best constant shift. `I - T` annihilates
/// constants and `c` is generally not in its range, so this is the natural
/// residual of the gauge-fixed problem.
pub fn fixed_point_residual(markov: &DMatrix<f64>, v: &DVector<f64>, c: &DVector<f64>) -> f64 {
    half_range(&(v - markov * v - c))
}

fn half_range(r: &DVector<f64>) -> f64 {
    if r.is_empty() {
        return 0.0;
    }
    0.5 * (r.max() - r.min())
}

fn remove_mean(v: &mut DVector<f64>) {
    let mean = v.mean();
    v.add_scalar_mut(-mean);
}

fn scaled_tol(tol: f64, c: &DVector<f64>) -> f64 {
    tol * (1.0 + c.amax())
}

/// Richardson sweeps `Ṽ ← TṼ + c` with the mean removed after each sweep.
pub fn fpf_fixed_point(
    markov: &DMatrix<f64>,
    c: &DVector<f64>,
    tol: f64,
    max_iter: usize,
    warm: Option<&DVector<f64>>,
) -> Result<FixedPoint> {
    let m = c.len();
    if markov.nrows() != m || markov.ncols() != m {
        return Err(Error::dims("Markov matrix", m, markov.nrows()));
    }
    let mut v = warm.cloned().unwrap_or_else(|| DVector::zeros(m));
    remove_mean(&mut v);
    let target = scaled_tol(tol, c);
    for it in 0..max_iter {
        let mut next = markov * &v + c;
        remove_mean(&mut next);
        let residual = half_range(&(&v - &next));
        v = next;
        if residual < target {
            let residual = fixed_point_residual(markov, &v, c);
            return Ok(FixedPoint {
                potential: v,
                iterations: it + 1,
                residual,
            });
        }
    }
    Err(Error::NonConvergence {
        what: "FPF fixed-point iteration",
        iterations: max_iter,
        residual: fixed_point_residual(markov, &v, c),
    })
}

/// The same fixed point via preconditioned conjugate gradients on
/// `(N - K)Ṽ = N(c + α𝟙)`, where `α` makes the right-hand side orthogonal to
/// the kernel of the graph Laplacian.
pub fn fpf_fixed_point_cg(
    map: &DiffusionMap,
    c: &DVector<f64>,
    tol: f64,
    max_iter: usize,
    warm: Option<&DVector<f64>>,
) -> Result<FixedPoint> {
    let m = c.len();
    if map.size() != m {
        return Err(Error::dims("diffusion map", m, map.size()));
    }
    let n = &map.degree;
    let k = &map.kernel;
    let alpha = -n.dot(c) / n.sum();
    let b = n.component_mul(&c.add_scalar(alpha));
    let laplacian = |x: &DVector<f64>| n.component_mul(x) - k * x;
    let precond = DVector::from_fn(m, |i, _| 1.0 / (n[i] - k[(i, i)]).max(f64::MIN_POSITIVE));

    let mut x = warm.cloned().unwrap_or_else(|| DVector::zeros(m));
    remove_mean(&mut x);
    let mut r = &b - laplacian(&x);
    let target = scaled_tol(tol, c);
    let measure = |r: &DVector<f64>| half_range(&r.component_div(n));
    let mut residual = measure(&r);
    if residual < target {
        return Ok(FixedPoint {
            potential: x,
            iterations: 0,
            residual,
        });
    }
    let mut z = r.component_mul(&precond);
    let mut p = z.clone();
    let mut rz = r.dot(&z);
    // An iteration costs about 2m² flops against m³/3 for the direct solve,
    // so a stalled solve (a nearly disconnected graph) is cut off once it
    // has spent roughly that much.
    let budget = max_iter.min(m / 4 + 50);
    for it in 0..budget {
        let lp = laplacian(&p);
        let curvature = p.dot(&lp);
        if !(curvature > 0.0) {
            break;
        }
        let step = rz / curvature;
        x.axpy(step, &p, 1.0);
        r.axpy(-step, &lp, 1.0);
        // Refresh the residual now and then to stop drift in long solves.
        if (it + 1) % 50 == 0 {
            r = &b - laplacian(&x);
        }
        residual = measure(&r);
        if residual < target {
            remove_mean(&mut x);
            return Ok(FixedPoint {
                potential: x,
                iterations: it + 1,
                residual,
            });
        }
        z = r.component_mul(&precond);
        let rz_next = r.dot(&z);
        p = &z + &p * (rz_next / rz);
        rz = rz_next;
    }
    let fallback = dense_laplacian_solve(map, &b)?;
    let dense_residual = measure(&(&b - laplacian(&fallback)));
    if graph_components(map).len() > 1 {
        // The residual of the coupled system is not attainable; the
        // component-wise solution is the regularised answer.
        return Ok(FixedPoint {
            potential: fallback,
            iterations: budget,
            residual: dense_residual,
        });
    }
    // Backward-error test: on a nearly disconnected graph the potential is
    // large and the attainable residual scales with it.
    if dense_residual < target.max(DENSE_TOL * (1.0 + c.amax() + fallback.amax())) {
        return Ok(FixedPoint {
            potential: fallback,
            iterations: budget,
            residual: dense_residual,
        });
    }
    Err(Error::NonConvergence {
        what: "FPF conjugate-gradient solve",
        iterations: budget,
        residual: residual.min(dense_residual),
    })
}

/// Acceptance threshold for the direct solve, relative to `1 + ‖c‖_∞`.
const DENSE_TOL: f64 = 1e-7;

/// Couplings below this fraction of the smaller degree are treated as
/// absent when the graph is split into components.
const COUPLING_FLOOR: f64 = 1e-13;

/// Connected components of the kernel graph, as lists of particle indices.
fn graph_components(map: &DiffusionMap) -> Vec<Vec<usize>> {
    let m = map.size();
    let mut label = vec![usize::MAX; m];
    let mut components = Vec::new();
    for start in 0..m {
        if label[start] != usize::MAX {
            continue;
        }
        let id = components.len();
        let mut members = vec![start];
        label[start] = id;
        let mut head = 0;
        while head < members.len() {
            let i = members[head];
            head += 1;
            for (j, lab) in label.iter_mut().enumerate() {
                let floor = COUPLING_FLOOR * map.degree[i].min(map.degree[j]);
                if *lab == usize::MAX && map.kernel[(i, j)] > floor {
                    *lab = id;
                    members.push(j);
                }
            }
        }
        components.push(members);
    }
    components
}

/// Direct solve of `(N - K)x = b`, component by component. On each
/// component the right-hand side is first made orthogonal to the constants
/// (shifting `c` by a per-component constant) and `(N - K + s𝟙𝟙ᵀ)x = b` is
/// solved by Cholesky; the rank-one term pins the constant mode. Isolated
/// particles receive a zero potential.
fn dense_laplacian_solve(map: &DiffusionMap, b: &DVector<f64>) -> Result<DVector<f64>> {
    let m = b.len();
    let mut x = DVector::zeros(m);
    for comp in graph_components(map) {
        if comp.len() == 1 {
            continue;
        }
        let k = comp.len();
        let n_sum: f64 = comp.iter().map(|&i| map.degree[i]).sum();
        let b_sum: f64 = comp.iter().map(|&i| b[i]).sum();
        let rhs = DVector::from_fn(k, |a, _| {
            let i = comp[a];
            b[i] - map.degree[i] * b_sum / n_sum
        });
        let s = n_sum / (k * k) as f64;
        let a = DMatrix::from_fn(k, k, |p, q| {
            let (i, j) = (comp[p], comp[q]);
            let diag = if p == q { map.degree[i] } else { 0.0 };
            diag - map.kernel[(i, j)] + s
        });
        let sol = nalgebra::Cholesky::new(a)
            .ok_or_else(|| Error::Singular("diffusion-map graph Laplacian".into()))?
            .solve(&rhs);
        for (a, &i) in comp.iter().enumerate() {
            x[i] = sol[a];
        }
    }
    remove_mean(&mut x);
    Ok(x)
}

/// Diffusion map, centred potentials and fixed point at one time step.
#[derive(Debug, Clone)]
pub struct FpfWorkspace {
    pub map: DiffusionMap,
    /// `ΔΨ_data`, the potentials minus their ensemble mean.
    pub centred: DVector<f64>,
    /// `Ṽ`.
    pub potential: DVector<f64>,
    pub iterations: usize,
}

impl FpfWorkspace {
    pub fn build<T: DataTerm>(
        e: &Ensemble,
        term: &T,
        opts: &FpfOptions,
        warm: Option<&DVector<f64>>,
    ) -> Result<Self> {
        let map = fpf_markov_matrix(e, opts.epsilon)?;
        let mut centred = term.potentials(e.particles());
        if let Some(bad) = centred.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("data potential {bad}")));
        }
        remove_mean(&mut centred);
        let c = &centred * opts.epsilon;
        let fp = match opts.solver {
            FpfSolver::Richardson => {
                fpf_fixed_point(map.markov(), &c, opts.tol, opts.max_iter, warm)?
            }
            FpfSolver::ConjugateGradient => {
                fpf_fixed_point_cg(&map, &c, opts.tol, opts.max_iter, warm)?
            }
        };
        Ok(FpfWorkspace {
            map,
            centred,
            potential: fp.potential,
            iterations: fp.iterations,
        })
    }
}

/// Per-particle gain `Σ̂∇Ṽ(θ_i) = Σ_j s_ij θ_j` (columns of the result).
///
/// No covariance enters: it cancels between the kernel metric and the gain.
pub fn fpf_drift(e: &Ensemble, ws: &FpfWorkspace, epsilon: f64) -> Result<DMatrix<f64>> {
    let m = e.size();
    if ws.map.size() != m {
        return Err(Error::dims("FPF workspace", m, ws.map.size()));
    }
    let t = ws.map.markov();
    let r = &ws.potential + &ws.centred * epsilon;
    let tr = t * &r;
    let s = DMatrix::from_fn(m, m, |i, j| t[(i, j)] * (r[j] - tr[i]) / (2.0 * epsilon));
    // Rows of s sum to zero, so deviations give the same product with less
    // cancellation.
    Ok(e.deviations() * s.transpose())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::LinearGaussianTerm;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn gaussian_ensemble(d: usize, m: usize, seed: u64) -> Ensemble {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ensemble::new(DMatrix::from_fn(d, m, |_, _| {
            rng.sample::<f64, _>(StandardNormal)
        }))
        .unwrap()
    }

    /// Bordered system `[(I - T) -𝟙; 𝟙ᵀ/M 0][v; β] = [c; 0]`.
    fn direct_fixed_point(t: &DMatrix<f64>, c: &DVector<f64>) -> DVector<f64> {
        let m = c.len();
        let mut a = DMatrix::zeros(m + 1, m + 1);
        a.view_mut((0, 0), (m, m))
            .copy_from(&(DMatrix::identity(m, m) - t));
        for i in 0..m {
            a[(i, m)] = -1.0;
            a[(m, i)] = 1.0 / m as f64;
        }
        let mut rhs = DVector::zeros(m + 1);
        rhs.rows_mut(0, m).copy_from(c);
        let sol = a.lu().solve(&rhs).unwrap();
        sol.rows(0, m).into_owned()
    }

    #[test]
    fn markov_rows_sum_to_one() {
        let e = gaussian_ensemble(3, 30, 1);
        let map = fpf_markov_matrix(&e, 0.1).unwrap();
        for row in map.markov().row_iter() {
            assert!((row.sum() - 1.0).abs() < 1e-10);
            assert!(row.iter().all(|&v| v >= 0.0));
        }
        assert!((map.kernel() - map.kernel().transpose()).amax() < 1e-15);
    }

    #[test]
    fn two_particle_map() {
        let e = Ensemble::new(DMatrix::from_row_slice(1, 2, &[-1.0, 1.0])).unwrap();
        let eps = 0.3;
        let map = fpf_markov_matrix(&e, eps).unwrap();
        // Σ̂ = 2 (plus the tiny ridge), so the Mahalanobis distance is 4/2.
        let g = (-(4.0 / (2.0 * (1.0 + 1e-10))) / (4.0 * eps)).exp();
        let a = 1.0 / (1.0 + g);
        let t = map.markov();
        assert!((t[(0, 0)] - a).abs() < 1e-12 && (t[(1, 1)] - a).abs() < 1e-12);
        assert!((t[(0, 1)] - t[(1, 0)]).abs() < 1e-12);
        assert!((t[(0, 1)] - (1.0 - a)).abs() < 1e-12);
    }

    #[test]
    fn wide_kernel_is_uniform() {
        let e = gaussian_ensemble(2, 12, 2);
        let map = fpf_markov_matrix(&e, 1e6).unwrap();
        assert!((map.markov().add_scalar(-1.0 / 12.0)).amax() < 1e-6);
    }

    #[test]
    fn collapsed_ensemble_is_rejected() {
        let e = Ensemble::new(DMatrix::from_element(2, 5, 1.0)).unwrap();
        assert!(matches!(
            fpf_markov_matrix(&e, 0.1),
            Err(Error::DegenerateEnsemble(_))
        ));
    }

    #[test]
    fn fixed_point_solvers_agree_with_direct_solve() {
        let e = gaussian_ensemble(3, 40, 3);
        let map = fpf_markov_matrix(&e, 0.1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut c = DVector::from_fn(40, |_, _| rng.sample::<f64, _>(StandardNormal));
        remove_mean(&mut c);
        let oracle = direct_fixed_point(map.markov(), &c);
        assert!(oracle.mean().abs() < 1e-12);
        let rich = fpf_fixed_point(map.markov(), &c, 1e-12, 100_000, None).unwrap();
        let cg = fpf_fixed_point_cg(&map, &c, 1e-12, 1000, None).unwrap();
        // The slowest mode of T decays like 0.9985^k, so compare relative to
        // the size of the solution.
        let scale = oracle.amax();
        assert!((&rich.potential - &oracle).amax() < 1e-8 * scale);
        assert!((&cg.potential - &oracle).amax() < 1e-9 * scale);
        assert!(rich.potential.mean().abs() < 1e-12);
        assert!(cg.potential.mean().abs() < 1e-12);
        assert!(fixed_point_residual(map.markov(), &cg.potential, &c) < 1e-11);
        assert!(cg.iterations < rich.iterations);
    }

    #[test]
    fn zero_data_gives_zero_potential_and_drift() {
        let e = gaussian_ensemble(2, 10, 5);
        let map = fpf_markov_matrix(&e, 0.1).unwrap();
        let c = DVector::zeros(10);
        let fp = fpf_fixed_point(map.markov(), &c, 1e-9, 100, None).unwrap();
        assert_eq!(fp.potential.amax(), 0.0);
        let ws = FpfWorkspace {
            map,
            centred: c,
            potential: fp.potential,
            iterations: 0,
        };
        assert!(fpf_drift(&e, &ws, 0.1).unwrap().amax() < 1e-15);
    }

    #[test]
    fn fixed_point_reports_non_convergence() {
        let e = gaussian_ensemble(2, 10, 6);
        let map = fpf_markov_matrix(&e, 0.1).unwrap();
        let c = DVector::from_fn(10, |i, _| i as f64 - 4.5);
        assert!(matches!(
            fpf_fixed_point(map.markov(), &c, 1e-14, 2, None),
            Err(Error::NonConvergence { .. })
        ));
    }

    #[test]
    fn drift_approximates_kalman_gain_on_gaussians() {
        // Quadratic data term: the exact mean-field drift is
        // ½ Σ Gᵀ Γ⁻¹ (Gθ + Gm - 2t).
        let (d, m) = (2, 2000);
        let e = gaussian_ensemble(d, m, 7);
        let g = DMatrix::from_row_slice(1, 2, &[1.0, 0.5]);
        let t = DVector::from_element(1, 0.3);
        let gamma = DMatrix::from_element(1, 1, 2.0);
        let term = LinearGaussianTerm::new(g.clone(), t.clone(), gamma).unwrap();
        let opts = FpfOptions {
            epsilon: 0.05,
            ..FpfOptions::default()
        };
        let ws = FpfWorkspace::build(&e, &term, &opts, None).unwrap();
        let drift = fpf_drift(&e, &ws, opts.epsilon).unwrap();
        let cov = e.covariance().unwrap();
        let mean = e.mean();
        let mut exact = DMatrix::zeros(d, m);
        for i in 0..m {
            let th = e.particle(i);
            let innov = (&g * &th + &g * &mean - &t * 2.0) * 0.5;
            exact.set_column(i, &(&cov * g.transpose() * innov / 2.0));
        }
        // Per-particle gains are noisy at this ensemble size; the projection
        // onto the exact field shows the estimator is nearly unbiased.
        let ratio = drift.dot(&exact) / exact.dot(&exact);
        assert!((ratio - 1.0).abs() < 0.1, "projected gain ratio {ratio}");
        let rel = (&drift - &exact).norm() / exact.norm();
        assert!(rel < 0.35, "relative RMS deviation {rel}");
    }
}
