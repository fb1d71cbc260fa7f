//! Dense convex quadratic programming with derivatives.
//!
//! Problems follow the standard form
//!
//! ```text
//! minimize    ½ zᵀQz + qᵀz
//! subject to  Az = b,   Gz ≤ h
//! ```
//!
//! with Q symmetric positive semidefinite. The solver is a primal-dual
//! interior-point method with Mehrotra predictor-corrector steps
//! ([`ipm`]), sized for the small dense programs that arise from planar
//! contact equilibria (tens of variables). Infeasibility is certified by an
//! elastic phase-1 program; unboundedness by divergence with vanishing
//! primal residuals on a certified-feasible problem.
//!
//! [`diff`] provides exact gradients of a scalar loss through the solution
//! map via the implicit function theorem on the active-set KKT system —
//! the backbone of gradient-based trajectory optimization.

pub mod diff;
mod ipm;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use diff::{differentiate, DiffConfig, QpGradients};

use crate::par;

/// Errors from QP construction, solving, or differentiation.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum QpError {
    /// Matrix/vector dimensions are inconsistent.
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    /// Iteration cap reached before convergence on a feasible problem.
    #[error("interior point did not converge in {iters} iterations (residual {residual:.3e})")]
    MaxIterations {
        /// Iterations executed.
        iters: usize,
        /// Worst scaled KKT residual at exit.
        residual: f64,
    },
    /// Linear algebra broke down (singular KKT system, NaN).
    #[error("numerical failure: {0}")]
    NumericalFailure(String),
    /// A constraint is weakly active (λ≈0 and slack≈0), so the solution map
    /// is not differentiable there.
    #[error("degenerate active set at inequality row {index}")]
    DegenerateActiveSet {
        /// Offending inequality row.
        index: usize,
    },
}

/// Termination status of a solve.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum QpStatus {
    /// KKT conditions satisfied to tolerance.
    Optimal,
    /// No point satisfies the constraints.
    Infeasible,
    /// The objective decreases without bound over the feasible set.
    Unbounded,
}

/// A dense convex QP in standard form.
#[derive(Debug, Clone, PartialEq)]
pub struct QpProblem {
    /// Quadratic cost matrix Q (n×n, symmetric PSD).
    pub hessian: DMatrix<f64>,
    /// Linear cost q (n).
    pub linear: DVector<f64>,
    /// Equality matrix A (p×n).
    pub eq_mat: DMatrix<f64>,
    /// Equality right-hand side b (p).
    pub eq_rhs: DVector<f64>,
    /// Inequality matrix G (m×n).
    pub ineq_mat: DMatrix<f64>,
    /// Inequality right-hand side h (m).
    pub ineq_rhs: DVector<f64>,
}

impl QpProblem {
    /// Builds an unconstrained QP; chain [`Self::with_equalities`] /
    /// [`Self::with_inequalities`] to add constraints.
    ///
    /// The Hessian must be square and symmetric within 1e−8 relative; it is
    /// stored exactly symmetrized.
    pub fn new(hessian: DMatrix<f64>, linear: DVector<f64>) -> Result<Self, QpError> {
        let n = linear.len();
        if hessian.nrows() != n || hessian.ncols() != n {
            return Err(QpError::Dimension(format!(
                "hessian is {}×{} but linear term has length {n}",
                hessian.nrows(),
                hessian.ncols()
            )));
        }
        let asym = (&hessian - hessian.transpose()).norm();
        if asym > 1e-8 * hessian.norm().max(1e-12) {
            return Err(QpError::Dimension(format!(
                "hessian asymmetry {asym:.3e} exceeds 1e-8 relative"
            )));
        }
        let hessian = (&hessian + hessian.transpose()) * 0.5;
        Ok(Self {
            hessian,
            linear,
            eq_mat: DMatrix::zeros(0, n),
            eq_rhs: DVector::zeros(0),
            ineq_mat: DMatrix::zeros(0, n),
            ineq_rhs: DVector::zeros(0),
        })
    }

    /// Adds the equality block `Az = b`.
    pub fn with_equalities(
        mut self,
        a: DMatrix<f64>,
        b: DVector<f64>,
    ) -> Result<Self, QpError> {
        if a.ncols() != self.n() || a.nrows() != b.len() {
            return Err(QpError::Dimension(format!(
                "equalities {}×{} with rhs length {}",
                a.nrows(),
                a.ncols(),
                b.len()
            )));
        }
        self.eq_mat = a;
        self.eq_rhs = b;
        Ok(self)
    }

    /// Adds the inequality block `Gz ≤ h`.
    pub fn with_inequalities(
        mut self,
        g: DMatrix<f64>,
        h: DVector<f64>,
    ) -> Result<Self, QpError> {
        if g.ncols() != self.n() || g.nrows() != h.len() {
            return Err(QpError::Dimension(format!(
                "inequalities {}×{} with rhs length {}",
                g.nrows(),
                g.ncols(),
                h.len()
            )));
        }
        self.ineq_mat = g;
        self.ineq_rhs = h;
        Ok(self)
    }

    /// Number of decision variables.
    #[inline]
    #[must_use]
    pub fn n(&self) -> usize {
        self.linear.len()
    }

    /// Number of equality constraints.
    #[inline]
    #[must_use]
    pub fn num_eq(&self) -> usize {
        self.eq_rhs.len()
    }

    /// Number of inequality constraints.
    #[inline]
    #[must_use]
    pub fn num_ineq(&self) -> usize {
        self.ineq_rhs.len()
    }

    /// Objective value at `z`.
    #[must_use]
    pub fn objective(&self, z: &DVector<f64>) -> f64 {
        0.5 * (&self.hessian * z).dot(z) + self.linear.dot(z)
    }
}

/// Solver configuration.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct QpConfig {
    /// Scaled KKT residual tolerance.
    pub tol: f64,
    /// Interior-point iteration cap.
    pub max_iters: usize,
}

impl Default for QpConfig {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iters: 100,
        }
    }
}

/// Result of a solve. For [`QpStatus::Infeasible`] / [`QpStatus::Unbounded`]
/// the iterate fields hold the last point examined and carry no meaning.
#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    /// Termination status.
    pub status: QpStatus,
    /// Primal point z.
    pub z: DVector<f64>,
    /// Equality duals ν.
    pub eq_duals: DVector<f64>,
    /// Inequality duals λ ≥ 0.
    pub ineq_duals: DVector<f64>,
    /// Inequality slacks s = h − Gz ≥ 0.
    pub slacks: DVector<f64>,
    /// Objective at z.
    pub objective: f64,
    /// Interior-point iterations used.
    pub iterations: usize,
}

/// Scaled KKT residual norms of a candidate solution — the solver's own
/// optimality measure, exposed for debugging and verification.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KktResiduals {
    /// ‖Qz + q + Aᵀν + Gᵀλ‖∞ (stationarity).
    pub stationarity: f64,
    /// ‖Az − b‖∞.
    pub eq: f64,
    /// ‖max(Gz − h, 0)‖∞.
    pub ineq: f64,
    /// max |λᵢ·sᵢ| (complementarity).
    pub comp: f64,
}

impl KktResiduals {
    /// Worst of the four residuals.
    #[inline]
    #[must_use]
    pub fn worst(&self) -> f64 {
        self.stationarity.max(self.eq).max(self.ineq).max(self.comp)
    }
}

/// Computes the KKT residuals of `sol` on `prob`.
#[must_use]
pub fn kkt_residuals(prob: &QpProblem, sol: &QpSolution) -> KktResiduals {
    let stat = &prob.hessian * &sol.z
        + &prob.linear
        + prob.eq_mat.transpose() * &sol.eq_duals
        + prob.ineq_mat.transpose() * &sol.ineq_duals;
    let eq = &prob.eq_mat * &sol.z - &prob.eq_rhs;
    let ineq_viol = (&prob.ineq_mat * &sol.z - &prob.ineq_rhs).map(|v| v.max(0.0));
    let comp = sol
        .ineq_duals
        .iter()
        .zip(sol.slacks.iter())
        .map(|(l, s)| (l * s).abs())
        .fold(0.0f64, f64::max);
    KktResiduals {
        stationarity: amax_or_zero(&stat),
        eq: amax_or_zero(&eq),
        ineq: amax_or_zero(&ineq_viol),
        comp,
    }
}

/// ∞-norm that treats the empty vector as 0 (nalgebra's `amax` panics).
#[inline]
pub(crate) fn amax_or_zero(v: &DVector<f64>) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.amax()
    }
}

/// Solves a QP to the configured tolerance.
///
/// # Errors
/// [`QpError::MaxIterations`] / [`QpError::NumericalFailure`] when the
/// method stalls on a problem that phase-1 certifies as feasible and no
/// unboundedness evidence exists.
pub fn solve(prob: &QpProblem, config: &QpConfig) -> Result<QpSolution, QpError> {
    // Inconsistent equalities are infeasible regardless of inequalities.
    if prob.num_eq() > 0 {
        let svd = prob.eq_mat.clone().svd(true, true);
        let z_ls = svd
            .solve(&prob.eq_rhs, 1e-13 * svd.singular_values.amax())
            .map_err(|e| QpError::NumericalFailure(e.to_string()))?;
        let resid = amax_or_zero(&(&prob.eq_mat * &z_ls - &prob.eq_rhs));
        if resid > 1e-8 * (1.0 + amax_or_zero(&prob.eq_rhs)) {
            return Ok(infeasible_solution(prob));
        }
        // Redundant-but-consistent equality rows (balance equations plus
        // cone-boundary rows often overlap exactly at an equilibrium pose)
        // make every KKT system singular. Solve with an independent row
        // subset; dropped rows keep zero multipliers, which still satisfies
        // stationarity because they are linear combinations of kept rows.
        let rows = independent_rows(&prob.eq_mat);
        if rows.len() < prob.num_eq() {
            let mut eq_mat = DMatrix::zeros(rows.len(), prob.n());
            let mut eq_rhs = DVector::zeros(rows.len());
            for (k, &r) in rows.iter().enumerate() {
                eq_mat.row_mut(k).copy_from(&prob.eq_mat.row(r));
                eq_rhs[k] = prob.eq_rhs[r];
            }
            let reduced = QpProblem {
                eq_mat,
                eq_rhs,
                ..prob.clone()
            };
            let mut sol = solve(&reduced, config)?;
            let mut full = DVector::zeros(prob.num_eq());
            for (k, &r) in rows.iter().enumerate() {
                full[r] = sol.eq_duals[k];
            }
            sol.eq_duals = full;
            return Ok(sol);
        }
    }
    if prob.num_ineq() == 0 {
        return solve_equality_constrained(prob, config);
    }

    match ipm::run(prob, config) {
        Ok(raw) => Ok(polish(prob, raw)),
        Err(failure) => classify_failure(prob, config, &failure),
    }
}

/// Indices of a maximal linearly independent subset of rows, preferring
/// earlier rows (modified Gram-Schmidt with re-orthogonalization).
fn independent_rows(a: &DMatrix<f64>) -> Vec<usize> {
    let mut basis: Vec<DVector<f64>> = Vec::new();
    let mut rows = Vec::new();
    for i in 0..a.nrows() {
        let mut v = a.row(i).transpose().clone_owned();
        let orig = v.norm();
        if orig <= f64::MIN_POSITIVE {
            continue;
        }
        for _ in 0..2 {
            for b in &basis {
                let c = b.dot(&v);
                v -= b * c;
            }
        }
        if v.norm() > 1e-9 * orig {
            basis.push(v.normalize());
            rows.push(i);
        }
    }
    rows
}

/// Active-set polish: freezes the active set suggested by the interior-point
/// iterate (λᵢ vs sᵢ, scale-normalized), re-solves the resulting equality
/// KKT system, and verifies dual signs and primal feasibility. On success
/// the solution has machine-precision complementarity — inactive duals and
/// active slacks exactly zero — which downstream consumers (force reporting,
/// active-set differentiation) rely on. Falls back to the raw iterate when
/// the classification does not verify.
fn polish(prob: &QpProblem, raw: ipm::RawSolution) -> QpSolution {
    let n = prob.n();
    let p = prob.num_eq();
    let m = prob.num_ineq();
    let lam_scale = 1.0 + amax_or_zero(&raw.lambda);
    let s_scale = 1.0 + amax_or_zero(&raw.s);
    let active: Vec<usize> = (0..m)
        .filter(|&i| raw.lambda[i] / lam_scale >= raw.s[i] / s_scale)
        .collect();
    let ma = active.len();
    let dim = n + p + ma;
    let mut kkt = DMatrix::zeros(dim, dim);
    kkt.view_mut((0, 0), (n, n)).copy_from(&prob.hessian);
    if p > 0 {
        kkt.view_mut((0, n), (n, p))
            .copy_from(&prob.eq_mat.transpose());
        kkt.view_mut((n, 0), (p, n)).copy_from(&prob.eq_mat);
    }
    for (k, &r) in active.iter().enumerate() {
        for j in 0..n {
            kkt[(j, n + p + k)] = prob.ineq_mat[(r, j)];
            kkt[(n + p + k, j)] = prob.ineq_mat[(r, j)];
        }
    }
    let mut rhs = DVector::zeros(dim);
    rhs.rows_mut(0, n).copy_from(&(-&prob.linear));
    if p > 0 {
        rhs.rows_mut(n, p).copy_from(&prob.eq_rhs);
    }
    for (k, &r) in active.iter().enumerate() {
        rhs[n + p + k] = prob.ineq_rhs[r];
    }
    let solved = kkt.clone().lu().solve(&rhs).or_else(|| {
        let svd = kkt.clone().svd(true, true);
        let eps = 1e-12 * svd.singular_values.amax();
        svd.solve(&rhs, eps).ok()
    });
    let Some(u) = solved else {
        return finish(prob, raw);
    };
    if u.iter().any(|v| !v.is_finite()) {
        return finish(prob, raw);
    }
    let z = DVector::from(u.rows(0, n).clone_owned());
    let nu = DVector::from(u.rows(n, p).clone_owned());
    let lam_a = DVector::from(u.rows(n + p, ma).clone_owned());

    let scale = 1.0
        + amax_or_zero(&prob.linear)
        + amax_or_zero(&prob.eq_rhs)
        + amax_or_zero(&prob.ineq_rhs);
    let sign_tol = 1e-8 * scale;
    // The KKT solve enforces stationarity and the active/equality rows; the
    // classification verifies through dual signs and inactive feasibility.
    if lam_a.iter().any(|&l| l < -sign_tol) {
        return finish(prob, raw);
    }
    let slack_full = &prob.ineq_rhs - &prob.ineq_mat * &z;
    let mut is_active = vec![false; m];
    for &r in &active {
        is_active[r] = true;
    }
    if (0..m).any(|i| !is_active[i] && slack_full[i] < -sign_tol) {
        return finish(prob, raw);
    }
    let stat = &prob.hessian * &z
        + &prob.linear
        + prob.eq_mat.transpose() * &nu
        + {
            let mut acc = DVector::zeros(n);
            for (k, &r) in active.iter().enumerate() {
                for j in 0..n {
                    acc[j] += prob.ineq_mat[(r, j)] * lam_a[k];
                }
            }
            acc
        };
    if amax_or_zero(&stat) > 1e-7 * scale {
        return finish(prob, raw);
    }

    let mut lambda = DVector::zeros(m);
    let mut slacks = DVector::zeros(m);
    for (k, &r) in active.iter().enumerate() {
        lambda[r] = lam_a[k].max(0.0);
    }
    for i in 0..m {
        if !is_active[i] {
            slacks[i] = slack_full[i].max(0.0);
        }
    }
    let objective = prob.objective(&z);
    QpSolution {
        status: QpStatus::Optimal,
        z,
        eq_duals: nu,
        ineq_duals: lambda,
        slacks,
        objective,
        iterations: raw.iterations,
    }
}

/// Solves a batch of problems, in parallel when the `parallel` feature is
/// enabled. Output order matches input order either way.
#[must_use]
pub fn solve_batch(
    problems: &[QpProblem],
    config: &QpConfig,
) -> Vec<Result<QpSolution, QpError>> {
    par::map_collect(problems, |p| solve(p, config))
}

/// Sequential twin of [`solve_batch`]; bit-identical results.
#[must_use]
pub fn solve_batch_sequential(
    problems: &[QpProblem],
    config: &QpConfig,
) -> Vec<Result<QpSolution, QpError>> {
    par::map_collect_seq(problems, |p| solve(p, config))
}

fn infeasible_solution(prob: &QpProblem) -> QpSolution {
    QpSolution {
        status: QpStatus::Infeasible,
        z: DVector::zeros(prob.n()),
        eq_duals: DVector::zeros(prob.num_eq()),
        ineq_duals: DVector::zeros(prob.num_ineq()),
        slacks: DVector::zeros(prob.num_ineq()),
        objective: f64::INFINITY,
        iterations: 0,
    }
}

fn unbounded_solution(prob: &QpProblem, iterations: usize) -> QpSolution {
    QpSolution {
        status: QpStatus::Unbounded,
        z: DVector::zeros(prob.n()),
        eq_duals: DVector::zeros(prob.num_eq()),
        ineq_duals: DVector::zeros(prob.num_ineq()),
        slacks: DVector::zeros(prob.num_ineq()),
        objective: f64::NEG_INFINITY,
        iterations,
    }
}

fn finish(prob: &QpProblem, raw: ipm::RawSolution) -> QpSolution {
    let objective = prob.objective(&raw.z);
    QpSolution {
        status: QpStatus::Optimal,
        z: raw.z,
        eq_duals: raw.nu,
        ineq_duals: raw.lambda,
        slacks: raw.s,
        objective,
        iterations: raw.iterations,
    }
}

/// Direct KKT solve for problems with no inequalities.
fn solve_equality_constrained(
    prob: &QpProblem,
    _config: &QpConfig,
) -> Result<QpSolution, QpError> {
    let n = prob.n();
    let p = prob.num_eq();
    let mut kkt = DMatrix::zeros(n + p, n + p);
    kkt.view_mut((0, 0), (n, n)).copy_from(&prob.hessian);
    if p > 0 {
        kkt.view_mut((0, n), (n, p))
            .copy_from(&prob.eq_mat.transpose());
        kkt.view_mut((n, 0), (p, n)).copy_from(&prob.eq_mat);
    }
    let mut rhs = DVector::zeros(n + p);
    rhs.rows_mut(0, n).copy_from(&(-&prob.linear));
    if p > 0 {
        rhs.rows_mut(n, p).copy_from(&prob.eq_rhs);
    }
    // LU first; SVD least-squares fallback distinguishes a consistent
    // (optimal, minimum-norm) system from an unbounded one.
    let solved = kkt.clone().lu().solve(&rhs).or_else(|| {
        let svd = kkt.clone().svd(true, true);
        let eps = 1e-12 * svd.singular_values.amax();
        svd.solve(&rhs, eps).ok()
    });
    let Some(u) = solved else {
        return Err(QpError::NumericalFailure(
            "singular equality-constrained KKT system".into(),
        ));
    };
    let resid = amax_or_zero(&(&kkt * &u - &rhs));
    if resid > 1e-7 * (1.0 + amax_or_zero(&rhs)) {
        // Equalities are consistent (pre-checked), so an unsolvable
        // stationarity system means the objective has no finite minimum.
        return Ok(unbounded_solution(prob, 0));
    }
    let z = DVector::from(u.rows(0, n).clone_owned());
    let nu = DVector::from(u.rows(n, p).clone_owned());
    let objective = prob.objective(&z);
    Ok(QpSolution {
        status: QpStatus::Optimal,
        z,
        eq_duals: nu,
        ineq_duals: DVector::zeros(0),
        slacks: DVector::zeros(0),
        objective,
        iterations: 1,
    })
}

/// Elastic feasibility program over (z, t):
/// min ½ε‖z‖² + ½εt² + t  s.t.  Az = b, Gz − 𝟙t ≤ h, −t ≤ 1.
/// Strictly feasible for any data (take t large), so the IPM cannot stall on
/// it for feasibility reasons; t* > tol certifies the original as infeasible.
fn phase1_problem(prob: &QpProblem) -> QpProblem {
    let n = prob.n();
    let p = prob.num_eq();
    let m = prob.num_ineq();
    let eps = 1e-8;
    let mut hessian = DMatrix::identity(n + 1, n + 1) * eps;
    hessian[(n, n)] = eps;
    let mut linear = DVector::zeros(n + 1);
    linear[n] = 1.0;
    let mut eq = DMatrix::zeros(p, n + 1);
    eq.view_mut((0, 0), (p, n)).copy_from(&prob.eq_mat);
    let mut ineq = DMatrix::zeros(m + 1, n + 1);
    ineq.view_mut((0, 0), (m, n)).copy_from(&prob.ineq_mat);
    for i in 0..m {
        ineq[(i, n)] = -1.0;
    }
    ineq[(m, n)] = -1.0;
    let mut ineq_rhs = DVector::zeros(m + 1);
    ineq_rhs.rows_mut(0, m).copy_from(&prob.ineq_rhs);
    ineq_rhs[m] = 1.0;
    QpProblem {
        hessian,
        linear,
        eq_mat: eq,
        eq_rhs: prob.eq_rhs.clone(),
        ineq_mat: ineq,
        ineq_rhs,
    }
}

fn classify_failure(
    prob: &QpProblem,
    config: &QpConfig,
    failure: &ipm::IpmFailure,
) -> Result<QpSolution, QpError> {
    let p1 = phase1_problem(prob);
    let p1_cfg = QpConfig {
        tol: 1e-9,
        max_iters: config.max_iters.max(100),
    };
    let feasible = match ipm::run(&p1, &p1_cfg) {
        Ok(raw) => {
            let t = raw.z[prob.n()];
            if t > 1e-6 {
                return Ok(infeasible_solution(prob));
            }
            true
        }
        Err(_) => false, // cannot certify either way
    };
    match failure {
        ipm::IpmFailure::Diverged { primal_ok, iterations } if feasible && *primal_ok => {
            Ok(unbounded_solution(prob, *iterations))
        }
        ipm::IpmFailure::MaxIterations { residual } => Err(QpError::MaxIterations {
            iters: config.max_iters,
            residual: *residual,
        }),
        ipm::IpmFailure::Diverged { iterations, .. } => Err(QpError::NumericalFailure(format!(
            "iterates diverged after {iterations} iterations"
        ))),
        ipm::IpmFailure::Singular(msg) => Err(QpError::NumericalFailure(msg.clone())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> QpConfig {
        QpConfig::default()
    }

    #[test]
    fn unconstrained_matches_linear_solve() {
        let q = DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 3.0]);
        let c = DVector::from_row_slice(&[1.0, -2.0]);
        let prob = QpProblem::new(q.clone(), c.clone()).unwrap();
        let sol = solve(&prob, &cfg()).unwrap();
        assert_eq!(sol.status, QpStatus::Optimal);
        let oracle = q.lu().solve(&(-c)).unwrap();
        assert!((sol.z - oracle).amax() < 1e-9);
    }

    #[test]
    fn equality_constrained_kkt_oracle() {
        // min ½‖z‖² s.t. z₀ + z₁ = 2 → z = (1, 1), ν = −1.
        let prob = QpProblem::new(DMatrix::identity(2, 2), DVector::zeros(2))
            .unwrap()
            .with_equalities(
                DMatrix::from_row_slice(1, 2, &[1.0, 1.0]),
                DVector::from_row_slice(&[2.0]),
            )
            .unwrap();
        let sol = solve(&prob, &cfg()).unwrap();
        assert_relative_eq!(sol.z[0], 1.0, epsilon = 1e-9);
        assert_relative_eq!(sol.z[1], 1.0, epsilon = 1e-9);
        assert_relative_eq!(sol.eq_duals[0], -1.0, epsilon = 1e-9);
        assert_relative_eq!(sol.objective, 1.0, epsilon = 1e-9);
    }

    #[test]
    fn active_inequality_projection() {
        // min ½(z−3)² s.t. z ≤ 1 → z = 1, λ = 2.
        let prob = QpProblem::new(
            DMatrix::from_element(1, 1, 1.0),
            DVector::from_row_slice(&[-3.0]),
        )
        .unwrap()
        .with_inequalities(
            DMatrix::from_element(1, 1, 1.0),
            DVector::from_row_slice(&[1.0]),
        )
        .unwrap();
        let sol = solve(&prob, &cfg()).unwrap();
        assert_eq!(sol.status, QpStatus::Optimal);
        assert_relative_eq!(sol.z[0], 1.0, epsilon = 1e-7);
        assert_relative_eq!(sol.ineq_duals[0], 2.0, epsilon = 1e-6);
        assert!(kkt_residuals(&prob, &sol).worst() < 1e-6);
    }

    #[test]
    fn inactive_inequality_ignored() {
        // min ½(z−3)² s.t. z ≤ 10 → unconstrained optimum.
        let prob = QpProblem::new(
            DMatrix::from_element(1, 1, 1.0),
            DVector::from_row_slice(&[-3.0]),
        )
        .unwrap()
        .with_inequalities(
            DMatrix::from_element(1, 1, 1.0),
            DVector::from_row_slice(&[10.0]),
        )
        .unwrap();
        let sol = solve(&prob, &cfg()).unwrap();
        assert_relative_eq!(sol.z[0], 3.0, epsilon = 1e-7);
        assert!(sol.ineq_duals[0] < 1e-7);
    }

    #[test]
    fn componentwise_projection_oracle() {
        // min ½‖z − c‖² s.t. z ≤ 0 → z = min(c, 0).
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..50 {
            let n = rng.gen_range(1..6);
            let c = DVector::from_fn(n, |_, _| rng.gen_range(-2.0..2.0));
            let prob = QpProblem::new(DMatrix::identity(n, n), -c.clone())
                .unwrap()
                .with_inequalities(DMatrix::identity(n, n), DVector::zeros(n))
                .unwrap();
            let sol = solve(&prob, &cfg()).unwrap();
            assert_eq!(sol.status, QpStatus::Optimal);
            for i in 0..n {
                assert!(
                    (sol.z[i] - c[i].min(0.0)).abs() < 1e-6,
                    "component {i}: got {} want {}",
                    sol.z[i],
                    c[i].min(0.0)
                );
            }
        }
    }

    /// Brute-force oracle: enumerate every active subset of the inequality
    /// rows, solve the resulting equality-constrained KKT system, and keep
    /// the candidate satisfying primal feasibility and dual nonnegativity.
    fn active_set_oracle(prob: &QpProblem) -> Option<DVector<f64>> {
        let n = prob.n();
        let p = prob.num_eq();
        let m = prob.num_ineq();
        let mut best: Option<(f64, DVector<f64>)> = None;
        for mask in 0..(1u32 << m) {
            let rows: Vec<usize> = (0..m).filter(|i| mask & (1 << i) != 0).collect();
            let ma = rows.len();
            let dim = n + p + ma;
            let mut kkt = DMatrix::zeros(dim, dim);
            kkt.view_mut((0, 0), (n, n)).copy_from(&prob.hessian);
            kkt.view_mut((0, n), (n, p))
                .copy_from(&prob.eq_mat.transpose());
            kkt.view_mut((n, 0), (p, n)).copy_from(&prob.eq_mat);
            let mut rhs = DVector::zeros(dim);
            rhs.rows_mut(0, n).copy_from(&(-&prob.linear));
            rhs.rows_mut(n, p).copy_from(&prob.eq_rhs);
            for (k, &r) in rows.iter().enumerate() {
                for j in 0..n {
                    kkt[(j, n + p + k)] = prob.ineq_mat[(r, j)];
                    kkt[(n + p + k, j)] = prob.ineq_mat[(r, j)];
                }
                rhs[n + p + k] = prob.ineq_rhs[r];
            }
            let Some(u) = kkt.lu().solve(&rhs) else {
                continue;
            };
            let z = DVector::from(u.rows(0, n).clone_owned());
            let lam = u.rows(n + p, ma);
            if lam.iter().any(|&l| l < -1e-9) {
                continue;
            }
            let viol = (&prob.ineq_mat * &z - &prob.ineq_rhs)
                .iter()
                .fold(0.0f64, |a, &v| a.max(v));
            if viol > 1e-8 {
                continue;
            }
            let obj = prob.objective(&z);
            if best.as_ref().map_or(true, |(b, _)| obj < *b) {
                best = Some((obj, z));
            }
        }
        best.map(|(_, z)| z)
    }

    #[test]
    fn random_programs_match_active_set_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut checked = 0;
        for _ in 0..60 {
            let n = rng.gen_range(2..5usize);
            let m = rng.gen_range(1..6usize);
            let r = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
            let hessian = &r * r.transpose() + DMatrix::identity(n, n);
            let linear = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
            let g = DMatrix::from_fn(m, n, |_, _| rng.gen_range(-1.0..1.0));
            let h = DVector::from_fn(m, |_, _| rng.gen_range(-0.2..1.0));
            let prob = QpProblem::new(hessian, linear)
                .unwrap()
                .with_inequalities(g, h)
                .unwrap();
            let Some(oracle) = active_set_oracle(&prob) else {
                continue; // oracle found no feasible KKT point (infeasible)
            };
            let sol = solve(&prob, &cfg()).unwrap();
            assert_eq!(sol.status, QpStatus::Optimal);
            assert!(
                (&sol.z - &oracle).amax() < 1e-6,
                "solver {:?} vs oracle {:?}",
                sol.z,
                oracle
            );
            checked += 1;
        }
        assert!(checked >= 40, "only {checked} instances exercised");
    }

    #[test]
    fn kkt_residuals_meet_tolerance() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..30 {
            let n = rng.gen_range(2..8usize);
            let m = rng.gen_range(1..8usize);
            let p = rng.gen_range(0..2usize.min(n));
            let r = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
            let prob = QpProblem::new(
                &r * r.transpose() + DMatrix::identity(n, n) * 0.1,
                DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0)),
            )
            .unwrap()
            .with_equalities(
                DMatrix::from_fn(p, n, |_, _| rng.gen_range(-1.0..1.0)),
                DVector::from_fn(p, |_, _| rng.gen_range(-0.5..0.5)),
            )
            .unwrap()
            .with_inequalities(
                DMatrix::from_fn(m, n, |_, _| rng.gen_range(-1.0..1.0)),
                DVector::from_fn(m, |_, _| rng.gen_range(0.1..1.0)),
            )
            .unwrap();
            let sol = solve(&prob, &cfg()).unwrap();
            if sol.status == QpStatus::Optimal {
                let res = kkt_residuals(&prob, &sol);
                assert!(
                    res.worst() < 1e-6,
                    "residuals {res:?} too large for tol 1e-8 solve"
                );
            }
        }
    }

    #[test]
    fn detects_inconsistent_equalities() {
        let prob = QpProblem::new(DMatrix::identity(1, 1), DVector::zeros(1))
            .unwrap()
            .with_equalities(
                DMatrix::from_row_slice(2, 1, &[1.0, 1.0]),
                DVector::from_row_slice(&[1.0, 2.0]),
            )
            .unwrap();
        let sol = solve(&prob, &cfg()).unwrap();
        assert_eq!(sol.status, QpStatus::Infeasible);
    }

    #[test]
    fn detects_contradictory_inequalities() {
        // z ≤ −1 and −z ≤ −2 (z ≥ 2).
        let prob = QpProblem::new(DMatrix::identity(1, 1), DVector::zeros(1))
            .unwrap()
            .with_inequalities(
                DMatrix::from_row_slice(2, 1, &[1.0, -1.0]),
                DVector::from_row_slice(&[-1.0, -2.0]),
            )
            .unwrap();
        let sol = solve(&prob, &cfg()).unwrap();
        assert_eq!(sol.status, QpStatus::Infeasible);
    }

    #[test]
    fn detects_unbounded_descent() {
        // min −z s.t. −z ≤ 0: objective unbounded below as z → ∞.
        let prob = QpProblem::new(
            DMatrix::zeros(1, 1),
            DVector::from_row_slice(&[-1.0]),
        )
        .unwrap()
        .with_inequalities(
            DMatrix::from_element(1, 1, -1.0),
            DVector::zeros(1),
        )
        .unwrap();
        let sol = solve(&prob, &cfg()).unwrap();
        assert_eq!(sol.status, QpStatus::Unbounded);
    }

    #[test]
    fn detects_unbounded_unconstrained() {
        let prob = QpProblem::new(
            DMatrix::zeros(1, 1),
            DVector::from_row_slice(&[-1.0]),
        )
        .unwrap();
        let sol = solve(&prob, &cfg()).unwrap();
        assert_eq!(sol.status, QpStatus::Unbounded);
    }

    #[test]
    fn linear_program_with_box() {
        // min −z over z ∈ [−1, 2] → z = 2 with λ_upper = 1.
        let prob = QpProblem::new(
            DMatrix::zeros(1, 1),
            DVector::from_row_slice(&[-1.0]),
        )
        .unwrap()
        .with_inequalities(
            DMatrix::from_row_slice(2, 1, &[1.0, -1.0]),
            DVector::from_row_slice(&[2.0, 1.0]),
        )
        .unwrap();
        let sol = solve(&prob, &cfg()).unwrap();
        assert_eq!(sol.status, QpStatus::Optimal);
        assert_relative_eq!(sol.z[0], 2.0, epsilon = 1e-6);
        assert_relative_eq!(sol.ineq_duals[0], 1.0, epsilon = 1e-6);
        assert!(sol.ineq_duals[1] < 1e-7);
    }

    #[test]
    fn batch_matches_sequential_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let problems: Vec<_> = (0..32)
            .map(|_| {
                let n = rng.gen_range(1..5usize);
                let r = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
                QpProblem::new(
                    &r * r.transpose() + DMatrix::identity(n, n),
                    DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0)),
                )
                .unwrap()
                .with_inequalities(DMatrix::identity(n, n), DVector::from_element(n, 0.5))
                .unwrap()
            })
            .collect();
        let par = solve_batch(&problems, &cfg());
        let seq = solve_batch_sequential(&problems, &cfg());
        assert_eq!(par.len(), seq.len());
        for (a, b) in par.iter().zip(&seq) {
            let (a, b) = (a.as_ref().unwrap(), b.as_ref().unwrap());
            assert_eq!(a.z, b.z, "parallel and sequential solutions must be bit-identical");
            assert_eq!(a.iterations, b.iterations);
        }
    }

    #[test]
    fn redundant_consistent_equalities_solve_cleanly() {
        // Three equality rows in two variables, mutually consistent: the
        // third row is the sum of the first two. More rows than variables
        // must not break the solver; the dropped row keeps a zero dual.
        let prob = QpProblem::new(DMatrix::identity(2, 2), DVector::zeros(2))
            .unwrap()
            .with_equalities(
                DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0]),
                DVector::from_row_slice(&[1.0, 2.0, 3.0]),
            )
            .unwrap()
            .with_inequalities(
                DMatrix::from_row_slice(1, 2, &[-1.0, 0.0]),
                DVector::from_row_slice(&[0.0]),
            )
            .unwrap();
        let sol = solve(&prob, &cfg()).unwrap();
        assert_eq!(sol.status, QpStatus::Optimal);
        assert!((sol.z[0] - 1.0).abs() < 1e-8);
        assert!((sol.z[1] - 2.0).abs() < 1e-8);
        assert_eq!(sol.eq_duals.len(), 3);
        assert_eq!(sol.eq_duals[2], 0.0);
        // Stationarity with the scattered duals: Qz + q + Aᵀν + Ĝᵀλ = 0.
        let stat = &prob.hessian * &sol.z
            + &prob.linear
            + prob.eq_mat.transpose() * &sol.eq_duals
            + prob.ineq_mat.transpose() * &sol.ineq_duals;
        assert!(stat.amax() < 1e-7, "stationarity residual {stat:?}");

        // Same rows made inconsistent: infeasible, not a numerical error.
        let bad = QpProblem::new(DMatrix::identity(2, 2), DVector::zeros(2))
            .unwrap()
            .with_equalities(
                DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0]),
                DVector::from_row_slice(&[1.0, 2.0, 4.0]),
            )
            .unwrap();
        let sol = solve(&bad, &cfg()).unwrap();
        assert_eq!(sol.status, QpStatus::Infeasible);
    }

    #[test]
    fn dimension_errors_are_reported() {
        assert!(matches!(
            QpProblem::new(DMatrix::zeros(2, 3), DVector::zeros(2)),
            Err(QpError::Dimension(_))
        ));
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 5.0, -5.0, 1.0]);
        assert!(matches!(
            QpProblem::new(asym, DVector::zeros(2)),
            Err(QpError::Dimension(_))
        ));
        let ok = QpProblem::new(DMatrix::identity(2, 2), DVector::zeros(2)).unwrap();
        assert!(matches!(
            ok.with_inequalities(DMatrix::zeros(1, 3), DVector::zeros(1)),
            Err(QpError::Dimension(_))
        ));
    }
}
