//! Gradients of a scalar loss through the QP solution map.
//!
//! At a solution with active set 𝒜 = {i : λᵢ > 0}, strict complementarity
//! makes the KKT conditions an implicit function of the problem data:
//!
//! ```text
//! M · (ż, ν̇, λ̇_𝒜) = −(∂F/∂θ),    M = [ Q   Aᵀ  Ĝᵀ ]
//!                                      [ A   0   0  ]
//!                                      [ Ĝ   0   0  ]
//! ```
//!
//! with Ĝ the active inequality rows treated as equalities. For a loss ℓ(z)
//! one adjoint solve `M·u = (∂ℓ/∂z, 0, 0)` yields every parameter gradient:
//!
//! ```text
//! ∇_q ℓ = −u_z            ∇_Q ℓ = −½(u_z zᵀ + z u_zᵀ)
//! ∇_b ℓ =  u_ν            ∇_A ℓ = −(ν u_zᵀ + u_ν zᵀ)
//! ∇_ĥ ℓ =  u_λ            ∇_Ĝ ℓ = −(λ̂ u_zᵀ + u_λ zᵀ)
//! ```
//!
//! Inactive rows have zero gradient. Weakly active rows (λᵢ ≈ 0 and
//! slack ≈ 0) sit on a nondifferentiability: lenient mode drops them from
//! the active set and reports their indices; strict mode refuses.

use nalgebra::{DMatrix, DVector};

use super::{amax_or_zero, kkt_residuals, QpError, QpProblem, QpSolution, QpStatus};

/// Configuration for [`differentiate`].
#[derive(Debug, Clone, Copy)]
pub struct DiffConfig {
    /// λ threshold deciding whether an inequality row is active.
    pub active_tol: f64,
    /// Error on weakly active rows instead of dropping them.
    pub strict: bool,
}

impl Default for DiffConfig {
    fn default() -> Self {
        Self {
            active_tol: 1e-7,
            strict: false,
        }
    }
}

/// Gradients of the loss with respect to every problem parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct QpGradients {
    /// ∂ℓ/∂Q (n×n, symmetric).
    pub hessian: DMatrix<f64>,
    /// ∂ℓ/∂q (n).
    pub linear: DVector<f64>,
    /// ∂ℓ/∂A (p×n).
    pub eq_mat: DMatrix<f64>,
    /// ∂ℓ/∂b (p).
    pub eq_rhs: DVector<f64>,
    /// ∂ℓ/∂G (m×n, zero on inactive rows).
    pub ineq_mat: DMatrix<f64>,
    /// ∂ℓ/∂h (m, zero on inactive rows).
    pub ineq_rhs: DVector<f64>,
    /// Weakly active rows dropped from the active set (lenient mode).
    pub degenerate_rows: Vec<usize>,
}

/// Differentiates a scalar loss with gradient `dl_dz` at the solution.
///
/// # Errors
/// [`QpError::NumericalFailure`] when the solution is not optimal for the
/// problem; [`QpError::DegenerateActiveSet`] in strict mode when a row is
/// weakly active.
pub fn differentiate(
    prob: &QpProblem,
    sol: &QpSolution,
    dl_dz: &DVector<f64>,
    config: &DiffConfig,
) -> Result<QpGradients, QpError> {
    if sol.status != QpStatus::Optimal {
        return Err(QpError::NumericalFailure(
            "differentiation requires an optimal solution".into(),
        ));
    }
    let n = prob.n();
    let p = prob.num_eq();
    let m = prob.num_ineq();
    if dl_dz.len() != n {
        return Err(QpError::Dimension(format!(
            "loss gradient has length {} for {n} variables",
            dl_dz.len()
        )));
    }
    let data_scale = 1.0
        + amax_or_zero(&prob.linear)
        + amax_or_zero(&prob.eq_rhs)
        + amax_or_zero(&prob.ineq_rhs);
    if kkt_residuals(prob, sol).worst() > 1e-5 * data_scale {
        return Err(QpError::NumericalFailure(
            "solution does not satisfy the KKT conditions of this problem".into(),
        ));
    }

    let mut active = Vec::new();
    let mut degenerate_rows = Vec::new();
    for i in 0..m {
        if sol.ineq_duals[i] >= config.active_tol {
            active.push(i);
        } else if sol.slacks[i] < config.active_tol {
            if config.strict {
                return Err(QpError::DegenerateActiveSet { index: i });
            }
            degenerate_rows.push(i);
        }
    }
    let ma = active.len();

    // Adjoint system on the active-set KKT matrix.
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
    rhs.rows_mut(0, n).copy_from(dl_dz);
    // LU; minimum-norm SVD fallback when the active constraints are
    // linearly dependent (the gradient then corresponds to the least-norm
    // consistent sensitivity).
    let u = kkt.clone().lu().solve(&rhs).or_else(|| {
        let svd = kkt.clone().svd(true, true);
        let eps = 1e-12 * svd.singular_values.amax();
        svd.solve(&rhs, eps).ok()
    });
    let Some(u) = u else {
        return Err(QpError::NumericalFailure(
            "singular adjoint KKT system".into(),
        ));
    };
    let u_z = DVector::from(u.rows(0, n).clone_owned());
    let u_nu = DVector::from(u.rows(n, p).clone_owned());
    let u_lam = DVector::from(u.rows(n + p, ma).clone_owned());

    let z = &sol.z;
    let hessian = -0.5 * (&u_z * z.transpose() + z * u_z.transpose());
    let linear = -&u_z;
    let eq_mat = -(&sol.eq_duals * u_z.transpose() + &u_nu * z.transpose());
    let eq_rhs = u_nu;
    let mut ineq_mat = DMatrix::zeros(m, n);
    let mut ineq_rhs = DVector::zeros(m);
    for (k, &r) in active.iter().enumerate() {
        let lam_r = sol.ineq_duals[r];
        for j in 0..n {
            ineq_mat[(r, j)] = -(lam_r * u_z[j] + u_lam[k] * z[j]);
        }
        ineq_rhs[r] = u_lam[k];
    }
    Ok(QpGradients {
        hessian,
        linear,
        eq_mat,
        eq_rhs,
        ineq_mat,
        ineq_rhs,
        degenerate_rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qp::{solve, QpConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Strictly convex QP with one equality and a mix of active/inactive
    /// inequalities, built to be strictly complementary.
    fn test_problem() -> QpProblem {
        let hessian = DMatrix::from_row_slice(
            3,
            3,
            &[3.0, 0.4, -0.2, 0.4, 2.5, 0.1, -0.2, 0.1, 2.0],
        );
        let linear = DVector::from_row_slice(&[-1.0, 2.0, -0.5]);
        let eq = DMatrix::from_row_slice(1, 3, &[1.0, 1.0, 1.0]);
        let eq_rhs = DVector::from_row_slice(&[0.5]);
        // First row active at the optimum, second far from it.
        let g = DMatrix::from_row_slice(2, 3, &[1.0, -1.0, 0.5, 0.3, 0.8, -1.0]);
        let h = DVector::from_row_slice(&[-0.4, 10.0]);
        QpProblem::new(hessian, linear)
            .unwrap()
            .with_equalities(eq, eq_rhs)
            .unwrap()
            .with_inequalities(g, h)
            .unwrap()
    }

    fn loss(prob: &QpProblem, c: &DVector<f64>) -> f64 {
        let sol = solve(prob, &QpConfig::default()).unwrap();
        assert_eq!(sol.status, QpStatus::Optimal);
        c.dot(&sol.z)
    }

    #[test]
    fn gradients_match_finite_differences() {
        let prob = test_problem();
        let sol = solve(&prob, &QpConfig::default()).unwrap();
        // Confirm strict complementarity of the construction.
        assert!(sol.ineq_duals[0] > 1e-3, "row 0 should be strongly active");
        assert!(sol.slacks[1] > 1e-3, "row 1 should be strictly inactive");

        let c = DVector::from_row_slice(&[0.7, -1.2, 0.4]);
        let grads = differentiate(&prob, &sol, &c, &DiffConfig::default()).unwrap();
        assert!(grads.degenerate_rows.is_empty());

        let eps = 1e-6;
        let check = |got: f64, plus: QpProblem, minus: QpProblem, what: &str| {
            let fd = (loss(&plus, &c) - loss(&minus, &c)) / (2.0 * eps);
            if fd.abs() < 1e-7 && got.abs() < 1e-7 {
                return; // both vanish; fd noise floor dominates
            }
            let denom = fd.abs().max(got.abs()).max(1e-6);
            assert!(
                (fd - got).abs() / denom < 1e-4,
                "{what}: fd {fd:.8e} vs analytic {got:.8e}"
            );
        };

        for i in 0..3 {
            let mut plus = prob.clone();
            plus.linear[i] += eps;
            let mut minus = prob.clone();
            minus.linear[i] -= eps;
            check(grads.linear[i], plus, minus, "linear");
        }
        let mut plus = prob.clone();
        plus.eq_rhs[0] += eps;
        let mut minus = prob.clone();
        minus.eq_rhs[0] -= eps;
        check(grads.eq_rhs[0], plus, minus, "eq_rhs");
        for r in 0..2 {
            let mut plus = prob.clone();
            plus.ineq_rhs[r] += eps;
            let mut minus = prob.clone();
            minus.ineq_rhs[r] -= eps;
            check(grads.ineq_rhs[r], plus, minus, "ineq_rhs");
        }
        for i in 0..3 {
            for j in 0..3 {
                // Perturb symmetrically to stay a valid Hessian.
                let mut plus = prob.clone();
                plus.hessian[(i, j)] += eps;
                plus.hessian[(j, i)] += eps;
                let mut minus = prob.clone();
                minus.hessian[(i, j)] -= eps;
                minus.hessian[(j, i)] -= eps;
                let got = grads.hessian[(i, j)] + grads.hessian[(j, i)];
                check(got, plus, minus, "hessian");
            }
        }
        for j in 0..3 {
            let mut plus = prob.clone();
            plus.eq_mat[(0, j)] += eps;
            let mut minus = prob.clone();
            minus.eq_mat[(0, j)] -= eps;
            check(grads.eq_mat[(0, j)], plus, minus, "eq_mat");
        }
        for r in 0..2 {
            for j in 0..3 {
                let mut plus = prob.clone();
                plus.ineq_mat[(r, j)] += eps;
                let mut minus = prob.clone();
                minus.ineq_mat[(r, j)] -= eps;
                check(grads.ineq_mat[(r, j)], plus, minus, "ineq_mat");
            }
        }
    }

    #[test]
    fn inactive_rows_have_zero_gradient() {
        let prob = test_problem();
        let sol = solve(&prob, &QpConfig::default()).unwrap();
        let c = DVector::from_row_slice(&[1.0, 0.0, -1.0]);
        let grads = differentiate(&prob, &sol, &c, &DiffConfig::default()).unwrap();
        assert_eq!(grads.ineq_rhs[1], 0.0);
        for j in 0..3 {
            assert_eq!(grads.ineq_mat[(1, j)], 0.0);
        }
    }

    #[test]
    fn hessian_gradient_is_symmetric() {
        let prob = test_problem();
        let sol = solve(&prob, &QpConfig::default()).unwrap();
        let c = DVector::from_row_slice(&[0.3, 0.9, -0.2]);
        let grads = differentiate(&prob, &sol, &c, &DiffConfig::default()).unwrap();
        assert!((grads.hessian.clone() - grads.hessian.transpose()).norm() < 1e-12);
    }

    #[test]
    fn weakly_active_rows_flagged_or_rejected() {
        // min ½z² s.t. z ≤ 0: optimum z = 0 with λ = 0 and slack = 0.
        let prob = QpProblem::new(DMatrix::identity(1, 1), DVector::zeros(1))
            .unwrap()
            .with_inequalities(DMatrix::identity(1, 1), DVector::zeros(1))
            .unwrap();
        let sol = solve(&prob, &QpConfig::default()).unwrap();
        let c = DVector::from_row_slice(&[1.0]);
        let lenient = differentiate(&prob, &sol, &c, &DiffConfig::default()).unwrap();
        assert_eq!(lenient.degenerate_rows, vec![0]);
        // Dropped from the active set ⇒ behaves as unconstrained: dz/dq = −Q⁻¹.
        assert_eq!(lenient.ineq_rhs[0], 0.0);
        assert!((lenient.linear[0] + 1.0).abs() < 1e-9);

        let strict = differentiate(
            &prob,
            &sol,
            &c,
            &DiffConfig {
                strict: true,
                ..DiffConfig::default()
            },
        );
        assert!(matches!(
            strict,
            Err(QpError::DegenerateActiveSet { index: 0 })
        ));
    }

    #[test]
    fn random_programs_differentiate_consistently() {
        // ∂ℓ/∂h on active rows equals u_λ and FD agrees; exercised across
        // random strictly convex programs, skipping non-strict cases.
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut exercised = 0;
        for _ in 0..40 {
            let n = rng.gen_range(2..5usize);
            let m = rng.gen_range(1..5usize);
            let r = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
            let prob = QpProblem::new(
                &r * r.transpose() + DMatrix::identity(n, n),
                DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0)),
            )
            .unwrap()
            .with_inequalities(
                DMatrix::from_fn(m, n, |_, _| rng.gen_range(-1.0..1.0)),
                DVector::from_fn(m, |_, _| rng.gen_range(-0.3..0.6)),
            )
            .unwrap();
            let Ok(sol) = solve(&prob, &QpConfig::default()) else {
                continue;
            };
            if sol.status != QpStatus::Optimal {
                continue;
            }
            // Require strict complementarity with margin so the 1e-6 FD
            // step cannot flip the active set.
            let strict = (0..m)
                .all(|i| sol.ineq_duals[i] > 1e-4 || sol.slacks[i] > 1e-4);
            if !strict {
                continue;
            }
            let c = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
            let grads = differentiate(&prob, &sol, &c, &DiffConfig::default()).unwrap();
            let eps = 1e-6;
            for i in 0..m {
                let mut plus = prob.clone();
                plus.ineq_rhs[i] += eps;
                let mut minus = prob.clone();
                minus.ineq_rhs[i] -= eps;
                let f = |p: &QpProblem| c.dot(&solve(p, &QpConfig::default()).unwrap().z);
                let fd = (f(&plus) - f(&minus)) / (2.0 * eps);
                if fd.abs() < 1e-7 && grads.ineq_rhs[i].abs() < 1e-7 {
                    continue; // both vanish; fd noise floor dominates
                }
                let denom = fd.abs().max(grads.ineq_rhs[i].abs()).max(1e-6);
                assert!(
                    (fd - grads.ineq_rhs[i]).abs() / denom < 1e-3,
                    "row {i}: fd {fd:.6e} vs {:.6e}",
                    grads.ineq_rhs[i]
                );
            }
            exercised += 1;
        }
        assert!(exercised >= 15, "only {exercised} programs exercised");
    }
}
