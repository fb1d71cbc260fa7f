//! Primal-dual interior-point core with Mehrotra predictor-corrector.
//!
//! Solves the standard-form QP of [`super::QpProblem`] by damped Newton
//! steps on the perturbed KKT conditions
//!
//! ```text
//! Qz + q + Aᵀν + Gᵀλ = 0,   Az = b,   Gz + s = h,   s∘λ = σμ𝟙,   s, λ > 0
//! ```
//!
//! Each iteration eliminates (Δs, Δλ) and factorizes the reduced system
//!
//! ```text
//! [ Q + Gᵀdiag(λ/s)G   Aᵀ ] [Δz]   [ rhs_z ]
//! [ A                  0  ] [Δν] = [ rhs_ν ]
//! ```
//!
//! once per iteration (LU), reusing the factors for the predictor and
//! corrector solves. Callers handle the inequality-free case directly; this
//! module requires at least one inequality row.

use nalgebra::{DMatrix, DVector};

use super::{amax_or_zero, QpConfig, QpProblem};

/// Raw interior-point iterate accepted as optimal.
#[derive(Debug, Clone)]
pub(crate) struct RawSolution {
    pub z: DVector<f64>,
    pub nu: DVector<f64>,
    pub lambda: DVector<f64>,
    pub s: DVector<f64>,
    pub iterations: usize,
}

/// Why the interior-point loop gave up.
#[derive(Debug, Clone)]
pub(crate) enum IpmFailure {
    /// Iteration cap reached; carries the worst scaled residual.
    MaxIterations { residual: f64 },
    /// Iterates blew up; `primal_ok` records whether primal residuals
    /// stayed small relative to the iterate (unboundedness evidence).
    Diverged { primal_ok: bool, iterations: usize },
    /// Reduced KKT system singular beyond repair, or NaN appeared.
    Singular(String),
}

/// Runs the interior-point loop. Requires `prob.num_ineq() > 0`.
pub(crate) fn run(prob: &QpProblem, config: &QpConfig) -> Result<RawSolution, IpmFailure> {
    let n = prob.n();
    let p = prob.num_eq();
    let m = prob.num_ineq();
    debug_assert!(m > 0, "ipm requires inequality rows");
    let a = &prob.eq_mat;
    let g = &prob.ineq_mat;

    let (mut z, mut nu, mut lam, mut s) = initial_point(prob);
    let start_scale = 1.0 + z.amax();

    let mut worst_residual = f64::INFINITY;
    for iter in 0..config.max_iters {
        let hz = &prob.hessian * &z;
        let at_nu = a.transpose() * &nu;
        let gt_lam = g.transpose() * &lam;
        let r_d = &hz + &prob.linear + &at_nu + &gt_lam;
        let az = a * &z;
        let r_p = &az - &prob.eq_rhs;
        let gz = g * &z;
        let r_g = &gz + &s - &prob.ineq_rhs;
        let mu = s.dot(&lam) / m as f64;
        let objective = prob.objective(&z);

        // Residuals are scored relative to the magnitude of the terms that
        // produce them (not the raw data): a slack-penalized Hessian puts
        // entries of 1e6 in play, and demanding an *absolute* 1e-11 there
        // asks for ~1e-17 relative accuracy — beyond f64, so the iterate
        // would chase it into breakdown.
        let scale_d = 1.0
            + amax_or_zero(&prob.linear)
                .max(amax_or_zero(&hz))
                .max(amax_or_zero(&at_nu))
                .max(amax_or_zero(&gt_lam));
        let scale_p = 1.0 + amax_or_zero(&prob.eq_rhs).max(amax_or_zero(&az));
        let scale_g = 1.0
            + amax_or_zero(&prob.ineq_rhs)
                .max(amax_or_zero(&gz))
                .max(amax_or_zero(&s));
        let res_d = amax_or_zero(&r_d) / scale_d;
        let res_p = amax_or_zero(&r_p) / scale_p;
        let res_g = amax_or_zero(&r_g) / scale_g;
        let gap_ok = mu <= config.tol * (1.0 + objective.abs());
        worst_residual = res_d.max(res_p).max(res_g).max(mu);
        if res_d <= config.tol && res_p <= config.tol && res_g <= config.tol && gap_ok {
            return Ok(RawSolution {
                z,
                nu,
                lambda: lam,
                s,
                iterations: iter,
            });
        }

        let finite = z.iter().all(|v| v.is_finite())
            && nu.iter().all(|v| v.is_finite())
            && lam.iter().all(|v| v.is_finite())
            && s.iter().all(|v| v.is_finite());
        if !finite {
            return Err(IpmFailure::Singular("iterate became non-finite".into()));
        }
        if z.amax() > 1e8 * start_scale || objective < -1e10 {
            let iter_scale = 1.0 + z.amax();
            let primal_ok = amax_or_zero(&r_p) / iter_scale <= 1e-6
                && amax_or_zero(&r_g) / (iter_scale + amax_or_zero(&s)) <= 1e-6;
            return Err(IpmFailure::Diverged {
                primal_ok,
                iterations: iter,
            });
        }

        // Reduced KKT factorization, shared by predictor and corrector.
        let w = lam.component_div(&s);
        let mut kkt = DMatrix::zeros(n + p, n + p);
        let mut gtwg = prob.hessian.clone();
        for i in 0..m {
            let wi = w[i];
            for r in 0..n {
                let gri = g[(i, r)];
                if gri == 0.0 {
                    continue;
                }
                for c in 0..n {
                    gtwg[(r, c)] += wi * gri * g[(i, c)];
                }
            }
        }
        kkt.view_mut((0, 0), (n, n)).copy_from(&gtwg);
        if p > 0 {
            kkt.view_mut((0, n), (n, p)).copy_from(&a.transpose());
            kkt.view_mut((n, 0), (p, n)).copy_from(a);
        }
        let mut lu = kkt.clone().lu();
        if !lu.is_invertible() {
            // Proportional static regularization rescues rank-deficient
            // (but consistent) equality blocks.
            let delta = 1e-10 * (1.0 + kkt.amax());
            for i in 0..n {
                kkt[(i, i)] += delta;
            }
            for j in 0..p {
                kkt[(n + j, n + j)] -= delta;
            }
            lu = kkt.clone().lu();
            if !lu.is_invertible() {
                return Err(IpmFailure::Singular(
                    "reduced KKT matrix singular despite regularization".into(),
                ));
            }
        }

        // Predictor (affine scaling): drive s∘λ toward 0.
        let r_c_aff = s.component_mul(&lam);
        let (_dz_a, _dnu_a, ds_a, dlam_a) =
            newton_step(&lu, prob, &s, &lam, &r_d, &r_p, &r_g, &r_c_aff)?;
        let alpha_p_aff = max_step(&s, &ds_a).min(1.0);
        let alpha_d_aff = max_step(&lam, &dlam_a).min(1.0);
        let mu_aff = (&s + alpha_p_aff * &ds_a).dot(&(&lam + alpha_d_aff * &dlam_a)) / m as f64;
        let sigma = (mu_aff / mu).clamp(0.0, 1.0).powi(3);

        // Corrector: recenter toward σμ and cancel the second-order term.
        let r_c = s.component_mul(&lam) + ds_a.component_mul(&dlam_a)
            - DVector::from_element(m, sigma * mu);
        let (dz, dnu, ds, dlam) = newton_step(&lu, prob, &s, &lam, &r_d, &r_p, &r_g, &r_c)?;
        let alpha_p = (0.99 * max_step(&s, &ds)).min(1.0);
        let alpha_d = (0.99 * max_step(&lam, &dlam)).min(1.0);
        if alpha_p < 1e-13 && alpha_d < 1e-13 {
            // The barrier forces steps to zero once complementarity pairs hit
            // the f64 floor; further iterations only corrupt the iterate.
            return Err(IpmFailure::MaxIterations {
                residual: worst_residual,
            });
        }
        z += alpha_p * &dz;
        s += alpha_p * &ds;
        nu += alpha_d * &dnu;
        lam += alpha_d * &dlam;
    }
    Err(IpmFailure::MaxIterations {
        residual: worst_residual,
    })
}

/// One Newton solve on the shared factorization.
///
/// `r_c` is the complementarity target: the step satisfies
/// `λ∘Δs + s∘Δλ = −r_c` exactly, alongside the linearized KKT rows.
#[allow(clippy::too_many_arguments)]
fn newton_step(
    lu: &nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
    prob: &QpProblem,
    s: &DVector<f64>,
    lam: &DVector<f64>,
    r_d: &DVector<f64>,
    r_p: &DVector<f64>,
    r_g: &DVector<f64>,
    r_c: &DVector<f64>,
) -> Result<(DVector<f64>, DVector<f64>, DVector<f64>, DVector<f64>), IpmFailure> {
    let n = prob.n();
    let p = prob.num_eq();
    let g = &prob.ineq_mat;
    // tmp = (λ∘r_g − r_c) / s, eliminating (Δs, Δλ).
    let tmp = (lam.component_mul(r_g) - r_c).component_div(s);
    let rhs_top = -r_d - g.transpose() * &tmp;
    let mut rhs = DVector::zeros(n + p);
    rhs.rows_mut(0, n).copy_from(&rhs_top);
    if p > 0 {
        rhs.rows_mut(n, p).copy_from(&(-r_p));
    }
    let Some(sol) = lu.solve(&rhs) else {
        return Err(IpmFailure::Singular("KKT solve failed".into()));
    };
    let dz = DVector::from(sol.rows(0, n).clone_owned());
    let dnu = DVector::from(sol.rows(n, p).clone_owned());
    let g_dz = g * &dz;
    let ds = -r_g - &g_dz;
    let dlam = (lam.component_mul(&(g_dz + r_g)) - r_c).component_div(s);
    Ok((dz, dnu, ds, dlam))
}

/// Largest α ≥ 0 with x + α·dx ≥ 0 (∞ when dx ≥ 0).
fn max_step(x: &DVector<f64>, dx: &DVector<f64>) -> f64 {
    let mut alpha = f64::INFINITY;
    for i in 0..x.len() {
        if dx[i] < 0.0 {
            alpha = alpha.min(-x[i] / dx[i]);
        }
    }
    alpha
}

/// Starting point: solve the slack-penalized KKT system
/// `[[Q, Aᵀ, Gᵀ], [A, 0, 0], [G, 0, −I]]·(z, ν, y) = (−q, b, h)` and shift
/// `s = h − Gz` and `λ = y` into the strictly positive orthant.
fn initial_point(
    prob: &QpProblem,
) -> (DVector<f64>, DVector<f64>, DVector<f64>, DVector<f64>) {
    let n = prob.n();
    let p = prob.num_eq();
    let m = prob.num_ineq();
    let fallback = || {
        let s = prob.ineq_rhs.map(|h| 1.0 + h.abs());
        (
            DVector::zeros(n),
            DVector::zeros(p),
            DVector::from_element(m, 1.0),
            s,
        )
    };

    let dim = n + p + m;
    let mut m0 = DMatrix::zeros(dim, dim);
    m0.view_mut((0, 0), (n, n)).copy_from(&prob.hessian);
    if p > 0 {
        m0.view_mut((0, n), (n, p))
            .copy_from(&prob.eq_mat.transpose());
        m0.view_mut((n, 0), (p, n)).copy_from(&prob.eq_mat);
    }
    m0.view_mut((0, n + p), (n, m))
        .copy_from(&prob.ineq_mat.transpose());
    m0.view_mut((n + p, 0), (m, n)).copy_from(&prob.ineq_mat);
    for i in 0..m {
        m0[(n + p + i, n + p + i)] = -1.0;
    }
    let mut rhs = DVector::zeros(dim);
    rhs.rows_mut(0, n).copy_from(&(-&prob.linear));
    if p > 0 {
        rhs.rows_mut(n, p).copy_from(&prob.eq_rhs);
    }
    rhs.rows_mut(n + p, m).copy_from(&prob.ineq_rhs);
    let Some(sol) = m0.lu().solve(&rhs) else {
        return fallback();
    };
    if sol.iter().any(|v| !v.is_finite()) {
        return fallback();
    }
    let z = DVector::from(sol.rows(0, n).clone_owned());
    let nu = DVector::from(sol.rows(n, p).clone_owned());
    let lam_raw = DVector::from(sol.rows(n + p, m).clone_owned());
    let s_raw = &prob.ineq_rhs - &prob.ineq_mat * &z;

    let shift = |v: &DVector<f64>| -> DVector<f64> {
        let min = v.min();
        let delta = (-1.5 * min).max(0.0);
        v.add_scalar(delta)
    };
    let mut s = shift(&s_raw);
    let mut lam = shift(&lam_raw);
    let dot = s.dot(&lam);
    let sum_s = s.sum();
    let sum_lam = lam.sum();
    if sum_lam > 1e-12 {
        s = s.add_scalar(0.5 * dot / sum_lam);
    }
    if sum_s > 1e-12 {
        lam = lam.add_scalar(0.5 * dot / sum_s);
    }
    // Hard floor: both cones must start strictly interior.
    let floor = 1e-8 * (1.0 + amax_or_zero(&prob.ineq_rhs));
    if s.min() < floor {
        s = s.add_scalar(floor - s.min() + 1.0);
    }
    if lam.min() < floor {
        lam = lam.add_scalar(floor - lam.min() + 1.0);
    }
    (z, nu, lam, s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn max_step_examples() {
        let x = DVector::from_row_slice(&[1.0, 2.0]);
        assert_eq!(
            max_step(&x, &DVector::from_row_slice(&[1.0, 0.5])),
            f64::INFINITY
        );
        assert_eq!(
            max_step(&x, &DVector::from_row_slice(&[-0.5, -4.0])),
            0.5
        );
    }

    #[test]
    fn initial_point_is_strictly_interior() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..40 {
            let n = rng.gen_range(1..6usize);
            let m = rng.gen_range(1..7usize);
            let r = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
            let prob = QpProblem::new(
                &r * r.transpose(),
                DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0)),
            )
            .unwrap()
            .with_inequalities(
                DMatrix::from_fn(m, n, |_, _| rng.gen_range(-1.0..1.0)),
                DVector::from_fn(m, |_, _| rng.gen_range(-1.0..1.0)),
            )
            .unwrap();
            let (z, _nu, lam, s) = initial_point(&prob);
            assert!(z.iter().all(|v| v.is_finite()));
            assert!(s.iter().all(|&v| v > 0.0), "slack not interior: {s:?}");
            assert!(lam.iter().all(|&v| v > 0.0), "dual not interior: {lam:?}");
        }
    }

    #[test]
    fn converges_in_few_iterations_on_small_programs() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = QpConfig::default();
        for _ in 0..25 {
            let n = rng.gen_range(2..10usize);
            let m = rng.gen_range(1..10usize);
            let r = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
            let prob = QpProblem::new(
                &r * r.transpose() + DMatrix::identity(n, n) * 0.5,
                DVector::from_fn(n, |_, _| rng.gen_range(-2.0..2.0)),
            )
            .unwrap()
            .with_inequalities(
                DMatrix::from_fn(m, n, |_, _| rng.gen_range(-1.0..1.0)),
                DVector::from_fn(m, |_, _| rng.gen_range(0.1..2.0)),
            )
            .unwrap();
            let raw = run(&prob, &cfg).expect("feasible strictly convex program");
            assert!(
                raw.iterations < 40,
                "took {} iterations, expected fast convergence",
                raw.iterations
            );
        }
    }

    #[test]
    fn rank_deficient_equalities_are_regularized() {
        // Duplicated (consistent) equality rows make the KKT matrix
        // singular; the static regularization must still solve it.
        let prob = QpProblem::new(DMatrix::identity(2, 2), DVector::zeros(2))
            .unwrap()
            .with_equalities(
                DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]),
                DVector::from_row_slice(&[2.0, 2.0]),
            )
            .unwrap()
            .with_inequalities(
                DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
                DVector::from_row_slice(&[5.0]),
            )
            .unwrap();
        let raw = run(&prob, &QpConfig::default()).expect("regularized solve");
        assert!((raw.z[0] - 1.0).abs() < 1e-6);
        assert!((raw.z[1] - 1.0).abs() < 1e-6);
    }
}
