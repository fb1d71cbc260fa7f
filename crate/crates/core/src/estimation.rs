//! Pose and contact estimation from tactile measurements.
//!
//! Two estimators back the closed-loop stack:
//!
//! - [`fit_pose`] aligns a measured boundary point cloud to a polygon by
//!   iterated closest points: each sweep matches every point to its nearest
//!   boundary point at the current pose, then re-solves the rigid alignment
//!   in closed form (2-D Procrustes). The matched-pair objective cannot
//!   increase across sweeps.
//! - [`estimate_contact`] localizes a single external contact from a sensed
//!   wrench: candidate contact points are swept along every face, each one
//!   solves a tiny friction-cone-constrained least-squares QP for the force
//!   that best reproduces the wrench, and the candidate with the smallest
//!   residual wins (ties resolved by sweep order: face, then arc position).
//!
//! Torque components are scaled by the shape's radius of gyration inside the
//! wrench-matching residual so force and torque errors are commensurable.

use nalgebra::{DMatrix, DVector, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::contact::ContactForce;
use crate::geometry::{
    contact_jacobian, cross2, radius_of_gyration, transform_point, BodyParams, ContactPoint,
    PolygonShape, Pose2, Vec2, Wrench2,
};
use crate::qp::{self, QpConfig, QpError, QpProblem, QpStatus};

/// Errors from the estimators.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum EstimationError {
    /// Too few points to constrain a planar pose.
    #[error("pose fitting needs at least 3 points, got {count}")]
    TooFewPoints {
        /// Number of points supplied.
        count: usize,
    },
    /// The alignment did not settle within the iteration cap.
    #[error("pose fit did not converge in {iters} iterations (rms {residual:.3e})")]
    NonConvergence {
        /// Iterations performed.
        iters: usize,
        /// Root-mean-square point-to-boundary residual at the last iterate.
        residual: f64,
    },
    /// The candidate sweep was empty.
    #[error("contact estimation needs at least one sample per face")]
    NoCandidates,
    /// Underlying QP failure.
    #[error("qp: {0}")]
    Qp(#[from] QpError),
}

// ---------------------------------------------------------------------------
// Pose fitting (iterated closest points)
// ---------------------------------------------------------------------------

/// Pose-fit iteration controls.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PoseFitConfig {
    /// Iteration cap.
    pub max_iters: usize,
    /// Pose-update convergence threshold (meters and radians).
    pub tol: f64,
}

impl Default for PoseFitConfig {
    fn default() -> Self {
        Self {
            max_iters: 50,
            tol: 1e-7,
        }
    }
}

/// A converged pose fit.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseFit {
    /// Aligned pose.
    pub pose: Pose2,
    /// Root-mean-square point-to-boundary distance at the solution.
    pub rms: f64,
    /// Sweeps used.
    pub iterations: usize,
    /// Matched-pair rms after each sweep (non-increasing).
    pub history: Vec<f64>,
}

/// Fits the pose of `shape` to world-frame boundary `points`, starting from
/// `init`.
///
/// Convergence is declared when one sweep moves the pose by less than
/// `tol` in every component, or when the matched-pair rms stalls (noisy
/// clouds settle at the noise floor while correspondences keep trading
/// places). The fit is local: `init` selects the basin, so symmetric shapes
/// converge to the symmetry image nearest the guess.
///
/// # Errors
/// [`EstimationError::TooFewPoints`] for fewer than 3 points;
/// [`EstimationError::NonConvergence`] when the cap is reached.
pub fn fit_pose(
    shape: &PolygonShape,
    points: &[Vec2],
    init: Pose2,
    config: &PoseFitConfig,
) -> Result<PoseFit, EstimationError> {
    if points.len() < 3 {
        return Err(EstimationError::TooFewPoints {
            count: points.len(),
        });
    }
    let inv_n = 1.0 / points.len() as f64;
    let mut pose = init;
    let mut history: Vec<f64> = Vec::new();
    let mut src = vec![Vec2::zeros(); points.len()];
    for iter in 1..=config.max_iters {
        // Match each measurement to its nearest boundary point (body frame).
        let inv = pose.inverse();
        for (s, &p) in src.iter_mut().zip(points) {
            let body = transform_point(&inv, p);
            *s = shape.closest_boundary_point(body).0;
        }
        // Closed-form rigid alignment of the matched pairs.
        let s_mean = src.iter().sum::<Vec2>() * inv_n;
        let p_mean = points.iter().sum::<Vec2>() * inv_n;
        let (mut dot, mut cross) = (0.0, 0.0);
        for (s, &p) in src.iter().zip(points) {
            let sc = s - s_mean;
            let pc = p - p_mean;
            dot += sc.dot(&pc);
            cross += cross2(sc, pc);
        }
        let theta = if dot == 0.0 && cross == 0.0 {
            pose.theta
        } else {
            cross.atan2(dot)
        };
        let next = {
            let r = Pose2::new(0.0, 0.0, theta);
            let t = p_mean - r.rotate(s_mean);
            Pose2::new(t.x, t.y, theta)
        };
        let dt = (next.translation() - pose.translation()).norm();
        let dth = crate::geometry::wrap_angle(next.theta - pose.theta).abs();
        pose = next;
        let rms = (src
            .iter()
            .zip(points)
            .map(|(s, &p)| (transform_point(&pose, *s) - p).norm_squared())
            .sum::<f64>()
            * inv_n)
            .sqrt();
        let stalled = history
            .last()
            .is_some_and(|&prev| (prev - rms).abs() < 1e-12 * rms.max(1.0));
        history.push(rms);
        if dt.max(dth) < config.tol || stalled {
            return Ok(PoseFit {
                pose,
                rms,
                iterations: iter,
                history,
            });
        }
    }
    Err(EstimationError::NonConvergence {
        iters: config.max_iters,
        residual: history.last().copied().unwrap_or(f64::INFINITY),
    })
}

/// Samples `n` points uniformly by arc length along a shape's boundary at a
/// pose — synthetic measurement clouds for tests and demos.
#[must_use]
pub fn sample_boundary(shape: &PolygonShape, pose: &Pose2, n: usize) -> Vec<Vec2> {
    let edges = shape.num_edges();
    let perimeter: f64 = (0..edges)
        .map(|i| {
            let (a, b) = shape.edge(i);
            (b - a).norm()
        })
        .sum();
    let mut out = Vec::with_capacity(n);
    for k in 0..n {
        let mut target = perimeter * k as f64 / n as f64;
        for i in 0..edges {
            let (a, b) = shape.edge(i);
            let len = (b - a).norm();
            if target <= len || i == edges - 1 {
                let s = (target / len).min(1.0);
                out.push(transform_point(pose, a + (b - a) * s));
                break;
            }
            target -= len;
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Contact localization from a sensed wrench
// ---------------------------------------------------------------------------

/// Contact-sweep controls.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ContactSweepConfig {
    /// Candidate points per face, at arc fractions k/n for k = 0..n (the
    /// far vertex belongs to the next face).
    pub samples_per_face: usize,
    /// QP settings for the per-candidate force fit.
    pub qp: QpConfig,
}

impl Default for ContactSweepConfig {
    fn default() -> Self {
        Self {
            samples_per_face: 20,
            qp: QpConfig::default(),
        }
    }
}

/// One evaluated contact hypothesis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContactCandidate {
    /// Face the candidate lies on.
    pub face: usize,
    /// Arc fraction along the face, in [0, 1).
    pub s: f64,
    /// Candidate contact point, body frame.
    pub body_point: Vec2,
    /// Best cone-feasible force at this point (contact frame).
    pub force: ContactForce,
    /// Scaled wrench mismatch ‖w − Jᵀf‖ at the best force.
    pub residual: f64,
}

/// Result of a contact sweep: every candidate plus the winner's index.
#[derive(Debug, Clone, PartialEq)]
pub struct ContactEstimate {
    /// Index of the minimum-residual candidate (first wins ties).
    pub best: usize,
    /// All candidates in sweep order (face-major, then arc).
    pub candidates: Vec<ContactCandidate>,
}

impl ContactEstimate {
    /// The winning candidate.
    #[inline]
    #[must_use]
    pub fn best_candidate(&self) -> &ContactCandidate {
        &self.candidates[self.best]
    }
}

/// Localizes a single pushing contact from a wrench sensed on the body.
///
/// `wrench` is the external contact wrench about the body's CoM, world
/// frame. Every candidate point fits the cone-constrained force that best
/// reproduces it; the frame at each candidate points from the environment
/// into the body (inward face normal), so a pushing contact has f_n ≥ 0.
///
/// # Errors
/// [`EstimationError::NoCandidates`] when `samples_per_face` is zero;
/// [`EstimationError::Qp`] if a per-candidate solve fails numerically.
pub fn estimate_contact(
    shape: &PolygonShape,
    body: &BodyParams,
    pose: &Pose2,
    wrench: &Wrench2,
    mu: f64,
    config: &ContactSweepConfig,
) -> Result<ContactEstimate, EstimationError> {
    if config.samples_per_face == 0 {
        return Err(EstimationError::NoCandidates);
    }
    let ts = radius_of_gyration(shape);
    let w_scaled = Vector3::new(wrench.fx, wrench.fy, wrench.tau / ts);
    let n_faces = shape.num_edges();
    let per = config.samples_per_face;

    let mut meta = Vec::with_capacity(n_faces * per);
    let mut problems = Vec::with_capacity(n_faces * per);
    for face in 0..n_faces {
        let (a, b) = shape.edge(face);
        let inward = -shape.edge_outward_normal(face);
        for k in 0..per {
            let s = k as f64 / per as f64;
            let body_point = a + (b - a) * s;
            let cp = ContactPoint::new(
                body_point,
                transform_point(pose, body_point),
                pose.rotate(inward),
            );
            let j = contact_jacobian(pose, body, &cp).0;
            // Scale the torque column so the residual mixes units sanely.
            let mut js = j;
            js[(0, 2)] /= ts;
            js[(1, 2)] /= ts;
            // min ‖w − Jᵀf‖² over the friction cone, as a QP in f.
            let q_mat = 2.0 * &js * js.transpose();
            let q_vec = -2.0 * &js * w_scaled;
            let g = DMatrix::from_row_slice(3, 2, &[0.0, -1.0, 1.0, -mu, -1.0, -mu]);
            let h = DVector::zeros(3);
            let prob = QpProblem::new(
                DMatrix::from_iterator(2, 2, q_mat.iter().copied()),
                DVector::from_iterator(2, q_vec.iter().copied()),
            )?
            .with_inequalities(g, h)?;
            meta.push((face, s, body_point));
            problems.push(prob);
        }
    }

    let solutions = qp::solve_batch(&problems, &config.qp);
    let mut candidates = Vec::with_capacity(meta.len());
    let mut best = 0usize;
    let mut best_residual = f64::INFINITY;
    for (i, ((face, s, body_point), sol)) in meta.into_iter().zip(solutions).enumerate() {
        let sol = sol?;
        debug_assert_eq!(sol.status, QpStatus::Optimal, "cone fit is always feasible");
        let force = ContactForce::new(sol.z[0], sol.z[1]);
        let residual = (sol.objective + w_scaled.norm_squared()).max(0.0).sqrt();
        if residual < best_residual {
            best_residual = residual;
            best = i;
        }
        candidates.push(ContactCandidate {
            face,
            s,
            body_point,
            force,
            residual,
        });
    }
    Ok(ContactEstimate { best, candidates })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn pose_fit_recovers_a_perturbed_pose() {
        let shape = PolygonShape::box_shape(0.1, 0.06);
        let truth = Pose2::new(0.31, 0.12, 0.4);
        let points = sample_boundary(&shape, &truth, 40);
        let init = Pose2::new(0.33, 0.10, 0.32);
        let fit = fit_pose(&shape, &points, init, &PoseFitConfig::default()).unwrap();
        assert!(fit.rms < 1e-6, "rms {}", fit.rms);
        assert_relative_eq!(fit.pose.x, truth.x, epsilon = 1e-5);
        assert_relative_eq!(fit.pose.y, truth.y, epsilon = 1e-5);
        assert_relative_eq!(fit.pose.theta, truth.theta, epsilon = 1e-4);
    }

    #[test]
    fn pose_fit_history_never_increases() {
        let shape = PolygonShape::regular(5, 0.05, 0.0);
        let truth = Pose2::new(-0.1, 0.2, 0.9);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut points = sample_boundary(&shape, &truth, 60);
        for p in &mut points {
            p.x += rng.gen_range(-1e-3..1e-3);
            p.y += rng.gen_range(-1e-3..1e-3);
        }
        let init = Pose2::new(-0.08, 0.22, 0.75);
        // Noisy clouds slide slowly along flat faces; give the fit room.
        let cfg = PoseFitConfig {
            max_iters: 500,
            ..Default::default()
        };
        let fit = fit_pose(&shape, &points, init, &cfg).unwrap();
        for w in fit.history.windows(2) {
            assert!(
                w[1] <= w[0] + 1e-12,
                "rms increased: {} -> {}",
                w[0],
                w[1]
            );
        }
        assert!(fit.rms < 2e-3);
    }

    #[test]
    fn pose_fit_rejects_tiny_clouds() {
        let shape = PolygonShape::box_shape(0.1, 0.1);
        let err = fit_pose(
            &shape,
            &[Vec2::new(0.0, 0.0), Vec2::new(0.1, 0.0)],
            Pose2::identity(),
            &PoseFitConfig::default(),
        )
        .unwrap_err();
        assert_eq!(err, EstimationError::TooFewPoints { count: 2 });
    }

    /// A wrench synthesized from a known in-cone contact force is localized
    /// to within one sample spacing, with near-zero residual.
    #[test]
    fn contact_sweep_recovers_a_synthetic_push()  {
        let shape = PolygonShape::box_shape(0.08, 0.06);
        let body = BodyParams::from_shape(&shape, 1.0);
        let pose = Pose2::new(0.05, 0.2, 0.3);
        let mu = 0.4;
        let config = ContactSweepConfig::default();
        // True contact: face 1 (right side), 35% along.
        let (a, b) = shape.edge(1);
        let true_point = a + (b - a) * 0.35;
        let inward = -shape.edge_outward_normal(1);
        let cp = ContactPoint::new(true_point, transform_point(&pose, true_point), pose.rotate(inward));
        let j = contact_jacobian(&pose, &body, &cp);
        let w = j.wrench_from_force(0.2, 1.5); // strictly inside the cone
        let est = estimate_contact(&shape, &body, &pose, &w, mu, &config).unwrap();
        let best = est.best_candidate();
        assert_eq!(best.face, 1);
        let spacing = (b - a).norm() / config.samples_per_face as f64;
        assert!(
            (best.body_point - true_point).norm() <= spacing + 1e-12,
            "missed by {}",
            (best.body_point - true_point).norm()
        );
        assert!(best.residual < 1e-6, "residual {}", best.residual);
        assert!(best.force.normal > 0.0);
    }

    /// Candidate count and ordering are deterministic, and the sweep is
    /// face-major.
    #[test]
    fn sweep_order_is_face_major() {
        let shape = PolygonShape::regular(3, 0.05, 0.0);
        let body = BodyParams::from_shape(&shape, 0.5);
        let pose = Pose2::identity();
        let w = Wrench2::new(0.1, -0.2, 0.001);
        let cfg = ContactSweepConfig {
            samples_per_face: 4,
            ..Default::default()
        };
        let est = estimate_contact(&shape, &body, &pose, &w, 0.3, &cfg).unwrap();
        assert_eq!(est.candidates.len(), 12);
        for (i, c) in est.candidates.iter().enumerate() {
            assert_eq!(c.face, i / 4);
            assert_relative_eq!(c.s, (i % 4) as f64 / 4.0);
        }
    }

    #[test]
    fn zero_samples_rejected() {
        let shape = PolygonShape::box_shape(0.1, 0.1);
        let body = BodyParams::from_shape(&shape, 1.0);
        let cfg = ContactSweepConfig {
            samples_per_face: 0,
            ..Default::default()
        };
        let err = estimate_contact(
            &shape,
            &body,
            &Pose2::identity(),
            &Wrench2::zero(),
            0.3,
            &cfg,
        )
        .unwrap_err();
        assert_eq!(err, EstimationError::NoCandidates);
    }

    /// The cone constraint matters: a wrench that would need pulling
    /// (negative normal force) from the true face gets a positive residual
    /// there and a better explanation from the opposite face.
    #[test]
    fn pulling_wrenches_prefer_the_opposite_face() {
        let shape = PolygonShape::box_shape(0.08, 0.08);
        let body = BodyParams::from_shape(&shape, 1.0);
        let pose = Pose2::identity();
        // Pure +x force at the CoM height on the right face would need the
        // right-face contact to pull; the left face (inward normal +x)
        // explains it by pushing.
        let w = Wrench2::new(1.0, 0.0, 0.0);
        let est = estimate_contact(&shape, &body, &pose, &w, 0.4, &ContactSweepConfig::default())
            .unwrap();
        let best = est.best_candidate();
        // Left face of the box: inward normal is +x.
        let inward = -shape.edge_outward_normal(best.face);
        assert!(inward.x > 0.99, "expected a face pushing along +x");
        assert!(best.residual < 1e-6);
    }

    /// Refining the sweep 10× keeps the answer within the coarse spacing.
    #[test]
    fn dense_sweep_agrees_with_coarse() {
        let shape = PolygonShape::regular(7, 0.06, 0.0);
        let body = BodyParams::from_shape(&shape, 0.8);
        let pose = Pose2::new(0.02, 0.15, -0.2);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..5 {
            let face = rng.gen_range(0..shape.num_edges());
            let s: f64 = rng.gen_range(0.0..1.0);
            let (a, b) = shape.edge(face);
            let pt = a + (b - a) * s;
            let inward = -shape.edge_outward_normal(face);
            let cp = ContactPoint::new(pt, transform_point(&pose, pt), pose.rotate(inward));
            let j = contact_jacobian(&pose, &body, &cp);
            let f_n = rng.gen_range(0.5..3.0);
            let f_t = rng.gen_range(-0.3..0.3) * f_n;
            let w = j.wrench_from_force(f_t, f_n);
            let coarse_cfg = ContactSweepConfig::default();
            let coarse = estimate_contact(&shape, &body, &pose, &w, 0.35, &coarse_cfg).unwrap();
            let dense_cfg = ContactSweepConfig {
                samples_per_face: 200,
                ..Default::default()
            };
            let dense = estimate_contact(&shape, &body, &pose, &w, 0.35, &dense_cfg).unwrap();
            let spacing = (b - a).norm() / coarse_cfg.samples_per_face as f64;
            let gap = (coarse.best_candidate().body_point - dense.best_candidate().body_point)
                .norm();
            assert!(gap <= spacing + 1e-12, "coarse/dense gap {gap}");
        }
    }
}
