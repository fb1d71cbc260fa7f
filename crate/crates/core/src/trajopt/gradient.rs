//! Analytic trajectory-loss gradient and the preconditioned descent
//! optimizer.
//!
//! The loss reaches the decision variables through three channels, all
//! differentiated in closed form:
//!
//! 1. **Transmitted wrench.** The per-step loss depends on the solved QP
//!    variables `z`; the QP's balance right-hand side carries the
//!    transmitted wrench. The KKT adjoint ([`crate::qp::differentiate`])
//!    turns `∂L/∂z` into `∂L/∂b`, which chains through the closed-form
//!    grasp Jacobians `∂w/∂x_ee`, `∂w/∂x_go` (the torque row is scaled by
//!    the assembly's torque scale).
//! 2. **Balance-row geometry.** Rotating the grasped object moves its
//!    contact points, which changes the torque rows of the balance blocks:
//!    the grasped-object rows through the lever arm of each of its contact
//!    points, and — for a grasped-vertex-on-extrinsic-face contact — the
//!    extrinsic torque row through the motion of the projected foot point
//!    along the face. Force rows, desired-pose data, and gravity wrenches
//!    are constant in the decision variables.
//! 3. **Direct pose terms.** Smoothness acts on consecutive grasped poses;
//!    the penetration barrier's angular margin has derivative ±1 in the
//!    grasped rotation by branch.
//!
//! Plain descent stalls here: the elasticity makes force terms ~10⁶× stiffer
//! in curvature than the geometric ones. Each step therefore descends along
//! `P_k·g`, where `P_k = (J_kᵀS²J_k)⁻¹` is the inverse Gauss–Newton metric
//! of the wrench map at the initial iterate (`J_k = ∂w/∂x_ee`, `S` the
//! balance-row scaling). That equalizes curvature across pose components
//! while leaving the gradient itself exact; a backtracking line search with
//! an adaptive warm start does the rest.

use nalgebra::{DVector, Matrix3, Vector3};

use crate::compliance::transmitted_wrench_jacobians;
use crate::contact::ContactGeometry;
use crate::geometry::{perp, wrap_angle, Pose2};
use crate::par;
use crate::qp::{differentiate, DiffConfig};

use super::pipeline::{
    apply_constraints, evaluate_budgeted, evaluate_trajectory, StepEval, TrajectoryEval,
};
use super::{
    DecisionVariables, EvalBudget, LossWeights, OptimizeResult, OptimizerConfig, SkillSpec,
    TrajoptError, FORCE_EPS,
};

/// Gradient of the trajectory loss w.r.t. every decision variable.
#[derive(Debug, Clone, PartialEq)]
pub struct DecisionGradient {
    /// ∂L/∂x_ee,k as (x, y, θ) triples.
    pub x_ee: Vec<Vector3<f64>>,
    /// ∂L/∂x_go,k as (x, y, θ) triples.
    pub x_go: Vec<Vector3<f64>>,
}

impl DecisionGradient {
    fn zeros(k: usize) -> Self {
        Self {
            x_ee: vec![Vector3::zeros(); k],
            x_go: vec![Vector3::zeros(); k],
        }
    }

    /// Euclidean norm over all components.
    #[must_use]
    pub fn norm(&self) -> f64 {
        self.x_ee
            .iter()
            .chain(self.x_go.iter())
            .map(Vector3::norm_squared)
            .sum::<f64>()
            .sqrt()
    }
}

/// Rejects contact sets whose balance-row geometry the analytic gradient
/// does not cover: an extrinsic vertex on a grasped face makes the shared
/// material point (the foot of the projection) move with the grasped pose
/// inside *both* balance blocks, which this module does not differentiate.
fn validate_gradient_support(spec: &SkillSpec) -> Result<(), TrajoptError> {
    if spec
        .contacts
        .iter()
        .any(|g| matches!(g, ContactGeometry::EoVertexOnGoFace { .. }))
    {
        return Err(TrajoptError::InvalidSkill(
            "analytic gradient does not support extrinsic-vertex-on-grasped-face contacts; \
             use a sampling optimizer"
                .into(),
        ));
    }
    Ok(())
}

/// ∂L/∂z for one step's QP: force columns collect the tracked-force and
/// cone terms, slack columns the slack term. Zero when the step's loss does
/// not depend on its QP variables.
fn dl_dz_step(spec: &SkillSpec, step: &StepEval, weights: &LossWeights, kf: f64) -> DVector<f64> {
    let layout = &step.assembly.layout;
    let mut g = DVector::zeros(layout.n);
    let tracked = spec.tracked_indices();

    // Force tracking: every tracked force column gets the shared residual.
    let df = (spec.tracked_force(&step.solution.forces) - spec.f_des) * (2.0 * weights.w_force / kf);
    let carrying = tracked
        .iter()
        .filter(|&&i| {
            step.solution.forces.get(i).and_then(|f| f.as_ref()).is_some_and(|f| {
                (f.tangential * f.tangential + f.normal * f.normal).sqrt() > FORCE_EPS
            })
        })
        .count();
    for &i in &tracked {
        let Some(col) = layout.force_cols.get(i).copied().flatten() else {
            continue;
        };
        g[col] += df.x;
        g[col + 1] += df.y;
        // Cone alignment: c = (1 − f_n/r)², r = ‖f‖.
        if weights.w_cone > 0.0 && carrying > 0 {
            if let Some(Some(f)) = step.solution.forces.get(i) {
                let (ft, fn_) = (f.tangential, f.normal);
                let r = (ft * ft + fn_ * fn_).sqrt();
                if r > FORCE_EPS {
                    let a = 1.0 - fn_ / r;
                    let scale = weights.w_cone / (kf * carrying as f64);
                    let r3 = r * r * r;
                    g[col] += scale * 2.0 * a * fn_ * ft / r3;
                    g[col + 1] += scale * (-2.0 * a * ft * ft) / r3;
                }
            }
        }
    }

    if let (Some(sc), Some(s)) = (layout.slack_col, step.solution.slack.as_ref()) {
        let w = 2.0 * weights.w_slack / kf;
        for j in 0..3 {
            g[sc + j] += w * s[j];
        }
    }
    g
}

/// Angular penetration margin of the maintained vertex-face contact along
/// with its derivative in the grasped-object rotation.
///
/// The margin is −min over the vertex's two adjacent faces of
/// `min(β, π−β)`, where β is the face direction's angle above the edge
/// line. Every β moves one-for-one with the vertex body's rotation, so the
/// derivative is ±1 by branch (sign of the active `min` and of the outer
/// negation). Evaluated for grasped-vertex contacts only — the grasped body
/// is the vertex body, so `dφ/dθ_go = ∓1`; grasped pivots measure against
/// the ground line the same way.
fn gap_and_dtheta(spec: &SkillSpec, x_go: &Pose2, k: usize) -> Option<(f64, f64)> {
    use super::SkillKind;
    let (shape_v, pose_v, vertex, t_e, n_e) = match spec.kind {
        SkillKind::GraspedStatic | SkillKind::GraspedSlide => return None,
        SkillKind::GraspedPivot => {
            let vertex = spec.contacts.iter().find_map(|g| match g {
                ContactGeometry::GoVertexOnGround { vertex } => Some(*vertex),
                _ => None,
            })?;
            (
                &spec.scene.go_shape,
                x_go,
                vertex,
                nalgebra::Vector2::new(1.0, 0.0),
                nalgebra::Vector2::new(0.0, 1.0),
            )
        }
        _ => {
            let (vertex, face) = spec.contacts.iter().find_map(|g| match g {
                ContactGeometry::GoVertexOnEoFace { vertex, face } => Some((*vertex, *face)),
                _ => None,
            })?;
            let eo_shape = spec.scene.eo_shape.as_ref()?;
            let x_eo = spec.steps[k].x_eo.as_ref()?;
            let (e0, e1) = eo_shape.edge(face);
            let t = x_eo.rotate(e1 - e0).normalize();
            (
                &spec.scene.go_shape,
                x_go,
                vertex,
                t,
                nalgebra::Vector2::new(t.y, -t.x),
            )
        }
    };
    let n = shape_v.vertices.len();
    let v = shape_v.vertices[vertex];
    let prev = shape_v.vertices[(vertex + n - 1) % n];
    let next = shape_v.vertices[(vertex + 1) % n];
    let u1 = pose_v.rotate(prev - v).normalize();
    let u2 = pose_v.rotate(next - v).normalize();
    // φ = −min over the two faces of min(β, π−β). Track the active branch:
    // dβ/dθ_go = 1, so dφ/dθ_go = ∓1 depending on which side of the min is
    // active for the tighter face.
    let mut phi = f64::NEG_INFINITY;
    let mut dphi = 0.0;
    for u in [u1, u2] {
        let beta = u.dot(&n_e).atan2(u.dot(&t_e));
        let (margin, dmargin) = if beta <= std::f64::consts::PI - beta {
            (beta, 1.0)
        } else {
            (std::f64::consts::PI - beta, -1.0)
        };
        if -margin > phi {
            phi = -margin;
            dphi = -dmargin;
        }
    }
    Some((phi, dphi))
}

/// Trajectory loss with its analytic gradient, outside any budget.
///
/// # Errors
/// Evaluation errors, or [`TrajoptError::InvalidSkill`] when a contact's
/// balance-row geometry is unsupported (see [`optimize_gradient`]).
pub fn loss_gradient(
    spec: &SkillSpec,
    vars: &DecisionVariables,
    weights: &LossWeights,
) -> Result<(TrajectoryEval, DecisionGradient), TrajoptError> {
    validate_gradient_support(spec)?;
    let eval = evaluate_trajectory(spec, vars, weights)?;
    let grad = gradient_from_eval(spec, vars, &eval, weights)?;
    Ok((eval, grad))
}

/// Assembles the full gradient from an already-evaluated trajectory.
fn gradient_from_eval(
    spec: &SkillSpec,
    vars: &DecisionVariables,
    eval: &TrajectoryEval,
    weights: &LossWeights,
) -> Result<DecisionGradient, TrajoptError> {
    let k_steps = spec.horizon();
    let kf = k_steps as f64;
    let com = spec.scene.grasp.com_body;
    let ks: Vec<usize> = (0..k_steps).collect();

    // Per-step QP-coupled terms, independent across steps.
    let per_step = par::map_collect(&ks, |&k| -> Result<(Vector3<f64>, Vector3<f64>), TrajoptError> {
        let step = &eval.steps[k];
        let x_go = &vars.x_go[k];
        let dl_dz = dl_dz_step(spec, step, weights, kf);
        if dl_dz.iter().all(|v| *v == 0.0) {
            return Ok((Vector3::zeros(), Vector3::zeros()));
        }
        let grads = differentiate(
            &step.assembly.qp,
            &step.solution.qp,
            &dl_dz,
            &DiffConfig::default(),
        )?;
        let layout = &step.assembly.layout;
        let ts = step.assembly.torque_scale;
        let gr = layout.go_balance_row;

        // Channel 1: balance right-hand side —w_ext through the grasp.
        let g_b = Vector3::new(
            grads.eq_rhs[gr],
            grads.eq_rhs[gr + 1],
            grads.eq_rhs[gr + 2] / ts,
        );
        let (_, dw_dee, dw_dgo) = transmitted_wrench_jacobians(
            &spec.scene.elasticity,
            &spec.scene.grasp,
            &vars.x_ee[k],
            x_go,
        );
        let g_ee = -dw_dee.transpose() * g_b;
        let mut g_go = -dw_dgo.transpose() * g_b;

        // Channel 2: torque-row geometry of the grasped body's contacts.
        for (i, geom) in spec.contacts.iter().enumerate() {
            let Some(col) = layout.force_cols[i] else {
                continue;
            };
            let c = &step.contacts[i];
            match geom {
                ContactGeometry::GoVertexOnEoFace { vertex, .. }
                | ContactGeometry::GoVertexOnGround { vertex } => {
                    // Grasped-body torque row: entries (t·perp(r), n·perp(r))/ts
                    // with r = R(θ)·(v − com); dr/dθ = perp(r), and
                    // d(t·perp(r))/dθ = t·perp(perp(r)) = −t·r.
                    let r = x_go.rotate(spec.scene.go_shape.vertices[*vertex] - com);
                    let em_t = grads.eq_mat[(gr + 2, col)];
                    let em_n = grads.eq_mat[(gr + 2, col + 1)];
                    g_go.z += em_t * (-c.point.tangent.dot(&r) / ts)
                        + em_n * (-c.point.normal.dot(&r) / ts);

                    if matches!(geom, ContactGeometry::GoVertexOnEoFace { .. }) {
                        // Extrinsic torque row: its material point is the
                        // foot of the vertex on the face, which slides
                        // along the face tangent as the vertex moves. Only
                        // the normal column varies:
                        //   ∂A[(er+2, col+1)]/∂x_go,j = (t·∂v/∂x_go,j)/ts.
                        let er = layout
                            .eo_balance_row
                            .expect("object-object contact implies an extrinsic block");
                        let em = grads.eq_mat[(er + 2, col + 1)];
                        let t = c.point.tangent;
                        let dv_dtheta =
                            perp(x_go.rotate(spec.scene.go_shape.vertices[*vertex]));
                        g_go.x += em * t.x / ts;
                        g_go.y += em * t.y / ts;
                        g_go.z += em * t.dot(&dv_dtheta) / ts;
                    }
                }
                ContactGeometry::EoVertexOnGround { .. } => {
                    // Depends only on the desired extrinsic pose: constant.
                }
                ContactGeometry::EoVertexOnGoFace { .. } => {
                    unreachable!("rejected by validate_gradient_support");
                }
            }
        }

        // Channel 3a: penetration barrier, dL_pen/dθ_go.
        if weights.w_pen > 0.0 {
            if let Some((phi, dphi)) = gap_and_dtheta(spec, x_go, k) {
                debug_assert!(phi < 0.0);
                // d/dφ (0.1·ln(−φ))² = 0.02·ln(−φ)/φ.
                g_go.z += weights.w_pen / kf * 0.02 * (-phi).ln() / phi * dphi;
            }
        }
        Ok((g_ee, g_go))
    });

    let mut grad = DecisionGradient::zeros(k_steps);
    for (k, r) in per_step.into_iter().enumerate() {
        let (g_ee, g_go) = r?;
        grad.x_ee[k] = g_ee;
        grad.x_go[k] = g_go;
    }

    // Channel 3b: smoothness over consecutive grasped poses.
    if weights.w_smooth > 0.0 && k_steps > 1 {
        let w = 2.0 * weights.w_smooth / (k_steps - 1) as f64;
        let diff = |a: &Pose2, b: &Pose2| {
            Vector3::new(b.x - a.x, b.y - a.y, wrap_angle(b.theta - a.theta))
        };
        for k in 0..k_steps {
            let d_prev = if k > 0 {
                diff(&vars.x_go[k - 1], &vars.x_go[k])
            } else {
                Vector3::zeros()
            };
            let d_next = if k + 1 < k_steps {
                diff(&vars.x_go[k], &vars.x_go[k + 1])
            } else {
                Vector3::zeros()
            };
            grad.x_go[k] += w * (d_prev - d_next);
        }
    }

    // Grasped skills hold the grasped poses fixed; mask their block so the
    // reported gradient matches the feasible directions.
    if spec.kind.is_grasped() {
        for g in &mut grad.x_go {
            *g = Vector3::zeros();
        }
    }
    Ok(grad)
}

/// Per-step preconditioners `P_k = (J_kᵀ S² J_k)⁻¹`, `J_k = ∂w/∂x_ee` at
/// the initial iterate, `S = diag(1, 1, 1/torque_scale)`.
fn preconditioners(spec: &SkillSpec, vars: &DecisionVariables) -> Vec<Matrix3<f64>> {
    let ts = spec.scene.contact_config().torque_scale;
    let s2 = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, 1.0 / (ts * ts)));
    vars.x_ee
        .iter()
        .zip(&vars.x_go)
        .map(|(xe, xg)| {
            let (_, j, _) = transmitted_wrench_jacobians(
                &spec.scene.elasticity,
                &spec.scene.grasp,
                xe,
                xg,
            );
            let a = j.transpose() * s2 * j;
            a.try_inverse().unwrap_or_else(Matrix3::identity)
        })
        .collect()
}

/// Gradient-descent planner: analytic gradients through the per-step QPs,
/// a fixed elasticity-based preconditioner, and a backtracking line search
/// whose first trial step doubles the last accepted one.
///
/// Consumes one budget unit per trajectory evaluation (the initial
/// evaluation and every line-search trial). Returns the best evaluated
/// iterate; the history records the best-so-far total per iteration and is
/// non-increasing. Trial points that fail to evaluate (infeasible
/// equilibrium, geometry drift, barrier crossing) are rejected like any
/// non-improving step.
///
/// # Errors
/// [`TrajoptError::InfeasibleInit`] when the initial trajectory itself
/// fails; [`TrajoptError::InvalidSkill`] for unsupported contact sets (see
/// [`loss_gradient`]); gradient-assembly errors at accepted iterates.
pub fn optimize_gradient(
    spec: &SkillSpec,
    init: &DecisionVariables,
    weights: &LossWeights,
    config: &OptimizerConfig,
) -> Result<OptimizeResult, TrajoptError> {
    spec.validate()?;
    validate_gradient_support(spec)?;
    let mut vars = init.clone();
    apply_constraints(spec, &mut vars);

    let mut budget = EvalBudget::new(config.budget);
    let mut eval = match evaluate_budgeted(spec, &vars, weights, &mut budget) {
        Ok(e) => e,
        Err(TrajoptError::InfeasibleStep { step, status }) => {
            return Err(TrajoptError::InfeasibleInit { step, status })
        }
        Err(e) => return Err(e),
    };
    let precond = preconditioners(spec, &vars);

    let mut best_vars = vars.clone();
    let mut best = eval.loss;
    let mut history = vec![best.total];
    let mut last_step = config.step_size;

    for _ in 0..config.iterations {
        if budget.exhausted() {
            break;
        }
        let grad = gradient_from_eval(spec, &vars, &eval, weights)?;
        let dir: Vec<(Vector3<f64>, Vector3<f64>)> = (0..spec.horizon())
            .map(|k| (precond[k] * grad.x_ee[k], precond[k] * grad.x_go[k]))
            .collect();
        let dir_norm = dir
            .iter()
            .map(|(a, b)| a.norm_squared() + b.norm_squared())
            .sum::<f64>()
            .sqrt();
        if dir_norm < config.grad_tol {
            break;
        }

        let mut t = 2.0 * last_step;
        let mut accepted = false;
        for _ in 0..=config.max_halvings {
            if budget.exhausted() {
                break;
            }
            let mut cand = DecisionVariables {
                x_ee: vars
                    .x_ee
                    .iter()
                    .enumerate()
                    .map(|(k, p)| DecisionVariables::offset_pose(p, -t * dir[k].0))
                    .collect(),
                x_go: vars
                    .x_go
                    .iter()
                    .enumerate()
                    .map(|(k, p)| DecisionVariables::offset_pose(p, -t * dir[k].1))
                    .collect(),
            };
            apply_constraints(spec, &mut cand);
            match evaluate_budgeted(spec, &cand, weights, &mut budget) {
                Ok(e) if e.loss.total < eval.loss.total => {
                    vars = cand;
                    eval = e;
                    last_step = t;
                    accepted = true;
                    break;
                }
                Ok(_) => t *= config.backtrack_factor,
                Err(TrajoptError::BudgetExhausted) => break,
                // A bad trial point is a rejection, not a failure.
                Err(_) => t *= config.backtrack_factor,
            }
        }
        if eval.loss.total < best.total {
            best = eval.loss;
            best_vars = vars.clone();
        }
        history.push(best.total);
        if !accepted {
            break;
        }
    }

    Ok(OptimizeResult {
        vars: best_vars,
        loss: Some(best),
        history,
        evaluations: budget.used(),
    })
}
