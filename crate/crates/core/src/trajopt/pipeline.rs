//! Trajectory evaluation: per-step contact resolution, relaxed equilibrium
//! solves, penetration margins, and the contact-manifold projection.

use nalgebra::Vector3;

use crate::compliance::transmitted_wrench;
use crate::contact::{
    assemble_equilibrium, resolve_contact, solve_forces, ContactAssembly, ContactGeometry,
    ContactModelConfig, ContactPair, ContactSolution, EquilibriumInputs, LabeledContact,
    Relaxation, ResolveContext,
};
use crate::geometry::{
    transform_point, vertex_edge_angular_gap, vertex_ground_angular_gap, Pose2, Wrench2,
};
use crate::par;
use crate::qp::QpStatus;

use super::{
    loss_total, DecisionVariables, EvalBudget, LossBreakdown, LossWeights, SkillKind, SkillSpec,
    TrajoptError,
};

/// One evaluated step: resolved contacts, assembled program, solution, the
/// transmitted wrench, and the penetration margin.
#[derive(Debug, Clone)]
pub struct StepEval {
    /// Contacts resolved at this step's poses, aligned with
    /// [`SkillSpec::contacts`].
    pub contacts: Vec<LabeledContact>,
    /// Assembled relaxed equilibrium program.
    pub assembly: ContactAssembly,
    /// Solved forces, slack, and the raw QP solution.
    pub solution: ContactSolution,
    /// Wrench the grasp transmits at `(x_ee,k, x_go,k)`, world frame about
    /// the grasped object's CoM.
    pub w_ext: Wrench2,
    /// Angular penetration margin φ (negative = clear).
    pub gap: f64,
}

/// A fully evaluated trajectory.
#[derive(Debug, Clone)]
pub struct TrajectoryEval {
    /// Per-step results, length K.
    pub steps: Vec<StepEval>,
    /// Loss of the trajectory under the weights it was evaluated with.
    pub loss: LossBreakdown,
}

/// Contact-model configuration used by the planner: the scene's, with the
/// inner QP tightened so finite-difference checks and KKT-adjoint
/// sensitivities see a sharply converged solution.
pub(crate) fn planner_config(spec: &SkillSpec) -> ContactModelConfig {
    let mut cfg = spec.scene.contact_config();
    cfg.qp.tol = cfg.qp.tol.min(1e-11);
    cfg.qp.max_iters = cfg.qp.max_iters.max(200);
    cfg
}

/// Angular penetration margin for step `k` at grasped-object pose `x_go`.
///
/// Skills that maintain a vertex-face contact measure the angular gap of
/// that pairing; a grasped pivot measures its ground vertex against the
/// ground line. Flat-on-ground grasped skills have no maintained corner
/// contact and return the constant −1, which zeroes their barrier term.
#[must_use]
pub fn penetration_gap(spec: &SkillSpec, x_go: &Pose2, k: usize) -> f64 {
    match spec.kind {
        SkillKind::GraspedStatic | SkillKind::GraspedSlide => -1.0,
        SkillKind::GraspedPivot => {
            let vertex = spec
                .contacts
                .iter()
                .find_map(|g| match g {
                    ContactGeometry::GoVertexOnGround { vertex } => Some(*vertex),
                    _ => None,
                })
                .expect("validated: grasped pivot has a ground contact");
            vertex_ground_angular_gap(&spec.scene.go_shape, x_go, vertex)
        }
        _ => {
            let eo_shape = spec.scene.eo_shape.as_ref().expect("validated: has EO");
            let x_eo = spec.steps[k].x_eo.as_ref().expect("validated: has x_eo");
            let oo = spec
                .contacts
                .iter()
                .find_map(|g| match g {
                    ContactGeometry::GoVertexOnEoFace { vertex, face } => {
                        Some((true, *vertex, *face))
                    }
                    ContactGeometry::EoVertexOnGoFace { vertex, face } => {
                        Some((false, *vertex, *face))
                    }
                    _ => None,
                })
                .expect("validated: extrinsic skill has an object-object contact");
            match oo {
                (true, vertex, face) => vertex_edge_angular_gap(
                    &spec.scene.go_shape,
                    x_go,
                    vertex,
                    eo_shape,
                    x_eo,
                    face,
                ),
                (false, vertex, face) => vertex_edge_angular_gap(
                    eo_shape,
                    x_eo,
                    vertex,
                    &spec.scene.go_shape,
                    x_go,
                    face,
                ),
            }
        }
    }
}

/// Projects the decision variables onto the skill's contact manifold.
///
/// Grasped skills pin every `x_go,k` to the nominal schedule. Extrinsic
/// skills translate `x_go,k` along the maintained face's outward normal so
/// the designated vertex lies exactly on the face line (rotations are left
/// untouched; the angular margin does not depend on translation).
/// Already-satisfied poses are returned bit-identical, so the projection is
/// idempotent.
pub fn apply_constraints(spec: &SkillSpec, vars: &mut DecisionVariables) {
    if spec.kind.is_grasped() {
        for (k, step) in spec.steps.iter().enumerate() {
            if k < vars.x_go.len() {
                vars.x_go[k] = step.x_go;
            }
        }
        return;
    }
    let Some(eo_shape) = spec.scene.eo_shape.as_ref() else {
        return;
    };
    let oo = spec.contacts.iter().find_map(|g| match g {
        ContactGeometry::GoVertexOnEoFace { vertex, face } => Some((true, *vertex, *face)),
        ContactGeometry::EoVertexOnGoFace { vertex, face } => Some((false, *vertex, *face)),
        _ => None,
    });
    let Some((go_vertex_on_eo, vertex, face)) = oo else {
        return;
    };
    for (k, step) in spec.steps.iter().enumerate() {
        let Some(x_eo) = step.x_eo.as_ref() else {
            continue;
        };
        let x_go = &mut vars.x_go[k];
        let shift = if go_vertex_on_eo {
            // Move the grasped object so its vertex sits on the extrinsic
            // face line: shift by −g·n̂ where g is the signed separation
            // along the face's outward normal.
            let v_w = transform_point(x_go, spec.scene.go_shape.vertices[vertex]);
            let (e0, _) = eo_shape.edge(face);
            let n = x_eo.rotate(eo_shape.edge_outward_normal(face));
            -(v_w - transform_point(x_eo, e0)).dot(&n) * n
        } else {
            // Move the grasped object so its face line touches the fixed
            // extrinsic vertex: shift by +g·n̂ along the grasped face's
            // outward normal.
            let v_w = transform_point(x_eo, eo_shape.vertices[vertex]);
            let (g0, _) = spec.scene.go_shape.edge(face);
            let n = x_go.rotate(spec.scene.go_shape.edge_outward_normal(face));
            (v_w - transform_point(x_go, g0)).dot(&n) * n
        };
        if shift.norm() > 1e-14 {
            *x_go = Pose2::new(x_go.x + shift.x, x_go.y + shift.y, x_go.theta);
        }
    }
}

/// Evaluates one step: resolve the contact set at the step's poses, form
/// the transmitted wrench, assemble and solve the relaxed equilibrium, and
/// measure the penetration margin.
fn eval_step(
    spec: &SkillSpec,
    cfg: &ContactModelConfig,
    vars: &DecisionVariables,
    k: usize,
) -> Result<StepEval, TrajoptError> {
    let step = &spec.steps[k];
    let x_go = vars.x_go[k];
    let ctx = ResolveContext {
        go_shape: &spec.scene.go_shape,
        go_pose: x_go,
        eo_shape: spec.scene.eo_shape.as_ref(),
        eo_pose: step.x_eo,
        ground_y: spec.scene.ground_y,
    };
    let contacts = spec
        .contacts
        .iter()
        .zip(&step.modes)
        .map(|(g, m)| resolve_contact(*g, *m, spec.scene.mu_for(g.pair()), &ctx))
        .collect::<Result<Vec<_>, _>>()?;

    let w_ext = transmitted_wrench(
        &spec.scene.elasticity,
        &spec.scene.grasp,
        &vars.x_ee[k],
        &x_go,
    );
    let inputs = EquilibriumInputs {
        go_body: &spec.scene.go_body,
        go_pose: x_go,
        eo_body: spec.scene.eo_body.as_ref(),
        eo_pose: step.x_eo,
        w_ext,
        contacts: &contacts,
        config: cfg,
    };
    let assembly = assemble_equilibrium(&inputs, Relaxation::Relaxed)?;
    let solution = solve_forces(&assembly, &cfg.qp)?;
    if solution.status != QpStatus::Optimal {
        return Err(TrajoptError::InfeasibleStep {
            step: k,
            status: solution.status,
        });
    }
    let gap = penetration_gap(spec, &x_go, k);
    Ok(StepEval {
        contacts,
        assembly,
        solution,
        w_ext,
        gap,
    })
}

/// Evaluates a full trajectory: K per-step relaxed equilibrium solves (run
/// concurrently, reduced in step order) plus the loss.
///
/// This is the uncounted entry point for inspection and tests; the
/// optimizers route through the budgeted wrapper.
///
/// # Errors
/// The first failing step's error (by step index), or a loss error.
pub fn evaluate_trajectory(
    spec: &SkillSpec,
    vars: &DecisionVariables,
    weights: &LossWeights,
) -> Result<TrajectoryEval, TrajoptError> {
    spec.validate()?;
    if vars.horizon() != spec.horizon() || vars.x_go.len() != spec.horizon() {
        return Err(TrajoptError::InvalidSkill(format!(
            "{} decision steps for a {}-step skill",
            vars.horizon().min(vars.x_go.len()),
            spec.horizon()
        )));
    }
    if !vars.is_finite() {
        return Err(TrajoptError::InvalidSkill(
            "non-finite decision variables".into(),
        ));
    }
    let cfg = planner_config(spec);
    let ks: Vec<usize> = (0..spec.horizon()).collect();
    let per_step = par::map_collect(&ks, |&k| eval_step(spec, &cfg, vars, k));
    let mut steps = Vec::with_capacity(per_step.len());
    for r in per_step {
        steps.push(r?);
    }

    let forces: Vec<_> = steps.iter().map(|s| s.solution.forces.clone()).collect();
    let slacks: Vec<Option<Vector3<f64>>> = steps.iter().map(|s| s.solution.slack).collect();
    let gaps: Vec<f64> = steps.iter().map(|s| s.gap).collect();
    let loss = loss_total(spec, vars, &forces, &slacks, &gaps, weights)?;
    Ok(TrajectoryEval { steps, loss })
}

/// Budget-metered evaluation: consumes one evaluation up front (attempts
/// count — a failed trajectory still spent its solves) and then evaluates.
pub(crate) fn evaluate_budgeted(
    spec: &SkillSpec,
    vars: &DecisionVariables,
    weights: &LossWeights,
    budget: &mut EvalBudget,
) -> Result<TrajectoryEval, TrajoptError> {
    if !budget.try_consume() {
        return Err(TrajoptError::BudgetExhausted);
    }
    evaluate_trajectory(spec, vars, weights)
}

/// Initial trajectory for a skill: the nominal grasped-object schedule with
/// the end-effector at its zero-deflection rest pose.
///
/// Verifies that every step's contact set resolves with paired points
/// within the geometric tolerance and that every penetration margin is
/// strictly negative.
///
/// # Errors
/// [`TrajoptError::NoContactPlacement`] when a contact cannot be placed or
/// a margin is non-negative; validation errors for malformed skills.
pub fn init_trajectory(spec: &SkillSpec) -> Result<DecisionVariables, TrajoptError> {
    spec.validate()?;
    let cfg = planner_config(spec);
    let mut x_ee = Vec::with_capacity(spec.horizon());
    let mut x_go = Vec::with_capacity(spec.horizon());
    for (k, step) in spec.steps.iter().enumerate() {
        let ctx = ResolveContext {
            go_shape: &spec.scene.go_shape,
            go_pose: step.x_go,
            eo_shape: spec.scene.eo_shape.as_ref(),
            eo_pose: step.x_eo,
            ground_y: spec.scene.ground_y,
        };
        for (i, g) in spec.contacts.iter().enumerate() {
            let resolved = resolve_contact(*g, step.modes[i], spec.scene.mu_for(g.pair()), &ctx)
                .map_err(|e| {
                    TrajoptError::NoContactPlacement(format!("step {k}, contact {i}: {e}"))
                })?;
            // World positions of the paired material points. Body A is the
            // grasped object for object-object and ground contacts of the
            // grasped object, the extrinsic object for its ground contacts;
            // the ground's "body frame" is the world frame.
            let pa = match g.pair() {
                ContactPair::ObjectObject | ContactPair::GoGround => {
                    transform_point(&step.x_go, resolved.point.body_a_point)
                }
                ContactPair::EoGround => {
                    transform_point(step.x_eo.as_ref().expect("validated"), resolved.point.body_a_point)
                }
            };
            let pb = match g.pair() {
                ContactPair::ObjectObject => {
                    transform_point(step.x_eo.as_ref().expect("validated"), resolved.point.body_b_point)
                }
                ContactPair::EoGround | ContactPair::GoGround => resolved.point.body_b_point,
            };
            let sep = (pa - pb).norm();
            if sep > cfg.geometry_tol {
                return Err(TrajoptError::NoContactPlacement(format!(
                    "step {k}, contact {i}: paired points {sep:.3e} m apart"
                )));
            }
        }
        let gap = penetration_gap(spec, &step.x_go, k);
        if gap >= 0.0 {
            return Err(TrajoptError::NoContactPlacement(format!(
                "step {k}: penetration margin {gap:.3e} is not negative"
            )));
        }
        x_ee.push(spec.scene.grasp.rest_ee_for(&step.x_go));
        x_go.push(step.x_go);
    }
    Ok(DecisionVariables { x_ee, x_go })
}
