//! Trajectory optimization through mode-fixed contact equilibria.
//!
//! A *skill* prescribes, per step `k = 0..K−1`, a desired extrinsic-object
//! pose, a fixed contact-mode assignment, and a desired force `f_des` at a
//! tracked contact. The decision variables are the end-effector poses
//! `{x_ee,k}` and grasped-object poses `{x_go,k}`. Evaluating a candidate
//! trajectory solves, at every step, the relaxed mode-fixed equilibrium
//! program (grasped-body balance slack-penalized, grasped–extrinsic cone
//! dropped; see [`Relaxation::Relaxed`](crate::contact::Relaxation)) at the
//! wrench the elastic grasp transmits, then scores
//!
//! ```text
//! L = w_cone·L_cone + w_smooth·L_smooth + w_force·L_force
//!   + w_pen·L_pen + w_slack·L_slack
//!
//! L_cone   = (1/K) Σ_k avg_i (1 − f_n,i/‖f_i‖)²          zero-force steps: 0
//! L_smooth = (1/(K−1)) Σ_k ‖x_go,k+1 ⊖ x_go,k‖²          (θ difference wrapped)
//! L_force  = (1/K) Σ_k ‖f_k − f_des‖²                    contact-frame (f_t, f_n)
//! L_pen    = (1/K) Σ_k (ln(−φ_k)/10)²                    requires φ_k < 0
//! L_slack  = (1/K) Σ_k ‖s_k‖²
//! ```
//!
//! `f_k` is the tracked force (a single contact, or the sum over
//! environment contacts), `φ_k` the angular penetration margin of the
//! maintained contact, and `s_k` the grasped-body balance slack. The slack
//! term is the price of the relaxation: a converged plan with `s_k ≈ 0` is a
//! true two-body equilibrium, which is exactly what lets the quasi-static
//! simulator reproduce it. The cone term rewards force direction (pure
//! normal scores 0), the barrier keeps the maintained contact away from
//! face-flush degeneracy, and the smoothness term couples consecutive
//! grasped-object poses.
//!
//! Three optimizers share one evaluation budget convention — the number of
//! full-trajectory evaluations, each of which solves K per-step QPs:
//!
//! * [`optimize_gradient`] — analytic descent. Per-step QP sensitivities
//!   (adjoint of the KKT system) are chained with the closed-form grasp
//!   Jacobians and the geometric dependence of the balance rows on the
//!   grasped-object pose; a fixed elasticity-based preconditioner and a
//!   backtracking line search handle the stiffness gap between pose and
//!   force directions.
//! * [`optimize_mppi`] — path-integral weighted perturbation averaging.
//! * [`optimize_icem`] — iterated elite resampling with noise decay.
//!
//! Samplers evaluate perturbations concurrently (see [`crate::par`]) but
//! draw them sequentially from a seeded generator and reduce in index
//! order, so results are reproducible bit-for-bit at any thread count.

mod gradient;
mod pipeline;
mod samplers;
pub mod skills;

pub use gradient::{loss_gradient, optimize_gradient, DecisionGradient};
pub use pipeline::{
    apply_constraints, evaluate_trajectory, init_trajectory, penetration_gap, StepEval,
    TrajectoryEval,
};
pub use samplers::{optimize_icem, optimize_mppi};

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::compliance::ComplianceError;
use crate::contact::{ContactError, ContactForce, ContactGeometry, ContactMode, ContactPair};
use crate::geometry::{wrap_angle, Pose2};
use crate::qp::{QpError, QpStatus};
use crate::sim::SimScene;

/// Errors raised while building, evaluating, or optimizing a skill
/// trajectory.
#[derive(Debug, Error)]
pub enum TrajoptError {
    /// The skill description is internally inconsistent.
    #[error("malformed skill: {0}")]
    InvalidSkill(String),
    /// A maintained contact reached or crossed face-flush alignment, so the
    /// log barrier is undefined.
    #[error("step {step}: penetration margin {gap:.3e} is not negative")]
    PenetrationInLoss {
        /// Step index.
        step: usize,
        /// Offending angular margin (≥ 0).
        gap: f64,
    },
    /// The relaxed equilibrium program failed at the initial trajectory.
    #[error("step {step}: relaxed equilibrium {status:?} at the initial trajectory")]
    InfeasibleInit {
        /// Step index.
        step: usize,
        /// Solver status.
        status: QpStatus,
    },
    /// The relaxed equilibrium program failed at an evaluated trajectory.
    #[error("step {step}: relaxed equilibrium {status:?}")]
    InfeasibleStep {
        /// Step index.
        step: usize,
        /// Solver status.
        status: QpStatus,
    },
    /// The skill geometry admits no non-penetrating contact placement.
    #[error("no valid contact placement: {0}")]
    NoContactPlacement(String),
    /// The trajectory-evaluation budget ran out.
    #[error("trajectory evaluation budget exhausted")]
    BudgetExhausted,
    /// Contact-model failure (geometry mismatch, bad input, inner QP).
    #[error(transparent)]
    Contact(#[from] ContactError),
    /// QP solve or differentiation failure.
    #[error(transparent)]
    Qp(#[from] QpError),
    /// Grasp-compliance failure.
    #[error(transparent)]
    Compliance(#[from] ComplianceError),
}

/// Manipulation skill family. Determines which poses move, which contact
/// supplies the penetration margin, and how the constraint projection
/// treats the grasped-object poses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkillKind {
    /// Hold the grasped object against a static extrinsic object.
    Static,
    /// Pivot the grasped object about its contact vertex on a static
    /// extrinsic object.
    RelativePivot,
    /// Slide the grasped object's contact vertex along an extrinsic face.
    RelativeSlide,
    /// Push the extrinsic object across the ground through a sticking
    /// contact.
    ExtrinsicPush,
    /// Tip the extrinsic object about a ground corner through a sticking
    /// contact.
    ExtrinsicPivot,
    /// Hold the grasped object on the ground (no extrinsic object).
    GraspedStatic,
    /// Pivot the grasped object about one of its own ground corners.
    GraspedPivot,
    /// Drag the grasped object across the ground.
    GraspedSlide,
}

impl SkillKind {
    /// True when the skill involves only the grasped object and the ground.
    /// Grasped skills prescribe the grasped-object poses outright: the
    /// projection pins `x_go,k` to the nominal schedule and the gradient is
    /// masked accordingly.
    #[inline]
    #[must_use]
    pub fn is_grasped(self) -> bool {
        matches!(
            self,
            Self::GraspedStatic | Self::GraspedPivot | Self::GraspedSlide
        )
    }
}

/// Which contact force the force loss tracks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ForceTracking {
    /// Track the force at one contact (index into the skill's contact list).
    Contact(usize),
    /// Track the summed force over all environment (ground) contacts. All
    /// ground contacts share the same frame, so the sum lives in it too.
    EnvironmentSum,
}

/// Per-step prescription: desired extrinsic pose, nominal grasped pose, and
/// the mode of every contact.
#[derive(Debug, Clone, PartialEq)]
pub struct SkillStep {
    /// Desired extrinsic-object pose (fixed parameter, not optimized).
    /// `None` for grasped skills.
    pub x_eo: Option<Pose2>,
    /// Nominal grasped-object pose. Initializes the decision variable; for
    /// grasped skills it is held exactly.
    pub x_go: Pose2,
    /// Contact mode per entry of [`SkillSpec::contacts`].
    pub modes: Vec<ContactMode>,
}

/// Full skill description: scene, contact set, per-step schedule, and the
/// tracked-force target.
#[derive(Debug, Clone)]
pub struct SkillSpec {
    /// Skill family.
    pub kind: SkillKind,
    /// Bodies, friction, elasticity, and grasp geometry.
    pub scene: SimScene,
    /// Symbolic contact set; resolved to frames at each step's poses.
    pub contacts: Vec<ContactGeometry>,
    /// Per-step schedule, length K ≥ 2.
    pub steps: Vec<SkillStep>,
    /// Desired tracked force, contact frame `(f_t, f_n)`.
    pub f_des: Vector2<f64>,
    /// Which force `f_des` constrains.
    pub tracked: ForceTracking,
}

impl SkillSpec {
    /// Number of steps K.
    #[inline]
    #[must_use]
    pub fn horizon(&self) -> usize {
        self.steps.len()
    }

    /// Indices (into `contacts`) whose force the loss tracks.
    #[must_use]
    pub fn tracked_indices(&self) -> Vec<usize> {
        match self.tracked {
            ForceTracking::Contact(i) => vec![i],
            ForceTracking::EnvironmentSum => self
                .contacts
                .iter()
                .enumerate()
                .filter(|(_, g)| g.pair() != ContactPair::ObjectObject)
                .map(|(i, _)| i)
                .collect(),
        }
    }

    /// Tracked force for one step's solved contact forces: the single
    /// tracked contact's `(f_t, f_n)`, or the sum over environment
    /// contacts. Inactive contacts contribute zero.
    #[must_use]
    pub fn tracked_force(&self, forces: &[Option<ContactForce>]) -> Vector2<f64> {
        let mut f = Vector2::zeros();
        for i in self.tracked_indices() {
            if let Some(Some(fi)) = forces.get(i) {
                f.x += fi.tangential;
                f.y += fi.normal;
            }
        }
        f
    }

    /// Structural validation: horizon, mode lengths, contact/tracking
    /// indices, and extrinsic-pose presence.
    ///
    /// # Errors
    /// [`TrajoptError::InvalidSkill`] describing the first defect found.
    pub fn validate(&self) -> Result<(), TrajoptError> {
        let bad = |m: String| Err(TrajoptError::InvalidSkill(m));
        if self.steps.len() < 2 {
            return bad(format!("horizon must be at least 2, got {}", self.steps.len()));
        }
        if self.contacts.is_empty() {
            return bad("skill has no contacts".into());
        }
        let needs_eo = self
            .contacts
            .iter()
            .any(|g| g.pair() != ContactPair::GoGround);
        if needs_eo && !self.scene.has_eo() {
            return bad("contacts reference an extrinsic object the scene lacks".into());
        }
        for (k, s) in self.steps.iter().enumerate() {
            if s.modes.len() != self.contacts.len() {
                return bad(format!(
                    "step {k}: {} modes for {} contacts",
                    s.modes.len(),
                    self.contacts.len()
                ));
            }
            if needs_eo && s.x_eo.is_none() {
                return bad(format!("step {k}: missing desired extrinsic pose"));
            }
            if !s.x_go.is_finite() {
                return bad(format!("step {k}: non-finite grasped-object pose"));
            }
        }
        if let ForceTracking::Contact(i) = self.tracked {
            if i >= self.contacts.len() {
                return bad(format!("tracked contact {i} out of range"));
            }
        } else if self.tracked_indices().is_empty() {
            return bad("environment-sum tracking with no environment contacts".into());
        }
        if !(self.f_des.x.is_finite() && self.f_des.y.is_finite()) {
            return bad("non-finite desired force".into());
        }
        if self.kind == SkillKind::GraspedPivot
            && !self
                .contacts
                .iter()
                .any(|g| matches!(g, ContactGeometry::GoVertexOnGround { .. }))
        {
            return bad("grasped pivot needs a grasped-object ground contact".into());
        }
        if !self.kind.is_grasped()
            && !self
                .contacts
                .iter()
                .any(|g| g.pair() == ContactPair::ObjectObject)
        {
            return bad("extrinsic skill needs an object-object contact".into());
        }
        Ok(())
    }
}

/// Decision variables: one end-effector and one grasped-object pose per
/// step.
#[derive(Debug, Clone, PartialEq)]
pub struct DecisionVariables {
    /// End-effector poses, length K.
    pub x_ee: Vec<Pose2>,
    /// Grasped-object poses, length K.
    pub x_go: Vec<Pose2>,
}

impl DecisionVariables {
    /// Horizon K.
    #[inline]
    #[must_use]
    pub fn horizon(&self) -> usize {
        self.x_ee.len()
    }

    /// True when every pose component is finite.
    #[must_use]
    pub fn is_finite(&self) -> bool {
        self.x_ee.iter().chain(self.x_go.iter()).all(Pose2::is_finite)
    }

    /// Pose update `x ← x + δ` with the rotation component wrapped.
    pub(crate) fn offset_pose(p: &Pose2, d: Vector3<f64>) -> Pose2 {
        Pose2::new(p.x + d.x, p.y + d.y, wrap_angle(p.theta + d.z))
    }
}

/// Loss weights. All default to 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Cone-alignment weight.
    pub w_cone: f64,
    /// Grasped-object smoothness weight.
    pub w_smooth: f64,
    /// Tracked-force weight.
    pub w_force: f64,
    /// Penetration-barrier weight.
    pub w_pen: f64,
    /// Balance-slack weight.
    pub w_slack: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            w_cone: 1.0,
            w_smooth: 1.0,
            w_force: 1.0,
            w_pen: 1.0,
            w_slack: 1.0,
        }
    }
}

impl LossWeights {
    fn validate(&self) -> Result<(), TrajoptError> {
        let all = [self.w_cone, self.w_smooth, self.w_force, self.w_pen, self.w_slack];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(TrajoptError::InvalidSkill(
                "loss weights must be finite and non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Per-term loss values (unweighted) and the weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    /// Cone-alignment term.
    pub cone: f64,
    /// Smoothness term.
    pub smooth: f64,
    /// Tracked-force term.
    pub force: f64,
    /// Penetration-barrier term.
    pub penetration: f64,
    /// Balance-slack term.
    pub slack: f64,
    /// Weighted sum of the five terms.
    pub total: f64,
}

/// Force magnitude below which a contact is treated as force-free by the
/// cone term.
pub(crate) const FORCE_EPS: f64 = 1e-12;

/// Trajectory loss from solved per-step quantities.
///
/// `forces[k]` are the solved contact forces at step `k` (aligned with
/// `spec.contacts`), `slacks[k]` the grasped-body balance slack, and
/// `gaps[k]` the penetration margin (strictly negative; grasped skills with
/// no maintained vertex-face contact use a constant placeholder).
///
/// # Errors
/// [`TrajoptError::PenetrationInLoss`] if any `gaps[k] ≥ 0`;
/// [`TrajoptError::InvalidSkill`] on malformed inputs or negative weights.
pub fn loss_total(
    spec: &SkillSpec,
    vars: &DecisionVariables,
    forces: &[Vec<Option<ContactForce>>],
    slacks: &[Option<Vector3<f64>>],
    gaps: &[f64],
    weights: &LossWeights,
) -> Result<LossBreakdown, TrajoptError> {
    weights.validate()?;
    let k_steps = spec.horizon();
    if vars.horizon() != k_steps
        || vars.x_go.len() != k_steps
        || forces.len() != k_steps
        || slacks.len() != k_steps
        || gaps.len() != k_steps
    {
        return Err(TrajoptError::InvalidSkill(format!(
            "length mismatch: {} steps, {} ee poses, {} go poses, {} force sets, {} slacks, {} gaps",
            k_steps,
            vars.x_ee.len(),
            vars.x_go.len(),
            forces.len(),
            slacks.len(),
            gaps.len()
        )));
    }
    let kf = k_steps as f64;
    let tracked = spec.tracked_indices();

    let mut cone = 0.0;
    let mut force = 0.0;
    let mut slack = 0.0;
    let mut pen = 0.0;
    for k in 0..k_steps {
        // Cone alignment over force-carrying tracked contacts.
        let mut cone_k = 0.0;
        let mut carrying = 0usize;
        for &i in &tracked {
            if let Some(Some(f)) = forces[k].get(i) {
                let r = (f.tangential * f.tangential + f.normal * f.normal).sqrt();
                if r > FORCE_EPS {
                    let a = 1.0 - f.normal / r;
                    cone_k += a * a;
                    carrying += 1;
                }
            }
        }
        if carrying > 0 {
            cone += cone_k / carrying as f64;
        }

        let df = spec.tracked_force(&forces[k]) - spec.f_des;
        force += df.norm_squared();

        if let Some(s) = &slacks[k] {
            slack += s.norm_squared();
        }

        let phi = gaps[k];
        if phi >= 0.0 {
            return Err(TrajoptError::PenetrationInLoss { step: k, gap: phi });
        }
        let b = 0.1 * (-phi).ln();
        pen += b * b;
    }
    cone /= kf;
    force /= kf;
    slack /= kf;
    pen /= kf;

    let mut smooth = 0.0;
    for k in 0..k_steps - 1 {
        let a = &vars.x_go[k];
        let b = &vars.x_go[k + 1];
        let dth = wrap_angle(b.theta - a.theta);
        smooth += (b.x - a.x).powi(2) + (b.y - a.y).powi(2) + dth * dth;
    }
    smooth /= (k_steps - 1) as f64;

    let total = weights.w_cone * cone
        + weights.w_smooth * smooth
        + weights.w_force * force
        + weights.w_pen * pen
        + weights.w_slack * slack;
    Ok(LossBreakdown {
        cone,
        smooth,
        force,
        penetration: pen,
        slack,
        total,
    })
}

/// Optimizer settings shared by the gradient method and the samplers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    /// Outer iterations.
    pub iterations: usize,
    /// Perturbations per iteration (samplers; the gradient method ignores
    /// it).
    pub samples: usize,
    /// Hard cap on full-trajectory evaluations. Every optimizer stops once
    /// `iterations` or this budget is exhausted, whichever comes first.
    pub budget: usize,
    /// Seed for the samplers' perturbation generator.
    pub seed: u64,
    /// Initial line-search step for the (preconditioned) gradient method.
    pub step_size: f64,
    /// Line-search shrink factor per rejection.
    pub backtrack_factor: f64,
    /// Maximum halvings per line search.
    pub max_halvings: usize,
    /// Stop when the preconditioned gradient norm falls below this.
    pub grad_tol: f64,
    /// Perturbation scale `(σ_translation [m], σ_rotation [rad])`.
    pub sigma: (f64, f64),
    /// Softmax temperature; `None` sets it to 0.1× the first sampled loss.
    pub mppi_temperature: Option<f64>,
    /// Elite fraction per iteration.
    pub icem_elite_frac: f64,
    /// Noise decay per iteration.
    pub icem_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            iterations: 100,
            samples: 1,
            budget: 100,
            seed: 0,
            step_size: 1.0,
            backtrack_factor: 0.5,
            max_halvings: 20,
            grad_tol: 1e-9,
            sigma: (1e-3, 1e-2),
            mppi_temperature: None,
            icem_elite_frac: 0.3,
            icem_decay: 0.9,
        }
    }
}

impl OptimizerConfig {
    /// Config with `iterations × samples` matched to `budget`.
    #[must_use]
    pub fn budgeted(iterations: usize, samples: usize, seed: u64) -> Self {
        Self {
            iterations,
            samples,
            budget: iterations * samples.max(1),
            seed,
            ..Self::default()
        }
    }
}

/// Optimizer output.
#[derive(Debug, Clone)]
pub struct OptimizeResult {
    /// Returned trajectory. Gradient: best evaluated iterate. iCEM: best
    /// evaluated sample. Weighted perturbation averaging: the final nominal
    /// (whose own loss is never spent from the budget).
    pub vars: DecisionVariables,
    /// Loss of `vars` when the optimizer actually evaluated it; `None` for
    /// the averaging sampler's nominal.
    pub loss: Option<LossBreakdown>,
    /// Best-so-far total loss over evaluated trajectories, one entry per
    /// iteration (the gradient method also records the initial
    /// evaluation). Non-increasing.
    pub history: Vec<f64>,
    /// Full-trajectory evaluations consumed (each solved K per-step QPs).
    pub evaluations: usize,
}

/// Counter for full-trajectory evaluations.
#[derive(Debug, Clone, Copy)]
pub(crate) struct EvalBudget {
    used: usize,
    max: usize,
}

impl EvalBudget {
    pub(crate) fn new(max: usize) -> Self {
        Self { used: 0, max }
    }

    pub(crate) fn used(&self) -> usize {
        self.used
    }

    pub(crate) fn remaining(&self) -> usize {
        self.max - self.used
    }

    pub(crate) fn exhausted(&self) -> bool {
        self.used >= self.max
    }

    /// Consume one evaluation; `false` (and no change) when spent.
    pub(crate) fn try_consume(&mut self) -> bool {
        if self.exhausted() {
            false
        } else {
            self.used += 1;
            true
        }
    }

    /// Consume `n` evaluations at once (samplers reserve a whole batch).
    pub(crate) fn consume_batch(&mut self, n: usize) {
        debug_assert!(n <= self.remaining());
        self.used += n;
    }
}
