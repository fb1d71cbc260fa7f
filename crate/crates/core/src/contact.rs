//! Mode-fixed contact equilibrium programs.
//!
//! Planar quasi-static balance of a grasped object (GO) — optionally pushing
//! an extrinsic object (EO) across a ground line — is posed as a convex QP
//! over stacked contact forces z = (f_t, f_n)ᵢ:
//!
//! ```text
//! minimize    ½‖z‖²  (+ ½ρ‖s‖² when relaxed)
//! subject to  Σ Jᵢᵀ fᵢ + w_gravity + w_ext (+ s) = 0     per body
//!             friction-cone rows fixed by each contact's mode
//! ```
//!
//! Modes pin each cone: sticking keeps both cone faces and f_n ≥ 0; a
//! sliding mode replaces one face with its boundary equality (f_t = ∓μ·f_n)
//! and keeps f_n ≥ 0; separated contacts carry no force variables. Torque
//! rows are scaled by 1/r_gyr so all balance rows share force units.
//!
//! The relaxed variant exists for trajectory optimization: at a generic pose
//! iterate the grasped-object balance (3 equations) cannot be met exactly by
//! the 2 force components of a single maintained contact, so the planner's
//! program adds a penalized 3-component slack to that balance and drops the
//! grasped-contact cone rows (a cone-alignment loss steers them instead).
//! Verification always uses the strict program.

use nalgebra::{DMatrix, DVector, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{
    contact_jacobian, gravity_wrench, point_segment_distance, radius_of_gyration,
    transform_point, BodyParams, ContactPoint, PolygonShape, Pose2, Vec2, Wrench2,
};
use crate::qp::{self, QpConfig, QpError, QpProblem, QpSolution, QpStatus};

/// Errors from program assembly and solving.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum ContactError {
    /// A contact's two material points are farther apart than the assembly
    /// tolerance — the contact list does not describe these poses.
    #[error("contact {index} geometry mismatch: points separated by {separation:.4} m")]
    GeometryMismatch {
        /// Contact index in the input list.
        index: usize,
        /// World distance between the paired material points.
        separation: f64,
    },
    /// No contact carries force variables (everything separated).
    #[error("no active contacts: the program has no force variables")]
    NoActiveContacts,
    /// A body referenced by a contact is missing from the inputs.
    #[error("contact {index} references an extrinsic object the scene lacks")]
    MissingBody {
        /// Contact index in the input list.
        index: usize,
    },
    /// Underlying QP failure.
    #[error("qp: {0}")]
    Qp(#[from] QpError),
}

/// Fixed contact interaction mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ContactMode {
    /// No relative tangential motion; force anywhere inside the cone.
    Sticking,
    /// Slip along +tangent; force on the opposing boundary f_t = −μ·f_n.
    SlidingPositive,
    /// Slip along −tangent; force on the opposing boundary f_t = +μ·f_n.
    SlidingNegative,
    /// No contact force; bodies free to separate.
    Separated,
}

impl ContactMode {
    /// True for either sliding mode.
    #[inline]
    #[must_use]
    pub fn is_sliding(self) -> bool {
        matches!(self, Self::SlidingPositive | Self::SlidingNegative)
    }
}

/// Which body pair a contact couples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ContactPair {
    /// Grasped object (A) against extrinsic object (B).
    ObjectObject,
    /// Extrinsic object (A) against the ground line (B).
    EoGround,
    /// Grasped object (A) against the ground line (B).
    GoGround,
}

/// A contact with its pair, shared frame, fixed mode, and friction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledContact {
    /// Body pair the contact couples.
    pub pair: ContactPair,
    /// Shared contact frame; normal points from body B into body A.
    pub point: ContactPoint,
    /// Fixed interaction mode.
    pub mode: ContactMode,
    /// Friction coefficient at this contact.
    pub mu: f64,
}

/// Planar contact force in the shared contact frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContactForce {
    /// Tangential component.
    pub tangential: f64,
    /// Normal component (≥ 0 pushes the bodies apart).
    pub normal: f64,
}

impl ContactForce {
    /// Builds a force from components.
    #[inline]
    #[must_use]
    pub fn new(tangential: f64, normal: f64) -> Self {
        Self { tangential, normal }
    }

    /// Components as a vector (f_t, f_n).
    #[inline]
    #[must_use]
    pub fn to_vector(self) -> Vector2<f64> {
        Vector2::new(self.tangential, self.normal)
    }

    /// Euclidean magnitude.
    #[inline]
    #[must_use]
    pub fn magnitude(self) -> f64 {
        self.to_vector().norm()
    }
}

/// Poses of everything the scene tracks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneState {
    /// End-effector pose.
    pub x_ee: Pose2,
    /// Grasped-object pose.
    pub x_go: Pose2,
    /// Extrinsic-object pose, when the scene has one.
    pub x_eo: Option<Pose2>,
}

/// Tunables shared by assembly, solving, and consistency checking.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ContactModelConfig {
    /// Length scale dividing torque rows (radius of gyration of the moved
    /// object) so balance rows share force units.
    pub torque_scale: f64,
    /// Quadratic penalty ρ on the relaxed grasped-body balance slack.
    pub relax_penalty: f64,
    /// Maximum world separation between a contact's paired points before
    /// assembly refuses (lenient: planner iterates carry real gaps).
    pub geometry_tol: f64,
    /// Mode-consistency margin tolerance.
    pub consistency_tol: f64,
    /// QP solver settings.
    pub qp: QpConfig,
}

impl Default for ContactModelConfig {
    fn default() -> Self {
        Self {
            torque_scale: 0.1,
            relax_penalty: 1e6,
            geometry_tol: 5e-3,
            consistency_tol: 1e-5,
            qp: QpConfig::default(),
        }
    }
}

impl ContactModelConfig {
    /// Config with the torque scale taken from a shape's radius of gyration.
    #[must_use]
    pub fn for_shape(shape: &PolygonShape) -> Self {
        Self {
            torque_scale: radius_of_gyration(shape),
            ..Self::default()
        }
    }
}

/// Everything needed to assemble one equilibrium program.
#[derive(Debug, Clone)]
pub struct EquilibriumInputs<'a> {
    /// Grasped-object mass properties.
    pub go_body: &'a BodyParams,
    /// Grasped-object pose.
    pub go_pose: Pose2,
    /// Extrinsic-object mass properties (present for the two-body program).
    pub eo_body: Option<&'a BodyParams>,
    /// Extrinsic-object pose.
    pub eo_pose: Option<Pose2>,
    /// External wrench on the grasped object about its CoM (from the
    /// gripper elasticity), world frame.
    pub w_ext: Wrench2,
    /// Contact list with fixed modes.
    pub contacts: &'a [LabeledContact],
    /// Shared configuration.
    pub config: &'a ContactModelConfig,
}

/// Whether grasped-body balance is exact or slack-penalized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Relaxation {
    /// Exact balance, full cone rows — verification form.
    Strict,
    /// Slack on the grasped-body balance, grasped-contact cones dropped —
    /// planner form.
    Relaxed,
}

/// Column/row bookkeeping of an assembled program.
#[derive(Debug, Clone, PartialEq)]
pub struct AssemblyLayout {
    /// Per contact: column of its (f_t, f_n) pair, `None` when separated.
    pub force_cols: Vec<Option<usize>>,
    /// Column of the 3-component balance slack (relaxed only).
    pub slack_col: Option<usize>,
    /// First row of the extrinsic-body balance block (two-body programs).
    pub eo_balance_row: Option<usize>,
    /// First row of the grasped-body balance block.
    pub go_balance_row: usize,
    /// Sliding-boundary equality rows as (contact index, equality row).
    pub sliding_rows: Vec<(usize, usize)>,
    /// Total variable count.
    pub n: usize,
}

/// An assembled mode-fixed equilibrium program.
#[derive(Debug, Clone)]
pub struct ContactAssembly {
    /// The QP in standard form.
    pub qp: QpProblem,
    /// Column/row map back to contacts.
    pub layout: AssemblyLayout,
    /// Torque scale baked into the balance rows.
    pub torque_scale: f64,
}

/// Solved contact forces.
#[derive(Debug, Clone)]
pub struct ContactSolution {
    /// QP status (infeasible programs yield no forces).
    pub status: QpStatus,
    /// Per contact force, aligned with the input list; `None` for separated.
    pub forces: Vec<Option<ContactForce>>,
    /// Grasped-body balance slack (relaxed programs), natural units.
    pub slack: Option<Vector3<f64>>,
    /// Underlying QP solution.
    pub qp: QpSolution,
}

fn body_jacobian(
    pose: &Pose2,
    body: &BodyParams,
    point: &ContactPoint,
) -> nalgebra::Matrix3x2<f64> {
    contact_jacobian(pose, body, point).0.transpose()
}

/// Assembles the mode-fixed equilibrium QP for the given inputs.
///
/// Two-body inputs (extrinsic object present) produce the two-balance
/// program; otherwise the grasped object balances alone against its
/// environment contacts.
///
/// # Errors
/// [`ContactError::GeometryMismatch`] when a contact's paired points are
/// farther apart than `geometry_tol`; [`ContactError::MissingBody`] when an
/// object-object or EO-ground contact appears without an extrinsic object;
/// [`ContactError::NoActiveContacts`] when every contact is separated.
pub fn assemble_equilibrium(
    inputs: &EquilibriumInputs<'_>,
    relax: Relaxation,
) -> Result<ContactAssembly, ContactError> {
    let cfg = inputs.config;
    let contacts = inputs.contacts;
    let has_eo = inputs.eo_body.is_some() && inputs.eo_pose.is_some();

    // Validate geometry and body references.
    for (i, c) in contacts.iter().enumerate() {
        let (pose_a, pose_b) = match c.pair {
            ContactPair::ObjectObject => {
                let Some(eo_pose) = inputs.eo_pose else {
                    return Err(ContactError::MissingBody { index: i });
                };
                (inputs.go_pose, eo_pose)
            }
            ContactPair::EoGround => {
                let Some(eo_pose) = inputs.eo_pose else {
                    return Err(ContactError::MissingBody { index: i });
                };
                (eo_pose, Pose2::identity())
            }
            ContactPair::GoGround => (inputs.go_pose, Pose2::identity()),
        };
        let pa = transform_point(&pose_a, c.point.body_a_point);
        let pb = transform_point(&pose_b, c.point.body_b_point);
        let separation = (pa - pb).norm();
        if separation > cfg.geometry_tol {
            return Err(ContactError::GeometryMismatch {
                index: i,
                separation,
            });
        }
    }

    // Column layout: active contacts first, then the slack block.
    let mut force_cols = Vec::with_capacity(contacts.len());
    let mut n = 0usize;
    for c in contacts {
        if c.mode == ContactMode::Separated {
            force_cols.push(None);
        } else {
            force_cols.push(Some(n));
            n += 2;
        }
    }
    if n == 0 {
        return Err(ContactError::NoActiveContacts);
    }
    let relaxed = relax == Relaxation::Relaxed;
    let slack_col = relaxed.then_some(n);
    if relaxed {
        n += 3;
    }

    // Equality rows: [EO balance (3)] [GO balance (3)] [sliding boundaries].
    let eo_balance_row = has_eo.then_some(0);
    let go_balance_row = if has_eo { 3 } else { 0 };
    let mut sliding_rows = Vec::new();
    let mut p = go_balance_row + 3;
    for (i, c) in contacts.iter().enumerate() {
        let keep_cone = !(relaxed && c.pair == ContactPair::ObjectObject);
        if c.mode.is_sliding() && keep_cone {
            sliding_rows.push((i, p));
            p += 1;
        }
    }

    let ts = cfg.torque_scale;
    let mut a = DMatrix::zeros(p, n);
    let mut b = DVector::zeros(p);

    // Gravity and external wrenches on the right-hand sides (scaled).
    let scale_wrench = |w: &Wrench2| Vector3::new(w.fx, w.fy, w.tau / ts);
    let go_rhs = -(scale_wrench(&inputs.w_ext)
        + scale_wrench(&gravity_wrench(inputs.go_body, &inputs.go_pose)));
    b.fixed_rows_mut::<3>(go_balance_row).copy_from(&go_rhs);
    if let (Some(row), Some(eo_body), Some(eo_pose)) =
        (eo_balance_row, inputs.eo_body, inputs.eo_pose.as_ref())
    {
        let eo_rhs = -scale_wrench(&gravity_wrench(eo_body, eo_pose));
        b.fixed_rows_mut::<3>(row).copy_from(&eo_rhs);
    }

    // Per-contact balance columns.
    for (i, c) in contacts.iter().enumerate() {
        let Some(col) = force_cols[i] else { continue };
        match c.pair {
            ContactPair::ObjectObject => {
                let jt_go = body_jacobian(&inputs.go_pose, inputs.go_body, &c.point);
                write_balance_block(&mut a, go_balance_row, col, &jt_go, ts);
                let eo_pose = inputs.eo_pose.expect("validated above");
                let eo_body = inputs.eo_body.expect("validated above");
                let flipped = c.point.flipped();
                let jt_eo = body_jacobian(&eo_pose, eo_body, &flipped);
                write_balance_block(
                    &mut a,
                    eo_balance_row.expect("object-object needs two bodies"),
                    col,
                    &jt_eo,
                    ts,
                );
            }
            ContactPair::EoGround => {
                let eo_pose = inputs.eo_pose.expect("validated above");
                let eo_body = inputs.eo_body.expect("validated above");
                let jt = body_jacobian(&eo_pose, eo_body, &c.point);
                write_balance_block(
                    &mut a,
                    eo_balance_row.expect("eo-ground needs the extrinsic body"),
                    col,
                    &jt,
                    ts,
                );
            }
            ContactPair::GoGround => {
                let jt = body_jacobian(&inputs.go_pose, inputs.go_body, &c.point);
                write_balance_block(&mut a, go_balance_row, col, &jt, ts);
            }
        }
    }
    // Slack enters the grasped-body balance with identity coefficients.
    if let Some(sc) = slack_col {
        for k in 0..3 {
            a[(go_balance_row + k, sc + k)] = 1.0;
        }
    }
    // Sliding boundary equalities: μ·f_n ± f_t = 0.
    for &(i, row) in &sliding_rows {
        let col = force_cols[i].expect("sliding contacts carry forces");
        let c = &contacts[i];
        match c.mode {
            ContactMode::SlidingPositive => {
                a[(row, col)] = 1.0; // f_t
                a[(row, col + 1)] = c.mu; // μ f_n  ⇒ f_t = −μ f_n
            }
            ContactMode::SlidingNegative => {
                a[(row, col)] = -1.0;
                a[(row, col + 1)] = c.mu; // μ f_n − f_t = 0 ⇒ f_t = +μ f_n
            }
            _ => unreachable!("only sliding modes are recorded"),
        }
    }

    // Inequality rows per contact.
    let mut rows = Vec::new(); // (coeff on f_t, coeff on f_n, contact idx)
    for (i, c) in contacts.iter().enumerate() {
        if force_cols[i].is_none() {
            continue;
        }
        if relaxed && c.pair == ContactPair::ObjectObject {
            continue; // cone dropped entirely; steered by the planner loss
        }
        match c.mode {
            ContactMode::Sticking => {
                rows.push((0.0, -1.0, i)); // −f_n ≤ 0
                rows.push((-1.0, -c.mu, i)); // −f_t − μf_n ≤ 0
                rows.push((1.0, -c.mu, i)); // f_t − μf_n ≤ 0
            }
            ContactMode::SlidingPositive | ContactMode::SlidingNegative => {
                rows.push((0.0, -1.0, i)); // −f_n ≤ 0
            }
            ContactMode::Separated => unreachable!("separated carries no force"),
        }
    }
    let m = rows.len();
    let mut g = DMatrix::zeros(m, n);
    let h = DVector::zeros(m);
    for (r, &(ct, cn, i)) in rows.iter().enumerate() {
        let col = force_cols[i].expect("filtered above");
        g[(r, col)] = ct;
        g[(r, col + 1)] = cn;
    }

    // Objective: ½‖f‖² plus the slack penalty.
    let mut hessian = DMatrix::identity(n, n);
    if let Some(sc) = slack_col {
        for k in 0..3 {
            hessian[(sc + k, sc + k)] = cfg.relax_penalty;
        }
    }
    let qp = QpProblem::new(hessian, DVector::zeros(n))?
        .with_equalities(a, b)?
        .with_inequalities(g, h)?;
    Ok(ContactAssembly {
        qp,
        layout: AssemblyLayout {
            force_cols,
            slack_col,
            eo_balance_row,
            go_balance_row,
            sliding_rows,
            n,
        },
        torque_scale: ts,
    })
}

fn write_balance_block(
    a: &mut DMatrix<f64>,
    row: usize,
    col: usize,
    jt: &nalgebra::Matrix3x2<f64>,
    torque_scale: f64,
) {
    for r in 0..3 {
        let scale = if r == 2 { 1.0 / torque_scale } else { 1.0 };
        for c in 0..2 {
            a[(row + r, col + c)] += scale * jt[(r, c)];
        }
    }
}

/// Solves an assembled program and maps the QP solution back onto contacts.
///
/// # Errors
/// Propagates solver errors; infeasible/unbounded programs return normally
/// with the status set and empty forces.
pub fn solve_forces(
    assembly: &ContactAssembly,
    config: &QpConfig,
) -> Result<ContactSolution, ContactError> {
    let sol = qp::solve(&assembly.qp, config)?;
    Ok(extract_solution(assembly, sol))
}

/// Maps a QP solution onto per-contact forces and the balance slack.
#[must_use]
pub fn extract_solution(assembly: &ContactAssembly, sol: QpSolution) -> ContactSolution {
    let mut forces = vec![None; assembly.layout.force_cols.len()];
    if sol.status == QpStatus::Optimal {
        for (i, col) in assembly.layout.force_cols.iter().enumerate() {
            if let Some(c) = col {
                forces[i] = Some(ContactForce::new(sol.z[*c], sol.z[*c + 1]));
            }
        }
    }
    let slack = assembly.layout.slack_col.and_then(|sc| {
        (sol.status == QpStatus::Optimal)
            .then(|| Vector3::new(sol.z[sc], sol.z[sc + 1], sol.z[sc + 2]))
    });
    ContactSolution {
        status: sol.status,
        forces,
        slack,
        qp: sol,
    }
}

/// Unscaled balance residuals (N, N, N·m) for a candidate force set —
/// an assembly-independent verification path.
#[must_use]
pub fn balance_residuals(
    inputs: &EquilibriumInputs<'_>,
    forces: &[Option<ContactForce>],
) -> (Wrench2, Option<Wrench2>) {
    let mut go = inputs.w_ext + gravity_wrench(inputs.go_body, &inputs.go_pose);
    let mut eo = match (inputs.eo_body, inputs.eo_pose.as_ref()) {
        (Some(body), Some(pose)) => Some(gravity_wrench(body, pose)),
        _ => None,
    };
    for (c, f) in inputs.contacts.iter().zip(forces) {
        let Some(f) = f else { continue };
        match c.pair {
            ContactPair::ObjectObject => {
                let j_go = contact_jacobian(&inputs.go_pose, inputs.go_body, &c.point);
                go = go + j_go.wrench_from_force(f.tangential, f.normal);
                if let (Some(eo_w), Some(pose), Some(body)) =
                    (eo.as_mut(), inputs.eo_pose.as_ref(), inputs.eo_body)
                {
                    let j_eo = contact_jacobian(pose, body, &c.point.flipped());
                    *eo_w = *eo_w + j_eo.wrench_from_force(f.tangential, f.normal);
                }
            }
            ContactPair::EoGround => {
                if let (Some(eo_w), Some(pose), Some(body)) =
                    (eo.as_mut(), inputs.eo_pose.as_ref(), inputs.eo_body)
                {
                    let j = contact_jacobian(pose, body, &c.point);
                    *eo_w = *eo_w + j.wrench_from_force(f.tangential, f.normal);
                }
            }
            ContactPair::GoGround => {
                let j = contact_jacobian(&inputs.go_pose, inputs.go_body, &c.point);
                go = go + j.wrench_from_force(f.tangential, f.normal);
            }
        }
    }
    (go, eo)
}

/// Consistency report for one contact.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContactMarginReport {
    /// Worst margin across the mode's conditions (≥ 0 means satisfied).
    pub margin: f64,
    /// Normal-force margin f_n.
    pub normal: f64,
    /// Cone-face margins (μf_n + f_t, μf_n − f_t).
    pub cone: (f64, f64),
}

/// Mode-consistency verdict for a force set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeConsistency {
    /// All margins within tolerance.
    pub consistent: bool,
    /// Per-contact reports, aligned with the contact list (`None` for
    /// separated contacts, which carry no force conditions).
    pub reports: Vec<Option<ContactMarginReport>>,
    /// Worst margin across all contacts (+∞ when none carry force).
    pub worst_margin: f64,
}

/// Checks that solved forces respect each contact's fixed mode.
///
/// Sticking requires the force inside the cone and f_n ≥ 0. Sliding modes
/// require the force on the opposing cone boundary (|μf_n ∓ (−)f_t| within
/// tolerance, reported as a negative margin when violated) and f_n ≥ 0.
#[must_use]
pub fn check_mode_consistency(
    contacts: &[LabeledContact],
    forces: &[Option<ContactForce>],
    tol: f64,
) -> ModeConsistency {
    let mut reports = Vec::with_capacity(contacts.len());
    let mut worst = f64::INFINITY;
    for (c, f) in contacts.iter().zip(forces) {
        let Some(f) = f else {
            reports.push(None);
            continue;
        };
        let plus = c.mu * f.normal + f.tangential;
        let minus = c.mu * f.normal - f.tangential;
        let margin = match c.mode {
            ContactMode::Sticking => f.normal.min(plus).min(minus),
            ContactMode::SlidingPositive => f.normal.min(-plus.abs()),
            ContactMode::SlidingNegative => f.normal.min(-minus.abs()),
            ContactMode::Separated => f64::INFINITY,
        };
        worst = worst.min(margin);
        reports.push(Some(ContactMarginReport {
            margin,
            normal: f.normal,
            cone: (plus, minus),
        }));
    }
    ModeConsistency {
        consistent: worst >= -tol,
        reports,
        worst_margin: worst,
    }
}

// ---------------------------------------------------------------------------
// Symbolic contact descriptions → resolved contacts
// ---------------------------------------------------------------------------

/// Symbolic description of a maintained contact, resolvable at any poses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ContactGeometry {
    /// Grasped-object vertex against an extrinsic-object face.
    GoVertexOnEoFace {
        /// Vertex index on the grasped object.
        vertex: usize,
        /// Face index on the extrinsic object.
        face: usize,
    },
    /// Extrinsic-object vertex against a grasped-object face.
    EoVertexOnGoFace {
        /// Vertex index on the extrinsic object.
        vertex: usize,
        /// Face index on the grasped object.
        face: usize,
    },
    /// Extrinsic-object vertex on the ground line.
    EoVertexOnGround {
        /// Vertex index on the extrinsic object.
        vertex: usize,
    },
    /// Grasped-object vertex on the ground line.
    GoVertexOnGround {
        /// Vertex index on the grasped object.
        vertex: usize,
    },
}

impl ContactGeometry {
    /// The body pair this geometry couples.
    #[must_use]
    pub fn pair(self) -> ContactPair {
        match self {
            Self::GoVertexOnEoFace { .. } | Self::EoVertexOnGoFace { .. } => {
                ContactPair::ObjectObject
            }
            Self::EoVertexOnGround { .. } => ContactPair::EoGround,
            Self::GoVertexOnGround { .. } => ContactPair::GoGround,
        }
    }
}

/// Shapes and poses a symbolic contact resolves against.
#[derive(Debug, Clone, Copy)]
pub struct ResolveContext<'a> {
    /// Grasped-object shape.
    pub go_shape: &'a PolygonShape,
    /// Grasped-object pose.
    pub go_pose: Pose2,
    /// Extrinsic-object shape.
    pub eo_shape: Option<&'a PolygonShape>,
    /// Extrinsic-object pose.
    pub eo_pose: Option<Pose2>,
    /// Ground height.
    pub ground_y: f64,
}

/// Resolves a symbolic contact at the context's poses into a labeled
/// contact with a concrete shared frame.
///
/// The vertex is projected onto the face (clamped to the segment) to define
/// body B's material point; the face's outward normal orients the frame so
/// the normal points from B into A (A is the grasped object for
/// object-object pairs, the touching object for ground pairs).
///
/// # Errors
/// [`ContactError::MissingBody`] when the geometry references an extrinsic
/// object the context lacks.
pub fn resolve_contact(
    geometry: ContactGeometry,
    mode: ContactMode,
    mu: f64,
    ctx: &ResolveContext<'_>,
) -> Result<LabeledContact, ContactError> {
    let pair = geometry.pair();
    let point = match geometry {
        ContactGeometry::GoVertexOnEoFace { vertex, face } => {
            let (Some(eo_shape), Some(eo_pose)) = (ctx.eo_shape, ctx.eo_pose) else {
                return Err(ContactError::MissingBody { index: 0 });
            };
            let v_world = transform_point(&ctx.go_pose, ctx.go_shape.vertices[vertex]);
            let (e0, e1) = eo_shape.edge(face);
            let (w0, w1) = (
                transform_point(&eo_pose, e0),
                transform_point(&eo_pose, e1),
            );
            let (_, foot, _) = point_segment_distance(v_world, w0, w1);
            // Normal from the EO face outward = from B (EO) into A (GO).
            let n_body = eo_shape.edge_outward_normal(face);
            let normal = eo_pose.rotate(n_body);
            ContactPoint::new(
                ctx.go_shape.vertices[vertex],
                transform_point(&eo_pose.inverse(), foot),
                normal,
            )
        }
        ContactGeometry::EoVertexOnGoFace { vertex, face } => {
            let (Some(eo_shape), Some(eo_pose)) = (ctx.eo_shape, ctx.eo_pose) else {
                return Err(ContactError::MissingBody { index: 0 });
            };
            let v_world = transform_point(&eo_pose, eo_shape.vertices[vertex]);
            let (e0, e1) = ctx.go_shape.edge(face);
            let (w0, w1) = (
                transform_point(&ctx.go_pose, e0),
                transform_point(&ctx.go_pose, e1),
            );
            let (_, foot, _) = point_segment_distance(v_world, w0, w1);
            // GO's face outward normal points toward EO; the frame wants
            // B (EO) into A (GO), i.e. the opposite direction.
            let n_body = ctx.go_shape.edge_outward_normal(face);
            let normal = -ctx.go_pose.rotate(n_body);
            ContactPoint::new(
                transform_point(&ctx.go_pose.inverse(), foot),
                eo_shape.vertices[vertex],
                normal,
            )
        }
        ContactGeometry::EoVertexOnGround { vertex } => {
            let (Some(eo_shape), Some(eo_pose)) = (ctx.eo_shape, ctx.eo_pose) else {
                return Err(ContactError::MissingBody { index: 0 });
            };
            let v_body = eo_shape.vertices[vertex];
            let v_world = transform_point(&eo_pose, v_body);
            ContactPoint::new(
                v_body,
                Vec2::new(v_world.x, ctx.ground_y),
                Vec2::new(0.0, 1.0),
            )
        }
        ContactGeometry::GoVertexOnGround { vertex } => {
            let v_body = ctx.go_shape.vertices[vertex];
            let v_world = transform_point(&ctx.go_pose, v_body);
            ContactPoint::new(
                v_body,
                Vec2::new(v_world.x, ctx.ground_y),
                Vec2::new(0.0, 1.0),
            )
        }
    };
    Ok(LabeledContact {
        pair,
        point,
        mode,
        mu,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn square_shape(half: f64) -> PolygonShape {
        PolygonShape::box_shape(2.0 * half, 2.0 * half)
    }

    /// 1 kg square resting on the ground under zero external wrench:
    /// symmetric normals of m·g/2 and zero tangentials.
    #[test]
    fn resting_square_splits_weight_evenly() {
        let shape = square_shape(0.05);
        let body = BodyParams::from_shape(&shape, 1.0);
        let pose = Pose2::new(0.0, 0.05, 0.0);
        let ctx = ResolveContext {
            go_shape: &shape,
            go_pose: pose,
            eo_shape: None,
            eo_pose: None,
            ground_y: 0.0,
        };
        let contacts = vec![
            resolve_contact(
                ContactGeometry::GoVertexOnGround { vertex: 0 },
                ContactMode::Sticking,
                0.5,
                &ctx,
            )
            .unwrap(),
            resolve_contact(
                ContactGeometry::GoVertexOnGround { vertex: 1 },
                ContactMode::Sticking,
                0.5,
                &ctx,
            )
            .unwrap(),
        ];
        let config = ContactModelConfig::for_shape(&shape);
        let inputs = EquilibriumInputs {
            go_body: &body,
            go_pose: pose,
            eo_body: None,
            eo_pose: None,
            w_ext: Wrench2::zero(),
            contacts: &contacts,
            config: &config,
        };
        let assembly = assemble_equilibrium(&inputs, Relaxation::Strict).unwrap();
        let sol = solve_forces(&assembly, &config.qp).unwrap();
        assert_eq!(sol.status, QpStatus::Optimal);
        for f in sol.forces.iter().flatten() {
            assert_relative_eq!(f.normal, 0.5 * 9.81, epsilon = 1e-6);
            assert!(f.tangential.abs() <= 1e-8, "tangential {}", f.tangential);
        }
        let (go_res, eo_res) = balance_residuals(&inputs, &sol.forces);
        assert!(go_res.to_vector().norm() < 1e-6);
        assert!(eo_res.is_none());
        let report = check_mode_consistency(&contacts, &sol.forces, 1e-5);
        assert!(report.consistent, "margins {:?}", report.reports);
    }

    /// Pressing down with the gripper adds to both normals equally.
    #[test]
    fn external_push_raises_normals() {
        let shape = square_shape(0.05);
        let body = BodyParams::from_shape(&shape, 0.2);
        let pose = Pose2::new(0.0, 0.05, 0.0);
        let ctx = ResolveContext {
            go_shape: &shape,
            go_pose: pose,
            eo_shape: None,
            eo_pose: None,
            ground_y: 0.0,
        };
        let contacts: Vec<_> = [0usize, 1]
            .iter()
            .map(|&v| {
                resolve_contact(
                    ContactGeometry::GoVertexOnGround { vertex: v },
                    ContactMode::Sticking,
                    0.33,
                    &ctx,
                )
                .unwrap()
            })
            .collect();
        let config = ContactModelConfig::for_shape(&shape);
        let inputs = EquilibriumInputs {
            go_body: &body,
            go_pose: pose,
            eo_body: None,
            eo_pose: None,
            w_ext: Wrench2::new(0.0, -5.0, 0.0),
            contacts: &contacts,
            config: &config,
        };
        let assembly = assemble_equilibrium(&inputs, Relaxation::Strict).unwrap();
        let sol = solve_forces(&assembly, &config.qp).unwrap();
        let total: f64 = sol.forces.iter().flatten().map(|f| f.normal).sum();
        assert_relative_eq!(total, 5.0 + 0.2 * 9.81, epsilon = 1e-9);
        for f in sol.forces.iter().flatten() {
            assert_relative_eq!(f.normal, (5.0 + 0.2 * 9.81) / 2.0, epsilon = 1e-9);
        }
    }

    /// Grasped block pushed sideways hard enough that sticking is
    /// impossible: the sticking program must report infeasible, while the
    /// sliding-mode program balances on the cone boundary.
    #[test]
    fn sliding_mode_takes_over_past_the_cone() {
        let shape = square_shape(0.05);
        let body = BodyParams::from_shape(&shape, 1.0);
        let pose = Pose2::new(0.0, 0.05, 0.0);
        let ctx = ResolveContext {
            go_shape: &shape,
            go_pose: pose,
            eo_shape: None,
            eo_pose: None,
            ground_y: 0.0,
        };
        let mu = 0.3;
        let make = |mode: ContactMode| -> Vec<LabeledContact> {
            [0usize, 1]
                .iter()
                .map(|&v| {
                    resolve_contact(
                        ContactGeometry::GoVertexOnGround { vertex: v },
                        mode,
                        mu,
                        &ctx,
                    )
                    .unwrap()
                })
                .collect()
        };
        let config = ContactModelConfig::for_shape(&shape);
        // Push +x at the CoM with more than μ·(m·g): sticking infeasible.
        let w_ext = Wrench2::new(5.0, 0.0, 0.0);
        let sticking = make(ContactMode::Sticking);
        let inputs = EquilibriumInputs {
            go_body: &body,
            go_pose: pose,
            eo_body: None,
            eo_pose: None,
            w_ext,
            contacts: &sticking,
            config: &config,
        };
        let assembly = assemble_equilibrium(&inputs, Relaxation::Strict).unwrap();
        let sol = solve_forces(&assembly, &config.qp).unwrap();
        assert_eq!(sol.status, QpStatus::Infeasible);

        // Sliding toward +x: tangent is (−1, 0), so slip is along −t ⇒
        // SlidingNegative with f_t = +μ·f_n (friction pointing −x).
        // Sliding pins the friction sum at μ·Σf_n = μ·m·g, so equilibrium
        // holds exactly at that push magnitude.
        let sliding = make(ContactMode::SlidingNegative);
        let inputs = EquilibriumInputs {
            w_ext: Wrench2::new(mu * 9.81, 0.0, 0.0),
            contacts: &sliding,
            ..inputs
        };
        let assembly = assemble_equilibrium(&inputs, Relaxation::Strict).unwrap();
        let sol = solve_forces(&assembly, &config.qp).unwrap();
        assert_eq!(sol.status, QpStatus::Optimal);
        let report = check_mode_consistency(&sliding, &sol.forces, 1e-5);
        assert!(report.consistent, "margins {:?}", report.reports);
        for f in sol.forces.iter().flatten() {
            assert_relative_eq!(f.tangential, mu * f.normal, epsilon = 1e-8);
        }
        let (go_res, _) = balance_residuals(&inputs, &sol.forces);
        assert!(go_res.to_vector().norm() < 1e-6);
    }

    /// Two-body program: grasped block presses an extrinsic block downward
    /// into the ground; all contacts stick.
    #[test]
    fn two_body_stack_balances() {
        let go_shape = square_shape(0.04);
        let eo_shape = square_shape(0.05);
        let go_body = BodyParams::from_shape(&go_shape, 0.3);
        let eo_body = BodyParams::from_shape(&eo_shape, 0.5);
        let eo_pose = Pose2::new(0.0, 0.05, 0.0);
        let go_pose = Pose2::new(0.0, 0.1 + 0.04, 0.0);
        let ctx = ResolveContext {
            go_shape: &go_shape,
            go_pose,
            eo_shape: Some(&eo_shape),
            eo_pose: Some(eo_pose),
            ground_y: 0.0,
        };
        let mu = 0.5;
        let contacts = vec![
            resolve_contact(
                ContactGeometry::GoVertexOnEoFace { vertex: 0, face: 2 },
                ContactMode::Sticking,
                mu,
                &ctx,
            )
            .unwrap(),
            resolve_contact(
                ContactGeometry::EoVertexOnGround { vertex: 0 },
                ContactMode::Sticking,
                mu,
                &ctx,
            )
            .unwrap(),
            resolve_contact(
                ContactGeometry::EoVertexOnGround { vertex: 1 },
                ContactMode::Sticking,
                mu,
                &ctx,
            )
            .unwrap(),
        ];
        let config = ContactModelConfig::for_shape(&eo_shape);
        // The single contact sits at the grasped object's vertex 0, offset
        // (−0.04, −0.04) from its CoM. With the x-row forcing f_t = 0, the
        // external wrench must carry the torque the normal force produces
        // about the CoM for the 3-row balance to close.
        let f_n_expected = 2.0 + 0.3 * 9.81;
        let inputs = EquilibriumInputs {
            go_body: &go_body,
            go_pose,
            eo_body: Some(&eo_body),
            eo_pose: Some(eo_pose),
            w_ext: Wrench2::new(0.0, -2.0, 0.04 * f_n_expected),
            contacts: &contacts,
            config: &config,
        };
        let assembly = assemble_equilibrium(&inputs, Relaxation::Strict).unwrap();
        let sol = solve_forces(&assembly, &config.qp).unwrap();
        assert_eq!(sol.status, QpStatus::Optimal);
        let (go_res, eo_res) = balance_residuals(&inputs, &sol.forces);
        assert!(go_res.to_vector().norm() < 1e-6, "go residual {go_res:?}");
        assert!(
            eo_res.unwrap().to_vector().norm() < 1e-6,
            "eo residual {eo_res:?}"
        );
        // The object-object normal carries the press plus the grasped
        // object's weight.
        let oo = sol.forces[0].unwrap();
        assert_relative_eq!(oo.normal, f_n_expected, epsilon = 1e-6);
        // Ground normals carry everything.
        let total_ground: f64 = sol.forces[1..]
            .iter()
            .flatten()
            .map(|f| f.normal)
            .sum();
        assert_relative_eq!(
            total_ground,
            2.0 + (0.3 + 0.5) * 9.81,
            epsilon = 1e-6
        );
    }

    /// The strict program is infeasible at a perturbed pose; the relaxed
    /// program absorbs the imbalance into its slack.
    #[test]
    fn relaxed_program_absorbs_pose_error() {
        let go_shape = square_shape(0.04);
        let eo_shape = square_shape(0.05);
        let go_body = BodyParams::from_shape(&go_shape, 0.3);
        let eo_body = BodyParams::from_shape(&eo_shape, 0.5);
        let eo_pose = Pose2::new(0.0, 0.05, 0.0);
        // Slightly rotated grasped object: its single contact cannot meet
        // all three balance rows exactly.
        let go_pose = Pose2::new(0.012, 0.1 + 0.04, 0.03);
        let ctx = ResolveContext {
            go_shape: &go_shape,
            go_pose,
            eo_shape: Some(&eo_shape),
            eo_pose: Some(eo_pose),
            ground_y: 0.0,
        };
        let contacts = vec![
            resolve_contact(
                ContactGeometry::GoVertexOnEoFace { vertex: 0, face: 2 },
                ContactMode::Sticking,
                0.5,
                &ctx,
            )
            .unwrap(),
            resolve_contact(
                ContactGeometry::EoVertexOnGround { vertex: 0 },
                ContactMode::Sticking,
                0.5,
                &ctx,
            )
            .unwrap(),
            resolve_contact(
                ContactGeometry::EoVertexOnGround { vertex: 1 },
                ContactMode::Sticking,
                0.5,
                &ctx,
            )
            .unwrap(),
        ];
        let config = ContactModelConfig::for_shape(&eo_shape);
        let inputs = EquilibriumInputs {
            go_body: &go_body,
            go_pose,
            eo_body: Some(&eo_body),
            eo_pose: Some(eo_pose),
            w_ext: Wrench2::new(0.4, -2.0, 0.01),
            contacts: &contacts,
            config: &config,
        };
        let strict = assemble_equilibrium(&inputs, Relaxation::Strict).unwrap();
        let strict_sol = solve_forces(&strict, &config.qp).unwrap();
        assert_eq!(
            strict_sol.status,
            QpStatus::Infeasible,
            "a generic pose cannot balance 3 equations with 2 unknowns"
        );
        let relaxed = assemble_equilibrium(&inputs, Relaxation::Relaxed).unwrap();
        let sol = solve_forces(&relaxed, &config.qp).unwrap();
        assert_eq!(sol.status, QpStatus::Optimal);
        let slack = sol.slack.unwrap();
        assert!(slack.norm() > 0.0);
        assert!(
            slack.norm() < 5.0,
            "slack should stay modest near feasibility: {slack:?}"
        );
        // EO balance stays exact in the relaxed program.
        let (_, eo_res) = balance_residuals(&inputs, &sol.forces);
        assert!(eo_res.unwrap().to_vector().norm() < 1e-6);
    }

    #[test]
    fn geometry_mismatch_rejected() {
        let shape = square_shape(0.05);
        let body = BodyParams::from_shape(&shape, 1.0);
        let pose = Pose2::new(0.0, 0.25, 0.0); // hovering far above ground
        let ctx = ResolveContext {
            go_shape: &shape,
            go_pose: pose,
            eo_shape: None,
            eo_pose: None,
            ground_y: 0.0,
        };
        let contacts = vec![resolve_contact(
            ContactGeometry::GoVertexOnGround { vertex: 0 },
            ContactMode::Sticking,
            0.5,
            &ctx,
        )
        .unwrap()];
        let config = ContactModelConfig::for_shape(&shape);
        let inputs = EquilibriumInputs {
            go_body: &body,
            go_pose: pose,
            eo_body: None,
            eo_pose: None,
            w_ext: Wrench2::zero(),
            contacts: &contacts,
            config: &config,
        };
        let err = assemble_equilibrium(&inputs, Relaxation::Strict).unwrap_err();
        assert!(matches!(err, ContactError::GeometryMismatch { index: 0, .. }));
    }

    #[test]
    fn all_separated_is_an_error() {
        let shape = square_shape(0.05);
        let body = BodyParams::from_shape(&shape, 1.0);
        let pose = Pose2::new(0.0, 0.05, 0.0);
        let ctx = ResolveContext {
            go_shape: &shape,
            go_pose: pose,
            eo_shape: None,
            eo_pose: None,
            ground_y: 0.0,
        };
        let contacts = vec![resolve_contact(
            ContactGeometry::GoVertexOnGround { vertex: 0 },
            ContactMode::Separated,
            0.5,
            &ctx,
        )
        .unwrap()];
        let config = ContactModelConfig::for_shape(&shape);
        let inputs = EquilibriumInputs {
            go_body: &body,
            go_pose: pose,
            eo_body: None,
            eo_pose: None,
            w_ext: Wrench2::zero(),
            contacts: &contacts,
            config: &config,
        };
        assert!(matches!(
            assemble_equilibrium(&inputs, Relaxation::Strict),
            Err(ContactError::NoActiveContacts)
        ));
    }

    #[test]
    fn consistency_margins_reported() {
        let point = ContactPoint::new(Vec2::zeros(), Vec2::zeros(), Vec2::new(0.0, 1.0));
        let stick = LabeledContact {
            pair: ContactPair::GoGround,
            point: point.clone(),
            mode: ContactMode::Sticking,
            mu: 0.5,
        };
        let inside = check_mode_consistency(
            &[stick.clone()],
            &[Some(ContactForce::new(0.2, 1.0))],
            1e-5,
        );
        assert!(inside.consistent);
        assert_relative_eq!(inside.worst_margin, 0.3, epsilon = 1e-12);

        let outside = check_mode_consistency(
            &[stick.clone()],
            &[Some(ContactForce::new(0.8, 1.0))],
            1e-5,
        );
        assert!(!outside.consistent);
        assert_relative_eq!(outside.worst_margin, -0.3, epsilon = 1e-12);

        let slide = LabeledContact {
            mode: ContactMode::SlidingNegative,
            ..stick.clone()
        };
        // On-boundary force f_t = +μ f_n: consistent.
        let on_boundary = check_mode_consistency(
            &[slide.clone()],
            &[Some(ContactForce::new(0.5, 1.0))],
            1e-5,
        );
        assert!(on_boundary.consistent);
        // Interior force violates the sliding boundary.
        let interior = check_mode_consistency(
            &[slide],
            &[Some(ContactForce::new(0.0, 1.0))],
            1e-5,
        );
        assert!(!interior.consistent);
        assert_relative_eq!(interior.worst_margin, -0.5, epsilon = 1e-12);

        // Negative normal force is inconsistent for sticking.
        let pulling = check_mode_consistency(
            &[stick],
            &[Some(ContactForce::new(0.0, -0.2))],
            1e-5,
        );
        assert!(!pulling.consistent);
    }

    #[test]
    fn resolved_frames_point_into_the_grasped_object() {
        let go_shape = square_shape(0.04);
        let eo_shape = square_shape(0.05);
        // GO above EO: EO top face (index 2) normal is +y, from EO into GO.
        let ctx = ResolveContext {
            go_shape: &go_shape,
            go_pose: Pose2::new(0.0, 0.14, 0.0),
            eo_shape: Some(&eo_shape),
            eo_pose: Some(Pose2::new(0.0, 0.05, 0.0)),
            ground_y: 0.0,
        };
        let c = resolve_contact(
            ContactGeometry::GoVertexOnEoFace { vertex: 0, face: 2 },
            ContactMode::Sticking,
            0.5,
            &ctx,
        )
        .unwrap();
        assert_relative_eq!(c.point.normal.y, 1.0, epsilon = 1e-12);
        assert_eq!(c.pair, ContactPair::ObjectObject);

        // EO vertex on GO's bottom face (index 0): GO's outward normal is
        // −y, so the contact normal (B into A) is +y again.
        let c2 = resolve_contact(
            ContactGeometry::EoVertexOnGoFace { vertex: 2, face: 0 },
            ContactMode::Sticking,
            0.5,
            &ctx,
        )
        .unwrap();
        assert_relative_eq!(c2.point.normal.y, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn assembly_is_deterministic() {
        let shape = square_shape(0.05);
        let body = BodyParams::from_shape(&shape, 1.0);
        let pose = Pose2::new(0.0, 0.05, 0.0);
        let ctx = ResolveContext {
            go_shape: &shape,
            go_pose: pose,
            eo_shape: None,
            eo_pose: None,
            ground_y: 0.0,
        };
        let contacts: Vec<_> = [0usize, 1]
            .iter()
            .map(|&v| {
                resolve_contact(
                    ContactGeometry::GoVertexOnGround { vertex: v },
                    ContactMode::Sticking,
                    0.4,
                    &ctx,
                )
                .unwrap()
            })
            .collect();
        let config = ContactModelConfig::for_shape(&shape);
        let inputs = EquilibriumInputs {
            go_body: &body,
            go_pose: pose,
            eo_body: None,
            eo_pose: None,
            w_ext: Wrench2::new(0.3, -1.0, 0.02),
            contacts: &contacts,
            config: &config,
        };
        let a1 = assemble_equilibrium(&inputs, Relaxation::Strict).unwrap();
        let a2 = assemble_equilibrium(&inputs, Relaxation::Strict).unwrap();
        assert_eq!(a1.qp, a2.qp);
        let s1 = solve_forces(&a1, &config.qp).unwrap();
        let s2 = solve_forces(&a2, &config.qp).unwrap();
        assert_eq!(s1.qp.z, s2.qp.z);
    }
}
