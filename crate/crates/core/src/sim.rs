//! Quasi-static forward simulation with contact-mode enumeration.
//!
//! One step answers: given the current body poses and a commanded
//! end-effector pose, where does the system settle? The stepper:
//!
//! 1. collects candidate contacts (vertices near faces or the ground),
//! 2. enumerates mode assignments over them (stick / slide± / separate),
//! 3. for each assignment solves the square equilibrium system — force and
//!    moment balance per body, zero gap per active contact, zero tangential
//!    slip per sticking contact, slip magnitude and cone-boundary rows per
//!    sliding contact — with a damped Newton iteration,
//! 4. keeps assignments that pass the physical post-checks (non-negative
//!    slip, no penetration, and a strict equilibrium QP whose forces respect
//!    every assigned mode), and
//! 5. returns the best survivor: fewest sliding contacts, then smallest
//!    force norm, ties broken by enumeration order.
//!
//! If nothing survives, the state freezes for that step (a jam). A step
//! whose pose change exceeds the configured bound is an error — the
//! quasi-static assumption no longer holds and results would be garbage.
//!
//! Measurement noise perturbs only what a controller *sees* (the grasped
//! object pose and transmitted wrench), never the dynamics. Draws come from
//! a seeded counter RNG in a fixed order, so runs replay bit-identically.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::compliance::{transmitted_wrench, ElasticityModel, GraspGeometry};
use crate::contact::{
    assemble_equilibrium, balance_residuals, check_mode_consistency, extract_solution,
    resolve_contact, ContactError, ContactForce, ContactGeometry, ContactMode,
    ContactModelConfig, ContactPair, EquilibriumInputs, LabeledContact, Relaxation,
    ResolveContext,
};
use crate::geometry::{
    radius_of_gyration, transform_point, wrap_angle, BodyParams, PolygonShape, Pose2, Vec2,
    Wrench2,
};
use crate::par;
use crate::qp::{QpConfig, QpError, QpStatus};

/// Simulation errors.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    /// A step moved a body farther than the quasi-static bound allows.
    #[error(
        "{body} moved {translation:.4} m / {rotation:.4} rad in one step \
         (bounds {limit_translation} m, {limit_rotation} rad)"
    )]
    QuasiStaticViolation {
        /// Which body moved too far.
        body: &'static str,
        /// Translation over the step, meters.
        translation: f64,
        /// Rotation over the step, radians.
        rotation: f64,
        /// Configured translation bound.
        limit_translation: f64,
        /// Configured rotation bound.
        limit_rotation: f64,
    },
    /// More simultaneous candidate contacts than the enumeration cap.
    #[error("{count} candidate contacts exceed the enumeration cap {cap}")]
    TooManyCandidates {
        /// Candidates found.
        count: usize,
        /// Configured cap.
        cap: usize,
    },
    /// Equilibrium-program failure on the verification pass.
    #[error("contact model: {0}")]
    Contact(#[from] ContactError),
    /// QP solver failure on the verification pass.
    #[error("qp: {0}")]
    Qp(#[from] QpError),
}

/// A scene: grasped object (always present, held through the elastic
/// gripper), optional extrinsic object, and a horizontal ground line.
#[derive(Debug, Clone)]
pub struct SimScene {
    /// Grasped-object shape.
    pub go_shape: PolygonShape,
    /// Grasped-object mass properties.
    pub go_body: BodyParams,
    /// Extrinsic-object shape.
    pub eo_shape: Option<PolygonShape>,
    /// Extrinsic-object mass properties.
    pub eo_body: Option<BodyParams>,
    /// Ground height (world y).
    pub ground_y: f64,
    /// Friction at the object-object contact.
    pub mu_object: f64,
    /// Friction at ground contacts.
    pub mu_ground: f64,
    /// Gripper elasticity (gocf deflection → wrench).
    pub elasticity: ElasticityModel,
    /// Grasp frames and CoM.
    pub grasp: GraspGeometry,
}

impl SimScene {
    /// True when the scene has an extrinsic object.
    #[inline]
    #[must_use]
    pub fn has_eo(&self) -> bool {
        self.eo_shape.is_some() && self.eo_body.is_some()
    }

    /// Contact-model configuration matched to this scene (torque scale from
    /// the moved object: the extrinsic one when present).
    #[must_use]
    pub fn contact_config(&self) -> ContactModelConfig {
        let shape = self.eo_shape.as_ref().unwrap_or(&self.go_shape);
        ContactModelConfig::for_shape(shape)
    }

    /// Friction coefficient for a contact pair.
    #[inline]
    #[must_use]
    pub fn mu_for(&self, pair: ContactPair) -> f64 {
        match pair {
            ContactPair::ObjectObject => self.mu_object,
            ContactPair::EoGround | ContactPair::GoGround => self.mu_ground,
        }
    }
}

/// Body poses the simulator evolves.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimState {
    /// Grasped-object pose.
    pub x_go: Pose2,
    /// Extrinsic-object pose.
    pub x_eo: Option<Pose2>,
}

/// Stepper configuration.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SimConfig {
    /// Vertex-to-surface distance below which a contact becomes a candidate.
    /// Must exceed the per-step motion bound or approaching surfaces are
    /// missed.
    pub contact_proximity: f64,
    /// Newton convergence tolerance (∞-norm of the residual).
    pub newton_tol: f64,
    /// Newton iteration cap per mode assignment.
    pub newton_max_iters: usize,
    /// Margin tolerance for post-checks and mode consistency.
    pub consistency_tol: f64,
    /// Per-step translation bound, meters.
    pub max_step_translation: f64,
    /// Per-step rotation bound, radians.
    pub max_step_rotation: f64,
    /// Candidate-contact cap (assignments grow as 4^N).
    pub max_candidates: usize,
    /// QP settings for the verification solve.
    pub qp: QpConfig,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            contact_proximity: 4e-3,
            newton_tol: 1e-8,
            newton_max_iters: 200,
            consistency_tol: 1e-5,
            max_step_translation: 2e-3,
            max_step_rotation: 1.0_f64.to_radians(),
            max_candidates: 4,
            qp: QpConfig::default(),
        }
    }
}

/// Result of one quasi-static step.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    /// Settled poses.
    pub state: SimState,
    /// Transmitted gripper wrench at the settled poses.
    pub w_ext: Wrench2,
    /// Every candidate contact with its chosen mode.
    pub candidates: Vec<(ContactGeometry, ContactMode)>,
    /// Active contacts resolved at the settled poses.
    pub contacts: Vec<LabeledContact>,
    /// Verified equilibrium forces, aligned with `contacts`.
    pub forces: Vec<Option<ContactForce>>,
    /// True when no mode assignment was physically consistent; the state
    /// holds its previous value.
    pub frozen: bool,
    /// Mode assignments evaluated before the winning priority group
    /// resolved (all 4^N of them on a frozen step).
    pub assignments_tried: usize,
}

// ---------------------------------------------------------------------------
// Candidate detection and contact kinematics
// ---------------------------------------------------------------------------

fn detect_candidates(
    scene: &SimScene,
    state: &SimState,
    proximity: f64,
) -> Vec<ContactGeometry> {
    let mut out = Vec::new();
    if let (Some(eo_shape), Some(eo_pose)) = (scene.eo_shape.as_ref(), state.x_eo.as_ref()) {
        // Grasped-object vertices against extrinsic faces.
        for (vi, &v) in scene.go_shape.vertices.iter().enumerate() {
            let v_world = transform_point(&state.x_go, v);
            let v_eo = transform_point(&eo_pose.inverse(), v_world);
            for face in 0..eo_shape.num_edges() {
                let (a, b) = eo_shape.edge(face);
                let (d, _, _) = crate::geometry::point_segment_distance(v_eo, a, b);
                if d <= proximity {
                    out.push(ContactGeometry::GoVertexOnEoFace { vertex: vi, face });
                }
            }
        }
        // Extrinsic vertices against grasped-object faces.
        for (vi, &v) in eo_shape.vertices.iter().enumerate() {
            let v_world = transform_point(eo_pose, v);
            let v_go = transform_point(&state.x_go.inverse(), v_world);
            for face in 0..scene.go_shape.num_edges() {
                let (a, b) = scene.go_shape.edge(face);
                let (d, _, _) = crate::geometry::point_segment_distance(v_go, a, b);
                if d <= proximity {
                    out.push(ContactGeometry::EoVertexOnGoFace { vertex: vi, face });
                }
            }
        }
        // Extrinsic vertices against the ground.
        for (vi, &v) in eo_shape.vertices.iter().enumerate() {
            let v_world = transform_point(eo_pose, v);
            if (v_world.y - scene.ground_y).abs() <= proximity {
                out.push(ContactGeometry::EoVertexOnGround { vertex: vi });
            }
        }
    }
    // Grasped-object vertices against the ground.
    for (vi, &v) in scene.go_shape.vertices.iter().enumerate() {
        let v_world = transform_point(&state.x_go, v);
        if (v_world.y - scene.ground_y).abs() <= proximity {
            out.push(ContactGeometry::GoVertexOnGround { vertex: vi });
        }
    }
    out
}

/// Face frame of a candidate: (anchor, unit direction, outward unit normal)
/// in the face body's frame, plus the vertex in that same frame.
fn face_frame(
    scene: &SimScene,
    g: ContactGeometry,
    x_go: &Pose2,
    x_eo: Option<&Pose2>,
) -> (Vec2, Vec2, Vec2, Vec2) {
    match g {
        ContactGeometry::GoVertexOnEoFace { vertex, face } => {
            let eo_shape = scene.eo_shape.as_ref().expect("scene has an EO");
            let eo_pose = x_eo.expect("state has an EO pose");
            let (a, b) = eo_shape.edge(face);
            let dir = (b - a).normalize();
            let n = eo_shape.edge_outward_normal(face);
            let v_world = transform_point(x_go, scene.go_shape.vertices[vertex]);
            let u = transform_point(&eo_pose.inverse(), v_world);
            (a, dir, n, u)
        }
        ContactGeometry::EoVertexOnGoFace { vertex, face } => {
            let eo_shape = scene.eo_shape.as_ref().expect("scene has an EO");
            let eo_pose = x_eo.expect("state has an EO pose");
            let (a, b) = scene.go_shape.edge(face);
            let dir = (b - a).normalize();
            let n = scene.go_shape.edge_outward_normal(face);
            let v_world = transform_point(eo_pose, eo_shape.vertices[vertex]);
            let u = transform_point(&x_go.inverse(), v_world);
            (a, dir, n, u)
        }
        ContactGeometry::EoVertexOnGround { vertex } => {
            let eo_shape = scene.eo_shape.as_ref().expect("scene has an EO");
            let eo_pose = x_eo.expect("state has an EO pose");
            let u = transform_point(eo_pose, eo_shape.vertices[vertex]);
            (
                Vec2::new(0.0, scene.ground_y),
                Vec2::new(-1.0, 0.0),
                Vec2::new(0.0, 1.0),
                u,
            )
        }
        ContactGeometry::GoVertexOnGround { vertex } => {
            let u = transform_point(x_go, scene.go_shape.vertices[vertex]);
            (
                Vec2::new(0.0, scene.ground_y),
                Vec2::new(-1.0, 0.0),
                Vec2::new(0.0, 1.0),
                u,
            )
        }
    }
}

/// Normal gap of a candidate (distance of the vertex off the face line).
fn gap_of(scene: &SimScene, g: ContactGeometry, x_go: &Pose2, x_eo: Option<&Pose2>) -> f64 {
    let (a, _, n, u) = face_frame(scene, g, x_go, x_eo);
    n.dot(&(u - a))
}

/// Arc coordinate of the vertex along the face direction. Differences of
/// this value over a step measure tangential slip, signed to match the
/// contact-frame tangent (normal rotated 90° CCW).
fn arc_of(scene: &SimScene, g: ContactGeometry, x_go: &Pose2, x_eo: Option<&Pose2>) -> f64 {
    let (a, dir, _, u) = face_frame(scene, g, x_go, x_eo);
    dir.dot(&(u - a))
}

fn penetration_free(scene: &SimScene, x_go: &Pose2, x_eo: Option<&Pose2>, tol: f64) -> bool {
    for &v in &scene.go_shape.vertices {
        if transform_point(x_go, v).y < scene.ground_y - tol {
            return false;
        }
    }
    if let (Some(eo_shape), Some(eo_pose)) = (scene.eo_shape.as_ref(), x_eo) {
        for &v in &eo_shape.vertices {
            if transform_point(eo_pose, v).y < scene.ground_y - tol {
                return false;
            }
        }
        // Mutual containment check with a depth tolerance.
        for &v in &scene.go_shape.vertices {
            let p = transform_point(&eo_pose.inverse(), transform_point(x_go, v));
            if eo_shape.contains(p) && eo_shape.boundary_distance(p) > tol {
                return false;
            }
        }
        for &v in &eo_shape.vertices {
            let p = transform_point(&x_go.inverse(), transform_point(eo_pose, v));
            if scene.go_shape.contains(p) && scene.go_shape.boundary_distance(p) > tol {
                return false;
            }
        }
    }
    true
}

// ---------------------------------------------------------------------------
// Mode-fixed equilibrium system
// ---------------------------------------------------------------------------

const MODE_ORDER: [ContactMode; 4] = [
    ContactMode::Sticking,
    ContactMode::SlidingPositive,
    ContactMode::SlidingNegative,
    ContactMode::Separated,
];

struct ModeSystem<'a> {
    scene: &'a SimScene,
    x_ee: &'a Pose2,
    start: &'a SimState,
    candidates: &'a [ContactGeometry],
    modes: Vec<ContactMode>,
    active: Vec<usize>,
    sliding: Vec<usize>,
    start_arcs: Vec<f64>,
    ts_go: f64,
    ts_eo: f64,
}

impl<'a> ModeSystem<'a> {
    fn new(
        scene: &'a SimScene,
        x_ee: &'a Pose2,
        start: &'a SimState,
        candidates: &'a [ContactGeometry],
        modes: Vec<ContactMode>,
    ) -> Self {
        let active: Vec<usize> = (0..candidates.len())
            .filter(|&i| modes[i] != ContactMode::Separated)
            .collect();
        let sliding: Vec<usize> = (0..candidates.len())
            .filter(|&i| modes[i].is_sliding())
            .collect();
        let start_arcs = candidates
            .iter()
            .map(|&g| arc_of(scene, g, &start.x_go, start.x_eo.as_ref()))
            .collect();
        let ts_go = radius_of_gyration(&scene.go_shape);
        let ts_eo = scene
            .eo_shape
            .as_ref()
            .map_or(ts_go, radius_of_gyration);
        Self {
            scene,
            x_ee,
            start,
            candidates,
            modes,
            active,
            sliding,
            start_arcs,
            ts_go,
            ts_eo,
        }
    }

    fn has_eo(&self) -> bool {
        self.scene.has_eo() && self.start.x_eo.is_some()
    }

    fn num_unknowns(&self) -> usize {
        3 + if self.has_eo() { 3 } else { 0 } + 2 * self.active.len() + self.sliding.len()
    }

    fn pack_init(&self) -> DVector<f64> {
        let mut xi = DVector::zeros(self.num_unknowns());
        xi[0] = self.start.x_go.x;
        xi[1] = self.start.x_go.y;
        xi[2] = self.start.x_go.theta;
        if let Some(eo) = self.start.x_eo.as_ref() {
            if self.has_eo() {
                xi[3] = eo.x;
                xi[4] = eo.y;
                xi[5] = eo.theta;
            }
        }
        xi
    }

    fn poses_from(&self, xi: &DVector<f64>) -> (Pose2, Option<Pose2>) {
        let x_go = Pose2::new(xi[0], xi[1], xi[2]);
        let x_eo = if self.has_eo() {
            Some(Pose2::new(xi[3], xi[4], xi[5]))
        } else {
            self.start.x_eo
        };
        (x_go, x_eo)
    }

    fn force_offset(&self) -> usize {
        3 + if self.has_eo() { 3 } else { 0 }
    }

    fn residual(&self, xi: &DVector<f64>) -> DVector<f64> {
        let (x_go, x_eo) = self.poses_from(xi);
        let scene = self.scene;
        let fo = self.force_offset();
        let ctx = ResolveContext {
            go_shape: &scene.go_shape,
            go_pose: x_go,
            eo_shape: scene.eo_shape.as_ref(),
            eo_pose: x_eo,
            ground_y: scene.ground_y,
        };
        // Resolve active contacts and attach the candidate forces.
        let mut contacts = Vec::with_capacity(self.active.len());
        let mut forces = Vec::with_capacity(self.active.len());
        for (slot, &ci) in self.active.iter().enumerate() {
            let g = self.candidates[ci];
            let c = resolve_contact(g, self.modes[ci], scene.mu_for(g.pair()), &ctx)
                .expect("candidate geometry references scene bodies");
            contacts.push(c);
            forces.push(Some(ContactForce::new(xi[fo + 2 * slot], xi[fo + 2 * slot + 1])));
        }
        let w_ext = transmitted_wrench(&scene.elasticity, &scene.grasp, self.x_ee, &x_go);
        let config = scene.contact_config();
        let inputs = EquilibriumInputs {
            go_body: &scene.go_body,
            go_pose: x_go,
            eo_body: scene.eo_body.as_ref().filter(|_| self.has_eo()),
            eo_pose: x_eo.filter(|_| self.has_eo()),
            w_ext,
            contacts: &contacts,
            config: &config,
        };
        let (go_res, eo_res) = balance_residuals(&inputs, &forces);

        let rows = self.num_unknowns();
        let mut r = DVector::zeros(rows);
        r[0] = go_res.fx;
        r[1] = go_res.fy;
        r[2] = go_res.tau / self.ts_go;
        let mut p = 3;
        if let Some(eo_res) = eo_res {
            r[3] = eo_res.fx;
            r[4] = eo_res.fy;
            r[5] = eo_res.tau / self.ts_eo;
            p = 6;
        }
        let sigma_offset = fo + 2 * self.active.len();
        let mut sigma_slot = 0usize;
        for (slot, &ci) in self.active.iter().enumerate() {
            let g = self.candidates[ci];
            let mu = scene.mu_for(g.pair());
            r[p] = gap_of(scene, g, &x_go, x_eo.as_ref());
            p += 1;
            let slip = arc_of(scene, g, &x_go, x_eo.as_ref()) - self.start_arcs[ci];
            let f_t = xi[fo + 2 * slot];
            let f_n = xi[fo + 2 * slot + 1];
            match self.modes[ci] {
                ContactMode::Sticking => {
                    r[p] = slip;
                    p += 1;
                }
                ContactMode::SlidingPositive => {
                    r[p] = slip - xi[sigma_offset + sigma_slot];
                    r[p + 1] = f_t + mu * f_n;
                    p += 2;
                    sigma_slot += 1;
                }
                ContactMode::SlidingNegative => {
                    r[p] = slip + xi[sigma_offset + sigma_slot];
                    r[p + 1] = f_t - mu * f_n;
                    p += 2;
                    sigma_slot += 1;
                }
                ContactMode::Separated => unreachable!("active list excludes separated"),
            }
        }
        debug_assert_eq!(p, rows);
        r
    }
}

fn fd_jacobian(
    f: &dyn Fn(&DVector<f64>) -> DVector<f64>,
    x: &DVector<f64>,
    r0: &DVector<f64>,
) -> DMatrix<f64> {
    let n = x.len();
    let mut j = DMatrix::zeros(r0.len(), n);
    let mut xp = x.clone();
    for i in 0..n {
        let h = 1e-7 * x[i].abs().max(1.0);
        xp[i] = x[i] + h;
        let ri = f(&xp);
        xp[i] = x[i];
        j.set_column(i, &((ri - r0) / h));
    }
    j
}

/// Damped (Levenberg-Marquardt) Newton on a square residual system.
fn damped_newton(
    f: &dyn Fn(&DVector<f64>) -> DVector<f64>,
    x0: DVector<f64>,
    tol: f64,
    max_iters: usize,
) -> Option<DVector<f64>> {
    let mut x = x0;
    let mut r = f(&x);
    if !r.iter().all(|v| v.is_finite()) {
        return None;
    }
    let mut lambda = 1e-6;
    for _ in 0..max_iters {
        if r.amax() <= tol {
            return Some(x);
        }
        let j = fd_jacobian(f, &x, &r);
        let jtj = j.transpose() * &j;
        let jtr = j.transpose() * &r;
        let n = x.len();
        let mut improved = false;
        while lambda <= 1e12 {
            let m = &jtj + DMatrix::identity(n, n) * lambda;
            let Some(step) = m.lu().solve(&(-&jtr)) else {
                lambda *= 10.0;
                continue;
            };
            let cand = &x + &step;
            let rc = f(&cand);
            if rc.iter().all(|v| v.is_finite()) && rc.norm() < r.norm() {
                x = cand;
                r = rc;
                lambda = (lambda * 0.3).max(1e-12);
                improved = true;
                break;
            }
            lambda *= 10.0;
        }
        if !improved {
            return None; // stalled: no damping level makes progress
        }
    }
    if r.amax() <= tol {
        Some(x)
    } else {
        None
    }
}

// ---------------------------------------------------------------------------
// Stepping
// ---------------------------------------------------------------------------

struct Evaluated {
    modes: Vec<ContactMode>,
    state: SimState,
    w_ext: Wrench2,
    contacts: Vec<LabeledContact>,
    forces: Vec<Option<ContactForce>>,
    force_sq: f64,
}

fn evaluate_assignment(
    scene: &SimScene,
    start: &SimState,
    x_ee: &Pose2,
    candidates: &[ContactGeometry],
    modes: Vec<ContactMode>,
    config: &SimConfig,
) -> Option<Evaluated> {
    // An extrinsic object must be supported by at least one active contact.
    let has_eo = scene.has_eo() && start.x_eo.is_some();
    if has_eo {
        let eo_touched = candidates.iter().zip(&modes).any(|(g, &m)| {
            m != ContactMode::Separated
                && matches!(
                    g,
                    ContactGeometry::GoVertexOnEoFace { .. }
                        | ContactGeometry::EoVertexOnGoFace { .. }
                        | ContactGeometry::EoVertexOnGround { .. }
                )
        });
        if !eo_touched {
            return None;
        }
    }
    let system = ModeSystem::new(scene, x_ee, start, candidates, modes);
    let f = |xi: &DVector<f64>| system.residual(xi);
    let xi = damped_newton(&f, system.pack_init(), config.newton_tol, config.newton_max_iters)?;
    let (x_go, x_eo) = system.poses_from(&xi);
    let tol = config.consistency_tol;

    // Slip magnitudes must be non-negative.
    let sigma_offset = system.force_offset() + 2 * system.active.len();
    for k in 0..system.sliding.len() {
        if xi[sigma_offset + k] < -tol {
            return None;
        }
    }
    // Separated candidates must not penetrate; neither may anything else.
    for (i, &g) in candidates.iter().enumerate() {
        if system.modes[i] == ContactMode::Separated
            && gap_of(scene, g, &x_go, x_eo.as_ref()) < -tol
        {
            return None;
        }
    }
    if !penetration_free(scene, &x_go, x_eo.as_ref(), tol) {
        return None;
    }

    // Verify with the strict equilibrium program: forces must exist inside
    // every assigned cone at the settled poses.
    let ctx = ResolveContext {
        go_shape: &scene.go_shape,
        go_pose: x_go,
        eo_shape: scene.eo_shape.as_ref(),
        eo_pose: x_eo,
        ground_y: scene.ground_y,
    };
    let mut contacts = Vec::with_capacity(system.active.len());
    for &ci in &system.active {
        let g = candidates[ci];
        let c = resolve_contact(g, system.modes[ci], scene.mu_for(g.pair()), &ctx).ok()?;
        contacts.push(c);
    }
    let w_ext = transmitted_wrench(&scene.elasticity, &scene.grasp, x_ee, &x_go);
    let contact_config = scene.contact_config();
    let inputs = EquilibriumInputs {
        go_body: &scene.go_body,
        go_pose: x_go,
        eo_body: scene.eo_body.as_ref().filter(|_| has_eo),
        eo_pose: x_eo.filter(|_| has_eo),
        w_ext,
        contacts: &contacts,
        config: &contact_config,
    };
    let assembly = assemble_equilibrium(&inputs, Relaxation::Strict).ok()?;
    let sol = crate::qp::solve(&assembly.qp, &config.qp).ok()?;
    if sol.status != QpStatus::Optimal {
        return None;
    }
    let solution = extract_solution(&assembly, sol);
    let report = check_mode_consistency(&contacts, &solution.forces, tol);
    if !report.consistent {
        return None;
    }
    let force_sq: f64 = solution
        .forces
        .iter()
        .flatten()
        .map(|f| f.tangential * f.tangential + f.normal * f.normal)
        .sum();
    Some(Evaluated {
        modes: system.modes,
        state: SimState { x_go, x_eo },
        w_ext,
        contacts,
        forces: solution.forces,
        force_sq,
    })
}

/// Advances the scene one quasi-static step toward the commanded
/// end-effector pose.
///
/// # Errors
/// [`SimError::TooManyCandidates`] when the candidate set exceeds the
/// enumeration cap and [`SimError::QuasiStaticViolation`] when the settled
/// poses moved beyond the per-step bounds. A step with *no* consistent mode
/// assignment is not an error: the state freezes and the outcome says so.
pub fn step(
    scene: &SimScene,
    state: &SimState,
    x_ee: &Pose2,
    config: &SimConfig,
) -> Result<StepOutcome, SimError> {
    let candidates = detect_candidates(scene, state, config.contact_proximity);
    if candidates.len() > config.max_candidates {
        return Err(SimError::TooManyCandidates {
            count: candidates.len(),
            cap: config.max_candidates,
        });
    }
    let n = candidates.len();
    let total = 4usize.pow(n as u32);
    // Preference among consistent branches: keep the most contacts engaged
    // (a body does not spontaneously tip onto fewer supports), then the
    // fewest sliding, then the smallest canonical force norm. Physically
    // wrong high-engagement branches never survive the strict cone
    // re-solve, so this is a tie-break among genuine equilibria.
    //
    // The preference is lexicographic over (engaged, sliding) before the
    // force norm, so assignments are evaluated one priority group at a
    // time and the search stops at the first group with a survivor — the
    // common all-sticking step costs one solve instead of 4^N.
    let mut assignments: Vec<(Vec<ContactMode>, usize, usize)> = (0..total)
        .map(|code| {
            let mut modes = Vec::with_capacity(n);
            let mut c = code;
            for _ in 0..n {
                modes.push(MODE_ORDER[c % 4]);
                c /= 4;
            }
            modes.reverse(); // first candidate varies slowest
            let active = modes.iter().filter(|m| **m != ContactMode::Separated).count();
            let sliding = modes.iter().filter(|m| m.is_sliding()).count();
            (modes, active, sliding)
        })
        .collect();
    assignments.sort_by_key(|&(_, a, s)| (std::cmp::Reverse(a), s));
    let mut tried = 0usize;
    let mut best: Option<Evaluated> = None;
    let mut idx = 0usize;
    while idx < assignments.len() {
        let key = (assignments[idx].1, assignments[idx].2);
        let mut end = idx;
        while end < assignments.len() && (assignments[end].1, assignments[end].2) == key {
            end += 1;
        }
        let group = &assignments[idx..end];
        let evaluated = par::map_collect(group, |(modes, _, _)| {
            evaluate_assignment(scene, state, x_ee, &candidates, modes.clone(), config)
        });
        tried += group.len();
        for cand in evaluated.into_iter().flatten() {
            let better = best
                .as_ref()
                .is_none_or(|b| cand.force_sq < b.force_sq);
            if better {
                best = Some(cand);
            }
        }
        if best.is_some() {
            break;
        }
        idx = end;
    }
    let Some(chosen) = best else {
        // Jam: nothing consistent. Hold the pose, report the deflection.
        let w_ext = transmitted_wrench(&scene.elasticity, &scene.grasp, x_ee, &state.x_go);
        return Ok(StepOutcome {
            state: *state,
            w_ext,
            candidates: candidates
                .into_iter()
                .map(|g| (g, ContactMode::Separated))
                .collect(),
            contacts: Vec::new(),
            forces: Vec::new(),
            frozen: true,
            assignments_tried: tried,
        });
    };

    // Quasi-static motion bound.
    let check_motion = |name: &'static str, from: &Pose2, to: &Pose2| -> Result<(), SimError> {
        let translation = (to.translation() - from.translation()).norm();
        let rotation = wrap_angle(to.theta - from.theta).abs();
        if translation > config.max_step_translation || rotation > config.max_step_rotation {
            return Err(SimError::QuasiStaticViolation {
                body: name,
                translation,
                rotation,
                limit_translation: config.max_step_translation,
                limit_rotation: config.max_step_rotation,
            });
        }
        Ok(())
    };
    check_motion("grasped object", &state.x_go, &chosen.state.x_go)?;
    if let (Some(from), Some(to)) = (state.x_eo.as_ref(), chosen.state.x_eo.as_ref()) {
        check_motion("extrinsic object", from, to)?;
    }

    Ok(StepOutcome {
        candidates: candidates.into_iter().zip(chosen.modes).collect(),
        state: chosen.state,
        w_ext: chosen.w_ext,
        contacts: chosen.contacts,
        forces: chosen.forces,
        frozen: false,
        assignments_tried: tried,
    })
}

// ---------------------------------------------------------------------------
// Measurement noise and rollouts
// ---------------------------------------------------------------------------

/// Gaussian measurement noise (1σ) on what the controller observes.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct NoiseModel {
    /// Grasped-object position noise, meters.
    pub pose_xy_std: f64,
    /// Grasped-object orientation noise, radians.
    pub pose_theta_std: f64,
    /// Wrench force noise, newtons.
    pub force_std: f64,
    /// Wrench torque noise, newton-meters.
    pub torque_std: f64,
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self {
            pose_xy_std: 2e-4,
            pose_theta_std: 2e-3,
            force_std: 0.05,
            torque_std: 5e-3,
        }
    }
}

/// What a controller sees after a step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    /// Measured grasped-object pose.
    pub x_go: Pose2,
    /// Measured transmitted wrench.
    pub w_ext: Wrench2,
}

/// Samples a measurement of the true pose and wrench. Always makes exactly
/// six draws in a fixed order, so streams stay aligned across configs.
pub fn measure(
    x_go: &Pose2,
    w_ext: &Wrench2,
    noise: &NoiseModel,
    rng: &mut impl Rng,
) -> Measurement {
    let mut draw = |std: f64| -> f64 {
        // Normal::new only fails on non-finite std.
        Normal::new(0.0, std).expect("finite std").sample(rng)
    };
    let dx = draw(noise.pose_xy_std);
    let dy = draw(noise.pose_xy_std);
    let dth = draw(noise.pose_theta_std);
    let dfx = draw(noise.force_std);
    let dfy = draw(noise.force_std);
    let dtau = draw(noise.torque_std);
    Measurement {
        x_go: Pose2::new(x_go.x + dx, x_go.y + dy, x_go.theta + dth),
        w_ext: Wrench2::new(w_ext.fx + dfx, w_ext.fy + dfy, w_ext.tau + dtau),
    }
}

/// One step of an open-loop rollout.
#[derive(Debug, Clone)]
pub struct RolloutRecord {
    /// Commanded end-effector pose for the step.
    pub commanded_ee: Pose2,
    /// Step result.
    pub outcome: StepOutcome,
    /// Noisy measurement of the settled state, when noise is on.
    pub measurement: Option<Measurement>,
}

/// Plays a commanded end-effector trajectory open loop.
///
/// With `noise`, a counter RNG seeded as given draws measurement noise after
/// every step; the dynamics themselves stay deterministic.
///
/// # Errors
/// Propagates the first [`SimError`] a step raises.
pub fn rollout(
    scene: &SimScene,
    init: &SimState,
    commands: &[Pose2],
    config: &SimConfig,
    noise: Option<(&NoiseModel, u64)>,
) -> Result<Vec<RolloutRecord>, SimError> {
    let mut rng = noise.map(|(_, seed)| ChaCha8Rng::seed_from_u64(seed));
    let mut state = *init;
    let mut out = Vec::with_capacity(commands.len());
    for cmd in commands {
        let outcome = step(scene, &state, cmd, config)?;
        state = outcome.state;
        let measurement = match (noise, rng.as_mut()) {
            (Some((nm, _)), Some(rng)) => {
                Some(measure(&outcome.state.x_go, &outcome.w_ext, nm, rng))
            }
            _ => None,
        };
        out.push(RolloutRecord {
            commanded_ee: *cmd,
            outcome,
            measurement,
        });
    }
    Ok(out)
}

/// Synthesizes a tactile point cloud on designated grasped-object edges.
///
/// Draws `n_points` samples whose edge is chosen with probability
/// proportional to edge length and whose position is uniform along the
/// edge, then perturbs each point with isotropic gaussian noise of the
/// given standard deviation. Points are returned in world frame at the
/// state's grasped-object pose. With `noise_std = 0` every point lies
/// exactly on an edge; the output feeds pose fitting.
#[must_use]
pub fn synth_edge_cloud(
    scene: &SimScene,
    state: &SimState,
    edges: &[usize],
    n_points: usize,
    noise_std: f64,
    seed: u64,
) -> Vec<Vec2> {
    if edges.is_empty() || n_points == 0 {
        return Vec::new();
    }
    let shape = &scene.go_shape;
    let lengths: Vec<f64> = edges
        .iter()
        .map(|&e| {
            let (a, b) = shape.edge(e);
            (b - a).norm()
        })
        .collect();
    let total: f64 = lengths.iter().sum();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n_points);
    for _ in 0..n_points {
        // Pick an edge by arc length, then a point uniformly along it.
        let mut pick = rng.gen::<f64>() * total;
        let mut chosen = edges.len() - 1;
        for (i, len) in lengths.iter().enumerate() {
            if pick < *len {
                chosen = i;
                break;
            }
            pick -= len;
        }
        let (a, b) = shape.edge(edges[chosen]);
        let t = rng.gen::<f64>();
        let body = a + (b - a) * t;
        let mut world = transform_point(&state.x_go, body);
        if noise_std > 0.0 {
            let normal = Normal::new(0.0, noise_std).expect("finite std");
            world.x += normal.sample(&mut rng);
            world.y += normal.sample(&mut rng);
        }
        out.push(world);
    }
    out
}
