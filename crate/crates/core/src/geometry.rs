//! Planar rigid-body kinematics: poses, polygons, contact detection against a
//! fixed ground line and between polygons, contact Jacobians, gravity
//! wrenches, and penetration gaps.
//!
//! # Conventions
//!
//! - All wrenches and contact Jacobians are referenced about each body's
//!   **world-frame center of mass**, so gravity contributes no torque term.
//! - A contact stores a world-frame unit `normal` pointing **from body B into
//!   body A** and a `tangent` rotated 90° counter-clockwise from it. Positive
//!   normal force pushes the bodies apart.
//! - Signed gaps are negative when admissible: `φ = −clearance` for
//!   translational gaps, `φ = −angular margin` for the relative-angle limits
//!   used by pivoting motions.
//!
//! All functions here are pure; given identical inputs they return
//! bit-identical outputs.

use nalgebra::{Matrix2x3, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// 2D vector/point alias used throughout the crate.
pub type Vec2 = Vector2<f64>;

/// Errors produced by contact detection.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    /// Bodies overlap deeper than the detection tolerance allows.
    #[error("penetration of depth {depth:.6e} m exceeds tolerance")]
    Penetration {
        /// Penetration depth in meters (positive).
        depth: f64,
    },
    /// Two disjoint feature pairs are simultaneously within tolerance,
    /// violating the single contact-point assumption.
    #[error("multiple disjoint contact locations within tolerance")]
    MultiContact,
}

/// Wraps an angle to the interval `(−π, π]`.
#[inline]
#[must_use]
pub fn wrap_angle(a: f64) -> f64 {
    let t = a.rem_euclid(std::f64::consts::TAU);
    if t > std::f64::consts::PI {
        t - std::f64::consts::TAU
    } else {
        t
    }
}

/// Rotates `v` by 90° counter-clockwise.
#[inline]
#[must_use]
pub fn perp(v: Vec2) -> Vec2 {
    Vec2::new(-v.y, v.x)
}

/// 2D cross product `a × b` (the z-component of the 3D cross product).
#[inline]
#[must_use]
pub fn cross2(a: Vec2, b: Vec2) -> f64 {
    a.x * b.y - a.y * b.x
}

// ---------------------------------------------------------------------------
// Pose2
// ---------------------------------------------------------------------------

/// Planar pose `(x, y, θ)` of a rigid body or the end-effector.
///
/// θ is kept normalized to `(−π, π]` by every constructor and operation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose2 {
    /// Translation x, meters.
    pub x: f64,
    /// Translation y, meters.
    pub y: f64,
    /// Rotation, radians, in `(−π, π]`.
    pub theta: f64,
}

impl Pose2 {
    /// Creates a pose, normalizing the angle.
    #[inline]
    #[must_use]
    pub fn new(x: f64, y: f64, theta: f64) -> Self {
        Self {
            x,
            y,
            theta: wrap_angle(theta),
        }
    }

    /// The identity pose.
    #[inline]
    #[must_use]
    pub fn identity() -> Self {
        Self {
            x: 0.0,
            y: 0.0,
            theta: 0.0,
        }
    }

    /// Translation component as a vector.
    #[inline]
    #[must_use]
    pub fn translation(&self) -> Vec2 {
        Vec2::new(self.x, self.y)
    }

    /// Rotates a body-frame vector into the world frame (no translation).
    #[inline]
    #[must_use]
    pub fn rotate(&self, v: Vec2) -> Vec2 {
        let (s, c) = self.theta.sin_cos();
        Vec2::new(c * v.x - s * v.y, s * v.x + c * v.y)
    }

    /// Composition `self ∘ other`: applies `other` first, then `self`.
    #[must_use]
    pub fn compose(&self, other: &Pose2) -> Pose2 {
        let t = self.rotate(other.translation()) + self.translation();
        Pose2::new(t.x, t.y, self.theta + other.theta)
    }

    /// The inverse pose, with `compose(p, inverse(p)) = identity`.
    #[must_use]
    pub fn inverse(&self) -> Pose2 {
        let (s, c) = self.theta.sin_cos();
        let t = Vec2::new(
            -(c * self.x + s * self.y),
            -(-s * self.x + c * self.y),
        );
        Pose2::new(t.x, t.y, -self.theta)
    }

    /// Pose as a 3-vector `(x, y, θ)`.
    #[inline]
    #[must_use]
    pub fn to_vector(&self) -> Vector3<f64> {
        Vector3::new(self.x, self.y, self.theta)
    }

    /// Pose from a 3-vector `(x, y, θ)`.
    #[inline]
    #[must_use]
    pub fn from_vector(v: &Vector3<f64>) -> Self {
        Pose2::new(v.x, v.y, v.z)
    }

    /// True when every component is finite.
    #[inline]
    #[must_use]
    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.theta.is_finite()
    }
}

/// Transforms a body-frame point to the world frame: rotate by θ, then
/// translate.
#[inline]
#[must_use]
pub fn transform_point(pose: &Pose2, p: Vec2) -> Vec2 {
    pose.rotate(p) + pose.translation()
}

// ---------------------------------------------------------------------------
// Shapes and body parameters
// ---------------------------------------------------------------------------

/// Simple polygon in body frame, vertices counter-clockwise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolygonShape {
    /// Ordered CCW vertex list, meters, body frame.
    pub vertices: Vec<Vec2>,
}

impl PolygonShape {
    /// Builds a polygon, asserting ≥ 3 vertices and CCW orientation.
    ///
    /// # Panics
    /// Panics when the vertex list is shorter than 3 or wound clockwise;
    /// shapes are construction-time constants, not runtime data.
    #[must_use]
    pub fn new(vertices: Vec<Vec2>) -> Self {
        assert!(vertices.len() >= 3, "polygon needs at least 3 vertices");
        let shape = Self { vertices };
        assert!(
            shape.area() > 0.0,
            "polygon vertices must be counter-clockwise"
        );
        shape
    }

    /// Axis-aligned box of width `w` and height `h` centered on the origin.
    #[must_use]
    pub fn box_shape(w: f64, h: f64) -> Self {
        let (hw, hh) = (0.5 * w, 0.5 * h);
        Self::new(vec![
            Vec2::new(-hw, -hh),
            Vec2::new(hw, -hh),
            Vec2::new(hw, hh),
            Vec2::new(-hw, hh),
        ])
    }

    /// Regular `n`-gon of circumradius `r` centered on the origin, first
    /// vertex at angle `phase`.
    #[must_use]
    pub fn regular(n: usize, r: f64, phase: f64) -> Self {
        assert!(n >= 3);
        let verts = (0..n)
            .map(|i| {
                let a = phase + std::f64::consts::TAU * i as f64 / n as f64;
                Vec2::new(r * a.cos(), r * a.sin())
            })
            .collect();
        Self::new(verts)
    }

    /// Number of edges (= number of vertices).
    #[inline]
    #[must_use]
    pub fn num_edges(&self) -> usize {
        self.vertices.len()
    }

    /// Endpoints of edge `i`, body frame: from vertex `i` to vertex `i+1`.
    #[inline]
    #[must_use]
    pub fn edge(&self, i: usize) -> (Vec2, Vec2) {
        let n = self.vertices.len();
        (self.vertices[i % n], self.vertices[(i + 1) % n])
    }

    /// Signed area (positive for CCW winding).
    #[must_use]
    pub fn area(&self) -> f64 {
        let n = self.vertices.len();
        let mut a = 0.0;
        for i in 0..n {
            let p = self.vertices[i];
            let q = self.vertices[(i + 1) % n];
            a += cross2(p, q);
        }
        0.5 * a
    }

    /// Area centroid, body frame.
    #[must_use]
    pub fn centroid(&self) -> Vec2 {
        let n = self.vertices.len();
        let mut c = Vec2::zeros();
        let mut a = 0.0;
        for i in 0..n {
            let p = self.vertices[i];
            let q = self.vertices[(i + 1) % n];
            let cr = cross2(p, q);
            a += cr;
            c += (p + q) * cr;
        }
        c / (3.0 * a)
    }

    /// Outward unit normal of edge `i`, body frame.
    ///
    /// For CCW winding the outward normal is the edge direction rotated 90°
    /// clockwise.
    #[must_use]
    pub fn edge_outward_normal(&self, i: usize) -> Vec2 {
        let (a, b) = self.edge(i);
        let d = (b - a).normalize();
        Vec2::new(d.y, -d.x)
    }

    /// True when the body-frame point lies inside the polygon (even-odd rule).
    #[must_use]
    pub fn contains(&self, p: Vec2) -> bool {
        let n = self.vertices.len();
        let mut inside = false;
        let mut j = n - 1;
        for i in 0..n {
            let vi = self.vertices[i];
            let vj = self.vertices[j];
            if (vi.y > p.y) != (vj.y > p.y)
                && p.x < (vj.x - vi.x) * (p.y - vi.y) / (vj.y - vi.y) + vi.x
            {
                inside = !inside;
            }
            j = i;
        }
        inside
    }

    /// Minimum distance from a body-frame point to the polygon boundary.
    #[must_use]
    pub fn boundary_distance(&self, p: Vec2) -> f64 {
        (0..self.num_edges())
            .map(|i| {
                let (a, b) = self.edge(i);
                point_segment_distance(p, a, b).0
            })
            .fold(f64::INFINITY, f64::min)
    }

    /// Closest boundary point to a body-frame point, with the edge index it
    /// lies on. Ties go to the lowest edge index.
    #[must_use]
    pub fn closest_boundary_point(&self, p: Vec2) -> (Vec2, usize) {
        let mut best_d = f64::INFINITY;
        let mut best = (Vec2::zeros(), 0);
        for i in 0..self.num_edges() {
            let (a, b) = self.edge(i);
            let (d, foot, _) = point_segment_distance(p, a, b);
            if d < best_d {
                best_d = d;
                best = (foot, i);
            }
        }
        best
    }
}

/// Radius of gyration `√(I/m)` of a uniform-density polygon.
///
/// The length scale used to aggregate rotational with translational errors
/// and to put torque rows in force units.
#[must_use]
pub fn radius_of_gyration(shape: &PolygonShape) -> f64 {
    // Second moment of area about the origin for a polygon, then shifted to
    // the centroid; uniform density makes I/m = I_area/area.
    let n = shape.vertices.len();
    let mut i_origin = 0.0;
    for i in 0..n {
        let p = shape.vertices[i];
        let q = shape.vertices[(i + 1) % n];
        let cr = cross2(p, q);
        i_origin += cr * (p.dot(&p) + p.dot(&q) + q.dot(&q));
    }
    i_origin /= 12.0;
    let area = shape.area();
    let c = shape.centroid();
    let i_centroid = i_origin - area * c.dot(&c);
    (i_centroid / area).sqrt()
}

/// Mass properties of a rigid body.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BodyParams {
    /// Mass, kg. Must be positive.
    pub mass: f64,
    /// Center of mass, body frame, meters.
    pub com: Vec2,
    /// Gravitational acceleration, m/s².
    pub gravity: f64,
}

impl BodyParams {
    /// Body parameters with the CoM at the uniform-density centroid of
    /// `shape` and the default gravity of 9.81 m/s².
    #[must_use]
    pub fn from_shape(shape: &PolygonShape, mass: f64) -> Self {
        assert!(mass > 0.0, "mass must be positive");
        Self {
            mass,
            com: shape.centroid(),
            gravity: 9.81,
        }
    }
}

// ---------------------------------------------------------------------------
// Wrenches
// ---------------------------------------------------------------------------

/// Planar wrench: force (N, N) plus torque (N·m) about a body's world CoM.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Wrench2 {
    /// Force x-component, N.
    pub fx: f64,
    /// Force y-component, N.
    pub fy: f64,
    /// Torque about the reference point, N·m.
    pub tau: f64,
}

impl Wrench2 {
    /// Builds a wrench from components.
    #[inline]
    #[must_use]
    pub fn new(fx: f64, fy: f64, tau: f64) -> Self {
        Self { fx, fy, tau }
    }

    /// The zero wrench.
    #[inline]
    #[must_use]
    pub fn zero() -> Self {
        Self::default()
    }

    /// Wrench as a 3-vector `(fx, fy, τ)`.
    #[inline]
    #[must_use]
    pub fn to_vector(&self) -> Vector3<f64> {
        Vector3::new(self.fx, self.fy, self.tau)
    }

    /// Wrench from a 3-vector `(fx, fy, τ)`.
    #[inline]
    #[must_use]
    pub fn from_vector(v: &Vector3<f64>) -> Self {
        Self::new(v.x, v.y, v.z)
    }

    /// Force part as a vector.
    #[inline]
    #[must_use]
    pub fn force(&self) -> Vec2 {
        Vec2::new(self.fx, self.fy)
    }
}

impl std::ops::Add for Wrench2 {
    type Output = Wrench2;
    fn add(self, rhs: Wrench2) -> Wrench2 {
        Wrench2::new(self.fx + rhs.fx, self.fy + rhs.fy, self.tau + rhs.tau)
    }
}

impl std::ops::Sub for Wrench2 {
    type Output = Wrench2;
    fn sub(self, rhs: Wrench2) -> Wrench2 {
        Wrench2::new(self.fx - rhs.fx, self.fy - rhs.fy, self.tau - rhs.tau)
    }
}

impl std::ops::Neg for Wrench2 {
    type Output = Wrench2;
    fn neg(self) -> Wrench2 {
        Wrench2::new(-self.fx, -self.fy, -self.tau)
    }
}

/// Gravity wrench of `body` about its own world CoM: `(0, −m·g, 0)`.
///
/// The torque component vanishes because wrenches are referenced at the CoM.
#[inline]
#[must_use]
pub fn gravity_wrench(body: &BodyParams, _pose: &Pose2) -> Wrench2 {
    Wrench2::new(0.0, -body.mass * body.gravity, 0.0)
}

/// Moves a wrench whose torque is referenced at world point `p` to a torque
/// referenced at world point `c`: `τ_c = τ_p + (p − c) × F`.
#[inline]
#[must_use]
pub fn transport_wrench(w: &Wrench2, p: Vec2, c: Vec2) -> Wrench2 {
    Wrench2::new(w.fx, w.fy, w.tau + cross2(p - c, w.force()))
}

// ---------------------------------------------------------------------------
// Contact points and Jacobians
// ---------------------------------------------------------------------------

/// A single point contact between body A and body B (or the ground).
///
/// `normal` points from B into A; positive normal force pushes A away from B.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContactPoint {
    /// Contact point in body-A frame.
    pub body_a_point: Vec2,
    /// Contact point in body-B frame (world frame when B is the ground).
    pub body_b_point: Vec2,
    /// Unit normal, world frame, from B into A.
    pub normal: Vec2,
    /// Unit tangent, world frame, 90° CCW from the normal.
    pub tangent: Vec2,
}

impl ContactPoint {
    /// Builds a contact point from a normal, deriving the tangent.
    #[must_use]
    pub fn new(body_a_point: Vec2, body_b_point: Vec2, normal: Vec2) -> Self {
        let n = normal.normalize();
        Self {
            body_a_point,
            body_b_point,
            normal: n,
            tangent: perp(n),
        }
    }

    /// The same contact seen from body B: material points swapped, frame
    /// negated. Force coordinates `(f_t, f_n)` are shared between the two
    /// views, so each body's balance uses its own view with a `+` sign.
    #[must_use]
    pub fn flipped(&self) -> Self {
        Self {
            body_a_point: self.body_b_point,
            body_b_point: self.body_a_point,
            normal: -self.normal,
            tangent: -self.tangent,
        }
    }
}

/// 2×3 matrix mapping a body twist `(ẋ, ẏ, θ̇)` to the contact-frame velocity
/// `(tangential, normal)` of the body's material point at the contact.
///
/// Its transpose maps a contact force `(f_t, f_n)` to the body wrench about
/// the world CoM.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContactJacobian(pub Matrix2x3<f64>);

impl ContactJacobian {
    /// Wrench about the world CoM produced by contact force `(f_t, f_n)`:
    /// `Jᵀ f = (f_world, r × f_world)`.
    #[inline]
    #[must_use]
    pub fn wrench_from_force(&self, f_t: f64, f_n: f64) -> Wrench2 {
        let w = self.0.transpose() * Vector2::new(f_t, f_n);
        Wrench2::new(w.x, w.y, w.z)
    }

    /// Contact-frame velocity `(v_t, v_n)` of the body material point under
    /// twist `(ẋ, ẏ, θ̇)`.
    #[inline]
    #[must_use]
    pub fn velocity(&self, twist: &Vector3<f64>) -> Vec2 {
        self.0 * twist
    }
}

/// Contact Jacobian of body A at `cp`, about the body's world CoM.
///
/// Rows are the tangent and normal directions; the third column is the moment
/// arm `r × direction` with `r` = world contact point − world CoM.
#[must_use]
pub fn contact_jacobian(pose: &Pose2, body: &BodyParams, cp: &ContactPoint) -> ContactJacobian {
    let p_world = transform_point(pose, cp.body_a_point);
    let com_world = transform_point(pose, body.com);
    let r = p_world - com_world;
    let pr = perp(r);
    ContactJacobian(Matrix2x3::new(
        cp.tangent.x,
        cp.tangent.y,
        cp.tangent.dot(&pr),
        cp.normal.x,
        cp.normal.y,
        cp.normal.dot(&pr),
    ))
}

// ---------------------------------------------------------------------------
// Contact detection
// ---------------------------------------------------------------------------

/// Distance from point `p` to segment `ab`, plus the closest point and its
/// parameter `t ∈ [0, 1]` along the segment.
#[must_use]
pub fn point_segment_distance(p: Vec2, a: Vec2, b: Vec2) -> (f64, Vec2, f64) {
    let ab = b - a;
    let len2 = ab.dot(&ab);
    let t = if len2 > 0.0 {
        ((p - a).dot(&ab) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let foot = a + ab * t;
    ((p - foot).norm(), foot, t)
}

/// Contacts of `shape` (body A) against the ground line `y = ground_y`
/// (body B), detected with tolerance `tol`.
///
/// Vertices within `tol` of the ground are reported, ordered by increasing
/// world x; a face resting flat therefore yields exactly its two endpoint
/// vertices. Normals are `(0, 1)`.
///
/// # Errors
/// [`GeometryError::Penetration`] when a vertex lies below `ground_y − tol`.
pub fn detect_ground_contacts(
    shape: &PolygonShape,
    pose: &Pose2,
    ground_y: f64,
    tol: f64,
) -> Result<Vec<ContactPoint>, GeometryError> {
    let mut hits: Vec<(f64, ContactPoint)> = Vec::new();
    for v in &shape.vertices {
        let w = transform_point(pose, *v);
        if w.y < ground_y - tol {
            return Err(GeometryError::Penetration {
                depth: ground_y - w.y,
            });
        }
        if w.y <= ground_y + tol {
            hits.push((
                w.x,
                ContactPoint::new(*v, Vec2::new(w.x, ground_y), Vec2::new(0.0, 1.0)),
            ));
        }
    }
    hits.sort_by(|a, b| a.0.total_cmp(&b.0));
    Ok(hits.into_iter().map(|(_, c)| c).collect())
}

/// One candidate closest-feature pair found during polygon-polygon detection.
struct FeatureCandidate {
    distance: f64,
    world_point: Vec2,
    contact: ContactPoint,
}

/// Detects the single point contact between two polygons, if any.
///
/// Searches vertex-to-edge feature pairs in both directions. Returns a
/// contact when the closest pair is within `tol` (boundary inclusive); the
/// normal comes from the contacted edge and points from B into A.
/// Vertex-vertex closest pairs take the renormalized average of the two
/// adjacent edge normals of the contacted body.
///
/// # Errors
/// [`GeometryError::Penetration`] when the shapes overlap by more than `tol`;
/// [`GeometryError::MultiContact`] when two disjoint feature pairs are
/// simultaneously within `tol`.
pub fn detect_object_contact(
    shape_a: &PolygonShape,
    pose_a: &Pose2,
    shape_b: &PolygonShape,
    pose_b: &Pose2,
    tol: f64,
) -> Result<Option<ContactPoint>, GeometryError> {
    check_penetration(shape_a, pose_a, shape_b, pose_b, tol)?;

    let mut candidates: Vec<FeatureCandidate> = Vec::new();
    // Vertices of A against edges of B: the contacted edge belongs to B, so
    // its outward normal already points from B into A.
    collect_vertex_edge(shape_a, pose_a, shape_b, pose_b, tol, false, &mut candidates);
    // Vertices of B against edges of A: flip the roles so the stored contact
    // still describes (A-point, B-point, normal from B into A).
    collect_vertex_edge(shape_b, pose_b, shape_a, pose_a, tol, true, &mut candidates);

    if candidates.is_empty() {
        return Ok(None);
    }

    // Cluster by world position; disjoint clusters violate the single-point
    // contact assumption.
    let cluster_radius = (10.0 * tol).max(1e-3);
    let best = candidates
        .iter()
        .min_by(|a, b| a.distance.total_cmp(&b.distance))
        .expect("non-empty");
    if candidates
        .iter()
        .any(|c| (c.world_point - best.world_point).norm() > cluster_radius)
    {
        return Err(GeometryError::MultiContact);
    }
    Ok(Some(best.contact))
}

/// Collects vertex(V-body)-to-edge(E-body) candidates within `tol`.
///
/// `flipped = false`: V-body is A, E-body is B. `flipped = true`: V-body is
/// B, E-body is A (the produced contact is re-expressed for A/B roles).
fn collect_vertex_edge(
    shape_v: &PolygonShape,
    pose_v: &Pose2,
    shape_e: &PolygonShape,
    pose_e: &Pose2,
    tol: f64,
    flipped: bool,
    out: &mut Vec<FeatureCandidate>,
) {
    let nv = shape_v.vertices.len();
    let ne = shape_e.num_edges();
    for vi in 0..nv {
        let v_body = shape_v.vertices[vi];
        let v_world = transform_point(pose_v, v_body);
        // Closest point over all edges of the edge body.
        let mut best: Option<(f64, usize, Vec2, f64)> = None;
        for ei in 0..ne {
            let (a, b) = shape_e.edge(ei);
            let (aw, bw) = (transform_point(pose_e, a), transform_point(pose_e, b));
            let (d, foot, t) = point_segment_distance(v_world, aw, bw);
            if best.is_none() || d < best.as_ref().unwrap().0 {
                best = Some((d, ei, foot, t));
            }
        }
        let (d, ei, foot_world, t) = best.expect("polygon has edges");
        if d > tol {
            continue;
        }
        // Normal from the contacted edge, pointing from the edge body toward
        // the vertex body. Vertex-vertex case (foot at an endpoint): average
        // the two adjacent edge normals of the contacted body.
        let endpoint_eps = 1e-9;
        let n_from_edge_body = if t < endpoint_eps || t > 1.0 - endpoint_eps {
            let corner = if t < endpoint_eps { ei } else { (ei + 1) % ne };
            // Edges adjacent to vertex `corner`: edge corner−1 and edge corner.
            let prev = (corner + ne - 1) % ne;
            let avg = shape_e.edge_outward_normal(prev) + shape_e.edge_outward_normal(corner);
            pose_e.rotate(avg).normalize()
        } else {
            pose_e.rotate(shape_e.edge_outward_normal(ei))
        };
        let foot_body_e = transform_point(&pose_e.inverse(), foot_world);
        let (a_point, b_point, normal) = if flipped {
            // Vertex belongs to B, edge belongs to A: normal from B into A is
            // the negated outward normal of A's edge.
            (foot_body_e, v_body, -n_from_edge_body)
        } else {
            (v_body, foot_body_e, n_from_edge_body)
        };
        out.push(FeatureCandidate {
            distance: d,
            world_point: v_world,
            contact: ContactPoint::new(a_point, b_point, normal),
        });
    }
}

/// Errors when the polygons overlap deeper than `tol`.
fn check_penetration(
    shape_a: &PolygonShape,
    pose_a: &Pose2,
    shape_b: &PolygonShape,
    pose_b: &Pose2,
    tol: f64,
) -> Result<(), GeometryError> {
    let depth = penetration_depth(shape_a, pose_a, shape_b, pose_b);
    if depth > tol {
        return Err(GeometryError::Penetration { depth });
    }
    Ok(())
}

/// Deepest vertex containment between the two polygons (0 when disjoint).
fn penetration_depth(
    shape_a: &PolygonShape,
    pose_a: &Pose2,
    shape_b: &PolygonShape,
    pose_b: &Pose2,
) -> f64 {
    let mut depth: f64 = 0.0;
    let inv_b = pose_b.inverse();
    for v in &shape_a.vertices {
        let in_b = transform_point(&inv_b, transform_point(pose_a, *v));
        if shape_b.contains(in_b) {
            depth = depth.max(shape_b.boundary_distance(in_b));
        }
    }
    let inv_a = pose_a.inverse();
    for v in &shape_b.vertices {
        let in_a = transform_point(&inv_a, transform_point(pose_b, *v));
        if shape_a.contains(in_a) {
            depth = depth.max(shape_a.boundary_distance(in_a));
        }
    }
    depth
}

/// Minimum vertex-edge clearance between the polygons (both directions).
fn polygon_clearance(
    shape_a: &PolygonShape,
    pose_a: &Pose2,
    shape_b: &PolygonShape,
    pose_b: &Pose2,
) -> f64 {
    let mut d = f64::INFINITY;
    for v in &shape_a.vertices {
        let w = transform_point(pose_a, *v);
        for ei in 0..shape_b.num_edges() {
            let (a, b) = shape_b.edge(ei);
            let (aw, bw) = (transform_point(pose_b, a), transform_point(pose_b, b));
            d = d.min(point_segment_distance(w, aw, bw).0);
        }
    }
    for v in &shape_b.vertices {
        let w = transform_point(pose_b, *v);
        for ei in 0..shape_a.num_edges() {
            let (a, b) = shape_a.edge(ei);
            let (aw, bw) = (transform_point(pose_a, a), transform_point(pose_a, b));
            d = d.min(point_segment_distance(w, aw, bw).0);
        }
    }
    d
}

/// Translational signed gap between two polygons.
///
/// `φ = −clearance` when separated, `0` when exactly touching, `+depth` when
/// penetrating. Smooth in the poses within a fixed closest-feature pair.
#[must_use]
pub fn signed_gap(
    shape_a: &PolygonShape,
    pose_a: &Pose2,
    shape_b: &PolygonShape,
    pose_b: &Pose2,
) -> f64 {
    let depth = penetration_depth(shape_a, pose_a, shape_b, pose_b);
    if depth > 0.0 {
        return depth;
    }
    -polygon_clearance(shape_a, pose_a, shape_b, pose_b)
}

/// Signed gap of `shape` against the ground line: `−clearance` above,
/// `+depth` below.
#[must_use]
pub fn signed_gap_ground(shape: &PolygonShape, pose: &Pose2, ground_y: f64) -> f64 {
    let min_y = shape
        .vertices
        .iter()
        .map(|v| transform_point(pose, *v).y)
        .fold(f64::INFINITY, f64::min);
    ground_y - min_y
}

/// Angular margin of a maintained vertex-edge contact, as a signed gap.
///
/// For the closest vertex-edge pair between the polygons, measures how far
/// (radians) either face adjacent to the touching vertex is from lying flush
/// with the contacted edge — the admissible relative-rotation margin before a
/// face, rather than the vertex, makes contact. Returns `φ = −margin` (< 0
/// admissible, → 0⁻ as a face approaches flush). `None` when the polygons
/// have no vertex-edge pair within `near`.
#[must_use]
pub fn angular_gap(
    shape_a: &PolygonShape,
    pose_a: &Pose2,
    shape_b: &PolygonShape,
    pose_b: &Pose2,
    near: f64,
) -> Option<f64> {
    let mut best: Option<(f64, usize, usize, bool)> = None;
    // (distance, vertex index, edge index, vertex_belongs_to_a)
    for (vi, v) in shape_a.vertices.iter().enumerate() {
        let w = transform_point(pose_a, *v);
        for ei in 0..shape_b.num_edges() {
            let (a, b) = shape_b.edge(ei);
            let (d, _, t) = point_segment_distance(
                w,
                transform_point(pose_b, a),
                transform_point(pose_b, b),
            );
            if t > 1e-9 && t < 1.0 - 1e-9 && (best.is_none() || d < best.unwrap().0) {
                best = Some((d, vi, ei, true));
            }
        }
    }
    for (vi, v) in shape_b.vertices.iter().enumerate() {
        let w = transform_point(pose_b, *v);
        for ei in 0..shape_a.num_edges() {
            let (a, b) = shape_a.edge(ei);
            let (d, _, t) = point_segment_distance(
                w,
                transform_point(pose_a, a),
                transform_point(pose_a, b),
            );
            if t > 1e-9 && t < 1.0 - 1e-9 && (best.is_none() || d < best.unwrap().0) {
                best = Some((d, vi, ei, false));
            }
        }
    }
    let (d, vi, ei, vertex_on_a) = best?;
    if d > near {
        return None;
    }
    let (shape_v, pose_v, shape_e, pose_e) = if vertex_on_a {
        (shape_a, pose_a, shape_b, pose_b)
    } else {
        (shape_b, pose_b, shape_a, pose_a)
    };
    Some(vertex_edge_angular_gap(shape_v, pose_v, vi, shape_e, pose_e, ei))
}

/// Angular margin (as `φ = −margin`) of vertex `vi` of the vertex body
/// against edge `ei` of the edge body.
#[must_use]
pub fn vertex_edge_angular_gap(
    shape_v: &PolygonShape,
    pose_v: &Pose2,
    vi: usize,
    shape_e: &PolygonShape,
    pose_e: &Pose2,
    ei: usize,
) -> f64 {
    let nv = shape_v.vertices.len();
    let v = shape_v.vertices[vi];
    let v_prev = shape_v.vertices[(vi + nv - 1) % nv];
    let v_next = shape_v.vertices[(vi + 1) % nv];
    let u1 = pose_v.rotate((v_prev - v).normalize());
    let u2 = pose_v.rotate((v_next - v).normalize());
    let (ea, eb) = shape_e.edge(ei);
    let t_e = (transform_point(pose_e, eb) - transform_point(pose_e, ea)).normalize();
    // Outward normal of the contacted edge, pointing toward the vertex body.
    let n_e = Vec2::new(t_e.y, -t_e.x);
    let margin_of = |u: Vec2| -> f64 {
        // Angle of the adjacent face above the edge line; flush at 0 or π.
        let beta = u.dot(&n_e).atan2(u.dot(&t_e));
        beta.min(std::f64::consts::PI - beta)
    };
    -margin_of(u1).min(margin_of(u2))
}

/// Angular margin of a vertex-on-ground contact: margins of the two faces
/// adjacent to the lowest vertex against the ground line, as `φ = −margin`.
#[must_use]
pub fn vertex_ground_angular_gap(shape: &PolygonShape, pose: &Pose2, vi: usize) -> f64 {
    let nv = shape.vertices.len();
    let v = shape.vertices[vi];
    let v_prev = shape.vertices[(vi + nv - 1) % nv];
    let v_next = shape.vertices[(vi + 1) % nv];
    let u1 = pose.rotate((v_prev - v).normalize());
    let u2 = pose.rotate((v_next - v).normalize());
    let t_e = Vec2::new(1.0, 0.0);
    let n_e = Vec2::new(0.0, 1.0);
    let margin_of = |u: Vec2| -> f64 {
        let beta = u.dot(&n_e).atan2(u.dot(&t_e));
        beta.min(std::f64::consts::PI - beta)
    };
    -margin_of(u1).min(margin_of(u2))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn transform_point_identity() {
        let p = transform_point(&Pose2::identity(), Vec2::new(1.0, 2.0));
        assert_relative_eq!(p.x, 1.0);
        assert_relative_eq!(p.y, 2.0);
    }

    #[test]
    fn transform_point_quarter_turn() {
        let pose = Pose2::new(0.0, 0.0, std::f64::consts::FRAC_PI_2);
        let p = transform_point(&pose, Vec2::new(1.0, 0.0));
        assert_relative_eq!(p.x, 0.0, epsilon = 1e-12);
        assert_relative_eq!(p.y, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn transform_point_half_turn_offset() {
        let pose = Pose2::new(3.0, 4.0, std::f64::consts::PI);
        let p = transform_point(&pose, Vec2::new(1.0, 0.0));
        assert_relative_eq!(p.x, 2.0, epsilon = 1e-12);
        assert_relative_eq!(p.y, 4.0, epsilon = 1e-12);
    }

    #[test]
    fn pose_inverse_roundtrip() {
        let p = Pose2::new(0.3, -1.2, 2.4);
        let r = p.compose(&p.inverse());
        assert!(r.x.abs() < 1e-12 && r.y.abs() < 1e-12 && r.theta.abs() < 1e-12);
    }

    #[test]
    fn angle_wraps_to_half_open_interval() {
        assert_relative_eq!(wrap_angle(3.0 * std::f64::consts::PI), std::f64::consts::PI);
        assert_relative_eq!(wrap_angle(-std::f64::consts::PI), std::f64::consts::PI);
        assert_relative_eq!(wrap_angle(0.1), 0.1);
    }

    #[test]
    fn unit_square_properties() {
        let sq = PolygonShape::box_shape(1.0, 1.0);
        assert_relative_eq!(sq.area(), 1.0, epsilon = 1e-12);
        assert!(sq.centroid().norm() < 1e-12);
        // Uniform square: I/m = (w² + h²)/12 = 1/6.
        assert_relative_eq!(radius_of_gyration(&sq), (1.0f64 / 6.0).sqrt(), epsilon = 1e-12);
    }

    #[test]
    fn ground_contacts_flat_square() {
        let sq = PolygonShape::box_shape(1.0, 1.0);
        let pose = Pose2::new(0.0, 0.5, 0.0);
        let contacts = detect_ground_contacts(&sq, &pose, 0.0, 1e-4).unwrap();
        assert_eq!(contacts.len(), 2);
        assert!(contacts[0].body_b_point.x < contacts[1].body_b_point.x);
        for c in &contacts {
            assert_relative_eq!(c.normal.y, 1.0);
        }
    }

    #[test]
    fn ground_contacts_balanced_corner() {
        let sq = PolygonShape::box_shape(1.0, 1.0);
        let h = std::f64::consts::FRAC_1_SQRT_2; // corner-to-center distance
        let pose = Pose2::new(0.0, h, std::f64::consts::FRAC_PI_4);
        let contacts = detect_ground_contacts(&sq, &pose, 0.0, 1e-4).unwrap();
        assert_eq!(contacts.len(), 1);
    }

    #[test]
    fn ground_contacts_hovering_none() {
        let sq = PolygonShape::box_shape(1.0, 1.0);
        let pose = Pose2::new(0.0, 0.51, 0.0); // 1 cm above
        let contacts = detect_ground_contacts(&sq, &pose, 0.0, 1e-3).unwrap();
        assert!(contacts.is_empty());
    }

    #[test]
    fn ground_penetration_detected() {
        let sq = PolygonShape::box_shape(1.0, 1.0);
        let pose = Pose2::new(0.0, 0.4, 0.0);
        let err = detect_ground_contacts(&sq, &pose, 0.0, 1e-4).unwrap_err();
        match err {
            GeometryError::Penetration { depth } => assert_relative_eq!(depth, 0.1, epsilon = 1e-9),
            other => panic!("expected penetration, got {other:?}"),
        }
    }

    #[test]
    fn ground_contacts_translate_with_scene() {
        let sq = PolygonShape::box_shape(1.0, 1.0);
        let a = detect_ground_contacts(&sq, &Pose2::new(0.0, 0.5, 0.0), 0.0, 1e-4).unwrap();
        let b = detect_ground_contacts(&sq, &Pose2::new(2.5, 0.5, 0.0), 0.0, 1e-4).unwrap();
        for (ca, cb) in a.iter().zip(&b) {
            assert_relative_eq!(cb.body_b_point.x - ca.body_b_point.x, 2.5, epsilon = 1e-12);
            assert_relative_eq!(ca.body_a_point.x, cb.body_a_point.x);
        }
    }

    #[test]
    fn object_contact_corner_on_face() {
        // Unit box A balanced corner-down on the top face of box B.
        let a = PolygonShape::box_shape(1.0, 1.0);
        let b = PolygonShape::box_shape(2.0, 1.0);
        let pose_b = Pose2::new(0.0, 0.5, 0.0);
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let pose_a = Pose2::new(0.3, 1.0 + h, std::f64::consts::FRAC_PI_4);
        let c = detect_object_contact(&a, &pose_a, &b, &pose_b, 1e-4)
            .unwrap()
            .expect("contact expected");
        // Contacted edge is B's top face: normal from B into A = +y.
        assert_relative_eq!(c.normal.x, 0.0, epsilon = 1e-9);
        assert_relative_eq!(c.normal.y, 1.0, epsilon = 1e-9);
        assert_relative_eq!(c.tangent.x, -1.0, epsilon = 1e-9);
        // A's contact point is the corner that hangs lowest at this rotation.
        assert_relative_eq!(c.body_a_point.x, -0.5, epsilon = 1e-9);
        assert_relative_eq!(c.body_a_point.y, -0.5, epsilon = 1e-9);
    }

    #[test]
    fn object_contact_none_when_separated() {
        let a = PolygonShape::box_shape(1.0, 1.0);
        let b = PolygonShape::box_shape(1.0, 1.0);
        let c = detect_object_contact(
            &a,
            &Pose2::new(0.0, 1.505, 0.0),
            &b,
            &Pose2::new(0.0, 0.0, 0.0),
            1e-3,
        )
        .unwrap();
        assert!(c.is_none());
    }

    #[test]
    fn object_contact_boundary_inclusive() {
        let a = PolygonShape::box_shape(1.0, 1.0);
        let b = PolygonShape::box_shape(1.0, 1.0);
        // Corner-down box with its lowest corner exactly tol above B's top.
        let tol = 1e-3;
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let c = detect_object_contact(
            &a,
            &Pose2::new(0.2, 0.5 + h + tol, std::f64::consts::FRAC_PI_4),
            &b,
            &Pose2::new(0.0, 0.0, 0.0),
            tol,
        )
        .unwrap();
        assert!(c.is_some(), "closed threshold: distance == tol is contact");
    }

    #[test]
    fn object_contact_face_on_face_is_multicontact() {
        let a = PolygonShape::box_shape(1.0, 1.0);
        let b = PolygonShape::box_shape(1.0, 1.0);
        let err = detect_object_contact(
            &a,
            &Pose2::new(0.0, 1.0, 0.0),
            &b,
            &Pose2::new(0.0, 0.0, 0.0),
            1e-4,
        )
        .unwrap_err();
        assert_eq!(err, GeometryError::MultiContact);
    }

    #[test]
    fn jacobian_cross_product_example() {
        // Contact at r = (0.1, 0) from the CoM, force (0, 1) N world.
        let body = BodyParams {
            mass: 1.0,
            com: Vec2::zeros(),
            gravity: 9.81,
        };
        let cp = ContactPoint::new(Vec2::new(0.1, 0.0), Vec2::zeros(), Vec2::new(0.0, 1.0));
        let j = contact_jacobian(&Pose2::identity(), &body, &cp);
        let w = j.wrench_from_force(0.0, 1.0);
        assert_relative_eq!(w.fx, 0.0, epsilon = 1e-12);
        assert_relative_eq!(w.fy, 1.0, epsilon = 1e-12);
        assert_relative_eq!(w.tau, 0.1, epsilon = 1e-12);
    }

    #[test]
    fn jacobian_zero_arm_zero_torque() {
        let body = BodyParams {
            mass: 1.0,
            com: Vec2::new(0.2, -0.1),
            gravity: 9.81,
        };
        let cp = ContactPoint::new(body.com, Vec2::zeros(), Vec2::new(0.3, 0.8));
        let j = contact_jacobian(&Pose2::new(0.4, 0.2, 0.7), &body, &cp);
        let w = j.wrench_from_force(1.3, -0.4);
        assert_relative_eq!(w.tau, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn jacobian_matches_virtual_work() {
        // Virtual-work oracle: for a twist ξ and contact force f, the power
        // through the contact (f · point velocity) must equal the power of
        // the wrench (Jᵀf · ξ) — finite-difference the point motion.
        let body = BodyParams {
            mass: 2.0,
            com: Vec2::new(0.05, 0.02),
            gravity: 9.81,
        };
        let pose = Pose2::new(0.3, 0.7, 0.6);
        let bp = Vec2::new(0.11, -0.04);
        let n = Vec2::new(0.6, 0.8);
        let cp = ContactPoint::new(bp, Vec2::zeros(), n);
        let j = contact_jacobian(&pose, &body, &cp);
        let f = Vec2::new(0.7, 1.9); // (f_t, f_n)
        let w = j.wrench_from_force(f.x, f.y);

        let twist = Vector3::new(0.013, -0.007, 0.021);
        let eps = 1e-7;
        // Move the body along the twist about its CoM and track the point.
        let com_w = transform_point(&pose, body.com);
        let advance = |s: f64| -> Vec2 {
            let dp = Vec2::new(twist.x, twist.y) * s;
            let dth = twist.z * s;
            let rot = Pose2::new(0.0, 0.0, dth);
            let p = transform_point(&pose, bp);
            com_w + dp + rot.rotate(p - com_w)
        };
        let v_num = (advance(eps) - advance(-eps)) / (2.0 * eps);
        let f_world = cp.tangent * f.x + cp.normal * f.y;
        let power_contact = f_world.dot(&v_num);
        let power_wrench = w.fx * twist.x + w.fy * twist.y + w.tau * twist.z;
        assert_relative_eq!(power_contact, power_wrench, epsilon = 1e-6);
    }

    #[test]
    fn gravity_wrench_values() {
        let pose = Pose2::identity();
        let mk = |m: f64, g: f64| BodyParams {
            mass: m,
            com: Vec2::zeros(),
            gravity: g,
        };
        assert_relative_eq!(gravity_wrench(&mk(1.0, 9.81), &pose).fy, -9.81);
        assert_relative_eq!(gravity_wrench(&mk(0.5, 9.81), &pose).fy, -4.905);
        let w = gravity_wrench(&mk(1.0, 0.0), &pose);
        assert_eq!(w, Wrench2::zero());
    }

    #[test]
    fn signed_gap_separation_and_touch() {
        let a = PolygonShape::box_shape(1.0, 1.0);
        let b = PolygonShape::box_shape(1.0, 1.0);
        let gap = signed_gap(&a, &Pose2::new(0.0, 1.002, 0.0), &b, &Pose2::identity());
        assert_relative_eq!(gap, -0.002, epsilon = 1e-9);
        let touch = signed_gap(&a, &Pose2::new(0.0, 1.0, 0.0), &b, &Pose2::identity());
        assert_relative_eq!(touch, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn signed_gap_matches_brute_force_over_rotations() {
        // Brute-force oracle: densely sample vertex-edge distances.
        let a = PolygonShape::regular(5, 0.05, 0.2);
        let b = PolygonShape::box_shape(0.12, 0.06);
        let pose_b = Pose2::identity();
        for i in 0..12 {
            let th = i as f64 * 0.5;
            let pose_a = Pose2::new(0.02, 0.13, th);
            let gap = signed_gap(&a, &pose_a, &b, &pose_b);
            let brute = {
                let mut d = f64::INFINITY;
                for v in &a.vertices {
                    let w = transform_point(&pose_a, *v);
                    for ei in 0..b.num_edges() {
                        let (ea, eb) = b.edge(ei);
                        d = d.min(point_segment_distance(w, ea, eb).0);
                    }
                }
                for v in &b.vertices {
                    for ei in 0..a.num_edges() {
                        let (ea, eb) = a.edge(ei);
                        let (eaw, ebw) =
                            (transform_point(&pose_a, ea), transform_point(&pose_a, eb));
                        d = d.min(point_segment_distance(*v, eaw, ebw).0);
                    }
                }
                -d
            };
            assert_relative_eq!(gap, brute, epsilon = 1e-6);
        }
    }

    #[test]
    fn angular_gap_square_corner_on_face() {
        // Square A balanced corner-down on B's top face, rotated 45°: both
        // adjacent faces sit 45° from the contacted edge.
        let a = PolygonShape::box_shape(1.0, 1.0);
        let b = PolygonShape::box_shape(2.0, 1.0);
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let pose_a = Pose2::new(0.0, 0.5 + h, std::f64::consts::FRAC_PI_4);
        let pose_b = Pose2::identity();
        let phi = angular_gap(&a, &pose_a, &b, &pose_b, 1e-3).expect("near contact");
        assert_relative_eq!(phi, -std::f64::consts::FRAC_PI_4, epsilon = 1e-9);
    }

    #[test]
    fn determinism_bitwise() {
        let a = PolygonShape::regular(7, 0.06, 0.37);
        let pose = Pose2::new(0.123, 0.456, 0.789);
        let g1 = signed_gap_ground(&a, &pose, 0.0);
        let g2 = signed_gap_ground(&a, &pose, 0.0);
        assert_eq!(g1.to_bits(), g2.to_bits());
    }
}
