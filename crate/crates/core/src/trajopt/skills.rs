//! Built-in skill library: scenes, contact schedules, and simulator initial
//! states for the eight manipulation skill families.
//!
//! Every skill presses with a 3 N normal-force target. Extrinsic-object
//! masses are sized from that target: a tipped object is given the marginal
//! mass whose gravity torque about the pivot corner exactly matches the
//! press torque at the flat pose, so the whole tip proceeds quasi-statically
//! at forces near the target. Static and pushed objects are sized the other
//! way (heavy enough not to tip, or exactly light enough to slide).
//!
//! Tipping schedules stay below the pose where the center of mass crosses
//! over the pivot corner: past that point a face press can no longer
//! restrain the falling object within its friction cone. Pivot scenes use a
//! high-friction ground pad (`MU_GROUND_PIVOT`) because holding a corner
//! against a mostly horizontal press demands tangential-to-normal ratios
//! near one; every other scene uses the ordinary `MU_GROUND`.
//!
//! The grasped object is held corner-first against extrinsic faces, leaning
//! back (positive world angle for a left-facing press face) so its faces
//! keep an angular clearance from the pressed face; for the tipping skills
//! it is oriented by the corner-bisector rule (corner bisector along the
//! face normal) and co-rotates with the tipped object, keeping the wedge
//! geometry constant across the sweep.

use nalgebra::Vector2;

use crate::compliance::{k_bubbles, GraspGeometry};
use crate::contact::{ContactGeometry, ContactMode};
use crate::geometry::{cross2, transform_point, BodyParams, PolygonShape, Pose2, Vec2};
use crate::sim::{SimConfig, SimScene, SimState};

use super::{ForceTracking, SkillKind, SkillSpec, SkillStep};

/// Friction coefficient at object-object contacts.
pub const MU_OBJECT: f64 = 0.9;
/// Friction coefficient at ground contacts (ordinary surface).
pub const MU_GROUND: f64 = 0.3;
/// Friction coefficient at ground contacts for corner-tipping scenes
/// (high-friction pad under the pivot corner).
pub const MU_GROUND_PIVOT: f64 = 1.2;
/// Desired normal force at the tracked contact, newtons.
pub const F_NORMAL: f64 = 3.0;

/// Grasped-object mass for skills that press an extrinsic object, kg.
const GO_MASS_EXTRINSIC: f64 = 0.5;
/// Grasped-object mass for ground-only skills, kg.
const GO_MASS_GRASPED: f64 = 0.2;
/// Extrinsic-object mass when it must stay put under the press, kg.
const EO_MASS_STATIC: f64 = 2.0;
/// Grasped-object lean (world angle) for the non-tipping extrinsic skills.
const GO_LEAN: f64 = 15.0 * std::f64::consts::PI / 180.0;
/// The grasped-object vertex that presses: bottom-right corner of the
/// tall box.
const PRESS_VERTEX: usize = 1;

/// 10 cm × 6 cm box, used as the pressed object and as the grasped object
/// of the ground-only skills.
#[must_use]
pub fn wide_box() -> PolygonShape {
    PolygonShape::box_shape(0.10, 0.06)
}

/// 6 cm × 12 cm box, the grasped object of the extrinsic skills and one of
/// the tipped shapes.
#[must_use]
pub fn tall_box() -> PolygonShape {
    PolygonShape::box_shape(0.06, 0.12)
}

/// Non-convex Z/step block: two 6 cm × 3 cm slabs offset by 1.5 cm.
#[must_use]
pub fn z_block() -> PolygonShape {
    let s = 0.015;
    let grid = [
        (0.0, 0.0),
        (4.0, 0.0),
        (4.0, 2.0),
        (5.0, 2.0),
        (5.0, 4.0),
        (1.0, 4.0),
        (1.0, 2.0),
        (0.0, 2.0),
    ];
    PolygonShape::new(
        grid.iter()
            .map(|&(x, y)| Vec2::new(s * x, s * y))
            .collect(),
    )
}

/// Regular heptagon, 6 cm circumradius, bottom edge flat on the ground.
#[must_use]
pub fn heptagon() -> PolygonShape {
    let phase = -(std::f64::consts::FRAC_PI_2 + std::f64::consts::PI / 7.0);
    PolygonShape::regular(7, 0.06, phase)
}

/// Regular pentagon, 5.5 cm circumradius, bottom edge flat on the ground.
#[must_use]
pub fn pentagon() -> PolygonShape {
    PolygonShape::regular(5, 0.055, -126.0_f64.to_radians())
}

/// Equilateral triangle, 5 cm circumradius, bottom edge flat on the ground.
#[must_use]
pub fn triangle() -> PolygonShape {
    PolygonShape::regular(3, 0.05, -150.0_f64.to_radians())
}

/// Shape roster for the corner-tipping skill.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PivotShape {
    /// 10 cm × 6 cm box.
    WideBox,
    /// 6 cm × 12 cm box.
    TallBox,
    /// Non-convex step block.
    ZBlock,
    /// Regular heptagon.
    Heptagon,
    /// Regular pentagon.
    Pentagon,
    /// Equilateral triangle.
    Triangle,
}

impl PivotShape {
    /// Every tipped shape, in roster order.
    #[must_use]
    pub fn all() -> [Self; 6] {
        [
            Self::WideBox,
            Self::TallBox,
            Self::ZBlock,
            Self::Heptagon,
            Self::Pentagon,
            Self::Triangle,
        ]
    }

    /// Stable lowercase identifier (CLI argument / report label).
    #[must_use]
    pub fn name(self) -> &'static str {
        match self {
            Self::WideBox => "wide_box",
            Self::TallBox => "tall_box",
            Self::ZBlock => "z_block",
            Self::Heptagon => "heptagon",
            Self::Pentagon => "pentagon",
            Self::Triangle => "triangle",
        }
    }

    /// Parses [`Self::name`] back to the variant.
    #[must_use]
    pub fn from_name(name: &str) -> Option<Self> {
        Self::all().into_iter().find(|s| s.name() == name)
    }

    /// The polygon itself.
    #[must_use]
    pub fn shape(self) -> PolygonShape {
        match self {
            Self::WideBox => wide_box(),
            Self::TallBox => tall_box(),
            Self::ZBlock => z_block(),
            Self::Heptagon => heptagon(),
            Self::Pentagon => pentagon(),
            Self::Triangle => triangle(),
        }
    }
}

/// A constructed skill: the planning problem plus the simulator state and
/// stepper configuration its execution starts from.
#[derive(Debug, Clone)]
pub struct BuiltSkill {
    /// Planning problem (scene, contacts, schedule, force target).
    pub spec: SkillSpec,
    /// Simulator state at the schedule's α = 0 pose (one step before the
    /// first prescribed step).
    pub init_state: SimState,
    /// Stepper configuration sized to the schedule's per-step motion.
    pub sim: SimConfig,
}

/// Builds the default instance of a skill family. The corner-tipping skill
/// defaults to the wide box; see [`build_pivot_skill`] for the full roster.
#[must_use]
pub fn build_skill(kind: SkillKind) -> BuiltSkill {
    match kind {
        SkillKind::Static => build_static(),
        SkillKind::RelativePivot => build_relative_pivot(),
        SkillKind::RelativeSlide => build_relative_slide(),
        SkillKind::ExtrinsicPush => build_extrinsic_push(),
        SkillKind::ExtrinsicPivot => build_pivot_skill(PivotShape::WideBox),
        SkillKind::GraspedStatic => build_grasped_static(),
        SkillKind::GraspedPivot => build_grasped_pivot(),
        SkillKind::GraspedSlide => build_grasped_slide(),
    }
}

/// Stepper configuration for a skill family: tipping schedules rotate up to
/// 1.25°/step and carry the grasped object along arcs of several
/// millimeters, so they get wider per-step bounds and proximity.
#[must_use]
pub fn sim_config(kind: SkillKind) -> SimConfig {
    let mut cfg = SimConfig::default();
    if matches!(
        kind,
        SkillKind::ExtrinsicPivot | SkillKind::GraspedPivot | SkillKind::RelativePivot
    ) {
        cfg.max_step_translation = 6e-3;
        cfg.max_step_rotation = 3.0_f64.to_radians();
        cfg.contact_proximity = 5e-3;
    }
    cfg
}

fn grasp_for(shape: &PolygonShape) -> GraspGeometry {
    GraspGeometry {
        ee_to_grasp: Pose2::identity(),
        go_to_grasp: Pose2::identity(),
        com_body: shape.centroid(),
    }
}

fn scene(
    go_shape: PolygonShape,
    go_mass: f64,
    eo: Option<(PolygonShape, f64)>,
    mu_ground: f64,
) -> SimScene {
    let grasp = grasp_for(&go_shape);
    let go_body = BodyParams::from_shape(&go_shape, go_mass);
    let (eo_shape, eo_body) = match eo {
        Some((shape, mass)) => {
            let body = BodyParams::from_shape(&shape, mass);
            (Some(shape), Some(body))
        }
        None => (None, None),
    };
    SimScene {
        go_shape,
        go_body,
        eo_shape,
        eo_body,
        ground_y: 0.0,
        mu_object: MU_OBJECT,
        mu_ground,
        elasticity: k_bubbles(),
        grasp,
    }
}

/// Ground-rest height of a shape: minus its lowest body-frame vertex.
fn rest_height(shape: &PolygonShape) -> f64 {
    -shape
        .vertices
        .iter()
        .map(|v| v.y)
        .fold(f64::INFINITY, f64::min)
}

fn rot(theta: f64, v: Vec2) -> Vec2 {
    Pose2::new(0.0, 0.0, theta).rotate(v)
}

/// Grasped-object pose with `PRESS_VERTEX` of the tall box at world point
/// `w`, oriented at `theta`.
fn go_pose_at(w: Vec2, theta: f64) -> Pose2 {
    let v = tall_box().vertices[PRESS_VERTEX];
    let t = w - rot(theta, v);
    Pose2::new(t.x, t.y, theta)
}

// ---------------------------------------------------------------------------
// Non-tipping extrinsic skills: press the wide box's left face
// ---------------------------------------------------------------------------

/// Shared layout: wide box resting at the origin, pressed on its left face
/// (edge 3) by the tall box's bottom-right corner.
struct PressRig {
    scene: SimScene,
    eo_rest: Pose2,
    contacts: Vec<ContactGeometry>,
}

fn press_rig(eo_mass: f64) -> PressRig {
    let eo_shape = wide_box();
    let eo_rest = Pose2::new(0.0, rest_height(&eo_shape), 0.0);
    PressRig {
        scene: scene(
            tall_box(),
            GO_MASS_EXTRINSIC,
            Some((eo_shape, eo_mass)),
            MU_GROUND,
        ),
        eo_rest,
        contacts: vec![
            ContactGeometry::GoVertexOnEoFace {
                vertex: PRESS_VERTEX,
                face: 3,
            },
            ContactGeometry::EoVertexOnGround { vertex: 0 },
            ContactGeometry::EoVertexOnGround { vertex: 1 },
        ],
    }
}

fn build_static() -> BuiltSkill {
    let rig = press_rig(EO_MASS_STATIC);
    let press_w = transform_point(&rig.eo_rest, Vec2::new(-0.05, 0.0));
    let steps = (0..20)
        .map(|_| SkillStep {
            x_eo: Some(rig.eo_rest),
            x_go: go_pose_at(press_w, GO_LEAN),
            modes: vec![ContactMode::Sticking; 3],
        })
        .collect();
    let spec = SkillSpec {
        kind: SkillKind::Static,
        scene: rig.scene,
        contacts: rig.contacts,
        steps,
        f_des: Vector2::new(0.0, F_NORMAL),
        tracked: ForceTracking::Contact(0),
    };
    let init_state = SimState {
        x_go: go_pose_at(press_w, GO_LEAN),
        x_eo: Some(rig.eo_rest),
    };
    BuiltSkill {
        spec,
        init_state,
        sim: sim_config(SkillKind::Static),
    }
}

fn build_relative_pivot() -> BuiltSkill {
    let rig = press_rig(EO_MASS_STATIC);
    let press_w = transform_point(&rig.eo_rest, Vec2::new(-0.05, 0.0));
    let dtheta = 0.75_f64.to_radians();
    let steps = (0..20)
        .map(|k| {
            // Rotate away from face-flush: the lean grows.
            let theta = GO_LEAN + (k + 1) as f64 * dtheta;
            SkillStep {
                x_eo: Some(rig.eo_rest),
                x_go: go_pose_at(press_w, theta),
                modes: vec![ContactMode::Sticking; 3],
            }
        })
        .collect();
    let spec = SkillSpec {
        kind: SkillKind::RelativePivot,
        scene: rig.scene,
        contacts: rig.contacts,
        steps,
        f_des: Vector2::new(0.0, F_NORMAL),
        tracked: ForceTracking::Contact(0),
    };
    let init_state = SimState {
        x_go: go_pose_at(press_w, GO_LEAN),
        x_eo: Some(rig.eo_rest),
    };
    BuiltSkill {
        spec,
        init_state,
        sim: sim_config(SkillKind::RelativePivot),
    }
}

fn build_relative_slide() -> BuiltSkill {
    let rig = press_rig(EO_MASS_STATIC);
    let contact_at = |h: f64| transform_point(&rig.eo_rest, Vec2::new(-0.05, h - 0.03));
    let steps = (0..20)
        .map(|k| {
            // The pressing corner descends 0.75 mm per step along the face.
            let h = 0.0475 - (k + 1) as f64 * 0.000_75;
            SkillStep {
                x_eo: Some(rig.eo_rest),
                x_go: go_pose_at(contact_at(h), GO_LEAN),
                modes: vec![
                    ContactMode::SlidingPositive,
                    ContactMode::Sticking,
                    ContactMode::Sticking,
                ],
            }
        })
        .collect();
    let spec = SkillSpec {
        kind: SkillKind::RelativeSlide,
        scene: rig.scene,
        contacts: rig.contacts,
        steps,
        f_des: Vector2::new(-MU_OBJECT * F_NORMAL, F_NORMAL),
        tracked: ForceTracking::Contact(0),
    };
    let init_state = SimState {
        x_go: go_pose_at(contact_at(0.0475), GO_LEAN),
        x_eo: Some(rig.eo_rest),
    };
    BuiltSkill {
        spec,
        init_state,
        sim: sim_config(SkillKind::RelativeSlide),
    }
}

fn build_extrinsic_push() -> BuiltSkill {
    // Sized so a 3 N normal press exactly overcomes sliding friction.
    let eo_mass = F_NORMAL / (MU_GROUND * 9.81);
    let rig = press_rig(eo_mass);
    let press_b = Vec2::new(-0.05, 0.0);
    let steps = (0..20)
        .map(|k| {
            let delta = (k + 1) as f64 * 0.000_75;
            let x_eo = Pose2::new(delta, rig.eo_rest.y, 0.0);
            SkillStep {
                x_eo: Some(x_eo),
                x_go: go_pose_at(transform_point(&x_eo, press_b), GO_LEAN),
                modes: vec![
                    ContactMode::Sticking,
                    ContactMode::SlidingNegative,
                    ContactMode::SlidingNegative,
                ],
            }
        })
        .collect();
    let spec = SkillSpec {
        kind: SkillKind::ExtrinsicPush,
        scene: rig.scene,
        contacts: rig.contacts,
        steps,
        f_des: Vector2::new(0.0, F_NORMAL),
        tracked: ForceTracking::Contact(0),
    };
    let init_state = SimState {
        x_go: go_pose_at(transform_point(&rig.eo_rest, press_b), GO_LEAN),
        x_eo: Some(rig.eo_rest),
    };
    BuiltSkill {
        spec,
        init_state,
        sim: sim_config(SkillKind::ExtrinsicPush),
    }
}

// ---------------------------------------------------------------------------
// Corner-tipping skill
// ---------------------------------------------------------------------------

/// Per-shape tipping parameters. The press point sits on `press_face`
/// (body frame); the shape tips about `pivot_vertex` by `tip_sign` ·
/// `step_angle` per step, for 40 steps, staying below the center-of-mass
/// crossover.
struct TipPlan {
    shape: PolygonShape,
    press_face: usize,
    press_point: Vec2,
    pivot_vertex: usize,
    tip_sign: f64,
    step_angle: f64,
    /// Explicit grasped-object world angle at the flat pose; `None` applies
    /// the corner-bisector rule (45° wedge on each side of the face).
    go_theta0: Option<f64>,
}

fn tip_plan(shape: PivotShape) -> TipPlan {
    let poly = shape.shape();
    match shape {
        PivotShape::WideBox => TipPlan {
            shape: poly,
            press_face: 3,
            press_point: Vec2::new(-0.05, 0.02),
            pivot_vertex: 1,
            tip_sign: -1.0,
            step_angle: 1.25_f64.to_radians(),
            go_theta0: None,
        },
        PivotShape::TallBox => TipPlan {
            shape: poly,
            press_face: 3,
            press_point: Vec2::new(-0.03, 0.04),
            pivot_vertex: 1,
            tip_sign: -1.0,
            step_angle: 0.375_f64.to_radians(),
            go_theta0: None,
        },
        PivotShape::ZBlock => TipPlan {
            shape: poly,
            press_face: 5,
            press_point: Vec2::new(0.015, 0.042),
            pivot_vertex: 1,
            tip_sign: -1.0,
            step_angle: 0.5_f64.to_radians(),
            // Bisector placement would graze the step corner; lean flatter.
            go_theta0: Some(20.0_f64.to_radians()),
        },
        PivotShape::Heptagon => {
            let press = {
                let (a, b) = poly.edge(5);
                0.5 * (a + b)
            };
            TipPlan {
                shape: poly,
                press_face: 5,
                press_point: press,
                pivot_vertex: 1,
                tip_sign: -1.0,
                step_angle: 0.5_f64.to_radians(),
                go_theta0: None,
            }
        }
        PivotShape::Pentagon => {
            let press = {
                let (a, b) = poly.edge(3);
                // 25% down from the top vertex along the upper-left face.
                a + 0.25 * (b - a)
            };
            TipPlan {
                shape: poly,
                press_face: 3,
                press_point: press,
                pivot_vertex: 1,
                tip_sign: -1.0,
                step_angle: 0.625_f64.to_radians(),
                go_theta0: None,
            }
        }
        PivotShape::Triangle => {
            let press = {
                let (a, b) = poly.edge(2);
                // 15% down from the apex along the upper-left face.
                a + 0.15 * (b - a)
            };
            TipPlan {
                shape: poly,
                press_face: 2,
                press_point: press,
                pivot_vertex: 1,
                tip_sign: -1.0,
                step_angle: 1.25_f64.to_radians(),
                go_theta0: None,
            }
        }
    }
}

/// Marginal tipped-object mass: gravity torque about the pivot equals the
/// press torque of the normal-force target at the flat pose.
fn marginal_mass(plan: &TipPlan) -> f64 {
    let p = plan.shape.vertices[plan.pivot_vertex];
    let n = plan.shape.edge_outward_normal(plan.press_face);
    let tau_n = cross2(plan.press_point - p, -n);
    let d = plan.shape.centroid().x - p.x;
    let m = F_NORMAL * tau_n / (9.81 * d);
    assert!(
        m > 0.0,
        "press torque and gravity torque must oppose about the pivot"
    );
    m
}

/// Builds the corner-tipping skill for one shape of the roster: 40 steps of
/// `step_angle` about the pivot corner, the grasped object co-rotating with
/// its pressing corner glued to the face point.
#[must_use]
pub fn build_pivot_skill(shape: PivotShape) -> BuiltSkill {
    let plan = tip_plan(shape);
    let mass = marginal_mass(&plan);
    let go_theta0 = plan.go_theta0.unwrap_or_else(|| {
        let n = plan.shape.edge_outward_normal(plan.press_face);
        n.y.atan2(n.x) - 0.75 * std::f64::consts::PI
    });

    let eo_rest = Pose2::new(0.0, rest_height(&plan.shape), 0.0);
    let p_b = plan.shape.vertices[plan.pivot_vertex];
    let p_w = transform_point(&eo_rest, p_b);

    let steps = (0..40)
        .map(|k| {
            let alpha = (k + 1) as f64 * plan.step_angle;
            let theta = plan.tip_sign * alpha;
            let t = p_w - rot(theta, p_b);
            let x_eo = Pose2::new(t.x, t.y, theta);
            let press_w = transform_point(&x_eo, plan.press_point);
            SkillStep {
                x_eo: Some(x_eo),
                x_go: go_pose_at(press_w, go_theta0 + theta),
                modes: vec![ContactMode::Sticking; 2],
            }
        })
        .collect();

    let contacts = vec![
        ContactGeometry::GoVertexOnEoFace {
            vertex: PRESS_VERTEX,
            face: plan.press_face,
        },
        ContactGeometry::EoVertexOnGround {
            vertex: plan.pivot_vertex,
        },
    ];
    let spec = SkillSpec {
        kind: SkillKind::ExtrinsicPivot,
        scene: scene(
            tall_box(),
            GO_MASS_EXTRINSIC,
            Some((plan.shape.clone(), mass)),
            MU_GROUND_PIVOT,
        ),
        contacts,
        steps,
        f_des: Vector2::new(0.0, F_NORMAL),
        tracked: ForceTracking::Contact(0),
    };
    let init_state = SimState {
        x_go: go_pose_at(transform_point(&eo_rest, plan.press_point), go_theta0),
        x_eo: Some(eo_rest),
    };
    BuiltSkill {
        spec,
        init_state,
        sim: sim_config(SkillKind::ExtrinsicPivot),
    }
}

// ---------------------------------------------------------------------------
// Ground-only skills: the wide box held by the gripper
// ---------------------------------------------------------------------------

fn grasped_scene() -> SimScene {
    scene(wide_box(), GO_MASS_GRASPED, None, MU_GROUND)
}

fn build_grasped_static() -> BuiltSkill {
    let rest = Pose2::new(0.0, rest_height(&wide_box()), 0.0);
    let steps = (0..20)
        .map(|_| SkillStep {
            x_eo: None,
            x_go: rest,
            modes: vec![ContactMode::Sticking; 2],
        })
        .collect();
    let spec = SkillSpec {
        kind: SkillKind::GraspedStatic,
        scene: grasped_scene(),
        contacts: vec![
            ContactGeometry::GoVertexOnGround { vertex: 0 },
            ContactGeometry::GoVertexOnGround { vertex: 1 },
        ],
        steps,
        f_des: Vector2::new(0.0, F_NORMAL),
        tracked: ForceTracking::EnvironmentSum,
    };
    let init_state = SimState {
        x_go: rest,
        x_eo: None,
    };
    BuiltSkill {
        spec,
        init_state,
        sim: sim_config(SkillKind::GraspedStatic),
    }
}

fn build_grasped_pivot() -> BuiltSkill {
    let shape = wide_box();
    let rest = Pose2::new(0.0, rest_height(&shape), 0.0);
    let p_b = shape.vertices[1];
    let p_w = transform_point(&rest, p_b);
    let dtheta = 1.25_f64.to_radians();
    let steps = (0..40)
        .map(|k| {
            let theta = -((k + 1) as f64) * dtheta;
            let t = p_w - rot(theta, p_b);
            SkillStep {
                x_eo: None,
                x_go: Pose2::new(t.x, t.y, theta),
                modes: vec![ContactMode::Sticking],
            }
        })
        .collect();
    let spec = SkillSpec {
        kind: SkillKind::GraspedPivot,
        scene: grasped_scene(),
        contacts: vec![ContactGeometry::GoVertexOnGround { vertex: 1 }],
        steps,
        f_des: Vector2::new(0.0, F_NORMAL),
        tracked: ForceTracking::Contact(0),
    };
    let init_state = SimState {
        x_go: rest,
        x_eo: None,
    };
    BuiltSkill {
        spec,
        init_state,
        sim: sim_config(SkillKind::GraspedPivot),
    }
}

fn build_grasped_slide() -> BuiltSkill {
    let rest = Pose2::new(0.0, rest_height(&wide_box()), 0.0);
    let steps = (0..20)
        .map(|k| {
            let x = (k + 1) as f64 * 0.000_75;
            SkillStep {
                x_eo: None,
                x_go: Pose2::new(x, rest.y, 0.0),
                modes: vec![ContactMode::SlidingNegative; 2],
            }
        })
        .collect();
    let spec = SkillSpec {
        kind: SkillKind::GraspedSlide,
        scene: grasped_scene(),
        contacts: vec![
            ContactGeometry::GoVertexOnGround { vertex: 0 },
            ContactGeometry::GoVertexOnGround { vertex: 1 },
        ],
        steps,
        f_des: Vector2::new(MU_GROUND * F_NORMAL, F_NORMAL),
        tracked: ForceTracking::EnvironmentSum,
    };
    let init_state = SimState {
        x_go: rest,
        x_eo: None,
    };
    BuiltSkill {
        spec,
        init_state,
        sim: sim_config(SkillKind::GraspedSlide),
    }
}
