//! Planar quasi-static contact manipulation toolkit.
//!
//! The crate plans end-effector and grasped-object trajectories that drive an
//! extrinsic object through prescribed contact modes (stick / slide / pivot)
//! while transmitting desired contact forces. Planning runs gradient-based
//! optimization through mode-fixed contact-equilibrium quadratic programs;
//! plans are verified against the built-in quasi-static simulator.
//!
//! # Module map
//!
//! - [`geometry`] — SE(2) poses, polygons, contact detection, contact Jacobians.
//! - [`compliance`] — linear elasticity model of the tactile gripper
//!   (deflection ↔ wrench) and its PSD fit, plus friction-cone fitting.
//! - [`qp`] — dense convex QP solver (primal-dual interior point) with
//!   parameter sensitivities via implicit differentiation of the KKT system.
//! - [`contact`] — assembly of the mode-fixed equilibrium programs (grasped +
//!   extrinsic object, and grasped object vs. static environment).
//! - [`estimation`] — pose fitting on edge point clouds (ICP alignment) and
//!   contact localization from a sensed wrench (particle-filter sweep).
//! - [`sim`] — quasi-static forward simulator with contact-mode enumeration;
//!   the ground-truth oracle for all closed-loop tests.
//! - [`trajopt`] — the differentiable planner plus MPPI / iCEM baselines under
//!   matched QP query budgets.
//! - [`control`] — open-loop, closed-loop, closed-loop PI, and rigid-sensor
//!   trajectory controllers.
//!
//! # Parallelism
//!
//! With the default `parallel` feature, batch QP solves and sampler
//! evaluations fan out via rayon. Results are bit-identical to the sequential
//! fallback: random draws happen sequentially up front and parallel maps
//! preserve element order.

pub mod compliance;
pub mod contact;
pub mod estimation;
pub mod geometry;
pub(crate) mod par;
pub mod qp;
pub mod sim;
pub mod trajopt;

pub use compliance::ElasticityModel;
pub use contact::{ContactForce, ContactMode, ContactModelConfig, SceneState};
pub use geometry::{BodyParams, ContactPoint, PolygonShape, Pose2, Wrench2};
pub use qp::{QpProblem, QpSolution, QpStatus};
