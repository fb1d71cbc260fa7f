//! Passive elasticity model of the tactile gripper and its calibration.
//!
//! The gripper membranes behave as a linear spring between the end-effector
//! and the grasped object: a relative displacement `x` (expressed in the
//! grasp contact frame at zero deflection, "gocf") maps to a transmitted
//! wrench
//!
//! ```text
//! w_ext = K · x,    K ⪰ 0 symmetric 3×3
//! ```
//!
//! with row units (N/m, N/m, N·m/rad). Fitting constrains K = LᵀL so the
//! estimate is positive semidefinite by construction. The module also fits a
//! Coulomb friction coefficient from tangential/normal force samples.
//!
//! Reference stiffness matrices for the two supported sensor
//! parameterizations ship as [`k_bubbles`] and [`k_gelslim`].

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{cross2, perp, transform_point, Pose2, Vec2, Wrench2};

/// Errors from elasticity/friction modeling.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum ComplianceError {
    /// Stiffness matrix violates symmetry or positive semidefiniteness.
    #[error("invalid stiffness matrix: {0}")]
    InvalidStiffness(String),
    /// K is not invertible above the configured eigenvalue floor.
    #[error("stiffness matrix singular: min eigenvalue {min_eig:.3e} below floor {floor:.3e}")]
    SingularStiffness {
        /// Smallest eigenvalue found.
        min_eig: f64,
        /// Invertibility floor.
        floor: f64,
    },
    /// Deflection samples do not span all three axes.
    #[error("deflection data rank-deficient: needs excitation on all 3 axes")]
    RankDeficientData,
    /// Gradient descent did not meet the convergence criterion.
    #[error("elasticity fit did not converge after {iters} iterations (residual {residual:.3e})")]
    NonConvergence {
        /// Iterations executed.
        iters: usize,
        /// Final mean squared wrench residual.
        residual: f64,
    },
    /// A friction sample has a non-positive normal force.
    #[error("friction sample {index} has non-positive normal force {f_n}")]
    NonPositiveNormal {
        /// Offending sample index.
        index: usize,
        /// Its normal force.
        f_n: f64,
    },
    /// CSV parse failure.
    #[error("csv error at line {line}: {msg}")]
    Csv {
        /// 1-based line number (0 when unknown).
        line: u64,
        /// Description of the failure.
        msg: String,
    },
}

// ---------------------------------------------------------------------------
// Elasticity model
// ---------------------------------------------------------------------------

/// Linear stiffness model `w = K·x` between gocf deflection and wrench.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElasticityModel {
    k: Matrix3<f64>,
}

impl ElasticityModel {
    /// Builds a model, checking symmetry (within 1e−6 relative) and positive
    /// semidefiniteness (eigenvalues ≥ −1e−9·‖K‖); the stored matrix is
    /// exactly symmetrized.
    pub fn new(k: Matrix3<f64>) -> Result<Self, ComplianceError> {
        let scale = k.norm();
        let asym = (k - k.transpose()).norm();
        if asym > 1e-6 * scale.max(1e-12) {
            return Err(ComplianceError::InvalidStiffness(format!(
                "asymmetry {asym:.3e} exceeds 1e-6 relative"
            )));
        }
        let k = (k + k.transpose()) * 0.5;
        let min_eig = k
            .symmetric_eigenvalues()
            .iter()
            .fold(f64::INFINITY, |a, &b| a.min(b));
        if min_eig < -1e-9 * scale {
            return Err(ComplianceError::InvalidStiffness(format!(
                "negative eigenvalue {min_eig:.3e}"
            )));
        }
        Ok(Self { k })
    }

    /// The stiffness matrix.
    #[inline]
    #[must_use]
    pub fn k(&self) -> &Matrix3<f64> {
        &self.k
    }

    /// Invertibility floor: `1e−6 · trace(K)/3`.
    #[inline]
    #[must_use]
    pub fn eigenvalue_floor(&self) -> f64 {
        1e-6 * self.k.trace() / 3.0
    }
}

/// Reference stiffness for the soft-bubble gripper parameterization.
#[must_use]
pub fn k_bubbles() -> ElasticityModel {
    ElasticityModel::new(Matrix3::new(
        2208.96, -143.31, 399.86, //
        -143.31, 1875.92, -313.57, //
        399.86, -313.57, 1608.49,
    ))
    .expect("reference matrix is symmetric PSD")
}

/// Reference stiffness for the gel-pad sensor parameterization.
#[must_use]
pub fn k_gelslim() -> ElasticityModel {
    ElasticityModel::new(Matrix3::new(
        5060.26, -1261.90, -158.71, //
        -1261.90, 9998.16, 334.56, //
        -158.71, 334.56, 37.6311,
    ))
    .expect("reference matrix is symmetric PSD")
}

/// Transmitted wrench for a gocf deflection: `w = K·x`.
#[inline]
#[must_use]
pub fn wrench_from_deflection(model: &ElasticityModel, x: &Vector3<f64>) -> Wrench2 {
    Wrench2::from_vector(&(model.k * x))
}

/// Deflection producing a desired wrench: `x = K⁻¹·w`.
///
/// # Errors
/// [`ComplianceError::SingularStiffness`] when K's smallest eigenvalue is
/// below the floor `1e−6·trace(K)/3`.
pub fn deflection_from_wrench(
    model: &ElasticityModel,
    w: &Wrench2,
) -> Result<Vector3<f64>, ComplianceError> {
    let floor = model.eigenvalue_floor();
    let eigs = model.k.symmetric_eigenvalues();
    let min_eig = eigs.iter().fold(f64::INFINITY, |a, &b| a.min(b));
    if min_eig <= floor {
        return Err(ComplianceError::SingularStiffness { min_eig, floor });
    }
    let x = model
        .k
        .lu()
        .solve(&w.to_vector())
        .ok_or(ComplianceError::SingularStiffness { min_eig, floor })?;
    Ok(x)
}

// ---------------------------------------------------------------------------
// Grasp kinematics: deflection and transmitted wrench from poses
// ---------------------------------------------------------------------------

/// Fixed grasp geometry tying the end-effector, the grasp frame, and the
/// grasped body together.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GraspGeometry {
    /// Rest pose of the grasp frame in the end-effector frame (zero
    /// deflection ⇒ grasp frame = `x_ee ∘ ee_to_grasp`).
    pub ee_to_grasp: Pose2,
    /// Grasp frame in the grasped-object body frame.
    pub go_to_grasp: Pose2,
    /// Grasped-object center of mass, body frame.
    pub com_body: Vec2,
}

impl GraspGeometry {
    /// End-effector pose that holds the grasped object at `x_go` with zero
    /// deflection.
    #[must_use]
    pub fn rest_ee_for(&self, x_go: &Pose2) -> Pose2 {
        x_go.compose(&self.go_to_grasp)
            .compose(&self.ee_to_grasp.inverse())
    }

    /// Grasped-object pose held at zero deflection by end-effector `x_ee`.
    #[must_use]
    pub fn go_at_rest(&self, x_ee: &Pose2) -> Pose2 {
        x_ee.compose(&self.ee_to_grasp)
            .compose(&self.go_to_grasp.inverse())
    }
}

/// gocf deflection for an end-effector / grasped-object pose pair.
///
/// The deflection is the pose of the rest grasp marker (`x_ee ∘ ee_to_grasp`)
/// relative to the actual grasp frame (`x_go ∘ go_to_grasp`), expressed in
/// the rest-marker (gocf) axes: pressing the end-effector toward the object
/// yields a deflection pointing into the object.
#[must_use]
pub fn deflection(grasp: &GraspGeometry, x_ee: &Pose2, x_go: &Pose2) -> Vector3<f64> {
    let rest = x_ee.compose(&grasp.ee_to_grasp);
    let now = x_go.compose(&grasp.go_to_grasp);
    let d = Pose2::new(0.0, 0.0, -rest.theta)
        .rotate(rest.translation() - now.translation());
    Vector3::new(d.x, d.y, crate::geometry::wrap_angle(rest.theta - now.theta))
}

/// Transmitted wrench on the grasped object, about its world CoM.
///
/// Computes the gocf deflection, maps it through K, rotates the force into
/// the world frame, and transports the torque from the grasp point to the
/// grasped object's CoM.
#[must_use]
pub fn transmitted_wrench(
    model: &ElasticityModel,
    grasp: &GraspGeometry,
    x_ee: &Pose2,
    x_go: &Pose2,
) -> Wrench2 {
    let rest = x_ee.compose(&grasp.ee_to_grasp);
    let now = x_go.compose(&grasp.go_to_grasp);
    let x = deflection(grasp, x_ee, x_go);
    let w = model.k * x;
    let f_world = Pose2::new(0.0, 0.0, rest.theta).rotate(Vec2::new(w.x, w.y));
    let com_world = transform_point(x_go, grasp.com_body);
    let arm = now.translation() - com_world;
    Wrench2::new(f_world.x, f_world.y, w.z + cross2(arm, f_world))
}

/// [`transmitted_wrench`] plus its analytic Jacobians w.r.t. the two poses.
///
/// Returns `(w, ∂w/∂x_ee, ∂w/∂x_go)` with each Jacobian a 3×3 over
/// `(x, y, θ)`. These are the exact derivatives of the closed-form map; the
/// planner chains them through the QP sensitivities.
#[must_use]
pub fn transmitted_wrench_jacobians(
    model: &ElasticityModel,
    grasp: &GraspGeometry,
    x_ee: &Pose2,
    x_go: &Pose2,
) -> (Wrench2, Matrix3<f64>, Matrix3<f64>) {
    let k = model.k;
    let rest = x_ee.compose(&grasp.ee_to_grasp);
    let now = x_go.compose(&grasp.go_to_grasp);
    let rot_rest = Pose2::new(0.0, 0.0, rest.theta);
    let rot_rest_inv = Pose2::new(0.0, 0.0, -rest.theta);

    let delta = rest.translation() - now.translation();
    let d_xy = rot_rest_inv.rotate(delta);
    let d = Vector3::new(
        d_xy.x,
        d_xy.y,
        crate::geometry::wrap_angle(rest.theta - now.theta),
    );
    let w = k * d;
    let f_gocf = Vec2::new(w.x, w.y);
    let f_world = rot_rest.rotate(f_gocf);
    let com_world = transform_point(x_go, grasp.com_body);
    let arm = now.translation() - com_world;
    let wrench = Wrench2::new(f_world.x, f_world.y, w.z + cross2(arm, f_world));

    // Pose partials. rest depends on x_ee only, now/com on x_go only.
    // ∂p_rest/∂(ee_x, ee_y) = I, ∂p_rest/∂ee_θ = perp(R(ee_θ)·h_p),
    // ∂θ_rest/∂ee_θ = 1; analogous for `now` w.r.t. x_go.
    let dp_rest_dth = perp(x_ee.rotate(grasp.ee_to_grasp.translation()));
    let dp_now_dth = perp(x_go.rotate(grasp.go_to_grasp.translation()));
    let dcom_dth = perp(x_go.rotate(grasp.com_body));

    // Deflection partials: d_xy = R(−θ_rest)·δ, d_θ = θ_rest − θ_now.
    // Columns ordered (x, y, θ) for each pose.
    let mut dd_dee = Matrix3::zeros();
    let mut dd_dgo = Matrix3::zeros();
    // Translation columns: δ varies by I (ee) / −I (go), rotated.
    let r_inv_cols = [
        rot_rest_inv.rotate(Vec2::new(1.0, 0.0)),
        rot_rest_inv.rotate(Vec2::new(0.0, 1.0)),
    ];
    for (col, rc) in r_inv_cols.iter().enumerate() {
        dd_dee[(0, col)] = rc.x;
        dd_dee[(1, col)] = rc.y;
        dd_dgo[(0, col)] = -rc.x;
        dd_dgo[(1, col)] = -rc.y;
    }
    // θ columns: d/dθ_rest[R(−θ_rest)·δ] = −perp(R(−θ_rest)δ) + R(−θ_rest)·∂δ.
    let dd_xy_dee_th = -perp(d_xy) + rot_rest_inv.rotate(dp_rest_dth);
    dd_dee[(0, 2)] = dd_xy_dee_th.x;
    dd_dee[(1, 2)] = dd_xy_dee_th.y;
    dd_dee[(2, 2)] = 1.0;
    let dd_xy_dgo_th = rot_rest_inv.rotate(-dp_now_dth);
    dd_dgo[(0, 2)] = dd_xy_dgo_th.x;
    dd_dgo[(1, 2)] = dd_xy_dgo_th.y;
    dd_dgo[(2, 2)] = -1.0;

    let dw_dee = k * dd_dee;
    let dw_dgo = k * dd_dgo;

    // World force partials: F = R(θ_rest)·w_xy.
    let mut out_dee = Matrix3::zeros();
    let mut out_dgo = Matrix3::zeros();
    for col in 0..3 {
        let dwxy_ee = Vec2::new(dw_dee[(0, col)], dw_dee[(1, col)]);
        let mut df_ee = rot_rest.rotate(dwxy_ee);
        if col == 2 {
            df_ee += perp(f_world); // rotation of the gocf axes with ee_θ
        }
        out_dee[(0, col)] = df_ee.x;
        out_dee[(1, col)] = df_ee.y;

        let dwxy_go = Vec2::new(dw_dgo[(0, col)], dw_dgo[(1, col)]);
        let df_go = rot_rest.rotate(dwxy_go);
        out_dgo[(0, col)] = df_go.x;
        out_dgo[(1, col)] = df_go.y;

        // Torque: τ = w_θ + (arm × F); arm depends on x_go's θ only
        // (arm = R(go_θ)·(g_p − com_b), translation cancels).
        let darm_go = if col == 2 {
            dp_now_dth - dcom_dth
        } else {
            Vec2::zeros()
        };
        out_dee[(2, col)] =
            dw_dee[(2, col)] + cross2(arm, df_ee);
        out_dgo[(2, col)] =
            dw_dgo[(2, col)] + cross2(darm_go, f_world) + cross2(arm, df_go);
    }

    (wrench, out_dee, out_dgo)
}

// ---------------------------------------------------------------------------
// Elasticity fitting
// ---------------------------------------------------------------------------

/// One calibration sample: gocf deflection and the wrench it produced.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeflectionSample {
    /// Deflection (m, m, rad).
    pub deflection: Vector3<f64>,
    /// Transmitted wrench.
    pub wrench: Wrench2,
}

/// Configuration for [`fit_elasticity`].
#[derive(Debug, Clone, Copy)]
pub struct ElasticityFitConfig {
    /// Iteration cap for the gradient descent on L.
    pub max_iters: usize,
    /// Relative loss-change convergence threshold.
    pub rel_tol: f64,
}

impl Default for ElasticityFitConfig {
    fn default() -> Self {
        Self {
            max_iters: 50_000,
            rel_tol: 1e-10,
        }
    }
}

/// Result of an elasticity fit.
#[derive(Debug, Clone)]
pub struct ElasticityFit {
    /// Fitted model, K = LᵀL (PSD by construction).
    pub model: ElasticityModel,
    /// Mean squared wrench residual on the training set.
    pub residual: f64,
    /// Gradient-descent iterations used.
    pub iterations: usize,
}

/// Fits `K = LᵀL` minimizing `Σ‖wᵢ − K·xᵢ‖²` by gradient descent on L.
///
/// The LᵀL parameterization keeps the estimate positive semidefinite for any
/// dataset. L starts as a scaled identity; the step size adapts (halving on
/// loss increase).
///
/// # Errors
/// [`ComplianceError::RankDeficientData`] when fewer than 6 samples or the
/// deflections do not span all 3 axes; [`ComplianceError::NonConvergence`]
/// when the iteration cap is hit before the relative loss change drops below
/// `rel_tol`.
pub fn fit_elasticity(
    samples: &[DeflectionSample],
    config: &ElasticityFitConfig,
) -> Result<ElasticityFit, ComplianceError> {
    if samples.len() < 6 {
        return Err(ComplianceError::RankDeficientData);
    }
    // Rank check on the stacked deflections via the 3×3 Gram matrix.
    let mut gram = Matrix3::<f64>::zeros();
    for s in samples {
        gram += s.deflection * s.deflection.transpose();
    }
    let eigs = gram.symmetric_eigenvalues();
    let (mut min_e, mut max_e) = (f64::INFINITY, 0.0f64);
    for &e in eigs.iter() {
        min_e = min_e.min(e);
        max_e = max_e.max(e);
    }
    if !(min_e > 1e-12 * max_e.max(1e-300)) {
        return Err(ComplianceError::RankDeficientData);
    }

    let loss_of = |l: &Matrix3<f64>| -> f64 {
        let k = l.transpose() * l;
        samples
            .iter()
            .map(|s| (s.wrench.to_vector() - k * s.deflection).norm_squared())
            .sum()
    };

    // Scale-aware identity start: ‖K‖ ≈ mean‖w‖ / mean‖x‖.
    let mean_w: f64 = samples.iter().map(|s| s.wrench.to_vector().norm()).sum::<f64>()
        / samples.len() as f64;
    let mean_x: f64 =
        samples.iter().map(|s| s.deflection.norm()).sum::<f64>() / samples.len() as f64;
    let mut l = Matrix3::identity() * (mean_w / mean_x.max(1e-12)).max(1e-9).sqrt();

    let mut loss = loss_of(&l);
    let mut step = 0.1 / (max_e * l.norm_squared()).max(1e-12);
    let mut iters = 0usize;
    let mut converged = false;
    while iters < config.max_iters {
        iters += 1;
        // ∇_L Σ‖wᵢ − LᵀL xᵢ‖² = −2L Σ (xᵢrᵢᵀ + rᵢxᵢᵀ), rᵢ the residual.
        let k = l.transpose() * l;
        let mut sym = Matrix3::<f64>::zeros();
        for s in samples {
            let r = s.wrench.to_vector() - k * s.deflection;
            sym += s.deflection * r.transpose() + r * s.deflection.transpose();
        }
        let grad = -2.0 * l * sym;
        let gnorm2 = grad.norm_squared();
        if gnorm2 == 0.0 {
            converged = true;
            break;
        }
        let mut accepted = false;
        for _ in 0..60 {
            let cand = l - grad * step;
            let cand_loss = loss_of(&cand);
            if cand_loss <= loss {
                let improvement = loss - cand_loss;
                l = cand;
                let prev = loss;
                loss = cand_loss;
                step *= 1.25;
                accepted = true;
                if improvement <= config.rel_tol * prev.max(1e-300) {
                    converged = true;
                }
                break;
            }
            step *= 0.5;
        }
        if !accepted || converged {
            converged = converged || !accepted; // stalled line search = fixed point
            break;
        }
    }
    let residual = loss / samples.len() as f64;
    if !converged {
        return Err(ComplianceError::NonConvergence { iters, residual });
    }
    let model = ElasticityModel::new(l.transpose() * l)
        .expect("LᵀL is symmetric PSD by construction");
    Ok(ElasticityFit {
        model,
        residual,
        iterations: iters,
    })
}

// ---------------------------------------------------------------------------
// Friction fitting
// ---------------------------------------------------------------------------

/// Configuration for [`fit_friction`].
#[derive(Debug, Clone, Copy)]
pub struct FrictionFitConfig {
    /// Quantile of |f_t|/f_n used as μ (1.0 = strict max).
    pub quantile: f64,
}

impl Default for FrictionFitConfig {
    fn default() -> Self {
        Self { quantile: 0.99 }
    }
}

/// Fits a friction coefficient as the q-quantile of `|f_t|/f_n`.
///
/// Uses the "higher" order statistic (no interpolation), so the returned cone
/// contains at least a `q` fraction of the samples and `q = 1` reproduces the
/// exact maximum ratio.
///
/// # Errors
/// [`ComplianceError::NonPositiveNormal`] when any sample has `f_n ≤ 0`.
pub fn fit_friction(
    force_samples: &[(f64, f64)],
    config: &FrictionFitConfig,
) -> Result<f64, ComplianceError> {
    assert!(
        (0.0..=1.0).contains(&config.quantile),
        "quantile must be in [0, 1]"
    );
    let mut ratios = Vec::with_capacity(force_samples.len());
    for (i, &(f_t, f_n)) in force_samples.iter().enumerate() {
        if f_n <= 0.0 {
            return Err(ComplianceError::NonPositiveNormal { index: i, f_n });
        }
        ratios.push(f_t.abs() / f_n);
    }
    if ratios.is_empty() {
        return Ok(0.0);
    }
    ratios.sort_by(f64::total_cmp);
    let idx = (config.quantile * (ratios.len() - 1) as f64).ceil() as usize;
    Ok(ratios[idx.min(ratios.len() - 1)])
}

// ---------------------------------------------------------------------------
// CSV I/O
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct DeflectionRow {
    dx: f64,
    dy: f64,
    dtheta: f64,
    fx: f64,
    fy: f64,
    tau: f64,
}

fn csv_err(e: &csv::Error) -> ComplianceError {
    let line = e.position().map_or(0, csv::Position::line);
    ComplianceError::Csv {
        line,
        msg: e.to_string(),
    }
}

/// Reads deflection samples from CSV with header `dx,dy,dtheta,fx,fy,tau`.
pub fn read_deflection_csv<R: std::io::Read>(
    reader: R,
) -> Result<Vec<DeflectionSample>, ComplianceError> {
    let mut rdr = csv::Reader::from_reader(reader);
    let mut out = Vec::new();
    for rec in rdr.deserialize::<DeflectionRow>() {
        let row = rec.map_err(|e| csv_err(&e))?;
        out.push(DeflectionSample {
            deflection: Vector3::new(row.dx, row.dy, row.dtheta),
            wrench: Wrench2::new(row.fx, row.fy, row.tau),
        });
    }
    Ok(out)
}

/// Writes deflection samples as CSV with header `dx,dy,dtheta,fx,fy,tau`.
pub fn write_deflection_csv<W: std::io::Write>(
    writer: W,
    samples: &[DeflectionSample],
) -> Result<(), ComplianceError> {
    let mut wtr = csv::Writer::from_writer(writer);
    for s in samples {
        wtr.serialize(DeflectionRow {
            dx: s.deflection.x,
            dy: s.deflection.y,
            dtheta: s.deflection.z,
            fx: s.wrench.fx,
            fy: s.wrench.fy,
            tau: s.wrench.tau,
        })
        .map_err(|e| csv_err(&e))?;
    }
    wtr.flush().map_err(|e| ComplianceError::Csv {
        line: 0,
        msg: e.to_string(),
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct FrictionRow {
    ft: f64,
    #[serde(rename = "fn")]
    fn_: f64,
}

/// Reads friction force samples from CSV with header `ft,fn`.
pub fn read_friction_csv<R: std::io::Read>(
    reader: R,
) -> Result<Vec<(f64, f64)>, ComplianceError> {
    let mut rdr = csv::Reader::from_reader(reader);
    let mut out = Vec::new();
    for rec in rdr.deserialize::<FrictionRow>() {
        let row = rec.map_err(|e| csv_err(&e))?;
        out.push((row.ft, row.fn_));
    }
    Ok(out)
}

/// Writes friction force samples as CSV with header `ft,fn`.
pub fn write_friction_csv<W: std::io::Write>(
    writer: W,
    samples: &[(f64, f64)],
) -> Result<(), ComplianceError> {
    let mut wtr = csv::Writer::from_writer(writer);
    for &(ft, fn_) in samples {
        wtr.serialize(FrictionRow { ft, fn_ })
            .map_err(|e| csv_err(&e))?;
    }
    wtr.flush().map_err(|e| ComplianceError::Csv {
        line: 0,
        msg: e.to_string(),
    })
}
