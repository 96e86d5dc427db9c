//! Face deformation field, eye rotation field, landmark blend weights, and
//! representation capture.
//!
//! Both fields are residual: with all MLPs zeroed they return the canonical
//! sets element-for-element. Quaternions are renormalized, scales stay
//! positive through the log parameterization, and opacities are squashed
//! through a sigmoid after every transformation.

use crate::error::{Error, Result};
use crate::gaussians::mlp::FieldMlp;
use crate::gaussians::{CanonicalAttrs, GaussianSet};
use crate::geometry::{self, Mat3};
use crate::numerics::ops;
use crate::numerics::tape::{Tape, Var};
use crate::numerics::tensor::Tensor;
use crate::params::Bindings;
use crate::sampler::GazeAngle;

/// Per-Gaussian expression/pose blend weights; rows sum to one.
#[derive(Clone)]
pub struct BlendWeights {
    /// (n,)
    pub lambda_expr: Var,
    /// (n,)
    pub lambda_pose: Var,
}

/// Landmark-proximity blend weights from canonical positions.
///
/// Affinity is a Gaussian kernel exp(-d^2 / sigma^2) summed over each anchor
/// set and normalized pairwise; the kernel epsilon resolves coincident
/// anchors without error.
pub fn blend_weights(
    positions: &Var,
    expr_landmarks: &[[f64; 3]],
    pose_landmarks: &[[f64; 3]],
    sigma: f64,
) -> Result<BlendWeights> {
    if expr_landmarks.is_empty() || pose_landmarks.is_empty() {
        return Err(Error::Scene(
            "each landmark anchor set needs at least one point".into(),
        ));
    }
    let tape = positions.tape().clone();
    let affinity = |landmarks: &[[f64; 3]]| -> Result<Var> {
        let l = landmarks.len();
        let lm = tape.constant(Tensor::from_vec(
            &[3, l],
            {
                // Column-major landmark matrix for position . landmark^T.
                let mut data = vec![0.0; 3 * l];
                for (j, p) in landmarks.iter().enumerate() {
                    for k in 0..3 {
                        data[k * l + j] = p[k];
                    }
                }
                data
            },
        )?);
        let lm_sq = tape.constant(Tensor::from_vec(
            &[l],
            landmarks.iter().map(|p| geometry::dot3(*p, *p)).collect(),
        )?);
        // d^2 = |x|^2 + |L|^2 - 2 x.L
        let cross = ops::matmul(positions, &lm)?; // (n, l)
        let xsq = ops::sum_axis(&ops::square(positions)?, 1)?; // (n,)
        let n = positions.shape()[0];
        let xsq_mat = ops::scale_rows(&ops::tile_rows(&tape.scalar_const(1.0).into_vec_var(l)?, n)?, &xsq)?;
        let d2 = ops::add(
            &ops::sub(&xsq_mat, &ops::mul_scalar(&cross, 2.0))?,
            &ops::tile_rows(&lm_sq, n)?,
        )?;
        let kern = ops::exp(&ops::mul_scalar(&d2, -1.0 / (sigma * sigma)));
        ops::sum_axis(&kern, 1)
    };
    let a_expr = ops::add_scalar(&affinity(expr_landmarks)?, 1e-30);
    let a_pose = ops::add_scalar(&affinity(pose_landmarks)?, 1e-30);
    let total = ops::add(&a_expr, &a_pose)?;
    Ok(BlendWeights {
        lambda_expr: ops::div(&a_expr, &total)?,
        lambda_pose: ops::div(&a_pose, &total)?,
    })
}

/// Helper: a (len,) vector of ones on the tape.
trait OnesVec {
    fn into_vec_var(self, len: usize) -> Result<Var>;
}

impl OnesVec for Var {
    fn into_vec_var(self, len: usize) -> Result<Var> {
        Ok(self.tape().constant(Tensor::filled(&[len], 1.0)))
    }
}

/// The face field's six MLPs plus the eye field's six, in one bundle.
#[derive(Clone, Debug)]
pub struct DeformFieldParams {
    pub face_expr_mu: FieldMlp,
    pub face_pose_mu: FieldMlp,
    pub face_expr_c: FieldMlp,
    pub face_pose_c: FieldMlp,
    pub face_expr_k: FieldMlp,
    pub face_pose_k: FieldMlp,
    pub eye_expr_mu: FieldMlp,
    pub eye_gaze_mu: FieldMlp,
    pub eye_expr_c: FieldMlp,
    pub eye_gaze_c: FieldMlp,
    pub eye_expr_k: FieldMlp,
    pub eye_gaze_k: FieldMlp,
}

impl DeformFieldParams {
    /// Face kappa output: quaternion delta (4) + log-scale delta (3) +
    /// opacity-logit delta (1). Eye kappa: quaternion (4) + scalar scale (1)
    /// + opacity (1).
    pub fn new(feature_dim: usize, d_tau: usize) -> Self {
        let d_pose = 6;
        let d_gaze = 2;
        Self {
            face_expr_mu: FieldMlp::new("field.face.expr_mu", 3 + d_tau, 3),
            face_pose_mu: FieldMlp::new("field.face.pose_mu", 3 + d_pose, 3),
            face_expr_c: FieldMlp::new("field.face.expr_c", feature_dim + d_tau, feature_dim),
            face_pose_c: FieldMlp::new("field.face.pose_c", feature_dim + d_pose, feature_dim),
            face_expr_k: FieldMlp::new("field.face.expr_k", feature_dim + d_tau, 8),
            face_pose_k: FieldMlp::new("field.face.pose_k", feature_dim + d_pose, 8),
            eye_expr_mu: FieldMlp::new("field.eye.expr_mu", 3 + d_tau, 3),
            eye_gaze_mu: FieldMlp::new("field.eye.gaze_mu", 3 + d_gaze, 4),
            eye_expr_c: FieldMlp::new("field.eye.expr_c", feature_dim + d_tau, feature_dim),
            eye_gaze_c: FieldMlp::new("field.eye.gaze_c", feature_dim + d_gaze, feature_dim),
            eye_expr_k: FieldMlp::new("field.eye.expr_k", feature_dim + d_tau, 6),
            eye_gaze_k: FieldMlp::new("field.eye.gaze_k", feature_dim + d_gaze, 6),
        }
    }

    pub fn all(&self) -> [&FieldMlp; 12] {
        [
            &self.face_expr_mu,
            &self.face_pose_mu,
            &self.face_expr_c,
            &self.face_pose_c,
            &self.face_expr_k,
            &self.face_pose_k,
            &self.eye_expr_mu,
            &self.eye_gaze_mu,
            &self.eye_expr_c,
            &self.eye_gaze_c,
            &self.eye_expr_k,
            &self.eye_gaze_k,
        ]
    }
}

/// Concatenate per-Gaussian rows with a broadcast code vector.
fn with_code(rows: &Var, code: &[f64]) -> Result<Var> {
    let tape = rows.tape().clone();
    let n = rows.shape()[0];
    let code_var = tape.constant(Tensor::from_vec(&[code.len()], code.to_vec())?);
    let tiled = ops::tile_rows(&code_var, n)?;
    ops::concat(&[rows, &tiled], 1)
}

/// Bind canonical attributes as tape variables via the parameter bindings.
pub struct CanonicalVars {
    pub positions: Var,
    pub features: Var,
    pub rotations_raw: Var,
    pub log_scales: Var,
    pub opacity_logits: Var,
    pub isotropic: bool,
}

impl CanonicalVars {
    pub fn from_bindings(binds: &Bindings, stream: &str, isotropic: bool) -> Self {
        Self {
            positions: binds.get(&format!("canonical.{stream}.positions")),
            features: binds.get(&format!("canonical.{stream}.features")),
            rotations_raw: binds.get(&format!("canonical.{stream}.rotations")),
            log_scales: binds.get(&format!("canonical.{stream}.log_scales")),
            opacity_logits: binds.get(&format!("canonical.{stream}.opacity_logits")),
            isotropic,
        }
    }

    /// Constant (untracked) bindings from stored attribute tensors.
    pub fn constants(tape: &Tape, attrs: &CanonicalAttrs) -> Self {
        Self {
            positions: tape.constant(attrs.positions.clone()),
            features: tape.constant(attrs.features.clone()),
            rotations_raw: tape.constant(attrs.rotations.clone()),
            log_scales: tape.constant(attrs.log_scales.clone()),
            opacity_logits: tape.constant(attrs.opacity_logits.clone()),
            isotropic: attrs.isotropic,
        }
    }

    /// The canonical set itself: normalized quaternions, exponentiated
    /// scales, squashed opacities.
    pub fn as_set(&self) -> Result<GaussianSet> {
        Ok(GaussianSet {
            positions: self.positions.clone(),
            features: self.features.clone(),
            rotations: normalize_rows4(&self.rotations_raw)?,
            scales: ops::exp(&ops::clamp(&self.log_scales, -7.0, 3.0)),
            opacities: ops::sigmoid(&self.opacity_logits),
            isotropic: self.isotropic,
        })
    }
}

/// Row-wise quaternion normalization of (n, 4).
pub fn normalize_rows4(q: &Var) -> Result<Var> {
    let sq = ops::sum_axis(&ops::square(q)?, 1)?;
    let inv = ops::recip(&ops::sqrt(&sq));
    ops::scale_rows(q, &inv)
}

/// Rotate rows of v (n, 3) by unit quaternion rows q (n, 4).
/// v' = v + 2 w (u x v) + 2 u x (u x v), with q = (w, u).
pub fn rotate_rows(v: &Var, q: &Var) -> Result<Var> {
    let col = |m: &Var, j: usize| ops::narrow(m, 1, j, 1);
    let w = col(q, 0)?;
    let ux = col(q, 1)?;
    let uy = col(q, 2)?;
    let uz = col(q, 3)?;
    let vx = col(v, 0)?;
    let vy = col(v, 1)?;
    let vz = col(v, 2)?;
    let cross = |ax: &Var, ay: &Var, az: &Var, bx: &Var, by: &Var, bz: &Var| -> Result<(Var, Var, Var)> {
        Ok((
            ops::sub(&ops::mul(ay, bz)?, &ops::mul(az, by)?)?,
            ops::sub(&ops::mul(az, bx)?, &ops::mul(ax, bz)?)?,
            ops::sub(&ops::mul(ax, by)?, &ops::mul(ay, bx)?)?,
        ))
    };
    let (c1x, c1y, c1z) = cross(&ux, &uy, &uz, &vx, &vy, &vz)?;
    let (c2x, c2y, c2z) = cross(&ux, &uy, &uz, &c1x, &c1y, &c1z)?;
    let term = |v: &Var, c1: &Var, c2: &Var| -> Result<Var> {
        ops::add(
            v,
            &ops::mul_scalar(&ops::add(&ops::mul(&w, c1)?, c2)?, 2.0),
        )
    };
    let rx = term(&vx, &c1x, &c2x)?;
    let ry = term(&vy, &c1y, &c2y)?;
    let rz = term(&vz, &c1z, &c2z)?;
    ops::concat(&[&rx, &ry, &rz], 1)
}

/// Proper rotation for a pitch-yaw gaze: pitch about the lateral axis applied
/// after yaw about the vertical axis; maps the canonical forward axis onto
/// the gaze direction.
pub fn gaze_to_rotation(gaze: GazeAngle) -> Result<Mat3> {
    if gaze.pitch.abs() > std::f64::consts::FRAC_PI_2 || gaze.yaw.abs() > std::f64::consts::PI {
        return Err(Error::InvalidCode(format!(
            "gaze ({}, {}) outside validated range",
            gaze.yaw, gaze.pitch
        )));
    }
    Ok(geometry::gaze_rotation(gaze.pitch, gaze.yaw))
}

/// Face deformation: blends expression- and pose-conditioned MLP outputs per
/// Gaussian.
pub fn face_deform(
    canonical: &CanonicalVars,
    tau: &[f64],
    pose: &[f64],
    fields: &DeformFieldParams,
    binds: &Bindings,
    weights: &BlendWeights,
) -> Result<GaussianSet> {
    let mu_in_e = with_code(&canonical.positions, tau)?;
    let mu_in_p = with_code(&canonical.positions, pose)?;
    let c_in_e = with_code(&canonical.features, tau)?;
    let c_in_p = with_code(&canonical.features, pose)?;

    let blend = |e: &Var, p: &Var| -> Result<Var> {
        ops::add(
            &ops::scale_rows(e, &weights.lambda_expr)?,
            &ops::scale_rows(p, &weights.lambda_pose)?,
        )
    };

    let d_mu = blend(
        &fields.face_expr_mu.forward(binds, &mu_in_e)?,
        &fields.face_pose_mu.forward(binds, &mu_in_p)?,
    )?;
    let positions = ops::add(&canonical.positions, &d_mu)?;

    let d_c = blend(
        &fields.face_expr_c.forward(binds, &c_in_e)?,
        &fields.face_pose_c.forward(binds, &c_in_p)?,
    )?;
    let features = ops::add(&canonical.features, &d_c)?;

    let d_k = blend(
        &fields.face_expr_k.forward(binds, &c_in_e)?,
        &fields.face_pose_k.forward(binds, &c_in_p)?,
    )?;
    let rotations = normalize_rows4(&ops::add(
        &canonical.rotations_raw,
        &ops::narrow(&d_k, 1, 0, 4)?,
    )?)?;
    let log_scales = ops::add(&canonical.log_scales, &ops::narrow(&d_k, 1, 4, 3)?)?;
    let scales = ops::exp(&ops::clamp(&log_scales, -7.0, 3.0));
    let d_op = ops::reshape(&ops::narrow(&d_k, 1, 7, 1)?, &[canonical.positions.shape()[0]])?;
    let opacities = ops::sigmoid(&ops::add(&canonical.opacity_logits, &d_op)?);

    let set = GaussianSet {
        positions,
        features,
        rotations,
        scales,
        opacities,
        isotropic: false,
    };
    if !set.positions.value().iter().all(|v| v.is_finite()) {
        return Err(Error::Train("non-finite face deformation output".into()));
    }
    Ok(set)
}

/// Eye transformation: expression offset plus a gaze-conditioned rigid
/// rotation about each eyeball center. In oracle mode the learned rotation
/// is replaced by the exact analytic rotation and the expression MLPs are
/// zeroed.
#[allow(clippy::too_many_arguments)]
pub fn eye_transform(
    canonical: &CanonicalVars,
    tau: &[f64],
    gaze: GazeAngle,
    fields: &DeformFieldParams,
    binds: &Bindings,
    eye_centers: &[[f64; 3]; 2],
    eye_assignment: &[usize],
    oracle_mode: bool,
) -> Result<GaussianSet> {
    let tape = canonical.positions.tape().clone();
    let n = canonical.positions.shape()[0];
    let centers = tape.constant(Tensor::from_vec(
        &[n, 3],
        eye_assignment
            .iter()
            .flat_map(|&e| eye_centers[e].to_vec())
            .collect(),
    )?);
    let centered = ops::sub(&canonical.positions, &centers)?;

    let rotated = if oracle_mode {
        let rot = gaze_to_rotation(gaze)?;
        // p' = p . R^T as row vectors.
        let rot_t = tape.constant(Tensor::from_vec(
            &[3, 3],
            vec![
                rot[0][0], rot[1][0], rot[2][0],
                rot[0][1], rot[1][1], rot[2][1],
                rot[0][2], rot[1][2], rot[2][2],
            ],
        )?);
        ops::matmul(&centered, &rot_t)?
    } else {
        let gaze_code = vec![gaze.pitch, gaze.yaw];
        let mu_in_g = with_code(&canonical.positions, &gaze_code)?;
        let q_delta = fields.eye_gaze_mu.forward(binds, &mu_in_g)?;
        // Identity quaternion plus the learned delta, normalized: always a
        // valid rotation, identity at zero init.
        let identity = tape.constant(Tensor::from_fn(&[n, 4], |i| {
            if i % 4 == 0 {
                1.0
            } else {
                0.0
            }
        }));
        let q = normalize_rows4(&ops::add(&identity, &q_delta)?)?;
        rotate_rows(&centered, &q)?
    };
    let mut positions = ops::add(&rotated, &centers)?;

    let gaze_code = vec![gaze.pitch, gaze.yaw];
    let (features, rotations, scales, opacities);
    if oracle_mode {
        features = canonical.features.clone();
        rotations = normalize_rows4(&canonical.rotations_raw)?;
        scales = ops::exp(&ops::clamp(&canonical.log_scales, -7.0, 3.0));
        opacities = ops::sigmoid(&canonical.opacity_logits);
    } else {
        let mu_in_e = with_code(&canonical.positions, tau)?;
        let d_mu_e = fields.eye_expr_mu.forward(binds, &mu_in_e)?;
        positions = ops::add(&positions, &d_mu_e)?;

        let c_in_e = with_code(&canonical.features, tau)?;
        let c_in_g = with_code(&canonical.features, &gaze_code)?;
        let d_c = ops::add(
            &fields.eye_expr_c.forward(binds, &c_in_e)?,
            &fields.eye_gaze_c.forward(binds, &c_in_g)?,
        )?;
        features = ops::add(&canonical.features, &d_c)?;

        let d_k = ops::add(
            &fields.eye_expr_k.forward(binds, &c_in_e)?,
            &fields.eye_gaze_k.forward(binds, &c_in_g)?,
        )?;
        rotations = normalize_rows4(&ops::add(
            &canonical.rotations_raw,
            &ops::narrow(&d_k, 1, 0, 4)?,
        )?)?;
        let log_scales = ops::add(&canonical.log_scales, &ops::narrow(&d_k, 1, 4, 1)?)?;
        scales = ops::exp(&ops::clamp(&log_scales, -7.0, 3.0));
        let d_op = ops::reshape(&ops::narrow(&d_k, 1, 5, 1)?, &[n])?;
        opacities = ops::sigmoid(&ops::add(&canonical.opacity_logits, &d_op)?);
    }

    let set = GaussianSet {
        positions,
        features,
        rotations,
        scales,
        opacities,
        isotropic: canonical.isotropic,
    };
    if !set.positions.value().iter().all(|v| v.is_finite()) {
        return Err(Error::Train("non-finite eye transformation output".into()));
    }
    Ok(set)
}

/// First-layer representations of the three control MLPs, mean-pooled over
/// Gaussians. Canonical positions enter detached so orthogonality gradients
/// update only the first layers.
pub fn capture_representations(
    tape: &Tape,
    fields: &DeformFieldParams,
    binds: &Bindings,
    face_positions: &Tensor,
    eye_positions: &Tensor,
    gaze: GazeAngle,
    pose: &[f64],
    tau: &[f64],
) -> Result<(Var, Var, Var)> {
    let face_const = tape.constant(face_positions.clone());
    let eye_const = tape.constant(eye_positions.clone());
    let gaze_code = vec![gaze.pitch, gaze.yaw];
    let v_gaze = ops::mean_axis(
        &fields
            .eye_gaze_mu
            .first_layer(binds, &with_code(&eye_const, &gaze_code)?)?,
        0,
    )?;
    let v_pose = ops::mean_axis(
        &fields
            .face_pose_mu
            .first_layer(binds, &with_code(&face_const, pose)?)?,
        0,
    )?;
    let v_expr = ops::mean_axis(
        &fields
            .face_expr_mu
            .first_layer(binds, &with_code(&face_const, tau)?)?,
        0,
    )?;
    Ok((v_gaze, v_pose, v_expr))
}
