//! Two-stream 3D Gaussian head representation: canonical initialization, the
//! face deformation field, the eye rotation field, landmark blend weights,
//! and first-layer representation capture for the orthogonality loss.

pub mod deform;
mod init;
mod mlp;

pub use deform::{
    blend_weights, capture_representations, eye_transform, face_deform, gaze_to_rotation,
    BlendWeights, CanonicalVars, DeformFieldParams,
};
pub use init::{init_canonical, CanonicalAttrs, CanonicalInit};
pub use mlp::FieldMlp;

use crate::error::{Error, Result};
use crate::numerics::tape::Var;
use crate::sampler::GazeAngle;

/// Attribute arrays of one Gaussian stream on the tape.
#[derive(Clone)]
pub struct GaussianSet {
    /// (n, 3)
    pub positions: Var,
    /// (n, f)
    pub features: Var,
    /// (n, 4) unit quaternions
    pub rotations: Var,
    /// (n, 3), or (n, 1) when isotropic
    pub scales: Var,
    /// (n,) in [0, 1]
    pub opacities: Var,
    pub isotropic: bool,
}

impl GaussianSet {
    pub fn len(&self) -> usize {
        self.positions.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn feature_dim(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn splat_input(&self) -> crate::rasterizer::SplatInput<'_> {
        crate::rasterizer::SplatInput {
            positions: &self.positions,
            features: &self.features,
            rotations: &self.rotations,
            scales: &self.scales,
            opacities: &self.opacities,
            isotropic: self.isotropic,
        }
    }

    /// Check the post-transform invariants: unit quaternions, positive
    /// scales, opacities in range.
    pub fn check_invariants(&self) -> Result<()> {
        let q = self.rotations.value();
        for row in q.chunks(4) {
            let norm: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-6 {
                return Err(Error::domain(
                    "gaussian_set",
                    format!("quaternion norm {norm} deviates from 1"),
                ));
            }
        }
        if self.scales.value().iter().any(|s| *s <= 0.0) {
            return Err(Error::domain("gaussian_set", "non-positive scale"));
        }
        if self
            .opacities
            .value()
            .iter()
            .any(|a| !(0.0..=1.0).contains(a))
        {
            return Err(Error::domain("gaussian_set", "opacity outside [0, 1]"));
        }
        Ok(())
    }
}

/// Conditioning signals of the pipeline.
#[derive(Clone, Debug)]
pub struct ControlCodes {
    pub gaze: GazeAngle,
    /// Head rotation angles (rx, ry, rz), radians.
    pub pose_rot: [f64; 3],
    pub pose_trans: [f64; 3],
    pub expression: Vec<f64>,
    pub shape: Vec<f64>,
}

impl ControlCodes {
    pub fn new(
        gaze: GazeAngle,
        pose_rot: [f64; 3],
        pose_trans: [f64; 3],
        expression: Vec<f64>,
        shape: Vec<f64>,
    ) -> Result<Self> {
        if gaze.pitch.abs() > std::f64::consts::FRAC_PI_2 {
            return Err(Error::InvalidCode(format!(
                "|pitch| = {:.3} exceeds pi/2",
                gaze.pitch.abs()
            )));
        }
        if gaze.yaw.abs() > std::f64::consts::PI {
            return Err(Error::InvalidCode(format!(
                "|yaw| = {:.3} exceeds pi",
                gaze.yaw.abs()
            )));
        }
        Ok(Self {
            gaze,
            pose_rot,
            pose_trans,
            expression,
            shape,
        })
    }

    pub fn neutral(d_tau: usize, d_shape: usize) -> Self {
        Self {
            gaze: GazeAngle::new(0.0, 0.0),
            pose_rot: [0.0; 3],
            pose_trans: [0.0; 3],
            expression: vec![0.0; d_tau],
            shape: vec![0.0; d_shape],
        }
    }

    /// Pose vector fed to the pose-conditioned MLPs: rotation + translation.
    pub fn pose_vector(&self) -> Vec<f64> {
        let mut v = self.pose_rot.to_vec();
        v.extend_from_slice(&self.pose_trans);
        v
    }

    pub fn gaze_vector(&self) -> Vec<f64> {
        vec![self.gaze.pitch, self.gaze.yaw]
    }
}
