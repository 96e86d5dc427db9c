//! Differentiable splatting of Gaussian streams into per-stream feature maps
//! and their concatenation into the renderer input.
//!
//! The splat itself is a single fused tape node (see [`splat`]); projection
//! follows the standard EWA scheme: camera-space covariance is pushed through
//! the perspective Jacobian and floored on the diagonal to stay invertible.

mod splat;

pub use splat::{splat, SplatInput};

use crate::error::{Error, Result};
use crate::numerics::ops;
use crate::numerics::tape::Var;

/// Diagonal floor added to every projected 2D covariance, in px^2.
pub const COV_FLOOR: f64 = 0.3;
/// Per-contribution density-times-opacity clamp.
pub const ALPHA_CLAMP: f64 = 0.99;
/// Gaussians closer than this camera-space depth are culled.
pub const NEAR_EPS: f64 = 0.05;
/// Bounding-box radius in standard deviations.
pub(crate) const BBOX_SIGMA: f64 = 3.5;
/// Rasterization tile edge in pixels.
pub(crate) const TILE: usize = 16;

/// Pinhole camera with rigid extrinsics mapping world to camera space.
#[derive(Clone, Debug)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// World-to-camera rotation, row major.
    pub rotation: [[f64; 3]; 3],
    /// World-to-camera translation.
    pub translation: [f64; 3],
    pub width: usize,
    pub height: usize,
}

impl Camera {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        rotation: [[f64; 3]; 3],
        translation: [f64; 3],
        width: usize,
        height: usize,
    ) -> Result<Self> {
        if fx <= 0.0 || fy <= 0.0 {
            return Err(Error::domain("camera", "focal lengths must be positive"));
        }
        // Orthonormality check.
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| rotation[i][k] * rotation[j][k]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                if (dot - want).abs() > 1e-8 {
                    return Err(Error::domain(
                        "camera",
                        format!("extrinsic rotation not orthonormal: row {i}.row {j} = {dot}"),
                    ));
                }
            }
        }
        Ok(Self {
            fx,
            fy,
            cx,
            cy,
            rotation,
            translation,
            width,
            height,
        })
    }

    /// Camera on the -z axis at distance `dist`, looking toward +z, axes
    /// aligned with the world.
    pub fn front_at(dist: f64, focal: f64, width: usize, height: usize) -> Self {
        Self {
            fx: focal,
            fy: focal,
            cx: (width as f64 - 1.0) / 2.0,
            cy: (height as f64 - 1.0) / 2.0,
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.0, 0.0, dist],
            width,
            height,
        }
    }

    #[inline]
    pub fn world_to_cam(&self, p: [f64; 3]) -> [f64; 3] {
        let r = &self.rotation;
        [
            r[0][0] * p[0] + r[0][1] * p[1] + r[0][2] * p[2] + self.translation[0],
            r[1][0] * p[0] + r[1][1] * p[1] + r[1][2] * p[2] + self.translation[1],
            r[2][0] * p[0] + r[2][1] * p[1] + r[2][2] * p[2] + self.translation[2],
        ]
    }

    /// Project a world point; returns (pixel uv, camera depth).
    #[inline]
    pub fn project_point(&self, p: [f64; 3]) -> ([f64; 2], f64) {
        let c = self.world_to_cam(p);
        (
            [
                self.fx * c[0] / c[2] + self.cx,
                self.fy * c[1] / c[2] + self.cy,
            ],
            c[2],
        )
    }

    /// World position of the camera center.
    pub fn center(&self) -> [f64; 3] {
        // c = -R^T t
        let r = &self.rotation;
        let t = &self.translation;
        [
            -(r[0][0] * t[0] + r[1][0] * t[1] + r[2][0] * t[2]),
            -(r[0][1] * t[0] + r[1][1] * t[1] + r[2][1] * t[2]),
            -(r[0][2] * t[0] + r[1][2] * t[1] + r[2][2] * t[2]),
        ]
    }

    /// World-space direction of the ray through pixel (u, v), unnormalized.
    pub fn ray_dir(&self, u: f64, v: f64) -> [f64; 3] {
        let d_cam = [(u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0];
        let r = &self.rotation;
        [
            r[0][0] * d_cam[0] + r[1][0] * d_cam[1] + r[2][0] * d_cam[2],
            r[0][1] * d_cam[0] + r[1][1] * d_cam[1] + r[2][1] * d_cam[2],
            r[0][2] * d_cam[0] + r[1][2] * d_cam[1] + r[2][2] * d_cam[2],
        ]
    }
}

/// One projected Gaussian (survivors of near-plane culling).
#[derive(Clone, Debug)]
pub struct Projected {
    /// Index into the input arrays.
    pub index: usize,
    /// 2D mean in pixels.
    pub mean: [f64; 2],
    /// 2D covariance in px^2 (floored, symmetric positive-definite).
    pub cov: [f64; 3],
    pub depth: f64,
}

/// Project Gaussian means and covariances to the image plane. Gaussians at or
/// behind the near plane are culled, not errored.
///
/// `scales` has 3 entries per Gaussian, or 1 when `isotropic`.
pub fn project(
    positions: &[f64],
    rotations: &[f64],
    scales: &[f64],
    isotropic: bool,
    camera: &Camera,
) -> Vec<Projected> {
    let n = positions.len() / 3;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let p = [positions[3 * i], positions[3 * i + 1], positions[3 * i + 2]];
        let pc = camera.world_to_cam(p);
        if pc[2] <= NEAR_EPS {
            continue;
        }
        let geo = splat::project_one(
            pc,
            &rotations[4 * i..4 * i + 4],
            if isotropic {
                [scales[i], scales[i], scales[i]]
            } else {
                [scales[3 * i], scales[3 * i + 1], scales[3 * i + 2]]
            },
            camera,
        );
        out.push(Projected {
            index: i,
            mean: geo.mean,
            cov: geo.cov,
            depth: pc[2],
        });
    }
    out
}

/// Rasterized feature map plus its per-pixel accumulated alpha, both live on
/// the tape.
#[derive(Clone)]
pub struct FeatureImage {
    /// (h, w, c)
    pub values: Var,
    /// (h, w)
    pub alpha: Var,
}

impl FeatureImage {
    pub fn height(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[2]
    }

    /// Dump one channel as a portable graymap, min-max normalized.
    pub fn dump_channel_pgm(&self, channel: usize, path: &std::path::Path) -> Result<()> {
        let (h, w, c) = (self.height(), self.width(), self.channels());
        if channel >= c {
            return Err(Error::domain("dump_channel_pgm", format!("channel {channel} >= {c}")));
        }
        let vals = self.values.value();
        let plane: Vec<f64> = (0..h * w).map(|p| vals[p * c + channel]).collect();
        crate::imageio::write_pgm_normalized(path, &plane, w, h)
    }
}

/// Channel-wise concatenation of the two stream maps; the streams' alphas are
/// carried as two extra trailing channels. The combined alpha plane is the
/// union 1 - (1-a_face)(1-a_eye).
pub fn composite_streams(face: &FeatureImage, eye: &FeatureImage) -> Result<FeatureImage> {
    let (h, w) = (face.height(), face.width());
    if eye.height() != h || eye.width() != w {
        return Err(Error::shape(
            "composite_streams",
            format!("({h}, {w})"),
            format!("({}, {})", eye.height(), eye.width()),
        ));
    }
    let af = ops::reshape(&face.alpha, &[h, w, 1])?;
    let ae = ops::reshape(&eye.alpha, &[h, w, 1])?;
    let values = ops::concat(&[&face.values, &eye.values, &af, &ae], 2)?;
    // union alpha
    let prod = ops::mul(&face.alpha, &eye.alpha)?;
    let sum = ops::add(&face.alpha, &eye.alpha)?;
    let alpha = ops::sub(&sum, &prod)?;
    Ok(FeatureImage { values, alpha })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::tape::Tape;
    use crate::numerics::tensor::Tensor;

    #[test]
    fn on_axis_projection() {
        // Gaussian on the optical axis at depth d with isotropic scale s:
        // mean lands on (cx, cy), covariance ~ (f s / d)^2 I.
        let cam = Camera::front_at(4.0, 80.0, 64, 64);
        let d = 4.0;
        let s = 0.05;
        let positions = vec![0.0, 0.0, 0.0];
        let rotations = vec![1.0, 0.0, 0.0, 0.0];
        let scales = vec![s];
        let out = project(&positions, &rotations, &scales, true, &cam);
        assert_eq!(out.len(), 1);
        let p = &out[0];
        assert!((p.mean[0] - cam.cx).abs() < 1e-12);
        assert!((p.mean[1] - cam.cy).abs() < 1e-12);
        let expect = (80.0 * s / d) * (80.0 * s / d) + COV_FLOOR;
        assert!((p.cov[0] - expect).abs() < 1e-9, "cov {} vs {}", p.cov[0], expect);
        assert!((p.cov[2] - expect).abs() < 1e-9);
        assert!(p.cov[1].abs() < 1e-12);
    }

    #[test]
    fn behind_camera_culled() {
        let cam = Camera::front_at(4.0, 80.0, 64, 64);
        // World z = -4 puts the point exactly at the camera plane.
        let positions = vec![0.0, 0.0, -4.0, 0.0, 0.0, -5.0, 0.0, 0.0, 0.0];
        let rotations = vec![1.0, 0.0, 0.0, 0.0].repeat(3);
        let scales = vec![0.1, 0.1, 0.1];
        let out = project(&positions, &rotations, &scales, true, &cam);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].index, 2);
    }

    #[test]
    fn random_projection_matches_pinhole() {
        let cam = Camera::front_at(4.2, 96.0, 64, 64);
        let rng = crate::numerics::rng::RngStream::new(3, 7);
        for i in 0..50 {
            let p = [
                rng.uniform_in_at(3 * i, -1.0, 1.0),
                rng.uniform_in_at(3 * i + 1, -1.0, 1.0),
                rng.uniform_in_at(3 * i + 2, -1.0, 1.0),
            ];
            let proj = project(
                &p,
                &[1.0, 0.0, 0.0, 0.0],
                &[0.1],
                true,
                &cam,
            );
            let (uv, depth) = cam.project_point(p);
            assert_eq!(proj.len(), 1);
            assert!((proj[0].mean[0] - uv[0]).abs() < 1e-9);
            assert!((proj[0].mean[1] - uv[1]).abs() < 1e-9);
            assert!((proj[0].depth - depth).abs() < 1e-12);
        }
    }

    #[test]
    fn composite_is_concat_with_alpha_channels() {
        let tape = Tape::new();
        let mk = |vals: f64, alpha: f64| FeatureImage {
            values: tape.var(Tensor::filled(&[2, 2, 3], vals)),
            alpha: tape.var(Tensor::filled(&[2, 2], alpha)),
        };
        let face = mk(0.5, 0.8);
        let eye = mk(0.0, 0.0);
        let out = composite_streams(&face, &eye).unwrap();
        assert_eq!(out.values.dims(), vec![2, 2, 8]);
        let v = out.values.value();
        // Layout per pixel: [face0..3 | eye0..3 | alpha_face | alpha_eye]
        assert_eq!(&v[0..8], &[0.5, 0.5, 0.5, 0.0, 0.0, 0.0, 0.8, 0.0]);
        let a = out.alpha.value();
        assert!((a[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn composite_rejects_size_mismatch() {
        let tape = Tape::new();
        let face = FeatureImage {
            values: tape.var(Tensor::zeros(&[2, 2, 3])),
            alpha: tape.var(Tensor::zeros(&[2, 2])),
        };
        let eye = FeatureImage {
            values: tape.var(Tensor::zeros(&[3, 3, 3])),
            alpha: tape.var(Tensor::zeros(&[3, 3])),
        };
        assert!(composite_streams(&face, &eye).is_err());
    }

    #[test]
    fn composite_swap_symmetry() {
        let tape = Tape::new();
        let rng = crate::numerics::rng::RngStream::new(5, 5);
        let face = FeatureImage {
            values: tape.var(rng.derive("fv").uniform_tensor(&[2, 2, 3], 0.0, 1.0)),
            alpha: tape.var(rng.derive("fa").uniform_tensor(&[2, 2], 0.0, 1.0)),
        };
        let eye = FeatureImage {
            values: tape.var(rng.derive("ev").uniform_tensor(&[2, 2, 3], 0.0, 1.0)),
            alpha: tape.var(rng.derive("ea").uniform_tensor(&[2, 2], 0.0, 1.0)),
        };
        let ab = composite_streams(&face, &eye).unwrap();
        let ba = composite_streams(&eye, &face).unwrap();
        // Swapping inputs then swapping the channel blocks restores the original.
        let v_ab = ab.values.value();
        let v_ba = ba.values.value();
        for p in 0..4 {
            for c in 0..3 {
                assert_eq!(v_ab[p * 8 + c], v_ba[p * 8 + 3 + c]);
                assert_eq!(v_ab[p * 8 + 3 + c], v_ba[p * 8 + c]);
            }
            assert_eq!(v_ab[p * 8 + 6], v_ba[p * 8 + 7]);
            assert_eq!(v_ab[p * 8 + 7], v_ba[p * 8 + 6]);
        }
    }
}
