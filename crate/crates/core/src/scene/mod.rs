//! Procedural head-scene generator with analytically known gaze, pose, and
//! expression, plus the oracles and the frozen desk-scale gaze estimator
//! trained on its output.
//!
//! Ground truth is produced by direct ray casting against the scene spec
//! (ellipsoid head, spherical eyes, shaded feature patches), entirely
//! independent of the Gaussian pipeline under test.

mod estimator;
mod generate;
mod oracle;

pub use estimator::{train_estimator, EstimatorConfig, GazeEstimator};
pub use generate::{canonical_surface_color, generate_dataset, render_frame, DatasetConfig};
pub use oracle::{oracle_gaze, oracle_gaze_per_eye, oracle_pose, pose_error_deg, template_ssd_at, GazeReading};

use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::{self, Mat3};
use crate::rasterizer::Camera;
use crate::sampler::GazeAngle;

/// A colored marker patch on the head surface used by the pose oracle.
#[derive(Clone, Debug)]
pub struct Marker {
    /// Unit direction from the head center in the canonical frame.
    pub dir: [f64; 3],
    /// Canonical surface position (on the head ellipsoid).
    pub pos: [f64; 3],
    pub radius_deg: f64,
    pub color: [f64; 3],
}

#[derive(Clone, Debug)]
pub struct SceneSpec {
    /// Head ellipsoid semi-axes, centered at the canonical origin.
    pub head_axes: [f64; 3],
    pub eye_radius: f64,
    /// Canonical eyeball centers (left, right in image terms).
    pub eye_centers: [[f64; 3]; 2],
    /// Pupil cap angular radius in degrees, must lie in (0, 45).
    pub pupil_cap_deg: f64,
    /// Smooth transition width at the pupil rim, degrees.
    pub pupil_edge_deg: f64,
    /// Per-component displacement amplitude of the expression knob.
    pub expr_amplitude: Vec<f64>,
    /// Landmarks anchoring the expression blend weights (mouth region).
    pub expr_landmarks: Vec<[f64; 3]>,
    /// Landmarks anchoring the pose blend weights (skull region).
    pub pose_landmarks: Vec<[f64; 3]>,
    pub markers: Vec<Marker>,
    pub texture_seed: u64,
    pub camera: Camera,
    pub face_count: usize,
    pub eye_count: usize,
}

impl SceneSpec {
    /// Surface point of the head ellipsoid in canonical direction `dir`.
    pub fn head_surface(&self, dir: [f64; 3]) -> [f64; 3] {
        let d = geometry::normalize3(dir);
        let a = self.head_axes;
        let t = 1.0
            / ((d[0] / a[0]).powi(2) + (d[1] / a[1]).powi(2) + (d[2] / a[2]).powi(2)).sqrt();
        [d[0] * t, d[1] * t, d[2] * t]
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.pupil_cap_deg > 0.0 && self.pupil_cap_deg < 45.0) {
            return Err(Error::Scene(format!(
                "pupil cap {}° outside (0°, 45°)",
                self.pupil_cap_deg
            )));
        }
        for c in &self.eye_centers {
            let a = self.head_axes;
            let inside =
                (c[0] / a[0]).powi(2) + (c[1] / a[1]).powi(2) + (c[2] / a[2]).powi(2);
            if inside >= 1.0 {
                return Err(Error::Scene(format!(
                    "eyeball center {c:?} not strictly inside the head"
                )));
            }
        }
        let d = geometry::norm3(geometry::sub3(self.eye_centers[0], self.eye_centers[1]));
        if d <= 2.0 * self.eye_radius {
            return Err(Error::Scene(
                "eyeball spheres overlap: face/eye partitions not separable".into(),
            ));
        }
        if self.expr_landmarks.is_empty() || self.pose_landmarks.is_empty() {
            return Err(Error::Scene("each landmark anchor set needs at least one point".into()));
        }
        Ok(())
    }
}

impl Default for SceneSpec {
    fn default() -> Self {
        let head_axes = [0.95, 1.05, 0.90];
        let surface = |dir: [f64; 3]| {
            let d = geometry::normalize3(dir);
            let t = 1.0
                / ((d[0] / head_axes[0]).powi(2)
                    + (d[1] / head_axes[1]).powi(2)
                    + (d[2] / head_axes[2]).powi(2))
                .sqrt();
            [d[0] * t, d[1] * t, d[2] * t]
        };
        // Expression anchors ring the mouth; pose anchors sit on the skull.
        let mouth_dirs = [
            [0.0, 0.62, -0.85],
            [0.30, 0.58, -0.80],
            [-0.30, 0.58, -0.80],
            [0.0, 0.45, -0.92],
            [0.18, 0.72, -0.72],
            [-0.18, 0.72, -0.72],
        ];
        let skull_dirs = [
            [0.0, -1.0, 0.05],
            [0.0, -0.2, 1.0],
            [1.0, -0.1, 0.2],
            [-1.0, -0.1, 0.2],
            [0.6, -0.75, 0.3],
            [-0.6, -0.75, 0.3],
        ];
        let marker_specs: [([f64; 3], [f64; 3]); 4] = [
            ([0.0, 0.12, -1.0], [0.88, 0.10, 0.10]),
            ([0.0, -0.55, -0.85], [0.10, 0.78, 0.15]),
            ([-0.62, 0.28, -0.75], [0.12, 0.20, 0.88]),
            ([0.62, 0.28, -0.75], [0.85, 0.78, 0.10]),
        ];
        Self {
            head_axes,
            eye_radius: 0.30,
            eye_centers: [[-0.40, -0.22, -0.78], [0.40, -0.22, -0.78]],
            pupil_cap_deg: 22.0,
            pupil_edge_deg: 3.0,
            expr_amplitude: vec![1.0; 8],
            expr_landmarks: mouth_dirs.iter().map(|d| surface(*d)).collect(),
            pose_landmarks: skull_dirs.iter().map(|d| surface(*d)).collect(),
            markers: marker_specs
                .iter()
                .map(|(dir, color)| {
                    let d = geometry::normalize3(*dir);
                    Marker {
                        dir: d,
                        pos: surface(d),
                        radius_deg: 6.0,
                        color: *color,
                    }
                })
                .collect(),
            texture_seed: 7,
            camera: Camera::front_at(4.2, 96.0, 64, 64),
            face_count: 512,
            eye_count: 128,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
    /// Held-out fine-grid angles strictly between the training grid points.
    Intermediate,
}

impl Split {
    pub fn tag(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
            Split::Intermediate => "intermediate",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            "intermediate" => Ok(Split::Intermediate),
            other => Err(Error::Config(format!("unknown split '{other}'"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Sample {
    /// (h, w, 3) in [0, 1].
    pub image: Vec<f64>,
    pub gaze: GazeAngle,
    /// Rotation angles (rx, ry, rz) radians.
    pub pose_rot: [f64; 3],
    pub pose_trans: [f64; 3],
    pub tau: Vec<f64>,
    pub face_mask: Vec<u8>,
    pub eye_mask: Vec<u8>,
    pub split: Split,
}

impl Sample {
    pub fn pose_matrix(&self) -> Mat3 {
        geometry::pose_rotation(self.pose_rot)
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub spec: SceneSpec,
    pub samples: Vec<Sample>,
    pub height: usize,
    pub width: usize,
}

impl Dataset {
    pub fn indices(&self, split: Split) -> Vec<usize> {
        self.samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.split == split)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Persist as a directory: a CSV manifest plus one binary tensor file per
    /// sample (little-endian f32 image, byte masks).
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut manifest = String::from(
            "index,yaw_deg,pitch_deg,rx,ry,rz,tx,ty,tz,tau,split\n",
        );
        for (i, s) in self.samples.iter().enumerate() {
            let tau = s
                .tau
                .iter()
                .map(|v| format!("{v:.17e}"))
                .collect::<Vec<_>>()
                .join(";");
            manifest.push_str(&format!(
                "{},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{},{}\n",
                i,
                s.gaze.yaw_deg(),
                s.gaze.pitch_deg(),
                s.pose_rot[0],
                s.pose_rot[1],
                s.pose_rot[2],
                s.pose_trans[0],
                s.pose_trans[1],
                s.pose_trans[2],
                tau,
                s.split.tag()
            ));
            let mut bin = Vec::with_capacity(16 + s.image.len() * 4 + s.face_mask.len() * 2);
            bin.extend_from_slice(b"GZSM");
            bin.extend_from_slice(&(self.height as u32).to_le_bytes());
            bin.extend_from_slice(&(self.width as u32).to_le_bytes());
            for v in &s.image {
                bin.extend_from_slice(&(*v as f32).to_le_bytes());
            }
            bin.extend_from_slice(&s.face_mask);
            bin.extend_from_slice(&s.eye_mask);
            std::fs::write(dir.join(format!("sample_{i:05}.bin")), bin)?;
        }
        std::fs::write(dir.join("manifest.csv"), manifest)?;
        Ok(())
    }

    pub fn load(dir: &Path, spec: SceneSpec) -> Result<Self> {
        let manifest = std::fs::read_to_string(dir.join("manifest.csv"))?;
        let mut samples = Vec::new();
        let (mut height, mut width) = (0usize, 0usize);
        for line in manifest.lines().skip(1) {
            if line.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != 11 {
                return Err(Error::Config(format!("bad manifest row: {line}")));
            }
            let i: usize = cols[0].parse().map_err(|_| Error::Config("bad index".into()))?;
            let parse = |s: &str| -> Result<f64> {
                s.parse().map_err(|_| Error::Config(format!("bad number '{s}'")))
            };
            let gaze = GazeAngle::from_degrees(parse(cols[1])?, parse(cols[2])?);
            let pose_rot = [parse(cols[3])?, parse(cols[4])?, parse(cols[5])?];
            let pose_trans = [parse(cols[6])?, parse(cols[7])?, parse(cols[8])?];
            let tau: Vec<f64> = if cols[9].is_empty() {
                Vec::new()
            } else {
                cols[9].split(';').map(parse).collect::<Result<_>>()?
            };
            let split = Split::parse(cols[10])?;
            let bin = std::fs::read(dir.join(format!("sample_{i:05}.bin")))?;
            if &bin[0..4] != b"GZSM" {
                return Err(Error::Config("bad sample magic".into()));
            }
            let h = u32::from_le_bytes(bin[4..8].try_into().unwrap()) as usize;
            let w = u32::from_le_bytes(bin[8..12].try_into().unwrap()) as usize;
            height = h;
            width = w;
            let npix = h * w;
            let mut image = Vec::with_capacity(npix * 3);
            let mut off = 12;
            for _ in 0..npix * 3 {
                image.push(f32::from_le_bytes(bin[off..off + 4].try_into().unwrap()) as f64);
                off += 4;
            }
            let face_mask = bin[off..off + npix].to_vec();
            let eye_mask = bin[off + npix..off + 2 * npix].to_vec();
            samples.push(Sample {
                image,
                gaze,
                pose_rot,
                pose_trans,
                tau,
                face_mask,
                eye_mask,
                split,
            });
        }
        Ok(Self {
            spec,
            samples,
            height,
            width,
        })
    }
}
