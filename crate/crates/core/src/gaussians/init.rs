//! Canonical Gaussian initialization from the procedural scene spec.
//!
//! Face Gaussians tile the head ellipsoid with eye sockets carved out; eye
//! Gaussians tile the front hemisphere of each eyeball in azimuthally
//! symmetric rings so the pupil-marked cap is centered on the canonical
//! forward axis exactly.

use crate::error::{Error, Result};
use crate::geometry;
use crate::numerics::tensor::Tensor;
use crate::scene::SceneSpec;

/// Canonical attribute tensors for one stream (host values, pre-binding).
#[derive(Clone, Debug)]
pub struct CanonicalAttrs {
    pub positions: Tensor,
    pub features: Tensor,
    pub rotations: Tensor,
    /// Stored in log space; (n, 3) or (n, 1).
    pub log_scales: Tensor,
    /// Stored as logits.
    pub opacity_logits: Tensor,
    pub isotropic: bool,
}

#[derive(Clone, Debug)]
pub struct CanonicalInit {
    pub face: CanonicalAttrs,
    pub eye: CanonicalAttrs,
    /// Eyeball index (0 or 1) per eye Gaussian.
    pub eye_assignment: Vec<usize>,
    pub expr_landmarks: Vec<[f64; 3]>,
    pub pose_landmarks: Vec<[f64; 3]>,
    /// Blend-weight kernel width: mean nearest-neighbor landmark spacing.
    pub landmark_sigma: f64,
    /// Indices of eye Gaussians whose features are pupil-marked.
    pub pupil_indices: Vec<usize>,
}

/// Fibonacci-spiral unit directions.
fn fibonacci_dirs(n: usize) -> Vec<[f64; 3]> {
    let golden = std::f64::consts::PI * (3.0 - 5.0f64.sqrt());
    (0..n)
        .map(|i| {
            let y = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
            let r = (1.0 - y * y).sqrt();
            let t = golden * i as f64;
            [r * t.cos(), y, r * t.sin()]
        })
        .collect()
}

fn mean_nn_distance(points: &[[f64; 3]]) -> f64 {
    let mut total = 0.0;
    for (i, p) in points.iter().enumerate() {
        let mut best = f64::INFINITY;
        for (j, q) in points.iter().enumerate() {
            if i != j {
                best = best.min(geometry::norm3(geometry::sub3(*p, *q)));
            }
        }
        total += best;
    }
    total / points.len() as f64
}

/// Ring layout over the front hemisphere: (polar angle degrees, weight).
const EYE_RINGS: [(f64, f64); 7] = [
    (0.0, 1.0),
    (12.0, 6.0),
    (20.0, 8.0),
    (32.0, 10.0),
    (45.0, 12.0),
    (60.0, 13.0),
    (76.0, 14.0),
];

fn ring_counts(per_eye: usize) -> Vec<usize> {
    let total_w: f64 = EYE_RINGS.iter().map(|(_, w)| w).sum();
    let mut counts: Vec<usize> = EYE_RINGS
        .iter()
        .map(|(_, w)| ((w / total_w) * per_eye as f64).floor() as usize)
        .collect();
    counts[0] = counts[0].max(1);
    let mut assigned: usize = counts.iter().sum();
    // Distribute the remainder outward-in, deterministically.
    let mut k = EYE_RINGS.len() - 1;
    while assigned < per_eye {
        counts[k] += 1;
        assigned += 1;
        k = if k == 1 { EYE_RINGS.len() - 1 } else { k - 1 };
    }
    while assigned > per_eye {
        if counts[k] > 1 {
            counts[k] -= 1;
            assigned -= 1;
        }
        k = if k == 1 { EYE_RINGS.len() - 1 } else { k - 1 };
    }
    counts
}

/// Build canonical face and eye streams from the scene spec.
///
/// Opacity logits start at zero (opacity one half); scales start at a
/// fraction of the nearest-neighbor spacing.
pub fn init_canonical(spec: &SceneSpec, feature_dim: usize) -> Result<CanonicalInit> {
    spec.validate()?;
    if spec.eye_count == 0 {
        return Err(Error::Scene("eye stream needs at least one Gaussian".into()));
    }
    if spec.face_count == 0 {
        return Err(Error::Scene("face stream needs at least one Gaussian".into()));
    }
    if feature_dim < 4 {
        return Err(Error::Scene("feature dim must be >= 4".into()));
    }

    // Face stream: tile the ellipsoid, carve out the eye sockets.
    let mut face_pos = Vec::new();
    let socket_radius = spec.eye_radius * 1.15;
    let mut candidates = spec.face_count * 2;
    loop {
        face_pos.clear();
        for dir in fibonacci_dirs(candidates) {
            let p = spec.head_surface(dir);
            let in_socket = spec
                .eye_centers
                .iter()
                .any(|c| geometry::norm3(geometry::sub3(p, *c)) < socket_radius);
            if !in_socket {
                face_pos.push(p);
            }
            if face_pos.len() == spec.face_count {
                break;
            }
        }
        if face_pos.len() == spec.face_count {
            break;
        }
        candidates *= 2;
        if candidates > spec.face_count * 64 {
            return Err(Error::Scene(
                "cannot place the requested face Gaussians outside the eye sockets".into(),
            ));
        }
    }

    let n_face = face_pos.len();
    let mut face_feat = vec![0.0; n_face * feature_dim];
    for (i, p) in face_pos.iter().enumerate() {
        let color = crate::scene::canonical_surface_color(spec, *p);
        face_feat[i * feature_dim] = color[0];
        face_feat[i * feature_dim + 1] = color[1];
        face_feat[i * feature_dim + 2] = color[2];
        face_feat[i * feature_dim + 3] = 1.0;
    }
    let face_nn = mean_nn_distance(&face_pos);
    let face = CanonicalAttrs {
        positions: Tensor::from_vec(&[n_face, 3], face_pos.iter().flatten().copied().collect())?,
        features: Tensor::from_vec(&[n_face, feature_dim], face_feat)?,
        rotations: Tensor::from_fn(&[n_face, 4], |i| if i % 4 == 0 { 1.0 } else { 0.0 }),
        log_scales: Tensor::filled(&[n_face, 3], (0.6 * face_nn).ln()),
        opacity_logits: Tensor::zeros(&[n_face]),
        isotropic: false,
    };

    // Eye stream: symmetric rings about the canonical forward axis.
    let per_eye = spec.eye_count / 2;
    if per_eye == 0 {
        return Err(Error::Scene("eye stream needs at least two Gaussians".into()));
    }
    let counts = ring_counts(per_eye);
    let cap = spec.pupil_cap_deg;
    let mut eye_pos = Vec::new();
    let mut eye_assignment = Vec::new();
    let mut pupil_indices = Vec::new();
    let mut eye_feat = Vec::new();
    let forward = geometry::FORWARD_AXIS;
    for (eye_idx, center) in spec.eye_centers.iter().enumerate() {
        let n_this = if eye_idx == 0 {
            per_eye
        } else {
            spec.eye_count - per_eye
        };
        let counts = if n_this == per_eye {
            counts.clone()
        } else {
            ring_counts(n_this)
        };
        for (ring, &m) in counts.iter().enumerate() {
            let (theta_deg, _) = EYE_RINGS[ring];
            let theta = theta_deg.to_radians();
            for j in 0..m {
                let phi = std::f64::consts::TAU * j as f64 / m as f64 + ring as f64 * 0.5;
                // Direction at polar angle theta from the forward axis.
                let d = [
                    theta.sin() * phi.cos(),
                    theta.sin() * phi.sin(),
                    forward[2] * theta.cos(),
                ];
                let d = geometry::normalize3(d);
                let p = geometry::add3(*center, geometry::scale3(d, spec.eye_radius));
                let is_pupil = theta_deg <= cap;
                if is_pupil {
                    pupil_indices.push(eye_pos.len());
                }
                eye_pos.push(p);
                eye_assignment.push(eye_idx);
                let color = if is_pupil {
                    [0.05, 0.05, 0.06]
                } else {
                    [0.93, 0.93, 0.92]
                };
                let mut f = vec![0.0; feature_dim];
                f[..3].copy_from_slice(&color);
                f[3] = 1.0;
                eye_feat.extend_from_slice(&f);
            }
        }
    }
    let n_eye = eye_pos.len();
    let eye_nn = mean_nn_distance(&eye_pos);
    let eye = CanonicalAttrs {
        positions: Tensor::from_vec(&[n_eye, 3], eye_pos.iter().flatten().copied().collect())?,
        features: Tensor::from_vec(&[n_eye, feature_dim], eye_feat)?,
        rotations: Tensor::from_fn(&[n_eye, 4], |i| if i % 4 == 0 { 1.0 } else { 0.0 }),
        log_scales: Tensor::filled(&[n_eye, 1], (0.7 * eye_nn).ln()),
        opacity_logits: Tensor::zeros(&[n_eye]),
        isotropic: true,
    };

    let mut all_landmarks = spec.expr_landmarks.clone();
    all_landmarks.extend_from_slice(&spec.pose_landmarks);
    let landmark_sigma = mean_nn_distance(&all_landmarks);

    Ok(CanonicalInit {
        face,
        eye,
        eye_assignment,
        expr_landmarks: spec.expr_landmarks.clone(),
        pose_landmarks: spec.pose_landmarks.clone(),
        landmark_sigma,
        pupil_indices,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_counts_and_opacity() {
        let spec = SceneSpec::default();
        let init = init_canonical(&spec, 8).unwrap();
        assert_eq!(init.face.positions.shape(), &[512, 3]);
        assert_eq!(init.eye.positions.shape(), &[128, 3]);
        // Opacity logits zero: squashed opacity one half.
        assert!(init.face.opacity_logits.data().iter().all(|v| *v == 0.0));
        assert!(init.eye.log_scales.shape() == &[128, 1]);
    }

    #[test]
    fn zero_eye_gaussians_rejected() {
        let spec = SceneSpec {
            eye_count: 0,
            ..SceneSpec::default()
        };
        assert!(init_canonical(&spec, 8).is_err());
    }

    #[test]
    fn overlapping_eyes_rejected() {
        let mut spec = SceneSpec::default();
        spec.eye_centers = [[-0.1, -0.22, -0.78], [0.1, -0.22, -0.78]];
        assert!(init_canonical(&spec, 8).is_err());
    }

    #[test]
    fn pupil_cap_centered_on_forward_axis() {
        let spec = SceneSpec::default();
        let init = init_canonical(&spec, 8).unwrap();
        let pos = init.eye.positions.data();
        for (eye_idx, center) in spec.eye_centers.iter().enumerate() {
            let mut centroid = [0.0; 3];
            let mut count = 0;
            for &gi in &init.pupil_indices {
                if init.eye_assignment[gi] != eye_idx {
                    continue;
                }
                for k in 0..3 {
                    centroid[k] += pos[gi * 3 + k];
                }
                count += 1;
            }
            assert!(count >= 3, "pupil cap has {count} Gaussians");
            for c in centroid.iter_mut() {
                *c /= count as f64;
            }
            let dir = geometry::normalize3(geometry::sub3(centroid, *center));
            let (pitch, yaw) = geometry::direction_to_pitch_yaw(dir);
            assert!(pitch.to_degrees().abs() < 0.5, "pitch {}", pitch.to_degrees());
            assert!(yaw.to_degrees().abs() < 0.5, "yaw {}", yaw.to_degrees());
        }
    }

    #[test]
    fn face_positions_avoid_sockets() {
        let spec = SceneSpec::default();
        let init = init_canonical(&spec, 8).unwrap();
        let pos = init.face.positions.data();
        for p in pos.chunks(3) {
            for c in &spec.eye_centers {
                let d = geometry::norm3(geometry::sub3([p[0], p[1], p[2]], *c));
                assert!(d >= spec.eye_radius * 1.15 - 1e-12);
            }
        }
    }
}
