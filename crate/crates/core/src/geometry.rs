//! Shared rotation and direction math.
//!
//! Conventions: right-handed world with x lateral, y vertical (down in image
//! space), z depth. The canonical gaze forward axis points toward the default
//! camera, i.e. along -z. Pitch rotates about the lateral axis and is applied
//! after yaw about the vertical axis.

pub type Mat3 = [[f64; 3]; 3];

pub const FORWARD_AXIS: [f64; 3] = [0.0, 0.0, -1.0];

pub fn identity() -> Mat3 {
    [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]
}

pub fn rot_x(a: f64) -> Mat3 {
    let (s, c) = a.sin_cos();
    [[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]]
}

pub fn rot_y(a: f64) -> Mat3 {
    let (s, c) = a.sin_cos();
    [[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]]
}

pub fn rot_z(a: f64) -> Mat3 {
    let (s, c) = a.sin_cos();
    [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]
}

pub fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            for k in 0..3 {
                out[i][j] += a[i][k] * b[k][j];
            }
        }
    }
    out
}

pub fn mat_transpose(a: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = a[j][i];
        }
    }
    out
}

pub fn mat_vec(a: &Mat3, v: [f64; 3]) -> [f64; 3] {
    [
        a[0][0] * v[0] + a[0][1] * v[1] + a[0][2] * v[2],
        a[1][0] * v[0] + a[1][1] * v[1] + a[1][2] * v[2],
        a[2][0] * v[0] + a[2][1] * v[1] + a[2][2] * v[2],
    ]
}

pub fn dot3(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn norm3(v: [f64; 3]) -> f64 {
    dot3(v, v).sqrt()
}

pub fn normalize3(v: [f64; 3]) -> [f64; 3] {
    let n = norm3(v);
    [v[0] / n, v[1] / n, v[2] / n]
}

pub fn sub3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn add3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub fn scale3(a: [f64; 3], s: f64) -> [f64; 3] {
    [a[0] * s, a[1] * s, a[2] * s]
}

pub fn cross3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

/// Gaze rotation: pitch about x applied after yaw about y.
pub fn gaze_rotation(pitch: f64, yaw: f64) -> Mat3 {
    mat_mul(&rot_x(pitch), &rot_y(yaw))
}

/// Unit gaze direction for pitch-yaw, in the head frame.
pub fn gaze_direction(pitch: f64, yaw: f64) -> [f64; 3] {
    mat_vec(&gaze_rotation(pitch, yaw), FORWARD_AXIS)
}

/// Invert [`gaze_direction`] for |yaw| < pi/2 domains.
///
/// With d = (-sin yaw, sin pitch cos yaw, -cos pitch cos yaw), pitch follows
/// from the (y, z) pair (the cos-yaw factor cancels) and yaw from x against
/// the remaining magnitude.
pub fn direction_to_pitch_yaw(d: [f64; 3]) -> (f64, f64) {
    let d = normalize3(d);
    let pitch = d[1].atan2(-d[2]);
    let yaw = (-d[0]).atan2((d[1] * d[1] + d[2] * d[2]).sqrt());
    (pitch, yaw)
}

/// Head pose rotation from three angles: Rx(rx) . Ry(ry) . Rz(rz).
pub fn pose_rotation(r: [f64; 3]) -> Mat3 {
    mat_mul(&rot_x(r[0]), &mat_mul(&rot_y(r[1]), &rot_z(r[2])))
}

/// Rotation angle of R in radians, from the trace.
pub fn rotation_angle(r: &Mat3) -> f64 {
    let tr = r[0][0] + r[1][1] + r[2][2];
    ((tr - 1.0) / 2.0).clamp(-1.0, 1.0).acos()
}

/// Relative angle between two rotations, radians.
pub fn rotation_distance(a: &Mat3, b: &Mat3) -> f64 {
    rotation_angle(&mat_mul(a, &mat_transpose(b)))
}

/// Angle between two directions in degrees.
pub fn angle_between_deg(a: [f64; 3], b: [f64; 3]) -> f64 {
    let c = (dot3(normalize3(a), normalize3(b))).clamp(-1.0, 1.0);
    c.acos().to_degrees()
}

/// Ray-sphere intersection: smallest positive t along a unit `dir`.
pub fn ray_sphere(origin: [f64; 3], dir: [f64; 3], center: [f64; 3], radius: f64) -> Option<f64> {
    let oc = sub3(origin, center);
    let b = dot3(oc, dir);
    let c = dot3(oc, oc) - radius * radius;
    let disc = b * b - c;
    if disc < 0.0 {
        return None;
    }
    let sq = disc.sqrt();
    let t0 = -b - sq;
    let t1 = -b + sq;
    if t0 > 1e-9 {
        Some(t0)
    } else if t1 > 1e-9 {
        Some(t1)
    } else {
        None
    }
}

/// Ray-ellipsoid intersection in the ellipsoid's canonical frame.
pub fn ray_ellipsoid(origin: [f64; 3], dir: [f64; 3], axes: [f64; 3]) -> Option<f64> {
    let o = [origin[0] / axes[0], origin[1] / axes[1], origin[2] / axes[2]];
    let d = [dir[0] / axes[0], dir[1] / axes[1], dir[2] / axes[2]];
    let a = dot3(d, d);
    let b = dot3(o, d);
    let c = dot3(o, o) - 1.0;
    let disc = b * b - a * c;
    if disc < 0.0 {
        return None;
    }
    let sq = disc.sqrt();
    let t0 = (-b - sq) / a;
    let t1 = (-b + sq) / a;
    if t0 > 1e-9 {
        Some(t0)
    } else if t1 > 1e-9 {
        Some(t1)
    } else {
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gaze_zero_is_identity() {
        let r = gaze_rotation(0.0, 0.0);
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((r[i][j] - want).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn quarter_turn_yaw_maps_forward_to_lateral() {
        let r = gaze_rotation(0.0, std::f64::consts::FRAC_PI_2);
        let d = mat_vec(&r, FORWARD_AXIS);
        assert!((d[0] + 1.0).abs() < 1e-12);
        assert!(d[1].abs() < 1e-12);
        assert!(d[2].abs() < 1e-12);
    }

    #[test]
    fn rotation_is_orthonormal_and_direction_inverts() {
        let rng = crate::numerics::rng::RngStream::new(2, 2);
        for i in 0..100 {
            let pitch = rng.uniform_in_at(2 * i, -1.2, 1.2);
            let yaw = rng.uniform_in_at(2 * i + 1, -1.4, 1.4);
            let r = gaze_rotation(pitch, yaw);
            let rt_r = mat_mul(&mat_transpose(&r), &r);
            for a in 0..3 {
                for b in 0..3 {
                    let want = if a == b { 1.0 } else { 0.0 };
                    assert!((rt_r[a][b] - want).abs() < 1e-10);
                }
            }
            let det = r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1])
                - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
                + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0]);
            assert!((det - 1.0).abs() < 1e-10);

            let d = gaze_direction(pitch, yaw);
            let (p2, y2) = direction_to_pitch_yaw(d);
            assert!((p2 - pitch).abs() < 1e-9, "pitch {pitch} vs {p2}");
            assert!((y2 - yaw).abs() < 1e-9);
        }
    }

    #[test]
    fn rotation_distance_of_known_pair() {
        let a = rot_y(0.3);
        let b = rot_y(-0.2);
        assert!((rotation_distance(&a, &b) - 0.5).abs() < 1e-12);
    }
}
