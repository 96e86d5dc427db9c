//! Training objectives: composite per-region image loss, angular gaze
//! redirection loss through the frozen estimator, the orthogonality
//! constraint on captured representations, and their weighted total.

mod perceptual;
mod ssim;

pub use perceptual::PerceptualNet;
pub use ssim::{ssim, ssim_host};

use crate::error::{Error, Result};
use crate::geometry;
use crate::numerics::ops;
use crate::numerics::tape::{Tape, Var};
use crate::numerics::tensor::Tensor;
use crate::sampler::GazeAngle;
use crate::scene::GazeEstimator;

#[derive(Clone, Debug)]
pub struct LossWeights {
    pub lambda_ssim: f64,
    pub lambda_perc: f64,
    pub lambda_image: f64,
    pub lambda_gaze: f64,
    pub lambda_ortho: f64,
    pub w1: f64,
    pub w2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_ssim: 0.2,
            lambda_perc: 0.1,
            lambda_image: 1.0,
            lambda_gaze: 0.1,
            lambda_ortho: 0.01,
            w1: 1.0,
            w2: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.lambda_ssim,
            self.lambda_perc,
            self.lambda_image,
            self.lambda_gaze,
            self.lambda_ortho,
            self.w1,
            self.w2,
        ];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config("loss weights must be finite and >= 0".into()));
        }
        Ok(())
    }
}

/// Per-region image term breakdown.
#[derive(Clone, Debug, Default)]
pub struct RegionTerms {
    pub l1: f64,
    pub ssim_term: f64,
    pub perceptual: f64,
}

#[derive(Clone, Debug, Default)]
pub struct LossReport {
    pub face: RegionTerms,
    pub eyes: RegionTerms,
    pub full: RegionTerms,
    /// Eye region skipped because its mask was empty.
    pub eyes_skipped: bool,
    pub image_total: f64,
    /// Raw angular error in degrees.
    pub gaze_degrees: f64,
    /// Post-masking loss contribution.
    pub gaze_value: f64,
    /// Count of estimator readings masked to zero.
    pub gaze_masked: usize,
    pub ortho_value: f64,
    /// Orthogonality inputs that were zero vectors.
    pub ortho_flagged: usize,
    pub epsilon_value: f64,
    pub total: f64,
}

/// Mask bounding box, padded to at least `min_size` and clamped to bounds.
fn mask_bbox(mask: &[u8], h: usize, w: usize, min_size: usize) -> Option<(usize, usize, usize, usize)> {
    let mut y0 = usize::MAX;
    let mut y1 = 0usize;
    let mut x0 = usize::MAX;
    let mut x1 = 0usize;
    let mut any = false;
    for y in 0..h {
        for x in 0..w {
            if mask[y * w + x] != 0 {
                any = true;
                y0 = y0.min(y);
                y1 = y1.max(y);
                x0 = x0.min(x);
                x1 = x1.max(x);
            }
        }
    }
    if !any {
        return None;
    }
    let grow = |lo: usize, hi: usize, limit: usize| -> (usize, usize) {
        let size = hi - lo + 1;
        if size >= min_size {
            return (lo, hi);
        }
        let need = min_size - size;
        let lo2 = lo.saturating_sub(need / 2 + need % 2);
        let hi2 = (hi + need / 2).min(limit - 1);
        // Push the remainder to the other side when clamped.
        let size2 = hi2 - lo2 + 1;
        if size2 >= min_size {
            (lo2, hi2)
        } else if lo2 == 0 {
            (0, (min_size - 1).min(limit - 1))
        } else {
            (limit - min_size, limit - 1)
        }
    };
    let (y0, y1) = grow(y0, y1, h);
    let (x0, x1) = grow(x0, x1, w);
    Some((y0, y1, x0, x1))
}

fn crop(img: &Var, bbox: (usize, usize, usize, usize)) -> Result<Var> {
    let (y0, y1, x0, x1) = bbox;
    let rows = ops::narrow(img, 0, y0, y1 - y0 + 1)?;
    ops::narrow(&rows, 1, x0, x1 - x0 + 1)
}

/// Masked mean absolute difference over all channels.
fn masked_l1(pred: &Var, gt: &Var, mask: &[u8]) -> Result<Var> {
    let dims = pred.dims();
    let (h, w, c) = (dims[0], dims[1], dims[2]);
    let count: usize = mask.iter().map(|m| *m as usize).sum();
    if count == 0 {
        return Err(Error::domain("masked_l1", "empty mask"));
    }
    let mut mexp = vec![0.0; h * w * c];
    for p in 0..h * w {
        if mask[p] != 0 {
            for ch in 0..c {
                mexp[p * c + ch] = 1.0;
            }
        }
    }
    let tape = pred.tape();
    let mvar = tape.constant(Tensor::from_vec(&[h, w, c], mexp)?);
    let diff = ops::abs(&ops::sub(pred, gt)?);
    let masked = ops::mul(&diff, &mvar)?;
    Ok(ops::mul_scalar(&ops::sum(&masked)?, 1.0 / (count * c) as f64))
}

/// One region's composite term on the tape.
fn region_loss(
    pred: &Var,
    gt: &Var,
    mask: &[u8],
    weights: &LossWeights,
    perceptual_net: &PerceptualNet,
) -> Result<(Var, RegionTerms)> {
    let dims = pred.dims();
    let (h, w) = (dims[0], dims[1]);
    let bbox = mask_bbox(mask, h, w, 16).ok_or_else(|| Error::domain("region_loss", "empty mask"))?;
    let l1 = masked_l1(pred, gt, mask)?;
    let pred_crop = crop(pred, bbox)?;
    let gt_crop = crop(gt, bbox)?;
    let ssim_val = ssim(&pred_crop, &gt_crop)?;
    let one_minus = ops::add_scalar(&ops::neg(&ssim_val), 1.0);
    let perc = perceptual_net.distance(&pred_crop, &gt_crop)?;
    let term = ops::add(
        &l1,
        &ops::add(
            &ops::mul_scalar(&one_minus, weights.lambda_ssim),
            &ops::mul_scalar(&perc, weights.lambda_perc),
        )?,
    )?;
    let report = RegionTerms {
        l1: l1.scalar(),
        ssim_term: one_minus.scalar(),
        perceptual: perc.scalar(),
    };
    Ok((term, report))
}

/// Composite image loss over face-only, eyes, and full-head regions.
/// An empty eye mask skips the eye term and flags the report.
pub fn image_loss(
    pred: &Var,
    gt: &Var,
    face_mask: &[u8],
    eye_mask: &[u8],
    weights: &LossWeights,
    perceptual_net: &PerceptualNet,
    report: &mut LossReport,
) -> Result<Var> {
    weights.validate()?;
    if pred.shape().as_slice() != gt.shape().as_slice() {
        return Err(Error::shape(
            "image_loss",
            format!("{:?}", gt.shape()),
            format!("{:?}", pred.shape()),
        ));
    }
    let union: Vec<u8> = face_mask
        .iter()
        .zip(eye_mask)
        .map(|(f, e)| *f | *e)
        .collect();
    let (face_term, face_rep) = region_loss(pred, gt, face_mask, weights, perceptual_net)?;
    report.face = face_rep;
    let mut total = face_term;
    if eye_mask.iter().any(|m| *m != 0) {
        let (eye_term, eye_rep) = region_loss(pred, gt, eye_mask, weights, perceptual_net)?;
        report.eyes = eye_rep;
        total = ops::add(&total, &eye_term)?;
    } else {
        report.eyes_skipped = true;
    }
    let (full_term, full_rep) = region_loss(pred, gt, &union, weights, perceptual_net)?;
    report.full = full_rep;
    total = ops::add(&total, &full_term)?;
    report.image_total = total.scalar();
    Ok(total)
}

/// Angle between the 3D gaze directions of two pitch-yaw pairs, degrees.
pub fn angular_error(g1: GazeAngle, g2: GazeAngle) -> f64 {
    let d1 = geometry::gaze_direction(g1.pitch, g1.yaw);
    let d2 = geometry::gaze_direction(g2.pitch, g2.yaw);
    geometry::angle_between_deg(d1, d2)
}

/// Differentiable angular error in degrees between predicted (pitch, yaw) on
/// the tape and a fixed target angle.
pub fn angular_error_graph(pred_pitch_yaw: &Var, target: GazeAngle) -> Result<Var> {
    let pitch = ops::narrow(pred_pitch_yaw, 0, 0, 1)?;
    let yaw = ops::narrow(pred_pitch_yaw, 0, 1, 1)?;
    // d = (-sin yaw, sin pitch cos yaw, -cos pitch cos yaw)
    let sy = ops::sin(&yaw);
    let cy = ops::cos(&yaw);
    let sp = ops::sin(&pitch);
    let cp = ops::cos(&pitch);
    let dx = ops::neg(&sy);
    let dy = ops::mul(&sp, &cy)?;
    let dz = ops::neg(&ops::mul(&cp, &cy)?);
    let t = geometry::gaze_direction(target.pitch, target.yaw);
    let dot = ops::add(
        &ops::add(
            &ops::mul_scalar(&dx, t[0]),
            &ops::mul_scalar(&dy, t[1]),
        )?,
        &ops::mul_scalar(&dz, t[2]),
    )?;
    let angle = ops::acos(&dot);
    Ok(ops::mul_scalar(&angle, 180.0 / std::f64::consts::PI))
}

/// Gaze redirection loss: angular error between the frozen estimator's
/// reading of the rendered image and the target gaze, differentiable through
/// the rendered pixels. A degenerate estimator reading masks the term to
/// zero and increments the report counter.
pub fn gaze_loss(
    rendered: &Var,
    target: GazeAngle,
    estimator: &GazeEstimator,
    report: &mut LossReport,
) -> Result<Var> {
    let tape = rendered.tape().clone();
    let binds = estimator.store.bind(&tape, false);
    let pred = estimator.forward(&tape, &binds, rendered)?;
    let vals = pred.value();
    let degenerate = !vals.iter().all(|v| v.is_finite()) || vals.iter().any(|v| v.abs() > 1.4);
    if degenerate {
        report.gaze_masked += 1;
        report.gaze_degrees = f64::NAN;
        return Ok(tape.scalar_const(0.0));
    }
    let err = angular_error_graph(&pred, target)?;
    let err = ops::reshape(&err, &[])?;
    report.gaze_degrees = err.scalar();
    Ok(err)
}

/// Orthogonality constraint: w1 |cos(v_gaze, v_expr)| + w2 |cos(v_pose, v_expr)|.
/// Zero-norm inputs contribute zero and are flagged.
pub fn ortho_loss(
    v_gaze: &Var,
    v_pose: &Var,
    v_expr: &Var,
    w1: f64,
    w2: f64,
    report: &mut LossReport,
) -> Result<Var> {
    let tape = v_gaze.tape().clone();
    let norm_sq = |v: &Var| -> f64 { v.value().iter().map(|x| x * x).sum::<f64>() };
    let cos_abs = |a: &Var, b: &Var| -> Result<Var> {
        let dot = ops::dot(a, b)?;
        let na = ops::add_scalar(&ops::sum(&ops::square(a)?)?, 1e-16);
        let nb = ops::add_scalar(&ops::sum(&ops::square(b)?)?, 1e-16);
        let denom = ops::add_scalar(&ops::sqrt(&ops::mul(&na, &nb)?), 1e-8);
        Ok(ops::abs(&ops::div(&dot, &denom)?))
    };
    let expr_zero = norm_sq(v_expr).sqrt() < 1e-8;
    let mut terms = Vec::new();
    for (v, w) in [(v_gaze, w1), (v_pose, w2)] {
        if expr_zero || norm_sq(v).sqrt() < 1e-8 {
            report.ortho_flagged += 1;
            terms.push(tape.scalar_const(0.0));
        } else {
            terms.push(ops::mul_scalar(&cos_abs(v, v_expr)?, w));
        }
    }
    let out = ops::add(&terms[0], &terms[1])?;
    report.ortho_value = out.scalar();
    Ok(out)
}

/// Weighted total of the three loss components.
pub fn total_loss(
    image: Option<&Var>,
    gaze: Option<&Var>,
    ortho: Option<&Var>,
    weights: &LossWeights,
    tape: &Tape,
) -> Result<Var> {
    let mut total = tape.scalar_const(0.0);
    if let Some(v) = image {
        total = ops::add(&total, &ops::mul_scalar(v, weights.lambda_image))?;
    }
    if let Some(v) = gaze {
        total = ops::add(&total, &ops::mul_scalar(v, weights.lambda_gaze))?;
    }
    if let Some(v) = ortho {
        total = ops::add(&total, &ops::mul_scalar(v, weights.lambda_ortho))?;
    }
    Ok(total)
}

/// Peak signal-to-noise ratio in dB of two images in [0, 1], capped at the
/// identical-image convention of 60 dB.
pub fn psnr(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mse: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.len() as f64;
    if mse <= 1e-12 {
        return 60.0;
    }
    (10.0 * (1.0 / mse).log10()).min(60.0)
}
