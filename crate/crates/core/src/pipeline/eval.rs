//! Evaluation and redirection.

use crate::error::{Error, Result};
use crate::gaussians::ControlCodes;
use crate::losses::{self, angular_error};
use crate::numerics::rng::RngStream;
use crate::numerics::tape::Tape;
use crate::numerics::tensor::Tensor;
use crate::pipeline::model::GazeModel;
use crate::renderer::SamplerKind;
use crate::sampler::GazeAngle;
use crate::scene::{oracle_pose, pose_error_deg, Dataset, Split};

#[derive(Clone, Debug, Default)]
pub struct EvalSummary {
    pub psnr: f64,
    pub ssim: f64,
    pub perceptual: f64,
    /// Mean estimator gaze error against the commanded angle, degrees.
    pub gaze_deg: f64,
    /// Mean oracle-recovered head-orientation error, degrees.
    pub pose_deg: f64,
    pub rows: usize,
}

/// Redirect every sample of `split` to its own codes and compare against the
/// ground truth.
pub fn evaluate(
    model: &GazeModel,
    dataset: &Dataset,
    split: Split,
    sampler: SamplerKind,
) -> Result<EvalSummary> {
    let idx = dataset.indices(split);
    if idx.is_empty() {
        return Err(Error::Train(format!("empty split {split:?}")));
    }
    let (h, w) = (dataset.height, dataset.width);
    let rng = RngStream::new(model.cfg.seed, 0).derive("eval");
    let mut summary = EvalSummary::default();
    let mut gaze_count = 0usize;
    for (k, i) in idx.iter().enumerate() {
        let s = &dataset.samples[*i];
        let codes = ControlCodes::new(
            s.gaze,
            s.pose_rot,
            s.pose_trans,
            s.tau.clone(),
            vec![0.0; model.cfg.dit.shape_dim],
        )?;
        let img = model.render_codes(&codes, sampler, &rng.derive_index(k as u64))?;
        summary.psnr += losses::psnr(&img, &s.image);
        summary.ssim += losses::ssim_host(&img, &s.image, h, w, 3)?;
        {
            let tape = Tape::new();
            let a = tape.constant(Tensor::from_vec(&[h, w, 3], img.clone())?);
            let b = tape.constant(Tensor::from_vec(&[h, w, 3], s.image.clone())?);
            summary.perceptual += model.perceptual.distance(&a, &b)?.scalar();
        }
        if let Ok(est) = model.estimator.estimate(&img) {
            summary.gaze_deg += angular_error(est, s.gaze);
            gaze_count += 1;
        }
        let rec = oracle_pose(&img, &model.spec.camera, &model.spec, s.pose_trans);
        summary.pose_deg += pose_error_deg(rec, &s.pose_matrix());
        summary.rows += 1;
    }
    let n = summary.rows as f64;
    summary.psnr /= n;
    summary.ssim /= n;
    summary.perceptual /= n;
    summary.gaze_deg /= gaze_count.max(1) as f64;
    summary.pose_deg /= n;
    Ok(summary)
}

/// Render the fitted avatar with the requested gaze (and optional pose),
/// using full diffusion sampling by default.
pub fn redirect(
    model: &GazeModel,
    dataset: &Dataset,
    sample_idx: usize,
    target_gaze: GazeAngle,
    target_pose: Option<[f64; 3]>,
    sampler: SamplerKind,
) -> Result<Vec<f64>> {
    let r_gaze = model.cfg.sampler.r_gaze;
    if target_gaze.yaw.abs() > r_gaze || target_gaze.pitch.abs() > r_gaze {
        return Err(Error::InvalidCode(format!(
            "target gaze ({:.1}, {:.1}) deg outside +/-{:.1} deg",
            target_gaze.yaw_deg(),
            target_gaze.pitch_deg(),
            r_gaze.to_degrees()
        )));
    }
    let s = dataset
        .samples
        .get(sample_idx)
        .ok_or_else(|| Error::Config(format!("sample index {sample_idx} out of range")))?;
    let codes = ControlCodes::new(
        target_gaze,
        target_pose.unwrap_or(s.pose_rot),
        s.pose_trans,
        s.tau.clone(),
        vec![0.0; model.cfg.dit.shape_dim],
    )?;
    let rng = RngStream::new(model.cfg.seed, 0).derive("redirect");
    model.render_codes(&codes, sampler, &rng)
}
