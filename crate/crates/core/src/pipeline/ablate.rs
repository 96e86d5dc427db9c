//! Ablation harness: trains the full model and single-component removals
//! with matched seeds and reports evaluation metrics side by side.

use crate::error::Result;
use crate::pipeline::config::TrainConfig;
use crate::pipeline::eval::{evaluate, EvalSummary};
use crate::pipeline::metrics::MetricsWriter;
use crate::pipeline::train::{prepare, train_end_to_end, train_stage_init, TrainArtifacts};
use crate::renderer::SamplerKind;
use crate::scene::Split;

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub label: String,
    /// Gaze error on the held-out intermediate-angle subset, degrees.
    pub gaze_deg: f64,
    /// Pose error on the test split, degrees.
    pub pose_deg: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub perceptual: f64,
}

#[derive(Clone, Debug)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
    /// Deltas of each variant against the full model: positive means worse
    /// than the full model on that error metric.
    pub gaze_delta_no_ws: f64,
    pub pose_delta_no_ortho: f64,
}

impl AblationTable {
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<18} {:>10} {:>10} {:>8} {:>7} {:>8}\n",
            "variant", "gaze(deg)", "pose(deg)", "psnr", "ssim", "perc"
        ));
        for r in &self.rows {
            out.push_str(&format!(
                "{:<18} {:>10.3} {:>10.3} {:>8.2} {:>7.3} {:>8.4}\n",
                r.label, r.gaze_deg, r.pose_deg, r.psnr, r.ssim, r.perceptual
            ));
        }
        out.push_str(&format!(
            "delta gaze (no weak supervision vs full): {:+.3} deg\n",
            self.gaze_delta_no_ws
        ));
        out.push_str(&format!(
            "delta pose (no orthogonality vs full):    {:+.3} deg\n",
            self.pose_delta_no_ortho
        ));
        out
    }
}

/// Train and evaluate one variant from scratch (matched seed via config).
pub fn run_variant(cfg: &TrainConfig, label: &str, out_dir: &std::path::Path) -> Result<(AblationRow, TrainArtifacts)> {
    let mut art = prepare(cfg)?;
    train_stage_init(&mut art)?;
    let metrics_path = out_dir.join(format!("metrics_{}.csv", label.replace(' ', "_")));
    let mut metrics = MetricsWriter::create(&metrics_path)?;
    train_end_to_end(&mut art, &mut metrics)?;
    let row = summarize(label, &art)?;
    Ok((row, art))
}

/// As [`run_variant`], but reusing an already pre-fit estimator. The frozen
/// estimator does not depend on the feature toggles, so ablation variants
/// share it; datasets are regenerated deterministically from the config.
pub fn run_variant_with_estimator(
    cfg: &TrainConfig,
    estimator: crate::scene::GazeEstimator,
    label: &str,
    out_dir: &std::path::Path,
) -> Result<(AblationRow, TrainArtifacts)> {
    let mut art = crate::pipeline::train::prepare_with_estimator(cfg, estimator)?;
    train_stage_init(&mut art)?;
    let metrics_path = out_dir.join(format!("metrics_{}.csv", label.replace(' ', "_")));
    let mut metrics = MetricsWriter::create(&metrics_path)?;
    train_end_to_end(&mut art, &mut metrics)?;
    let row = summarize(label, &art)?;
    Ok((row, art))
}

/// Evaluate a trained run into an ablation row.
pub fn summarize(label: &str, art: &TrainArtifacts) -> Result<AblationRow> {
    let inter = evaluate(&art.model, &art.dataset, Split::Intermediate, SamplerKind::Full)?;
    let test = evaluate(&art.model, &art.dataset, Split::Test, SamplerKind::Full)?;
    Ok(AblationRow {
        label: label.to_string(),
        gaze_deg: inter.gaze_deg,
        pose_deg: test.pose_deg,
        psnr: test.psnr,
        ssim: test.ssim,
        perceptual: test.perceptual,
    })
}

/// Full ablation: the complete model plus variants with the orthogonality
/// loss and weak supervision disabled, trained with identical seeds.
pub fn ablate(cfg: &TrainConfig, out_dir: &std::path::Path) -> Result<AblationTable> {
    std::fs::create_dir_all(out_dir)?;
    let (full_row, art) = run_variant(cfg, "full", out_dir)?;
    ablate_against_full(cfg, out_dir, full_row, &art.model.estimator)
}

/// Ablation with a precomputed full-model row (the full run can be shared
/// with other consumers). Variants reuse the frozen estimator.
pub fn ablate_against_full(
    cfg: &TrainConfig,
    out_dir: &std::path::Path,
    full_row: AblationRow,
    estimator: &crate::scene::GazeEstimator,
) -> Result<AblationTable> {
    std::fs::create_dir_all(out_dir)?;
    let mut no_ortho_cfg = cfg.clone();
    no_ortho_cfg.toggles.ortho_loss = false;
    let (no_ortho_row, _) =
        run_variant_with_estimator(&no_ortho_cfg, estimator.clone(), "no_ortho", out_dir)?;

    let mut no_ws_cfg = cfg.clone();
    no_ws_cfg.toggles.weak_supervision = false;
    let (no_ws_row, _) =
        run_variant_with_estimator(&no_ws_cfg, estimator.clone(), "no_weak_sup", out_dir)?;

    let gaze_delta_no_ws = no_ws_row.gaze_deg - full_row.gaze_deg;
    let pose_delta_no_ortho = no_ortho_row.pose_deg - full_row.pose_deg;
    Ok(AblationTable {
        rows: vec![full_row, no_ortho_row, no_ws_row],
        gaze_delta_no_ws,
        pose_delta_no_ortho,
    })
}

/// One more summary used by the evaluation CLI.
pub fn eval_summary_text(label: &str, s: &EvalSummary) -> String {
    format!(
        "{label}: psnr {:.2} dB, ssim {:.3}, perceptual {:.4}, gaze {:.3} deg, pose {:.3} deg over {} samples",
        s.psnr, s.ssim, s.perceptual, s.gaze_deg, s.pose_deg, s.rows
    )
}
