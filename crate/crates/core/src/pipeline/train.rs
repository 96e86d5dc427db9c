//! Two-stage training: autoencoder pre-fit plus neutral Gaussian fit, then
//! joint end-to-end training with weak gaze supervision and the
//! orthogonality constraint.

use std::path::Path;
use std::time::Instant;

use crate::error::{Error, Result};
use crate::gaussians::ControlCodes;
use crate::losses::{self, LossReport};
use crate::numerics::ops;
use crate::numerics::rng::RngStream;
use crate::numerics::tape::Tape;
use crate::numerics::tensor::Tensor;
use crate::params::{step_decay_lr, Adam};
use crate::pipeline::checkpoint::Checkpoint;
use crate::pipeline::config::TrainConfig;
use crate::pipeline::metrics::{MetricsRow, MetricsWriter};
use crate::pipeline::model::GazeModel;
use crate::renderer::SamplerKind;
use crate::sampler::{self, GazeAngle};
use crate::scene::{
    generate_dataset, render_frame, train_estimator, Dataset, DatasetConfig, EstimatorConfig,
    GazeEstimator, Split,
};

/// Everything a run owns: the model, its data, optimizer state, and cached
/// gaze targets.
pub struct TrainArtifacts {
    pub model: GazeModel,
    pub dataset: Dataset,
    pub adam: Adam,
    pub step: u64,
    /// Estimator reading of each ground-truth frame (pair targets).
    pub gaze_targets: Vec<Option<GazeAngle>>,
}

fn verbose() -> bool {
    std::env::var("GAZESPLAT_VERBOSE").is_ok()
}

/// Build artifacts around an externally supplied (already frozen) estimator;
/// used by tests that exercise pipeline mechanics without the pre-fit cost.
pub fn prepare_with_estimator(
    cfg: &TrainConfig,
    estimator: GazeEstimator,
) -> Result<TrainArtifacts> {
    cfg.validate()?;
    let spec = cfg.scene_spec();
    let root = RngStream::new(cfg.seed, 0);
    let dataset = generate_dataset(&spec, &cfg.data, &root.derive("dataset"))?;
    let model = GazeModel::new(cfg.clone(), estimator)?;
    let adam = Adam::new(&model.store);
    let mut gaze_targets = Vec::with_capacity(dataset.len());
    for s in &dataset.samples {
        gaze_targets.push(model.estimator.estimate(&s.image).ok());
    }
    Ok(TrainArtifacts {
        model,
        dataset,
        adam,
        step: 0,
        gaze_targets,
    })
}

/// Generate datasets, pre-fit the frozen gaze estimator, and build the model.
pub fn prepare(cfg: &TrainConfig) -> Result<TrainArtifacts> {
    cfg.validate()?;
    let spec = cfg.scene_spec();
    let root = RngStream::new(cfg.seed, 0);

    let dataset = generate_dataset(&spec, &cfg.data, &root.derive("dataset"))?;

    // Estimator pre-fit on a gaze-focused split with moderate pose variation.
    let est_data_cfg = DatasetConfig {
        n: cfg.estimator_n,
        gaze_grid: None,
        with_intermediate: false,
        pose_rot_deg: 8.0,
        pose_trans_range: 0.06,
        tau_dim: cfg.d_tau,
        ..cfg.data.clone()
    };
    let est_dataset = generate_dataset(&spec, &est_data_cfg, &root.derive("est_dataset"))?;
    let est_cfg = EstimatorConfig {
        steps: cfg.estimator_steps,
        ..Default::default()
    };
    let t0 = Instant::now();
    let estimator = train_estimator(&est_dataset, est_cfg, &root.derive("estimator"))?;
    if verbose() {
        let val = estimator.mean_angular_error(&est_dataset, Split::Val)?;
        eprintln!(
            "estimator pre-fit: val {val:.2} deg in {:.0}s",
            t0.elapsed().as_secs_f64()
        );
    }

    let model = GazeModel::new(cfg.clone(), estimator)?;
    let adam = Adam::new(&model.store);

    let mut gaze_targets = Vec::with_capacity(dataset.len());
    for s in &dataset.samples {
        gaze_targets.push(model.estimator.estimate(&s.image).ok());
    }

    Ok(TrainArtifacts {
        model,
        dataset,
        adam,
        step: 0,
        gaze_targets,
    })
}

/// Ground-truth image as a pseudo feature map: the face stream's leading
/// channels carry the masked image, the eye stream's carry the eye crop, and
/// the trailing channels carry the masks as alphas. Gives the autoencoder a
/// sensible starting point before any Gaussians are fitted.
fn pseudo_feature_map(
    image: &[f64],
    face_mask: &[u8],
    eye_mask: &[u8],
    h: usize,
    w: usize,
    stream_channels: usize,
) -> Tensor {
    let c_total = 2 * stream_channels + 2;
    let mut out = vec![0.0; h * w * c_total];
    for p in 0..h * w {
        let fm = face_mask[p] as f64;
        let em = eye_mask[p] as f64;
        for k in 0..3 {
            out[p * c_total + k] = image[p * 3 + k] * fm;
            out[p * c_total + stream_channels + k] = image[p * 3 + k] * em;
        }
        out[p * c_total + 3] = fm;
        out[p * c_total + stream_channels + 3] = em;
        out[p * c_total + 2 * stream_channels] = fm;
        out[p * c_total + 2 * stream_channels + 1] = em;
    }
    Tensor::from_vec(&[h, w, c_total], out).expect("consistent shape")
}

pub struct InitReport {
    pub ae_recon_mae: f64,
    pub neutral_psnr: f64,
}

/// Stage one: autoencoder pre-fit on ground-truth images, then fit the
/// canonical Gaussians to the neutral frame. Transformation MLPs stay
/// zero-initialized throughout.
pub fn train_stage_init(art: &mut TrainArtifacts) -> Result<InitReport> {
    let cfg = art.model.cfg.clone();
    let (h, w) = (art.dataset.height, art.dataset.width);
    let sc = cfg.feature_channels_per_stream;
    let train_idx = art.dataset.indices(Split::Train);
    if train_idx.is_empty() {
        return Err(Error::Train("empty training split".into()));
    }
    let rng = RngStream::new(cfg.seed, 0).derive("init_stage");

    // Autoencoder pre-fit: reconstruction-only objective.
    for step in 0..cfg.ae_prefit_steps {
        let tape = Tape::new();
        let binds = art.model.bind(&tape, true);
        let pick = rng.index_at(step as u64, train_idx.len());
        let s = &art.dataset.samples[train_idx[pick]];
        let pseudo = tape.constant(pseudo_feature_map(
            &s.image,
            &s.face_mask,
            &s.eye_mask,
            h,
            w,
            sc,
        ));
        let gt = tape.constant(Tensor::from_vec(&[h, w, 3], s.image.clone())?);
        let z = art.model.renderer.encode_latent(&binds, &pseudo)?;
        let recon = art.model.renderer.decode_latent(&binds, &z)?;
        let l1 = ops::mean(&ops::abs(&ops::sub(&recon, &gt)?))?;
        let ssim_term = ops::add_scalar(&ops::neg(&losses::ssim(&recon, &gt)?), 1.0);
        let loss = ops::add(&l1, &ops::mul_scalar(&ssim_term, 0.2))?;
        if !loss.scalar().is_finite() {
            return Err(Error::Train(format!(
                "autoencoder pre-fit loss non-finite at step {step}"
            )));
        }
        let mut grads = tape.backward(&loss)?;
        art.adam.step(&mut art.model.store, &binds, &mut grads, 1e-3)?;
        if verbose() && step % 100 == 0 {
            eprintln!("ae pre-fit step {step}: loss {:.4}", loss.scalar());
        }
    }

    // Measure reconstruction quality on validation frames.
    let val_idx = art.dataset.indices(Split::Val);
    let mut mae = 0.0;
    for i in val_idx.iter().take(16) {
        let s = &art.dataset.samples[*i];
        let tape = Tape::new();
        let binds = art.model.bind(&tape, false);
        let pseudo = tape.constant(pseudo_feature_map(
            &s.image,
            &s.face_mask,
            &s.eye_mask,
            h,
            w,
            sc,
        ));
        let recon = art
            .model
            .renderer
            .decode_latent(&binds, &art.model.renderer.encode_latent(&binds, &pseudo)?)?;
        mae += recon
            .value()
            .iter()
            .zip(&s.image)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / s.image.len() as f64;
    }
    let ae_recon_mae = mae / val_idx.len().min(16) as f64;

    // Neutral fit: canonical Gaussians against the neutral frame through the
    // splat-encode-decode path.
    let neutral = ControlCodes::neutral(cfg.d_tau, cfg.dit.shape_dim);
    let (gt_img, _, _) = render_frame(
        &art.model.spec,
        neutral.gaze,
        crate::geometry::identity(),
        [0.0; 3],
        &neutral.expression,
        &art.model.spec.camera,
    );
    let mut neutral_psnr = 0.0;
    for step in 0..cfg.init_steps {
        let tape = Tape::new();
        let binds = art.model.bind(&tape, true);
        let face = art.model.canonical_face(&binds).as_set()?;
        let eye = art.model.canonical_eye(&binds).as_set()?;
        let fm = art.model.rasterize(&face, &eye)?;
        let z = art.model.renderer.encode_latent(&binds, &fm.values)?;
        let recon = art.model.renderer.decode_latent(&binds, &z)?;
        let gt = tape.constant(Tensor::from_vec(&[h, w, 3], gt_img.clone())?);
        let l1 = ops::mean(&ops::abs(&ops::sub(&recon, &gt)?))?;
        let ssim_term = ops::add_scalar(&ops::neg(&losses::ssim(&recon, &gt)?), 1.0);
        let loss = ops::add(&l1, &ops::mul_scalar(&ssim_term, 0.2))?;
        if !loss.scalar().is_finite() {
            return Err(Error::Train(format!(
                "neutral fit loss non-finite at step {step}"
            )));
        }
        let mut grads = tape.backward(&loss)?;
        art.adam.step(&mut art.model.store, &binds, &mut grads, 2e-3)?;
        if step + 1 == cfg.init_steps {
            neutral_psnr = losses::psnr(&recon.value(), &gt_img);
        }
        if verbose() && step % 100 == 0 {
            eprintln!("neutral fit step {step}: loss {:.4}", loss.scalar());
        }
    }
    if neutral_psnr < 12.0 {
        return Err(Error::Train(format!(
            "neutral fit reached only {neutral_psnr:.1} dB (< 12 dB) after {} steps",
            cfg.init_steps
        )));
    }
    // The init stage must leave every field MLP untouched.
    for name in art.model.store.names() {
        if name.starts_with("field.") {
            debug_assert!(
                art.model
                    .store
                    .get(name)
                    .map(|t| !name.ends_with(".w3") || t.data().iter().all(|v| *v == 0.0))
                    .unwrap_or(false),
                "field output layer drifted during init: {name}"
            );
        }
    }
    if verbose() {
        eprintln!("init stage: ae mae {ae_recon_mae:.3}, neutral psnr {neutral_psnr:.1} dB");
    }
    Ok(InitReport {
        ae_recon_mae,
        neutral_psnr,
    })
}

/// Draw the weak-supervision gaze pool for an epoch. The sampler's epoch
/// horizon is always anchored to the training epoch budget.
fn ws_pool(cfg: &TrainConfig, epoch: usize, root: &RngStream) -> Result<Vec<GazeAngle>> {
    let per_epoch =
        ((cfg.steps_per_epoch() * cfg.batch) as f64 * cfg.p_ws).ceil() as usize;
    let pool_size = per_epoch.max(cfg.sampler.n_grid * cfg.sampler.n_grid).max(8);
    let mut sampler_cfg = cfg.sampler.clone();
    sampler_cfg.total_epochs = cfg.epochs;
    sampler::sample(
        &sampler_cfg,
        epoch,
        pool_size,
        &root.derive(&format!("ws_pool{epoch}")),
    )
}

/// One end-to-end training step; returns the aggregated loss report.
fn train_step(
    art: &mut TrainArtifacts,
    step: u64,
    root: &RngStream,
    train_idx: &[usize],
    pool: &[GazeAngle],
) -> Result<LossReport> {
    let cfg = art.model.cfg.clone();
    let (h, w) = (art.dataset.height, art.dataset.width);
    let tape = Tape::new();
    let binds = art.model.bind(&tape, true);
    let mut totals = Vec::with_capacity(cfg.batch);
    let mut agg = LossReport::default();
    let mut gaze_deg_sum = 0.0;
    let mut gaze_deg_count = 0usize;

    for slot in 0..cfg.batch {
        let item_rng = root.derive(&format!("item{step}:{slot}"));
        let is_ws = cfg.toggles.weak_supervision && item_rng.uniform_at(0) < cfg.p_ws;
        let mut report = LossReport::default();

        let (codes, gt_idx): (ControlCodes, Option<usize>) = if is_ws {
            let angle = pool[item_rng.index_at(1, pool.len())];
            (
                ControlCodes::new(
                    angle,
                    [0.0; 3],
                    [0.0; 3],
                    vec![0.0; cfg.d_tau],
                    vec![0.0; cfg.dit.shape_dim],
                )?,
                None,
            )
        } else {
            let idx = train_idx[item_rng.index_at(2, train_idx.len())];
            let s = &art.dataset.samples[idx];
            (
                ControlCodes::new(
                    s.gaze,
                    s.pose_rot,
                    s.pose_trans,
                    s.tau.clone(),
                    vec![0.0; cfg.dit.shape_dim],
                )?,
                Some(idx),
            )
        };
        let gt = gt_idx.map(|i| &art.dataset.samples[i]);

        let fwd = art.model.forward(
            &tape,
            &binds,
            &codes,
            SamplerKind::OneStep,
            &item_rng.derive("render"),
        )?;

        // Image loss on dataset pairs.
        let image_term = if let Some(s) = gt {
            let gt_var = tape.constant(Tensor::from_vec(&[h, w, 3], s.image.clone())?);
            Some(losses::image_loss(
                &fwd.image,
                &gt_var,
                &s.face_mask,
                &s.eye_mask,
                &cfg.loss,
                &art.model.perceptual,
                &mut report,
            )?)
        } else {
            None
        };

        // Gaze target: estimator reading of the ground truth for pairs, the
        // sampled angle for weak supervision.
        let target_gaze = match gt_idx {
            Some(idx) => art.gaze_targets[idx],
            None => Some(codes.gaze),
        };
        let gaze_term = match target_gaze {
            Some(t) => {
                let g = losses::gaze_loss(&fwd.image, t, &art.model.estimator, &mut report)?;
                if report.gaze_degrees.is_finite() {
                    gaze_deg_sum += report.gaze_degrees;
                    gaze_deg_count += 1;
                }
                Some(g)
            }
            None => {
                report.gaze_masked += 1;
                None
            }
        };

        // Orthogonality on the captured first-layer representations.
        let ortho_term = if cfg.toggles.ortho_loss {
            let (vg, vp, ve) = art.model.capture(&tape, &binds, &codes)?;
            Some(losses::ortho_loss(
                &vg,
                &vp,
                &ve,
                cfg.loss.w1,
                cfg.loss.w2,
                &mut report,
            )?)
        } else {
            None
        };

        let mut weights = cfg.loss.clone();
        if !cfg.toggles.ortho_loss {
            weights.lambda_ortho = 0.0;
        }
        let mut item_total = losses::total_loss(
            image_term.as_ref(),
            gaze_term.as_ref(),
            ortho_term.as_ref(),
            &weights,
            &tape,
        )?;
        if cfg.toggles.dit_renderer && cfg.dit.epsilon_loss_weight > 0.0 {
            let eps = art.model.epsilon_loss(
                &tape,
                &binds,
                &fwd.cond_latent,
                &item_rng.derive("eps"),
            )?;
            agg.epsilon_value += eps.scalar();
            item_total = ops::add(
                &item_total,
                &ops::mul_scalar(&eps, cfg.dit.epsilon_loss_weight),
            )?;
        }
        agg.image_total += report.image_total;
        agg.ortho_value += report.ortho_value;
        agg.gaze_masked += report.gaze_masked;
        totals.push(item_total);
    }

    let mut total = totals[0].clone();
    for t in &totals[1..] {
        total = ops::add(&total, t)?;
    }
    let total = ops::mul_scalar(&total, 1.0 / cfg.batch as f64);
    let total_val = total.scalar();
    if !total_val.is_finite() {
        let parts = [
            ("image", agg.image_total),
            ("ortho", agg.ortho_value),
            ("epsilon", agg.epsilon_value),
        ];
        let offender = parts
            .iter()
            .find(|(_, v)| !v.is_finite())
            .map(|(n, _)| *n)
            .unwrap_or("gaze");
        return Err(Error::Train(format!(
            "non-finite total loss at step {step}: offending term '{offender}'"
        )));
    }

    let mut grads = tape.backward(&total)?;
    let lr = step_decay_lr(cfg.lr, step, cfg.steps as u64);
    art.adam.step(&mut art.model.store, &binds, &mut grads, lr)?;

    agg.total = total_val;
    agg.image_total /= cfg.batch as f64;
    agg.ortho_value /= cfg.batch as f64;
    agg.epsilon_value /= cfg.batch as f64;
    agg.gaze_degrees = if gaze_deg_count > 0 {
        gaze_deg_sum / gaze_deg_count as f64
    } else {
        0.0
    };
    Ok(agg)
}

/// Joint end-to-end training from the current step to the configured budget,
/// appending metrics rows. `eval_hook` fills the evaluation columns when the
/// interval fires.
pub fn train_end_to_end(art: &mut TrainArtifacts, metrics: &mut MetricsWriter) -> Result<()> {
    let until = art.model.cfg.steps as u64;
    train_until(art, metrics, until)
}

/// Train up to `until_step` (at most the configured budget); schedules stay
/// anchored to the configured budget, so interrupted and straight-through
/// runs follow identical trajectories.
pub fn train_until(
    art: &mut TrainArtifacts,
    metrics: &mut MetricsWriter,
    until_step: u64,
) -> Result<()> {
    let cfg = art.model.cfg.clone();
    let until = until_step.min(cfg.steps as u64);
    let root = RngStream::new(cfg.seed, 0).derive("train");
    let train_idx = art.dataset.indices(Split::Train);
    if train_idx.is_empty() {
        return Err(Error::Train("empty training split".into()));
    }
    let started = Instant::now();
    let mut pool_epoch = usize::MAX;
    let mut pool = Vec::new();

    while art.step < until {
        let step = art.step;
        let epoch = cfg.epoch_of_step(step as usize);
        if epoch != pool_epoch {
            pool = ws_pool(&cfg, epoch, &root)?;
            pool_epoch = epoch;
        }
        let report = train_step(art, step, &root, &train_idx, &pool)?;
        art.step += 1;

        let last = art.step == until;
        if step % cfg.log_interval as u64 == 0 || last {
            let mut row = MetricsRow {
                step,
                loss_total: report.total,
                loss_image: report.image_total,
                loss_gaze_deg: report.gaze_degrees,
                loss_ortho: report.ortho_value,
                loss_eps: report.epsilon_value,
                wall_time_s: started.elapsed().as_secs_f64(),
                ..Default::default()
            };
            if cfg.eval_interval > 0 && (step % cfg.eval_interval as u64 == 0 || last) {
                let summary = crate::pipeline::eval::evaluate(
                    &art.model,
                    &art.dataset,
                    Split::Val,
                    SamplerKind::OneStep,
                )?;
                row.eval_psnr = Some(summary.psnr);
                row.eval_ssim = Some(summary.ssim);
                row.eval_perc = Some(summary.perceptual);
                row.eval_gaze_deg = Some(summary.gaze_deg);
                row.eval_pose_deg = Some(summary.pose_deg);
            }
            if verbose() {
                eprintln!(
                    "step {step}: total {:.4} image {:.4} gaze {:.2} deg ortho {:.4} eps {:.4}",
                    report.total,
                    report.image_total,
                    report.gaze_degrees,
                    report.ortho_value,
                    report.epsilon_value
                );
            }
            metrics.append(row)?;
        }
    }
    Ok(())
}

/// Serialize the run: model parameters, frozen estimator, optimizer state,
/// step, and the config snapshot.
pub fn save_checkpoint(art: &TrainArtifacts, path: &Path) -> Result<()> {
    let mut tensors = Vec::new();
    for e in art.model.store.entries() {
        tensors.push((e.name.clone(), Tensor::from_vec(&e.shape, e.data.clone())?));
    }
    for e in art.model.estimator.store.entries() {
        tensors.push((
            format!("frozen.{}", e.name),
            Tensor::from_vec(&e.shape, e.data.clone())?,
        ));
    }
    tensors.extend(art.adam.state_tensors(&art.model.store));
    tensors.push(("adam.step".into(), Tensor::scalar(art.adam.step as f64)));
    let ckpt = Checkpoint {
        step: art.step,
        config_text: art.model.cfg.to_text(),
        tensors,
    };
    ckpt.save(path)
}

/// Rebuild a run from a checkpoint: the dataset is regenerated
/// deterministically from the embedded config and the estimator is restored
/// from its frozen tensors.
pub fn load_checkpoint(path: &Path) -> Result<TrainArtifacts> {
    let ckpt = Checkpoint::load(path)?;
    let cfg = TrainConfig::from_text(&ckpt.config_text)?;
    let spec = cfg.scene_spec();
    let root = RngStream::new(cfg.seed, 0);
    let dataset = generate_dataset(&spec, &cfg.data, &root.derive("dataset"))?;

    let mut estimator = GazeEstimator::new(
        EstimatorConfig {
            steps: cfg.estimator_steps,
            ..Default::default()
        },
        (cfg.resolution, cfg.resolution),
        &root.derive("estimator"),
    );
    for e in estimator.store.names().map(String::from).collect::<Vec<_>>() {
        let t = ckpt
            .get(&format!("frozen.{e}"))
            .ok_or_else(|| Error::Checkpoint(format!("missing frozen.{e}")))?;
        estimator.store.set(&e, t)?;
    }

    let mut model = GazeModel::new(cfg.clone(), estimator)?;
    for name in model.store.names().map(String::from).collect::<Vec<_>>() {
        let t = ckpt
            .get(&name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
        model.store.set(&name, t)?;
    }
    let mut adam = Adam::new(&model.store);
    adam.load_state(&model.store, |n| ckpt.get(n).cloned())?;
    adam.step = ckpt
        .get("adam.step")
        .map(|t| t.item() as u64)
        .unwrap_or(ckpt.step);

    let mut gaze_targets = Vec::with_capacity(dataset.len());
    for s in &dataset.samples {
        gaze_targets.push(model.estimator.estimate(&s.image).ok());
    }
    Ok(TrainArtifacts {
        model,
        dataset,
        adam,
        step: ckpt.step,
        gaze_targets,
    })
}
