//! Frozen desk-scale gaze estimator.
//!
//! A small convolutional regressor from image to pitch-yaw: three conv
//! stages produce keypoint heatmaps, spatial softmax turns them into
//! coordinates, and a small head maps the coordinates to angles. It is
//! trained once on the synthetic dataset, then frozen; the forward pass is
//! differentiable with respect to its input image so the gaze redirection
//! loss can flow into rendered pixels.

use crate::error::{Error, Result};
use crate::geometry;
use crate::numerics::conv;
use crate::numerics::ops;
use crate::numerics::rng::RngStream;
use crate::numerics::tape::{Tape, Var};
use crate::numerics::tensor::Tensor;
use crate::params::{Adam, Bindings, ParamStore};
use crate::sampler::GazeAngle;
use crate::scene::{Dataset, Split};

#[derive(Clone, Debug)]
pub struct EstimatorConfig {
    pub heatmaps: usize,
    pub hidden: usize,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    /// Mean validation angular error that counts as converged, degrees.
    pub target_deg: f64,
    /// Above this validation error after the budget, training aborts.
    pub abort_deg: f64,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            heatmaps: 12,
            hidden: 64,
            steps: 6000,
            batch: 12,
            lr: 3e-3,
            target_deg: 2.0,
            abort_deg: 4.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GazeEstimator {
    pub store: ParamStore,
    pub cfg: EstimatorConfig,
    pub input_hw: (usize, usize),
}

impl GazeEstimator {
    pub fn new(cfg: EstimatorConfig, input_hw: (usize, usize), rng: &RngStream) -> Self {
        let mut store = ParamStore::new();
        let r = rng.derive("estimator");
        store.add_xavier("est.conv1.w", &[3, 3, 3, 12], &r).unwrap();
        store.add_zeros("est.conv1.b", &[12]).unwrap();
        store.add_xavier("est.conv2.w", &[3, 3, 12, 24], &r).unwrap();
        store.add_zeros("est.conv2.b", &[24]).unwrap();
        store
            .add_xavier("est.conv3.w", &[3, 3, 24, cfg.heatmaps], &r)
            .unwrap();
        store.add_zeros("est.conv3.b", &[cfg.heatmaps]).unwrap();
        store
            .add("est.beta", crate::numerics::tensor::Tensor::filled(&[cfg.heatmaps], 4.0))
            .unwrap();
        store
            .add_xavier("est.head1.w", &[5 * cfg.heatmaps + 24, cfg.hidden], &r)
            .unwrap();
        store.add_zeros("est.head1.b", &[cfg.hidden]).unwrap();
        store
            .add_xavier("est.head2.w", &[cfg.hidden, cfg.hidden], &r)
            .unwrap();
        store.add_zeros("est.head2.b", &[cfg.hidden]).unwrap();
        store.add_xavier("est.head3.w", &[cfg.hidden, 5], &r).unwrap();
        store.add_zeros("est.head3.b", &[5]).unwrap();
        Self {
            store,
            cfg,
            input_hw,
        }
    }

    /// Forward pass: image (h, w, 3) -> (2,) pitch-yaw radians.
    pub fn forward(&self, tape: &Tape, binds: &Bindings, image: &Var) -> Result<Var> {
        let out = self.forward_full(tape, binds, image)?;
        ops::narrow(&out, 0, 0, 2)
    }

    /// Full regression head: (pitch, yaw, rx, ry, rz). The pose components
    /// are auxiliary training targets that force pose-aware keypoints.
    pub fn forward_full(&self, tape: &Tape, binds: &Bindings, image: &Var) -> Result<Var> {
        Ok(self.forward_parts(tape, binds, image)?.0)
    }

    /// Regression output plus the per-heatmap expected (u, v) coordinates,
    /// used for keypoint supervision during training.
    pub fn forward_parts(
        &self,
        tape: &Tape,
        binds: &Bindings,
        image: &Var,
    ) -> Result<(Var, Var)> {
        let x = ops::add_scalar(image, -0.5);
        let x = conv::conv2d(&x, &binds.get("est.conv1.w"), &binds.get("est.conv1.b"), 2)?;
        let x = ops::tanh(&x);
        let x = conv::conv2d(&x, &binds.get("est.conv2.w"), &binds.get("est.conv2.b"), 2)?;
        let x = ops::tanh(&x);
        let hm = conv::conv2d(&x, &binds.get("est.conv3.w"), &binds.get("est.conv3.b"), 1)?;
        let dims = hm.dims();
        let (hh, hw, k) = (dims[0], dims[1], dims[2]);

        // Spatial softmax with per-channel temperature -> expected coordinate
        // moments per heatmap: (u, v, u^2, v^2, uv) with coords in [-1, 1].
        let hm = ops::mul_bias(&hm, &binds.get("est.beta"))?;
        let flat = ops::reshape(&hm, &[hh * hw, k])?;
        let weights = ops::softmax(&flat, 0)?;
        let mut coords = Vec::with_capacity(hh * hw * 5);
        for y in 0..hh {
            for x in 0..hw {
                let u = 2.0 * x as f64 / (hw - 1) as f64 - 1.0;
                let v = 2.0 * y as f64 / (hh - 1) as f64 - 1.0;
                coords.extend_from_slice(&[u, v, u * u, v * v, u * v]);
            }
        }
        let coord_mat = tape.constant(Tensor::from_vec(&[hh * hw, 5], coords)?);
        // (k, hh*hw) . (hh*hw, 5) = (k, 5)
        let wt = ops::transpose2d(&weights)?;
        let xy = ops::matmul(&wt, &coord_mat)?;
        let kp = ops::reshape(&xy, &[1, 5 * k])?;
        // Global context: mean-pooled trunk features.
        let xdims = x.dims();
        let pooled = ops::mean_axis(&ops::reshape(&x, &[xdims[0] * xdims[1], xdims[2]])?, 0)?;
        let ctx = ops::reshape(&pooled, &[1, xdims[2]])?;
        let feat = ops::concat(&[&kp, &ctx], 1)?;

        let h1 = ops::add_bias(
            &ops::matmul(&feat, &binds.get("est.head1.w"))?,
            &binds.get("est.head1.b"),
        )?;
        let h1 = ops::tanh(&h1);
        let h2 = ops::add_bias(
            &ops::matmul(&h1, &binds.get("est.head2.w"))?,
            &binds.get("est.head2.b"),
        )?;
        let h2 = ops::tanh(&h2);
        let out = ops::add_bias(
            &ops::matmul(&h2, &binds.get("est.head3.w"))?,
            &binds.get("est.head3.b"),
        )?;
        // First two moment columns of xy are the (u, v) expectations.
        let kp_uv = ops::reshape(&ops::narrow(&xy, 1, 0, 2)?, &[2 * k])?;
        Ok((ops::reshape(&out, &[5])?, kp_uv))
    }

    /// Convenience host-side estimate on a plain image buffer.
    pub fn estimate(&self, image: &[f64]) -> Result<GazeAngle> {
        let (h, w) = self.input_hw;
        let tape = Tape::new();
        let binds = self.store.bind(&tape, false);
        let img = tape.constant(Tensor::from_vec(&[h, w, 3], image.to_vec())?);
        let out = self.forward(&tape, &binds, &img)?;
        let v = out.value();
        if !v.iter().all(|x| x.is_finite()) {
            return Err(Error::Train("estimator produced non-finite output".into()));
        }
        Ok(GazeAngle::new(v[1], v[0]))
    }

    /// Mean angular error over a dataset split, degrees.
    pub fn mean_angular_error(&self, dataset: &Dataset, split: Split) -> Result<f64> {
        let idx = dataset.indices(split);
        if idx.is_empty() {
            return Err(Error::Train(format!("empty split {:?}", split)));
        }
        let mut total = 0.0;
        for i in idx.iter() {
            let s = &dataset.samples[*i];
            let est = self.estimate(&s.image)?;
            let d1 = geometry::gaze_direction(est.pitch, est.yaw);
            let d2 = geometry::gaze_direction(s.gaze.pitch, s.gaze.yaw);
            total += geometry::angle_between_deg(d1, d2);
        }
        Ok(total / idx.len() as f64)
    }
}

/// Train the estimator on the dataset's training split and freeze it.
/// Aborts when the validation error stays above the abort threshold.
pub fn train_estimator(
    dataset: &Dataset,
    cfg: EstimatorConfig,
    rng: &RngStream,
) -> Result<GazeEstimator> {
    let verbose = std::env::var("GAZESPLAT_VERBOSE").is_ok();
    let train_idx = dataset.indices(Split::Train);
    if train_idx.len() < 500 {
        return Err(Error::Train(format!(
            "estimator needs >= 500 training samples, got {}",
            train_idx.len()
        )));
    }
    let (h, w) = (dataset.height, dataset.width);
    let mut est = GazeEstimator::new(cfg.clone(), (h, w), rng);
    let mut adam = Adam::new(&est.store);
    let batch_rng = rng.derive("estimator_batches");

    for step in 0..cfg.steps {
        let tape = Tape::new();
        let binds = est.store.bind(&tape, true);
        let mut loss_terms = Vec::new();
        for slot in 0..cfg.batch {
            let pick = batch_rng.index_at((step * cfg.batch + slot) as u64, train_idx.len());
            let s = &dataset.samples[train_idx[pick]];
            let img = tape.constant(Tensor::from_vec(&[h, w, 3], s.image.clone())?);
            let (out, kp_uv) = est.forward_parts(&tape, &binds, &img)?;
            let gaze_target = tape.constant(Tensor::from_vec(
                &[2],
                vec![s.gaze.pitch, s.gaze.yaw],
            )?);
            let gaze_diff = ops::sub(&ops::narrow(&out, 0, 0, 2)?, &gaze_target)?;
            let pose_target = tape.constant(Tensor::from_vec(&[3], s.pose_rot.to_vec())?);
            let pose_diff = ops::sub(&ops::narrow(&out, 0, 2, 3)?, &pose_target)?;
            let term = ops::add(
                &ops::sum(&ops::square(&gaze_diff)?)?,
                &ops::mul_scalar(&ops::sum(&ops::square(&pose_diff)?)?, 0.3),
            )?;
            let _ = &kp_uv;
            loss_terms.push(term);
        }
        let mut loss = loss_terms[0].clone();
        for t in &loss_terms[1..] {
            loss = ops::add(&loss, t)?;
        }
        let loss = ops::mul_scalar(&loss, 1.0 / cfg.batch as f64);
        if !loss.scalar().is_finite() {
            return Err(Error::Train(format!(
                "estimator loss non-finite at step {step}"
            )));
        }
        let mut grads = tape.backward(&loss)?;
        let lr = crate::params::step_decay_lr(cfg.lr, step as u64, cfg.steps as u64);
        adam.step(&mut est.store, &binds, &mut grads, lr)?;
        if verbose && (step % 500 == 0 || step + 1 == cfg.steps) {
            let val = est.mean_angular_error(dataset, Split::Val)?;
            let train_err = {
                let idx = &train_idx[..100.min(train_idx.len())];
                let mut t = 0.0;
                for i in idx {
                    let smp = &dataset.samples[*i];
                    let e = est.estimate(&smp.image)?;
                    let d1 = crate::geometry::gaze_direction(e.pitch, e.yaw);
                    let d2 = crate::geometry::gaze_direction(smp.gaze.pitch, smp.gaze.yaw);
                    t += crate::geometry::angle_between_deg(d1, d2);
                }
                t / idx.len() as f64
            };
            eprintln!(
                "estimator step {step}: loss {:.5} train {train_err:.2}° val {val:.2}°",
                loss.scalar()
            );
        }
    }

    let val_err = est.mean_angular_error(dataset, Split::Val)?;
    if val_err > cfg.abort_deg {
        return Err(Error::Train(format!(
            "estimator failed to converge: validation error {val_err:.2}° > {:.1}° after {} steps",
            cfg.abort_deg, cfg.steps
        )));
    }
    Ok(est)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::grad_check_coords;

    #[test]
    fn estimator_finite_on_gray_image() {
        let rng = RngStream::new(4, 0);
        let est = GazeEstimator::new(EstimatorConfig::default(), (64, 64), &rng);
        let out = est.estimate(&vec![0.5; 64 * 64 * 3]).unwrap();
        assert!(out.yaw.is_finite() && out.pitch.is_finite());
    }

    #[test]
    fn estimator_gradient_reaches_input_pixels() {
        let rng = RngStream::new(4, 1);
        let est = GazeEstimator::new(EstimatorConfig::default(), (32, 32), &rng);
        let image = rng.derive("img").uniform_tensor(&[32, 32, 3], 0.0, 1.0);
        // Spot check a few pixels by finite differences.
        let coords: Vec<(usize, usize)> = (0..8).map(|i| (0, i * 371 % (32 * 32 * 3))).collect();
        let report = grad_check_coords(
            |tape, vars| {
                let binds = est.store.bind(tape, false);
                let out = est.forward(tape, &binds, &vars[0])?;
                ops::sum(&ops::square(&out)?)
            },
            &[image],
            &coords,
            1e-6,
        )
        .unwrap();
        assert!(report.passed(1e-4), "rel err {}", report.max_rel_err);
    }
}
