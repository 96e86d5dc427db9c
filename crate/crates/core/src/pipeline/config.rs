//! Training configuration and the flat key-value config format.
//!
//! The file format is one `section.key = value` pair per line with `#`
//! comments; unknown keys are rejected. Serialization emits keys in a fixed
//! order so config snapshots embedded in checkpoints are byte-stable.

use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::renderer::DitConfig;
use crate::sampler::{SamplerConfig, SamplerMode, ScheduleStage};
use crate::scene::{DatasetConfig, SceneSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Toggles {
    pub dit_renderer: bool,
    pub ortho_loss: bool,
    pub weak_supervision: bool,
}

impl Default for Toggles {
    fn default() -> Self {
        Self {
            dit_renderer: true,
            ortho_loss: true,
            weak_supervision: true,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub resolution: usize,
    pub face_count: usize,
    pub eye_count: usize,
    pub feature_channels_per_stream: usize,
    pub data: DatasetConfig,
    pub sampler: SamplerConfig,
    pub dit: DitConfig,
    pub loss: LossWeights,
    pub steps: usize,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    pub p_ws: f64,
    pub init_steps: usize,
    pub ae_prefit_steps: usize,
    pub estimator_steps: usize,
    pub estimator_n: usize,
    pub log_interval: usize,
    pub eval_interval: usize,
    pub toggles: Toggles,
    pub d_tau: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            resolution: 64,
            face_count: 512,
            eye_count: 128,
            feature_channels_per_stream: 8,
            data: DatasetConfig::default(),
            sampler: SamplerConfig::default(),
            dit: DitConfig::default(),
            loss: LossWeights::default(),
            steps: 2000,
            epochs: 20,
            batch: 4,
            lr: 1e-4,
            seed: 0,
            p_ws: 0.5,
            init_steps: 400,
            ae_prefit_steps: 400,
            estimator_steps: 6000,
            estimator_n: 3200,
            log_interval: 25,
            eval_interval: 0,
            toggles: Toggles::default(),
            d_tau: 8,
        }
    }
}

impl TrainConfig {
    pub fn scene_spec(&self) -> SceneSpec {
        let mut spec = SceneSpec::default();
        spec.face_count = self.face_count;
        spec.eye_count = self.eye_count;
        let res = self.resolution;
        spec.camera = crate::rasterizer::Camera::front_at(
            4.2,
            96.0 * res as f64 / 64.0,
            res,
            res,
        );
        spec
    }

    /// Total channel count of the composited feature map.
    pub fn composite_channels(&self) -> usize {
        2 * self.feature_channels_per_stream + 2
    }

    pub fn steps_per_epoch(&self) -> usize {
        (self.steps / self.epochs.max(1)).max(1)
    }

    pub fn epoch_of_step(&self, step: usize) -> usize {
        step / self.steps_per_epoch()
    }

    pub fn validate(&self) -> Result<()> {
        if self.resolution % 8 != 0 || self.resolution < 16 {
            return Err(Error::Config(
                "resolution must be a multiple of 8 and at least 16".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.p_ws) {
            return Err(Error::Config("train.p_ws must lie in [0, 1]".into()));
        }
        if self.batch == 0 || self.steps == 0 {
            return Err(Error::Config("train.batch and train.steps must be positive".into()));
        }
        self.sampler.validate()?;
        self.loss.validate()?;
        let mut dit = self.dit.clone();
        dit.feature_channels = self.composite_channels();
        dit.validate()?;
        Ok(())
    }

    /// Serialize as the flat key-value text in fixed order.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(&v);
            out.push('\n');
        };
        kv("scene.resolution", self.resolution.to_string());
        kv("scene.face_count", self.face_count.to_string());
        kv("scene.eye_count", self.eye_count.to_string());
        kv("scene.stream_channels", self.feature_channels_per_stream.to_string());
        kv("data.n", self.data.n.to_string());
        kv("data.train_frac", fmt(self.data.train_frac));
        kv("data.val_frac", fmt(self.data.val_frac));
        kv(
            "data.gaze_grid",
            self.data.gaze_grid.map_or("none".into(), |g| g.to_string()),
        );
        kv("data.gaze_range_deg", fmt(self.data.gaze_range_deg));
        kv("data.pose_rot_deg", fmt(self.data.pose_rot_deg));
        kv("data.pose_trans", fmt(self.data.pose_trans_range));
        kv("data.tau_dim", self.data.tau_dim.to_string());
        kv("sampler.mode", self.sampler.mode.name().to_string());
        kv("sampler.late_mode", self.sampler.late_mode.name().to_string());
        kv("sampler.mode_switch_frac", fmt(self.sampler.mode_switch_frac));
        kv("sampler.r_gaze_deg", fmt(self.sampler.r_gaze.to_degrees()));
        kv("sampler.n_grid", self.sampler.n_grid.to_string());
        kv("sampler.concentration", fmt(self.sampler.concentration));
        for (i, st) in self.sampler.schedule.iter().enumerate() {
            kv(
                &format!("sampler.schedule{i}"),
                format!("{}:{}", fmt(st.until_frac), fmt(st.range_frac)),
            );
        }
        kv("dit.depth", self.dit.depth.to_string());
        kv("dit.heads", self.dit.heads.to_string());
        kv("dit.token_dim", self.dit.token_dim.to_string());
        kv("dit.patch", self.dit.patch.to_string());
        kv("dit.steps", self.dit.diffusion_steps.to_string());
        kv("dit.beta_start", fmt(self.dit.beta_start));
        kv("dit.beta_end", fmt(self.dit.beta_end));
        kv("dit.shape_dim", self.dit.shape_dim.to_string());
        kv("dit.eps_weight", fmt(self.dit.epsilon_loss_weight));
        kv("loss.lambda_image", fmt(self.loss.lambda_image));
        kv("loss.lambda_gaze", fmt(self.loss.lambda_gaze));
        kv("loss.lambda_ortho", fmt(self.loss.lambda_ortho));
        kv("loss.lambda_ssim", fmt(self.loss.lambda_ssim));
        kv("loss.lambda_perc", fmt(self.loss.lambda_perc));
        kv("loss.w1", fmt(self.loss.w1));
        kv("loss.w2", fmt(self.loss.w2));
        kv("train.steps", self.steps.to_string());
        kv("train.epochs", self.epochs.to_string());
        kv("train.batch", self.batch.to_string());
        kv("train.lr", fmt(self.lr));
        kv("train.seed", self.seed.to_string());
        kv("train.p_ws", fmt(self.p_ws));
        kv("train.init_steps", self.init_steps.to_string());
        kv("train.ae_prefit_steps", self.ae_prefit_steps.to_string());
        kv("train.estimator_steps", self.estimator_steps.to_string());
        kv("train.estimator_n", self.estimator_n.to_string());
        kv("train.log_interval", self.log_interval.to_string());
        kv("train.eval_interval", self.eval_interval.to_string());
        kv("train.tau_dim", self.d_tau.to_string());
        kv("toggles.dit", on_off(self.toggles.dit_renderer));
        kv("toggles.ortho", on_off(self.toggles.ortho_loss));
        kv("toggles.ws", on_off(self.toggles.weak_supervision));
        out
    }

    /// Parse the flat format; unknown keys are rejected with a diagnostic.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        let mut schedule: Vec<(usize, ScheduleStage)> = Vec::new();
        let mut saw_schedule = false;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected 'key = value'", lineno + 1))
            })?;
            let key = key.trim();
            let value = value.trim();
            let bad = |what: &str| Error::Config(format!("line {}: bad {what} '{value}'", lineno + 1));
            let parse_f = |_what: &str| -> Result<f64> {
                value.parse().map_err(|_| bad("number"))
            };
            let parse_u = |_what: &str| -> Result<usize> {
                value.parse().map_err(|_| bad("integer"))
            };
            match key {
                "scene.resolution" => cfg.resolution = parse_u("resolution")?,
                "scene.face_count" => cfg.face_count = parse_u("count")?,
                "scene.eye_count" => cfg.eye_count = parse_u("count")?,
                "scene.stream_channels" => cfg.feature_channels_per_stream = parse_u("channels")?,
                "data.n" => cfg.data.n = parse_u("n")?,
                "data.train_frac" => cfg.data.train_frac = parse_f("fraction")?,
                "data.val_frac" => cfg.data.val_frac = parse_f("fraction")?,
                "data.gaze_grid" => {
                    cfg.data.gaze_grid = if value == "none" {
                        None
                    } else {
                        Some(parse_u("grid")?)
                    }
                }
                "data.gaze_range_deg" => cfg.data.gaze_range_deg = parse_f("degrees")?,
                "data.pose_rot_deg" => cfg.data.pose_rot_deg = parse_f("degrees")?,
                "data.pose_trans" => cfg.data.pose_trans_range = parse_f("range")?,
                "data.tau_dim" => cfg.data.tau_dim = parse_u("dim")?,
                "sampler.mode" => cfg.sampler.mode = SamplerMode::parse(value)?,
                "sampler.late_mode" => cfg.sampler.late_mode = SamplerMode::parse(value)?,
                "sampler.mode_switch_frac" => cfg.sampler.mode_switch_frac = parse_f("fraction")?,
                "sampler.r_gaze_deg" => cfg.sampler.r_gaze = parse_f("degrees")?.to_radians(),
                "sampler.n_grid" => cfg.sampler.n_grid = parse_u("grid")?,
                "sampler.concentration" => cfg.sampler.concentration = parse_f("value")?,
                k if k.starts_with("sampler.schedule") => {
                    let idx: usize = k["sampler.schedule".len()..]
                        .parse()
                        .map_err(|_| bad("schedule index"))?;
                    let (a, b) = value.split_once(':').ok_or_else(|| bad("schedule"))?;
                    schedule.push((
                        idx,
                        ScheduleStage {
                            until_frac: a.trim().parse().map_err(|_| bad("schedule"))?,
                            range_frac: b.trim().parse().map_err(|_| bad("schedule"))?,
                        },
                    ));
                    saw_schedule = true;
                }
                "dit.depth" => cfg.dit.depth = parse_u("depth")?,
                "dit.heads" => cfg.dit.heads = parse_u("heads")?,
                "dit.token_dim" => cfg.dit.token_dim = parse_u("dim")?,
                "dit.patch" => cfg.dit.patch = parse_u("patch")?,
                "dit.steps" => cfg.dit.diffusion_steps = parse_u("steps")?,
                "dit.beta_start" => cfg.dit.beta_start = parse_f("beta")?,
                "dit.beta_end" => cfg.dit.beta_end = parse_f("beta")?,
                "dit.shape_dim" => cfg.dit.shape_dim = parse_u("dim")?,
                "dit.eps_weight" => cfg.dit.epsilon_loss_weight = parse_f("weight")?,
                "loss.lambda_image" => cfg.loss.lambda_image = parse_f("weight")?,
                "loss.lambda_gaze" => cfg.loss.lambda_gaze = parse_f("weight")?,
                "loss.lambda_ortho" => cfg.loss.lambda_ortho = parse_f("weight")?,
                "loss.lambda_ssim" => cfg.loss.lambda_ssim = parse_f("weight")?,
                "loss.lambda_perc" => cfg.loss.lambda_perc = parse_f("weight")?,
                "loss.w1" => cfg.loss.w1 = parse_f("weight")?,
                "loss.w2" => cfg.loss.w2 = parse_f("weight")?,
                "train.steps" => cfg.steps = parse_u("steps")?,
                "train.epochs" => cfg.epochs = parse_u("epochs")?,
                "train.batch" => cfg.batch = parse_u("batch")?,
                "train.lr" => cfg.lr = parse_f("lr")?,
                "train.seed" => cfg.seed = value.parse().map_err(|_| bad("seed"))?,
                "train.p_ws" => cfg.p_ws = parse_f("fraction")?,
                "train.init_steps" => cfg.init_steps = parse_u("steps")?,
                "train.ae_prefit_steps" => cfg.ae_prefit_steps = parse_u("steps")?,
                "train.estimator_steps" => cfg.estimator_steps = parse_u("steps")?,
                "train.estimator_n" => cfg.estimator_n = parse_u("n")?,
                "train.log_interval" => cfg.log_interval = parse_u("interval")?,
                "train.eval_interval" => cfg.eval_interval = parse_u("interval")?,
                "train.tau_dim" => cfg.d_tau = parse_u("dim")?,
                "toggles.dit" => cfg.toggles.dit_renderer = parse_on_off(value, lineno)?,
                "toggles.ortho" => cfg.toggles.ortho_loss = parse_on_off(value, lineno)?,
                "toggles.ws" => cfg.toggles.weak_supervision = parse_on_off(value, lineno)?,
                other => {
                    return Err(Error::Config(format!(
                        "line {}: unknown key '{other}'",
                        lineno + 1
                    )))
                }
            }
        }
        if saw_schedule {
            schedule.sort_by_key(|(i, _)| *i);
            cfg.sampler.schedule = schedule.into_iter().map(|(_, s)| s).collect();
        }
        cfg.sampler.total_epochs = cfg.epochs;
        cfg.data.tau_dim = cfg.d_tau;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

fn fmt(v: f64) -> String {
    if v == v.trunc() && v.abs() < 1e15 {
        format!("{v:.1}")
    } else {
        format!("{v}")
    }
}

fn on_off(v: bool) -> String {
    if v { "on".into() } else { "off".into() }
}

fn parse_on_off(v: &str, lineno: usize) -> Result<bool> {
    match v {
        "on" | "true" | "1" => Ok(true),
        "off" | "false" | "0" => Ok(false),
        other => Err(Error::Config(format!(
            "line {}: expected on/off, got '{other}'",
            lineno + 1
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_default() {
        let cfg = TrainConfig::default();
        let text = cfg.to_text();
        let parsed = TrainConfig::from_text(&text).unwrap();
        assert_eq!(parsed.to_text(), text);
    }

    #[test]
    fn unknown_key_rejected() {
        let err = TrainConfig::from_text("bogus.key = 3\n").unwrap_err();
        assert!(err.to_string().contains("unknown key"));
    }

    #[test]
    fn comments_and_blanks_ok() {
        let cfg = TrainConfig::from_text("# comment\n\ntrain.steps = 123\n").unwrap();
        assert_eq!(cfg.steps, 123);
    }

    #[test]
    fn toggles_parse() {
        let cfg =
            TrainConfig::from_text("toggles.dit = off\ntoggles.ortho = on\ntoggles.ws = off\n")
                .unwrap();
        assert!(!cfg.toggles.dit_renderer);
        assert!(cfg.toggles.ortho_loss);
        assert!(!cfg.toggles.weak_supervision);
    }

    #[test]
    fn bad_values_rejected() {
        assert!(TrainConfig::from_text("train.steps = many\n").is_err());
        assert!(TrainConfig::from_text("toggles.dit = maybe\n").is_err());
        assert!(TrainConfig::from_text("train.p_ws = 1.5\n").is_err());
    }
}
