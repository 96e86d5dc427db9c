//! Weak-supervision gaze generator: deterministic grid sampling, three
//! stochastic modes, and the progressive range schedule.
//!
//! All angles are radians internally. Every emitted sample lies inside the
//! closed box [-R_eff, R_eff]^2 where R_eff follows the progressive schedule.

use crate::error::{Error, Result};
use crate::numerics::rng::RngStream;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GazeAngle {
    pub yaw: f64,
    pub pitch: f64,
}

impl GazeAngle {
    pub fn new(yaw: f64, pitch: f64) -> Self {
        Self { yaw, pitch }
    }

    pub fn from_degrees(yaw_deg: f64, pitch_deg: f64) -> Self {
        Self {
            yaw: yaw_deg.to_radians(),
            pitch: pitch_deg.to_radians(),
        }
    }

    pub fn yaw_deg(&self) -> f64 {
        self.yaw.to_degrees()
    }

    pub fn pitch_deg(&self) -> f64 {
        self.pitch.to_degrees()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SamplerMode {
    Uniform,
    BiasedCenter,
    Mixed,
}

impl SamplerMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(Self::Uniform),
            "biased_center" => Ok(Self::BiasedCenter),
            "mixed" => Ok(Self::Mixed),
            other => Err(Error::Sampler(format!("unknown mode '{other}'"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Uniform => "uniform",
            Self::BiasedCenter => "biased_center",
            Self::Mixed => "mixed",
        }
    }
}

/// One schedule stage: until `until_frac` of all epochs, use `range_frac` of
/// the full gaze range.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScheduleStage {
    pub until_frac: f64,
    pub range_frac: f64,
}

#[derive(Clone, Debug)]
pub struct SamplerConfig {
    pub mode: SamplerMode,
    /// Mode used after `mode_switch_frac` of all epochs.
    pub late_mode: SamplerMode,
    pub mode_switch_frac: f64,
    /// Maximum gaze range, radians.
    pub r_gaze: f64,
    /// Grid points per axis for the deterministic grid.
    pub n_grid: usize,
    /// Progressive range schedule; fractions must be non-decreasing in epoch.
    pub schedule: Vec<ScheduleStage>,
    /// Standard-deviation divisor for the center-biased mode.
    pub concentration: f64,
    pub total_epochs: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            mode: SamplerMode::BiasedCenter,
            late_mode: SamplerMode::Mixed,
            mode_switch_frac: 0.5,
            r_gaze: 35f64.to_radians(),
            n_grid: 5,
            schedule: vec![
                ScheduleStage { until_frac: 0.25, range_frac: 0.3 },
                ScheduleStage { until_frac: 0.60, range_frac: 0.6 },
                ScheduleStage { until_frac: 1.01, range_frac: 1.0 },
            ],
            concentration: 2.5,
            total_epochs: 20,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.r_gaze <= 0.0 {
            return Err(Error::Sampler("r_gaze must be positive".into()));
        }
        if self.n_grid < 1 {
            return Err(Error::Sampler("n_grid must be >= 1".into()));
        }
        if self.concentration <= 0.0 {
            return Err(Error::Sampler("concentration must be positive".into()));
        }
        let mut prev = 0.0;
        for st in &self.schedule {
            if !(st.range_frac > 0.0 && st.range_frac <= 1.0) {
                return Err(Error::Sampler(format!(
                    "range fraction {} outside (0, 1]",
                    st.range_frac
                )));
            }
            if st.range_frac < prev {
                return Err(Error::Sampler(
                    "range fractions must be non-decreasing in epoch".into(),
                ));
            }
            prev = st.range_frac;
        }
        Ok(())
    }

    fn active_mode(&self, epoch: usize) -> SamplerMode {
        let frac = epoch as f64 / self.total_epochs.max(1) as f64;
        if frac < self.mode_switch_frac {
            self.mode
        } else {
            self.late_mode
        }
    }
}

/// Deterministic grid over [-r, r]^2 with `n_grid` points per axis.
/// For n_grid = 1 the closed form is undefined; the single center angle is
/// emitted instead.
pub fn grid_sample(r_gaze: f64, n_grid: usize) -> Vec<GazeAngle> {
    if n_grid == 1 {
        return vec![GazeAngle::new(0.0, 0.0)];
    }
    let step = |i: usize| -r_gaze + 2.0 * r_gaze * i as f64 / (n_grid as f64 - 1.0);
    let mut out = Vec::with_capacity(n_grid * n_grid);
    for i in 0..n_grid {
        for j in 0..n_grid {
            out.push(GazeAngle::new(step(i), step(j)));
        }
    }
    out
}

/// Effective range at `epoch`: r_gaze scaled by the schedule stage fraction,
/// piecewise constant.
pub fn progressive_range(config: &SamplerConfig, epoch: usize) -> f64 {
    let frac = epoch as f64 / config.total_epochs.max(1) as f64;
    for st in &config.schedule {
        if frac < st.until_frac {
            return config.r_gaze * st.range_frac;
        }
    }
    config.r_gaze
}

/// Truncated normal in [-r, r], zero mean, sigma = r / concentration.
fn truncated_normal(rng: &RngStream, idx: &mut u64, r: f64, sigma: f64) -> f64 {
    loop {
        let v = rng.normal_at(*idx) * sigma;
        *idx += 1;
        if v.abs() <= r {
            return v;
        }
    }
}

/// Draw `count` gaze angles for the given epoch.
///
/// * uniform: i.i.d. uniform on [-R_eff, R_eff]^2
/// * biased_center: truncated normal, sigma = R_eff / concentration
/// * mixed: the full deterministic grid at R_eff first, then uniform fill;
///   `count` must cover the grid.
pub fn sample(
    config: &SamplerConfig,
    epoch: usize,
    count: usize,
    rng: &RngStream,
) -> Result<Vec<GazeAngle>> {
    config.validate()?;
    if count < 1 {
        return Err(Error::Sampler("count must be >= 1".into()));
    }
    let r_eff = progressive_range(config, epoch);
    let mode = config.active_mode(epoch);
    let mut idx: u64 = 0;
    let mut out = Vec::with_capacity(count);
    match mode {
        SamplerMode::Uniform => {
            for _ in 0..count {
                let yaw = rng.uniform_in_at(idx, -r_eff, r_eff);
                let pitch = rng.uniform_in_at(idx + 1, -r_eff, r_eff);
                idx += 2;
                out.push(GazeAngle::new(yaw, pitch));
            }
        }
        SamplerMode::BiasedCenter => {
            let sigma = r_eff / config.concentration;
            for _ in 0..count {
                let yaw = truncated_normal(rng, &mut idx, r_eff, sigma);
                let pitch = truncated_normal(rng, &mut idx, r_eff, sigma);
                out.push(GazeAngle::new(yaw, pitch));
            }
        }
        SamplerMode::Mixed => {
            let grid = grid_sample(r_eff, config.n_grid);
            if count < grid.len() {
                return Err(Error::Sampler(format!(
                    "mixed mode needs count >= n_grid^2 = {}, got {count}",
                    grid.len()
                )));
            }
            out.extend_from_slice(&grid);
            while out.len() < count {
                let yaw = rng.uniform_in_at(idx, -r_eff, r_eff);
                let pitch = rng.uniform_in_at(idx + 1, -r_eff, r_eff);
                idx += 2;
                out.push(GazeAngle::new(yaw, pitch));
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    const DEG: f64 = std::f64::consts::PI / 180.0;

    #[test]
    fn grid_three_by_three_exact() {
        let g = grid_sample(30.0 * DEG, 3);
        assert_eq!(g.len(), 9);
        let yaws: Vec<f64> = (0..3).map(|i| g[i * 3].yaw).collect();
        assert_eq!(yaws, vec![-30.0 * DEG, 0.0, 30.0 * DEG]);
        let pitches: Vec<f64> = (0..3).map(|j| g[j].pitch).collect();
        assert_eq!(pitches, vec![-30.0 * DEG, 0.0, 30.0 * DEG]);
    }

    #[test]
    fn grid_degenerate_single_point() {
        assert_eq!(grid_sample(0.5, 1), vec![GazeAngle::new(0.0, 0.0)]);
    }

    #[test]
    fn grid_five_point_spacing() {
        let r = 25.0 * DEG;
        let g = grid_sample(r, 5);
        assert_eq!(g.len(), 25);
        let mut yaws: Vec<f64> = g.iter().map(|a| a.yaw).collect();
        yaws.sort_by(|a, b| a.partial_cmp(b).unwrap());
        yaws.dedup_by(|a, b| (*a - *b).abs() < 1e-15);
        assert_eq!(yaws.len(), 5);
        assert!((yaws[0] + r).abs() < 1e-12);
        assert!((yaws[4] - r).abs() < 1e-12);
        for w in yaws.windows(2) {
            assert!((w[1] - w[0] - 12.5 * DEG).abs() < 1e-12);
        }
    }

    #[test]
    fn grid_closed_under_negation() {
        let g = grid_sample(0.4, 4);
        for a in &g {
            assert!(
                g.iter()
                    .any(|b| (b.yaw + a.yaw).abs() < 1e-12 && (b.pitch + a.pitch).abs() < 1e-12),
                "negation of ({}, {}) missing",
                a.yaw,
                a.pitch
            );
        }
    }

    #[test]
    fn uniform_mode_bounds_and_mean() {
        let cfg = SamplerConfig {
            mode: SamplerMode::Uniform,
            late_mode: SamplerMode::Uniform,
            ..Default::default()
        };
        let rng = RngStream::new(99, 1);
        // Final epoch: full range.
        let r = 30.0 * DEG;
        let cfg = SamplerConfig { r_gaze: r, ..cfg };
        let samples = sample(&cfg, cfg.total_epochs, 10_000, &rng).unwrap();
        let mut max_abs: f64 = 0.0;
        let mut mean_yaw = 0.0;
        let mut mean_pitch = 0.0;
        for s in &samples {
            max_abs = max_abs.max(s.yaw.abs()).max(s.pitch.abs());
            mean_yaw += s.yaw;
            mean_pitch += s.pitch;
        }
        mean_yaw /= samples.len() as f64;
        mean_pitch /= samples.len() as f64;
        assert!(max_abs <= r);
        assert!(mean_yaw.abs() < 1.0 * DEG, "mean yaw {}", mean_yaw / DEG);
        assert!(mean_pitch.abs() < 1.0 * DEG);
    }

    #[test]
    fn biased_center_tighter_than_uniform() {
        let rng = RngStream::new(7, 0);
        let base = SamplerConfig::default();
        let uni = SamplerConfig {
            mode: SamplerMode::Uniform,
            ..base.clone()
        };
        let biased = SamplerConfig {
            mode: SamplerMode::BiasedCenter,
            ..base
        };
        let std_of = |samples: &[GazeAngle]| {
            let n = samples.len() as f64;
            let mean = samples.iter().map(|s| s.yaw).sum::<f64>() / n;
            (samples.iter().map(|s| (s.yaw - mean).powi(2)).sum::<f64>() / n).sqrt()
        };
        let su = std_of(&sample(&uni, 0, 4000, &rng).unwrap());
        let sb = std_of(&sample(&biased, 0, 4000, &rng).unwrap());
        assert!(sb < su, "biased std {sb} not below uniform std {su}");
    }

    #[test]
    fn mixed_grid_prefix() {
        let cfg = SamplerConfig {
            mode: SamplerMode::Mixed,
            n_grid: 3,
            ..Default::default()
        };
        let rng = RngStream::new(1, 1);
        let r_eff = progressive_range(&cfg, 0);
        let out = sample(&cfg, 0, 9, &rng).unwrap();
        assert_eq!(out, grid_sample(r_eff, 3));
        let err = sample(&cfg, 0, 8, &rng).unwrap_err();
        assert!(err.to_string().contains("n_grid"));
    }

    #[test]
    fn progressive_schedule_defaults() {
        let cfg = SamplerConfig::default();
        assert!((progressive_range(&cfg, 0) - 0.3 * cfg.r_gaze).abs() < 1e-15);
        assert!((progressive_range(&cfg, cfg.total_epochs) - cfg.r_gaze).abs() < 1e-15);
        let mut prev = 0.0;
        for epoch in 0..=cfg.total_epochs {
            let r = progressive_range(&cfg, epoch);
            assert!(r >= prev, "range decreased at epoch {epoch}");
            prev = r;
        }
    }

    #[test]
    fn determinism_same_seed_same_list() {
        let cfg = SamplerConfig::default();
        let a = sample(&cfg, 3, 64, &RngStream::new(5, 2)).unwrap();
        let b = sample(&cfg, 3, 64, &RngStream::new(5, 2)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn all_modes_stay_in_effective_box() {
        for mode in [SamplerMode::Uniform, SamplerMode::BiasedCenter, SamplerMode::Mixed] {
            let cfg = SamplerConfig {
                mode,
                late_mode: mode,
                ..Default::default()
            };
            for epoch in [0, 10, 20] {
                let r_eff = progressive_range(&cfg, epoch);
                let out = sample(&cfg, epoch, 2000, &RngStream::new(3, epoch as u64)).unwrap();
                for s in &out {
                    assert!(s.yaw.abs() <= r_eff + 1e-12 && s.pitch.abs() <= r_eff + 1e-12);
                }
            }
        }
    }
}
