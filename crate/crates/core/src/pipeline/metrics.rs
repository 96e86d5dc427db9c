//! Append-only metrics stream: one CSV row per logging interval with a fixed,
//! versioned header.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub const METRICS_HEADER: &str = "step,loss_total,loss_image,loss_gaze_deg,loss_ortho,loss_eps,eval_psnr,eval_ssim,eval_perc,eval_gaze_deg,eval_pose_deg,wall_time_s";
pub const METRICS_VERSION_LINE: &str = "# metrics v1";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    pub loss_total: f64,
    pub loss_image: f64,
    pub loss_gaze_deg: f64,
    pub loss_ortho: f64,
    pub loss_eps: f64,
    pub eval_psnr: Option<f64>,
    pub eval_ssim: Option<f64>,
    pub eval_perc: Option<f64>,
    pub eval_gaze_deg: Option<f64>,
    pub eval_pose_deg: Option<f64>,
    pub wall_time_s: f64,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| format!("{x:.17e}"))
}

impl MetricsRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{},{},{},{},{},{:.3}",
            self.step,
            self.loss_total,
            self.loss_image,
            self.loss_gaze_deg,
            self.loss_ortho,
            self.loss_eps,
            fmt_opt(self.eval_psnr),
            fmt_opt(self.eval_ssim),
            fmt_opt(self.eval_perc),
            fmt_opt(self.eval_gaze_deg),
            fmt_opt(self.eval_pose_deg),
            self.wall_time_s,
        )
    }

    pub fn from_csv(line: &str) -> Result<Self> {
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 12 {
            return Err(Error::Config(format!("bad metrics row: {line}")));
        }
        let f = |s: &str| -> Result<f64> {
            s.parse().map_err(|_| Error::Config(format!("bad number '{s}'")))
        };
        let opt = |s: &str| -> Result<Option<f64>> {
            if s.is_empty() {
                Ok(None)
            } else {
                Ok(Some(f(s)?))
            }
        };
        Ok(Self {
            step: cols[0]
                .parse()
                .map_err(|_| Error::Config(format!("bad step '{}'", cols[0])))?,
            loss_total: f(cols[1])?,
            loss_image: f(cols[2])?,
            loss_gaze_deg: f(cols[3])?,
            loss_ortho: f(cols[4])?,
            loss_eps: f(cols[5])?,
            eval_psnr: opt(cols[6])?,
            eval_ssim: opt(cols[7])?,
            eval_perc: opt(cols[8])?,
            eval_gaze_deg: opt(cols[9])?,
            eval_pose_deg: opt(cols[10])?,
            wall_time_s: f(cols[11])?,
        })
    }

    /// The deterministic portion of the row: everything except wall time.
    pub fn deterministic_csv(&self) -> String {
        let full = self.to_csv();
        full.rsplit_once(',').map(|(head, _)| head.to_string()).unwrap_or(full)
    }
}

pub struct MetricsWriter {
    file: std::fs::File,
    pub rows: Vec<MetricsRow>,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let mut file = std::fs::File::create(path)?;
        writeln!(file, "{METRICS_VERSION_LINE}")?;
        writeln!(file, "{METRICS_HEADER}")?;
        Ok(Self {
            file,
            rows: Vec::new(),
        })
    }

    pub fn append(&mut self, row: MetricsRow) -> Result<()> {
        writeln!(self.file, "{}", row.to_csv())?;
        self.rows.push(row);
        Ok(())
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    match lines.next() {
        Some(l) if l == METRICS_VERSION_LINE => {}
        other => {
            return Err(Error::Config(format!(
                "missing metrics version line, got {other:?}"
            )))
        }
    }
    match lines.next() {
        Some(l) if l == METRICS_HEADER => {}
        other => return Err(Error::Config(format!("bad metrics header: {other:?}"))),
    }
    lines.map(MetricsRow::from_csv).collect()
}
