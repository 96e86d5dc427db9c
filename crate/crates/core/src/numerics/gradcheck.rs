//! Finite-difference gradient checking.
//!
//! Compares reverse-mode gradients against central differences for a
//! scalar-valued function of one or more tensor inputs. Relative error is
//! |a - n| / max(|a|, |n|, 1e-8).

use crate::error::{Error, Result};
use crate::numerics::tape::{Tape, Var};
use crate::numerics::tensor::Tensor;

/// Outcome of one gradient check.
#[derive(Debug, Clone)]
pub struct CheckReport {
    /// Maximum relative error over all coordinates of all inputs.
    pub max_rel_err: f64,
    /// (input index, coordinate) of the worst error.
    pub worst: Option<(usize, usize)>,
    /// Analytic and numeric value at the worst coordinate.
    pub worst_pair: (f64, f64),
    /// Coordinates where probing produced a non-finite function value.
    pub non_finite: Vec<(usize, usize)>,
    /// Number of coordinates checked.
    pub coords: usize,
}

impl CheckReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.non_finite.is_empty() && self.max_rel_err < tol
    }
}

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-8)
}

/// Check the gradient of `f` at `points`, probing every coordinate with
/// central differences of half-width `eps`. `eps` must lie in (0, 1e-3].
pub fn grad_check<F>(f: F, points: &[Tensor], eps: f64) -> Result<CheckReport>
where
    F: Fn(&Tape, &[Var]) -> Result<Var>,
{
    if !(eps > 0.0 && eps <= 1e-3) {
        return Err(Error::domain(
            "grad_check",
            format!("eps {eps} outside (0, 1e-3]"),
        ));
    }

    // Analytic pass.
    let tape = Tape::new();
    let vars: Vec<Var> = points.iter().map(|p| tape.var(p.clone())).collect();
    let out = f(&tape, &vars)?;
    if out.len() != 1 {
        return Err(Error::shape("grad_check", "scalar output", format!("{:?}", out.shape())));
    }
    let grads = tape.backward(&out)?;
    let analytic: Vec<Tensor> = vars.iter().map(|v| grads.get(v)).collect();

    let eval = |pts: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var> = pts.iter().map(|p| tape.var(p.clone())).collect();
        Ok(f(&tape, &vars)?.scalar())
    };

    let mut report = CheckReport {
        max_rel_err: 0.0,
        worst: None,
        worst_pair: (0.0, 0.0),
        non_finite: Vec::new(),
        coords: 0,
    };

    for (pi, point) in points.iter().enumerate() {
        for ci in 0..point.len() {
            let mut plus = points.to_vec();
            let mut data = point.to_vec();
            data[ci] += eps;
            plus[pi] = Tensor::from_vec(point.shape(), data.clone())?;
            let fp = eval(&plus)?;

            data[ci] = point.data()[ci] - eps;
            plus[pi] = Tensor::from_vec(point.shape(), data)?;
            let fm = eval(&plus)?;

            report.coords += 1;
            if !fp.is_finite() || !fm.is_finite() {
                report.non_finite.push((pi, ci));
                continue;
            }
            let numeric = (fp - fm) / (2.0 * eps);
            let a = analytic[pi].data()[ci];
            let e = rel_err(a, numeric);
            if e > report.max_rel_err {
                report.max_rel_err = e;
                report.worst = Some((pi, ci));
                report.worst_pair = (a, numeric);
            }
        }
    }
    Ok(report)
}

/// Like [`grad_check`] but only probes the listed coordinates of each input;
/// used when a full sweep would be too slow.
pub fn grad_check_coords<F>(
    f: F,
    points: &[Tensor],
    coords: &[(usize, usize)],
    eps: f64,
) -> Result<CheckReport>
where
    F: Fn(&Tape, &[Var]) -> Result<Var>,
{
    if !(eps > 0.0 && eps <= 1e-3) {
        return Err(Error::domain(
            "grad_check",
            format!("eps {eps} outside (0, 1e-3]"),
        ));
    }
    let tape = Tape::new();
    let vars: Vec<Var> = points.iter().map(|p| tape.var(p.clone())).collect();
    let out = f(&tape, &vars)?;
    let grads = tape.backward(&out)?;
    let analytic: Vec<Tensor> = vars.iter().map(|v| grads.get(v)).collect();

    let eval = |pts: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var> = pts.iter().map(|p| tape.var(p.clone())).collect();
        Ok(f(&tape, &vars)?.scalar())
    };

    let mut report = CheckReport {
        max_rel_err: 0.0,
        worst: None,
        worst_pair: (0.0, 0.0),
        non_finite: Vec::new(),
        coords: 0,
    };
    for &(pi, ci) in coords {
        let point = &points[pi];
        let mut probe = points.to_vec();
        let mut data = point.to_vec();
        data[ci] += eps;
        probe[pi] = Tensor::from_vec(point.shape(), data.clone())?;
        let fp = eval(&probe)?;
        data[ci] = point.data()[ci] - eps;
        probe[pi] = Tensor::from_vec(point.shape(), data)?;
        let fm = eval(&probe)?;
        report.coords += 1;
        if !fp.is_finite() || !fm.is_finite() {
            report.non_finite.push((pi, ci));
            continue;
        }
        let numeric = (fp - fm) / (2.0 * eps);
        let a = analytic[pi].data()[ci];
        let e = rel_err(a, numeric);
        if e > report.max_rel_err {
            report.max_rel_err = e;
            report.worst = Some((pi, ci));
            report.worst_pair = (a, numeric);
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::ops;
    use crate::numerics::rng::RngStream;

    #[test]
    fn quadratic_gradient() {
        // f(x) = x^2 at x = 3: analytic 6.
        let report = grad_check(
            |_, vars| ops::square(&vars[0]),
            &[Tensor::scalar(3.0)],
            1e-6,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-7, "rel err {}", report.max_rel_err);
        assert_eq!(report.worst_pair.0, 6.0);
    }

    #[test]
    fn sigmoid_sum_gradient() {
        let rng = RngStream::new(42, 0);
        let x = rng.normal_tensor(&[8]);
        let report = grad_check(
            |_, vars| ops::sum(&ops::sigmoid(&vars[0])),
            &[x],
            1e-6,
        )
        .unwrap();
        assert!(report.passed(1e-4), "rel err {}", report.max_rel_err);
    }

    #[test]
    fn eps_validated() {
        assert!(grad_check(|_, v| ops::sum(&v[0]), &[Tensor::scalar(1.0)], 0.0).is_err());
        assert!(grad_check(|_, v| ops::sum(&v[0]), &[Tensor::scalar(1.0)], 1e-2).is_err());
    }

    #[test]
    fn non_finite_probe_reported() {
        // f(x) = sqrt(x) at x = 0 probes x = -eps which is NaN.
        let report = grad_check(
            |_, vars| ops::sum(&ops::sqrt(&vars[0])),
            &[Tensor::scalar(0.0)],
            1e-6,
        )
        .unwrap();
        assert_eq!(report.non_finite, vec![(0, 0)]);
        assert!(!report.passed(1e-4));
    }
}
