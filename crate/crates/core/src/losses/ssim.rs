//! Windowed structural similarity.
//!
//! 7x7 uniform window, standard stabilizers C1 = 0.01^2 and C2 = 0.03^2,
//! averaged over all valid window positions and channels. Built from box
//! filters so it stays differentiable on the tape.

use crate::error::{Error, Result};
use crate::numerics::conv::box_filter;
use crate::numerics::ops;
use crate::numerics::tape::{Tape, Var};
use crate::numerics::tensor::Tensor;

pub const SSIM_WINDOW: usize = 7;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

/// SSIM between two images (h, w, c) in [0, 1], as a tape scalar in [-1, 1].
pub fn ssim(a: &Var, b: &Var) -> Result<Var> {
    let sa = a.shape();
    if sa.as_slice() != b.shape().as_slice() {
        return Err(Error::shape(
            "ssim",
            format!("{:?}", sa),
            format!("{:?}", b.shape()),
        ));
    }
    if sa.len() != 3 || sa[0] < SSIM_WINDOW || sa[1] < SSIM_WINDOW {
        return Err(Error::domain(
            "ssim",
            format!("image {:?} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window", sa),
        ));
    }
    let n = (SSIM_WINDOW * SSIM_WINDOW) as f64;
    let mu_a = ops::mul_scalar(&box_filter(a, SSIM_WINDOW)?, 1.0 / n);
    let mu_b = ops::mul_scalar(&box_filter(b, SSIM_WINDOW)?, 1.0 / n);
    let saa = ops::mul_scalar(&box_filter(&ops::mul(a, a)?, SSIM_WINDOW)?, 1.0 / n);
    let sbb = ops::mul_scalar(&box_filter(&ops::mul(b, b)?, SSIM_WINDOW)?, 1.0 / n);
    let sab = ops::mul_scalar(&box_filter(&ops::mul(a, b)?, SSIM_WINDOW)?, 1.0 / n);
    let var_a = ops::sub(&saa, &ops::mul(&mu_a, &mu_a)?)?;
    let var_b = ops::sub(&sbb, &ops::mul(&mu_b, &mu_b)?)?;
    let cov = ops::sub(&sab, &ops::mul(&mu_a, &mu_b)?)?;

    let num = ops::mul(
        &ops::add_scalar(&ops::mul_scalar(&ops::mul(&mu_a, &mu_b)?, 2.0), C1),
        &ops::add_scalar(&ops::mul_scalar(&cov, 2.0), C2),
    )?;
    let den = ops::mul(
        &ops::add_scalar(
            &ops::add(&ops::mul(&mu_a, &mu_a)?, &ops::mul(&mu_b, &mu_b)?)?,
            C1,
        ),
        &ops::add_scalar(&ops::add(&var_a, &var_b)?, C2),
    )?;
    ops::mean(&ops::div(&num, &den)?)
}

/// Host convenience on plain buffers.
pub fn ssim_host(a: &[f64], b: &[f64], h: usize, w: usize, c: usize) -> Result<f64> {
    let tape = Tape::new();
    let av = tape.constant(Tensor::from_vec(&[h, w, c], a.to_vec())?);
    let bv = tape.constant(Tensor::from_vec(&[h, w, c], b.to_vec())?);
    Ok(ssim(&av, &bv)?.scalar())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng::RngStream;

    #[test]
    fn self_similarity_is_one() {
        let rng = RngStream::new(3, 0);
        let img = rng.uniform_tensor(&[12, 12, 3], 0.0, 1.0);
        let tape = Tape::new();
        let a = tape.constant(img.clone());
        let b = tape.constant(img);
        let v = ssim(&a, &b).unwrap().scalar();
        assert!((v - 1.0).abs() < 1e-9, "{v}");
    }

    #[test]
    fn inverted_checkerboard_negative() {
        let (h, w) = (16, 16);
        let mut a = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                a[y * w + x] = ((x + y) % 2) as f64;
            }
        }
        let b: Vec<f64> = a.iter().map(|v| 1.0 - v).collect();
        let v = ssim_host(&a, &b, h, w, 1).unwrap();
        assert!(v < 0.0, "ssim {v}");
    }

    #[test]
    fn constant_level_shift_in_unit_interval() {
        // Two constants at different levels: structure/contrast terms are
        // neutral, luminance term < 1, so the value lies in (0, 1).
        let a = vec![0.3; 10 * 10];
        let b = vec![0.7; 10 * 10];
        let v = ssim_host(&a, &b, 10, 10, 1).unwrap();
        // Closed-form window evaluation: means constant, variances zero.
        let expect = ((2.0 * 0.3 * 0.7 + C1) / (0.09 + 0.49 + C1)) * (C2 / C2);
        assert!((v - expect).abs() < 1e-12);
        assert!(v > 0.0 && v < 1.0);
    }

    #[test]
    fn window_rejects_small_images() {
        let a = vec![0.0; 5 * 5];
        assert!(ssim_host(&a, &a, 5, 5, 1).is_err());
    }
}
