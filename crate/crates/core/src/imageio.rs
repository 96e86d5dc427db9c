//! Portable image writers (binary PPM/PGM) for rendered output and debugging.

use std::io::Write;
use std::path::Path;

use crate::error::Result;

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Write an RGB image (h*w*3 values in [0,1], row major) as binary PPM.
pub fn write_ppm(path: &Path, rgb: &[f64], width: usize, height: usize) -> Result<()> {
    assert_eq!(rgb.len(), width * height * 3);
    let mut out = Vec::with_capacity(rgb.len() + 32);
    write!(out, "P6\n{width} {height}\n255\n")?;
    out.extend(rgb.iter().map(|v| to_byte(*v)));
    std::fs::write(path, out)?;
    Ok(())
}

/// Write a grayscale plane (values in [0,1]) as binary PGM.
pub fn write_pgm(path: &Path, gray: &[f64], width: usize, height: usize) -> Result<()> {
    assert_eq!(gray.len(), width * height);
    let mut out = Vec::with_capacity(gray.len() + 32);
    write!(out, "P5\n{width} {height}\n255\n")?;
    out.extend(gray.iter().map(|v| to_byte(*v)));
    std::fs::write(path, out)?;
    Ok(())
}

/// Write a grayscale plane min-max normalized to the full range.
pub fn write_pgm_normalized(path: &Path, plane: &[f64], width: usize, height: usize) -> Result<()> {
    let lo = plane.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = plane.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let norm: Vec<f64> = plane.iter().map(|v| (v - lo) / span).collect();
    write_pgm(path, &norm, width, height)
}
