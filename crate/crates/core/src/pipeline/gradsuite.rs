//! The gradient verification suite: finite-difference checks for every
//! primitive and for each composite stage, runnable from the CLI and asserted
//! by the acceptance tests.

use crate::error::Result;
use crate::losses::{self, LossReport, LossWeights, PerceptualNet};
use crate::numerics::conv;
use crate::numerics::gradcheck::{grad_check, grad_check_coords, CheckReport};
use crate::numerics::ops;
use crate::numerics::rng::RngStream;
use crate::numerics::tensor::Tensor;
use crate::params::ParamStore;
use crate::rasterizer::{splat, Camera, SplatInput};
use crate::renderer::{register_block, dit_block};
use crate::scene::{EstimatorConfig, GazeEstimator};

#[derive(Clone, Debug)]
pub struct SuiteEntry {
    pub module: &'static str,
    pub name: String,
    pub tolerance: f64,
    pub max_rel_err: f64,
    pub coords: usize,
    pub passed: bool,
}

fn record(out: &mut Vec<SuiteEntry>, module: &'static str, name: &str, tol: f64, report: &CheckReport) {
    out.push(SuiteEntry {
        module,
        name: name.to_string(),
        tolerance: tol,
        max_rel_err: report.max_rel_err,
        coords: report.coords,
        passed: report.passed(tol),
    });
}

/// Check one primitive at `points` random draws.
fn primitive(
    out: &mut Vec<SuiteEntry>,
    name: &str,
    points: usize,
    rng: &RngStream,
    f: impl Fn(&crate::numerics::tape::Tape, &[crate::numerics::tape::Var]) -> Result<crate::numerics::tape::Var>
        + Copy,
    make_inputs: impl Fn(&RngStream) -> Vec<Tensor>,
) -> Result<()> {
    let mut worst = CheckReport {
        max_rel_err: 0.0,
        worst: None,
        worst_pair: (0.0, 0.0),
        non_finite: Vec::new(),
        coords: 0,
    };
    for i in 0..points {
        let inputs = make_inputs(&rng.derive(&format!("{name}{i}")));
        let report = grad_check(f, &inputs, 1e-6)?;
        worst.coords += report.coords;
        worst.non_finite.extend(report.non_finite);
        if report.max_rel_err > worst.max_rel_err {
            worst.max_rel_err = report.max_rel_err;
            worst.worst = report.worst;
        }
    }
    record(out, "numerics", name, 1e-4, &worst);
    Ok(())
}

/// Finite-difference checks for every numerics primitive at 20 seeded points.
pub fn numerics_suite(rng: &RngStream) -> Result<Vec<SuiteEntry>> {
    let mut out = Vec::new();
    let n = 20;
    let pair = |r: &RngStream| vec![r.derive("a").normal_tensor(&[3, 4]), r.derive("b").normal_tensor(&[3, 4])];
    let single = |r: &RngStream| vec![r.derive("a").normal_tensor(&[3, 4])];
    let positive = |r: &RngStream| vec![r.derive("a").uniform_tensor(&[3, 4], 0.5, 2.0)];

    primitive(&mut out, "add", n, rng, |_, v| ops::sum(&ops::add(&v[0], &v[1])?), pair)?;
    primitive(&mut out, "sub", n, rng, |_, v| ops::sum(&ops::sub(&v[0], &v[1])?), pair)?;
    primitive(&mut out, "mul", n, rng, |_, v| ops::sum(&ops::mul(&v[0], &v[1])?), pair)?;
    primitive(&mut out, "div", n, rng, |_, v| ops::sum(&ops::div(&v[0], &v[1])?), |r| {
        vec![
            r.derive("a").normal_tensor(&[3, 4]),
            r.derive("b").uniform_tensor(&[3, 4], 0.5, 2.0),
        ]
    })?;
    primitive(&mut out, "matmul", n, rng, |_, v| ops::sum(&ops::matmul(&v[0], &v[1])?), |r| {
        vec![
            r.derive("a").normal_tensor(&[3, 4]),
            r.derive("b").normal_tensor(&[4, 2]),
        ]
    })?;
    primitive(&mut out, "exp", n, rng, |_, v| ops::sum(&ops::exp(&v[0])), single)?;
    primitive(&mut out, "sigmoid", n, rng, |_, v| ops::sum(&ops::sigmoid(&v[0])), single)?;
    primitive(&mut out, "tanh", n, rng, |_, v| ops::sum(&ops::tanh(&v[0])), single)?;
    primitive(&mut out, "sin", n, rng, |_, v| ops::sum(&ops::sin(&v[0])), single)?;
    primitive(&mut out, "cos", n, rng, |_, v| ops::sum(&ops::cos(&v[0])), single)?;
    primitive(&mut out, "sqrt", n, rng, |_, v| ops::sum(&ops::sqrt(&v[0])), positive)?;
    primitive(&mut out, "recip", n, rng, |_, v| ops::sum(&ops::recip(&v[0])), positive)?;
    primitive(&mut out, "abs", n, rng, |_, v| ops::sum(&ops::abs(&v[0])), single)?;
    primitive(&mut out, "acos", n, rng, |_, v| ops::sum(&ops::acos(&v[0])), |r| {
        vec![r.derive("a").uniform_tensor(&[3, 4], -0.8, 0.8)]
    })?;
    primitive(&mut out, "clamp", n, rng, |_, v| ops::sum(&ops::clamp(&v[0], -0.5, 0.5)), single)?;
    primitive(&mut out, "softmax", n, rng, |t, v| {
        let s = ops::softmax(&v[0], 1)?;
        let w = t.constant(Tensor::from_fn(&[3, 4], |i| (i as f64 * 0.7).sin()));
        ops::dot(&s, &w)
    }, single)?;
    primitive(&mut out, "layer_norm", n, rng, |t, v| {
        let s = ops::layer_norm(&v[0], 1e-5)?;
        let w = t.constant(Tensor::from_fn(&[3, 4], |i| (i as f64 * 0.3).cos()));
        ops::dot(&s, &w)
    }, single)?;
    primitive(&mut out, "sum_axis", n, rng, |t, v| {
        let s = ops::sum_axis(&v[0], 0)?;
        let w = t.constant(Tensor::from_fn(&[4], |i| 1.0 + i as f64));
        ops::dot(&s, &w)
    }, single)?;
    primitive(&mut out, "mean", n, rng, |_, v| ops::mean(&v[0]), single)?;
    primitive(&mut out, "concat", n, rng, |t, v| {
        let c = ops::concat(&[&v[0], &v[1]], 1)?;
        let w = t.constant(Tensor::from_fn(&[3, 8], |i| 0.3 + ((i % 5) as f64) * 0.45));
        ops::dot(&c, &w)
    }, pair)?;
    primitive(&mut out, "narrow", n, rng, |_, v| ops::sum(&ops::narrow(&v[0], 1, 1, 2)?), single)?;
    primitive(&mut out, "reshape", n, rng, |t, v| {
        let r = ops::reshape(&v[0], &[4, 3])?;
        let w = t.constant(Tensor::from_fn(&[4, 3], |i| i as f64 * 0.1));
        ops::dot(&r, &w)
    }, single)?;
    primitive(&mut out, "transpose2d", n, rng, |t, v| {
        let r = ops::transpose2d(&v[0])?;
        let w = t.constant(Tensor::from_fn(&[4, 3], |i| (i as f64).sqrt()));
        ops::dot(&r, &w)
    }, single)?;
    primitive(&mut out, "add_bias", n, rng, |_, v| ops::sum(&ops::add_bias(&v[0], &v[1])?), |r| {
        vec![r.derive("a").normal_tensor(&[3, 4]), r.derive("b").normal_tensor(&[4])]
    })?;
    primitive(&mut out, "mul_bias", n, rng, |_, v| ops::sum(&ops::mul_bias(&v[0], &v[1])?), |r| {
        vec![r.derive("a").normal_tensor(&[3, 4]), r.derive("b").normal_tensor(&[4])]
    })?;
    primitive(&mut out, "scale_rows", n, rng, |_, v| ops::sum(&ops::scale_rows(&v[0], &v[1])?), |r| {
        vec![r.derive("a").normal_tensor(&[3, 4]), r.derive("b").normal_tensor(&[3])]
    })?;
    primitive(&mut out, "tile_rows", n, rng, |t, v| {
        let r = ops::tile_rows(&v[0], 5)?;
        let w = t.constant(Tensor::from_fn(&[5, 4], |i| (i as f64 * 0.21).sin()));
        ops::dot(&r, &w)
    }, |r| vec![r.derive("a").normal_tensor(&[4])])?;
    primitive(&mut out, "conv2d", n, rng, |_, v| {
        ops::sum(&conv::conv2d(&v[0], &v[1], &v[2], 2)?)
    }, |r| {
        vec![
            r.derive("x").normal_tensor(&[6, 6, 2]),
            r.derive("w").normal_tensor(&[3, 3, 2, 3]),
            r.derive("b").normal_tensor(&[3]),
        ]
    })?;
    primitive(&mut out, "conv2d_transpose", n, rng, |_, v| {
        ops::sum(&conv::conv2d_transpose(&v[0], &v[1], &v[2], 2)?)
    }, |r| {
        vec![
            r.derive("x").normal_tensor(&[3, 3, 2]),
            r.derive("w").normal_tensor(&[2, 2, 2, 3]),
            r.derive("b").normal_tensor(&[3]),
        ]
    })?;
    primitive(&mut out, "box_filter", n, rng, |t, v| {
        let f = conv::box_filter(&v[0], 3)?;
        let w = t.constant(Tensor::from_fn(&[4, 4, 2], |i| 0.3 + ((i * 7 % 5) as f64) * 0.45));
        ops::dot(&f, &w)
    }, |r| vec![r.derive("x").normal_tensor(&[6, 6, 2])])?;
    Ok(out)
}

/// Splatting, the conditioned transformer stack, and every loss.
pub fn composite_suite(rng: &RngStream) -> Result<Vec<SuiteEntry>> {
    let mut out = Vec::new();

    // Rasterizer splat on a micro scene, anisotropic.
    {
        let cam = Camera::front_at(3.0, 20.0, 8, 8);
        let r = rng.derive("splat");
        let nsp = 3;
        let mut quats = r.derive("q").uniform_tensor(&[nsp, 4], -1.0, 1.0).to_vec();
        for q in quats.chunks_mut(4) {
            let norm = q.iter().map(|v| v * v).sum::<f64>().sqrt();
            q.iter_mut().for_each(|v| *v /= norm);
        }
        let inputs = vec![
            r.derive("p").uniform_tensor(&[nsp, 3], -0.4, 0.4),
            r.derive("f").uniform_tensor(&[nsp, 2], 0.1, 0.9),
            Tensor::from_vec(&[nsp, 4], quats)?,
            r.derive("s").uniform_tensor(&[nsp, 3], 0.2, 0.5),
            r.derive("o").uniform_tensor(&[nsp], 0.3, 0.7),
        ];
        let weights = r.derive("w").uniform_tensor(&[8 * 8 * 2], -1.0, 1.0);
        let report = grad_check(
            |tape, vars| {
                let input = SplatInput {
                    positions: &vars[0],
                    features: &vars[1],
                    rotations: &vars[2],
                    scales: &vars[3],
                    opacities: &vars[4],
                    isotropic: false,
                };
                let img = splat(&[input], &cam, 2)?;
                let flat = ops::reshape(&img.values, &[8 * 8 * 2])?;
                ops::dot(&flat, &tape.constant(weights.clone()))
            },
            &inputs,
            1e-5,
        )?;
        record(&mut out, "rasterizer", "splat", 1e-3, &report);
    }

    // Conditioned transformer stack: gradients through two blocks.
    {
        let r = rng.derive("adaln");
        let dim = 8;
        let cond_dim = 5;
        let mut store = ParamStore::new();
        register_block(&mut store, "b0", dim, cond_dim, &r)?;
        register_block(&mut store, "b1", dim, cond_dim, &r.derive("second"))?;
        // Non-zero modulation and gates so everything participates.
        for name in store.names().map(String::from).collect::<Vec<_>>() {
            if name.contains("adaln") || name.contains("gate") {
                let shape = store.get(&name)?.shape().to_vec();
                store.set(&name, &r.derive(&name).uniform_tensor(&shape, -0.3, 0.3))?;
            }
        }
        let tokens = r.derive("x").normal_tensor(&[4, dim]);
        let cond = r.derive("c").normal_tensor(&[cond_dim]);
        let wq = store.get("b0.attn.wq.w")?;
        let target = r.derive("t").normal_tensor(&[4 * dim]);
        let report = grad_check(
            |tape, vars| {
                let mut binds = store.bind(tape, false);
                binds.insert("b0.attn.wq.w", vars[1].clone());
                let c = tape.constant(cond.clone());
                let mut x = vars[0].clone();
                x = dit_block(&x, &c, &binds, "b0", 2)?;
                x = dit_block(&x, &c, &binds, "b1", 2)?;
                let flat = ops::reshape(&x, &[4 * dim])?;
                ops::mean(&ops::square(&ops::sub(&flat, &tape.constant(target.clone()))?)?)
            },
            &[tokens, wq],
            1e-6,
        )?;
        record(&mut out, "renderer", "adaln_stack", 1e-3, &report);
    }

    // Image loss.
    {
        let r = rng.derive("image_loss");
        let net = PerceptualNet::new(3, &r.derive("perc"));
        let a = r.derive("a").uniform_tensor(&[16, 16, 3], 0.2, 0.8);
        let b = r.derive("b").uniform_tensor(&[16, 16, 3], 0.2, 0.8);
        let mut face = vec![1u8; 256];
        let mut eye = vec![0u8; 256];
        for y in 6..10 {
            for x in 5..11 {
                face[y * 16 + x] = 0;
                eye[y * 16 + x] = 1;
            }
        }
        let report = grad_check(
            |_, vars| {
                let mut rep = LossReport::default();
                losses::image_loss(
                    &vars[0],
                    &vars[1],
                    &face,
                    &eye,
                    &LossWeights::default(),
                    &net,
                    &mut rep,
                )
            },
            &[a, b],
            1e-6,
        )?;
        record(&mut out, "losses", "image_loss", 1e-3, &report);
    }

    // Orthogonality loss.
    {
        let r = rng.derive("ortho");
        let report = grad_check(
            |_, vars| {
                let mut rep = LossReport::default();
                losses::ortho_loss(&vars[0], &vars[1], &vars[2], 1.0, 1.0, &mut rep)
            },
            &[
                r.derive("g").normal_tensor(&[8]),
                r.derive("p").normal_tensor(&[8]),
                r.derive("e").normal_tensor(&[8]),
            ],
            1e-6,
        )?;
        record(&mut out, "losses", "ortho_loss", 1e-3, &report);
    }

    // Gaze loss through the estimator, spot-checked on pixels.
    {
        let r = rng.derive("gaze_loss");
        let est = GazeEstimator::new(EstimatorConfig::default(), (32, 32), &r.derive("est"));
        let img = r.derive("img").uniform_tensor(&[32, 32, 3], 0.1, 0.9);
        let coords: Vec<(usize, usize)> = (0..8).map(|i| (0, (i * 389) % (32 * 32 * 3))).collect();
        let target = crate::sampler::GazeAngle::from_degrees(6.0, -4.0);
        let report = grad_check_coords(
            |_, vars| {
                let mut rep = LossReport::default();
                losses::gaze_loss(&vars[0], target, &est, &mut rep)
            },
            &[img],
            &coords,
            1e-6,
        )?;
        record(&mut out, "losses", "gaze_loss", 1e-3, &report);
    }

    // SSIM and perceptual distance as standalone scalars.
    {
        let r = rng.derive("ssim");
        let report = grad_check(
            |_, vars| losses::ssim(&vars[0], &vars[1]),
            &[
                r.derive("a").uniform_tensor(&[10, 10, 2], 0.2, 0.8),
                r.derive("b").uniform_tensor(&[10, 10, 2], 0.2, 0.8),
            ],
            1e-6,
        )?;
        record(&mut out, "losses", "ssim", 1e-3, &report);

        let net = PerceptualNet::new(2, &r.derive("pnet"));
        let report = grad_check(
            |_, vars| net.distance(&vars[0], &vars[1]),
            &[
                r.derive("pa").uniform_tensor(&[12, 12, 2], 0.2, 0.8),
                r.derive("pb").uniform_tensor(&[12, 12, 2], 0.2, 0.8),
            ],
            1e-6,
        )?;
        record(&mut out, "losses", "perceptual", 1e-3, &report);
    }

    Ok(out)
}

/// Run the entire suite.
pub fn run_all(seed: u64) -> Result<Vec<SuiteEntry>> {
    let rng = RngStream::new(seed, 0).derive("gradsuite");
    let mut out = numerics_suite(&rng)?;
    out.extend(composite_suite(&rng)?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_suite_passes() {
        let entries = run_all(7).unwrap();
        assert!(entries.len() >= 30);
        for e in &entries {
            assert!(
                e.passed,
                "{}::{} rel err {} over tolerance {}",
                e.module, e.name, e.max_rel_err, e.tolerance
            );
        }
    }
}
