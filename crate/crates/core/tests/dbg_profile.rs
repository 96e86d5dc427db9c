use std::time::Instant;

use gazesplat_core::gaussians::ControlCodes;
use gazesplat_core::numerics::ops;
use gazesplat_core::numerics::rng::RngStream;
use gazesplat_core::numerics::tape::Tape;
use gazesplat_core::pipeline::{prepare_with_estimator, TrainConfig};
use gazesplat_core::renderer::SamplerKind;
use gazesplat_core::scene::{EstimatorConfig, GazeEstimator};

#[test]
fn profile_step_components() {
    let mut cfg = TrainConfig::default();
    cfg.data.n = 40;
    let est = GazeEstimator::new(
        EstimatorConfig::default(),
        (cfg.resolution, cfg.resolution),
        &RngStream::new(3, 3),
    );
    let art = prepare_with_estimator(&cfg, est).unwrap();
    let model = &art.model;
    let codes = ControlCodes::neutral(cfg.d_tau, cfg.dit.shape_dim);
    let rng = RngStream::new(5, 5);

    let time = |label: &str, f: &mut dyn FnMut()| {
        let n = 5;
        let t0 = Instant::now();
        for _ in 0..n {
            f();
        }
        println!("{label}: {:.1} ms", t0.elapsed().as_secs_f64() * 1000.0 / n as f64);
    };

    time("deform (both streams)", &mut || {
        let tape = Tape::new();
        let binds = model.bind(&tape, true);
        model.deformed_sets(&binds, &codes, false).unwrap();
    });
    time("deform+splat fwd", &mut || {
        let tape = Tape::new();
        let binds = model.bind(&tape, true);
        let (f, e) = model.deformed_sets(&binds, &codes, false).unwrap();
        model.rasterize(&f, &e).unwrap();
    });
    time("full forward (one_step)", &mut || {
        let tape = Tape::new();
        let binds = model.bind(&tape, true);
        model
            .forward(&tape, &binds, &codes, SamplerKind::OneStep, &rng)
            .unwrap();
    });
    time("forward+image-backward", &mut || {
        let tape = Tape::new();
        let binds = model.bind(&tape, true);
        let out = model
            .forward(&tape, &binds, &codes, SamplerKind::OneStep, &rng)
            .unwrap();
        let loss = ops::mean(&ops::square(&out.image).unwrap()).unwrap();
        tape.backward(&loss).unwrap();
    });
    time("image_loss graph", &mut || {
        let tape = Tape::new();
        let s = &art.dataset.samples[0];
        let a = tape.var(RngStream::new(1, 1).uniform_tensor(&[64, 64, 3], 0.0, 1.0));
        let b = tape.constant(
            gazesplat_core::numerics::tensor::Tensor::from_vec(&[64, 64, 3], s.image.clone())
                .unwrap(),
        );
        let mut rep = gazesplat_core::losses::LossReport::default();
        let loss = gazesplat_core::losses::image_loss(
            &a, &b, &s.face_mask, &s.eye_mask, &cfg.loss, &model.perceptual, &mut rep,
        )
        .unwrap();
        tape.backward(&loss).unwrap();
    });
    time("gaze_loss (estimator) fwd+bwd", &mut || {
        let tape = Tape::new();
        let a = tape.var(RngStream::new(1, 1).uniform_tensor(&[64, 64, 3], 0.0, 1.0));
        let mut rep = gazesplat_core::losses::LossReport::default();
        let loss = gazesplat_core::losses::gaze_loss(
            &a,
            gazesplat_core::sampler::GazeAngle::new(0.1, 0.1),
            &model.estimator,
            &mut rep,
        )
        .unwrap();
        // Loss may be a constant if masked; guard.
        if loss.needs_grad() {
            tape.backward(&loss).unwrap();
        }
    });
    time("eps loss fwd+bwd", &mut || {
        let tape = Tape::new();
        let binds = model.bind(&tape, true);
        let z = tape.var(RngStream::new(2, 2).normal_tensor(&[8, 8, 4]));
        let loss = model.epsilon_loss(&tape, &binds, &z, &rng).unwrap();
        tape.backward(&loss).unwrap();
    });
}

#[test]
fn profile_matmul() {
    use gazesplat_core::numerics::ops;
    use gazesplat_core::numerics::tensor::Tensor;
    let rng = RngStream::new(1, 1);
    for (m, k, n) in [(512, 11, 64), (512, 64, 64), (16, 128, 128), (16, 128, 512)] {
        let a = rng.derive("a").normal_tensor(&[m, k]);
        let b = rng.derive("b").normal_tensor(&[k, n]);
        let t0 = Instant::now();
        let iters = 200;
        for _ in 0..iters {
            let tape = Tape::new();
            let av = tape.var(a.clone());
            let bv = tape.var(b.clone());
            let c = ops::matmul(&av, &bv).unwrap();
            let loss = ops::sum(&c).unwrap();
            tape.backward(&loss).unwrap();
        }
        let dt = t0.elapsed().as_secs_f64() / iters as f64;
        let flops = (m * k * n * 2 * 3) as f64; // fwd + two backward products
        println!(
            "matmul {m}x{k}x{n} fwd+bwd: {:.3} ms ({:.2} GFLOP/s)",
            dt * 1000.0,
            flops / dt / 1e9
        );
        let _ = Tensor::scalar(0.0);
    }
}
