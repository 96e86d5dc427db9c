//! Pipeline mechanics: toggle matrix, determinism, checkpoint round trip,
//! and resume-exactness on a miniature configuration.

use gazesplat_core::numerics::rng::RngStream;
use gazesplat_core::pipeline::{
    load_checkpoint, prepare_with_estimator, read_metrics, save_checkpoint, train_end_to_end,
    MetricsWriter, Toggles, TrainConfig,
};
use gazesplat_core::scene::{EstimatorConfig, GazeEstimator};

fn smoke_config(steps: usize) -> TrainConfig {
    let mut cfg = TrainConfig::default();
    cfg.resolution = 32;
    cfg.face_count = 64;
    cfg.eye_count = 32;
    cfg.data.n = 24;
    cfg.data.train_frac = 0.7;
    cfg.data.val_frac = 0.15;
    cfg.dit.depth = 1;
    cfg.dit.token_dim = 32;
    cfg.dit.heads = 2;
    cfg.dit.diffusion_steps = 8;
    cfg.dit.shape_dim = 4;
    cfg.steps = steps;
    cfg.epochs = 2;
    cfg.batch = 2;
    cfg.log_interval = 1;
    cfg.seed = 11;
    cfg
}

fn smoke_estimator(cfg: &TrainConfig) -> GazeEstimator {
    GazeEstimator::new(
        EstimatorConfig::default(),
        (cfg.resolution, cfg.resolution),
        &RngStream::new(3, 3),
    )
}

#[test]
fn all_toggle_combinations_train() {
    let dir = tempfile::tempdir().unwrap();
    for bits in 0..8u8 {
        let mut cfg = smoke_config(6);
        cfg.toggles = Toggles {
            dit_renderer: bits & 1 != 0,
            ortho_loss: bits & 2 != 0,
            weak_supervision: bits & 4 != 0,
        };
        let before = {
            let est = smoke_estimator(&cfg);
            let art = prepare_with_estimator(&cfg, est).unwrap();
            art.model.store.total_values()
        };
        let est = smoke_estimator(&cfg);
        let mut art = prepare_with_estimator(&cfg, est).unwrap();
        // Toggling never changes parameter shapes.
        assert_eq!(art.model.store.total_values(), before);
        let path = dir.path().join(format!("m{bits}.csv"));
        let mut metrics = MetricsWriter::create(&path).unwrap();
        train_end_to_end(&mut art, &mut metrics).unwrap();
        let rows = read_metrics(&path).unwrap();
        assert!(!rows.is_empty());
        // Metrics stream is monotone in step and free of non-finite values.
        for w in rows.windows(2) {
            assert!(w[1].step > w[0].step);
        }
        for r in &rows {
            assert!(r.loss_total.is_finite());
            assert!(r.loss_image.is_finite());
            assert!(r.loss_ortho.is_finite());
        }
    }
}

#[test]
fn fixed_seed_metrics_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let run = |tag: &str| {
        let cfg = smoke_config(10);
        let est = smoke_estimator(&cfg);
        let mut art = prepare_with_estimator(&cfg, est).unwrap();
        let path = dir.path().join(format!("{tag}.csv"));
        let mut metrics = MetricsWriter::create(&path).unwrap();
        train_end_to_end(&mut art, &mut metrics).unwrap();
        read_metrics(&path)
            .unwrap()
            .iter()
            .map(|r| r.deterministic_csv())
            .collect::<Vec<_>>()
    };
    let a = run("a");
    let b = run("b");
    assert_eq!(a, b);
}

#[test]
fn checkpoint_roundtrip_and_resume_bit_exact() {
    let dir = tempfile::tempdir().unwrap();

    // Reference: train 8 + 10 steps straight through.
    let cfg_full = smoke_config(18);
    let est = smoke_estimator(&cfg_full);
    let mut reference = prepare_with_estimator(&cfg_full, est).unwrap();
    let mut ref_metrics = MetricsWriter::create(&dir.path().join("ref.csv")).unwrap();
    train_end_to_end(&mut reference, &mut ref_metrics).unwrap();

    // Interrupted: train 8 steps, save, load, resume to 18.
    let cfg_a = smoke_config(18);
    let est = smoke_estimator(&cfg_a);
    let mut art = prepare_with_estimator(&cfg_a, est).unwrap();
    let mut m1 = MetricsWriter::create(&dir.path().join("part1.csv")).unwrap();
    gazesplat_core::pipeline::train_until(&mut art, &mut m1, 8).unwrap();
    let ckpt_path = dir.path().join("mid.ckpt");
    save_checkpoint(&art, &ckpt_path).unwrap();

    // Round trip: save -> load -> save is byte-identical.
    let reloaded = load_checkpoint(&ckpt_path).unwrap();
    let ckpt_path2 = dir.path().join("mid2.ckpt");
    save_checkpoint(&reloaded, &ckpt_path2).unwrap();
    assert_eq!(
        std::fs::read(&ckpt_path).unwrap(),
        std::fs::read(&ckpt_path2).unwrap()
    );

    // Every parameter restored bit-exactly.
    for e in art.model.store.entries() {
        let restored = reloaded.model.store.get(&e.name).unwrap();
        assert!(e
            .data
            .iter()
            .zip(restored.data())
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    let mut resumed = reloaded;
    let mut m2 = MetricsWriter::create(&dir.path().join("part2.csv")).unwrap();
    train_end_to_end(&mut resumed, &mut m2).unwrap();
    assert_eq!(resumed.step, 18);

    // The resumed parameters match the straight-through run bit-exactly.
    for e in reference.model.store.entries() {
        let resumed_t = resumed.model.store.get(&e.name).unwrap();
        for (a, b) in e.data.iter().zip(resumed_t.data()) {
            assert_eq!(a.to_bits(), b.to_bits(), "parameter {} diverged", e.name);
        }
    }
    // And the metrics rows for the resumed segment match.
    let ref_rows = read_metrics(&dir.path().join("ref.csv")).unwrap();
    let resumed_rows = read_metrics(&dir.path().join("part2.csv")).unwrap();
    let tail: Vec<String> = ref_rows
        .iter()
        .filter(|r| r.step >= 8)
        .map(|r| r.deterministic_csv())
        .collect();
    let resumed_csv: Vec<String> = resumed_rows.iter().map(|r| r.deterministic_csv()).collect();
    assert_eq!(tail, resumed_csv);
}
