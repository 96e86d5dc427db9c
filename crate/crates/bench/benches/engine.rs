//! Benchmarks for the hot paths: splatting, the transformer stack, and the
//! convolutional autoencoder.

use criterion::{criterion_group, criterion_main, Criterion};

use gazesplat_core::gaussians::{init_canonical, CanonicalVars};
use gazesplat_core::numerics::rng::RngStream;
use gazesplat_core::numerics::tape::Tape;
use gazesplat_core::params::ParamStore;
use gazesplat_core::rasterizer::splat;
use gazesplat_core::renderer::{DitConfig, DitRenderer};
use gazesplat_core::scene::SceneSpec;

fn bench_splat(c: &mut Criterion) {
    let spec = SceneSpec::default();
    let init = init_canonical(&spec, 8).unwrap();
    c.bench_function("splat_face_stream_64px", |b| {
        b.iter(|| {
            let tape = Tape::new();
            let face = CanonicalVars::constants(&tape, &init.face).as_set().unwrap();
            splat(&[face.splat_input()], &spec.camera, 8).unwrap()
        })
    });
    c.bench_function("splat_forward_backward_64px", |b| {
        b.iter(|| {
            let tape = Tape::new();
            let canon = CanonicalVars {
                positions: tape.var(init.face.positions.clone()),
                features: tape.var(init.face.features.clone()),
                rotations_raw: tape.var(init.face.rotations.clone()),
                log_scales: tape.var(init.face.log_scales.clone()),
                opacity_logits: tape.var(init.face.opacity_logits.clone()),
                isotropic: false,
            };
            let set = canon.as_set().unwrap();
            let img = splat(&[set.splat_input()], &spec.camera, 8).unwrap();
            let loss = gazesplat_core::numerics::ops::mean(&img.values).unwrap();
            tape.backward(&loss).unwrap()
        })
    });
}

fn bench_renderer(c: &mut Criterion) {
    let cfg = DitConfig::default();
    let renderer = DitRenderer::new(cfg).unwrap();
    let mut store = ParamStore::new();
    let rng = RngStream::new(1, 0);
    renderer.register(&mut store, &rng).unwrap();
    c.bench_function("dit_predict_noise_8x8", |b| {
        b.iter(|| {
            let tape = Tape::new();
            let binds = store.bind(&tape, false);
            let x = tape.constant(rng.derive("x").normal_tensor(&[8, 8, 4]));
            let cond = tape.constant(rng.derive("c").normal_tensor(&[8, 8, 4]));
            let shape = tape.constant(rng.derive("s").normal_tensor(&[16]));
            renderer
                .predict_noise(&tape, &binds, &x, 10, &shape, &cond)
                .unwrap()
        })
    });
    c.bench_function("autoencoder_roundtrip_64px", |b| {
        b.iter(|| {
            let tape = Tape::new();
            let binds = store.bind(&tape, false);
            let fm = tape.constant(rng.derive("fm").uniform_tensor(&[64, 64, 18], 0.0, 1.0));
            let z = renderer.encode_latent(&binds, &fm).unwrap();
            renderer.decode_latent(&binds, &z).unwrap()
        })
    });
}

criterion_group!(benches, bench_splat, bench_renderer);
criterion_main!(benches);
