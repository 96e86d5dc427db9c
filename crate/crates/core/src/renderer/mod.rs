//! Latent diffusion-transformer neural renderer.
//!
//! A small strided convolutional autoencoder compresses the splatted feature
//! map into a 4-channel latent grid; the transformer stack predicts noise on
//! latents conditioned on the timestep embedding and shape code through
//! adaptive layer norm, with the encoded feature map concatenated
//! channel-wise. Rendering either runs the full reverse loop from seeded
//! noise or predicts the clean latent in a single pass from the zero state
//! (the training-time path).

mod block;
mod patch;

pub use block::{adaln_modulate, attention, attention_weights_head0, dit_block, register_block, LN_EPS};
pub use patch::{bit_identical, patchify, pos_embed, timestep_sinusoid, unpatchify};

use crate::error::{Error, Result};
use crate::numerics::conv;
use crate::numerics::ops;
use crate::numerics::rng::RngStream;
use crate::numerics::tape::{Tape, Var};
use crate::numerics::tensor::Tensor;
use crate::params::{Bindings, ParamStore};

pub const LATENT_CHANNELS: usize = 4;
const AE_HIDDEN: usize = 32;
const TEMB_DIM: usize = 64;

#[derive(Clone, Debug)]
pub struct DitConfig {
    pub depth: usize,
    pub heads: usize,
    pub token_dim: usize,
    pub patch: usize,
    pub diffusion_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Channels of the incoming feature map.
    pub feature_channels: usize,
    pub shape_dim: usize,
    /// Weight of the noise-prediction objective added to the image losses.
    pub epsilon_loss_weight: f64,
}

impl Default for DitConfig {
    fn default() -> Self {
        Self {
            depth: 6,
            heads: 8,
            token_dim: 128,
            patch: 2,
            diffusion_steps: 50,
            beta_start: 1e-4,
            beta_end: 0.25,
            feature_channels: 18,
            shape_dim: 16,
            epsilon_loss_weight: 1.0,
        }
    }
}

impl DitConfig {
    pub fn cond_dim(&self) -> usize {
        TEMB_DIM + self.shape_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.heads == 0 || self.token_dim % self.heads != 0 {
            return Err(Error::Config(
                "token dim must be divisible by the head count".into(),
            ));
        }
        if self.token_dim % 4 != 0 {
            return Err(Error::Config("token dim must be divisible by 4".into()));
        }
        if self.diffusion_steps == 0 {
            return Err(Error::Config("diffusion needs at least one step".into()));
        }
        let schedule = NoiseSchedule::new(self.diffusion_steps, self.beta_start, self.beta_end)?;
        let _ = schedule;
        Ok(())
    }
}

/// Linear beta schedule with cumulative products; alpha_bar(0) = 1 and
/// alpha_bar is strictly decreasing.
#[derive(Clone, Debug)]
pub struct NoiseSchedule {
    pub betas: Vec<f64>,
    /// alpha_bar[t] for t in 0..=T.
    pub alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Config("empty noise schedule".into()));
        }
        let betas: Vec<f64> = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps as f64 - 1.0)
                }
            })
            .collect();
        if betas.iter().any(|b| !(*b > 0.0 && *b < 1.0)) {
            return Err(Error::Config("beta values must lie strictly in (0, 1)".into()));
        }
        let mut alpha_bar = Vec::with_capacity(steps + 1);
        alpha_bar.push(1.0);
        for b in &betas {
            let next = alpha_bar.last().unwrap() * (1.0 - b);
            alpha_bar.push(next);
        }
        for w in alpha_bar.windows(2) {
            if !(w[1] < w[0]) || !w[1].is_finite() {
                return Err(Error::Config("alpha_bar must be strictly decreasing".into()));
            }
        }
        Ok(Self { betas, alpha_bar })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SamplerKind {
    Full,
    OneStep,
}

#[derive(Clone, Debug)]
pub struct DitRenderer {
    pub cfg: DitConfig,
    pub schedule: NoiseSchedule,
}

impl DitRenderer {
    pub fn new(cfg: DitConfig) -> Result<Self> {
        cfg.validate()?;
        let schedule = NoiseSchedule::new(cfg.diffusion_steps, cfg.beta_start, cfg.beta_end)?;
        Ok(Self { cfg, schedule })
    }

    pub fn register(&self, store: &mut ParamStore, rng: &RngStream) -> Result<()> {
        let c = &self.cfg;
        // Autoencoder: stride 4 then stride 2 (total 8); mirrored decoder.
        store.add_xavier("dit.ae.enc1.w", &[4, 4, c.feature_channels, AE_HIDDEN], rng)?;
        store.add_zeros("dit.ae.enc1.b", &[AE_HIDDEN])?;
        store.add_xavier("dit.ae.enc2.w", &[2, 2, AE_HIDDEN, LATENT_CHANNELS], rng)?;
        store.add_zeros("dit.ae.enc2.b", &[LATENT_CHANNELS])?;
        store.add_xavier("dit.ae.dec1.w", &[2, 2, LATENT_CHANNELS, AE_HIDDEN], rng)?;
        store.add_zeros("dit.ae.dec1.b", &[AE_HIDDEN])?;
        store.add_xavier("dit.ae.dec2.w", &[4, 4, AE_HIDDEN, 3], rng)?;
        store.add_zeros("dit.ae.dec2.b", &[3])?;
        // Patch embedding over x_t concatenated with the conditioning latent.
        let patch_in = c.patch * c.patch * 2 * LATENT_CHANNELS;
        store.add_xavier("dit.patch.w", &[patch_in, c.token_dim], rng)?;
        store.add_zeros("dit.patch.b", &[c.token_dim])?;
        // Timestep projection.
        store.add_xavier("dit.temb.w1", &[TEMB_DIM, TEMB_DIM], rng)?;
        store.add_zeros("dit.temb.b1", &[TEMB_DIM])?;
        store.add_xavier("dit.temb.w2", &[TEMB_DIM, TEMB_DIM], rng)?;
        store.add_zeros("dit.temb.b2", &[TEMB_DIM])?;
        for i in 0..c.depth {
            register_block(store, &format!("dit.block{i}"), c.token_dim, c.cond_dim(), rng)?;
        }
        // Final layer: adaptive norm plus a zero-initialized projection.
        store.add_zeros("dit.final.adaln.w", &[c.cond_dim(), 2 * c.token_dim])?;
        store.add_zeros("dit.final.adaln.b", &[2 * c.token_dim])?;
        store.add_zeros(
            "dit.final.w",
            &[c.token_dim, c.patch * c.patch * LATENT_CHANNELS],
        )?;
        store.add_zeros("dit.final.b", &[c.patch * c.patch * LATENT_CHANNELS])?;
        Ok(())
    }

    /// Strided conv encoder: (h, w, feature_channels) -> (h/8, w/8, 4).
    pub fn encode_latent(&self, binds: &Bindings, feature_map: &Var) -> Result<Var> {
        let dims = feature_map.dims();
        if dims.len() != 3 || dims[2] != self.cfg.feature_channels {
            return Err(Error::shape(
                "encode_latent",
                format!("(h, w, {})", self.cfg.feature_channels),
                format!("{:?}", dims),
            ));
        }
        if dims[0] % 8 != 0 || dims[1] % 8 != 0 {
            return Err(Error::domain(
                "encode_latent",
                format!("resolution {}x{} not divisible by stride 8", dims[0], dims[1]),
            ));
        }
        let h = ops::tanh(&conv::conv2d(
            feature_map,
            &binds.get("dit.ae.enc1.w"),
            &binds.get("dit.ae.enc1.b"),
            4,
        )?);
        conv::conv2d(&h, &binds.get("dit.ae.enc2.w"), &binds.get("dit.ae.enc2.b"), 2)
    }

    /// Mirrored decoder: (h, w, 4) -> (8h, 8w, 3) in [0, 1].
    pub fn decode_latent(&self, binds: &Bindings, latent: &Var) -> Result<Var> {
        let h = ops::tanh(&conv::conv2d_transpose(
            latent,
            &binds.get("dit.ae.dec1.w"),
            &binds.get("dit.ae.dec1.b"),
            2,
        )?);
        let out = conv::conv2d_transpose(
            &h,
            &binds.get("dit.ae.dec2.w"),
            &binds.get("dit.ae.dec2.b"),
            4,
        )?;
        Ok(ops::sigmoid(&out))
    }

    /// Learned timestep embedding: sinusoid then a two-layer projection.
    pub fn timestep_embedding(&self, tape: &Tape, binds: &Bindings, t: usize) -> Result<Var> {
        let sin = tape.constant(timestep_sinusoid(t, TEMB_DIM, self.cfg.diffusion_steps)?);
        let row = ops::reshape(&sin, &[1, TEMB_DIM])?;
        let h = ops::tanh(&ops::add_bias(
            &ops::matmul(&row, &binds.get("dit.temb.w1"))?,
            &binds.get("dit.temb.b1"),
        )?);
        let out = ops::add_bias(
            &ops::matmul(&h, &binds.get("dit.temb.w2"))?,
            &binds.get("dit.temb.b2"),
        )?;
        ops::reshape(&out, &[TEMB_DIM])
    }

    /// Conditioning vector: timestep embedding concatenated with the shape
    /// code.
    pub fn conditioning(
        &self,
        tape: &Tape,
        binds: &Bindings,
        t: usize,
        shape_code: &Var,
    ) -> Result<Var> {
        let temb = self.timestep_embedding(tape, binds, t)?;
        ops::concat(&[&temb, shape_code], 0)
    }

    /// Epsilon prediction: full transformer stack on the noisy latent
    /// concatenated with the conditioning latent.
    pub fn predict_noise(
        &self,
        tape: &Tape,
        binds: &Bindings,
        x_t: &Var,
        t: usize,
        shape_code: &Var,
        cond_latent: &Var,
    ) -> Result<Var> {
        let dims = x_t.dims();
        let (lh, lw) = (dims[0], dims[1]);
        let p = self.cfg.patch;
        let stacked = ops::concat(&[x_t, cond_latent], 2)?;
        let tokens_raw = patchify(&stacked, p)?;
        let tokens = ops::add_bias(
            &ops::matmul(&tokens_raw, &binds.get("dit.patch.w"))?,
            &binds.get("dit.patch.b"),
        )?;
        let (gh, gw) = (lh / p, lw / p);
        let pe = tape.constant(pos_embed(gh, gw, self.cfg.token_dim)?);
        let mut x = ops::add(&tokens, &pe)?;
        let cond = self.conditioning(tape, binds, t, shape_code)?;
        for i in 0..self.cfg.depth {
            x = dit_block(&x, &cond, binds, &format!("dit.block{i}"), self.cfg.heads)?;
        }
        let x = adaln_modulate(&x, &cond, binds, "dit.final.adaln")?;
        let out = ops::add_bias(
            &ops::matmul(&x, &binds.get("dit.final.w"))?,
            &binds.get("dit.final.b"),
        )?;
        unpatchify(&out, p, gh, gw, LATENT_CHANNELS)
    }

    /// Forward diffusion: x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) noise.
    pub fn forward_diffuse(&self, x0: &Var, t: usize, noise: &Var) -> Result<Var> {
        if t > self.cfg.diffusion_steps {
            return Err(Error::domain(
                "forward_diffuse",
                format!("t = {t} outside [0, {}]", self.cfg.diffusion_steps),
            ));
        }
        if x0.shape().as_slice() != noise.shape().as_slice() {
            return Err(Error::shape(
                "forward_diffuse",
                format!("{:?}", x0.shape()),
                format!("{:?}", noise.shape()),
            ));
        }
        let ab = self.schedule.alpha_bar[t];
        ops::add(
            &ops::mul_scalar(x0, ab.sqrt()),
            &ops::mul_scalar(noise, (1.0 - ab).sqrt()),
        )
    }

    /// Training-time mid step for the one-pass reconstruction.
    pub fn mid_step(&self) -> usize {
        (self.cfg.diffusion_steps / 2).max(1)
    }

    /// One-pass clean-latent prediction from the zero latent state:
    /// x0_hat = (x_t - sqrt(1 - abar) eps_hat) / sqrt(abar) at the fixed mid
    /// step with x_t = 0. Deterministic; with a zero-initialized stack the
    /// decoded output is the decoder's bias image.
    pub fn one_step_latent(
        &self,
        tape: &Tape,
        binds: &Bindings,
        cond_latent: &Var,
        shape_code: &Var,
    ) -> Result<Var> {
        let t = self.mid_step();
        let dims = cond_latent.dims();
        let zero = tape.constant(Tensor::zeros(&dims));
        let eps = self.predict_noise(tape, binds, &zero, t, shape_code, cond_latent)?;
        let ab = self.schedule.alpha_bar[t];
        Ok(ops::mul_scalar(&eps, -((1.0 - ab).sqrt()) / ab.sqrt()))
    }

    /// Full reverse loop from seeded noise, conditioned on the encoded
    /// feature map at every step.
    pub fn full_sample_latent(
        &self,
        tape: &Tape,
        binds: &Bindings,
        cond_latent: &Var,
        shape_code: &Var,
        rng: &RngStream,
    ) -> Result<Var> {
        let dims = cond_latent.dims();
        let n: usize = dims.iter().product();
        let steps = self.cfg.diffusion_steps;
        let mut x = tape.constant(
            Tensor::from_vec(&dims, rng.derive("init").normal_vec(n))?,
        );
        for t in (1..=steps).rev() {
            let eps = self.predict_noise(tape, binds, &x, t, shape_code, cond_latent)?;
            let beta = self.schedule.betas[t - 1];
            let ab_t = self.schedule.alpha_bar[t];
            let ab_prev = self.schedule.alpha_bar[t - 1];
            let alpha = 1.0 - beta;
            // mean = (x - beta / sqrt(1 - abar_t) eps) / sqrt(alpha)
            let mean = ops::mul_scalar(
                &ops::sub(&x, &ops::mul_scalar(&eps, beta / (1.0 - ab_t).sqrt()))?,
                1.0 / alpha.sqrt(),
            );
            if t > 1 {
                let sigma = ((1.0 - ab_prev) / (1.0 - ab_t) * beta).sqrt();
                let z = tape.constant(Tensor::from_vec(
                    &dims,
                    rng.derive(&format!("step{t}")).normal_vec(n),
                )?);
                x = ops::add(&mean, &ops::mul_scalar(&z, sigma))?;
            } else {
                x = mean;
            }
        }
        Ok(x)
    }

    /// Render a feature map to an image through the chosen sampler.
    pub fn render(
        &self,
        tape: &Tape,
        binds: &Bindings,
        feature_map: &Var,
        shape_code: &Var,
        sampler: SamplerKind,
        rng: &RngStream,
    ) -> Result<Var> {
        let cond_latent = self.encode_latent(binds, feature_map)?;
        let latent = match sampler {
            SamplerKind::OneStep => self.one_step_latent(tape, binds, &cond_latent, shape_code)?,
            SamplerKind::Full => {
                self.full_sample_latent(tape, binds, &cond_latent, shape_code, rng)?
            }
        };
        self.decode_latent(binds, &latent)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn micro_cfg() -> DitConfig {
        DitConfig {
            depth: 2,
            heads: 2,
            token_dim: 16,
            patch: 2,
            diffusion_steps: 10,
            feature_channels: 6,
            shape_dim: 4,
            ..Default::default()
        }
    }

    fn setup(cfg: DitConfig) -> (DitRenderer, ParamStore) {
        let r = DitRenderer::new(cfg).unwrap();
        let mut store = ParamStore::new();
        r.register(&mut store, &RngStream::new(11, 0)).unwrap();
        (r, store)
    }

    #[test]
    fn schedule_invariants_and_terminal_noise() {
        let cfg = DitConfig::default();
        let s = NoiseSchedule::new(cfg.diffusion_steps, cfg.beta_start, cfg.beta_end).unwrap();
        assert_eq!(s.alpha_bar[0], 1.0);
        for w in s.alpha_bar.windows(2) {
            assert!(w[1] < w[0] && w[1] > 0.0);
        }
        for b in &s.betas {
            assert!(*b > 0.0 && *b < 1.0);
        }
        // Terminal state is almost pure noise: the x0 coefficient is small.
        let coeff = s.alpha_bar[cfg.diffusion_steps].sqrt();
        assert!(coeff < 0.05, "sqrt(alpha_bar_T) = {coeff}");
    }

    #[test]
    fn encode_decode_shapes() {
        let (r, store) = setup(micro_cfg());
        let tape = Tape::new();
        let binds = store.bind(&tape, false);
        let rng = RngStream::new(3, 3);
        let fm = tape.constant(rng.uniform_tensor(&[16, 16, 6], 0.0, 1.0));
        let z = r.encode_latent(&binds, &fm).unwrap();
        assert_eq!(z.dims(), vec![2, 2, 4]);
        let img = r.decode_latent(&binds, &z).unwrap();
        assert_eq!(img.dims(), vec![16, 16, 3]);
        assert!(img.value().iter().all(|v| (0.0..=1.0).contains(v)));
        // Resolution not divisible by the stride is rejected.
        let bad = tape.constant(Tensor::zeros(&[12, 12, 6]));
        assert!(r.encode_latent(&binds, &bad).is_err());
    }

    #[test]
    fn decoder_zero_input_bias_image() {
        let (r, store) = setup(micro_cfg());
        let tape = Tape::new();
        let binds = store.bind(&tape, false);
        let z = tape.constant(Tensor::zeros(&[2, 2, 4]));
        let img = r.decode_latent(&binds, &z).unwrap();
        let v = img.value();
        // Constant per channel.
        for p in 1..16 * 16 {
            for c in 0..3 {
                assert!((v[p * 3 + c] - v[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_init_stack_predicts_zero_noise() {
        let (r, store) = setup(micro_cfg());
        let tape = Tape::new();
        let binds = store.bind(&tape, false);
        let rng = RngStream::new(4, 4);
        let x_t = tape.constant(rng.normal_tensor(&[4, 4, 4]));
        let cond = tape.constant(rng.derive("c").normal_tensor(&[4, 4, 4]));
        let shape = tape.constant(rng.derive("s").normal_tensor(&[4]));
        let eps = r.predict_noise(&tape, &binds, &x_t, 3, &shape, &cond).unwrap();
        assert_eq!(eps.dims(), vec![4, 4, 4]);
        assert!(eps.value().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn one_step_zero_init_gives_decoder_bias_image() {
        let (r, store) = setup(micro_cfg());
        let tape = Tape::new();
        let binds = store.bind(&tape, false);
        let rng = RngStream::new(5, 1);
        let fm = tape.constant(rng.uniform_tensor(&[16, 16, 6], 0.0, 1.0));
        let shape = tape.constant(Tensor::zeros(&[4]));
        let img = r
            .render(&tape, &binds, &fm, &shape, SamplerKind::OneStep, &rng)
            .unwrap();
        let z = tape.constant(Tensor::zeros(&[2, 2, 4]));
        let bias_img = r.decode_latent(&binds, &z).unwrap();
        assert_eq!(img.value().as_slice(), bias_img.value().as_slice());
    }

    #[test]
    fn full_and_one_step_shapes_match() {
        let (r, store) = setup(micro_cfg());
        let tape = Tape::new();
        let binds = store.bind(&tape, false);
        let rng = RngStream::new(6, 2);
        let fm = tape.constant(rng.uniform_tensor(&[16, 16, 6], 0.0, 1.0));
        let shape = tape.constant(rng.derive("s").normal_tensor(&[4]));
        let a = r
            .render(&tape, &binds, &fm, &shape, SamplerKind::Full, &rng.derive("r"))
            .unwrap();
        let b = r
            .render(&tape, &binds, &fm, &shape, SamplerKind::OneStep, &rng.derive("r"))
            .unwrap();
        assert_eq!(a.dims(), b.dims());
        assert_eq!(a.dims(), vec![16, 16, 3]);
    }

    #[test]
    fn forward_diffuse_endpoints_and_mean() {
        let (r, _) = setup(micro_cfg());
        let tape = Tape::new();
        let rng = RngStream::new(7, 3);
        let x0t = rng.uniform_tensor(&[2, 2, 4], -1.0, 1.0);
        let x0 = tape.constant(x0t.clone());
        let noise = tape.constant(rng.derive("n").normal_tensor(&[2, 2, 4]));
        // t = 0: identity.
        let xt = r.forward_diffuse(&x0, 0, &noise).unwrap();
        assert_eq!(xt.value().as_slice(), x0.value().as_slice());
        // Monte Carlo mean at t = 5 matches sqrt(abar) x0 within 3 sigma.
        let t = 5;
        let ab = r.schedule.alpha_bar[t];
        let draws = 1000;
        let mut mean = vec![0.0; 16];
        for d in 0..draws {
            let n = tape.constant(rng.derive(&format!("d{d}")).normal_tensor(&[2, 2, 4]));
            let xt = r.forward_diffuse(&x0, t, &n).unwrap();
            for (m, v) in mean.iter_mut().zip(xt.value().iter()) {
                *m += v / draws as f64;
            }
        }
        let sigma = ((1.0 - ab) / draws as f64).sqrt();
        for (m, x) in mean.iter().zip(x0t.data()) {
            let expect = ab.sqrt() * x;
            assert!(
                (m - expect).abs() < 3.0 * sigma + 1e-9,
                "mean {m} vs {expect} (3sigma {})",
                3.0 * sigma
            );
        }
    }

    #[test]
    fn render_deterministic_for_fixed_seed() {
        let (r, store) = setup(micro_cfg());
        let rng = RngStream::new(9, 9);
        let run = || {
            let tape = Tape::new();
            let binds = store.bind(&tape, false);
            let fm = tape.constant(RngStream::new(1, 1).uniform_tensor(&[16, 16, 6], 0.0, 1.0));
            let shape = tape.constant(Tensor::zeros(&[4]));
            r.render(&tape, &binds, &fm, &shape, SamplerKind::Full, &rng)
                .unwrap()
                .value()
                .to_vec()
        };
        let a = run();
        let b = run();
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn attention_weight_gradcheck_through_eps_loss() {
        use crate::numerics::gradcheck::grad_check_coords;
        let cfg = DitConfig {
            depth: 1,
            heads: 2,
            token_dim: 8,
            patch: 2,
            diffusion_steps: 6,
            feature_channels: 4,
            shape_dim: 2,
            ..Default::default()
        };
        let (r, mut store) = setup(cfg);
        // Non-trivial gates so gradients reach the attention weights.
        let rngv = RngStream::new(31, 1);
        for name in ["dit.block0.gate1.b", "dit.block0.gate2.b"] {
            store.set(name, &rngv.derive(name).uniform_tensor(&[8], 0.2, 0.8)).unwrap();
        }
        store
            .set("dit.final.w", &rngv.derive("fw").uniform_tensor(&[8, 16], -0.3, 0.3))
            .unwrap();
        let rng = RngStream::new(8, 8);
        let x_t = rng.derive("x").normal_tensor(&[4, 4, 4]);
        let cond = rng.derive("c").normal_tensor(&[4, 4, 4]);
        let shape = rng.derive("s").normal_tensor(&[2]);
        let target = rng.derive("t").normal_tensor(&[4 * 4 * 4]);
        let wq = store.get("dit.block0.attn.wq.w").unwrap();
        let coords: Vec<(usize, usize)> = (0..10).map(|i| (0, (i * 13) % wq.len())).collect();
        let report = grad_check_coords(
            |tape, vars| {
                let mut binds = store.bind(tape, false);
                binds.insert("dit.block0.attn.wq.w", vars[0].clone());
                let xt = tape.constant(x_t.clone());
                let cl = tape.constant(cond.clone());
                let sc = tape.constant(shape.clone());
                let eps = r.predict_noise(tape, &binds, &xt, 2, &sc, &cl)?;
                let tv = tape.constant(target.clone());
                let flat = ops::reshape(&eps, &[4 * 4 * 4])?;
                ops::mean(&ops::square(&ops::sub(&flat, &tv)?)?)
            },
            &[wq],
            &coords,
            1e-5,
        )
        .unwrap();
        assert!(report.passed(1e-3), "rel err {}", report.max_rel_err);
    }
}
