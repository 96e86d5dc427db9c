//! The assembled avatar model: canonical Gaussian streams, deformation
//! fields, the splatting rasterizer, and the latent renderer, with every
//! trainable tensor living in one named parameter store.

use crate::error::{Error, Result};
use crate::gaussians::{
    blend_weights, capture_representations, eye_transform, face_deform, init_canonical,
    CanonicalInit, CanonicalVars, ControlCodes, DeformFieldParams, GaussianSet,
};
use crate::losses::PerceptualNet;
use crate::numerics::ops;
use crate::numerics::rng::RngStream;
use crate::numerics::tape::{Tape, Var};
use crate::params::{Bindings, ParamStore};
use crate::pipeline::config::TrainConfig;
use crate::rasterizer::{composite_streams, splat, FeatureImage};
use crate::renderer::{DitRenderer, SamplerKind};
use crate::scene::{GazeEstimator, SceneSpec};

pub struct GazeModel {
    pub cfg: TrainConfig,
    pub spec: SceneSpec,
    pub store: ParamStore,
    pub fields: DeformFieldParams,
    pub renderer: DitRenderer,
    pub init: CanonicalInit,
    pub perceptual: PerceptualNet,
    /// Frozen after the pre-fit stage.
    pub estimator: GazeEstimator,
}

/// Everything a training step needs from one forward pass.
pub struct ForwardOut {
    pub image: Var,
    pub feature_map: FeatureImage,
    pub cond_latent: Var,
    pub face_set: GaussianSet,
    pub eye_set: GaussianSet,
}

impl GazeModel {
    pub fn new(cfg: TrainConfig, estimator: GazeEstimator) -> Result<Self> {
        cfg.validate()?;
        let spec = cfg.scene_spec();
        let feature_dim = cfg.feature_channels_per_stream;
        let init = init_canonical(&spec, feature_dim)?;
        let fields = DeformFieldParams::new(feature_dim, cfg.d_tau);
        let mut dit_cfg = cfg.dit.clone();
        dit_cfg.feature_channels = cfg.composite_channels();
        let renderer = DitRenderer::new(dit_cfg)?;

        let rng = RngStream::new(cfg.seed, 0).derive("params");
        let mut store = ParamStore::new();
        for (stream, attrs) in [("face", &init.face), ("eye", &init.eye)] {
            store.add(&format!("canonical.{stream}.positions"), attrs.positions.clone())?;
            store.add(&format!("canonical.{stream}.features"), attrs.features.clone())?;
            store.add(&format!("canonical.{stream}.rotations"), attrs.rotations.clone())?;
            store.add(&format!("canonical.{stream}.log_scales"), attrs.log_scales.clone())?;
            store.add(
                &format!("canonical.{stream}.opacity_logits"),
                attrs.opacity_logits.clone(),
            )?;
        }
        for mlp in fields.all() {
            mlp.register(&mut store, &rng)?;
        }
        renderer.register(&mut store, &rng)?;
        store.add(
            "model.shape_code",
            rng.derive("shape_code").normal_tensor(&[cfg.dit.shape_dim]),
        )?;

        let perceptual = PerceptualNet::new(3, &RngStream::new(cfg.seed, 0).derive("perceptual"));
        Ok(Self {
            cfg,
            spec,
            store,
            fields,
            renderer,
            init,
            perceptual,
            estimator,
        })
    }

    pub fn bind(&self, tape: &Tape, trainable: bool) -> Bindings {
        self.store.bind(tape, trainable)
    }

    pub fn canonical_face(&self, binds: &Bindings) -> CanonicalVars {
        CanonicalVars::from_bindings(binds, "face", false)
    }

    pub fn canonical_eye(&self, binds: &Bindings) -> CanonicalVars {
        CanonicalVars::from_bindings(binds, "eye", true)
    }

    /// Deform both streams for the given codes.
    pub fn deformed_sets(
        &self,
        binds: &Bindings,
        codes: &ControlCodes,
        oracle_eye: bool,
    ) -> Result<(GaussianSet, GaussianSet)> {
        let face_canon = self.canonical_face(binds);
        let eye_canon = self.canonical_eye(binds);
        let weights = blend_weights(
            &face_canon.positions,
            &self.init.expr_landmarks,
            &self.init.pose_landmarks,
            self.init.landmark_sigma,
        )?;
        let face = face_deform(
            &face_canon,
            &codes.expression,
            &codes.pose_vector(),
            &self.fields,
            binds,
            &weights,
        )?;
        let eye = eye_transform(
            &eye_canon,
            &codes.expression,
            codes.gaze,
            &self.fields,
            binds,
            &self.spec.eye_centers,
            &self.init.eye_assignment,
            oracle_eye,
        )?;
        Ok((face, eye))
    }

    /// Splat both streams and concatenate them into the renderer input.
    pub fn rasterize(&self, face: &GaussianSet, eye: &GaussianSet) -> Result<FeatureImage> {
        let c = self.cfg.feature_channels_per_stream;
        let face_map = splat(&[face.splat_input()], &self.spec.camera, c)?;
        let eye_map = splat(&[eye.splat_input()], &self.spec.camera, c)?;
        composite_streams(&face_map, &eye_map)
    }

    pub fn shape_code(&self, binds: &Bindings) -> Var {
        binds.get("model.shape_code")
    }

    /// Full pipeline: deform, splat, render.
    ///
    /// With the renderer toggle off, the latent is decoded directly through
    /// the autoencoder, bypassing diffusion.
    pub fn forward(
        &self,
        tape: &Tape,
        binds: &Bindings,
        codes: &ControlCodes,
        sampler: SamplerKind,
        rng: &RngStream,
    ) -> Result<ForwardOut> {
        let (face, eye) = self.deformed_sets(binds, codes, false)?;
        let feature_map = self.rasterize(&face, &eye)?;
        let cond_latent = self.renderer.encode_latent(binds, &feature_map.values)?;
        let shape_code = self.shape_code(binds);
        let latent = if self.cfg.toggles.dit_renderer {
            match sampler {
                SamplerKind::OneStep => {
                    self.renderer
                        .one_step_latent(tape, binds, &cond_latent, &shape_code)?
                }
                SamplerKind::Full => self.renderer.full_sample_latent(
                    tape,
                    binds,
                    &cond_latent,
                    &shape_code,
                    rng,
                )?,
            }
        } else {
            cond_latent.clone()
        };
        let image = self.renderer.decode_latent(binds, &latent)?;
        Ok(ForwardOut {
            image,
            feature_map,
            cond_latent,
            face_set: face,
            eye_set: eye,
        })
    }

    /// Noise-prediction objective on the conditioning latent at a seeded
    /// timestep.
    pub fn epsilon_loss(
        &self,
        tape: &Tape,
        binds: &Bindings,
        cond_latent: &Var,
        rng: &RngStream,
    ) -> Result<Var> {
        let dims = cond_latent.dims();
        let n: usize = dims.iter().product();
        let t = 1 + rng.index_at(0, self.renderer.cfg.diffusion_steps);
        let noise = tape.constant(crate::numerics::tensor::Tensor::from_vec(
            &dims,
            rng.derive("eps_noise").normal_vec(n),
        )?);
        let x_t = self.renderer.forward_diffuse(cond_latent, t, &noise)?;
        let shape_code = self.shape_code(binds);
        let eps_hat = self
            .renderer
            .predict_noise(tape, binds, &x_t, t, &shape_code, cond_latent)?;
        ops::mean(&ops::square(&ops::sub(&eps_hat, &noise)?)?)
    }

    /// Captured first-layer representations for the orthogonality loss.
    pub fn capture(
        &self,
        tape: &Tape,
        binds: &Bindings,
        codes: &ControlCodes,
    ) -> Result<(Var, Var, Var)> {
        capture_representations(
            tape,
            &self.fields,
            binds,
            &self.store.get("canonical.face.positions")?,
            &self.store.get("canonical.eye.positions")?,
            codes.gaze,
            &codes.pose_vector(),
            &codes.expression,
        )
    }

    /// Per-group gradient norms after one backward pass; used to verify that
    /// every trainable group receives gradient.
    pub fn gradient_group_norms(
        &self,
        grads: &mut crate::numerics::tape::Grads,
        binds: &Bindings,
    ) -> Vec<(String, f64)> {
        let mut groups: std::collections::BTreeMap<String, f64> = Default::default();
        for name in self.store.names() {
            let var = binds.get(name);
            let group = name.split('.').take(2).collect::<Vec<_>>().join(".");
            let entry = groups.entry(group).or_insert(0.0);
            if let Some(g) = grads.take(&var) {
                *entry += g.iter().map(|v| v * v).sum::<f64>();
            }
        }
        groups
            .into_iter()
            .map(|(k, v)| (k, v.sqrt()))
            .collect()
    }

    /// Render with explicit control codes at evaluation time.
    pub fn render_codes(
        &self,
        codes: &ControlCodes,
        sampler: SamplerKind,
        rng: &RngStream,
    ) -> Result<Vec<f64>> {
        let tape = Tape::new();
        let binds = self.bind(&tape, false);
        let out = self.forward(&tape, &binds, codes, sampler, rng)?;
        let img = out.image.value().to_vec();
        if !img.iter().all(|v| v.is_finite()) {
            return Err(Error::Train("non-finite rendered image".into()));
        }
        Ok(img)
    }
}
