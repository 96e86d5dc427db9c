//! Desk-scale differentiable gaze-redirection engine.
//!
//! The pipeline fits a two-stream 3D Gaussian head model (face stream plus
//! eye stream) to a procedurally generated synthetic head scene, splats the
//! Gaussians into feature maps with a differentiable rasterizer, and renders
//! images with a latent diffusion-transformer conditioned through adaptive
//! layer normalization. Training mixes dataset pairs with weakly supervised
//! intermediate gaze angles and regularizes the deformation fields with an
//! orthogonality constraint on their first-layer representations.

pub mod error;
pub mod gaussians;
pub mod geometry;
pub mod losses;
pub mod imageio;
pub mod numerics;
pub mod params;
pub mod pipeline;
pub mod rasterizer;
pub mod renderer;
pub mod sampler;
pub mod scene;

pub use error::{Error, Result};
