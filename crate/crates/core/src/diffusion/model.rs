use ndarray::{Array4, Zip};

use super::process::{forward_diffuse, LatentTensor};
use super::schedule::NoiseSchedule;
use crate::error::{Error, Result};

/// Conditioning signal handed to a denoiser (encoded event stacks).
pub type Conditioning = Array4<f64>;

/// A noise-prediction model `eps(x_tau; c, tau)`.
///
/// Implementations must return a tensor of `x`'s shape, finite whenever the
/// inputs are finite.
pub trait Denoiser {
    fn evaluate(
        &self,
        x: &LatentTensor,
        cond: &Conditioning,
        tau: usize,
        guidance_scale: f64,
    ) -> Result<LatentTensor>;

    /// Whether `evaluate` may be called from several threads at once.
    fn is_concurrent(&self) -> bool {
        false
    }
}

/// Maps frames (`N x C x H x W`, linear intensity) to latents and back.
pub trait Codec {
    fn encode(&self, frames: &Array4<f64>) -> Result<LatentTensor>;

    fn decode(&self, latent: &LatentTensor) -> Result<Array4<f64>>;

    /// Latent `(channels, height, width)` for frames of the given geometry.
    fn latent_dims(&self, channels: usize, height: usize, width: usize) -> (usize, usize, usize);

    /// `decode(encode(frames)) == frames` exactly.
    fn is_lossless(&self) -> bool;

    fn is_differentiable(&self) -> bool {
        false
    }

    /// Pulls a gradient with respect to the decoded frames back to the latent.
    fn decode_vjp(&self, latent: &LatentTensor, upstream: &Array4<f64>) -> Result<LatentTensor> {
        let _ = (latent, upstream);
        Err(Error::UnsupportedCodec(
            "codec provides no decoder gradient".into(),
        ))
    }
}

/// Pixel-space diffusion: the latent is the frame tensor itself.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityCodec;

impl Codec for IdentityCodec {
    fn encode(&self, frames: &Array4<f64>) -> Result<LatentTensor> {
        Ok(frames.clone())
    }

    fn decode(&self, latent: &LatentTensor) -> Result<Array4<f64>> {
        Ok(latent.clone())
    }

    fn latent_dims(&self, channels: usize, height: usize, width: usize) -> (usize, usize, usize) {
        (channels, height, width)
    }

    fn is_lossless(&self) -> bool {
        true
    }

    fn is_differentiable(&self) -> bool {
        true
    }

    fn decode_vjp(&self, latent: &LatentTensor, upstream: &Array4<f64>) -> Result<LatentTensor> {
        if latent.dim() != upstream.dim() {
            return Err(Error::input("gradient shape does not match latent"));
        }
        Ok(upstream.clone())
    }
}

/// Element-mean squared error between `noise` and the model's prediction at
/// `forward_diffuse(x0, tau, noise)`.
pub fn training_loss(
    denoiser: &dyn Denoiser,
    x0: &LatentTensor,
    cond: &Conditioning,
    tau: usize,
    noise: &LatentTensor,
    schedule: &NoiseSchedule,
) -> Result<f64> {
    let x_t = forward_diffuse(x0, tau, noise, schedule)?;
    let predicted = denoiser.evaluate(&x_t, cond, tau, 1.0)?;
    if predicted.dim() != noise.dim() {
        return Err(Error::input("denoiser output shape differs from its input"));
    }
    let sum = Zip::from(noise)
        .and(&predicted)
        .fold(0.0, |acc, &e, &p| acc + (e - p) * (e - p));
    Ok(sum / noise.len() as f64)
}
