//! Noise schedules, forward diffusion, DDIM stepping and the model contracts.

mod model;
mod process;
mod schedule;

pub use model::{training_loss, Codec, Conditioning, Denoiser, IdentityCodec};
pub use process::{
    ddim_sample, ddim_step, forward_diffuse, forward_step, predict_x0, LatentTensor,
};
pub(crate) use process::renoise;
pub use schedule::{NoiseSchedule, DEFAULT_BETA_END, DEFAULT_BETA_START, DEFAULT_TIMESTEPS};
