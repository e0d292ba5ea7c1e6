//! Event-camera simulation and event-guided diffusion sampling.
//!
//! Frames go in, events come out of [`events::simulate_events`], and
//! [`guided::egs_sample`] turns event stacks back into frames by steering a
//! DDIM sampler with an L-BFGS refinement at every reverse step. An exact
//! Gaussian-mixture denoiser ([`prior::GmmDenoiser`]) stands in for a
//! trained network.
//!
//! ```
//! use evdiff::events::{frame_aligned_stacks, simulate_events, FrameSequence};
//! use ndarray::Array4;
//!
//! let data = Array4::from_shape_fn((3, 1, 2, 2), |(t, _, _, x)| 0.2 + 0.3 * (t * x) as f64);
//! let frames = FrameSequence::evenly_spaced(0, 1000, data).unwrap();
//! let stream = simulate_events(&frames, 0.2).unwrap();
//! let stacks = frame_aligned_stacks(&stream, frames.timestamps()).unwrap();
//! assert_eq!(stacks.len(), 3);
//! ```

pub mod config;
pub mod diffusion;
pub mod error;
pub mod events;
pub mod formats;
pub mod guided;
pub mod metrics;
pub mod optim;
pub mod pipeline;
pub mod prior;
pub mod rng;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/events.md")]
    mod events {}
    #[doc = include_str!("../../../book/src/diffusion.md")]
    mod diffusion {}
    #[doc = include_str!("../../../book/src/prior.md")]
    mod prior {}
    #[doc = include_str!("../../../book/src/guided.md")]
    mod guided {}
    #[doc = include_str!("../../../book/src/lbfgs.md")]
    mod lbfgs {}
    #[doc = include_str!("../../../book/src/formats.md")]
    mod formats {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
