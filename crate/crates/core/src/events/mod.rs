//! Event generation, integration and direct log-domain reconstruction.

mod augment;
mod integrate;
mod simulate;
mod types;

pub use augment::{augment_events, AugmentConfig};
pub use integrate::{frame_aligned_stacks, integrate_stack, reconstruct_direct};
pub use simulate::{simulate_events, simulate_events_with, SimulatorConfig};
pub use types::{
    clamped_ln, luminance, Event, EventStack, EventStream, FrameSequence, Polarity,
    DEFAULT_LOG_FLOOR, LUMA_WEIGHTS,
};
