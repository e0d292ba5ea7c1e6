//! Ideal threshold-crossing event simulation from frame-sampled video.
//!
//! Each pixel keeps a reference log level, initialised from the first frame.
//! Between two frames the log luminance is taken to vary linearly in time;
//! every time it moves a full threshold away from the reference an event is
//! emitted at the interpolated crossing time and the reference advances by one
//! threshold in that direction. Crossing times are rounded to the nearest
//! microsecond and capped one microsecond before the next frame.

use ndarray::Array2;

use super::types::{clamped_ln, Event, EventStream, FrameSequence, Polarity, DEFAULT_LOG_FLOOR};
use crate::error::{Error, Result};

/// Simulator parameters. Thresholds are in log-intensity units.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulatorConfig {
    pub threshold: f64,
    /// Threshold for negative events; `None` means symmetric.
    pub off_threshold: Option<f64>,
    /// Minimum spacing between two emitted events at one pixel.
    pub refractory_us: u64,
    pub log_floor: f64,
}

impl SimulatorConfig {
    pub fn new(threshold: f64) -> Self {
        Self {
            threshold,
            off_threshold: None,
            refractory_us: 0,
            log_floor: DEFAULT_LOG_FLOOR,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !positive(self.threshold) {
            return Err(Error::param(format!(
                "threshold must be positive, got {}",
                self.threshold
            )));
        }
        if let Some(off) = self.off_threshold {
            if !positive(off) {
                return Err(Error::param(format!("off threshold must be positive, got {off}")));
            }
        }
        if !positive(self.log_floor) {
            return Err(Error::param("log floor must be positive"));
        }
        Ok(())
    }
}

/// Reference level bookkeeping for one pixel.
///
/// The level is always recomputed from the starting log value and integer
/// counts, so a symmetric simulation agrees bit for bit with
/// `start + theta * net_count`, which is what direct reconstruction evaluates.
struct PixelReference {
    start: f64,
    on: i64,
    off: i64,
}

impl PixelReference {
    fn level(&self, on_threshold: f64, off_threshold: Option<f64>) -> f64 {
        match off_threshold {
            None => self.start + on_threshold * (self.on - self.off) as f64,
            Some(off_threshold) => {
                self.start + on_threshold * self.on as f64 - off_threshold * self.off as f64
            }
        }
    }
}

/// Simulates events with a symmetric threshold and default settings.
pub fn simulate_events(frames: &FrameSequence, threshold: f64) -> Result<EventStream> {
    let config = SimulatorConfig {
        log_floor: frames.log_floor(),
        ..SimulatorConfig::new(threshold)
    };
    simulate_events_with(frames, &config)
}

pub fn simulate_events_with(frames: &FrameSequence, config: &SimulatorConfig) -> Result<EventStream> {
    config.validate()?;
    if frames.len() < 2 {
        return Err(Error::input(format!(
            "event simulation needs at least 2 frames, got {}",
            frames.len()
        )));
    }
    let (height, width) = (frames.height(), frames.width());
    let width16 = u16::try_from(width).map_err(|_| Error::input("frame width exceeds u16"))?;
    let height16 = u16::try_from(height).map_err(|_| Error::input("frame height exceeds u16"))?;

    let logs: Vec<Array2<f64>> = (0..frames.len())
        .map(|t| frames.luminance(t).mapv_into(|v| clamped_ln(v, config.log_floor)))
        .collect();
    let timestamps = frames.timestamps();
    let on_threshold = config.threshold;
    let off_threshold = config.off_threshold;
    let off_step = off_threshold.unwrap_or(on_threshold);

    let mut events = Vec::new();
    for y in 0..height {
        for x in 0..width {
            let mut reference = PixelReference {
                start: logs[0][[y, x]],
                on: 0,
                off: 0,
            };
            let mut last_emit: Option<u64> = None;
            for k in 1..frames.len() {
                let before = logs[k - 1][[y, x]];
                let after = logs[k][[y, x]];
                let (t0, t1) = (timestamps[k - 1], timestamps[k]);
                loop {
                    let level = reference.level(on_threshold, off_threshold);
                    let polarity = if after - level >= on_threshold {
                        reference.on += 1;
                        Polarity::Positive
                    } else if level - after >= off_step {
                        reference.off += 1;
                        Polarity::Negative
                    } else {
                        break;
                    };
                    let crossing = reference.level(on_threshold, off_threshold);
                    let fraction = ((crossing - before) / (after - before)).clamp(0.0, 1.0);
                    // kept inside [t0, t1) so frame-aligned windows see each
                    // interval's events exactly once
                    let t = (t0 + (fraction * (t1 - t0) as f64).round() as u64).min(t1 - 1);
                    let suppressed =
                        matches!(last_emit, Some(prev) if t.saturating_sub(prev) < config.refractory_us);
                    if !suppressed {
                        events.push(Event::new(t, x as u16, y as u16, polarity));
                        last_emit = Some(t);
                    }
                }
            }
        }
    }
    EventStream::new(width16, height16, on_threshold, events)
}
