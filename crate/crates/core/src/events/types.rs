use std::cmp::Ordering;

use ndarray::{Array2, Array4, ArrayView3};

use crate::error::{Error, Result};

/// Luminance weights applied to linear RGB before any log-domain processing.
pub const LUMA_WEIGHTS: [f64; 3] = [0.299, 0.587, 0.114];

/// Default clamp applied to intensities before taking logarithms.
pub const DEFAULT_LOG_FLOOR: f64 = 1e-4;

/// Sign of a brightness change.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Polarity {
    Negative,
    Positive,
}

impl Polarity {
    pub fn from_sign(sign: f64) -> Self {
        if sign < 0.0 {
            Polarity::Negative
        } else {
            Polarity::Positive
        }
    }

    pub fn from_i8(value: i8) -> Option<Self> {
        match value {
            1 => Some(Polarity::Positive),
            -1 => Some(Polarity::Negative),
            _ => None,
        }
    }

    pub fn as_i8(self) -> i8 {
        match self {
            Polarity::Positive => 1,
            Polarity::Negative => -1,
        }
    }

    pub fn as_f64(self) -> f64 {
        f64::from(self.as_i8())
    }

    pub fn flipped(self) -> Self {
        match self {
            Polarity::Positive => Polarity::Negative,
            Polarity::Negative => Polarity::Positive,
        }
    }
}

/// A single brightness-change record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Event {
    /// Timestamp in microseconds.
    pub t: u64,
    pub x: u16,
    pub y: u16,
    pub polarity: Polarity,
}

impl Event {
    pub fn new(t: u64, x: u16, y: u16, polarity: Polarity) -> Self {
        Self { t, x, y, polarity }
    }

    /// Canonical stream order: time, then row, column and polarity.
    pub fn canonical_cmp(&self, other: &Self) -> Ordering {
        (self.t, self.y, self.x, self.polarity).cmp(&(other.t, other.y, other.x, other.polarity))
    }
}

/// A sorted, geometry-checked sequence of events with its contrast threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct EventStream {
    width: u16,
    height: u16,
    threshold: f64,
    events: Vec<Event>,
}

impl EventStream {
    /// Builds a stream, sorting `events` into canonical order.
    pub fn new(width: u16, height: u16, threshold: f64, mut events: Vec<Event>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::input("sensor geometry must be non-empty"));
        }
        if !(threshold.is_finite() && threshold > 0.0) {
            return Err(Error::param(format!("threshold must be positive, got {threshold}")));
        }
        if let Some(e) = events.iter().find(|e| e.x >= width || e.y >= height) {
            return Err(Error::input(format!(
                "event at ({}, {}) outside {width}x{height} sensor",
                e.x, e.y
            )));
        }
        events.sort_by(Event::canonical_cmp);
        Ok(Self {
            width,
            height,
            threshold,
            events,
        })
    }

    pub fn empty(width: u16, height: u16, threshold: f64) -> Result<Self> {
        Self::new(width, height, threshold, Vec::new())
    }

    pub fn width(&self) -> u16 {
        self.width
    }

    pub fn height(&self) -> u16 {
        self.height
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn into_events(self) -> Vec<Event> {
        self.events
    }

    /// Sum of all polarities.
    pub fn signed_total(&self) -> i64 {
        self.events.iter().map(|e| i64::from(e.polarity.as_i8())).sum()
    }

    /// `(first, last)` timestamps, if any events exist.
    pub fn time_span(&self) -> Option<(u64, u64)> {
        Some((self.events.first()?.t, self.events.last()?.t))
    }
}

/// Signed per-pixel event sum over a half-open time window `[begin, end)`.
#[derive(Debug, Clone, PartialEq)]
pub struct EventStack {
    window: (i64, i64),
    values: Array2<f64>,
}

impl EventStack {
    pub fn new(window: (i64, i64), values: Array2<f64>) -> Result<Self> {
        if window.0 >= window.1 {
            return Err(Error::input(format!(
                "stack window [{}, {}) is empty",
                window.0, window.1
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::input("stack values must be finite"));
        }
        Ok(Self { window, values })
    }

    pub fn zeros(window: (i64, i64), height: usize, width: usize) -> Result<Self> {
        Self::new(window, Array2::zeros((height, width)))
    }

    pub fn window(&self) -> (i64, i64) {
        self.window
    }

    /// `H x W` signed counts.
    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn height(&self) -> usize {
        self.values.nrows()
    }

    pub fn width(&self) -> usize {
        self.values.ncols()
    }
}

/// `N` frames of linear intensity, `N x C x H x W`, with strictly increasing
/// microsecond timestamps.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSequence {
    timestamps: Vec<u64>,
    data: Array4<f64>,
    log_floor: f64,
}

impl FrameSequence {
    pub fn new(timestamps: Vec<u64>, data: Array4<f64>) -> Result<Self> {
        Self::with_log_floor(timestamps, data, DEFAULT_LOG_FLOOR)
    }

    pub fn with_log_floor(timestamps: Vec<u64>, data: Array4<f64>, log_floor: f64) -> Result<Self> {
        let (n, c, _, _) = data.dim();
        if timestamps.len() != n {
            return Err(Error::input(format!(
                "{} timestamps for {n} frames",
                timestamps.len()
            )));
        }
        if c != 1 && c != 3 {
            return Err(Error::input(format!("frames must have 1 or 3 channels, got {c}")));
        }
        if timestamps.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::input("frame timestamps must be strictly increasing"));
        }
        if !(log_floor.is_finite() && log_floor > 0.0) {
            return Err(Error::param(format!("log floor must be positive, got {log_floor}")));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::input("frame intensities must be finite"));
        }
        Ok(Self {
            timestamps,
            data,
            log_floor,
        })
    }

    /// Frames at `start, start + interval, ...`.
    pub fn evenly_spaced(start: u64, interval: u64, data: Array4<f64>) -> Result<Self> {
        if interval == 0 {
            return Err(Error::param("frame interval must be positive"));
        }
        let timestamps = (0..data.dim().0 as u64).map(|k| start + k * interval).collect();
        Self::new(timestamps, data)
    }

    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.data.dim().1
    }

    pub fn height(&self) -> usize {
        self.data.dim().2
    }

    pub fn width(&self) -> usize {
        self.data.dim().3
    }

    pub fn timestamps(&self) -> &[u64] {
        &self.timestamps
    }

    pub fn data(&self) -> &Array4<f64> {
        &self.data
    }

    pub fn into_data(self) -> Array4<f64> {
        self.data
    }

    pub fn log_floor(&self) -> f64 {
        self.log_floor
    }

    pub fn frame(&self, t: usize) -> ArrayView3<'_, f64> {
        self.data.index_axis(ndarray::Axis(0), t)
    }

    /// Linear luminance of frame `t` (the frame itself when achromatic).
    pub fn luminance(&self, t: usize) -> Array2<f64> {
        luminance(self.frame(t))
    }

    /// Clamped log luminance of frame `t`.
    pub fn log_luminance(&self, t: usize) -> Array2<f64> {
        let floor = self.log_floor;
        self.luminance(t).mapv_into(|v| clamped_ln(v, floor))
    }
}

/// Luminance of a `C x H x W` frame.
pub fn luminance(frame: ArrayView3<'_, f64>) -> Array2<f64> {
    match frame.dim().0 {
        1 => frame.index_axis(ndarray::Axis(0), 0).to_owned(),
        _ => {
            let mut out = Array2::zeros((frame.dim().1, frame.dim().2));
            for (c, w) in LUMA_WEIGHTS.iter().enumerate() {
                out.scaled_add(*w, &frame.index_axis(ndarray::Axis(0), c));
            }
            out
        }
    }
}

#[inline]
pub fn clamped_ln(value: f64, floor: f64) -> f64 {
    value.max(floor).ln()
}
