use rand::seq::index;
use rand::Rng;

use super::types::{Event, EventStream, Polarity};
use crate::error::{Error, Result};
use crate::rng;

/// Sensor non-idealities injected into a clean stream.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentConfig {
    /// Fraction of sensor pixels that fire spuriously.
    pub hot_pixel_rate: f64,
    /// Probability of dropping each original event.
    pub drop_rate: f64,
    /// Firing rate of each hot pixel.
    pub hot_pixel_hz: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            hot_pixel_rate: 0.0,
            drop_rate: 0.0,
            hot_pixel_hz: 10.0,
        }
    }
}

impl AugmentConfig {
    pub fn new(hot_pixel_rate: f64, drop_rate: f64) -> Self {
        Self {
            hot_pixel_rate,
            drop_rate,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, rate) in [("hot pixel", self.hot_pixel_rate), ("drop", self.drop_rate)] {
            if !(0.0..1.0).contains(&rate) {
                return Err(Error::param(format!("{name} rate must lie in [0, 1), got {rate}")));
            }
        }
        if !(self.hot_pixel_hz.is_finite() && self.hot_pixel_hz > 0.0) {
            return Err(Error::param("hot pixel frequency must be positive"));
        }
        Ok(())
    }
}

/// Drops events independently and injects periodic hot-pixel events over the
/// stream's time span. Deterministic for a fixed `seed`.
pub fn augment_events(stream: &EventStream, config: &AugmentConfig, seed: u64) -> Result<EventStream> {
    config.validate()?;
    let mut rng = rng::stream_rng(seed, rng::Stream::Augmentation);

    let mut events: Vec<Event> = if config.drop_rate > 0.0 {
        stream
            .events()
            .iter()
            .filter(|_| rng.random::<f64>() >= config.drop_rate)
            .copied()
            .collect()
    } else {
        stream.events().to_vec()
    };

    let (w, h) = (usize::from(stream.width()), usize::from(stream.height()));
    let n_hot = (config.hot_pixel_rate * (w * h) as f64).ceil() as usize;
    if let (true, Some((start, end))) = (n_hot > 0, stream.time_span()) {
        let period = 1e6 / config.hot_pixel_hz;
        for pixel in index::sample(&mut rng, w * h, n_hot.min(w * h)).into_vec() {
            let (x, y) = ((pixel % w) as u16, (pixel / w) as u16);
            let phase = rng.random::<f64>() * period;
            let mut polarity = if rng.random::<bool>() {
                Polarity::Positive
            } else {
                Polarity::Negative
            };
            let mut k = 0u64;
            loop {
                let t = start + (phase + k as f64 * period).round() as u64;
                if t > end {
                    break;
                }
                events.push(Event::new(t, x, y, polarity));
                polarity = polarity.flipped();
                k += 1;
            }
        }
    }
    EventStream::new(stream.width(), stream.height(), stream.threshold(), events)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dense_stream(n: usize) -> EventStream {
        let events = (0..n)
            .map(|i| {
                let p = if i % 3 == 0 {
                    Polarity::Negative
                } else {
                    Polarity::Positive
                };
                Event::new(i as u64, (i % 16) as u16, ((i / 16) % 16) as u16, p)
            })
            .collect();
        EventStream::new(16, 16, 0.2, events).unwrap()
    }

    #[test]
    fn zero_rates_are_identity() {
        let s = dense_stream(500);
        assert_eq!(augment_events(&s, &AugmentConfig::new(0.0, 0.0), 9).unwrap(), s);
    }

    #[test]
    fn deterministic_per_seed() {
        let s = dense_stream(2000);
        let cfg = AugmentConfig {
            hot_pixel_hz: 2000.0,
            ..AugmentConfig::new(0.05, 0.3)
        };
        let a = augment_events(&s, &cfg, 42).unwrap();
        let b = augment_events(&s, &cfg, 42).unwrap();
        let c = augment_events(&s, &cfg, 43).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn near_total_drop_follows_binomial() {
        let n = 1_000_000;
        let s = dense_stream(n);
        let p_keep = 1e-9;
        let out = augment_events(&s, &AugmentConfig::new(0.0, 1.0 - p_keep), 5).unwrap();
        let mean = n as f64 * p_keep;
        let sd = (n as f64 * p_keep * (1.0 - p_keep)).sqrt();
        assert!((out.len() as f64 - mean).abs() <= 5.0 * sd, "{} survivors", out.len());
    }

    #[test]
    fn hot_pixels_alternate_and_count() {
        let s = dense_stream(1000); // span 0..=999 us
        let cfg = AugmentConfig {
            hot_pixel_hz: 100_000.0, // 10 us period
            ..AugmentConfig::new(0.01, 0.0)
        };
        let out = augment_events(&s, &cfg, 1).unwrap();
        let added = out.len() - s.len();
        // ceil(0.01 * 256) = 3 hot pixels, each firing ~100 times
        assert!((297..=303).contains(&added), "{added}");
        assert!(out.events().windows(2).all(|w| w[0].canonical_cmp(&w[1]).is_le()));
    }

    #[test]
    fn rejects_rates_outside_unit_interval() {
        let s = dense_stream(10);
        assert!(matches!(
            augment_events(&s, &AugmentConfig::new(1.0, 0.0), 0),
            Err(Error::InvalidParameter(_))
        ));
        assert!(augment_events(&s, &AugmentConfig::new(0.0, -0.1), 0).is_err());
    }
}
