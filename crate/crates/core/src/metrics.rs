use crate::error::{Error, Result};
use crate::events::{EventStack, FrameSequence};

/// Fraction of `(pixel, consecutive frame pair)` entries whose log-luminance
/// residual against the events lies within `[-2 theta, 2 theta]`.
///
/// `stacks[t]` holds the events between frames `t - 1` and `t`; `stacks[0]`
/// is ignored.
pub fn consistency_rate(frames: &FrameSequence, stacks: &[EventStack], theta: f64) -> Result<f64> {
    let n = frames.len();
    if stacks.len() != n {
        return Err(Error::input(format!("{} stacks for {n} frames", stacks.len())));
    }
    if n < 2 {
        return Err(Error::input("consistency needs at least two frames"));
    }
    let band = 2.0 * theta;
    let mut inside = 0usize;
    let mut total = 0usize;
    let mut prev = frames.log_luminance(0);
    for (t, stack) in stacks.iter().enumerate().skip(1) {
        let now = frames.log_luminance(t);
        if stack.values().dim() != now.dim() {
            return Err(Error::input(format!(
                "stack {t} is {:?}, frames are {:?}",
                stack.values().dim(),
                now.dim()
            )));
        }
        ndarray::Zip::from(&now)
            .and(&prev)
            .and(stack.values())
            .for_each(|&a, &b, &e| {
                if (a - b - theta * e).abs() <= band {
                    inside += 1;
                }
            });
        total += now.len();
        prev = now;
    }
    Ok(inside as f64 / total as f64)
}

/// Per-frame peak signal-to-noise ratio in dB for unit peak intensity;
/// identical frames give `f64::INFINITY`.
pub fn psnr(a: &FrameSequence, b: &FrameSequence) -> Result<Vec<f64>> {
    if a.data().dim() != b.data().dim() {
        return Err(Error::input(format!(
            "frame shapes differ: {:?} vs {:?}",
            a.data().dim(),
            b.data().dim()
        )));
    }
    Ok(a.data()
        .outer_iter()
        .zip(b.data().outer_iter())
        .map(|(fa, fb)| {
            let mse = ndarray::Zip::from(&fa)
                .and(&fb)
                .fold(0.0, |acc, &x, &y| acc + (x - y) * (x - y))
                / fa.len() as f64;
            if mse == 0.0 {
                f64::INFINITY
            } else {
                10.0 * (1.0 / mse).log10()
            }
        })
        .collect())
}
