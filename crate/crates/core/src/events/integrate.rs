use ndarray::Array2;

use super::types::{EventStack, EventStream};
use crate::error::{Error, Result};

/// Integrates `stream` into one stack per adjacent pair of `window_edges`.
///
/// Events outside `[edges[0], edges[last])` are ignored.
pub fn integrate_stack(stream: &EventStream, window_edges: &[i64]) -> Result<Vec<EventStack>> {
    if window_edges.len() < 2 {
        return Err(Error::input("at least two window edges are required"));
    }
    if window_edges.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::input("window edges must be strictly increasing"));
    }
    let (h, w) = (usize::from(stream.height()), usize::from(stream.width()));
    let mut planes = vec![Array2::<f64>::zeros((h, w)); window_edges.len() - 1];
    let first = window_edges[0];
    let last = window_edges[window_edges.len() - 1];
    for event in stream.events() {
        let t = i64::try_from(event.t).unwrap_or(i64::MAX);
        if t < first || t >= last {
            continue;
        }
        // index of the window with edges[i] <= t < edges[i + 1]
        let i = window_edges.partition_point(|&edge| edge <= t) - 1;
        planes[i][[usize::from(event.y), usize::from(event.x)]] += event.polarity.as_f64();
    }
    planes
        .into_iter()
        .enumerate()
        .map(|(i, values)| EventStack::new((window_edges[i], window_edges[i + 1]), values))
        .collect()
}

/// One stack per frame timestamp, where stack `t > 0` covers
/// `[timestamps[t-1], timestamps[t])`.
///
/// Stack 0 covers the interval of equal length preceding the first frame. It
/// carries no constraint during guided sampling but keeps the stack and frame
/// sequences the same length.
pub fn frame_aligned_stacks(stream: &EventStream, timestamps: &[u64]) -> Result<Vec<EventStack>> {
    if timestamps.len() < 2 {
        return Err(Error::input("at least two frame timestamps are required"));
    }
    let ts: Vec<i64> = timestamps
        .iter()
        .map(|&t| i64::try_from(t).map_err(|_| Error::input("timestamp exceeds i64")))
        .collect::<Result<_>>()?;
    let lead = ts[0] - (ts[1] - ts[0]);
    let mut edges = Vec::with_capacity(ts.len() + 1);
    edges.push(lead);
    edges.extend_from_slice(&ts);
    integrate_stack(stream, &edges)
}

/// Direct log-domain reconstruction: frame `t` is the offset log image plus
/// `threshold` times the running sum of stacks `0..=t`.
pub fn reconstruct_direct(
    offset_log_frame: &Array2<f64>,
    stacks: &[EventStack],
    threshold: f64,
) -> Result<Vec<Array2<f64>>> {
    let mut running = Array2::<f64>::zeros(offset_log_frame.raw_dim());
    let mut out = Vec::with_capacity(stacks.len());
    for (i, stack) in stacks.iter().enumerate() {
        if stack.values().dim() != offset_log_frame.dim() {
            return Err(Error::input(format!(
                "stack {i} is {:?}, offset frame is {:?}",
                stack.values().dim(),
                offset_log_frame.dim()
            )));
        }
        running += stack.values();
        let mut frame = offset_log_frame.clone();
        ndarray::Zip::from(&mut frame)
            .and(&running)
            .for_each(|f, &count| *f += threshold * count);
        out.push(frame);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::events::types::{Event, Polarity};

    fn stream(events: Vec<Event>) -> EventStream {
        EventStream::new(3, 2, 0.2, events).unwrap()
    }

    #[test]
    fn empty_stream_gives_zero_stacks() {
        let stacks = integrate_stack(&stream(vec![]), &[0, 10, 20]).unwrap();
        assert_eq!(stacks.len(), 2);
        assert!(stacks.iter().all(|s| s.values().iter().all(|&v| v == 0.0)));
        assert_eq!(stacks[1].window(), (10, 20));
    }

    #[test]
    fn opposite_events_cancel() {
        let s = stream(vec![
            Event::new(2, 1, 1, Polarity::Positive),
            Event::new(4, 1, 1, Polarity::Negative),
        ]);
        let stacks = integrate_stack(&s, &[0, 10]).unwrap();
        assert_eq!(stacks[0].values()[[1, 1]], 0.0);
    }

    #[test]
    fn half_open_windows() {
        let s = stream(vec![
            Event::new(10, 0, 0, Polarity::Positive),
            Event::new(20, 0, 0, Polarity::Positive),
            Event::new(9, 2, 0, Polarity::Negative),
        ]);
        let stacks = integrate_stack(&s, &[10, 20]).unwrap();
        assert_eq!(stacks[0].values()[[0, 0]], 1.0);
        assert_eq!(stacks[0].values()[[0, 2]], 0.0);
    }

    #[test]
    fn rejects_bad_edges() {
        let s = stream(vec![]);
        assert!(integrate_stack(&s, &[0]).is_err());
        assert!(integrate_stack(&s, &[0, 5, 5]).is_err());
        assert!(integrate_stack(&s, &[6, 5]).is_err());
    }

    #[test]
    fn frame_aligned_prepends_leading_window() {
        let s = stream(vec![Event::new(5, 0, 0, Polarity::Positive)]);
        let stacks = frame_aligned_stacks(&s, &[0, 10, 20]).unwrap();
        assert_eq!(stacks.len(), 3);
        assert_eq!(stacks[0].window(), (-10, 0));
        assert_eq!(stacks[1].values()[[0, 0]], 1.0);
    }

    #[test]
    fn reconstruct_zero_and_single_stack() {
        let offset = Array2::from_elem((2, 2), -0.5);
        let zeros = vec![EventStack::zeros((0, 1), 2, 2).unwrap(); 3];
        for frame in reconstruct_direct(&offset, &zeros, 0.2).unwrap() {
            assert_eq!(frame, offset);
        }
        let mut values = Array2::zeros((2, 2));
        values[[0, 1]] = 3.0;
        let stack = EventStack::new((0, 1), values).unwrap();
        let out = reconstruct_direct(&offset, &[stack], 0.2).unwrap();
        approx::assert_abs_diff_eq!(out[0][[0, 1]] - offset[[0, 1]], 0.6, epsilon = 1e-12);
        assert_eq!(out[0][[1, 1]], offset[[1, 1]]);
    }

    #[test]
    fn reconstruct_geometry_mismatch() {
        let offset = Array2::zeros((2, 2));
        let stack = EventStack::zeros((0, 1), 3, 2).unwrap();
        assert!(matches!(
            reconstruct_direct(&offset, &[stack], 0.2),
            Err(Error::InvalidInput(_))
        ));
    }
}
