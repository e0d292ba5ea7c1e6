//! On-disk formats: EVT1 binary events, CSV events, TNS1 tensors, PNG frame
//! directories and the CSV dumps written by the pipeline.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array2, Array4, Axis};

use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::events::{Event, EventStream, FrameSequence, Polarity};
use crate::guided::DiagnosticRow;

pub const EVT1_MAGIC: &[u8; 4] = b"EVT1";
pub const TNS1_MAGIC: &[u8; 4] = b"TNS1";
pub const EVT1_HEADER_LEN: usize = 16;
pub const EVT1_RECORD_LEN: usize = 16;
pub const TNS1_HEADER_LEN: usize = 24;
/// Only dtype code understood in TNS1 headers: little-endian `f32`.
pub const TNS1_DTYPE_F32: u32 = 0;

fn evt_err(reason: impl Into<String>) -> Error {
    Error::Format {
        format: "EVT1",
        reason: reason.into(),
    }
}

fn tns_err(reason: impl Into<String>) -> Error {
    Error::Format {
        format: "TNS1",
        reason: reason.into(),
    }
}

fn csv_err(reason: impl Into<String>) -> Error {
    Error::Format {
        format: "CSV",
        reason: reason.into(),
    }
}

/// The stream threshold is stored as `f32`.
pub fn write_evt1<W: Write>(stream: &EventStream, out: W) -> Result<()> {
    let count = u32::try_from(stream.len()).map_err(|_| evt_err("more than u32::MAX events"))?;
    let mut out = BufWriter::new(out);
    let mut header = [0u8; EVT1_HEADER_LEN];
    header[0..4].copy_from_slice(EVT1_MAGIC);
    header[4..6].copy_from_slice(&stream.width().to_le_bytes());
    header[6..8].copy_from_slice(&stream.height().to_le_bytes());
    header[8..12].copy_from_slice(&(stream.threshold() as f32).to_le_bytes());
    header[12..16].copy_from_slice(&count.to_le_bytes());
    out.write_all(&header).map_err(|e| evt_err(e.to_string()))?;
    let mut record = [0u8; EVT1_RECORD_LEN];
    for e in stream.events() {
        record[0..8].copy_from_slice(&e.t.to_le_bytes());
        record[8..10].copy_from_slice(&e.x.to_le_bytes());
        record[10..12].copy_from_slice(&e.y.to_le_bytes());
        record[12] = e.polarity.as_i8() as u8;
        out.write_all(&record).map_err(|e| evt_err(e.to_string()))?;
    }
    out.flush().map_err(|e| evt_err(e.to_string()))
}

pub fn read_evt1<R: Read>(input: R) -> Result<EventStream> {
    let mut input = BufReader::new(input);
    let mut header = [0u8; EVT1_HEADER_LEN];
    input
        .read_exact(&mut header)
        .map_err(|_| evt_err("truncated header"))?;
    if &header[0..4] != EVT1_MAGIC {
        return Err(evt_err("bad magic"));
    }
    let width = u16::from_le_bytes([header[4], header[5]]);
    let height = u16::from_le_bytes([header[6], header[7]]);
    let threshold = f32::from_le_bytes(header[8..12].try_into().unwrap());
    let count = u32::from_le_bytes(header[12..16].try_into().unwrap()) as usize;
    let mut events = Vec::with_capacity(count.min(1 << 24));
    let mut record = [0u8; EVT1_RECORD_LEN];
    for i in 0..count {
        input
            .read_exact(&mut record)
            .map_err(|_| evt_err(format!("truncated at record {i} of {count}")))?;
        let t = u64::from_le_bytes(record[0..8].try_into().unwrap());
        let x = u16::from_le_bytes([record[8], record[9]]);
        let y = u16::from_le_bytes([record[10], record[11]]);
        let polarity = Polarity::from_i8(record[12] as i8)
            .ok_or_else(|| evt_err(format!("record {i}: polarity {}", record[12] as i8)))?;
        if record[13..16] != [0, 0, 0] {
            return Err(evt_err(format!("record {i}: non-zero padding")));
        }
        events.push(Event::new(t, x, y, polarity));
    }
    let mut rest = [0u8; 1];
    if input.read(&mut rest).map_err(|e| evt_err(e.to_string()))? != 0 {
        return Err(evt_err("trailing bytes after the last record"));
    }
    EventStream::new(width, height, f64::from(threshold), events)
}

pub fn write_events_csv<W: Write>(stream: &EventStream, out: W) -> Result<()> {
    let mut out = BufWriter::new(out);
    let io = |e: std::io::Error| csv_err(e.to_string());
    writeln!(out, "# {},{},{}", stream.width(), stream.height(), stream.threshold()).map_err(io)?;
    writeln!(out, "t,x,y,p").map_err(io)?;
    for e in stream.events() {
        writeln!(out, "{},{},{},{}", e.t, e.x, e.y, e.polarity.as_i8()).map_err(io)?;
    }
    out.flush().map_err(io)
}

pub fn read_events_csv<R: Read>(input: R) -> Result<EventStream> {
    let mut lines = BufReader::new(input).lines();
    let header = lines
        .next()
        .ok_or_else(|| csv_err("empty file"))?
        .map_err(|e| csv_err(e.to_string()))?;
    let meta = header
        .strip_prefix('#')
        .ok_or_else(|| csv_err("missing '# width,height,theta' header"))?;
    let fields: Vec<&str> = meta.split(',').map(str::trim).collect();
    if fields.len() != 3 {
        return Err(csv_err("header needs width,height,theta"));
    }
    let width: u16 = fields[0].parse().map_err(|_| csv_err("bad width"))?;
    let height: u16 = fields[1].parse().map_err(|_| csv_err("bad height"))?;
    let threshold: f64 = fields[2].parse().map_err(|_| csv_err("bad threshold"))?;
    let mut events = Vec::new();
    for (n, line) in lines.enumerate() {
        let line = line.map_err(|e| csv_err(e.to_string()))?;
        let line = line.trim();
        if line.is_empty() || line == "t,x,y,p" {
            continue;
        }
        let bad = || csv_err(format!("line {}: '{line}'", n + 2));
        let mut parts = line.split(',').map(str::trim);
        let mut next = || parts.next().ok_or_else(bad);
        let t: u64 = next()?.parse().map_err(|_| bad())?;
        let x: u16 = next()?.parse().map_err(|_| bad())?;
        let y: u16 = next()?.parse().map_err(|_| bad())?;
        let p: i8 = next()?.parse().map_err(|_| bad())?;
        if parts.next().is_some() {
            return Err(bad());
        }
        let polarity = Polarity::from_i8(p).ok_or_else(bad)?;
        events.push(Event::new(t, x, y, polarity));
    }
    EventStream::new(width, height, threshold, events)
}

/// Values are narrowed to `f32`.
pub fn write_tns1<W: Write>(tensor: &Array4<f64>, out: W) -> Result<()> {
    let mut out = BufWriter::new(out);
    let io = |e: std::io::Error| tns_err(e.to_string());
    out.write_all(TNS1_MAGIC).map_err(io)?;
    let (n, c, h, w) = tensor.dim();
    for d in [n, c, h, w] {
        let d = u32::try_from(d).map_err(|_| tns_err("dimension exceeds u32"))?;
        out.write_all(&d.to_le_bytes()).map_err(io)?;
    }
    out.write_all(&TNS1_DTYPE_F32.to_le_bytes()).map_err(io)?;
    for v in tensor.iter() {
        out.write_all(&(*v as f32).to_le_bytes()).map_err(io)?;
    }
    out.flush().map_err(io)
}

pub fn read_tns1<R: Read>(input: R) -> Result<Array4<f64>> {
    let mut input = BufReader::new(input);
    let mut header = [0u8; TNS1_HEADER_LEN];
    input
        .read_exact(&mut header)
        .map_err(|_| tns_err("truncated header"))?;
    if &header[0..4] != TNS1_MAGIC {
        return Err(tns_err("bad magic"));
    }
    let word = |i: usize| u32::from_le_bytes(header[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    let (n, c, h, w, dtype) = (word(0), word(1), word(2), word(3), word(4) as u32);
    if dtype != TNS1_DTYPE_F32 {
        return Err(tns_err(format!("unsupported dtype code {dtype}")));
    }
    let len = n
        .checked_mul(c)
        .and_then(|v| v.checked_mul(h))
        .and_then(|v| v.checked_mul(w))
        .ok_or_else(|| tns_err("shape overflows"))?;
    let mut bytes = Vec::new();
    input
        .read_to_end(&mut bytes)
        .map_err(|e| tns_err(e.to_string()))?;
    if bytes.len() != len * 4 {
        return Err(tns_err(format!(
            "expected {} data bytes, found {}",
            len * 4,
            bytes.len()
        )));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|b| f64::from(f32::from_le_bytes(b.try_into().unwrap())))
        .collect();
    Array4::from_shape_vec((n, c, h, w), data).map_err(|e| tns_err(e.to_string()))
}

pub fn frame_file_name(index: usize) -> String {
    format!("frame_{index:04}.png")
}

/// Writes `frame_0000.png`, ... plus `timestamps.txt`. One channel becomes
/// 16-bit grayscale, three channels 8-bit RGB; intensities are clipped to
/// `[0, 1]`.
pub fn write_frame_dir(frames: &FrameSequence, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (h, w) = (frames.height() as u32, frames.width() as u32);
    let img_err = |e: image::ImageError| Error::Format {
        format: "PNG",
        reason: e.to_string(),
    };
    for t in 0..frames.len() {
        let frame = frames.frame(t);
        let path = dir.join(frame_file_name(t));
        match frames.channels() {
            1 => {
                let pixels: Vec<u16> = frame
                    .index_axis(Axis(0), 0)
                    .iter()
                    .map(|v| (v.clamp(0.0, 1.0) * 65535.0).round() as u16)
                    .collect();
                image::ImageBuffer::<image::Luma<u16>, _>::from_raw(w, h, pixels)
                    .expect("buffer matches frame size")
                    .save(&path)
                    .map_err(img_err)?;
            }
            3 => {
                let mut pixels = Vec::with_capacity(3 * (w * h) as usize);
                for y in 0..h as usize {
                    for x in 0..w as usize {
                        for c in 0..3 {
                            pixels.push((frame[(c, y, x)].clamp(0.0, 1.0) * 255.0).round() as u8);
                        }
                    }
                }
                image::RgbImage::from_raw(w, h, pixels)
                    .expect("buffer matches frame size")
                    .save(&path)
                    .map_err(img_err)?;
            }
            c => {
                return Err(Error::input(format!("cannot write {c}-channel frames as images")));
            }
        }
    }
    let stamps: String = frames.timestamps().iter().map(|t| format!("{t}\n")).collect();
    let path = dir.join("timestamps.txt");
    fs::write(&path, stamps).map_err(|e| Error::io(path, e))
}

/// Reads `frame_NNNN.png` files in index order. Grayscale images give one
/// channel, anything else three. Without `timestamps.txt` frames are spaced
/// `default_interval` microseconds apart from zero.
pub fn read_frame_dir(dir: &Path, default_interval: u64) -> Result<FrameSequence> {
    let mut paths = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
        if let Some(index) = name
            .strip_prefix("frame_")
            .and_then(|n| n.strip_suffix(".png"))
            .and_then(|n| n.parse::<usize>().ok())
        {
            paths.push((index, path));
        }
    }
    if paths.is_empty() {
        return Err(Error::input(format!("no frame_*.png files in {}", dir.display())));
    }
    paths.sort();
    let mut planes = Vec::with_capacity(paths.len());
    for (_, path) in &paths {
        let img = image::open(path).map_err(|e| Error::Format {
            format: "PNG",
            reason: format!("{}: {e}", path.display()),
        })?;
        let (w, h) = (img.width() as usize, img.height() as usize);
        let plane = if img.color().has_color() {
            let rgb = img.to_rgb8();
            Array4::from_shape_fn((1, 3, h, w), |(_, c, y, x)| {
                f64::from(rgb.get_pixel(x as u32, y as u32)[c]) / 255.0
            })
        } else {
            let gray = img.to_luma16();
            Array4::from_shape_fn((1, 1, h, w), |(_, _, y, x)| {
                f64::from(gray.get_pixel(x as u32, y as u32)[0]) / 65535.0
            })
        };
        if let Some(first) = planes.first() {
            let first: &Array4<f64> = first;
            if first.dim() != plane.dim() {
                return Err(Error::input(format!(
                    "{} differs in size or channels from the first frame",
                    path.display()
                )));
            }
        }
        planes.push(plane);
    }
    let views: Vec<_> = planes.iter().map(|p| p.view()).collect();
    let data = ndarray::concatenate(Axis(0), &views).expect("frames share a shape");
    let stamps_path = dir.join("timestamps.txt");
    let timestamps = if stamps_path.exists() {
        let text = fs::read_to_string(&stamps_path).map_err(|e| Error::io(&stamps_path, e))?;
        let stamps = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                l.trim()
                    .parse::<u64>()
                    .map_err(|_| Error::input(format!("bad timestamp '{l}'")))
            })
            .collect::<Result<Vec<_>>>()?;
        if stamps.len() != paths.len() {
            return Err(Error::input(format!(
                "{} timestamps for {} frames",
                stamps.len(),
                paths.len()
            )));
        }
        stamps
    } else {
        (0..paths.len() as u64).map(|i| i * default_interval).collect()
    };
    FrameSequence::new(timestamps, data)
}

/// Stacks as an `N x 1 x H x W` tensor.
pub fn stacks_to_tensor(stacks: &[crate::events::EventStack]) -> Result<Array4<f64>> {
    let first = stacks.first().ok_or_else(|| Error::input("no stacks"))?;
    let (h, w) = (first.height(), first.width());
    let mut out = Array4::zeros((stacks.len(), 1, h, w));
    for (i, s) in stacks.iter().enumerate() {
        if s.values().dim() != (h, w) {
            return Err(Error::input("stacks differ in size"));
        }
        out.index_axis_mut(Axis(0), i)
            .index_axis_mut(Axis(0), 0)
            .assign(s.values());
    }
    Ok(out)
}

/// Inverse of [`stacks_to_tensor`] given the window edges of each stack.
pub fn tensor_to_stacks(
    tensor: &Array4<f64>,
    windows: &[(i64, i64)],
) -> Result<Vec<crate::events::EventStack>> {
    let (n, c, _, _) = tensor.dim();
    if c != 1 || n != windows.len() {
        return Err(Error::input(format!(
            "stack tensor {:?} does not match {} windows",
            tensor.dim(),
            windows.len()
        )));
    }
    tensor
        .outer_iter()
        .zip(windows)
        .map(|(s, &win)| {
            let values: Array2<f64> = s.index_axis(Axis(0), 0).to_owned();
            crate::events::EventStack::new(win, values)
        })
        .collect()
}

pub fn write_schedule_csv(schedule: &NoiseSchedule, path: &Path) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    schedule.write_csv(&mut out).map_err(|e| Error::io(path, e))?;
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn write_diagnostics_csv<W: Write>(rows: &[DiagnosticRow], out: W) -> std::io::Result<()> {
    let mut out = BufWriter::new(out);
    writeln!(out, "tau,t,event_loss,anchor_loss,total_loss")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{:e},{:e},{:e}",
            r.tau, r.frame, r.event_loss, r.anchor_loss, r.total_loss
        )?;
    }
    out.flush()
}

pub fn read_diagnostics_csv<R: Read>(input: R) -> Result<Vec<DiagnosticRow>> {
    let mut rows = Vec::new();
    for (n, line) in BufReader::new(input).lines().enumerate() {
        let line = line.map_err(|e| csv_err(e.to_string()))?;
        if n == 0 || line.trim().is_empty() {
            continue;
        }
        let bad = || csv_err(format!("diagnostics line {}", n + 1));
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 5 {
            return Err(bad());
        }
        rows.push(DiagnosticRow {
            tau: f[0].parse().map_err(|_| bad())?,
            frame: f[1].parse().map_err(|_| bad())?,
            event_loss: f[2].parse().map_err(|_| bad())?,
            anchor_loss: f[3].parse().map_err(|_| bad())?,
            total_loss: f[4].parse().map_err(|_| bad())?,
        });
    }
    Ok(rows)
}
