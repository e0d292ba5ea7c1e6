//! Subcommand stage graphs behind the `evdiff` binary.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use ndarray::{Array4, Axis};
use serde_json::{json, Map, Value};

use crate::config::{PriorSource, RunConfig};
use crate::diffusion::IdentityCodec;
use crate::error::{Error, Result};
use crate::events::{
    augment_events, frame_aligned_stacks, luminance, reconstruct_direct, simulate_events_with,
    EventStack, EventStream, FrameSequence,
};
use crate::formats;
use crate::guided::{egs_sample, unguided_sample, DiagnosticRow};
use crate::metrics::{consistency_rate, psnr};
use crate::prior::{GaussianMixture, GmmDenoiser};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Simulate,
    Augment,
    Stack,
    Reconstruct,
    Sample { unguided: bool },
    Eval,
    Plot,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::Augment => "augment",
            Command::Stack => "stack",
            Command::Reconstruct => "reconstruct",
            Command::Sample { .. } => "sample",
            Command::Eval => "eval",
            Command::Plot => "plot",
        }
    }
}

/// Metrics and per-stage wall-clock seconds of one run.
#[derive(Debug, Clone, Default)]
pub struct RunSummary {
    pub metrics: Map<String, Value>,
    pub stages: Vec<(String, f64)>,
}

impl RunSummary {
    fn stage<T>(&mut self, name: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let start = Instant::now();
        let out = f()?;
        self.stages.push((name.to_string(), start.elapsed().as_secs_f64()));
        Ok(out)
    }

    fn set(&mut self, key: &str, value: impl Into<Value>) {
        self.metrics.insert(key.to_string(), value.into());
    }

    pub fn metric(&self, key: &str) -> Option<&Value> {
        self.metrics.get(key)
    }
}

/// Runs `command` and, when `paths.out_dir` is set, writes `summary.json`
/// (deterministic) and `timing.json` there.
pub fn run_pipeline(command: Command, cfg: &RunConfig) -> Result<RunSummary> {
    cfg.validate()?;
    let mut summary = RunSummary::default();
    summary.set("command", command.name());
    summary.set("seed", cfg.seed);
    match command {
        Command::Simulate => simulate(cfg, &mut summary)?,
        Command::Augment => augment(cfg, &mut summary)?,
        Command::Stack => stack(cfg, &mut summary)?,
        Command::Reconstruct => reconstruct(cfg, &mut summary)?,
        Command::Sample { unguided } => sample(cfg, unguided, &mut summary)?,
        Command::Eval => eval(cfg, &mut summary)?,
        Command::Plot => plot(cfg, &mut summary)?,
    }
    if let Some(dir) = &cfg.paths.out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let body = serde_json::to_string_pretty(&Value::Object(summary.metrics.clone()))
            .expect("summary serialises");
        write_text(&dir.join("summary.json"), &(body + "\n"))?;
        let timing: Map<String, Value> = summary
            .stages
            .iter()
            .map(|(k, v)| (k.clone(), json!(v)))
            .collect();
        let body = serde_json::to_string_pretty(&Value::Object(timing)).expect("timing serialises");
        write_text(&dir.join("timing.json"), &(body + "\n"))?;
    }
    Ok(summary)
}

fn simulate(cfg: &RunConfig, summary: &mut RunSummary) -> Result<()> {
    let video_path = cfg.require("video")?;
    let out = cfg.require("events")?;
    let video = summary.stage("load", || formats::read_frame_dir(video_path, cfg.timing.interval_us))?;
    let video = FrameSequence::with_log_floor(
        video.timestamps().to_vec(),
        video.into_data(),
        cfg.simulator.log_floor,
    )?;
    let stream = summary.stage("simulate", || simulate_events_with(&video, &cfg.simulator_config()))?;
    summary.stage("write", || write_events(&stream, out))?;
    describe_stream(summary, &stream);
    summary.set("frames", video.len());
    Ok(())
}

fn augment(cfg: &RunConfig, summary: &mut RunSummary) -> Result<()> {
    let input = cfg.require("events")?;
    let out = cfg.require("augmented")?;
    let stream = summary.stage("load", || read_events(input))?;
    let augmented = summary.stage("augment", || augment_events(&stream, &cfg.augment_config(), cfg.seed))?;
    summary.stage("write", || write_events(&augmented, out))?;
    summary.set("input_events", stream.len());
    describe_stream(summary, &augmented);
    Ok(())
}

fn stack(cfg: &RunConfig, summary: &mut RunSummary) -> Result<()> {
    let input = cfg.require("events")?;
    let out = cfg.require("stacks")?;
    let stream = summary.stage("load", || read_events(input))?;
    let stamps = frame_timestamps(cfg, cfg.guidance.frames)?;
    let stacks = summary.stage("stack", || frame_aligned_stacks(&stream, &stamps))?;
    let tensor = formats::stacks_to_tensor(&stacks)?;
    summary.stage("write", || write_tensor(&tensor, out))?;
    summary.set("stacks", stacks.len());
    summary.set(
        "absolute_event_total",
        tensor.iter().map(|v| v.abs()).sum::<f64>(),
    );
    Ok(())
}

fn reconstruct(cfg: &RunConfig, summary: &mut RunSummary) -> Result<()> {
    let out = cfg.require("frames")?;
    let video_path = cfg.require("video")?;
    let video = summary.stage("load", || formats::read_frame_dir(video_path, cfg.timing.interval_us))?;
    let (stacks, theta) = summary.stage("stack", || load_stacks(cfg))?;
    let n = stacks.len();
    if video.len() < n {
        return Err(Error::input(format!("video has {} frames, {n} needed", video.len())));
    }
    let floor = cfg.simulator.log_floor;
    let offset = luminance(video.frame(0)).mapv(|v| crate::events::clamped_ln(v, floor));
    let logs = summary.stage("reconstruct", || reconstruct_direct(&offset, &stacks[1..], theta))?;
    let (h, w) = offset.dim();
    let mut data = Array4::zeros((n, 1, h, w));
    data.index_axis_mut(Axis(0), 0)
        .index_axis_mut(Axis(0), 0)
        .assign(&offset.mapv(f64::exp));
    for (t, log) in logs.iter().enumerate() {
        data.index_axis_mut(Axis(0), t + 1)
            .index_axis_mut(Axis(0), 0)
            .assign(&log.mapv(f64::exp));
    }
    let frames = stored_frames(cfg, &stacks, data)?;
    summary.stage("write", || write_frames(cfg, &frames, out))?;
    frame_metrics(cfg, summary, &frames, &stacks, theta, Some(&video))
}

fn sample(cfg: &RunConfig, unguided: bool, summary: &mut RunSummary) -> Result<()> {
    let out = cfg.require("frames")?;
    let (stacks, theta) = summary.stage("stack", || load_stacks(cfg))?;
    let video = match &cfg.paths.video {
        Some(p) => Some(formats::read_frame_dir(p, cfg.timing.interval_us)?),
        None => None,
    };
    let gmm = summary.stage("prior", || build_prior(cfg, video.as_ref()))?;
    let (channels, h, w) = gmm.frame_shape();
    if (h, w) != (stacks[0].height(), stacks[0].width()) {
        return Err(Error::input(format!(
            "prior frames are {h}x{w}, events are {}x{}",
            stacks[0].height(),
            stacks[0].width()
        )));
    }
    let schedule = cfg.schedule()?;
    let mut gcfg = cfg.guidance_config(theta, channels);
    gcfg.n_frames = stacks.len();
    let denoiser = GmmDenoiser::new(gmm, schedule.clone());
    let output = summary.stage("sample", || {
        if unguided {
            unguided_sample(&denoiser, &IdentityCodec, &stacks, &gcfg, &schedule)
        } else {
            egs_sample(&denoiser, &IdentityCodec, &stacks, &gcfg, &schedule)
        }
    })?;
    let frames = stored_frames(cfg, &stacks, output.frames.into_data())?;
    summary.stage("write", || {
        write_frames(cfg, &frames, out)?;
        if let Some(path) = &cfg.paths.diagnostics {
            write_diagnostics(&output.diagnostics, path)?;
        }
        if let Some(dir) = &cfg.paths.out_dir {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            formats::write_schedule_csv(&schedule, &dir.join("schedule.csv"))?;
        }
        Ok(())
    })?;
    summary.set("guided", !unguided);
    summary.set("theta", theta);
    summary.set(
        "inner_traces_monotone",
        output.inner_traces.iter().all(|t| t.is_non_increasing()),
    );
    summary.set(
        "inner_solves_stalled",
        output.inner_traces.iter().filter(|t| t.termination == crate::optim::Termination::Stalled).count(),
    );
    frame_metrics(cfg, summary, &frames, &stacks, theta, video.as_ref())
}

fn eval(cfg: &RunConfig, summary: &mut RunSummary) -> Result<()> {
    let path = cfg.require("frames")?;
    let data = summary.stage("load", || read_tensor(path))?;
    let (stacks, theta) = summary.stage("stack", || load_stacks(cfg))?;
    let frames = stored_frames(cfg, &stacks, data)?;
    let video = match &cfg.paths.video {
        Some(p) => Some(formats::read_frame_dir(p, cfg.timing.interval_us)?),
        None => None,
    };
    frame_metrics(cfg, summary, &frames, &stacks, theta, video.as_ref())
}

fn plot(cfg: &RunConfig, summary: &mut RunSummary) -> Result<()> {
    let dir = cfg.require("out_dir")?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut wrote = Vec::new();
    if let Some(path) = &cfg.paths.diagnostics {
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let rows = formats::read_diagnostics_csv(file)?;
        let svg = loss_curves_svg(&rows);
        summary.stage("loss_curves", || write_text(&dir.join("loss_curves.svg"), &svg))?;
        wrote.push("loss_curves.svg");
    }
    if let Some(path) = &cfg.paths.frames {
        let data = read_tensor(path)?;
        summary.stage("frame_strip", || write_frame_strip(&data, &dir.join("frame_strip.png")))?;
        wrote.push("frame_strip.png");
    }
    if wrote.is_empty() {
        return Err(Error::Config(
            "plot needs paths.diagnostics or paths.frames".into(),
        ));
    }
    summary.set("plots", wrote);
    Ok(())
}

fn describe_stream(summary: &mut RunSummary, stream: &EventStream) {
    summary.set("events", stream.len());
    summary.set("signed_total", stream.signed_total());
    summary.set("width", stream.width());
    summary.set("height", stream.height());
    summary.set("threshold", stream.threshold());
}

/// Timestamps of the first `n` frames: from the video directory when one is
/// configured, otherwise from the frame clock.
pub fn frame_timestamps(cfg: &RunConfig, n: usize) -> Result<Vec<u64>> {
    match &cfg.paths.video {
        Some(dir) => {
            let video = formats::read_frame_dir(dir, cfg.timing.interval_us)?;
            if video.len() < n {
                return Err(Error::input(format!(
                    "{} has {} frames, {n} requested",
                    dir.display(),
                    video.len()
                )));
            }
            Ok(video.timestamps()[..n].to_vec())
        }
        None => Ok((0..n as u64)
            .map(|i| cfg.timing.start_us + i * cfg.timing.interval_us)
            .collect()),
    }
}

/// Frame-aligned stacks for `guidance.frames` frames and the threshold to
/// evaluate them with. Events are preferred over a stored stack tensor.
fn load_stacks(cfg: &RunConfig) -> Result<(Vec<EventStack>, f64)> {
    let n = cfg.guidance.frames;
    let stamps = frame_timestamps(cfg, n)?;
    if let Some(path) = &cfg.paths.events {
        let stream = read_events(path)?;
        let theta = cfg.guidance.theta.unwrap_or(stream.threshold());
        return Ok((frame_aligned_stacks(&stream, &stamps)?, theta));
    }
    if let Some(path) = &cfg.paths.stacks {
        let tensor = read_tensor(path)?;
        let first = stamps[0] as i64;
        let mut windows = vec![(2 * first - stamps.get(1).map_or(first + 1, |&s| s as i64), first)];
        windows.extend(stamps.windows(2).map(|w| (w[0] as i64, w[1] as i64)));
        let theta = cfg.guidance.theta.unwrap_or(cfg.simulator.threshold);
        return Ok((formats::tensor_to_stacks(&tensor, &windows)?, theta));
    }
    Err(Error::Config("paths.events or paths.stacks must be set".into()))
}

/// Frames as they are stored on disk (rounded to `f32`), timed at the stack
/// window ends.
fn stored_frames(cfg: &RunConfig, stacks: &[EventStack], data: Array4<f64>) -> Result<FrameSequence> {
    if data.dim().0 != stacks.len() {
        return Err(Error::input(format!(
            "{} frames for {} stacks",
            data.dim().0,
            stacks.len()
        )));
    }
    let stamps = stacks
        .iter()
        .map(|s| u64::try_from(s.window().1).map_err(|_| Error::input("stack window ends before 0")))
        .collect::<Result<Vec<_>>>()?;
    let data = data.mapv(|v| f64::from(v as f32));
    FrameSequence::with_log_floor(stamps, data, cfg.simulator.log_floor)
}

fn frame_metrics(
    cfg: &RunConfig,
    summary: &mut RunSummary,
    frames: &FrameSequence,
    stacks: &[EventStack],
    theta: f64,
    video: Option<&FrameSequence>,
) -> Result<()> {
    let rate = consistency_rate(frames, stacks, theta)?;
    summary.set("consistency_rate", rate);
    summary.set("frames", frames.len());
    if let Some(video) = video {
        let n = frames.len();
        if video.len() >= n && (video.height(), video.width()) == (frames.height(), frames.width()) {
            let truth = if video.channels() == frames.channels() {
                video.data().slice(ndarray::s![..n, .., .., ..]).to_owned()
            } else {
                let mut lum = Array4::zeros((n, 1, video.height(), video.width()));
                for t in 0..n {
                    lum.index_axis_mut(Axis(0), t)
                        .index_axis_mut(Axis(0), 0)
                        .assign(&video.luminance(t));
                }
                lum
            };
            let truth = FrameSequence::with_log_floor(frames.timestamps().to_vec(), truth, cfg.simulator.log_floor)?;
            let reference = if frames.channels() == truth.channels() {
                frames.clone()
            } else {
                let mut lum = Array4::zeros((n, 1, frames.height(), frames.width()));
                for t in 0..n {
                    lum.index_axis_mut(Axis(0), t)
                        .index_axis_mut(Axis(0), 0)
                        .assign(&frames.luminance(t));
                }
                FrameSequence::with_log_floor(frames.timestamps().to_vec(), lum, cfg.simulator.log_floor)?
            };
            let values: Vec<Value> = psnr(&reference, &truth)?
                .into_iter()
                .map(|v| if v.is_finite() { json!(v) } else { json!("inf") })
                .collect();
            summary.set("psnr", values);
        }
    }
    Ok(())
}

fn build_prior(cfg: &RunConfig, video: Option<&FrameSequence>) -> Result<GaussianMixture> {
    let means = match cfg.prior.source {
        PriorSource::File => {
            let path = cfg
                .prior
                .means_file
                .as_deref()
                .ok_or_else(|| Error::Config("prior.means_file is not set".into()))?;
            read_tensor(path)?
        }
        PriorSource::Video => {
            let video = video.ok_or_else(|| Error::Config("prior.source = \"video\" needs paths.video".into()))?;
            let mut distinct: Vec<ndarray::ArrayView3<'_, f64>> = Vec::new();
            for frame in video.data().outer_iter() {
                if !distinct.iter().any(|d| *d == frame) {
                    distinct.push(frame);
                }
            }
            let views: Vec<_> = distinct.iter().map(|d| d.insert_axis(Axis(0))).collect();
            ndarray::concatenate(Axis(0), &views).expect("frames share a shape")
        }
    };
    let k = means.dim().0;
    let weights = if cfg.prior.weights.is_empty() {
        vec![1.0; k]
    } else {
        cfg.prior.weights.clone()
    };
    GaussianMixture::new(weights, means, cfg.prior.sigma2)
}

fn is_csv(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"))
}

pub fn read_events(path: &Path) -> Result<EventStream> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    if is_csv(path) {
        formats::read_events_csv(file)
    } else {
        formats::read_evt1(file)
    }
}

pub fn write_events(stream: &EventStream, path: &Path) -> Result<()> {
    let file = create(path)?;
    if is_csv(path) {
        formats::write_events_csv(stream, file)
    } else {
        formats::write_evt1(stream, file)
    }
}

pub fn read_tensor(path: &Path) -> Result<Array4<f64>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    formats::read_tns1(file)
}

fn write_tensor(tensor: &Array4<f64>, path: &Path) -> Result<()> {
    formats::write_tns1(tensor, create(path)?)
}

fn write_frames(cfg: &RunConfig, frames: &FrameSequence, path: &Path) -> Result<()> {
    write_tensor(frames.data(), path)?;
    if let Some(dir) = &cfg.paths.frame_dir {
        formats::write_frame_dir(frames, dir)?;
    }
    Ok(())
}

fn write_diagnostics(rows: &[DiagnosticRow], path: &Path) -> Result<()> {
    let file = create(path)?;
    formats::write_diagnostics_csv(rows, file).map_err(|e| Error::io(path, e))
}

fn create(path: &Path) -> Result<fs::File> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    fs::File::create(path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    create(path)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Mean event and anchor loss over frames at each reverse step, both scaled
/// to their own maximum.
pub fn loss_curves_svg(rows: &[DiagnosticRow]) -> String {
    let mut taus: Vec<usize> = rows.iter().map(|r| r.tau).collect();
    taus.sort_unstable_by(|a, b| b.cmp(a));
    taus.dedup();
    let mean = |tau: usize, f: fn(&DiagnosticRow) -> f64| {
        let vals: Vec<f64> = rows.iter().filter(|r| r.tau == tau).map(f).collect();
        vals.iter().sum::<f64>() / vals.len().max(1) as f64
    };
    let event: Vec<f64> = taus.iter().map(|&t| mean(t, |r| r.event_loss)).collect();
    let anchor: Vec<f64> = taus.iter().map(|&t| mean(t, |r| r.anchor_loss)).collect();
    let (width, height, pad) = (640.0, 360.0, 40.0);
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<line x1="{pad}" y1="{y}" x2="{x}" y2="{y}" stroke="black"/>"#,
        y = height - pad,
        x = width - pad
    );
    let _ = writeln!(
        svg,
        r#"<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{y}" stroke="black"/>"#,
        y = height - pad
    );
    for (series, colour, label) in [(&event, "#c0392b", "event loss"), (&anchor, "#2471a3", "anchor loss")] {
        let top = series.iter().cloned().fold(0.0f64, f64::max);
        let points: Vec<String> = series
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let x = pad + (width - 2.0 * pad) * i as f64 / (series.len().max(2) - 1) as f64;
                let y = height - pad - (height - 2.0 * pad) * if top > 0.0 { v / top } else { 0.0 };
                format!("{x:.2},{y:.2}")
            })
            .collect();
        let _ = writeln!(
            svg,
            r#"<polyline fill="none" stroke="{colour}" stroke-width="2" points="{}"><title>{label}</title></polyline>"#,
            points.join(" ")
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{pad}" y="24" font-family="sans-serif" font-size="14">mean loss per step (red: event, blue: anchor), tau {} to {}</text>"#,
        taus.first().copied().unwrap_or(0),
        taus.last().copied().unwrap_or(0)
    );
    svg.push_str("</svg>\n");
    svg
}

/// Frames side by side as one 8-bit grayscale image of their luminance.
pub fn write_frame_strip(data: &Array4<f64>, path: &Path) -> Result<()> {
    let (n, c, h, w) = data.dim();
    if n == 0 || !(c == 1 || c == 3) {
        return Err(Error::input(format!("cannot draw a strip of {:?}", data.dim())));
    }
    let mut img = image::GrayImage::new((n * w) as u32, h as u32);
    for (t, frame) in data.outer_iter().enumerate() {
        let lum = luminance(frame);
        for ((y, x), v) in lum.indexed_iter() {
            let px = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            img.put_pixel((t * w + x) as u32, y as u32, image::Luma([px]));
        }
    }
    create(path)?;
    img.save(path).map_err(|e| Error::Format {
        format: "PNG",
        reason: e.to_string(),
    })
}
