//! Event-guided DDIM sampling.
//!
//! Frames are denoised jointly over a shared strided schedule. At every
//! reverse time the noise estimate of each frame is computed once and held
//! fixed; for every frame after the first, the noisy latent is then refined
//! by a few L-BFGS iterations on
//!
//! ```text
//! event term + eta * anchor term
//! ```
//!
//! where the event term is the pixel-mean hinge `max(0, |d| - 2 theta)` on the
//! residual `d = log L_t - log L_{t-1} - theta E_t` between the decoded clean
//! prediction of this frame, the current clean prediction of the previous
//! frame and the observed event stack, and the anchor term is the mean squared
//! distance to the latent before refinement. Gradients flow through the
//! clean-sample prediction and the codec decoder only. Frame 0 is never
//! refined.

use ndarray::{Array2, Array3, Array4, ArrayView3, Axis, Zip};
use rand_distr::{Distribution, StandardNormal};

use crate::diffusion::{
    predict_x0, renoise, Codec, Conditioning, Denoiser, LatentTensor, NoiseSchedule,
};
use crate::error::{Error, Result};
use crate::events::{clamped_ln, luminance, EventStack, FrameSequence, DEFAULT_LOG_FLOOR, LUMA_WEIGHTS};
use crate::optim::{lbfgs_minimize, LbfgsConfig, Termination};
use crate::rng::{self, Stream};

/// Sampler settings.
#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceConfig {
    /// Contrast threshold the events were generated with.
    pub theta: f64,
    /// Anchor weight.
    pub eta: f64,
    /// L-BFGS iterations per frame and reverse step.
    pub inner_steps: usize,
    pub ddim_steps: usize,
    pub n_frames: usize,
    /// Channels of the generated frames (1 or 3).
    pub channels: usize,
    /// Passed through to the denoiser.
    pub guidance_scale: f64,
    pub seed: u64,
    pub log_floor: f64,
    /// Line-search and memory settings; `max_iters` is replaced by `inner_steps`.
    pub lbfgs: LbfgsConfig,
}

impl GuidanceConfig {
    pub fn new(theta: f64, n_frames: usize) -> Self {
        Self {
            theta,
            eta: 1.0,
            inner_steps: 5,
            ddim_steps: 25,
            n_frames,
            channels: 1,
            guidance_scale: 7.5,
            seed: 0,
            log_floor: DEFAULT_LOG_FLOOR,
            lbfgs: LbfgsConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.theta.is_finite() && self.theta > 0.0) {
            return Err(Error::param(format!("theta must be positive, got {}", self.theta)));
        }
        if !(self.eta >= 0.0) {
            return Err(Error::param(format!("eta must be non-negative, got {}", self.eta)));
        }
        if self.inner_steps == 0 {
            return Err(Error::param("inner step count must be at least 1"));
        }
        if self.ddim_steps == 0 {
            return Err(Error::param("DDIM step count must be at least 1"));
        }
        if self.n_frames < 2 {
            return Err(Error::param("at least two frames are needed"));
        }
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::param("frames must have 1 or 3 channels"));
        }
        if !(self.log_floor.is_finite() && self.log_floor > 0.0) {
            return Err(Error::param("log floor must be positive"));
        }
        self.lbfgs.validate()
    }
}

/// Per-pixel log-intensity residual between a frame pair and its events,
/// `C x H x W`.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualImage(pub Array3<f64>);

impl ResidualImage {
    pub fn values(&self) -> &Array3<f64> {
        &self.0
    }
}

/// `log(frame_t) - log(frame_prev) - theta * stack`, with intensities clamped
/// at `log_floor`. An achromatic stack is applied to every channel.
pub fn event_distance(
    frame_t: ArrayView3<'_, f64>,
    frame_prev: ArrayView3<'_, f64>,
    stack: &EventStack,
    theta: f64,
    log_floor: f64,
) -> Result<ResidualImage> {
    if frame_t.dim() != frame_prev.dim() {
        return Err(Error::input(format!(
            "frame shapes differ: {:?} vs {:?}",
            frame_t.dim(),
            frame_prev.dim()
        )));
    }
    let (c, h, w) = frame_t.dim();
    if stack.values().dim() != (h, w) {
        return Err(Error::input(format!(
            "stack is {:?}, frames are {h}x{w}",
            stack.values().dim()
        )));
    }
    let mut d = Array3::zeros((c, h, w));
    for ch in 0..c {
        Zip::from(d.index_axis_mut(Axis(0), ch))
            .and(frame_t.index_axis(Axis(0), ch))
            .and(frame_prev.index_axis(Axis(0), ch))
            .and(stack.values())
            .for_each(|out, &now, &before, &e| {
                *out = clamped_ln(now, log_floor) - clamped_ln(before, log_floor) - theta * e;
            });
    }
    Ok(ResidualImage(d))
}

/// Pixel-mean hinge `max(0, |d| - 2 theta)`; zero exactly when every entry
/// lies in the feasibility band.
pub fn event_loss(d: &ResidualImage, theta: f64) -> f64 {
    let band = 2.0 * theta;
    let sum: f64 = d.0.iter().map(|v| (v.abs() - band).max(0.0)).sum();
    sum / d.0.len().max(1) as f64
}

/// Element-mean squared distance.
pub fn anchor_loss(x: &LatentTensor, anchor: &LatentTensor) -> Result<f64> {
    if x.dim() != anchor.dim() {
        return Err(Error::input("anchor shape does not match latent"));
    }
    let sum = Zip::from(x)
        .and(anchor)
        .fold(0.0, |acc, &a, &b| acc + (a - b) * (a - b));
    Ok(sum / x.len().max(1) as f64)
}

pub fn total_loss(event_term: f64, anchor_term: f64, eta: f64) -> f64 {
    event_term + eta * anchor_term
}

/// Losses of one frame after refinement at one reverse time.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagnosticRow {
    pub tau: usize,
    pub frame: usize,
    pub event_loss: f64,
    pub anchor_loss: f64,
    pub total_loss: f64,
}

/// Objective values visited by one inner L-BFGS run.
#[derive(Debug, Clone, PartialEq)]
pub struct InnerTrace {
    pub tau: usize,
    pub frame: usize,
    pub values: Vec<f64>,
    pub termination: Termination,
}

impl InnerTrace {
    pub fn is_non_increasing(&self) -> bool {
        self.values.windows(2).all(|w| w[1] <= w[0])
    }
}

#[derive(Debug, Clone)]
pub struct SampleOutput {
    pub frames: FrameSequence,
    /// Final clean latents, one frame per entry along axis 0.
    pub latents: LatentTensor,
    pub diagnostics: Vec<DiagnosticRow>,
    pub inner_traces: Vec<InnerTrace>,
}

/// Seeded standard-normal starting latents, one `1 x C x H x W` tensor per frame.
pub fn initial_latents(
    n_frames: usize,
    dims: (usize, usize, usize),
    seed: u64,
) -> Vec<LatentTensor> {
    let mut rng = rng::stream_rng(seed, Stream::Sampling);
    let (c, h, w) = dims;
    (0..n_frames)
        .map(|_| Array4::from_shape_simple_fn((1, c, h, w), || StandardNormal.sample(&mut rng)))
        .collect()
}

/// Event-guided sampling from seeded noise.
pub fn egs_sample(
    denoiser: &dyn Denoiser,
    codec: &dyn Codec,
    stacks: &[EventStack],
    cfg: &GuidanceConfig,
    schedule: &NoiseSchedule,
) -> Result<SampleOutput> {
    let init = seeded_init(codec, stacks, cfg)?;
    egs_sample_from(denoiser, codec, stacks, cfg, schedule, init)
}

/// The unguided control: identical initialisation and schedule, no refinement.
pub fn unguided_sample(
    denoiser: &dyn Denoiser,
    codec: &dyn Codec,
    stacks: &[EventStack],
    cfg: &GuidanceConfig,
    schedule: &NoiseSchedule,
) -> Result<SampleOutput> {
    let init = seeded_init(codec, stacks, cfg)?;
    run(denoiser, codec, stacks, cfg, schedule, init, false)
}

/// Event-guided sampling from explicit starting latents.
pub fn egs_sample_from(
    denoiser: &dyn Denoiser,
    codec: &dyn Codec,
    stacks: &[EventStack],
    cfg: &GuidanceConfig,
    schedule: &NoiseSchedule,
    init: Vec<LatentTensor>,
) -> Result<SampleOutput> {
    run(denoiser, codec, stacks, cfg, schedule, init, true)
}

fn seeded_init(codec: &dyn Codec, stacks: &[EventStack], cfg: &GuidanceConfig) -> Result<Vec<LatentTensor>> {
    let (h, w) = stacks
        .first()
        .map(|s| (s.height(), s.width()))
        .ok_or_else(|| Error::input("no event stacks given"))?;
    Ok(initial_latents(
        cfg.n_frames,
        codec.latent_dims(cfg.channels, h, w),
        cfg.seed,
    ))
}

fn run(
    denoiser: &dyn Denoiser,
    codec: &dyn Codec,
    stacks: &[EventStack],
    cfg: &GuidanceConfig,
    schedule: &NoiseSchedule,
    mut latents: Vec<LatentTensor>,
    guided: bool,
) -> Result<SampleOutput> {
    cfg.validate()?;
    if guided && !codec.is_differentiable() {
        return Err(Error::UnsupportedCodec(
            "guided sampling needs a differentiable decoder".into(),
        ));
    }
    let n = cfg.n_frames;
    if stacks.len() != n {
        return Err(Error::input(format!("{} stacks for {n} frames", stacks.len())));
    }
    if latents.len() != n {
        return Err(Error::input(format!("{} initial latents for {n} frames", latents.len())));
    }
    let (h, w) = (stacks[0].height(), stacks[0].width());
    if stacks.iter().any(|s| (s.height(), s.width()) != (h, w)) {
        return Err(Error::input("event stacks differ in geometry"));
    }
    let timestamps = stacks
        .iter()
        .map(|s| u64::try_from(s.window().1).map_err(|_| Error::input("stack window ends before 0")))
        .collect::<Result<Vec<_>>>()?;
    let conds: Vec<Conditioning> = stacks
        .iter()
        .map(|s| s.values().clone().insert_axis(Axis(0)).insert_axis(Axis(0)))
        .collect();

    let lbfgs = LbfgsConfig {
        max_iters: cfg.inner_steps,
        ..cfg.lbfgs.clone()
    };
    let mut diagnostics = Vec::new();
    let mut inner_traces = Vec::new();
    // log luminance of each frame's current clean prediction
    let mut current_logs: Vec<Array2<f64>> = vec![Array2::zeros((h, w)); n];

    for (tau, tau_prev) in schedule.reverse_pairs(cfg.ddim_steps)? {
        let gamma = schedule.gamma(tau);
        for t in 0..n {
            let eps = denoiser.evaluate(&latents[t], &conds[t], tau, cfg.guidance_scale)?;
            if eps.dim() != latents[t].dim() || eps.iter().any(|v| !v.is_finite()) {
                return Err(Error::GuidanceDivergence {
                    tau,
                    frame: t,
                    reason: "denoiser returned a non-finite or misshapen estimate".into(),
                });
            }
            if t >= 1 {
                let problem = FrameProblem {
                    codec,
                    eps: &eps,
                    anchor: &latents[t],
                    prev_log: &current_logs[t - 1],
                    stack: stacks[t].values(),
                    theta: cfg.theta,
                    eta: cfg.eta,
                    log_floor: cfg.log_floor,
                    root_gamma: gamma.sqrt(),
                    root_one_minus_gamma: (1.0 - gamma).sqrt(),
                };
                if guided {
                    let start = latents[t].as_standard_layout().into_owned();
                    let report = lbfgs_minimize(
                        |z, g| problem.evaluate(z, Some(g)).unwrap_or(f64::NAN),
                        start.as_slice().expect("standard layout"),
                        &lbfgs,
                    )
                    .map_err(|e| Error::GuidanceDivergence {
                        tau,
                        frame: t,
                        reason: e.to_string(),
                    })?;
                    if !report.value.is_finite() {
                        return Err(Error::GuidanceDivergence {
                            tau,
                            frame: t,
                            reason: "non-finite objective".into(),
                        });
                    }
                    inner_traces.push(InnerTrace {
                        tau,
                        frame: t,
                        values: report.trace,
                        termination: report.termination,
                    });
                    let refined = Array4::from_shape_vec(start.raw_dim(), report.x)
                        .map_err(|e| Error::input(e.to_string()))?;
                    diagnostics.push(problem.diagnostics(&refined, tau, t)?);
                    latents[t] = refined;
                } else {
                    diagnostics.push(problem.diagnostics(&latents[t], tau, t)?);
                }
            }
            let x0 = predict_x0(&latents[t], &eps, tau, schedule)?;
            current_logs[t] = decoded_log_luminance(codec, &x0, cfg.log_floor)?;
            latents[t] = renoise(&x0, &eps, tau_prev, schedule);
        }
    }

    let views: Vec<_> = latents.iter().map(|l| l.view()).collect();
    let stacked = ndarray::concatenate(Axis(0), &views).map_err(|e| Error::input(e.to_string()))?;
    let decoded = codec.decode(&stacked)?;
    let frames = FrameSequence::with_log_floor(timestamps, decoded, cfg.log_floor)?;
    Ok(SampleOutput {
        frames,
        latents: stacked,
        diagnostics,
        inner_traces,
    })
}

fn decoded_log_luminance(codec: &dyn Codec, x0: &LatentTensor, floor: f64) -> Result<Array2<f64>> {
    let frames = codec.decode(x0)?;
    Ok(luminance(frames.index_axis(Axis(0), 0)).mapv_into(|v| clamped_ln(v, floor)))
}

/// The per-frame refinement objective over the noisy latent `z`.
struct FrameProblem<'a> {
    codec: &'a dyn Codec,
    eps: &'a LatentTensor,
    anchor: &'a LatentTensor,
    prev_log: &'a Array2<f64>,
    stack: &'a Array2<f64>,
    theta: f64,
    eta: f64,
    log_floor: f64,
    root_gamma: f64,
    root_one_minus_gamma: f64,
}

struct Breakdown {
    event: f64,
    anchor: f64,
}

impl FrameProblem<'_> {
    fn clean(&self, z: &LatentTensor) -> LatentTensor {
        Zip::from(z)
            .and(self.eps)
            .map_collect(|&zv, &e| (zv - self.root_one_minus_gamma * e) / self.root_gamma)
    }

    /// Loss terms at `z`, writing the gradient of the total into `grad`.
    fn terms(&self, z: &LatentTensor, grad: Option<&mut [f64]>) -> Result<Breakdown> {
        let x0 = self.clean(z);
        let decoded = self.codec.decode(&x0)?;
        let frame = decoded.index_axis(Axis(0), 0);
        let lum = luminance(frame);
        if lum.dim() != self.stack.dim() {
            return Err(Error::input("decoded frame geometry differs from the stacks"));
        }
        let band = 2.0 * self.theta;
        let pixels = lum.len() as f64;
        let mut event = 0.0;
        // d(event term)/d(luminance)
        let mut lum_grad = Array2::<f64>::zeros(lum.raw_dim());
        Zip::from(&mut lum_grad)
            .and(&lum)
            .and(self.prev_log)
            .and(self.stack)
            .for_each(|g, &l, &prev, &e| {
                let d = clamped_ln(l, self.log_floor) - prev - self.theta * e;
                let excess = d.abs() - band;
                if excess > 0.0 {
                    event += excess;
                    if l > self.log_floor {
                        *g = d.signum() / (pixels * l);
                    }
                }
            });
        event /= pixels;
        let anchor = anchor_loss(z, self.anchor)?;

        if let Some(grad) = grad {
            let channels = frame.dim().0;
            let mut upstream = Array4::<f64>::zeros(decoded.raw_dim());
            for c in 0..channels {
                let weight = if channels == 1 { 1.0 } else { LUMA_WEIGHTS[c] };
                Zip::from(upstream.index_axis_mut(Axis(0), 0).index_axis_mut(Axis(0), c))
                    .and(&lum_grad)
                    .for_each(|u, &g| *u = weight * g);
            }
            let x0_grad = self.codec.decode_vjp(&x0, &upstream)?;
            let scale = 2.0 * self.eta / z.len() as f64;
            for (((g, &gx), &zv), &av) in grad
                .iter_mut()
                .zip(x0_grad.iter())
                .zip(z.iter())
                .zip(self.anchor.iter())
            {
                *g = gx / self.root_gamma + scale * (zv - av);
            }
        }
        Ok(Breakdown { event, anchor })
    }

    fn evaluate(&self, z: &[f64], grad: Option<&mut [f64]>) -> Result<f64> {
        let z = Array4::from_shape_vec(self.anchor.raw_dim(), z.to_vec())
            .map_err(|e| Error::input(e.to_string()))?;
        let b = self.terms(&z, grad)?;
        Ok(total_loss(b.event, b.anchor, self.eta))
    }

    fn diagnostics(&self, z: &LatentTensor, tau: usize, frame: usize) -> Result<DiagnosticRow> {
        let b = self.terms(z, None)?;
        Ok(DiagnosticRow {
            tau,
            frame,
            event_loss: b.event,
            anchor_loss: b.anchor,
            total_loss: total_loss(b.event, b.anchor, self.eta),
        })
    }
}
