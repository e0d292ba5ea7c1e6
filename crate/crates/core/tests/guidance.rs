use evdiff::diffusion::{training_loss, Conditioning, Denoiser, IdentityCodec, LatentTensor, NoiseSchedule};
use evdiff::events::{frame_aligned_stacks, simulate_events, EventStack, FrameSequence};
use evdiff::guided::{egs_sample, egs_sample_from, initial_latents, unguided_sample, GuidanceConfig};
use evdiff::prior::{sample_gmm_batch, GaussianMixture, GmmDenoiser};
use evdiff::rng::seeded;
use evdiff::Error;
use ndarray::{Array4, Axis};
use rand_distr::{Distribution, StandardNormal};

const SIZE: usize = 8;

fn means(k: usize) -> Array4<f64> {
    Array4::from_shape_fn((k, 1, SIZE, SIZE), |(i, _, y, x)| {
        let phase = std::f64::consts::TAU * i as f64 / k as f64;
        0.5 + 0.3 * ((x as f64 + 0.5 * y as f64) / SIZE as f64 * std::f64::consts::TAU + phase).sin()
    })
}

fn scene(k: usize, n: usize, theta: f64) -> (GmmDenoiser, Vec<EventStack>, NoiseSchedule) {
    let m = means(k);
    let mut video = Array4::zeros((n, 1, SIZE, SIZE));
    for t in 0..n {
        video.index_axis_mut(Axis(0), t).assign(&m.index_axis(Axis(0), t % k));
    }
    let frames = FrameSequence::evenly_spaced(0, 10_000, video).unwrap();
    let stacks = frame_aligned_stacks(&simulate_events(&frames, theta).unwrap(), frames.timestamps()).unwrap();
    let schedule = NoiseSchedule::default();
    let gmm = GaussianMixture::new(vec![1.0; k], m, 0.01).unwrap();
    (GmmDenoiser::new(gmm, schedule.clone()), stacks, schedule)
}

fn zero_stacks(n: usize) -> Vec<EventStack> {
    (0..n)
        .map(|t| EventStack::zeros((t as i64 * 10 - 10, t as i64 * 10), SIZE, SIZE).unwrap())
        .collect()
}

fn config(theta: f64, n: usize) -> GuidanceConfig {
    let mut cfg = GuidanceConfig::new(theta, n);
    cfg.ddim_steps = 10;
    cfg
}

#[test]
fn huge_anchor_weight_reproduces_unguided() {
    let (den, stacks, schedule) = scene(4, 5, 0.2);
    let mut cfg = config(0.2, 5);
    cfg.eta = 1e9;
    let guided = egs_sample(&den, &IdentityCodec, &stacks, &cfg, &schedule).unwrap();
    let plain = unguided_sample(&den, &IdentityCodec, &stacks, &cfg, &schedule).unwrap();
    let diff = (guided.frames.data() - plain.frames.data()).mapv(f64::abs);
    assert!(diff.iter().all(|&d| d < 1e-3), "{}", diff.fold(0.0f64, |a, &b| a.max(b)));
}

#[test]
fn identical_starts_without_events_give_identical_frames() {
    let schedule = NoiseSchedule::default();
    let gmm = GaussianMixture::new(vec![1.0; 3], means(3), 0.01).unwrap();
    let den = GmmDenoiser::new(gmm, schedule.clone());
    let n = 4;
    let one = initial_latents(1, (1, SIZE, SIZE), 9).remove(0);
    let init = vec![one; n];
    let out = egs_sample_from(&den, &IdentityCodec, &zero_stacks(n), &config(0.2, n), &schedule, init).unwrap();
    for t in 1..n {
        assert_eq!(out.frames.frame(t), out.frames.frame(0));
    }
}

#[test]
fn inactive_guidance_is_bit_identical_to_unguided() {
    // eta = 0 and every pair already inside the band: zero objective and gradient
    let schedule = NoiseSchedule::default();
    let gmm = GaussianMixture::new(vec![1.0], means(1), 1e-6).unwrap();
    let den = GmmDenoiser::new(gmm, schedule.clone());
    let n = 5;
    let mut cfg = config(0.2, n);
    cfg.eta = 0.0;
    let guided = egs_sample(&den, &IdentityCodec, &zero_stacks(n), &cfg, &schedule).unwrap();
    let plain = unguided_sample(&den, &IdentityCodec, &zero_stacks(n), &cfg, &schedule).unwrap();
    assert_eq!(guided.frames.data(), plain.frames.data());
    assert_eq!(guided.latents, plain.latents);
}

#[test]
fn first_frame_is_never_refined() {
    let (den, stacks, schedule) = scene(4, 6, 0.2);
    let cfg = config(0.2, 6);
    let guided = egs_sample(&den, &IdentityCodec, &stacks, &cfg, &schedule).unwrap();
    let plain = unguided_sample(&den, &IdentityCodec, &stacks, &cfg, &schedule).unwrap();
    assert_eq!(guided.frames.frame(0), plain.frames.frame(0));
    assert!(guided.inner_traces.iter().all(|t| t.frame >= 1));
    assert!(guided.diagnostics.iter().all(|d| d.frame >= 1));
}

#[test]
fn inner_solves_never_increase_the_objective() {
    let (den, stacks, schedule) = scene(4, 6, 0.2);
    let mut cfg = config(0.2, 6);
    cfg.inner_steps = 8;
    let out = egs_sample(&den, &IdentityCodec, &stacks, &cfg, &schedule).unwrap();
    assert_eq!(out.inner_traces.len(), 10 * 5);
    for trace in &out.inner_traces {
        assert!(trace.is_non_increasing(), "tau {} frame {}", trace.tau, trace.frame);
        assert!(trace.values.len() <= cfg.inner_steps + 1);
    }
    assert_eq!(out.frames.timestamps(), &stacks.iter().map(|s| s.window().1 as u64).collect::<Vec<_>>()[..]);
}

#[test]
fn guidance_improves_consistency() {
    let (den, stacks, schedule) = scene(4, 8, 0.2);
    let cfg = config(0.2, 8);
    let guided = egs_sample(&den, &IdentityCodec, &stacks, &cfg, &schedule).unwrap();
    let plain = unguided_sample(&den, &IdentityCodec, &stacks, &cfg, &schedule).unwrap();
    let g = evdiff::metrics::consistency_rate(&guided.frames, &stacks, 0.2).unwrap();
    let p = evdiff::metrics::consistency_rate(&plain.frames, &stacks, 0.2).unwrap();
    assert!(g > p, "{g} vs {p}");
}

#[test]
fn sampling_is_deterministic_per_seed() {
    let (den, stacks, schedule) = scene(3, 4, 0.2);
    let cfg = config(0.2, 4);
    let a = egs_sample(&den, &IdentityCodec, &stacks, &cfg, &schedule).unwrap();
    let b = egs_sample(&den, &IdentityCodec, &stacks, &cfg, &schedule).unwrap();
    assert_eq!(a.latents, b.latents);
    assert_eq!(a.diagnostics, b.diagnostics);
    let mut other = cfg.clone();
    other.seed = 1;
    let c = egs_sample(&den, &IdentityCodec, &stacks, &other, &schedule).unwrap();
    assert_ne!(a.latents, c.latents);
}

/// Pretends to be a codec whose decoder has no gradient.
struct Opaque;

impl evdiff::diffusion::Codec for Opaque {
    fn encode(&self, frames: &Array4<f64>) -> evdiff::Result<LatentTensor> {
        Ok(frames.clone())
    }
    fn decode(&self, latent: &LatentTensor) -> evdiff::Result<Array4<f64>> {
        Ok(latent.clone())
    }
    fn latent_dims(&self, c: usize, h: usize, w: usize) -> (usize, usize, usize) {
        (c, h, w)
    }
    fn is_lossless(&self) -> bool {
        true
    }
}

#[test]
fn guidance_needs_a_differentiable_decoder() {
    let (den, stacks, schedule) = scene(2, 3, 0.2);
    let cfg = config(0.2, 3);
    let err = egs_sample(&den, &Opaque, &stacks, &cfg, &schedule).unwrap_err();
    assert!(matches!(err, Error::UnsupportedCodec(_)));
    assert!(unguided_sample(&den, &Opaque, &stacks, &cfg, &schedule).is_ok());
}

/// Produces NaN at one noise level.
struct Broken(GmmDenoiser);

impl Denoiser for Broken {
    fn evaluate(&self, x: &LatentTensor, c: &Conditioning, tau: usize, s: f64) -> evdiff::Result<LatentTensor> {
        let mut out = self.0.evaluate(x, c, tau, s)?;
        if tau < 500 {
            out[(0, 0, 0, 0)] = f64::NAN;
        }
        Ok(out)
    }
}

#[test]
fn non_finite_denoiser_output_is_a_divergence() {
    let (den, stacks, schedule) = scene(2, 3, 0.2);
    let err = egs_sample(&Broken(den), &IdentityCodec, &stacks, &config(0.2, 3), &schedule).unwrap_err();
    assert!(matches!(err, Error::GuidanceDivergence { .. }));
    assert!(!err.is_validation());
}

#[test]
fn mismatched_inputs_are_rejected() {
    let (den, stacks, schedule) = scene(2, 4, 0.2);
    let err = egs_sample(&den, &IdentityCodec, &stacks[..3], &config(0.2, 4), &schedule).unwrap_err();
    assert!(err.is_validation());
    let mut bad = config(0.2, 4);
    bad.inner_steps = 0;
    assert!(egs_sample(&den, &IdentityCodec, &stacks, &bad, &schedule).is_err());
}

#[test]
fn gmm_denoiser_beats_the_zero_predictor() {
    let schedule = NoiseSchedule::default();
    let gmm = GaussianMixture::new(vec![0.3, 0.7], means(2), 0.01).unwrap();
    let mut rng = seeded(3);
    let x0 = sample_gmm_batch(&gmm, 64, &mut rng);
    let den = GmmDenoiser::new(gmm, schedule.clone());
    struct Zero;
    impl Denoiser for Zero {
        fn evaluate(&self, x: &LatentTensor, _: &Conditioning, _: usize, _: f64) -> evdiff::Result<LatentTensor> {
            Ok(Array4::zeros(x.dim()))
        }
    }
    let cond = Array4::zeros((0, 0, 0, 0));
    for tau in [10, 300, 900] {
        let noise = Array4::from_shape_simple_fn(x0.dim(), || StandardNormal.sample(&mut rng));
        let good = training_loss(&den, &x0, &cond, tau, &noise, &schedule).unwrap();
        let zero = training_loss(&Zero, &x0, &cond, tau, &noise, &schedule).unwrap();
        let mean_sq = noise.mapv(|v| v * v).mean().unwrap();
        assert!((zero - mean_sq).abs() < 1e-12);
        assert!(good < zero, "tau {tau}: {good} vs {zero}");
    }
}
