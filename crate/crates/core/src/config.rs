//! TOML run configuration with dotted-key overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::diffusion::{NoiseSchedule, DEFAULT_BETA_END, DEFAULT_BETA_START, DEFAULT_TIMESTEPS};
use crate::error::{Error, Result};
use crate::events::{AugmentConfig, SimulatorConfig, DEFAULT_LOG_FLOOR};
use crate::guided::GuidanceConfig;
use crate::optim::LbfgsConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: PathsConfig,
    pub timing: TimingConfig,
    pub simulator: SimulatorSection,
    pub augment: AugmentSection,
    pub schedule: ScheduleSection,
    pub guidance: GuidanceSection,
    pub prior: PriorSection,
}

/// Files read or written by the subcommands. Relative paths resolve against
/// the directory of the config file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    /// Directory of `frame_NNNN.png` ground-truth frames.
    pub video: Option<PathBuf>,
    /// Event stream, EVT1 or CSV (by `.csv` extension).
    pub events: Option<PathBuf>,
    /// Output of `augment`.
    pub augmented: Option<PathBuf>,
    /// Stack tensor (TNS1).
    pub stacks: Option<PathBuf>,
    /// Reconstructed or sampled frames (TNS1).
    pub frames: Option<PathBuf>,
    /// PNG export of `frames`.
    pub frame_dir: Option<PathBuf>,
    /// Per-step guidance losses.
    pub diagnostics: Option<PathBuf>,
    /// Summaries, schedule dump and plots.
    pub out_dir: Option<PathBuf>,
}

/// Frame clock used when no video directory provides timestamps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TimingConfig {
    pub start_us: u64,
    pub interval_us: u64,
}

impl Default for TimingConfig {
    fn default() -> Self {
        Self {
            start_us: 0,
            interval_us: 10_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulatorSection {
    pub threshold: f64,
    pub off_threshold: Option<f64>,
    pub refractory_us: u64,
    pub log_floor: f64,
}

impl Default for SimulatorSection {
    fn default() -> Self {
        Self {
            threshold: 0.2,
            off_threshold: None,
            refractory_us: 0,
            log_floor: DEFAULT_LOG_FLOOR,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentSection {
    pub hot_pixel_rate: f64,
    pub drop_rate: f64,
    pub hot_pixel_hz: f64,
}

impl Default for AugmentSection {
    fn default() -> Self {
        let d = AugmentConfig::default();
        Self {
            hot_pixel_rate: d.hot_pixel_rate,
            drop_rate: d.drop_rate,
            hot_pixel_hz: d.hot_pixel_hz,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleSection {
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        Self {
            timesteps: DEFAULT_TIMESTEPS,
            beta_start: DEFAULT_BETA_START,
            beta_end: DEFAULT_BETA_END,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GuidanceSection {
    /// Overrides the threshold stored with the event stream.
    pub theta: Option<f64>,
    pub eta: f64,
    pub inner_steps: usize,
    pub ddim_steps: usize,
    pub frames: usize,
    pub guidance_scale: f64,
    pub lbfgs: LbfgsSection,
}

impl Default for GuidanceSection {
    fn default() -> Self {
        let d = GuidanceConfig::new(0.2, 16);
        Self {
            theta: None,
            eta: d.eta,
            inner_steps: d.inner_steps,
            ddim_steps: d.ddim_steps,
            frames: d.n_frames,
            guidance_scale: d.guidance_scale,
            lbfgs: LbfgsSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LbfgsSection {
    pub memory: usize,
    pub c1: f64,
    pub backtrack: f64,
    pub max_backtracks: usize,
    pub grad_tol: f64,
}

impl Default for LbfgsSection {
    fn default() -> Self {
        let d = LbfgsConfig::default();
        Self {
            memory: d.memory,
            c1: d.c1,
            backtrack: d.backtrack,
            max_backtracks: d.max_backtracks,
            grad_tol: d.grad_tol,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PriorSource {
    /// Every distinct frame of `paths.video` is one component.
    Video,
    /// Component means from a `K x C x H x W` TNS1 file.
    File,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PriorSection {
    pub source: PriorSource,
    pub means_file: Option<PathBuf>,
    /// Equal weights when empty.
    pub weights: Vec<f64>,
    pub sigma2: f64,
}

impl Default for PriorSection {
    fn default() -> Self {
        Self {
            source: PriorSource::Video,
            means_file: None,
            weights: Vec::new(),
            sigma2: 0.01,
        }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            paths: PathsConfig::default(),
            timing: TimingConfig::default(),
            simulator: SimulatorSection::default(),
            augment: AugmentSection::default(),
            schedule: ScheduleSection::default(),
            guidance: GuidanceSection::default(),
            prior: PriorSection::default(),
        }
    }
}

impl RunConfig {
    /// Parses `text`, applies `overrides` (`section.key` and a TOML value, or
    /// a bare string) and resolves relative paths against `base`.
    pub fn from_toml(text: &str, overrides: &[(String, String)], base: &Path) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        for (key, value) in overrides {
            set_dotted(&mut table, key, parse_value(value))?;
        }
        let mut cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.resolve_paths(base);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                let base = p.parent().unwrap_or(Path::new("."));
                Self::from_toml(&text, overrides, base)
            }
            None => Self::from_toml("", overrides, Path::new(".")),
        }
    }

    fn resolve_paths(&mut self, base: &Path) {
        let p = &mut self.paths;
        for slot in [
            &mut p.video,
            &mut p.events,
            &mut p.augmented,
            &mut p.stacks,
            &mut p.frames,
            &mut p.frame_dir,
            &mut p.diagnostics,
            &mut p.out_dir,
            &mut self.prior.means_file,
        ] {
            if let Some(path) = slot {
                if path.is_relative() {
                    *path = base.join(&*path);
                }
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.simulator_config().validate()?;
        self.augment_config().validate()?;
        self.schedule()?;
        if let Some(theta) = self.guidance.theta {
            if !(theta.is_finite() && theta > 0.0) {
                return Err(Error::Config(format!("guidance.theta must be positive, got {theta}")));
            }
        }
        self.guidance_config(self.simulator.threshold, 1).validate()?;
        if self.timing.interval_us == 0 {
            return Err(Error::Config("timing.interval_us must be positive".into()));
        }
        if !(self.prior.sigma2 >= 0.0) {
            return Err(Error::Config("prior.sigma2 must be non-negative".into()));
        }
        if self.prior.source == PriorSource::File && self.prior.means_file.is_none() {
            return Err(Error::Config("prior.source = \"file\" needs prior.means_file".into()));
        }
        Ok(())
    }

    /// The path stored under `paths.<name>`, or a configuration error naming
    /// the missing key.
    pub fn require(&self, name: &str) -> Result<&Path> {
        let p = &self.paths;
        let slot = match name {
            "video" => &p.video,
            "events" => &p.events,
            "augmented" => &p.augmented,
            "stacks" => &p.stacks,
            "frames" => &p.frames,
            "frame_dir" => &p.frame_dir,
            "diagnostics" => &p.diagnostics,
            "out_dir" => &p.out_dir,
            other => return Err(Error::Config(format!("unknown path key '{other}'"))),
        };
        slot.as_deref()
            .ok_or_else(|| Error::Config(format!("paths.{name} is not set")))
    }

    pub fn simulator_config(&self) -> SimulatorConfig {
        SimulatorConfig {
            threshold: self.simulator.threshold,
            off_threshold: self.simulator.off_threshold,
            refractory_us: self.simulator.refractory_us,
            log_floor: self.simulator.log_floor,
        }
    }

    pub fn augment_config(&self) -> AugmentConfig {
        AugmentConfig {
            hot_pixel_rate: self.augment.hot_pixel_rate,
            drop_rate: self.augment.drop_rate,
            hot_pixel_hz: self.augment.hot_pixel_hz,
        }
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        let s = &self.schedule;
        NoiseSchedule::linear(s.timesteps, s.beta_start, s.beta_end)
    }

    /// Sampler settings for events generated with threshold `stream_theta`.
    pub fn guidance_config(&self, stream_theta: f64, channels: usize) -> GuidanceConfig {
        let g = &self.guidance;
        GuidanceConfig {
            theta: g.theta.unwrap_or(stream_theta),
            eta: g.eta,
            inner_steps: g.inner_steps,
            ddim_steps: g.ddim_steps,
            n_frames: g.frames,
            channels,
            guidance_scale: g.guidance_scale,
            seed: self.seed,
            log_floor: self.simulator.log_floor,
            lbfgs: LbfgsConfig {
                memory: g.lbfgs.memory,
                max_iters: g.inner_steps,
                grad_tol: g.lbfgs.grad_tol,
                c1: g.lbfgs.c1,
                backtrack: g.lbfgs.backtrack,
                max_backtracks: g.lbfgs.max_backtracks,
            },
        }
    }
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn set_dotted(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("malformed key '{key}'")));
    }
    let (last, parents) = parts.split_last().expect("split yields one part");
    let mut cur = table;
    for part in parents {
        let entry = cur
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("'{part}' in '{key}' is not a section")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ov(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn empty_document_gives_defaults() {
        let cfg = RunConfig::from_toml("", &[], Path::new(".")).unwrap();
        assert_eq!(cfg, RunConfig::default());
        let g = cfg.guidance_config(0.3, 1);
        assert_eq!((g.theta, g.inner_steps, g.ddim_steps, g.n_frames), (0.3, 5, 25, 16));
        assert_eq!(g.lbfgs.max_iters, 5);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for doc in ["sed = 1", "[guidance]\nsteps = 3", "[bogus]\na = 1"] {
            let err = RunConfig::from_toml(doc, &[], Path::new(".")).unwrap_err();
            assert!(matches!(err, Error::Config(_)), "{doc}: {err}");
        }
        let err = RunConfig::from_toml("", &ov(&[("guidance.bogus", "1")]), Path::new("."));
        assert!(err.is_err());
    }

    #[test]
    fn overrides_replace_file_values() {
        let doc = "seed = 3\n[guidance]\neta = 0.5\n[paths]\nevents = \"ev.evt1\"\n";
        let cfg = RunConfig::from_toml(
            doc,
            &ov(&[("guidance.eta", "2"), ("seed", "9"), ("paths.frames", "out/f.tns1")]),
            Path::new("/work"),
        )
        .unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.guidance.eta, 2.0);
        assert_eq!(cfg.paths.events.as_deref(), Some(Path::new("/work/ev.evt1")));
        assert_eq!(cfg.require("frames").unwrap(), Path::new("/work/out/f.tns1"));
    }

    #[test]
    fn missing_paths_are_named() {
        let cfg = RunConfig::default();
        let err = cfg.require("events").unwrap_err();
        assert!(err.to_string().contains("paths.events"));
        assert!(err.is_validation());
    }

    #[test]
    fn invalid_values_fail_validation() {
        for (k, v) in [
            ("simulator.threshold", "-1"),
            ("augment.drop_rate", "1.5"),
            ("schedule.beta_end", "2.0"),
            ("guidance.inner_steps", "0"),
            ("guidance.frames", "1"),
            ("prior.sigma2", "-0.1"),
            ("prior.source", "\"file\""),
            ("timing.interval_us", "0"),
        ] {
            assert!(RunConfig::from_toml("", &ov(&[(k, v)]), Path::new(".")).is_err(), "{k}");
        }
    }
}
