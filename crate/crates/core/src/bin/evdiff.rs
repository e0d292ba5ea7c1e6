use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use evdiff::config::RunConfig;
use evdiff::pipeline::{run_pipeline, Command};

/// Event simulation and event-guided diffusion sampling.
///
/// Any config key can be overridden with `--section.key=value`, for example
/// `--guidance.eta=0.5` or `--paths.events=run/events.evt1`.
#[derive(Parser, Debug)]
#[command(name = "evdiff", version)]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Contrast threshold for simulation.
    #[arg(long, global = true)]
    theta: Option<f64>,
    /// Anchor weight.
    #[arg(long, global = true)]
    eta: Option<f64>,
    /// L-BFGS iterations per frame and reverse step.
    #[arg(long, global = true)]
    steps: Option<usize>,
    #[arg(long = "ddim-steps", global = true)]
    ddim_steps: Option<usize>,
    /// Number of frames to stack, sample or evaluate.
    #[arg(long, global = true)]
    frames: Option<usize>,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Simulate events from the frames in `paths.video`.
    Simulate,
    /// Add hot pixels and drop events.
    Augment,
    /// Integrate events into frame-aligned stacks.
    Stack,
    /// Direct integration from the true first frame.
    Reconstruct,
    /// Sample frames with event guidance.
    Sample {
        /// Plain DDIM sampling without the inner refinement.
        #[arg(long)]
        unguided: bool,
    },
    /// Consistency and PSNR of stored frames.
    Eval,
    /// Loss curves and a frame strip.
    Plot,
}

/// Splits `--a.b=value` overrides from the arguments clap understands.
fn split_overrides(args: Vec<String>) -> (Vec<String>, Vec<(String, String)>) {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    for arg in args {
        if let Some((key, value)) = arg.strip_prefix("--").and_then(|a| a.split_once('=')) {
            if key.contains('.') {
                overrides.push((key.to_string(), value.to_string()));
                continue;
            }
        }
        rest.push(arg);
    }
    (rest, overrides)
}

fn main() -> ExitCode {
    let (args, mut overrides) = split_overrides(std::env::args().collect());
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    let flags: [(&str, Option<String>); 6] = [
        ("seed", cli.seed.map(|v| v.to_string())),
        ("simulator.threshold", cli.theta.map(|v| format!("{v:?}"))),
        ("guidance.eta", cli.eta.map(|v| format!("{v:?}"))),
        ("guidance.inner_steps", cli.steps.map(|v| v.to_string())),
        ("guidance.ddim_steps", cli.ddim_steps.map(|v| v.to_string())),
        ("guidance.frames", cli.frames.map(|v| v.to_string())),
    ];
    overrides.extend(flags.into_iter().filter_map(|(k, v)| v.map(|v| (k.to_string(), v))));

    let command = match cli.command {
        Cmd::Simulate => Command::Simulate,
        Cmd::Augment => Command::Augment,
        Cmd::Stack => Command::Stack,
        Cmd::Reconstruct => Command::Reconstruct,
        Cmd::Sample { unguided } => Command::Sample { unguided },
        Cmd::Eval => Command::Eval,
        Cmd::Plot => Command::Plot,
    };
    let result = RunConfig::load(cli.config.as_deref(), &overrides)
        .and_then(|cfg| run_pipeline(command, &cfg));
    match result {
        Ok(summary) => {
            let mut line = format!("{}:", command.name());
            for (k, v) in &summary.metrics {
                if k != "command" && !v.is_array() {
                    line.push_str(&format!(" {k}={v}"));
                }
            }
            println!("{line}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("evdiff {}: {e}", command.name());
            if e.is_validation() {
                ExitCode::from(2)
            } else {
                ExitCode::from(3)
            }
        }
    }
}
