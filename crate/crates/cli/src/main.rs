use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

mod commands;
mod output;

/// Train, evaluate and run the semantic image transmission pipeline.
#[derive(Parser)]
#[command(name = "semcom", version)]
struct Cli {
    /// Root directory for all outputs; relative output paths in configs are resolved against it.
    #[arg(long, global = true, env = "SEMCOM_OUTPUT_ROOT")]
    output_root: Option<PathBuf>,
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one training phase.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=3))]
        phase: u8,
        /// Predecessor checkpoint; defaults to the previous phase in the output directory.
        #[arg(long)]
        from: Option<PathBuf>,
        /// Name suffix for the written files, e.g. to keep an ablation variant apart.
        #[arg(long)]
        tag: Option<String>,
    },
    /// Evaluate trained checkpoints.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        mode: EvalMode,
        /// Checkpoints; `ablate-loss` takes the run with the SS loss first and the run without it second.
        #[arg(long, num_args = 1.., required = true)]
        ckpt: Vec<PathBuf>,
    },
    /// Send one image through encoder, channel, denoiser and decoder.
    Transmit {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, allow_hyphen_values = true)]
        snr: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory; defaults to the output root or the current directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Load an image folder and report the resulting split.
    Ingest {
        #[arg(long)]
        dir: PathBuf,
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long, default_value_t = 0.2)]
        val_fraction: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write the default desk-scale configuration.
    InitConfig {
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
pub enum EvalMode {
    Sweep,
    AblateSs,
    AblateSteps,
    AblateLoss,
    Latency,
}

impl EvalMode {
    pub fn name(self) -> &'static str {
        match self {
            EvalMode::Sweep => "sweep",
            EvalMode::AblateSs => "ablate-ss",
            EvalMode::AblateSteps => "ablate-steps",
            EvalMode::AblateLoss => "ablate-loss",
            EvalMode::Latency => "latency",
        }
    }
}

pub fn resolve_output(root: Option<&Path>, dir: &Path) -> PathBuf {
    match root {
        Some(r) if dir.is_relative() => r.join(dir),
        _ => dir.to_path_buf(),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let root = cli.output_root.as_deref();
    let result = match cli.command {
        Command::Train { config, phase, from, tag } => commands::train(root, &config, phase, from.as_deref(), tag.as_deref()),
        Command::Eval { config, mode, ckpt } => commands::eval(root, &config, mode, &ckpt),
        Command::Transmit {
            image,
            ckpt,
            snr,
            seed,
            out,
        } => commands::transmit(root, &image, &ckpt, snr, seed, out.as_deref()),
        Command::Ingest {
            dir,
            size,
            val_fraction,
            seed,
        } => commands::ingest(&dir, size, val_fraction, seed),
        Command::InitConfig { out } => commands::init_config(&out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
