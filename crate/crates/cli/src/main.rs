//! `modecoupling` command-line front end.
//!
//! Exit codes: 0 success, 2 configuration or input error, 3 estimation or
//! fit failure. Every run writes `manifest.txt` into `--out` before doing
//! anything else and finalizes it with artifact hashes at the end.

mod commands;
mod manifest;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use modecoupling::Error;

#[derive(Debug, Parser)]
#[command(
    name = "modecoupling",
    version,
    about = "Coherent two-mode control of a levitated nanoparticle"
)]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Config file (`key = value` lines); defaults apply when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Overrides `rng.seed`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR", default_value = "out")]
    pub out: PathBuf,
    /// Worker threads for Monte Carlo batches (default: all cores).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Config override, repeatable.
    #[arg(long = "override", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Also write a gnuplot script next to every CSV.
    #[arg(long, global = true)]
    pub plot: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Backend {
    Envelope,
    Fullsim,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    X,
    Y,
}

#[derive(Debug, Clone, Args)]
pub struct BackendArgs {
    /// Shorthand for `--override run.backend=...`.
    #[arg(long)]
    pub backend: Option<Backend>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Rabi exchange with the coupling switched on at `drive.t_on_ms`.
    Rabi(BackendArgs),
    /// Rabi exchange with parametric feedback on one mode.
    Sympathetic(BackendArgs),
    /// Energy-transfer cooling of the y-mode.
    Transfer {
        #[command(flatten)]
        backend: BackendArgs,
        /// Exact switch times from the envelope state (envelope backend only).
        #[arg(long)]
        oracle: bool,
        /// Record this long after the coupling is switched off (ms).
        #[arg(long, default_value_t = 0.0)]
        hold_ms: f64,
    },
    /// PSD, Lorentzian fit and energy series of a position record.
    Analyze {
        /// Record file: trajectory or record CSV, or binary trajectory (`.bin`).
        #[arg(long, value_name = "PATH")]
        record: PathBuf,
        #[arg(long, value_enum)]
        mode: ModeArg,
        /// Welch segment length in samples (default: 16384 or the record length).
        #[arg(long)]
        segment: Option<usize>,
        /// Half-width of the fit band around the configured mode frequency (kHz).
        #[arg(long, default_value_t = 20.0)]
        band_khz: f64,
        /// Demodulation window of the energy series (μs).
        #[arg(long, default_value_t = 100.0)]
        window_us: f64,
    },
    /// Detection-limited cooling floor and ground-state comparison.
    Limit,
    /// Monte Carlo estimate of the energy-transfer cooling floor.
    Montecarlo {
        #[command(flatten)]
        backend: BackendArgs,
        /// Shorthand for `--override montecarlo.trials=...`.
        #[arg(long)]
        trials: Option<usize>,
        /// Shorthand for `--override montecarlo.tau_ms=...`.
        #[arg(long)]
        tau_ms: Option<f64>,
    },
    /// Full simulation: trajectory and noisy detector record.
    Simulate {
        /// Write the trajectory as little-endian f64 records instead of CSV.
        #[arg(long)]
        binary: bool,
    },
    /// Re-runs the command stored in a manifest into a new output directory.
    Replay {
        #[arg(value_name = "MANIFEST")]
        manifest: PathBuf,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Rabi(_) => "rabi",
            Command::Sympathetic(_) => "sympathetic",
            Command::Transfer { .. } => "transfer",
            Command::Analyze { .. } => "analyze",
            Command::Limit => "limit",
            Command::Montecarlo { .. } => "montecarlo",
            Command::Simulate { .. } => "simulate",
            Command::Replay { .. } => "replay",
        }
    }
}

pub fn exit_code(err: &Error) -> u8 {
    if err.is_input_error() {
        2
    } else {
        3
    }
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    let cli = Cli::parse_from(&argv);
    let code = commands::execute(cli, argv[1..].to_vec());
    ExitCode::from(code)
}
