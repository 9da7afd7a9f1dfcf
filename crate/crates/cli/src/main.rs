mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Exit status classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Ok = 0,
    Partial = 1,
    Usage = 2,
    Failed = 3,
}

#[derive(Debug)]
pub struct CliError {
    pub status: Status,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            status: Status::Usage,
            message: message.into(),
        }
    }

    pub fn usage_from(e: canvascrop::Error) -> Self {
        Self::usage(e.to_string())
    }

    pub fn failed(message: impl Into<String>) -> Self {
        Self {
            status: Status::Failed,
            message: message.into(),
        }
    }
}

impl From<canvascrop::Error> for CliError {
    fn from(e: canvascrop::Error) -> Self {
        Self::failed(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::failed(e.to_string())
    }
}

#[derive(Parser)]
#[command(
    name = "canvascrop",
    version,
    about = "Masked-diffusion decoding with EoS-survival canvas cropping"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
pub struct Common {
    /// TOML config, or a manifest.json from an earlier run.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides `output` from the config.
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// Overrides `weights` from the config.
    #[arg(long)]
    pub weights: Option<PathBuf>,
    /// Record wall-clock time in the manifest (breaks byte-identical reruns).
    #[arg(long)]
    pub timestamps: bool,
}

#[derive(Args, Clone)]
pub struct DecodeArgs {
    #[command(flatten)]
    pub common: Common,
    /// Prompt as space-separated tokens, e.g. "<copy> apple 1 2 <sep>".
    #[arg(long)]
    pub prompt: String,
    /// fc (full-context) or sc (smartcrop).
    #[arg(long, default_value = "sc")]
    pub mode: String,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long, default_value = "preserve-density")]
    pub schedule_mode: String,
    #[arg(long, default_value_t = 64)]
    pub l_new: usize,
    /// Defaults to `--l-new`.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Discard the cropping pass instead of using it as step 1.
    #[arg(long)]
    pub no_reuse: bool,
    #[arg(long)]
    pub forced_length: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the toy model; writes weights.bin and loss.csv.
    Train(Common),
    /// Decode one prompt and write its trace.
    Decode(DecodeArgs),
    /// FC against SmartCrop over the τ grid.
    Eval(Common),
    /// δ sensitivity sweep around the predicted length.
    Sweep(Common),
    /// Crops at lengths drawn from other tasks' predictions.
    Control(Common),
    /// Predicted-length distributions across canvas sizes.
    Invariance(Common),
    /// Join eval summaries into the main results table.
    Report(Common),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(c) => commands::train(&c),
        Command::Decode(d) => commands::decode(&d),
        Command::Eval(c) => commands::eval(&c),
        Command::Sweep(c) => commands::sweep(&c),
        Command::Control(c) => commands::control(&c),
        Command::Invariance(c) => commands::invariance(&c),
        Command::Report(c) => commands::report(&c),
    };
    match result {
        Ok(Status::Ok) => ExitCode::SUCCESS,
        Ok(status) => {
            eprintln!("canvascrop: completed with failed instances (see failures.jsonl)");
            ExitCode::from(status as u8)
        }
        Err(e) => {
            eprintln!("canvascrop: {}", e.message);
            ExitCode::from(e.status as u8)
        }
    }
}
