//! `uie-snn`: train, run, profile and score the spiking enhancement network.

mod commands;
mod config;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::Overrides;

/// A failure with the process exit code it maps to.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        CliError {
            code: 2,
            message: message.into(),
        }
    }

    pub fn artifact(message: impl Into<String>) -> Self {
        CliError {
            code: 3,
            message: message.into(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<uie_snn::Error> for CliError {
    fn from(e: uie_snn::Error) -> Self {
        use uie_snn::Error as E;
        let code = match &e {
            E::Config(_) => 2,
            E::Divergence { .. } => 4,
            E::Internal(_) => 1,
            _ => 3,
        };
        let mut message = e.to_string();
        if let E::Divergence {
            last_checkpoint: Some(p),
            ..
        } = &e
        {
            message.push_str(&format!("\nlast finite checkpoint: {}", p.display()));
        }
        CliError { code, message }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::artifact(e.to_string())
    }
}

#[derive(Parser)]
#[command(name = "uie-snn", version, about = "Spiking U-Net for underwater image enhancement")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a network and keep the best checkpoint.
    Train(TrainArgs),
    /// Enhance every image in a directory.
    Infer(InferArgs),
    /// Spike rates, synaptic operations and energy of a checkpoint.
    Profile(ProfileArgs),
    /// Score enhanced images, optionally against references.
    Eval(EvalArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// TOML file with [network], [train], [data], [output], [energy] and [runtime] sections.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Manifest file or directory with raw/ and ref/.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Separate validation set, in the same form as --data.
    #[arg(long)]
    val_data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    depth: Option<usize>,
    #[arg(long)]
    base_channels: Option<usize>,
    #[arg(long)]
    timesteps: Option<usize>,
    #[arg(long)]
    threshold: Option<f64>,
    /// `N` or `HxW`.
    #[arg(long, value_parser = parse_resolution)]
    resolution: Option<(usize, usize)>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    validation_start_epoch: Option<usize>,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Directory of PNG or JPEG images.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    threads: usize,
}

#[derive(Args)]
struct ProfileArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Image directory, dataset directory with raw/, or manifest.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Energy of one multiply-accumulate, pJ.
    #[arg(long, default_value_t = 4.6)]
    mac_pj: f64,
    /// Energy of one accumulate, pJ.
    #[arg(long, default_value_t = 0.9)]
    acc_pj: f64,
    /// Use at most this many images.
    #[arg(long)]
    limit: Option<usize>,
    #[arg(long, default_value_t = 0)]
    threads: usize,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    enhanced: PathBuf,
    /// Reference images matched by file stem; omit for no-reference scores only.
    #[arg(long)]
    reference: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    threads: usize,
}

fn parse_resolution(s: &str) -> Result<(usize, usize), String> {
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("bad resolution `{s}`: {e}"));
    match s.split_once(['x', 'X']) {
        Some((h, w)) => Ok((parse(h)?, parse(w)?)),
        None => {
            let n = parse(s)?;
            Ok((n, n))
        }
    }
}

fn init_threads(threads: usize) -> Result<(), CliError> {
    if threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| CliError::config(format!("--threads: {e}")))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train(a) => {
            let base = match &a.config {
                Some(p) => config::RunConfig::from_file(p)?,
                None => Default::default(),
            };
            let cfg = base.resolve(Overrides {
                seed: a.seed,
                threads: a.threads,
                depth: a.depth,
                base_channels: a.base_channels,
                timesteps: a.timesteps,
                threshold: a.threshold,
                resolution: a.resolution,
                epochs: a.epochs,
                batch_size: a.batch_size,
                learning_rate: a.lr,
                validation_start_epoch: a.validation_start_epoch,
                data: a.data,
                val_data: a.val_data,
                out: a.out,
            })?;
            init_threads(cfg.runtime.threads)?;
            commands::train(&cfg)
        }
        Command::Infer(a) => {
            init_threads(a.threads)?;
            commands::infer(&a.checkpoint, &a.input, &a.out)
        }
        Command::Profile(a) => {
            init_threads(a.threads)?;
            let energy = config::EnergyConfig {
                mac_pj: a.mac_pj,
                acc_pj: a.acc_pj,
            };
            commands::profile(&a.checkpoint, &a.data, &a.out, energy, a.limit)
        }
        Command::Eval(a) => {
            init_threads(a.threads)?;
            commands::eval(&a.enhanced, a.reference.as_deref(), &a.out)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code)
        }
    }
}
