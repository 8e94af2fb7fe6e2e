//! Command-line front end: `run`, `gen-data` and `inspect`.

pub mod checkpoint;
mod config;
mod csv;

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint};
pub use config::{canonical_config, parse_config, parse_config_str, SEED_ENV};
pub use csv::{cvae_csv, format_float, metrics_csv, metrics_rows, CVAE_HEADER, METRICS_HEADER};

use crate::data::{generate_blob_split, quantize_to_u8, write_idx_images, write_idx_labels};
use crate::error::{FeloError, Result};
use crate::orchestrator::{ExperimentConfig, RoundMetrics, Simulation, Strategy};

#[derive(Debug, Parser)]
#[command(
    name = "felo",
    about = "Federated learning simulator for heterogeneous clients"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run an experiment and write its metrics.
    Run(RunArgs),
    /// Write the configured blob dataset as IDX files.
    GenData(GenDataArgs),
    /// Print the round, seed and tensor shapes stored in a checkpoint.
    Inspect {
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

#[derive(Debug, Args)]
struct RunArgs {
    /// TOML config; an empty file means all defaults.
    #[arg(long)]
    config: PathBuf,
    /// `section.key=value` override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    out: PathBuf,
    /// Continue from a checkpoint written by an earlier run of this config.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Also checkpoint after every N rounds (the final round always is).
    #[arg(long, default_value_t = 0)]
    checkpoint_every: usize,
}

#[derive(Debug, Args)]
struct GenDataArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    out: PathBuf,
}

/// File names produced by `gen-data`, in config key order.
pub const IDX_FILES: [&str; 4] = [
    "train-images.idx",
    "train-labels.idx",
    "test-images.idx",
    "test-labels.idx",
];

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| FeloError::io(path.display().to_string(), e))
}

fn checkpoint_path(out: &Path, round: usize) -> PathBuf {
    out.join("checkpoints")
        .join(format!("round-{round:04}.ckpt"))
}

/// Run the experiment described by `config`, writing results under `out`.
/// Returns the metrics of the rounds executed.
pub fn run_to_dir(
    config: ExperimentConfig,
    out: &Path,
    resume: Option<&Path>,
    checkpoint_every: usize,
) -> Result<Vec<RoundMetrics>> {
    fs::create_dir_all(out.join("checkpoints"))
        .map_err(|e| FeloError::io(out.display().to_string(), e))?;
    write_file(&out.join("config.resolved"), &canonical_config(&config))?;
    let total = config.experiment.rounds;
    let mut sim = match resume {
        Some(path) => {
            let ck = read_checkpoint(path)?;
            if ck.round as usize > total {
                return Err(FeloError::config(format!(
                    "checkpoint is at round {} but experiment.rounds = {total}",
                    ck.round
                )));
            }
            Simulation::from_checkpoint(config, &ck)?
        }
        None => Simulation::new(config)?,
    };
    let velo = sim.config().experiment.strategy == Strategy::Velo;
    let mut rounds = Vec::new();
    while sim.round() < total {
        rounds.push(sim.run_round()?);
        let done = sim.round();
        if done == total || (checkpoint_every > 0 && done % checkpoint_every == 0) {
            write_checkpoint(&sim.checkpoint(), checkpoint_path(out, done))?;
        }
    }
    write_file(&out.join("metrics.csv"), &metrics_csv(&rounds))?;
    if velo {
        write_file(&out.join("cvae_losses.csv"), &cvae_csv(&rounds))?;
    }
    Ok(rounds)
}

/// Write the blob train/test split described by `config` as IDX files.
pub fn gen_data_to_dir(config: &ExperimentConfig, out: &Path) -> Result<()> {
    let d = &config.data;
    let (train, test) = generate_blob_split(
        d.n_classes,
        d.d_in,
        d.n_per_class,
        d.test_per_class,
        d.spread,
        config.experiment.seed,
    )?;
    let all = train.inputs().data().iter().chain(test.inputs().data());
    let (lo, hi) = all.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
        (lo.min(v), hi.max(v))
    });
    fs::create_dir_all(out).map_err(|e| FeloError::io(out.display().to_string(), e))?;
    for (set, [images, labels]) in [
        (&train, [IDX_FILES[0], IDX_FILES[1]]),
        (&test, [IDX_FILES[2], IDX_FILES[3]]),
    ] {
        write_idx_images(out.join(images), &quantize_to_u8(set.inputs(), lo, hi))?;
        let labels_u8: Vec<u8> = set.labels().iter().map(|&l| l as u8).collect();
        write_idx_labels(out.join(labels), &labels_u8)?;
    }
    Ok(())
}

/// Human-readable summary of a checkpoint.
pub fn describe_checkpoint(ck: &Checkpoint) -> String {
    let mut out = format!(
        "round {}\nseed {}\ntensors {}\n",
        ck.round,
        ck.seed,
        ck.tensors.len()
    );
    let mut values = 0;
    for (name, t) in &ck.tensors {
        values += t.len();
        out.push_str(&format!("{name} {:?}\n", t.shape()));
    }
    out.push_str(&format!("values {values}\n"));
    out
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::Run(args) => {
            let config = parse_config(&args.config, &args.overrides)?;
            let rounds = run_to_dir(
                config,
                &args.out,
                args.resume.as_deref(),
                args.checkpoint_every,
            )?;
            if let Some(last) = rounds.last() {
                eprintln!(
                    "round {}: mean accuracy {} (std {})",
                    last.round,
                    format_float(last.mean_accuracy()),
                    format_float(last.std_accuracy())
                );
            }
            Ok(())
        }
        Command::GenData(args) => {
            let config = match &args.config {
                Some(path) => parse_config(path, &args.overrides)?,
                None => {
                    parse_config_str("", &args.overrides, std::env::var(SEED_ENV).ok().as_deref())?
                }
            };
            gen_data_to_dir(&config, &args.out)
        }
        Command::Inspect { checkpoint } => {
            print!("{}", describe_checkpoint(&read_checkpoint(&checkpoint)?));
            Ok(())
        }
    }
}

/// Entry point behind the `felo` binary. Exit codes: 0 success,
/// 1 configuration or usage error, 2 runtime error.
pub fn main<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("felo: {e}");
            if e.is_config() {
                1
            } else {
                2
            }
        }
    }
}
