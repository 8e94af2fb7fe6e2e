//! Stop a run halfway, save a checkpoint, resume, and check the remaining
//! rounds match an uninterrupted run.
//!
//! cargo run --release --example checkpoint_resume

use felo::cli::{metrics_csv, read_checkpoint, write_checkpoint};
use felo::{run_experiment, ExperimentConfig, Simulation, Strategy};

fn main() -> felo::Result<()> {
    let mut config = ExperimentConfig::default();
    config.experiment.strategy = Strategy::Velo;
    config.experiment.rounds = 10;
    let straight = run_experiment(&config)?;

    let path = std::env::temp_dir().join("felo-example.ckpt");
    let mut first = Simulation::new(config.clone())?;
    first.run_rounds(5)?;
    write_checkpoint(&first.checkpoint(), &path)?;

    let mut resumed = Simulation::from_checkpoint(config, &read_checkpoint(&path)?)?;
    let rest = resumed.run_rounds(5)?;
    let same = metrics_csv(&rest) == metrics_csv(&straight[5..]);
    println!(
        "checkpoint {} ({} bytes)",
        path.display(),
        std::fs::metadata(&path).map_or(0, |m| m.len())
    );
    println!("resumed rounds match the uninterrupted run: {same}");
    Ok(())
}
