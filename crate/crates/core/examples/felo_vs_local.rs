//! Heterogeneous five-architecture federation on Gaussian blobs: final mean
//! accuracy of felo, velo and local-only training for a few seeds.
//!
//! cargo run --release --example felo_vs_local [rounds] [seeds]

use felo::{run_experiment, ExperimentConfig, Strategy};

fn main() -> felo::Result<()> {
    let mut args = std::env::args().skip(1);
    let rounds: usize = args.next().map_or(50, |s| s.parse().expect("rounds"));
    let seeds: u64 = args.next().map_or(3, |s| s.parse().expect("seeds"));

    println!("seed  local   felo    velo");
    for seed in 0..seeds {
        let mut row = Vec::new();
        for strategy in [Strategy::Local, Strategy::Felo, Strategy::Velo] {
            let mut config = ExperimentConfig::default();
            config.experiment.strategy = strategy;
            config.experiment.rounds = rounds;
            config.experiment.seed = seed;
            let metrics = run_experiment(&config)?;
            row.push(metrics.last().map_or(0.0, |m| m.mean_accuracy()));
        }
        println!("{seed:>4}  {:.4}  {:.4}  {:.4}", row[0], row[1], row[2]);
    }
    Ok(())
}
