//! Uplink bytes per round: per-class knowledge versus full model weights.
//!
//! cargo run --release --example communication_overhead

use felo::{run_experiment, ExperimentConfig, Strategy};

fn main() -> felo::Result<()> {
    let mut config = ExperimentConfig::default();
    config.model.homogeneous = true;
    config.experiment.rounds = 5;
    for strategy in [Strategy::Felo, Strategy::Fedavg] {
        config.experiment.strategy = strategy;
        println!("{strategy:?}");
        for m in run_experiment(&config)? {
            let (k, w) = (m.knowledge_bytes(), m.weight_bytes());
            println!(
                "  round {}: sampled {:?} knowledge {k} B, weights {w} B, ratio {:.3}%",
                m.round,
                m.sampled,
                100.0 * k as f64 / w as f64
            );
        }
    }
    Ok(())
}
