//! Felo with and without the feature term: logits-only distillation
//! against the full exchange.
//!
//! cargo run --release --example logit_only_ablation

use felo::{run_experiment, ExperimentConfig};

fn main() -> felo::Result<()> {
    for feature_loss in [true, false] {
        let mut config = ExperimentConfig::default();
        config.experiment.feature_loss = feature_loss;
        let metrics = run_experiment(&config)?;
        let last = metrics.last().expect("rounds > 0");
        println!(
            "feature_loss = {feature_loss}: final accuracy {:.4} (std {:.4}), knowledge {} B last round",
            last.mean_accuracy(),
            last.std_accuracy(),
            last.knowledge_bytes()
        );
    }
    Ok(())
}
