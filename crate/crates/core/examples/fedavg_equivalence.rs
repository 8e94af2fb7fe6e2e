//! With one architecture, full participation and alpha = 0, felo's weight
//! groups follow exactly the FedAvg trajectory.
//!
//! cargo run --release --example fedavg_equivalence

use felo::zoo::ArchitectureId;
use felo::{ExperimentConfig, Simulation, Strategy};

fn main() -> felo::Result<()> {
    let mut config = ExperimentConfig::default();
    config.model.homogeneous = true;
    config.experiment.sample_ratio = 1.0;
    config.experiment.alpha = 0.0;
    let arch = ArchitectureId(config.model.homogeneous_arch);

    let mut felo_cfg = config.clone();
    felo_cfg.experiment.strategy = Strategy::Felo;
    config.experiment.strategy = Strategy::Fedavg;
    let mut felo = Simulation::new(felo_cfg)?;
    let mut fedavg = Simulation::new(config)?;

    println!("round  max |felo - fedavg|  fedavg acc");
    for _ in 0..10 {
        felo.run_round()?;
        let m = fedavg.run_round()?;
        let gap = felo
            .group_params(arch)
            .unwrap()
            .iter()
            .zip(fedavg.group_params(arch).unwrap())
            .flat_map(|(a, b)| a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()))
            .fold(0.0, f64::max);
        println!("{:>5}  {gap:>18.3e}  {:.4}", m.round, m.mean_accuracy());
    }
    Ok(())
}
