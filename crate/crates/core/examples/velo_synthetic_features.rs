//! Train the server-side CVAE on two well separated feature clusters and
//! compare generated class means with the true ones.
//!
//! cargo run --release --example velo_synthetic_features

use felo::cvae::{generate_synthetic, train_cvae, CvaeModel, FeatureStore, StoredFeature};
use felo::nn::Tensor;
use felo::rng::seeded;
use rand::Rng;
use rand_distr::StandardNormal;

fn main() -> felo::Result<()> {
    let d = 8;
    let means = [vec![0.0; d], vec![4.0 / (d as f64).sqrt(); d]];
    let mut rng = seeded(1);
    let mut store = FeatureStore::new(512, 1)?;
    for i in 0..512 {
        let class = i % 2;
        let x = means[class]
            .iter()
            .map(|m| m + rng.sample::<f64, _>(StandardNormal))
            .collect();
        store.push(StoredFeature {
            feature: Tensor::vector(x),
            class,
            round: 0,
        });
    }
    let mut cvae = CvaeModel::new(d, 2, 8, 64, 1e-3, 2)?;
    let trace = train_cvae(&mut cvae, &store, 200, 64, 1, 3)?;
    for (epoch, p) in trace.epochs.iter().enumerate().step_by(40) {
        println!(
            "epoch {epoch:>3}: kl {:.4} recon {:.4}",
            p.kl_to_prior, p.reconstruction
        );
    }
    for (class, mean) in means.iter().enumerate() {
        let generated = generate_synthetic(&cvae, class, 128, 10 + class as u64)?.mean_rows();
        let dist: f64 = generated
            .data()
            .iter()
            .zip(mean)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        println!(
            "class {class}: generated mean {:.3?}, distance to truth {dist:.3}",
            generated.data()
        );
    }
    Ok(())
}
