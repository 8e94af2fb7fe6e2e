//! Compare backprop through a zoo model against central differences.
//!
//! cargo run --release --example gradient_check [arch]

use felo::losses::{cross_entropy, feature_mse};
use felo::nn::Tensor;
use felo::zoo::{build_model, ArchitectureId};

fn main() -> felo::Result<()> {
    let arch: usize = std::env::args()
        .nth(1)
        .map_or(2, |s| s.parse().expect("arch index"));
    let (d_in, d_f, c) = (8, 32, 5);
    let mut model = build_model(ArchitectureId(arch), d_in, d_f, c, 1)?;
    let x = Tensor::new(
        vec![4, d_in],
        (0..4 * d_in)
            .map(|i| ((i * 37 % 17) as f64 - 8.0) / 8.0)
            .collect(),
    )?;
    let y = [0, 1, 4, 2];
    let target = Tensor::filled(&[4, d_f], 0.1);

    let loss = |m: &felo::zoo::Model| -> felo::Result<f64> {
        let out = m.forward_full(&x)?;
        Ok(cross_entropy(&out.logits, &y)?.value + feature_mse(&out.features, &target)?.value)
    };
    let (features, logits) = model.forward_train(&x)?;
    let ce = cross_entropy(&logits, &y)?;
    let mse = feature_mse(&features, &target)?;
    let grads = model.backward(Some(&mse.grad), &ce.grad)?;

    let eps = 1e-5;
    println!(
        "{:<24} {:>12} {:>12} {:>10}",
        "parameter", "analytic", "numeric", "rel err"
    );
    for (i, name) in model.param_names().iter().enumerate() {
        let j = grads[i].len() / 2;
        let mut plus = model.clone();
        plus.params_mut()[i].data_mut()[j] += eps;
        let mut minus = model.clone();
        minus.params_mut()[i].data_mut()[j] -= eps;
        let numeric = (loss(&plus)? - loss(&minus)?) / (2.0 * eps);
        let analytic = grads[i].data()[j];
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-12);
        println!("{name:<24} {analytic:>12.6e} {numeric:>12.6e} {rel:>10.2e}");
    }
    Ok(())
}
