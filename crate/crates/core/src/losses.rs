//! Scalar objectives and their gradients.
//!
//! Every function returns the loss value together with the gradient with
//! respect to its first tensor argument, already divided by the batch size.

use serde::{Deserialize, Serialize};

use crate::error::{FeloError, Result};
use crate::nn::{ensure_same_shape, log_softmax_row, softmax_in_place, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub value: f64,
    pub grad: Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct FeloLossParts {
    pub ce: f64,
    pub mse: f64,
    pub kl: f64,
    pub total: f64,
    pub alpha: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CvaeLossParts {
    pub kl_to_prior: f64,
    pub reconstruction: f64,
    pub total: f64,
    pub mc_samples: usize,
}

/// Which distribution is the reference in the logit KL term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlDirection {
    /// `KL(softmax(server) ‖ softmax(client))`.
    #[default]
    ServerToClient,
    /// `KL(softmax(client) ‖ softmax(server))`.
    ClientToServer,
}

/// Mean over the batch of `−ln softmax(logits)[label]`.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<LossGrad> {
    let (batch, classes) = (logits.rows(), logits.cols());
    if labels.len() != batch {
        return Err(FeloError::config(format!(
            "cross_entropy: {} labels for {batch} rows",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(FeloError::data(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }
    let mut grad = logits.clone();
    let mut loss = 0.0;
    let n = batch as f64;
    for (r, &label) in labels.iter().enumerate() {
        loss -= log_softmax_row(logits.row(r))[label];
        let g = grad.row_mut(r);
        softmax_in_place(g);
        g[label] -= 1.0;
        for v in g.iter_mut() {
            *v /= n;
        }
    }
    Ok(LossGrad {
        value: loss / n,
        grad,
    })
}

pub fn feature_mse(client: &Tensor, target: &Tensor) -> Result<LossGrad> {
    feature_mse_masked(client, target, None)
}

/// Squared error summed over rows where `mask` is true, divided by
/// `batch·d`. Rows with a false mask contribute neither loss nor gradient.
pub fn feature_mse_masked(
    client: &Tensor,
    target: &Tensor,
    mask: Option<&[bool]>,
) -> Result<LossGrad> {
    ensure_same_shape("feature_mse", client, target)?;
    check_mask(mask, client.rows())?;
    let denom = client.len() as f64;
    let mut grad = Tensor::zeros(client.shape());
    let mut sum = 0.0;
    for r in 0..client.rows() {
        if mask.is_some_and(|m| !m[r]) {
            continue;
        }
        let (a, b) = (client.row(r), target.row(r));
        let g = grad.row_mut(r);
        for i in 0..a.len() {
            let d = a[i] - b[i];
            sum += d * d;
            g[i] = 2.0 * d / denom;
        }
    }
    Ok(LossGrad {
        value: sum / denom,
        grad,
    })
}

pub fn logit_kl(client: &Tensor, target: &Tensor, temperature: f64) -> Result<LossGrad> {
    logit_kl_masked(
        client,
        target,
        temperature,
        KlDirection::ServerToClient,
        None,
    )
}

/// Batch-mean KL divergence between temperature-softened distributions.
pub fn logit_kl_masked(
    client: &Tensor,
    target: &Tensor,
    temperature: f64,
    direction: KlDirection,
    mask: Option<&[bool]>,
) -> Result<LossGrad> {
    ensure_same_shape("logit_kl", client, target)?;
    check_mask(mask, client.rows())?;
    if !(temperature > 0.0) {
        return Err(FeloError::config("temperature must be positive"));
    }
    let n = client.rows() as f64;
    let mut grad = Tensor::zeros(client.shape());
    let mut total = 0.0;
    for r in 0..client.rows() {
        if mask.is_some_and(|m| !m[r]) {
            continue;
        }
        let scaled = |row: &[f64]| row.iter().map(|v| v / temperature).collect::<Vec<_>>();
        let log_q = log_softmax_row(&scaled(client.row(r)));
        let log_p = log_softmax_row(&scaled(target.row(r)));
        let g = grad.row_mut(r);
        match direction {
            KlDirection::ServerToClient => {
                let mut kl = 0.0;
                for j in 0..log_q.len() {
                    let p = log_p[j].exp();
                    kl += p * (log_p[j] - log_q[j]);
                    g[j] = (log_q[j].exp() - p) / (temperature * n);
                }
                total += kl.max(0.0);
            }
            KlDirection::ClientToServer => {
                let diff: Vec<f64> = log_q.iter().zip(&log_p).map(|(q, p)| q - p).collect();
                let kl: f64 = log_q.iter().zip(&diff).map(|(lq, d)| lq.exp() * d).sum();
                for j in 0..log_q.len() {
                    g[j] = log_q[j].exp() * (diff[j] - kl) / (temperature * n);
                }
                total += kl.max(0.0);
            }
        }
    }
    Ok(LossGrad {
        value: total / n,
        grad,
    })
}

fn check_mask(mask: Option<&[bool]>, rows: usize) -> Result<()> {
    match mask {
        Some(m) if m.len() != rows => Err(FeloError::config(format!(
            "mask has {} entries for {rows} rows",
            m.len()
        ))),
        _ => Ok(()),
    }
}

/// `total = ce + alpha·(mse + kl)`.
pub fn felo_loss(ce: f64, mse: f64, kl: f64, alpha: f64) -> Result<FeloLossParts> {
    if !(alpha >= 0.0) || !alpha.is_finite() {
        return Err(FeloError::config(format!(
            "alpha must be a finite non-negative number, got {alpha}"
        )));
    }
    if ce < 0.0 || mse < 0.0 || kl < 0.0 {
        return Err(FeloError::config(format!(
            "loss parts must be non-negative (ce={ce}, mse={mse}, kl={kl})"
        )));
    }
    Ok(FeloLossParts {
        ce,
        mse,
        kl,
        total: ce + alpha * (mse + kl),
        alpha,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CvaeLoss {
    pub parts: CvaeLossParts,
    /// Gradient of the prior KL term with respect to `mu`.
    pub grad_mu: Tensor,
    /// Gradient of the prior KL term with respect to `logvar`.
    pub grad_logvar: Tensor,
    /// Gradient with respect to each Monte-Carlo reconstruction.
    pub grad_reconstructions: Vec<Tensor>,
}

/// Negated conditional ELBO with a standard-normal prior and a unit-variance
/// Gaussian decoder: batch-mean KL to the prior plus reconstruction MSE
/// averaged over the `reconstructions.len()` Monte-Carlo draws.
pub fn cvae_objective(
    mu: &Tensor,
    logvar: &Tensor,
    reconstructions: &[Tensor],
    target: &Tensor,
) -> Result<CvaeLoss> {
    ensure_same_shape("cvae_objective(mu, logvar)", mu, logvar)?;
    if reconstructions.is_empty() {
        return Err(FeloError::config(
            "cvae_objective needs at least one Monte-Carlo sample",
        ));
    }
    if mu.rows() != target.rows() {
        return Err(FeloError::config(format!(
            "cvae_objective: latent batch {} vs target batch {}",
            mu.rows(),
            target.rows()
        )));
    }
    let n = mu.rows() as f64;
    let mut kl = 0.0;
    let mut grad_mu = Tensor::zeros(mu.shape());
    let mut grad_logvar = Tensor::zeros(mu.shape());
    for (i, (&m, &lv)) in mu.data().iter().zip(logvar.data()).enumerate() {
        let em1 = lv.exp_m1();
        kl += 0.5 * (m * m + (em1 - lv));
        grad_mu.data_mut()[i] = m / n;
        grad_logvar.data_mut()[i] = 0.5 * em1 / n;
    }
    let kl_to_prior = kl / n;

    let l = reconstructions.len() as f64;
    let mut recon = 0.0;
    let mut grads = Vec::with_capacity(reconstructions.len());
    for r in reconstructions {
        let mse = feature_mse(r, target)?;
        recon += mse.value / l;
        let mut g = mse.grad;
        g.scale(1.0 / l);
        grads.push(g);
    }
    Ok(CvaeLoss {
        parts: CvaeLossParts {
            kl_to_prior,
            reconstruction: recon,
            total: kl_to_prior + recon,
            mc_samples: reconstructions.len(),
        },
        grad_mu,
        grad_logvar,
        grad_reconstructions: grads,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn cross_entropy_values() {
        let u = cross_entropy(&t(&[vec![0.0, 0.0]]), &[0]).unwrap();
        assert!((u.value - std::f64::consts::LN_2).abs() < 1e-12);
        let c = cross_entropy(&t(&[vec![20.0, -20.0]]), &[0]).unwrap();
        assert!(c.value >= 0.0 && c.value < 1e-8);
        let d = cross_entropy(&t(&[vec![2.0, 0.0]]), &[0]).unwrap();
        assert!((d.value - 0.126928).abs() < 1e-5);
        let ten = cross_entropy(&Tensor::zeros(&[3, 10]), &[1, 2, 9]).unwrap();
        assert_eq!(ten.value, 10f64.ln());
    }

    #[test]
    fn cross_entropy_gradient_is_softmax_minus_onehot() {
        let g = cross_entropy(&t(&[vec![0.0, 0.0], vec![0.0, 0.0]]), &[0, 1])
            .unwrap()
            .grad;
        assert_eq!(g.data(), &[-0.25, 0.25, 0.25, -0.25]);
    }

    #[test]
    fn cross_entropy_rejects_bad_label() {
        assert!(matches!(
            cross_entropy(&t(&[vec![0.0, 0.0]]), &[2]),
            Err(FeloError::Data(_))
        ));
    }

    #[test]
    fn mse_values() {
        let a = t(&[vec![1.0, 3.0]]);
        assert_eq!(feature_mse(&a, &a).unwrap().value, 0.0);
        let r = feature_mse(&a, &t(&[vec![0.0, 1.0]])).unwrap();
        assert_eq!(r.value, 2.5);
        assert_eq!(r.grad.data(), &[1.0, 2.0]);
        assert!(feature_mse(&a, &t(&[vec![0.0]])).is_err());
    }

    #[test]
    fn masked_mse_skips_rows_but_keeps_denominator() {
        let a = t(&[vec![1.0, 3.0], vec![5.0, 5.0]]);
        let b = t(&[vec![0.0, 1.0], vec![0.0, 0.0]]);
        let r = feature_mse_masked(&a, &b, Some(&[true, false])).unwrap();
        assert_eq!(r.value, 5.0 / 4.0);
        assert_eq!(r.grad.row(1), &[0.0, 0.0]);
    }

    #[test]
    fn kl_values() {
        let a = t(&[vec![0.3, -1.2, 2.0]]);
        assert!(logit_kl(&a, &a, 1.0).unwrap().value.abs() < 1e-12);
        let r = logit_kl(&t(&[vec![0.0, 1.0]]), &t(&[vec![1.0, 0.0]]), 1.0).unwrap();
        assert!((r.value - 0.462117).abs() < 1e-5, "{}", r.value);
        let rev = logit_kl_masked(
            &t(&[vec![0.0, 1.0]]),
            &t(&[vec![1.0, 0.0]]),
            1.0,
            KlDirection::ClientToServer,
            None,
        )
        .unwrap();
        // Symmetric two-class case: both directions coincide.
        assert!((rev.value - r.value).abs() < 1e-12);
        assert!(logit_kl(&a, &a, 0.0).is_err());
    }

    #[test]
    fn felo_loss_arithmetic() {
        assert_eq!(felo_loss(0.7, 2.0, 0.5, 0.0).unwrap().total, 0.7);
        assert_eq!(felo_loss(1.0, 2.0, 0.5, 1.0).unwrap().total, 3.5);
        assert_eq!(felo_loss(1.0, 2.0, 0.5, 0.5).unwrap().total, 2.25);
        assert!(matches!(
            felo_loss(1.0, 0.0, 0.0, -0.1),
            Err(FeloError::Config(_))
        ));
    }

    #[test]
    fn cvae_objective_values() {
        let z = Tensor::zeros(&[2, 3]);
        let target = t(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        let r = cvae_objective(&z, &z, std::slice::from_ref(&target), &target).unwrap();
        assert_eq!(r.parts.kl_to_prior, 0.0);
        assert_eq!(r.parts.reconstruction, 0.0);
        assert_eq!(r.parts.mc_samples, 1);

        let one = cvae_objective(
            &t(&[vec![1.0]]),
            &t(&[vec![0.0]]),
            &[t(&[vec![0.0]])],
            &t(&[vec![0.0]]),
        )
        .unwrap();
        assert_eq!(one.parts.kl_to_prior, 0.5);
        assert_eq!(
            one.parts.total,
            one.parts.kl_to_prior + one.parts.reconstruction
        );
    }

    #[test]
    fn cvae_objective_averages_draws() {
        let target = t(&[vec![0.0, 0.0]]);
        let r = cvae_objective(
            &t(&[vec![0.0]]),
            &t(&[vec![0.0]]),
            &[t(&[vec![1.0, 1.0]]), t(&[vec![3.0, 3.0]])],
            &target,
        )
        .unwrap();
        assert_eq!(r.parts.reconstruction, (1.0 + 9.0) / 2.0);
        assert_eq!(r.grad_reconstructions[1].data(), &[1.5, 1.5]);
    }
}
