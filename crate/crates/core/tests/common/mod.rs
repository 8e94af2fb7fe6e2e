//! Independent oracles shared by the integration and acceptance tests.
#![allow(dead_code)]

use felo::cvae::CvaeModel;
use felo::knowledge::{ClassKnowledge, KnowledgeRecord, ServerKnowledge};
use felo::losses::{
    cross_entropy, cvae_objective, feature_mse_masked, logit_kl_masked, KlDirection,
};
use felo::nn::{Layer, LayerSpec, Sequential, Tensor};
use felo::rng::seeded;
use felo::zoo::{build_model, ArchitectureId, Model};
use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const FD_EPS: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;
/// Gradients smaller than this are compared absolutely.
const FD_FLOOR: f64 = 1e-6;

pub fn rng(seed: u64) -> ChaCha8Rng {
    seeded(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-scale..scale)).collect(),
    )
    .unwrap()
}

/// Tensor whose entries stay at least `gap` away from zero.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], gap: f64) -> Tensor {
    let mut t = random_tensor(rng, shape, 1.0);
    for v in t.data_mut() {
        *v = v.signum() * (gap + v.abs());
    }
    t
}

/// Worst relative disagreement between analytic gradient entries and
/// central differences of `eval(index, delta)` (the loss with that entry
/// shifted by delta). Checks every entry up to `max_checked`, a random
/// subset beyond that.
pub fn fd_error(
    analytic: &[f64],
    max_checked: usize,
    rng: &mut ChaCha8Rng,
    mut eval: impl FnMut(usize, f64) -> f64,
) -> f64 {
    let n = analytic.len();
    let idx: Vec<usize> = if n <= max_checked {
        (0..n).collect()
    } else {
        sample(rng, n, max_checked).into_vec()
    };
    let mut worst: f64 = 0.0;
    for j in idx {
        let numeric = (eval(j, FD_EPS) - eval(j, -FD_EPS)) / (2.0 * FD_EPS);
        let a = analytic[j];
        let denom = a.abs().max(numeric.abs()).max(FD_FLOOR);
        worst = worst.max((a - numeric).abs() / denom);
    }
    worst
}

fn shifted(t: &Tensor, j: usize, d: f64) -> Tensor {
    let mut t = t.clone();
    t.data_mut()[j] += d;
    t
}

fn probe(out: &Tensor, g: &Tensor) -> f64 {
    out.data().iter().zip(g.data()).map(|(a, b)| a * b).sum()
}

pub struct GradCase {
    pub name: String,
    pub error: f64,
}

fn case(name: impl Into<String>, error: f64) -> GradCase {
    GradCase {
        name: name.into(),
        error,
    }
}

fn check_dense(seed: u64) -> GradCase {
    let mut r = rng(seed);
    let layer = Layer::init(LayerSpec::dense(5, 4), &mut r).unwrap();
    let x = random_tensor(&mut r, &[3, 5], 1.0);
    let g = random_tensor(&mut r, &[3, 4], 1.0);
    let (gx, gp) = layer.backward(&x, &g).unwrap();
    let mut worst = fd_error(gx.data(), 100, &mut r, |j, d| {
        probe(&layer.forward(&shifted(&x, j, d)).unwrap(), &g)
    });
    for (i, grad) in gp.iter().enumerate() {
        worst = worst.max(fd_error(grad.data(), 100, &mut r, |j, d| {
            let mut l = layer.clone();
            let p = &mut l.params_mut()[i];
            p.data_mut()[j] += d;
            probe(&l.forward(&x).unwrap(), &g)
        }));
    }
    case(format!("dense layer (seed {seed})"), worst)
}

fn check_relu(seed: u64) -> GradCase {
    let mut r = rng(seed);
    let layer = Layer::init(LayerSpec::relu(6), &mut r).unwrap();
    let x = away_from_zero(&mut r, &[4, 6], 0.05);
    let g = random_tensor(&mut r, &[4, 6], 1.0);
    let (gx, _) = layer.backward(&x, &g).unwrap();
    let worst = fd_error(gx.data(), 100, &mut r, |j, d| {
        probe(&layer.forward(&shifted(&x, j, d)).unwrap(), &g)
    });
    case(format!("relu layer (seed {seed})"), worst)
}

fn check_stack(seed: u64) -> GradCase {
    let mut r = rng(seed);
    let specs = [
        LayerSpec::dense(6, 7),
        LayerSpec::relu(7),
        LayerSpec::dense(7, 5),
        LayerSpec::relu(5),
        LayerSpec::flatten(5),
        LayerSpec::dense(5, 3),
    ];
    let mut net = Sequential::from_specs(&specs, &mut r).unwrap();
    let x = random_tensor(&mut r, &[4, 6], 1.0);
    let g = random_tensor(&mut r, &[4, 3], 1.0);
    net.forward_train(&x).unwrap();
    let (gx, gp) = net.backward(&g).unwrap();
    let mut worst = fd_error(gx.data(), 100, &mut r, |j, d| {
        probe(&net.forward(&shifted(&x, j, d)).unwrap(), &g)
    });
    for (i, grad) in gp.iter().enumerate() {
        worst = worst.max(fd_error(grad.data(), 100, &mut r, |j, d| {
            let mut n = net.clone();
            n.params_mut()[i].data_mut()[j] += d;
            probe(&n.forward(&x).unwrap(), &g)
        }));
    }
    case(format!("dense/relu stack (seed {seed})"), worst)
}

/// Distillation-style loss on a zoo model: cross-entropy at the logits,
/// MSE at the feature tap and KL against target logits.
fn model_loss(model: &Model, x: &Tensor, y: &[usize], tf: &Tensor, tl: &Tensor) -> f64 {
    let out = model.forward_full(x).unwrap();
    cross_entropy(&out.logits, y).unwrap().value
        + feature_mse_masked(&out.features, tf, None).unwrap().value
        + logit_kl_masked(&out.logits, tl, 2.0, KlDirection::ServerToClient, None)
            .unwrap()
            .value
}

fn check_model(arch: usize, seed: u64) -> GradCase {
    let mut r = rng(seed);
    let (d_in, d_f, c, batch) = (6, 32, 4, 3);
    let mut model = build_model(ArchitectureId(arch), d_in, d_f, c, seed).unwrap();
    let x = random_tensor(&mut r, &[batch, d_in], 1.0);
    let y: Vec<usize> = (0..batch).map(|i| i % c).collect();
    let tf = random_tensor(&mut r, &[batch, d_f], 0.5);
    let tl = random_tensor(&mut r, &[batch, c], 2.0);
    let (features, logits) = model.forward_train(&x).unwrap();
    let ce = cross_entropy(&logits, &y).unwrap();
    let mse = feature_mse_masked(&features, &tf, None).unwrap();
    let kl = logit_kl_masked(&logits, &tl, 2.0, KlDirection::ServerToClient, None).unwrap();
    let mut logit_grad = ce.grad;
    logit_grad.add_assign(&kl.grad).unwrap();
    let grads = model.backward(Some(&mse.grad), &logit_grad).unwrap();
    let mut worst: f64 = 0.0;
    for (i, grad) in grads.iter().enumerate() {
        worst = worst.max(fd_error(grad.data(), 12, &mut r, |j, d| {
            let mut m = model.clone();
            m.params_mut()[i].data_mut()[j] += d;
            model_loss(&m, &x, &y, &tf, &tl)
        }));
    }
    case(
        format!("zoo arch {arch} with feature and logit injection (seed {seed})"),
        worst,
    )
}

fn check_ce(seed: u64) -> GradCase {
    let mut r = rng(seed);
    let z = random_tensor(&mut r, &[5, 4], 3.0);
    let y = [0, 3, 1, 1, 2];
    let g = cross_entropy(&z, &y).unwrap().grad;
    let worst = fd_error(g.data(), 100, &mut r, |j, d| {
        cross_entropy(&shifted(&z, j, d), &y).unwrap().value
    });
    case(format!("cross-entropy (seed {seed})"), worst)
}

fn check_mse(seed: u64, masked: bool) -> GradCase {
    let mut r = rng(seed);
    let a = random_tensor(&mut r, &[4, 6], 1.0);
    let b = random_tensor(&mut r, &[4, 6], 1.0);
    let mask = [true, false, true, true];
    let m = masked.then_some(&mask[..]);
    let g = feature_mse_masked(&a, &b, m).unwrap().grad;
    let worst = fd_error(g.data(), 100, &mut r, |j, d| {
        feature_mse_masked(&shifted(&a, j, d), &b, m).unwrap().value
    });
    let kind = if masked {
        "masked feature MSE"
    } else {
        "feature MSE"
    };
    case(format!("{kind} (seed {seed})"), worst)
}

fn check_kl(seed: u64, t: f64, dir: KlDirection, masked: bool) -> GradCase {
    let mut r = rng(seed);
    let client = random_tensor(&mut r, &[4, 5], 3.0);
    let target = random_tensor(&mut r, &[4, 5], 3.0);
    let mask = [true, true, false, true];
    let m = masked.then_some(&mask[..]);
    let g = logit_kl_masked(&client, &target, t, dir, m).unwrap().grad;
    let worst = fd_error(g.data(), 100, &mut r, |j, d| {
        logit_kl_masked(&shifted(&client, j, d), &target, t, dir, m)
            .unwrap()
            .value
    });
    let mask_note = if masked { ", masked" } else { "" };
    case(
        format!("logit KL {dir:?} T={t}{mask_note} (seed {seed})"),
        worst,
    )
}

fn check_cvae_objective(seed: u64, draws: usize) -> GradCase {
    let mut r = rng(seed);
    let mu = random_tensor(&mut r, &[3, 2], 1.0);
    let lv = random_tensor(&mut r, &[3, 2], 1.0);
    let target = random_tensor(&mut r, &[3, 4], 1.0);
    let recs: Vec<Tensor> = (0..draws)
        .map(|_| random_tensor(&mut r, &[3, 4], 1.0))
        .collect();
    let loss = cvae_objective(&mu, &lv, &recs, &target).unwrap();
    let total = |mu: &Tensor, lv: &Tensor, recs: &[Tensor]| {
        cvae_objective(mu, lv, recs, &target).unwrap().parts.total
    };
    let mut worst = fd_error(loss.grad_mu.data(), 100, &mut r, |j, d| {
        total(&shifted(&mu, j, d), &lv, &recs)
    });
    worst = worst.max(fd_error(loss.grad_logvar.data(), 100, &mut r, |j, d| {
        total(&mu, &shifted(&lv, j, d), &recs)
    }));
    for (k, g) in loss.grad_reconstructions.iter().enumerate() {
        worst = worst.max(fd_error(g.data(), 100, &mut r, |j, d| {
            let mut rs = recs.clone();
            rs[k] = shifted(&rs[k], j, d);
            total(&mu, &lv, &rs)
        }));
    }
    case(
        format!("cvae objective, {draws} draw(s) (seed {seed})"),
        worst,
    )
}

fn check_cvae_model(seed: u64, draws: usize) -> GradCase {
    let mut r = rng(seed);
    let (d_f, c, dz, hidden, batch) = (5, 3, 2, 6, 4);
    let mut model = CvaeModel::new(d_f, c, dz, hidden, 1e-3, seed).unwrap();
    let s = random_tensor(&mut r, &[batch, d_f], 1.0);
    let y = vec![0, 2, 1, 2];
    let eps: Vec<Tensor> = (0..draws)
        .map(|_| random_tensor(&mut r, &[batch, dz], 1.5))
        .collect();
    let (_, grads) = model.loss_and_grads(&s, &y, &eps).unwrap();
    let mut worst: f64 = 0.0;
    for (i, g) in grads.iter().enumerate() {
        worst = worst.max(fd_error(g.data(), 40, &mut r, |j, d| {
            let mut m = model.clone();
            m.params_mut()[i].data_mut()[j] += d;
            m.loss_and_grads(&s, &y, &eps).unwrap().0.total
        }));
    }
    case(
        format!("cvae through reparameterization, {draws} draw(s) (seed {seed})"),
        worst,
    )
}

/// Every gradient instance the suite checks.
pub fn gradient_cases() -> Vec<GradCase> {
    let mut out = Vec::new();
    for seed in 0..3 {
        out.push(check_dense(seed));
        out.push(check_relu(seed));
        out.push(check_stack(seed));
        out.push(check_ce(seed));
        out.push(check_mse(seed, false));
        out.push(check_mse(seed, true));
        out.push(check_kl(seed, 1.0, KlDirection::ServerToClient, false));
        out.push(check_kl(seed, 2.5, KlDirection::ClientToServer, false));
        out.push(check_kl(seed, 1.5, KlDirection::ServerToClient, true));
        out.push(check_cvae_objective(seed, 1 + seed as usize));
        out.push(check_cvae_model(seed, 1 + seed as usize % 2));
    }
    for arch in 0..ArchitectureId::count() {
        out.push(check_model(arch, 10 + arch as u64));
    }
    out
}

/// Random knowledge records: `n` clients, each holding a random nonempty
/// subset of classes with random counts and vectors.
pub fn random_records(
    r: &mut ChaCha8Rng,
    n: usize,
    n_classes: usize,
    d_f: usize,
) -> Vec<KnowledgeRecord> {
    (0..n)
        .map(|k| {
            let held: Vec<usize> = (0..n_classes).filter(|_| r.random_bool(0.6)).collect();
            let mut entries: Vec<ClassKnowledge> = held
                .into_iter()
                .map(|class| ClassKnowledge {
                    class,
                    mean_feature: random_tensor(r, &[d_f], 3.0),
                    mean_logit: random_tensor(r, &[n_classes], 3.0),
                    count: r.random_range(1..60),
                })
                .collect();
            if entries.is_empty() {
                entries.push(ClassKnowledge {
                    class: r.random_range(0..n_classes),
                    mean_feature: random_tensor(r, &[d_f], 3.0),
                    mean_logit: random_tensor(r, &[n_classes], 3.0),
                    count: 1,
                });
            }
            KnowledgeRecord {
                client_id: k * 3 + 1,
                entries,
            }
        })
        .collect()
}

/// Pooled mean by expanding every per-class mean into `count` copies and
/// averaging the flat list. Classes nobody reports keep `previous`.
pub fn brute_force_pooled(
    records: &[KnowledgeRecord],
    previous: &ServerKnowledge,
) -> Vec<(Vec<f64>, Vec<f64>, bool)> {
    (0..previous.n_classes())
        .map(|class| {
            let mut feats: Vec<&[f64]> = Vec::new();
            let mut logits: Vec<&[f64]> = Vec::new();
            for rec in records {
                for e in rec.entries.iter().filter(|e| e.class == class) {
                    for _ in 0..e.count {
                        feats.push(e.mean_feature.data());
                        logits.push(e.mean_logit.data());
                    }
                }
            }
            if feats.is_empty() {
                let p = previous.entry(class);
                return (
                    p.mean_feature.data().to_vec(),
                    p.mean_logit.data().to_vec(),
                    p.available,
                );
            }
            let flat_mean = |rows: &[&[f64]]| -> Vec<f64> {
                let width = rows[0].len();
                (0..width)
                    .map(|i| rows.iter().map(|r| r[i]).sum::<f64>() / rows.len() as f64)
                    .collect()
            };
            (flat_mean(&feats), flat_mean(&logits), true)
        })
        .collect()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

pub fn bits(t: &[Tensor]) -> Vec<u64> {
    t.iter()
        .flat_map(|x| x.data().iter().map(|v| v.to_bits()))
        .collect()
}
