//! Server-side conditional VAE over client features.
//!
//! Encoder: `(feature ⊕ onehot(y)) → hidden → (μ, log σ²)`; decoder:
//! `(z ⊕ onehot(y)) → hidden → feature`. Both are two dense layers with a
//! ReLU between them.

use std::collections::VecDeque;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{FeloError, Result};
use crate::knowledge::KnowledgeRecord;
use crate::losses::{cvae_objective, CvaeLossParts};
use crate::nn::{optimizer_step, LayerSpec, OptimizerState, Sequential, Tensor};
use crate::rng::{seeded, SimRng};

pub fn one_hot(labels: &[usize], n_classes: usize) -> Result<Tensor> {
    let mut t = Tensor::zeros(&[labels.len().max(1), n_classes]);
    for (r, &y) in labels.iter().enumerate() {
        if y >= n_classes {
            return Err(FeloError::data(format!(
                "label {y} out of range for {n_classes} classes"
            )));
        }
        t.row_mut(r)[y] = 1.0;
    }
    Ok(t)
}

/// `z = μ + exp(log σ² / 2) ⊙ ε`.
pub fn reparameterize(mu: &Tensor, logvar: &Tensor, eps: &Tensor) -> Result<Tensor> {
    if !mu.same_shape(logvar) || !mu.same_shape(eps) {
        return Err(FeloError::config(format!(
            "reparameterize: shapes {:?}, {:?}, {:?} differ",
            mu.shape(),
            logvar.shape(),
            eps.shape()
        )));
    }
    let data = mu
        .data()
        .iter()
        .zip(logvar.data())
        .zip(eps.data())
        .map(|((m, lv), e)| m + (lv / 2.0).exp() * e)
        .collect();
    Tensor::new(mu.shape().to_vec(), data)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CvaeModel {
    encoder: Sequential,
    decoder: Sequential,
    d_feature: usize,
    n_classes: usize,
    latent_dim: usize,
    hidden: usize,
    optimizer: OptimizerState,
    trained: bool,
}

impl CvaeModel {
    pub fn new(
        d_feature: usize,
        n_classes: usize,
        latent_dim: usize,
        hidden: usize,
        learning_rate: f64,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = seeded(seed);
        let encoder = Sequential::from_specs(
            &[
                LayerSpec::dense(d_feature + n_classes, hidden),
                LayerSpec::relu(hidden),
                LayerSpec::dense(hidden, 2 * latent_dim),
            ],
            &mut rng,
        )?;
        let decoder = Sequential::from_specs(
            &[
                LayerSpec::dense(latent_dim + n_classes, hidden),
                LayerSpec::relu(hidden),
                LayerSpec::dense(hidden, d_feature),
            ],
            &mut rng,
        )?;
        Ok(CvaeModel {
            encoder,
            decoder,
            d_feature,
            n_classes,
            latent_dim,
            hidden,
            optimizer: OptimizerState::adam(learning_rate),
            trained: false,
        })
    }

    pub fn d_feature(&self) -> usize {
        self.d_feature
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    pub fn set_trained(&mut self, trained: bool) {
        self.trained = trained;
    }

    pub fn encoder(&self) -> &Sequential {
        &self.encoder
    }

    pub fn encoder_mut(&mut self) -> &mut Sequential {
        &mut self.encoder
    }

    pub fn decoder(&self) -> &Sequential {
        &self.decoder
    }

    pub fn decoder_mut(&mut self) -> &mut Sequential {
        &mut self.decoder
    }

    pub fn optimizer(&self) -> &OptimizerState {
        &self.optimizer
    }

    pub fn optimizer_mut(&mut self) -> &mut OptimizerState {
        &mut self.optimizer
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut p = self.encoder.params();
        p.extend(self.decoder.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = self.encoder.params_mut();
        p.extend(self.decoder.params_mut());
        p
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self
            .encoder
            .param_names()
            .into_iter()
            .map(|n| format!("encoder.{n}"))
            .collect();
        names.extend(
            self.decoder
                .param_names()
                .into_iter()
                .map(|n| format!("decoder.{n}")),
        );
        names
    }

    fn check_features(&self, s: &Tensor, y: &[usize]) -> Result<()> {
        if s.shape().len() != 2 || s.cols() != self.d_feature || s.rows() != y.len() {
            return Err(FeloError::config(format!(
                "cvae expects [{}, {}] features, got {:?}",
                y.len(),
                self.d_feature,
                s.shape()
            )));
        }
        Ok(())
    }

    pub fn encode(&self, s: &Tensor, y: &[usize]) -> Result<(Tensor, Tensor)> {
        self.check_features(s, y)?;
        let input = Tensor::concat_cols(s, &one_hot(y, self.n_classes)?)?;
        self.encoder.forward(&input)?.split_cols(self.latent_dim)
    }

    pub fn decode(&self, z: &Tensor, y: &[usize]) -> Result<Tensor> {
        if z.cols() != self.latent_dim || z.rows() != y.len() {
            return Err(FeloError::config(format!(
                "cvae decode expects [{}, {}] latents, got {:?}",
                y.len(),
                self.latent_dim,
                z.shape()
            )));
        }
        self.decoder
            .forward(&Tensor::concat_cols(z, &one_hot(y, self.n_classes)?)?)
    }

    /// Objective and gradients (encoder params, then decoder params) for a
    /// minibatch with fixed noise draws `eps` (one tensor per Monte-Carlo sample).
    pub fn loss_and_grads(
        &mut self,
        s: &Tensor,
        y: &[usize],
        eps: &[Tensor],
    ) -> Result<(CvaeLossParts, Vec<Tensor>)> {
        self.check_features(s, y)?;
        if eps.is_empty() {
            return Err(FeloError::config("need at least one noise draw"));
        }
        let onehot = one_hot(y, self.n_classes)?;
        let enc_out = self
            .encoder
            .forward_train(&Tensor::concat_cols(s, &onehot)?)?;
        let (mu, logvar) = enc_out.split_cols(self.latent_dim)?;
        let latents = eps
            .iter()
            .map(|e| reparameterize(&mu, &logvar, e))
            .collect::<Result<Vec<_>>>()?;
        let decoder_inputs = latents
            .iter()
            .map(|z| Tensor::concat_cols(z, &onehot))
            .collect::<Result<Vec<_>>>()?;
        let recons = decoder_inputs
            .iter()
            .map(|zi| self.decoder.forward(zi))
            .collect::<Result<Vec<_>>>()?;
        let loss = cvae_objective(&mu, &logvar, &recons, s)?;

        let mut grad_mu = loss.grad_mu.clone();
        let mut grad_logvar = loss.grad_logvar.clone();
        let mut dec_grads: Option<Vec<Tensor>> = None;
        let half_sigma = logvar.map(|lv| 0.5 * (lv / 2.0).exp());
        for ((zi, g_rec), e) in decoder_inputs
            .iter()
            .zip(&loss.grad_reconstructions)
            .zip(eps)
        {
            self.decoder.forward_train(zi)?;
            let (g_in, g_params) = self.decoder.backward(g_rec)?;
            match dec_grads.as_mut() {
                None => dec_grads = Some(g_params),
                Some(acc) => {
                    for (a, g) in acc.iter_mut().zip(&g_params) {
                        a.add_assign(g)?;
                    }
                }
            }
            let (g_z, _) = g_in.split_cols(self.latent_dim)?;
            grad_mu.add_assign(&g_z)?;
            for (i, gl) in grad_logvar.data_mut().iter_mut().enumerate() {
                *gl += g_z.data()[i] * e.data()[i] * half_sigma.data()[i];
            }
        }
        let (_, mut grads) = self
            .encoder
            .backward(&Tensor::concat_cols(&grad_mu, &grad_logvar)?)?;
        grads.extend(dec_grads.expect("at least one draw"));
        Ok((loss.parts, grads))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StoredFeature {
    pub feature: Tensor,
    pub class: usize,
    pub round: usize,
}

/// Bounded FIFO of class-tagged features received by the server.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStore {
    entries: VecDeque<StoredFeature>,
    capacity: usize,
    replication_limit: usize,
}

impl FeatureStore {
    pub fn new(capacity: usize, replication_limit: usize) -> Result<Self> {
        if capacity == 0 || replication_limit == 0 {
            return Err(FeloError::config(
                "feature store capacity and replication limit must be positive",
            ));
        }
        Ok(FeatureStore {
            entries: VecDeque::new(),
            capacity,
            replication_limit,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn replication_limit(&self) -> usize {
        self.replication_limit
    }

    pub fn entries(&self) -> impl Iterator<Item = &StoredFeature> {
        self.entries.iter()
    }

    pub fn push(&mut self, entry: StoredFeature) {
        self.entries.push_back(entry);
        while self.entries.len() > self.capacity {
            self.entries.pop_front();
        }
    }
}

/// Append each reported class mean, replicated `min(count, limit)` times.
pub fn store_features(store: &mut FeatureStore, record: &KnowledgeRecord, round: usize) {
    for e in &record.entries {
        for _ in 0..e.count.min(store.replication_limit) {
            store.push(StoredFeature {
                feature: e.mean_feature.clone(),
                class: e.class,
                round,
            });
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CvaeTrace {
    pub epochs: Vec<CvaeLossParts>,
    pub steps: Vec<CvaeLossParts>,
}

fn normal_tensor(rng: &mut SimRng, rows: usize, cols: usize) -> Result<Tensor> {
    let data = (0..rows * cols)
        .map(|_| rng.sample(StandardNormal))
        .collect();
    Tensor::matrix(rows, cols, data)
}

/// Minimize the objective with Adam over shuffled minibatches of the store.
pub fn train_cvae(
    model: &mut CvaeModel,
    store: &FeatureStore,
    epochs: usize,
    batch_size: usize,
    mc_samples: usize,
    seed: u64,
) -> Result<CvaeTrace> {
    if store.is_empty() {
        return Err(FeloError::protocol(
            "feature store is empty; nothing to train on",
        ));
    }
    if batch_size == 0 || mc_samples == 0 {
        return Err(FeloError::config(
            "cvae batch_size and mc_samples must be positive",
        ));
    }
    let snapshot: Vec<&StoredFeature> = store.entries().collect();
    if let Some(bad) = snapshot.iter().find(|e| e.feature.len() != model.d_feature) {
        return Err(FeloError::protocol(format!(
            "stored feature of width {} for a cvae expecting {}",
            bad.feature.len(),
            model.d_feature
        )));
    }
    let mut rng = seeded(seed);
    let mut order: Vec<usize> = (0..snapshot.len()).collect();
    let mut trace = CvaeTrace::default();
    for _ in 0..epochs {
        order.shuffle(&mut rng);
        let mut acc = (0.0, 0.0, 0.0);
        for batch in order.chunks(batch_size) {
            let mut data = Vec::with_capacity(batch.len() * model.d_feature);
            let mut labels = Vec::with_capacity(batch.len());
            for &i in batch {
                data.extend_from_slice(snapshot[i].feature.data());
                labels.push(snapshot[i].class);
            }
            let s = Tensor::matrix(batch.len(), model.d_feature, data)?;
            let eps = (0..mc_samples)
                .map(|_| normal_tensor(&mut rng, batch.len(), model.latent_dim))
                .collect::<Result<Vec<_>>>()?;
            let (parts, grads) = model.loss_and_grads(&s, &labels, &eps)?;
            let mut opt = model.optimizer.clone();
            optimizer_step(&mut model.params_mut(), &grads, &mut opt)?;
            model.optimizer = opt;
            let w = batch.len() as f64;
            acc.0 += parts.kl_to_prior * w;
            acc.1 += parts.reconstruction * w;
            acc.2 += parts.total * w;
            trace.steps.push(parts);
        }
        let n = snapshot.len() as f64;
        trace.epochs.push(CvaeLossParts {
            kl_to_prior: acc.0 / n,
            reconstruction: acc.1 / n,
            total: acc.2 / n,
            mc_samples,
        });
    }
    model.encoder.clear_trace();
    model.decoder.clear_trace();
    model.trained = true;
    Ok(trace)
}

/// Decode `n` standard-normal latents conditioned on `class`.
pub fn generate_synthetic(model: &CvaeModel, class: usize, n: usize, seed: u64) -> Result<Tensor> {
    if !model.trained {
        return Err(FeloError::protocol(
            "cvae must be trained before generating features",
        ));
    }
    if class >= model.n_classes || n == 0 {
        return Err(FeloError::config(format!(
            "cannot generate {n} samples for class {class} of {}",
            model.n_classes
        )));
    }
    let mut rng = seeded(seed);
    let z = normal_tensor(&mut rng, n, model.latent_dim)?;
    model.decode(&z, &vec![class; n])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::knowledge::ClassKnowledge;
    use crate::nn::Layer;

    fn zero_params(seq: &mut Sequential) {
        for p in seq.params_mut() {
            p.data_mut().fill(0.0);
        }
    }

    fn record(entries: &[(usize, usize)], d: usize) -> KnowledgeRecord {
        KnowledgeRecord {
            client_id: 0,
            entries: entries
                .iter()
                .map(|&(class, count)| ClassKnowledge {
                    class,
                    mean_feature: Tensor::filled(&[d], class as f64),
                    mean_logit: Tensor::zeros(&[3]),
                    count,
                })
                .collect(),
        }
    }

    #[test]
    fn store_appends_replicates_and_evicts() {
        let mut store = FeatureStore::new(100, 10).unwrap();
        store_features(&mut store, &record(&[(0, 1), (2, 1)], 4), 0);
        assert!(store.len() >= 2);

        let mut store = FeatureStore::new(100, 10).unwrap();
        store_features(&mut store, &record(&[(1, 3)], 4), 0);
        assert_eq!(store.len(), 3);

        let mut store = FeatureStore::new(100, 100).unwrap();
        store_features(&mut store, &record(&[(0, 100)], 4), 0);
        store_features(&mut store, &record(&[(1, 1)], 4), 1);
        assert_eq!(store.len(), 100);
        assert_eq!(store.entries().last().unwrap().class, 1);
        assert_eq!(store.entries().filter(|e| e.class == 0).count(), 99);
    }

    #[test]
    fn zero_encoder_gives_standard_posterior() {
        let mut m = CvaeModel::new(4, 3, 2, 8, 1e-3, 1).unwrap();
        zero_params(m.encoder_mut());
        let (mu, lv) = m.encode(&Tensor::filled(&[2, 4], 0.7), &[0, 2]).unwrap();
        assert!(mu.data().iter().chain(lv.data()).all(|&v| v == 0.0));
    }

    #[test]
    fn encode_is_deterministic_and_label_sensitive() {
        let m = CvaeModel::new(4, 3, 2, 8, 1e-3, 1).unwrap();
        let s = Tensor::filled(&[1, 4], 0.3);
        assert_eq!(m.encode(&s, &[1]).unwrap(), m.encode(&s, &[1]).unwrap());

        // Route the label columns straight into μ: W1 passes the one-hot
        // through relu, W2 reads it back out.
        let mut m = CvaeModel::new(1, 2, 1, 2, 1e-3, 1).unwrap();
        let layers = m.encoder_mut().layers_mut();
        layers[0] = Layer::Dense {
            weight: Tensor::from_rows(&[vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]).unwrap(),
            bias: Tensor::zeros(&[2]),
        };
        layers[2] = Layer::Dense {
            weight: Tensor::from_rows(&[vec![1.0, 2.0], vec![0.0, 0.0]]).unwrap(),
            bias: Tensor::zeros(&[2]),
        };
        let s = Tensor::filled(&[1, 1], 0.5);
        let (mu0, _) = m.encode(&s, &[0]).unwrap();
        let (mu1, _) = m.encode(&s, &[1]).unwrap();
        assert_eq!(mu0.data(), &[1.0]);
        assert_eq!(mu1.data(), &[2.0]);
        assert!(m.encode(&s, &[2]).is_err());
    }

    #[test]
    fn reparameterize_cases() {
        let mu = Tensor::vector(vec![1.0, -2.0]);
        let lv = Tensor::vector(vec![0.3, 0.0]);
        assert_eq!(reparameterize(&mu, &lv, &Tensor::zeros(&[2])).unwrap(), mu);
        let z = reparameterize(&mu, &Tensor::zeros(&[2]), &Tensor::vector(vec![0.5, 0.5])).unwrap();
        assert_eq!(z.data(), &[1.5, -1.5]);
        let z = reparameterize(
            &Tensor::vector(vec![1.0]),
            &Tensor::vector(vec![2.0 * 2f64.ln()]),
            &Tensor::vector(vec![1.0]),
        )
        .unwrap();
        assert!((z.data()[0] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn train_requires_features() {
        let mut m = CvaeModel::new(4, 3, 2, 8, 1e-3, 1).unwrap();
        let store = FeatureStore::new(10, 10).unwrap();
        assert!(matches!(
            train_cvae(&mut m, &store, 1, 4, 1, 0),
            Err(FeloError::Protocol(_))
        ));
    }

    #[test]
    fn singleton_smoke_and_determinism() {
        let mut store = FeatureStore::new(10, 10).unwrap();
        store_features(&mut store, &record(&[(1, 1)], 4), 0);
        let mut a = CvaeModel::new(4, 3, 2, 8, 1e-3, 1).unwrap();
        let mut b = a.clone();
        let ta = train_cvae(&mut a, &store, 1, 8, 1, 5).unwrap();
        assert_eq!(ta.epochs.len(), 1);
        assert!(ta.epochs[0].total.is_finite());
        let tb = train_cvae(&mut b, &store, 1, 8, 1, 5).unwrap();
        assert_eq!(ta, tb);
    }

    #[test]
    fn generation_rules() {
        let mut m = CvaeModel::new(3, 2, 2, 4, 1e-3, 1).unwrap();
        assert!(generate_synthetic(&m, 0, 4, 0).is_err());
        zero_params(m.decoder_mut());
        if let Layer::Dense { bias, .. } = &mut m.decoder_mut().layers_mut()[2] {
            *bias = Tensor::vector(vec![1.0, -2.0, 0.5]);
        }
        m.set_trained(true);
        let s = generate_synthetic(&m, 1, 5, 3).unwrap();
        for r in 0..5 {
            assert_eq!(s.row(r), &[1.0, -2.0, 0.5]);
        }
        let m = CvaeModel {
            trained: true,
            ..CvaeModel::new(3, 2, 2, 4, 1e-3, 1).unwrap()
        };
        assert_eq!(
            generate_synthetic(&m, 0, 6, 9).unwrap(),
            generate_synthetic(&m, 0, 6, 9).unwrap()
        );
    }
}
