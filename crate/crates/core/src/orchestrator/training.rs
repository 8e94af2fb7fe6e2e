use rand::seq::{index, SliceRandom};

use super::config::{ExperimentConfig, KnowledgeCollection};
use crate::data::Dataset;
use crate::error::{FeloError, Result};
use crate::knowledge::{
    augment_batch, client_collect, KnowledgeAccumulator, KnowledgeRecord, ServerKnowledge,
};
use crate::losses::{
    cross_entropy, feature_mse_masked, felo_loss, logit_kl_masked, FeloLossParts, KlDirection,
};
use crate::nn::{optimizer_step, OptimizerState, Tensor};
use crate::rng::{stream_rng, Stream};
use crate::zoo::{ArchitectureId, Model};

const EVAL_CHUNK: usize = 1024;

/// The knobs of one client's local optimization.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSettings {
    pub local_epochs: usize,
    pub batch_size: usize,
    pub alpha: f64,
    pub temperature: f64,
    pub kl_direction: KlDirection,
    pub feature_loss: bool,
    pub collection: KnowledgeCollection,
}

impl TrainingSettings {
    pub fn from_config(c: &ExperimentConfig) -> Self {
        let e = &c.experiment;
        TrainingSettings {
            local_epochs: e.local_epochs,
            batch_size: e.batch_size,
            alpha: e.alpha,
            temperature: e.temperature,
            kl_direction: e.kl_direction,
            feature_loss: e.feature_loss,
            collection: e.knowledge_collection,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientState {
    pub id: usize,
    pub model: Model,
    pub optimizer: OptimizerState,
    /// Test accuracy of `model` as last evaluated; `None` when stale.
    pub accuracy: Option<f64>,
}

impl ClientState {
    pub fn arch(&self) -> ArchitectureId {
        self.model.arch()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalOutcome {
    pub client_id: usize,
    /// Loss parts averaged over the final local epoch.
    pub loss: FeloLossParts,
    pub epoch_losses: Vec<FeloLossParts>,
    pub record: Option<KnowledgeRecord>,
}

/// `round(ratio·K)` distinct ids (at least one) drawn from the round's
/// stream, returned ascending.
pub fn sample_clients(n_clients: usize, sample_ratio: f64, seed: u64, round: usize) -> Vec<usize> {
    let m = ((sample_ratio * n_clients as f64).round() as usize).clamp(1, n_clients.max(1));
    let mut rng = stream_rng(seed, Stream::Sampling, round as u64, 0);
    let mut ids = index::sample(&mut rng, n_clients, m).into_vec();
    ids.sort_unstable();
    ids
}

/// Fraction of rows whose argmax prediction equals the label.
pub fn evaluate(model: &Model, test: &Dataset) -> Result<f64> {
    if test.is_empty() {
        return Err(FeloError::data("empty test set"));
    }
    let all: Vec<usize> = (0..test.len()).collect();
    let mut correct = 0usize;
    for chunk in all.chunks(EVAL_CHUNK) {
        let x = test.inputs().select_rows(chunk)?;
        let out = model.forward_full(&x)?;
        correct += chunk
            .iter()
            .zip(&out.predictions)
            .filter(|(&i, &p)| test.labels()[i] == p)
            .count();
    }
    Ok(correct as f64 / test.len() as f64)
}

/// One participation of a client.
///
/// With `group_weights` the model first adopts them. Without `knowledge` the
/// objective is plain cross-entropy; with it every example is joined with
/// the server target for its class and the distillation terms are added.
/// When `collect` is set the outcome carries the client's knowledge record.
#[allow(clippy::too_many_arguments)]
pub fn local_train(
    client: &mut ClientState,
    data: &Dataset,
    knowledge: Option<&ServerKnowledge>,
    group_weights: Option<&[Tensor]>,
    settings: &TrainingSettings,
    collect: bool,
    seed: u64,
    round: usize,
) -> Result<LocalOutcome> {
    if data.is_empty() {
        return Err(FeloError::protocol(format!(
            "client {} has no data",
            client.id
        )));
    }
    if let Some(w) = group_weights {
        client.model.set_params(w)?;
    }
    client.accuracy = None;
    let mut rng = stream_rng(seed, Stream::ClientTraining, client.id as u64, round as u64);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut accumulator = (collect && settings.collection == KnowledgeCollection::DuringTraining)
        .then(|| KnowledgeAccumulator::new(client.model.d_feature(), client.model.n_classes()));
    let alpha = settings.alpha;
    let mut epoch_losses = Vec::with_capacity(settings.local_epochs);

    for _ in 0..settings.local_epochs {
        order.shuffle(&mut rng);
        let mut sums = (0.0, 0.0, 0.0, 0.0);
        for batch in order.chunks(settings.batch_size) {
            let x = data.inputs().select_rows(batch)?;
            let y: Vec<usize> = batch.iter().map(|&i| data.labels()[i]).collect();
            let (features, logits) = client.model.forward_train(&x)?;
            if let Some(acc) = accumulator.as_mut() {
                acc.add(&features, &logits, &y)?;
            }
            let ce = cross_entropy(&logits, &y)?;
            let mut logit_grad = ce.grad;
            let mut feature_grad = None;
            let (mut mse, mut kl) = (0.0, 0.0);
            if let Some(k) = knowledge {
                let aug = augment_batch(&x, &y, k)?;
                if aug.any_knowledge() {
                    let mask = Some(aug.has_knowledge.as_slice());
                    let kl_part = logit_kl_masked(
                        &logits,
                        &aug.target_logits,
                        settings.temperature,
                        settings.kl_direction,
                        mask,
                    )?;
                    kl = kl_part.value;
                    let mse_part = if settings.feature_loss {
                        let m = feature_mse_masked(&features, &aug.target_features, mask)?;
                        mse = m.value;
                        Some(m.grad)
                    } else {
                        None
                    };
                    // alpha = 0 leaves the gradient untouched so the
                    // trajectory matches plain cross-entropy training bit for bit.
                    if alpha > 0.0 {
                        for (g, k) in logit_grad.data_mut().iter_mut().zip(kl_part.grad.data()) {
                            *g += alpha * k;
                        }
                        feature_grad = mse_part.map(|mut g| {
                            g.scale(alpha);
                            g
                        });
                    }
                }
            }
            let parts = felo_loss(ce.value, mse, kl, alpha)?;
            let grads = client.model.backward(feature_grad.as_ref(), &logit_grad)?;
            optimizer_step(
                &mut client.model.params_mut(),
                &grads,
                &mut client.optimizer,
            )?;
            let w = batch.len() as f64;
            sums.0 += parts.ce * w;
            sums.1 += parts.mse * w;
            sums.2 += parts.kl * w;
            sums.3 += parts.total * w;
        }
        let n = data.len() as f64;
        epoch_losses.push(FeloLossParts {
            ce: sums.0 / n,
            mse: sums.1 / n,
            kl: sums.2 / n,
            total: sums.3 / n,
            alpha,
        });
    }
    client.model.clear_trace();
    if client.model.params().iter().any(|p| !p.is_finite()) {
        return Err(FeloError::data(format!(
            "client {} parameters became non-finite; lower the learning rate",
            client.id
        )));
    }
    let record = match (collect, accumulator) {
        (false, _) => None,
        (true, Some(acc)) => Some(acc.finish(client.id)?),
        (true, None) => Some(client_collect(client.id, &client.model, data)?),
    };
    Ok(LocalOutcome {
        client_id: client.id,
        loss: epoch_losses.last().copied().unwrap_or_default(),
        epoch_losses,
        record,
    })
}
