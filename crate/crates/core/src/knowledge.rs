//! Per-class knowledge exchange: what clients report, how the server pools
//! it, how same-architecture weights are averaged, and how training batches
//! are joined with the server's targets.

use std::borrow::Borrow;
use std::collections::BTreeMap;

use crate::data::Dataset;
use crate::error::{FeloError, Result};
use crate::nn::Tensor;
use crate::zoo::{ArchitectureId, Model};

const COLLECT_CHUNK: usize = 512;

#[derive(Debug, Clone, PartialEq)]
pub struct ClassKnowledge {
    pub class: usize,
    pub mean_feature: Tensor,
    pub mean_logit: Tensor,
    pub count: usize,
}

/// One client's report. Entries are sorted by class, unique, and only
/// present for classes the client actually holds.
#[derive(Debug, Clone, PartialEq)]
pub struct KnowledgeRecord {
    pub client_id: usize,
    pub entries: Vec<ClassKnowledge>,
}

impl KnowledgeRecord {
    pub fn classes(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.class).collect()
    }

    pub fn get(&self, class: usize) -> Option<&ClassKnowledge> {
        self.entries.iter().find(|e| e.class == class)
    }

    /// Bytes on the wire: one f64 feature vector and one f64 logit vector
    /// per reported class.
    pub fn wire_bytes(&self) -> u64 {
        self.entries
            .iter()
            .map(|e| ((e.mean_feature.len() + e.mean_logit.len()) * 8) as u64)
            .sum()
    }
}

/// Running per-class sums of features and logits.
#[derive(Debug, Clone)]
pub struct KnowledgeAccumulator {
    d_feature: usize,
    n_classes: usize,
    sums: BTreeMap<usize, (Vec<f64>, Vec<f64>, usize)>,
}

impl KnowledgeAccumulator {
    pub fn new(d_feature: usize, n_classes: usize) -> Self {
        KnowledgeAccumulator {
            d_feature,
            n_classes,
            sums: BTreeMap::new(),
        }
    }

    pub fn add(&mut self, features: &Tensor, logits: &Tensor, labels: &[usize]) -> Result<()> {
        if features.cols() != self.d_feature
            || logits.cols() != self.n_classes
            || features.rows() != labels.len()
            || logits.rows() != labels.len()
        {
            return Err(FeloError::protocol(format!(
                "knowledge batch shapes {:?}/{:?} for {} labels",
                features.shape(),
                logits.shape(),
                labels.len()
            )));
        }
        for (r, &y) in labels.iter().enumerate() {
            let (df, dc) = (self.d_feature, self.n_classes);
            let slot = self
                .sums
                .entry(y)
                .or_insert_with(|| (vec![0.0; df], vec![0.0; dc], 0));
            for (a, v) in slot.0.iter_mut().zip(features.row(r)) {
                *a += v;
            }
            for (a, v) in slot.1.iter_mut().zip(logits.row(r)) {
                *a += v;
            }
            slot.2 += 1;
        }
        Ok(())
    }

    pub fn is_empty(&self) -> bool {
        self.sums.is_empty()
    }

    pub fn finish(self, client_id: usize) -> Result<KnowledgeRecord> {
        if self.sums.is_empty() {
            return Err(FeloError::protocol(format!(
                "client {client_id} has no data to report"
            )));
        }
        let entries = self
            .sums
            .into_iter()
            .map(|(class, (f, l, count))| {
                let n = count as f64;
                ClassKnowledge {
                    class,
                    mean_feature: Tensor::vector(f.into_iter().map(|v| v / n).collect()),
                    mean_logit: Tensor::vector(l.into_iter().map(|v| v / n).collect()),
                    count,
                }
            })
            .collect();
        Ok(KnowledgeRecord { client_id, entries })
    }
}

/// Run the model over all local data without recording gradients and
/// average features and raw logits per class.
pub fn client_collect(client_id: usize, model: &Model, local: &Dataset) -> Result<KnowledgeRecord> {
    if local.is_empty() {
        return Err(FeloError::protocol(format!(
            "client {client_id} has empty local data"
        )));
    }
    let mut acc = KnowledgeAccumulator::new(model.d_feature(), model.n_classes());
    let all: Vec<usize> = (0..local.len()).collect();
    for chunk in all.chunks(COLLECT_CHUNK) {
        let x = local.inputs().select_rows(chunk)?;
        let labels: Vec<usize> = chunk.iter().map(|&i| local.labels()[i]).collect();
        let out = model.forward_full(&x)?;
        acc.add(&out.features, &out.logits, &labels)?;
    }
    acc.finish(client_id)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServerClassEntry {
    pub mean_feature: Tensor,
    pub mean_logit: Tensor,
    pub available: bool,
}

/// Server targets per class. A class is available once any client has
/// reported it; unreported classes keep their last value.
#[derive(Debug, Clone, PartialEq)]
pub struct ServerKnowledge {
    d_feature: usize,
    n_classes: usize,
    entries: Vec<ServerClassEntry>,
}

impl ServerKnowledge {
    pub fn empty(n_classes: usize, d_feature: usize) -> Self {
        ServerKnowledge {
            d_feature,
            n_classes,
            entries: (0..n_classes)
                .map(|_| ServerClassEntry {
                    mean_feature: Tensor::zeros(&[d_feature]),
                    mean_logit: Tensor::zeros(&[n_classes]),
                    available: false,
                })
                .collect(),
        }
    }

    pub fn d_feature(&self) -> usize {
        self.d_feature
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn entry(&self, class: usize) -> &ServerClassEntry {
        &self.entries[class]
    }

    pub fn entries(&self) -> &[ServerClassEntry] {
        &self.entries
    }

    pub fn is_available(&self, class: usize) -> bool {
        self.entries.get(class).is_some_and(|e| e.available)
    }

    pub fn available_classes(&self) -> Vec<usize> {
        (0..self.n_classes)
            .filter(|&c| self.entries[c].available)
            .collect()
    }

    pub fn any_available(&self) -> bool {
        self.entries.iter().any(|e| e.available)
    }

    /// Overwrite one class's feature target (used by the generative path).
    pub fn set_feature(&mut self, class: usize, feature: Tensor) -> Result<()> {
        if feature.shape() != [self.d_feature] {
            return Err(FeloError::protocol(format!(
                "feature target for class {class} has shape {:?}, expected [{}]",
                feature.shape(),
                self.d_feature
            )));
        }
        self.entries[class].mean_feature = feature;
        Ok(())
    }

    /// Rebuild from raw parts, validating shapes.
    pub fn from_entries(
        d_feature: usize,
        n_classes: usize,
        entries: Vec<ServerClassEntry>,
    ) -> Result<Self> {
        if entries.len() != n_classes
            || entries.iter().any(|e| {
                e.mean_feature.shape() != [d_feature] || e.mean_logit.shape() != [n_classes]
            })
        {
            return Err(FeloError::data(
                "server knowledge entries have inconsistent shapes",
            ));
        }
        Ok(ServerKnowledge {
            d_feature,
            n_classes,
            entries,
        })
    }
}

fn sorted_records(records: &[KnowledgeRecord]) -> Result<Vec<&KnowledgeRecord>> {
    let mut sorted: Vec<&KnowledgeRecord> = records.iter().collect();
    sorted.sort_by_key(|r| r.client_id);
    if let Some(w) = sorted.windows(2).find(|w| w[0].client_id == w[1].client_id) {
        return Err(FeloError::protocol(format!(
            "duplicate knowledge record from client {}",
            w[0].client_id
        )));
    }
    Ok(sorted)
}

/// Count-weighted per-class mean of the reported features and logits.
/// Records are folded in ascending client id, so the result is independent
/// of arrival order.
pub fn server_aggregate(
    records: &[KnowledgeRecord],
    previous: &ServerKnowledge,
) -> Result<ServerKnowledge> {
    let (df, nc) = (previous.d_feature, previous.n_classes);
    let sorted = sorted_records(records)?;
    // Per class: weighted feature sum, weighted logit sum, total count.
    type Sums = (Vec<f64>, Vec<f64>, usize);
    let mut sums: Vec<Option<Sums>> = vec![None; nc];
    for rec in sorted {
        for e in &rec.entries {
            if e.class >= nc
                || e.mean_feature.len() != df
                || e.mean_logit.len() != nc
                || e.count == 0
            {
                return Err(FeloError::protocol(format!(
                    "client {} reported class {} with feature len {}, logit len {}, count {} \
                     (server expects {nc} classes, d_feature {df})",
                    rec.client_id,
                    e.class,
                    e.mean_feature.len(),
                    e.mean_logit.len(),
                    e.count
                )));
            }
            let slot = sums[e.class].get_or_insert_with(|| (vec![0.0; df], vec![0.0; nc], 0));
            let w = e.count as f64;
            for (a, v) in slot.0.iter_mut().zip(e.mean_feature.data()) {
                *a += w * v;
            }
            for (a, v) in slot.1.iter_mut().zip(e.mean_logit.data()) {
                *a += w * v;
            }
            slot.2 += e.count;
        }
    }
    let entries = sums
        .into_iter()
        .enumerate()
        .map(|(c, s)| match s {
            Some((f, l, count)) => {
                let n = count as f64;
                ServerClassEntry {
                    mean_feature: Tensor::vector(f.into_iter().map(|v| v / n).collect()),
                    mean_logit: Tensor::vector(l.into_iter().map(|v| v / n).collect()),
                    available: true,
                }
            }
            None => previous.entries[c].clone(),
        })
        .collect();
    Ok(ServerKnowledge {
        d_feature: df,
        n_classes: nc,
        entries,
    })
}

/// Clients sharing an architecture, and the parameters the server hands to
/// the next member that asks.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightGroup {
    pub arch: ArchitectureId,
    pub members: Vec<usize>,
    pub params: Vec<Tensor>,
}

pub type WeightGroups = BTreeMap<ArchitectureId, WeightGroup>;

/// `Σ_k n_k·w_k / Σ_k n_k`, tensor by tensor, folded in the given order.
pub fn weighted_average(contributions: &[(&[Tensor], usize)]) -> Result<Vec<Tensor>> {
    let (first, _) = contributions
        .first()
        .ok_or_else(|| FeloError::protocol("weighted average of nothing"))?;
    let total: usize = contributions.iter().map(|(_, n)| n).sum();
    if total == 0 {
        return Err(FeloError::protocol(
            "weighted average with zero total weight",
        ));
    }
    let mut acc: Vec<Tensor> = first.iter().map(|t| Tensor::zeros(t.shape())).collect();
    for (params, n) in contributions {
        if params.len() != acc.len() || params.iter().zip(&acc).any(|(p, a)| !p.same_shape(a)) {
            return Err(FeloError::protocol(
                "parameter shapes differ within an averaging group",
            ));
        }
        let w = *n as f64;
        for (a, p) in acc.iter_mut().zip(params.iter()) {
            for (av, pv) in a.data_mut().iter_mut().zip(p.data()) {
                *av += w * pv;
            }
        }
    }
    let total = total as f64;
    for a in &mut acc {
        for v in a.data_mut() {
            *v /= total;
        }
    }
    Ok(acc)
}

/// Build one group per architecture from client assignments, seeding
/// each group's parameters from `initial(arch)`.
pub fn build_groups(
    archs: &[ArchitectureId],
    mut initial: impl FnMut(ArchitectureId) -> Result<Vec<Tensor>>,
) -> Result<WeightGroups> {
    let mut groups = WeightGroups::new();
    for (client, &arch) in archs.iter().enumerate() {
        if let Some(g) = groups.get_mut(&arch) {
            g.members.push(client);
        } else {
            groups.insert(
                arch,
                WeightGroup {
                    arch,
                    members: vec![client],
                    params: initial(arch)?,
                },
            );
        }
    }
    Ok(groups)
}

/// Replace each group's parameters with the |D_k|-weighted mean over its
/// sampled members. Groups without a sampled member are left unchanged.
pub fn weight_group_average<M: Borrow<Model>>(
    groups: &mut WeightGroups,
    models: &[M],
    dataset_sizes: &[usize],
    sampled: &[usize],
) -> Result<()> {
    let mut sampled: Vec<usize> = sampled.to_vec();
    sampled.sort_unstable();
    sampled.dedup();
    for &k in &sampled {
        let n_groups = groups.values().filter(|g| g.members.contains(&k)).count();
        if n_groups != 1 {
            return Err(FeloError::protocol(format!(
                "sampled client {k} belongs to {n_groups} weight groups"
            )));
        }
        if k >= models.len() || k >= dataset_sizes.len() {
            return Err(FeloError::protocol(format!("unknown client {k}")));
        }
    }
    for group in groups.values_mut() {
        let members: Vec<usize> = sampled
            .iter()
            .copied()
            .filter(|k| group.members.contains(k))
            .collect();
        if members.is_empty() {
            continue;
        }
        let params: Vec<Vec<Tensor>> = members
            .iter()
            .map(|&k| {
                let model = models[k].borrow();
                if model.arch() != group.arch {
                    return Err(FeloError::protocol(format!(
                        "client {k} has arch {} but sits in group {}",
                        model.arch(),
                        group.arch
                    )));
                }
                Ok(model.cloned_params())
            })
            .collect::<Result<_>>()?;
        let contributions: Vec<(&[Tensor], usize)> = params
            .iter()
            .zip(&members)
            .map(|(p, &k)| (p.as_slice(), dataset_sizes[k]))
            .collect();
        group.params = weighted_average(&contributions)?;
    }
    Ok(())
}

/// A training batch joined with the server's per-class targets.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedBatch {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub target_features: Tensor,
    pub target_logits: Tensor,
    /// False where the label's class has no server knowledge yet; such rows
    /// train on cross-entropy only.
    pub has_knowledge: Vec<bool>,
}

impl AugmentedBatch {
    pub fn any_knowledge(&self) -> bool {
        self.has_knowledge.iter().any(|&b| b)
    }
}

pub fn augment_batch(
    inputs: &Tensor,
    labels: &[usize],
    knowledge: &ServerKnowledge,
) -> Result<AugmentedBatch> {
    if inputs.rows() != labels.len() {
        return Err(FeloError::config(format!(
            "batch has {} rows but {} labels",
            inputs.rows(),
            labels.len()
        )));
    }
    let (df, nc) = (knowledge.d_feature, knowledge.n_classes);
    let b = labels.len();
    let mut feats = Vec::with_capacity(b * df);
    let mut logits = Vec::with_capacity(b * nc);
    let mut flags = Vec::with_capacity(b);
    for &y in labels {
        match knowledge.entries.get(y).filter(|e| e.available) {
            Some(e) => {
                feats.extend_from_slice(e.mean_feature.data());
                logits.extend_from_slice(e.mean_logit.data());
                flags.push(true);
            }
            None => {
                feats.extend(std::iter::repeat_n(0.0, df));
                logits.extend(std::iter::repeat_n(0.0, nc));
                flags.push(false);
            }
        }
    }
    Ok(AugmentedBatch {
        inputs: inputs.clone(),
        labels: labels.to_vec(),
        target_features: Tensor::matrix(b, df, feats)?,
        target_logits: Tensor::matrix(b, nc, logits)?,
        has_knowledge: flags,
    })
}
