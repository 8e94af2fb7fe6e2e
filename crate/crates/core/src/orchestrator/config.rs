//! Experiment parameterization. Every field has a default; the on-disk form
//! is a TOML document with one table per section.

use serde::{Deserialize, Serialize};

use crate::error::{FeloError, Result};
use crate::losses::KlDirection;
use crate::nn::OptimizerKind;
use crate::zoo::{ArchitectureId, DEFAULT_D_FEATURE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Felo,
    Velo,
    Fedavg,
    Local,
}

impl Strategy {
    pub fn exchanges_knowledge(self) -> bool {
        matches!(self, Strategy::Felo | Strategy::Velo)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KnowledgeCollection {
    /// A dedicated inference pass over local data after training.
    PostTraining,
    /// Accumulate features and logits from every training forward pass.
    DuringTraining,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    Blobs,
    Idx,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PartitionKind {
    Iid,
    Dirichlet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentSection {
    pub strategy: Strategy,
    pub n_clients: usize,
    pub sample_ratio: f64,
    pub rounds: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
    /// Weight of the distillation terms against cross-entropy.
    pub alpha: f64,
    pub temperature: f64,
    pub kl_direction: KlDirection,
    /// When false only logits are distilled (feature MSE disabled).
    pub feature_loss: bool,
    pub knowledge_collection: KnowledgeCollection,
    pub seed: u64,
    pub parallel: bool,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        ExperimentSection {
            strategy: Strategy::Felo,
            n_clients: 10,
            sample_ratio: 0.2,
            rounds: 50,
            local_epochs: 2,
            batch_size: 32,
            alpha: 0.5,
            temperature: 1.0,
            kl_direction: KlDirection::ServerToClient,
            feature_loss: true,
            knowledge_collection: KnowledgeCollection::PostTraining,
            seed: 0,
            parallel: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub source: DataSource,
    pub n_classes: usize,
    pub d_in: usize,
    pub n_per_class: usize,
    pub test_per_class: usize,
    pub spread: f64,
    pub partition: PartitionKind,
    pub dirichlet_alpha: f64,
    pub train_images: String,
    pub train_labels: String,
    pub test_images: String,
    pub test_labels: String,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            source: DataSource::Blobs,
            n_classes: 10,
            d_in: 32,
            n_per_class: 200,
            test_per_class: 50,
            spread: 0.3,
            partition: PartitionKind::Dirichlet,
            dirichlet_alpha: 0.5,
            train_images: String::new(),
            train_labels: String::new(),
            test_images: String::new(),
            test_labels: String::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    /// Every client uses `homogeneous_arch` when set.
    pub homogeneous: bool,
    pub homogeneous_arch: usize,
    /// Architectures assigned round-robin to clients otherwise.
    pub archs: Vec<usize>,
    pub d_feature: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            homogeneous: false,
            homogeneous_arch: 2,
            archs: (0..ArchitectureId::count()).collect(),
            d_feature: DEFAULT_D_FEATURE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerSection {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for OptimizerSection {
    fn default() -> Self {
        OptimizerSection {
            kind: OptimizerKind::Adam,
            learning_rate: 0.002,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CvaeSection {
    pub latent_dim: usize,
    pub hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub mc_samples: usize,
    pub store_capacity: usize,
    pub replication_limit: usize,
    pub synthetic_per_class: usize,
}

impl Default for CvaeSection {
    fn default() -> Self {
        CvaeSection {
            latent_dim: 8,
            hidden: 64,
            epochs: 5,
            batch_size: 64,
            learning_rate: 0.001,
            mc_samples: 1,
            store_capacity: 2048,
            replication_limit: 16,
            synthetic_per_class: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub experiment: ExperimentSection,
    pub data: DataSection,
    pub model: ModelSection,
    pub optimizer: OptimizerSection,
    pub cvae: CvaeSection,
}

fn positive(v: usize, key: &str) -> Result<()> {
    if v == 0 {
        return Err(FeloError::config(format!("{key} must be positive")));
    }
    Ok(())
}

fn positive_f(v: f64, key: &str) -> Result<()> {
    if !(v > 0.0) || !v.is_finite() {
        return Err(FeloError::config(format!(
            "{key} must be a positive number, got {v}"
        )));
    }
    Ok(())
}

impl ExperimentConfig {
    /// Architecture of each client.
    pub fn client_archs(&self) -> Vec<ArchitectureId> {
        (0..self.experiment.n_clients)
            .map(|k| {
                if self.model.homogeneous {
                    ArchitectureId(self.model.homogeneous_arch)
                } else {
                    ArchitectureId(self.model.archs[k % self.model.archs.len()])
                }
            })
            .collect()
    }

    pub fn is_homogeneous(&self) -> bool {
        let archs = self.client_archs();
        archs.windows(2).all(|w| w[0] == w[1])
    }

    /// Number of clients sampled per round.
    pub fn clients_per_round(&self) -> usize {
        let k = self.experiment.n_clients;
        ((self.experiment.sample_ratio * k as f64).round() as usize).clamp(1, k.max(1))
    }

    pub fn validate(&self) -> Result<()> {
        let e = &self.experiment;
        positive(e.n_clients, "experiment.n_clients")?;
        if !(e.sample_ratio > 0.0 && e.sample_ratio <= 1.0) {
            return Err(FeloError::config(format!(
                "experiment.sample_ratio must be in (0, 1], got {}",
                e.sample_ratio
            )));
        }
        if (e.sample_ratio * e.n_clients as f64).round() < 1.0 {
            return Err(FeloError::config(format!(
                "experiment.sample_ratio {} samples no client out of experiment.n_clients {}",
                e.sample_ratio, e.n_clients
            )));
        }
        positive(e.local_epochs, "experiment.local_epochs")?;
        positive(e.batch_size, "experiment.batch_size")?;
        if !(e.alpha >= 0.0) || !e.alpha.is_finite() {
            return Err(FeloError::config(format!(
                "experiment.alpha must be non-negative, got {}",
                e.alpha
            )));
        }
        positive_f(e.temperature, "experiment.temperature")?;

        let d = &self.data;
        positive(d.n_classes, "data.n_classes")?;
        if d.n_classes < 2 {
            return Err(FeloError::config("data.n_classes must be at least 2"));
        }
        if d.n_classes > 256 {
            return Err(FeloError::config(
                "data.n_classes above 256 cannot be stored as IDX labels",
            ));
        }
        if d.partition == PartitionKind::Dirichlet {
            positive_f(d.dirichlet_alpha, "data.dirichlet_alpha")?;
        }
        match d.source {
            DataSource::Blobs => {
                positive(d.d_in, "data.d_in")?;
                positive(d.n_per_class, "data.n_per_class")?;
                positive(d.test_per_class, "data.test_per_class")?;
                positive_f(d.spread, "data.spread")?;
            }
            DataSource::Idx => {
                for (key, v) in [
                    ("data.train_images", &d.train_images),
                    ("data.train_labels", &d.train_labels),
                    ("data.test_images", &d.test_images),
                    ("data.test_labels", &d.test_labels),
                ] {
                    if v.is_empty() {
                        return Err(FeloError::config(format!(
                            "{key} is required when data.source = \"idx\""
                        )));
                    }
                }
            }
        }

        let m = &self.model;
        positive(m.d_feature, "model.d_feature")?;
        let check_arch = |a: usize, key: &str| {
            if a >= ArchitectureId::count() {
                Err(FeloError::config(format!(
                    "{key}: unknown architecture {a} (valid 0..{})",
                    ArchitectureId::count()
                )))
            } else {
                Ok(())
            }
        };
        if m.homogeneous {
            check_arch(m.homogeneous_arch, "model.homogeneous_arch")?;
        } else {
            if m.archs.is_empty() {
                return Err(FeloError::config(
                    "model.archs must list at least one architecture",
                ));
            }
            for &a in &m.archs {
                check_arch(a, "model.archs")?;
            }
        }
        if e.strategy == Strategy::Fedavg && !self.is_homogeneous() {
            return Err(FeloError::config(
                "experiment.strategy = \"fedavg\" requires a homogeneous zoo (set model.homogeneous = true)",
            ));
        }

        let o = &self.optimizer;
        positive_f(o.learning_rate, "optimizer.learning_rate")?;
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) {
            return Err(FeloError::config(
                "optimizer.beta1 and optimizer.beta2 must be in [0, 1)",
            ));
        }
        positive_f(o.epsilon, "optimizer.epsilon")?;

        let c = &self.cvae;
        positive(c.latent_dim, "cvae.latent_dim")?;
        positive(c.hidden, "cvae.hidden")?;
        positive(c.batch_size, "cvae.batch_size")?;
        positive(c.mc_samples, "cvae.mc_samples")?;
        positive(c.store_capacity, "cvae.store_capacity")?;
        positive(c.replication_limit, "cvae.replication_limit")?;
        positive(c.synthetic_per_class, "cvae.synthetic_per_class")?;
        positive_f(c.learning_rate, "cvae.learning_rate")?;
        Ok(())
    }
}
