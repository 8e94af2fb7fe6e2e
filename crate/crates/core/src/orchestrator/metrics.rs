use std::time::Duration;

use crate::losses::{CvaeLossParts, FeloLossParts};
use crate::zoo::ArchitectureId;

#[derive(Debug, Clone, PartialEq)]
pub struct ClientMetrics {
    pub client_id: usize,
    pub arch: ArchitectureId,
    pub sampled: bool,
    /// Zero for clients that did not train this round.
    pub loss: FeloLossParts,
    pub test_accuracy: f64,
    /// Bytes this client uploaded this round.
    pub knowledge_bytes: u64,
    pub weight_bytes: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundMetrics {
    pub round: usize,
    pub sampled: Vec<usize>,
    pub clients: Vec<ClientMetrics>,
    pub cvae_trace: Vec<CvaeLossParts>,
    pub wall_time: Duration,
}

impl RoundMetrics {
    pub fn mean_accuracy(&self) -> f64 {
        let n = self.clients.len() as f64;
        self.clients.iter().map(|c| c.test_accuracy).sum::<f64>() / n
    }

    pub fn std_accuracy(&self) -> f64 {
        let mean = self.mean_accuracy();
        let n = self.clients.len() as f64;
        (self
            .clients
            .iter()
            .map(|c| (c.test_accuracy - mean).powi(2))
            .sum::<f64>()
            / n)
            .sqrt()
    }

    pub fn knowledge_bytes(&self) -> u64 {
        self.clients.iter().map(|c| c.knowledge_bytes).sum()
    }

    pub fn weight_bytes(&self) -> u64 {
        self.clients.iter().map(|c| c.weight_bytes).sum()
    }

    /// Loss parts averaged over the clients that trained this round.
    pub fn mean_loss(&self) -> FeloLossParts {
        let trained: Vec<&ClientMetrics> = self.clients.iter().filter(|c| c.sampled).collect();
        if trained.is_empty() {
            return FeloLossParts::default();
        }
        let n = trained.len() as f64;
        let mean =
            |f: fn(&FeloLossParts) -> f64| trained.iter().map(|c| f(&c.loss)).sum::<f64>() / n;
        FeloLossParts {
            ce: mean(|l| l.ce),
            mse: mean(|l| l.mse),
            kl: mean(|l| l.kl),
            total: mean(|l| l.total),
            alpha: trained[0].loss.alpha,
        }
    }
}
