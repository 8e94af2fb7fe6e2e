use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma};

use crate::error::{FeloError, Result};
use crate::rng::{seeded, SimRng};

/// Per-client example indices into a parent dataset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    clients: Vec<Vec<usize>>,
}

impl Partition {
    /// Wrap index sets after checking they form a disjoint exact cover of
    /// `0..n` with no empty client.
    pub fn new(clients: Vec<Vec<usize>>, n: usize) -> Result<Self> {
        let mut seen = vec![false; n];
        for (k, idx) in clients.iter().enumerate() {
            if idx.is_empty() {
                return Err(FeloError::data(format!("client {k} has no examples")));
            }
            for &i in idx {
                if i >= n || seen[i] {
                    return Err(FeloError::data(format!(
                        "index {i} out of range or assigned twice"
                    )));
                }
                seen[i] = true;
            }
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(FeloError::data(format!(
                "index {missing} assigned to no client"
            )));
        }
        Ok(Partition { clients })
    }

    pub fn n_clients(&self) -> usize {
        self.clients.len()
    }

    pub fn client(&self, k: usize) -> &[usize] {
        &self.clients[k]
    }

    pub fn clients(&self) -> &[Vec<usize>] {
        &self.clients
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.clients.iter().map(Vec::len).collect()
    }
}

fn check_counts(n: usize, n_clients: usize) -> Result<()> {
    if n_clients == 0 {
        return Err(FeloError::config("n_clients must be at least 1"));
    }
    if n_clients > n {
        return Err(FeloError::config(format!(
            "n_clients ({n_clients}) exceeds dataset size ({n})"
        )));
    }
    Ok(())
}

/// Shuffle, then deal round-robin: client sizes differ by at most one.
pub fn iid_partition(labels: &[usize], n_clients: usize, seed: u64) -> Result<Partition> {
    check_counts(labels.len(), n_clients)?;
    let mut order: Vec<usize> = (0..labels.len()).collect();
    order.shuffle(&mut seeded(seed));
    let mut clients = vec![Vec::new(); n_clients];
    for (pos, i) in order.into_iter().enumerate() {
        clients[pos % n_clients].push(i);
    }
    for c in &mut clients {
        c.sort_unstable();
    }
    Partition::new(clients, labels.len())
}

fn dirichlet_draw(alpha: f64, k: usize, rng: &mut SimRng) -> Result<Vec<f64>> {
    let gamma = Gamma::new(alpha, 1.0)
        .map_err(|e| FeloError::config(format!("invalid dirichlet_alpha {alpha}: {e}")))?;
    let draws: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
    let sum: f64 = draws.iter().sum();
    if sum > 0.0 && sum.is_finite() {
        Ok(draws.into_iter().map(|g| g / sum).collect())
    } else {
        // Every gamma draw underflowed: the limit is a point mass.
        let mut p = vec![0.0; k];
        p[rng.random_range(0..k)] = 1.0;
        Ok(p)
    }
}

/// For every class, draw client proportions from a symmetric Dirichlet and
/// deal the class's shuffled indices accordingly. Empty clients are then
/// filled by moving single examples from the largest client.
pub fn dirichlet_partition(
    labels: &[usize],
    n_clients: usize,
    dirichlet_alpha: f64,
    seed: u64,
) -> Result<Partition> {
    check_counts(labels.len(), n_clients)?;
    if !(dirichlet_alpha > 0.0) || !dirichlet_alpha.is_finite() {
        return Err(FeloError::config(format!(
            "dirichlet_alpha must be positive, got {dirichlet_alpha}"
        )));
    }
    let mut rng = seeded(seed);
    let n_classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut clients = vec![Vec::new(); n_clients];
    for class in 0..n_classes {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        members.shuffle(&mut rng);
        let props = dirichlet_draw(dirichlet_alpha, n_clients, &mut rng)?;
        let total = members.len() as f64;
        let mut cum = 0.0;
        let mut start = 0;
        for (k, p) in props.iter().enumerate() {
            cum += p;
            let end = if k + 1 == n_clients {
                members.len()
            } else {
                ((cum * total).round() as usize).clamp(start, members.len())
            };
            clients[k].extend_from_slice(&members[start..end]);
            start = end;
        }
    }
    for c in &mut clients {
        c.sort_unstable();
    }
    while let Some(empty) = clients.iter().position(Vec::is_empty) {
        let donor = (0..n_clients)
            .max_by(|&a, &b| clients[a].len().cmp(&clients[b].len()).then(b.cmp(&a)))
            .expect("at least one client");
        let moved = clients[donor]
            .pop()
            .expect("donor holds at least two examples");
        clients[empty].push(moved);
    }
    Partition::new(clients, labels.len())
}
