use std::time::Instant;

use rayon::prelude::*;

use super::config::{DataSource, ExperimentConfig, PartitionKind, Strategy};
use super::metrics::{ClientMetrics, RoundMetrics};
use super::training::{
    evaluate, local_train, sample_clients, ClientState, LocalOutcome, TrainingSettings,
};
use crate::cli::checkpoint::Checkpoint;
use crate::cvae::{
    generate_synthetic, store_features, train_cvae, CvaeModel, FeatureStore, StoredFeature,
};
use crate::data::{
    dirichlet_partition, generate_blob_split, iid_partition, load_idx, Dataset, Partition,
};
use crate::error::{FeloError, Result};
use crate::knowledge::{
    build_groups, server_aggregate, weight_group_average, KnowledgeRecord, ServerClassEntry,
    ServerKnowledge, WeightGroups,
};
use crate::losses::{CvaeLossParts, FeloLossParts};
use crate::nn::{OptimizerState, Tensor};
use crate::rng::{derive_seed, Stream};
use crate::zoo::{build_model, ArchitectureId, Model};

/// Immutable data side of an experiment: datasets and the client split.
#[derive(Debug, Clone)]
pub struct Environment {
    pub train: Dataset,
    pub test: Dataset,
    pub partition: Partition,
    pub client_data: Vec<Dataset>,
}

impl Environment {
    pub fn build(config: &ExperimentConfig) -> Result<Self> {
        let d = &config.data;
        let seed = config.experiment.seed;
        let (train, test) = match d.source {
            DataSource::Blobs => generate_blob_split(
                d.n_classes,
                d.d_in,
                d.n_per_class,
                d.test_per_class,
                d.spread,
                seed,
            )?,
            DataSource::Idx => {
                let train = load_idx(&d.train_images, &d.train_labels)?;
                let test = load_idx(&d.test_images, &d.test_labels)?;
                for (name, set) in [("train", &train), ("test", &test)] {
                    if set.n_classes() > d.n_classes {
                        return Err(FeloError::config(format!(
                            "data.n_classes = {} but the {name} labels reach {}",
                            d.n_classes,
                            set.n_classes() - 1
                        )));
                    }
                }
                if train.d_in() != test.d_in() {
                    return Err(FeloError::data(format!(
                        "train rows have {} values but test rows have {}",
                        train.d_in(),
                        test.d_in()
                    )));
                }
                (
                    train.with_n_classes(d.n_classes)?,
                    test.with_n_classes(d.n_classes)?,
                )
            }
        };
        let part_seed = derive_seed(seed, Stream::Partition, 0, 0);
        let n_clients = config.experiment.n_clients;
        let partition = match d.partition {
            PartitionKind::Iid => iid_partition(train.labels(), n_clients, part_seed)?,
            PartitionKind::Dirichlet => {
                dirichlet_partition(train.labels(), n_clients, d.dirichlet_alpha, part_seed)?
            }
        };
        let client_data = partition
            .clients()
            .iter()
            .map(|idx| train.subset(idx))
            .collect::<Result<Vec<_>>>()?;
        Ok(Environment {
            train,
            test,
            partition,
            client_data,
        })
    }

    pub fn client_sizes(&self) -> Vec<usize> {
        self.client_data.iter().map(Dataset::len).collect()
    }
}

/// Everything that evolves across rounds.
#[derive(Debug, Clone, PartialEq)]
pub struct FederationState {
    pub round: usize,
    pub seed: u64,
    pub clients: Vec<ClientState>,
    pub knowledge: ServerKnowledge,
    /// Per-architecture parameters held by the server. Under `fedavg` the
    /// single group is the global model.
    pub groups: WeightGroups,
    pub store: Option<FeatureStore>,
    pub cvae: Option<CvaeModel>,
}

fn initial_model(
    config: &ExperimentConfig,
    env: &Environment,
    arch: ArchitectureId,
) -> Result<Model> {
    // Clients of one architecture share their initialization, as does the
    // server's copy, so a group starts from a common point.
    let seed = derive_seed(config.experiment.seed, Stream::ModelInit, arch.0 as u64, 0);
    build_model(
        arch,
        env.train.d_in(),
        config.model.d_feature,
        config.data.n_classes,
        seed,
    )
}

fn new_optimizer(config: &ExperimentConfig) -> OptimizerState {
    let o = &config.optimizer;
    OptimizerState::new(o.kind, o.learning_rate).with_betas(o.beta1, o.beta2, o.epsilon)
}

impl FederationState {
    pub fn new(config: &ExperimentConfig, env: &Environment) -> Result<Self> {
        let archs = config.client_archs();
        let clients = archs
            .iter()
            .enumerate()
            .map(|(id, &arch)| {
                Ok(ClientState {
                    id,
                    model: initial_model(config, env, arch)?,
                    optimizer: new_optimizer(config),
                    accuracy: None,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let groups = build_groups(&archs, |arch| {
            Ok(initial_model(config, env, arch)?.cloned_params())
        })?;
        let (store, cvae) = if config.experiment.strategy == Strategy::Velo {
            let c = &config.cvae;
            (
                Some(FeatureStore::new(c.store_capacity, c.replication_limit)?),
                Some(CvaeModel::new(
                    config.model.d_feature,
                    config.data.n_classes,
                    c.latent_dim,
                    c.hidden,
                    c.learning_rate,
                    derive_seed(config.experiment.seed, Stream::CvaeInit, 0, 0),
                )?),
            )
        } else {
            (None, None)
        };
        Ok(FederationState {
            round: 0,
            seed: config.experiment.seed,
            clients,
            knowledge: ServerKnowledge::empty(config.data.n_classes, config.model.d_feature),
            groups,
            store,
            cvae,
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(self.round as u64, self.seed);
        for c in &self.clients {
            for (name, p) in c.model.param_names().into_iter().zip(c.model.params()) {
                ck.push(format!("client.{}.{name}", c.id), p.clone());
            }
            push_optimizer(&mut ck, &format!("client.{}.opt", c.id), &c.optimizer);
            let acc = c.accuracy.map_or([0.0, 0.0], |a| [1.0, a]);
            ck.push(
                format!("client.{}.accuracy", c.id),
                Tensor::vector(acc.to_vec()),
            );
        }
        for (arch, g) in &self.groups {
            for (i, p) in g.params.iter().enumerate() {
                ck.push(format!("group.{arch}.{i}"), p.clone());
            }
        }
        let (nc, df) = (self.knowledge.n_classes(), self.knowledge.d_feature());
        let e = self.knowledge.entries();
        ck.push(
            "knowledge.feature",
            Tensor::new(
                vec![nc, df],
                e.iter()
                    .flat_map(|x| x.mean_feature.data().to_vec())
                    .collect(),
            )
            .expect("knowledge shape"),
        );
        ck.push(
            "knowledge.logit",
            Tensor::new(
                vec![nc, nc],
                e.iter()
                    .flat_map(|x| x.mean_logit.data().to_vec())
                    .collect(),
            )
            .expect("knowledge shape"),
        );
        ck.push(
            "knowledge.available",
            Tensor::vector(e.iter().map(|x| f64::from(u8::from(x.available))).collect()),
        );
        if let Some(store) = self.store.as_ref().filter(|s| !s.is_empty()) {
            let n = store.len();
            let feats: Vec<f64> = store
                .entries()
                .flat_map(|s| s.feature.data().to_vec())
                .collect();
            ck.push(
                "store.feature",
                Tensor::new(vec![n, df], feats).expect("store shape"),
            );
            ck.push(
                "store.class",
                Tensor::vector(store.entries().map(|s| s.class as f64).collect()),
            );
            ck.push(
                "store.round",
                Tensor::vector(store.entries().map(|s| s.round as f64).collect()),
            );
        }
        if let Some(cvae) = &self.cvae {
            for (name, p) in cvae.param_names().into_iter().zip(cvae.params()) {
                ck.push(format!("cvae.{name}"), p.clone());
            }
            push_optimizer(&mut ck, "cvae.opt", cvae.optimizer());
            ck.push(
                "cvae.trained",
                Tensor::vector(vec![f64::from(u8::from(cvae.is_trained()))]),
            );
        }
        ck
    }

    /// Rebuild the state a checkpoint describes. `config` must be the one the
    /// checkpoint was produced under.
    pub fn from_checkpoint(
        config: &ExperimentConfig,
        env: &Environment,
        ck: &Checkpoint,
    ) -> Result<Self> {
        if ck.seed != config.experiment.seed {
            return Err(FeloError::config(format!(
                "experiment.seed = {} but the checkpoint was written with seed {}",
                config.experiment.seed, ck.seed
            )));
        }
        let mut state = FederationState::new(config, env)?;
        state.round = ck.round as usize;
        for c in &mut state.clients {
            let names = c.model.param_names();
            let values = names
                .iter()
                .map(|n| ck.require(&format!("client.{}.{n}", c.id)).cloned())
                .collect::<Result<Vec<_>>>()?;
            c.model
                .set_params(&values)
                .map_err(|e| FeloError::data(format!("checkpoint client {}: {e}", c.id)))?;
            read_optimizer(
                ck,
                &format!("client.{}.opt", c.id),
                &mut c.optimizer,
                values.len(),
            )?;
            let acc = ck
                .require(&format!("client.{}.accuracy", c.id))?
                .data()
                .to_vec();
            c.accuracy = match acc.as_slice() {
                [flag, v] if *flag == 1.0 => Some(*v),
                [_, _] => None,
                _ => {
                    return Err(FeloError::data(format!(
                        "checkpoint client {} accuracy is malformed",
                        c.id
                    )))
                }
            };
        }
        for (arch, g) in state.groups.iter_mut() {
            let params = (0..g.params.len())
                .map(|i| ck.require(&format!("group.{arch}.{i}")).cloned())
                .collect::<Result<Vec<_>>>()?;
            if params.iter().zip(&g.params).any(|(a, b)| !a.same_shape(b)) {
                return Err(FeloError::data(format!(
                    "checkpoint group {arch} has wrong shapes"
                )));
            }
            g.params = params;
        }
        let (nc, df) = (state.knowledge.n_classes(), state.knowledge.d_feature());
        let feats = ck.require("knowledge.feature")?;
        let logits = ck.require("knowledge.logit")?;
        let avail = ck.require("knowledge.available")?;
        if feats.shape() != [nc, df] || logits.shape() != [nc, nc] || avail.shape() != [nc] {
            return Err(FeloError::data(
                "checkpoint knowledge tensors have wrong shapes",
            ));
        }
        let entries = (0..nc)
            .map(|c| ServerClassEntry {
                mean_feature: Tensor::vector(feats.row(c).to_vec()),
                mean_logit: Tensor::vector(logits.row(c).to_vec()),
                available: avail.data()[c] == 1.0,
            })
            .collect();
        state.knowledge = ServerKnowledge::from_entries(df, nc, entries)?;
        if let Some(store) = state.store.as_mut() {
            if let Some(f) = ck.get("store.feature") {
                let classes = ck.require("store.class")?;
                let rounds = ck.require("store.round")?;
                if f.cols() != df || classes.len() != f.rows() || rounds.len() != f.rows() {
                    return Err(FeloError::data("checkpoint feature store tensors disagree"));
                }
                for i in 0..f.rows() {
                    store.push(StoredFeature {
                        feature: Tensor::vector(f.row(i).to_vec()),
                        class: classes.data()[i] as usize,
                        round: rounds.data()[i] as usize,
                    });
                }
            }
        }
        if let Some(cvae) = state.cvae.as_mut() {
            let names = cvae.param_names();
            let values = names
                .iter()
                .map(|n| ck.require(&format!("cvae.{n}")).cloned())
                .collect::<Result<Vec<_>>>()?;
            for (slot, v) in cvae.params_mut().into_iter().zip(values.iter()) {
                if !slot.same_shape(v) {
                    return Err(FeloError::data("checkpoint cvae parameter has wrong shape"));
                }
                *slot = v.clone();
            }
            let mut opt = cvae.optimizer().clone();
            read_optimizer(ck, "cvae.opt", &mut opt, values.len())?;
            *cvae.optimizer_mut() = opt;
            cvae.set_trained(ck.require("cvae.trained")?.data() == [1.0]);
        }
        Ok(state)
    }
}

fn push_optimizer(ck: &mut Checkpoint, prefix: &str, opt: &OptimizerState) {
    ck.push(
        format!("{prefix}.step"),
        Tensor::vector(vec![opt.step as f64]),
    );
    for (i, (m, v)) in opt
        .first_moments
        .iter()
        .zip(&opt.second_moments)
        .enumerate()
    {
        ck.push(format!("{prefix}.m.{i}"), m.clone());
        ck.push(format!("{prefix}.v.{i}"), v.clone());
    }
}

fn read_optimizer(
    ck: &Checkpoint,
    prefix: &str,
    opt: &mut OptimizerState,
    n_params: usize,
) -> Result<()> {
    opt.step = ck.require(&format!("{prefix}.step"))?.data()[0] as u64;
    opt.first_moments.clear();
    opt.second_moments.clear();
    if ck.get(&format!("{prefix}.m.0")).is_some() {
        for i in 0..n_params {
            opt.first_moments
                .push(ck.require(&format!("{prefix}.m.{i}"))?.clone());
            opt.second_moments
                .push(ck.require(&format!("{prefix}.v.{i}"))?.clone());
        }
    }
    Ok(())
}

/// A configured experiment in progress.
#[derive(Debug, Clone)]
pub struct Simulation {
    config: ExperimentConfig,
    env: Environment,
    settings: TrainingSettings,
    state: FederationState,
}

impl Simulation {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let env = Environment::build(&config)?;
        let state = FederationState::new(&config, &env)?;
        Ok(Simulation {
            settings: TrainingSettings::from_config(&config),
            config,
            env,
            state,
        })
    }

    pub fn from_checkpoint(config: ExperimentConfig, ck: &Checkpoint) -> Result<Self> {
        config.validate()?;
        let env = Environment::build(&config)?;
        let state = FederationState::from_checkpoint(&config, &env, ck)?;
        Ok(Simulation {
            settings: TrainingSettings::from_config(&config),
            config,
            env,
            state,
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn env(&self) -> &Environment {
        &self.env
    }

    pub fn state(&self) -> &FederationState {
        &self.state
    }

    pub fn state_mut(&mut self) -> &mut FederationState {
        &mut self.state
    }

    pub fn round(&self) -> usize {
        self.state.round
    }

    pub fn checkpoint(&self) -> Checkpoint {
        self.state.to_checkpoint()
    }

    /// Execute one round of the configured strategy.
    pub fn run_round(&mut self) -> Result<RoundMetrics> {
        let round = self.state.round;
        let result = match self.config.experiment.strategy {
            Strategy::Felo => self.run_round_felo(),
            Strategy::Velo => self.run_round_velo(),
            Strategy::Fedavg => self.run_round_fedavg(),
            Strategy::Local => self.run_round_local(),
        };
        result.map_err(|e| e.in_round(round))
    }

    pub fn run_rounds(&mut self, rounds: usize) -> Result<Vec<RoundMetrics>> {
        (0..rounds).map(|_| self.run_round()).collect()
    }

    pub fn sample(&self) -> Vec<usize> {
        sample_clients(
            self.config.experiment.n_clients,
            self.config.experiment.sample_ratio,
            self.state.seed,
            self.state.round,
        )
    }

    fn train_sampled(
        &mut self,
        sampled: &[usize],
        knowledge: Option<&ServerKnowledge>,
        use_group_weights: bool,
        collect: bool,
    ) -> Result<Vec<LocalOutcome>> {
        let (round, seed) = (self.state.round, self.state.seed);
        let groups = &self.state.groups;
        let env = &self.env;
        let settings = &self.settings;
        let work = |c: &mut ClientState| -> Result<LocalOutcome> {
            let weights = if use_group_weights {
                let g = groups.get(&c.arch()).ok_or_else(|| {
                    FeloError::protocol(format!(
                        "no weight group for client {} (arch {})",
                        c.id,
                        c.arch()
                    ))
                })?;
                Some(g.params.as_slice())
            } else {
                None
            };
            local_train(
                c,
                &env.client_data[c.id],
                knowledge,
                weights,
                settings,
                collect,
                seed,
                round,
            )
        };
        let selected: Vec<&mut ClientState> = self
            .state
            .clients
            .iter_mut()
            .filter(|c| sampled.binary_search(&c.id).is_ok())
            .collect();
        let outcomes: Vec<Result<LocalOutcome>> = if self.config.experiment.parallel {
            selected.into_par_iter().map(work).collect()
        } else {
            selected.into_iter().map(work).collect()
        };
        outcomes.into_iter().collect()
    }

    fn evaluate_stale(&mut self) -> Result<()> {
        let test = &self.env.test;
        let eval = |c: &mut ClientState| -> Result<()> {
            if c.accuracy.is_none() {
                c.accuracy = Some(evaluate(&c.model, test)?);
            }
            Ok(())
        };
        if self.config.experiment.parallel {
            self.state
                .clients
                .par_iter_mut()
                .map(eval)
                .collect::<Result<()>>()
        } else {
            self.state.clients.iter_mut().try_for_each(eval)
        }
    }

    fn finish_round(
        &mut self,
        start: Instant,
        sampled: Vec<usize>,
        outcomes: &[LocalOutcome],
        cvae_trace: Vec<CvaeLossParts>,
    ) -> RoundMetrics {
        let strategy = self.config.experiment.strategy;
        // Without the feature term felo clients have no reason to upload features.
        let logits_only = strategy == Strategy::Felo && !self.config.experiment.feature_loss;
        let clients = self
            .state
            .clients
            .iter()
            .map(|c| {
                let outcome = outcomes.iter().find(|o| o.client_id == c.id);
                let weight_bytes = match (outcome, strategy) {
                    (Some(_), Strategy::Local) | (None, _) => 0,
                    (Some(_), _) => (c.model.param_count() * 8) as u64,
                };
                ClientMetrics {
                    client_id: c.id,
                    arch: c.arch(),
                    sampled: outcome.is_some(),
                    loss: outcome.map_or(FeloLossParts::default(), |o| o.loss),
                    test_accuracy: c.accuracy.unwrap_or(0.0),
                    knowledge_bytes: outcome.and_then(|o| o.record.as_ref()).map_or(0, |r| {
                        if logits_only {
                            r.entries
                                .iter()
                                .map(|e| (e.mean_logit.len() * 8) as u64)
                                .sum()
                        } else {
                            r.wire_bytes()
                        }
                    }),
                    weight_bytes,
                }
            })
            .collect();
        let metrics = RoundMetrics {
            round: self.state.round,
            sampled,
            clients,
            cvae_trace,
            wall_time: start.elapsed(),
        };
        self.state.round += 1;
        metrics
    }

    /// Knowledge exchange with per-class averaging, plus same-architecture
    /// weight averaging. Round 0 is the initial cross-entropy-only pass.
    pub fn run_round_felo(&mut self) -> Result<RoundMetrics> {
        self.run_knowledge_round(false)
    }

    /// As felo, but feature targets come from a server-side CVAE trained on
    /// every feature received so far. Logit targets are still averaged.
    pub fn run_round_velo(&mut self) -> Result<RoundMetrics> {
        self.run_knowledge_round(true)
    }

    fn run_knowledge_round(&mut self, generative: bool) -> Result<RoundMetrics> {
        let start = Instant::now();
        let round = self.state.round;
        let sampled = self.sample();
        let knowledge = (round > 0).then(|| self.state.knowledge.clone());
        let outcomes = self.train_sampled(&sampled, knowledge.as_ref(), true, true)?;
        let mut records: Vec<KnowledgeRecord> =
            outcomes.iter().filter_map(|o| o.record.clone()).collect();
        records.sort_by_key(|r| r.client_id);

        self.state.knowledge = server_aggregate(&records, &self.state.knowledge)?;
        let sizes = self.env.client_sizes();
        let models: Vec<&Model> = self.state.clients.iter().map(|c| &c.model).collect();
        weight_group_average(&mut self.state.groups, &models, &sizes, &sampled)?;

        let trace = if generative {
            self.velo_server_step(&records)?
        } else {
            Vec::new()
        };
        self.evaluate_stale()?;
        Ok(self.finish_round(start, sampled, &outcomes, trace))
    }

    fn velo_server_step(&mut self, records: &[KnowledgeRecord]) -> Result<Vec<CvaeLossParts>> {
        let round = self.state.round;
        let seed = self.state.seed;
        let c = &self.config.cvae;
        let store = self
            .state
            .store
            .as_mut()
            .ok_or_else(|| FeloError::protocol("velo round without a feature store"))?;
        for rec in records {
            store_features(store, rec, round);
        }
        if round == 0 {
            // Initial training only fills the store; the generator starts
            // from the next round on.
            return Ok(Vec::new());
        }
        let cvae = self
            .state
            .cvae
            .as_mut()
            .ok_or_else(|| FeloError::protocol("velo round without a cvae"))?;
        let trace = train_cvae(
            cvae,
            store,
            c.epochs,
            c.batch_size,
            c.mc_samples,
            derive_seed(seed, Stream::CvaeTraining, round as u64, 0),
        )?;
        for class in self.state.knowledge.available_classes() {
            let samples = generate_synthetic(
                cvae,
                class,
                c.synthetic_per_class,
                derive_seed(seed, Stream::CvaeGeneration, round as u64, class as u64),
            )?;
            self.state
                .knowledge
                .set_feature(class, samples.mean_rows())?;
        }
        Ok(trace.epochs)
    }

    /// Broadcast the global model, train on cross-entropy, and replace the
    /// global model with the |D_k|-weighted mean of the sampled updates.
    pub fn run_round_fedavg(&mut self) -> Result<RoundMetrics> {
        if !self.config.is_homogeneous() {
            return Err(FeloError::config("fedavg requires a homogeneous zoo"));
        }
        let start = Instant::now();
        let sampled = self.sample();
        let outcomes = self.train_sampled(&sampled, None, true, false)?;
        let sizes = self.env.client_sizes();
        let models: Vec<&Model> = self.state.clients.iter().map(|c| &c.model).collect();
        weight_group_average(&mut self.state.groups, &models, &sizes, &sampled)?;

        let (arch, group) = self
            .state
            .groups
            .iter()
            .next()
            .ok_or_else(|| FeloError::protocol("fedavg without a global model"))?;
        let mut global = self.state.clients[group.members[0]].model.clone();
        debug_assert_eq!(global.arch(), *arch);
        global.set_params(&group.params)?;
        let acc = evaluate(&global, &self.env.test)?;
        for c in &mut self.state.clients {
            c.accuracy = Some(acc);
        }
        Ok(self.finish_round(start, sampled, &outcomes, Vec::new()))
    }

    /// Cross-entropy on private data only; nothing is exchanged.
    pub fn run_round_local(&mut self) -> Result<RoundMetrics> {
        let start = Instant::now();
        let sampled = self.sample();
        let outcomes = self.train_sampled(&sampled, None, false, false)?;
        self.evaluate_stale()?;
        Ok(self.finish_round(start, sampled, &outcomes, Vec::new()))
    }

    /// Parameters of the server's copy of an architecture group.
    pub fn group_params(&self, arch: ArchitectureId) -> Option<&[Tensor]> {
        self.state.groups.get(&arch).map(|g| g.params.as_slice())
    }
}

/// Build everything from the config and run `experiment.rounds` rounds.
pub fn run_experiment(config: &ExperimentConfig) -> Result<Vec<RoundMetrics>> {
    let rounds = config.experiment.rounds;
    let mut sim = Simulation::new(config.clone())?;
    sim.run_rounds(rounds)
}
