//! Deterministic round orchestration for the client-server FedAvg baseline
//! and the three-tier (client / edge / fedge) topology.

use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aggregation::{fedavg, AggregationError};
use crate::codec::encoded_len;
use crate::edge::EdgeState;
use crate::fedge::{FedgeConfig, FedgeError, FedgeState, MergeEvent};
use crate::mnist::{
    filter_test, partition_custom, partition_scenario1, partition_scenario2, DataError, LabeledSet,
    PartitionSpec, DEFAULT_SPARSE_PER_LABEL,
};
use crate::nn::{evaluate_accuracy, train_local, CnnArch, NnError, TrainConfig};
use crate::protocol::{
    profile_of, ClientId, DataProfile, ModelId, ModelRequest, ModelUpdate, ProtocolError,
};
use crate::rng::client_round_seed;
use crate::tensor::ModelParams;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid experiment config: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Aggregation(#[from] AggregationError),
    #[error("protocol error: {0}")]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Fedge(#[from] FedgeError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Topology {
    Standard,
    ThreeTier,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    S1,
    S2,
    Custom,
}

impl ScenarioKind {
    pub const ALL: [(ScenarioKind, &'static str); 3] = [
        (
            ScenarioKind::S1,
            "three clients, labels {0,1,2} / {3,4,5} / {6,7,8,9}, equal sizes",
        ),
        (
            ScenarioKind::S2,
            "two clients, all of {0,1} vs sparse_per_label images of each of 2..9",
        ),
        (
            ScenarioKind::Custom,
            "clients described by the `partition` field",
        ),
    ];

    pub fn name(self) -> &'static str {
        match self {
            ScenarioKind::S1 => "s1",
            ScenarioKind::S2 => "s2",
            ScenarioKind::Custom => "custom",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Thresholds {
    /// Edge cache match threshold.
    pub match_threshold: f64,
    /// Fedge registry match threshold.
    pub fedge_match_threshold: f64,
    pub merge_threshold: f64,
    /// Rounds between consolidations; 0 disables.
    pub consolidation_period: u64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            match_threshold: 0.5,
            fedge_match_threshold: 0.5,
            merge_threshold: 0.9,
            consolidation_period: 5,
        }
    }
}

/// Where the data comes from and how much of it to use.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Directory with the four uncompressed MNIST IDX files.
    pub mnist_dir: Option<PathBuf>,
    /// Use only the first N training images.
    pub train_limit: Option<usize>,
    /// Use only the first N test images.
    pub test_limit: Option<usize>,
}

fn default_rounds() -> u64 {
    10
}

fn default_edges() -> usize {
    1
}

fn default_sparse() -> usize {
    DEFAULT_SPARSE_PER_LABEL
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub topology: Topology,
    pub scenario: ScenarioKind,
    /// Images per label for scenario 2's sparse client.
    #[serde(default = "default_sparse")]
    pub sparse_per_label: usize,
    /// Required when `scenario` is `custom`.
    #[serde(default)]
    pub partition: Option<PartitionSpec>,
    #[serde(default = "default_rounds")]
    pub rounds: u64,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub thresholds: Thresholds,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_edges")]
    pub edges: usize,
    /// Edge index per client (in client order). Defaults to round-robin.
    #[serde(default)]
    pub client_edges: Option<Vec<usize>>,
    #[serde(default)]
    pub data: DataConfig,
}

impl ExperimentConfig {
    pub fn new(topology: Topology, scenario: ScenarioKind) -> Self {
        Self {
            topology,
            scenario,
            sparse_per_label: DEFAULT_SPARSE_PER_LABEL,
            partition: None,
            rounds: default_rounds(),
            train: TrainConfig::default(),
            thresholds: Thresholds::default(),
            seed: 0,
            edges: 1,
            client_edges: None,
            data: DataConfig::default(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self, SimError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| SimError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if self.rounds == 0 {
            return Err(SimError::Config("rounds must be >= 1".into()));
        }
        if self.edges == 0 {
            return Err(SimError::Config("edges must be >= 1".into()));
        }
        self.train
            .validate()
            .map_err(|e| SimError::Config(e.to_string()))?;
        let t = &self.thresholds;
        for (name, v) in [
            ("match_threshold", t.match_threshold),
            ("fedge_match_threshold", t.fedge_match_threshold),
            ("merge_threshold", t.merge_threshold),
        ] {
            if !v.is_finite() {
                return Err(SimError::Config(format!("{name} must be finite")));
            }
        }
        match (self.scenario, &self.partition) {
            (ScenarioKind::Custom, None) => {
                return Err(SimError::Config(
                    "scenario `custom` needs a `partition`".into(),
                ))
            }
            (ScenarioKind::Custom, Some(p)) => {
                p.validate().map_err(|e| SimError::Config(e.to_string()))?
            }
            (_, Some(_)) => {
                return Err(SimError::Config(
                    "`partition` is only used with scenario `custom`".into(),
                ))
            }
            _ => {}
        }
        if self.scenario == ScenarioKind::S2 && self.sparse_per_label == 0 {
            return Err(SimError::Config("sparse_per_label must be >= 1".into()));
        }
        if let Some(map) = &self.client_edges {
            if let Some(&bad) = map.iter().find(|&&e| e >= self.edges) {
                return Err(SimError::Config(format!(
                    "client_edges refers to edge {bad}, but only {} edges exist",
                    self.edges
                )));
            }
        }
        Ok(())
    }

    fn fedge_config(&self) -> FedgeConfig {
        FedgeConfig {
            match_threshold: self.thresholds.fedge_match_threshold,
            merge_threshold: self.thresholds.merge_threshold,
            consolidation_period: self.thresholds.consolidation_period,
            init_seed_base: self.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientAccuracy {
    pub client_id: ClientId,
    pub model_id: ModelId,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: u64,
    pub per_client: Vec<ClientAccuracy>,
    /// Model payload bytes sent to clients this round.
    pub bytes_down: u64,
    /// Model payload bytes sent by clients this round.
    pub bytes_up: u64,
    pub registry_size: usize,
}

/// A client's private training data, evaluation set and profile.
#[derive(Debug, Clone)]
pub struct ClientData {
    pub client_id: ClientId,
    pub train: LabeledSet,
    pub test: LabeledSet,
    pub profile: DataProfile,
}

/// Splits `train` per the configured scenario and pairs each client with the
/// test rows of its own labels. Client ids start at 1.
pub fn prepare_clients(
    cfg: &ExperimentConfig,
    train: &LabeledSet,
    test: &LabeledSet,
) -> Result<Vec<ClientData>, SimError> {
    let parts = match cfg.scenario {
        ScenarioKind::S1 => partition_scenario1(train, cfg.seed)?,
        ScenarioKind::S2 => partition_scenario2(train, cfg.sparse_per_label, cfg.seed)?,
        ScenarioKind::Custom => {
            let spec = cfg
                .partition
                .as_ref()
                .ok_or_else(|| SimError::Config("missing partition".into()))?;
            partition_custom(train, spec, cfg.seed)?
        }
    };
    parts
        .into_iter()
        .enumerate()
        .map(|(i, part)| {
            let labels: Vec<u8> = part.label_set().into_iter().collect();
            if part.is_empty() {
                return Err(SimError::Data(DataError::EmptyResult(labels)));
            }
            Ok(ClientData {
                client_id: i as ClientId + 1,
                test: filter_test(test, &labels)?,
                profile: profile_of(&part)?,
                train: part,
            })
        })
        .collect()
}

/// Per-round hook: metrics plus every live global model after the round.
pub struct RoundEvent<'a> {
    pub metrics: &'a RoundMetrics,
    pub models: Vec<(ModelId, &'a ModelParams)>,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub metrics: Vec<RoundMetrics>,
    pub merges: Vec<MergeEvent>,
    /// Final fedge state (three-tier only).
    pub fedge: Option<FedgeState>,
    /// Final global model (standard only).
    pub global: Option<ModelParams>,
}

fn client_cfg(cfg: &ExperimentConfig, client: ClientId, round: u64) -> TrainConfig {
    TrainConfig {
        seed: client_round_seed(cfg.seed, client, round),
        ..cfg.train
    }
}

/// Client-server FedAvg: one global model broadcast to everyone each round.
pub fn run_standard_fl(
    cfg: &ExperimentConfig,
    clients: &[ClientData],
    observer: &mut dyn FnMut(&RoundEvent<'_>),
) -> Result<RunOutput, SimError> {
    cfg.validate()?;
    if clients.is_empty() {
        return Err(SimError::Config("no clients".into()));
    }
    let arch = CnnArch::simple_cnn();
    let mut global = arch.init_params(cfg.seed);
    let payload = encoded_len(&global) as u64;
    let mut metrics = Vec::with_capacity(cfg.rounds as usize);
    for round in 1..=cfg.rounds {
        let mut updates = Vec::with_capacity(clients.len());
        for c in clients {
            let (p, n) = train_local(
                &arch,
                &global,
                &c.train,
                &client_cfg(cfg, c.client_id, round),
            )?;
            updates.push((p, n as f64));
        }
        let refs: Vec<(&ModelParams, f64)> = updates.iter().map(|(p, w)| (p, *w)).collect();
        global = fedavg(&refs)?;
        let per_client = clients
            .iter()
            .map(|c| {
                Ok(ClientAccuracy {
                    client_id: c.client_id,
                    model_id: 0,
                    accuracy: evaluate_accuracy(&arch, &global, &c.test)?,
                })
            })
            .collect::<Result<Vec<_>, SimError>>()?;
        let m = RoundMetrics {
            round,
            per_client,
            bytes_down: payload * clients.len() as u64,
            bytes_up: payload * clients.len() as u64,
            registry_size: 1,
        };
        observer(&RoundEvent {
            metrics: &m,
            models: vec![(0, &global)],
        });
        metrics.push(m);
    }
    Ok(RunOutput {
        metrics,
        merges: Vec::new(),
        fedge: None,
        global: Some(global),
    })
}

/// Client -> edge -> fedge rounds with multiple global models.
pub fn run_three_tier(
    cfg: &ExperimentConfig,
    clients: &[ClientData],
    observer: &mut dyn FnMut(&RoundEvent<'_>),
) -> Result<RunOutput, SimError> {
    cfg.validate()?;
    if clients.is_empty() {
        return Err(SimError::Config("no clients".into()));
    }
    let edge_of: Vec<usize> = match &cfg.client_edges {
        Some(map) => {
            if map.len() != clients.len() {
                return Err(SimError::Config(format!(
                    "client_edges lists {} clients, scenario has {}",
                    map.len(),
                    clients.len()
                )));
            }
            map.clone()
        }
        None => (0..clients.len()).map(|i| i % cfg.edges).collect(),
    };
    let arch = CnnArch::simple_cnn();
    let mut fedge = FedgeState::new(arch, cfg.fedge_config());
    let mut edges: Vec<EdgeState> = (0..cfg.edges)
        .map(|i| EdgeState::new(i as u64, cfg.thresholds.match_threshold))
        .collect();
    let mut metrics = Vec::with_capacity(cfg.rounds as usize);
    let mut merges = Vec::new();
    for round in 1..=cfg.rounds {
        let mut bytes_down = 0u64;
        let mut bytes_up = 0u64;
        let mut assigned: Vec<ModelId> = Vec::with_capacity(clients.len());
        for (c, &e) in clients.iter().zip(&edge_of) {
            let req = ModelRequest {
                client_id: c.client_id,
                profile: c.profile.clone(),
                round,
            };
            let resp = edges[e].handle_model_request(&req, &mut fedge)?;
            bytes_down += encoded_len(&resp.params) as u64;
            let (params, n) = train_local(
                &arch,
                &resp.params,
                &c.train,
                &client_cfg(cfg, c.client_id, round),
            )?;
            bytes_up += encoded_len(&params) as u64;
            assigned.push(resp.model_id);
            edges[e].handle_update(ModelUpdate {
                model_id: resp.model_id,
                params,
                sample_count: n as u64,
                profile: c.profile.clone(),
                client_id: c.client_id,
                round,
            })?;
        }
        let mut aggregates = Vec::new();
        for edge in &mut edges {
            aggregates.extend(edge.take_aggregates()?);
        }
        fedge.apply_edge_aggregates(&aggregates)?;
        if fedge.consolidation_due(round) {
            merges.extend(fedge.consolidate(round)?);
        }
        for edge in &mut edges {
            edge.sync(&fedge);
        }

        let per_client = clients
            .iter()
            .zip(&assigned)
            .map(|(c, &id)| {
                let live = fedge.resolve(id).ok_or(ProtocolError::UnknownModel(id))?;
                let model = fedge.get(live).expect("resolved id exists");
                Ok(ClientAccuracy {
                    client_id: c.client_id,
                    model_id: live,
                    accuracy: evaluate_accuracy(&arch, &model.params, &c.test)?,
                })
            })
            .collect::<Result<Vec<_>, SimError>>()?;
        let m = RoundMetrics {
            round,
            per_client,
            bytes_down,
            bytes_up,
            registry_size: fedge.registry_size(),
        };
        observer(&RoundEvent {
            metrics: &m,
            models: fedge
                .models()
                .map(|g| (g.descriptor.model_id, &g.params))
                .collect(),
        });
        metrics.push(m);
    }
    Ok(RunOutput {
        metrics,
        merges,
        fedge: Some(fedge),
        global: None,
    })
}

pub fn run(
    cfg: &ExperimentConfig,
    clients: &[ClientData],
    observer: &mut dyn FnMut(&RoundEvent<'_>),
) -> Result<RunOutput, SimError> {
    match cfg.topology {
        Topology::Standard => run_standard_fl(cfg, clients, observer),
        Topology::ThreeTier => run_three_tier(cfg, clients, observer),
    }
}

/// Partitions the data and runs the configured experiment.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    train: &LabeledSet,
    test: &LabeledSet,
) -> Result<RunOutput, SimError> {
    let clients = prepare_clients(cfg, train, test)?;
    run(cfg, &clients, &mut |_| {})
}

pub fn metrics_bytes(metrics: &[RoundMetrics]) -> Vec<u8> {
    serde_json::to_vec(metrics).expect("metrics serialize")
}

/// Runs `a` and `b` and reports whether their serialized metrics are
/// byte-identical. The two configs must use the same topology.
pub fn replay_pair(
    a: &ExperimentConfig,
    b: &ExperimentConfig,
    train: &LabeledSet,
    test: &LabeledSet,
) -> Result<bool, SimError> {
    if a.topology != b.topology {
        return Err(SimError::Config(format!(
            "replay needs one topology, got {:?} and {:?}",
            a.topology, b.topology
        )));
    }
    let first = run_experiment(a, train, test)?;
    let second = run_experiment(b, train, test)?;
    Ok(metrics_bytes(&first.metrics) == metrics_bytes(&second.metrics))
}

/// Runs `cfg` twice; true iff both metric streams serialize identically.
pub fn replay_check(
    cfg: &ExperimentConfig,
    train: &LabeledSet,
    test: &LabeledSet,
) -> Result<bool, SimError> {
    replay_pair(cfg, cfg, train, test)
}

/// Final-round accuracy per client id.
pub fn final_accuracies(metrics: &[RoundMetrics]) -> BTreeMap<ClientId, f64> {
    metrics
        .last()
        .map(|m| {
            m.per_client
                .iter()
                .map(|c| (c.client_id, c.accuracy))
                .collect()
        })
        .unwrap_or_default()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mnist::synthetic;

    fn small(topology: Topology, scenario: ScenarioKind) -> ExperimentConfig {
        let mut c = ExperimentConfig::new(topology, scenario);
        c.rounds = 2;
        c.sparse_per_label = 3;
        c.train.batch_size = 16;
        c.seed = 11;
        c
    }

    fn data() -> (LabeledSet, LabeledSet) {
        (synthetic(120, 1), synthetic(60, 2))
    }

    #[test]
    fn config_json_defaults_and_unknown_keys() {
        let cfg =
            ExperimentConfig::from_json(r#"{"topology":"three_tier","scenario":"s2"}"#).unwrap();
        assert_eq!(cfg.rounds, 10);
        assert_eq!(cfg.sparse_per_label, 750);
        assert_eq!(cfg.train, TrainConfig::default());
        assert_eq!(cfg.thresholds, Thresholds::default());
        assert!(ExperimentConfig::from_json(
            r#"{"topology":"standard","scenario":"s1","roundz":3}"#
        )
        .is_err());
        assert!(ExperimentConfig::from_json(
            r#"{"topology":"standard","scenario":"s1","rounds":0}"#
        )
        .is_err());
        assert!(
            ExperimentConfig::from_json(r#"{"topology":"standard","scenario":"custom"}"#).is_err()
        );
        assert!(ExperimentConfig::from_json(
            r#"{"topology":"standard","scenario":"s1","edges":2,"client_edges":[0,1,2]}"#
        )
        .is_err());
    }

    #[test]
    fn one_round_one_aggregation() {
        let (train, test) = data();
        let mut cfg = small(Topology::Standard, ScenarioKind::S1);
        cfg.rounds = 1;
        let out = run_experiment(&cfg, &train, &test).unwrap();
        assert_eq!(out.metrics.len(), 1);
        assert_eq!(out.metrics[0].per_client.len(), 3);
    }

    #[test]
    fn zero_learning_rate_keeps_accuracy_flat() {
        let (train, test) = data();
        let mut cfg = small(Topology::Standard, ScenarioKind::S1);
        cfg.rounds = 3;
        cfg.train.learning_rate = 0.0;
        let out = run_experiment(&cfg, &train, &test).unwrap();
        for m in &out.metrics[1..] {
            assert_eq!(m.per_client, out.metrics[0].per_client);
        }
    }

    #[test]
    fn single_client_global_equals_trained_params() {
        let (train, test) = data();
        let mut cfg = small(Topology::Standard, ScenarioKind::Custom);
        cfg.partition = Some(PartitionSpec {
            clients: vec![crate::mnist::ClientSpec {
                labels: (0..10).collect(),
                max_per_label: None,
            }],
        });
        let clients = prepare_clients(&cfg, &train, &test).unwrap();
        let arch = CnnArch::simple_cnn();
        let mut expected = arch.init_params(cfg.seed);
        let mut seen = Vec::new();
        run_standard_fl(&cfg, &clients, &mut |ev| seen.push(ev.models[0].1.clone())).unwrap();
        for (r, got) in seen.iter().enumerate() {
            expected = train_local(
                &arch,
                &expected,
                &clients[0].train,
                &client_cfg(&cfg, 1, r as u64 + 1),
            )
            .unwrap()
            .0;
            assert!(got.bit_eq(&expected));
        }
    }

    #[test]
    fn three_tier_identical_clients_share_one_model() {
        let (train, test) = data();
        let mut cfg = small(Topology::ThreeTier, ScenarioKind::Custom);
        let all: Vec<u8> = (0..10).collect();
        cfg.partition = Some(PartitionSpec {
            clients: vec![
                crate::mnist::ClientSpec {
                    labels: all.clone(),
                    max_per_label: Some(4),
                },
                crate::mnist::ClientSpec {
                    labels: all,
                    max_per_label: Some(4),
                },
            ],
        });
        let out = run_experiment(&cfg, &train, &test).unwrap();
        assert!(out.metrics.iter().all(|m| m.registry_size == 1));
    }

    #[test]
    fn three_tier_byte_accounting() {
        let (train, test) = data();
        let cfg = small(Topology::ThreeTier, ScenarioKind::S1);
        let out = run_experiment(&cfg, &train, &test).unwrap();
        let payload = encoded_len(&CnnArch::simple_cnn().zero_params()) as u64;
        for m in &out.metrics {
            assert_eq!(m.bytes_down, 3 * payload);
            assert_eq!(m.bytes_up, 3 * payload);
            assert_eq!(m.registry_size, 3);
        }
    }

    #[test]
    fn multi_edge_round_robin_runs() {
        let (train, test) = data();
        let mut cfg = small(Topology::ThreeTier, ScenarioKind::S1);
        cfg.edges = 2;
        let out = run_experiment(&cfg, &train, &test).unwrap();
        assert_eq!(out.metrics.last().unwrap().registry_size, 3);
        cfg.client_edges = Some(vec![1, 1, 0]);
        assert!(run_experiment(&cfg, &train, &test).is_ok());
        cfg.client_edges = Some(vec![1, 1]);
        assert!(matches!(
            run_experiment(&cfg, &train, &test),
            Err(SimError::Config(_))
        ));
    }

    #[test]
    fn replay_rules() {
        let (train, test) = data();
        let a = small(Topology::ThreeTier, ScenarioKind::S2);
        assert!(replay_check(&a, &train, &test).unwrap());
        let b = small(Topology::Standard, ScenarioKind::S2);
        assert!(matches!(
            replay_pair(&a, &b, &train, &test),
            Err(SimError::Config(_))
        ));
    }
}
