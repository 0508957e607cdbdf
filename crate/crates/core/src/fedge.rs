//! The fedge tier: a registry of several global models, matched to clients by
//! data profile, created on demand and periodically consolidated.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aggregation::{fedavg, merge_models, AggregationError};
use crate::codec::encode_params;
use crate::nn::CnnArch;
use crate::protocol::{
    merge_profiles, profile_similarity, DataProfile, ModelDescriptor, ModelId, ModelResponse,
    ProtocolError,
};
use crate::tensor::ModelParams;

#[derive(Debug, Error)]
pub enum FedgeError {
    #[error("unknown model id {0}")]
    UnknownModel(ModelId),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Aggregation(#[from] AggregationError),
    #[error("snapshot export failed: {0}")]
    Io(#[from] std::io::Error),
    #[error("snapshot index: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FedgeConfig {
    /// Minimum similarity for a request to reuse an existing global model.
    pub match_threshold: f64,
    /// Minimum similarity for two global models to be consolidated.
    pub merge_threshold: f64,
    /// Consolidate every this many rounds; 0 disables consolidation.
    pub consolidation_period: u64,
    /// New model `k` is initialized with seed `init_seed_base + k`.
    pub init_seed_base: u64,
}

impl Default for FedgeConfig {
    fn default() -> Self {
        Self {
            match_threshold: 0.5,
            merge_threshold: 0.9,
            consolidation_period: 5,
            init_seed_base: 0,
        }
    }
}

/// What an edge forwards for one model after a round.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeAggregate {
    pub edge_id: u64,
    pub model_id: ModelId,
    pub params: ModelParams,
    /// Total samples behind `params`.
    pub weight: f64,
    pub profile: DataProfile,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeEvent {
    pub round: u64,
    pub survivor: ModelId,
    pub absorbed: ModelId,
    pub similarity: f64,
    pub new_version: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlobalModel {
    pub descriptor: ModelDescriptor,
    pub params: ModelParams,
}

/// The view of the fedge an edge needs. Implemented by [`FedgeState`]; tests
/// substitute failing implementations.
pub trait FedgeService {
    fn find_or_create(&mut self, profile: &DataProfile) -> Result<ModelResponse, ProtocolError>;

    /// Current state of `model_id`, following consolidation aliases.
    fn lookup(&self, model_id: ModelId) -> Option<&GlobalModel>;
}

#[derive(Debug, Clone)]
pub struct FedgeState {
    arch: CnnArch,
    config: FedgeConfig,
    registry: BTreeMap<ModelId, GlobalModel>,
    next_id: ModelId,
    /// absorbed id -> surviving id
    aliases: BTreeMap<ModelId, ModelId>,
}

impl FedgeState {
    pub fn new(arch: CnnArch, config: FedgeConfig) -> Self {
        Self {
            arch,
            config,
            registry: BTreeMap::new(),
            next_id: 0,
            aliases: BTreeMap::new(),
        }
    }

    pub fn config(&self) -> &FedgeConfig {
        &self.config
    }

    pub fn registry_size(&self) -> usize {
        self.registry.len()
    }

    pub fn models(&self) -> impl Iterator<Item = &GlobalModel> {
        self.registry.values()
    }

    pub fn get(&self, model_id: ModelId) -> Option<&GlobalModel> {
        self.registry.get(&model_id)
    }

    /// The id `model_id` now lives under, if it still exists.
    pub fn resolve(&self, model_id: ModelId) -> Option<ModelId> {
        let mut id = model_id;
        while let Some(&next) = self.aliases.get(&id) {
            id = next;
        }
        self.registry.contains_key(&id).then_some(id)
    }

    pub fn total_weight(&self) -> f64 {
        self.registry
            .values()
            .map(|m| m.descriptor.cumulative_weight)
            .sum()
    }

    /// Best-matching model at or above the match threshold (ties to the lowest
    /// id), or a freshly initialized one registered under the next id.
    pub fn find_or_create(
        &mut self,
        profile: &DataProfile,
    ) -> Result<ModelResponse, ProtocolError> {
        profile.validate()?;
        let mut best: Option<(ModelId, f64)> = None;
        for (&id, m) in &self.registry {
            let s = profile_similarity(profile, &m.descriptor.profile)?;
            if s >= self.config.match_threshold && best.is_none_or(|(_, bs)| s > bs) {
                best = Some((id, s));
            }
        }
        if let Some((id, _)) = best {
            let m = &self.registry[&id];
            return Ok(ModelResponse {
                model_id: id,
                params: m.params.clone(),
                version: m.descriptor.version,
                freshly_created: false,
            });
        }
        let id = self.next_id;
        self.next_id += 1;
        let params = self
            .arch
            .init_params(self.config.init_seed_base.wrapping_add(id));
        let descriptor = ModelDescriptor {
            model_id: id,
            version: 0,
            profile: profile.clone(),
            cumulative_weight: 0.0,
        };
        self.registry.insert(
            id,
            GlobalModel {
                descriptor,
                params: params.clone(),
            },
        );
        Ok(ModelResponse {
            model_id: id,
            params,
            version: 0,
            freshly_created: true,
        })
    }

    /// Applies one round of edge aggregates. Aggregates for the same model are
    /// combined by FedAvg over edge weights (in slice order); the result
    /// replaces the model's parameters and bumps its version once. Returns
    /// `(model_id, new_version)` per updated model, in id order.
    pub fn apply_edge_aggregates(
        &mut self,
        aggregates: &[EdgeAggregate],
    ) -> Result<Vec<(ModelId, u64)>, FedgeError> {
        let mut groups: BTreeMap<ModelId, Vec<&EdgeAggregate>> = BTreeMap::new();
        for agg in aggregates {
            if !self.registry.contains_key(&agg.model_id) {
                return Err(FedgeError::UnknownModel(agg.model_id));
            }
            groups.entry(agg.model_id).or_default().push(agg);
        }
        let mut versions = Vec::with_capacity(groups.len());
        for (id, group) in groups {
            let inputs: Vec<(&ModelParams, f64)> =
                group.iter().map(|a| (&a.params, a.weight)).collect();
            let params = fedavg(&inputs)?;
            let weight: f64 = group.iter().map(|a| a.weight).sum();
            let mut profile = group[0].profile.clone();
            let mut acc = group[0].weight;
            for a in &group[1..] {
                profile = merge_profiles(&profile, acc, &a.profile, a.weight)?;
                acc += a.weight;
            }
            let model = self.registry.get_mut(&id).expect("checked above");
            let d = &mut model.descriptor;
            d.profile = if d.cumulative_weight > 0.0 {
                merge_profiles(&d.profile, d.cumulative_weight, &profile, weight)?
            } else {
                profile
            };
            d.cumulative_weight += weight;
            d.version += 1;
            model.params = params;
            versions.push((id, d.version));
        }
        Ok(versions)
    }

    /// Single-edge form of [`FedgeState::apply_edge_aggregates`]; returns the new version.
    pub fn apply_edge_aggregate(
        &mut self,
        model_id: ModelId,
        params: ModelParams,
        weight: f64,
        profile: DataProfile,
    ) -> Result<u64, FedgeError> {
        let v = self.apply_edge_aggregates(&[EdgeAggregate {
            edge_id: 0,
            model_id,
            params,
            weight,
            profile,
        }])?;
        Ok(v[0].1)
    }

    pub fn consolidation_due(&self, round: u64) -> bool {
        let c = self.config.consolidation_period;
        c > 0 && round > 0 && round.is_multiple_of(c)
    }

    /// Greedy merging: repeatedly take the most similar pair (ties to the
    /// lowest id pair) and merge it while its similarity reaches the merge
    /// threshold. Models that have never been updated carry no weight and are
    /// not merged. The survivor keeps the smaller id.
    pub fn consolidate(&mut self, round: u64) -> Result<Vec<MergeEvent>, FedgeError> {
        let mut events = Vec::new();
        loop {
            let ids: Vec<ModelId> = self.registry.keys().copied().collect();
            let mut best: Option<(ModelId, ModelId, f64)> = None;
            for (i, &a) in ids.iter().enumerate() {
                let da = &self.registry[&a].descriptor;
                if da.cumulative_weight <= 0.0 {
                    continue;
                }
                for &b in &ids[i + 1..] {
                    let db = &self.registry[&b].descriptor;
                    if db.cumulative_weight <= 0.0 {
                        continue;
                    }
                    let s = profile_similarity(&da.profile, &db.profile)?;
                    if s >= self.config.merge_threshold && best.is_none_or(|(_, _, bs)| s > bs) {
                        best = Some((a, b, s));
                    }
                }
            }
            let Some((a, b, similarity)) = best else {
                break;
            };
            let absorbed = self.registry.remove(&b).expect("listed id");
            let survivor = self.registry.get_mut(&a).expect("listed id");
            let (wa, wb) = (
                survivor.descriptor.cumulative_weight,
                absorbed.descriptor.cumulative_weight,
            );
            survivor.params = merge_models(&survivor.params, wa, &absorbed.params, wb)?;
            let d = &mut survivor.descriptor;
            d.profile = merge_profiles(&d.profile, wa, &absorbed.descriptor.profile, wb)?;
            d.version = d.version.max(absorbed.descriptor.version) + 1;
            d.cumulative_weight = wa + wb;
            let new_version = d.version;
            self.aliases.insert(b, a);
            events.push(MergeEvent {
                round,
                survivor: a,
                absorbed: b,
                similarity,
                new_version,
            });
        }
        Ok(events)
    }

    /// Writes `model_<id>.bin` per global model plus `index.json`.
    pub fn export_snapshot(&self, dir: &Path) -> Result<(), FedgeError> {
        std::fs::create_dir_all(dir)?;
        let mut index = Vec::with_capacity(self.registry.len());
        for (id, m) in &self.registry {
            let file = format!("model_{id}.bin");
            std::fs::write(dir.join(&file), encode_params(&m.params))?;
            index.push(SnapshotEntry {
                model_id: *id,
                version: m.descriptor.version,
                profile: m.descriptor.profile.clone(),
                cumulative_weight: m.descriptor.cumulative_weight,
                file,
            });
        }
        std::fs::write(dir.join("index.json"), serde_json::to_vec_pretty(&index)?)?;
        Ok(())
    }
}

impl FedgeService for FedgeState {
    fn find_or_create(&mut self, profile: &DataProfile) -> Result<ModelResponse, ProtocolError> {
        FedgeState::find_or_create(self, profile)
    }

    fn lookup(&self, model_id: ModelId) -> Option<&GlobalModel> {
        self.resolve(model_id).and_then(|id| self.registry.get(&id))
    }
}

/// One line of a snapshot's `index.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotEntry {
    pub model_id: ModelId,
    pub version: u64,
    pub profile: DataProfile,
    pub cumulative_weight: f64,
    pub file: String,
}
