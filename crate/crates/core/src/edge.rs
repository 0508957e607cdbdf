//! The edge tier: serves clients from a model cache, escalates cache misses
//! to the fedge, and pre-aggregates client updates per model before
//! forwarding them.

use std::collections::BTreeMap;

use crate::aggregation::fedavg;
use crate::fedge::{EdgeAggregate, FedgeError, FedgeService, FedgeState};
use crate::protocol::{
    merge_profiles, profile_similarity, ModelDescriptor, ModelId, ModelRequest, ModelResponse,
    ModelUpdate, ProtocolError,
};
use crate::tensor::ModelParams;

#[derive(Debug, Clone)]
pub struct EdgeState {
    edge_id: u64,
    match_threshold: f64,
    cache: BTreeMap<ModelId, (ModelDescriptor, ModelParams)>,
    pending: BTreeMap<ModelId, Vec<ModelUpdate>>,
    fedge_calls: u64,
}

impl EdgeState {
    pub fn new(edge_id: u64, match_threshold: f64) -> Self {
        Self {
            edge_id,
            match_threshold,
            cache: BTreeMap::new(),
            pending: BTreeMap::new(),
            fedge_calls: 0,
        }
    }

    pub fn edge_id(&self) -> u64 {
        self.edge_id
    }

    /// Number of `find_or_create` calls made to the fedge so far.
    pub fn fedge_calls(&self) -> u64 {
        self.fedge_calls
    }

    pub fn cached(&self, model_id: ModelId) -> Option<&(ModelDescriptor, ModelParams)> {
        self.cache.get(&model_id)
    }

    pub fn cache_len(&self) -> usize {
        self.cache.len()
    }

    pub fn pending_group_sizes(&self) -> BTreeMap<ModelId, usize> {
        self.pending.iter().map(|(k, v)| (*k, v.len())).collect()
    }

    /// Serves the best cached model at or above the match threshold (ties to
    /// the lowest id); on a miss asks the fedge and caches its answer.
    pub fn handle_model_request(
        &mut self,
        req: &ModelRequest,
        fedge: &mut dyn FedgeService,
    ) -> Result<ModelResponse, ProtocolError> {
        req.profile.validate()?;
        let mut best: Option<(ModelId, f64)> = None;
        for (&id, (d, _)) in &self.cache {
            let s = profile_similarity(&req.profile, &d.profile)?;
            if s >= self.match_threshold && best.is_none_or(|(_, bs)| s > bs) {
                best = Some((id, s));
            }
        }
        if let Some((id, _)) = best {
            let (d, p) = &self.cache[&id];
            return Ok(ModelResponse {
                model_id: id,
                params: p.clone(),
                version: d.version,
                freshly_created: false,
            });
        }
        self.fedge_calls += 1;
        let resp = fedge.find_or_create(&req.profile)?;
        let descriptor = match fedge.lookup(resp.model_id) {
            Some(m) => m.descriptor.clone(),
            None => {
                return Err(ProtocolError::FedgeUnavailable(format!(
                    "model {} vanished after being served",
                    resp.model_id
                )))
            }
        };
        self.cache
            .insert(resp.model_id, (descriptor, resp.params.clone()));
        Ok(resp)
    }

    pub fn handle_update(&mut self, upd: ModelUpdate) -> Result<(), ProtocolError> {
        if !self.cache.contains_key(&upd.model_id) {
            return Err(ProtocolError::UnknownModel(upd.model_id));
        }
        self.pending.entry(upd.model_id).or_default().push(upd);
        Ok(())
    }

    /// FedAvg of each pending group (weights = sample counts, arrival order),
    /// with summed sample counts and the count-weighted profile. Clears pending.
    pub fn take_aggregates(&mut self) -> Result<Vec<EdgeAggregate>, FedgeError> {
        let pending = std::mem::take(&mut self.pending);
        let mut out = Vec::with_capacity(pending.len());
        for (model_id, group) in pending {
            let inputs: Vec<(&ModelParams, f64)> = group
                .iter()
                .map(|u| (&u.params, u.sample_count as f64))
                .collect();
            let params = fedavg(&inputs)?;
            let mut profile = group[0].profile.clone();
            profile.sample_count = group[0].sample_count;
            let mut acc = group[0].sample_count as f64;
            for u in &group[1..] {
                let mut incoming = u.profile.clone();
                incoming.sample_count = u.sample_count;
                profile = merge_profiles(&profile, acc, &incoming, u.sample_count as f64)?;
                acc += u.sample_count as f64;
            }
            out.push(EdgeAggregate {
                edge_id: self.edge_id,
                model_id,
                params,
                weight: acc,
                profile,
            });
        }
        Ok(out)
    }

    /// Ends the round for a single-edge deployment: aggregates, applies to the
    /// fedge, and refreshes the cache. Multi-edge rounds instead collect
    /// [`EdgeState::take_aggregates`] from every edge, apply them in one
    /// [`FedgeState::apply_edge_aggregates`] call, then [`EdgeState::sync`] each edge.
    pub fn flush_round(
        &mut self,
        fedge: &mut FedgeState,
    ) -> Result<Vec<EdgeAggregate>, FedgeError> {
        let aggs = self.take_aggregates()?;
        if !aggs.is_empty() {
            fedge.apply_edge_aggregates(&aggs)?;
            self.sync(fedge);
        }
        Ok(aggs)
    }

    /// Refreshes cached entries from the fedge. Entries whose model was
    /// consolidated away are replaced by the survivor; cached versions never
    /// go backwards.
    pub fn sync(&mut self, fedge: &dyn FedgeService) {
        let old = std::mem::take(&mut self.cache);
        for (id, (d, p)) in old {
            let entry = match fedge.lookup(id) {
                Some(m) if m.descriptor.version >= d.version || m.descriptor.model_id != id => {
                    (m.descriptor.clone(), m.params.clone())
                }
                Some(_) => (d, p),
                None => continue,
            };
            let key = entry.0.model_id;
            match self.cache.get(&key) {
                Some((have, _)) if have.version >= entry.0.version => {}
                _ => {
                    self.cache.insert(key, entry);
                }
            }
        }
    }
}
