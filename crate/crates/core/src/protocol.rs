//! Messages exchanged between clients, edges and the fedge, and the data
//! profile used to match a client to a global model.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mnist::LabeledSet;
use crate::nn::NUM_CLASSES;
use crate::tensor::ModelParams;

pub type ModelId = u64;
pub type ClientId = u64;

const HIST_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProtocolError {
    #[error("cannot profile an empty dataset")]
    EmptyDataset,
    #[error("invalid data profile: {0}")]
    InvalidProfile(String),
    #[error("merge weights must be positive, got {0} and {1}")]
    NonPositiveWeight(f64, f64),
    #[error("unknown model id {0}")]
    UnknownModel(ModelId),
    #[error("fedge unavailable: {0}")]
    FedgeUnavailable(String),
}

/// Normalized label histogram plus sample count; the only client metadata
/// that leaves a device besides model parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataProfile {
    pub label_hist: [f64; NUM_CLASSES],
    pub sample_count: u64,
}

impl DataProfile {
    pub fn new(label_hist: [f64; NUM_CLASSES], sample_count: u64) -> Result<Self, ProtocolError> {
        let p = Self {
            label_hist,
            sample_count,
        };
        p.validate()?;
        Ok(p)
    }

    /// Profile of a dataset with the given per-label counts.
    pub fn from_counts(counts: &[usize; NUM_CLASSES]) -> Result<Self, ProtocolError> {
        let n: usize = counts.iter().sum();
        if n == 0 {
            return Err(ProtocolError::EmptyDataset);
        }
        let mut hist = [0.0; NUM_CLASSES];
        for (h, &c) in hist.iter_mut().zip(counts) {
            *h = c as f64 / n as f64;
        }
        Ok(Self {
            label_hist: hist,
            sample_count: n as u64,
        })
    }

    pub fn one_hot(label: usize, sample_count: u64) -> Self {
        let mut hist = [0.0; NUM_CLASSES];
        hist[label] = 1.0;
        Self {
            label_hist: hist,
            sample_count,
        }
    }

    pub fn validate(&self) -> Result<(), ProtocolError> {
        if self.sample_count == 0 {
            return Err(ProtocolError::InvalidProfile("sample_count is zero".into()));
        }
        if let Some(v) = self
            .label_hist
            .iter()
            .find(|v| !(v.is_finite() && **v >= 0.0))
        {
            return Err(ProtocolError::InvalidProfile(format!(
                "histogram entry {v} is negative or not finite"
            )));
        }
        let sum: f64 = self.label_hist.iter().sum();
        if (sum - 1.0).abs() > HIST_TOLERANCE {
            return Err(ProtocolError::InvalidProfile(format!(
                "histogram sums to {sum}"
            )));
        }
        Ok(())
    }

    fn norm(&self) -> f64 {
        self.label_hist.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

pub fn profile_of(data: &LabeledSet) -> Result<DataProfile, ProtocolError> {
    DataProfile::from_counts(&data.label_counts())
}

/// Cosine similarity of the two label histograms, in `[0, 1]`.
pub fn profile_similarity(a: &DataProfile, b: &DataProfile) -> Result<f64, ProtocolError> {
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return Err(ProtocolError::InvalidProfile("zero-norm histogram".into()));
    }
    let dot: f64 = a
        .label_hist
        .iter()
        .zip(&b.label_hist)
        .map(|(x, y)| x * y)
        .sum();
    Ok((dot / (na * nb)).clamp(0.0, 1.0))
}

/// Weighted mean of two histograms; sample counts add.
pub fn merge_profiles(
    a: &DataProfile,
    wa: f64,
    b: &DataProfile,
    wb: f64,
) -> Result<DataProfile, ProtocolError> {
    if !(wa > 0.0 && wb > 0.0 && wa.is_finite() && wb.is_finite()) {
        return Err(ProtocolError::NonPositiveWeight(wa, wb));
    }
    let total = wa + wb;
    let mut hist = [0.0; NUM_CLASSES];
    for (h, (x, y)) in hist.iter_mut().zip(a.label_hist.iter().zip(&b.label_hist)) {
        *h = (wa * x + wb * y) / total;
    }
    Ok(DataProfile {
        label_hist: hist,
        sample_count: a.sample_count + b.sample_count,
    })
}

/// Registry entry metadata for one global model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelDescriptor {
    pub model_id: ModelId,
    pub version: u64,
    pub profile: DataProfile,
    /// Total samples ever aggregated into this model.
    pub cumulative_weight: f64,
}

/// A client's trained parameters, sent up to its edge.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelUpdate {
    pub model_id: ModelId,
    pub params: ModelParams,
    pub sample_count: u64,
    pub profile: DataProfile,
    pub client_id: ClientId,
    pub round: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRequest {
    pub client_id: ClientId,
    pub profile: DataProfile,
    pub round: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelResponse {
    pub model_id: ModelId,
    pub params: ModelParams,
    pub version: u64,
    pub freshly_created: bool,
}
