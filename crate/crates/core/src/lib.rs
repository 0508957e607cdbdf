//! Hierarchical federated learning with multiple global models.
//!
//! Clients train a small CNN on private MNIST shards. In the three-tier
//! topology they obtain a model from an edge, which serves a cache of global
//! models and escalates misses to the fedge; the fedge keeps one global model
//! per family of similar label distributions, creates new ones on demand and
//! periodically merges models whose profiles converge. The client-server
//! FedAvg baseline runs on the same data, seeds and metrics for comparison.
//!
//! Everything is seeded: the same [`sim::ExperimentConfig`] always produces
//! byte-identical metrics.

pub mod aggregation;
pub mod codec;
pub mod edge;
pub mod fedge;
pub mod mnist;
pub mod nn;
pub mod protocol;
pub mod report;
pub mod rng;
pub mod sim;
pub mod tensor;

pub use aggregation::{fedavg, merge_models};
pub use codec::{decode_params, encode_params};
pub use mnist::LabeledSet;
pub use nn::{CnnArch, TrainConfig};
pub use protocol::{DataProfile, ModelDescriptor, ModelRequest, ModelResponse, ModelUpdate};
pub use sim::{ExperimentConfig, RoundMetrics, Topology};
pub use tensor::{ModelParams, Tensor};

/// Environment variable naming the default MNIST directory.
pub const MNIST_DIR_ENV: &str = "FEDTIER_MNIST_DIR";
