//! Decentralized personalized online federated learning.
//!
//! Every edge trains its own model online on a stream of batches, and every
//! `E` learning events it fetches its neighbors' models and folds them into a
//! weighted average whose weights are themselves learned by gradient descent
//! on the freshly labeled batch. The learned weights also drive a greedy
//! two-hop peer replacement rule. The [`simnet`] driver runs the whole network
//! deterministically in lockstep so that baselines, fault injection and
//! adversarial edges can be compared bit-reproducibly.

pub mod aggregation;
pub mod datastream;
pub mod edge;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod peer;
pub mod rng;
pub mod simnet;

pub use aggregation::{AggregationWeights, AlphaOptimizer, ModelSnapshot};
pub use datastream::{StreamBatch, SynthSpec};
pub use edge::EdgeState;
pub use error::{Error, Result};
pub use model::{LossKind, ModelSpec, ParameterVector};
pub use optim::{OptimizerConfig, OptimizerState};
pub use peer::Topology;
pub use simnet::{SimConfig, SimulationResult, Strategy};

use serde::{Deserialize, Serialize};
use std::fmt;

/// Index of an edge in the simulated network.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default,
)]
#[serde(transparent)]
pub struct EdgeId(pub usize);

impl fmt::Display for EdgeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl From<usize> for EdgeId {
    fn from(value: usize) -> Self {
        EdgeId(value)
    }
}
