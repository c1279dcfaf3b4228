//! Weighted-average model aggregation with learnable weights.
//!
//! For an edge with local parameters `θ` and fetched neighbor parameters
//! `M_j`, the aggregate is
//!
//! ```text
//! θ_agg = (α_self·θ + Σ_j α_j·M_j) / (α_self + Σ_j α_j)
//! ```
//!
//! The weights are raw nonnegative scalars. They are learned by freezing every
//! model and descending the batch loss of `θ_agg` with respect to the `α`s,
//! projecting back onto `α ≥ 0` after each step. A zero weight still receives a
//! gradient, so a freshly added neighbor can start at exactly zero and grow.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::datastream::StreamBatch;
use crate::error::{Error, Result};
use crate::model::{loss_and_gradient, LossKind, ModelSpec, ParameterVector};
use crate::optim::{OptimizerConfig, OptimizerState};
use crate::EdgeId;

/// Smallest admissible total weight.
pub const MIN_WEIGHT_SUM: f64 = 1e-8;

/// Tolerance used when checking that weights are normalized.
pub const NORMALIZED_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregationWeights {
    #[serde(rename = "self")]
    pub self_weight: f64,
    pub neighbors: BTreeMap<EdgeId, f64>,
}

impl AggregationWeights {
    /// Self and every listed neighbor at weight 1.
    pub fn uniform<I: IntoIterator<Item = EdgeId>>(neighbors: I) -> Self {
        AggregationWeights {
            self_weight: 1.0,
            neighbors: neighbors.into_iter().map(|j| (j, 1.0)).collect(),
        }
    }

    pub fn self_only() -> Self {
        AggregationWeights {
            self_weight: 1.0,
            neighbors: BTreeMap::new(),
        }
    }

    pub fn total(&self) -> f64 {
        self.self_weight + self.neighbors.values().sum::<f64>()
    }

    pub fn get(&self, edge: EdgeId) -> Option<f64> {
        self.neighbors.get(&edge).copied()
    }

    /// Weights restricted to `sources` (self is always kept).
    pub fn restrict(&self, sources: &[EdgeId]) -> Result<Self> {
        let neighbors = sources
            .iter()
            .map(|&j| {
                self.get(j)
                    .map(|w| (j, w))
                    .ok_or_else(|| Error::Contract(format!("no aggregation weight for edge {j}")))
            })
            .collect::<Result<_>>()?;
        Ok(AggregationWeights {
            self_weight: self.self_weight,
            neighbors,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |w: f64| !(w.is_finite() && w >= 0.0);
        if bad(self.self_weight) || self.neighbors.values().any(|&w| bad(w)) {
            return Err(Error::Contract(
                "aggregation weights must be finite and nonnegative".into(),
            ));
        }
        Ok(())
    }

    pub fn is_normalized(&self) -> bool {
        (self.total() - 1.0).abs() <= NORMALIZED_TOL
    }

    fn to_dense(&self, sources: &[EdgeId]) -> Vec<f64> {
        std::iter::once(self.self_weight)
            .chain(sources.iter().map(|j| self.neighbors[j]))
            .collect()
    }

    fn from_dense(values: &[f64], sources: &[EdgeId]) -> Self {
        AggregationWeights {
            self_weight: values[0],
            neighbors: sources
                .iter()
                .copied()
                .zip(values[1..].iter().copied())
                .collect(),
        }
    }
}

/// A neighbor's published model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSnapshot {
    pub source_edge: EdgeId,
    pub params: ParameterVector,
    /// Logical step at which these parameters became current.
    pub produced_at: usize,
    /// Labeled examples the source had learned from when publishing.
    pub samples_seen: u64,
}

fn sources(snapshots: &[ModelSnapshot]) -> Vec<EdgeId> {
    snapshots.iter().map(|s| s.source_edge).collect()
}

fn check_inputs(
    local: &ParameterVector,
    snapshots: &[ModelSnapshot],
    weights: &AggregationWeights,
) -> Result<f64> {
    weights.validate()?;
    let mut total = weights.self_weight;
    for snap in snapshots {
        if snap.params.len() != local.len() {
            return Err(Error::shape(format!(
                "edge {} sent {} parameters, local model has {}",
                snap.source_edge,
                snap.params.len(),
                local.len()
            )));
        }
        total += weights.get(snap.source_edge).ok_or_else(|| {
            Error::Contract(format!(
                "no aggregation weight for edge {}",
                snap.source_edge
            ))
        })?;
    }
    if total.is_nan() || total < MIN_WEIGHT_SUM {
        return Err(Error::DegenerateWeights {
            total,
            min: MIN_WEIGHT_SUM,
        });
    }
    Ok(total)
}

/// Weighted average of the local model and the snapshots. Only the snapshot
/// sources and self contribute to the normalizing sum.
pub fn aggregate(
    local: &ParameterVector,
    snapshots: &[ModelSnapshot],
    weights: &AggregationWeights,
) -> Result<ParameterVector> {
    let total = check_inputs(local, snapshots, weights)?;
    // Written as local + Σ c_j (M_j − local) so that zero neighbor mass and
    // identical models both return `local` bit for bit.
    let mut out = local.as_slice().to_vec();
    for snap in snapshots {
        let c = weights.neighbors[&snap.source_edge] / total;
        if c == 0.0 {
            continue;
        }
        for ((o, &m), &l) in out
            .iter_mut()
            .zip(snap.params.as_slice())
            .zip(local.as_slice())
        {
            *o += c * (m - l);
        }
    }
    Ok(ParameterVector::from_vec_unchecked(out))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlphaGradient {
    pub self_grad: f64,
    pub neighbors: BTreeMap<EdgeId, f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Loss of the aggregate together with its partial derivatives with respect
/// to every aggregation weight: `∂L/∂α_s = g·(M_s − θ_agg)/S`.
fn loss_and_alpha_gradient(
    local: &ParameterVector,
    snapshots: &[ModelSnapshot],
    weights: &AggregationWeights,
    batch: &StreamBatch,
    spec: &ModelSpec,
    kind: LossKind,
) -> Result<(f64, ParameterVector, AlphaGradient)> {
    if !batch.has_labels {
        return Err(Error::data("weight learning requires a labeled batch"));
    }
    let total = check_inputs(local, snapshots, weights)?;
    let agg = aggregate(local, snapshots, weights)?;
    let (value, g) = loss_and_gradient(spec, &agg, batch.features.view(), &batch.labels, kind)?;
    let g = g.as_slice();
    let g_dot_agg = dot(g, agg.as_slice());
    let partial = |m: &ParameterVector| (dot(g, m.as_slice()) - g_dot_agg) / total;
    let grad = AlphaGradient {
        self_grad: partial(local),
        neighbors: snapshots
            .iter()
            .map(|s| (s.source_edge, partial(&s.params)))
            .collect(),
    };
    Ok((value, agg, grad))
}

pub fn alpha_gradient(
    local: &ParameterVector,
    snapshots: &[ModelSnapshot],
    weights: &AggregationWeights,
    batch: &StreamBatch,
    spec: &ModelSpec,
    kind: LossKind,
) -> Result<AlphaGradient> {
    loss_and_alpha_gradient(local, snapshots, weights, batch, spec, kind).map(|(_, _, g)| g)
}

#[derive(Debug, Clone)]
pub struct LearnedAggregation {
    pub weights: AggregationWeights,
    pub params: ParameterVector,
    pub loss: f64,
    pub warm_start_loss: f64,
}

/// Runs `steps` optimizer steps on the weights, warm-started from
/// `warm_start`. The optimizer state is dense over `[self, snapshot sources…]`
/// in snapshot order. Returns the lowest-loss iterate seen, the warm start
/// included, so the result is never worse than the warm start on `batch`.
#[allow(clippy::too_many_arguments)]
pub fn learn_weights(
    local: &ParameterVector,
    snapshots: &[ModelSnapshot],
    warm_start: &AggregationWeights,
    batch: &StreamBatch,
    spec: &ModelSpec,
    kind: LossKind,
    steps: usize,
    alpha_optimizer: &mut OptimizerState,
) -> Result<LearnedAggregation> {
    let keys = sources(snapshots);
    let mut current = warm_start.restrict(&keys)?;
    if current.total() < MIN_WEIGHT_SUM {
        current.self_weight = 1.0;
    }
    let (first_loss, first_agg, mut grad) =
        loss_and_alpha_gradient(local, snapshots, &current, batch, spec, kind)?;
    let mut best = LearnedAggregation {
        weights: current.clone(),
        params: first_agg,
        loss: first_loss,
        warm_start_loss: first_loss,
    };
    if snapshots.is_empty() {
        best.params = local.clone();
        return Ok(best);
    }
    for _ in 0..steps {
        let dense = current.to_dense(&keys);
        let dense_grad: Vec<f64> = std::iter::once(grad.self_grad)
            .chain(keys.iter().map(|j| grad.neighbors[j]))
            .collect();
        let mut next = alpha_optimizer.step(&dense, &dense_grad)?;
        for w in next.iter_mut() {
            *w = w.max(0.0);
        }
        if next.iter().sum::<f64>() < MIN_WEIGHT_SUM {
            next[0] = 1.0;
        }
        current = AggregationWeights::from_dense(&next, &keys);
        let (value, agg, g) =
            loss_and_alpha_gradient(local, snapshots, &current, batch, spec, kind)?;
        if value < best.loss {
            best.weights = current.clone();
            best.params = agg;
            best.loss = value;
        }
        grad = g;
    }
    Ok(best)
}

/// Scales all entries, self included, to sum to one.
pub fn normalize(weights: &AggregationWeights) -> Result<AggregationWeights> {
    weights.validate()?;
    let total = weights.total();
    if total.is_nan() || total < MIN_WEIGHT_SUM {
        return Err(Error::DegenerateWeights {
            total,
            min: MIN_WEIGHT_SUM,
        });
    }
    Ok(AggregationWeights {
        self_weight: weights.self_weight / total,
        neighbors: weights
            .neighbors
            .iter()
            .map(|(&j, &w)| (j, w / total))
            .collect(),
    })
}

/// Optimizer moments for the aggregation weights, keyed by source so they
/// survive neighbors dropping out for a round or being replaced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaOptimizer {
    pub config: OptimizerConfig,
    pub step_count: u64,
    self_moments: (f64, f64),
    neighbor_moments: BTreeMap<EdgeId, (f64, f64)>,
}

impl AlphaOptimizer {
    pub fn new(config: OptimizerConfig) -> Self {
        AlphaOptimizer {
            config,
            step_count: 0,
            self_moments: (0.0, 0.0),
            neighbor_moments: BTreeMap::new(),
        }
    }

    /// Dense state over `[self, sources…]`; unseen sources start at zero.
    pub fn dense(&self, sources: &[EdgeId]) -> OptimizerState {
        let mut state = self.config.init(sources.len() + 1);
        state.step_count = self.step_count;
        if !state.first_moment.is_empty() {
            let moments = std::iter::once(self.self_moments).chain(
                sources
                    .iter()
                    .map(|j| self.neighbor_moments.get(j).copied().unwrap_or((0.0, 0.0))),
            );
            for (i, (m, v)) in moments.enumerate() {
                state.first_moment[i] = m;
                state.second_moment[i] = v;
            }
        }
        state
    }

    /// Writes back a dense state produced from [`AlphaOptimizer::dense`].
    pub fn absorb(&mut self, sources: &[EdgeId], state: &OptimizerState) {
        self.step_count = state.step_count;
        if state.first_moment.is_empty() {
            return;
        }
        self.self_moments = (state.first_moment[0], state.second_moment[0]);
        for (i, &j) in sources.iter().enumerate() {
            self.neighbor_moments
                .insert(j, (state.first_moment[i + 1], state.second_moment[i + 1]));
        }
    }

    /// Drops the moments of every source not in `keep`.
    pub fn retain(&mut self, keep: impl Fn(EdgeId) -> bool) {
        self.neighbor_moments.retain(|&j, _| keep(j));
    }
}
