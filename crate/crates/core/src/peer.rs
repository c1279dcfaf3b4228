//! Directed K-neighbor topology and greedy two-hop peer replacement.
//!
//! Each edge scores every unconnected two-hop peer `k` by
//! `Σ_j α_ij · α_jk` over its neighbors `j` that list `k`, using weights
//! normalized with self included. Every `m` aggregation rounds each edge
//! swaps its `K'` lowest-weight neighbors for the best-scoring candidates.
//! All edges score against the same pre-round snapshot and are updated
//! together; ties are broken by ascending edge id throughout.

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::aggregation::AggregationWeights;
use crate::error::{Error, Result};
use crate::rng::{substream, TOPOLOGY};
use crate::EdgeId;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Topology {
    pub n: usize,
    pub k: usize,
    /// Ascending neighbor ids of every edge.
    pub neighbors: Vec<Vec<EdgeId>>,
    pub version: u64,
}

impl Topology {
    /// Every edge connected to every other edge.
    pub fn complete(n: usize) -> Self {
        Topology {
            n,
            k: n.saturating_sub(1),
            neighbors: (0..n)
                .map(|i| (0..n).filter(|&j| j != i).map(EdgeId).collect())
                .collect(),
            version: 0,
        }
    }

    pub fn neighbors(&self, edge: EdgeId) -> &[EdgeId] {
        &self.neighbors[edge.0]
    }

    pub fn is_neighbor(&self, edge: EdgeId, other: EdgeId) -> bool {
        self.neighbors[edge.0].binary_search(&other).is_ok()
    }

    pub fn set_neighbors(&mut self, edge: EdgeId, mut neighbors: Vec<EdgeId>) {
        neighbors.sort_unstable();
        self.neighbors[edge.0] = neighbors;
    }

    /// Checks the structural invariants.
    pub fn validate(&self) -> Result<()> {
        let degree = self.k.min(self.n.saturating_sub(1));
        if self.neighbors.len() != self.n {
            return Err(Error::Contract(
                "topology has the wrong number of edges".into(),
            ));
        }
        for (i, list) in self.neighbors.iter().enumerate() {
            if list.len() != degree {
                return Err(Error::Contract(format!(
                    "edge {i} has {} neighbors, expected {degree}",
                    list.len()
                )));
            }
            if list.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::Contract(format!(
                    "edge {i} neighbor list not strictly ascending"
                )));
            }
            if list.iter().any(|j| j.0 == i || j.0 >= self.n) {
                return Err(Error::Contract(format!("edge {i} has an invalid neighbor")));
            }
        }
        Ok(())
    }
}

/// Uniformly samples `min(K, n−1)` distinct non-self neighbors per edge.
pub fn init_topology(n: usize, k: usize, seed: u64) -> Result<Topology> {
    if n < 2 {
        return Err(Error::config("a topology needs at least two edges"));
    }
    let degree = k.min(n - 1);
    let neighbors = (0..n)
        .map(|i| {
            random_neighbors(
                n,
                degree,
                EdgeId(i),
                &mut substream(seed, TOPOLOGY, i as u64),
            )
        })
        .collect();
    Ok(Topology {
        n,
        k,
        neighbors,
        version: 0,
    })
}

/// `degree` distinct uniformly random peers of `edge`, ascending.
pub fn random_neighbors<R: rand::Rng + ?Sized>(
    n: usize,
    degree: usize,
    edge: EdgeId,
    rng: &mut R,
) -> Vec<EdgeId> {
    // Sample from the n−1 other ids, then skip over `edge`.
    let mut picked: Vec<EdgeId> = sample(rng, n - 1, degree)
        .into_iter()
        .map(|j| EdgeId(if j >= edge.0 { j + 1 } else { j }))
        .collect();
    picked.sort_unstable();
    picked
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CandidateScore {
    pub candidate: EdgeId,
    pub score: f64,
}

fn require_normalized(weights: &AggregationWeights, edge: EdgeId) -> Result<()> {
    if !weights.is_normalized() {
        return Err(Error::Contract(format!(
            "weights of edge {edge} sum to {} instead of 1",
            weights.total()
        )));
    }
    Ok(())
}

/// Scores every unconnected two-hop peer of `edge`, best first.
pub fn two_hop_scores(
    topology: &Topology,
    normalized_weights: &[AggregationWeights],
    edge: EdgeId,
) -> Result<Vec<CandidateScore>> {
    if normalized_weights.len() != topology.n {
        return Err(Error::shape(format!(
            "{} weight vectors for {} edges",
            normalized_weights.len(),
            topology.n
        )));
    }
    let own = &normalized_weights[edge.0];
    require_normalized(own, edge)?;
    let mut scores = vec![None::<f64>; topology.n];
    for &j in topology.neighbors(edge) {
        let theirs = &normalized_weights[j.0];
        require_normalized(theirs, j)?;
        let via = own.get(j).unwrap_or(0.0);
        for &k in topology.neighbors(j) {
            if k == edge || topology.is_neighbor(edge, k) {
                continue;
            }
            let slot = scores[k.0].get_or_insert(0.0);
            *slot += via * theirs.get(k).unwrap_or(0.0);
        }
    }
    let mut out: Vec<CandidateScore> = scores
        .into_iter()
        .enumerate()
        .filter_map(|(k, s)| {
            s.map(|score| CandidateScore {
                candidate: EdgeId(k),
                score,
            })
        })
        .collect();
    out.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then_with(|| a.candidate.cmp(&b.candidate))
    });
    Ok(out)
}

/// New neighbor list and weights of one edge after greedy replacement.
fn replace_neighbors(
    current: &[EdgeId],
    weights: &AggregationWeights,
    candidates: &[CandidateScore],
    k_prime: usize,
) -> (Vec<EdgeId>, AggregationWeights) {
    let incoming: Vec<EdgeId> = candidates
        .iter()
        .filter(|c| c.score > 0.0 && !current.contains(&c.candidate))
        .take(k_prime)
        .map(|c| c.candidate)
        .collect();
    if incoming.is_empty() {
        return (current.to_vec(), weights.clone());
    }
    let mut by_weight: Vec<EdgeId> = current.to_vec();
    by_weight.sort_by(|a, b| {
        let wa = weights.get(*a).unwrap_or(0.0);
        let wb = weights.get(*b).unwrap_or(0.0);
        wa.total_cmp(&wb).then_with(|| a.cmp(b))
    });
    let outgoing = &by_weight[..incoming.len().min(by_weight.len())];
    let incoming = &incoming[..outgoing.len()];

    let mut next: Vec<EdgeId> = current
        .iter()
        .copied()
        .filter(|j| !outgoing.contains(j))
        .chain(incoming.iter().copied())
        .collect();
    next.sort_unstable();

    let mut new_weights = weights.clone();
    for j in outgoing {
        new_weights.neighbors.remove(j);
    }
    for &j in incoming {
        new_weights.neighbors.insert(j, 0.0);
    }
    (next, new_weights)
}

/// Replaces up to `k_prime` of `edge`'s lowest-weight neighbors with the top
/// positively scored candidates. Replaced entries are dropped from the weights
/// and newcomers start at weight zero.
pub fn update_neighbors(
    topology: &Topology,
    edge: EdgeId,
    weights: &AggregationWeights,
    candidates: &[CandidateScore],
    k_prime: usize,
) -> (Topology, AggregationWeights) {
    let (list, new_weights) =
        replace_neighbors(topology.neighbors(edge), weights, candidates, k_prime);
    let mut next = topology.clone();
    next.neighbors[edge.0] = list;
    next.version += 1;
    (next, new_weights)
}

/// One greedy selection round over all edges. Runs only when `round` is a
/// multiple of `m`; otherwise returns the inputs unchanged.
pub fn selection_round(
    topology: &Topology,
    all_weights: &[AggregationWeights],
    round: u64,
    m: u64,
    k_prime: usize,
) -> Result<(Topology, Vec<AggregationWeights>)> {
    if m == 0 || !round.is_multiple_of(m) {
        return Ok((topology.clone(), all_weights.to_vec()));
    }
    let normalized = all_weights
        .iter()
        .map(crate::aggregation::normalize)
        .collect::<Result<Vec<_>>>()?;
    let mut next = topology.clone();
    let mut next_weights = Vec::with_capacity(all_weights.len());
    for (i, weights) in all_weights.iter().enumerate() {
        let edge = EdgeId(i);
        let candidates = two_hop_scores(topology, &normalized, edge)?;
        let (list, w) = replace_neighbors(topology.neighbors(edge), weights, &candidates, k_prime);
        next.neighbors[i] = list;
        next_weights.push(w);
    }
    next.version += 1;
    Ok((next, next_weights))
}
