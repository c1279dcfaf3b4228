//! Deterministic lockstep simulation of the edge network.
//!
//! Logical time is the batch index. On every tick each edge predicts on its
//! batch and processes the feedback that has come due; aggregation events
//! fetch neighbor snapshots from the previous tick's store, delayed by
//! `async_rounds · E` ticks and filtered by the availability schedule. After
//! the tick every edge publishes its model, and if any edge aggregated the
//! tick counts as one aggregation round, after which greedy peer selection
//! runs for the `alphaedge` strategy.
//!
//! Randomness comes from named sub-streams of the master seed, one per
//! consumer and edge, so per-edge work can run on a worker pool and still
//! produce bit-identical results.

use std::collections::VecDeque;

use rand::seq::index::sample;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregation::{normalize, AggregationWeights, ModelSnapshot};
use crate::datastream::{flip_labels, label_range, StreamBatch, Task};
use crate::edge::{Aggregator, BatchUse, EdgeSettings, EdgeState, PredictionRecord};
use crate::error::{Error, Result};
use crate::metrics::Metric;
use crate::model::{LossKind, ModelSpec, OutputKind};
use crate::optim::OptimizerConfig;
use crate::peer::{init_topology, random_neighbors, selection_round, Topology};
use crate::rng::{substream, ADVERSARY, INIT, SCHEDULE, STRATEGY};
use crate::EdgeId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    /// Learned weights and greedy peer selection.
    AlphaEdge,
    /// Independent online learning, no communication.
    NoAgg,
    /// Weights proportional to each source's labeled example count.
    FedWeight,
    /// All weights equal.
    UniWeight,
    /// Learned weights, neighbors redrawn at random at every aggregation.
    RandPs,
    /// Learned weights over every other edge.
    NoPs,
}

impl Strategy {
    pub const ALL: [Strategy; 6] = [
        Strategy::NoAgg,
        Strategy::FedWeight,
        Strategy::UniWeight,
        Strategy::RandPs,
        Strategy::NoPs,
        Strategy::AlphaEdge,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::AlphaEdge => "alphaedge",
            Strategy::NoAgg => "noagg",
            Strategy::FedWeight => "fedweight",
            Strategy::UniWeight => "uniweight",
            Strategy::RandPs => "randps",
            Strategy::NoPs => "nops",
        }
    }

    pub fn learns_weights(self) -> bool {
        matches!(
            self,
            Strategy::AlphaEdge | Strategy::RandPs | Strategy::NoPs
        )
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::config(format!("unknown strategy `{s}`")))
    }
}

fn default_alpha_steps() -> usize {
    10
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub n: usize,
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "K_prime", default = "one")]
    pub k_prime: usize,
    #[serde(default = "one")]
    pub m: usize,
    #[serde(rename = "E")]
    pub e: usize,
    #[serde(rename = "B")]
    pub b: usize,
    #[serde(default = "default_alpha_steps")]
    pub alpha_steps: usize,
    #[serde(default)]
    pub delay_batches: usize,
    #[serde(default)]
    pub async_rounds: usize,
    #[serde(default)]
    pub drop_fraction: f64,
    #[serde(default)]
    pub adversarial_fraction: f64,
    pub strategy: Strategy,
    pub model: ModelSpec,
    pub loss: LossKind,
    pub metric: Metric,
    #[serde(default)]
    pub seed: u64,
    /// Ticks to simulate; the full stream length when omitted.
    #[serde(default)]
    pub total_batches: Option<usize>,
    #[serde(default = "one")]
    pub alpha_accumulate_batches: usize,
    #[serde(default)]
    pub model_optimizer: OptimizerConfig,
    #[serde(default)]
    pub alpha_optimizer: OptimizerConfig,
    /// Worker threads for per-edge work within a tick.
    #[serde(default = "one")]
    pub workers: usize,
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n", self.n),
            ("E", self.e),
            ("B", self.b),
            ("alpha_steps", self.alpha_steps),
            ("alpha_accumulate_batches", self.alpha_accumulate_batches),
            ("m", self.m),
            ("workers", self.workers),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        if self.total_batches == Some(0) {
            return Err(Error::config("total_batches must be positive"));
        }
        if !(0.0..1.0).contains(&self.drop_fraction) {
            return Err(Error::config("drop_fraction must lie in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.adversarial_fraction) {
            return Err(Error::config("adversarial_fraction must lie in [0, 1)"));
        }
        if self.n >= 2 && self.strategy != Strategy::NoPs && self.strategy != Strategy::NoAgg {
            if self.k == 0 {
                return Err(Error::config("K must be positive"));
            }
            if self.k >= self.n {
                return Err(Error::config(format!(
                    "K = {} needs more than {} edges",
                    self.k, self.n
                )));
            }
        }
        if self.strategy == Strategy::AlphaEdge && (self.k_prime == 0 || self.k_prime > self.k) {
            return Err(Error::config("K_prime must lie in [1, K]"));
        }
        self.model.validate()?;
        self.model_optimizer.validate()?;
        self.alpha_optimizer.validate()?;
        if self.metric == Metric::Auc && self.model.output != OutputKind::BinaryProbability {
            return Err(Error::config("auc needs a binary-probability model"));
        }
        Ok(())
    }

    pub fn task(&self) -> Task {
        match self.model.output {
            OutputKind::BinaryProbability => Task::Binary,
            OutputKind::ScalarRegression => Task::Regression,
        }
    }

    /// Neighbors per edge once clamped to the network size.
    pub fn degree(&self) -> usize {
        match self.strategy {
            Strategy::NoAgg => 0,
            Strategy::NoPs => self.n.saturating_sub(1),
            _ => self.k.min(self.n.saturating_sub(1)),
        }
    }

    /// Ticks by which fetched snapshots lag the current step.
    pub fn staleness(&self) -> usize {
        self.async_rounds * self.e
    }
}

/// Per-edge unavailable intervals, each one aggregation period long.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AvailabilitySchedule {
    pub interval: usize,
    pub down: Vec<Vec<bool>>,
}

impl AvailabilitySchedule {
    pub fn always(n: usize, interval: usize) -> Self {
        AvailabilitySchedule {
            interval: interval.max(1),
            down: vec![Vec::new(); n],
        }
    }

    pub fn is_available(&self, edge: EdgeId, step: usize) -> bool {
        !self.down[edge.0]
            .get(step / self.interval)
            .copied()
            .unwrap_or(false)
    }

    pub fn unavailable_fraction(&self, edge: EdgeId) -> f64 {
        let d = &self.down[edge.0];
        if d.is_empty() {
            0.0
        } else {
            d.iter().filter(|&&x| x).count() as f64 / d.len() as f64
        }
    }
}

/// Marks `round(drop_fraction · intervals)` randomly chosen intervals of
/// every edge as down.
pub fn build_schedule(config: &SimConfig, horizon: usize) -> AvailabilitySchedule {
    let interval = config.e.max(1);
    if config.drop_fraction <= 0.0 {
        return AvailabilitySchedule::always(config.n, interval);
    }
    let intervals = horizon.div_ceil(interval);
    let down_count = ((config.drop_fraction * intervals as f64).round() as usize).min(intervals);
    let down = (0..config.n)
        .map(|edge| {
            let mut rng = substream(config.seed, SCHEDULE, edge as u64);
            let mut marks = vec![false; intervals];
            for i in sample(&mut rng, intervals, down_count) {
                marks[i] = true;
            }
            marks
        })
        .collect();
    AvailabilitySchedule { interval, down }
}

/// Published snapshots of every edge, trimmed to what staleness can reach.
#[derive(Debug, Clone)]
pub struct SnapshotStore {
    history: Vec<VecDeque<ModelSnapshot>>,
    lag: usize,
}

impl SnapshotStore {
    pub fn new(initial: Vec<ModelSnapshot>, lag: usize) -> Self {
        SnapshotStore {
            history: initial.into_iter().map(|s| VecDeque::from([s])).collect(),
            lag,
        }
    }

    pub fn publish(&mut self, snapshot: ModelSnapshot) {
        let at = snapshot.produced_at;
        let h = &mut self.history[snapshot.source_edge.0];
        h.push_back(snapshot);
        let horizon = at.saturating_sub(self.lag);
        while h.len() >= 2 && h[1].produced_at <= horizon {
            h.pop_front();
        }
    }

    /// Latest snapshot of `edge` produced at or before `step`.
    pub fn at_or_before(&self, edge: EdgeId, step: usize) -> &ModelSnapshot {
        let h = &self.history[edge.0];
        h.iter()
            .rev()
            .find(|s| s.produced_at <= step)
            .unwrap_or_else(|| h.front().expect("store never empties"))
    }
}

#[derive(Debug, Clone, Default)]
pub struct FetchResult {
    pub snapshots: Vec<ModelSnapshot>,
    pub unavailable: usize,
}

/// Snapshots of the available `neighbors` as of `step − async_rounds · E`.
pub fn fetch_models(
    step: usize,
    neighbors: &[EdgeId],
    store: &SnapshotStore,
    config: &SimConfig,
    schedule: &AvailabilitySchedule,
) -> FetchResult {
    let target = step.saturating_sub(config.staleness());
    let mut out = FetchResult::default();
    for &j in neighbors {
        if schedule.is_available(j, step) {
            out.snapshots.push(store.at_or_before(j, target).clone());
        } else {
            out.unavailable += 1;
        }
    }
    out
}

/// Fixed baseline weights; `None` for strategies that learn them.
pub fn strategy_weights(
    strategy: Strategy,
    edge: &EdgeState,
    snapshots: &[ModelSnapshot],
) -> Option<AggregationWeights> {
    match strategy {
        Strategy::UniWeight => Some(AggregationWeights::uniform(
            snapshots.iter().map(|s| s.source_edge),
        )),
        Strategy::FedWeight => Some(AggregationWeights {
            self_weight: edge.samples_seen as f64,
            neighbors: snapshots
                .iter()
                .map(|s| (s.source_edge, s.samples_seen as f64))
                .collect(),
        }),
        _ => None,
    }
}

struct TickAggregator<'a> {
    config: &'a SimConfig,
    topology: &'a Topology,
    store: &'a SnapshotStore,
    schedule: &'a AvailabilitySchedule,
    rng: &'a mut ChaCha8Rng,
    step: usize,
    stats: TickStats,
}

#[derive(Debug, Default)]
struct TickStats {
    fetched: u64,
    unavailable: u64,
    max_staleness: usize,
    new_neighbors: Option<Vec<EdgeId>>,
}

impl Aggregator for TickAggregator<'_> {
    fn aggregate(&mut self, edge: &mut EdgeState, batch: &StreamBatch) -> Result<BatchUse> {
        let strategy = self.config.strategy;
        if strategy == Strategy::NoAgg {
            return Ok(BatchUse::Train);
        }
        let neighbors = if strategy == Strategy::RandPs {
            let drawn =
                random_neighbors(self.config.n, self.config.degree(), edge.edge_id, self.rng);
            edge.set_neighbors(&drawn);
            self.stats.new_neighbors = Some(drawn.clone());
            drawn
        } else {
            self.topology.neighbors(edge.edge_id).to_vec()
        };
        let fetched = fetch_models(
            self.step,
            &neighbors,
            self.store,
            self.config,
            self.schedule,
        );
        self.stats.fetched += fetched.snapshots.len() as u64;
        self.stats.unavailable += fetched.unavailable as u64;
        for s in &fetched.snapshots {
            self.stats.max_staleness = self.stats.max_staleness.max(self.step - s.produced_at);
        }
        match strategy_weights(strategy, edge, &fetched.snapshots) {
            Some(weights) => {
                edge.apply_weights(&fetched.snapshots, &weights)?;
                Ok(BatchUse::Train)
            }
            None => {
                edge.run_aggregation(&fetched.snapshots, batch)?;
                Ok(BatchUse::Consumed)
            }
        }
    }
}

/// Weights and topology of one aggregation round, before peer selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundTrace {
    pub round: u64,
    pub step: usize,
    pub topology: Vec<Vec<EdgeId>>,
    /// Normalized weights of every edge.
    pub weights: Vec<AggregationWeights>,
}

#[derive(Debug, Clone)]
pub struct SimulationResult {
    pub config: SimConfig,
    /// Prediction records of every edge, one per tick.
    pub records: Vec<Vec<PredictionRecord>>,
    pub rounds: Vec<RoundTrace>,
    pub adversarial: Vec<EdgeId>,
    pub final_topology: Topology,
    pub final_weights: Vec<AggregationWeights>,
    pub final_params: Vec<crate::model::ParameterVector>,
    pub aggregation_events: Vec<u64>,
    /// Snapshots delivered to aggregating edges.
    pub messages: u64,
    /// Fetches that failed because the neighbor was down.
    pub unavailable_fetches: u64,
    pub max_staleness: usize,
    pub schedule: AvailabilitySchedule,
}

/// Edges turned adversarial for this configuration.
pub fn choose_adversaries(config: &SimConfig) -> Vec<EdgeId> {
    if config.adversarial_fraction <= 0.0 {
        return Vec::new();
    }
    let count = ((config.adversarial_fraction * config.n as f64).ceil() as usize).min(config.n);
    let mut rng = substream(config.seed, ADVERSARY, 0);
    let mut picked: Vec<EdgeId> = sample(&mut rng, config.n, count)
        .into_iter()
        .map(EdgeId)
        .collect();
    picked.sort_unstable();
    picked
}

fn initial_topology(config: &SimConfig) -> Result<Topology> {
    if config.n < 2 || config.strategy == Strategy::NoAgg {
        return Ok(Topology {
            n: config.n,
            k: 0,
            neighbors: vec![Vec::new(); config.n],
            version: 0,
        });
    }
    if config.strategy == Strategy::NoPs {
        return Ok(Topology::complete(config.n));
    }
    init_topology(config.n, config.k, config.seed)
}

pub fn run_simulation(
    config: &SimConfig,
    streams: Vec<Vec<StreamBatch>>,
) -> Result<SimulationResult> {
    config.validate()?;
    if streams.len() != config.n {
        return Err(Error::config(format!(
            "config has n = {} but {} streams were supplied",
            config.n,
            streams.len()
        )));
    }
    let shortest = streams.iter().map(Vec::len).min().unwrap_or(0);
    let horizon = config.total_batches.unwrap_or(shortest);
    if horizon == 0 || shortest < horizon {
        return Err(Error::config(format!(
            "streams hold {shortest} batches per edge, {horizon} requested"
        )));
    }
    for (i, s) in streams.iter().enumerate() {
        if let Some(b) = s
            .iter()
            .find(|b| b.features.ncols() != config.model.input_dim)
        {
            return Err(Error::data(format!(
                "edge {i} batch {} has {} features, model expects {}",
                b.step,
                b.features.ncols(),
                config.model.input_dim
            )));
        }
    }

    let adversarial = choose_adversaries(config);
    let mut streams = streams;
    if !adversarial.is_empty() {
        let (y_min, y_max) = label_range(&streams).unwrap_or((0.0, 1.0));
        for &a in &adversarial {
            streams[a.0] = flip_labels(&streams[a.0], config.task(), y_min, y_max)?;
        }
    }

    let mut topology = initial_topology(config)?;
    let init = config
        .model
        .init_params(&mut substream(config.seed, INIT, 0));
    let settings = EdgeSettings {
        aggregate_every: (config.strategy != Strategy::NoAgg && config.n >= 2).then_some(config.e),
        alpha_steps: config.alpha_steps,
        alpha_accumulate_batches: config.alpha_accumulate_batches,
        delay_batches: config.delay_batches,
    };
    let mut edges: Vec<EdgeState> = (0..config.n)
        .map(|i| {
            EdgeState::new(
                EdgeId(i),
                config.model.clone(),
                config.loss,
                init.clone(),
                config.model_optimizer,
                config.alpha_optimizer,
                topology.neighbors(EdgeId(i)),
                settings,
            )
        })
        .collect();
    let mut rngs: Vec<ChaCha8Rng> = (0..config.n)
        .map(|i| substream(config.seed, STRATEGY, i as u64))
        .collect();
    let schedule = build_schedule(config, horizon);
    let mut store = SnapshotStore::new(
        edges.iter().map(|e| e.snapshot(0)).collect(),
        config.staleness(),
    );
    let mut inputs: Vec<std::vec::IntoIter<StreamBatch>> =
        streams.into_iter().map(|s| s.into_iter()).collect();

    let pool = if config.workers > 1 {
        Some(
            rayon::ThreadPoolBuilder::new()
                .num_threads(config.workers)
                .build()
                .map_err(|e| Error::config(format!("worker pool: {e}")))?,
        )
    } else {
        None
    };

    let mut records: Vec<Vec<PredictionRecord>> =
        (0..config.n).map(|_| Vec::with_capacity(horizon)).collect();
    let mut rounds = Vec::new();
    let mut round: u64 = 0;
    let mut messages = 0;
    let mut unavailable_fetches = 0;
    let mut max_staleness = 0;

    for step in 0..horizon {
        let batches: Vec<StreamBatch> = inputs
            .iter_mut()
            .map(|it| it.next().expect("horizon checked"))
            .collect();
        let tick = |((edge, rng), batch): ((&mut EdgeState, &mut ChaCha8Rng), StreamBatch)| {
            let mut agg = TickAggregator {
                config,
                topology: &topology,
                store: &store,
                schedule: &schedule,
                rng,
                step,
                stats: TickStats::default(),
            };
            let record = edge.on_batch(batch, step, &mut agg)?;
            Ok((record, agg.stats))
        };
        let outcomes: Vec<Result<(PredictionRecord, TickStats)>> = match &pool {
            Some(pool) => pool.install(|| {
                edges
                    .par_iter_mut()
                    .zip(rngs.par_iter_mut())
                    .zip(batches.into_par_iter())
                    .map(tick)
                    .collect()
            }),
            None => edges
                .iter_mut()
                .zip(rngs.iter_mut())
                .zip(batches)
                .map(tick)
                .collect(),
        };

        let mut aggregated = false;
        for (i, outcome) in outcomes.into_iter().enumerate() {
            let (record, stats) = outcome?;
            aggregated |= record.is_aggregation_step;
            records[i].push(record);
            messages += stats.fetched;
            unavailable_fetches += stats.unavailable;
            max_staleness = max_staleness.max(stats.max_staleness);
            if let Some(list) = stats.new_neighbors {
                topology.set_neighbors(EdgeId(i), list);
            }
        }
        for edge in &edges {
            store.publish(edge.snapshot(step + 1));
        }

        if aggregated {
            round += 1;
            rounds.push(RoundTrace {
                round,
                step,
                topology: topology.neighbors.clone(),
                weights: edges
                    .iter()
                    .map(|e| normalize(&e.agg_weights))
                    .collect::<Result<_>>()?,
            });
            if config.strategy == Strategy::AlphaEdge && config.n >= 2 {
                let weights: Vec<AggregationWeights> =
                    edges.iter().map(|e| e.agg_weights.clone()).collect();
                let (next, next_weights) =
                    selection_round(&topology, &weights, round, config.m as u64, config.k_prime)?;
                topology = next;
                for (edge, w) in edges.iter_mut().zip(next_weights) {
                    edge.replace_weights(w);
                }
            }
        }
    }

    Ok(SimulationResult {
        config: config.clone(),
        records,
        rounds,
        adversarial,
        final_topology: topology,
        final_weights: edges.iter().map(|e| e.agg_weights.clone()).collect(),
        final_params: edges.iter().map(|e| e.params.clone()).collect(),
        aggregation_events: edges.iter().map(|e| e.aggregation_events).collect(),
        messages,
        unavailable_fetches,
        max_staleness,
        schedule,
    })
}
