//! Per-edge online loop: predict, buffer delayed feedback, learn.
//!
//! Every delivered labeled batch is one learning event. The event that brings
//! the event count to a multiple of `E` is an aggregation event: its batch is
//! handed to the [`Aggregator`], which for learned strategies spends it on
//! fitting the aggregation weights instead of training the model.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::aggregation::{
    aggregate, learn_weights, AggregationWeights, AlphaOptimizer, LearnedAggregation, ModelSnapshot,
};
use crate::datastream::StreamBatch;
use crate::error::{Error, Result};
use crate::model::{forward, loss_and_gradient, LossKind, ModelSpec, ParameterVector};
use crate::optim::{OptimizerConfig, OptimizerState};
use crate::EdgeId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EdgeSettings {
    /// Learning events between aggregations; `None` never aggregates.
    pub aggregate_every: Option<usize>,
    pub alpha_steps: usize,
    pub alpha_accumulate_batches: usize,
    pub delay_batches: usize,
}

impl Default for EdgeSettings {
    fn default() -> Self {
        EdgeSettings {
            aggregate_every: Some(20),
            alpha_steps: 10,
            alpha_accumulate_batches: 1,
            delay_batches: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRecord {
    pub edge_id: EdgeId,
    pub step: usize,
    pub predictions: Vec<f64>,
    pub labels: Vec<f64>,
    pub is_aggregation_step: bool,
}

#[derive(Debug, Clone)]
struct PendingFeedback {
    batch: StreamBatch,
    due_step: usize,
}

/// What the edge should do with the batch that triggered an aggregation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchUse {
    /// The batch was spent on learning aggregation weights.
    Consumed,
    /// The batch is still available for a model training step.
    Train,
}

/// Strategy hook invoked on every aggregation event.
pub trait Aggregator {
    fn aggregate(&mut self, edge: &mut EdgeState, batch: &StreamBatch) -> Result<BatchUse>;
}

/// Never touches the model; the batch goes to training.
pub struct NoAggregation;

impl Aggregator for NoAggregation {
    fn aggregate(&mut self, _edge: &mut EdgeState, _batch: &StreamBatch) -> Result<BatchUse> {
        Ok(BatchUse::Train)
    }
}

#[derive(Debug, Clone)]
pub struct EdgeState {
    pub edge_id: EdgeId,
    pub spec: ModelSpec,
    pub loss: LossKind,
    pub params: ParameterVector,
    pub model_optimizer: OptimizerState,
    pub agg_weights: AggregationWeights,
    pub alpha_optimizer: AlphaOptimizer,
    pub settings: EdgeSettings,
    /// Learning events performed so far.
    pub local_step: u64,
    pub aggregation_events: u64,
    /// Labeled examples delivered so far.
    pub samples_seen: u64,
    feedback_queue: VecDeque<PendingFeedback>,
    recent: VecDeque<StreamBatch>,
    enqueued: u64,
    dequeued: u64,
}

impl EdgeState {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        edge_id: EdgeId,
        spec: ModelSpec,
        loss: LossKind,
        params: ParameterVector,
        model_optimizer: OptimizerConfig,
        alpha_optimizer: OptimizerConfig,
        neighbors: &[EdgeId],
        settings: EdgeSettings,
    ) -> Self {
        let model_optimizer = model_optimizer.init(params.len());
        EdgeState {
            edge_id,
            spec,
            loss,
            params,
            model_optimizer,
            agg_weights: AggregationWeights::uniform(neighbors.iter().copied()),
            alpha_optimizer: AlphaOptimizer::new(alpha_optimizer),
            settings,
            local_step: 0,
            aggregation_events: 0,
            samples_seen: 0,
            feedback_queue: VecDeque::new(),
            recent: VecDeque::new(),
            enqueued: 0,
            dequeued: 0,
        }
    }

    pub fn aggregation_due(&self) -> bool {
        aggregation_due(self.local_step, self.settings.aggregate_every)
    }

    pub fn pending_feedback(&self) -> usize {
        self.feedback_queue.len()
    }

    /// `(enqueued, dequeued)` feedback counts over the edge's lifetime.
    pub fn feedback_counts(&self) -> (u64, u64) {
        (self.enqueued, self.dequeued)
    }

    pub fn snapshot(&self, produced_at: usize) -> ModelSnapshot {
        ModelSnapshot {
            source_edge: self.edge_id,
            params: self.params.clone(),
            produced_at,
            samples_seen: self.samples_seen,
        }
    }

    /// Predicts on `batch` with the current model, queues its labels to
    /// arrive `delay_batches` steps later, then processes every learning event
    /// that has come due at `step`.
    pub fn on_batch(
        &mut self,
        batch: StreamBatch,
        step: usize,
        aggregator: &mut dyn Aggregator,
    ) -> Result<PredictionRecord> {
        if batch.edge_id != self.edge_id {
            return Err(Error::Contract(format!(
                "edge {} received a batch for edge {}",
                self.edge_id, batch.edge_id
            )));
        }
        let predictions = forward(&self.spec, &self.params, batch.features.view())?;
        let mut record = PredictionRecord {
            edge_id: self.edge_id,
            step,
            predictions,
            labels: batch.labels.clone(),
            is_aggregation_step: false,
        };
        if batch.has_labels {
            self.feedback_queue.push_back(PendingFeedback {
                batch,
                due_step: step + self.settings.delay_batches,
            });
            self.enqueued += 1;
        }
        while self
            .feedback_queue
            .front()
            .is_some_and(|p| p.due_step <= step)
        {
            let pending = self.feedback_queue.pop_front().expect("front exists");
            self.dequeued += 1;
            if self.learning_event(pending.batch, aggregator)? {
                record.is_aggregation_step = true;
            }
        }
        Ok(record)
    }

    /// Returns whether the event was an aggregation.
    fn learning_event(
        &mut self,
        batch: StreamBatch,
        aggregator: &mut dyn Aggregator,
    ) -> Result<bool> {
        self.local_step += 1;
        self.samples_seen += batch.len() as u64;
        let keep = self.settings.alpha_accumulate_batches.max(1);
        if keep > 1 {
            self.recent.push_back(batch.clone());
            while self.recent.len() > keep {
                self.recent.pop_front();
            }
        }
        if !self.aggregation_due() {
            self.train(&batch)?;
            return Ok(false);
        }
        self.aggregation_events += 1;
        let use_ = if keep > 1 {
            let pooled: Vec<&StreamBatch> = self.recent.iter().collect();
            let pooled = StreamBatch::concat(&pooled)?;
            aggregator.aggregate(self, &pooled)?
        } else {
            aggregator.aggregate(self, &batch)?
        };
        if use_ == BatchUse::Train {
            self.train(&batch)?;
        }
        Ok(true)
    }

    /// One optimizer step on the mean batch loss.
    pub fn train(&mut self, batch: &StreamBatch) -> Result<()> {
        if batch.is_empty() {
            return Ok(());
        }
        let (_, grad) = loss_and_gradient(
            &self.spec,
            &self.params,
            batch.features.view(),
            &batch.labels,
            self.loss,
        )?;
        let next = self
            .model_optimizer
            .step(self.params.as_slice(), grad.as_slice())?;
        self.params = ParameterVector::new(next)?;
        Ok(())
    }

    /// Learned aggregation with the fetched `snapshots`. Neighbors missing
    /// from `snapshots` sit this round out but keep their stored weights.
    pub fn run_aggregation(
        &mut self,
        snapshots: &[ModelSnapshot],
        labeled_batch: &StreamBatch,
    ) -> Result<LearnedAggregation> {
        let keys: Vec<EdgeId> = snapshots.iter().map(|s| s.source_edge).collect();
        for &j in &keys {
            self.agg_weights.neighbors.entry(j).or_insert(0.0);
        }
        let mut dense = self.alpha_optimizer.dense(&keys);
        let learned = learn_weights(
            &self.params,
            snapshots,
            &self.agg_weights,
            labeled_batch,
            &self.spec,
            self.loss,
            self.settings.alpha_steps,
            &mut dense,
        )?;
        self.alpha_optimizer.absorb(&keys, &dense);
        self.agg_weights.self_weight = learned.weights.self_weight;
        for (&j, &w) in &learned.weights.neighbors {
            self.agg_weights.neighbors.insert(j, w);
        }
        self.params = learned.params.clone();
        Ok(learned)
    }

    /// Aggregation with externally fixed weights.
    pub fn apply_weights(
        &mut self,
        snapshots: &[ModelSnapshot],
        weights: &AggregationWeights,
    ) -> Result<()> {
        self.params = aggregate(&self.params, snapshots, weights)?;
        Ok(())
    }

    /// Switches to a new neighbor set: departed entries are dropped, newcomers
    /// start at weight zero with fresh optimizer moments.
    pub fn set_neighbors(&mut self, neighbors: &[EdgeId]) {
        self.agg_weights
            .neighbors
            .retain(|j, _| neighbors.contains(j));
        for &j in neighbors {
            self.agg_weights.neighbors.entry(j).or_insert(0.0);
        }
        self.alpha_optimizer.retain(|j| neighbors.contains(&j));
    }

    pub fn replace_weights(&mut self, weights: AggregationWeights) {
        self.alpha_optimizer
            .retain(|j| weights.neighbors.contains_key(&j));
        self.agg_weights = weights;
    }
}

pub fn aggregation_due(local_step: u64, every: Option<usize>) -> bool {
    match every {
        Some(e) if e > 0 => local_step > 0 && local_step.is_multiple_of(e as u64),
        _ => false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn edge(settings: EdgeSettings) -> EdgeState {
        EdgeState::new(
            EdgeId(0),
            ModelSpec::linear(1),
            LossKind::MeanSquaredError,
            ParameterVector::zeros(2),
            OptimizerConfig::sgd(0.1),
            OptimizerConfig::adam(0.001),
            &[],
            settings,
        )
    }

    fn batch(step: usize) -> StreamBatch {
        StreamBatch::new(EdgeId(0), step, array![[1.0]], vec![1.0]).unwrap()
    }

    struct Counting(usize);

    impl Aggregator for Counting {
        fn aggregate(&mut self, _: &mut EdgeState, _: &StreamBatch) -> Result<BatchUse> {
            self.0 += 1;
            Ok(BatchUse::Consumed)
        }
    }

    #[test]
    fn due_rule() {
        assert!(aggregation_due(20, Some(20)));
        assert!(!aggregation_due(19, Some(20)));
        assert!(!aggregation_due(0, Some(20)));
        assert!(aggregation_due(1, Some(1)));
        assert!(!aggregation_due(40, None));
    }

    #[test]
    fn zero_delay_predicts_before_training() {
        let mut e = edge(EdgeSettings {
            aggregate_every: None,
            ..Default::default()
        });
        let rec = e.on_batch(batch(0), 0, &mut NoAggregation).unwrap();
        assert_eq!(rec.predictions, vec![0.0]);
        assert_ne!(e.params, ParameterVector::zeros(2));
        assert_eq!(e.local_step, 1);
    }

    #[test]
    fn delayed_feedback_trains_later() {
        let mut e = edge(EdgeSettings {
            aggregate_every: None,
            delay_batches: 5,
            ..Default::default()
        });
        for t in 0..5 {
            e.on_batch(batch(t), t, &mut NoAggregation).unwrap();
            assert_eq!(e.local_step, 0);
            assert_eq!(e.params, ParameterVector::zeros(2));
        }
        e.on_batch(batch(5), 5, &mut NoAggregation).unwrap();
        assert_eq!(e.local_step, 1);
        assert_eq!(e.pending_feedback(), 5);
    }

    #[test]
    fn unlabeled_batches_are_not_queued() {
        let mut e = edge(EdgeSettings::default());
        let rec = e
            .on_batch(batch(0).without_labels(), 0, &mut NoAggregation)
            .unwrap();
        assert_eq!(rec.predictions.len(), 1);
        assert_eq!(e.pending_feedback(), 0);
        assert_eq!(e.local_step, 0);
    }

    #[test]
    fn every_event_aggregates_with_e_one() {
        let mut e = edge(EdgeSettings {
            aggregate_every: Some(1),
            ..Default::default()
        });
        let mut agg = Counting(0);
        for t in 0..7 {
            let rec = e.on_batch(batch(t), t, &mut agg).unwrap();
            assert!(rec.is_aggregation_step);
        }
        assert_eq!(agg.0, 7);
        assert_eq!(e.params, ParameterVector::zeros(2));
    }

    #[test]
    fn aggregation_count_is_floor_t_over_e() {
        for delay in [0, 3] {
            let mut e = edge(EdgeSettings {
                aggregate_every: Some(4),
                delay_batches: delay,
                ..Default::default()
            });
            let mut agg = Counting(0);
            for t in 0..23 {
                e.on_batch(batch(t), t, &mut agg).unwrap();
            }
            assert_eq!(agg.0 as u64, e.local_step / 4);
            let (enq, deq) = e.feedback_counts();
            assert_eq!(enq, 23);
            assert_eq!(deq + e.pending_feedback() as u64, enq);
        }
    }

    #[test]
    fn self_only_aggregation_keeps_params() {
        let mut e = edge(EdgeSettings::default());
        e.params = ParameterVector::new(vec![0.5, 0.25]).unwrap();
        let before = e.params.clone();
        e.run_aggregation(&[], &batch(0)).unwrap();
        assert_eq!(e.params, before);
    }

    #[test]
    fn absent_neighbor_keeps_weight() {
        let mut e = edge(EdgeSettings::default());
        e.set_neighbors(&[EdgeId(1), EdgeId(2)]);
        e.agg_weights.neighbors.insert(EdgeId(2), 0.7);
        let snap = ModelSnapshot {
            source_edge: EdgeId(1),
            params: ParameterVector::new(vec![1.0, 0.0]).unwrap(),
            produced_at: 0,
            samples_seen: 0,
        };
        e.run_aggregation(&[snap], &batch(0)).unwrap();
        assert_eq!(e.agg_weights.get(EdgeId(2)), Some(0.7));
    }
}
