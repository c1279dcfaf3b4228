//! Prequential scores.

use serde::{Deserialize, Serialize};

use crate::edge::PredictionRecord;
use crate::error::{Error, Result};
use crate::EdgeId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Metric {
    Auc,
    OneMinusSmape,
}

/// Area under the ROC curve in Mann–Whitney form, ties counting one half.
/// Returns `None` when the labels hold a single class.
pub fn auc(scores: &[f64], labels: &[f64]) -> Result<Option<f64>> {
    if scores.len() != labels.len() {
        return Err(Error::shape(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let mut pairs: Vec<(f64, bool)> = Vec::with_capacity(scores.len());
    for (&s, &y) in scores.iter().zip(labels) {
        let positive = if y == 1.0 {
            true
        } else if y == 0.0 {
            false
        } else {
            return Err(Error::data(format!("AUC label {y} is not 0 or 1")));
        };
        pairs.push((s, positive));
    }
    let n_pos = pairs.iter().filter(|p| p.1).count();
    let n_neg = pairs.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Ok(None);
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    // Sum of midranks of the positives.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < pairs.len() {
        let mut j = i;
        while j + 1 < pairs.len() && pairs[j + 1].0 == pairs[i].0 {
            j += 1;
        }
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += midrank * pairs[i..=j].iter().filter(|p| p.1).count() as f64;
        i = j + 1;
    }
    let p = n_pos as f64;
    let u = rank_sum - p * (p + 1.0) / 2.0;
    Ok(Some(u / (p * n_neg as f64)))
}

/// `1 − mean |ŷ − y| / (|ŷ| + |y|)`; points where both are zero count as exact.
pub fn one_minus_smape(predictions: &[f64], labels: &[f64]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::shape(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if predictions.is_empty() {
        return Ok(1.0);
    }
    let total: f64 = predictions
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let denom = p.abs() + y.abs();
            if denom == 0.0 {
                0.0
            } else {
                (p - y).abs() / denom
            }
        })
        .sum();
    Ok(1.0 - total / predictions.len() as f64)
}

pub fn score(metric: Metric, predictions: &[f64], labels: &[f64]) -> Result<Option<f64>> {
    match metric {
        Metric::Auc => auc(predictions, labels),
        Metric::OneMinusSmape => one_minus_smape(predictions, labels).map(Some),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchScore {
    pub step: usize,
    /// `None` when the batch is unlabeled or single-class under AUC.
    pub value: Option<f64>,
    pub batch_size: usize,
    pub is_aggregation_step: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSeries {
    pub edge_id: EdgeId,
    pub batches: Vec<BatchScore>,
    /// Size-weighted mean over every scored batch.
    pub cumulative_mean: Option<f64>,
    /// Size-weighted mean over the last `window` scored batches.
    pub window_mean: Option<f64>,
    pub window: usize,
    /// Batches skipped because they had no defined score.
    pub skipped: usize,
}

impl MetricSeries {
    pub fn from_records(
        edge_id: EdgeId,
        records: &[PredictionRecord],
        metric: Metric,
        window: usize,
    ) -> Result<Self> {
        let batches = records
            .iter()
            .map(|r| {
                let value = if r.labels.is_empty() {
                    None
                } else {
                    score(metric, &r.predictions, &r.labels)?
                };
                Ok(BatchScore {
                    step: r.step,
                    value,
                    batch_size: r.predictions.len(),
                    is_aggregation_step: r.is_aggregation_step,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let scored: Vec<(f64, usize)> = batches
            .iter()
            .filter_map(|b| b.value.map(|v| (v, b.batch_size)))
            .collect();
        let skipped = batches.len() - scored.len();
        let window = window.max(1);
        let tail = &scored[scored.len().saturating_sub(window)..];
        Ok(MetricSeries {
            edge_id,
            cumulative_mean: weighted_mean(&scored),
            window_mean: weighted_mean(tail),
            window,
            batches,
            skipped,
        })
    }

    /// Total examples that contributed to the cumulative mean.
    pub fn scored_examples(&self) -> usize {
        self.batches
            .iter()
            .filter(|b| b.value.is_some())
            .map(|b| b.batch_size)
            .sum()
    }
}

pub fn weighted_mean(values: &[(f64, usize)]) -> Option<f64> {
    let weight: usize = values.iter().map(|v| v.1).sum();
    if weight == 0 {
        return None;
    }
    Some(values.iter().map(|&(v, w)| v * w as f64).sum::<f64>() / weight as f64)
}

/// Size-weighted mean over several series, i.e. over all their scored batches.
pub fn overall_mean<'a>(series: impl IntoIterator<Item = &'a MetricSeries>) -> Option<f64> {
    let parts: Vec<(f64, usize)> = series
        .into_iter()
        .filter_map(|s| s.cumulative_mean.map(|m| (m, s.scored_examples())))
        .collect();
    weighted_mean(&parts)
}
