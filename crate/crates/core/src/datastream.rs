//! Per-edge batch streams: clustered synthetic generators with optional
//! concept drift, timestamped CSV ingestion and the adversarial label flip.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::Write;
use std::path::Path;

use ndarray::{s, Array2};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{substream, DATA};
use crate::EdgeId;

#[derive(Debug, Clone, PartialEq)]
pub struct StreamBatch {
    pub edge_id: EdgeId,
    pub step: usize,
    /// `rows × input_dim`.
    pub features: Array2<f64>,
    pub labels: Vec<f64>,
    /// Arrival time of every row; non-decreasing.
    pub timestamps: Vec<f64>,
    pub has_labels: bool,
}

impl StreamBatch {
    pub fn new(
        edge_id: EdgeId,
        step: usize,
        features: Array2<f64>,
        labels: Vec<f64>,
    ) -> Result<Self> {
        if features.nrows() != labels.len() {
            return Err(Error::shape(format!(
                "{} feature rows for {} labels",
                features.nrows(),
                labels.len()
            )));
        }
        if features.iter().chain(&labels).any(|v| !v.is_finite()) {
            return Err(Error::data(format!(
                "edge {edge_id} batch {step} contains a non-finite value"
            )));
        }
        let timestamps = (0..labels.len()).map(|_| step as f64).collect();
        Ok(StreamBatch {
            edge_id,
            step,
            features,
            labels,
            timestamps,
            has_labels: true,
        })
    }

    /// Copy with the labels withheld.
    pub fn without_labels(&self) -> Self {
        StreamBatch {
            labels: Vec::new(),
            has_labels: false,
            ..self.clone()
        }
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.nrows() == 0
    }

    /// Row-wise concatenation of labeled batches, used when several delivered
    /// batches are pooled for one weight-learning event.
    pub fn concat(batches: &[&StreamBatch]) -> Result<StreamBatch> {
        let first = batches
            .first()
            .ok_or_else(|| Error::shape("cannot concatenate zero batches"))?;
        if batches.len() == 1 {
            return Ok((*first).clone());
        }
        let cols = first.features.ncols();
        let rows: usize = batches.iter().map(|b| b.len()).sum();
        let mut features = Array2::zeros((rows, cols));
        let mut labels = Vec::with_capacity(rows);
        let mut timestamps = Vec::with_capacity(rows);
        let mut at = 0;
        for b in batches {
            if b.features.ncols() != cols {
                return Err(Error::shape("batches disagree on feature width"));
            }
            features
                .slice_mut(s![at..at + b.len(), ..])
                .assign(&b.features);
            labels.extend_from_slice(&b.labels);
            timestamps.extend_from_slice(&b.timestamps);
            at += b.len();
        }
        let last = batches.last().expect("non-empty");
        Ok(StreamBatch {
            edge_id: last.edge_id,
            step: last.step,
            features,
            labels,
            timestamps,
            has_labels: batches.iter().all(|b| b.has_labels),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Regression,
    Binary,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DriftMode {
    /// Every cluster takes over the function of the next cluster.
    #[default]
    RotateClusters,
    /// Every cluster draws a fresh function.
    NewFunctions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_edges: usize,
    pub n_clusters: usize,
    pub input_dim: usize,
    pub task: Task,
    /// Cluster of each edge; contiguous equal blocks when omitted.
    #[serde(default)]
    pub cluster_assignment: Option<Vec<usize>>,
    #[serde(default)]
    pub noise_std: f64,
    #[serde(default)]
    pub drift_at: Option<usize>,
    #[serde(default)]
    pub drift_mode: DriftMode,
    pub batches_per_edge: usize,
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    /// Fraction of binary labels flipped at random, per edge.
    #[serde(default)]
    pub label_noise: BTreeMap<EdgeId, f64>,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_edges == 0 || self.n_clusters == 0 || self.input_dim == 0 {
            return Err(Error::config(
                "n_edges, n_clusters and input_dim must be positive",
            ));
        }
        if self.n_clusters > self.n_edges {
            return Err(Error::config("n_clusters cannot exceed n_edges"));
        }
        if self.batches_per_edge == 0 || self.batch_size == 0 {
            return Err(Error::config(
                "batches_per_edge and batch_size must be positive",
            ));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::config(
                "noise_std must be a finite nonnegative number",
            ));
        }
        if let Some(at) = self.drift_at {
            if at >= self.batches_per_edge {
                return Err(Error::config("drift_at must precede the end of the stream"));
            }
        }
        if let Some(assign) = &self.cluster_assignment {
            if assign.len() != self.n_edges {
                return Err(Error::config("cluster_assignment needs one entry per edge"));
            }
            if assign.iter().any(|&c| c >= self.n_clusters) {
                return Err(Error::config("cluster_assignment names an unknown cluster"));
            }
        }
        for (edge, &p) in &self.label_noise {
            if edge.0 >= self.n_edges || !(0.0..=1.0).contains(&p) {
                return Err(Error::config(format!(
                    "invalid label_noise entry for edge {edge}"
                )));
            }
            if self.task != Task::Binary && p > 0.0 {
                return Err(Error::config("label_noise applies to binary tasks only"));
            }
        }
        Ok(())
    }

    pub fn clusters(&self) -> Vec<usize> {
        match &self.cluster_assignment {
            Some(a) => a.clone(),
            None => (0..self.n_edges)
                .map(|i| i * self.n_clusters / self.n_edges)
                .collect(),
        }
    }

    /// Ground-truth function of every cluster before and after drift.
    pub fn cluster_functions(&self) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let draw = |label: u64, c: usize| -> Vec<f64> {
            let mut rng = substream(self.seed, DATA, (label << 32) | c as u64);
            (0..self.input_dim)
                .map(|_| StandardNormal.sample(&mut rng))
                .collect()
        };
        let before: Vec<Vec<f64>> = (0..self.n_clusters).map(|c| draw(1, c)).collect();
        let after = match self.drift_mode {
            DriftMode::RotateClusters => (0..self.n_clusters)
                .map(|c| before[(c + 1) % self.n_clusters].clone())
                .collect(),
            DriftMode::NewFunctions => (0..self.n_clusters).map(|c| draw(2, c)).collect(),
        };
        (before, after)
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

pub fn generate_synthetic(spec: &SynthSpec) -> Result<Vec<Vec<StreamBatch>>> {
    spec.validate()?;
    let clusters = spec.clusters();
    let (before, after) = spec.cluster_functions();
    let d = spec.input_dim;
    let mut streams = Vec::with_capacity(spec.n_edges);
    for (edge, &cluster) in clusters.iter().enumerate() {
        let mut rng = substream(spec.seed, DATA, (3u64 << 32) | edge as u64);
        let flip_p = spec.label_noise.get(&EdgeId(edge)).copied().unwrap_or(0.0);
        let mut batches = Vec::with_capacity(spec.batches_per_edge);
        for step in 0..spec.batches_per_edge {
            let drifted = spec.drift_at.is_some_and(|at| step >= at);
            let w = if drifted {
                &after[cluster]
            } else {
                &before[cluster]
            };
            let mut features = Array2::zeros((spec.batch_size, d));
            let mut labels = Vec::with_capacity(spec.batch_size);
            for mut row in features.rows_mut() {
                row.iter_mut()
                    .for_each(|x| *x = StandardNormal.sample(&mut rng));
                let z: f64 = row.iter().zip(w).map(|(x, w)| x * w).sum();
                let y = match spec.task {
                    Task::Regression => {
                        let eps: f64 = StandardNormal.sample(&mut rng);
                        z + spec.noise_std * eps
                    }
                    Task::Binary => {
                        let mut y = if rng.random::<f64>() < sigmoid(z) {
                            1.0
                        } else {
                            0.0
                        };
                        if flip_p > 0.0 && rng.random::<f64>() < flip_p {
                            y = 1.0 - y;
                        }
                        y
                    }
                };
                labels.push(y);
            }
            let mut batch = StreamBatch::new(EdgeId(edge), step, features, labels)?;
            batch.timestamps = (0..spec.batch_size)
                .map(|r| (step * spec.batch_size + r) as f64)
                .collect();
            batches.push(batch);
        }
        streams.push(batches);
    }
    Ok(streams)
}

/// Column mapping for CSV ingestion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvSchema {
    pub edge_col: String,
    pub time_col: String,
    pub label_col: String,
    pub feature_cols: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct CsvStreams {
    /// Edge column value of every edge index; numeric names sort numerically,
    /// anything else lexicographically.
    pub edge_names: Vec<String>,
    pub streams: Vec<Vec<StreamBatch>>,
}

struct CsvRecord {
    time: f64,
    label: f64,
    features: Vec<f64>,
}

pub fn load_csv(path: &Path, schema: &CsvSchema, batch_size: usize) -> Result<CsvStreams> {
    if batch_size == 0 {
        return Err(Error::config("batch size must be positive"));
    }
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::Reader::from_reader(file);
    let headers = reader.headers()?.clone();
    let column = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::data(format!("{}: missing column `{name}`", path.display())))
    };
    let edge_idx = column(&schema.edge_col)?;
    let time_idx = column(&schema.time_col)?;
    let label_idx = column(&schema.label_col)?;
    let feature_idx = schema
        .feature_cols
        .iter()
        .map(|c| column(c))
        .collect::<Result<Vec<_>>>()?;

    let mut grouped: BTreeMap<String, Vec<CsvRecord>> = BTreeMap::new();
    for (row, record) in reader.records().enumerate() {
        let row = row + 1;
        let record = record?;
        let numeric = |idx: usize, name: &str| -> Result<f64> {
            let raw = record.get(idx).unwrap_or("").trim();
            match raw.parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(v),
                _ => Err(Error::data(format!(
                    "{}: row {row}, column `{name}`: `{raw}` is not a finite number",
                    path.display()
                ))),
            }
        };
        let edge = record
            .get(edge_idx)
            .ok_or_else(|| {
                Error::data(format!(
                    "{}: row {row}, column `{}` is missing",
                    path.display(),
                    schema.edge_col
                ))
            })?
            .trim()
            .to_string();
        let time = numeric(time_idx, &schema.time_col)?;
        let label = numeric(label_idx, &schema.label_col)?;
        let features = feature_idx
            .iter()
            .zip(&schema.feature_cols)
            .map(|(&idx, name)| numeric(idx, name))
            .collect::<Result<Vec<_>>>()?;
        grouped.entry(edge).or_default().push(CsvRecord {
            time,
            label,
            features,
        });
    }
    if grouped.is_empty() {
        return Err(Error::data(format!("{}: no records", path.display())));
    }

    let mut grouped: Vec<(String, Vec<CsvRecord>)> = grouped.into_iter().collect();
    if grouped.iter().all(|(name, _)| name.parse::<i64>().is_ok()) {
        grouped.sort_by_key(|(name, _)| name.parse::<i64>().expect("checked"));
    }

    let d = schema.feature_cols.len();
    let mut edge_names = Vec::with_capacity(grouped.len());
    let mut streams = Vec::with_capacity(grouped.len());
    for (edge, (name, mut records)) in grouped.into_iter().enumerate() {
        // Stable, so equal timestamps keep file order.
        records.sort_by(|a, b| a.time.total_cmp(&b.time));
        let batches = records
            .chunks(batch_size)
            .enumerate()
            .map(|(step, chunk)| {
                let mut features = Array2::zeros((chunk.len(), d));
                for (r, rec) in chunk.iter().enumerate() {
                    features
                        .row_mut(r)
                        .iter_mut()
                        .zip(&rec.features)
                        .for_each(|(dst, &v)| *dst = v);
                }
                let labels = chunk.iter().map(|r| r.label).collect();
                let mut batch = StreamBatch::new(EdgeId(edge), step, features, labels)?;
                batch.timestamps = chunk.iter().map(|r| r.time).collect();
                Ok(batch)
            })
            .collect::<Result<Vec<_>>>()?;
        edge_names.push(name);
        streams.push(batches);
    }
    let shortest = streams.iter().map(Vec::len).min().unwrap_or(0);
    streams.iter_mut().for_each(|s| s.truncate(shortest));
    Ok(CsvStreams {
        edge_names,
        streams,
    })
}

/// Writes streams in the layout `load_csv` reads back with
/// [`default_schema`].
pub fn write_csv(streams: &[Vec<StreamBatch>], path: &Path) -> Result<()> {
    let d = streams
        .iter()
        .flatten()
        .next()
        .map(|b| b.features.ncols())
        .unwrap_or(0);
    let mut writer = csv::Writer::from_path(path)?;
    let mut header = vec!["edge".to_string(), "time".to_string(), "label".to_string()];
    header.extend((0..d).map(|i| format!("x{i}")));
    writer.write_record(&header)?;
    for batch in streams.iter().flatten() {
        for (r, row) in batch.features.rows().into_iter().enumerate() {
            let mut fields = vec![
                batch.edge_id.to_string(),
                batch.timestamps[r].to_string(),
                batch
                    .labels
                    .get(r)
                    .map(|y| y.to_string())
                    .unwrap_or_default(),
            ];
            fields.extend(row.iter().map(|v| v.to_string()));
            writer.write_record(&fields)?;
        }
    }
    writer.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn default_schema(input_dim: usize) -> CsvSchema {
    CsvSchema {
        edge_col: "edge".into(),
        time_col: "time".into(),
        label_col: "label".into(),
        feature_cols: (0..input_dim).map(|i| format!("x{i}")).collect(),
    }
}

/// Smallest and largest label over every batch of every stream.
pub fn label_range(streams: &[Vec<StreamBatch>]) -> Option<(f64, f64)> {
    streams
        .iter()
        .flatten()
        .flat_map(|b| b.labels.iter().copied())
        .fold(None, |acc, y| match acc {
            None => Some((y, y)),
            Some((lo, hi)) => Some((lo.min(y), hi.max(y))),
        })
}

/// Adversarial transform: binary labels swap 0 and 1, regression labels are
/// reflected as `y_max + y_min - y`.
pub fn flip_labels(
    stream: &[StreamBatch],
    task: Task,
    y_min: f64,
    y_max: f64,
) -> Result<Vec<StreamBatch>> {
    stream
        .iter()
        .map(|batch| {
            let labels = batch
                .labels
                .iter()
                .map(|&y| match task {
                    Task::Binary if y == 0.0 || y == 1.0 => Ok(1.0 - y),
                    Task::Binary => Err(Error::data(format!(
                        "edge {} batch {}: binary label {y} is not 0 or 1",
                        batch.edge_id, batch.step
                    ))),
                    Task::Regression => Ok(y_max + y_min - y),
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(StreamBatch {
                labels,
                ..batch.clone()
            })
        })
        .collect()
}

/// Writes `data` to a file, creating parent directories.
pub(crate) fn write_file(path: &Path, data: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut file = File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(data).map_err(|e| Error::io(path, e))
}
