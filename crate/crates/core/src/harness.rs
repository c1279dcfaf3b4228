//! Experiment orchestration and result files.
//!
//! An [`ExperimentConfig`] is a [`SimConfig`] plus a data source, a list of
//! strategies and a list of seeds. Every (strategy, seed) pair is an isolated
//! simulation; pairs run concurrently and are merged in config order.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::datastream::{
    generate_synthetic, load_csv, write_file, CsvSchema, StreamBatch, SynthSpec,
};
use crate::error::{Error, Result};
use crate::metrics::{overall_mean, Metric, MetricSeries};
use crate::peer::Topology;
use crate::rng::{substream, DATA};
use crate::simnet::{run_simulation, RoundTrace, SimConfig, SimulationResult, Strategy};
use crate::EdgeId;

fn default_window() -> usize {
    50
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase")]
pub enum DataSource {
    /// Generated streams; `seed` is mixed with the run seed so that every
    /// seed sees fresh data.
    Synthetic(SynthSpec),
    Csv {
        path: PathBuf,
        schema: CsvSchema,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    #[serde(flatten)]
    pub sim: SimConfig,
    pub data: DataSource,
    /// Strategies to compare; `[sim.strategy]` when empty.
    #[serde(default)]
    pub strategies: Vec<Strategy>,
    /// Seeds to repeat over; `[sim.seed]` when empty.
    #[serde(default)]
    pub seeds: Vec<u64>,
    #[serde(default = "default_window")]
    pub window: usize,
}

impl ExperimentConfig {
    /// Reads a JSON config; relative CSV paths resolve against its directory.
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let value: Value = serde_json::from_str(&text)
            .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        Self::from_value(value, path.parent())
    }

    pub fn from_value(value: Value, base: Option<&Path>) -> Result<Self> {
        let mut config: ExperimentConfig =
            serde_json::from_value(value).map_err(|e| Error::config(e.to_string()))?;
        if let (DataSource::Csv { path, .. }, Some(base)) = (&mut config.data, base) {
            if path.is_relative() {
                *path = base.join(&*path);
            }
        }
        Ok(config)
    }

    pub fn strategies(&self) -> Vec<Strategy> {
        if self.strategies.is_empty() {
            vec![self.sim.strategy]
        } else {
            self.strategies.clone()
        }
    }

    pub fn seeds(&self) -> Vec<u64> {
        if self.seeds.is_empty() {
            vec![self.sim.seed]
        } else {
            self.seeds.clone()
        }
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.sim.seed = seed;
        self.seeds = vec![seed];
    }

    /// Simulation config of one (strategy, seed) pair.
    pub fn point(&self, strategy: Strategy, seed: u64) -> SimConfig {
        SimConfig {
            strategy,
            seed,
            ..self.sim.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.window == 0 {
            return Err(Error::config("window must be positive"));
        }
        for strategy in self.strategies() {
            self.point(strategy, self.sim.seed).validate()?;
        }
        match &self.data {
            DataSource::Synthetic(spec) => {
                spec.validate()?;
                if spec.n_edges != self.sim.n {
                    return Err(Error::config(format!(
                        "data has {} edges but n = {}",
                        spec.n_edges, self.sim.n
                    )));
                }
                if spec.batch_size != self.sim.b {
                    return Err(Error::config(format!(
                        "data batch_size {} differs from B = {}",
                        spec.batch_size, self.sim.b
                    )));
                }
                if spec.input_dim != self.sim.model.input_dim {
                    return Err(Error::config("data input_dim differs from model input_dim"));
                }
            }
            DataSource::Csv { schema, .. } => {
                if schema.feature_cols.len() != self.sim.model.input_dim {
                    return Err(Error::config(
                        "feature_cols count differs from model input_dim",
                    ));
                }
            }
        }
        Ok(())
    }

    /// Streams for one run seed.
    pub fn load_streams(&self, seed: u64) -> Result<Vec<Vec<StreamBatch>>> {
        match &self.data {
            DataSource::Synthetic(spec) => {
                let mut spec = spec.clone();
                spec.seed = substream(seed, DATA, spec.seed).random();
                generate_synthetic(&spec)
            }
            DataSource::Csv { path, schema } => {
                let loaded = load_csv(path, schema, self.sim.b)?;
                if loaded.streams.len() != self.sim.n {
                    return Err(Error::config(format!(
                        "{} holds {} edges but n = {}",
                        path.display(),
                        loaded.streams.len(),
                        self.sim.n
                    )));
                }
                Ok(loaded.streams)
            }
        }
    }
}

/// One simulated (strategy, seed) pair.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub strategy: Strategy,
    pub seed: u64,
    pub series: Vec<MetricSeries>,
    /// Size-weighted mean over the normal edges.
    pub overall_mean: Option<f64>,
    pub adversarial: Vec<EdgeId>,
    pub messages: u64,
    pub unavailable_fetches: u64,
    pub rounds: Vec<RoundTrace>,
    pub final_topology: Topology,
}

impl RunReport {
    pub fn from_result(result: &SimulationResult, window: usize) -> Result<Self> {
        let metric = result.config.metric;
        let series = result
            .records
            .iter()
            .enumerate()
            .map(|(i, r)| MetricSeries::from_records(EdgeId(i), r, metric, window))
            .collect::<Result<Vec<_>>>()?;
        let overall_mean = overall_mean(
            series
                .iter()
                .filter(|s| !result.adversarial.contains(&s.edge_id)),
        );
        Ok(RunReport {
            strategy: result.config.strategy,
            seed: result.config.seed,
            series,
            overall_mean,
            adversarial: result.adversarial.clone(),
            messages: result.messages,
            unavailable_fetches: result.unavailable_fetches,
            rounds: result.rounds.clone(),
            final_topology: result.final_topology.clone(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedValue {
    pub seed: u64,
    pub mean: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategySummary {
    pub strategy: Strategy,
    pub per_seed: Vec<SeedValue>,
    /// Mean of the per-seed means.
    pub mean: Option<f64>,
    /// Standard error of that mean across seeds.
    pub std_err: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub runs: Vec<RunReport>,
    pub summary: Vec<StrategySummary>,
    /// Excluded from the written files so they stay reproducible.
    #[serde(skip)]
    pub wall_time_secs: f64,
}

impl ExperimentReport {
    pub fn summary_for(&self, strategy: Strategy) -> Option<&StrategySummary> {
        self.summary.iter().find(|s| s.strategy == strategy)
    }
}

/// Mean and standard error of the mean; the error is 0 for a single value.
pub fn mean_and_stderr(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let k = values.len() as f64;
    let mean = values.iter().sum::<f64>() / k;
    if values.len() == 1 {
        return Some((mean, 0.0));
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1.0);
    Some((mean, (var / k).sqrt()))
}

/// Runs one simulation and scores it.
pub fn run_point(
    config: &SimConfig,
    streams: Vec<Vec<StreamBatch>>,
    window: usize,
) -> Result<RunReport> {
    let result = run_simulation(config, streams)?;
    RunReport::from_result(&result, window)
}

pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentReport> {
    config.validate()?;
    let started = Instant::now();
    let strategies = config.strategies();
    let seeds = config.seeds();
    let pairs: Vec<(Strategy, u64)> = strategies
        .iter()
        .flat_map(|&st| seeds.iter().map(move |&s| (st, s)))
        .collect();
    let runs = pairs
        .par_iter()
        .map(|&(strategy, seed)| {
            let streams = config.load_streams(seed)?;
            run_point(&config.point(strategy, seed), streams, config.window)
        })
        .collect::<Result<Vec<_>>>()?;
    let summary = strategies
        .iter()
        .map(|&strategy| {
            let per_seed: Vec<SeedValue> = runs
                .iter()
                .filter(|r| r.strategy == strategy)
                .map(|r| SeedValue {
                    seed: r.seed,
                    mean: r.overall_mean,
                })
                .collect();
            let defined: Vec<f64> = per_seed.iter().filter_map(|s| s.mean).collect();
            let stats = mean_and_stderr(&defined);
            StrategySummary {
                strategy,
                per_seed,
                mean: stats.map(|s| s.0),
                std_err: stats.map(|s| s.1),
            }
        })
        .collect();
    Ok(ExperimentReport {
        config: config.clone(),
        runs,
        summary,
        wall_time_secs: started.elapsed().as_secs_f64(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    #[default]
    Csv,
    Json,
}

/// Per-batch metrics with columns edge_id, step, metric_value,
/// is_aggregation_step, batch_size. Undefined values are left empty.
pub fn metrics_csv(run: &RunReport) -> String {
    let mut out = String::from("edge_id,step,metric_value,is_aggregation_step,batch_size\n");
    for s in &run.series {
        for b in &s.batches {
            let value = b.value.map(|v| format!("{v:?}")).unwrap_or_default();
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                s.edge_id, b.step, value, b.is_aggregation_step, b.batch_size
            );
        }
    }
    out
}

fn to_json<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    Ok(bytes)
}

#[derive(Serialize)]
struct Summary<'a> {
    metric: Metric,
    strategies: &'a [StrategySummary],
}

/// Writes metrics, trace and summary files into `out`; returns their paths.
pub fn write_report(
    report: &ExperimentReport,
    out: &Path,
    format: OutputFormat,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut written = Vec::new();
    let mut emit = |name: String, bytes: Vec<u8>| -> Result<()> {
        let path = out.join(name);
        write_file(&path, &bytes)?;
        written.push(path);
        Ok(())
    };
    for run in &report.runs {
        let stem = format!("{}_seed{}", run.strategy.name(), run.seed);
        match format {
            OutputFormat::Csv => {
                emit(format!("metrics_{stem}.csv"), metrics_csv(run).into_bytes())?
            }
            OutputFormat::Json => emit(format!("metrics_{stem}.json"), to_json(&run.series)?)?,
        }
        emit(format!("trace_{stem}.json"), to_json(&run.rounds)?)?;
    }
    emit(
        "summary.json".into(),
        to_json(&Summary {
            metric: report.config.sim.metric,
            strategies: &report.summary,
        })?,
    )?;
    Ok(written)
}

/// A sweep axis: a config key (dotted for nested objects) and its values.
#[derive(Debug, Clone, PartialEq)]
pub struct Axis {
    pub key: String,
    pub values: Vec<Value>,
}

impl std::str::FromStr for Axis {
    type Err = Error;

    /// `key=v1,v2,...`, or `key=[...]` for values that contain commas.
    fn from_str(spec: &str) -> Result<Self> {
        let (key, rhs) = spec
            .split_once('=')
            .ok_or_else(|| Error::config(format!("axis `{spec}` is not key=values")))?;
        let key = key.trim();
        if key.is_empty() {
            return Err(Error::config("axis key is empty"));
        }
        let rhs = rhs.trim();
        let values = match serde_json::from_str::<Value>(rhs) {
            Ok(Value::Array(items)) => items,
            _ => rhs
                .split(',')
                .map(|v| {
                    let v = v.trim();
                    serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()))
                })
                .collect(),
        };
        if values.is_empty() {
            return Err(Error::config("axis has no values"));
        }
        Ok(Axis {
            key: key.to_string(),
            values,
        })
    }
}

/// Replaces the value at a dotted key path.
pub fn set_key(config: &mut Value, key: &str, value: Value) -> Result<()> {
    let mut node = config;
    let mut parts = key.split('.').peekable();
    while let Some(part) = parts.next() {
        let obj = node.as_object_mut().ok_or_else(|| {
            Error::config(format!("axis key `{key}` does not name an object field"))
        })?;
        if parts.peek().is_none() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj
            .get_mut(part)
            .ok_or_else(|| Error::config(format!("axis key `{key}`: no field `{part}`")))?;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct SweepPoint {
    pub value: Value,
    pub report: ExperimentReport,
}

/// Runs the experiment once per axis value.
pub fn run_sweep(base: &Value, base_dir: Option<&Path>, axis: &Axis) -> Result<Vec<SweepPoint>> {
    axis.values
        .iter()
        .map(|v| {
            let mut cfg = base.clone();
            set_key(&mut cfg, &axis.key, v.clone())?;
            let config = ExperimentConfig::from_value(cfg, base_dir)?;
            Ok(SweepPoint {
                value: v.clone(),
                report: run_experiment(&config)?,
            })
        })
        .collect()
}

/// One row per (axis value, strategy).
pub fn sweep_csv(axis: &Axis, points: &[SweepPoint]) -> String {
    let mut out = String::from("axis,value,strategy,mean,std_err,seeds\n");
    let fmt = |v: Option<f64>| v.map(|x| format!("{x:?}")).unwrap_or_default();
    for p in points {
        let value = match &p.value {
            Value::String(s) => s.clone(),
            other => other.to_string(),
        };
        let value = if value.contains(',') {
            format!("\"{}\"", value.replace('"', "\"\""))
        } else {
            value
        };
        for s in &p.report.summary {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                axis.key,
                value,
                s.strategy.name(),
                fmt(s.mean),
                fmt(s.std_err),
                s.per_seed.len()
            );
        }
    }
    out
}
