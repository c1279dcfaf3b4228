//! Python bindings. Vectors cross the boundary as lists of floats, weights as
//! `(self_weight, {edge_id: weight})` pairs and configs as JSON strings.

use std::collections::BTreeMap;

use ndarray::Array2;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use alphaedge::aggregation::{self, AggregationWeights, ModelSnapshot};
use alphaedge::datastream::StreamBatch;
use alphaedge::harness::{run_experiment as run_experiment_core, ExperimentConfig};
use alphaedge::metrics;
use alphaedge::model::{self, LossKind, ModelSpec, ParameterVector};
use alphaedge::optim::OptimizerConfig;
use alphaedge::peer::{self, Topology};
use alphaedge::rng::{substream, INIT};
use alphaedge::{EdgeId, Error};

type Weights = (f64, BTreeMap<usize, f64>);

fn py_err(e: Error) -> PyErr {
    match e.exit_code() {
        1 | 2 => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn parse<T: serde::de::DeserializeOwned>(what: &str, text: &str) -> PyResult<T> {
    serde_json::from_value(serde_json::Value::String(text.to_string()))
        .map_err(|e| PyValueError::new_err(format!("bad {what} `{text}`: {e}")))
}

fn to_weights(w: &Weights) -> AggregationWeights {
    AggregationWeights {
        self_weight: w.0,
        neighbors: w.1.iter().map(|(&k, &v)| (EdgeId(k), v)).collect(),
    }
}

fn from_weights(w: &AggregationWeights) -> Weights {
    (
        w.self_weight,
        w.neighbors.iter().map(|(k, &v)| (k.0, v)).collect(),
    )
}

fn params(values: Vec<f64>) -> PyResult<ParameterVector> {
    ParameterVector::new(values).map_err(py_err)
}

fn matrix(rows: Vec<Vec<f64>>, cols: usize) -> PyResult<Array2<f64>> {
    let n = rows.len();
    let mut flat = Vec::with_capacity(n * cols);
    for (i, r) in rows.into_iter().enumerate() {
        if r.len() != cols {
            return Err(PyValueError::new_err(format!(
                "row {i} has {} features, expected {cols}",
                r.len()
            )));
        }
        flat.extend(r);
    }
    Array2::from_shape_vec((n, cols), flat).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn snapshots(models: Vec<(usize, Vec<f64>)>) -> PyResult<Vec<ModelSnapshot>> {
    models
        .into_iter()
        .map(|(id, p)| {
            Ok(ModelSnapshot {
                source_edge: EdgeId(id),
                params: params(p)?,
                produced_at: 0,
                samples_seen: 0,
            })
        })
        .collect()
}

/// Architecture of an edge model.
#[pyclass(name = "ModelSpec", from_py_object)]
#[derive(Clone)]
struct PyModelSpec {
    inner: ModelSpec,
}

#[pymethods]
impl PyModelSpec {
    /// `kind` is linear-regressor, logistic-classifier or mlp.
    #[new]
    #[pyo3(signature = (kind, input_dim, hidden_layers=Vec::new(), activation="relu", output=None))]
    fn new(
        kind: &str,
        input_dim: usize,
        hidden_layers: Vec<usize>,
        activation: &str,
        output: Option<&str>,
    ) -> PyResult<Self> {
        let inner = match kind {
            "linear-regressor" => ModelSpec::linear(input_dim),
            "logistic-classifier" => ModelSpec::logistic(input_dim),
            "mlp" => ModelSpec::mlp(
                input_dim,
                hidden_layers,
                parse("activation", activation)?,
                parse("output", output.unwrap_or("scalar-regression"))?,
            ),
            other => {
                return Err(PyValueError::new_err(format!(
                    "unknown model kind `{other}`"
                )))
            }
        };
        inner.validate().map_err(py_err)?;
        Ok(PyModelSpec { inner })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let inner: ModelSpec =
            serde_json::from_str(text).map_err(|e| PyValueError::new_err(e.to_string()))?;
        inner.validate().map_err(py_err)?;
        Ok(PyModelSpec { inner })
    }

    fn to_json(&self) -> String {
        serde_json::to_string(&self.inner).expect("spec serializes")
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.inner.param_count()
    }

    #[getter]
    fn input_dim(&self) -> usize {
        self.inner.input_dim
    }

    /// Seeded initial parameters.
    fn init_params(&self, seed: u64) -> Vec<f64> {
        self.inner
            .init_params(&mut substream(seed, INIT, 0))
            .into_inner()
    }

    fn __repr__(&self) -> String {
        format!("ModelSpec({})", self.to_json())
    }
}

#[pyfunction]
fn forward(spec: &PyModelSpec, params_: Vec<f64>, features: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
    let x = matrix(features, spec.inner.input_dim)?;
    model::forward(&spec.inner, &params(params_)?, x.view()).map_err(py_err)
}

/// Mean loss; `kind` is binary-cross-entropy or mean-squared-error.
#[pyfunction]
fn loss(predictions: Vec<f64>, labels: Vec<f64>, kind: &str) -> PyResult<f64> {
    let kind: LossKind = parse("loss", kind)?;
    model::loss(&predictions, &labels, kind).map_err(py_err)
}

/// `(loss, gradient)` of the mean batch loss.
#[pyfunction]
fn loss_and_gradient(
    spec: &PyModelSpec,
    params_: Vec<f64>,
    features: Vec<Vec<f64>>,
    labels: Vec<f64>,
    kind: &str,
) -> PyResult<(f64, Vec<f64>)> {
    let kind: LossKind = parse("loss", kind)?;
    let x = matrix(features, spec.inner.input_dim)?;
    let (l, g) = model::loss_and_gradient(&spec.inner, &params(params_)?, x.view(), &labels, kind)
        .map_err(py_err)?;
    Ok((l, g.into_inner()))
}

/// Weighted average of `local` and `[(edge_id, params), ...]`.
#[pyfunction]
fn aggregate(
    local: Vec<f64>,
    models: Vec<(usize, Vec<f64>)>,
    weights: Weights,
) -> PyResult<Vec<f64>> {
    let out = aggregation::aggregate(&params(local)?, &snapshots(models)?, &to_weights(&weights))
        .map_err(py_err)?;
    Ok(out.into_inner())
}

#[pyfunction]
fn normalize(weights: Weights) -> PyResult<Weights> {
    aggregation::normalize(&to_weights(&weights))
        .map(|w| from_weights(&w))
        .map_err(py_err)
}

/// Learns aggregation weights on one labeled batch with Adam.
/// Returns `(weights, aggregated_params, loss)`.
#[pyfunction]
#[pyo3(signature = (spec, local, models, warm_start, features, labels, kind, steps=10, learning_rate=0.001))]
#[allow(clippy::too_many_arguments)]
fn learn_weights(
    spec: &PyModelSpec,
    local: Vec<f64>,
    models: Vec<(usize, Vec<f64>)>,
    warm_start: Weights,
    features: Vec<Vec<f64>>,
    labels: Vec<f64>,
    kind: &str,
    steps: usize,
    learning_rate: f64,
) -> PyResult<(Weights, Vec<f64>, f64)> {
    let kind: LossKind = parse("loss", kind)?;
    let snaps = snapshots(models)?;
    let x = matrix(features, spec.inner.input_dim)?;
    let batch = StreamBatch::new(EdgeId(0), 0, x, labels).map_err(py_err)?;
    let config = OptimizerConfig::adam(learning_rate);
    config.validate().map_err(py_err)?;
    let mut state = config.init(snaps.len() + 1);
    let learned = aggregation::learn_weights(
        &params(local)?,
        &snaps,
        &to_weights(&warm_start),
        &batch,
        &spec.inner,
        kind,
        steps,
        &mut state,
    )
    .map_err(py_err)?;
    Ok((
        from_weights(&learned.weights),
        learned.params.into_inner(),
        learned.loss,
    ))
}

/// Two-hop candidate scores `[(candidate, score), ...]`, best first.
/// `neighbors[i]` lists edge i's neighbors; `weights[i]` is its normalized
/// weight pair.
#[pyfunction]
fn two_hop_scores(
    neighbors: Vec<Vec<usize>>,
    weights: Vec<Weights>,
    edge: usize,
) -> PyResult<Vec<(usize, f64)>> {
    let n = neighbors.len();
    if edge >= n {
        return Err(PyValueError::new_err(format!("edge {edge} outside 0..{n}")));
    }
    let mut topo = Topology::complete(n);
    topo.k = neighbors.iter().map(Vec::len).max().unwrap_or(0);
    for (i, list) in neighbors.into_iter().enumerate() {
        topo.set_neighbors(EdgeId(i), list.into_iter().map(EdgeId).collect());
    }
    topo.validate().map_err(py_err)?;
    let w: Vec<AggregationWeights> = weights.iter().map(to_weights).collect();
    let scores = peer::two_hop_scores(&topo, &w, EdgeId(edge)).map_err(py_err)?;
    Ok(scores
        .into_iter()
        .map(|c| (c.candidate.0, c.score))
        .collect())
}

/// ROC area; `None` for a single-class batch.
#[pyfunction]
fn auc(scores: Vec<f64>, labels: Vec<f64>) -> PyResult<Option<f64>> {
    metrics::auc(&scores, &labels).map_err(py_err)
}

#[pyfunction]
fn one_minus_smape(predictions: Vec<f64>, labels: Vec<f64>) -> PyResult<f64> {
    metrics::one_minus_smape(&predictions, &labels).map_err(py_err)
}

/// Runs an experiment config given as JSON and returns the report as JSON.
/// Relative CSV paths resolve against `base_dir`.
#[pyfunction]
#[pyo3(signature = (config_json, base_dir=None))]
fn run_experiment(
    py: Python<'_>,
    config_json: &str,
    base_dir: Option<std::path::PathBuf>,
) -> PyResult<String> {
    let value: serde_json::Value =
        serde_json::from_str(config_json).map_err(|e| PyValueError::new_err(e.to_string()))?;
    let config = ExperimentConfig::from_value(value, base_dir.as_deref()).map_err(py_err)?;
    let report = py.detach(|| run_experiment_core(&config)).map_err(py_err)?;
    serde_json::to_string(&report).map_err(|e| PyRuntimeError::new_err(e.to_string()))
}

#[pymodule]
fn alphaedge_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModelSpec>()?;
    m.add_function(wrap_pyfunction!(forward, m)?)?;
    m.add_function(wrap_pyfunction!(loss, m)?)?;
    m.add_function(wrap_pyfunction!(loss_and_gradient, m)?)?;
    m.add_function(wrap_pyfunction!(aggregate, m)?)?;
    m.add_function(wrap_pyfunction!(normalize, m)?)?;
    m.add_function(wrap_pyfunction!(learn_weights, m)?)?;
    m.add_function(wrap_pyfunction!(two_hop_scores, m)?)?;
    m.add_function(wrap_pyfunction!(auc, m)?)?;
    m.add_function(wrap_pyfunction!(one_minus_smape, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    Ok(())
}
