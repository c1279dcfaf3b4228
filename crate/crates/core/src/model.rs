//! Base models over a flat parameter vector.
//!
//! Every model is a stack of dense layers. Parameters are laid out layer by
//! layer, each layer storing its `out × in` weight matrix row-major followed by
//! its `out` biases. Because aggregation averages raw parameters, all edges in
//! one simulation share a single [`ModelSpec`] and therefore a single layout.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datastream::StreamBatch;
use crate::error::{Error, Result};

/// Probability clamp applied before taking logarithms in the cross entropy.
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParameterVector(Vec<f64>);

impl ParameterVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("parameter vector"));
        }
        Ok(ParameterVector(values))
    }

    pub fn zeros(len: usize) -> Self {
        ParameterVector(vec![0.0; len])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub(crate) fn from_vec_unchecked(values: Vec<f64>) -> Self {
        debug_assert!(values.iter().all(|v| v.is_finite()));
        ParameterVector(values)
    }
}

impl AsRef<[f64]> for ParameterVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    LinearRegressor,
    LogisticClassifier,
    Mlp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation and the activation value.
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OutputKind {
    ScalarRegression,
    BinaryProbability,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub input_dim: usize,
    #[serde(default)]
    pub hidden_layers: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
    pub output: OutputKind,
}

impl ModelSpec {
    pub fn linear(input_dim: usize) -> Self {
        ModelSpec {
            kind: ModelKind::LinearRegressor,
            input_dim,
            hidden_layers: Vec::new(),
            activation: Activation::Relu,
            output: OutputKind::ScalarRegression,
        }
    }

    pub fn logistic(input_dim: usize) -> Self {
        ModelSpec {
            kind: ModelKind::LogisticClassifier,
            input_dim,
            hidden_layers: Vec::new(),
            activation: Activation::Relu,
            output: OutputKind::BinaryProbability,
        }
    }

    pub fn mlp(
        input_dim: usize,
        hidden_layers: Vec<usize>,
        activation: Activation,
        output: OutputKind,
    ) -> Self {
        ModelSpec {
            kind: ModelKind::Mlp,
            input_dim,
            hidden_layers,
            activation,
            output,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::config("model input_dim must be positive"));
        }
        match self.kind {
            ModelKind::LinearRegressor => {
                if !self.hidden_layers.is_empty() || self.output != OutputKind::ScalarRegression {
                    return Err(Error::config(
                        "linear-regressor takes no hidden layers and a scalar-regression output",
                    ));
                }
            }
            ModelKind::LogisticClassifier => {
                if !self.hidden_layers.is_empty() || self.output != OutputKind::BinaryProbability {
                    return Err(Error::config(
                        "logistic-classifier takes no hidden layers and a binary-probability output",
                    ));
                }
            }
            ModelKind::Mlp => {
                if self.hidden_layers.is_empty() {
                    return Err(Error::config("mlp needs at least one hidden layer"));
                }
                if self.hidden_layers.contains(&0) {
                    return Err(Error::config("mlp hidden layer widths must be positive"));
                }
            }
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` of every dense layer, input to output.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut widths = Vec::with_capacity(self.hidden_layers.len() + 2);
        widths.push(self.input_dim);
        if self.kind == ModelKind::Mlp {
            widths.extend_from_slice(&self.hidden_layers);
        }
        widths.push(1);
        widths.windows(2).map(|w| (w[0], w[1])).collect()
    }

    pub fn param_count(&self) -> usize {
        self.layer_dims()
            .iter()
            .map(|&(fan_in, fan_out)| fan_in * fan_out + fan_out)
            .sum()
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> ParameterVector {
        let mut values = Vec::with_capacity(self.param_count());
        for (fan_in, fan_out) in self.layer_dims() {
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            values.extend((0..fan_in * fan_out).map(|_| rng.random_range(-limit..=limit)));
            values.extend(std::iter::repeat_n(0.0, fan_out));
        }
        ParameterVector(values)
    }

    fn check_params(&self, params: &ParameterVector) -> Result<()> {
        let expected = self.param_count();
        if params.len() != expected {
            return Err(Error::shape(format!(
                "model expects {expected} parameters, got {}",
                params.len()
            )));
        }
        Ok(())
    }

    fn check_features(&self, features: &ArrayView2<'_, f64>) -> Result<()> {
        if features.ncols() != self.input_dim {
            return Err(Error::shape(format!(
                "model expects {} feature columns, got {}",
                self.input_dim,
                features.ncols()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    BinaryCrossEntropy,
    MeanSquaredError,
}

struct Layer<'a> {
    weights: ArrayView2<'a, f64>,
    bias: ArrayView1<'a, f64>,
}

fn layers<'a>(spec: &ModelSpec, params: &'a [f64]) -> Vec<Layer<'a>> {
    let mut offset = 0;
    spec.layer_dims()
        .into_iter()
        .map(|(fan_in, fan_out)| {
            let w_len = fan_in * fan_out;
            let weights =
                ArrayView2::from_shape((fan_out, fan_in), &params[offset..offset + w_len])
                    .expect("layer layout matches param_count");
            let bias = ArrayView1::from(&params[offset + w_len..offset + w_len + fan_out]);
            offset += w_len + fan_out;
            Layer { weights, bias }
        })
        .collect()
}

struct Trace {
    /// Pre-activations of each layer.
    pre: Vec<Array2<f64>>,
    /// Inputs to each layer; `inputs[0]` is the feature matrix.
    inputs: Vec<Array2<f64>>,
    outputs: Array1<f64>,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn run_forward(spec: &ModelSpec, params: &[f64], features: ArrayView2<'_, f64>) -> Trace {
    let layers = layers(spec, params);
    let last = layers.len() - 1;
    let mut inputs = vec![features.to_owned()];
    let mut pre = Vec::with_capacity(layers.len());
    for (idx, layer) in layers.iter().enumerate() {
        let z = inputs[idx].dot(&layer.weights.t()) + layer.bias.view();
        if idx < last {
            inputs.push(z.mapv(|v| spec.activation.apply(v)));
        }
        pre.push(z);
    }
    let logits = pre[last].column(0).to_owned();
    let outputs = match spec.output {
        OutputKind::ScalarRegression => logits,
        OutputKind::BinaryProbability => logits.mapv(sigmoid),
    };
    Trace {
        pre,
        inputs,
        outputs,
    }
}

pub fn forward(
    spec: &ModelSpec,
    params: &ParameterVector,
    features: ArrayView2<'_, f64>,
) -> Result<Vec<f64>> {
    spec.check_params(params)?;
    spec.check_features(&features)?;
    Ok(run_forward(spec, params.as_slice(), features)
        .outputs
        .to_vec())
}

/// Mean batch loss.
pub fn loss(predictions: &[f64], labels: &[f64], kind: LossKind) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::shape(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if predictions.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = match kind {
        LossKind::MeanSquaredError => predictions
            .iter()
            .zip(labels)
            .map(|(p, y)| (p - y) * (p - y))
            .sum(),
        LossKind::BinaryCrossEntropy => predictions
            .iter()
            .zip(labels)
            .map(|(&p, &y)| {
                let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
                -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
            })
            .sum(),
    };
    Ok(total / predictions.len() as f64)
}

/// Derivative of the mean loss with respect to the final-layer pre-activation.
fn output_delta(
    spec: &ModelSpec,
    kind: LossKind,
    outputs: &Array1<f64>,
    labels: &[f64],
) -> Array1<f64> {
    let scale = 1.0 / labels.len() as f64;
    Array1::from_iter(outputs.iter().zip(labels).map(|(&p, &y)| {
        let d_loss_d_out = match kind {
            LossKind::MeanSquaredError => 2.0 * (p - y),
            LossKind::BinaryCrossEntropy => {
                if p <= PROB_CLAMP || p >= 1.0 - PROB_CLAMP {
                    0.0
                } else if spec.output == OutputKind::BinaryProbability {
                    // Chain rule through the sigmoid collapses to p - y.
                    return (p - y) * scale;
                } else {
                    -y / p + (1.0 - y) / (1.0 - p)
                }
            }
        };
        let d_out_d_logit = match spec.output {
            OutputKind::ScalarRegression => 1.0,
            OutputKind::BinaryProbability => p * (1.0 - p),
        };
        d_loss_d_out * d_out_d_logit * scale
    }))
}

/// Mean batch loss and its exact gradient with respect to every parameter.
pub fn loss_and_gradient(
    spec: &ModelSpec,
    params: &ParameterVector,
    features: ArrayView2<'_, f64>,
    labels: &[f64],
    kind: LossKind,
) -> Result<(f64, ParameterVector)> {
    spec.check_params(params)?;
    spec.check_features(&features)?;
    if features.nrows() != labels.len() {
        return Err(Error::shape(format!(
            "{} feature rows for {} labels",
            features.nrows(),
            labels.len()
        )));
    }
    let mut grad = vec![0.0; params.len()];
    if labels.is_empty() {
        return Ok((0.0, ParameterVector(grad)));
    }
    let trace = run_forward(spec, params.as_slice(), features);
    let value = loss(trace.outputs.as_slice().expect("contiguous"), labels, kind)?;

    let layers = layers(spec, params.as_slice());
    let dims = spec.layer_dims();
    let mut offsets = Vec::with_capacity(dims.len());
    let mut acc = 0;
    for &(fan_in, fan_out) in &dims {
        offsets.push(acc);
        acc += fan_in * fan_out + fan_out;
    }

    let mut delta = output_delta(spec, kind, &trace.outputs, labels).insert_axis(Axis(1));
    for idx in (0..layers.len()).rev() {
        let (fan_in, fan_out) = dims[idx];
        let w_grad = delta.t().dot(&trace.inputs[idx]);
        let b_grad = delta.sum_axis(Axis(0));
        let offset = offsets[idx];
        grad[offset..offset + fan_in * fan_out]
            .iter_mut()
            .zip(w_grad.iter())
            .for_each(|(g, v)| *g = *v);
        grad[offset + fan_in * fan_out..offset + fan_in * fan_out + fan_out]
            .iter_mut()
            .zip(b_grad.iter())
            .for_each(|(g, v)| *g = *v);
        if idx > 0 {
            let mut back = delta.dot(&layers[idx].weights);
            let z = &trace.pre[idx - 1];
            let a = &trace.inputs[idx];
            ndarray::Zip::from(&mut back)
                .and(z)
                .and(a)
                .for_each(|d, &z, &a| *d *= spec.activation.derivative(z, a));
            delta = back;
        }
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("gradient"));
    }
    Ok((value, ParameterVector(grad)))
}

pub fn gradient(
    spec: &ModelSpec,
    params: &ParameterVector,
    batch: &StreamBatch,
    kind: LossKind,
) -> Result<ParameterVector> {
    if !batch.has_labels {
        return Err(Error::data("gradient requires a labeled batch"));
    }
    loss_and_gradient(spec, params, batch.features.view(), &batch.labels, kind).map(|(_, g)| g)
}

/// Loss of `params` on a labeled batch.
pub fn batch_loss(
    spec: &ModelSpec,
    params: &ParameterVector,
    batch: &StreamBatch,
    kind: LossKind,
) -> Result<f64> {
    let predictions = forward(spec, params, batch.features.view())?;
    loss(&predictions, &batch.labels, kind)
}
