//! Fully connected feedforward network with hand-written backpropagation.
//!
//! Weights are stored `output_dim x input_dim`, so a layer computes
//! `z = W a + b` for each example `a`. The forward pass records, per layer,
//! the batch of inputs and the batch-mean input that the projector updates
//! consume.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matcore::{matmul, Matrix, Vector};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
    /// Output layer whose pre-activations are the logits fed to softmax.
    SoftmaxOutput,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
            Activation::Identity | Activation::SoftmaxOutput => z,
        }
    }

    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
            Activation::Identity | Activation::SoftmaxOutput => 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub input_dim: usize,
    pub output_dim: usize,
    pub activation: Activation,
}

impl LayerSpec {
    pub fn new(input_dim: usize, output_dim: usize, activation: Activation) -> Self {
        LayerSpec {
            input_dim,
            output_dim,
            activation,
        }
    }
}

/// Checks that a layer list is non-empty, chains dimensionally, and only uses
/// the softmax output activation on the final layer.
pub fn validate_specs(specs: &[LayerSpec]) -> Result<()> {
    if specs.is_empty() {
        return Err(Error::Shape("network needs at least one layer".into()));
    }
    for (l, s) in specs.iter().enumerate() {
        if s.input_dim == 0 || s.output_dim == 0 {
            return Err(Error::Shape(format!("layer {l} has a zero dimension")));
        }
        if s.activation == Activation::SoftmaxOutput && l + 1 != specs.len() {
            return Err(Error::Shape(format!(
                "layer {l}: softmax output activation is only allowed on the last layer"
            )));
        }
    }
    for (l, w) in specs.windows(2).enumerate() {
        if w[0].output_dim != w[1].input_dim {
            return Err(Error::Shape(format!(
                "layer {l} outputs {} values but layer {} expects {}",
                w[0].output_dim,
                l + 1,
                w[1].input_dim
            )));
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub spec: LayerSpec,
    pub weights: Matrix,
    pub bias: Vector,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Layer>", into = "Vec<Layer>")]
pub struct Network {
    layers: Vec<Layer>,
}

impl TryFrom<Vec<Layer>> for Network {
    type Error = Error;

    fn try_from(layers: Vec<Layer>) -> Result<Self> {
        Network::from_layers(layers)
    }
}

impl From<Network> for Vec<Layer> {
    fn from(n: Network) -> Self {
        n.layers
    }
}

impl Network {
    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        let specs: Vec<LayerSpec> = layers.iter().map(|l| l.spec).collect();
        validate_specs(&specs)?;
        for (i, l) in layers.iter().enumerate() {
            if l.weights.shape() != (l.spec.output_dim, l.spec.input_dim)
                || l.bias.dim() != l.spec.output_dim
            {
                return Err(Error::Shape(format!(
                    "layer {i}: weights {:?} / bias {} do not match spec {}->{}",
                    l.weights.shape(),
                    l.bias.dim(),
                    l.spec.input_dim,
                    l.spec.output_dim
                )));
            }
        }
        Ok(Network { layers })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(|l| l.spec).collect()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].spec.input_dim
    }

    pub fn num_classes(&self) -> usize {
        self.layers.last().map_or(0, |l| l.spec.output_dim)
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Input dimension of every layer, i.e. the side of each projector matrix.
    pub fn input_dims(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.spec.input_dim).collect()
    }

    /// Adds `delta` to every weight and bias in place.
    pub fn apply_update(&mut self, delta: &GradientSet) -> Result<()> {
        delta.check_matches(self)?;
        let mut next = self.layers.clone();
        for (layer, (dw, db)) in next.iter_mut().zip(delta.weights.iter().zip(&delta.biases)) {
            for (w, d) in layer.weights.data_mut().iter_mut().zip(dw.data()) {
                *w += d;
            }
            for (b, d) in layer.bias.as_mut_slice().iter_mut().zip(db.as_slice()) {
                *b += d;
            }
        }
        for (i, layer) in next.iter().enumerate() {
            let finite = layer.weights.data().iter().chain(layer.bias.as_slice()).all(|v| v.is_finite());
            if !finite {
                return Err(Error::Numeric(format!("update made layer {i} non-finite")));
            }
        }
        self.layers = next;
        Ok(())
    }

    /// Independent deep copy, used for teacher models and anchors.
    pub fn snapshot(&self) -> Network {
        self.clone()
    }

    /// All weights and biases flattened layer by layer (weights first).
    pub fn flat_params(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.data().iter().chain(l.bias.as_slice()).copied())
            .collect()
    }
}

/// Draws Glorot-uniform weights and zero biases from a seeded ChaCha stream.
pub fn init_network(specs: &[LayerSpec], seed: u64) -> Result<Network> {
    validate_specs(specs)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = specs
        .iter()
        .map(|&spec| {
            let limit = (6.0 / (spec.input_dim + spec.output_dim) as f64).sqrt();
            let data = (0..spec.input_dim * spec.output_dim)
                .map(|_| rng.random_range(-limit..limit))
                .collect();
            Layer {
                spec,
                weights: Matrix::from_raw(spec.output_dim, spec.input_dim, data),
                bias: Vector::zeros(spec.output_dim),
            }
        })
        .collect();
    Network::from_layers(layers)
}

/// Everything backpropagation and the projector updates need from a forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    /// Batch of inputs fed to each layer (`n x input_dim`).
    pub inputs: Vec<Matrix>,
    /// Batch-mean of each layer's inputs.
    pub mean_inputs: Vec<Vector>,
    /// Pre-activations per layer (`n x output_dim`).
    pub pre_activations: Vec<Matrix>,
    /// Final-layer outputs used as softmax logits.
    pub logits: Matrix,
    pub probabilities: Matrix,
}

impl ForwardTrace {
    pub fn batch_size(&self) -> usize {
        self.logits.rows()
    }
}

/// Row-wise softmax of `logits / temperature`.
pub fn softmax_rows(logits: &Matrix, temperature: f64) -> Matrix {
    let (n, k) = logits.shape();
    let mut out = Vec::with_capacity(n * k);
    for i in 0..n {
        let row = logits.row(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|z| ((z - max) / temperature).exp()).collect();
        let sum: f64 = exps.iter().sum();
        out.extend(exps.iter().map(|e| e / sum));
    }
    Matrix::from_raw(n, k, out)
}

/// Row-wise log-softmax of `logits / temperature`.
pub fn log_softmax_rows(logits: &Matrix, temperature: f64) -> Matrix {
    let (n, k) = logits.shape();
    let mut out = Vec::with_capacity(n * k);
    for i in 0..n {
        let row = logits.row(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = row
            .iter()
            .map(|z| ((z - max) / temperature).exp())
            .sum::<f64>()
            .ln();
        out.extend(row.iter().map(|z| (z - max) / temperature - lse));
    }
    Matrix::from_raw(n, k, out)
}

pub fn forward(net: &Network, batch: &Matrix) -> Result<(Matrix, ForwardTrace)> {
    if batch.rows() == 0 {
        return Err(Error::Input("forward on an empty batch".into()));
    }
    if batch.cols() != net.input_dim() {
        return Err(Error::Shape(format!(
            "batch has {} features, network expects {}",
            batch.cols(),
            net.input_dim()
        )));
    }
    let n = batch.rows();
    let mut inputs = Vec::with_capacity(net.num_layers());
    let mut mean_inputs = Vec::with_capacity(net.num_layers());
    let mut pre_activations = Vec::with_capacity(net.num_layers());
    let mut current = batch.clone();
    for (l, layer) in net.layers.iter().enumerate() {
        mean_inputs.push(current.column_means());
        let out_dim = layer.spec.output_dim;
        let mut z = matmul(&current, &layer.weights.transpose())
            .map_err(|e| Error::Numeric(format!("layer {l}: {e}")))?;
        {
            let zd = z.data_mut();
            for i in 0..n {
                for (v, b) in zd[i * out_dim..(i + 1) * out_dim]
                    .iter_mut()
                    .zip(layer.bias.as_slice())
                {
                    *v += b;
                }
            }
            if zd.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!("non-finite pre-activation in layer {l}")));
            }
        }
        let act = layer.spec.activation;
        let a = Matrix::from_raw(n, out_dim, z.data().iter().map(|&v| act.apply(v)).collect());
        inputs.push(current);
        pre_activations.push(z);
        current = a;
    }
    let logits = current;
    let probabilities = softmax_rows(&logits, 1.0);
    let trace = ForwardTrace {
        inputs,
        mean_inputs,
        pre_activations,
        logits,
        probabilities: probabilities.clone(),
    };
    Ok((probabilities, trace))
}

/// Per-layer weight and bias arrays shaped like a network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradientSet {
    pub weights: Vec<Matrix>,
    pub biases: Vec<Vector>,
}

impl GradientSet {
    pub fn zeros_like(net: &Network) -> Self {
        GradientSet {
            weights: net
                .layers
                .iter()
                .map(|l| Matrix::zeros(l.spec.output_dim, l.spec.input_dim))
                .collect(),
            biases: net.layers.iter().map(|l| Vector::zeros(l.spec.output_dim)).collect(),
        }
    }

    pub fn check_matches(&self, net: &Network) -> Result<()> {
        if self.weights.len() != net.num_layers() || self.biases.len() != net.num_layers() {
            return Err(Error::Shape(format!(
                "update has {} layers, network has {}",
                self.weights.len(),
                net.num_layers()
            )));
        }
        for (l, layer) in net.layers.iter().enumerate() {
            if self.weights[l].shape() != layer.weights.shape()
                || self.biases[l].dim() != layer.bias.dim()
            {
                return Err(Error::Shape(format!(
                    "layer {l}: update {:?}/{} vs weights {:?}/{}",
                    self.weights[l].shape(),
                    self.biases[l].dim(),
                    layer.weights.shape(),
                    layer.bias.dim()
                )));
            }
        }
        Ok(())
    }

    /// Applies `f` elementwise to every weight and bias entry.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> GradientSet {
        GradientSet {
            weights: self
                .weights
                .iter()
                .map(|w| Matrix::from_raw(w.rows(), w.cols(), w.data().iter().map(|&v| f(v)).collect()))
                .collect(),
            biases: self
                .biases
                .iter()
                .map(|b| Vector::from_raw(b.as_slice().iter().map(|&v| f(v)).collect()))
                .collect(),
        }
    }

    pub fn scale(&self, s: f64) -> GradientSet {
        self.map(|v| v * s)
    }

    /// Elementwise `a * self + b * other`.
    pub fn combine(&self, a: f64, other: &GradientSet, b: f64) -> GradientSet {
        assert_eq!(self.weights.len(), other.weights.len(), "layer count mismatch");
        GradientSet {
            weights: self
                .weights
                .iter()
                .zip(&other.weights)
                .map(|(x, y)| {
                    assert_eq!(x.shape(), y.shape());
                    Matrix::from_raw(
                        x.rows(),
                        x.cols(),
                        x.data().iter().zip(y.data()).map(|(p, q)| a * p + b * q).collect(),
                    )
                })
                .collect(),
            biases: self
                .biases
                .iter()
                .zip(&other.biases)
                .map(|(x, y)| {
                    Vector::from_raw(
                        x.as_slice()
                            .iter()
                            .zip(y.as_slice())
                            .map(|(p, q)| a * p + b * q)
                            .collect(),
                    )
                })
                .collect(),
        }
    }

    pub fn flat(&self) -> Vec<f64> {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| w.data().iter().chain(b.as_slice()).copied())
            .collect()
    }

    pub fn norm(&self) -> f64 {
        self.flat().iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs_diff(&self, other: &GradientSet) -> f64 {
        self.flat()
            .iter()
            .zip(other.flat())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.flat().iter().all(|v| v.is_finite())
    }
}

fn check_labels(labels: &[usize], n: usize, classes: usize) -> Result<()> {
    if labels.len() != n {
        return Err(Error::Input(format!(
            "{} labels for a batch of {n} examples",
            labels.len()
        )));
    }
    if let Some(bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::Input(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }
    Ok(())
}

/// Mean cross-entropy against hard labels and its exact gradient.
pub fn backward(net: &Network, trace: &ForwardTrace, labels: &[usize]) -> Result<(f64, GradientSet)> {
    let (n, k) = trace.logits.shape();
    check_labels(labels, n, k)?;
    let log_p = log_softmax_rows(&trace.logits, 1.0);
    let loss = -labels
        .iter()
        .enumerate()
        .map(|(i, &y)| log_p[(i, y)])
        .sum::<f64>()
        / n as f64;
    let mut dlogits = trace.probabilities.clone();
    {
        let d = dlogits.data_mut();
        for (i, &y) in labels.iter().enumerate() {
            d[i * k + y] -= 1.0;
        }
        d.iter_mut().for_each(|v| *v /= n as f64);
    }
    let grads = backward_from_logits(net, trace, &dlogits)?;
    Ok((loss, grads))
}

/// Backpropagates a gradient with respect to the logits through every layer.
pub fn backward_from_logits(net: &Network, trace: &ForwardTrace, dlogits: &Matrix) -> Result<GradientSet> {
    if trace.inputs.len() != net.num_layers() || dlogits.shape() != trace.logits.shape() {
        return Err(Error::Shape("trace or logit gradient does not match the network".into()));
    }
    let n = dlogits.rows();
    let mut weights = vec![Matrix::zeros(0, 0); net.num_layers()];
    let mut biases = vec![Vector::zeros(0); net.num_layers()];
    let mut upstream = dlogits.clone();
    for l in (0..net.num_layers()).rev() {
        let layer = &net.layers[l];
        let z = &trace.pre_activations[l];
        let act = layer.spec.activation;
        let out_dim = layer.spec.output_dim;
        let dz_data: Vec<f64> = upstream
            .data()
            .iter()
            .zip(z.data())
            .map(|(&g, &zv)| g * act.derivative(zv))
            .collect();
        let dz = Matrix::from_raw(n, out_dim, dz_data);
        weights[l] = matmul(&dz.transpose(), &trace.inputs[l])?;
        let mut gb = vec![0.0; out_dim];
        for i in 0..n {
            for (g, v) in gb.iter_mut().zip(dz.row(i)) {
                *g += v;
            }
        }
        biases[l] = Vector::new(gb)?;
        if l > 0 {
            upstream = matmul(&dz, &layer.weights)?;
        }
    }
    Ok(GradientSet { weights, biases })
}

/// Cross-entropy loss only, without gradients. Used by finite-difference checks.
pub fn batch_loss(net: &Network, batch: &Matrix, labels: &[usize]) -> Result<f64> {
    let (_, trace) = forward(net, batch)?;
    check_labels(labels, batch.rows(), net.num_classes())?;
    let log_p = log_softmax_rows(&trace.logits, 1.0);
    Ok(-labels
        .iter()
        .enumerate()
        .map(|(i, &y)| log_p[(i, y)])
        .sum::<f64>()
        / batch.rows() as f64)
}

/// Argmax class per row of a probability matrix (lowest index wins ties).
pub fn argmax_rows(probs: &Matrix) -> Vec<usize> {
    (0..probs.rows())
        .map(|i| {
            let row = probs.row(i);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Replaces the parameter at flat index `idx` (weights before biases, layer by layer).
pub(crate) fn perturb_param(net: &Network, idx: usize, delta: f64) -> Network {
    let mut out = net.clone();
    let mut offset = idx;
    for layer in &mut out.layers {
        let nw = layer.weights.data().len();
        if offset < nw {
            layer.weights.data_mut()[offset] += delta;
            return out;
        }
        offset -= nw;
        let nb = layer.bias.dim();
        if offset < nb {
            layer.bias.as_mut_slice()[offset] += delta;
            return out;
        }
        offset -= nb;
    }
    panic!("parameter index {idx} out of range");
}

/// Central finite-difference gradient of `loss` over all parameters, flattened
/// in the same order as [`GradientSet::flat`].
pub fn finite_difference_gradient(
    net: &Network,
    h: f64,
    mut loss: impl FnMut(&Network) -> Result<f64>,
) -> Result<Vec<f64>> {
    let count = net.flat_params().len();
    (0..count)
        .map(|i| {
            let up = loss(&perturb_param(net, i, h))?;
            let down = loss(&perturb_param(net, i, -h))?;
            Ok((up - down) / (2.0 * h))
        })
        .collect()
}

/// Relative gradient mismatch `|a - b| / max(1, |a|, |b|)`, maximized over entries.
pub fn max_relative_error(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / 1f64.max(x.abs()).max(y.abs()))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_batch(n: usize, d: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_fn(n, d, |_, _| rng.random_range(-1.5..1.5)).unwrap()
    }

    #[test]
    fn init_is_deterministic_and_shaped() {
        let specs = [
            LayerSpec::new(4, 3, Activation::Relu),
            LayerSpec::new(3, 2, Activation::SoftmaxOutput),
        ];
        let a = init_network(&specs, 9).unwrap();
        let b = init_network(&specs, 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.layers()[0].weights.shape(), (3, 4));
        assert_eq!(a.layers()[1].weights.shape(), (2, 3));
        assert!(a.layers().iter().all(|l| l.bias.as_slice().iter().all(|b| *b == 0.0)));
    }

    #[test]
    fn init_weight_mean_is_zero_statistically() {
        let specs = [LayerSpec::new(100, 100, Activation::SoftmaxOutput)];
        let net = init_network(&specs, 3).unwrap();
        let w = net.layers()[0].weights.data();
        let n = w.len() as f64;
        let mean = w.iter().sum::<f64>() / n;
        let limit = (6.0f64 / 200.0).sqrt();
        let std_err = (limit * limit / 3.0).sqrt() / n.sqrt();
        assert!(mean.abs() <= 3.0 * std_err, "mean {mean} vs se {std_err}");
    }

    #[test]
    fn broken_chain_and_misplaced_softmax_rejected() {
        let broken = [
            LayerSpec::new(4, 3, Activation::Relu),
            LayerSpec::new(2, 2, Activation::SoftmaxOutput),
        ];
        assert!(matches!(init_network(&broken, 0), Err(Error::Shape(_))));
        let misplaced = [
            LayerSpec::new(4, 3, Activation::SoftmaxOutput),
            LayerSpec::new(3, 2, Activation::Identity),
        ];
        assert!(init_network(&misplaced, 0).is_err());
    }

    #[test]
    fn identity_layer_passes_logits_through() {
        let layer = Layer {
            spec: LayerSpec::new(3, 3, Activation::Identity),
            weights: Matrix::identity(3),
            bias: Vector::zeros(3),
        };
        let net = Network::from_layers(vec![layer]).unwrap();
        let x = Matrix::from_rows(&[vec![0.5, -1.0, 2.0]]).unwrap();
        let (_, trace) = forward(&net, &x).unwrap();
        assert_eq!(trace.logits, x);
    }

    #[test]
    fn zero_logits_give_uniform_probabilities() {
        let layer = Layer {
            spec: LayerSpec::new(2, 2, Activation::SoftmaxOutput),
            weights: Matrix::zeros(2, 2),
            bias: Vector::zeros(2),
        };
        let net = Network::from_layers(vec![layer]).unwrap();
        let (p, _) = forward(&net, &Matrix::from_rows(&[vec![1.0, 2.0]]).unwrap()).unwrap();
        assert_eq!(p.row(0), &[0.5, 0.5]);
    }

    #[test]
    fn trace_mean_matches_direct_column_mean() {
        let specs = [
            LayerSpec::new(5, 4, Activation::Tanh),
            LayerSpec::new(4, 3, Activation::SoftmaxOutput),
        ];
        let net = init_network(&specs, 1).unwrap();
        let x = random_batch(7, 5, 2);
        let (p, trace) = forward(&net, &x).unwrap();
        for j in 0..5 {
            let direct: f64 = (0..7).map(|i| x[(i, j)]).sum::<f64>() / 7.0;
            assert!((trace.mean_inputs[0][j] - direct).abs() <= 1e-12);
        }
        for l in 0..2 {
            let m = &trace.inputs[l];
            for j in 0..m.cols() {
                let direct: f64 = (0..m.rows()).map(|i| m[(i, j)]).sum::<f64>() / m.rows() as f64;
                assert!((trace.mean_inputs[l][j] - direct).abs() <= 1e-12);
            }
        }
        for i in 0..7 {
            assert!((p.row(i).iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        }
    }

    #[test]
    fn forward_rejects_wrong_width_and_empty_batch() {
        let net = init_network(&[LayerSpec::new(3, 2, Activation::SoftmaxOutput)], 0).unwrap();
        assert!(matches!(forward(&net, &Matrix::zeros(2, 4)), Err(Error::Shape(_))));
        assert!(forward(&net, &Matrix::zeros(0, 3)).is_err());
    }

    #[test]
    fn perfect_and_uniform_prediction_losses() {
        let layer = Layer {
            spec: LayerSpec::new(2, 2, Activation::SoftmaxOutput),
            weights: Matrix::zeros(2, 2),
            bias: Vector::zeros(2),
        };
        let net = Network::from_layers(vec![layer]).unwrap();
        let x = Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let (_, trace) = forward(&net, &x).unwrap();
        let (loss, _) = backward(&net, &trace, &[0]).unwrap();
        assert!((loss - 2f64.ln()).abs() < 1e-12);

        // Near one-hot output: bias +-40 saturates softmax to machine precision.
        let layer = Layer {
            spec: LayerSpec::new(2, 2, Activation::SoftmaxOutput),
            weights: Matrix::zeros(2, 2),
            bias: Vector::new(vec![40.0, -40.0]).unwrap(),
        };
        let net = Network::from_layers(vec![layer]).unwrap();
        let (_, trace) = forward(&net, &x).unwrap();
        let (loss, g) = backward(&net, &trace, &[0]).unwrap();
        assert!(loss < 1e-30);
        assert!(g.norm() < 1e-30);
    }

    #[test]
    fn label_out_of_range_is_input_error() {
        let net = init_network(&[LayerSpec::new(2, 2, Activation::SoftmaxOutput)], 0).unwrap();
        let (_, trace) = forward(&net, &Matrix::zeros(1, 2)).unwrap();
        assert!(matches!(backward(&net, &trace, &[2]), Err(Error::Input(_))));
    }

    #[test]
    fn gradients_match_finite_differences_for_every_activation() {
        for (seed, act) in [Activation::Relu, Activation::Tanh, Activation::Identity]
            .into_iter()
            .enumerate()
        {
            let specs = [
                LayerSpec::new(4, 5, act),
                LayerSpec::new(5, 3, act),
                LayerSpec::new(3, 3, Activation::SoftmaxOutput),
            ];
            let net = init_network(&specs, seed as u64 + 10).unwrap();
            let x = random_batch(6, 4, seed as u64 + 20);
            let labels = [0, 1, 2, 1, 0, 2];
            let (_, trace) = forward(&net, &x).unwrap();
            let (_, g) = backward(&net, &trace, &labels).unwrap();
            let fd = finite_difference_gradient(&net, 1e-5, |n| batch_loss(n, &x, &labels)).unwrap();
            let err = max_relative_error(&g.flat(), &fd);
            assert!(err <= 1e-4, "{act:?}: {err}");
        }
    }

    #[test]
    fn apply_update_cases() {
        let specs = [LayerSpec::new(1, 1, Activation::SoftmaxOutput)];
        let mut net = init_network(&specs, 0).unwrap();
        let before = net.clone();
        net.apply_update(&GradientSet::zeros_like(&net)).unwrap();
        assert_eq!(net, before);

        let w0 = net.layers()[0].weights[(0, 0)];
        let delta = GradientSet {
            weights: vec![Matrix::new(1, 1, vec![0.25]).unwrap()],
            biases: vec![Vector::new(vec![-0.5]).unwrap()],
        };
        net.apply_update(&delta).unwrap();
        assert_eq!(net.layers()[0].weights[(0, 0)], w0 + 0.25);
        assert_eq!(net.layers()[0].bias[0], -0.5);
        net.apply_update(&delta.scale(-1.0)).unwrap();
        assert!(net.layers()[0].weights[(0, 0)] - w0 <= 1e-15);

        let wrong = GradientSet {
            weights: vec![Matrix::zeros(2, 1)],
            biases: vec![Vector::zeros(1)],
        };
        assert!(matches!(net.apply_update(&wrong), Err(Error::Shape(_))));
    }

    #[test]
    fn snapshot_is_independent() {
        let specs = [LayerSpec::new(3, 2, Activation::SoftmaxOutput)];
        let mut net = init_network(&specs, 5).unwrap();
        let x = random_batch(4, 3, 6);
        let before = forward(&net, &x).unwrap().0;
        let snap = net.snapshot();
        assert_eq!(snap, net);
        let mut delta = GradientSet::zeros_like(&net);
        delta.weights[0] = Matrix::from_fn(2, 3, |_, _| 0.1).unwrap();
        net.apply_update(&delta).unwrap();
        assert_ne!(snap, net);
        assert_eq!(forward(&snap, &x).unwrap().0, before);
    }
}
