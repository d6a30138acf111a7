//! Feed-forward networks with exact reverse-mode gradients.
//!
//! A network is a stack of dense layers `y = act(x Wᵀ + b)`. [`Mlp::forward`]
//! records a [`Tape`] of per-layer inputs and pre-activations, and
//! [`Mlp::backward`] returns the gradients of `sum(upstream ⊙ output)` with
//! respect to every parameter and to the input batch. Input gradients are what
//! lets the generator be trained through a frozen ratio network.

mod adam;
mod batch;

pub use adam::{Adam, AdamConfig};
pub use batch::Batch;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default slope of the leaky-relu hidden activation.
pub const DEFAULT_LEAKY_SLOPE: f64 = 0.2;
/// Default hidden layer widths for both networks.
pub const DEFAULT_HIDDEN: [usize; 2] = [64, 64];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "param", rename_all = "kebab-case")]
pub enum Activation {
    Linear,
    Relu,
    LeakyRelu(f64),
    Sigmoid,
    /// `C · sigmoid(z)`, with range `(0, C)`.
    ScaledSigmoid(f64),
    Tanh,
}

impl Activation {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Linear => z,
            Activation::Relu => z.max(0.0),
            Activation::LeakyRelu(s) => {
                if z > 0.0 {
                    z
                } else {
                    s * z
                }
            }
            Activation::Sigmoid => sigmoid(z),
            Activation::ScaledSigmoid(c) => c * sigmoid(z),
            Activation::Tanh => z.tanh(),
        }
    }

    /// `dy/dz` given the pre-activation `z` and the output `y`.
    #[inline]
    pub fn derivative(self, z: f64, y: f64) -> f64 {
        match self {
            Activation::Linear => 1.0,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::LeakyRelu(s) => {
                if z > 0.0 {
                    1.0
                } else {
                    s
                }
            }
            Activation::Sigmoid => y * (1.0 - y),
            Activation::ScaledSigmoid(c) => y * (1.0 - y / c),
            Activation::Tanh => 1.0 - y * y,
        }
    }
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Dense layer; `weights` is row-major `outputs × inputs`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl Dense {
    pub fn new(inputs: usize, outputs: usize, weights: Vec<f64>, bias: Vec<f64>, activation: Activation) -> Result<Self> {
        if weights.len() != inputs * outputs {
            return Err(Error::shape(format!("{outputs}x{inputs} weights"), weights.len()));
        }
        if bias.len() != outputs {
            return Err(Error::shape(format!("{outputs} biases"), bias.len()));
        }
        Ok(Dense { inputs, outputs, weights, bias, activation })
    }

    pub fn zeros(inputs: usize, outputs: usize, activation: Activation) -> Self {
        Dense {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
            activation,
        }
    }

    /// Glorot-uniform weights, zero biases.
    pub fn glorot<R: Rng + ?Sized>(inputs: usize, outputs: usize, activation: Activation, rng: &mut R) -> Self {
        let s = (6.0 / (inputs + outputs) as f64).sqrt();
        let weights = (0..inputs * outputs).map(|_| rng.random_range(-s..=s)).collect();
        Dense { inputs, outputs, weights, bias: vec![0.0; outputs], activation }
    }

    fn weight_row(&self, o: usize) -> &[f64] {
        &self.weights[o * self.inputs..(o + 1) * self.inputs]
    }

    /// Pre-activations and outputs for a batch.
    fn forward(&self, x: &Batch) -> (Batch, Batch) {
        let b = x.rows();
        let mut pre = vec![0.0; b * self.outputs];
        let mut out = vec![0.0; b * self.outputs];
        for i in 0..b {
            let xi = x.row(i);
            let zi = &mut pre[i * self.outputs..(i + 1) * self.outputs];
            let yi = &mut out[i * self.outputs..(i + 1) * self.outputs];
            for o in 0..self.outputs {
                let z = self.bias[o] + dot(xi, self.weight_row(o));
                zi[o] = z;
                yi[o] = self.activation.apply(z);
            }
        }
        (Batch::from_raw(b, self.outputs, pre), Batch::from_raw(b, self.outputs, out))
    }
}

/// Fixed-order dot product with four partial sums.
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Activation record of one forward pass.
#[derive(Debug, Clone)]
pub struct Tape {
    layers: Vec<LayerRecord>,
}

#[derive(Debug, Clone)]
struct LayerRecord {
    input: Batch,
    pre: Batch,
    output: Batch,
}

impl Tape {
    pub fn output(&self) -> &Batch {
        &self.layers.last().expect("tape of an empty network").output
    }
}

/// Gradients shaped like the network's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<DenseGrad>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseGrad {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Gradients {
    pub fn zeros_like(net: &Mlp) -> Self {
        Gradients {
            layers: net
                .layers
                .iter()
                .map(|l| DenseGrad { weights: vec![0.0; l.weights.len()], bias: vec![0.0; l.bias.len()] })
                .collect(),
        }
    }

    /// Flattened in parameter order: layer by layer, weights then bias.
    pub fn flat(&self) -> Vec<f64> {
        self.iter().collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = f64> + '_ {
        self.layers.iter().flat_map(|l| l.weights.iter().chain(l.bias.iter()).copied())
    }

    pub fn len(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn add_assign(&mut self, other: &Gradients) -> Result<()> {
        if self.len() != other.len() || self.layers.len() != other.layers.len() {
            return Err(Error::shape(self.len(), other.len()));
        }
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            axpy(1.0, &b.weights, &mut a.weights);
            axpy(1.0, &b.bias, &mut a.bias);
        }
        Ok(())
    }

    pub fn norm(&self) -> f64 {
        self.iter().map(|g| g * g).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.iter().all(f64::is_finite)
    }
}

/// Multi-layer perceptron.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    layers: Vec<Dense>,
}

impl Mlp {
    /// Builds a network from layers whose dimensions must chain.
    pub fn new(layers: Vec<Dense>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidSpec("network needs at least one layer".into()));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].outputs != pair[1].inputs {
                return Err(Error::shape(
                    format!("layer {} input {}", i + 1, pair[0].outputs),
                    pair[1].inputs,
                ));
            }
        }
        Ok(Mlp { layers })
    }

    /// Glorot-initialised network with the given layer widths
    /// (`sizes[0]` inputs, `sizes[last]` outputs).
    pub fn init<R: Rng + ?Sized>(sizes: &[usize], hidden: Activation, output: Activation, rng: &mut R) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::InvalidSpec(format!("bad layer sizes {sizes:?}")));
        }
        let n = sizes.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let act = if i + 1 == n { output } else { hidden };
                Dense::glorot(sizes[i], sizes[i + 1], act, rng)
            })
            .collect();
        Mlp::new(layers)
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].outputs
    }

    pub fn output_activation(&self) -> Activation {
        self.layers[self.layers.len() - 1].activation
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    /// Parameters flattened in the same order as [`Gradients::flat`].
    pub fn params(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(l.bias.iter()).copied())
            .collect()
    }

    /// Mutable access to parameter `index` in flattened order.
    pub fn param_mut(&mut self, mut index: usize) -> &mut f64 {
        for l in &mut self.layers {
            if index < l.weights.len() {
                return &mut l.weights[index];
            }
            index -= l.weights.len();
            if index < l.bias.len() {
                return &mut l.bias[index];
            }
            index -= l.bias.len();
        }
        panic!("parameter index out of range");
    }

    fn check_input(&self, x: &Batch) -> Result<()> {
        if x.cols() != self.input_dim() {
            return Err(Error::shape(format!("{} input features", self.input_dim()), x.cols()));
        }
        if x.rows() == 0 {
            return Err(Error::EmptyBatch);
        }
        Ok(())
    }

    /// Forward pass retaining the activation record.
    pub fn forward(&self, x: &Batch) -> Result<(Batch, Tape)> {
        self.check_input(x)?;
        let mut records = Vec::with_capacity(self.layers.len());
        let mut current = x.clone();
        for layer in &self.layers {
            let (pre, out) = layer.forward(&current);
            records.push(LayerRecord { input: current, pre, output: out.clone() });
            current = out;
        }
        if !current.is_finite() {
            return Err(Error::NonFinite("network output".into()));
        }
        Ok((current, Tape { layers: records }))
    }

    /// Forward pass without a tape.
    pub fn predict(&self, x: &Batch) -> Result<Batch> {
        self.check_input(x)?;
        let mut current = self.layers[0].forward(x).1;
        for layer in &self.layers[1..] {
            current = layer.forward(&current).1;
        }
        if !current.is_finite() {
            return Err(Error::NonFinite("network output".into()));
        }
        Ok(current)
    }

    /// Gradients of `sum(upstream ⊙ output)` with respect to the parameters
    /// and the input batch.
    pub fn backward(&self, tape: &Tape, upstream: &Batch) -> Result<(Gradients, Batch)> {
        if tape.layers.len() != self.layers.len() {
            return Err(Error::shape(format!("tape of {} layers", self.layers.len()), tape.layers.len()));
        }
        let out = tape.output();
        if upstream.rows() != out.rows() || upstream.cols() != out.cols() {
            return Err(Error::shape(
                format!("{}x{} upstream", out.rows(), out.cols()),
                format!("{}x{}", upstream.rows(), upstream.cols()),
            ));
        }
        let mut grads = Gradients::zeros_like(self);
        let mut delta = upstream.clone();
        for (k, (layer, rec)) in self.layers.iter().zip(&tape.layers).enumerate().rev() {
            let b = rec.input.rows();
            // dL/dz
            let dz = delta.as_mut_slice();
            for ((d, &z), &y) in dz.iter_mut().zip(rec.pre.as_slice()).zip(rec.output.as_slice()) {
                *d *= layer.activation.derivative(z, y);
            }
            let g = &mut grads.layers[k];
            let mut dx = vec![0.0; b * layer.inputs];
            for i in 0..b {
                let xi = rec.input.row(i);
                let dzi = &dz[i * layer.outputs..(i + 1) * layer.outputs];
                let dxi = &mut dx[i * layer.inputs..(i + 1) * layer.inputs];
                for (o, &d) in dzi.iter().enumerate() {
                    if d == 0.0 {
                        continue;
                    }
                    g.bias[o] += d;
                    axpy(d, xi, &mut g.weights[o * layer.inputs..(o + 1) * layer.inputs]);
                    axpy(d, layer.weight_row(o), dxi);
                }
            }
            delta = Batch::from_raw(b, layer.inputs, dx);
        }
        Ok((grads, delta))
    }
}
