//! Bias-free dense feed-forward networks.
//!
//! A network with `L` layers maps `x ∈ R^d` to logits
//! `W^L ρ(W^{L-1} … ρ(W^1 x))`. Layer numbers are 1-based throughout the
//! public API (`layer(1)` is the input layer, `layer(L)` the output layer),
//! matching how perturbation sets are written. `weights()[k - 1]` is `W^k`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::linalg::{argmax, Matrix};

/// Element-wise activation applied after every hidden layer.
///
/// Only ReLU is provided. Any non-negative, monotone, 1-Lipschitz function
/// would satisfy the assumptions the bounds rely on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
}

impl Activation {
    #[inline]
    pub fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Relu => v.max(0.0),
        }
    }

    /// Derivative used by backprop; the kink at 0 takes the zero branch.
    #[inline]
    pub fn derivative(self, pre: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// Layer widths `(d, d_1, …, d_L)` plus the activation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    layer_dims: Vec<usize>,
    activation: Activation,
}

impl NetworkSpec {
    pub fn new(layer_dims: Vec<usize>, activation: Activation) -> Result<Self> {
        if layer_dims.len() < 3 {
            return Err(Error::InvalidNetwork(format!(
                "need at least 2 layers (3 dimensions), got dims {layer_dims:?}"
            )));
        }
        if layer_dims.contains(&0) {
            return Err(Error::InvalidNetwork(format!(
                "all dimensions must be >= 1, got {layer_dims:?}"
            )));
        }
        Ok(NetworkSpec {
            layer_dims,
            activation,
        })
    }

    pub fn relu(layer_dims: Vec<usize>) -> Result<Self> {
        NetworkSpec::new(layer_dims, Activation::Relu)
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    /// Number of weight layers `L`.
    pub fn num_layers(&self) -> usize {
        self.layer_dims.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn num_classes(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }

    pub fn max_dim(&self) -> usize {
        self.layer_dims.iter().copied().max().unwrap_or(0)
    }
}

/// Feed-forward network without bias terms.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    spec: NetworkSpec,
    weights: Vec<Matrix>,
}

/// Per-layer outputs of a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    /// `W^L z^{L-1}`; no activation on the output layer.
    pub logits: Vec<f64>,
    /// Post-activation outputs `z^1 … z^{L-1}`.
    pub layer_outputs: Vec<Vec<f64>>,
}

impl ForwardTrace {
    /// `z^k` for `1 <= k <= L-1`.
    pub fn output(&self, k: usize) -> &[f64] {
        &self.layer_outputs[k - 1]
    }
}

impl Network {
    /// Wraps weights `W^1 … W^L`, checking that the shapes chain.
    pub fn new(activation: Activation, weights: Vec<Matrix>) -> Result<Self> {
        let first = weights
            .first()
            .ok_or_else(|| Error::InvalidNetwork("no weight matrices".into()))?;
        let mut dims = vec![first.cols()];
        for (k, w) in weights.iter().enumerate() {
            if w.cols() != *dims.last().unwrap() {
                return Err(Error::InvalidNetwork(format!(
                    "W^{} has {} columns but the previous layer has width {}",
                    k + 1,
                    w.cols(),
                    dims.last().unwrap()
                )));
            }
            if !w.all_finite() {
                return Err(Error::NonFinite { what: "weights" });
            }
            dims.push(w.rows());
        }
        let spec = NetworkSpec::new(dims, activation)?;
        Ok(Network { spec, weights })
    }

    /// Uniform `[-a, a]` initialization with `a = sqrt(6 / (d_in + d_out))`.
    pub fn init(spec: &NetworkSpec, seed: u64) -> Network {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims = spec.layer_dims();
        let weights = dims
            .windows(2)
            .map(|w| {
                let (d_in, d_out) = (w[0], w[1]);
                let a = (6.0 / (d_in + d_out) as f64).sqrt();
                Matrix::from_fn(d_out, d_in, |_, _| rng.gen_range(-a..=a))
            })
            .collect();
        Network {
            spec: spec.clone(),
            weights,
        }
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn activation(&self) -> Activation {
        self.spec.activation
    }

    pub fn num_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes()
    }

    pub fn input_dim(&self) -> usize {
        self.spec.input_dim()
    }

    pub fn weights(&self) -> &[Matrix] {
        &self.weights
    }

    /// Mutable access for optimizers. Shapes must not change.
    pub fn weights_mut(&mut self) -> &mut [Matrix] {
        &mut self.weights
    }

    /// `W^k`, 1-based.
    pub fn layer(&self, k: usize) -> &Matrix {
        &self.weights[k - 1]
    }

    /// Same architecture, different weights.
    pub fn with_weights(&self, weights: Vec<Matrix>) -> Result<Network> {
        let net = Network::new(self.activation(), weights)?;
        if net.spec != self.spec {
            return Err(Error::InvalidNetwork(format!(
                "replacement weights have dims {:?}, expected {:?}",
                net.spec.layer_dims(),
                self.spec.layer_dims()
            )));
        }
        Ok(net)
    }

    pub fn parameter_count(&self) -> usize {
        self.weights.iter().map(|w| w.rows() * w.cols()).sum()
    }

    pub fn forward(&self, x: &[f64]) -> Result<ForwardTrace> {
        if x.len() != self.input_dim() {
            return Err(Error::dimension("forward", self.input_dim(), x.len()));
        }
        let act = self.activation();
        let last = self.num_layers() - 1;
        let mut layer_outputs = Vec::with_capacity(last);
        let mut z = x.to_vec();
        for w in &self.weights[..last] {
            let mut a = w.matvec(&z)?;
            a.iter_mut().for_each(|v| *v = act.apply(*v));
            layer_outputs.push(a.clone());
            z = a;
        }
        let logits = self.weights[last].matvec(&z)?;
        Ok(ForwardTrace {
            logits,
            layer_outputs,
        })
    }

    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.forward(x).map(|t| t.logits)
    }

    /// Logits for every row of `inputs` (one sample per row).
    pub fn logits_batch(&self, inputs: &Matrix) -> Result<Matrix> {
        if inputs.cols() != self.input_dim() {
            return Err(Error::dimension(
                "logits_batch",
                self.input_dim(),
                inputs.cols(),
            ));
        }
        let act = self.activation();
        let last = self.num_layers() - 1;
        let mut z = inputs.matmul_transpose_b(&self.weights[0])?;
        if last == 0 {
            return Ok(z);
        }
        z.as_mut_slice().iter_mut().for_each(|v| *v = act.apply(*v));
        for (k, w) in self.weights.iter().enumerate().skip(1) {
            z = z.matmul_transpose_b(w)?;
            if k < last {
                z.as_mut_slice().iter_mut().for_each(|v| *v = act.apply(*v));
            }
        }
        Ok(z)
    }

    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        Ok(predict(&self.logits(x)?))
    }

    /// Fraction of samples whose predicted label matches.
    pub fn accuracy(&self, data: &Dataset) -> Result<f64> {
        accuracy(self, data)
    }
}

/// `[f(x)]_y − max_{y'≠y} [f(x)]_{y'}`.
pub fn margin(logits: &[f64], y: usize) -> Result<f64> {
    check_label(logits, y)?;
    let best_other = logits
        .iter()
        .enumerate()
        .filter(|&(k, _)| k != y)
        .map(|(_, &v)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(logits[y] - best_other)
}

/// `f^{ij} = [f]_i − [f]_j`: positive when class `i` beats class `j`.
pub fn pairwise_margin(logits: &[f64], i: usize, j: usize) -> f64 {
    logits[i] - logits[j]
}

/// Index of the largest competitor `y' ≠ y` (lowest index on ties).
pub fn runner_up(logits: &[f64], y: usize) -> usize {
    let mut best = None::<(usize, f64)>;
    for (k, &v) in logits.iter().enumerate() {
        if k != y && best.map_or(true, |(_, b)| v > b) {
            best = Some((k, v));
        }
    }
    best.map(|(k, _)| k).unwrap_or(0)
}

/// Argmax of the logits, ties broken by lowest index.
pub fn predict(logits: &[f64]) -> usize {
    argmax(logits).0
}

pub fn accuracy(net: &Network, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let logits = net.logits_batch(data.inputs())?;
    let correct = (0..data.len())
        .filter(|&i| predict(logits.row(i)) == data.label(i))
        .count();
    Ok(correct as f64 / data.len() as f64)
}

fn check_label(logits: &[f64], y: usize) -> Result<()> {
    if logits.len() < 2 || y >= logits.len() {
        return Err(Error::InvalidLabel {
            label: y,
            classes: logits.len(),
        });
    }
    Ok(())
}
