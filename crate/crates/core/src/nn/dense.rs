use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::rng_from_seed;

/// Elementwise activation attached to a dense layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Linear,
    Sigmoid,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Linear => x,
            Activation::Sigmoid => 1.0 / (1.0 + (-x).exp()),
        }
    }

    /// Derivative expressed through the activation's output `y`.
    #[inline]
    pub fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Linear => 1.0,
            Activation::Sigmoid => y * (1.0 - y),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Linear => "linear",
            Activation::Sigmoid => "sigmoid",
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(Activation::Tanh),
            "linear" => Ok(Activation::Linear),
            "sigmoid" => Ok(Activation::Sigmoid),
            other => Err(Error::Config(format!("unknown activation `{other}`"))),
        }
    }
}

/// Multilayer perceptron with row-major `(out × in)` weight matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseNet {
    layer_sizes: Vec<usize>,
    weights: Vec<Vec<f64>>,
    biases: Vec<Vec<f64>>,
    hidden_activation: Activation,
    final_activation: Activation,
}

/// Post-activation values of every layer, `activations[0]` being the input.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    activations: Vec<Vec<f64>>,
}

impl ForwardCache {
    pub fn input(&self) -> &[f64] {
        &self.activations[0]
    }

    pub fn output(&self) -> &[f64] {
        self.activations.last().expect("cache is never empty")
    }

    /// Activation after layer `depth` (`0` is the input).
    pub fn activation(&self, depth: usize) -> &[f64] {
        &self.activations[depth]
    }
}

/// Parameter-shaped buffer: gradients, Adam moments.
#[derive(Debug, Clone, PartialEq)]
pub struct NetGrads {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

fn validate_sizes(layer_sizes: &[usize]) -> Result<()> {
    if layer_sizes.len() < 2 {
        return Err(Error::Config(format!(
            "a dense network needs at least two layer sizes, got {layer_sizes:?}"
        )));
    }
    if layer_sizes.contains(&0) {
        return Err(Error::Config(format!("layer sizes must be positive, got {layer_sizes:?}")));
    }
    Ok(())
}

impl DenseNet {
    /// Glorot-uniform weights, zero biases.
    pub fn init(
        layer_sizes: &[usize],
        hidden_activation: Activation,
        final_activation: Activation,
        seed: u64,
    ) -> Result<Self> {
        validate_sizes(layer_sizes)?;
        let mut rng = rng_from_seed(seed);
        let mut weights = Vec::with_capacity(layer_sizes.len() - 1);
        let mut biases = Vec::with_capacity(layer_sizes.len() - 1);
        for pair in layer_sizes.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let w = (0..fan_in * fan_out).map(|_| rng.random_range(-limit..=limit)).collect();
            weights.push(w);
            biases.push(vec![0.0; fan_out]);
        }
        Ok(Self {
            layer_sizes: layer_sizes.to_vec(),
            weights,
            biases,
            hidden_activation,
            final_activation,
        })
    }

    pub fn zeros(
        layer_sizes: &[usize],
        hidden_activation: Activation,
        final_activation: Activation,
    ) -> Result<Self> {
        validate_sizes(layer_sizes)?;
        let weights = layer_sizes.windows(2).map(|p| vec![0.0; p[0] * p[1]]).collect();
        let biases = layer_sizes.windows(2).map(|p| vec![0.0; p[1]]).collect();
        Ok(Self {
            layer_sizes: layer_sizes.to_vec(),
            weights,
            biases,
            hidden_activation,
            final_activation,
        })
    }

    pub fn from_parts(
        layer_sizes: Vec<usize>,
        weights: Vec<Vec<f64>>,
        biases: Vec<Vec<f64>>,
        hidden_activation: Activation,
        final_activation: Activation,
    ) -> Result<Self> {
        validate_sizes(&layer_sizes)?;
        let layers = layer_sizes.len() - 1;
        if weights.len() != layers || biases.len() != layers {
            return Err(Error::Dimension(format!(
                "expected {layers} weight/bias layers, got {}/{}",
                weights.len(),
                biases.len()
            )));
        }
        for (i, pair) in layer_sizes.windows(2).enumerate() {
            if weights[i].len() != pair[0] * pair[1] {
                return Err(Error::dim(pair[0] * pair[1], weights[i].len(), &format!("weights {i}")));
            }
            if biases[i].len() != pair[1] {
                return Err(Error::dim(pair[1], biases[i].len(), &format!("bias {i}")));
            }
        }
        let net = Self { layer_sizes, weights, biases, hidden_activation, final_activation };
        if let Some(layer) = net.first_non_finite_layer() {
            return Err(Error::Numeric { layer, message: "non-finite parameter".into() });
        }
        Ok(net)
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    pub fn hidden_activation(&self) -> Activation {
        self.hidden_activation
    }

    pub fn final_activation(&self) -> Activation {
        self.final_activation
    }

    pub fn weights(&self) -> &[Vec<f64>] {
        &self.weights
    }

    pub fn biases(&self) -> &[Vec<f64>] {
        &self.biases
    }

    pub fn weights_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.weights
    }

    pub fn biases_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.biases
    }

    fn activation_for(&self, layer: usize) -> Activation {
        if layer + 1 == self.num_layers() {
            self.final_activation
        } else {
            self.hidden_activation
        }
    }

    pub fn param_count(&self) -> usize {
        self.weights.iter().map(Vec::len).sum::<usize>() + self.biases.iter().map(Vec::len).sum::<usize>()
    }

    /// Parameters in checkpoint order: per layer, weights then biases.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(w);
            out.extend_from_slice(b);
        }
        out
    }

    pub fn set_flat_params(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.param_count() {
            return Err(Error::dim(self.param_count(), values.len(), "flat parameters"));
        }
        let mut offset = 0;
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            let (nw, nb) = (w.len(), b.len());
            w.copy_from_slice(&values[offset..offset + nw]);
            offset += nw;
            b.copy_from_slice(&values[offset..offset + nb]);
            offset += nb;
        }
        Ok(())
    }

    pub fn first_non_finite_layer(&self) -> Option<usize> {
        (0..self.num_layers()).find(|&i| {
            self.weights[i].iter().chain(&self.biases[i]).any(|v| !v.is_finite())
        })
    }

    /// SHA-256 over the exact bit patterns of the architecture and parameters.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        for &s in &self.layer_sizes {
            hasher.update((s as u64).to_le_bytes());
        }
        hasher.update(self.hidden_activation.name().as_bytes());
        hasher.update(self.final_activation.name().as_bytes());
        for v in self.flat_params() {
            hasher.update(v.to_bits().to_le_bytes());
        }
        hex::encode(hasher.finalize())
    }

    pub fn forward(&self, input: &[f64]) -> Result<(Vec<f64>, ForwardCache)> {
        let cache = self.forward_cache(input)?;
        Ok((cache.output().to_vec(), cache))
    }

    pub fn forward_cache(&self, input: &[f64]) -> Result<ForwardCache> {
        if input.len() != self.input_dim() {
            return Err(Error::dim(self.input_dim(), input.len(), "network input"));
        }
        let mut activations = Vec::with_capacity(self.layer_sizes.len());
        activations.push(input.to_vec());
        for layer in 0..self.num_layers() {
            let next = self.layer_forward(layer, activations.last().unwrap());
            activations.push(next);
        }
        Ok(ForwardCache { activations })
    }

    /// Output only, without keeping intermediate activations.
    pub fn predict(&self, input: &[f64]) -> Result<Vec<f64>> {
        if input.len() != self.input_dim() {
            return Err(Error::dim(self.input_dim(), input.len(), "network input"));
        }
        let mut current = input.to_vec();
        for layer in 0..self.num_layers() {
            current = self.layer_forward(layer, &current);
        }
        Ok(current)
    }

    fn layer_forward(&self, layer: usize, input: &[f64]) -> Vec<f64> {
        let fan_in = self.layer_sizes[layer];
        let act = self.activation_for(layer);
        let w = &self.weights[layer];
        self.biases[layer]
            .iter()
            .enumerate()
            .map(|(row, &b)| {
                let r = &w[row * fan_in..(row + 1) * fan_in];
                let s: f64 = r.iter().zip(input).map(|(a, x)| a * x).sum();
                act.apply(s + b)
            })
            .collect()
    }

    /// Exact reverse-mode gradients of the full forward map.
    pub fn backward(&self, cache: &ForwardCache, output_gradient: &[f64]) -> Result<(NetGrads, Vec<f64>)> {
        let mut grads = NetGrads::zeros_like(self);
        let input_grad = self.backward_from(cache, self.num_layers(), output_gradient, &mut grads)?;
        Ok((grads, input_grad))
    }

    /// Accumulates parameter gradients into `grads` and returns the input gradient.
    pub fn backward_accumulate(
        &self,
        cache: &ForwardCache,
        output_gradient: &[f64],
        grads: &mut NetGrads,
    ) -> Result<Vec<f64>> {
        self.backward_from(cache, self.num_layers(), output_gradient, grads)
    }

    /// Backpropagates a gradient taken with respect to the activation after
    /// layer `depth` (`1..=num_layers`). Layers past `depth` receive no gradient.
    pub fn backward_from(
        &self,
        cache: &ForwardCache,
        depth: usize,
        gradient: &[f64],
        grads: &mut NetGrads,
    ) -> Result<Vec<f64>> {
        if cache.activations.len() != self.layer_sizes.len() {
            return Err(Error::Dimension("forward cache does not match this network".into()));
        }
        if depth == 0 || depth > self.num_layers() {
            return Err(Error::Dimension(format!("backward depth {depth} out of range")));
        }
        if gradient.len() != self.layer_sizes[depth] {
            return Err(Error::dim(self.layer_sizes[depth], gradient.len(), "activation gradient"));
        }
        if grads.weights.len() != self.num_layers() {
            return Err(Error::Dimension("gradient buffer does not match this network".into()));
        }
        let mut upstream = gradient.to_vec();
        for layer in (0..depth).rev() {
            let act = self.activation_for(layer);
            let out = &cache.activations[layer + 1];
            let input = &cache.activations[layer];
            let fan_in = self.layer_sizes[layer];
            let delta: Vec<f64> = upstream
                .iter()
                .zip(out)
                .map(|(g, &y)| g * act.derivative_from_output(y))
                .collect();
            let gw = &mut grads.weights[layer];
            let gb = &mut grads.biases[layer];
            let mut downstream = vec![0.0; fan_in];
            let w = &self.weights[layer];
            for (row, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                gb[row] += d;
                let base = row * fan_in;
                let gw_row = &mut gw[base..base + fan_in];
                let w_row = &w[base..base + fan_in];
                for k in 0..fan_in {
                    gw_row[k] += d * input[k];
                    downstream[k] += d * w_row[k];
                }
            }
            upstream = downstream;
        }
        Ok(upstream)
    }
}

impl NetGrads {
    pub fn zeros_like(net: &DenseNet) -> Self {
        Self {
            weights: net.weights.iter().map(|w| vec![0.0; w.len()]).collect(),
            biases: net.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for v in self.weights.iter_mut().chain(self.biases.iter_mut()).flatten() {
            *v *= factor;
        }
    }

    pub fn add_assign(&mut self, other: &NetGrads) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights).chain(self.biases.iter_mut().zip(&other.biases)) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(w);
            out.extend_from_slice(b);
        }
        out
    }

    pub fn is_zero(&self) -> bool {
        self.weights.iter().chain(&self.biases).flatten().all(|&v| v == 0.0)
    }

    pub(crate) fn same_shape(&self, net: &DenseNet) -> bool {
        self.weights.len() == net.weights.len()
            && self.weights.iter().zip(&net.weights).all(|(a, b)| a.len() == b.len())
            && self.biases.iter().zip(&net.biases).all(|(a, b)| a.len() == b.len())
    }
}
