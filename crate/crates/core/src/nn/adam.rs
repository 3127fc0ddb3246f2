use serde::{Deserialize, Serialize};

use super::dense::{DenseNet, NetGrads};
use crate::error::{Error, Result};

/// Adam hyperparameters. The default is the pipeline setting: `β1 = 0`,
/// `β2 = 0.999`, learning rate `1e-4`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon_fuzz: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { learning_rate: 1e-4, beta1: 0.0, beta2: 0.999, epsilon_fuzz: 1e-8 }
    }
}

impl AdamConfig {
    pub fn with_learning_rate(learning_rate: f64) -> Self {
        Self { learning_rate, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && self.learning_rate.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon_fuzz > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid Adam configuration {self:?}")))
        }
    }
}

/// Bias-corrected Adam moments for one network.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    step_count: u64,
    first_moment: NetGrads,
    second_moment: NetGrads,
}

impl AdamState {
    pub fn new(net: &DenseNet, config: AdamConfig) -> Self {
        Self {
            config,
            step_count: 0,
            first_moment: NetGrads::zeros_like(net),
            second_moment: NetGrads::zeros_like(net),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn first_moment(&self) -> &NetGrads {
        &self.first_moment
    }

    pub fn second_moment(&self) -> &NetGrads {
        &self.second_moment
    }

    /// Applies one update. Nothing is modified if any gradient is non-finite.
    pub fn step(&mut self, net: &mut DenseNet, grads: &NetGrads) -> Result<()> {
        if !grads.same_shape(net) || !self.first_moment.same_shape(net) {
            return Err(Error::Dimension("Adam: gradient/parameter shapes disagree".into()));
        }
        for (layer, (w, b)) in grads.weights.iter().zip(&grads.biases).enumerate() {
            if w.iter().chain(b).any(|g| !g.is_finite()) {
                return Err(Error::Numeric { layer, message: "non-finite gradient".into() });
            }
        }
        self.step_count += 1;
        let AdamConfig { learning_rate, beta1, beta2, epsilon_fuzz } = self.config;
        let t = self.step_count as i32;
        let correction1 = 1.0 - beta1.powi(t);
        let correction2 = 1.0 - beta2.powi(t);

        let params = net.weights_mut().iter_mut().map(|v| v.as_mut_slice());
        let moments = self.first_moment.weights.iter_mut().zip(self.second_moment.weights.iter_mut());
        let update = |p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64]| {
            for i in 0..p.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let m_hat = m[i] / correction1;
                let v_hat = v[i] / correction2;
                p[i] -= learning_rate * m_hat / (v_hat.sqrt() + epsilon_fuzz);
            }
        };
        for ((p, g), (m, v)) in params.zip(&grads.weights).zip(moments) {
            update(p, g, m, v);
        }
        let params = net.biases_mut().iter_mut().map(|v| v.as_mut_slice());
        let moments = self.first_moment.biases.iter_mut().zip(self.second_moment.biases.iter_mut());
        for ((p, g), (m, v)) in params.zip(&grads.biases).zip(moments) {
            update(p, g, m, v);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Activation;

    fn scalar_net(value: f64) -> DenseNet {
        DenseNet::from_parts(vec![1, 1], vec![vec![value]], vec![vec![0.0]], Activation::Tanh, Activation::Linear)
            .unwrap()
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut net = DenseNet::init(&[3, 4, 2], Activation::Tanh, Activation::Tanh, 1).unwrap();
        let before = net.flat_params();
        let mut adam = AdamState::new(&net, AdamConfig::default());
        let zero = NetGrads::zeros_like(&net);
        adam.step(&mut net, &zero).unwrap();
        assert_eq!(net.flat_params(), before);
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn first_update_magnitude_with_zero_beta1() {
        // m = g, v = (1-β2) g², v̂ = g²  =>  Δ = lr · g / (|g| + fuzz)
        let mut net = scalar_net(0.5);
        let mut adam = AdamState::new(&net, AdamConfig::default());
        let mut grads = NetGrads::zeros_like(&net);
        grads.weights[0][0] = 1.0;
        adam.step(&mut net, &grads).unwrap();
        let expected = 0.5 - 1e-4 * 1.0 / (1.0 + 1e-8);
        assert!((net.weights()[0][0] - expected).abs() < 1e-18);
        // Repeated g = 1 keeps v̂ = 1 under bias correction, so every step has the same size.
        let before = net.weights()[0][0];
        adam.step(&mut net, &grads).unwrap();
        let step = before - net.weights()[0][0];
        assert!((step - 1e-4 / (1.0 + 1e-8)).abs() < 1e-15, "{step}");
    }

    #[test]
    fn non_finite_gradient_reports_layer() {
        let mut net = DenseNet::init(&[2, 2, 2], Activation::Tanh, Activation::Tanh, 4).unwrap();
        let before = net.flat_params();
        let mut adam = AdamState::new(&net, AdamConfig::default());
        let mut grads = NetGrads::zeros_like(&net);
        grads.biases[1][0] = f64::INFINITY;
        let err = adam.step(&mut net, &grads).unwrap_err();
        assert!(matches!(err, Error::Numeric { layer: 1, .. }));
        assert_eq!(net.flat_params(), before);
        assert_eq!(adam.step_count(), 0);
    }

    #[test]
    fn identical_runs_are_bit_identical() {
        let run = || {
            let mut net = DenseNet::init(&[2, 3, 1], Activation::Tanh, Activation::Linear, 11).unwrap();
            let mut adam = AdamState::new(&net, AdamConfig::with_learning_rate(1e-2));
            for i in 0..20 {
                let x = [0.1 * i as f64, -0.2];
                let (out, cache) = net.forward(&x).unwrap();
                let (g, _) = net.backward(&cache, &[out[0] - 1.0]).unwrap();
                adam.step(&mut net, &g).unwrap();
            }
            net.flat_params()
        };
        let a: Vec<u64> = run().iter().map(|v| v.to_bits()).collect();
        let b: Vec<u64> = run().iter().map(|v| v.to_bits()).collect();
        assert_eq!(a, b);
    }
}
