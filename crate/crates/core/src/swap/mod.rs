//! Feature-space swap generator `g(x, z) = decoder(injector(encoder(x) ‖ z))`
//! with its critic, loss suite, and two-phase training.

mod losses;
mod train;

use serde::{Deserialize, Serialize};

pub use losses::{
    critic_loss, critic_loss_with_grads, gen_with_grads, loss_gen, loss_id, loss_mix, loss_uti, uti_with_grads,
    CLAMP_EPS,
};
pub use train::{
    phase2_generator_step, self_swap_id_loss, GeneratorStep, train_phase1, train_phase2, LossWeights, Phase1Config, Phase2Config, Phase2Context,
    StepLosses,
};

use crate::error::{Error, Result};
use crate::nn::{Activation, Checkpoint, DenseNet, ForwardCache, NetGrads, ParamGroup};
use crate::obfuscator::IdVector;
use crate::rng::derive_seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SwapConfig {
    pub encoder_hidden: Vec<usize>,
    pub code_dim: usize,
    pub injector_hidden: Vec<usize>,
    pub injector_dim: usize,
    pub decoder_hidden: Vec<usize>,
    pub critic_hidden: Vec<usize>,
}

impl Default for SwapConfig {
    fn default() -> Self {
        Self {
            encoder_hidden: vec![64],
            code_dim: 32,
            injector_hidden: vec![64],
            injector_dim: 64,
            decoder_hidden: vec![64],
            critic_hidden: vec![64],
        }
    }
}

fn chain(first: usize, hidden: &[usize], last: usize) -> Vec<usize> {
    let mut s = vec![first];
    s.extend_from_slice(hidden);
    s.push(last);
    s
}

#[derive(Debug, Clone, PartialEq)]
pub struct SwapModel {
    encoder: DenseNet,
    injector: DenseNet,
    decoder: DenseNet,
}

#[derive(Debug, Clone)]
pub struct SwapTrace {
    encoder: ForwardCache,
    injector: ForwardCache,
    decoder: ForwardCache,
}

impl SwapTrace {
    pub fn output(&self) -> &[f64] {
        self.decoder.output()
    }
}

impl SwapModel {
    pub fn init(n_feature: usize, n_z: usize, config: &SwapConfig, seed: u64) -> Result<Self> {
        let encoder = DenseNet::init(
            &chain(n_feature, &config.encoder_hidden, config.code_dim),
            Activation::Tanh,
            Activation::Tanh,
            derive_seed(seed, "encoder"),
        )?;
        let injector = DenseNet::init(
            &chain(config.code_dim + n_z, &config.injector_hidden, config.injector_dim),
            Activation::Tanh,
            Activation::Tanh,
            derive_seed(seed, "injector"),
        )?;
        let decoder = DenseNet::init(
            &chain(config.injector_dim, &config.decoder_hidden, n_feature),
            Activation::Tanh,
            Activation::Linear,
            derive_seed(seed, "decoder"),
        )?;
        Self::from_nets(encoder, injector, decoder)
    }

    pub fn from_nets(encoder: DenseNet, injector: DenseNet, decoder: DenseNet) -> Result<Self> {
        if injector.input_dim() <= encoder.output_dim() {
            return Err(Error::Dimension("injector input must hold the code and an identity vector".into()));
        }
        if decoder.input_dim() != injector.output_dim() {
            return Err(Error::dim(injector.output_dim(), decoder.input_dim(), "decoder input"));
        }
        if decoder.output_dim() != encoder.input_dim() {
            return Err(Error::Dimension("decoder must emit the feature dimension".into()));
        }
        Ok(Self { encoder, injector, decoder })
    }

    pub fn n_feature(&self) -> usize {
        self.encoder.input_dim()
    }

    pub fn n_z(&self) -> usize {
        self.injector.input_dim() - self.encoder.output_dim()
    }

    pub fn encoder(&self) -> &DenseNet {
        &self.encoder
    }

    pub fn injector(&self) -> &DenseNet {
        &self.injector
    }

    pub fn decoder(&self) -> &DenseNet {
        &self.decoder
    }

    fn check(&self, x: &[f64], z: &[f64]) -> Result<()> {
        if x.len() != self.n_feature() {
            return Err(Error::dim(self.n_feature(), x.len(), "swap input"));
        }
        if z.len() != self.n_z() {
            return Err(Error::dim(self.n_z(), z.len(), "injected identity"));
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64], z: &IdVector) -> Result<Vec<f64>> {
        self.forward_raw(x, z.as_slice())
    }

    pub fn forward_raw(&self, x: &[f64], z: &[f64]) -> Result<Vec<f64>> {
        self.check(x, z)?;
        let mut code = self.encoder.predict(x)?;
        code.extend_from_slice(z);
        self.decoder.predict(&self.injector.predict(&code)?)
    }

    pub fn forward_traced(&self, x: &[f64], z: &[f64]) -> Result<SwapTrace> {
        self.check(x, z)?;
        let encoder = self.encoder.forward_cache(x)?;
        let mut code = encoder.output().to_vec();
        code.extend_from_slice(z);
        let injector = self.injector.forward_cache(&code)?;
        let decoder = self.decoder.forward_cache(injector.output())?;
        Ok(SwapTrace { encoder, injector, decoder })
    }

    /// Accumulates parameter gradients (encoder, injector, decoder order) and
    /// returns the gradient with respect to the injected identity vector.
    pub fn backward(&self, trace: &SwapTrace, grad_out: &[f64], grads: &mut [NetGrads]) -> Result<Vec<f64>> {
        if grads.len() != 3 {
            return Err(Error::Dimension("swap gradients need three buffers".into()));
        }
        let g_code = self.decoder.backward_accumulate(&trace.decoder, grad_out, &mut grads[2])?;
        let g_in = self.injector.backward_accumulate(&trace.injector, &g_code, &mut grads[1])?;
        let k = self.encoder.output_dim();
        self.encoder.backward_accumulate(&trace.encoder, &g_in[..k], &mut grads[0])?;
        Ok(g_in[k..].to_vec())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::new("swap")
            .with("encoder", &self.encoder)
            .with("injector", &self.injector)
            .with("decoder", &self.decoder)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind("swap")?;
        Self::from_nets(ck.net("encoder")?.clone(), ck.net("injector")?.clone(), ck.net("decoder")?.clone())
    }
}

impl ParamGroup for SwapModel {
    fn nets(&self) -> Vec<&DenseNet> {
        vec![&self.encoder, &self.injector, &self.decoder]
    }

    fn nets_mut(&mut self) -> Vec<&mut DenseNet> {
        vec![&mut self.encoder, &mut self.injector, &mut self.decoder]
    }
}

/// `k_d` critics scoring `(x, x̃)` pairs with a sigmoid output.
#[derive(Debug, Clone, PartialEq)]
pub struct Critics {
    nets: Vec<DenseNet>,
}

impl Critics {
    pub fn init(n_feature: usize, k_d: usize, hidden: &[usize], seed: u64) -> Result<Self> {
        if k_d == 0 {
            return Err(Error::Config("at least one critic is required".into()));
        }
        let nets = (0..k_d)
            .map(|i| {
                DenseNet::init(
                    &chain(2 * n_feature, hidden, 1),
                    Activation::Tanh,
                    Activation::Sigmoid,
                    derive_seed(seed, &format!("critic{i}")),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { nets })
    }

    pub fn from_nets(nets: Vec<DenseNet>) -> Result<Self> {
        if nets.is_empty() {
            return Err(Error::Config("at least one critic is required".into()));
        }
        for n in &nets {
            if n.output_dim() != 1 || n.final_activation() != Activation::Sigmoid || n.input_dim() % 2 != 0 {
                return Err(Error::Config("critics map a feature pair to one sigmoid score".into()));
            }
        }
        Ok(Self { nets })
    }

    pub fn len(&self) -> usize {
        self.nets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nets.is_empty()
    }

    pub fn nets_slice(&self) -> &[DenseNet] {
        &self.nets
    }

    fn pair(x: &[f64], other: &[f64]) -> Vec<f64> {
        let mut v = x.to_vec();
        v.extend_from_slice(other);
        v
    }

    /// Score of every critic on `(x, other)`.
    pub fn scores(&self, x: &[f64], other: &[f64]) -> Result<Vec<f64>> {
        let input = Self::pair(x, other);
        self.nets.iter().map(|n| n.predict(&input).map(|o| o[0])).collect()
    }

    pub(crate) fn traced(&self, x: &[f64], other: &[f64]) -> Result<Vec<ForwardCache>> {
        let input = Self::pair(x, other);
        self.nets.iter().map(|n| n.forward_cache(&input)).collect()
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        self.nets
            .iter()
            .enumerate()
            .fold(Checkpoint::new("critic"), |ck, (i, n)| ck.with(format!("critic{i}"), n))
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind("critic")?;
        Self::from_nets(ck.nets.iter().map(|(_, n)| n.clone()).collect())
    }
}

impl ParamGroup for Critics {
    fn nets(&self) -> Vec<&DenseNet> {
        self.nets.iter().collect()
    }

    fn nets_mut(&mut self) -> Vec<&mut DenseNet> {
        self.nets.iter_mut().collect()
    }
}
