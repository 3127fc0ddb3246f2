//! Identity transformations ψ and their Laplace-mechanism machinery.
//!
//! Three variants share one interface:
//! - `Opp`: `ψ(z) = −z`, the distance maximizer on the unit sphere;
//! - `Mlp`: `ψ(z) = normalize(MLP(z + Lap(β)ⁿ))`;
//! - `Ved`: a variational encoder-decoder. The encoder emits `(μ, logvar)`;
//!   the latent is `μ + σ·η` with Gaussian `η` in training and Laplace(α)
//!   `η` at inference; the decoder output is tanh-activated and normalized.

mod laplace;
mod losses;
mod privacy;
mod train;

use std::fmt;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

pub use laplace::{laplace_from_uniform, laplace_vec, sample_laplace};
pub use losses::{deid_with_grads, kld_grads, loss_deid, loss_kld};
pub use privacy::{budget, estimate_sensitivity, scale_to_epsilon, PrivacyBudget, SensitivityEstimate};
pub use train::{train_obfuscator, ObfuscatorTrainConfig};

use crate::error::{Error, Result};
use crate::math::{norm, normalize, normalize_backward};
use crate::nn::{Activation, Checkpoint, DenseNet, ForwardCache, NetGrads, ParamGroup};
use crate::rng::derive_seed;

pub const LOGVAR_CLAMP: f64 = 10.0;

/// Unit-norm identity embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct IdVector(Vec<f64>);

impl IdVector {
    /// Normalizes `values` onto the unit sphere.
    pub fn from_raw(values: &[f64]) -> Result<Self> {
        normalize(values).map(Self)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn negated(&self) -> Self {
        Self(self.0.iter().map(|v| -v).collect())
    }
}

impl AsRef<[f64]> for IdVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Opp,
    Mlp,
    Ved,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Opp => "opp",
            Variant::Mlp => "mlp",
            Variant::Ved => "ved",
        })
    }
}

/// Where noise comes from when a mechanism is applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseMode {
    /// Training draws: Laplace(β) for `Mlp`, Gaussian η for `Ved`.
    Train,
    /// Privacy-calibrated draws: Laplace(β) for `Mlp`, Laplace(α) η for `Ved`.
    Infer,
    /// Noise disabled; the deterministic core used for sensitivity.
    Deterministic,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Obfuscator {
    Opp,
    Mlp { net: DenseNet, beta: f64 },
    Ved { encoder: DenseNet, decoder: DenseNet, alpha: f64 },
}

/// Architecture and noise parameters for building an [`Obfuscator`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObfuscatorConfig {
    pub variant: Variant,
    pub mlp_hidden: Vec<usize>,
    pub beta: f64,
    pub ved_encoder_hidden: Vec<usize>,
    pub latent_dim: usize,
    pub ved_decoder_hidden: Vec<usize>,
    pub alpha: f64,
}

impl Default for ObfuscatorConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Ved,
            mlp_hidden: vec![256, 128],
            beta: 0.0,
            ved_encoder_hidden: vec![128, 128],
            latent_dim: 32,
            ved_decoder_hidden: vec![128, 128],
            alpha: 1.0,
        }
    }
}

impl ObfuscatorConfig {
    pub fn build(&self, n_z: usize, seed: u64) -> Result<Obfuscator> {
        let sizes = |hidden: &[usize], first: usize, last: usize| {
            let mut s = vec![first];
            s.extend_from_slice(hidden);
            s.push(last);
            s
        };
        match self.variant {
            Variant::Opp => Ok(Obfuscator::Opp),
            Variant::Mlp => Obfuscator::mlp(
                DenseNet::init(&sizes(&self.mlp_hidden, n_z, n_z), Activation::Tanh, Activation::Tanh, seed)?,
                self.beta,
            ),
            Variant::Ved => {
                if self.latent_dim == 0 {
                    return Err(Error::Config("VED latent dimension must be positive".into()));
                }
                let encoder = DenseNet::init(
                    &sizes(&self.ved_encoder_hidden, n_z, 2 * self.latent_dim),
                    Activation::Tanh,
                    Activation::Linear,
                    derive_seed(seed, "encoder"),
                )?;
                let decoder = DenseNet::init(
                    &sizes(&self.ved_decoder_hidden, self.latent_dim, n_z),
                    Activation::Tanh,
                    Activation::Tanh,
                    derive_seed(seed, "decoder"),
                )?;
                Obfuscator::ved(encoder, decoder, self.alpha)
            }
        }
    }
}

/// JSON sidecar stored next to an obfuscator checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObfuscatorSidecar {
    pub variant: Variant,
    pub beta: Option<f64>,
    pub alpha: Option<f64>,
    pub n_v: Option<usize>,
    pub delta_psi: Option<f64>,
    pub epsilon: Option<f64>,
}

/// Forward state of one transformation, for backpropagation.
#[derive(Debug, Clone)]
pub enum ObfTrace {
    Opp {
        z_tilde: IdVector,
    },
    Mlp {
        cache: ForwardCache,
        raw_norm: f64,
        z_tilde: IdVector,
    },
    Ved {
        encoder: ForwardCache,
        decoder: ForwardCache,
        mu: Vec<f64>,
        logvar: Vec<f64>,
        clamped: Vec<bool>,
        eta: Vec<f64>,
        raw_norm: f64,
        z_tilde: IdVector,
    },
}

impl ObfTrace {
    pub fn z_tilde(&self) -> &IdVector {
        match self {
            ObfTrace::Opp { z_tilde } | ObfTrace::Mlp { z_tilde, .. } | ObfTrace::Ved { z_tilde, .. } => z_tilde,
        }
    }

    /// KL term of the VED latent; 0 for other variants.
    pub fn kld(&self) -> f64 {
        match self {
            ObfTrace::Ved { mu, logvar, .. } => loss_kld(mu, logvar),
            _ => 0.0,
        }
    }
}

pub fn psi_opp(z: &IdVector) -> IdVector {
    z.negated()
}

fn check_nonneg(name: &str, v: f64) -> Result<()> {
    if v >= 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} must be a nonnegative real, got {v}")))
    }
}

fn finite_unit(raw: &[f64]) -> Result<IdVector> {
    if raw.iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericValue("obfuscator produced a non-finite output".into()));
    }
    IdVector::from_raw(raw)
}

/// Draws the VED latent: `μ + σ·η`, `σ = exp(½·logvar)`.
pub fn ved_sample<R: Rng + ?Sized>(
    mu: &[f64],
    logvar: &[f64],
    mode: NoiseMode,
    alpha: f64,
    rng: &mut R,
) -> Result<Vec<f64>> {
    ved_sample_with_noise(mu, logvar, mode, alpha, rng).map(|(v, _)| v)
}

fn ved_sample_with_noise<R: Rng + ?Sized>(
    mu: &[f64],
    logvar: &[f64],
    mode: NoiseMode,
    alpha: f64,
    rng: &mut R,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if mu.len() != logvar.len() {
        return Err(Error::dim(mu.len(), logvar.len(), "logvar"));
    }
    let eta: Vec<f64> = match mode {
        NoiseMode::Train => (0..mu.len()).map(|_| rng.sample(StandardNormal)).collect(),
        NoiseMode::Infer => {
            check_nonneg("alpha", alpha)?;
            laplace_vec(mu.len(), alpha, rng)?
        }
        NoiseMode::Deterministic => vec![0.0; mu.len()],
    };
    let v = mu
        .iter()
        .zip(logvar)
        .zip(&eta)
        .map(|((m, lv), e)| {
            let sigma = (0.5 * lv).exp();
            if sigma == 0.0 {
                *m
            } else {
                m + sigma * e
            }
        })
        .collect();
    Ok((v, eta))
}

impl Obfuscator {
    pub fn mlp(net: DenseNet, beta: f64) -> Result<Self> {
        check_nonneg("beta", beta)?;
        if net.input_dim() != net.output_dim() {
            return Err(Error::Dimension("MLP obfuscator must map n_Z to n_Z".into()));
        }
        Ok(Obfuscator::Mlp { net, beta })
    }

    pub fn ved(encoder: DenseNet, decoder: DenseNet, alpha: f64) -> Result<Self> {
        check_nonneg("alpha", alpha)?;
        if !encoder.output_dim().is_multiple_of(2) || encoder.output_dim() / 2 != decoder.input_dim() {
            return Err(Error::Dimension(format!(
                "VED encoder must emit 2·n_v = 2·{} values, emits {}",
                decoder.input_dim(),
                encoder.output_dim()
            )));
        }
        if encoder.input_dim() != decoder.output_dim() {
            return Err(Error::Dimension("VED must map n_Z to n_Z".into()));
        }
        Ok(Obfuscator::Ved { encoder, decoder, alpha })
    }

    pub fn variant(&self) -> Variant {
        match self {
            Obfuscator::Opp => Variant::Opp,
            Obfuscator::Mlp { .. } => Variant::Mlp,
            Obfuscator::Ved { .. } => Variant::Ved,
        }
    }

    /// Current noise scale (β or α; 0 for `Opp`).
    pub fn noise_scale(&self) -> f64 {
        match self {
            Obfuscator::Opp => 0.0,
            Obfuscator::Mlp { beta, .. } => *beta,
            Obfuscator::Ved { alpha, .. } => *alpha,
        }
    }

    pub fn set_noise_scale(&mut self, scale: f64) -> Result<()> {
        check_nonneg("noise scale", scale)?;
        match self {
            Obfuscator::Opp => {}
            Obfuscator::Mlp { beta, .. } => *beta = scale,
            Obfuscator::Ved { alpha, .. } => *alpha = scale,
        }
        Ok(())
    }

    pub fn latent_dim(&self) -> Option<usize> {
        match self {
            Obfuscator::Ved { decoder, .. } => Some(decoder.input_dim()),
            _ => None,
        }
    }

    fn check_input(&self, z: &IdVector) -> Result<()> {
        let expected = match self {
            Obfuscator::Opp => return Ok(()),
            Obfuscator::Mlp { net, .. } => net.input_dim(),
            Obfuscator::Ved { encoder, .. } => encoder.input_dim(),
        };
        if z.dim() != expected {
            return Err(Error::dim(expected, z.dim(), "identity vector"));
        }
        Ok(())
    }

    /// Encoder output split into `(μ, logvar)`, logvar clamped to ±[`LOGVAR_CLAMP`].
    pub fn ved_encode(&self, z: &IdVector) -> Result<(Vec<f64>, Vec<f64>)> {
        let Obfuscator::Ved { encoder, .. } = self else {
            return Err(Error::Config("ved_encode needs a VED obfuscator".into()));
        };
        self.check_input(z)?;
        let out = encoder.predict(z.as_slice())?;
        let n_v = out.len() / 2;
        let logvar = out[n_v..].iter().map(|v| v.clamp(-LOGVAR_CLAMP, LOGVAR_CLAMP)).collect();
        Ok((out[..n_v].to_vec(), logvar))
    }

    pub fn ved_decode(&self, v: &[f64]) -> Result<IdVector> {
        let Obfuscator::Ved { decoder, .. } = self else {
            return Err(Error::Config("ved_decode needs a VED obfuscator".into()));
        };
        finite_unit(&decoder.predict(v)?)
    }

    pub fn apply<R: Rng + ?Sized>(&self, z: &IdVector, mode: NoiseMode, rng: &mut R) -> Result<IdVector> {
        match self {
            Obfuscator::Opp => Ok(psi_opp(z)),
            _ => self.apply_traced(z, mode, rng).map(|t| t.z_tilde().clone()),
        }
    }

    /// The noise-free map whose sensitivity calibrates the Laplace scale.
    pub fn deterministic(&self, z: &IdVector) -> Result<IdVector> {
        self.apply(z, NoiseMode::Deterministic, &mut crate::rng::rng_from_seed(0))
    }

    pub fn apply_traced<R: Rng + ?Sized>(&self, z: &IdVector, mode: NoiseMode, rng: &mut R) -> Result<ObfTrace> {
        self.check_input(z)?;
        match self {
            Obfuscator::Opp => Ok(ObfTrace::Opp { z_tilde: psi_opp(z) }),
            Obfuscator::Mlp { net, beta } => {
                let input: Vec<f64> = match mode {
                    NoiseMode::Deterministic => z.as_slice().to_vec(),
                    NoiseMode::Train | NoiseMode::Infer => {
                        let noise = laplace_vec(z.dim(), *beta, rng)?;
                        z.as_slice().iter().zip(noise).map(|(a, n)| a + n).collect()
                    }
                };
                let cache = net.forward_cache(&input)?;
                let raw_norm = norm(cache.output());
                let z_tilde = finite_unit(cache.output())?;
                Ok(ObfTrace::Mlp { cache, raw_norm, z_tilde })
            }
            Obfuscator::Ved { encoder, decoder, alpha } => {
                let enc = encoder.forward_cache(z.as_slice())?;
                let n_v = decoder.input_dim();
                let out = enc.output();
                let mu = out[..n_v].to_vec();
                let clamped: Vec<bool> = out[n_v..].iter().map(|v| v.abs() > LOGVAR_CLAMP).collect();
                let logvar: Vec<f64> = out[n_v..].iter().map(|v| v.clamp(-LOGVAR_CLAMP, LOGVAR_CLAMP)).collect();
                let (v, eta) = ved_sample_with_noise(&mu, &logvar, mode, *alpha, rng)?;
                let dec = decoder.forward_cache(&v)?;
                let raw_norm = norm(dec.output());
                let z_tilde = finite_unit(dec.output())?;
                Ok(ObfTrace::Ved { encoder: enc, decoder: dec, mu, logvar, clamped, eta, raw_norm, z_tilde })
            }
        }
    }

    /// Accumulates parameter gradients of `L(z̃) + kld_weight·KLD` into `grads`
    /// (ordered as [`ParamGroup::nets`]) and returns `∂L/∂z`.
    pub fn backward(
        &self,
        trace: &ObfTrace,
        grad_z_tilde: &[f64],
        kld_weight: f64,
        grads: &mut [NetGrads],
    ) -> Result<Vec<f64>> {
        match (self, trace) {
            (Obfuscator::Opp, ObfTrace::Opp { .. }) => Ok(grad_z_tilde.iter().map(|g| -g).collect()),
            (Obfuscator::Mlp { net, .. }, ObfTrace::Mlp { cache, raw_norm, z_tilde }) => {
                let g_raw = normalize_backward(z_tilde.as_slice(), *raw_norm, grad_z_tilde);
                net.backward_accumulate(cache, &g_raw, &mut grads[0])
            }
            (
                Obfuscator::Ved { encoder, decoder, .. },
                ObfTrace::Ved { encoder: enc, decoder: dec, mu, logvar, clamped, eta, raw_norm, z_tilde },
            ) => {
                let g_raw = normalize_backward(z_tilde.as_slice(), *raw_norm, grad_z_tilde);
                let g_v = decoder.backward_accumulate(dec, &g_raw, &mut grads[1])?;
                let (k_mu, k_lv) = kld_grads(mu, logvar);
                let mut g_enc = Vec::with_capacity(2 * mu.len());
                for i in 0..mu.len() {
                    g_enc.push(g_v[i] + kld_weight * k_mu[i]);
                }
                for i in 0..mu.len() {
                    let sigma = (0.5 * logvar[i]).exp();
                    let g = g_v[i] * 0.5 * sigma * eta[i] + kld_weight * k_lv[i];
                    g_enc.push(if clamped[i] { 0.0 } else { g });
                }
                encoder.backward_accumulate(enc, &g_enc, &mut grads[0])
            }
            _ => Err(Error::Config("trace does not belong to this obfuscator".into())),
        }
    }

    pub fn sidecar(&self, delta_psi: Option<f64>) -> ObfuscatorSidecar {
        let scale = self.noise_scale();
        let epsilon = delta_psi.and_then(|d| scale_to_epsilon(d, scale).ok());
        ObfuscatorSidecar {
            variant: self.variant(),
            beta: matches!(self, Obfuscator::Mlp { .. }).then_some(scale),
            alpha: matches!(self, Obfuscator::Ved { .. }).then_some(scale),
            n_v: self.latent_dim(),
            delta_psi,
            epsilon,
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        match self {
            Obfuscator::Opp => Checkpoint::new("obfuscator-opp"),
            Obfuscator::Mlp { net, .. } => Checkpoint::new("obfuscator-mlp").with("mlp", net),
            Obfuscator::Ved { encoder, decoder, .. } => {
                Checkpoint::new("obfuscator-ved").with("encoder", encoder).with("decoder", decoder)
            }
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint, sidecar: &ObfuscatorSidecar) -> Result<Self> {
        match (ck.model_kind.as_str(), sidecar.variant) {
            ("obfuscator-opp", Variant::Opp) => Ok(Obfuscator::Opp),
            ("obfuscator-mlp", Variant::Mlp) => Obfuscator::mlp(ck.net("mlp")?.clone(), sidecar.beta.unwrap_or(0.0)),
            ("obfuscator-ved", Variant::Ved) => Obfuscator::ved(
                ck.net("encoder")?.clone(),
                ck.net("decoder")?.clone(),
                sidecar.alpha.unwrap_or(0.0),
            ),
            (kind, variant) => Err(Error::Config(format!("checkpoint `{kind}` does not match sidecar variant {variant}"))),
        }
    }
}

impl ParamGroup for Obfuscator {
    fn nets(&self) -> Vec<&DenseNet> {
        match self {
            Obfuscator::Opp => vec![],
            Obfuscator::Mlp { net, .. } => vec![net],
            Obfuscator::Ved { encoder, decoder, .. } => vec![encoder, decoder],
        }
    }

    fn nets_mut(&mut self) -> Vec<&mut DenseNet> {
        match self {
            Obfuscator::Opp => vec![],
            Obfuscator::Mlp { net, .. } => vec![net],
            Obfuscator::Ved { encoder, decoder, .. } => vec![encoder, decoder],
        }
    }
}
