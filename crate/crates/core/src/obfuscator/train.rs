use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{deid_with_grads, IdVector, NoiseMode, Obfuscator};
use crate::error::{Error, Result};
use crate::nn::{scale_all, AdamConfig, GroupOptimizer, ParamGroup};
use crate::rng::{derive_seed, rng_from_seed};
use crate::world::{EnsembleExtractor, World};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObfuscatorTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lambda_deid: f64,
    pub lambda_kld: f64,
    pub seed: u64,
}

impl Default for ObfuscatorTrainConfig {
    fn default() -> Self {
        Self { steps: 2000, batch_size: 16, learning_rate: 1e-3, lambda_deid: 30.0, lambda_kld: 6.4, seed: 0 }
    }
}

/// Minimizes `λ_deid·L_deid(z, ψ(z)) + λ_kld·L_kld` over train-split identity
/// vectors with noise in training mode. Returns the per-step mean loss.
pub fn train_obfuscator(
    obfuscator: &mut Obfuscator,
    extractor: &EnsembleExtractor,
    world: &World,
    config: &ObfuscatorTrainConfig,
) -> Result<Vec<f64>> {
    if matches!(obfuscator, Obfuscator::Opp) {
        return Err(Error::Config("the opposite map has no parameters to train".into()));
    }
    if config.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let zs = world
        .train_samples()
        .iter()
        .map(|s| extractor.extract(&s.feature))
        .collect::<Result<Vec<IdVector>>>()?;
    if zs.is_empty() {
        return Err(Error::Config("world has no train split".into()));
    }
    train_on_vectors(obfuscator, &zs, config)
}

pub(crate) fn train_on_vectors(
    obfuscator: &mut Obfuscator,
    zs: &[IdVector],
    config: &ObfuscatorTrainConfig,
) -> Result<Vec<f64>> {
    let mut opt = GroupOptimizer::new(obfuscator, AdamConfig::with_learning_rate(config.learning_rate));
    let mut batch_rng = rng_from_seed(derive_seed(config.seed, "obfuscator-batches"));
    let mut noise_rng = rng_from_seed(derive_seed(config.seed, "obfuscator-noise"));
    let mut trace = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let mut grads = obfuscator.zero_grads();
        let mut total = 0.0;
        for _ in 0..config.batch_size {
            let z = &zs[batch_rng.random_range(0..zs.len())];
            let t = obfuscator.apply_traced(z, NoiseMode::Train, &mut noise_rng)?;
            let (l, _, g) = deid_with_grads(z.as_slice(), t.z_tilde().as_slice())?;
            total += config.lambda_deid * l + config.lambda_kld * t.kld();
            let g: Vec<f64> = g.iter().map(|v| config.lambda_deid * v).collect();
            obfuscator.backward(&t, &g, config.lambda_kld, &mut grads)?;
        }
        let loss = total / config.batch_size as f64;
        if !loss.is_finite() {
            return Err(Error::Training(format!("obfuscator loss diverged at step {step}")));
        }
        scale_all(&mut grads, 1.0 / config.batch_size as f64);
        opt.step(obfuscator, &grads).map_err(|e| Error::Training(format!("obfuscator step {step}: {e}")))?;
        trace.push(loss);
    }
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::random_unit;
    use crate::obfuscator::{ObfuscatorConfig, Variant};

    fn vectors(n: usize, dim: usize) -> Vec<IdVector> {
        let mut rng = rng_from_seed(5);
        (0..n).map(|_| IdVector::from_raw(&random_unit(dim, &mut rng)).unwrap()).collect()
    }

    #[test]
    fn null_objective_leaves_parameters() {
        let mut obf = ObfuscatorConfig { variant: Variant::Ved, latent_dim: 4, ved_encoder_hidden: vec![8], ved_decoder_hidden: vec![8], ..Default::default() }
            .build(6, 1)
            .unwrap();
        let before = obf.clone();
        let cfg = ObfuscatorTrainConfig { steps: 20, lambda_deid: 0.0, lambda_kld: 0.0, ..Default::default() };
        train_on_vectors(&mut obf, &vectors(30, 6), &cfg).unwrap();
        assert_eq!(obf, before);
    }

    #[test]
    fn ved_loss_decreases() {
        let mut obf = ObfuscatorConfig { variant: Variant::Ved, latent_dim: 4, ved_encoder_hidden: vec![16], ved_decoder_hidden: vec![16], ..Default::default() }
            .build(8, 2)
            .unwrap();
        let zs = vectors(100, 8);
        let mean_deid = |o: &Obfuscator| {
            let mut rng = rng_from_seed(1);
            zs.iter()
                .map(|z| super::super::loss_deid(z.as_slice(), o.apply(z, NoiseMode::Infer, &mut rng).unwrap().as_slice()).unwrap())
                .sum::<f64>()
                / zs.len() as f64
        };
        let start = mean_deid(&obf);
        let cfg = ObfuscatorTrainConfig { steps: 300, ..Default::default() };
        train_on_vectors(&mut obf, &zs, &cfg).unwrap();
        assert!(mean_deid(&obf) < start);
    }

    #[test]
    fn opp_is_not_trainable() {
        let world = crate::world::generate_world(&crate::world::WorldConfig { n_identities: 5, samples_per_identity: 2, ..Default::default() }).unwrap();
        let expert = crate::world::ExpertModel::new(
            crate::world::ExpertKind::Identity,
            crate::nn::DenseNet::init(&[64, 4], crate::nn::Activation::Tanh, crate::nn::Activation::Tanh, 1).unwrap(),
        );
        let merge = crate::nn::DenseNet::init(&[4, 4], crate::nn::Activation::Tanh, crate::nn::Activation::Tanh, 1).unwrap();
        let ext = EnsembleExtractor::new(vec![expert], merge).unwrap();
        let err = train_obfuscator(&mut Obfuscator::Opp, &ext, &world, &ObfuscatorTrainConfig::default());
        assert!(matches!(err, Err(Error::Config(_))));
    }
}
