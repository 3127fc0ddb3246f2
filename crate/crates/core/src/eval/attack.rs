use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::report::{
    anonymize_all, average_row, check_heldout, impostor_pairs, verification_row, Anonymizer, EvalSettings,
    VerificationRow,
};
use crate::error::{Error, Result};
use crate::math::normalize;
use crate::nn::{Activation, AdamConfig, AdamState, DenseNet, NetGrads};
use crate::rng::{derive_seed, rng_from_seed};
use crate::world::{ExpertModel, Sample};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackerConfig {
    /// Hidden widths as multiples of the embedding dimension.
    pub hidden_multipliers: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for AttackerConfig {
    fn default() -> Self {
        Self { hidden_multipliers: vec![4, 2], epochs: 30, batch_size: 16, learning_rate: 1e-3, seed: 0 }
    }
}

/// Regression pairs `input → target` with the identity label of each pair.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AttackSet {
    pub inputs: Vec<Vec<f64>>,
    pub targets: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

impl AttackSet {
    pub fn identities(&self) -> BTreeSet<usize> {
        self.labels.iter().copied().collect()
    }

    fn validate(&self) -> Result<usize> {
        let n = self.inputs.len();
        if n == 0 || self.targets.len() != n || self.labels.len() != n {
            return Err(Error::Input("attack set needs equally many (nonzero) inputs, targets and labels".into()));
        }
        let d = self.inputs[0].len();
        if self.inputs.iter().chain(&self.targets).any(|v| v.len() != d) {
            return Err(Error::Dimension("attack vectors must share one dimension".into()));
        }
        Ok(d)
    }
}

/// Fails unless the two identity sets are disjoint.
pub fn check_disjoint(train: &AttackSet, eval: &AttackSet) -> Result<()> {
    let shared: Vec<usize> = train.identities().intersection(&eval.identities()).copied().collect();
    if !shared.is_empty() {
        return Err(Error::Protocol(format!(
            "attacker train and eval splits share {} identities (first: {})",
            shared.len(),
            shared[0]
        )));
    }
    Ok(())
}

/// Supervised ℓ2-regression inverter `[d, m₁d, m₂d, …, d]` (tanh hidden, linear output).
pub fn train_inversion_attacker(train: &AttackSet, config: &AttackerConfig) -> Result<DenseNet> {
    let d = train.validate()?;
    if config.batch_size == 0 {
        return Err(Error::Config("attacker batch size must be positive".into()));
    }
    let mut sizes = vec![d];
    sizes.extend(config.hidden_multipliers.iter().map(|m| m * d));
    sizes.push(d);
    let mut net = DenseNet::init(&sizes, Activation::Tanh, Activation::Linear, derive_seed(config.seed, "attacker-init"))?;
    let mut adam = AdamState::new(&net, AdamConfig::with_learning_rate(config.learning_rate));
    let mut rng = rng_from_seed(derive_seed(config.seed, "attacker-batches"));
    let mut order: Vec<usize> = (0..train.inputs.len()).collect();
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            let mut grads = NetGrads::zeros_like(&net);
            for &i in batch {
                let cache = net.forward_cache(&train.inputs[i])?;
                let g: Vec<f64> = cache.output().iter().zip(&train.targets[i]).map(|(o, t)| o - t).collect();
                net.backward_accumulate(&cache, &g, &mut grads)?;
            }
            grads.scale(1.0 / batch.len() as f64);
            adam.step(&mut net, &grads).map_err(|e| Error::Training(format!("attacker epoch {epoch}: {e}")))?;
        }
    }
    Ok(net)
}

/// Recovered (normalized) embeddings of an attacker on the given inputs.
pub fn invert(attacker: &DenseNet, inputs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    inputs.iter().map(|v| normalize(&attacker.predict(v)?)).collect()
}

/// Builds `normalize(e(x̃)) → e(x)` pairs for one expert.
pub fn attack_set(expert: &ExpertModel, samples: &[&Sample], anonymized: &[Vec<f64>]) -> Result<AttackSet> {
    let mut set = AttackSet::default();
    for (s, xt) in samples.iter().zip(anonymized) {
        set.inputs.push(normalize(&expert.embed(xt)?)?);
        set.targets.push(expert.embed(&s.feature)?);
        set.labels.push(s.identity_label);
    }
    Ok(set)
}

/// Re-identification of recovered embeddings against original impostor pairs.
pub fn inversion_report(
    attacker: &DenseNet,
    eval: &AttackSet,
    name: &str,
    settings: &EvalSettings,
) -> Result<VerificationRow> {
    eval.validate()?;
    let recovered = invert(attacker, &eval.inputs)?;
    let impostors = impostor_pairs(&eval.labels, settings.n_impostor, derive_seed(settings.seed, "impostors"))?;
    verification_row(name, &eval.targets, &recovered, &impostors, settings.fpr_target)
}

/// Trains one attacker per held-out expert on the train identities and
/// reports re-identification on the eval identities.
pub fn run_inversion_attack(
    anonymizer: &dyn Anonymizer,
    train_samples: &[&Sample],
    eval_samples: &[&Sample],
    training_fingerprints: &BTreeSet<String>,
    heldout: &[ExpertModel],
    attacker: &AttackerConfig,
    settings: &EvalSettings,
) -> Result<(Vec<VerificationRow>, VerificationRow)> {
    settings.validate()?;
    check_heldout(training_fingerprints, heldout)?;
    let train_anon = anonymize_all(anonymizer, train_samples, derive_seed(settings.seed, "attack-train-anonymize"))?;
    let eval_anon = anonymize_all(anonymizer, eval_samples, derive_seed(settings.seed, "anonymize"))?;
    let rows = heldout
        .iter()
        .enumerate()
        .map(|(k, e)| {
            let train = attack_set(e, train_samples, &train_anon)?;
            let eval = attack_set(e, eval_samples, &eval_anon)?;
            check_disjoint(&train, &eval)?;
            let cfg = AttackerConfig { seed: derive_seed(attacker.seed, &format!("expert{k}")), ..attacker.clone() };
            let net = train_inversion_attacker(&train, &cfg)?;
            inversion_report(&net, &eval, &format!("heldout{k}"), settings)
        })
        .collect::<Result<Vec<_>>>()?;
    let avg = average_row(&rows);
    Ok((rows, avg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::random_unit;

    fn set(labels: &[usize], seed: u64) -> AttackSet {
        let mut rng = rng_from_seed(seed);
        let targets: Vec<Vec<f64>> = labels.iter().map(|_| random_unit(4, &mut rng)).collect();
        AttackSet { inputs: targets.clone(), targets, labels: labels.to_vec() }
    }

    #[test]
    fn overlapping_identities_are_rejected() {
        assert!(matches!(check_disjoint(&set(&[1, 2], 1), &set(&[2, 3], 2)), Err(Error::Protocol(_))));
        assert!(check_disjoint(&set(&[1, 2], 1), &set(&[3, 4], 2)).is_ok());
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let s = set(&[0, 1, 2], 3);
        let cfg = AttackerConfig { epochs: 0, ..Default::default() };
        let a = train_inversion_attacker(&s, &cfg).unwrap();
        let init = DenseNet::init(&[4, 16, 8, 4], Activation::Tanh, Activation::Linear, derive_seed(0, "attacker-init")).unwrap();
        assert_eq!(a, init);
    }
}
