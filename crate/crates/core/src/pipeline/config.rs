use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::eval::{AttackerConfig, EvalSettings};
use crate::obfuscator::{ObfuscatorConfig, ObfuscatorTrainConfig};
use crate::rng::derive_seed;
use crate::swap::{LossWeights, SwapConfig};
use crate::world::{ExpertKind, ExpertSpec, MergeTrainConfig, WorldConfig};

/// What a trained expert is used for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExpertRole {
    /// Member of the identity extractor ensemble.
    Ensemble,
    /// Identity expert kept out of training, used only for verdicts.
    Heldout,
    /// Utility expert guiding and measuring utility preservation.
    Utility,
}

impl ExpertRole {
    pub fn kind(self) -> ExpertKind {
        match self {
            ExpertRole::Ensemble | ExpertRole::Heldout => ExpertKind::Identity,
            ExpertRole::Utility => ExpertKind::Utility,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpertEntry {
    pub role: ExpertRole,
    pub embedding_dim: usize,
    #[serde(default = "default_expert_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default = "default_expert_epochs")]
    pub epochs: usize,
    #[serde(default = "default_expert_batch")]
    pub batch_size: usize,
    #[serde(default = "default_expert_lr")]
    pub learning_rate: f64,
    /// Overrides the seed derived from the master seed.
    #[serde(default)]
    pub seed: Option<u64>,
}

fn default_expert_hidden() -> Vec<usize> {
    vec![64]
}
fn default_expert_epochs() -> usize {
    40
}
fn default_expert_batch() -> usize {
    16
}
fn default_expert_lr() -> f64 {
    1e-3
}

impl ExpertEntry {
    pub fn new(role: ExpertRole) -> Self {
        let embedding_dim = if role == ExpertRole::Utility { 4 } else { 32 };
        Self {
            role,
            embedding_dim,
            hidden: default_expert_hidden(),
            epochs: default_expert_epochs(),
            batch_size: default_expert_batch(),
            learning_rate: default_expert_lr(),
            seed: None,
        }
    }

    pub fn spec(&self, seed: u64) -> ExpertSpec {
        ExpertSpec {
            kind: self.role.kind(),
            embedding_dim: self.embedding_dim,
            hidden: self.hidden.clone(),
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            seed: self.seed.unwrap_or(seed),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhaseConfig {
    pub phase1_steps: usize,
    pub phase2_steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub critic_learning_rate: f64,
    pub cross_swap: bool,
    pub obfuscator_pretrain_steps: usize,
    pub obfuscator_learning_rate: f64,
    pub k_d: usize,
}

impl Default for PhaseConfig {
    fn default() -> Self {
        Self {
            phase1_steps: 2000,
            phase2_steps: 2000,
            batch_size: 4,
            learning_rate: 1e-3,
            critic_learning_rate: 1e-3,
            cross_swap: true,
            obfuscator_pretrain_steps: 1000,
            obfuscator_learning_rate: 1e-3,
            k_d: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub fpr_target: f64,
    pub n_impostor: usize,
    pub attacker: AttackerConfig,
    pub sensitivity_pairs: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { fpr_target: 1e-3, n_impostor: 20_000, attacker: AttackerConfig::default(), sensitivity_pairs: 100_000 }
    }
}

/// Everything that determines a run. Stage seeds are derived from
/// `master_seed`; `world.seed` is ignored in favour of the derived one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub world: WorldConfig,
    pub experts: Vec<ExpertEntry>,
    pub merge: MergeTrainConfig,
    pub obfuscator: ObfuscatorConfig,
    pub swap: SwapConfig,
    pub weights: LossWeights,
    pub phases: PhaseConfig,
    pub eval: EvalConfig,
    pub output_dir: Option<String>,
    pub master_seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let roles = [
            ExpertRole::Ensemble,
            ExpertRole::Ensemble,
            ExpertRole::Heldout,
            ExpertRole::Heldout,
            ExpertRole::Utility,
            ExpertRole::Utility,
        ];
        Self {
            world: WorldConfig::default(),
            experts: roles.into_iter().map(ExpertEntry::new).collect(),
            merge: MergeTrainConfig::default(),
            obfuscator: ObfuscatorConfig::default(),
            swap: SwapConfig::default(),
            weights: LossWeights::default(),
            phases: PhaseConfig::default(),
            eval: EvalConfig::default(),
            output_dir: None,
            master_seed: 0,
        }
    }
}

/// Named stage seeds fanned out from the master seed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSeeds {
    pub world: u64,
    pub experts: Vec<u64>,
    pub merge: u64,
    pub obfuscator: u64,
    pub phase1: u64,
    pub phase2: u64,
    pub eval: u64,
    pub attack: u64,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let config: Self = serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid run config: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_json(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.weights.validate()?;
        let count = |r| self.experts.iter().filter(|e| e.role == r).count();
        if count(ExpertRole::Ensemble) == 0 || count(ExpertRole::Heldout) == 0 {
            return Err(Error::Config("need at least one ensemble and one held-out identity expert".into()));
        }
        if count(ExpertRole::Utility) != self.weights.lambda_uti.len() {
            return Err(Error::Config(format!(
                "{} utility experts but {} lambda_uti values",
                count(ExpertRole::Utility),
                self.weights.lambda_uti.len()
            )));
        }
        if self.experts.iter().any(|e| e.embedding_dim == 0 || e.batch_size == 0) {
            return Err(Error::Config("expert embedding_dim and batch_size must be positive".into()));
        }
        if self.phases.batch_size == 0 || self.phases.k_d == 0 {
            return Err(Error::Config("batch_size and k_d must be positive".into()));
        }
        for lr in [self.phases.learning_rate, self.phases.critic_learning_rate, self.phases.obfuscator_learning_rate] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::Config(format!("learning rates must be positive, got {lr}")));
            }
        }
        EvalSettings { fpr_target: self.eval.fpr_target, n_impostor: self.eval.n_impostor, seed: 0 }.validate()?;
        if self.eval.sensitivity_pairs == 0 {
            return Err(Error::Config("sensitivity_pairs must be positive".into()));
        }
        // Building on a dummy width surfaces invalid noise scales and sizes early.
        self.obfuscator.build(4, 0)?;
        Ok(())
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).unwrap_or_default();
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    pub fn world_hash(&self) -> String {
        let json = serde_json::to_string(&self.resolved_world()).unwrap_or_default();
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    pub fn seeds(&self) -> StageSeeds {
        let m = self.master_seed;
        StageSeeds {
            world: derive_seed(m, "world"),
            experts: (0..self.experts.len()).map(|i| derive_seed(m, &format!("expert_{i}"))).collect(),
            merge: derive_seed(m, "merge"),
            obfuscator: derive_seed(m, "obfuscator"),
            phase1: derive_seed(m, "phase1"),
            phase2: derive_seed(m, "phase2"),
            eval: derive_seed(m, "eval"),
            attack: derive_seed(m, "attack"),
        }
    }

    pub fn resolved_world(&self) -> WorldConfig {
        WorldConfig { seed: derive_seed(self.master_seed, "world"), ..self.world.clone() }
    }

    pub fn merge_config(&self) -> MergeTrainConfig {
        MergeTrainConfig { seed: self.seeds().merge, ..self.merge.clone() }
    }

    pub fn obfuscator_train_config(&self) -> ObfuscatorTrainConfig {
        ObfuscatorTrainConfig {
            steps: self.phases.obfuscator_pretrain_steps,
            batch_size: 16,
            learning_rate: self.phases.obfuscator_learning_rate,
            lambda_deid: self.weights.lambda_deid,
            lambda_kld: self.weights.lambda_kld,
            seed: derive_seed(self.seeds().obfuscator, "pretrain"),
        }
    }

    pub fn eval_settings(&self) -> EvalSettings {
        EvalSettings { fpr_target: self.eval.fpr_target, n_impostor: self.eval.n_impostor, seed: self.seeds().eval }
    }

    pub fn attacker_config(&self) -> AttackerConfig {
        AttackerConfig { seed: self.seeds().attack, ..self.eval.attacker.clone() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_validates_and_round_trips() {
        let c = RunConfig::default();
        c.validate().unwrap();
        let back = RunConfig::from_json(&c.to_json().unwrap()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::from_json(r#"{"weights": {"lamda_id": 3.0}}"#);
        assert!(matches!(err, Err(Error::Config(_))));
        assert!(RunConfig::from_json(r#"{"master_seed": 4}"#).is_ok());
    }

    #[test]
    fn seeds_fan_out() {
        let a = RunConfig::default();
        let b = RunConfig { master_seed: 1, ..RunConfig::default() };
        assert_ne!(a.seeds().world, b.seeds().world);
        assert_ne!(a.seeds().phase1, a.seeds().phase2);
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn utility_weight_count_must_match() {
        let c = RunConfig { weights: LossWeights { lambda_uti: vec![2.0], ..LossWeights::default() }, ..RunConfig::default() };
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }
}
