//! Run configuration and end-to-end orchestration: world, experts,
//! extractor, swap pretraining, joint fine-tuning, bundles, reports, sweeps.

mod bundle;
mod config;
mod sweep;

use std::collections::BTreeSet;

use rayon::prelude::*;

pub use bundle::{load_bundle, save_bundle, Bundle, Manifest};
pub use config::{EvalConfig, ExpertEntry, ExpertRole, PhaseConfig, RunConfig, StageSeeds};
pub use sweep::{sweep, SweepParam, SweepRow};

use crate::error::{Error, Result};
use crate::eval::{deid_report, run_inversion_attack, Anonymizer, EpsilonEcho, PrivacyReport, ReportInputs};
use crate::nn::ParamGroup;
use crate::obfuscator::{estimate_sensitivity, train_obfuscator, IdVector, NoiseMode, Obfuscator};
use crate::rng::{derive_seed, DeidRng};
use crate::swap::{train_phase1, train_phase2, Critics, Phase1Config, Phase2Config, Phase2Context, SwapModel};
use crate::world::{generate_world, train_expert, EnsembleExtractor, ExpertModel, World};

/// Trained experts grouped by role.
#[derive(Debug, Clone, PartialEq)]
pub struct Experts {
    pub ensemble: Vec<ExpertModel>,
    pub heldout: Vec<ExpertModel>,
    pub utility: Vec<ExpertModel>,
}

impl Experts {
    pub fn ensemble_fingerprints(&self) -> BTreeSet<String> {
        self.ensemble.iter().map(ExpertModel::fingerprint).collect()
    }

    pub fn fingerprints(&self) -> Vec<String> {
        self.ensemble.iter().chain(&self.heldout).chain(&self.utility).map(ExpertModel::fingerprint).collect()
    }
}

/// The deployed anonymizer `x ↦ g(x, ψ(h(x)))`.
#[derive(Debug, Clone, PartialEq)]
pub struct Pipeline {
    pub extractor: EnsembleExtractor,
    pub obfuscator: Obfuscator,
    pub swap: SwapModel,
    pub critics: Critics,
    /// Empirical sensitivity of the obfuscator's deterministic core.
    pub delta_psi: Option<f64>,
}

impl Anonymizer for Pipeline {
    fn anonymize(&self, x: &[f64], rng: &mut DeidRng) -> Result<Vec<f64>> {
        let z = self.extractor.extract(x)?;
        let z_tilde = self.obfuscator.apply(&z, NoiseMode::Infer, rng)?;
        self.swap.forward(x, &z_tilde)
    }
}

impl Pipeline {
    pub fn epsilon_echo(&self) -> EpsilonEcho {
        let scale = self.obfuscator.noise_scale();
        let eps = |mult: f64| self.delta_psi.filter(|_| scale > 0.0).map(|d| mult * d / scale);
        EpsilonEcho {
            variant: self.obfuscator.variant().to_string(),
            noise_scale: scale,
            delta_psi: self.delta_psi,
            epsilon: eps(1.0),
            epsilon_doubled: eps(2.0),
        }
    }

    pub fn with_noise_scale(&self, scale: f64) -> Result<Self> {
        let mut p = self.clone();
        p.obfuscator.set_noise_scale(scale)?;
        Ok(p)
    }
}

pub fn build_world(config: &RunConfig) -> Result<World> {
    generate_world(&config.resolved_world())
}

/// Trains every configured expert (in parallel; each has its own seed).
pub fn train_experts(world: &World, config: &RunConfig) -> Result<Experts> {
    let seeds = config.seeds();
    let trained = config
        .experts
        .par_iter()
        .enumerate()
        .map(|(i, entry)| Ok((entry.role, train_expert(world, &entry.spec(seeds.experts[i]))?)))
        .collect::<Result<Vec<_>>>()?;
    let pick = |role| trained.iter().filter(|(r, _)| *r == role).map(|(_, e)| e.clone()).collect::<Vec<_>>();
    let experts = Experts {
        ensemble: pick(ExpertRole::Ensemble),
        heldout: pick(ExpertRole::Heldout),
        utility: pick(ExpertRole::Utility),
    };
    let mut seen = BTreeSet::new();
    if experts.fingerprints().into_iter().any(|f| !seen.insert(f)) {
        return Err(Error::Config("two experts came out identical; give them distinct seeds".into()));
    }
    Ok(experts)
}

pub fn build_extractor(world: &World, experts: &Experts, config: &RunConfig) -> Result<EnsembleExtractor> {
    EnsembleExtractor::train_merge(experts.ensemble.clone(), world, &config.merge_config())
}

/// Phase 1: swap generator and critic pretraining, shared by every obfuscator variant.
pub fn pretrain_swap(world: &World, extractor: &EnsembleExtractor, config: &RunConfig) -> Result<(SwapModel, Critics)> {
    let seeds = config.seeds();
    let n_f = world.config.n_feature;
    let mut swap = SwapModel::init(n_f, extractor.n_z(), &config.swap, derive_seed(seeds.phase1, "swap-init"))?;
    let mut critics =
        Critics::init(n_f, config.phases.k_d, &config.swap.critic_hidden, derive_seed(seeds.phase1, "critic-init"))?;
    let p1 = Phase1Config {
        steps: config.phases.phase1_steps,
        batch_size: config.phases.batch_size,
        learning_rate: config.phases.learning_rate,
        critic_learning_rate: config.phases.critic_learning_rate,
        lambda_id: config.weights.lambda_id,
        lambda_gen: config.weights.lambda_gen,
        cross_swap: config.phases.cross_swap,
        seed: seeds.phase1,
    };
    train_phase1(&mut swap, &mut critics, extractor, world, &p1)?;
    Ok((swap, critics))
}

/// Identity vectors of the train split, the population ψ is calibrated on.
pub fn train_identity_vectors(world: &World, extractor: &EnsembleExtractor) -> Result<Vec<IdVector>> {
    world.train_samples().par_iter().map(|s| extractor.extract(&s.feature)).collect()
}

/// Obfuscator pretraining, joint phase-2 fine-tuning, and sensitivity estimation.
pub fn finetune(
    world: &World,
    experts: &Experts,
    extractor: &EnsembleExtractor,
    pretrained: &(SwapModel, Critics),
    config: &RunConfig,
) -> Result<Pipeline> {
    let seeds = config.seeds();
    let mut obfuscator = config.obfuscator.build(extractor.n_z(), derive_seed(seeds.obfuscator, "init"))?;
    if !obfuscator.nets().is_empty() && config.phases.obfuscator_pretrain_steps > 0 {
        train_obfuscator(&mut obfuscator, extractor, world, &config.obfuscator_train_config())?;
    }
    let (mut swap, mut critics) = pretrained.clone();
    let ctx = Phase2Context { extractor, utility_experts: &experts.utility, weights: &config.weights };
    let p2 = Phase2Config {
        steps: config.phases.phase2_steps,
        batch_size: config.phases.batch_size,
        learning_rate: config.phases.learning_rate,
        critic_learning_rate: config.phases.critic_learning_rate,
        seed: seeds.phase2,
    };
    train_phase2(&mut swap, &mut critics, &mut obfuscator, &ctx, world, &p2)?;
    let vectors = train_identity_vectors(world, extractor)?;
    let delta_psi = estimate_sensitivity(
        |z| obfuscator.deterministic(z),
        &vectors,
        config.eval.sensitivity_pairs,
        true,
        derive_seed(seeds.eval, "sensitivity"),
    )?
    .delta_psi;
    Ok(Pipeline { extractor: extractor.clone(), obfuscator, swap, critics, delta_psi: Some(delta_psi) })
}

/// Everything `train` produces: the pipeline plus the experts it was built with.
#[derive(Debug, Clone)]
pub struct TrainedRun {
    pub world: World,
    pub experts: Experts,
    pub pipeline: Pipeline,
}

/// World → experts → extractor → phase 1 → phase 2.
pub fn train_all(config: &RunConfig) -> Result<TrainedRun> {
    config.validate()?;
    let world = build_world(config)?;
    let experts = train_experts(&world, config)?;
    let extractor = build_extractor(&world, &experts, config)?;
    let pretrained = pretrain_swap(&world, &extractor, config)?;
    let pipeline = finetune(&world, &experts, &extractor, &pretrained, config)?;
    Ok(TrainedRun { world, experts, pipeline })
}

/// De-identification verdict of a pipeline, stamped with the config hash.
pub fn evaluate(pipeline: &Pipeline, world: &World, experts: &Experts, config: &RunConfig) -> Result<PrivacyReport> {
    let eval = world.eval_samples();
    let fingerprints = pipeline.extractor.experts().iter().map(ExpertModel::fingerprint).collect();
    let inputs = ReportInputs {
        eval_samples: &eval,
        training_fingerprints: &fingerprints,
        heldout_experts: &experts.heldout,
        utility_experts: &experts.utility,
    };
    let mut report = deid_report(pipeline, &inputs, &config.eval_settings())?;
    report.epsilon = Some(pipeline.epsilon_echo());
    report.config_hash = Some(config.hash());
    Ok(report)
}

/// [`evaluate`] plus inversion-attack rows.
pub fn evaluate_with_attack(
    pipeline: &Pipeline,
    world: &World,
    experts: &Experts,
    config: &RunConfig,
) -> Result<PrivacyReport> {
    let mut report = evaluate(pipeline, world, experts, config)?;
    let (rows, avg) = attack(pipeline, world, experts, config)?;
    report.inversion = Some(rows);
    report.inversion_average = Some(avg);
    Ok(report)
}

pub fn attack(
    pipeline: &Pipeline,
    world: &World,
    experts: &Experts,
    config: &RunConfig,
) -> Result<(Vec<crate::eval::VerificationRow>, crate::eval::VerificationRow)> {
    let fingerprints = pipeline.extractor.experts().iter().map(ExpertModel::fingerprint).collect();
    run_inversion_attack(
        pipeline,
        &world.train_samples(),
        &world.eval_samples(),
        &fingerprints,
        &experts.heldout,
        &config.attacker_config(),
        &config.eval_settings(),
    )
}
