use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Experts, Pipeline, RunConfig, StageSeeds};
use crate::error::{Error, Result};
use crate::nn::Checkpoint;
use crate::obfuscator::{Obfuscator, ObfuscatorSidecar};
use crate::swap::{Critics, LossWeights, SwapModel};
use crate::world::{EnsembleExtractor, ExpertKind, ExpertModel};

pub const BUNDLE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub bundle_version: u32,
    pub config_hash: String,
    pub master_seed: u64,
    pub seeds: StageSeeds,
    pub weights: LossWeights,
    pub world_config_hash: String,
    pub n_heldout: usize,
    pub n_utility: usize,
    pub config: RunConfig,
}

/// A loaded pipeline bundle.
#[derive(Debug, Clone)]
pub struct Bundle {
    pub pipeline: Pipeline,
    pub experts: Experts,
    pub manifest: Manifest,
}

fn write(path: PathBuf, text: &str) -> Result<()> {
    fs::write(&path, text).map_err(|e| Error::io(path, e))
}

fn read(path: PathBuf) -> Result<String> {
    fs::read_to_string(&path).map_err(|e| Error::io(path, e))
}

/// Writes `{swap,critic,obfuscator,extractor}.ckpt`, `obfuscator.json`,
/// `experts/*.ckpt` and `manifest.json` under `dir`.
pub fn save_bundle(dir: impl AsRef<Path>, pipeline: &Pipeline, experts: &Experts, config: &RunConfig) -> Result<()> {
    let dir = dir.as_ref();
    let expert_dir = dir.join("experts");
    fs::create_dir_all(&expert_dir).map_err(|e| Error::io(&expert_dir, e))?;
    pipeline.swap.to_checkpoint().save(dir.join("swap.ckpt"))?;
    pipeline.critics.to_checkpoint().save(dir.join("critic.ckpt"))?;
    pipeline.obfuscator.to_checkpoint().save(dir.join("obfuscator.ckpt"))?;
    pipeline.extractor.to_checkpoint().save(dir.join("extractor.ckpt"))?;
    write(dir.join("obfuscator.json"), &(serde_json::to_string_pretty(&pipeline.obfuscator.sidecar(pipeline.delta_psi))? + "\n"))?;
    for (i, e) in experts.heldout.iter().enumerate() {
        e.to_checkpoint().save(expert_dir.join(format!("heldout{i}.ckpt")))?;
    }
    for (i, e) in experts.utility.iter().enumerate() {
        e.to_checkpoint().save(expert_dir.join(format!("utility{i}.ckpt")))?;
    }
    let manifest = Manifest {
        bundle_version: BUNDLE_VERSION,
        config_hash: config.hash(),
        master_seed: config.master_seed,
        seeds: config.seeds(),
        weights: config.weights.clone(),
        world_config_hash: config.world_hash(),
        n_heldout: experts.heldout.len(),
        n_utility: experts.utility.len(),
        config: config.clone(),
    };
    write(dir.join("manifest.json"), &(serde_json::to_string_pretty(&manifest)? + "\n"))
}

pub fn load_bundle(dir: impl AsRef<Path>) -> Result<Bundle> {
    let dir = dir.as_ref();
    let manifest: Manifest = serde_json::from_str(&read(dir.join("manifest.json"))?)
        .map_err(|e| Error::Config(format!("invalid bundle manifest: {e}")))?;
    if manifest.bundle_version != BUNDLE_VERSION {
        return Err(Error::Config(format!(
            "bundle version {} is not supported (expected {BUNDLE_VERSION})",
            manifest.bundle_version
        )));
    }
    if manifest.config.hash() != manifest.config_hash {
        return Err(Error::Config("bundle manifest config does not match its hash".into()));
    }
    let sidecar: ObfuscatorSidecar = serde_json::from_str(&read(dir.join("obfuscator.json"))?)
        .map_err(|e| Error::Config(format!("invalid obfuscator sidecar: {e}")))?;
    let extractor = EnsembleExtractor::from_checkpoint(&Checkpoint::load(dir.join("extractor.ckpt"))?)?;
    let pipeline = Pipeline {
        swap: SwapModel::from_checkpoint(&Checkpoint::load(dir.join("swap.ckpt"))?)?,
        critics: Critics::from_checkpoint(&Checkpoint::load(dir.join("critic.ckpt"))?)?,
        obfuscator: Obfuscator::from_checkpoint(&Checkpoint::load(dir.join("obfuscator.ckpt"))?, &sidecar)?,
        delta_psi: sidecar.delta_psi,
        extractor,
    };
    let load_expert = |name: String, kind: ExpertKind| -> Result<ExpertModel> {
        let e = ExpertModel::from_checkpoint(&Checkpoint::load(dir.join("experts").join(name))?)?;
        if e.kind() != kind {
            return Err(Error::Config("bundle expert has the wrong kind".into()));
        }
        Ok(e)
    };
    let heldout = (0..manifest.n_heldout)
        .map(|i| load_expert(format!("heldout{i}.ckpt"), ExpertKind::Identity))
        .collect::<Result<Vec<_>>>()?;
    let utility = (0..manifest.n_utility)
        .map(|i| load_expert(format!("utility{i}.ckpt"), ExpertKind::Utility))
        .collect::<Result<Vec<_>>>()?;
    let experts = Experts { ensemble: pipeline.extractor.experts().to_vec(), heldout, utility };
    Ok(Bundle { pipeline, experts, manifest })
}
