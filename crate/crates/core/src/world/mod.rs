//! Synthetic identity world.
//!
//! Every sample's feature vector is a frozen random mixing network applied to
//! `concat(√n_id · identity_latent, utility_latent)`. The identity latent is a
//! unit vector shared (up to jitter) by all samples of one identity; the
//! utility latent is fresh standard-normal noise per sample. Both latents are
//! kept as hidden ground truth for training the stand-in experts and for tests.

mod ensemble;
mod expert;

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use ensemble::{EnsembleExtractor, ExtractTrace, MergeTrainConfig};
pub use expert::{expert_penultimate, train_expert, ExpertKind, ExpertModel, ExpertSpec, ExpertTrace};

use crate::error::{Error, Result};
use crate::math::{gaussian_vec, normalize, random_unit};
use crate::nn::{Activation, DenseNet};
use crate::rng::{derive_seed, rng_from_seed};

pub const WORLD_FORMAT: &str = "deid-world";
pub const WORLD_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    pub n_id_latent: usize,
    pub n_util_latent: usize,
    pub n_feature: usize,
    pub n_identities: usize,
    pub samples_per_identity: usize,
    pub within_identity_noise: f64,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            n_id_latent: 16,
            n_util_latent: 8,
            n_feature: 64,
            n_identities: 200,
            samples_per_identity: 10,
            within_identity_noise: 0.05,
            seed: 0,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(format!("world: {m}")));
        if self.n_id_latent == 0 || self.n_util_latent == 0 || self.n_feature == 0 {
            return fail("latent and feature sizes must be positive");
        }
        if self.n_feature < self.n_id_latent + self.n_util_latent {
            return fail("n_feature must be at least n_id_latent + n_util_latent");
        }
        if self.n_identities < 2 || self.samples_per_identity == 0 {
            return fail("need at least two identities and one sample per identity");
        }
        if !(self.within_identity_noise >= 0.0 && self.within_identity_noise.is_finite()) {
            return fail("within_identity_noise must be a nonnegative real");
        }
        Ok(())
    }

    pub fn total_samples(&self) -> usize {
        self.n_identities * self.samples_per_identity
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub feature: Vec<f64>,
    pub identity_label: usize,
    pub id_latent_truth: Vec<f64>,
    pub util_latent_truth: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub config: WorldConfig,
    pub samples: Vec<Sample>,
    pub train_identities: BTreeSet<usize>,
    pub eval_identities: BTreeSet<usize>,
}

impl World {
    pub fn split_of(&self, sample: &Sample) -> Split {
        if self.train_identities.contains(&sample.identity_label) {
            Split::Train
        } else {
            Split::Eval
        }
    }

    pub fn train_samples(&self) -> Vec<&Sample> {
        self.samples.iter().filter(|s| self.train_identities.contains(&s.identity_label)).collect()
    }

    pub fn eval_samples(&self) -> Vec<&Sample> {
        self.samples.iter().filter(|s| self.eval_identities.contains(&s.identity_label)).collect()
    }

    pub fn samples_in(&self, split: Split) -> Vec<&Sample> {
        match split {
            Split::Train => self.train_samples(),
            Split::Eval => self.eval_samples(),
        }
    }

    /// Writes the dataset file: a config header followed by one record per sample.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "{WORLD_FORMAT} {WORLD_VERSION}").unwrap();
        writeln!(s, "config {}", serde_json::to_string(&self.config).unwrap()).unwrap();
        writeln!(s, "samples {}", self.samples.len()).unwrap();
        let join = |v: &[f64]| v.iter().map(|x| format!("{x:e}")).collect::<Vec<_>>().join(" ");
        for (i, sample) in self.samples.iter().enumerate() {
            let split = match self.split_of(sample) {
                Split::Train => "train",
                Split::Eval => "eval",
            };
            writeln!(
                s,
                "{i} {} {split} | {} | {} | {}",
                sample.identity_label,
                join(&sample.feature),
                join(&sample.id_latent_truth),
                join(&sample.util_latent_truth)
            )
            .unwrap();
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |m: String| Error::Input(format!("world file: {m}"));
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| bad("empty".into()))?;
        let version = header
            .strip_prefix(WORLD_FORMAT)
            .and_then(|v| v.trim().parse::<u32>().ok())
            .ok_or_else(|| bad(format!("bad header `{header}`")))?;
        if version != WORLD_VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let config_line = lines.next().ok_or_else(|| bad("missing config".into()))?;
        let config: WorldConfig = serde_json::from_str(
            config_line.strip_prefix("config ").ok_or_else(|| bad("missing config".into()))?,
        )?;
        config.validate()?;
        let count: usize = lines
            .next()
            .and_then(|l| l.strip_prefix("samples "))
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| bad("missing sample count".into()))?;
        let parse_vec = |part: &str, expected: usize| -> Result<Vec<f64>> {
            let v: Vec<f64> = part
                .split_whitespace()
                .map(|t| t.parse::<f64>().map_err(|e| bad(format!("number `{t}`: {e}"))))
                .collect::<Result<_>>()?;
            if v.len() != expected {
                return Err(bad(format!("expected {expected} values, got {}", v.len())));
            }
            Ok(v)
        };
        let mut samples = Vec::with_capacity(count);
        let mut train_identities = BTreeSet::new();
        let mut eval_identities = BTreeSet::new();
        for i in 0..count {
            let line = lines.next().ok_or_else(|| bad(format!("truncated at record {i}")))?;
            let parts: Vec<&str> = line.split(" | ").collect();
            if parts.len() != 4 {
                return Err(bad(format!("record {i} is malformed")));
            }
            let head: Vec<&str> = parts[0].split_whitespace().collect();
            if head.len() != 3 || head[0].parse::<usize>().ok() != Some(i) {
                return Err(bad(format!("record {i} has a bad prefix")));
            }
            let label: usize = head[1].parse().map_err(|e| bad(format!("label: {e}")))?;
            match head[2] {
                "train" => train_identities.insert(label),
                "eval" => eval_identities.insert(label),
                other => return Err(bad(format!("unknown split `{other}`"))),
            };
            samples.push(Sample {
                feature: parse_vec(parts[1], config.n_feature)?,
                identity_label: label,
                id_latent_truth: parse_vec(parts[2], config.n_id_latent)?,
                util_latent_truth: parse_vec(parts[3], config.n_util_latent)?,
            });
        }
        if !train_identities.is_disjoint(&eval_identities) {
            return Err(bad("an identity appears in both splits".into()));
        }
        Ok(World { config, samples, train_identities, eval_identities })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_text(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

pub fn generate_world(config: &WorldConfig) -> Result<World> {
    config.validate()?;
    let mixer = DenseNet::init(
        &[config.n_id_latent + config.n_util_latent, config.n_feature, config.n_feature],
        Activation::Tanh,
        Activation::Linear,
        derive_seed(config.seed, "mixer"),
    )?;
    let mut rng = rng_from_seed(derive_seed(config.seed, "samples"));
    let id_gain = (config.n_id_latent as f64).sqrt();
    let mut samples = Vec::with_capacity(config.total_samples());
    for label in 0..config.n_identities {
        let center = random_unit(config.n_id_latent, &mut rng);
        for _ in 0..config.samples_per_identity {
            let id_latent = if config.within_identity_noise == 0.0 {
                center.clone()
            } else {
                let jitter = gaussian_vec(config.n_id_latent, config.within_identity_noise, &mut rng);
                let moved: Vec<f64> = center.iter().zip(&jitter).map(|(c, j)| c + j).collect();
                normalize(&moved)?
            };
            let util = gaussian_vec(config.n_util_latent, 1.0, &mut rng);
            let mut input: Vec<f64> = id_latent.iter().map(|v| v * id_gain).collect();
            input.extend_from_slice(&util);
            samples.push(Sample {
                feature: mixer.predict(&input)?,
                identity_label: label,
                id_latent_truth: id_latent,
                util_latent_truth: util,
            });
        }
    }
    let mut labels: Vec<usize> = (0..config.n_identities).collect();
    labels.shuffle(&mut rng_from_seed(derive_seed(config.seed, "split")));
    let n_train = config.n_identities * 4 / 5;
    let train_identities = labels[..n_train].iter().copied().collect();
    let eval_identities = labels[n_train..].iter().copied().collect();
    Ok(World { config: config.clone(), samples, train_identities, eval_identities })
}
