use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{pair_distances, verification_accuracy};
use crate::math::{gaussian_matrix, mat_vec, norm, normalize, normalize_backward};
use crate::nn::{Activation, AdamConfig, AdamState, Checkpoint, DenseNet, ForwardCache, NetGrads};
use crate::rng::{derive_seed, rng_from_seed};
use crate::world::{Sample, World};

/// Held-out verification accuracy an identity expert must reach (percent).
pub const EXPERT_QUALITY_GATE: f64 = 95.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExpertKind {
    Identity,
    Utility,
}

impl ExpertKind {
    fn checkpoint_kind(self) -> &'static str {
        match self {
            ExpertKind::Identity => "expert-identity",
            ExpertKind::Utility => "expert-utility",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExpertSpec {
    pub kind: ExpertKind,
    pub embedding_dim: usize,
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for ExpertSpec {
    fn default() -> Self {
        Self {
            kind: ExpertKind::Identity,
            embedding_dim: 32,
            hidden: vec![64],
            epochs: 40,
            batch_size: 16,
            learning_rate: 1e-3,
            seed: 0,
        }
    }
}

impl ExpertSpec {
    pub fn identity(seed: u64) -> Self {
        Self { seed, ..Self::default() }
    }

    pub fn utility(seed: u64) -> Self {
        Self { kind: ExpertKind::Utility, embedding_dim: 4, seed, ..Self::default() }
    }
}

/// A frozen stand-in for a pretrained recognizer or task model.
///
/// There is no mutable access to the network once built.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertModel {
    kind: ExpertKind,
    net: DenseNet,
}

/// Forward state needed to backpropagate through [`ExpertModel::embed`].
#[derive(Debug, Clone)]
pub struct ExpertTrace {
    cache: ForwardCache,
    raw_norm: f64,
    embedding: Vec<f64>,
}

impl ExpertTrace {
    pub fn embedding(&self) -> &[f64] {
        &self.embedding
    }
}

impl ExpertModel {
    pub fn new(kind: ExpertKind, net: DenseNet) -> Self {
        Self { kind, net }
    }

    pub fn kind(&self) -> ExpertKind {
        self.kind
    }

    pub fn net(&self) -> &DenseNet {
        &self.net
    }

    pub fn embedding_dim(&self) -> usize {
        self.net.output_dim()
    }

    pub fn fingerprint(&self) -> String {
        self.net.fingerprint()
    }

    /// Identity experts emit unit vectors; utility experts their raw prediction.
    pub fn embed(&self, x: &[f64]) -> Result<Vec<f64>> {
        let out = self.net.predict(x)?;
        match self.kind {
            ExpertKind::Identity => normalize(&out),
            ExpertKind::Utility => Ok(out),
        }
    }

    pub fn embed_traced(&self, x: &[f64]) -> Result<ExpertTrace> {
        let cache = self.net.forward_cache(x)?;
        let raw = cache.output();
        let raw_norm = norm(raw);
        let embedding = match self.kind {
            ExpertKind::Identity => normalize(raw)?,
            ExpertKind::Utility => raw.to_vec(),
        };
        Ok(ExpertTrace { cache, raw_norm, embedding })
    }

    /// Gradient of a loss with respect to the expert's input.
    pub fn input_gradient(&self, trace: &ExpertTrace, grad_embedding: &[f64]) -> Result<Vec<f64>> {
        let grad_raw = match self.kind {
            ExpertKind::Identity => normalize_backward(&trace.embedding, trace.raw_norm, grad_embedding),
            ExpertKind::Utility => grad_embedding.to_vec(),
        };
        let mut scratch = NetGrads::zeros_like(&self.net);
        self.net.backward_accumulate(&trace.cache, &grad_raw, &mut scratch)
    }

    fn check_penultimate(&self) -> Result<()> {
        if self.net.num_layers() < 2 {
            return Err(Error::UnsupportedArchitecture(
                "penultimate features need an expert with at least one hidden layer".into(),
            ));
        }
        Ok(())
    }

    pub fn penultimate_traced(&self, x: &[f64]) -> Result<(Vec<f64>, ForwardCache)> {
        self.check_penultimate()?;
        let cache = self.net.forward_cache(x)?;
        let features = cache.activation(self.net.num_layers() - 1).to_vec();
        Ok((features, cache))
    }

    pub fn penultimate_input_gradient(&self, cache: &ForwardCache, grad_features: &[f64]) -> Result<Vec<f64>> {
        self.check_penultimate()?;
        let mut scratch = NetGrads::zeros_like(&self.net);
        self.net.backward_from(cache, self.net.num_layers() - 1, grad_features, &mut scratch)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::single(self.kind.checkpoint_kind(), &self.net)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let kind = match ck.model_kind.as_str() {
            "expert-identity" => ExpertKind::Identity,
            "expert-utility" => ExpertKind::Utility,
            other => return Err(Error::Config(format!("checkpoint kind `{other}` is not an expert"))),
        };
        Ok(Self { kind, net: ck.net("main")?.clone() })
    }
}

/// Activations entering the expert's final layer.
pub fn expert_penultimate(expert: &ExpertModel, x: &[f64]) -> Result<Vec<f64>> {
    expert.penultimate_traced(x).map(|(f, _)| f)
}

/// Regression target an expert learns: a fixed random view of the hidden latent.
struct TargetMap {
    matrix: Vec<f64>,
    cols: usize,
    kind: ExpertKind,
}

impl TargetMap {
    fn new(spec: &ExpertSpec, world: &World) -> Self {
        let mut rng = rng_from_seed(derive_seed(spec.seed, "target"));
        let cols = match spec.kind {
            ExpertKind::Identity => world.config.n_id_latent,
            ExpertKind::Utility => world.config.n_util_latent,
        };
        let std = match spec.kind {
            ExpertKind::Identity => 1.0,
            ExpertKind::Utility => 0.4 / (cols as f64).sqrt(),
        };
        Self { matrix: gaussian_matrix(spec.embedding_dim, cols, std, &mut rng), cols, kind: spec.kind }
    }

    fn target(&self, sample: &Sample) -> Result<Vec<f64>> {
        match self.kind {
            ExpertKind::Identity => normalize(&mat_vec(&self.matrix, self.cols, &sample.id_latent_truth)),
            ExpertKind::Utility => Ok(mat_vec(&self.matrix, self.cols, &sample.util_latent_truth)),
        }
    }
}

/// Balanced held-out verification accuracy of an identity embedder (percent).
pub(crate) fn heldout_accuracy(
    embed: impl Fn(&[f64]) -> Result<Vec<f64>>,
    samples: &[&Sample],
    seed: u64,
) -> Result<f64> {
    let labels: Vec<usize> = samples.iter().map(|s| s.identity_label).collect();
    let embeddings = samples.iter().map(|s| embed(&s.feature)).collect::<Result<Vec<_>>>()?;
    let n = samples.len();
    let scores = pair_distances(&labels, &embeddings, n, n, seed)?;
    verification_accuracy(&scores)
}

/// Trains and freezes an expert on the world's train split.
///
/// Identity experts must clear [`EXPERT_QUALITY_GATE`] on the eval split.
pub fn train_expert(world: &World, spec: &ExpertSpec) -> Result<ExpertModel> {
    if spec.embedding_dim == 0 || spec.batch_size == 0 {
        return Err(Error::Config("expert embedding_dim and batch_size must be positive".into()));
    }
    let train = world.train_samples();
    if train.is_empty() {
        return Err(Error::Config("world has no train split".into()));
    }
    let mut sizes = vec![world.config.n_feature];
    sizes.extend_from_slice(&spec.hidden);
    sizes.push(spec.embedding_dim);
    let mut net = DenseNet::init(&sizes, Activation::Tanh, Activation::Tanh, derive_seed(spec.seed, "init"))?;
    let targets = TargetMap::new(spec, world);
    let target_values = train.iter().map(|s| targets.target(s)).collect::<Result<Vec<_>>>()?;

    let mut adam = AdamState::new(&net, AdamConfig::with_learning_rate(spec.learning_rate));
    let mut rng = rng_from_seed(derive_seed(spec.seed, "batches"));
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..spec.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(spec.batch_size) {
            let mut grads = NetGrads::zeros_like(&net);
            for &i in batch {
                let cache = net.forward_cache(&train[i].feature)?;
                let grad: Vec<f64> =
                    cache.output().iter().zip(&target_values[i]).map(|(o, t)| o - t).collect();
                net.backward_accumulate(&cache, &grad, &mut grads)?;
            }
            grads.scale(1.0 / batch.len() as f64);
            adam.step(&mut net, &grads).map_err(|e| Error::Training(format!("expert epoch {epoch}: {e}")))?;
        }
    }
    let expert = ExpertModel::new(spec.kind, net);
    if spec.kind == ExpertKind::Identity {
        let eval = world.eval_samples();
        let accuracy = heldout_accuracy(|x| expert.embed(x), &eval, derive_seed(spec.seed, "gate"))?;
        if accuracy < EXPERT_QUALITY_GATE {
            return Err(Error::ExpertQuality { accuracy, required: EXPERT_QUALITY_GATE });
        }
    }
    Ok(expert)
}
