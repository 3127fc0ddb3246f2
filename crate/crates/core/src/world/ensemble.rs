use serde::{Deserialize, Serialize};

use super::expert::{ExpertKind, ExpertModel, ExpertTrace};
use crate::error::{Error, Result};
use crate::math::{gaussian_matrix, mat_vec, norm, normalize, normalize_backward};
use crate::nn::{Activation, AdamConfig, AdamState, Checkpoint, DenseNet, ForwardCache, NetGrads};
use crate::obfuscator::IdVector;
use crate::rng::{derive_seed, rng_from_seed};
use crate::world::World;

/// Identity extractor: frozen identity experts whose concatenated embeddings
/// are merged by an MLP with `tanh` output, then projected onto the unit sphere.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleExtractor {
    experts: Vec<ExpertModel>,
    merge_net: DenseNet,
}

#[derive(Debug, Clone)]
pub struct ExtractTrace {
    experts: Vec<ExpertTrace>,
    merge: ForwardCache,
    raw_norm: f64,
    z: IdVector,
}

impl ExtractTrace {
    pub fn z(&self) -> &IdVector {
        &self.z
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MergeTrainConfig {
    pub n_z: usize,
    pub hidden: Vec<usize>,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for MergeTrainConfig {
    fn default() -> Self {
        Self { n_z: 64, hidden: vec![64], steps: 3000, batch_size: 16, learning_rate: 1e-3, seed: 0 }
    }
}

impl EnsembleExtractor {
    pub fn new(experts: Vec<ExpertModel>, merge_net: DenseNet) -> Result<Self> {
        if experts.is_empty() {
            return Err(Error::Config("ensemble needs at least one identity expert".into()));
        }
        if experts.iter().any(|e| e.kind() != ExpertKind::Identity) {
            return Err(Error::Config("ensemble members must be identity experts".into()));
        }
        let input = experts[0].net().input_dim();
        if experts.iter().any(|e| e.net().input_dim() != input) {
            return Err(Error::Dimension("ensemble experts disagree on feature dimension".into()));
        }
        let concat: usize = experts.iter().map(ExpertModel::embedding_dim).sum();
        if merge_net.input_dim() != concat {
            return Err(Error::dim(concat, merge_net.input_dim(), "merge network input"));
        }
        Ok(Self { experts, merge_net })
    }

    pub fn experts(&self) -> &[ExpertModel] {
        &self.experts
    }

    pub fn merge_net(&self) -> &DenseNet {
        &self.merge_net
    }

    pub fn feature_dim(&self) -> usize {
        self.experts[0].net().input_dim()
    }

    pub fn n_z(&self) -> usize {
        self.merge_net.output_dim()
    }

    fn concat_embeddings(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.feature_dim() {
            return Err(Error::dim(self.feature_dim(), x.len(), "extractor input"));
        }
        let mut concat = Vec::with_capacity(self.merge_net.input_dim());
        for e in &self.experts {
            concat.extend(e.embed(x)?);
        }
        Ok(concat)
    }

    pub fn extract(&self, x: &[f64]) -> Result<IdVector> {
        let raw = self.merge_net.predict(&self.concat_embeddings(x)?)?;
        IdVector::from_raw(&raw)
    }

    pub fn extract_traced(&self, x: &[f64]) -> Result<ExtractTrace> {
        if x.len() != self.feature_dim() {
            return Err(Error::dim(self.feature_dim(), x.len(), "extractor input"));
        }
        let experts = self.experts.iter().map(|e| e.embed_traced(x)).collect::<Result<Vec<_>>>()?;
        let concat: Vec<f64> = experts.iter().flat_map(|t| t.embedding().iter().copied()).collect();
        let merge = self.merge_net.forward_cache(&concat)?;
        let raw_norm = norm(merge.output());
        let z = IdVector::from_raw(merge.output())?;
        Ok(ExtractTrace { experts, merge, raw_norm, z })
    }

    /// Gradient with respect to the input features of a loss on `z`.
    pub fn input_gradient(&self, trace: &ExtractTrace, grad_z: &[f64]) -> Result<Vec<f64>> {
        let grad_raw = normalize_backward(trace.z.as_slice(), trace.raw_norm, grad_z);
        let mut scratch = NetGrads::zeros_like(&self.merge_net);
        let grad_concat = self.merge_net.backward_accumulate(&trace.merge, &grad_raw, &mut scratch)?;
        let mut grad_x = vec![0.0; self.feature_dim()];
        let mut offset = 0;
        for (expert, t) in self.experts.iter().zip(&trace.experts) {
            let d = expert.embedding_dim();
            let g = expert.input_gradient(t, &grad_concat[offset..offset + d])?;
            for (acc, v) in grad_x.iter_mut().zip(g) {
                *acc += v;
            }
            offset += d;
        }
        Ok(grad_x)
    }

    /// Fits the merge network to a fixed random view of the world's ground-truth
    /// identity latent, keeping the member experts frozen.
    pub fn train_merge(experts: Vec<ExpertModel>, world: &World, config: &MergeTrainConfig) -> Result<Self> {
        let concat_dim: usize = experts.iter().map(ExpertModel::embedding_dim).sum();
        let mut sizes = vec![concat_dim];
        sizes.extend_from_slice(&config.hidden);
        sizes.push(config.n_z);
        let merge = DenseNet::init(&sizes, Activation::Tanh, Activation::Tanh, derive_seed(config.seed, "merge-init"))?;
        let mut extractor = Self::new(experts, merge)?;
        let train = world.train_samples();
        if train.is_empty() || config.batch_size == 0 {
            return Err(Error::Config("merge training needs a train split and a positive batch size".into()));
        }
        let mut rng = rng_from_seed(derive_seed(config.seed, "merge-target"));
        let n_id = world.config.n_id_latent;
        let projection = gaussian_matrix(config.n_z, n_id, 1.0, &mut rng);
        let inputs = train.iter().map(|s| extractor.concat_embeddings(&s.feature)).collect::<Result<Vec<_>>>()?;
        let targets = train
            .iter()
            .map(|s| normalize(&mat_vec(&projection, n_id, &s.id_latent_truth)))
            .collect::<Result<Vec<_>>>()?;

        let mut adam = AdamState::new(&extractor.merge_net, AdamConfig::with_learning_rate(config.learning_rate));
        let mut batch_rng = rng_from_seed(derive_seed(config.seed, "merge-batches"));
        for step in 0..config.steps {
            let mut grads = NetGrads::zeros_like(&extractor.merge_net);
            for _ in 0..config.batch_size {
                let i = rand::Rng::random_range(&mut batch_rng, 0..inputs.len());
                let cache = extractor.merge_net.forward_cache(&inputs[i])?;
                let g: Vec<f64> = cache.output().iter().zip(&targets[i]).map(|(o, t)| o - t).collect();
                extractor.merge_net.backward_accumulate(&cache, &g, &mut grads)?;
            }
            grads.scale(1.0 / config.batch_size as f64);
            adam.step(&mut extractor.merge_net, &grads)
                .map_err(|e| Error::Training(format!("merge step {step}: {e}")))?;
        }
        Ok(extractor)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new("extractor").with("merge", &self.merge_net);
        for (i, e) in self.experts.iter().enumerate() {
            ck = ck.with(format!("expert{i}"), e.net());
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind("extractor")?;
        let merge = ck.net("merge")?.clone();
        let experts = ck
            .nets
            .iter()
            .filter(|(name, _)| name.starts_with("expert"))
            .map(|(_, net)| ExpertModel::new(ExpertKind::Identity, net.clone()))
            .collect();
        Self::new(experts, merge)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn expert(seed: u64) -> ExpertModel {
        ExpertModel::new(ExpertKind::Identity, DenseNet::init(&[6, 8, 4], Activation::Tanh, Activation::Tanh, seed).unwrap())
    }

    fn passthrough(dim: usize) -> DenseNet {
        let mut w = vec![0.0; dim * dim];
        for i in 0..dim {
            w[i * dim + i] = 1.0;
        }
        DenseNet::from_parts(vec![dim, dim], vec![w], vec![vec![0.0; dim]], Activation::Tanh, Activation::Linear)
            .unwrap()
    }

    #[test]
    fn degenerate_ensemble_is_the_expert() {
        let e = expert(1);
        let x = [0.2, -0.4, 0.1, 0.9, -0.3, 0.5];
        let ext = EnsembleExtractor::new(vec![e.clone()], passthrough(4)).unwrap();
        let z = ext.extract(&x).unwrap();
        let direct = e.embed(&x).unwrap();
        for (a, b) in z.as_slice().iter().zip(&direct) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn output_is_unit_and_pure() {
        let merge = DenseNet::init(&[8, 10, 5], Activation::Tanh, Activation::Tanh, 3).unwrap();
        let ext = EnsembleExtractor::new(vec![expert(1), expert(2)], merge).unwrap();
        let x = [0.7, 0.1, -0.6, 0.2, 0.0, -1.0];
        let z = ext.extract(&x).unwrap();
        assert!((norm(z.as_slice()) - 1.0).abs() < 1e-9);
        assert_eq!(z, ext.extract(&x).unwrap());
        assert!(matches!(ext.extract(&[0.0; 3]), Err(Error::Dimension(_))));
    }

    #[test]
    fn merge_width_must_match() {
        let merge = DenseNet::init(&[7, 5], Activation::Tanh, Activation::Tanh, 3).unwrap();
        assert!(EnsembleExtractor::new(vec![expert(1), expert(2)], merge).is_err());
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let merge = DenseNet::init(&[8, 6, 5], Activation::Tanh, Activation::Tanh, 4).unwrap();
        let ext = EnsembleExtractor::new(vec![expert(1), expert(2)], merge).unwrap();
        let x = [0.3, -0.2, 0.5, 0.1, -0.7, 0.4];
        let w = [0.5, -1.0, 0.25, 0.8, -0.3];
        let f = |x: &[f64]| crate::math::dot(ext.extract(x).unwrap().as_slice(), &w);
        let trace = ext.extract_traced(&x).unwrap();
        let g = ext.input_gradient(&trace, &w).unwrap();
        let h = 1e-5;
        for i in 0..x.len() {
            let mut xp = x;
            let mut xm = x;
            xp[i] += h;
            xm[i] -= h;
            let fd = (f(&xp) - f(&xm)) / (2.0 * h);
            assert!((fd - g[i]).abs() <= 1e-4 * fd.abs().max(g[i].abs()) + 1e-8, "{i}: {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let merge = DenseNet::init(&[8, 6, 5], Activation::Tanh, Activation::Tanh, 4).unwrap();
        let ext = EnsembleExtractor::new(vec![expert(1), expert(2)], merge).unwrap();
        let back = EnsembleExtractor::from_checkpoint(&ext.to_checkpoint()).unwrap();
        assert_eq!(back, ext);
    }
}
