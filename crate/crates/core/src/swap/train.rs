use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::losses::{critic_loss_with_grads, gen_with_grads, uti_with_grads};
use super::{Critics, SwapModel, SwapTrace};
use crate::error::{Error, Result};
use crate::math::{cosine_with_grads, mean_abs_diff, mean_abs_diff_grad};
use crate::nn::{scale_all, AdamConfig, GroupOptimizer, NetGrads, ParamGroup};
use crate::obfuscator::{deid_with_grads, IdVector, NoiseMode, Obfuscator};
use crate::rng::{derive_seed, rng_from_seed, task_rng};
use crate::world::{EnsembleExtractor, ExpertModel, World};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_id: f64,
    pub lambda_deid: f64,
    pub lambda_mix: f64,
    pub lambda_uti: Vec<f64>,
    pub lambda_kld: f64,
    pub lambda_gen: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_id: 30.0, lambda_deid: 30.0, lambda_mix: 10.0, lambda_uti: vec![2.0, 2.0], lambda_kld: 6.4, lambda_gen: 1.0 }
    }
}

impl LossWeights {
    pub fn zero(n_utility: usize) -> Self {
        Self {
            lambda_id: 0.0,
            lambda_deid: 0.0,
            lambda_mix: 0.0,
            lambda_uti: vec![0.0; n_utility],
            lambda_kld: 0.0,
            lambda_gen: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_id, self.lambda_deid, self.lambda_mix, self.lambda_kld, self.lambda_gen];
        if all.iter().chain(&self.lambda_uti).any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(Error::Config("loss weights must be nonnegative reals".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Phase1Config {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub critic_learning_rate: f64,
    pub lambda_id: f64,
    pub lambda_gen: f64,
    /// Also inject the identity of another batch member, not only the sample's own.
    pub cross_swap: bool,
    pub seed: u64,
}

impl Default for Phase1Config {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 4,
            learning_rate: 1e-3,
            critic_learning_rate: 1e-3,
            lambda_id: 30.0,
            lambda_gen: 1.0,
            cross_swap: true,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Phase2Config {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub critic_learning_rate: f64,
    pub seed: u64,
}

impl Default for Phase2Config {
    fn default() -> Self {
        Self { steps: 2000, batch_size: 4, learning_rate: 1e-3, critic_learning_rate: 1e-3, seed: 0 }
    }
}

/// Frozen models and weights shared by every phase-2 step.
#[derive(Debug, Clone, Copy)]
pub struct Phase2Context<'a> {
    pub extractor: &'a EnsembleExtractor,
    pub utility_experts: &'a [ExpertModel],
    pub weights: &'a LossWeights,
}

/// Unweighted loss terms (batch means) and the weighted total.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub id: f64,
    pub deid: f64,
    pub mix: f64,
    pub gen: f64,
    pub uti: f64,
    pub kld: f64,
    pub total: f64,
    pub critic: f64,
}

impl StepLosses {
    fn add(&mut self, o: &StepLosses) {
        self.id += o.id;
        self.deid += o.deid;
        self.mix += o.mix;
        self.gen += o.gen;
        self.uti += o.uti;
        self.kld += o.kld;
        self.total += o.total;
        self.critic += o.critic;
    }

    fn scale(&mut self, f: f64) {
        for v in [&mut self.id, &mut self.deid, &mut self.mix, &mut self.gen, &mut self.uti, &mut self.kld, &mut self.total, &mut self.critic] {
            *v *= f;
        }
    }
}

fn add_scaled(acc: &mut [f64], g: &[f64], s: f64) {
    for (a, v) in acc.iter_mut().zip(g) {
        *a += s * v;
    }
}

/// `1 − cos(ẑ, h(g(x, ẑ)))`, adding `weight·∂/∂x̃` into `grad_out` and
/// returning `weight·∂/∂ẑ` through the cosine target.
fn id_term(
    extractor: &EnsembleExtractor,
    trace: &SwapTrace,
    z_hat: &[f64],
    weight: f64,
    grad_out: &mut [f64],
) -> Result<(f64, Vec<f64>)> {
    let et = extractor.extract_traced(trace.output())?;
    let (c, g_target, g_re) = cosine_with_grads(z_hat, et.z().as_slice())?;
    if weight != 0.0 {
        let g_re: Vec<f64> = g_re.iter().map(|v| -weight * v).collect();
        add_scaled(grad_out, &extractor.input_gradient(&et, &g_re)?, 1.0);
    }
    Ok((1.0 - c, g_target.iter().map(|v| -weight * v).collect()))
}

fn check_batch(batch_size: usize, n: usize) -> Result<()> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    if n < 2 {
        return Err(Error::Config("training needs at least two train samples".into()));
    }
    Ok(())
}

fn sum_grads(parts: Vec<Vec<NetGrads>>, mut into: Vec<NetGrads>) -> Vec<NetGrads> {
    for part in parts {
        for (a, g) in into.iter_mut().zip(&part) {
            a.add_assign(g);
        }
    }
    into
}

/// One critic update on `(x_i, x_{i+1})` real pairs against `(x_i, x̃_i)` fakes.
fn critic_step(critics: &mut Critics, opt: &mut GroupOptimizer, xs: &[&[f64]], fakes: &[Vec<f64>]) -> Result<f64> {
    let b = xs.len();
    let parts = (0..b)
        .into_par_iter()
        .map(|i| {
            let mut g = critics.zero_grads();
            let l = critic_loss_with_grads(critics, (xs[i], xs[(i + 1) % b]), (xs[i], &fakes[i]), &mut g)?;
            Ok((l, g))
        })
        .collect::<Result<Vec<_>>>()?;
    let loss = parts.iter().map(|(l, _)| l).sum::<f64>() / b as f64;
    let mut grads = sum_grads(parts.into_iter().map(|(_, g)| g).collect(), critics.zero_grads());
    scale_all(&mut grads, 1.0 / b as f64);
    opt.step(critics, &grads)?;
    Ok(loss)
}

fn sample_batch<R: Rng>(rng: &mut R, n: usize, b: usize) -> Vec<usize> {
    (0..b).map(|_| rng.random_range(0..n)).collect()
}

/// Pretrains the swap generator: self-swap identity reconstruction (plus a
/// cross-swap with another batch member's identity when enabled) and the
/// adversarial term, alternating 1:1 with critic updates. Returns the
/// per-step generator objective.
pub fn train_phase1(
    swap: &mut SwapModel,
    critics: &mut Critics,
    extractor: &EnsembleExtractor,
    world: &World,
    config: &Phase1Config,
) -> Result<Vec<f64>> {
    let train = world.train_samples();
    check_batch(config.batch_size, train.len())?;
    let zs = train.iter().map(|s| extractor.extract(&s.feature)).collect::<Result<Vec<IdVector>>>()?;
    let mut gen_opt = GroupOptimizer::new(swap, AdamConfig::with_learning_rate(config.learning_rate));
    let mut critic_opt = GroupOptimizer::new(critics, AdamConfig::with_learning_rate(config.critic_learning_rate));
    let mut batch_rng = rng_from_seed(derive_seed(config.seed, "phase1-batches"));
    let mut trace = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let idx = sample_batch(&mut batch_rng, train.len(), config.batch_size);
        let b = idx.len();
        let xs: Vec<&[f64]> = idx.iter().map(|&i| train[i].feature.as_slice()).collect();
        let model = &*swap;
        let crit = &*critics;
        let parts = (0..b)
            .into_par_iter()
            .map(|k| {
                let x = xs[k];
                let z = zs[idx[k]].as_slice();
                let mut grads = model.zero_grads();
                let mut loss = 0.0;
                let t_self = model.forward_traced(x, z)?;
                let mut g = vec![0.0; x.len()];
                let (l, _) = id_term(extractor, &t_self, z, config.lambda_id, &mut g)?;
                loss += config.lambda_id * l;
                let fake_trace = if config.cross_swap {
                    let z_other = zs[idx[(k + 1) % b]].as_slice();
                    let t_cross = model.forward_traced(x, z_other)?;
                    let mut gc = vec![0.0; x.len()];
                    let (l, _) = id_term(extractor, &t_cross, z_other, config.lambda_id, &mut gc)?;
                    loss += config.lambda_id * l;
                    Some((t_cross, gc))
                } else {
                    None
                };
                let (fake, mut g_fake) = match fake_trace {
                    Some((t, gc)) => (t, gc),
                    None => (t_self.clone(), vec![0.0; x.len()]),
                };
                if config.lambda_gen != 0.0 {
                    let (lg, gg) = gen_with_grads(crit, x, fake.output())?;
                    loss += config.lambda_gen * lg;
                    add_scaled(&mut g_fake, &gg, config.lambda_gen);
                }
                if config.cross_swap {
                    model.backward(&t_self, &g, &mut grads)?;
                    model.backward(&fake, &g_fake, &mut grads)?;
                } else {
                    add_scaled(&mut g, &g_fake, 1.0);
                    model.backward(&t_self, &g, &mut grads)?;
                }
                Ok((loss, grads, fake.output().to_vec()))
            })
            .collect::<Result<Vec<_>>>()?;
        let loss = parts.iter().map(|p| p.0).sum::<f64>() / b as f64;
        if !loss.is_finite() {
            return Err(Error::Training(format!("phase 1 diverged at step {step}")));
        }
        let mut fakes = Vec::with_capacity(b);
        let mut grads = swap.zero_grads();
        for (_, g, f) in parts {
            for (a, v) in grads.iter_mut().zip(&g) {
                a.add_assign(v);
            }
            fakes.push(f);
        }
        scale_all(&mut grads, 1.0 / b as f64);
        gen_opt.step(swap, &grads).map_err(|e| Error::Training(format!("phase 1 step {step}: {e}")))?;
        critic_step(critics, &mut critic_opt, &xs, &fakes)
            .map_err(|e| Error::Training(format!("phase 1 critic step {step}: {e}")))?;
        trace.push(loss);
    }
    Ok(trace)
}

struct SampleOutput {
    losses: StepLosses,
    swap_grads: Vec<NetGrads>,
    obf_grads: Vec<NetGrads>,
    fake: Vec<f64>,
}

fn generator_sample<R: Rng>(
    ctx: &Phase2Context<'_>,
    swap: &SwapModel,
    obf: &Obfuscator,
    critics: &Critics,
    x: &[f64],
    rng: &mut R,
) -> Result<SampleOutput> {
    let w = ctx.weights;
    let z = ctx.extractor.extract(x)?;
    let ot = obf.apply_traced(&z, NoiseMode::Train, rng)?;
    let zt = ot.z_tilde().clone();
    let t_self = swap.forward_traced(x, z.as_slice())?;
    let t_swap = swap.forward_traced(x, zt.as_slice())?;
    let n = x.len();
    let mut g_self = vec![0.0; n];
    let mut g_swap = vec![0.0; n];
    let mut g_zt = vec![0.0; zt.dim()];
    let mut l = StepLosses::default();

    let (li, _) = id_term(ctx.extractor, &t_self, z.as_slice(), w.lambda_id, &mut g_self)?;
    let (lt, gt) = id_term(ctx.extractor, &t_swap, zt.as_slice(), w.lambda_id, &mut g_swap)?;
    l.id = li + lt;
    add_scaled(&mut g_zt, &gt, 1.0);

    let (ld, _, gd) = deid_with_grads(z.as_slice(), zt.as_slice())?;
    l.deid = ld;
    add_scaled(&mut g_zt, &gd, w.lambda_deid);

    l.mix = mean_abs_diff(t_swap.output(), t_self.output());
    if w.lambda_mix != 0.0 {
        let gm = mean_abs_diff_grad(t_swap.output(), t_self.output());
        add_scaled(&mut g_swap, &gm, w.lambda_mix);
        add_scaled(&mut g_self, &gm, -w.lambda_mix);
    }

    let (lg, gg) = gen_with_grads(critics, x, t_swap.output())?;
    l.gen = lg;
    add_scaled(&mut g_swap, &gg, w.lambda_gen);

    let (lu, gu) = uti_with_grads(ctx.utility_experts, &w.lambda_uti, x, t_swap.output())?;
    l.uti = lu;
    add_scaled(&mut g_swap, &gu, 1.0);

    l.kld = ot.kld();
    l.total = w.lambda_id * l.id + w.lambda_deid * l.deid + w.lambda_mix * l.mix + w.lambda_gen * l.gen + l.uti
        + w.lambda_kld * l.kld;

    let mut swap_grads = swap.zero_grads();
    swap.backward(&t_self, &g_self, &mut swap_grads)?;
    let gz = swap.backward(&t_swap, &g_swap, &mut swap_grads)?;
    add_scaled(&mut g_zt, &gz, 1.0);
    let mut obf_grads = obf.zero_grads();
    obf.backward(&ot, &g_zt, w.lambda_kld, &mut obf_grads)?;
    Ok(SampleOutput { losses: l, swap_grads, obf_grads, fake: t_swap.output().to_vec() })
}

/// Losses, swap-model gradients, obfuscator gradients and generated `x̃`.
pub type GeneratorStep = (StepLosses, Vec<NetGrads>, Vec<NetGrads>, Vec<Vec<f64>>);

/// Batch-mean phase-2 generator objective and its gradients for the swap
/// model and the obfuscator. Sample `k` draws its noise from stream
/// `stream_base + k` of `noise_seed`. Also returns the generated `x̃`.
pub fn phase2_generator_step(
    ctx: &Phase2Context<'_>,
    swap: &SwapModel,
    obf: &Obfuscator,
    critics: &Critics,
    xs: &[&[f64]],
    noise_seed: u64,
    stream_base: u64,
) -> Result<GeneratorStep> {
    if xs.is_empty() {
        return Err(Error::Input("empty batch".into()));
    }
    let parts = xs
        .par_iter()
        .enumerate()
        .map(|(k, x)| {
            let mut rng = task_rng(noise_seed, stream_base + k as u64);
            generator_sample(ctx, swap, obf, critics, x, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    let b = xs.len() as f64;
    let mut losses = StepLosses::default();
    let mut swap_grads = swap.zero_grads();
    let mut obf_grads = obf.zero_grads();
    let mut fakes = Vec::with_capacity(parts.len());
    for p in parts {
        losses.add(&p.losses);
        for (a, g) in swap_grads.iter_mut().zip(&p.swap_grads) {
            a.add_assign(g);
        }
        for (a, g) in obf_grads.iter_mut().zip(&p.obf_grads) {
            a.add_assign(g);
        }
        fakes.push(p.fake);
    }
    losses.scale(1.0 / b);
    scale_all(&mut swap_grads, 1.0 / b);
    scale_all(&mut obf_grads, 1.0 / b);
    Ok((losses, swap_grads, obf_grads, fakes))
}

/// Joint fine-tuning of the swap model and the obfuscator under the full
/// objective, with the critic updated 1:1. Extractor and experts stay frozen.
pub fn train_phase2(
    swap: &mut SwapModel,
    critics: &mut Critics,
    obf: &mut Obfuscator,
    ctx: &Phase2Context<'_>,
    world: &World,
    config: &Phase2Config,
) -> Result<Vec<StepLosses>> {
    ctx.weights.validate()?;
    if ctx.weights.lambda_uti.len() != ctx.utility_experts.len() {
        return Err(Error::Config(format!(
            "{} utility experts but {} utility weights",
            ctx.utility_experts.len(),
            ctx.weights.lambda_uti.len()
        )));
    }
    let train = world.train_samples();
    check_batch(config.batch_size, train.len())?;
    let mut swap_opt = GroupOptimizer::new(swap, AdamConfig::with_learning_rate(config.learning_rate));
    let mut obf_opt = GroupOptimizer::new(obf, AdamConfig::with_learning_rate(config.learning_rate));
    let mut critic_opt = GroupOptimizer::new(critics, AdamConfig::with_learning_rate(config.critic_learning_rate));
    let mut batch_rng = rng_from_seed(derive_seed(config.seed, "phase2-batches"));
    let noise_seed = derive_seed(config.seed, "phase2-noise");
    let mut trace = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let idx = sample_batch(&mut batch_rng, train.len(), config.batch_size);
        let xs: Vec<&[f64]> = idx.iter().map(|&i| train[i].feature.as_slice()).collect();
        let stream = (step * config.batch_size) as u64;
        let (mut losses, sg, og, fakes) = phase2_generator_step(ctx, swap, obf, critics, &xs, noise_seed, stream)?;
        if !losses.total.is_finite() {
            return Err(Error::Training(format!("phase 2 diverged at step {step}")));
        }
        swap_opt.step(swap, &sg).map_err(|e| Error::Training(format!("phase 2 step {step}: {e}")))?;
        obf_opt.step(obf, &og).map_err(|e| Error::Training(format!("phase 2 step {step}: {e}")))?;
        losses.critic = critic_step(critics, &mut critic_opt, &xs, &fakes)
            .map_err(|e| Error::Training(format!("phase 2 critic step {step}: {e}")))?;
        trace.push(losses);
    }
    Ok(trace)
}

/// Mean self-swap identity loss `1 − cos(z, h(g(x, z)))` over `samples`.
pub fn self_swap_id_loss(extractor: &EnsembleExtractor, swap: &SwapModel, features: &[&[f64]]) -> Result<f64> {
    let mut total = 0.0;
    for x in features {
        let z = extractor.extract(x)?;
        let re = extractor.extract(&swap.forward(x, &z)?)?;
        total += 1.0 - crate::math::cosine(z.as_slice(), re.as_slice())?;
    }
    Ok(total / features.len().max(1) as f64)
}
