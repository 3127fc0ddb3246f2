use super::{Critics, SwapModel};
use crate::error::{Error, Result};
use crate::math::{cosine, mean_abs_diff, mean_abs_diff_grad};
use crate::nn::NetGrads;
use crate::obfuscator::IdVector;
use crate::world::{EnsembleExtractor, ExpertKind, ExpertModel};

/// Critic outputs are clamped this far from 0 and 1 inside logarithms.
pub const CLAMP_EPS: f64 = 1e-7;

/// Mean absolute difference between the `z̃`-conditioned and `z`-conditioned outputs.
pub fn loss_mix(model: &SwapModel, x: &[f64], z: &IdVector, z_tilde: &IdVector) -> Result<f64> {
    Ok(mean_abs_diff(&model.forward(x, z_tilde)?, &model.forward(x, z)?))
}

/// `Σ_i ln(1 − D_i(x, x̃))` with `D_i` clamped below `1 − CLAMP_EPS`.
pub fn loss_gen(critics: &Critics, x: &[f64], x_tilde: &[f64]) -> Result<f64> {
    Ok(critics.scores(x, x_tilde)?.iter().map(|d| (1.0 - d.min(1.0 - CLAMP_EPS)).ln()).sum())
}

/// [`loss_gen`] with its gradient with respect to `x̃`.
pub fn gen_with_grads(critics: &Critics, x: &[f64], x_tilde: &[f64]) -> Result<(f64, Vec<f64>)> {
    let n = x.len();
    let mut grad = vec![0.0; x_tilde.len()];
    let mut loss = 0.0;
    for (net, cache) in critics.nets_slice().iter().zip(critics.traced(x, x_tilde)?) {
        let d = cache.output()[0];
        loss += (1.0 - d.min(1.0 - CLAMP_EPS)).ln();
        if d >= 1.0 - CLAMP_EPS {
            continue;
        }
        let mut scratch = NetGrads::zeros_like(net);
        let g = net.backward_accumulate(&cache, &[-1.0 / (1.0 - d)], &mut scratch)?;
        for (acc, v) in grad.iter_mut().zip(&g[n..]) {
            *acc += v;
        }
    }
    Ok((loss, grad))
}

/// Nonsaturating critic objective `Σ_i −ln D_i(real) − ln(1 − D_i(fake))`.
pub fn critic_loss(critics: &Critics, real: (&[f64], &[f64]), fake: (&[f64], &[f64])) -> Result<f64> {
    let r = critics.scores(real.0, real.1)?;
    let f = critics.scores(fake.0, fake.1)?;
    Ok(r.iter()
        .zip(&f)
        .map(|(dr, df)| -dr.max(CLAMP_EPS).ln() - (1.0 - df.min(1.0 - CLAMP_EPS)).ln())
        .sum())
}

/// [`critic_loss`], accumulating parameter gradients into `grads` (one per critic).
pub fn critic_loss_with_grads(
    critics: &Critics,
    real: (&[f64], &[f64]),
    fake: (&[f64], &[f64]),
    grads: &mut [NetGrads],
) -> Result<f64> {
    if grads.len() != critics.len() {
        return Err(Error::Dimension("one gradient buffer per critic".into()));
    }
    let real_caches = critics.traced(real.0, real.1)?;
    let fake_caches = critics.traced(fake.0, fake.1)?;
    let mut loss = 0.0;
    for (i, net) in critics.nets_slice().iter().enumerate() {
        let dr = real_caches[i].output()[0];
        let df = fake_caches[i].output()[0];
        loss += -dr.max(CLAMP_EPS).ln() - (1.0 - df.min(1.0 - CLAMP_EPS)).ln();
        if dr > CLAMP_EPS {
            net.backward_accumulate(&real_caches[i], &[-1.0 / dr], &mut grads[i])?;
        }
        if df < 1.0 - CLAMP_EPS {
            net.backward_accumulate(&fake_caches[i], &[1.0 / (1.0 - df)], &mut grads[i])?;
        }
    }
    Ok(loss)
}

/// `Σ_{ẑ ∈ {z, z̃}} (1 − cos(ẑ, h(g(x, ẑ))))`.
pub fn loss_id(
    extractor: &EnsembleExtractor,
    model: &SwapModel,
    x: &[f64],
    z: &IdVector,
    z_tilde: &IdVector,
) -> Result<f64> {
    let mut total = 0.0;
    for zh in [z, z_tilde] {
        let re = extractor.extract(&model.forward(x, zh)?)?;
        total += 1.0 - cosine(zh.as_slice(), re.as_slice())?;
    }
    Ok(total)
}

fn check_utility(experts: &[ExpertModel], weights: &[f64]) -> Result<()> {
    if experts.len() != weights.len() {
        return Err(Error::Config(format!(
            "{} utility experts but {} utility weights",
            experts.len(),
            weights.len()
        )));
    }
    if experts.iter().any(|e| e.kind() != ExpertKind::Utility) {
        return Err(Error::Config("utility loss needs utility experts".into()));
    }
    Ok(())
}

/// `Σ_i λ_i · mean|φ_i(x) − φ_i(x̃)|` over penultimate features `φ_i`.
pub fn loss_uti(experts: &[ExpertModel], weights: &[f64], x: &[f64], x_tilde: &[f64]) -> Result<f64> {
    check_utility(experts, weights)?;
    let mut total = 0.0;
    for (e, w) in experts.iter().zip(weights) {
        let a = e.penultimate_traced(x)?.0;
        let b = e.penultimate_traced(x_tilde)?.0;
        total += w * mean_abs_diff(&a, &b);
    }
    Ok(total)
}

/// [`loss_uti`] with its gradient with respect to `x̃`.
pub fn uti_with_grads(experts: &[ExpertModel], weights: &[f64], x: &[f64], x_tilde: &[f64]) -> Result<(f64, Vec<f64>)> {
    check_utility(experts, weights)?;
    let mut total = 0.0;
    let mut grad = vec![0.0; x_tilde.len()];
    for (e, &w) in experts.iter().zip(weights) {
        if w == 0.0 {
            continue;
        }
        let a = e.penultimate_traced(x)?.0;
        let (b, cache) = e.penultimate_traced(x_tilde)?;
        total += w * mean_abs_diff(&a, &b);
        let g: Vec<f64> = mean_abs_diff_grad(&b, &a).iter().map(|v| w * v).collect();
        for (acc, v) in grad.iter_mut().zip(e.penultimate_input_gradient(&cache, &g)?) {
            *acc += v;
        }
    }
    Ok((total, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, DenseNet, ParamGroup};
    use crate::swap::SwapConfig;

    fn critics_const(logit: f64, k: usize, n: usize) -> Critics {
        let nets = (0..k)
            .map(|_| {
                DenseNet::from_parts(vec![2 * n, 1], vec![vec![0.0; 2 * n]], vec![vec![logit]], Activation::Tanh, Activation::Sigmoid)
                    .unwrap()
            })
            .collect();
        Critics::from_nets(nets).unwrap()
    }

    #[test]
    fn gen_loss_closed_forms() {
        let x = [0.1, 0.2];
        let half = critics_const(0.0, 1, 2);
        assert!((loss_gen(&half, &x, &x).unwrap() - 0.5f64.ln()).abs() < 1e-15);
        let two = critics_const(0.0, 2, 2);
        assert!((loss_gen(&two, &x, &x).unwrap() - 2.0 * 0.5f64.ln()).abs() < 1e-15);
        let low = loss_gen(&critics_const(-30.0, 1, 2), &x, &x).unwrap();
        assert!(low <= 0.0 && low > -1e-12);
        assert!(loss_gen(&critics_const(60.0, 1, 2), &x, &x).unwrap().is_finite());
    }

    #[test]
    fn critic_loss_closed_forms() {
        let x = [0.1, 0.2];
        let half = critics_const(0.0, 1, 2);
        assert!((critic_loss(&half, (&x, &x), (&x, &x)).unwrap() - 2.0 * 2f64.ln()).abs() < 1e-12);
        // Perfect critic: real → 1, fake → 0, via a weight on the second slot.
        let w = vec![0.0, 0.0, 40.0, 40.0];
        let net = DenseNet::from_parts(vec![4, 1], vec![w], vec![vec![0.0]], Activation::Tanh, Activation::Sigmoid).unwrap();
        let perfect = Critics::from_nets(vec![net]).unwrap();
        let l = critic_loss(&perfect, (&x, &[1.0, 1.0]), (&x, &[-1.0, -1.0])).unwrap();
        assert!(l < 1e-10, "{l}");
    }

    #[test]
    fn critic_gradient_matches_finite_differences() {
        let critics = Critics::init(3, 2, &[4], 5).unwrap();
        let (x, r, f) = ([0.2, -0.1, 0.4], [0.5, 0.3, -0.7], [-0.2, 0.9, 0.1]);
        let mut grads = critics.zero_grads();
        critic_loss_with_grads(&critics, (&x, &r), (&x, &f), &mut grads).unwrap();
        let h = 1e-6;
        for n in 0..2 {
            let flat = grads[n].flat();
            for i in 0..flat.len() {
                let mut p = critics.clone();
                let mut q = critics.clone();
                let mut v = p.nets()[n].flat_params();
                v[i] += h;
                p.nets_mut()[n].set_flat_params(&v).unwrap();
                v[i] -= 2.0 * h;
                q.nets_mut()[n].set_flat_params(&v).unwrap();
                let fd = (critic_loss(&p, (&x, &r), (&x, &f)).unwrap() - critic_loss(&q, (&x, &r), (&x, &f)).unwrap())
                    / (2.0 * h);
                assert!((fd - flat[i]).abs() <= 1e-4 * fd.abs().max(flat[i].abs()) + 1e-8);
            }
        }
    }

    #[test]
    fn gen_gradient_matches_finite_differences() {
        let critics = Critics::init(3, 2, &[4], 6).unwrap();
        let x = [0.2, -0.1, 0.4];
        let xt = [0.3, 0.6, -0.5];
        let (_, g) = gen_with_grads(&critics, &x, &xt).unwrap();
        let h = 1e-6;
        for i in 0..3 {
            let mut p = xt;
            let mut m = xt;
            p[i] += h;
            m[i] -= h;
            let fd = (loss_gen(&critics, &x, &p).unwrap() - loss_gen(&critics, &x, &m).unwrap()) / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-7);
        }
    }

    #[test]
    fn mix_loss_properties() {
        let model = SwapModel::init(6, 4, &SwapConfig::default(), 1).unwrap();
        let x = [0.3, -0.1, 0.2, 0.8, -0.5, 0.0];
        let z = IdVector::from_raw(&[1.0, 2.0, -1.0, 0.5]).unwrap();
        let zt = IdVector::from_raw(&[-1.0, 0.3, 0.2, 0.5]).unwrap();
        assert_eq!(loss_mix(&model, &x, &z, &z).unwrap(), 0.0);
        assert_eq!(loss_mix(&model, &x, &z, &zt).unwrap(), loss_mix(&model, &x, &zt, &z).unwrap());
        let a = model.forward(&x, &zt).unwrap();
        let b = model.forward(&x, &z).unwrap();
        let direct: f64 = a.iter().zip(&b).map(|(p, q)| (p - q).abs()).sum::<f64>() / 6.0;
        assert!((loss_mix(&model, &x, &z, &zt).unwrap() - direct).abs() < 1e-15);
    }

    #[test]
    fn utility_loss_properties() {
        let e = ExpertModel::new(
            ExpertKind::Utility,
            DenseNet::init(&[3, 4, 2], Activation::Tanh, Activation::Linear, 2).unwrap(),
        );
        let experts = vec![e.clone()];
        let x = [0.1, 0.2, 0.3];
        let xt = [0.4, -0.2, 0.0];
        assert_eq!(loss_uti(&experts, &[2.0], &x, &x).unwrap(), 0.0);
        let one = loss_uti(&experts, &[1.0], &x, &xt).unwrap();
        assert!((loss_uti(&experts, &[2.0], &x, &xt).unwrap() - 2.0 * one).abs() < 1e-15);
        // Independent recomputation of the hidden layer.
        let net = e.net();
        let hidden = |v: &[f64]| -> Vec<f64> {
            (0..4)
                .map(|r| (net.biases()[0][r] + (0..3).map(|c| net.weights()[0][r * 3 + c] * v[c]).sum::<f64>()).tanh())
                .collect()
        };
        let (a, b) = (hidden(&x), hidden(&xt));
        let direct = a.iter().zip(&b).map(|(p, q)| (p - q).abs()).sum::<f64>() / 4.0;
        assert!((one - direct).abs() < 1e-14);
        assert!(matches!(loss_uti(&experts, &[1.0, 2.0], &x, &xt), Err(Error::Config(_))));
    }

    #[test]
    fn utility_gradient_matches_finite_differences() {
        let experts: Vec<ExpertModel> = (0..2)
            .map(|s| ExpertModel::new(ExpertKind::Utility, DenseNet::init(&[3, 5, 2], Activation::Tanh, Activation::Linear, s).unwrap()))
            .collect();
        let w = [2.0, 0.5];
        let x = [0.1, 0.2, 0.3];
        let xt = [0.4, -0.2, 0.05];
        let (_, g) = uti_with_grads(&experts, &w, &x, &xt).unwrap();
        let h = 1e-6;
        for i in 0..3 {
            let mut p = xt;
            let mut m = xt;
            p[i] += h;
            m[i] -= h;
            let fd = (loss_uti(&experts, &w, &x, &p).unwrap() - loss_uti(&experts, &w, &x, &m).unwrap()) / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-7);
        }
    }
}
