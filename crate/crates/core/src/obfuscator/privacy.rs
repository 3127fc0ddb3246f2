use rand::Rng;
use serde::{Deserialize, Serialize};

use super::IdVector;
use crate::error::{Error, Result};
use crate::math::l1_distance;
use crate::rng::rng_from_seed;

/// Laplace calibration: `noise_scale = delta_psi / epsilon`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrivacyBudget {
    pub epsilon: f64,
    pub delta_psi: f64,
    pub noise_scale: f64,
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} must be a positive real, got {v}")))
    }
}

impl PrivacyBudget {
    pub fn from_epsilon(delta_psi: f64, epsilon: f64) -> Result<Self> {
        positive("sensitivity", delta_psi)?;
        positive("epsilon", epsilon)?;
        Ok(Self { epsilon, delta_psi, noise_scale: delta_psi / epsilon })
    }

    pub fn from_noise_scale(delta_psi: f64, noise_scale: f64) -> Result<Self> {
        positive("sensitivity", delta_psi)?;
        positive("noise scale", noise_scale)?;
        Ok(Self { epsilon: scale_to_epsilon(delta_psi, noise_scale)?, delta_psi, noise_scale })
    }
}

pub fn budget(delta_psi: f64, epsilon: f64) -> Result<PrivacyBudget> {
    PrivacyBudget::from_epsilon(delta_psi, epsilon)
}

pub fn scale_to_epsilon(delta_psi: f64, noise_scale: f64) -> Result<f64> {
    positive("sensitivity", delta_psi)?;
    positive("noise scale", noise_scale)?;
    Ok(delta_psi / noise_scale)
}

/// Empirical lower bound on `sup ‖ψ(z) − ψ(z′)‖₁` and the pair attaining it.
#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityEstimate {
    pub delta_psi: f64,
    pub pair: (IdVector, IdVector),
    pub pairs_evaluated: usize,
}

/// Maximum ℓ1 output distance over `n_pairs` random pairs of `vectors`,
/// optionally also over every antipodal pair `(z, −z)`.
pub fn estimate_sensitivity(
    psi: impl Fn(&IdVector) -> Result<IdVector>,
    vectors: &[IdVector],
    n_pairs: usize,
    include_antipodes: bool,
    seed: u64,
) -> Result<SensitivityEstimate> {
    if n_pairs < 1 {
        return Err(Error::Config("sensitivity estimation needs at least one pair".into()));
    }
    if vectors.len() < 2 {
        return Err(Error::Input("sensitivity estimation needs at least two vectors".into()));
    }
    let outputs = vectors.iter().map(&psi).collect::<Result<Vec<_>>>()?;
    let mut rng = rng_from_seed(seed);
    let mut best = (f64::NEG_INFINITY, 0usize, 1usize);
    for _ in 0..n_pairs {
        let i = rng.random_range(0..vectors.len());
        let mut j = rng.random_range(0..vectors.len() - 1);
        if j >= i {
            j += 1;
        }
        let d = l1_distance(outputs[i].as_slice(), outputs[j].as_slice());
        if d > best.0 {
            best = (d, i, j);
        }
    }
    let mut pair = (vectors[best.1].clone(), vectors[best.2].clone());
    let mut evaluated = n_pairs;
    if include_antipodes {
        for (z, out) in vectors.iter().zip(&outputs) {
            let anti = z.negated();
            let d = l1_distance(out.as_slice(), psi(&anti)?.as_slice());
            evaluated += 1;
            if d > best.0 {
                best.0 = d;
                pair = (z.clone(), anti);
            }
        }
    }
    Ok(SensitivityEstimate { delta_psi: best.0, pair, pairs_evaluated: evaluated })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn budget_arithmetic() {
        let b = budget(4.0, 2.0).unwrap();
        assert_eq!(b.noise_scale, 2.0);
        let back = PrivacyBudget::from_noise_scale(4.0, b.noise_scale).unwrap();
        assert_eq!(back.epsilon, 2.0);
        assert!((scale_to_epsilon(33.92, 2.0).unwrap() - 16.96).abs() < 1e-12);
        assert!(budget(1.0, 0.0).is_err());
        assert!(budget(1.0, -2.0).is_err());
        assert!(scale_to_epsilon(1.0, 0.0).is_err());
    }

    #[test]
    fn constant_map_has_zero_sensitivity() {
        let vs: Vec<IdVector> = (0..10)
            .map(|i| IdVector::from_raw(&[(i as f64).cos(), (i as f64).sin()]).unwrap())
            .collect();
        let c = IdVector::from_raw(&[1.0, 0.0]).unwrap();
        let est = estimate_sensitivity(|_| Ok(c.clone()), &vs, 50, true, 1).unwrap();
        assert_eq!(est.delta_psi, 0.0);
    }

    #[test]
    fn argument_validation() {
        let vs = vec![IdVector::from_raw(&[1.0, 0.0]).unwrap()];
        assert!(matches!(estimate_sensitivity(|z| Ok(z.clone()), &vs, 0, false, 1), Err(Error::Config(_))));
        assert!(matches!(estimate_sensitivity(|z| Ok(z.clone()), &vs, 5, false, 1), Err(Error::Input(_))));
    }
}
