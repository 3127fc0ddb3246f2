use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{task_rng, DeidRng};

pub const AUDIT_SLACK: f64 = 0.15;
pub const MIN_AUDIT_SAMPLES: usize = 100_000;

/// Samples drawn per parallel task; fixed so results do not depend on thread count.
const CHUNK: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditResult {
    /// `f64::INFINITY` when some bin is populated by one input only.
    pub max_log_ratio: f64,
    pub epsilon_claimed: f64,
    pub slack: f64,
    pub bins_used: usize,
    pub passed: bool,
}

fn draw<F>(mechanism: &F, z: &[f64], n: usize, seed: u64) -> Result<Vec<f64>>
where
    F: Fn(&[f64], &mut DeidRng) -> Result<f64> + Sync,
{
    let chunks = n.div_ceil(CHUNK);
    let parts = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = task_rng(seed, c as u64);
            let len = CHUNK.min(n - c * CHUNK);
            (0..len).map(|_| mechanism(z, &mut rng)).collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(parts.concat())
}

/// Empirical privacy-loss audit of a scalar mechanism on two inputs.
///
/// Both output samples are binned into `n_bins` equal-mass bins cut at
/// quantiles of the pooled sample (outer bins unbounded); the result is the
/// largest `|ln(p/q)|` over populated bins.
pub fn ldp_ratio_audit<F>(
    mechanism: F,
    z: &[f64],
    z_prime: &[f64],
    n_samples: usize,
    n_bins: usize,
    epsilon_claimed: f64,
    seed: u64,
) -> Result<AuditResult>
where
    F: Fn(&[f64], &mut DeidRng) -> Result<f64> + Sync,
{
    if n_samples < MIN_AUDIT_SAMPLES {
        return Err(Error::InsufficientSamples(format!(
            "audit needs at least {MIN_AUDIT_SAMPLES} samples per input, got {n_samples}"
        )));
    }
    if n_bins < 2 {
        return Err(Error::Config("audit needs at least two bins".into()));
    }
    let a = draw(&mechanism, z, n_samples, crate::rng::derive_seed(seed, "audit-z"))?;
    let b = draw(&mechanism, z_prime, n_samples, crate::rng::derive_seed(seed, "audit-z-prime"))?;
    if a.iter().chain(&b).any(|v| !v.is_finite()) {
        return Err(Error::NumericValue("mechanism produced a non-finite output".into()));
    }
    let mut pooled: Vec<f64> = a.iter().chain(&b).copied().collect();
    pooled.sort_by(f64::total_cmp);
    let mut edges: Vec<f64> = (1..n_bins).map(|k| pooled[k * pooled.len() / n_bins]).collect();
    edges.dedup();
    let count = |xs: &[f64]| {
        let mut c = vec![0u64; edges.len() + 1];
        for &v in xs {
            c[edges.partition_point(|&e| e < v)] += 1;
        }
        c
    };
    let (ca, cb) = (count(&a), count(&b));
    let mut max_log_ratio: f64 = 0.0;
    let mut bins_used = 0;
    for (&p, &q) in ca.iter().zip(&cb) {
        if p + q == 0 {
            continue;
        }
        bins_used += 1;
        let r = if p == 0 || q == 0 { f64::INFINITY } else { (p as f64 / q as f64).ln().abs() };
        max_log_ratio = max_log_ratio.max(r);
    }
    if bins_used == 0 {
        return Err(Error::InsufficientSamples("no populated bins".into()));
    }
    Ok(AuditResult {
        max_log_ratio,
        epsilon_claimed,
        slack: AUDIT_SLACK,
        bins_used,
        passed: max_log_ratio <= epsilon_claimed + AUDIT_SLACK,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::obfuscator::sample_laplace;

    fn laplace(b: f64) -> impl Fn(&[f64], &mut DeidRng) -> Result<f64> + Sync {
        move |z, rng| Ok(z[0] + sample_laplace(b, rng)?)
    }

    #[test]
    fn identical_inputs_have_near_zero_ratio() {
        let r = ldp_ratio_audit(laplace(1.0), &[0.3], &[0.3], 200_000, 50, 0.0, 1).unwrap();
        assert!(r.max_log_ratio < 0.1, "{}", r.max_log_ratio);
    }

    #[test]
    fn deterministic_mechanism_fails_with_infinity() {
        let r = ldp_ratio_audit(laplace(0.0), &[0.0], &[1.0], 100_000, 200, 1.0, 1).unwrap();
        assert!(r.max_log_ratio.is_infinite());
        assert!(!r.passed);
    }

    #[test]
    fn too_few_samples() {
        assert!(matches!(
            ldp_ratio_audit(laplace(1.0), &[0.0], &[1.0], 10, 200, 1.0, 1),
            Err(Error::InsufficientSamples(_))
        ));
    }
}
