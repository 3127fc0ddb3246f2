//! Verification metrics over distance scores.
//!
//! Convention: smaller distance means "same identity"; a pair is accepted
//! iff `distance <= τ`. Candidate thresholds are the pooled score values plus
//! `τ = −∞` (accept nothing).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::l2_distance;
use crate::rng::rng_from_seed;

/// Genuine (same-source) and impostor (different-source) distances.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoreSet {
    pub genuine: Vec<f64>,
    pub impostor: Vec<f64>,
}

impl ScoreSet {
    pub fn new(genuine: Vec<f64>, impostor: Vec<f64>) -> Self {
        Self { genuine, impostor }
    }

    fn validate(&self) -> Result<()> {
        if self.genuine.is_empty() || self.impostor.is_empty() {
            return Err(Error::Input(format!(
                "score set needs genuine and impostor scores (got {} / {})",
                self.genuine.len(),
                self.impostor.len()
            )));
        }
        if self.genuine.iter().chain(&self.impostor).any(|v| !v.is_finite()) {
            return Err(Error::Input("score set holds non-finite distances".into()));
        }
        Ok(())
    }
}

/// Samples ℓ2 distances for same-label and different-label pairs.
///
/// Genuine pairs are drawn uniformly (with replacement) from all same-label
/// index pairs; impostor pairs by rejection sampling.
pub fn pair_distances(
    labels: &[usize],
    embeddings: &[Vec<f64>],
    n_genuine: usize,
    n_impostor: usize,
    seed: u64,
) -> Result<ScoreSet> {
    if labels.len() != embeddings.len() {
        return Err(Error::dim(labels.len(), embeddings.len(), "embeddings vs labels"));
    }
    let mut same = Vec::new();
    for i in 0..labels.len() {
        for j in i + 1..labels.len() {
            if labels[i] == labels[j] {
                same.push((i, j));
            }
        }
    }
    if same.is_empty() && n_genuine > 0 {
        return Err(Error::Input("no same-label pairs available".into()));
    }
    if n_impostor > 0 && labels.iter().all(|&l| l == labels[0]) {
        return Err(Error::Input("no different-label pairs available".into()));
    }
    let mut rng = rng_from_seed(seed);
    let genuine = (0..n_genuine)
        .map(|_| {
            let (i, j) = same[rng.random_range(0..same.len())];
            l2_distance(&embeddings[i], &embeddings[j])
        })
        .collect();
    let mut impostor = Vec::with_capacity(n_impostor);
    while impostor.len() < n_impostor {
        let i = rng.random_range(0..labels.len());
        let j = rng.random_range(0..labels.len());
        if labels[i] != labels[j] {
            impostor.push(l2_distance(&embeddings[i], &embeddings[j]));
        }
    }
    Ok(ScoreSet { genuine, impostor })
}

fn sorted(values: &[f64]) -> Vec<f64> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

/// Number of sorted values `<= t`.
fn count_le(sorted: &[f64], t: f64) -> usize {
    sorted.partition_point(|&v| v <= t)
}

/// The acceptance threshold τ* for an FPR target, `None` meaning `−∞`.
pub fn threshold_at_fpr(scores: &ScoreSet, fpr_target: f64) -> Result<Option<f64>> {
    scores.validate()?;
    if !(fpr_target > 0.0 && fpr_target < 1.0) {
        return Err(Error::Input(format!("fpr target must lie in (0, 1), got {fpr_target}")));
    }
    let impostor = sorted(&scores.impostor);
    let n = impostor.len();
    // Largest accepted-impostor count whose FPR stays within the target.
    let mut allowed = ((fpr_target * n as f64).floor() as usize).min(n);
    while allowed < n && ((allowed + 1) as f64 / n as f64) <= fpr_target {
        allowed += 1;
    }
    while allowed > 0 && (allowed as f64 / n as f64) > fpr_target {
        allowed -= 1;
    }
    // τ must stay strictly below the (allowed+1)-th smallest impostor.
    let ceiling = impostor.get(allowed).copied().unwrap_or(f64::INFINITY);
    let best = scores
        .genuine
        .iter()
        .chain(&scores.impostor)
        .copied()
        .filter(|&v| v < ceiling)
        .max_by(f64::total_cmp);
    Ok(best)
}

/// True positive rate at the largest pooled threshold whose FPR does not
/// exceed `fpr_target`. Returns 0 when no threshold qualifies.
pub fn tpr_at_fpr(scores: &ScoreSet, fpr_target: f64) -> Result<f64> {
    let Some(tau) = threshold_at_fpr(scores, fpr_target)? else {
        return Ok(0.0);
    };
    let accepted = scores.genuine.iter().filter(|&&g| g <= tau).count();
    Ok(accepted as f64 / scores.genuine.len() as f64)
}

/// Best single-threshold accuracy in percent, with its threshold
/// (`None` = reject all). Ties resolve to the smallest threshold.
pub fn best_accuracy(scores: &ScoreSet) -> Result<(f64, Option<f64>)> {
    scores.validate()?;
    let genuine = sorted(&scores.genuine);
    let impostor = sorted(&scores.impostor);
    let total = genuine.len() + impostor.len();
    let mut best_correct = impostor.len();
    let mut best_tau = None;
    for tau in sorted(&[scores.genuine.as_slice(), scores.impostor.as_slice()].concat()) {
        let correct = count_le(&genuine, tau) + (impostor.len() - count_le(&impostor, tau));
        if correct > best_correct {
            best_correct = correct;
            best_tau = Some(tau);
        }
    }
    Ok((accuracy_percent(best_correct, total), best_tau))
}

pub(crate) fn accuracy_percent(correct: usize, total: usize) -> f64 {
    correct as f64 / total as f64 * 100.0
}

pub fn verification_accuracy(scores: &ScoreSet) -> Result<f64> {
    best_accuracy(scores).map(|(acc, _)| acc)
}

/// `(fpr, tpr)` at every distinct pooled threshold, ascending.
pub fn roc_points(scores: &ScoreSet) -> Result<Vec<(f64, f64)>> {
    scores.validate()?;
    let genuine = sorted(&scores.genuine);
    let impostor = sorted(&scores.impostor);
    let mut pooled = sorted(&[scores.genuine.as_slice(), scores.impostor.as_slice()].concat());
    pooled.dedup();
    let mut points = vec![(0.0, 0.0)];
    for tau in pooled {
        points.push((
            count_le(&impostor, tau) as f64 / impostor.len() as f64,
            count_le(&genuine, tau) as f64 / genuine.len() as f64,
        ));
    }
    Ok(points)
}

/// Equal-width histogram over `[lo, hi]`; out-of-range values land in the
/// edge bins so the total count is preserved.
pub fn histogram(distances: &[f64], n_bins: usize, range: (f64, f64)) -> Result<Vec<u64>> {
    let (lo, hi) = range;
    if n_bins == 0 || !(hi > lo) {
        return Err(Error::Config(format!("invalid histogram: {n_bins} bins over [{lo}, {hi}]")));
    }
    let mut counts = vec![0u64; n_bins];
    let width = (hi - lo) / n_bins as f64;
    for &d in distances {
        let idx = ((d - lo) / width).floor();
        let idx = if idx.is_nan() || idx < 0.0 { 0 } else { (idx as usize).min(n_bins - 1) };
        counts[idx] += 1;
    }
    Ok(counts)
}
