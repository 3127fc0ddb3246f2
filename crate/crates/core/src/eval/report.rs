use std::collections::BTreeSet;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::{best_accuracy, tpr_at_fpr, ScoreSet};
use crate::error::{Error, Result};
use crate::math::{l1_distance, l2_distance, mean_abs_diff};
use crate::rng::{derive_seed, rng_from_seed, task_rng, DeidRng};
use crate::world::{ExpertKind, ExpertModel, Sample};

/// Anything that turns an original feature vector into an anonymized one.
pub trait Anonymizer: Sync {
    fn anonymize(&self, x: &[f64], rng: &mut DeidRng) -> Result<Vec<f64>>;
}

/// Returns its input unchanged; the no-anonymization baseline.
#[derive(Debug, Clone, Copy, Default)]
pub struct Passthrough;

impl Anonymizer for Passthrough {
    fn anonymize(&self, x: &[f64], _rng: &mut DeidRng) -> Result<Vec<f64>> {
        Ok(x.to_vec())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSettings {
    pub fpr_target: f64,
    /// Impostor pairs behind the TPR@FPR estimate.
    pub n_impostor: usize,
    pub seed: u64,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self { fpr_target: 1e-3, n_impostor: 20_000, seed: 0 }
    }
}

impl EvalSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.fpr_target > 0.0 && self.fpr_target < 1.0) {
            return Err(Error::Config(format!("fpr_target must lie in (0, 1), got {}", self.fpr_target)));
        }
        if self.n_impostor == 0 {
            return Err(Error::Config("n_impostor must be positive".into()));
        }
        Ok(())
    }

    /// Whether the impostor set is too small to resolve the FPR target.
    pub fn impostors_too_few(&self) -> bool {
        (self.n_impostor as f64) < 10.0 / self.fpr_target
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationRow {
    pub expert: String,
    pub tpr_at_fpr: f64,
    pub verification_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtilityRow {
    pub expert: String,
    pub prediction_mae: f64,
    pub penultimate_l1_gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpsilonEcho {
    pub variant: String,
    pub noise_scale: f64,
    pub delta_psi: Option<f64>,
    /// `Δψ / scale`.
    pub epsilon: Option<f64>,
    /// `2Δψ / scale`, the doubled figure some accountings report.
    pub epsilon_doubled: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrivacyReport {
    pub fpr_target: f64,
    pub per_heldout_expert: Vec<VerificationRow>,
    pub average: VerificationRow,
    pub inversion: Option<Vec<VerificationRow>>,
    pub inversion_average: Option<VerificationRow>,
    pub utility_drift: Vec<UtilityRow>,
    pub epsilon: Option<EpsilonEcho>,
    pub seed: u64,
    pub config_hash: Option<String>,
}

impl PrivacyReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    /// Aligned-column CSV with one row per metric line.
    pub fn to_csv(&self) -> String {
        let mut rows = vec![vec!["section".to_string(), "expert".into(), "metric_a".into(), "metric_b".into()]];
        let v = |section: &str, r: &VerificationRow| {
            vec![section.to_string(), r.expert.clone(), format!("{:.6}", r.tpr_at_fpr), format!("{:.4}", r.verification_accuracy)]
        };
        rows.extend(self.per_heldout_expert.iter().map(|r| v("deid", r)));
        rows.push(v("deid", &self.average));
        for r in self.inversion.iter().flatten() {
            rows.push(v("inversion", r));
        }
        if let Some(r) = &self.inversion_average {
            rows.push(v("inversion", r));
        }
        for r in &self.utility_drift {
            rows.push(vec![
                "utility".into(),
                r.expert.clone(),
                format!("{:.6}", r.prediction_mae),
                format!("{:.6}", r.penultimate_l1_gap),
            ]);
        }
        aligned_csv(&rows)
    }
}

/// Renders rows as comma-separated columns padded to equal width.
pub fn aligned_csv(rows: &[Vec<String>]) -> String {
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let widths: Vec<usize> =
        (0..cols).map(|c| rows.iter().filter_map(|r| r.get(c)).map(String::len).max().unwrap_or(0)).collect();
    let mut out = String::new();
    for r in rows {
        let cells: Vec<String> = r
            .iter()
            .enumerate()
            .map(|(c, v)| if c + 1 == r.len() { v.clone() } else { format!("{v:<w$}", w = widths[c]) })
            .collect();
        let _ = writeln!(out, "{}", cells.join(", "));
    }
    out
}

pub(crate) fn average_row(rows: &[VerificationRow]) -> VerificationRow {
    let n = rows.len().max(1) as f64;
    VerificationRow {
        expert: "average".into(),
        tpr_at_fpr: rows.iter().map(|r| r.tpr_at_fpr).sum::<f64>() / n,
        verification_accuracy: rows.iter().map(|r| r.verification_accuracy).sum::<f64>() / n,
    }
}

/// Anonymizes every sample with its own noise stream (stream = sample index).
pub fn anonymize_all(anonymizer: &dyn Anonymizer, samples: &[&Sample], seed: u64) -> Result<Vec<Vec<f64>>> {
    samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| anonymizer.anonymize(&s.feature, &mut task_rng(seed, i as u64)))
        .collect()
}

/// Index pairs of samples with different identity labels.
pub(crate) fn impostor_pairs(labels: &[usize], n: usize, seed: u64) -> Result<Vec<(usize, usize)>> {
    if labels.iter().all(|&l| l == labels[0]) {
        return Err(Error::Input("impostor pairs need at least two identities".into()));
    }
    let mut rng = rng_from_seed(seed);
    let mut pairs = Vec::with_capacity(n);
    while pairs.len() < n {
        let i = rand::Rng::random_range(&mut rng, 0..labels.len());
        let j = rand::Rng::random_range(&mut rng, 0..labels.len());
        if labels[i] != labels[j] {
            pairs.push((i, j));
        }
    }
    Ok(pairs)
}

/// Genuine distances between paired embeddings against original impostor
/// pairs: accuracy on a balanced subset, TPR on the full impostor set.
pub(crate) fn verification_row(
    name: &str,
    originals: &[Vec<f64>],
    probes: &[Vec<f64>],
    impostors: &[(usize, usize)],
    fpr_target: f64,
) -> Result<VerificationRow> {
    let genuine: Vec<f64> = originals.iter().zip(probes).map(|(a, b)| l2_distance(a, b)).collect();
    let impostor: Vec<f64> = impostors.iter().map(|&(i, j)| l2_distance(&originals[i], &originals[j])).collect();
    let balanced = ScoreSet::new(genuine.clone(), impostor[..genuine.len().min(impostor.len())].to_vec());
    let (verification_accuracy, _) = best_accuracy(&balanced)?;
    let tpr = tpr_at_fpr(&ScoreSet::new(genuine, impostor), fpr_target)?;
    Ok(VerificationRow { expert: name.to_string(), tpr_at_fpr: tpr, verification_accuracy })
}

/// Rejects held-out experts that coincide with an expert used in training.
pub fn check_heldout(training_fingerprints: &BTreeSet<String>, heldout: &[ExpertModel]) -> Result<()> {
    for (i, e) in heldout.iter().enumerate() {
        if e.kind() != ExpertKind::Identity {
            return Err(Error::Config(format!("held-out expert {i} is not an identity expert")));
        }
        if training_fingerprints.contains(&e.fingerprint()) {
            return Err(Error::Protocol(format!(
                "held-out expert {i} was used to train the pipeline; its verdict would be meaningless"
            )));
        }
    }
    Ok(())
}

/// Per-expert prediction MAE and penultimate ℓ1 gap between originals and anonymized.
pub fn utility_drift(experts: &[ExpertModel], originals: &[&[f64]], anonymized: &[Vec<f64>]) -> Result<Vec<UtilityRow>> {
    if originals.len() != anonymized.len() || originals.is_empty() {
        return Err(Error::Input("utility drift needs equally many (nonzero) originals and anonymized".into()));
    }
    experts
        .iter()
        .enumerate()
        .map(|(k, e)| {
            let n = originals.len() as f64;
            let mut mae = 0.0;
            let mut gap = 0.0;
            for (x, xt) in originals.iter().zip(anonymized) {
                mae += mean_abs_diff(&e.embed(x)?, &e.embed(xt)?);
                let (a, _) = e.penultimate_traced(x)?;
                let (b, _) = e.penultimate_traced(xt)?;
                gap += l1_distance(&a, &b);
            }
            Ok(UtilityRow { expert: format!("utility{k}"), prediction_mae: mae / n, penultimate_l1_gap: gap / n })
        })
        .collect()
}

/// Everything a de-identification verdict needs besides the anonymizer.
#[derive(Debug, Clone, Copy)]
pub struct ReportInputs<'a> {
    pub eval_samples: &'a [&'a Sample],
    pub training_fingerprints: &'a BTreeSet<String>,
    pub heldout_experts: &'a [ExpertModel],
    pub utility_experts: &'a [ExpertModel],
}

/// Held-out-expert verification of (original, anonymized) pairs against
/// original impostor pairs, plus utility drift.
pub fn deid_report(
    anonymizer: &dyn Anonymizer,
    inputs: &ReportInputs<'_>,
    settings: &EvalSettings,
) -> Result<PrivacyReport> {
    settings.validate()?;
    check_heldout(inputs.training_fingerprints, inputs.heldout_experts)?;
    if inputs.heldout_experts.is_empty() {
        return Err(Error::Config("at least one held-out expert is required".into()));
    }
    let samples = inputs.eval_samples;
    let anonymized = anonymize_all(anonymizer, samples, derive_seed(settings.seed, "anonymize"))?;
    let labels: Vec<usize> = samples.iter().map(|s| s.identity_label).collect();
    let impostors = impostor_pairs(&labels, settings.n_impostor, derive_seed(settings.seed, "impostors"))?;
    let rows = inputs
        .heldout_experts
        .iter()
        .enumerate()
        .map(|(k, e)| {
            let originals = samples.iter().map(|s| e.embed(&s.feature)).collect::<Result<Vec<_>>>()?;
            let probes = anonymized.iter().map(|x| e.embed(x)).collect::<Result<Vec<_>>>()?;
            verification_row(&format!("heldout{k}"), &originals, &probes, &impostors, settings.fpr_target)
        })
        .collect::<Result<Vec<_>>>()?;
    let originals: Vec<&[f64]> = samples.iter().map(|s| s.feature.as_slice()).collect();
    let utility_drift = utility_drift(inputs.utility_experts, &originals, &anonymized)?;
    Ok(PrivacyReport {
        fpr_target: settings.fpr_target,
        average: average_row(&rows),
        per_heldout_expert: rows,
        inversion: None,
        inversion_average: None,
        utility_drift,
        epsilon: None,
        seed: settings.seed,
        config_hash: None,
    })
}

/// `(false positive rate, true positive rate)` points as CSV.
pub fn roc_csv(points: &[(f64, f64)]) -> String {
    let mut rows = vec![vec!["fpr".to_string(), "tpr".to_string()]];
    rows.extend(points.iter().map(|(f, t)| vec![format!("{f:.6}"), format!("{t:.6}")]));
    aligned_csv(&rows)
}

/// Histogram bins as CSV with bin edges.
pub fn histogram_csv(counts: &[u64], range: (f64, f64)) -> String {
    let width = (range.1 - range.0) / counts.len().max(1) as f64;
    let mut rows = vec![vec!["bin_lo".to_string(), "bin_hi".to_string(), "count".to_string()]];
    for (i, c) in counts.iter().enumerate() {
        let lo = range.0 + i as f64 * width;
        rows.push(vec![format!("{lo:.4}"), format!("{:.4}", lo + width), c.to_string()]);
    }
    aligned_csv(&rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn aligned_columns() {
        let rows = vec![vec!["a".into(), "bb".into()], vec!["ccc".into(), "d".into()]];
        assert_eq!(aligned_csv(&rows), "a  , bb\nccc, d\n");
    }

    #[test]
    fn verification_of_identical_probes_is_perfect() {
        let originals: Vec<Vec<f64>> = (0..20).map(|i| vec![(i / 2) as f64, 0.0]).collect();
        let labels: Vec<usize> = (0..20).map(|i| i / 2).collect();
        let imp = impostor_pairs(&labels, 100, 1).unwrap();
        let row = verification_row("e", &originals, &originals, &imp, 1e-3).unwrap();
        assert_eq!(row.verification_accuracy, 100.0);
        assert_eq!(row.tpr_at_fpr, 1.0);
    }

    #[test]
    fn settings_validation() {
        assert!(EvalSettings { fpr_target: 0.0, ..Default::default() }.validate().is_err());
        assert!(EvalSettings { n_impostor: 100, ..Default::default() }.impostors_too_few());
        assert!(!EvalSettings::default().impostors_too_few());
    }
}
