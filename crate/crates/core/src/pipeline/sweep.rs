use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{build_extractor, build_world, evaluate_with_attack, finetune, pretrain_swap, train_experts, RunConfig};
use crate::error::{Error, Result};
use crate::eval::{aligned_csv, PrivacyReport};
use crate::obfuscator::Variant;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepParam {
    /// Laplace scale before the MLP obfuscator; each value retrains phase 2.
    Beta,
    /// Laplace scale in the VED latent; inference-only, so one training serves all values.
    Alpha,
}

impl fmt::Display for SweepParam {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SweepParam::Beta => "beta",
            SweepParam::Alpha => "alpha",
        })
    }
}

impl FromStr for SweepParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "beta" => Ok(SweepParam::Beta),
            "alpha" => Ok(SweepParam::Alpha),
            other => Err(Error::Config(format!("unknown sweep parameter `{other}` (expected beta or alpha)"))),
        }
    }
}

/// Seed-averaged metrics for one swept value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub param: SweepParam,
    pub value: f64,
    pub epsilon: Option<f64>,
    pub deid_tpr: f64,
    pub deid_accuracy: f64,
    pub inverted_tpr: f64,
    pub inverted_accuracy: f64,
    pub utility_mae: f64,
    pub n_seeds: usize,
}

impl SweepRow {
    fn from_reports(param: SweepParam, value: f64, reports: &[PrivacyReport]) -> Self {
        let n = reports.len() as f64;
        let mean = |f: &dyn Fn(&PrivacyReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        let eps: Vec<f64> = reports.iter().filter_map(|r| r.epsilon.as_ref().and_then(|e| e.epsilon)).collect();
        let inv = |r: &PrivacyReport| r.inversion_average.clone().unwrap_or_else(|| r.average.clone());
        Self {
            param,
            value,
            epsilon: (eps.len() == reports.len()).then(|| eps.iter().sum::<f64>() / n),
            deid_tpr: mean(&|r| r.average.tpr_at_fpr),
            deid_accuracy: mean(&|r| r.average.verification_accuracy),
            inverted_tpr: mean(&|r| inv(r).tpr_at_fpr),
            inverted_accuracy: mean(&|r| inv(r).verification_accuracy),
            utility_mae: mean(&|r| {
                r.utility_drift.iter().map(|u| u.prediction_mae).sum::<f64>() / r.utility_drift.len().max(1) as f64
            }),
            n_seeds: reports.len(),
        }
    }

    pub fn csv(rows: &[SweepRow]) -> String {
        let mut table = vec![[
            "param",
            "value",
            "epsilon",
            "deid_tpr",
            "deid_accuracy",
            "inverted_tpr",
            "inverted_accuracy",
            "utility_mae",
            "n_seeds",
        ]
        .map(String::from)
        .to_vec()];
        for r in rows {
            table.push(vec![
                r.param.to_string(),
                format!("{}", r.value),
                r.epsilon.map_or_else(|| "inf".to_string(), |e| format!("{e:.4}")),
                format!("{:.6}", r.deid_tpr),
                format!("{:.4}", r.deid_accuracy),
                format!("{:.6}", r.inverted_tpr),
                format!("{:.4}", r.inverted_accuracy),
                format!("{:.6}", r.utility_mae),
                r.n_seeds.to_string(),
            ]);
        }
        aligned_csv(&table)
    }
}

/// Runs the noise sweep for every master seed and averages per value.
pub fn sweep(config: &RunConfig, param: SweepParam, values: &[f64], seeds: &[u64]) -> Result<Vec<SweepRow>> {
    if values.is_empty() || seeds.is_empty() {
        return Err(Error::Config("sweep needs at least one value and one seed".into()));
    }
    if values.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
        return Err(Error::Config("sweep values must be nonnegative reals".into()));
    }
    let mut per_value: Vec<Vec<PrivacyReport>> = vec![Vec::new(); values.len()];
    for &seed in seeds {
        let mut cfg = RunConfig { master_seed: seed, ..config.clone() };
        cfg.obfuscator.variant = match param {
            SweepParam::Beta => Variant::Mlp,
            SweepParam::Alpha => Variant::Ved,
        };
        cfg.validate()?;
        let world = build_world(&cfg)?;
        let experts = train_experts(&world, &cfg)?;
        let extractor = build_extractor(&world, &experts, &cfg)?;
        let pretrained = pretrain_swap(&world, &extractor, &cfg)?;
        match param {
            SweepParam::Beta => {
                for (k, &v) in values.iter().enumerate() {
                    cfg.obfuscator.beta = v;
                    let p = finetune(&world, &experts, &extractor, &pretrained, &cfg)?;
                    per_value[k].push(evaluate_with_attack(&p, &world, &experts, &cfg)?);
                }
            }
            SweepParam::Alpha => {
                let trained = finetune(&world, &experts, &extractor, &pretrained, &cfg)?;
                for (k, &v) in values.iter().enumerate() {
                    let p = trained.with_noise_scale(v)?;
                    per_value[k].push(evaluate_with_attack(&p, &world, &experts, &cfg)?);
                }
            }
        }
    }
    Ok(values.iter().zip(&per_value).map(|(&v, reports)| SweepRow::from_reports(param, v, reports)).collect())
}
