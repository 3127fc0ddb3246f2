//! Verification metrics, de-identification reports, inversion attacks,
//! utility drift and the empirical privacy-loss audit.

mod attack;
mod audit;
mod metrics;
mod report;

pub use attack::{
    attack_set, check_disjoint, invert, inversion_report, run_inversion_attack, train_inversion_attacker, AttackSet,
    AttackerConfig,
};
pub use audit::{ldp_ratio_audit, AuditResult, AUDIT_SLACK, MIN_AUDIT_SAMPLES};
pub use metrics::{
    best_accuracy, histogram, pair_distances, roc_points, threshold_at_fpr, tpr_at_fpr, verification_accuracy,
    ScoreSet,
};
pub use report::{
    aligned_csv, anonymize_all, check_heldout, deid_report, histogram_csv, roc_csv, utility_drift, Anonymizer,
    EpsilonEcho, EvalSettings, Passthrough, PrivacyReport, ReportInputs, UtilityRow, VerificationRow,
};
