use std::collections::BTreeSet;
use std::fs;

use deid_core::eval::{check_heldout, Passthrough};
use deid_core::nn::ParamGroup;
use deid_core::pipeline::{
    build_extractor, build_world, evaluate, finetune, load_bundle, pretrain_swap, save_bundle, sweep, train_all,
    train_experts, RunConfig, SweepParam,
};
use deid_core::world::ExpertModel;
use deid_core::{Anonymizer, Error, Variant};

/// A run small enough for a unit-test budget.
fn small_config(seed: u64) -> RunConfig {
    let mut c = RunConfig { master_seed: seed, ..RunConfig::default() };
    c.world.n_identities = 60;
    c.phases.phase1_steps = 40;
    c.phases.phase2_steps = 40;
    c.phases.obfuscator_pretrain_steps = 20;
    c.merge.steps = 200;
    c.eval.n_impostor = 2_000;
    c.eval.sensitivity_pairs = 2_000;
    c.eval.attacker.epochs = 2;
    for e in &mut c.experts {
        e.epochs = 10;
    }
    c
}

#[test]
fn finetuning_leaves_experts_frozen() {
    let cfg = small_config(3);
    let world = build_world(&cfg).unwrap();
    let experts = train_experts(&world, &cfg).unwrap();
    let before = experts.fingerprints();
    let extractor = build_extractor(&world, &experts, &cfg).unwrap();
    let merge_before = extractor.merge_net().fingerprint();
    let pretrained = pretrain_swap(&world, &extractor, &cfg).unwrap();
    let p = finetune(&world, &experts, &extractor, &pretrained, &cfg).unwrap();
    assert_eq!(experts.fingerprints(), before);
    assert_eq!(p.extractor.merge_net().fingerprint(), merge_before);
    let after: Vec<String> = p.extractor.experts().iter().map(ExpertModel::fingerprint).collect();
    assert_eq!(after, before[..after.len()].to_vec());
    // The swap model itself does move.
    assert_ne!(p.swap.fingerprints(), pretrained.0.fingerprints());
}

#[test]
fn bundles_are_byte_identical_across_runs() {
    let cfg = small_config(5);
    let a = train_all(&cfg).unwrap();
    let b = train_all(&cfg).unwrap();
    let (da, db) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    save_bundle(da.path(), &a.pipeline, &a.experts, &cfg).unwrap();
    save_bundle(db.path(), &b.pipeline, &b.experts, &cfg).unwrap();
    for name in [
        "swap.ckpt",
        "critic.ckpt",
        "obfuscator.ckpt",
        "obfuscator.json",
        "extractor.ckpt",
        "manifest.json",
        "experts/heldout0.ckpt",
        "experts/utility1.ckpt",
    ] {
        assert_eq!(fs::read(da.path().join(name)).unwrap(), fs::read(db.path().join(name)).unwrap(), "{name}");
    }
    let loaded = load_bundle(da.path()).unwrap();
    assert_eq!(loaded.pipeline, a.pipeline);
    assert_eq!(loaded.experts, a.experts);
    assert_eq!(loaded.manifest.config_hash, cfg.hash());

    let ra = evaluate(&a.pipeline, &a.world, &a.experts, &cfg).unwrap();
    let rb = evaluate(&loaded.pipeline, &a.world, &loaded.experts, &cfg).unwrap();
    assert_eq!(ra.to_json().unwrap(), rb.to_json().unwrap());
    assert_eq!(ra.config_hash.as_deref(), Some(cfg.hash().as_str()));
}

#[test]
fn tampered_bundle_is_rejected() {
    let cfg = small_config(6);
    let run = train_all(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_bundle(dir.path(), &run.pipeline, &run.experts, &cfg).unwrap();
    let manifest = dir.path().join("manifest.json");
    let text = fs::read_to_string(&manifest).unwrap().replace("\"master_seed\": 6", "\"master_seed\": 7");
    fs::write(&manifest, text).unwrap();
    assert!(matches!(load_bundle(dir.path()), Err(Error::Config(_))));

    let ck = dir.path().join("swap.ckpt");
    let mut text = fs::read_to_string(&ck).unwrap();
    text.truncate(text.len() / 2);
    fs::write(&ck, text).unwrap();
    assert!(load_bundle(dir.path()).is_err());
}

#[test]
fn heldout_expert_in_ensemble_is_a_protocol_error() {
    let cfg = small_config(8);
    let world = build_world(&cfg).unwrap();
    let experts = train_experts(&world, &cfg).unwrap();
    let training: BTreeSet<String> = experts.ensemble_fingerprints();
    assert!(check_heldout(&training, &experts.heldout).is_ok());
    assert!(matches!(check_heldout(&training, &experts.ensemble[..1]), Err(Error::Protocol(_))));
}

#[test]
fn passthrough_is_fully_reidentifiable() {
    let cfg = small_config(9);
    let world = build_world(&cfg).unwrap();
    let experts = train_experts(&world, &cfg).unwrap();
    let x = &world.samples[0].feature;
    let mut rng = deid_core::rng::rng_from_seed(0);
    assert_eq!(&Passthrough.anonymize(x, &mut rng).unwrap(), x);
    let eval = world.eval_samples();
    let fingerprints = experts.ensemble_fingerprints();
    let inputs = deid_core::eval::ReportInputs {
        eval_samples: &eval,
        training_fingerprints: &fingerprints,
        heldout_experts: &experts.heldout,
        utility_experts: &experts.utility,
    };
    let r = deid_core::eval::deid_report(&Passthrough, &inputs, &cfg.eval_settings()).unwrap();
    assert_eq!(r.average.tpr_at_fpr, 1.0);
    assert!(r.utility_drift.iter().all(|u| u.prediction_mae == 0.0));
}

#[test]
fn alpha_sweep_reports_one_row_per_value() {
    let mut cfg = small_config(10);
    cfg.obfuscator.variant = Variant::Opp;
    let rows = sweep(&cfg, SweepParam::Alpha, &[1.0, 2.0], &[10]).unwrap();
    assert_eq!(rows.len(), 2);
    assert!(rows.iter().all(|r| r.n_seeds == 1 && r.param == SweepParam::Alpha));
    assert!(rows[0].epsilon.unwrap() > rows[1].epsilon.unwrap());
    assert!(sweep(&cfg, SweepParam::Beta, &[], &[1]).is_err());
    assert!(sweep(&cfg, SweepParam::Beta, &[-1.0], &[1]).is_err());
}
