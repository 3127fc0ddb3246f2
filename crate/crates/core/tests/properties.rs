use deid_core::eval::{best_accuracy, threshold_at_fpr, tpr_at_fpr, verification_accuracy, ScoreSet};
use deid_core::math::{l2_distance, norm};
use deid_core::nn::{Activation, Checkpoint, DenseNet};
use deid_core::obfuscator::{laplace_from_uniform, loss_deid, loss_kld, IdVector};
use deid_core::CheckpointError;
use proptest::prelude::*;

fn activation() -> impl Strategy<Value = Activation> {
    prop_oneof![Just(Activation::Tanh), Just(Activation::Linear), Just(Activation::Sigmoid)]
}

fn net() -> impl Strategy<Value = DenseNet> {
    (prop::collection::vec(1usize..12, 2..5), activation(), activation(), any::<u64>())
        .prop_map(|(sizes, h, f, seed)| DenseNet::init(&sizes, h, f, seed).unwrap())
}

fn nonzero_vec(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-10.0f64..10.0, len).prop_filter("nonzero", |v| norm(v) > 1e-6)
}

fn scores() -> impl Strategy<Value = ScoreSet> {
    // Values on a coarse grid so ties between the groups are common.
    (prop::collection::vec(0u8..20, 1..40), prop::collection::vec(0u8..20, 1..40)).prop_map(|(g, i)| {
        ScoreSet::new(g.into_iter().map(|v| v as f64 / 10.0).collect(), i.into_iter().map(|v| v as f64 / 10.0).collect())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    #[test]
    fn checkpoint_round_trip_is_bit_exact(net in net(), kind in "[a-z]{1,8}") {
        let ck = Checkpoint::single(kind, &net);
        let text = ck.to_text();
        let back = Checkpoint::from_text(&text).unwrap();
        prop_assert_eq!(&back, &ck);
        prop_assert_eq!(back.to_text(), text);
        let a: Vec<u64> = net.flat_params().iter().map(|v| v.to_bits()).collect();
        let b: Vec<u64> = back.net("main").unwrap().flat_params().iter().map(|v| v.to_bits()).collect();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn corrupted_checkpoint_is_rejected(net in net(), at in any::<prop::sample::Index>()) {
        let text = Checkpoint::single("m", &net).to_text();
        let body_end = text.rfind("\nchecksum ").unwrap();
        let lines: Vec<&str> = text[..body_end].lines().collect();
        // Change one parameter line.
        let first_param = lines.iter().position(|l| l.starts_with("params ")).unwrap() + 1;
        let target = first_param + at.index(lines.len() - first_param);
        let mut edited: Vec<String> = lines.iter().map(|s| s.to_string()).collect();
        edited[target] = format!("{:e}", edited[target].parse::<f64>().unwrap() + 1.0);
        let tampered = edited.join("\n") + &text[body_end..];
        let is_checksum_error = matches!(Checkpoint::from_text(&tampered), Err(CheckpointError::Checksum { .. }));
        prop_assert!(is_checksum_error);
        let truncated = &text[..body_end];
        prop_assert!(Checkpoint::from_text(truncated).is_err());
    }

    #[test]
    fn deid_loss_is_bounded(z in nonzero_vec(8), zt in nonzero_vec(8)) {
        let l = loss_deid(&z, &zt).unwrap();
        prop_assert!((-1e-12..=2.0 + 1e-12).contains(&l));
    }

    #[test]
    fn kld_is_nonnegative(mu in prop::collection::vec(-5.0f64..5.0, 1..16), seed in any::<u64>()) {
        let logvar: Vec<f64> = mu.iter().enumerate().map(|(i, _)| ((seed.rotate_left(i as u32) % 2001) as f64 / 100.0) - 10.0).collect();
        prop_assert!(loss_kld(&mu, &logvar) >= 0.0);
    }

    #[test]
    fn opposite_is_farthest_point(z in nonzero_vec(6), c in nonzero_vec(6)) {
        let z = IdVector::from_raw(&z).unwrap();
        let c = IdVector::from_raw(&c).unwrap();
        prop_assert!((norm(z.as_slice()) - 1.0).abs() < 1e-12);
        let anti = z.negated();
        prop_assert!(l2_distance(z.as_slice(), c.as_slice()) <= l2_distance(z.as_slice(), anti.as_slice()) + 1e-12);
    }

    #[test]
    fn laplace_inverse_cdf_is_odd_and_monotone(u in 1e-9f64..0.5, w in 1e-9f64..0.5, b in 0.01f64..5.0) {
        prop_assert!((laplace_from_uniform(u, b) + laplace_from_uniform(-u, b)).abs() < 1e-9);
        if u < w {
            prop_assert!(laplace_from_uniform(u, b) <= laplace_from_uniform(w, b));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn tpr_matches_threshold_scan(s in scores(), target in 0.01f64..0.99) {
        let n = s.impostor.len() as f64;
        let mut best: Option<f64> = None;
        for &t in s.genuine.iter().chain(&s.impostor) {
            let fpr = s.impostor.iter().filter(|&&v| v <= t).count() as f64 / n;
            if fpr <= target && best.is_none_or(|b| t > b) {
                best = Some(t);
            }
        }
        prop_assert_eq!(threshold_at_fpr(&s, target).unwrap(), best);
        let expected = best.map_or(0.0, |t| s.genuine.iter().filter(|&&v| v <= t).count() as f64 / s.genuine.len() as f64);
        prop_assert_eq!(tpr_at_fpr(&s, target).unwrap(), expected);
    }

    #[test]
    fn accuracy_matches_threshold_scan(s in scores()) {
        let total = s.genuine.len() + s.impostor.len();
        let mut best = s.impostor.len();
        for &t in s.genuine.iter().chain(&s.impostor) {
            best = best.max(s.genuine.iter().filter(|&&v| v <= t).count() + s.impostor.iter().filter(|&&v| v > t).count());
        }
        prop_assert_eq!(verification_accuracy(&s).unwrap(), best as f64 / total as f64 * 100.0);
        let (acc, _) = best_accuracy(&s).unwrap();
        // Never worse than rejecting or accepting everything.
        let trivial = s.impostor.len().max(s.genuine.len()) as f64 / total as f64 * 100.0;
        prop_assert!(acc >= trivial);
    }
}
