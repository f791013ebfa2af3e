use gsmile_core::metrics::{
    att_acc, att_auroc, att_f1, consistency_stats, fidelity_report, fidelity_report_partial,
    jaccard_topk, jaccard_topk_tokens, GroundTruth, TiePolicy,
};
use proptest::prelude::*;

const TOKENS: [&str; 6] = ["could", "you", "please", "make", "this", "rainy"];

#[test]
fn reference_model_scores() {
    let truth = GroundTruth::from_tokens(&TOKENS, &["make", "rainy"]);
    assert_eq!(truth.labels, vec![0, 0, 0, 1, 0, 1]);
    let model2 = [0.10, 0.10, 0.01, 0.70, 0.20, 0.90];
    assert_eq!(att_auroc(&model2, &truth, TiePolicy::Strict).unwrap(), 1.0);
    let model1 = [0.20, 0.10, 0.70, 0.80, 0.10, 0.60];
    // Pairs (make, ·) are all won; rainy loses to please: 7/8.
    assert_eq!(att_auroc(&model1, &truth, TiePolicy::Strict).unwrap(), 0.875);
}

#[test]
fn thresholded_metrics_hand_case() {
    let truth = GroundTruth::new(vec![1, 0, 1, 0]).unwrap();
    // Normalized: [1, 0, 0.25, 0.75] → predicted [1, 0, 0, 1].
    let scores = [5.0, 1.0, 2.0, 4.0];
    assert_eq!(att_acc(&scores, &truth, 0.5).unwrap(), 0.5);
    assert_eq!(att_f1(&scores, &truth, 0.5).unwrap(), 0.5);
    // Positive 2.0 loses only to negative 4.0.
    assert_eq!(att_auroc(&scores, &truth, TiePolicy::Strict).unwrap(), 0.75);
}

#[test]
fn ties_and_degenerate_truth() {
    let truth = GroundTruth::new(vec![1, 0]).unwrap();
    assert_eq!(att_auroc(&[0.5, 0.5], &truth, TiePolicy::Strict).unwrap(), 0.0);
    assert_eq!(att_auroc(&[0.5, 0.5], &truth, TiePolicy::Half).unwrap(), 0.5);
    let all_pos = GroundTruth::new(vec![1, 1]).unwrap();
    assert!(att_auroc(&[0.1, 0.2], &all_pos, TiePolicy::Strict).is_err());
    assert!(GroundTruth::new(vec![2]).is_err());
}

#[test]
fn jaccard_hand_cases() {
    assert_eq!(jaccard_topk(&[0.9, 0.1, 0.8], &[0.9, 0.8, 0.1], 2).unwrap(), 1.0 / 3.0);
    assert_eq!(jaccard_topk(&[0.9, -1.0], &[-1.0, 0.9], 2).unwrap(), 1.0);
    assert!(jaccard_topk(&[1.0], &[1.0], 2).is_err());
    let a = ["make", "it", "rainy"];
    let b = ["make", "it", "rainy", "***"];
    assert_eq!(jaccard_topk_tokens(&a, &[0.5, 0.0, 1.0], &b, &[0.5, 0.0, 1.0, 9.0], 2).unwrap(), 1.0);
}

#[test]
fn consistency_hand_case() {
    let (var, std) = consistency_stats(&[vec![1.0, 0.0], vec![3.0, 0.0]]).unwrap();
    assert_eq!(var, 0.5);
    assert_eq!(std, 0.5);
    assert!(consistency_stats(&[vec![1.0]]).is_err());
}

#[test]
fn fidelity_hand_case() {
    let y = [1.0, 2.0, 3.0, 4.0];
    let yhat = [1.0, 2.0, 3.0, 5.0];
    let w = [1.0, 1.0, 1.0, 2.0];
    let r = fidelity_report(&y, &yhat, &w, 1).unwrap();
    assert!((r.wmse - 2.0 / 5.0).abs() < 1e-15);
    assert!((r.wmae - 2.0 / 5.0).abs() < 1e-15);
    assert!((r.mean_l2 - 0.25).abs() < 1e-15);
    assert!((r.mean_l1 - 0.25).abs() < 1e-15);
    assert!((r.r2.unwrap() - (1.0 - 1.0 / 5.0)).abs() < 1e-15);
    // Weighted mean 14/5; weighted SST = 3.24 + 0.64 + 0.04 + 2·1.44 = 6.8.
    assert!((r.r2_w.unwrap() - (1.0 - 2.0 / 6.8)).abs() < 1e-12);

    let flat = fidelity_report_partial(&[1.0, 1.0], &[1.0, 1.0], &[1.0, 1.0], 1).unwrap();
    assert_eq!(flat.r2, None);
    assert_eq!(flat.r2_w_adj, None);
    assert!(fidelity_report(&[1.0, 1.0], &[1.0, 1.0], &[1.0, 1.0], 1).is_err());
}

fn truth_strategy() -> impl Strategy<Value = Vec<u8>> {
    prop::collection::vec(0u8..=1, 3..10).prop_filter("needs both classes", |l| l.contains(&0) && l.contains(&1))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn auroc_invariant_under_monotone_maps(labels in truth_strategy(),
                                           raw in prop::collection::vec(-5.0f64..5.0, 10),
                                           a in 0.1f64..10.0, b in -5.0f64..5.0) {
        let truth = GroundTruth::new(labels.clone()).unwrap();
        let s = &raw[..labels.len()];
        let base = att_auroc(s, &truth, TiePolicy::Strict).unwrap();
        let affine: Vec<f64> = s.iter().map(|x| a * x + b).collect();
        let cubed: Vec<f64> = s.iter().map(|x| x.powi(3)).collect();
        prop_assert_eq!(att_auroc(&affine, &truth, TiePolicy::Strict).unwrap(), base);
        prop_assert_eq!(att_auroc(&cubed, &truth, TiePolicy::Strict).unwrap(), base);
        prop_assert!((0.0..=1.0).contains(&base));
    }

    #[test]
    fn thresholded_metrics_invariant_under_positive_affine(labels in truth_strategy(),
                                                           raw in prop::collection::vec(-5.0f64..5.0, 10),
                                                           a in 0.1f64..10.0, b in -5.0f64..5.0) {
        let truth = GroundTruth::new(labels.clone()).unwrap();
        let s = &raw[..labels.len()];
        let t: Vec<f64> = s.iter().map(|x| a * x + b).collect();
        let close = |x: f64, y: f64| (x - y).abs() < 1e-9;
        // Normalization can differ by rounding right at the threshold, so
        // skip draws that land there.
        let lo = s.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assume!(s.iter().all(|x| ((x - lo) / (hi - lo) - 0.5).abs() > 1e-9));
        prop_assert!(close(att_acc(s, &truth, 0.5).unwrap(), att_acc(&t, &truth, 0.5).unwrap()));
        prop_assert!(close(att_f1(s, &truth, 0.5).unwrap(), att_f1(&t, &truth, 0.5).unwrap()));
    }

    #[test]
    fn jaccard_is_symmetric_and_bounded(a in prop::collection::vec(-5.0f64..5.0, 6),
                                        b in prop::collection::vec(-5.0f64..5.0, 6),
                                        k in 1usize..=6) {
        let ab = jaccard_topk(&a, &b, k).unwrap();
        prop_assert_eq!(ab, jaccard_topk(&b, &a, k).unwrap());
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert_eq!(jaccard_topk(&a, &a, k).unwrap(), 1.0);
    }

    #[test]
    fn adjusted_r2_never_exceeds_r2_w(y in prop::collection::vec(-5.0f64..5.0, 8),
                                      noise in prop::collection::vec(-1.0f64..1.0, 8),
                                      w in prop::collection::vec(0.1f64..2.0, 8),
                                      m in 1usize..=5) {
        let yhat: Vec<f64> = y.iter().zip(&noise).map(|(a, b)| a + b).collect();
        let r = fidelity_report_partial(&y, &yhat, &w, m).unwrap();
        if let (Some(r2w), Some(adj)) = (r.r2_w, r.r2_w_adj) {
            prop_assert!(adj <= r2w + 1e-12);
        }
        prop_assert!(r.wmse >= 0.0 && r.wmae >= 0.0);
    }

    #[test]
    fn constant_runs_have_zero_spread(row in prop::collection::vec(-5.0f64..5.0, 1..8), n in 2usize..6) {
        let runs = vec![row; n];
        prop_assert_eq!(consistency_stats(&runs).unwrap(), (0.0, 0.0));
    }
}
