use proptest::prelude::*;

use super::*;

#[test]
fn auc_examples() {
    assert_eq!(auc(&[0.9, 0.8, 0.2, 0.1], &[true, true, false, false]).unwrap(), 1.0);
    assert_eq!(auc(&[0.5; 6], &[true, false, true, false, false, true]).unwrap(), 0.5);
    assert_eq!(auc(&[0.1, 0.2, 0.8], &[true, false, false]).unwrap(), 0.0);
    assert!(matches!(auc(&[0.1, 0.2], &[true, true]), Err(Error::Undefined(_))));
}

#[test]
fn gini_examples() {
    let truth = [0.0, 3.0, 10.0, 1.0, 0.0, 7.0];
    assert_eq!(gini_normalized(&truth, &truth).unwrap(), 1.0);
    let reversed: Vec<f64> = truth.iter().map(|t| -t).collect();
    let rev = gini_normalized(&reversed, &truth).unwrap();
    let fwd = oracle::gini_normalized(&truth, &truth).unwrap();
    assert!(rev < 0.0);
    // this instance has ties at zero, so compare against a tie-free one too
    let tie_free = [4.0, 1.0, 9.0, 2.5, 0.5];
    let neg: Vec<f64> = tie_free.iter().map(|t| -t).collect();
    let g = gini_normalized(&neg, &tie_free).unwrap();
    assert!((g + oracle::gini_normalized(&tie_free, &tie_free).unwrap()).abs() < 1e-12);
    assert!((fwd - 1.0).abs() < 1e-12);
    // constant predictions put everything in one tie group
    assert!(gini_normalized(&[1.0; 6], &truth).unwrap().abs() < 1e-12);
    assert!(matches!(
        gini_normalized(&[1.0, 2.0], &[0.0, 0.0]),
        Err(Error::Undefined(_))
    ));
    assert!(gini_normalized(&[1.0], &[-1.0]).is_err());
    assert_eq!(gini_normalized(&[3.0, 1.0], &[2.0, 2.0]).unwrap(), 1.0);
}

#[test]
fn recall_examples() {
    let ids: Vec<u64> = (0..10).collect();
    let scores = [9.0, 8.0, 7.0, 6.0, 5.0, 4.0, 3.0, 2.0, 1.0, 0.0];
    let mut whales = [false; 10];
    for i in [0, 2, 5, 7, 9] {
        whales[i] = true;
    }
    assert_eq!(recall_at_k(&scores, &whales, &ids, 3).unwrap(), 0.4);
    assert_eq!(recall_at_k(&scores, &whales, &ids, 10).unwrap(), 1.0);
    assert_eq!(recall_at_k(&scores, &whales, &ids, 0).unwrap(), 0.0);
    assert!(recall_at_k(&scores, &whales, &ids, 11).is_err());
    assert!(matches!(
        recall_at_k(&scores, &[false; 10], &ids, 3),
        Err(Error::Undefined(_))
    ));
}

#[test]
fn recall_ties_follow_user_id() {
    let scores = [1.0, 1.0, 1.0];
    let ids = [30, 10, 20];
    assert_eq!(recall_at_k(&scores, &[false, true, false], &ids, 1).unwrap(), 1.0);
    assert_eq!(recall_at_k(&scores, &[true, false, false], &ids, 2).unwrap(), 0.0);
}

#[test]
fn level_curve_examples() {
    let n = 30;
    let ids: Vec<u64> = (0..n as u64).collect();
    let ltv: Vec<f64> = (0..n).map(|i| i as f64).collect();
    let whales: Vec<bool> = (0..n).map(|i| i >= 10).collect();
    let scores: Vec<f64> = (0..n).map(|i| ((i * 7) % n) as f64).collect();
    let all = level_curve(&scores, &ltv, &whales, &ids, n).unwrap();
    assert_eq!(all.detected, all.totals);
    assert_eq!(all.totals, vec![2, 4, 6, 8, 10, 12, 14, 16, 18, 20]);
    let none = level_curve(&scores, &ltv, &whales, &ids, 0).unwrap();
    assert!(none.detected.iter().all(|&c| c == 0));
    let few = level_curve(
        &[4.0, 3.0, 2.0, 1.0],
        &[5.0, 6.0, 7.0, 0.0],
        &[true, true, true, false],
        &[0, 1, 2, 3],
        2,
    )
    .unwrap();
    assert_eq!(few.detected, vec![0, 1, 2]);
    assert_eq!(few.levels(), 3);
}

#[test]
fn report_formats() {
    let users: Vec<ScoredUser> = (0..20u64)
        .map(|i| {
            let ltv = if i % 3 == 0 { 0.0 } else { i as f64 * 10.0 };
            ScoredUser {
                user_id: i,
                ltv_hat: ltv,
                p_gw: ltv,
                p_ptr: ltv,
                ltv,
                s: u8::from(ltv > 0.0),
                g: u8::from(ltv >= 100.0),
            }
        })
        .collect();
    let report = evaluate(&users, &EvalConfig::default()).unwrap();
    assert_eq!(report.gini, Some(1.0));
    assert_eq!(report.auc, Some(1.0));
    assert_eq!(report.recall(500), Some(1.0));
    let text = report.to_text();
    assert!(text.contains("gini=1\n"), "{text}");
    assert!(text.contains("recall_at_5000=1\n"));
    assert!(report.to_csv().starts_with("metric,value\n"));
    // 7 whales, so one level per whale
    assert_eq!(report.n_whales, 7);
    assert_eq!(report.level_curves_csv().lines().count(), 1 + 2 * 7);

    let mut buf = Vec::new();
    write_scores(&users, &mut buf).unwrap();
    let back = read_scores(buf.as_slice(), std::path::Path::new("mem")).unwrap();
    assert_eq!(back, users);
}

#[test]
fn report_marks_undefined_metrics() {
    let users = vec![ScoredUser {
        user_id: 1,
        ltv_hat: 0.0,
        p_gw: 0.0,
        p_ptr: 0.1,
        ltv: 0.0,
        s: 0,
        g: 0,
    }];
    let report = evaluate(&users, &EvalConfig::default()).unwrap();
    assert_eq!(report.auc, None);
    assert!(report.to_text().contains("auc=undefined"));
}

#[test]
fn inconsistent_score_rows_rejected() {
    let csv = "user_id,ltv_hat,p_gw,p_ptr,ltv,s,g\n1,0.5,0.1,0.2,3.0,0,0\n";
    let err = read_scores(csv.as_bytes(), std::path::Path::new("x.csv")).unwrap_err();
    assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
}

fn instance() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<bool>, Vec<u64>)> {
    (1usize..=50).prop_flat_map(|n| {
        (
            // small integer scores force ties
            prop::collection::vec(0i32..12, n).prop_map(|v| v.into_iter().map(f64::from).collect()),
            prop::collection::vec(prop_oneof![Just(0.0), 0.01f64..1000.0], n),
            prop::collection::vec(any::<bool>(), n),
            Just((0..n as u64).map(|i| i * 3 + 1).collect::<Vec<u64>>()).prop_shuffle(),
        )
    })
}

fn monotone(x: f64) -> f64 {
    x * x * x + 5.0 * x - 2.0
}

proptest! {
    #[test]
    fn auc_matches_oracle((scores, _, labels, _) in instance()) {
        let fast = auc(&scores, &labels).ok();
        prop_assert_eq!(fast, oracle::auc(&scores, &labels));
    }

    #[test]
    fn gini_matches_oracle((scores, truth, _, _) in instance()) {
        let fast = gini_normalized(&scores, &truth).ok();
        let slow = oracle::gini_normalized(&scores, &truth);
        prop_assert_eq!(fast.is_some(), slow.is_some());
        if let (Some(a), Some(b)) = (fast, slow) {
            prop_assert!((a - b).abs() <= 1e-12, "{} vs {}", a, b);
            prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&a));
        }
    }

    #[test]
    fn gini_of_truth_is_one((_, truth, _, _) in instance()) {
        prop_assume!(truth.iter().any(|&t| t > 0.0));
        prop_assert_eq!(gini_normalized(&truth, &truth).unwrap(), 1.0);
    }

    #[test]
    fn recall_matches_oracle((scores, _, whales, ids) in instance(), frac in 0.0f64..=1.0) {
        let k = (frac * scores.len() as f64) as usize;
        prop_assert_eq!(recall_at_k(&scores, &whales, &ids, k).ok(), oracle::recall_at_k(&scores, &whales, &ids, k));
    }

    #[test]
    fn recall_is_monotone_in_k((scores, _, whales, ids) in instance()) {
        prop_assume!(whales.iter().any(|&w| w));
        let mut prev = 0.0;
        for k in 0..=scores.len() {
            let r = recall_at_k(&scores, &whales, &ids, k).unwrap();
            prop_assert!(r >= prev);
            prev = r;
        }
        prop_assert_eq!(prev, 1.0);
    }

    #[test]
    fn level_curve_matches_oracle((scores, ltv, whales, ids) in instance(), frac in 0.0f64..=1.0) {
        let k = (frac * scores.len() as f64) as usize;
        let fast = level_curve(&scores, &ltv, &whales, &ids, k).ok().map(|c| (c.detected, c.totals));
        prop_assert_eq!(fast, oracle::level_curve(&scores, &ltv, &whales, &ids, k));
    }

    #[test]
    fn metrics_are_rank_invariant((scores, truth, labels, ids) in instance(), frac in 0.0f64..=1.0) {
        let moved: Vec<f64> = scores.iter().map(|&s| monotone(s)).collect();
        let k = (frac * scores.len() as f64) as usize;
        prop_assert_eq!(auc(&scores, &labels).ok(), auc(&moved, &labels).ok());
        prop_assert_eq!(gini_normalized(&scores, &truth).ok(), gini_normalized(&moved, &truth).ok());
        prop_assert_eq!(recall_at_k(&scores, &labels, &ids, k).ok(), recall_at_k(&moved, &labels, &ids, k).ok());
        prop_assert_eq!(
            level_curve(&scores, &truth, &labels, &ids, k).ok(),
            level_curve(&moved, &truth, &labels, &ids, k).ok()
        );
    }
}
