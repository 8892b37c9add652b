mod common;

use loanscreen::data_model::{FeatureKind, Value};
use loanscreen::monitor::{
    drift_scan, ks_statistic, population_stability_index, psi_from_shares, DriftBaseline,
    DriftThresholds, Verdict,
};
use loanscreen::synthgen::{generate, GeneratorSpec};
use proptest::prelude::*;

fn shares(raw: Vec<u32>) -> Vec<f64> {
    let total: u32 = raw.iter().sum::<u32>().max(1);
    raw.iter().map(|&c| c as f64 / total as f64).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn psi_is_symmetric_and_nonnegative(
        pairs in prop::collection::vec((0u32..50, 0u32..50), 2..12)
    ) {
        let p = shares(pairs.iter().map(|x| x.0).collect());
        let q = shares(pairs.iter().map(|x| x.1).collect());
        let pq = psi_from_shares(&p, &q).unwrap();
        let qp = psi_from_shares(&q, &p).unwrap();
        prop_assert!(pq >= 0.0);
        prop_assert!((pq - qp).abs() <= 1e-12 * pq.max(1.0));
        prop_assert_eq!(psi_from_shares(&p, &p).unwrap(), 0.0);
    }

    #[test]
    fn psi_and_ks_depend_on_ranks_only(
        a in prop::collection::vec(-100i32..100, 5..150),
        b in prop::collection::vec(-100i32..100, 5..150),
    ) {
        let a: Vec<f64> = a.into_iter().map(f64::from).collect();
        let b: Vec<f64> = b.into_iter().map(f64::from).collect();
        let t = |v: &[f64]| v.iter().map(|x| (x / 40.0).exp()).collect::<Vec<_>>();
        let psi = population_stability_index(&a, &b, 10).unwrap();
        let psi_t = population_stability_index(&t(&a), &t(&b), 10).unwrap();
        prop_assert_eq!(psi, psi_t);
        prop_assert_eq!(ks_statistic(&a, &b).unwrap(), ks_statistic(&t(&a), &t(&b)).unwrap());
        let ks = ks_statistic(&a, &b).unwrap();
        prop_assert!((0.0..=1.0).contains(&ks));
    }
}

#[test]
fn scanning_a_window_against_itself_is_stable() {
    let p = generate(&GeneratorSpec::new(2_000, 0.3, 4)).unwrap();
    let features: Vec<String> = p.schema().names().map(str::to_string).collect();
    let report = drift_scan(&p, &p, &features).unwrap();
    assert_eq!(report.features.len(), features.len());
    for f in report.features.values() {
        assert_eq!(f.psi, 0.0);
        assert_eq!(f.ks_statistic, Some(0.0));
        assert_eq!(f.verdict, Verdict::Stable);
    }
    assert!(drift_scan(&p, &p, &[]).unwrap().features.is_empty());
}

#[test]
fn shifted_feature_alone_alerts() {
    let reference = generate(&GeneratorSpec::new(20_000, 0.3, 1)).unwrap();
    let mut live_spec = GeneratorSpec::new(20_000, 0.3, 2);
    live_spec.drift_shift.insert("noise_02".into(), 3.0);
    let live = generate(&live_spec).unwrap();
    let features: Vec<String> = reference.schema().names().map(str::to_string).collect();
    let report = drift_scan(&reference, &live, &features).unwrap();
    assert_eq!(report.alerts(), ["noise_02"]);
    assert_eq!(report.worst(), Verdict::Alert);
    // the verdict agrees with a direct computation
    let col = |p: &loanscreen::Portfolio| -> Vec<f64> {
        p.column("noise_02").unwrap().iter().map(|v| v.as_number().unwrap()).collect()
    };
    let direct = population_stability_index(&col(&reference), &col(&live), 10).unwrap();
    assert!((report.features["noise_02"].psi - direct).abs() < 1e-12);
}

#[test]
fn categorical_levels_and_missing_values_are_binned() {
    let labels = vec![0u8; 6];
    let reference = common::portfolio(
        vec![(
            "c".into(),
            FeatureKind::Categorical,
            vec!["a", "a", "b", "b", "a", "b"]
                .into_iter()
                .map(|s| Value::Symbol(s.into()))
                .collect(),
        )],
        &labels,
    );
    let live = common::portfolio(
        vec![(
            "c".into(),
            FeatureKind::Categorical,
            vec![
                Value::Symbol("zzz".into()),
                Value::Missing,
                Value::Symbol("a".into()),
                Value::Symbol("a".into()),
                Value::Symbol("a".into()),
                Value::Symbol("b".into()),
            ],
        )],
        &labels,
    );
    let baseline = DriftBaseline::fit(&reference, &["c".into()], 10, "ref").unwrap();
    let report = baseline.scan(&live, "live", DriftThresholds::default()).unwrap();
    let f = &report.features["c"];
    assert!(f.ks_statistic.is_none());
    assert_eq!(f.verdict, Verdict::Alert);
    // levels a, b, unseen, missing
    let p = [0.5, 0.5, 0.0, 0.0];
    let q = [0.5, 1.0 / 6.0, 1.0 / 6.0, 1.0 / 6.0];
    assert!((f.psi - psi_from_shares(&p, &q).unwrap()).abs() < 1e-12);
}

#[test]
fn baseline_survives_serialization_and_checks_features() {
    let p = generate(&GeneratorSpec::new(500, 0.3, 8)).unwrap();
    let features = vec!["signal_01".to_string()];
    let b = DriftBaseline::fit(&p, &features, 10, "train").unwrap();
    let back: DriftBaseline = serde_json::from_str(&b.to_json()).unwrap();
    assert_eq!(back, b);
    let other = common::random_portfolio(1, 20, 2, 0.0);
    assert!(b.scan(&other, "x", DriftThresholds::default()).is_err());
    assert!(b
        .scan(&p, "x", DriftThresholds { warning: 0.5, alert: 0.1 })
        .is_err());
}
