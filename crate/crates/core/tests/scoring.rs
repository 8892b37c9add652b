mod common;

use loanscreen::calibration::{
    expected_calibration_error, fit_calibrator, freedman_diaconis_bins, reliability_bins, BinRule,
    CalibrationMethod, Calibrator, PredictionSet, ReliabilityDiagram,
};
use loanscreen::metrics::{brier_score, classify, evaluate, rates_from_counts};
use proptest::prelude::*;

fn prediction_sets() -> impl Strategy<Value = PredictionSet> {
    prop::collection::vec((0.0f64..=1.0, 0u8..=1), 2..300)
        .prop_map(|v| {
            let (f, o) = v.into_iter().unzip();
            PredictionSet::new(f, o).unwrap()
        })
}

fn two_class_sets() -> impl Strategy<Value = PredictionSet> {
    prediction_sets().prop_filter("both classes", |s| {
        let p = s.positives();
        p > 0 && p < s.len()
    })
}

/// Brute-force reimplementation of the evaluation report fields.
fn brute_force(s: &PredictionSet, threshold: f64) -> (f64, Option<f64>, [u64; 4], f64) {
    let f = s.predictions();
    let o = s.outcomes();
    let n = f.len();
    let mut bs = 0.0;
    let mut counts = [0u64; 4]; // tp fp tn fn
    for i in 0..n {
        bs += (f[i] - o[i] as f64) * (f[i] - o[i] as f64);
        let slot = match (f[i] >= threshold, o[i] == 1) {
            (true, true) => 0,
            (true, false) => 1,
            (false, false) => 2,
            (false, true) => 3,
        };
        counts[slot] += 1;
    }
    bs /= n as f64;
    let p = (counts[0] + counts[3]) as f64 / n as f64;
    let mut bs_ref = 0.0;
    for i in 0..n {
        bs_ref += (p - o[i] as f64) * (p - o[i] as f64);
    }
    bs_ref /= n as f64;
    let bss = (bs_ref > 0.0).then(|| 1.0 - bs / bs_ref);

    // Freedman-Diaconis with type-7 quartiles on a sorted copy
    let mut sorted = f.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let q = |p: f64| {
        let h = (n - 1) as f64 * p;
        let lo = h.floor() as usize;
        sorted[lo] + (h - lo as f64) * (sorted[(lo + 1).min(n - 1)] - sorted[lo])
    };
    let k = if sorted[0] == sorted[n - 1] {
        1
    } else if q(0.75) - q(0.25) == 0.0 {
        10
    } else {
        let h = 2.0 * (q(0.75) - q(0.25)) / (n as f64).powf(1.0 / 3.0);
        ((1.0 / h).ceil() as usize).clamp(1, 100)
    };
    let mut sums = vec![(0.0, 0.0, 0.0); k];
    for i in 0..n {
        let mut b = 0;
        while b + 1 < k && f[i] >= (b + 1) as f64 / k as f64 {
            b += 1;
        }
        sums[b].0 += f[i];
        sums[b].1 += o[i] as f64;
        sums[b].2 += 1.0;
    }
    let ece = sums
        .iter()
        .filter(|s| s.2 > 0.0)
        .map(|s| s.2 / n as f64 * (s.1 / s.2 - s.0 / s.2).abs())
        .sum();
    (bs, bss, counts, ece)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn evaluation_matches_brute_force(s in prediction_sets(), t in 0.0f64..=1.0) {
        let r = evaluate(&s, t, BinRule::FreedmanDiaconis).unwrap();
        let (bs, bss, c, ece) = brute_force(&s, t);
        prop_assert!((r.skill.bs - bs).abs() < 1e-12);
        match (r.skill.bss, bss) {
            (Some(a), Some(b)) => prop_assert!((a - b).abs() < 1e-12),
            (a, b) => prop_assert_eq!(a, b),
        }
        prop_assert_eq!([r.counts.tp, r.counts.fp, r.counts.tn, r.counts.fn_], c);
        prop_assert!((r.ece - ece).abs() < 1e-12, "{} vs {}", r.ece, ece);
        let sens = r.rates.sensitivity.value;
        prop_assert_eq!(sens, (c[0] + c[3] > 0).then(|| c[0] as f64 / (c[0] + c[3]) as f64));
    }

    #[test]
    fn brier_is_permutation_invariant(s in prediction_sets(), rot in 0usize..300) {
        let n = s.len();
        let idx: Vec<usize> = (0..n).map(|i| (i + rot) % n).rev().collect();
        let f: Vec<f64> = idx.iter().map(|&i| s.predictions()[i]).collect();
        let o: Vec<u8> = idx.iter().map(|&i| s.outcomes()[i]).collect();
        let t = PredictionSet::new(f, o).unwrap();
        prop_assert!((brier_score(&s) - brier_score(&t)).abs() < 1e-12);
    }

    #[test]
    fn classification_counts_and_rate_monotonicity(s in prediction_sets(), a in 0.0f64..=1.0, b in 0.0f64..=1.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let pos = s.positives() as u64;
        let neg = s.len() as u64 - pos;
        let cl = classify(&s, lo);
        let ch = classify(&s, hi);
        for c in [cl, ch] {
            prop_assert_eq!(c.tp + c.fn_, pos);
            prop_assert_eq!(c.tn + c.fp, neg);
        }
        let (rl, rh) = (rates_from_counts(cl), rates_from_counts(ch));
        if let (Some(x), Some(y)) = (rl.sensitivity.value, rh.sensitivity.value) {
            prop_assert!(y <= x);
        }
        if let (Some(x), Some(y)) = (rl.specificity.value, rh.specificity.value) {
            prop_assert!(y >= x);
        }
    }

    #[test]
    fn bins_partition_the_sample(s in prediction_sets(), k in 1usize..=100) {
        for rule in [BinRule::FreedmanDiaconis, BinRule::Fixed(k)] {
            let d = reliability_bins(&s, rule).unwrap();
            prop_assert_eq!(d.bins.iter().map(|b| b.count).sum::<usize>(), s.len());
            prop_assert_eq!(d.bins[0].lower, 0.0);
            prop_assert_eq!(d.bins.last().unwrap().upper, 1.0);
            for w in d.bins.windows(2) {
                prop_assert_eq!(w[0].upper, w[1].lower);
            }
            for b in &d.bins {
                if let Some(m) = b.mean_predicted() {
                    prop_assert!(b.lower <= m + 1e-15 && m <= b.upper + 1e-15);
                }
            }
        }
    }

    #[test]
    fn ece_ignores_bin_order(s in prediction_sets()) {
        let d = reliability_bins(&s, BinRule::Fixed(10)).unwrap();
        let mut reversed = d.clone();
        reversed.bins.reverse();
        prop_assert!((expected_calibration_error(&d) - expected_calibration_error(&reversed)).abs() < 1e-12);
        let e = expected_calibration_error(&d);
        prop_assert!((0.0..=1.0).contains(&e));
    }

    #[test]
    fn calibrators_are_monotone_and_bounded(s in two_class_sets(), probes in prop::collection::vec(0.0f64..=1.0, 20)) {
        let mut probes = probes;
        probes.sort_by(f64::total_cmp);
        let iso = fit_calibrator(&s, CalibrationMethod::Isotonic).unwrap();
        let out: Vec<f64> = probes.iter().map(|&x| iso.apply(x)).collect();
        for w in out.windows(2) {
            prop_assert!(w[0] <= w[1]);
        }
        prop_assert!(out.iter().all(|v| (0.0..=1.0).contains(v)));
        if let Ok(sig @ Calibrator::Sigmoid { slope, .. }) = fit_calibrator(&s, CalibrationMethod::Sigmoid) {
            let out: Vec<f64> = probes.iter().map(|&x| sig.apply(x)).collect();
            prop_assert!(out.iter().all(|v| (0.0..=1.0).contains(v)));
            if slope > 0.0 {
                for w in out.windows(2) {
                    prop_assert!(w[0] <= w[1]);
                }
            }
        }
    }
}

#[test]
fn ece_is_zero_when_every_bin_is_calibrated() {
    let f = vec![0.25, 0.25, 0.25, 0.25, 0.75, 0.75, 0.75, 0.75];
    let o = vec![1, 0, 0, 0, 1, 1, 1, 0];
    let d = reliability_bins(&PredictionSet::new(f, o).unwrap(), BinRule::Fixed(2)).unwrap();
    assert_eq!(expected_calibration_error(&d), 0.0);
}

#[test]
fn isotonic_is_a_fixed_point_on_calibrated_steps() {
    // each score level's outcome share equals the score
    let mut f = Vec::new();
    let mut o = Vec::new();
    for (score, pos) in [(0.2, 1), (0.4, 2), (0.8, 4)] {
        for i in 0..5 {
            f.push(score);
            o.push((i < pos) as u8);
        }
    }
    let s = PredictionSet::new(f, o).unwrap();
    let c = fit_calibrator(&s, CalibrationMethod::Isotonic).unwrap();
    for x in [0.2, 0.4, 0.8] {
        assert!((c.apply(x) - x).abs() < 1e-12);
    }
}

#[test]
fn fd_bin_count_for_ten_uniform_scores_matches_hand_value() {
    // IQR 0.45 (type 7), width 0.9 / 10^(1/3) = 0.4177 -> 3 bins
    let f: Vec<f64> = (0..10).map(|i| i as f64 / 10.0).collect();
    assert_eq!(freedman_diaconis_bins(&f), 3);
}

#[test]
fn diagram_csv_round_trips_through_a_reader() {
    let s = PredictionSet::new(vec![0.1, 0.15, 0.6, 0.9], vec![0, 1, 1, 1]).unwrap();
    let d: ReliabilityDiagram = reliability_bins(&s, BinRule::Fixed(4)).unwrap();
    let text = d.to_csv_string();
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let rows: Vec<csv::StringRecord> = rdr.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 4);
    let total: usize = rows.iter().map(|r| r[2].parse::<usize>().unwrap()).sum();
    assert_eq!(total, 4);
}
