//! Acceptance suite. Each criterion runs in isolation and reports one line;
//! the process exits nonzero if any criterion fails.

#[path = "../common/mod.rs"]
mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use loanscreen::calibration::{
    expected_calibration_error, freedman_diaconis_bins, reliability_bins, BinRule, PredictionSet,
};
use loanscreen::data_model::{BiasClass, FeatureKind, Value};
use loanscreen::feature_select::{eligible_features, mrmr_select};
use loanscreen::gbdt::{logistic_loss, logistic_loss_grad_hess, train, train_with_history, TrainConfig};
use loanscreen::metrics::{
    brier_score, brier_skill_score, classify, evaluate, rates_from_counts, reference_brier,
    threshold_for_specificity, ConfusionCounts,
};
use loanscreen::monitor::{drift_scan, psi_from_shares, Verdict};
use loanscreen::pipeline::{
    fit_scorer, run_modeling, split_train_test, ModelingConfig, PipelineError,
};
use loanscreen::privacy::{anonymize, pseudonymize, re_identify, MaskMap, PseudonymizationKey};
use loanscreen::synthgen::{
    generate, table1_noise_scales, table1_scenario, GeneratorSpec, TABLE1_VALIDATION_POSITIVES,
    TABLE1_VALIDATION_RECORDS,
};
use loanscreen::{Portfolio, PortfolioKind};
use rand::Rng;

type Outcome = Result<String, String>;

macro_rules! check {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn round4(x: f64) -> f64 {
    (x * 1e4).round() / 1e4
}

/// Prediction set whose confusion matrix at threshold 0.5 equals `c`.
fn set_from_counts(c: ConfusionCounts) -> PredictionSet {
    let mut f = Vec::new();
    let mut o = Vec::new();
    for (n, score, label) in [(c.tp, 0.9, 1), (c.fn_, 0.1, 1), (c.tn, 0.1, 0), (c.fp, 0.9, 0)] {
        f.extend(std::iter::repeat_n(score, n as usize));
        o.extend(std::iter::repeat_n(label, n as usize));
    }
    PredictionSet::new(f, o).unwrap()
}

fn confusion_arithmetic() -> Outcome {
    let counts = ConfusionCounts {
        tp: 1461,
        fp: 6284,
        tn: 55866,
        fn_: 152,
    };
    let set = set_from_counts(counts);
    // warm call first, then the fastest of a few timed repetitions
    let _ = evaluate(&set, 0.5, BinRule::FreedmanDiaconis).unwrap();
    let mut elapsed = std::time::Duration::MAX;
    let mut last = None;
    for _ in 0..5 {
        let start = Instant::now();
        let rates = rates_from_counts(counts);
        let report = evaluate(&set, 0.5, BinRule::FreedmanDiaconis).unwrap();
        elapsed = elapsed.min(start.elapsed());
        last = Some((rates, report));
    }
    let (rates, report) = last.unwrap();
    check!(report.counts == counts, "evaluate recovered {:?}", report.counts);
    let expected = [
        ("sensitivity", rates.sensitivity.value, 0.9058),
        ("specificity", rates.specificity.value, 0.8989),
        ("ppv", rates.ppv.value, 0.1886),
        ("npv", rates.npv.value, 0.9973),
        ("prevalence", rates.prevalence.value, 0.0253),
        ("evaluate sensitivity", report.rates.sensitivity.value, 0.9058),
        ("evaluate specificity", report.rates.specificity.value, 0.8989),
        ("evaluate ppv", report.rates.ppv.value, 0.1886),
        ("evaluate npv", report.rates.npv.value, 0.9973),
        ("evaluate prevalence", report.rates.prevalence.value, 0.0253),
    ];
    for (name, got, want) in expected {
        let got = got.ok_or(format!("{name} undefined"))?;
        check!(round4(got) == want, "{name} = {got}, expected {want}");
    }
    let coarse = [
        (rates.sensitivity.value.unwrap(), 2, 0.91),
        (rates.specificity.value.unwrap(), 2, 0.90),
        (rates.ppv.value.unwrap(), 2, 0.19),
        (rates.npv.value.unwrap(), 3, 0.997),
    ];
    for (v, digits, want) in coarse {
        let scale = 10f64.powi(digits);
        check!((v * scale).round() / scale == want, "{v} does not round to {want}");
    }
    check!(elapsed.as_secs_f64() < 1e-3, "took {elapsed:?}");
    Ok(format!("rates 0.9058/0.8989/0.1886/0.9973/0.0253 in {elapsed:?}"))
}

fn skill_arithmetic() -> Outcome {
    let bs_ref = reference_brier(0.5795).unwrap();
    check!((bs_ref - 0.2437).abs() <= 1e-4, "reference {bs_ref}");
    let bss = brier_skill_score(0.19, 0.2437).unwrap();
    check!((bss - 0.2204).abs() <= 1e-3, "skill {bss}");
    check!((bss * 10.0).round() / 10.0 == 0.2, "skill {bss} does not round to 0.2");
    Ok(format!("reference {bs_ref:.4}, skill {bss:.4}"))
}

fn random_set(r: &mut impl Rng, n: usize) -> PredictionSet {
    let f: Vec<f64> = (0..n).map(|_| r.random::<f64>()).collect();
    let o: Vec<u8> = (0..n).map(|_| r.random_range(0..=1u8)).collect();
    PredictionSet::new(f, o).unwrap()
}

fn skill_oracle() -> Outcome {
    let mut r = common::rng(2024);
    for trial in 0..1000 {
        let n = r.random_range(2..=500);
        let s = random_set(&mut r, n);
        let (f, o) = (s.predictions(), s.outcomes());
        let mut bs = 0.0;
        for i in 0..n {
            let d = f[i] - o[i] as f64;
            bs += d * d;
        }
        bs /= n as f64;
        check!((brier_score(&s) - bs).abs() <= 1e-12, "trial {trial}: brier");
        let pos = o.iter().filter(|&&y| y == 1).count();
        if pos == 0 || pos == n {
            continue;
        }
        let p = pos as f64 / n as f64;
        let bss = 1.0 - bs / (p * (1.0 - p));
        let got = brier_skill_score(brier_score(&s), reference_brier(p).unwrap()).unwrap();
        check!((got - bss).abs() <= 1e-12, "trial {trial}: skill {got} vs {bss}");

        let constant = PredictionSet::new(vec![p; n], o.to_vec()).unwrap();
        let report = evaluate(&constant, 0.5, BinRule::FreedmanDiaconis).unwrap();
        check!(report.skill.bss == Some(0.0), "trial {trial}: constant skill {:?}", report.skill.bss);

        let perfect = PredictionSet::new(o.iter().map(|&y| y as f64).collect(), o.to_vec()).unwrap();
        let report = evaluate(&perfect, 0.5, BinRule::FreedmanDiaconis).unwrap();
        check!(
            report.skill.bs == 0.0 && report.skill.bss == Some(1.0) && report.ece == 0.0,
            "trial {trial}: perfect forecast {:?} ece {}",
            report.skill,
            report.ece
        );
    }
    Ok("1000 random sets agree with the loop oracle".into())
}

fn ece_machinery() -> Outcome {
    let s = PredictionSet::new(vec![0.2, 0.2, 0.8, 0.8], vec![1, 0, 1, 1]).unwrap();
    let ece = expected_calibration_error(&reliability_bins(&s, BinRule::Fixed(2)).unwrap());
    // 0.5 * |0.5 - 0.2| + 0.5 * |1 - 0.8| in binary floating point sits one ulp below 0.25
    check!((ece - 0.25).abs() <= 1e-15, "two-bin ece {ece}");

    let f: Vec<f64> = (1..=9).map(|i| i as f64 / 10.0).collect();
    let k = freedman_diaconis_bins(&f);
    check!(k == 3, "fd bins {k}");

    let mut r = common::rng(99);
    for trial in 0..1000 {
        let n = r.random_range(1..=500);
        let s = random_set(&mut r, n);
        let rule = if trial % 2 == 0 {
            BinRule::FreedmanDiaconis
        } else {
            BinRule::Fixed(r.random_range(1..=100))
        };
        let d = reliability_bins(&s, rule).unwrap();
        let total: usize = d.bins.iter().map(|b| b.count).sum();
        check!(total == n, "trial {trial}: bins hold {total} of {n}");
    }
    Ok(format!("two-bin ece {ece}, fd bins {k}, counts sum to N on 1000 sets"))
}

fn boosting_correctness() -> Outcome {
    let mut r = common::rng(5);
    let step = 1e-6;
    for _ in 0..20 {
        let m: f64 = r.random_range(-6.0..6.0);
        for y in [0u8, 1] {
            let (g, h) = logistic_loss_grad_hess(m, y);
            let fd_g = (logistic_loss(m + step, y) - logistic_loss(m - step, y)) / (2.0 * step);
            let fd_h = (logistic_loss_grad_hess(m + step, y).0
                - logistic_loss_grad_hess(m - step, y).0)
                / (2.0 * step);
            check!(((g - fd_g) / g).abs() < 1e-6, "gradient at {m}, y {y}: {g} vs {fd_g}");
            check!(((h - fd_h) / h).abs() < 1e-6, "hessian at {m}, y {y}: {h} vs {fd_h}");
        }
    }
    for seed in 0..10 {
        let p = common::random_portfolio(seed, 300, 6, 0.1);
        let features: Vec<String> = p.schema().names().map(str::to_string).collect();
        let cfg = TrainConfig {
            n_trees: 40,
            subsample: 1.0,
            ..TrainConfig::default()
        };
        let h = train_with_history(&p, &features, &cfg).unwrap().loss_history;
        for (i, w) in h.windows(2).enumerate() {
            check!(w[1] <= w[0], "set {seed}: loss rose at round {} ({} -> {})", i + 1, w[0], w[1]);
        }
    }
    let p = common::random_portfolio(77, 600, 10, 0.1);
    let features: Vec<String> = p.schema().names().map(str::to_string).collect();
    let hashes: Vec<String> = [1, 2, 8]
        .into_iter()
        .map(|t| {
            let cfg = TrainConfig {
                n_trees: 30,
                subsample: 0.8,
                n_threads: t,
                ..TrainConfig::default()
            };
            train(&p, &features, &cfg).unwrap().content_hash()
        })
        .collect();
    check!(hashes.iter().all(|h| *h == hashes[0]), "thread hashes {hashes:?}");
    Ok("finite differences, monotone loss on 10 sets, identical models on 1/2/8 threads".into())
}

mod mrmr_oracle {
    //! Exhaustive greedy re-implementation over ordered count tables.

    use super::*;

    #[derive(Clone, PartialEq, Eq, PartialOrd, Ord)]
    enum Level {
        Bin(usize),
        Sym(String),
        Missing,
    }

    fn levels(values: &[&Value]) -> Vec<Level> {
        let mut sorted: Vec<f64> = values.iter().filter_map(|v| v.as_number()).collect();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = sorted.len();
        let bins = ((n as f64).sqrt().ceil() as usize).clamp(1, 32);
        let mut cuts = BTreeSet::new();
        for i in 1..bins {
            cuts.insert(sorted[i * n / bins].to_bits());
        }
        let cuts: Vec<f64> = cuts.into_iter().map(f64::from_bits).collect();
        values
            .iter()
            .map(|v| match v {
                Value::Number(x) => Level::Bin(cuts.iter().filter(|&&c| c <= *x).count()),
                Value::Symbol(s) => Level::Sym(s.clone()),
                Value::Missing => Level::Missing,
            })
            .collect()
    }

    fn mi(a: &[Level], b: &[Level]) -> f64 {
        let n = a.len() as f64;
        let mut joint: BTreeMap<(&Level, &Level), f64> = BTreeMap::new();
        let mut ma: BTreeMap<&Level, f64> = BTreeMap::new();
        let mut mb: BTreeMap<&Level, f64> = BTreeMap::new();
        for (x, y) in a.iter().zip(b) {
            *joint.entry((x, y)).or_default() += 1.0;
            *ma.entry(x).or_default() += 1.0;
            *mb.entry(y).or_default() += 1.0;
        }
        if ma.len() < 2 || mb.len() < 2 {
            return 0.0;
        }
        let mut terms: Vec<f64> = joint
            .iter()
            .map(|(&(x, y), &c)| (c / n) * ((c * n) / (ma[x] * mb[y])).ln())
            .collect();
        terms.sort_by(|a, b| a.partial_cmp(b).unwrap());
        terms.iter().sum::<f64>().max(0.0)
    }

    pub fn select(p: &Portfolio, k: usize) -> Vec<(String, f64)> {
        let names: Vec<String> = p.schema().names().map(str::to_string).collect();
        let label: Vec<Level> = p
            .labels()
            .unwrap()
            .into_iter()
            .map(|y| Level::Bin(y as usize))
            .collect();
        let cols: Vec<Vec<Level>> = names.iter().map(|n| levels(&p.column(n).unwrap())).collect();
        let mut chosen: Vec<usize> = Vec::new();
        let mut out = Vec::new();
        for _ in 0..k {
            let mut best: Option<(f64, f64, usize)> = None;
            for i in 0..names.len() {
                if chosen.contains(&i) {
                    continue;
                }
                let rel = mi(&cols[i], &label);
                let mut red = 0.0;
                for &s in &chosen {
                    red += mi(&cols[i], &cols[s]);
                }
                let score = if chosen.is_empty() { rel } else { rel - red / chosen.len() as f64 };
                let better = match best {
                    None => true,
                    Some((bs, br, bi)) => {
                        score > bs
                            || (score == bs && rel > br)
                            || (score == bs && rel == br && names[i] < names[bi])
                    }
                };
                if better {
                    best = Some((score, rel, i));
                }
            }
            let (score, _, i) = best.unwrap();
            chosen.push(i);
            out.push((names[i].clone(), score));
        }
        out
    }
}

fn mrmr_agreement() -> Outcome {
    let mut r = common::rng(31);
    for trial in 0..200u64 {
        let n_features = r.random_range(1..=12);
        let n = r.random_range(10..=500);
        let k = r.random_range(1..=n_features.min(5));
        let p = common::random_portfolio(1000 + trial, n, n_features, 0.1);
        let names: Vec<String> = p.schema().names().map(str::to_string).collect();
        let got = mrmr_select(&p, &names, k).unwrap();
        let want = mrmr_oracle::select(&p, k);
        let got_steps: Vec<(String, f64)> =
            got.steps.iter().map(|s| (s.feature.clone(), s.score)).collect();
        check!(
            got_steps == want,
            "trial {trial}: got {got_steps:?}, oracle {want:?}"
        );
    }
    Ok("200 random portfolios agree step for step".into())
}

struct Scenario {
    train_test: Portfolio,
    validation: Portfolio,
}

fn end_to_end(sc: &Scenario) -> Outcome {
    let start = Instant::now();
    let cfg = ModelingConfig {
        deployment_prevalence: Some(
            TABLE1_VALIDATION_POSITIVES as f64 / TABLE1_VALIDATION_RECORDS as f64,
        ),
        ..ModelingConfig::default()
    };
    let run = run_modeling(&sc.train_test, &cfg, 42).map_err(|e| e.to_string())?;
    let scorer = run.scorer.deployed(&cfg).map_err(|e| e.to_string())?;
    let val = scorer
        .evaluate(&sc.validation, cfg.bin_rule)
        .map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let sens = val.rates.sensitivity.value.unwrap();
    let spec = val.rates.specificity.value.unwrap();
    let bss = val.skill.bss.unwrap_or(f64::NAN);
    check!(run.features.len() == 10, "selected {:?}", run.features);
    check!(sens >= 0.88, "validation sensitivity {sens:.4}");
    check!(spec >= 0.88, "validation specificity {spec:.4}");
    check!(val.ece <= 0.05, "validation ece {:.4}", val.ece);
    check!(bss > 0.0, "validation skill {bss:.4}");
    check!(elapsed.as_secs() <= 300, "took {elapsed:?}");
    let test = &run.test_report;
    Ok(format!(
        "validation sens {sens:.4} spec {spec:.4} ece {:.4} bss {bss:.4}; \
         held-out ece {:.4} bss {:.4}; {:.1}s",
        val.ece,
        test.ece,
        test.skill.bss.unwrap_or(f64::NAN),
        elapsed.as_secs_f64()
    ))
}

fn sensitivity_at_specificity(s: &PredictionSet, target: f64) -> f64 {
    let t = threshold_for_specificity(s, target).unwrap();
    rates_from_counts(classify(s, t)).sensitivity.value.unwrap()
}

fn bias_consequence(sc: &Scenario) -> Outcome {
    let cfg = ModelingConfig::default();
    let schema = sc.train_test.schema();
    let proxies: Vec<String> = schema
        .features()
        .iter()
        .filter(|f| f.bias_class != BiasClass::None)
        .map(|f| f.name.clone())
        .collect();
    check!(!proxies.is_empty(), "scenario has no bias-tagged features");

    let eligible = eligible_features(schema);
    check!(
        proxies.iter().all(|p| !eligible.contains(p)),
        "bias-tagged feature eligible for selection"
    );
    let refused = run_modeling(
        &sc.train_test,
        &ModelingConfig {
            force_include: vec![proxies[0].clone()],
            ..cfg.clone()
        },
        42,
    );
    check!(
        matches!(&refused, Err(PipelineError::ProtectedFeature { feature, .. }) if *feature == proxies[0]),
        "forced proxy was not refused"
    );

    let splits = split_train_test(&sc.train_test, &cfg, 42).unwrap();
    let default = run_modeling(&sc.train_test, &cfg, 42).unwrap();
    check!(
        default.features.iter().all(|f| !proxies.contains(f)),
        "default run selected a proxy"
    );
    let mut with_proxies = default.features.clone();
    with_proxies.extend(proxies.iter().cloned());
    let forced = fit_scorer(&splits.fit, &splits.calibration, &with_proxies, &cfg).unwrap();

    let base = sensitivity_at_specificity(&default.scorer.prediction_set(&sc.validation).unwrap(), 0.9);
    let biased = sensitivity_at_specificity(&forced.prediction_set(&sc.validation).unwrap(), 0.9);
    check!(biased > base, "proxies gave {biased:.4} vs {base:.4}");
    Ok(format!(
        "sensitivity at specificity 0.9: default {base:.4}, with proxies {biased:.4}; guard refuses {}",
        proxies[0]
    ))
}

fn drift_monitor() -> Outcome {
    let reference = generate(&GeneratorSpec::new(20_000, 0.3, 61)).unwrap();
    let features: Vec<String> = reference.schema().names().map(str::to_string).collect();
    let same = drift_scan(&reference, &reference, &features).unwrap();
    for (name, f) in &same.features {
        check!(f.psi == 0.0 && f.ks_statistic == Some(0.0), "{name}: {f:?}");
    }
    let psi = psi_from_shares(&[0.5, 0.5], &[0.8, 0.2]).unwrap();
    check!((psi - 0.4159).abs() <= 1e-4, "hand example {psi}");

    let mut spec = GeneratorSpec::new(20_000, 0.3, 62);
    spec.drift_shift.insert("noise_03".into(), 3.0);
    let live = generate(&spec).unwrap();
    let report = drift_scan(&reference, &live, &features).unwrap();
    check!(report.alerts() == ["noise_03"], "alerts {:?}", report.alerts());
    check!(report.worst() == Verdict::Alert, "worst {:?}", report.worst());
    Ok(format!("identical windows stable, hand psi {psi:.4}, one alert on the shifted feature"))
}

fn files_under(dir: &Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let path = e.unwrap().path();
        if path.is_dir() {
            out.extend(files_under(&path));
        } else {
            out.push(path);
        }
    }
    out
}

fn privacy_guarantees(sc: &Scenario) -> Outcome {
    let key = PseudonymizationKey::from_hex(&"5a".repeat(32), table1_noise_scales()).unwrap();
    let anon = anonymize(&sc.validation);
    let (masked, map) = pseudonymize(&anon, &key, 42).map_err(|e| e.to_string())?;

    let root = tempfile::tempdir().unwrap();
    let reports = root.path().join("reports");
    let secrets = root.path().join("secrets");
    std::fs::create_dir_all(&reports).unwrap();
    std::fs::create_dir_all(&secrets).unwrap();
    masked.save_csv(reports.join("validation_pseudonymized.csv")).unwrap();
    masked.schema().save(reports.join("schema.toml")).unwrap();
    let map_path = secrets.join("mask_map.csv");
    map.save(&map_path).unwrap();

    let mut originals: BTreeSet<String> = BTreeSet::new();
    for f in anon.schema().features() {
        if f.privacy_class == loanscreen::data_model::PrivacyClass::QuasiIdentifier
            && f.kind == FeatureKind::Categorical
        {
            for v in anon.column(&f.name).unwrap() {
                if let Value::Symbol(s) = v {
                    originals.insert(s.clone());
                }
            }
        }
    }
    check!(!originals.is_empty(), "no quasi-identifier strings to look for");
    for file in files_under(&reports) {
        let text = std::fs::read_to_string(&file).unwrap();
        for o in &originals {
            check!(!text.contains(o.as_str()), "`{o}` found in {}", file.display());
        }
    }

    let back = re_identify(&masked, &MaskMap::load(&map_path).unwrap()).unwrap();
    for f in anon.schema().features() {
        if f.kind == FeatureKind::Categorical {
            check!(
                back.column(&f.name).unwrap() == anon.column(&f.name).unwrap(),
                "{} not restored",
                f.name
            );
        }
    }
    let (again, _) = pseudonymize(&anon, &key, 42).unwrap();
    let bytes = |p: &Portfolio| {
        let mut b = Vec::new();
        p.write_csv(&mut b).unwrap();
        b
    };
    check!(bytes(&again) == bytes(&masked), "same key produced different output");
    Ok(format!(
        "{} original strings absent from {} artifacts; round trip and determinism hold",
        originals.len(),
        files_under(&reports).len()
    ))
}

fn main() {
    // keep panic messages out of the report lines
    panic::set_hook(Box::new(|_| {}));
    let scenario = std::cell::OnceCell::new();
    let scenario = || {
        scenario.get_or_init(|| {
            let (train_test, validation) = table1_scenario(42).unwrap();
            assert_eq!(validation.kind(), PortfolioKind::Validation);
            Scenario {
                train_test,
                validation,
            }
        })
    };

    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome + '_>)> = vec![
        ("confusion arithmetic", Box::new(confusion_arithmetic)),
        ("skill arithmetic", Box::new(skill_arithmetic)),
        ("brier oracle", Box::new(skill_oracle)),
        ("calibration error machinery", Box::new(ece_machinery)),
        ("boosting correctness", Box::new(boosting_correctness)),
        ("mrmr oracle", Box::new(mrmr_agreement)),
        ("end-to-end synthetic run", Box::new(|| end_to_end(scenario()))),
        ("bias proxy consequence", Box::new(|| bias_consequence(scenario()))),
        ("drift monitor", Box::new(drift_monitor)),
        ("privacy guarantees", Box::new(|| privacy_guarantees(scenario()))),
    ];

    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let result = panic::catch_unwind(AssertUnwindSafe(run))
            .unwrap_or_else(|e| {
                let msg = e
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                Err(format!("panicked: {msg}"))
            });
        match result {
            Ok(detail) => println!("criterion {}: PASS {name} ({detail})", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {}: FAIL {name} ({detail})", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
