//! Builders shared by the integration tests.
#![allow(dead_code)]

use loanscreen::data_model::{
    FeatureKind, FeatureSchema, FeatureSpec, LoanRecord, Outcome, Portfolio, PortfolioKind, Value,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Portfolio from named columns and labels.
pub fn portfolio(columns: Vec<(String, FeatureKind, Vec<Value>)>, labels: &[u8]) -> Portfolio {
    let schema = FeatureSchema::new(
        columns
            .iter()
            .map(|(n, k, _)| FeatureSpec::new(n.clone(), *k))
            .collect(),
    )
    .unwrap();
    let records = labels
        .iter()
        .enumerate()
        .map(|(i, &l)| LoanRecord {
            record_id: format!("r{i:05}"),
            values: columns.iter().map(|c| c.2[i].clone()).collect(),
            outcome: Outcome::from_label(l),
        })
        .collect();
    Portfolio::new(schema, records, PortfolioKind::Synthetic).unwrap()
}

/// Random mixed-type portfolio with coarse values so that ties are common.
/// Both classes are always present.
pub fn random_portfolio(seed: u64, n: usize, n_features: usize, missing_rate: f64) -> Portfolio {
    let mut r = rng(seed);
    let labels: Vec<u8> = (0..n)
        .map(|i| if i < 2 { i as u8 } else { r.random_bool(0.4) as u8 })
        .collect();
    let columns = (0..n_features)
        .map(|j| {
            let categorical = r.random_bool(0.25);
            let levels = r.random_range(2..8u32);
            let skew = r.random_range(0.0..1.5);
            let values = labels
                .iter()
                .map(|&y| {
                    if r.random_bool(missing_rate) {
                        return Value::Missing;
                    }
                    let base = r.random_range(0..levels) as f64 + skew * y as f64;
                    if categorical {
                        Value::Symbol(format!("c{}", base.round() as i64))
                    } else {
                        Value::Number((base * 2.0).round() / 2.0)
                    }
                })
                .collect();
            let kind = if categorical {
                FeatureKind::Categorical
            } else {
                FeatureKind::Numeric
            };
            (format!("f{j:02}"), kind, values)
        })
        .collect();
    portfolio(columns, &labels)
}

/// Numeric portfolio where the label depends on the first two features.
pub fn logistic_portfolio(seed: u64, n: usize, n_features: usize) -> Portfolio {
    let mut r = rng(seed);
    let xs: Vec<Vec<f64>> = (0..n_features)
        .map(|_| (0..n).map(|_| r.random_range(-2.0..2.0)).collect())
        .collect();
    let labels: Vec<u8> = (0..n)
        .map(|i| {
            let m = 1.5 * xs[0][i] - xs[1 % n_features][i];
            let p = 1.0 / (1.0 + (-m).exp());
            if i < 2 {
                i as u8
            } else {
                r.random_bool(p) as u8
            }
        })
        .collect();
    let columns = xs
        .into_iter()
        .enumerate()
        .map(|(j, col)| {
            (
                format!("x{j}"),
                FeatureKind::Numeric,
                col.into_iter().map(Value::Number).collect(),
            )
        })
        .collect();
    portfolio(columns, &labels)
}
