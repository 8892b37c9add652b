//! Drift between a training distribution and deployment batches.
//!
//! Each feature gets a population stability index,
//! `PSI = sum_b (q_b - p_b) ln(q_b / p_b)`, where `p_b` and `q_b` are the
//! reference and current shares of bin `b`, floored at `1e-6` before the log.
//! Numeric bins are cut at reference order statistics (so PSI depends on
//! ranks only); missing values get a bin of their own. Categoricals bin by
//! level, with unseen levels pooled. Numerics also get the two-sample
//! Kolmogorov-Smirnov statistic.
//!
//! Bin edges and reference shares form a [`DriftBaseline`] that is frozen
//! alongside the model, so later scans stay comparable.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data_model::{DataError, FeatureKind, Portfolio, Value};

#[derive(Debug, Error)]
pub enum MonitorError {
    #[error("sample is empty")]
    Empty,
    #[error("at least 2 bins are needed, got {0}")]
    TooFewBins(usize),
    #[error("share vectors differ in length ({0} vs {1})")]
    ShareLengthMismatch(usize, usize),
    #[error("feature `{0}` is not numeric")]
    NonNumeric(String),
    #[error("feature `{0}` is missing from the {1} portfolio")]
    MissingFeature(String, &'static str),
    #[error("feature `{feature}` has kind {found} but the baseline expects {expected}")]
    KindMismatch {
        feature: String,
        expected: String,
        found: String,
    },
    #[error("drift thresholds must satisfy 0 < warning <= alert, got {warning} and {alert}")]
    InvalidThresholds { warning: f64, alert: f64 },
    #[error(transparent)]
    Data(#[from] DataError),
}

pub type Result<T> = std::result::Result<T, MonitorError>;

pub const SHARE_FLOOR: f64 = 1e-6;
pub const DEFAULT_BINS: usize = 10;
/// Bin label for categorical levels absent from the reference.
pub const UNSEEN_LEVEL: &str = "<unseen>";

/// PSI between two share vectors over the same bins.
pub fn psi_from_shares(reference: &[f64], current: &[f64]) -> Result<f64> {
    if reference.len() != current.len() {
        return Err(MonitorError::ShareLengthMismatch(reference.len(), current.len()));
    }
    Ok(reference
        .iter()
        .zip(current)
        .map(|(&p, &q)| {
            let (p, q) = (p.max(SHARE_FLOOR), q.max(SHARE_FLOOR));
            (q - p) * (q / p).ln()
        })
        .sum::<f64>()
        .max(0.0))
}

/// Interior cut points at reference order statistics `sorted[i * n / bins]`,
/// deduplicated. Bin of `x` = number of cut points `<= x`.
fn quantile_edges(reference: &[f64], bins: usize) -> Vec<f64> {
    let mut sorted: Vec<f64> = reference.iter().copied().filter(|x| !x.is_nan()).collect();
    if sorted.is_empty() {
        return Vec::new();
    }
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let mut edges: Vec<f64> = (1..bins).map(|i| sorted[i * n / bins]).collect();
    edges.dedup();
    // a cut at the minimum leaves the first bin empty for everyone
    if edges.first() == Some(&sorted[0]) {
        edges.remove(0);
    }
    edges
}

fn numeric_shares(values: &[f64], edges: &[f64]) -> Vec<f64> {
    // last slot holds missing values
    let mut counts = vec![0usize; edges.len() + 2];
    for &x in values {
        let b = if x.is_nan() {
            edges.len() + 1
        } else {
            edges.partition_point(|&e| e <= x)
        };
        counts[b] += 1;
    }
    to_shares(&counts)
}

fn to_shares(counts: &[usize]) -> Vec<f64> {
    let n: usize = counts.iter().sum();
    counts.iter().map(|&c| c as f64 / n as f64).collect()
}

/// PSI of `current` against `reference`, binned at reference quantiles.
pub fn population_stability_index(reference: &[f64], current: &[f64], bins: usize) -> Result<f64> {
    if reference.is_empty() || current.is_empty() {
        return Err(MonitorError::Empty);
    }
    if bins < 2 {
        return Err(MonitorError::TooFewBins(bins));
    }
    let edges = quantile_edges(reference, bins);
    psi_from_shares(&numeric_shares(reference, &edges), &numeric_shares(current, &edges))
}

/// Largest gap between the empirical CDFs of the two samples, ignoring NaN.
pub fn ks_statistic(reference: &[f64], current: &[f64]) -> Result<f64> {
    let sorted = |v: &[f64]| {
        let mut s: Vec<f64> = v.iter().copied().filter(|x| !x.is_nan()).collect();
        s.sort_by(f64::total_cmp);
        s
    };
    let (a, b) = (sorted(reference), sorted(current));
    ks_sorted(&a, &b)
}

fn ks_sorted(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(MonitorError::Empty);
    }
    let (mut i, mut j, mut d) = (0, 0, 0.0f64);
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / a.len() as f64 - j as f64 / b.len() as f64).abs());
    }
    Ok(d)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DriftThresholds {
    pub warning: f64,
    pub alert: f64,
}

impl Default for DriftThresholds {
    fn default() -> Self {
        DriftThresholds {
            warning: 0.1,
            alert: 0.25,
        }
    }
}

impl DriftThresholds {
    pub fn validate(&self) -> Result<()> {
        if self.warning > 0.0 && self.warning <= self.alert && self.alert.is_finite() {
            Ok(())
        } else {
            Err(MonitorError::InvalidThresholds {
                warning: self.warning,
                alert: self.alert,
            })
        }
    }

    pub fn verdict(&self, psi: f64) -> Verdict {
        if psi >= self.alert {
            Verdict::Alert
        } else if psi >= self.warning {
            Verdict::Warning
        } else {
            Verdict::Stable
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Stable,
    Warning,
    Alert,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum FeatureBaseline {
    Numeric {
        edges: Vec<f64>,
        shares: Vec<f64>,
        /// Sorted non-missing reference values, for KS.
        sample: Vec<f64>,
    },
    Categorical {
        levels: Vec<String>,
        /// One share per level, then unseen, then missing.
        shares: Vec<f64>,
    },
}

/// Frozen reference distribution for a set of features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftBaseline {
    pub window: String,
    pub bins: usize,
    pub features: BTreeMap<String, FeatureBaseline>,
}

fn numbers(values: &[&Value]) -> Vec<f64> {
    values
        .iter()
        .map(|v| v.as_number().unwrap_or(f64::NAN))
        .collect()
}

fn level_shares(values: &[&Value], levels: &[String]) -> Vec<f64> {
    let mut counts = vec![0usize; levels.len() + 2];
    for v in values {
        let b = match v.as_symbol() {
            None => levels.len() + 1,
            Some(s) => levels
                .binary_search_by(|l| l.as_str().cmp(s))
                .unwrap_or(levels.len()),
        };
        counts[b] += 1;
    }
    to_shares(&counts)
}

fn is_numeric(kind: FeatureKind) -> bool {
    matches!(kind, FeatureKind::Numeric | FeatureKind::Boolean)
}

impl DriftBaseline {
    pub fn fit(
        reference: &Portfolio,
        features: &[String],
        bins: usize,
        window: impl Into<String>,
    ) -> Result<Self> {
        if bins < 2 {
            return Err(MonitorError::TooFewBins(bins));
        }
        if reference.is_empty() && !features.is_empty() {
            return Err(MonitorError::Empty);
        }
        let mut out = BTreeMap::new();
        for name in features {
            let spec = reference
                .schema()
                .get(name)
                .ok_or_else(|| MonitorError::MissingFeature(name.clone(), "reference"))?;
            let values = reference.column(name)?;
            let baseline = if is_numeric(spec.kind) {
                let x = numbers(&values);
                let edges = quantile_edges(&x, bins);
                let shares = numeric_shares(&x, &edges);
                let mut sample: Vec<f64> = x.into_iter().filter(|v| !v.is_nan()).collect();
                sample.sort_by(f64::total_cmp);
                FeatureBaseline::Numeric {
                    edges,
                    shares,
                    sample,
                }
            } else {
                let mut levels: Vec<String> = values
                    .iter()
                    .filter_map(|v| v.as_symbol().map(str::to_string))
                    .collect();
                levels.sort();
                levels.dedup();
                let shares = level_shares(&values, &levels);
                FeatureBaseline::Categorical { levels, shares }
            };
            out.insert(name.clone(), baseline);
        }
        Ok(DriftBaseline {
            window: window.into(),
            bins,
            features: out,
        })
    }

    pub fn scan(
        &self,
        live: &Portfolio,
        window: impl Into<String>,
        thresholds: DriftThresholds,
    ) -> Result<DriftReport> {
        thresholds.validate()?;
        let entries: Vec<(String, FeatureDrift)> = self
            .features
            .par_iter()
            .map(|(name, baseline)| {
                let spec = live
                    .schema()
                    .get(name)
                    .ok_or_else(|| MonitorError::MissingFeature(name.clone(), "current"))?;
                let values = live.column(name)?;
                let (psi, ks) = match baseline {
                    FeatureBaseline::Numeric {
                        edges,
                        shares,
                        sample,
                    } => {
                        if !is_numeric(spec.kind) {
                            return Err(MonitorError::KindMismatch {
                                feature: name.clone(),
                                expected: "numeric".into(),
                                found: spec.kind.to_string(),
                            });
                        }
                        let x = numbers(&values);
                        let psi = psi_from_shares(shares, &numeric_shares(&x, edges))?;
                        let mut cur: Vec<f64> = x.into_iter().filter(|v| !v.is_nan()).collect();
                        cur.sort_by(f64::total_cmp);
                        (psi, ks_sorted(sample, &cur).ok())
                    }
                    FeatureBaseline::Categorical { levels, shares } => {
                        if spec.kind != FeatureKind::Categorical {
                            return Err(MonitorError::KindMismatch {
                                feature: name.clone(),
                                expected: "categorical".into(),
                                found: spec.kind.to_string(),
                            });
                        }
                        (psi_from_shares(shares, &level_shares(&values, levels))?, None)
                    }
                };
                Ok((
                    name.clone(),
                    FeatureDrift {
                        psi,
                        ks_statistic: ks,
                        verdict: thresholds.verdict(psi),
                    },
                ))
            })
            .collect::<Result<_>>()?;
        Ok(DriftReport {
            reference_window: self.window.clone(),
            current_window: window.into(),
            thresholds,
            features: entries.into_iter().collect(),
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("baseline serializes")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureDrift {
    pub psi: f64,
    /// Absent for categoricals or when a window has no numeric values.
    pub ks_statistic: Option<f64>,
    pub verdict: Verdict,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftReport {
    pub reference_window: String,
    pub current_window: String,
    pub thresholds: DriftThresholds,
    pub features: BTreeMap<String, FeatureDrift>,
}

impl DriftReport {
    pub fn worst(&self) -> Verdict {
        self.features
            .values()
            .map(|f| f.verdict)
            .max()
            .unwrap_or(Verdict::Stable)
    }

    pub fn alerts(&self) -> Vec<&str> {
        self.features
            .iter()
            .filter(|(_, f)| f.verdict == Verdict::Alert)
            .map(|(n, _)| n.as_str())
            .collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Fits a baseline on `train` with default bins and scans `live`.
pub fn drift_scan(train: &Portfolio, live: &Portfolio, features: &[String]) -> Result<DriftReport> {
    DriftBaseline::fit(train, features, DEFAULT_BINS, "reference")?.scan(
        live,
        "current",
        DriftThresholds::default(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_bin_hand_example() {
        let psi = psi_from_shares(&[0.5, 0.5], &[0.8, 0.2]).unwrap();
        let expected = 0.3 * 1.6f64.ln() + (-0.3) * 0.4f64.ln();
        assert!((psi - expected).abs() < 1e-12);
        assert!((psi - 0.4159).abs() < 1e-4);
    }

    #[test]
    fn identical_samples() {
        let x: Vec<f64> = (0..200).map(|i| (i as f64 * 0.37).sin()).collect();
        assert_eq!(population_stability_index(&x, &x, 10).unwrap(), 0.0);
        assert_eq!(ks_statistic(&x, &x).unwrap(), 0.0);
    }

    #[test]
    fn disjoint_supports() {
        let a = vec![0.0; 50];
        let b = vec![1.0; 50];
        assert_eq!(ks_statistic(&a, &b).unwrap(), 1.0);
        let r: Vec<f64> = (0..100).map(|i| i as f64).collect();
        let c: Vec<f64> = (0..100).map(|i| 1000.0 + i as f64).collect();
        let psi = population_stability_index(&r, &c, 10).unwrap();
        // brute force: reference spread over 10 bins, current all in the top one
        let mut q = vec![SHARE_FLOOR; 10];
        q[9] = 1.0;
        let brute: f64 = (0..10)
            .map(|b| {
                let p: f64 = 0.1;
                (q[b] - p) * (q[b] / p).ln()
            })
            .sum();
        assert!((psi - brute).abs() < 1e-9, "{psi} vs {brute}");
        assert!(psi > 1.0);
    }

    #[test]
    fn ks_enumerated_example() {
        assert_eq!(ks_statistic(&[1.0, 2.0, 3.0, 4.0], &[3.0, 4.0, 5.0, 6.0]).unwrap(), 0.5);
    }

    #[test]
    fn errors() {
        assert!(matches!(population_stability_index(&[], &[1.0], 10), Err(MonitorError::Empty)));
        assert!(matches!(
            population_stability_index(&[1.0], &[1.0], 1),
            Err(MonitorError::TooFewBins(1))
        ));
        assert!(ks_statistic(&[], &[1.0]).is_err());
        assert!(DriftThresholds { warning: 0.3, alert: 0.2 }.validate().is_err());
    }

    #[test]
    fn verdict_boundaries() {
        let t = DriftThresholds::default();
        assert_eq!(t.verdict(0.0999), Verdict::Stable);
        assert_eq!(t.verdict(0.1), Verdict::Warning);
        assert_eq!(t.verdict(0.25), Verdict::Alert);
    }
}
