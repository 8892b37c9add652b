//! Scoring rules and confusion-matrix rates.
//!
//! * Brier score `BS = mean((f - o)^2)`.
//! * Brier skill score `BSS = 1 - BS / BS_ref`, where the reference forecast
//!   is the evaluated set's own prevalence predicted for every record.
//! * Prevalence, sensitivity, specificity, PPV and NPV at a threshold, with
//!   rates whose denominator is zero reported as absent.

use serde::{Deserialize, Serialize, Serializer};
use thiserror::Error;

use crate::calibration::{
    expected_calibration_error, reliability_bins, BinRule, CalibrationError, PredictionSet,
    ReliabilityDiagram,
};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("prevalence must lie strictly between 0 and 1, got {0}")]
    InvalidPrevalence(f64),
    #[error("reference Brier score must be positive, got {0}")]
    NonPositiveReference(f64),
    #[error("threshold must lie in [0, 1], got {0}")]
    InvalidThreshold(f64),
    #[error("target rate must lie in (0, 1], got {0}")]
    InvalidTarget(f64),
    #[error("no positive outcomes to set a sensitivity threshold")]
    NoPositives,
    #[error("no negative outcomes to set a specificity threshold")]
    NoNegatives,
    #[error(transparent)]
    Calibration(#[from] CalibrationError),
}

pub type Result<T> = std::result::Result<T, MetricsError>;

/// Decimal places used for rates and scores in serialized reports.
pub const REPORT_DECIMALS: i32 = 4;

fn round_report(v: f64) -> f64 {
    let scale = 10f64.powi(REPORT_DECIMALS);
    (v * scale).round() / scale
}

fn ser_rounded<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_f64(round_report(*v))
}

fn ser_rounded_opt<S: Serializer>(v: &Option<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
    match v {
        Some(v) => s.serialize_some(&round_report(*v)),
        None => s.serialize_none(),
    }
}

pub fn brier_score(s: &PredictionSet) -> f64 {
    squared_error_sum(s.predictions().iter().copied(), s.outcomes()) / s.len() as f64
}

fn squared_error_sum(f: impl Iterator<Item = f64>, o: &[u8]) -> f64 {
    f.zip(o).map(|(f, &o)| (f - o as f64).powi(2)).sum()
}

/// Brier score of the constant forecast `p` on data with base rate `p`.
pub fn reference_brier(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(MetricsError::InvalidPrevalence(p));
    }
    Ok(p * (1.0 - p))
}

pub fn brier_skill_score(bs: f64, bs_ref: f64) -> Result<f64> {
    if !(bs_ref > 0.0) {
        return Err(MetricsError::NonPositiveReference(bs_ref));
    }
    Ok(1.0 - bs / bs_ref)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn positives(&self) -> u64 {
        self.tp + self.fn_
    }

    pub fn negatives(&self) -> u64 {
        self.tn + self.fp
    }
}

/// Predicted positive iff `f >= threshold`.
pub fn classify(s: &PredictionSet, threshold: f64) -> ConfusionCounts {
    let mut c = ConfusionCounts::default();
    for (&f, &o) in s.predictions().iter().zip(s.outcomes()) {
        match (f >= threshold, o == 1) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    c
}

/// A ratio of counts; `value` is absent when the denominator is zero.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Rate {
    #[serde(serialize_with = "ser_rounded_opt")]
    pub value: Option<f64>,
    pub numerator: u64,
    pub denominator: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

impl Rate {
    fn new(numerator: u64, denominator: u64, what: &str) -> Self {
        if denominator == 0 {
            Rate {
                value: None,
                numerator,
                denominator,
                reason: Some(format!("no {what}")),
            }
        } else {
            Rate {
                value: Some(numerator as f64 / denominator as f64),
                numerator,
                denominator,
                reason: None,
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Rates {
    pub prevalence: Rate,
    pub sensitivity: Rate,
    pub specificity: Rate,
    pub ppv: Rate,
    pub npv: Rate,
}

pub fn rates_from_counts(c: ConfusionCounts) -> Rates {
    Rates {
        prevalence: Rate::new(c.positives(), c.total(), "records"),
        sensitivity: Rate::new(c.tp, c.positives(), "actual positives"),
        specificity: Rate::new(c.tn, c.negatives(), "actual negatives"),
        ppv: Rate::new(c.tp, c.tp + c.fp, "predicted positives"),
        npv: Rate::new(c.tn, c.tn + c.fn_, "predicted negatives"),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferencePolicy {
    DatasetPrevalenceConstant,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SkillReport {
    #[serde(serialize_with = "ser_rounded")]
    pub bs: f64,
    #[serde(serialize_with = "ser_rounded")]
    pub bs_ref: f64,
    /// Absent when the evaluated set holds a single class.
    #[serde(serialize_with = "ser_rounded_opt")]
    pub bss: Option<f64>,
    pub reference_policy: ReferencePolicy,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvaluationReport {
    pub n: usize,
    pub threshold: f64,
    pub counts: ConfusionCounts,
    pub rates: Rates,
    pub skill: SkillReport,
    #[serde(serialize_with = "ser_rounded")]
    pub ece: f64,
    pub ece_bins: usize,
    #[serde(skip)]
    pub diagram: ReliabilityDiagram,
}

impl EvaluationReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

pub fn evaluate(s: &PredictionSet, threshold: f64, rule: BinRule) -> Result<EvaluationReport> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(MetricsError::InvalidThreshold(threshold));
    }
    let counts = classify(s, threshold);
    let rates = rates_from_counts(counts);
    let bs = brier_score(s);
    let prevalence = counts.positives() as f64 / counts.total() as f64;
    // same summation as `bs`, so the reference forecast scores BSS = 0 exactly
    let bs_ref =
        squared_error_sum(std::iter::repeat_n(prevalence, s.len()), s.outcomes()) / s.len() as f64;
    let bss = (bs_ref > 0.0).then(|| 1.0 - bs / bs_ref);
    let diagram = reliability_bins(s, rule)?;
    Ok(EvaluationReport {
        n: s.len(),
        threshold,
        counts,
        rates,
        skill: SkillReport {
            bs,
            bs_ref,
            bss,
            reference_policy: ReferencePolicy::DatasetPrevalenceConstant,
        },
        ece: expected_calibration_error(&diagram),
        ece_bins: diagram.bins.len(),
        diagram,
    })
}

/// Largest threshold whose sensitivity on `s` is at least `target`.
pub fn threshold_for_sensitivity(s: &PredictionSet, target: f64) -> Result<f64> {
    if !(target > 0.0 && target <= 1.0) {
        return Err(MetricsError::InvalidTarget(target));
    }
    let mut pos: Vec<f64> = s
        .predictions()
        .iter()
        .zip(s.outcomes())
        .filter(|(_, &o)| o == 1)
        .map(|(&f, _)| f)
        .collect();
    if pos.is_empty() {
        return Err(MetricsError::NoPositives);
    }
    pos.sort_by(|a, b| b.total_cmp(a));
    let total = pos.len();
    let needed = (1..=total)
        .find(|&m| m as f64 / total as f64 >= target)
        .unwrap_or(total);
    Ok(pos[needed - 1])
}

/// Smallest threshold whose specificity on `s` is at least `target`.
pub fn threshold_for_specificity(s: &PredictionSet, target: f64) -> Result<f64> {
    if !(target > 0.0 && target <= 1.0) {
        return Err(MetricsError::InvalidTarget(target));
    }
    let mut neg: Vec<f64> = s
        .predictions()
        .iter()
        .zip(s.outcomes())
        .filter(|(_, &o)| o == 0)
        .map(|(&f, _)| f)
        .collect();
    if neg.is_empty() {
        return Err(MetricsError::NoNegatives);
    }
    neg.sort_by(f64::total_cmp);
    let total = neg.len();
    let needed = (1..=total)
        .find(|&m| m as f64 / total as f64 >= target)
        .unwrap_or(total);
    // everything up to and including the needed-th smallest negative falls
    // below the threshold
    Ok(neg[needed - 1].next_up())
}
