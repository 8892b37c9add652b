//! Model-building stages chained together: split, balance, select, train,
//! calibrate, pick a threshold and evaluate.
//!
//! The train-test portfolio is cut into fit, calibration and test parts by
//! stratified splits. Only the fit part is rebalanced. Features are chosen by
//! mRMR on the fit part from the eligible (unbiased, non-identifying, common)
//! features; forced features are added first and all of them pass the
//! protected-feature guard before any training happens.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calibration::{
    fit_calibrator, BinRule, CalibrationError, CalibrationMethod, Calibrator, PredictionSet,
};
use crate::data_model::{
    balance_by_undersampling, stratified_split, BiasClass, DataError, FeatureSchema, Portfolio,
    PrivacyClass,
};
use crate::feature_select::{eligible_features, mrmr_select, BimoptSelection, SelectError};
use crate::gbdt::{self, BoostedModel, GbdtError, TrainConfig};
use crate::metrics::{self, evaluate, EvaluationReport, MetricsError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("feature `{feature}` may not be used for training: {reason}")]
    ProtectedFeature { feature: String, reason: String },
    #[error("invalid pipeline config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Select(#[from] SelectError),
    #[error(transparent)]
    Gbdt(#[from] GbdtError),
    #[error(transparent)]
    Calibration(#[from] CalibrationError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

pub type Result<T> = std::result::Result<T, PipelineError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdPolicy {
    /// Use this probability cutoff.
    Fixed(f64),
    /// Largest cutoff reaching this sensitivity on the calibration split.
    TargetSensitivity(f64),
}

impl Default for ThresholdPolicy {
    fn default() -> Self {
        ThresholdPolicy::TargetSensitivity(0.9)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelingConfig {
    /// Number of features to select, forced ones included.
    pub k: usize,
    /// Features placed ahead of the mRMR picks; still subject to the guard.
    pub force_include: Vec<String>,
    /// Positive share of the fit split after undersampling; none keeps it.
    pub balance_target: Option<f64>,
    pub calibration_fraction: f64,
    pub test_fraction: f64,
    pub train: TrainConfig,
    pub calibration: CalibrationMethod,
    pub threshold: ThresholdPolicy,
    pub bin_rule: BinRule,
    /// Base rate of the population the model will score, when it differs
    /// from the train-test portfolio.
    pub deployment_prevalence: Option<f64>,
}

impl Default for ModelingConfig {
    fn default() -> Self {
        ModelingConfig {
            k: crate::feature_select::DEFAULT_K,
            force_include: Vec::new(),
            balance_target: Some(0.5),
            calibration_fraction: 0.2,
            test_fraction: 0.2,
            train: TrainConfig::default(),
            calibration: CalibrationMethod::default(),
            threshold: ThresholdPolicy::default(),
            bin_rule: BinRule::default(),
            deployment_prevalence: None,
        }
    }
}

impl ModelingConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(PipelineError::InvalidConfig(m.to_string()));
        if self.k == 0 {
            return bad("k must be positive");
        }
        let frac = |f: f64| f > 0.0 && f < 1.0;
        if !frac(self.calibration_fraction) || !frac(self.test_fraction) {
            return bad("split fractions must lie in (0, 1)");
        }
        if self.calibration_fraction + self.test_fraction >= 1.0 {
            return bad("calibration and test fractions leave nothing to fit on");
        }
        if let Some(t) = self.balance_target {
            if !frac(t) {
                return bad("balance_target must lie in (0, 1)");
            }
        }
        match self.threshold {
            ThresholdPolicy::Fixed(t) if !(0.0..=1.0).contains(&t) => {
                return bad("fixed threshold must lie in [0, 1]")
            }
            ThresholdPolicy::TargetSensitivity(t) if !(t > 0.0 && t <= 1.0) => {
                return bad("target sensitivity must lie in (0, 1]")
            }
            _ => {}
        }
        if let Some(p) = self.deployment_prevalence {
            if !frac(p) {
                return bad("deployment_prevalence must lie in (0, 1)");
            }
        }
        self.train.validate()?;
        Ok(())
    }
}

/// Refuses direct identifiers and bias-tagged features.
pub fn ensure_protected_free(schema: &FeatureSchema, features: &[String]) -> Result<()> {
    for name in features {
        let spec = schema
            .get(name)
            .ok_or_else(|| DataError::UnknownFeature(name.clone()))?;
        let reason = if spec.privacy_class == PrivacyClass::DirectIdentifier {
            Some("direct identifier".to_string())
        } else if spec.bias_class != BiasClass::None {
            Some(format!(
                "bias class {}",
                serde_json::to_string(&spec.bias_class).expect("enum serializes")
            ))
        } else {
            None
        };
        if let Some(reason) = reason {
            return Err(PipelineError::ProtectedFeature {
                feature: name.clone(),
                reason,
            });
        }
    }
    Ok(())
}

/// Boosted model, calibration map and decision threshold.
///
/// Calibrated probabilities match the positive share of the calibration
/// split. When the scored population has a different base rate, the odds are
/// rescaled by the ratio of the two prior odds; the threshold moves with them
/// so the same records are flagged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoringModel {
    pub model: BoostedModel,
    pub calibrator: Calibrator,
    /// Cutoff on the probability scale currently in force.
    pub threshold: f64,
    /// Positive share the calibrator was fitted on.
    pub calibration_prevalence: f64,
    /// Base rate the outputs are rescaled to, if any.
    #[serde(default)]
    pub target_prevalence: Option<f64>,
}

fn odds(p: f64) -> f64 {
    p / (1.0 - p)
}

/// Multiplies the odds of `p` by `ratio`; keeps 0 and 1 fixed.
fn rescale_odds(p: f64, ratio: f64) -> f64 {
    if p <= 0.0 || p >= 1.0 {
        return p;
    }
    let o = odds(p) * ratio;
    o / (1.0 + o)
}

impl ScoringModel {
    fn odds_ratio(&self) -> f64 {
        match self.target_prevalence {
            Some(t) => odds(t) / odds(self.calibration_prevalence),
            None => 1.0,
        }
    }

    /// Copy whose outputs are calibrated for a population with base rate
    /// `prevalence`. Classification decisions are unchanged.
    pub fn for_prevalence(&self, prevalence: f64) -> Result<ScoringModel> {
        if !(prevalence > 0.0 && prevalence < 1.0) {
            return Err(PipelineError::InvalidConfig(format!(
                "target prevalence must lie in (0, 1), got {prevalence}"
            )));
        }
        let base = ScoringModel {
            threshold: rescale_odds(self.threshold, 1.0 / self.odds_ratio()),
            target_prevalence: None,
            ..self.clone()
        };
        let mut out = ScoringModel {
            target_prevalence: Some(prevalence),
            ..base
        };
        out.threshold = rescale_odds(out.threshold, out.odds_ratio());
        Ok(out)
    }

    /// The model as used on the deployment population named in `cfg`.
    pub fn deployed(&self, cfg: &ModelingConfig) -> Result<ScoringModel> {
        match cfg.deployment_prevalence {
            Some(p) => self.for_prevalence(p),
            None => Ok(self.clone()),
        }
    }

    pub fn calibrated(&self, p: &Portfolio) -> Result<Vec<f64>> {
        let ratio = self.odds_ratio();
        Ok(self
            .model
            .predict_proba_portfolio(p)?
            .into_iter()
            .map(|f| rescale_odds(self.calibrator.apply(f), ratio))
            .collect())
    }

    /// Calibrated probabilities paired with the portfolio's labels.
    pub fn prediction_set(&self, p: &Portfolio) -> Result<PredictionSet> {
        Ok(PredictionSet::new(self.calibrated(p)?, p.labels()?)?)
    }

    pub fn evaluate(&self, p: &Portfolio, rule: BinRule) -> Result<EvaluationReport> {
        Ok(evaluate(&self.prediction_set(p)?, self.threshold, rule)?)
    }
}

pub struct Splits {
    pub fit: Portfolio,
    pub calibration: Portfolio,
    pub test: Portfolio,
}

pub fn split_train_test(p: &Portfolio, cfg: &ModelingConfig, seed: u64) -> Result<Splits> {
    let (rest, test) = stratified_split(p, cfg.test_fraction, seed)?;
    let cal_share = cfg.calibration_fraction / (1.0 - cfg.test_fraction);
    let (fit, calibration) = stratified_split(&rest, cal_share, seed.wrapping_add(1))?;
    let fit = match cfg.balance_target {
        Some(t) => balance_by_undersampling(&fit, t, seed.wrapping_add(2))?,
        None => fit,
    };
    Ok(Splits {
        fit,
        calibration,
        test,
    })
}

/// Forced features followed by mRMR picks from the eligible remainder.
pub fn select_features(fit: &Portfolio, cfg: &ModelingConfig) -> Result<(Vec<String>, BimoptSelection)> {
    ensure_protected_free(fit.schema(), &cfg.force_include)?;
    let mut forced: Vec<String> = Vec::new();
    for f in &cfg.force_include {
        if !forced.contains(f) {
            forced.push(f.clone());
        }
    }
    if forced.len() > cfg.k {
        return Err(PipelineError::InvalidConfig(format!(
            "{} forced features exceed k = {}",
            forced.len(),
            cfg.k
        )));
    }
    let candidates: Vec<String> = eligible_features(fit.schema())
        .into_iter()
        .filter(|f| !forced.contains(f))
        .collect();
    let wanted = cfg.k - forced.len();
    let selection = if wanted == 0 {
        BimoptSelection {
            selected: Vec::new(),
            steps: Vec::new(),
            k: 0,
        }
    } else {
        mrmr_select(fit, &candidates, wanted)?
    };
    let mut features = forced;
    features.extend(selection.selected.iter().cloned());
    ensure_protected_free(fit.schema(), &features)?;
    Ok((features, selection))
}

/// Trains on `fit`, calibrates on `calibration` and sets the threshold.
/// Performs no feature guard.
pub fn fit_scorer(
    fit: &Portfolio,
    calibration: &Portfolio,
    features: &[String],
    cfg: &ModelingConfig,
) -> Result<ScoringModel> {
    let model = gbdt::train(fit, features, &cfg.train)?;
    let raw = PredictionSet::new(model.predict_proba_portfolio(calibration)?, calibration.labels()?)?;
    let calibrator = fit_calibrator(&raw, cfg.calibration)?;
    let threshold = match cfg.threshold {
        ThresholdPolicy::Fixed(t) => t,
        ThresholdPolicy::TargetSensitivity(target) => {
            metrics::threshold_for_sensitivity(&calibrator.apply_set(&raw), target)?
        }
    };
    Ok(ScoringModel {
        model,
        calibrator,
        threshold,
        calibration_prevalence: calibration.prevalence().expect("labels checked above"),
        target_prevalence: None,
    })
}

pub struct ModelingRun {
    pub features: Vec<String>,
    pub selection: BimoptSelection,
    pub scorer: ScoringModel,
    pub fit_records: usize,
    pub calibration_records: usize,
    /// Held-out part of the train-test portfolio.
    pub test_report: EvaluationReport,
}

pub fn run_modeling(train_test: &Portfolio, cfg: &ModelingConfig, seed: u64) -> Result<ModelingRun> {
    cfg.validate()?;
    let splits = split_train_test(train_test, cfg, seed)?;
    let (features, selection) = select_features(&splits.fit, cfg)?;
    let scorer = fit_scorer(&splits.fit, &splits.calibration, &features, cfg)?;
    let test_report = scorer.evaluate(&splits.test, cfg.bin_rule)?;
    Ok(ModelingRun {
        features,
        selection,
        scorer,
        fit_records: splits.fit.len(),
        calibration_records: splits.calibration.len(),
        test_report,
    })
}
