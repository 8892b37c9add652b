//! One function per subcommand. Each reads its inputs from the configured
//! paths, so stages can be run separately or chained by `pipeline`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use loanscreen::data_model::{ingest_csv, FeatureSpec};
use loanscreen::{Availability, BiasClass, FeatureSchema, PortfolioKind, PrivacyClass};
use loanscreen::feature_select::{eligible_features, SelectionStep};
use loanscreen::metrics::EvaluationReport;
use loanscreen::monitor::{DriftBaseline, DriftReport};
use loanscreen::pipeline::{
    ensure_protected_free, fit_scorer, select_features, split_train_test, ModelingConfig,
    ScoringModel,
};
use loanscreen::privacy::{anonymize, pseudonymize, MaskMap, PseudonymizationKey};
use loanscreen::synthgen::{table1_scenario_with, table1_spec};
use loanscreen::Portfolio;
use serde::{Deserialize, Serialize};

use crate::artifacts::{file_sha256, write_bytes, write_csv, write_report, Meta};
use crate::config::PipelineConfig;
use crate::CliError;

const TRAIN_TEST: &str = "train_test";
const VALIDATION: &str = "validation";
const LIVE: &str = "live";
const WINDOWS: [&str; 3] = [TRAIN_TEST, VALIDATION, LIVE];
const PSEUDO_SCHEMA: &str = "schema.pseudonymized.toml";

const SIMULATION_REPORT: &str = "simulation.json";
const ANONYMIZATION_REPORT: &str = "anonymization.json";
const SELECTION_REPORT: &str = "selection.json";
const EVALUATION_REPORT: &str = "evaluation.json";
const DRIFT_REPORT: &str = "drift.json";

/// Exit status of a successful command.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Done,
    DriftAlert,
}

fn raw_path(cfg: &PipelineConfig, window: &str) -> PathBuf {
    cfg.paths.data.join(format!("{window}.csv"))
}

fn pseudo_path(cfg: &PipelineConfig, window: &str) -> PathBuf {
    cfg.paths.data.join(format!("{window}.pseudonymized.csv"))
}

fn report_path(cfg: &PipelineConfig, name: &str) -> PathBuf {
    cfg.paths.reports.join(name)
}

fn kind_of(window: &str) -> PortfolioKind {
    if window == TRAIN_TEST {
        PortfolioKind::TrainTest
    } else {
        PortfolioKind::Validation
    }
}

fn require(path: &Path) -> Result<(), CliError> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::MissingInput(path.display().to_string()))
    }
}

fn load_window(path: &Path, schema: &FeatureSchema, window: &str) -> Result<Portfolio, CliError> {
    require(path)?;
    let kind = kind_of(window);
    Ok(ingest_csv(path, &schema.for_kind(kind), kind)?)
}

fn load_schema(path: &Path) -> Result<FeatureSchema, CliError> {
    require(path)?;
    Ok(FeatureSchema::load(path)?)
}

fn pseudo_schema(cfg: &PipelineConfig) -> Result<FeatureSchema, CliError> {
    load_schema(&cfg.paths.data.join(PSEUDO_SCHEMA))
}

fn modeling(cfg: &PipelineConfig) -> ModelingConfig {
    let mut m = cfg.modeling.clone();
    m.train.seed = cfg.seed;
    m
}

fn file_name(path: &Path) -> String {
    path.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default()
}

#[derive(Serialize)]
struct WindowSummary {
    file: String,
    records: usize,
    positives: usize,
    features: usize,
    sha256: String,
}

fn summarize(path: &Path, p: &Portfolio) -> Result<WindowSummary, CliError> {
    Ok(WindowSummary {
        file: file_name(path),
        records: p.len(),
        positives: p.class_counts().0,
        features: p.schema().len(),
        sha256: file_sha256(path)?,
    })
}

#[derive(Serialize)]
struct SimulationBody {
    scenario: &'static str,
    live_shift: BTreeMap<String, f64>,
    windows: BTreeMap<&'static str, WindowSummary>,
}

pub fn simulate(cfg: &PipelineConfig) -> Result<Status, CliError> {
    let live_shift = cfg.simulate.clone().unwrap_or_default().live_shift;
    let (train_test, validation) = table1_scenario_with(&table1_spec(cfg.seed))?;
    let live_spec = loanscreen::synthgen::GeneratorSpec {
        drift_shift: live_shift.clone(),
        ..table1_spec(cfg.seed.wrapping_add(1))
    };
    let (_, live) = table1_scenario_with(&live_spec)?;

    crate::artifacts::ensure_parent(&cfg.paths.schema)?;
    validation.schema().save(&cfg.paths.schema)?;
    let mut windows = BTreeMap::new();
    for (window, p) in [(TRAIN_TEST, &train_test), (VALIDATION, &validation), (LIVE, &live)] {
        let path = raw_path(cfg, window);
        crate::artifacts::ensure_parent(&path)?;
        p.save_csv(&path)?;
        windows.insert(window, summarize(&path, p)?);
    }
    write_report(
        &report_path(cfg, SIMULATION_REPORT),
        &Meta::new(cfg, "simulate"),
        &SimulationBody {
            scenario: "table1",
            live_shift,
            windows,
        },
    )?;
    Ok(Status::Done)
}

/// Secret from the key file when configured, otherwise from the environment.
fn load_key(cfg: &PipelineConfig) -> Result<PseudonymizationKey, CliError> {
    let hex = match &cfg.privacy.key_file {
        Some(path) => fs::read_to_string(path).map_err(|e| CliError::io(path, e))?,
        None => std::env::var(&cfg.privacy.secret_env)
            .map_err(|_| CliError::MissingSecret(cfg.privacy.secret_env.clone()))?,
    };
    Ok(PseudonymizationKey::from_hex(&hex, cfg.privacy.noise_scales.clone())?)
}

#[derive(Serialize)]
struct AnonymizationBody {
    dropped: Vec<String>,
    masked: Vec<String>,
    noised: Vec<String>,
    windows: BTreeMap<&'static str, WindowSummary>,
}

pub fn anonymize_cmd(cfg: &PipelineConfig) -> Result<Status, CliError> {
    let key = load_key(cfg)?;
    let schema = load_schema(&cfg.paths.schema)?;
    let mut map = MaskMap::default();
    let mut windows = BTreeMap::new();
    let mut out_schema = None;
    let mut noised = std::collections::BTreeSet::new();
    for (i, window) in WINDOWS.into_iter().enumerate() {
        let raw = load_window(&raw_path(cfg, window), &schema, window)?;
        let (masked, part) = pseudonymize(&anonymize(&raw), &key, cfg.seed.wrapping_add(i as u64))?;
        map.merge(part)?;
        noised.extend(masked.perturbed_features().iter().cloned());
        let path = pseudo_path(cfg, window);
        masked.save_csv(&path)?;
        windows.insert(window, summarize(&path, &masked)?);
        if window == VALIDATION {
            out_schema = Some(masked.schema().clone());
        }
    }
    let out_schema = out_schema.expect("validation window processed");
    out_schema.save(cfg.paths.data.join(PSEUDO_SCHEMA))?;
    crate::artifacts::ensure_parent(&cfg.paths.mask_map)?;
    map.save(&cfg.paths.mask_map)?;

    let body = AnonymizationBody {
        dropped: schema
            .features()
            .iter()
            .filter(|f| f.privacy_class == PrivacyClass::DirectIdentifier)
            .map(|f| f.name.clone())
            .collect(),
        masked: map.features().map(str::to_string).collect(),
        noised: noised.into_iter().collect(),
        windows,
    };
    write_report(
        &report_path(cfg, ANONYMIZATION_REPORT),
        &Meta::new(cfg, "anonymize"),
        &body,
    )?;
    Ok(Status::Done)
}

#[derive(Serialize)]
struct Exclusion {
    feature: String,
    reason: &'static str,
}

#[derive(Serialize)]
struct SelectionBody {
    fit_records: usize,
    eligible: Vec<String>,
    excluded: Vec<Exclusion>,
    features: Vec<String>,
    steps: Vec<SelectionStep>,
}

/// The part of the selection report that training reads back.
#[derive(Deserialize)]
struct SelectedFeatures {
    features: Vec<String>,
}

fn exclusion_reason(f: &FeatureSpec) -> Option<&'static str> {
    if f.privacy_class == PrivacyClass::DirectIdentifier {
        Some("direct identifier")
    } else if f.bias_class != BiasClass::None {
        Some("bias-tagged")
    } else if f.availability != Availability::Common {
        Some("not available in both datasets")
    } else {
        None
    }
}

pub fn select(cfg: &PipelineConfig) -> Result<Status, CliError> {
    let schema = pseudo_schema(cfg)?;
    let train_test = load_window(&pseudo_path(cfg, TRAIN_TEST), &schema, TRAIN_TEST)?;
    let m = modeling(cfg);
    let splits = split_train_test(&train_test, &m, cfg.seed)?;
    let (features, selection) = select_features(&splits.fit, &m)?;
    let excluded = train_test
        .schema()
        .features()
        .iter()
        .filter_map(|f| {
            exclusion_reason(f).map(|reason| Exclusion {
                feature: f.name.clone(),
                reason,
            })
        })
        .collect();
    write_report(
        &report_path(cfg, SELECTION_REPORT),
        &Meta::new(cfg, "select"),
        &SelectionBody {
            fit_records: splits.fit.len(),
            eligible: eligible_features(train_test.schema()),
            excluded,
            features,
            steps: selection.steps,
        },
    )?;
    Ok(Status::Done)
}

fn selected_features(cfg: &PipelineConfig) -> Result<Vec<String>, CliError> {
    let path = report_path(cfg, SELECTION_REPORT);
    require(&path)?;
    let text = fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
    let body: SelectedFeatures =
        serde_json::from_str(&text).map_err(|e| CliError::Internal(format!("{}: {e}", path.display())))?;
    Ok(body.features)
}

/// Model file: the scorer plus its audit fields.
#[derive(Serialize, Deserialize)]
struct ModelArtifact {
    tool_version: String,
    config_hash: String,
    features: Vec<String>,
    scorer: ScoringModel,
}

pub fn train(cfg: &PipelineConfig) -> Result<Status, CliError> {
    let features = selected_features(cfg)?;
    let schema = pseudo_schema(cfg)?;
    // refuse before any fitting if a protected feature reached this point
    ensure_protected_free(&schema, &features)?;
    let train_test = load_window(&pseudo_path(cfg, TRAIN_TEST), &schema, TRAIN_TEST)?;
    let m = modeling(cfg);
    let splits = split_train_test(&train_test, &m, cfg.seed)?;
    let scorer = fit_scorer(&splits.fit, &splits.calibration, &features, &m)?;
    let artifact = ModelArtifact {
        tool_version: loanscreen::TOOL_VERSION.to_string(),
        config_hash: cfg.digest.clone(),
        features,
        scorer,
    };
    let mut text = serde_json::to_string_pretty(&artifact).expect("model serializes");
    text.push('\n');
    write_bytes(&cfg.paths.model, text.as_bytes())?;
    Ok(Status::Done)
}

fn load_model(cfg: &PipelineConfig) -> Result<ModelArtifact, CliError> {
    let path = &cfg.paths.model;
    require(path)?;
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Internal(format!("{}: {e}", path.display())))
}

#[derive(Serialize)]
struct EvaluationBody<'a> {
    features: &'a [String],
    calibration_prevalence: f64,
    deployment_prevalence: Option<f64>,
    held_out: &'a EvaluationReport,
    validation: &'a EvaluationReport,
}

pub fn evaluate(cfg: &PipelineConfig) -> Result<Status, CliError> {
    let model = load_model(cfg)?;
    let schema = pseudo_schema(cfg)?;
    let train_test = load_window(&pseudo_path(cfg, TRAIN_TEST), &schema, TRAIN_TEST)?;
    let validation = load_window(&pseudo_path(cfg, VALIDATION), &schema, VALIDATION)?;
    let m = modeling(cfg);
    let splits = split_train_test(&train_test, &m, cfg.seed)?;
    let held_out = model.scorer.evaluate(&splits.test, m.bin_rule)?;
    // the validation portfolio stands in for the deployment population
    let deployed = model.scorer.deployed(&m)?;
    let on_validation = deployed.evaluate(&validation, m.bin_rule)?;

    let meta = Meta::new(cfg, "evaluate");
    write_report(
        &report_path(cfg, EVALUATION_REPORT),
        &meta,
        &EvaluationBody {
            features: &model.features,
            calibration_prevalence: model.scorer.calibration_prevalence,
            deployment_prevalence: m.deployment_prevalence,
            held_out: &held_out,
            validation: &on_validation,
        },
    )?;
    write_csv(
        &report_path(cfg, "reliability_held_out.csv"),
        &meta,
        &held_out.diagram.to_csv_string(),
    )?;
    write_csv(
        &report_path(cfg, "reliability_validation.csv"),
        &meta,
        &on_validation.diagram.to_csv_string(),
    )?;
    Ok(Status::Done)
}

#[derive(Serialize)]
struct DriftBody<'a> {
    alerts: Vec<&'a str>,
    #[serde(flatten)]
    report: &'a DriftReport,
}

/// Compares the live window with the validation window on every feature
/// the train-test portfolio carries.
pub fn drift(cfg: &PipelineConfig) -> Result<Status, CliError> {
    let schema = pseudo_schema(cfg)?;
    let features: Vec<String> = schema
        .for_kind(PortfolioKind::TrainTest)
        .names()
        .map(str::to_string)
        .collect();
    let reference = load_window(&pseudo_path(cfg, VALIDATION), &schema, VALIDATION)?;
    let live = load_window(&pseudo_path(cfg, LIVE), &schema, LIVE)?;
    let baseline = DriftBaseline::fit(&reference, &features, cfg.drift.bins, VALIDATION)?;
    let report = baseline.scan(&live, LIVE, cfg.drift.thresholds())?;
    let alerts = report.alerts();
    write_report(
        &report_path(cfg, DRIFT_REPORT),
        &Meta::new(cfg, "drift"),
        &DriftBody {
            alerts: alerts.clone(),
            report: &report,
        },
    )?;
    Ok(if alerts.is_empty() {
        Status::Done
    } else {
        Status::DriftAlert
    })
}

pub fn pipeline(cfg: &PipelineConfig) -> Result<Status, CliError> {
    if cfg.simulate.is_some() {
        simulate(cfg)?;
    }
    anonymize_cmd(cfg)?;
    select(cfg)?;
    train(cfg)?;
    evaluate(cfg)?;
    drift(cfg)
}
