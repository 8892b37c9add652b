//! `loanscreen` command-line driver.
//!
//! Exit codes: 0 success, 1 error, 2 drift alert. Errors are also written to
//! stderr as a single JSON record.

mod artifacts;
mod commands;
mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use loanscreen::data_model::DataError;
use loanscreen::feature_select::SelectError;
use loanscreen::monitor::MonitorError;
use loanscreen::pipeline::PipelineError;
use loanscreen::privacy::PrivacyError;
use loanscreen::synthgen::SynthError;
use serde_json::json;
use thiserror::Error;

use crate::commands::Status;
use crate::config::PipelineConfig;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("no pseudonymization secret: set ${0} or privacy.key_file")]
    MissingSecret(String),
    #[error("feature `{feature}` may not be used for training: {reason}")]
    ProtectedFeature { feature: String, reason: String },
    #[error("missing input {0}; run the earlier stage first")]
    MissingInput(String),
    #[error("{message}")]
    Stage { kind: &'static str, message: String },
    #[error("{0}")]
    Internal(String),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.display().to_string(),
            source,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Io { .. } => "io",
            CliError::MissingSecret(_) => "missing_secret",
            CliError::ProtectedFeature { .. } => "protected_feature",
            CliError::MissingInput(_) => "missing_input",
            CliError::Stage { kind, .. } => kind,
            CliError::Internal(_) => "internal",
        }
    }

    pub fn feature(&self) -> Option<&str> {
        match self {
            CliError::ProtectedFeature { feature, .. } => Some(feature),
            _ => None,
        }
    }

    fn record(&self) -> serde_json::Value {
        json!({
            "error": {
                "kind": self.kind(),
                "message": self.to_string(),
                "feature": self.feature(),
            }
        })
    }
}

macro_rules! stage_error {
    ($($ty:ty => $kind:literal),* $(,)?) => {
        $(impl From<$ty> for CliError {
            fn from(e: $ty) -> Self {
                CliError::Stage { kind: $kind, message: e.to_string() }
            }
        })*
    };
}

stage_error! {
    DataError => "data",
    PrivacyError => "privacy",
    MonitorError => "drift",
    SynthError => "simulation",
    SelectError => "selection",
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::ProtectedFeature { feature, reason } => {
                CliError::ProtectedFeature { feature, reason }
            }
            PipelineError::InvalidConfig(m) => CliError::Config(m),
            other => CliError::Stage {
                kind: "modeling",
                message: other.to_string(),
            },
        }
    }
}

#[derive(Parser)]
#[command(name = "loanscreen", version, about = "Privacy-aware loan screening pipeline")]
struct Cli {
    /// Pipeline configuration file.
    #[arg(long, global = true, default_value = "loanscreen.toml")]
    config: PathBuf,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the reports directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic train-test, validation and live portfolios.
    Simulate,
    /// Drop direct identifiers, then mask and noise quasi-identifiers.
    Anonymize,
    /// Bias-aware mRMR feature selection on the fit split.
    Select,
    /// Train, calibrate and set the decision threshold.
    Train,
    /// Score the held-out split and the validation portfolio.
    Evaluate,
    /// Compare the live window with the validation window.
    Drift,
    /// Run every stage in order.
    Pipeline,
    /// Configuration helpers.
    Config {
        #[command(subcommand)]
        action: ConfigAction,
    },
}

#[derive(Subcommand)]
enum ConfigAction {
    /// Print an example configuration, or write it to `<out>/loanscreen.toml`.
    Init,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::Anonymize => "anonymize",
            Command::Select => "select",
            Command::Train => "train",
            Command::Evaluate => "evaluate",
            Command::Drift => "drift",
            Command::Pipeline => "pipeline",
            Command::Config { .. } => "config",
        }
    }
}

fn config_init(cli: &Cli) -> Result<Status, CliError> {
    let mut example = PipelineConfig::example();
    if let Some(seed) = cli.seed {
        example.seed = seed;
    }
    let text = example.to_toml();
    match &cli.out {
        Some(dir) => {
            let path = dir.join("loanscreen.toml");
            if path.exists() {
                return Err(CliError::Config(format!("{} already exists", path.display())));
            }
            artifacts::write_bytes(&path, text.as_bytes())?;
        }
        None => print!("{text}"),
    }
    Ok(Status::Done)
}

fn dispatch(command: &Command, cfg: &PipelineConfig) -> Result<Status, CliError> {
    match command {
        Command::Simulate => commands::simulate(cfg),
        Command::Anonymize => commands::anonymize_cmd(cfg),
        Command::Select => commands::select(cfg),
        Command::Train => commands::train(cfg),
        Command::Evaluate => commands::evaluate(cfg),
        Command::Drift => commands::drift(cfg),
        Command::Pipeline => commands::pipeline(cfg),
        Command::Config { .. } => unreachable!("handled before loading a config"),
    }
}

fn exit_code(outcome: &Result<Status, CliError>) -> u8 {
    match outcome {
        Ok(Status::Done) => 0,
        Ok(Status::DriftAlert) => 2,
        Err(_) => 1,
    }
}

fn report(outcome: &Result<Status, CliError>) -> ExitCode {
    if let Err(e) = outcome {
        eprintln!("{}", e.record());
    }
    ExitCode::from(exit_code(outcome))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Command::Config {
        action: ConfigAction::Init,
    } = cli.command
    {
        return report(&config_init(&cli));
    }
    let started = artifacts::unix_millis();
    let cfg = match PipelineConfig::load(&cli.config, cli.seed, cli.out.as_deref()) {
        Ok(cfg) => cfg,
        Err(e) => return report(&Err(e)),
    };
    let outcome = dispatch(&cli.command, &cfg);
    let error = outcome.as_ref().err().map(|e| e.to_string());
    artifacts::log_run(&cfg, cli.command.name(), started, exit_code(&outcome), error.as_deref());
    report(&outcome)
}
