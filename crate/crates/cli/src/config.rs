//! Pipeline configuration file.
//!
//! Relative paths are resolved against the directory holding the config
//! file. The pseudonymization secret is never part of the config; it is read
//! from the environment variable named by `privacy.secret_env` or from
//! `privacy.key_file`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Component, Path, PathBuf};

use loanscreen::monitor::{DriftThresholds, DEFAULT_BINS};
use loanscreen::pipeline::ModelingConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

pub const DEFAULT_SECRET_ENV: &str = "LOANSCREEN_SECRET";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    /// Directory for input and pseudonymized portfolios.
    pub data: PathBuf,
    /// Feature schema of the raw portfolios.
    pub schema: PathBuf,
    /// Scoring model file.
    pub model: PathBuf,
    /// Directory for reports, diagrams and the run log.
    pub reports: PathBuf,
    /// Token map; must live outside `reports` and `data`.
    pub mask_map: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrivacySection {
    pub secret_env: String,
    /// File holding the hex secret; takes precedence over the variable.
    pub key_file: Option<PathBuf>,
    /// Noise standard deviation per numeric quasi-identifier.
    pub noise_scales: BTreeMap<String, f64>,
}

impl Default for PrivacySection {
    fn default() -> Self {
        PrivacySection {
            secret_env: DEFAULT_SECRET_ENV.to_string(),
            key_file: None,
            noise_scales: loanscreen::synthgen::table1_noise_scales(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateSection {
    /// Offsets applied to numeric features of the live window.
    pub live_shift: BTreeMap<String, f64>,
}

impl Default for SimulateSection {
    fn default() -> Self {
        SimulateSection {
            live_shift: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DriftSection {
    pub bins: usize,
    /// PSI at which a feature is flagged for review.
    pub warning: f64,
    /// PSI at which a feature raises an alert.
    pub alert: f64,
}

impl Default for DriftSection {
    fn default() -> Self {
        let t = DriftThresholds::default();
        DriftSection {
            bins: DEFAULT_BINS,
            warning: t.warning,
            alert: t.alert,
        }
    }
}

impl DriftSection {
    pub fn thresholds(&self) -> DriftThresholds {
        DriftThresholds {
            warning: self.warning,
            alert: self.alert,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub paths: Paths,
    /// When present, `pipeline` starts by generating the synthetic scenario.
    #[serde(default)]
    pub simulate: Option<SimulateSection>,
    #[serde(default)]
    pub privacy: PrivacySection,
    #[serde(default)]
    pub modeling: ModelingConfig,
    #[serde(default)]
    pub drift: DriftSection,
    /// Hash of the file contents after overrides, before path resolution.
    #[serde(skip)]
    pub digest: String,
}

impl PipelineConfig {
    pub fn example() -> Self {
        PipelineConfig {
            seed: 42,
            paths: Paths {
                data: "data".into(),
                schema: "data/schema.toml".into(),
                model: "model/scoring_model.json".into(),
                reports: "reports".into(),
                mask_map: "secrets/mask_map.csv".into(),
            },
            simulate: Some(SimulateSection::default()),
            privacy: PrivacySection::default(),
            modeling: ModelingConfig {
                deployment_prevalence: Some(0.0253),
                ..ModelingConfig::default()
            },
            drift: DriftSection::default(),
            digest: String::new(),
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.message().to_string()))
    }

    /// Reads, applies overrides, resolves paths and validates.
    pub fn load(path: &Path, seed: Option<u64>, out: Option<&Path>) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        if let Some(seed) = seed {
            cfg.seed = seed;
        }
        if let Some(out) = out {
            cfg.paths.reports = out.to_path_buf();
        }
        cfg.digest = cfg.hash();
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve(base);
        cfg.validate()?;
        Ok(cfg)
    }

    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = normalize(&base.join(&*p));
            } else {
                *p = normalize(p);
            }
        };
        fix(&mut self.paths.data);
        fix(&mut self.paths.schema);
        fix(&mut self.paths.model);
        fix(&mut self.paths.reports);
        fix(&mut self.paths.mask_map);
        if let Some(k) = &mut self.privacy.key_file {
            fix(k);
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let p = &self.paths;
        let named = [
            ("data", &p.data),
            ("schema", &p.schema),
            ("model", &p.model),
            ("reports", &p.reports),
            ("mask_map", &p.mask_map),
        ];
        for (i, (a, pa)) in named.iter().enumerate() {
            for (b, pb) in &named[i + 1..] {
                if pa == pb {
                    return Err(CliError::Config(format!("paths.{a} and paths.{b} are the same")));
                }
            }
        }
        for (dir_name, dir) in [("reports", &p.reports), ("data", &p.data)] {
            if p.mask_map.starts_with(dir) {
                return Err(CliError::Config(format!(
                    "paths.mask_map must not be inside paths.{dir_name}"
                )));
            }
            if let Some(k) = &self.privacy.key_file {
                if k.starts_with(dir) {
                    return Err(CliError::Config(format!(
                        "privacy.key_file must not be inside paths.{dir_name}"
                    )));
                }
            }
        }
        if self.privacy.secret_env.is_empty() {
            return Err(CliError::Config("privacy.secret_env must be set".into()));
        }
        if self.drift.bins < 2 {
            return Err(CliError::Config("drift.bins must be at least 2".into()));
        }
        self.drift
            .thresholds()
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        self.modeling
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        Ok(())
    }

    /// `sha256:<hex>` of the serialized configuration.
    pub fn hash(&self) -> String {
        format!("sha256:{}", hex::encode(Sha256::digest(self.to_toml().as_bytes())))
    }
}

/// Lexical cleanup of `.` and `..` so that containment checks see through them.
fn normalize(p: &Path) -> PathBuf {
    let mut out = PathBuf::new();
    for c in p.components() {
        match c {
            Component::CurDir => {}
            Component::ParentDir => {
                if !out.pop() {
                    out.push("..");
                }
            }
            other => out.push(other.as_os_str()),
        }
    }
    out
}
