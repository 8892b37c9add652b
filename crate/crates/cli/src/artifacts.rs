//! Report writing with an audit header, and the run log.
//!
//! JSON reports carry a `meta` object; CSV diagrams start with a `#` comment
//! line holding the same fields. Neither contains a timestamp, so reruns with
//! identical inputs produce identical bytes. Wall-clock times go to
//! `run_log.jsonl` only.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::config::PipelineConfig;
use crate::CliError;

pub const RUN_LOG: &str = "run_log.jsonl";

#[derive(Debug, Clone, Serialize)]
pub struct Meta {
    pub tool_version: &'static str,
    pub config_hash: String,
    pub command: &'static str,
    pub seed: u64,
}

impl Meta {
    pub fn new(cfg: &PipelineConfig, command: &'static str) -> Self {
        Meta {
            tool_version: loanscreen::TOOL_VERSION,
            config_hash: cfg.digest.clone(),
            command,
            seed: cfg.seed,
        }
    }

    fn comment(&self) -> String {
        format!(
            "# tool_version={} config_hash={} command={} seed={}\n",
            self.tool_version, self.config_hash, self.command, self.seed
        )
    }
}

pub fn ensure_parent(path: &Path) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    Ok(())
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    ensure_parent(path)?;
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

/// Writes `{"meta": .., <body fields>}` as pretty JSON.
pub fn write_report<T: Serialize>(path: &Path, meta: &Meta, body: &T) -> Result<(), CliError> {
    let mut value = serde_json::to_value(body).map_err(|e| CliError::Internal(e.to_string()))?;
    let obj = value
        .as_object_mut()
        .ok_or_else(|| CliError::Internal("report body is not an object".into()))?;
    let mut out = serde_json::Map::new();
    out.insert("meta".into(), serde_json::to_value(meta).expect("meta serializes"));
    out.append(obj);
    let mut text = serde_json::to_string_pretty(&out).expect("json serializes");
    text.push('\n');
    write_bytes(path, text.as_bytes())
}

/// CSV text preceded by the audit comment line.
pub fn write_csv(path: &Path, meta: &Meta, csv: &str) -> Result<(), CliError> {
    let mut text = meta.comment();
    text.push_str(csv);
    write_bytes(path, text.as_bytes())
}

pub fn file_sha256(path: &Path) -> Result<String, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(format!("sha256:{}", hex::encode(Sha256::digest(&bytes))))
}

pub fn unix_millis() -> u128 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis())
        .unwrap_or(0)
}

/// Appends one line per command invocation. Failures to log are ignored so
/// that logging never masks the command's own outcome.
pub fn log_run(cfg: &PipelineConfig, command: &str, started: u128, exit_code: u8, error: Option<&str>) {
    let path = cfg.paths.reports.join(RUN_LOG);
    if ensure_parent(&path).is_err() {
        return;
    }
    let line = json!({
        "command": command,
        "tool_version": loanscreen::TOOL_VERSION,
        "config_hash": cfg.digest,
        "seed": cfg.seed,
        "started_unix_ms": started as u64,
        "finished_unix_ms": unix_millis() as u64,
        "exit_code": exit_code,
        "error": error,
    });
    if let Ok(mut f) = fs::OpenOptions::new().create(true).append(true).open(&path) {
        let _ = writeln!(f, "{line}");
    }
}
