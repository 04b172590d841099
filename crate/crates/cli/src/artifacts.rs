//! On-disk layout of a run:
//!
//! ```text
//! <root>/<name>/step1/      encoder.ckpt targets.json log.csv manifest.json
//! <root>/<name>/step2/      generator.ckpt trainer.ckpt latents.json loss.csv manifest.json
//! <root>/<name>/posterior/  posterior.json manifest.json
//! <root>/<name>/reports/    <command>.json, CSV tables, <command>-manifest.json
//! <root>/<name>/samples/    default `cola sample` output
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use cola::nn::Checkpoint;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{CliError, Result};

pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn new(cfg: &RunConfig) -> Self {
        Self { root: cfg.run_dir() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn stage(&self, name: &str) -> Result<PathBuf> {
        let dir = self.root.join(name);
        fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
        Ok(dir)
    }

    pub fn path(&self, stage: &str, file: &str) -> PathBuf {
        self.root.join(stage).join(file)
    }
}

/// JSON artifact tagged with the hash of the config that produced it.
#[derive(Serialize, Deserialize)]
pub struct Stamped<T> {
    pub config_hash: String,
    /// Training epochs completed when written.
    #[serde(default)]
    pub epoch: u64,
    pub value: T,
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|source| CliError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    text.push('\n');
    write_bytes(path, text.as_bytes())
}

/// Like [`write_json`] with every float rounded to 6 decimals.
pub fn write_report<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let value = serde_json::to_value(value).map_err(|source| CliError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    write_json(path, &round6(value))
}

pub fn round6(v: serde_json::Value) -> serde_json::Value {
    use serde_json::Value;
    match v {
        Value::Number(n) if n.is_f64() => {
            let x = n.as_f64().unwrap_or(f64::NAN);
            let r = (x * 1e6).round() / 1e6;
            serde_json::Number::from_f64(if r == 0.0 { 0.0 } else { r }).map_or(Value::Null, Value::Number)
        }
        Value::Array(a) => Value::Array(a.into_iter().map(round6).collect()),
        Value::Object(o) => Value::Object(o.into_iter().map(|(k, v)| (k, round6(v))).collect()),
        other => other,
    }
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path, stage: &'static str) -> Result<T> {
    let bytes = match fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(CliError::MissingArtifact {
                path: path.to_path_buf(),
                stage,
            })
        }
        Err(e) => return Err(CliError::io(path, e)),
    };
    serde_json::from_slice(&bytes).map_err(|source| CliError::Json {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_stamped<T: DeserializeOwned>(path: &Path, stage: &'static str, expected: &str) -> Result<Stamped<T>> {
    let s: Stamped<T> = read_json(path, stage)?;
    check_hash(path, stage, &s.config_hash, expected)?;
    Ok(s)
}

pub fn load_checkpoint(path: &Path, stage: &'static str, expected: &str) -> Result<Checkpoint> {
    if !path.exists() {
        return Err(CliError::MissingArtifact {
            path: path.to_path_buf(),
            stage,
        });
    }
    let ckpt = Checkpoint::load(path)?;
    check_hash(path, stage, &ckpt.meta.config_hash, expected)?;
    Ok(ckpt)
}

fn check_hash(path: &Path, stage: &'static str, found: &str, expected: &str) -> Result<()> {
    if found != expected {
        return Err(CliError::HashMismatch {
            path: path.to_path_buf(),
            stage,
            found: found.to_string(),
            expected: expected.to_string(),
        });
    }
    Ok(())
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut buf = Vec::new();
    cola::theory::write_csv(rows, &mut buf)?;
    write_bytes(path, &buf)
}

pub fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| CliError::Core(e.into()))?;
    r.deserialize().collect::<std::result::Result<Vec<T>, _>>().map_err(|e| CliError::Core(e.into()))
}

#[derive(Serialize)]
pub struct Manifest<'a> {
    pub command: &'a str,
    pub version: &'a str,
    pub git_hash: String,
    pub seed: u64,
    pub config_hash: String,
    pub config: &'a RunConfig,
}

impl<'a> Manifest<'a> {
    pub fn new(command: &'a str, cfg: &'a RunConfig) -> Self {
        Self {
            command,
            version: env!("CARGO_PKG_VERSION"),
            git_hash: git_hash(),
            seed: cfg.seed,
            config_hash: cfg.full_hash(),
            config: cfg,
        }
    }
}

fn git_hash() -> String {
    std::process::Command::new("git")
        .args(["rev-parse", "HEAD"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .unwrap_or_else(|| "unknown".into())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rounding_keeps_integers() {
        let v = serde_json::json!({ "a": 0.123456789, "b": [3, -1e-9], "c": "x" });
        assert_eq!(round6(v), serde_json::json!({ "a": 0.123457, "b": [3, 0.0], "c": "x" }));
    }
}
