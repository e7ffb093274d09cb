//! Per-invocation run manifests.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use chrono::{SecondsFormat, Utc};
use serde::Serialize;
use serde_json::Value;

use crate::error::{CliError, Result};

#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub version: &'static str,
    pub started: String,
    pub finished: Option<String>,
    pub status: String,
    pub args: Value,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub details: BTreeMap<String, Value>,
    pub warnings: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<Value>,
}

/// Collects what a command read, wrote and decided; written once at the end.
#[derive(Debug)]
pub struct RunLog {
    pub manifest: RunManifest,
    path: Option<PathBuf>,
}

pub fn now() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)
}

impl RunLog {
    pub fn new(command: &str, args: Value) -> Self {
        RunLog {
            manifest: RunManifest {
                command: command.to_string(),
                version: env!("CARGO_PKG_VERSION"),
                started: now(),
                finished: None,
                status: "running".into(),
                args,
                inputs: BTreeMap::new(),
                outputs: BTreeMap::new(),
                details: BTreeMap::new(),
                warnings: Vec::new(),
                error: None,
            },
            path: None,
        }
    }

    /// Places the manifest inside `dir` as `<command>.run.json`.
    pub fn in_dir(&mut self, dir: &Path) {
        self.path = Some(dir.join(format!("{}.run.json", self.manifest.command)));
    }

    /// Places the manifest next to `file` as `<file>.run.json`.
    pub fn beside(&mut self, file: &Path) {
        let mut name = file.file_name().map(|n| n.to_os_string()).unwrap_or_default();
        name.push(".run.json");
        self.path = Some(file.with_file_name(name));
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn input(&mut self, role: &str, path: &Path) {
        self.manifest.inputs.insert(role.into(), path.display().to_string());
    }

    pub fn output(&mut self, role: &str, path: &Path) {
        self.manifest.outputs.insert(role.into(), path.display().to_string());
    }

    pub fn detail(&mut self, key: &str, value: impl Serialize) {
        let v = serde_json::to_value(value).unwrap_or(Value::Null);
        self.manifest.details.insert(key.into(), v);
    }

    pub fn warn(&mut self, w: impl Into<String>) {
        let w = w.into();
        tracing::warn!("{w}");
        self.manifest.warnings.push(w);
    }

    /// Writes the manifest with the final status. A run whose output
    /// location was never resolved has nowhere to write and is skipped.
    pub fn finish(&mut self, outcome: std::result::Result<(), &CliError>) -> Result<Option<PathBuf>> {
        self.manifest.finished = Some(now());
        match outcome {
            Ok(()) => self.manifest.status = "ok".into(),
            Err(e) => {
                self.manifest.status = "failed".into();
                self.manifest.error = Some(e.to_json()["error"].clone());
            }
        }
        let Some(path) = self.path.clone() else {
            return Ok(None);
        };
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
        }
        write_json_atomic(&path, &self.manifest)?;
        Ok(Some(path))
    }
}

pub fn write_json_atomic(path: &Path, value: &impl Serialize) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, serde_json::to_vec_pretty(value)?).map_err(|e| CliError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| CliError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn failed_run_still_writes_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let mut log = RunLog::new("tile", serde_json::json!({"patch_size": 512}));
        log.beside(&dir.path().join("patches.jsonl"));
        let err = CliError::Input("no images".into());
        let path = log.finish(Err(&err)).unwrap().unwrap();
        assert!(path.ends_with("patches.jsonl.run.json"));
        let v: Value = serde_json::from_slice(&fs::read(path).unwrap()).unwrap();
        assert_eq!(v["status"], "failed");
        assert_eq!(v["error"]["kind"], "input");
        assert_eq!(v["args"]["patch_size"], 512);
    }

    #[test]
    fn unresolved_location_is_skipped() {
        let mut log = RunLog::new("serve", Value::Null);
        assert_eq!(log.finish(Ok(())).unwrap(), None);
    }
}
