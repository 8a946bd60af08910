//! Run manifests: what went in, what came out, and when.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::error::{CliError, Result};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputHash {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage {
    pub name: String,
    pub started_unix_s: f64,
    pub finished_unix_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub tool_version: String,
    pub inputs: Vec<InputHash>,
    pub stages: Vec<Stage>,
    /// Paths relative to the manifest's directory.
    pub outputs: Vec<String>,
}

fn now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

fn files_under(root: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let rd = std::fs::read_dir(root).map_err(|e| CliError::io(root, e))?;
    for entry in rd {
        let p = entry.map_err(|e| CliError::io(root, e))?.path();
        if p.is_dir() {
            files_under(&p, out)?;
        } else {
            out.push(p);
        }
    }
    Ok(())
}

/// SHA-256 of a file, or of every (relative path, content) pair under a directory.
pub fn hash_path(path: &Path) -> Result<String> {
    let mut h = Sha256::new();
    if path.is_dir() {
        let mut files = Vec::new();
        files_under(path, &mut files)?;
        files.sort();
        for f in files {
            let rel = f.strip_prefix(path).unwrap_or(&f).to_string_lossy().replace('\\', "/");
            if rel.ends_with("run_manifest.json") {
                continue;
            }
            h.update(rel.as_bytes());
            h.update([0]);
            h.update(std::fs::read(&f).map_err(|e| CliError::io(&f, e))?);
        }
    } else {
        h.update(std::fs::read(path).map_err(|e| CliError::io(path, e))?);
    }
    Ok(hex::encode(h.finalize()))
}

/// Collects stage timings and output paths while a command runs.
pub struct Recorder {
    manifest: RunManifest,
    root: PathBuf,
    current: Option<(String, f64)>,
}

impl Recorder {
    /// `root` is where the manifest will live; `inputs` are hashed now.
    pub fn start(command: &str, cfg: &ExperimentConfig, root: &Path, inputs: &[&Path]) -> Result<Self> {
        let inputs = inputs
            .iter()
            .map(|p| Ok(InputHash { path: p.display().to_string(), sha256: hash_path(p)? }))
            .collect::<Result<_>>()?;
        Ok(Self {
            manifest: RunManifest {
                command: command.to_string(),
                config_hash: cfg.hash(),
                tool_version: TOOL_VERSION.to_string(),
                inputs,
                stages: Vec::new(),
                outputs: Vec::new(),
            },
            root: root.to_path_buf(),
            current: None,
        })
    }

    pub fn stage(&mut self, name: &str) {
        self.end_stage();
        self.current = Some((name.to_string(), now()));
    }

    fn end_stage(&mut self) {
        if let Some((name, t0)) = self.current.take() {
            self.manifest.stages.push(Stage { name, started_unix_s: t0, finished_unix_s: now() });
        }
    }

    pub fn output(&mut self, path: &Path) {
        let rel = path.strip_prefix(&self.root).unwrap_or(path).to_string_lossy().replace('\\', "/");
        self.manifest.outputs.push(rel);
    }

    /// Writes the effective config and the manifest under `root` with the given
    /// file-name prefix (`""` inside an output directory, `"report."` beside a file).
    pub fn finish(mut self, cfg: &ExperimentConfig, prefix: &str) -> Result<RunManifest> {
        self.end_stage();
        let cfg_path = self.root.join(format!("{prefix}config.json"));
        write_json(&cfg_path, cfg)?;
        self.output(&cfg_path);
        self.manifest.outputs.sort();
        self.manifest.outputs.dedup();
        let path = self.root.join(format!("{prefix}run_manifest.json"));
        write_json(&path, &self.manifest)?;
        Ok(self.manifest)
    }
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Data(e.to_string()))?;
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    std::fs::write(path, text + "\n").map_err(|e| CliError::io(path, e))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn directory_hash_sees_names_and_contents() {
        let d = tempfile::tempdir().unwrap();
        std::fs::write(d.path().join("a"), b"1").unwrap();
        let h1 = hash_path(d.path()).unwrap();
        std::fs::write(d.path().join("run_manifest.json"), b"ignored").unwrap();
        assert_eq!(h1, hash_path(d.path()).unwrap());
        std::fs::write(d.path().join("a"), b"2").unwrap();
        assert_ne!(h1, hash_path(d.path()).unwrap());
    }

    #[test]
    fn manifest_lists_outputs_relative_to_root() {
        let d = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig::default();
        let mut r = Recorder::start("test", &cfg, d.path(), &[]).unwrap();
        r.stage("one");
        r.output(&d.path().join("x/y.json"));
        let m = r.finish(&cfg, "").unwrap();
        assert_eq!(m.outputs, vec!["config.json".to_string(), "x/y.json".to_string()]);
        assert_eq!(m.stages.len(), 1);
        let back: RunManifest = read_json(&d.path().join("run_manifest.json")).unwrap();
        assert_eq!(back, m);
    }
}
