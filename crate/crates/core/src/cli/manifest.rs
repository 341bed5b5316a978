//! Per-run record of what was asked for, what was read and what was written.

use super::CliError;
use crate::util::{sha256_hex, write_atomic};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Running,
    Ok,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub started_unix: f64,
    pub finished_unix: Option<f64>,
    pub seconds: Option<f64>,
    /// Named phases such as `epoch_3` or `featurize`.
    pub phases: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub status: RunStatus,
    pub config: serde_json::Value,
    /// Input path (or synthetic spec) to content hash.
    pub inputs: BTreeMap<String, String>,
    pub artifacts: BTreeMap<String, Artifact>,
    pub timings: Timings,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

fn unix_now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0.0, |d| d.as_secs_f64())
}

/// A manifest bound to its file; written on creation and on finish.
pub struct ManifestWriter {
    pub manifest: RunManifest,
    path: PathBuf,
    clock: Instant,
}

impl ManifestWriter {
    pub fn start(path: PathBuf, command: &str, config: serde_json::Value) -> Result<Self, CliError> {
        let w = Self {
            manifest: RunManifest {
                command: command.to_string(),
                version: env!("CARGO_PKG_VERSION").to_string(),
                status: RunStatus::Running,
                config,
                inputs: BTreeMap::new(),
                artifacts: BTreeMap::new(),
                timings: Timings {
                    started_unix: unix_now(),
                    ..Default::default()
                },
                error: None,
            },
            path,
            clock: Instant::now(),
        };
        w.write()?;
        Ok(w)
    }

    pub fn input(&mut self, key: impl Into<String>, hash: String) {
        self.manifest.inputs.insert(key.into(), hash);
    }

    pub fn artifact(&mut self, key: impl Into<String>, path: &Path) -> Result<(), CliError> {
        let sha256 = hash_path(path)?;
        self.manifest.artifacts.insert(
            key.into(),
            Artifact {
                path: path.to_path_buf(),
                sha256,
            },
        );
        Ok(())
    }

    pub fn phase(&mut self, name: impl Into<String>, seconds: f64) {
        self.manifest.timings.phases.insert(name.into(), seconds);
    }

    fn write(&self) -> Result<(), CliError> {
        let json = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes") + "\n";
        write_atomic(&self.path, json.as_bytes()).map_err(|source| CliError::Io {
            path: self.path.clone(),
            source,
        })
    }

    pub fn finish<T>(mut self, result: &Result<T, CliError>) -> Result<(), CliError> {
        self.manifest.timings.finished_unix = Some(unix_now());
        self.manifest.timings.seconds = Some(self.clock.elapsed().as_secs_f64());
        match result {
            Ok(_) => self.manifest.status = RunStatus::Ok,
            Err(e) => {
                self.manifest.status = RunStatus::Failed;
                self.manifest.error = Some(e.to_string());
            }
        }
        self.write()
    }
}

/// sha256 of a file, or of every file under a directory (relative name and
/// contents, in sorted order).
pub fn hash_path(path: &Path) -> Result<String, CliError> {
    let io = |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    };
    if path.is_file() {
        return Ok(sha256_hex(&std::fs::read(path).map_err(io)?));
    }
    let mut files = Vec::new();
    collect_files(path, path, &mut files).map_err(io)?;
    files.sort();
    let mut h = Sha256::new();
    for rel in files {
        let bytes = std::fs::read(path.join(&rel)).map_err(io)?;
        h.update(rel.to_string_lossy().as_bytes());
        h.update([0]);
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> std::io::Result<()> {
    for entry in std::fs::read_dir(dir)? {
        let p = entry?.path();
        if p.is_dir() {
            collect_files(root, &p, out)?;
        } else {
            out.push(p.strip_prefix(root).expect("under root").to_path_buf());
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn directory_hash_ignores_creation_order() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        std::fs::write(a.path().join("x.txt"), "1").unwrap();
        std::fs::write(a.path().join("y.txt"), "2").unwrap();
        std::fs::write(b.path().join("y.txt"), "2").unwrap();
        std::fs::write(b.path().join("x.txt"), "1").unwrap();
        assert_eq!(hash_path(a.path()).unwrap(), hash_path(b.path()).unwrap());
        std::fs::write(b.path().join("x.txt"), "3").unwrap();
        assert_ne!(hash_path(a.path()).unwrap(), hash_path(b.path()).unwrap());
    }

    #[test]
    fn written_at_start_and_finalized() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.json");
        let w = ManifestWriter::start(p.clone(), "train", serde_json::json!({"k": 1})).unwrap();
        let early: RunManifest = serde_json::from_str(&std::fs::read_to_string(&p).unwrap()).unwrap();
        assert_eq!(early.status, RunStatus::Running);
        w.finish::<()>(&Err(CliError::Config("boom".into()))).unwrap();
        let done: RunManifest = serde_json::from_str(&std::fs::read_to_string(&p).unwrap()).unwrap();
        assert_eq!(done.status, RunStatus::Failed);
        assert!(done.error.unwrap().contains("boom"));
        assert!(done.timings.seconds.is_some());
    }
}
