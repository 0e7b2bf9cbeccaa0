//! Run directory layout, per-stage manifests and upstream checksum checks.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use crate::exit::{Coded, ExitKind};
use vpdistill::util::{sha256_file, sha256_hex};

pub const MANIFEST_DIR: &str = "manifests";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub workers: usize,
    pub inputs: Vec<Artifact>,
    pub outputs: Vec<Artifact>,
    pub started_at: String,
    pub finished_at: String,
}

/// One stage's view of the run directory. Inputs are checked against the
/// manifests of the stages that wrote them; outputs are hashed as written.
pub struct Stage {
    root: PathBuf,
    command: String,
    config_hash: String,
    seed: u64,
    workers: usize,
    started_at: String,
    inputs: Vec<Artifact>,
    outputs: Vec<Artifact>,
    recorded: Option<BTreeMap<String, String>>,
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
}

impl Stage {
    pub fn new(root: &Path, command: &str, config_hash: &str, seed: u64, workers: usize) -> Self {
        Self {
            root: root.to_path_buf(),
            command: command.to_string(),
            config_hash: config_hash.to_string(),
            seed,
            workers,
            started_at: now(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            recorded: None,
        }
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    fn recorded(&mut self) -> Result<&BTreeMap<String, String>> {
        if self.recorded.is_none() {
            let mut map = BTreeMap::new();
            let dir = self.root.join(MANIFEST_DIR);
            if dir.is_dir() {
                let mut entries: Vec<PathBuf> = fs::read_dir(&dir)?.filter_map(|e| e.ok().map(|e| e.path())).collect();
                entries.sort();
                for path in entries
                    .into_iter()
                    .filter(|p| p.extension().is_some_and(|e| e == "json"))
                {
                    let text = fs::read_to_string(&path)?;
                    let m: RunManifest =
                        serde_json::from_str(&text).with_context(|| format!("reading manifest {}", path.display()))?;
                    for a in m.outputs {
                        map.insert(a.path, a.sha256);
                    }
                }
            }
            self.recorded = Some(map);
        }
        Ok(self.recorded.as_ref().expect("just filled"))
    }

    /// Resolves an upstream artifact, failing if it is missing or differs
    /// from what its producing stage recorded.
    pub fn input(&mut self, rel: &str) -> Result<PathBuf> {
        let path = self.path(rel);
        if !path.is_file() {
            return Err(Coded::new(
                ExitKind::MissingArtifact,
                format!("missing upstream artifact {}", path.display()),
            )
            .into());
        }
        let actual = sha256_file(&path)?;
        let expected = self.recorded()?.get(rel).cloned();
        match expected {
            None => {
                return Err(Coded::new(
                    ExitKind::MissingArtifact,
                    format!(
                        "no manifest in {} records {rel}",
                        self.root.join(MANIFEST_DIR).display()
                    ),
                )
                .into())
            }
            Some(e) if e != actual => {
                return Err(Coded::new(
                    ExitKind::Checksum,
                    format!("checksum mismatch for {rel}: manifest has {e}, file has {actual}"),
                )
                .into())
            }
            Some(_) => {}
        }
        self.inputs.push(Artifact {
            path: rel.to_string(),
            sha256: actual,
        });
        Ok(path)
    }

    pub fn has_input(&mut self, rel: &str) -> bool {
        self.path(rel).is_file()
    }

    pub fn output(&mut self, rel: &str, bytes: &[u8]) -> Result<()> {
        let path = self.path(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        self.outputs.retain(|a| a.path != rel);
        self.outputs.push(Artifact {
            path: rel.to_string(),
            sha256: sha256_hex(bytes),
        });
        log::info!("wrote {}", path.display());
        Ok(())
    }

    pub fn output_json<T: Serialize>(&mut self, rel: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.output(rel, text.as_bytes())
    }

    pub fn output_jsonl<T: Serialize>(&mut self, rel: &str, items: &[T]) -> Result<()> {
        self.output(rel, vpdistill::util::to_jsonl_string(items).as_bytes())
    }

    /// Writes `manifests/<name>.json`.
    pub fn finish(self, name: &str) -> Result<PathBuf> {
        let manifest = RunManifest {
            command: self.command,
            config_hash: self.config_hash,
            seed: self.seed,
            workers: self.workers,
            inputs: self.inputs,
            outputs: self.outputs,
            started_at: self.started_at,
            finished_at: now(),
        };
        let dir = self.root.join(MANIFEST_DIR);
        fs::create_dir_all(&dir)?;
        let path = dir.join(format!("{name}.json"));
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        fs::write(&path, text)?;
        Ok(path)
    }
}
