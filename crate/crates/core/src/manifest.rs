//! Run manifests: line-oriented records that hash-chain the pipeline stages.
//!
//! Each stage writes `manifest.txt` with its resolved-config hash, seed, the
//! manifests it consumed (upstream hashes) and the artifacts it produced
//! (path + content hash). Timestamps are deliberately absent so reruns with
//! the same seed produce identical bytes.
//!
//! Keys:
//!   stage = <name>
//!   seed = <u64>
//!   config_hash = <hex>
//!   upstream <stage> <hex>          (repeated)
//!   artifact <name> <path> <hex>    (repeated)
//!   extra <key> <value>             (repeated)

use crate::error::{CoreError, Result};
use std::path::Path;

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RunManifest {
    pub stage: String,
    pub seed: u64,
    pub config_hash: String,
    pub upstream: Vec<(String, String)>,
    /// (name, relative path, content hash)
    pub artifacts: Vec<(String, String, String)>,
    pub extra: Vec<(String, String)>,
}

impl RunManifest {
    pub fn new(stage: &str, seed: u64, config_hash: &str) -> Self {
        RunManifest {
            stage: stage.to_string(),
            seed,
            config_hash: config_hash.to_string(),
            ..Default::default()
        }
    }

    pub fn add_upstream(&mut self, other: &RunManifest) {
        self.upstream.push((other.stage.clone(), other.content_hash()));
    }

    pub fn add_artifact(&mut self, name: &str, path: &str, hash: &str) {
        self.artifacts.push((name.to_string(), path.to_string(), hash.to_string()));
    }

    pub fn add_extra(&mut self, key: &str, value: &str) {
        self.extra.push((key.to_string(), value.to_string()));
    }

    pub fn artifact(&self, name: &str) -> Option<(&str, &str)> {
        self.artifacts
            .iter()
            .find(|(n, _, _)| n == name)
            .map(|(_, p, h)| (p.as_str(), h.as_str()))
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("stage = {}\n", self.stage));
        out.push_str(&format!("seed = {}\n", self.seed));
        out.push_str(&format!("config_hash = {}\n", self.config_hash));
        for (stage, hash) in &self.upstream {
            out.push_str(&format!("upstream {stage} {hash}\n"));
        }
        for (name, path, hash) in &self.artifacts {
            out.push_str(&format!("artifact {name} {path} {hash}\n"));
        }
        for (k, v) in &self.extra {
            out.push_str(&format!("extra {k} {v}\n"));
        }
        out
    }

    pub fn content_hash(&self) -> String {
        crate::hash::hash_bytes(self.to_text().as_bytes())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CoreError::Prerequisite(format!("manifest {} unreadable: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut m = RunManifest::default();
        for (ln, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let bad = || CoreError::Validation(vec![format!("manifest line {}: '{line}' unparseable", ln + 1)]);
            if let Some(rest) = line.strip_prefix("stage = ") {
                m.stage = rest.to_string();
            } else if let Some(rest) = line.strip_prefix("seed = ") {
                m.seed = rest.parse().map_err(|_| bad())?;
            } else if let Some(rest) = line.strip_prefix("config_hash = ") {
                m.config_hash = rest.to_string();
            } else if let Some(rest) = line.strip_prefix("upstream ") {
                let mut parts = rest.split_whitespace();
                let (a, b) = (parts.next().ok_or_else(bad)?, parts.next().ok_or_else(bad)?);
                m.upstream.push((a.to_string(), b.to_string()));
            } else if let Some(rest) = line.strip_prefix("artifact ") {
                let mut parts = rest.split_whitespace();
                let (a, b, c) = (
                    parts.next().ok_or_else(bad)?,
                    parts.next().ok_or_else(bad)?,
                    parts.next().ok_or_else(bad)?,
                );
                m.artifacts.push((a.to_string(), b.to_string(), c.to_string()));
            } else if let Some(rest) = line.strip_prefix("extra ") {
                let (k, v) = rest.split_once(' ').ok_or_else(bad)?;
                m.extra.push((k.to_string(), v.to_string()));
            } else {
                return Err(bad());
            }
        }
        if m.stage.is_empty() {
            return Err(CoreError::Validation(vec!["manifest lacks a stage".to_string()]));
        }
        Ok(m)
    }

    /// Verifies that every listed artifact still exists with its recorded
    /// hash, relative to `base_dir`.
    pub fn verify_artifacts(&self, base_dir: &Path) -> Result<()> {
        for (name, path, hash) in &self.artifacts {
            let full = base_dir.join(path);
            if !full.exists() {
                return Err(CoreError::Prerequisite(format!(
                    "artifact {name} ({}) missing; rerun stage {}",
                    full.display(),
                    self.stage
                )));
            }
            let actual = crate::hash::hash_file(&full)?;
            if actual != *hash {
                return Err(CoreError::Prerequisite(format!(
                    "artifact {name} ({}) hash mismatch; rerun stage {}",
                    full.display(),
                    self.stage
                )));
            }
        }
        Ok(())
    }
}
