//! `manifest.json` bookkeeping: every file a subcommand writes gets an entry
//! with its hash, the command, the resolved config and the hashes of its inputs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use polaris_core::hash;
use serde_json::{json, Value};

pub const MANIFEST: &str = "manifest.json";

pub fn tool_version() -> String {
    format!("v{}", env!("CARGO_PKG_VERSION"))
}

/// Collects outputs and inputs of one subcommand invocation.
pub struct Provenance {
    root: PathBuf,
    command: String,
    config: Value,
    inputs: BTreeMap<String, String>,
    outputs: Vec<String>,
}

impl Provenance {
    pub fn new(root: &Path, command: &str, config: Value) -> Self {
        Provenance {
            root: root.to_path_buf(),
            command: command.to_string(),
            config,
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
        }
    }

    pub fn config_hash(&self) -> String {
        hash::json_hash(&self.config)
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        self.inputs.insert(self.rel(path), hash::sha256_hex(&bytes));
        Ok(())
    }

    pub fn inputs_from(&mut self, other: &Provenance) {
        self.inputs.extend(other.inputs.clone());
    }

    /// Records a file already on disk.
    pub fn output(&mut self, path: &Path) {
        let rel = self.rel(path);
        if !self.outputs.contains(&rel) {
            self.outputs.push(rel);
        }
    }

    /// Writes `bytes` to `path`, creating parent directories, and records it.
    pub fn write(&mut self, path: &Path, bytes: &[u8]) -> Result<()> {
        polaris_core::pipeline::write_file(path, bytes).with_context(|| format!("writing {}", path.display()))?;
        self.output(path);
        Ok(())
    }

    fn rel(&self, path: &Path) -> String {
        path.strip_prefix(&self.root)
            .unwrap_or(path)
            .to_string_lossy()
            .replace('\\', "/")
    }

    /// Merges this invocation's entries into the manifest under the root.
    pub fn commit(self) -> Result<()> {
        let path = self.root.join(MANIFEST);
        let mut manifest: Value = match std::fs::read(&path) {
            Ok(bytes) => serde_json::from_slice(&bytes).unwrap_or_else(|_| json!({})),
            Err(_) => json!({}),
        };
        if !manifest.is_object() {
            manifest = json!({});
        }
        let obj = manifest.as_object_mut().expect("object");
        obj.insert("tool_version".into(), json!(tool_version()));
        let entries = obj
            .entry("entries")
            .or_insert_with(|| json!({}))
            .as_object_mut()
            .context("manifest entries must be an object")?;
        let config_hash = self.config_hash();
        for rel in &self.outputs {
            let bytes = std::fs::read(self.root.join(rel)).with_context(|| format!("hashing {rel}"))?;
            entries.insert(
                rel.clone(),
                json!({
                    "sha256": hash::sha256_hex(&bytes),
                    "command": self.command,
                    "config": self.config,
                    "config_hash": config_hash,
                    "inputs": self.inputs,
                    "tool_version": tool_version(),
                }),
            );
        }
        // serde_json's default map is ordered, so the file is stable.
        polaris_core::pipeline::write_file(&path, &serde_json::to_vec_pretty(&manifest)?)?;
        Ok(())
    }
}
