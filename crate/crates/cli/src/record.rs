//! Reproducibility record written next to every command's outputs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use agedit::io::{sha256_hex, write_atomic};
use serde::Serialize;

#[derive(Debug, Serialize)]
pub struct RunRecord {
    pub command: &'static str,
    pub version: &'static str,
    pub seed: Option<u64>,
    /// SHA-256 of the effective configuration as canonical JSON.
    pub config_hash: String,
    pub config: serde_json::Value,
    /// SHA-256 of the checkpoint this run produced, or consumed when it
    /// produced none.
    pub checkpoint_hash: Option<String>,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

impl RunRecord {
    pub fn new(command: &'static str, seed: Option<u64>, config: &impl Serialize) -> anyhow::Result<Self> {
        let config = serde_json::to_value(config)?;
        // serde_json maps keep keys sorted, so this is canonical.
        let config_hash = sha256_hex(serde_json::to_string(&config)?.as_bytes());
        Ok(Self {
            command,
            version: env!("CARGO_PKG_VERSION"),
            seed,
            config_hash,
            config,
            checkpoint_hash: None,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
        })
    }

    pub fn input(&mut self, name: &str, path: &Path) -> anyhow::Result<()> {
        let hash = if path.is_dir() {
            agedit::io::sha256_tree(path)?
        } else {
            agedit::io::sha256_file(path)?
        };
        self.inputs.insert(name.to_string(), hash);
        Ok(())
    }

    pub fn output(&mut self, name: &str, path: &Path) -> anyhow::Result<String> {
        let hash = agedit::io::sha256_file(path)?;
        self.outputs.insert(name.to_string(), hash.clone());
        Ok(hash)
    }

    pub fn write(&self, path: &Path) -> anyhow::Result<()> {
        write_atomic(path, serde_json::to_string_pretty(self)?.as_bytes())?;
        Ok(())
    }
}

/// `run.json` inside an output directory.
pub fn in_dir(dir: &Path) -> PathBuf {
    dir.join("run.json")
}

/// `<file>.run.json` beside a single-file output.
pub fn beside(file: &Path) -> PathBuf {
    let name = file
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    file.with_file_name(format!("{name}.run.json"))
}
