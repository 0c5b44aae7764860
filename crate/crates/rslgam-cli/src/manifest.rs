//! Run manifests: configuration hash, input digests, versions, timings.

use std::collections::BTreeMap;
use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

use rslgam::model::ModelConfig;

#[derive(Serialize)]
pub struct RunManifest {
    pub command: &'static str,
    pub config_hash: String,
    pub seed: u64,
    pub inputs: BTreeMap<String, String>,
    pub versions: BTreeMap<String, String>,
    pub wall_clock: BTreeMap<String, f64>,
}

impl RunManifest {
    pub fn new(command: &'static str, config: &ModelConfig, seed: u64) -> Self {
        let config_json = serde_json::to_string(config).expect("config serializes");
        let mut versions = BTreeMap::new();
        versions.insert("rslgam".into(), rslgam_version());
        versions.insert("rslgam-cli".into(), env!("CARGO_PKG_VERSION").into());
        Self {
            command,
            config_hash: sha256_hex(config_json.as_bytes()),
            seed,
            inputs: BTreeMap::new(),
            versions,
            wall_clock: BTreeMap::new(),
        }
    }

    pub fn with_input(mut self, name: &str, path: &Path) -> Result<Self, std::io::Error> {
        let bytes = std::fs::read(path)?;
        self.inputs.insert(name.to_string(), sha256_hex(&bytes));
        Ok(self)
    }

    pub fn with_timing(mut self, name: &str, seconds: f64) -> Self {
        self.wall_clock.insert(name.to_string(), seconds);
        self
    }
}

fn rslgam_version() -> String {
    // The library crate shares the workspace version.
    env!("CARGO_PKG_VERSION").to_string()
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn write(path: &Path, manifest: &RunManifest) -> Result<(), std::io::Error> {
    let text =
        serde_json::to_string_pretty(manifest).map_err(|e| std::io::Error::other(e.to_string()))?;
    std::fs::write(path, text)
}
