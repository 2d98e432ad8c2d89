use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::args::Global;
use crate::CliError;

/// Everything that determines a run's output.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub version: String,
    pub seed: u64,
    pub global: Global,
    pub config: serde_json::Value,
    /// Input path → SHA-256 of its contents.
    pub inputs: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn new(subcommand: &str, global: &Global, config: &impl Serialize, inputs: &[&Path]) -> Result<Self, CliError> {
        let mut hashes = BTreeMap::new();
        for p in inputs {
            let bytes = fs::read(p).map_err(|e| CliError::from(hwlm::Error::io(*p, e)))?;
            hashes.insert(p.display().to_string(), hex(&Sha256::digest(&bytes)));
        }
        Ok(RunManifest {
            subcommand: subcommand.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed: global.seed,
            global: global.clone(),
            config: serde_json::to_value(config).map_err(|e| CliError::usage(e.to_string()))?,
            inputs: hashes,
        })
    }

    /// One log line: `# manifest {json}`.
    pub fn line(&self) -> String {
        format!("# manifest {}", serde_json::to_string(self).expect("manifest serializes"))
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
