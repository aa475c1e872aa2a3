//! Run manifests: every subcommand stamps its outputs with the exact inputs
//! that produced them, so identical `(command, config, seed, version)` runs
//! are byte-for-byte reproducible and verifiable.

use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub tool_version: String,
    /// Output file names relative to the out dir.
    pub outputs: Vec<String>,
}

/// Digest of the config file contents, the override list, and the seed.
pub fn config_hash(config_bytes: &[u8], overrides: &[String], seed: u64) -> String {
    let mut h = Sha256::new();
    h.update(config_bytes);
    for o in overrides {
        h.update([0u8]);
        h.update(o.as_bytes());
    }
    h.update([0u8]);
    h.update(seed.to_le_bytes());
    hex::encode(&h.finalize()[..16])
}

pub fn write_manifest(
    out_dir: &Path,
    command: &str,
    config_hash: &str,
    seed: u64,
    outputs: &[String],
) -> Result<(), CliError> {
    let manifest = RunManifest {
        command: command.to_string(),
        config_hash: config_hash.to_string(),
        seed,
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        outputs: outputs.to_vec(),
    };
    let path = out_dir.join(format!("{command}_manifest.json"));
    let mut body = serde_json::to_string_pretty(&manifest)
        .map_err(|e| CliError::Config(format!("manifest serialization: {e}")))?;
    body.push('\n');
    std::fs::write(path, body).map_err(CliError::Io)?;
    Ok(())
}
