//! Run manifests: command line, input digests, seed and timestamp.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use clip_core::error::Error;
use clip_core::report::{InputDigest, RunManifest};

pub fn command_line() -> String {
    std::env::args().collect::<Vec<_>>().join(" ")
}

fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    format!("{:x}", hasher.finalize())
}

/// Builds a manifest for the given invocation. The config digest hashes the
/// full command line; input digests hash file contents.
pub fn build(command: &str, seed: Option<u64>, inputs: &[&Path]) -> Result<RunManifest, Error> {
    let input_digests = inputs
        .iter()
        .map(|path| {
            let bytes = fs::read(path)?;
            Ok(InputDigest {
                path: path.display().to_string(),
                digest: sha256_hex(&bytes),
            })
        })
        .collect::<Result<Vec<_>, Error>>()?;
    Ok(RunManifest {
        command: command.to_string(),
        software_version: env!("CARGO_PKG_VERSION").to_string(),
        seed,
        timestamp: chrono::Utc::now().to_rfc3339(),
        digest_algorithm: "sha256".into(),
        config_digest: sha256_hex(command.as_bytes()),
        input_digests,
    })
}
