//! Checksums and run manifests.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST_FILE: &str = "manifest.json";

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_file(path: &Path) -> io::Result<String> {
    Ok(sha256_hex(&fs::read(path)?))
}

/// Everything needed to re-run one command: its arguments, resolved config,
/// checksummed inputs, seeds and produced files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub version: String,
    pub args: Vec<String>,
    pub config: serde_json::Value,
    /// Input path to SHA-256.
    pub inputs: BTreeMap<String, String>,
    pub seed: Option<u64>,
    pub derived_seeds: BTreeMap<String, u64>,
    pub artifacts: Vec<String>,
}

impl RunManifest {
    pub fn new(subcommand: impl Into<String>) -> Self {
        RunManifest {
            subcommand: subcommand.into(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            args: Vec::new(),
            config: serde_json::Value::Null,
            inputs: BTreeMap::new(),
            seed: None,
            derived_seeds: BTreeMap::new(),
            artifacts: Vec::new(),
        }
    }

    pub fn add_input(&mut self, path: &Path) -> io::Result<()> {
        let sum = sha256_file(path)?;
        self.inputs.insert(path.display().to_string(), sum);
        Ok(())
    }

    pub fn add_artifact(&mut self, path: &Path) {
        self.artifacts.push(path.display().to_string());
    }

    /// Writes `manifest.json` into `dir`.
    pub fn write(&self, dir: &Path) -> io::Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(io::Error::other)?;
        fs::write(dir.join(MANIFEST_FILE), text + "\n")
    }

    pub fn read(dir: &Path) -> io::Result<Self> {
        let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
        serde_json::from_str(&text).map_err(io::Error::other)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_digest() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let input = dir.path().join("in.txt");
        fs::write(&input, "abc").unwrap();
        let mut m = RunManifest::new("encipher");
        m.seed = Some(3);
        m.add_input(&input).unwrap();
        m.add_artifact(&dir.path().join("out.txt"));
        m.write(dir.path()).unwrap();
        assert_eq!(RunManifest::read(dir.path()).unwrap(), m);
    }
}
