//! Run manifests and per-run output directories.
//!
//! The directory name is a hash of everything that determines a run's
//! outputs: the command, its arguments, the configuration snapshot and the
//! seed. Wall-clock time and artifact paths are recorded but not hashed.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Environment variable overriding every seed of a run.
pub const SEED_ENV: &str = "TCLEAF_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// Full argument list after the program name, for re-running.
    pub args: Vec<String>,
    pub config: String,
    pub seed: u64,
    pub artifacts: Vec<String>,
    pub tool_version: String,
    pub wall_clock_secs: f64,
}

impl RunManifest {
    pub fn new(command: &str, args: &[String], config: String, seed: u64) -> Self {
        Self {
            command: command.into(),
            args: args.to_vec(),
            config,
            seed,
            artifacts: Vec::new(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            wall_clock_secs: 0.0,
        }
    }

    /// Hex SHA-256 of the reproducibility-relevant fields, truncated to 16 digits.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for part in [self.command.as_str(), &self.args.join("\u{1f}"), &self.config, &self.seed.to_string(), &self.tool_version] {
            h.update((part.len() as u64).to_le_bytes());
            h.update(part.as_bytes());
        }
        h.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn run_dir(&self, root: &Path) -> PathBuf {
        root.join(self.hash())
    }

    pub fn write(&self, dir: &Path) -> std::io::Result<PathBuf> {
        let p = dir.join("manifest.json");
        std::fs::write(&p, serde_json::to_string_pretty(self).expect("manifest serialises"))?;
        Ok(p)
    }

    pub fn read(path: &Path) -> std::io::Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
    }
}

/// The seed from the environment override, or `fallback`.
pub fn seed_override(fallback: u64) -> Result<u64, String> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v.trim().parse().map_err(|_| format!("{SEED_ENV}={v:?} is not an unsigned integer")),
        Err(_) => Ok(fallback),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_ignores_timing_and_artifacts() {
        let a = RunManifest::new("train", &["--epochs".into(), "2".into()], "x = 1\n".into(), 3);
        let mut b = a.clone();
        b.wall_clock_secs = 12.5;
        b.artifacts.push("log.csv".into());
        assert_eq!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 16);
        let mut c = a.clone();
        c.seed = 4;
        assert_ne!(a.hash(), c.hash());
        // Argument boundaries matter.
        let d = RunManifest::new("train", &["--epochs2".into()], "x = 1\n".into(), 3);
        assert_ne!(a.hash(), d.hash());
    }

    #[test]
    fn write_read() {
        let dir = tempfile::tempdir().unwrap();
        let m = RunManifest::new("eval", &[], String::new(), 0);
        let p = m.write(dir.path()).unwrap();
        assert_eq!(RunManifest::read(&p).unwrap(), m);
    }
}
