use std::collections::BTreeMap;
use std::path::Path;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};
use crate::files::{read_json, sha256_file, write_json};

pub const MANIFEST_FILE: &str = "manifest.json";

/// Provenance record written next to every command's outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// Effective settings of the run.
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub version: String,
    pub started_unix_seconds: u64,
    pub wall_clock_seconds: f64,
    /// Input path to SHA-256 digest.
    pub inputs: BTreeMap<String, String>,
    /// Output file (relative to the output directory) to SHA-256 digest.
    pub outputs: BTreeMap<String, String>,
}

/// Collects manifest fields while a command runs.
pub struct ManifestBuilder {
    command: String,
    started: Instant,
    started_unix: u64,
    inputs: BTreeMap<String, String>,
}

impl ManifestBuilder {
    pub fn start(command: &str) -> Self {
        let started_unix = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
        Self { command: command.into(), started: Instant::now(), started_unix, inputs: BTreeMap::new() }
    }

    pub fn input(&mut self, path: &Path) -> CliResult<()> {
        self.inputs.insert(path.display().to_string(), sha256_file(path)?);
        Ok(())
    }

    /// Digests `outputs` (relative to `dir`) and writes `dir/manifest.json`.
    pub fn finish(self, dir: &Path, config: serde_json::Value, seed: Option<u64>, outputs: &[String]) -> CliResult<RunManifest> {
        let outputs = outputs.iter().map(|o| Ok((o.clone(), sha256_file(&dir.join(o))?))).collect::<CliResult<_>>()?;
        let manifest = RunManifest {
            command: self.command,
            config,
            seed,
            version: env!("CARGO_PKG_VERSION").into(),
            started_unix_seconds: self.started_unix,
            wall_clock_seconds: self.started.elapsed().as_secs_f64(),
            inputs: self.inputs,
            outputs,
        };
        write_json(&dir.join(MANIFEST_FILE), &manifest)?;
        Ok(manifest)
    }
}

impl RunManifest {
    pub fn load(dir: &Path) -> CliResult<Self> {
        read_json(&dir.join(MANIFEST_FILE))
    }

    /// Recomputes every input digest and fails on the first mismatch.
    pub fn verify_inputs(&self) -> CliResult<()> {
        for (path, digest) in &self.inputs {
            let now = sha256_file(Path::new(path))?;
            if &now != digest {
                return Err(CliError::Usage(format!("{path}: digest changed since the run ({digest} -> {now})")));
            }
        }
        Ok(())
    }
}
