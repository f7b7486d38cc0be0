use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

/// Machine-readable summary printed after every command.
#[derive(Debug, Serialize)]
pub struct RunReport {
    pub command: String,
    pub wall_ms: f64,
    pub threads: usize,
    /// Input path to the first 16 hex digits of its SHA-256.
    pub inputs: BTreeMap<String, String>,
    pub outputs: Vec<PathBuf>,
    pub metrics: BTreeMap<String, Value>,
    #[serde(skip)]
    started: Option<Instant>,
}

impl RunReport {
    pub fn new(command: &str) -> Self {
        Self {
            command: command.to_string(),
            wall_ms: 0.0,
            threads: rayon::current_num_threads(),
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
            metrics: BTreeMap::new(),
            started: Some(Instant::now()),
        }
    }

    pub fn input(&mut self, path: &Path) -> anyhow::Result<()> {
        let bytes = std::fs::read(path)?;
        let digest = Sha256::digest(&bytes);
        let hex: String = digest.iter().take(8).map(|b| format!("{b:02x}")).collect();
        self.inputs.insert(path.display().to_string(), hex);
        Ok(())
    }

    pub fn output(&mut self, path: &Path) {
        self.outputs.push(path.to_path_buf());
    }

    pub fn metric(&mut self, key: &str, value: impl Into<Value>) {
        self.metrics.insert(key.to_string(), value.into());
    }

    pub fn finish(mut self) -> Self {
        if let Some(t) = self.started.take() {
            self.wall_ms = t.elapsed().as_secs_f64() * 1e3;
        }
        self
    }
}
