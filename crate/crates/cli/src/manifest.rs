use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::Result;
use genref_core::checkpoint::{canonical_json, write_atomic};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub config: RunConfig,
    pub seed: u64,
    pub started_at_unix: f64,
    pub finished_at_unix: f64,
    pub outputs: Vec<PathBuf>,
    pub status: String,
}

pub fn unix_now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0.0, |d| d.as_secs_f64())
}

impl RunManifest {
    pub fn begin(command: &str, config: &RunConfig) -> Self {
        Self {
            command: command.to_owned(),
            argv: std::env::args().collect(),
            config: config.clone(),
            seed: config.seed,
            started_at_unix: unix_now(),
            finished_at_unix: 0.0,
            outputs: Vec::new(),
            status: "running".into(),
        }
    }

    /// Writes `OUT/<command>.manifest.json` atomically.
    pub fn finish(&mut self, out: &Path, status: &str) -> Result<PathBuf> {
        self.finished_at_unix = unix_now();
        self.status = status.to_owned();
        let path = out.join(format!("{}.manifest.json", self.command.replace(' ', "-")));
        write_atomic(&path, canonical_json(self)?.as_bytes())?;
        Ok(path)
    }
}
