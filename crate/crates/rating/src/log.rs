//! Append-only JSONL log, one fsynced line per event.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{ApiError, Result};
use crate::study::{RatingAck, RatingRecord, Source};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LogEntry {
    Session {
        session_id: String,
        created_at_ms: u64,
    },
    Rating {
        record: RatingRecord,
        source: Source,
        sample_id: String,
        ack: RatingAck,
    },
}

#[derive(Debug)]
pub struct RatingLog {
    path: PathBuf,
    file: File,
}

impl RatingLog {
    /// Opens (creating if needed) the log at `path` and returns its entries.
    pub fn open(path: &Path) -> Result<(Self, Vec<LogEntry>)> {
        let entries = if path.exists() { read_entries(path)? } else { Vec::new() };
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        let bytes = std::fs::read(path)?;
        if bytes.last().is_some_and(|&b| b != b'\n') {
            let keep = bytes.iter().rposition(|&b| b == b'\n').map_or(0, |p| p + 1);
            file.set_len(keep as u64)?;
        }
        Ok((
            Self {
                path: path.to_path_buf(),
                file,
            },
            entries,
        ))
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&mut self, entry: &LogEntry) -> Result<()> {
        let mut line = serde_json::to_vec(entry).map_err(|e| ApiError::Log(e.to_string()))?;
        line.push(b'\n');
        self.file.write_all(&line)?;
        self.file.sync_data()?;
        Ok(())
    }
}

/// Parses every line; a torn final line (crash mid-write) is ignored.
pub fn read_entries(path: &Path) -> Result<Vec<LogEntry>> {
    let reader = BufReader::new(File::open(path)?);
    let lines: Vec<String> = reader.lines().collect::<std::io::Result<_>>()?;
    let mut entries = Vec::with_capacity(lines.len());
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(line) {
            Ok(e) => entries.push(e),
            Err(_) if i + 1 == lines.len() => break,
            Err(e) => return Err(ApiError::Log(format!("{}:{}: {e}", path.display(), i + 1))),
        }
    }
    Ok(entries)
}
