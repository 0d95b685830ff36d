//! Append-only JSON-lines request log.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::clock::{format_ms, SharedClock};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Outcome {
    Ok,
    Denied,
    Quota,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestLogEntry {
    pub timestamp: String,
    pub key_id: String,
    pub model: String,
    pub mode: String,
    pub outcome: Outcome,
    pub cpu_seconds: f64,
    pub wall_ms: u64,
}

struct Writer {
    file: Option<File>,
    last_ms: u64,
}

/// Serialized single writer. When the file cannot be written the entry goes
/// to stderr instead; logging never fails a request.
pub struct RequestLog {
    path: PathBuf,
    clock: SharedClock,
    writer: Mutex<Writer>,
}

impl RequestLog {
    pub fn open(path: &Path, clock: SharedClock) -> Self {
        let file = open_append(path)
            .map_err(|e| tracing::warn!(path = %path.display(), error = %e, "request log unavailable"))
            .ok();
        Self {
            path: path.to_path_buf(),
            clock,
            writer: Mutex::new(Writer { file, last_ms: 0 }),
        }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Appends one entry, stamping it with a timestamp that never goes
    /// backwards for this writer.
    pub fn log_request(
        &self,
        key_id: &str,
        model: &str,
        mode: &str,
        outcome: Outcome,
        cpu_seconds: f64,
        wall_ms: u64,
    ) -> RequestLogEntry {
        let mut w = self.writer.lock().unwrap();
        let now = self.clock.now_ms().max(w.last_ms);
        w.last_ms = now;
        let entry = RequestLogEntry {
            timestamp: format_ms(now),
            key_id: key_id.into(),
            model: model.into(),
            mode: mode.into(),
            outcome,
            cpu_seconds: (cpu_seconds * 1e6).round() / 1e6,
            wall_ms,
        };
        let mut line = serde_json::to_string(&entry).expect("log entry serializes");
        line.push('\n');
        let written = match w.file.as_mut() {
            Some(f) => f.write_all(line.as_bytes()).and_then(|_| f.flush()).is_ok(),
            None => false,
        };
        if !written {
            eprint!("{line}");
        }
        entry
    }
}

fn open_append(path: &Path) -> std::io::Result<File> {
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    OpenOptions::new().create(true).append(true).open(path)
}
