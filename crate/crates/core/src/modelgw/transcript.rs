use std::fs::{File, OpenOptions};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{GatewayError, Query, Response};

/// One line of a transcript file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub sample_id: String,
    pub backend_id: String,
    pub prompt_sha256: String,
    pub response: Option<String>,
    pub latency_ms: u64,
    /// Milliseconds since the Unix epoch; 0 for deterministic backends.
    pub ts: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

pub fn prompt_sha256(prompt: &str) -> String {
    hex::encode(Sha256::digest(prompt.as_bytes()))
}

pub fn record_transcript(
    backend_id: &str,
    q: &Query,
    outcome: &Result<Response, GatewayError>,
    ts: u64,
) -> TranscriptEntry {
    let (response, latency_ms, error) = match outcome {
        Ok(r) => (Some(r.text.clone()), r.latency_ms, None),
        Err(e) => (None, 0, Some(e.to_string())),
    };
    TranscriptEntry {
        sample_id: q.sample_id.clone(),
        backend_id: backend_id.to_string(),
        prompt_sha256: prompt_sha256(&q.prompt.text),
        response,
        latency_ms,
        ts,
        error,
    }
}

/// Serialized JSONL appender. A sink that cannot be opened or written
/// degrades to a no-op after logging a warning.
#[derive(Debug)]
pub struct TranscriptSink {
    path: PathBuf,
    out: Mutex<Option<BufWriter<File>>>,
}

impl TranscriptSink {
    pub fn create(path: &Path) -> Self {
        let out = match OpenOptions::new().create(true).write(true).truncate(true).open(path) {
            Ok(f) => Some(BufWriter::new(f)),
            Err(e) => {
                log::warn!("transcript sink {} unavailable: {e}", path.display());
                None
            }
        };
        Self {
            path: path.to_path_buf(),
            out: Mutex::new(out),
        }
    }

    pub fn is_available(&self) -> bool {
        self.out.lock().map(|o| o.is_some()).unwrap_or(false)
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&self, entry: &TranscriptEntry) {
        let mut guard = self.out.lock().expect("transcript sink poisoned");
        if let Some(w) = guard.as_mut() {
            let line = serde_json::to_string(entry).expect("transcript entry serializes");
            if let Err(e) = writeln!(w, "{line}") {
                log::warn!("transcript sink {} failed: {e}; disabling", self.path.display());
                *guard = None;
            }
        }
    }

    pub fn flush(&self) {
        let mut guard = self.out.lock().expect("transcript sink poisoned");
        if let Some(w) = guard.as_mut() {
            if let Err(e) = w.flush() {
                log::warn!("transcript sink {} failed to flush: {e}", self.path.display());
                *guard = None;
            }
        }
    }
}

impl Drop for TranscriptSink {
    fn drop(&mut self) {
        self.flush();
    }
}

pub fn read_transcript(path: &Path) -> io::Result<Vec<TranscriptEntry>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| {
                io::Error::new(io::ErrorKind::InvalidData, format!("{}:{}: {e}", path.display(), i + 1))
            })
        })
        .collect()
}
