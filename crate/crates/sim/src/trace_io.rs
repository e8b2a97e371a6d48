//! JSONL traces: one `{"id", "input_len", "output_len", "arrival"?}` per line.

use std::fs;
use std::io::Write;
use std::path::Path;

use dimmpim_core::trace::{Trace, TraceRecord};

use crate::IoError;

pub fn parse_trace(text: &str, path: &Path) -> Result<Trace, IoError> {
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |reason: String| IoError::Line { path: path.to_path_buf(), line: line_no, reason };
        let r: TraceRecord = serde_json::from_str(line).map_err(|e| bad(e.to_string()))?;
        if r.input_len == 0 || r.output_len == 0 {
            return Err(bad("input_len and output_len must be >= 1".into()));
        }
        if !(r.arrival >= 0.0 && r.arrival.is_finite()) {
            return Err(bad("arrival must be a finite time >= 0".into()));
        }
        records.push(r);
    }
    Ok(Trace::new(records, path.display().to_string()).map_err(dimmpim_core::Error::from)?)
}

/// Loads a trace and, if `sample_n` is given, draws that many records
/// deterministically under `seed`.
pub fn load_trace(path: impl AsRef<Path>, sample_n: Option<usize>, seed: u64) -> Result<Trace, IoError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(IoError::io(path))?;
    let t = parse_trace(&text, path)?;
    match sample_n {
        Some(n) => Ok(t.sample(n, seed).map_err(dimmpim_core::Error::from)?),
        None => Ok(t),
    }
}

pub fn save_trace(t: &Trace, path: impl AsRef<Path>) -> Result<(), IoError> {
    let path = path.as_ref();
    let mut out = Vec::new();
    for r in &t.records {
        serde_json::to_writer(&mut out, r).map_err(|source| IoError::Json { path: path.to_path_buf(), source })?;
        out.push(b'\n');
    }
    fs::File::create(path).and_then(|mut f| f.write_all(&out)).map_err(IoError::io(path))
}
