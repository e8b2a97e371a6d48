//! Run summaries as CSV or JSON, plus a throughput table normalized to a
//! named baseline.

use std::fs;
use std::path::{Path, PathBuf};

use dimmpim_core::sim::RunMetrics;
use dimmpim_core::timeline::Timeline;
use serde::{Deserialize, Serialize};

use crate::IoError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Csv,
    Json,
}

impl Format {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "csv" => Some(Format::Csv),
            "json" => Some(Format::Json),
            _ => None,
        }
    }
}

/// One record per run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub policy: String,
    pub trace: String,
    pub requests: u64,
    pub completed: u64,
    pub rejected: u64,
    pub output_tokens: u64,
    pub makespan_ns: f64,
    pub throughput_tps: f64,
    pub iterations: u64,
    pub tbt_p50_ns: f64,
    pub tbt_p99_ns: f64,
    pub ttft_p50_ns: f64,
    pub ttft_p99_ns: f64,
    pub gpu_busy_frac: f64,
    pub attn_busy_frac: f64,
    pub gpu_bubble_ns: f64,
    pub attn_bubble_ns: f64,
    pub bytes_critical: f64,
    pub bytes_async: f64,
    pub refresh_ns: f64,
    pub max_decode_batch: u64,
}

impl From<&RunMetrics> for Summary {
    fn from(m: &RunMetrics) -> Self {
        Self {
            policy: m.policy.clone(),
            trace: m.trace.clone(),
            requests: m.requests,
            completed: m.completed,
            rejected: m.rejected,
            output_tokens: m.output_tokens,
            makespan_ns: m.makespan_ns,
            throughput_tps: m.throughput_tps,
            iterations: m.iterations,
            tbt_p50_ns: m.tbt_p50_ns,
            tbt_p99_ns: m.tbt_p99_ns,
            ttft_p50_ns: m.ttft_p50_ns,
            ttft_p99_ns: m.ttft_p99_ns,
            gpu_busy_frac: m.gpu_busy_frac,
            attn_busy_frac: m.attn_busy_frac,
            gpu_bubble_ns: m.gpu_bubble_ns,
            attn_bubble_ns: m.attn_bubble_ns,
            bytes_critical: m.bytes_critical,
            bytes_async: m.bytes_async,
            refresh_ns: m.refresh_ns,
            max_decode_batch: m.max_decode_batch,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizedRow {
    pub trace: String,
    pub policy: String,
    pub throughput_tps: f64,
    /// Throughput over the baseline's on the same trace; empty when the
    /// baseline did not run.
    pub normalized: Option<f64>,
}

/// Policy names compare with `-` and `_` treated alike.
fn same_policy(a: &str, b: &str) -> bool {
    a.len() == b.len() && a.chars().zip(b.chars()).all(|(x, y)| x == y || matches!((x, y), ('-', '_') | ('_', '-')))
}

/// Throughput of every run relative to `baseline` on the same trace.
pub fn normalize(runs: &[RunMetrics], baseline: &str) -> Vec<NormalizedRow> {
    let mut warned: Vec<&str> = Vec::new();
    runs.iter()
        .map(|r| {
            let base = runs
                .iter()
                .find(|b| same_policy(&b.policy, baseline) && b.trace == r.trace)
                .map(|b| b.throughput_tps);
            if base.is_none() && !warned.contains(&r.trace.as_str()) {
                log::warn!("no {baseline} run for trace {}; reporting absolute throughput", r.trace);
                warned.push(&r.trace);
            }
            NormalizedRow {
                trace: r.trace.clone(),
                policy: r.policy.clone(),
                throughput_tps: r.throughput_tps,
                normalized: base.filter(|&b| b > 0.0).map(|b| r.throughput_tps / b),
            }
        })
        .collect()
}

fn write_rows<T: Serialize>(rows: &[T], path: &Path, format: Format) -> Result<(), IoError> {
    match format {
        Format::Csv => {
            let mut w = csv::Writer::from_path(path).map_err(|source| IoError::Csv { path: path.into(), source })?;
            for r in rows {
                w.serialize(r).map_err(|source| IoError::Csv { path: path.into(), source })?;
            }
            w.flush().map_err(IoError::io(path))
        }
        Format::Json => {
            let text =
                serde_json::to_string_pretty(rows).map_err(|source| IoError::Json { path: path.into(), source })?;
            fs::write(path, text).map_err(IoError::io(path))
        }
    }
}

pub fn read_summaries(path: &Path, format: Format) -> Result<Vec<Summary>, IoError> {
    match format {
        Format::Csv => {
            let mut r = csv::Reader::from_path(path).map_err(|source| IoError::Csv { path: path.into(), source })?;
            r.deserialize().collect::<Result<_, _>>().map_err(|source| IoError::Csv { path: path.into(), source })
        }
        Format::Json => {
            let text = fs::read_to_string(path).map_err(IoError::io(path))?;
            serde_json::from_str(&text).map_err(|source| IoError::Json { path: path.into(), source })
        }
    }
}

/// Writes `summary.{csv,json}` and `normalized.{csv,json}` into `dir`.
pub fn report(runs: &[RunMetrics], dir: &Path, format: Format, baseline: &str) -> Result<Vec<PathBuf>, IoError> {
    fs::create_dir_all(dir).map_err(IoError::io(dir))?;
    let ext = match format {
        Format::Csv => "csv",
        Format::Json => "json",
    };
    let summary = dir.join(format!("summary.{ext}"));
    let rows: Vec<Summary> = runs.iter().map(Summary::from).collect();
    write_rows(&rows, &summary, format)?;
    let norm = dir.join(format!("normalized.{ext}"));
    write_rows(&normalize(runs, baseline), &norm, format)?;
    Ok(vec![summary, norm])
}

/// Full metrics including per-iteration latency reports.
pub fn write_metrics_json(m: &RunMetrics, path: &Path) -> Result<(), IoError> {
    let text = serde_json::to_string(m).map_err(|source| IoError::Json { path: path.into(), source })?;
    fs::write(path, text).map_err(IoError::io(path))
}

pub fn write_timeline(tl: &Timeline, path: &Path) -> Result<(), IoError> {
    let text = serde_json::to_string(tl).map_err(|source| IoError::Json { path: path.into(), source })?;
    fs::write(path, text).map_err(IoError::io(path))
}
