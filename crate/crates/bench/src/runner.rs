//! Runs one experiment and condenses it into a summary.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use dgs_core::sim::{CsvSink, DivergenceReport, MetricsRecord, MetricsSink, RunOutput, Simulation};
use dgs_core::tensor::{ENTRY_BYTES, PREFIX_BYTES};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{BenchError, Result};

/// Bytes of one uncompressed message: the sparse prefix plus 8 bytes per value.
pub fn dense_message_bytes(params: usize) -> u64 {
    (PREFIX_BYTES + 8 * params) as u64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Divergence {
    pub worker: u32,
    pub step: u64,
    pub sim_time_ms: f64,
    pub reason: String,
}

impl From<DivergenceReport> for Divergence {
    fn from(r: DivergenceReport) -> Self {
        Self {
            worker: r.worker,
            step: r.step,
            sim_time_ms: r.sim_time_ms,
            reason: r.reason,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub label: String,
    pub method: String,
    pub workers: u32,
    pub seed: u64,
    pub parameters: usize,
    pub exchanges: u64,
    pub sim_time_ms: f64,
    pub final_loss: f64,
    pub final_accuracy: Option<f64>,
    pub total_bytes_up: u64,
    pub total_bytes_down: u64,
    pub mean_staleness: f64,
    pub max_staleness: u64,
    /// Upward bytes sent over the bytes the same exchanges would take uncompressed.
    pub compression_ratio_up: f64,
    pub compression_ratio_down: f64,
    /// Mean nonzero entries per upward message.
    pub mean_entries_up: f64,
    pub warnings: Vec<String>,
    pub divergence: Option<Divergence>,
}

impl Summary {
    pub fn build(cfg: &ExperimentConfig, seed: u64, params: usize, out: &RunOutput, warnings: Vec<String>) -> Self {
        let m = &out.metrics;
        let total_up: u64 = m.last().map_or(0, |r| r.cum_bytes_up);
        let total_down: u64 = m.last().map_or(0, |r| r.cum_bytes_down);
        let n = m.len() as u64;
        let dense = (n * dense_message_bytes(params)) as f64;
        let ratio = |bytes: u64| if n == 0 { 0.0 } else { bytes as f64 / dense };
        let mean_staleness = if n == 0 {
            0.0
        } else {
            m.iter().map(|r| r.staleness as f64).sum::<f64>() / n as f64
        };
        let entries: usize = m.iter().map(|r| (r.bytes_up - PREFIX_BYTES) / ENTRY_BYTES).sum();
        Self {
            label: cfg.label(),
            method: cfg.method.name().to_string(),
            workers: cfg.effective_workers(),
            seed,
            parameters: params,
            exchanges: out.exchanges,
            sim_time_ms: out.sim_time_ms,
            final_loss: out.final_eval.loss,
            final_accuracy: out.final_eval.accuracy,
            total_bytes_up: total_up,
            total_bytes_down: total_down,
            mean_staleness,
            max_staleness: m.iter().map(|r| r.staleness).max().unwrap_or(0),
            compression_ratio_up: ratio(total_up),
            compression_ratio_down: ratio(total_down),
            mean_entries_up: if n == 0 { 0.0 } else { entries as f64 / n as f64 },
            warnings,
            divergence: out.divergence.clone().map(Into::into),
        }
    }
}

pub struct Report {
    pub summary: Summary,
    pub metrics: Vec<MetricsRecord>,
}

/// Runs `cfg` with `seed`, streaming metrics into `sink`.
pub fn run_with_sink(cfg: &ExperimentConfig, seed: u64, sink: &mut dyn MetricsSink) -> Result<Report> {
    let prepared = cfg.prepare(seed)?;
    let task = cfg.task.build()?;
    let params = task.partition().total();
    let sim = Simulation::new(task.as_ref(), prepared.sim)?;
    let out = sim.run_with_sink(sink)?;
    let summary = Summary::build(cfg, seed, params, &out, prepared.warnings);
    Ok(Report {
        summary,
        metrics: out.metrics,
    })
}

pub fn run(cfg: &ExperimentConfig, seed: u64) -> Result<Report> {
    let mut sink = Vec::new();
    run_with_sink(cfg, seed, &mut sink)
}

/// `out/run.csv` → `out/run.summary.json`.
pub fn summary_path(csv: &Path) -> PathBuf {
    let stem = csv
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    csv.with_file_name(format!("{stem}.summary.json"))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| BenchError::io(dir, e))?;
    }
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| BenchError::io(path, e))
}

pub fn write_summary(summary: &Summary, path: &Path) -> Result<()> {
    let mut out = create(path)?;
    serde_json::to_writer_pretty(&mut out, summary).map_err(|e| BenchError::io(path, e.into()))?;
    writeln!(out)
        .and_then(|_| out.flush())
        .map_err(|e| BenchError::io(path, e))
}

/// Runs and writes the metrics CSV at `csv` plus the summary next to it.
///
/// The CSV is streamed, so a diverged run still leaves its partial metrics.
pub fn run_to_files(cfg: &ExperimentConfig, seed: u64, csv: &Path) -> Result<Summary> {
    cfg.prepare(seed)?;
    let file = create(csv)?;
    let mut sink = CsvSink::new(file).map_err(|e| BenchError::io(csv, e))?;
    let report = run_with_sink(cfg, seed, &mut sink)?;
    sink.into_inner().flush().map_err(|e| BenchError::io(csv, e))?;
    write_summary(&report.summary, &summary_path(csv))?;
    Ok(report.summary)
}
