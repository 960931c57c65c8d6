//! Runs a directory of configs on a shared task and ranks the results.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::config::{ExperimentConfig, Method};
use crate::error::{BenchError, Result};
use crate::runner::{run_to_files, Summary};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankingRow {
    pub rank: usize,
    pub label: String,
    pub method: String,
    pub workers: u32,
    pub final_accuracy: Option<f64>,
    pub final_loss: f64,
    /// Accuracy difference to the baseline in percentage points, or the loss
    /// difference when the task has no accuracy.
    pub delta_vs_baseline: f64,
    pub compression_ratio_up: f64,
    pub diverged: bool,
}

/// `*.json` files in `dir`, sorted by file name.
pub fn load_dir(dir: &Path) -> Result<Vec<(PathBuf, ExperimentConfig)>> {
    let entries = fs::read_dir(dir).map_err(|e| BenchError::io(dir, e))?;
    let mut paths = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| BenchError::io(dir, e))?.path();
        if path.extension().is_some_and(|x| x == "json") && path.is_file() {
            paths.push(path);
        }
    }
    paths.sort();
    paths
        .into_iter()
        .map(|p| ExperimentConfig::load(&p).map(|c| (p, c)))
        .collect()
}

/// Checks the configs can be compared and returns the shared seed.
pub fn check_compatible(configs: &[ExperimentConfig], seed_override: Option<u64>) -> Result<u64> {
    let [first, rest @ ..] = configs else {
        return Err(BenchError::Mismatch("need at least two configs".into()));
    };
    if rest.is_empty() {
        return Err(BenchError::Mismatch("need at least two configs".into()));
    }
    for c in rest {
        if c.task != first.task {
            return Err(BenchError::Mismatch(format!(
                "`{}` and `{}` use different tasks",
                first.label(),
                c.label()
            )));
        }
        if seed_override.is_none() && c.seed != first.seed {
            return Err(BenchError::Mismatch(format!(
                "`{}` and `{}` use different seeds",
                first.label(),
                c.label()
            )));
        }
    }
    let mut labels: Vec<String> = configs.iter().map(|c| c.label()).collect();
    labels.sort();
    if let Some(w) = labels.windows(2).find(|w| w[0] == w[1]) {
        return Err(BenchError::Mismatch(format!("label `{}` used twice", w[0])));
    }
    Ok(seed_override.or(first.seed).unwrap_or(0))
}

/// Ranks summaries by accuracy (or loss), against the first msgd run or else the first run.
pub fn rank(summaries: &[Summary]) -> Vec<RankingRow> {
    let Some(baseline) = summaries
        .iter()
        .find(|s| s.method == Method::Msgd.name())
        .or(summaries.first())
    else {
        return Vec::new();
    };
    let by_accuracy = summaries.iter().all(|s| s.final_accuracy.is_some());
    let score = |s: &Summary| {
        if by_accuracy {
            s.final_accuracy.unwrap_or(f64::NAN)
        } else {
            -s.final_loss
        }
    };
    let mut order: Vec<&Summary> = summaries.iter().collect();
    order.sort_by(|a, b| score(b).total_cmp(&score(a)));
    order
        .into_iter()
        .enumerate()
        .map(|(i, s)| RankingRow {
            rank: i + 1,
            label: s.label.clone(),
            method: s.method.clone(),
            workers: s.workers,
            final_accuracy: s.final_accuracy,
            final_loss: s.final_loss,
            delta_vs_baseline: if by_accuracy {
                100.0 * (score(s) - score(baseline))
            } else {
                s.final_loss - baseline.final_loss
            },
            compression_ratio_up: s.compression_ratio_up,
            diverged: s.divergence.is_some(),
        })
        .collect()
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into())
}

pub fn ranking_csv(rows: &[RankingRow]) -> String {
    let mut out = String::from(
        "rank,label,method,workers,final_accuracy,final_loss,delta_vs_baseline,compression_ratio_up,diverged\n",
    );
    for r in rows {
        let acc = r.final_accuracy.map(|a| a.to_string()).unwrap_or_default();
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            r.rank,
            r.label,
            r.method,
            r.workers,
            acc,
            r.final_loss,
            r.delta_vs_baseline,
            r.compression_ratio_up,
            r.diverged
        );
    }
    out
}

pub fn ranking_table(rows: &[RankingRow]) -> String {
    let mut out = String::from("| rank | label | method | workers | accuracy | loss | delta | ratio up |\n");
    out.push_str("|---|---|---|---|---|---|---|---|\n");
    for r in rows {
        let _ = writeln!(
            out,
            "| {} | {} | {} | {} | {} | {:.4} | {:+.2} | {:.4} |{}",
            r.rank,
            r.label,
            r.method,
            r.workers,
            fmt_opt(r.final_accuracy),
            r.final_loss,
            r.delta_vs_baseline,
            r.compression_ratio_up,
            if r.diverged { " diverged" } else { "" }
        );
    }
    out
}

/// Runs every config in `dir` concurrently and writes per-label outputs plus
/// `ranking.csv` and `ranking.md` into `out`.
pub fn compare(dir: &Path, out: &Path, seed_override: Option<u64>) -> Result<Vec<RankingRow>> {
    let loaded = load_dir(dir)?;
    let configs: Vec<ExperimentConfig> = loaded.into_iter().map(|(_, c)| c).collect();
    let seed = check_compatible(&configs, seed_override)?;
    for c in &configs {
        c.prepare(seed)?;
    }
    fs::create_dir_all(out).map_err(|e| BenchError::io(out, e))?;
    let summaries: Vec<Summary> = std::thread::scope(|scope| {
        let handles: Vec<_> = configs
            .iter()
            .map(|c| {
                let csv = out.join(format!("{}.csv", c.label()));
                scope.spawn(move || run_to_files(c, seed, &csv))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("experiment thread panicked"))
            .collect::<Result<_>>()
    })?;
    let rows = rank(&summaries);
    let write = |name: &str, text: String| {
        let path = out.join(name);
        fs::write(&path, text).map_err(|e| BenchError::io(path, e))
    };
    write("ranking.csv", ranking_csv(&rows))?;
    write("ranking.md", ranking_table(&rows))?;
    Ok(rows)
}
