use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dgs_bench::gradcheck::{self, TaskName, TOLERANCE};
use dgs_bench::plot::{self, XAxis, YAxis};
use dgs_bench::runner::{run_to_files, summary_path};
use dgs_bench::{compare, BenchError, ExperimentConfig};

const EXIT_DIVERGED: u8 = 3;
const EXIT_CHECK_FAILED: u8 = 4;

#[derive(Parser)]
#[command(
    name = "dgs-bench",
    version,
    about = "Simulated asynchronous sparse training experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write its metrics CSV and summary JSON.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config seed.
        #[arg(long, env = "DGS_SEED")]
        seed: Option<u64>,
        /// Metrics CSV path; the summary goes next to it as `<stem>.summary.json`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run every `*.json` config in a directory and rank the results.
    Compare {
        #[arg(long)]
        configs: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, env = "DGS_SEED")]
        seed: Option<u64>,
    },
    /// Draw metrics CSVs as an SVG line chart, one series per file.
    Plot {
        #[arg(long = "input", required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "step")]
        x: XAxis,
        #[arg(long, value_enum, default_value = "loss")]
        y: YAxis,
    },
    /// Compare analytic gradients to central differences at random points.
    Gradcheck {
        #[arg(long, value_enum)]
        task: TaskName,
        #[arg(long, env = "DGS_SEED", default_value_t = 0)]
        seed: u64,
        #[arg(long, hide = true)]
        perturb_gradient: bool,
    },
}

fn fail(e: BenchError) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(e.exit_code() as u8)
}

fn main() -> ExitCode {
    match Cli::parse().command {
        Command::Run { config, seed, out } => {
            let cfg = match ExperimentConfig::load(&config) {
                Ok(c) => c,
                Err(e) => return fail(e),
            };
            let seed = seed.or(cfg.seed).unwrap_or(0);
            match run_to_files(&cfg, seed, &out) {
                Ok(summary) => {
                    for w in &summary.warnings {
                        eprintln!("warning: {w}");
                    }
                    if let Some(d) = &summary.divergence {
                        eprintln!(
                            "diverged at exchange {} (worker {}): {}; partial metrics in {}",
                            d.step,
                            d.worker,
                            d.reason,
                            out.display()
                        );
                        return ExitCode::from(EXIT_DIVERGED);
                    }
                    println!(
                        "{}: loss {:.6} accuracy {} ratio up {:.4} down {:.4}; summary in {}",
                        summary.label,
                        summary.final_loss,
                        summary.final_accuracy.map_or("-".into(), |a| format!("{a:.4}")),
                        summary.compression_ratio_up,
                        summary.compression_ratio_down,
                        summary_path(&out).display()
                    );
                    ExitCode::SUCCESS
                }
                Err(e) => fail(e),
            }
        }
        Command::Compare { configs, out, seed } => match compare::compare(&configs, &out, seed) {
            Ok(rows) => {
                print!("{}", compare::ranking_table(&rows));
                if rows.iter().any(|r| r.diverged) {
                    ExitCode::from(EXIT_DIVERGED)
                } else {
                    ExitCode::SUCCESS
                }
            }
            Err(e) => fail(e),
        },
        Command::Plot { inputs, out, x, y } => match plot::plot(&inputs, &out, x, y) {
            Ok(()) => ExitCode::SUCCESS,
            Err(e) => fail(e),
        },
        Command::Gradcheck {
            task,
            seed,
            perturb_gradient,
        } => match gradcheck::check(task, seed, perturb_gradient) {
            Ok(errors) => {
                for (i, e) in errors.iter().enumerate() {
                    println!("point {i}: max relative error {e:.3e}");
                }
                let worst = errors.iter().copied().fold(0.0, f64::max);
                if worst <= TOLERANCE {
                    println!("pass: worst {worst:.3e} ≤ {TOLERANCE:e}");
                    ExitCode::SUCCESS
                } else {
                    println!("fail: worst {worst:.3e} > {TOLERANCE:e}");
                    ExitCode::from(EXIT_CHECK_FAILED)
                }
            }
            Err(e) => fail(e),
        },
    }
}
