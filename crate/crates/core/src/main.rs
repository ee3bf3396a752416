use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use rsalign::commands::{cmd_align, cmd_dris, cmd_metrics, cmd_train, RecordError};
use rsalign::io::RunConfig;
use rsalign::selfcheck::{run_selfcheck, SelfcheckOptions};
use rsalign::{Error, Result};

/// Dynamic-resolution ROI selection, alignment losses, toy VLM training and
/// caption metrics.
///
/// Configuration is layered: built-in defaults, then `--config`, then
/// `RSALIGN_*` environment variables (e.g. `RSALIGN_ALIGN_DELTA=0.25`),
/// then `--seed`.
#[derive(Debug, Parser)]
#[command(name = "rsalign", version)]
struct Cli {
    /// Flat `key = value` configuration file.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Directory for reports and artifacts.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Overrides `train.seed` (and the selfcheck seed).
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Coarse-to-fine ROI pass over one FGRD grid.
    Dris {
        /// FGRD feature grid.
        #[arg(long, value_name = "PATH")]
        data: PathBuf,
    },
    /// Alignment losses for every annotation record.
    Align {
        /// JSONL annotations.
        #[arg(long, value_name = "PATH")]
        data: PathBuf,
        /// Directory that `image_path` is resolved against; defaults to the
        /// annotation file's directory.
        #[arg(long, value_name = "DIR")]
        grids: Option<PathBuf>,
    },
    /// Caption and retrieval metrics for annotation records.
    Metrics {
        /// JSONL annotations with candidates.
        #[arg(long, value_name = "PATH")]
        data: PathBuf,
    },
    /// Trains the toy model on synthetic pairs.
    Train {
        #[arg(long, hide = true, value_name = "STEP")]
        inject_nonfinite_at: Option<usize>,
    },
    /// Runs the built-in property suite.
    Selfcheck {
        /// Random instances per gradient suite.
        #[arg(long, default_value_t = 50)]
        instances: usize,
        /// Skip the 200-step training run.
        #[arg(long)]
        skip_training: bool,
        #[arg(long, hide = true)]
        corrupt_gradient: bool,
    },
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &cli.config {
        let text =
            fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        cfg.apply_text(&text)?;
    }
    cfg.apply_env(std::env::vars())?;
    if let Some(seed) = cli.seed {
        cfg.train.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_json<T: serde::Serialize>(v: &T) {
    match serde_json::to_string_pretty(v) {
        Ok(s) => println!("{s}"),
        Err(e) => eprintln!("error: cannot serialize report: {e}"),
    }
}

fn report_record_errors(errors: &[RecordError]) -> bool {
    for e in errors {
        eprintln!("error: record {}: {}", e.index, e.error);
    }
    errors.is_empty()
}

fn run(cli: &Cli) -> Result<bool> {
    let cfg = load_config(cli)?;
    let out = cli.out.as_deref();
    Ok(match &cli.command {
        Command::Dris { data } => {
            print_json(&cmd_dris(&cfg, data, out)?);
            true
        }
        Command::Align { data, grids } => {
            let dir = grids
                .clone()
                .unwrap_or_else(|| data.parent().map(Path::to_path_buf).unwrap_or_default());
            let report = cmd_align(&cfg, data, &dir, out)?;
            print_json(&report);
            report_record_errors(&report.errors)
        }
        Command::Metrics { data } => {
            let report = cmd_metrics(data, out)?;
            print!("{}", report.table());
            report_record_errors(&report.errors)
        }
        Command::Train {
            inject_nonfinite_at,
        } => {
            let mut cfg = cfg;
            cfg.train.inject_nonfinite_at = *inject_nonfinite_at;
            let summary = cmd_train(&cfg, out)?;
            println!(
                "steps={} early_mean={} late_mean={} frozen_unchanged={}",
                summary.report.steps.len(),
                summary.early_mean.map_or("-".into(), |v| format!("{v:.6}")),
                summary.late_mean.map_or("-".into(), |v| format!("{v:.6}")),
                summary.frozen_unchanged
            );
            summary.frozen_unchanged
        }
        Command::Selfcheck {
            instances,
            skip_training,
            corrupt_gradient,
        } => {
            let report = run_selfcheck(&SelfcheckOptions {
                seed: cli.seed.unwrap_or(0),
                instances: *instances,
                training: !*skip_training,
                corrupt_gradient: *corrupt_gradient,
            });
            for check in &report.checks {
                if let Ok(line) = serde_json::to_string(check) {
                    println!("{line}");
                }
            }
            println!(
                "{}",
                serde_json::json!({
                    "summary": { "passed": report.passed, "failed": report.failed, "seconds": report.seconds }
                })
            );
            for f in report.failures() {
                eprintln!("FAIL {}: {}", f.name, f.detail);
            }
            report.ok()
        }
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
