//! Experiment runner for score-based VAMP: configuration, orchestration and
//! file output for the `scvamp` binary.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod experiment;
pub mod output;

use std::path::Path;

use serde_json::{json, Value};

use scvamp_core::dsm::{save_weights, MlpScoreNet, TrainingReport};
use scvamp_core::Error as CoreError;

pub use config::{ExperimentConfig, ExperimentKind};
pub use experiment::{CliError, ExperimentOutput};

use output::{exit_csv, records_from_run, trace_csv, write_atomic, PLOT_SCRIPT};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

fn write(path: &Path, contents: &[u8]) -> Result<(), CliError> {
    write_atomic(path, contents).map_err(|e| CliError::io(format!("writing {}", path.display()), e))
}

fn json_bytes(v: &Value) -> Vec<u8> {
    let mut s = serde_json::to_string_pretty(v).expect("json value serializes");
    s.push('\n');
    s.into_bytes()
}

/// `summary.json` contents: provenance plus the resolved configuration.
pub fn summary(cfg: &ExperimentConfig, threads: Option<usize>, results: &Value, wall_clock_secs: f64) -> Value {
    json!({
        "scvamp_version": VERSION,
        "experiment": cfg.kind.name(),
        "seed": cfg.seed,
        "config_hash": cfg.hash(),
        "threads": threads.unwrap_or_else(rayon::current_num_threads),
        "snr_convention": config::SNR_FORMULA,
        "config": cfg,
        "results": results,
        "wall_clock_secs": wall_clock_secs,
    })
}

/// Runs a resolved experiment and writes its files into `dir`. A run that
/// aborts mid-way still leaves the rows it completed in `trace.csv`.
pub fn run_to_dir(cfg: &ExperimentConfig, dir: &Path, threads: Option<usize>) -> Result<Value, CliError> {
    let (res, secs) = experiment::with_threads(threads, || experiment::timed(|| experiment::run_experiment(cfg, None)));
    let out = match res {
        Ok(out) => out,
        Err(CliError::Core(CoreError::RunAborted {
            iteration,
            reason,
            trace,
        })) => {
            write(
                &dir.join("trace.csv"),
                trace_csv(&records_from_run(&trace, None)).as_bytes(),
            )?;
            return Err(CliError::Core(CoreError::RunAborted {
                iteration,
                reason,
                trace,
            }));
        }
        Err(e) => return Err(e),
    };
    write(&dir.join("trace.csv"), trace_csv(&out.records).as_bytes())?;
    if let Some(curves) = &out.exit {
        write(&dir.join("exit_curves.csv"), exit_csv(curves).as_bytes())?;
    }
    if let Some(d) = &out.diagnostics {
        write(&dir.join("diagnostics.json"), &json_bytes(d))?;
    }
    write(&dir.join("plot.py"), PLOT_SCRIPT.as_bytes())?;
    let s = summary(cfg, threads, &out.results, secs);
    write(&dir.join("summary.json"), &json_bytes(&s))?;
    Ok(s)
}

/// Trains the pair score network and writes `weights.json` and
/// `training.json` into `dir`.
pub fn train_to_dir(
    cfg: &ExperimentConfig,
    dir: &Path,
    threads: Option<usize>,
) -> Result<(MlpScoreNet, Value), CliError> {
    let (net, report): (MlpScoreNet, TrainingReport) =
        experiment::with_threads(threads, || experiment::train_pair_score(cfg))?;
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(format!("creating {}", dir.display()), e))?;
    save_weights(&net, &dir.join("weights.json"))?;
    let quality = match cfg.prior() {
        scvamp_core::score::Prior::PairwiseGaussian(p) => {
            let (per_sigma, avg) = experiment::with_threads(threads, || experiment::score_quality(&net, &p, cfg.seed))?;
            Some(json!({
                "sigmas": experiment::eval_sigmas(),
                "pairs_per_sigma": experiment::EVAL_PAIRS_PER_SIGMA,
                "relative_rms_error": per_sigma,
                "mean_relative_rms_error": avg,
            }))
        }
        _ => None,
    };
    let v = json!({
        "scvamp_version": VERSION,
        "seed": cfg.dsm.seed,
        "config_hash": cfg.hash(),
        "dsm": cfg.dsm,
        "report": report,
        "score_vs_analytic": quality,
    });
    write(&dir.join("training.json"), &json_bytes(&v))?;
    Ok((net, v))
}
