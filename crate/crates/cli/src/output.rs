//! CSV/JSON emission and atomic file writes.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use scvamp_core::state_evolution::{ExitCurves, SeTrace};
use scvamp_core::vamp::RunTrace;

pub const TRACE_HEADER: &str = "# scvamp-trace v1";
pub const EXIT_HEADER: &str = "# scvamp-exit v1";
pub const TRACE_COLUMNS: [&str; 14] = [
    "iter",
    "v_in_A",
    "v_out_A",
    "v_in_B",
    "v_out_B",
    "alpha_A",
    "alpha_B",
    "fisher_A",
    "fisher_B",
    "calib_A",
    "calib_B",
    "mse_actual",
    "mse_se",
    "clip_events",
];

/// One `trace.csv` line. Missing values are written as empty fields.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub iter: usize,
    pub v_in_a: Option<f64>,
    pub v_out_a: Option<f64>,
    pub v_in_b: Option<f64>,
    pub v_out_b: Option<f64>,
    pub alpha_a: Option<f64>,
    pub alpha_b: Option<f64>,
    pub fisher_a: Option<f64>,
    pub fisher_b: Option<f64>,
    pub calib_a: Option<f64>,
    pub calib_b: Option<f64>,
    pub mse_actual: Option<f64>,
    pub mse_se: Option<f64>,
    pub clip_events: usize,
}

fn finite(x: f64) -> Option<f64> {
    x.is_finite().then_some(x)
}

/// Algorithm rows, with the SE prediction of the same iteration attached.
pub fn records_from_run(trace: &RunTrace, se: Option<&SeTrace>) -> Vec<TraceRecord> {
    trace
        .rows
        .iter()
        .map(|r| TraceRecord {
            iter: r.iter,
            v_in_a: finite(r.v_in_a),
            v_out_a: finite(r.v_out_a),
            v_in_b: finite(r.v_in_b),
            v_out_b: finite(r.v_out_b),
            alpha_a: finite(r.alpha_a),
            alpha_b: finite(r.alpha_b),
            fisher_a: finite(r.fisher_a),
            fisher_b: finite(r.fisher_b),
            calib_a: finite(r.calib_a),
            calib_b: finite(r.calib_b),
            mse_actual: r.mse_actual,
            mse_se: se
                .and_then(|s| s.rows.get(r.iter))
                .and_then(|s| finite(s.predicted_mse)),
            clip_events: r.clip_events,
        })
        .collect()
}

/// SE-only rows; the per-symbol Fisher column holds `(1 - α)/v`.
pub fn records_from_se(se: &SeTrace) -> Vec<TraceRecord> {
    se.rows
        .iter()
        .map(|r| TraceRecord {
            iter: r.iter,
            v_in_a: finite(r.v_in_a),
            v_out_a: finite(r.v_out_a),
            v_in_b: finite(r.v_in_b),
            v_out_b: finite(r.v_out_b),
            alpha_a: finite(r.alpha_a),
            alpha_b: finite(r.alpha_b),
            fisher_a: finite((1.0 - r.alpha_a) / r.v_in_a),
            fisher_b: finite((1.0 - r.alpha_b) / r.v_in_b),
            calib_a: None,
            calib_b: None,
            mse_actual: None,
            mse_se: finite(r.predicted_mse),
            clip_events: 0,
        })
        .collect()
}

/// Shortest decimal that parses back to the same `f64`.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:?}")
}

fn opt(x: Option<f64>) -> String {
    x.map(fmt_f64).unwrap_or_default()
}

pub fn trace_csv(records: &[TraceRecord]) -> String {
    let mut s = String::new();
    writeln!(s, "{TRACE_HEADER}").unwrap();
    writeln!(s, "{}", TRACE_COLUMNS.join(",")).unwrap();
    for r in records {
        let fields = [
            r.iter.to_string(),
            opt(r.v_in_a),
            opt(r.v_out_a),
            opt(r.v_in_b),
            opt(r.v_out_b),
            opt(r.alpha_a),
            opt(r.alpha_b),
            opt(r.fisher_a),
            opt(r.fisher_b),
            opt(r.calib_a),
            opt(r.calib_b),
            opt(r.mse_actual),
            opt(r.mse_se),
            r.clip_events.to_string(),
        ];
        writeln!(s, "{}", fields.join(",")).unwrap();
    }
    s
}

/// Inverse of [`trace_csv`].
pub fn parse_trace_csv(text: &str) -> Result<Vec<TraceRecord>, String> {
    let mut lines = text.lines();
    if lines.next() != Some(TRACE_HEADER) {
        return Err("missing trace header".into());
    }
    if lines.next() != Some(TRACE_COLUMNS.join(",").as_str()) {
        return Err("unexpected trace columns".into());
    }
    let num = |s: &str| -> Result<Option<f64>, String> {
        if s.is_empty() {
            Ok(None)
        } else {
            s.parse().map(Some).map_err(|e| format!("bad number {s:?}: {e}"))
        }
    };
    lines
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != TRACE_COLUMNS.len() {
                return Err(format!("expected {} fields, got {}", TRACE_COLUMNS.len(), f.len()));
            }
            Ok(TraceRecord {
                iter: f[0].parse().map_err(|e| format!("bad iter: {e}"))?,
                v_in_a: num(f[1])?,
                v_out_a: num(f[2])?,
                v_in_b: num(f[3])?,
                v_out_b: num(f[4])?,
                alpha_a: num(f[5])?,
                alpha_b: num(f[6])?,
                fisher_a: num(f[7])?,
                fisher_b: num(f[8])?,
                calib_a: num(f[9])?,
                calib_b: num(f[10])?,
                mse_actual: num(f[11])?,
                mse_se: num(f[12])?,
                clip_events: f[13].parse().map_err(|e| format!("bad clip count: {e}"))?,
            })
        })
        .collect()
}

/// Curve rows carry `v_in` and both transfer values; staircase rows carry
/// the iteration, `v_in_A`, `v_out_A` and `v_out_B`.
pub fn exit_csv(curves: &ExitCurves) -> String {
    let mut s = String::new();
    writeln!(s, "{EXIT_HEADER}").unwrap();
    writeln!(s, "series,iter,v_in,v_out_A,v_out_B").unwrap();
    for ((v, a), b) in curves.grid.iter().zip(&curves.curve_a).zip(&curves.curve_b) {
        writeln!(s, "curve,,{},{},{}", fmt_f64(*v), fmt_f64(*a), fmt_f64(*b)).unwrap();
    }
    for st in &curves.staircase {
        writeln!(
            s,
            "staircase,{},{},{},{}",
            st.iter,
            fmt_f64(st.v_in_a),
            fmt_f64(st.v_out_a),
            fmt_f64(st.v_out_b)
        )
        .unwrap();
    }
    s
}

pub const PLOT_SCRIPT: &str = r##"#!/usr/bin/env python3
"""Plots the CSV outputs of an scvamp run. Axes are log-log by default."""
import csv
import sys
from pathlib import Path

import matplotlib.pyplot as plt

LINEAR = "--linear" in sys.argv
out = Path(__file__).resolve().parent


def rows(name):
    with open(out / name) as f:
        return list(csv.DictReader(line for line in f if not line.startswith("#")))


def num(s):
    return float(s) if s else float("nan")


if (out / "trace.csv").exists():
    t = rows("trace.csv")
    it = [int(r["iter"]) for r in t]
    plt.figure()
    plt.plot(it, [num(r["mse_actual"]) for r in t], "o-", label="SC-VAMP (actual)")
    plt.plot(it, [num(r["mse_se"]) for r in t], "x--", label="SE")
    if not LINEAR:
        plt.yscale("log")
    plt.xlabel("iteration")
    plt.ylabel("MSE")
    plt.legend()
    plt.savefig(out / "mse.png", dpi=150)

if (out / "exit_curves.csv").exists():
    e = rows("exit_curves.csv")
    c = [r for r in e if r["series"] == "curve"]
    s = [r for r in e if r["series"] == "staircase"]
    plt.figure()
    plt.plot([num(r["v_in"]) for r in c], [num(r["v_out_A"]) for r in c], label="Module A")
    plt.plot([num(r["v_out_B"]) for r in c], [num(r["v_in"]) for r in c], label="Module B (inverse)")
    xs, ys = [], []
    for r in s:
        xs += [num(r["v_in"]), num(r["v_out_B"])]
        ys += [num(r["v_out_A"]), num(r["v_out_A"])]
    plt.plot(xs, ys, "g-", lw=0.8, label="SE staircase")
    if not LINEAR:
        plt.xscale("log")
        plt.yscale("log")
    plt.xlabel("v_in,A")
    plt.ylabel("v_out,A")
    plt.legend()
    plt.savefig(out / "exit.png", dpi=150)
"##;

/// Writes through a temporary file in the same directory, then renames.
pub fn write_atomic(path: &Path, contents: &[u8]) -> std::io::Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(contents)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}
