//! Output files of a run: accuracy matrix, metrics, diagnostics, sweep and
//! persisted state.
//!
//! Floats in CSV files carry 17 significant digits so that they round-trip
//! exactly. `metrics.json` is deterministic except for the `volatile` key,
//! which holds the timestamp and wall-clock times.

use std::fs;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde_json::{json, Value};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::harness::{
    loss_change_histogram, AccMatrix, DiagnosticsRecord, RunReport, SweepRow, FORMULA_VERSION,
    OPPOSING_FORMULA,
};

pub const ACC_MATRIX_FILE: &str = "acc_matrix.csv";
pub const METRICS_FILE: &str = "metrics.json";
pub const DIAGNOSTICS_FILE: &str = "diagnostics.csv";
pub const SWEEP_FILE: &str = "sweep.csv";
pub const BASELINE_FILE: &str = "baseline.csv";
pub const STATE_FILE: &str = "past_state.bin";
/// Key of the only nondeterministic part of `metrics.json`.
pub const VOLATILE_KEY: &str = "volatile";
/// Loss-change threshold of the reported positive-tail mass.
pub const TAIL_THRESHOLD: f64 = 0.5;

/// 17 significant digits, scientific notation.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(fmt_f64).unwrap_or_default()
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Writer::from_writer(file))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e))
}

fn write_records(path: &Path, header: &[String], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(header).map_err(|e| csv_error(path, e))?;
    for r in rows {
        w.write_record(r).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// `row,<task names…>`; one row per finished task, then `baseline` if known.
pub fn write_acc_matrix(path: &Path, acc: &AccMatrix, task_names: &[String]) -> Result<()> {
    let mut header = vec!["row".to_string()];
    header.extend(task_names.iter().cloned());
    let mut rows: Vec<Vec<String>> = acc
        .a
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let mut row = vec![format!(
                "after_{}",
                task_names.get(i).map_or("?", String::as_str)
            )];
            row.extend(r.iter().copied().map(fmt_f64));
            row
        })
        .collect();
    if let Some(b) = &acc.baseline {
        let mut row = vec!["baseline".to_string()];
        row.extend(b.iter().copied().map(fmt_f64));
        rows.push(row);
    }
    write_records(path, &header, &rows)
}

/// Loss deltas on held-out batches and opposing-update magnitudes, one
/// record per line, distinguished by the `record` column.
pub fn write_diagnostics(path: &Path, diag: &DiagnosticsRecord) -> Result<()> {
    let header: Vec<String> = [
        "record",
        "after_task",
        "past_task",
        "batch",
        "loss_before",
        "loss_after",
        "value",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    let mut rows: Vec<Vec<String>> = diag
        .loss_deltas
        .iter()
        .map(|d| {
            vec![
                "loss_delta".into(),
                d.after_task.to_string(),
                d.past_task.to_string(),
                d.batch.to_string(),
                fmt_f64(d.before),
                fmt_f64(d.after),
                fmt_f64(d.delta()),
            ]
        })
        .collect();
    rows.extend(diag.opposing.iter().map(|&(t, m)| {
        vec![
            "opposing".into(),
            t.to_string(),
            (t - 1).to_string(),
            String::new(),
            String::new(),
            String::new(),
            fmt_f64(m),
        ]
    }));
    write_records(path, &header, &rows)
}

pub fn write_sweep(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let header: Vec<String> = ["lambda", "oa", "bwt"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let rows: Vec<Vec<String>> = rows
        .iter()
        .map(|r| vec![fmt_f64(r.lambda), fmt_f64(r.oa), fmt_opt(r.bwt)])
        .collect();
    write_records(path, &header, &rows)
}

/// `task,name,accuracy` for single-task baselines.
pub fn write_baselines(path: &Path, names: &[String], accs: &[f64]) -> Result<()> {
    let header: Vec<String> = ["task", "name", "accuracy"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let rows: Vec<Vec<String>> = names
        .iter()
        .zip(accs)
        .enumerate()
        .map(|(t, (n, &a))| vec![t.to_string(), n.clone(), fmt_f64(a)])
        .collect();
    write_records(path, &header, &rows)
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn write_json(path: &Path, value: &Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn unix_seconds() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

/// Nondeterministic fields, kept under [`VOLATILE_KEY`].
pub fn volatile_block(wall_time_ms: &[f64]) -> Value {
    json!({
        "timestamp_unix_s": unix_seconds(),
        "wall_time_ms": wall_time_ms,
    })
}

fn header(config: &RunConfig, stream_hash: &str) -> Result<serde_json::Map<String, Value>> {
    let mut m = serde_json::Map::new();
    m.insert(
        "formula_versions".into(),
        json!({ "metrics": FORMULA_VERSION, "opposing": OPPOSING_FORMULA }),
    );
    m.insert("config".into(), serde_json::to_value(config)?);
    m.insert("stream_hash".into(), json!(stream_hash));
    m.insert("task_names".into(), json!(task_names(config)));
    Ok(m)
}

pub fn task_names(config: &RunConfig) -> Vec<String> {
    config.stream.tasks.iter().map(|t| t.name.clone()).collect()
}

/// Everything about a run as one self-describing JSON document.
pub fn metrics_json(config: &RunConfig, report: &RunReport) -> Result<Value> {
    let out = &report.outcome;
    let mut m = header(config, &out.stream_hash)?;
    let metrics = report.metrics;
    let general = report.general.as_ref();
    m.insert(
        "metrics".into(),
        json!({
            "oa": metrics.map(|x| x.oa),
            "fwt": metrics.and_then(|x| x.fwt),
            "bwt": metrics.and_then(|x| x.bwt),
            "ga": general.map(|g| g.ga),
            "delta_ga": general.map(|g| g.delta_ga),
            "ga_per_task": general.map(|g| g.per_task.clone()),
        }),
    );
    m.insert("acc_matrix".into(), serde_json::to_value(&out.acc)?);
    let histograms = loss_change_histogram(&out.diagnostics, config.output.histogram_bin_width)?;
    m.insert(
        "diagnostics".into(),
        json!({
            "tail_threshold": TAIL_THRESHOLD,
            "tail_mass": out.diagnostics.tail_mass(TAIL_THRESHOLD),
            "opposing": out.diagnostics.opposing,
            "histograms": histograms
                .iter()
                .map(|h| json!({
                    "past_task": h.past_task,
                    "bin_width": h.bin_width,
                    "bins": h.counts.iter().map(|(&k, &c)| json!([h.edge(k), c])).collect::<Vec<_>>(),
                }))
                .collect::<Vec<_>>(),
        }),
    );
    m.insert("aborted".into(), json!(out.aborted));
    m.insert(
        VOLATILE_KEY.into(),
        volatile_block(&out.diagnostics.wall_time_ms),
    );
    Ok(Value::Object(m))
}

/// Metadata for a sweep directory.
pub fn sweep_json(config: &RunConfig, stream_hash: &str, rows: &[SweepRow]) -> Result<Value> {
    let mut m = header(config, stream_hash)?;
    m.insert("sweep".into(), serde_json::to_value(rows)?);
    m.insert(VOLATILE_KEY.into(), volatile_block(&[]));
    Ok(Value::Object(m))
}

/// Metadata for a baseline directory.
pub fn baseline_json(config: &RunConfig, stream_hash: &str, accs: &[f64]) -> Result<Value> {
    let mut m = header(config, stream_hash)?;
    m.insert("baseline".into(), json!(accs));
    m.insert(VOLATILE_KEY.into(), volatile_block(&[]));
    Ok(Value::Object(m))
}

/// Writes every file of a finished run into `dir`.
pub fn write_run(dir: &Path, config: &RunConfig, report: &RunReport) -> Result<()> {
    let names = task_names(config);
    write_acc_matrix(&dir.join(ACC_MATRIX_FILE), &report.outcome.acc, &names)?;
    write_diagnostics(&dir.join(DIAGNOSTICS_FILE), &report.outcome.diagnostics)?;
    write_bytes(&dir.join(STATE_FILE), &report.outcome.past.to_bytes())?;
    write_json(&dir.join(METRICS_FILE), &metrics_json(config, report)?)
}

/// Creates `dir` if needed. An existing non-empty directory is an error
/// unless `force` is set.
pub fn prepare_run_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        if !dir.is_dir() {
            return Err(Error::InvalidArgument(format!(
                "{} exists and is not a directory",
                dir.display()
            )));
        }
        let non_empty = fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .next()
            .is_some();
        if non_empty && !force {
            return Err(Error::InvalidArgument(format!(
                "run directory {} is not empty (use --force to overwrite)",
                dir.display()
            )));
        }
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// `metrics.json` with the volatile key removed, for reproducibility checks.
pub fn without_volatile(mut v: Value) -> Value {
    if let Value::Object(m) = &mut v {
        m.remove(VOLATILE_KEY);
    }
    v
}
