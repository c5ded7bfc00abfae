//! CSV tables and the run manifest.

use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::pipeline::{ResultRow, RunOutput, ThetaRow, TraceRow, TrialRow};
use crate::scenario::Scenario;

/// `x` with 12 significant digits in scientific notation.
pub fn sig12(x: f64) -> String {
    if x == 0.0 {
        // Also folds −0 into one spelling.
        return "0".into();
    }
    if !x.is_finite() {
        return format!("{x}");
    }
    format!("{x:.11e}")
}

fn opt(x: Option<f64>) -> String {
    x.map(sig12).unwrap_or_default()
}

/// Rows that know their header and their formatted fields.
pub trait CsvRecord {
    const HEADER: &'static [&'static str];
    fn fields(&self) -> Vec<String>;
}

impl CsvRecord for ResultRow {
    const HEADER: &'static [&'static str] = &[
        "pipeline",
        "axis",
        "value",
        "snr_db",
        "tx",
        "panels",
        "i1",
        "i2",
        "sum",
        "t",
        "stderr_i1",
        "stderr_i2",
    ];
    fn fields(&self) -> Vec<String> {
        vec![
            self.pipeline.into(),
            self.axis.into(),
            sig12(self.value),
            sig12(self.snr_db),
            self.tx.to_string(),
            self.panels.to_string(),
            sig12(self.i1),
            sig12(self.i2),
            sig12(self.sum),
            sig12(self.t),
            opt(self.stderr_i1),
            opt(self.stderr_i2),
        ]
    }
}

impl CsvRecord for TraceRow {
    const HEADER: &'static [&'static str] =
        &["value", "iteration", "sum_rate", "step_size", "grad_norm"];
    fn fields(&self) -> Vec<String> {
        vec![
            sig12(self.value),
            self.iteration.to_string(),
            sig12(self.sum_rate),
            opt(self.step_size),
            opt(self.grad_norm),
        ]
    }
}

impl CsvRecord for TrialRow {
    const HEADER: &'static [&'static str] = &["value", "trial", "i1", "i2", "t"];
    fn fields(&self) -> Vec<String> {
        vec![
            sig12(self.value),
            self.trial.to_string(),
            sig12(self.i1),
            sig12(self.i2),
            sig12(self.t),
        ]
    }
}

impl CsvRecord for ThetaRow {
    const HEADER: &'static [&'static str] =
        &["value", "panel", "element", "phase1", "phase2", "beta1"];
    fn fields(&self) -> Vec<String> {
        vec![
            sig12(self.value),
            self.panel.to_string(),
            self.element.to_string(),
            sig12(self.phase1),
            sig12(self.phase2),
            sig12(self.beta1),
        ]
    }
}

/// Writes a header row plus one row per record.
pub fn emit_csv<R: CsvRecord>(path: &Path, records: &[R]) -> Result<()> {
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(file);
    w.write_record(R::HEADER)?;
    for r in records {
        w.write_record(r.fields())?;
    }
    w.flush()
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

#[derive(Serialize)]
struct Artifact {
    file: String,
    sha256: String,
}

/// Writes every table of `out` into `dir` and a `manifest.json` describing
/// the run. Returns the written paths.
pub fn write_all(
    dir: &Path,
    scenario: &Scenario,
    scenario_bytes: &[u8],
    out: &RunOutput,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut written = vec![dir.join("results.csv")];
    emit_csv(&written[0], &out.results)?;
    if !out.traces.is_empty() {
        written.push(dir.join("trace.csv"));
        emit_csv(written.last().unwrap(), &out.traces)?;
    }
    if !out.thetas.is_empty() {
        written.push(dir.join("theta.csv"));
        emit_csv(written.last().unwrap(), &out.thetas)?;
    }
    if !out.trials.is_empty() {
        written.push(dir.join("trials.csv"));
        emit_csv(written.last().unwrap(), &out.trials)?;
    }
    let mut artifacts = Vec::new();
    for p in &written {
        let bytes = std::fs::read(p)?;
        artifacts.push(Artifact {
            file: p.file_name().unwrap().to_string_lossy().into_owned(),
            sha256: sha256_hex(&bytes),
        });
    }
    let manifest = manifest(scenario, scenario_bytes, out, &artifacts)?;
    let path = dir.join("manifest.json");
    let mut f = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
    f.write_all(serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    f.write_all(b"\n")?;
    written.push(path);
    Ok(written)
}

fn manifest(
    scenario: &Scenario,
    scenario_bytes: &[u8],
    out: &RunOutput,
    artifacts: &[Artifact],
) -> Result<Value> {
    Ok(json!({
        "tool": env!("CARGO_PKG_NAME"),
        "version": env!("CARGO_PKG_VERSION"),
        "core_version": starnoma_core::VERSION,
        "scenario_sha256": sha256_hex(scenario_bytes),
        "config_sha256": sha256_hex(serde_json::to_string(scenario)?.as_bytes()),
        "seeds": {
            "statistics": scenario.statistics.seed,
            "theta": scenario.theta_seed(),
            "trials": scenario.run.seed,
        },
        "tolerances": {
            "solver": scenario.solver,
            "quadrature": scenario.quadrature,
            "delta": scenario.run.delta,
            "pgam_eps": scenario.pgam.eps,
        },
        "scenario": scenario,
        "summary": out.summary,
        "outputs": artifacts,
    }))
}
