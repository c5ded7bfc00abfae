//! Executes a scenario and collects plot-ready rows.

use anyhow::{Context, Result};
use serde::Serialize;
use serde_json::{json, Value};
use starnoma_core::closed_form::{rates_closed, rates_closed_many};
use starnoma_core::freeprob::{asymptotic_rates_many, AsymptoticReport};
use starnoma_core::mc_rates::{mc_sweep, McSweep};
use starnoma_core::pgam::optimize;
use starnoma_core::SystemConfig;

use crate::scenario::{Pipeline, Point, Scenario, SweepAxis};

/// One line of `results.csv`. Standard errors are empty for deterministic
/// pipelines.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ResultRow {
    pub pipeline: &'static str,
    pub axis: &'static str,
    pub value: f64,
    pub snr_db: f64,
    pub tx: usize,
    pub panels: usize,
    pub i1: f64,
    pub i2: f64,
    pub sum: f64,
    pub t: f64,
    pub stderr_i1: Option<f64>,
    pub stderr_i2: Option<f64>,
}

/// One line of `trace.csv`; iteration 0 is the starting point.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TraceRow {
    pub value: f64,
    pub iteration: usize,
    pub sum_rate: f64,
    pub step_size: Option<f64>,
    pub grad_norm: Option<f64>,
}

/// One line of `trials.csv`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrialRow {
    pub value: f64,
    pub trial: u64,
    pub i1: f64,
    pub i2: f64,
    pub t: f64,
}

/// One line of `theta.csv`: the optimized coefficient of one element.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ThetaRow {
    pub value: f64,
    pub panel: usize,
    pub element: usize,
    pub phase1: f64,
    pub phase2: f64,
    pub beta1: f64,
}

#[derive(Clone, Debug, Default)]
pub struct RunOutput {
    pub results: Vec<ResultRow>,
    pub traces: Vec<TraceRow>,
    pub trials: Vec<TrialRow>,
    pub thetas: Vec<ThetaRow>,
    pub summary: Value,
}

fn row(
    pipeline: &'static str,
    axis: SweepAxis,
    value: f64,
    cfg: &SystemConfig,
    rates: (f64, f64, f64),
    stderr: Option<[f64; 2]>,
) -> ResultRow {
    let (i1, i2, t) = rates;
    ResultRow {
        pipeline,
        axis: axis.name(),
        value,
        snr_db: cfg.snr_db(),
        tx: cfg.tx,
        panels: cfg.panels.len(),
        i1,
        i2,
        sum: i1 + i2,
        t,
        stderr_i1: stderr.map(|s| s[0]),
        stderr_i2: stderr.map(|s| s[1]),
    }
}

/// Points that share statistics and coefficients are evaluated together.
fn batches(axis: SweepAxis, points: &[Point]) -> Vec<&[Point]> {
    match axis {
        SweepAxis::Snr => vec![points],
        _ => points.chunks(1).collect(),
    }
}

fn configs(batch: &[Point]) -> Vec<SystemConfig> {
    batch.iter().map(|p| p.cfg.clone()).collect()
}

fn run_mc(
    s: &Scenario,
    axis: SweepAxis,
    points: &[Point],
    out: &mut RunOutput,
) -> Result<Vec<ResultRow>> {
    let mut rows = Vec::new();
    for batch in batches(axis, points) {
        let first = &batch[0];
        let McSweep { reports, trials } = mc_sweep(
            &first.stats,
            &first.theta,
            &configs(batch),
            s.run.trials,
            s.run.seed,
            s.rate_options(),
        )
        .with_context(|| format!("Monte-Carlo rates at {} = {}", axis.name(), first.value))?;
        for ((p, r), records) in batch.iter().zip(reports).zip(trials) {
            rows.push(row(
                "mc",
                axis,
                p.value,
                &p.cfg,
                (r.i1, r.i2, r.t),
                Some(r.stderr),
            ));
            if s.run.per_trial {
                out.trials.extend(records.into_iter().map(|t| TrialRow {
                    value: p.value,
                    trial: t.trial,
                    i1: t.i1,
                    i2: t.i2,
                    t: t.t,
                }));
            }
        }
    }
    Ok(rows)
}

fn run_deterministic(
    s: &Scenario,
    axis: SweepAxis,
    points: &[Point],
    closed: bool,
) -> Result<Vec<ResultRow>> {
    let opts = s.asymptotic_options();
    let name = if closed { "closed" } else { "prop1" };
    let mut rows = Vec::new();
    for batch in batches(axis, points) {
        let first = &batch[0];
        let cfgs = configs(batch);
        let reports: Vec<AsymptoticReport> = if closed {
            rates_closed_many(&first.stats, &first.theta, &cfgs, &opts)
        } else {
            asymptotic_rates_many(&first.stats, &first.theta, &cfgs, &opts)
        }
        .with_context(|| format!("{name} rates at {} = {}", axis.name(), first.value))?;
        for (p, r) in batch.iter().zip(reports) {
            rows.push(row(name, axis, p.value, &p.cfg, (r.i1, r.i2, r.t), None));
        }
    }
    Ok(rows)
}

fn rel_gap(a: f64, b: f64) -> f64 {
    if b == 0.0 {
        a.abs()
    } else {
        (a - b).abs() / b.abs()
    }
}

fn run_pgam(
    s: &Scenario,
    axis: SweepAxis,
    points: &[Point],
    out: &mut RunOutput,
) -> Result<Vec<ResultRow>> {
    let opts = s.pgam_options();
    let mut rows = Vec::new();
    let mut summary = Vec::new();
    for p in points {
        let context = || format!("phase optimization at {} = {}", axis.name(), p.value);
        let start = rates_closed(&p.stats, &p.theta, &p.cfg, &opts.rates).with_context(context)?;
        let trace = optimize(&p.stats, &p.cfg, &p.theta, &opts).with_context(context)?;
        let end =
            rates_closed(&p.stats, &trace.theta, &p.cfg, &opts.rates).with_context(context)?;
        rows.push(row(
            "pgam_start",
            axis,
            p.value,
            &p.cfg,
            (start.i1, start.i2, start.t),
            None,
        ));
        rows.push(row(
            "pgam",
            axis,
            p.value,
            &p.cfg,
            (end.i1, end.i2, end.t),
            None,
        ));
        for (j, &rate) in trace.sum_rates.iter().enumerate() {
            out.traces.push(TraceRow {
                value: p.value,
                iteration: j,
                sum_rate: rate,
                step_size: j.checked_sub(1).map(|k| trace.steps[k]),
                grad_norm: j.checked_sub(1).map(|k| trace.grad_norms[k]),
            });
        }
        for k in 0..trace.theta.panels().len() {
            let (a, b) = (trace.theta.panel(k, 0), trace.theta.panel(k, 1));
            for (e, (x, y)) in a.iter().zip(b).enumerate() {
                out.thetas.push(ThetaRow {
                    value: p.value,
                    panel: k,
                    element: e,
                    phase1: x.arg(),
                    phase2: y.arg(),
                    beta1: x.norm_sqr(),
                });
            }
        }
        if trace.stalled {
            log::warn!("line search stalled at {} = {}", axis.name(), p.value);
        }
        summary.push(json!({
            "value": p.value,
            "iterations": trace.iterations(),
            "converged": trace.converged,
            "stalled": trace.stalled,
            "start_sum_rate": trace.sum_rates[0],
            "final_sum_rate": trace.final_sum_rate(),
        }));
    }
    out.summary["pgam"] = Value::Array(summary);
    Ok(rows)
}

/// Runs every sweep point of `s`.
pub fn run(s: &Scenario) -> Result<RunOutput> {
    let points = s.points()?;
    let (axis, _) = s.sweep_values();
    let mut out = RunOutput {
        summary: json!({ "pipeline": s.run.pipeline.name(), "points": points.len() }),
        ..Default::default()
    };
    log::info!(
        "{} pipeline over {} point(s) on {}",
        s.run.pipeline.name(),
        points.len(),
        axis.name()
    );
    out.results = match s.run.pipeline {
        Pipeline::Mc => run_mc(s, axis, &points, &mut out)?,
        Pipeline::Prop1 => run_deterministic(s, axis, &points, false)?,
        Pipeline::Closed => run_deterministic(s, axis, &points, true)?,
        Pipeline::Pgam => run_pgam(s, axis, &points, &mut out)?,
        Pipeline::Compare => {
            let mc = run_mc(s, axis, &points, &mut out)?;
            let asy = run_deterministic(s, axis, &points, false)?;
            let (mut g1, mut g2) = (0.0f64, 0.0f64);
            for (m, a) in mc.iter().zip(&asy) {
                g1 = g1.max(rel_gap(a.i1, m.i1));
                g2 = g2.max(rel_gap(a.i2, m.i2));
            }
            log::info!(
                "largest relative gap to Monte-Carlo: I1 {:.3}%, I2 {:.3}%",
                100.0 * g1,
                100.0 * g2
            );
            out.summary["max_relative_gap"] = json!({ "i1": g1, "i2": g2 });
            // Interleave so that each sweep point's rows are adjacent.
            mc.into_iter().zip(asy).flat_map(|(m, a)| [m, a]).collect()
        }
    };
    Ok(out)
}
