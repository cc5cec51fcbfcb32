use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::Metrics;
use super::table::{fmt_f64, fmt_opt, read_series, write_csv, write_json};
use super::{ExperimentConfig, PlanKind};
use crate::discrepancy::{calibrate_tau_cap, detect_switch, rel_mae, score_ratio_items, step_of, DiscrepancySeries, Stage};
use crate::engine::numeric::{denoise, Control, StepView};
use crate::engine::{run, GroupResult, MixtureOracle, PlanVariant, RunResult, RunTrace};
use crate::error::{Error, Result};
use crate::mixture::Condition;

fn serial_reference(cfg: &ExperimentConfig) -> Result<RunResult> {
    let sched = cfg.schedule()?;
    let oracle = MixtureOracle { gm: &cfg.mixture, sched: &sched };
    let plan = cfg.plan()?.with_variant(PlanVariant::Serial);
    run(&plan, &sched, &oracle)
}

/// Runs the configured plan and scores it against the serial samples.
pub fn simulate(cfg: &ExperimentConfig) -> Result<(Metrics, RunResult)> {
    cfg.validate()?;
    let sched = cfg.schedule()?;
    let oracle = MixtureOracle { gm: &cfg.mixture, sched: &sched };
    let result = run(&cfg.plan()?, &sched, &oracle)?;
    let reference = if cfg.plan == PlanKind::Serial { result.x0.clone() } else { serial_reference(cfg)?.x0 };
    let metrics = Metrics::from_run(cfg.plan.name(), &result, &reference, cfg.psnr_peak)?;
    Ok((metrics, result))
}

#[derive(Serialize)]
struct TraceDoc<'a> {
    groups: &'a [GroupResult],
    steps: &'a RunTrace,
}

pub const TRACE_COLUMNS: [&str; 12] =
    ["group", "wave", "t", "step", "label", "event", "device", "src", "dst", "bytes", "start", "end"];

pub fn trace_rows(trace: &RunTrace, steps: usize) -> Vec<Vec<String>> {
    let mut rows = Vec::new();
    for s in &trace.steps {
        let head = [s.group.to_string(), s.wave.to_string(), s.t.to_string(), step_of(steps, s.t).to_string()];
        for b in &s.busy {
            let mut r = head.to_vec();
            r.extend([s.label.as_str().into(), "compute".into(), b.device.to_string()]);
            r.extend([String::new(), String::new(), String::new(), fmt_f64(b.start), fmt_f64(b.end)]);
            rows.push(r);
        }
        for m in &s.messages {
            let mut r = head.to_vec();
            r.extend([s.label.as_str().into(), "message".into(), String::new()]);
            r.extend([m.src.to_string(), m.dst.to_string(), m.bytes.to_string(), fmt_f64(m.depart), fmt_f64(m.arrive)]);
            rows.push(r);
        }
    }
    rows
}

/// Writes `metrics.json`, `trace.csv` and `trace.json` into `out`.
pub fn cmd_simulate(cfg: &ExperimentConfig, out: &Path) -> Result<Metrics> {
    let (metrics, result) = simulate(cfg)?;
    std::fs::create_dir_all(out).map_err(|source| Error::Io { path: out.into(), source })?;
    write_json(&out.join("metrics.json"), &metrics)?;
    write_csv(&out.join("trace.csv"), &TRACE_COLUMNS, &trace_rows(&result.trace, cfg.schedule.steps))?;
    write_json(&out.join("trace.json"), &TraceDoc { groups: &result.groups, steps: &result.trace })?;
    Ok(metrics)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub t: usize,
    pub step: usize,
    pub rel_mae: f64,
    pub score_ratio: f64,
    /// Two standard deviations of the per-sample values either side of
    /// the batch value, floored at 0.
    pub band_lo: f64,
    pub band_hi: f64,
    pub is_argmin: bool,
}

pub const CURVE_COLUMNS: [&str; 7] = ["t", "step", "rel_mae", "score_ratio", "band_lo", "band_hi", "is_argmin"];

/// Discrepancy curve of an exact run, descending `t`.
pub fn curve(cfg: &ExperimentConfig) -> Result<Vec<CurveRow>> {
    cfg.validate()?;
    let sched = cfg.schedule()?;
    let gm = &cfg.mixture;
    let oracle = MixtureOracle { gm, sched: &sched };
    let batch = cfg.batch();
    let all: Vec<usize> = (0..gm.components()).collect();
    let subsets: Vec<&[usize]> = batch
        .iter()
        .map(|b| match &b.condition {
            Condition::Conditional(s) => &s[..],
            Condition::Unconditional => &all[..],
        })
        .collect();
    let steps = sched.steps();
    let mut rows = Vec::with_capacity(steps);
    let mut obs = |v: &StepView| -> Result<()> {
        let m = rel_mae(v.eps_c, v.eps_u)?;
        let per: Vec<f64> = v
            .eps_c
            .iter()
            .zip(v.eps_u)
            .filter_map(|(c, u)| rel_mae(std::slice::from_ref(c), std::slice::from_ref(u)).ok())
            .collect();
        let sd = if per.len() > 1 {
            let mean = per.iter().sum::<f64>() / per.len() as f64;
            (per.iter().map(|p| (p - mean).powi(2)).sum::<f64>() / (per.len() - 1) as f64).sqrt()
        } else {
            0.0
        };
        let items: Vec<(&[usize], &[f64])> = subsets.iter().copied().zip(v.xs.iter().map(|x| &x[..])).collect();
        rows.push(CurveRow {
            t: v.t,
            step: step_of(steps, v.t),
            rel_mae: m,
            score_ratio: score_ratio_items(gm, &sched, &items, v.t)?,
            band_lo: (m - 2.0 * sd).max(0.0),
            band_hi: m + 2.0 * sd,
            is_argmin: false,
        });
        Ok(())
    };
    denoise(&oracle, &sched, cfg.plan()?.guidance, &batch, &Control::Exact, Some(&mut obs))?;
    if let Some(i) = argmin(&rows) {
        rows[i].is_argmin = true;
    }
    Ok(rows)
}

// earliest step wins ties, as in calibration
fn argmin(rows: &[CurveRow]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, r) in rows.iter().enumerate() {
        if best.is_none_or(|b| r.rel_mae < rows[b].rel_mae) {
            best = Some(i);
        }
    }
    best
}

pub fn curve_series(rows: &[CurveRow]) -> Result<DiscrepancySeries> {
    DiscrepancySeries::from_pairs(rows.iter().map(|r| (r.t, r.rel_mae)))
}

pub fn write_curve(path: &Path, rows: &[CurveRow]) -> Result<()> {
    let cells: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.t.to_string(),
                r.step.to_string(),
                fmt_f64(r.rel_mae),
                fmt_f64(r.score_ratio),
                fmt_f64(r.band_lo),
                fmt_f64(r.band_hi),
                u8::from(r.is_argmin).to_string(),
            ]
        })
        .collect();
    write_csv(path, &CURVE_COLUMNS, &cells)
}

pub fn cmd_curve(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<CurveRow>> {
    let rows = curve(cfg)?;
    write_curve(out, &rows)?;
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    /// Step number of the curve minimum.
    pub tau_cap: usize,
    pub t: usize,
    pub rel_mae: f64,
}

pub fn cmd_calibrate(cfg: &ExperimentConfig) -> Result<Calibration> {
    let rows = curve(cfg)?;
    let steps = cfg.schedule.steps;
    let tau_cap = calibrate_tau_cap(&curve_series(&rows)?, steps)?;
    let row = rows.iter().find(|r| r.step == tau_cap).expect("minimum comes from the curve");
    Ok(Calibration { tau_cap, t: row.t, rel_mae: row.rel_mae })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRow {
    pub t: usize,
    pub step: usize,
    pub stage: Stage,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectOutput {
    #[serde(rename = "T")]
    pub steps: usize,
    pub tau1: usize,
    pub tau2: usize,
    pub stages: Vec<StageRow>,
}

pub fn detect(series: &DiscrepancySeries, cfg: &ExperimentConfig) -> Result<DetectOutput> {
    let steps = cfg.schedule.steps;
    let d = detect_switch(series, &cfg.switch, steps)?;
    Ok(DetectOutput {
        steps,
        tau1: d.tau1,
        tau2: d.tau2,
        stages: d.stages.into_iter().map(|(t, stage)| StageRow { t, step: step_of(steps, t), stage }).collect(),
    })
}

pub fn cmd_detect(series_path: &Path, cfg: &ExperimentConfig) -> Result<DetectOutput> {
    cfg.validate()?;
    let series = read_series(series_path, cfg.schedule.steps)?;
    detect(&series, cfg)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub k: usize,
    /// `None` when `k` is infeasible.
    pub metrics: Option<Metrics>,
    pub status: String,
}

pub const SWEEP_COLUMNS: [&str; 11] = [
    "k",
    "tau1",
    "tau2",
    "latency_s",
    "speedup",
    "comm_bytes",
    "fidelity_l1",
    "fidelity_l2",
    "psnr_analog",
    "status",
    "message",
];

/// Runs the configured adaptive plan once per `k`, in parallel. Rows come
/// back sorted by `k`; an infeasible `k` yields a warning row.
pub fn sweep(cfg: &ExperimentConfig, ks: &[usize]) -> Result<Vec<SweepRow>> {
    cfg.validate()?;
    if matches!(cfg.plan, PlanKind::Serial | PlanKind::FullConditionPartition) {
        return Err(Error::Plan(format!("sweep needs an adaptive plan, got {}", cfg.plan.name())));
    }
    if ks.is_empty() {
        return Ok(vec![]);
    }
    let sched = cfg.schedule()?;
    let oracle = MixtureOracle { gm: &cfg.mixture, sched: &sched };
    let reference = serial_reference(cfg)?.x0;
    let base = cfg.plan()?;
    let mut rows = ks
        .par_iter()
        .map(|&k| {
            let switch = cfg.switch.with_k(k);
            if let Err(e) = switch.validate(sched.steps()) {
                return Ok(SweepRow { k, metrics: None, status: format!("infeasible: {e}") });
            }
            let result = run(&base.with_variant(cfg.plan.variant(switch)), &sched, &oracle)?;
            let metrics = Metrics::from_run(cfg.plan.name(), &result, &reference, cfg.psnr_peak)?;
            Ok(SweepRow { k, metrics: Some(metrics), status: "ok".into() })
        })
        .collect::<Result<Vec<_>>>()?;
    rows.sort_by_key(|r| r.k);
    Ok(rows)
}

pub fn write_sweep(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let cells: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            let mut c = vec![r.k.to_string()];
            match &r.metrics {
                Some(m) => c.extend([
                    fmt_opt(m.tau1),
                    fmt_opt(m.tau2),
                    fmt_f64(m.latency_s),
                    fmt_f64(m.speedup),
                    m.comm_bytes.to_string(),
                    fmt_f64(m.fidelity_l1),
                    fmt_f64(m.fidelity_l2),
                    m.psnr_analog.to_string(),
                    "ok".into(),
                    String::new(),
                ]),
                None => {
                    c.extend(std::iter::repeat_n(String::new(), 8));
                    c.extend(["infeasible".into(), r.status.trim_start_matches("infeasible: ").into()]);
                }
            }
            c
        })
        .collect();
    write_csv(path, &SWEEP_COLUMNS, &cells)
}

pub fn cmd_sweep(cfg: &ExperimentConfig, ks: &[usize], out: &Path) -> Result<Vec<SweepRow>> {
    let rows = sweep(cfg, ks)?;
    write_sweep(out, &rows)?;
    Ok(rows)
}
