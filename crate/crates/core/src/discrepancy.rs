//! Denoising-discrepancy monitor and the adaptive switching controller.
//!
//! Two index spaces appear here. Timesteps `t` run `T..=1` in the order
//! they are denoised. Controller positions (tau1, tau2, tau_cap) are
//! 1-based step numbers `n = T - t + 1`, so `n = 1` is the first step.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::mixture::{conditional_grad, score, Condition, GaussianMixture};
use crate::schedule::NoiseSchedule;

/// Step number of timestep `t` in a `steps`-long run.
pub fn step_of(steps: usize, t: usize) -> usize {
    steps + 1 - t
}

/// Timestep processed at step number `n`.
pub fn timestep_of(steps: usize, n: usize) -> usize {
    steps + 1 - n
}

fn l1(v: &[f64]) -> f64 {
    v.iter().map(|x| x.abs()).sum()
}

fn l1_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

/// Batch rel-MAE: mean L1 gap between branches over mean L1 norm of the
/// unconditional branch.
pub fn rel_mae<C: AsRef<[f64]>, U: AsRef<[f64]>>(eps_c: &[C], eps_u: &[U]) -> Result<f64> {
    if eps_c.is_empty() {
        return Err(Error::Degenerate("empty batch"));
    }
    check_len(eps_c.len(), eps_u.len())?;
    let (mut num, mut den) = (0.0, 0.0);
    for (c, u) in eps_c.iter().zip(eps_u) {
        let (c, u) = (c.as_ref(), u.as_ref());
        check_len(u.len(), c.len())?;
        num += l1_diff(c, u);
        den += l1(u);
    }
    if den == 0.0 {
        return Err(Error::Degenerate("unconditional prediction is zero over the batch"));
    }
    // the batch size cancels between the two means
    let m = num / den;
    if !m.is_finite() {
        return Err(Error::NonFinite("rel-MAE"));
    }
    Ok(m)
}

/// Score-space counterpart of [`rel_mae`]: mean `|grad log p(c|x)|_1` over
/// mean `|s_u|_1`, one subset shared by the whole batch.
pub fn score_ratio_estimate<X: AsRef<[f64]>>(
    gm: &GaussianMixture,
    subset: &[usize],
    sched: &NoiseSchedule,
    x_batch: &[X],
    t: usize,
) -> Result<f64> {
    let items: Vec<(&[usize], &[f64])> = x_batch.iter().map(|x| (subset, x.as_ref())).collect();
    score_ratio_items(gm, sched, &items, t)
}

/// As [`score_ratio_estimate`] with a subset per batch item.
pub fn score_ratio_items(
    gm: &GaussianMixture,
    sched: &NoiseSchedule,
    items: &[(&[usize], &[f64])],
    t: usize,
) -> Result<f64> {
    if items.is_empty() {
        return Err(Error::Degenerate("empty batch"));
    }
    let (mut num, mut den) = (0.0, 0.0);
    for (subset, x) in items {
        num += l1(&conditional_grad(gm, subset, sched, x, t)?);
        den += l1(&score(gm, &Condition::Unconditional, sched, x, t)?.score);
    }
    if den == 0.0 {
        return Err(Error::Degenerate("unconditional score is zero over the batch"));
    }
    Ok(num / den)
}

/// Recorded `M_t` values keyed by timestep. Gaps are allowed.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DiscrepancySeries {
    values: BTreeMap<usize, f64>,
}

impl DiscrepancySeries {
    pub fn new() -> Self {
        Self::default()
    }

    /// Records `M_t`. Timesteps must arrive in strictly descending order.
    pub fn record(&mut self, t: usize, m: f64) -> Result<()> {
        if !(m.is_finite() && m >= 0.0) {
            return Err(Error::param("M_t", format!("{m} at t = {t} must be finite and >= 0")));
        }
        if let Some((&last, _)) = self.values.first_key_value() {
            if t >= last {
                return Err(Error::Sequencing { expected: last.saturating_sub(1), got: t });
            }
        }
        self.values.insert(t, m);
        Ok(())
    }

    pub fn from_pairs(pairs: impl IntoIterator<Item = (usize, f64)>) -> Result<Self> {
        let mut v: Vec<(usize, f64)> = pairs.into_iter().collect();
        v.sort_by_key(|p| std::cmp::Reverse(p.0));
        let mut s = Self::new();
        for (t, m) in v {
            s.record(t, m)?;
        }
        Ok(s)
    }

    pub fn get(&self, t: usize) -> Option<f64> {
        self.values.get(&t).copied()
    }

    /// `(t, M_t)` in descending `t`.
    pub fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.values.iter().rev().map(|(t, m)| (*t, *m))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn max_t(&self) -> Option<usize> {
        self.values.last_key_value().map(|(t, _)| *t)
    }
}

/// Average slope over the last `window` steps: `(M_t - M_{t+window}) / window`.
pub fn slope(series: &DiscrepancySeries, t: usize, window: usize) -> Result<f64> {
    if window == 0 {
        return Err(Error::param("L", "window must be >= 1"));
    }
    let now = series.get(t).ok_or(Error::InsufficientHistory(t))?;
    let then = series.get(t + window).ok_or(Error::InsufficientHistory(t + window))?;
    Ok((now - then) / window as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SwitchConfig {
    #[serde(rename = "L")]
    pub window: usize,
    pub g_slope: f64,
    /// Step number by which tau1 is forced.
    pub tau_cap: usize,
    /// Length of the parallel window in steps.
    pub k: usize,
}

impl SwitchConfig {
    pub fn sdxl() -> Self {
        SwitchConfig { window: 12, g_slope: 0.4e-3, tau_cap: 15, k: 5 }
    }

    pub fn sd3() -> Self {
        SwitchConfig { window: 15, g_slope: 0.1e-3, tau_cap: 40, k: 5 }
    }

    pub fn with_k(self, k: usize) -> Self {
        SwitchConfig { k, ..self }
    }

    /// `k = 0` is accepted and means no parallel window at all.
    pub fn validate(&self, steps: usize) -> Result<()> {
        if self.window == 0 || self.window >= steps {
            return Err(Error::param("L", format!("{} not in [1, T = {steps})", self.window)));
        }
        if !(self.g_slope.is_finite() && self.g_slope > 0.0) {
            return Err(Error::param("g_slope", format!("{} must be > 0", self.g_slope)));
        }
        if self.tau_cap == 0 || self.tau_cap > steps {
            return Err(Error::param("tau_cap", format!("{} not in [1, T = {steps}]", self.tau_cap)));
        }
        if self.k > 0 && self.k >= steps - self.tau_cap {
            return Err(Error::param(
                "k",
                format!("{} must be < T - tau_cap = {}", self.k, steps - self.tau_cap),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    WarmUp,
    Parallelism,
    FullyConnecting,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageState {
    pub stage: Stage,
    pub tau1: Option<usize>,
    pub tau2: Option<usize>,
    /// Last timestep the controller was advanced to.
    pub last_t: Option<usize>,
}

impl Default for StageState {
    fn default() -> Self {
        StageState { stage: Stage::WarmUp, tau1: None, tau2: None, last_t: None }
    }
}

impl StageState {
    /// Stage of step `n` if it is already determined by the switch points.
    pub fn planned(&self, n: usize) -> Option<Stage> {
        let (t1, t2) = (self.tau1?, self.tau2?);
        Some(if n <= t1 {
            Stage::WarmUp
        } else if n <= t2 {
            Stage::Parallelism
        } else {
            Stage::FullyConnecting
        })
    }
}

/// Advances the controller to timestep `t` and returns the state whose
/// `stage` governs that step.
///
/// While tau1 is unset, `M_t` must be in `series`. tau1 is set at step `n`
/// when `n > L` and `0 <= G < g_slope`, or when `n` reaches `tau_cap`.
pub fn update_controller(
    state: &StageState,
    series: &DiscrepancySeries,
    t: usize,
    steps: usize,
    cfg: &SwitchConfig,
) -> Result<StageState> {
    let expected = state.last_t.map_or(steps, |l| l.saturating_sub(1));
    if t != expected || t == 0 {
        return Err(Error::Sequencing { expected, got: t });
    }
    let n = step_of(steps, t);
    let mut next = *state;
    next.last_t = Some(t);
    if next.tau1.is_none() {
        if series.get(t).is_none() {
            return Err(Error::InsufficientHistory(t));
        }
        if n > cfg.window {
            let g = slope(series, t, cfg.window)?;
            if (0.0..cfg.g_slope).contains(&g) {
                next.tau1 = Some(n.min(cfg.tau_cap));
            }
        }
        if next.tau1.is_none() && n >= cfg.tau_cap {
            next.tau1 = Some(cfg.tau_cap);
        }
        next.tau2 = next.tau1.map(|t1| t1 + cfg.k);
    }
    next.stage = next.planned(n).unwrap_or(Stage::WarmUp);
    Ok(next)
}

/// Single-owner wrapper that records measurements and advances the state.
#[derive(Clone, Debug)]
pub struct SwitchController {
    cfg: SwitchConfig,
    steps: usize,
    state: StageState,
    series: DiscrepancySeries,
}

impl SwitchController {
    pub fn new(cfg: SwitchConfig, steps: usize) -> Result<Self> {
        cfg.validate(steps)?;
        Ok(SwitchController { cfg, steps, state: StageState::default(), series: DiscrepancySeries::new() })
    }

    /// Whether step `t` runs both branches (and so yields a measurement).
    pub fn needs_measurement(&self, t: usize) -> bool {
        self.state.planned(step_of(self.steps, t)) != Some(Stage::Parallelism)
    }

    pub fn advance(&mut self, t: usize, m: Option<f64>) -> Result<Stage> {
        if let Some(m) = m {
            self.series.record(t, m)?;
        }
        self.state = update_controller(&self.state, &self.series, t, self.steps, &self.cfg)?;
        Ok(self.state.stage)
    }

    pub fn state(&self) -> &StageState {
        &self.state
    }

    pub fn series(&self) -> &DiscrepancySeries {
        &self.series
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub tau1: usize,
    pub tau2: usize,
    /// `(t, stage)` for every step, descending `t`.
    pub stages: Vec<(usize, Stage)>,
}

/// Replays the controller over a recorded series.
pub fn detect_switch(series: &DiscrepancySeries, cfg: &SwitchConfig, steps: usize) -> Result<Detection> {
    cfg.validate(steps)?;
    let mut state = StageState::default();
    let mut stages = Vec::with_capacity(steps);
    for t in (1..=steps).rev() {
        state = update_controller(&state, series, t, steps, cfg)?;
        stages.push((t, state.stage));
    }
    // tau_cap <= T guarantees the cap has fired by the last step
    let tau1 = state.tau1.expect("tau1 is set once the cap is reached");
    Ok(Detection { tau1, tau2: tau1 + cfg.k, stages })
}

/// Step number of the minimum of a curve; the earliest step wins ties.
pub fn calibrate_tau_cap(series: &DiscrepancySeries, steps: usize) -> Result<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (t, m) in series.iter() {
        if best.is_none_or(|(_, b)| m < b) {
            best = Some((t, m));
        }
    }
    let (t, _) = best.ok_or(Error::Degenerate("empty series"))?;
    Ok(step_of(steps, t))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlopeNoiseModel {
    pub delta: f64,
    pub range_lo: f64,
    pub range_hi: f64,
}

impl SlopeNoiseModel {
    pub fn new(delta: f64, range_lo: f64, range_hi: f64) -> Result<Self> {
        if !(delta > 0.0) {
            return Err(Error::param("delta", format!("{delta} must be > 0")));
        }
        if !(range_lo.is_finite() && range_hi.is_finite() && range_hi > range_lo) {
            return Err(Error::param("range_hi", "need finite range_lo < range_hi"));
        }
        Ok(SlopeNoiseModel { delta, range_lo, range_hi })
    }
}

/// `2 exp(-2 L delta^2 / (b - a)^2)`.
pub fn hoeffding_false_alarm(window: usize, noise: &SlopeNoiseModel) -> Result<f64> {
    if window == 0 {
        return Err(Error::param("L", "window must be >= 1"));
    }
    let span = noise.range_hi - noise.range_lo;
    Ok(2.0 * (-2.0 * window as f64 * noise.delta.powi(2) / (span * span)).exp())
}
