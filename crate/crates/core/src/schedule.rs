//! Variance-preserving noise schedules, guidance combination and the
//! deterministic reverse steppers (DDIM with eta = 0, flow-matching Euler).
//!
//! Timesteps are 1-based: `t = 1..=T`, and `alpha_bar(0)` is 1.

use serde::{Deserialize, Serialize};

use crate::error::{check_finite, check_len, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleKind {
    Linear,
    /// sqrt(beta) is interpolated linearly, then squared.
    ScaledLinear,
}

/// Serializable description of a schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub kind: ScheduleKind,
    #[serde(rename = "T")]
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl ScheduleSpec {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::build(self.kind, self.steps, self.beta_start, self.beta_end)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn build(kind: ScheduleKind, steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps < 2 {
            return Err(Error::param("T", format!("need at least 2 steps, got {steps}")));
        }
        if !(beta_start > 0.0 && beta_start < 1.0) {
            return Err(Error::param("beta_start", format!("{beta_start} not in (0, 1)")));
        }
        if !(beta_end >= beta_start && beta_end < 1.0) {
            return Err(Error::param(
                "beta_end",
                format!("{beta_end} not in [beta_start, 1)"),
            ));
        }
        let frac = |i: usize| i as f64 / (steps - 1) as f64;
        let betas = match kind {
            ScheduleKind::Linear => (0..steps)
                .map(|i| beta_start + (beta_end - beta_start) * frac(i))
                .collect(),
            ScheduleKind::ScaledLinear => {
                let (a, b) = (beta_start.sqrt(), beta_end.sqrt());
                (0..steps).map(|i| (a + (b - a) * frac(i)).powi(2)).collect()
            }
        };
        Self::from_betas(betas)
    }

    /// Schedule from an explicit beta sequence (`betas[0]` is beta_1).
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::param("betas", "empty"));
        }
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::param("betas", format!("{b} not in (0, 1)")));
        }
        let mut acc = 1.0;
        let alpha_bars = betas
            .iter()
            .map(|b| {
                acc *= 1.0 - b;
                acc
            })
            .collect();
        Ok(NoiseSchedule { betas, alpha_bars })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    fn idx(&self, t: usize) -> usize {
        assert!(
            (1..=self.steps()).contains(&t),
            "timestep {t} outside 1..={}",
            self.steps()
        );
        t - 1
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[self.idx(t)]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.beta(t)
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[self.idx(t)]
        }
    }

    pub fn sigma(&self, t: usize) -> f64 {
        (1.0 - self.alpha_bar(t)).sqrt()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub(crate) fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 {
            return Err(Error::StepUnderflow(0));
        }
        if t > self.steps() {
            return Err(Error::param("t", format!("{t} exceeds T = {}", self.steps())));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GuidanceParams {
    pub w: f64,
}

impl GuidanceParams {
    pub fn new(w: f64) -> Result<Self> {
        if !(w.is_finite() && w >= 0.0) {
            return Err(Error::param("w", format!("guidance scale {w} must be finite and >= 0")));
        }
        Ok(GuidanceParams { w })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatentState {
    pub x: Vec<f64>,
    pub t: usize,
}

impl LatentState {
    pub fn new(x: Vec<f64>, t: usize) -> Result<Self> {
        check_finite(&x, "latent")?;
        Ok(LatentState { x, t })
    }
}

pub fn cfg_combine(eps_c: &[f64], eps_u: &[f64], g: GuidanceParams) -> Result<Vec<f64>> {
    check_len(eps_c.len(), eps_u.len())?;
    Ok(eps_c
        .iter()
        .zip(eps_u)
        .map(|(c, u)| c + g.w * (c - u))
        .collect())
}

pub fn ddpm_posterior_mean(state: &LatentState, eps_cfg: &[f64], sched: &NoiseSchedule) -> Result<Vec<f64>> {
    sched.check_t(state.t)?;
    check_len(state.x.len(), eps_cfg.len())?;
    let t = state.t;
    let coef = sched.beta(t) / sched.sigma(t);
    let scale = 1.0 / sched.alpha(t).sqrt();
    Ok(state
        .x
        .iter()
        .zip(eps_cfg)
        .map(|(x, e)| scale * (x - coef * e))
        .collect())
}

/// One deterministic DDIM update from `t` to `t - 1`.
pub fn ddim_step(state: &LatentState, eps: &[f64], sched: &NoiseSchedule) -> Result<LatentState> {
    sched.check_t(state.t)?;
    check_len(state.x.len(), eps.len())?;
    check_finite(&state.x, "latent")?;
    check_finite(eps, "noise prediction")?;
    let t = state.t;
    let (ab, ab_prev) = (sched.alpha_bar(t), sched.alpha_bar(t - 1));
    let (sig, sig_prev) = ((1.0 - ab).sqrt(), (1.0 - ab_prev).sqrt());
    let (sa, sa_prev) = (ab.sqrt(), ab_prev.sqrt());
    let x = state
        .x
        .iter()
        .zip(eps)
        .map(|(x, e)| {
            let x0 = (x - sig * e) / sa;
            sa_prev * x0 + sig_prev * e
        })
        .collect();
    Ok(LatentState { x, t: t - 1 })
}

/// Marginal sample `sqrt(abar_t) x0 + sigma_t eps`.
pub fn forward_marginal(x0: &[f64], eps: &[f64], sched: &NoiseSchedule, t: usize) -> Result<Vec<f64>> {
    check_len(x0.len(), eps.len())?;
    let (sa, s) = (sched.alpha_bar(t).sqrt(), sched.sigma(t));
    Ok(x0.iter().zip(eps).map(|(x, e)| sa * x + s * e).collect())
}

pub fn fm_euler_step(x: &[f64], v: &[f64], dt: f64) -> Result<Vec<f64>> {
    if !(dt > 0.0) {
        return Err(Error::param("dt", format!("{dt} must be > 0")));
    }
    check_len(x.len(), v.len())?;
    check_finite(x, "state")?;
    check_finite(v, "velocity")?;
    Ok(x.iter().zip(v).map(|(x, v)| x - v * dt).collect())
}
