//! Diagonal-covariance Gaussian mixture used as an exact denoiser.
//!
//! A condition is a subset of components. Conditional quantities use the
//! sub-mixture restricted to that subset with renormalized weights, so
//! `p(c | x_t)` is the posterior mass of the subset.

use rand::distr::{weighted::WeightedIndex, Distribution};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_finite, check_len, Error, Result};
use crate::schedule::NoiseSchedule;

const LN_2PI: f64 = 1.8378770664093453;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MixtureSpec", into = "MixtureSpec")]
pub struct GaussianMixture {
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    vars: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct MixtureSpec {
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    vars: Vec<Vec<f64>>,
}

impl TryFrom<MixtureSpec> for GaussianMixture {
    type Error = Error;
    fn try_from(s: MixtureSpec) -> Result<Self> {
        GaussianMixture::new(s.weights, s.means, s.vars)
    }
}

impl From<GaussianMixture> for MixtureSpec {
    fn from(g: GaussianMixture) -> Self {
        MixtureSpec { weights: g.weights, means: g.means, vars: g.vars }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    Unconditional,
    /// 0-based component indices.
    Conditional(Vec<usize>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreEval {
    pub score: Vec<f64>,
    pub log_density: f64,
}

/// Per-component Gaussian `N(m * mu, v * Sigma + add * I)`.
#[derive(Clone, Copy)]
struct Level {
    mean_scale: f64,
    var_scale: f64,
    var_add: f64,
}

impl Level {
    fn diffusion(alpha_bar: f64) -> Self {
        Level { mean_scale: alpha_bar.sqrt(), var_scale: alpha_bar, var_add: 1.0 - alpha_bar }
    }
}

impl GaussianMixture {
    pub fn new(weights: Vec<f64>, means: Vec<Vec<f64>>, vars: Vec<Vec<f64>>) -> Result<Self> {
        let k = weights.len();
        if k == 0 {
            return Err(Error::param("weights", "need at least one component"));
        }
        check_len(k, means.len())?;
        check_len(k, vars.len())?;
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::param("weights", "entries must be finite and nonnegative"));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::param("weights", format!("sum to {total}, not 1")));
        }
        let d = means[0].len();
        if d == 0 {
            return Err(Error::param("means", "zero dimension"));
        }
        for (m, v) in means.iter().zip(&vars) {
            check_len(d, m.len())?;
            check_len(d, v.len())?;
            check_finite(m, "means")?;
            if v.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
                return Err(Error::param("vars", "variances must be finite and > 0"));
            }
        }
        Ok(GaussianMixture { weights, means, vars })
    }

    /// Default testbed: d = 8, K = 4, uniform weights, unit variances.
    ///
    /// Means sit at `±3 a ± 0.5 e_1` where `a` has ones on the even axes.
    /// The large split is resolved early in sampling and the small one late,
    /// which makes the discrepancy curve dip in the middle of the trajectory.
    pub fn testbed() -> Self {
        let d = 8;
        let a: Vec<f64> = (0..d).map(|j| if j % 2 == 0 { 1.0 } else { 0.0 }).collect();
        let mean = |big: f64, small: f64| -> Vec<f64> {
            (0..d).map(|j| big * a[j] + if j == 1 { small } else { 0.0 }).collect()
        };
        let means = vec![mean(3.0, 0.5), mean(3.0, -0.5), mean(-3.0, 0.5), mean(-3.0, -0.5)];
        GaussianMixture::new(vec![0.25; 4], means, vec![vec![1.0; d]; 4]).unwrap()
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn components(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[Vec<f64>] {
        &self.means
    }

    pub fn vars(&self) -> &[Vec<f64>] {
        &self.vars
    }

    /// One singleton condition per component.
    pub fn singleton_conditions(&self) -> Vec<Condition> {
        (0..self.components()).map(|i| Condition::Conditional(vec![i])).collect()
    }

    pub fn check_condition(&self, cond: &Condition) -> Result<()> {
        if let Condition::Conditional(s) = cond {
            self.check_subset(s)?;
        }
        Ok(())
    }

    fn check_subset(&self, s: &[usize]) -> Result<()> {
        if s.is_empty() {
            return Err(Error::param("condition", "empty component subset"));
        }
        for (i, c) in s.iter().enumerate() {
            if *c >= self.components() {
                return Err(Error::param("condition", format!("component {c} out of range")));
            }
            if s[..i].contains(c) {
                return Err(Error::param("condition", format!("component {c} repeated")));
            }
        }
        Ok(())
    }

    fn members(&self, cond: &Condition) -> Result<Vec<usize>> {
        match cond {
            Condition::Unconditional => Ok((0..self.components()).collect()),
            Condition::Conditional(s) => {
                self.check_subset(s)?;
                Ok(s.clone())
            }
        }
    }

    /// Marginal of the forward process at a continuous noise level.
    pub fn noised(&self, alpha_bar: f64) -> GaussianMixture {
        let lv = Level::diffusion(alpha_bar);
        GaussianMixture {
            weights: self.weights.clone(),
            means: self
                .means
                .iter()
                .map(|m| m.iter().map(|v| lv.mean_scale * v).collect())
                .collect(),
            vars: self
                .vars
                .iter()
                .map(|s| s.iter().map(|v| lv.var_scale * v + lv.var_add).collect())
                .collect(),
        }
    }

    /// Log joint `ln w_i + ln N_i(x)` per member, plus their log-sum-exp.
    fn log_terms(&self, members: &[usize], lv: Level, x: &[f64]) -> (Vec<f64>, f64) {
        let terms: Vec<f64> = members
            .iter()
            .map(|&i| {
                let mut q = 0.0;
                for ((xv, m), s) in x.iter().zip(&self.means[i]).zip(&self.vars[i]) {
                    let v = lv.var_scale * s + lv.var_add;
                    let r = xv - lv.mean_scale * m;
                    q += r * r / v + (LN_2PI + v.ln());
                }
                self.weights[i].ln() - 0.5 * q
            })
            .collect();
        let lse = log_sum_exp(&terms);
        (terms, lse)
    }

    fn eval(&self, members: &[usize], lv: Level, x: &[f64]) -> Result<ScoreEval> {
        check_len(self.dim(), x.len())?;
        check_finite(x, "x")?;
        let (terms, lse) = self.log_terms(members, lv, x);
        let mass: f64 = members.iter().map(|&i| self.weights[i]).sum();
        if mass <= 0.0 || !lse.is_finite() {
            return Err(Error::Degenerate("condition has zero prior mass"));
        }
        let mut score = vec![0.0; x.len()];
        for (&i, lt) in members.iter().zip(&terms) {
            let r = (lt - lse).exp();
            if r == 0.0 {
                continue;
            }
            for (j, g) in score.iter_mut().enumerate() {
                let v = lv.var_scale * self.vars[i][j] + lv.var_add;
                *g -= r * (x[j] - lv.mean_scale * self.means[i][j]) / v;
            }
        }
        Ok(ScoreEval { score, log_density: lse - mass.ln() })
    }

    /// Score of the noised (sub-)mixture at a continuous level `alpha_bar`.
    pub fn score_at(&self, cond: &Condition, alpha_bar: f64, x: &[f64]) -> Result<ScoreEval> {
        check_level(alpha_bar)?;
        self.eval(&self.members(cond)?, Level::diffusion(alpha_bar), x)
    }

    pub fn eps_at(&self, cond: &Condition, alpha_bar: f64, x: &[f64]) -> Result<Vec<f64>> {
        let sigma = (1.0 - alpha_bar).sqrt();
        Ok(self.score_at(cond, alpha_bar, x)?.score.into_iter().map(|s| -sigma * s).collect())
    }

    pub fn conditional_grad_at(&self, subset: &[usize], alpha_bar: f64, x: &[f64]) -> Result<Vec<f64>> {
        check_level(alpha_bar)?;
        self.check_subset(subset)?;
        let inside = self.members(&Condition::Conditional(subset.to_vec()))?;
        let rest: Vec<usize> = (0..self.components()).filter(|i| !inside.contains(i)).collect();
        let a = self.eval(&inside, Level::diffusion(alpha_bar), x)?;
        if rest.is_empty() {
            return Ok(vec![0.0; x.len()]);
        }
        let b = self.eval(&rest, Level::diffusion(alpha_bar), x)?;
        let lv = Level::diffusion(alpha_bar);
        let (_, lse_in) = self.log_terms(&inside, lv, x);
        let (_, lse_rest) = self.log_terms(&rest, lv, x);
        // p(rest | x) = 1 / (1 + exp(lse_in - lse_rest))
        let p_rest = 1.0 / (1.0 + (lse_in - lse_rest).exp());
        Ok(a.score.iter().zip(&b.score).map(|(u, v)| p_rest * (u - v)).collect())
    }

    /// `ln p(c | x)` at level `alpha_bar`: log posterior mass of the subset.
    pub fn log_posterior_mass(&self, subset: &[usize], alpha_bar: f64, x: &[f64]) -> Result<f64> {
        check_level(alpha_bar)?;
        self.check_subset(subset)?;
        check_len(self.dim(), x.len())?;
        let lv = Level::diffusion(alpha_bar);
        let all: Vec<usize> = (0..self.components()).collect();
        let (_, lse_all) = self.log_terms(&all, lv, x);
        let (_, lse_sub) = self.log_terms(subset, lv, x);
        Ok(lse_sub - lse_all)
    }

    /// Posterior mean `E[x0 | x]` when `x = x0 + s * e`, `e ~ N(0, I)`.
    fn posterior_mean_additive(&self, members: &[usize], s: f64, x: &[f64]) -> Vec<f64> {
        let lv = Level { mean_scale: 1.0, var_scale: 1.0, var_add: s * s };
        let (terms, lse) = self.log_terms(members, lv, x);
        let mut out = vec![0.0; x.len()];
        for (&i, lt) in members.iter().zip(&terms) {
            let r = (lt - lse).exp();
            for (j, o) in out.iter_mut().enumerate() {
                let (m, v) = (self.means[i][j], self.vars[i][j]);
                *o += r * (m + v / (v + s * s) * (x[j] - m));
            }
        }
        out
    }
}

fn check_level(alpha_bar: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha_bar) {
        return Err(Error::param("alpha_bar", format!("{alpha_bar} not in [0, 1]")));
    }
    Ok(())
}

pub(crate) fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn noised_mixture(gm: &GaussianMixture, sched: &NoiseSchedule, t: usize) -> Result<GaussianMixture> {
    sched.check_t(t)?;
    Ok(gm.noised(sched.alpha_bar(t)))
}

pub fn score(
    gm: &GaussianMixture,
    cond: &Condition,
    sched: &NoiseSchedule,
    x: &[f64],
    t: usize,
) -> Result<ScoreEval> {
    sched.check_t(t)?;
    gm.score_at(cond, sched.alpha_bar(t), x)
}

pub fn eps_prediction(
    gm: &GaussianMixture,
    cond: &Condition,
    sched: &NoiseSchedule,
    x: &[f64],
    t: usize,
) -> Result<Vec<f64>> {
    sched.check_t(t)?;
    gm.eps_at(cond, sched.alpha_bar(t), x)
}

/// `grad log p(c | x_t) = s_c - s_u`, evaluated as
/// `p(not c | x) (g_c - g_rest)` with `g` the responsibility-weighted
/// component scores of each side, so small differences do not cancel.
pub fn conditional_grad(
    gm: &GaussianMixture,
    subset: &[usize],
    sched: &NoiseSchedule,
    x: &[f64],
    t: usize,
) -> Result<Vec<f64>> {
    sched.check_t(t)?;
    gm.conditional_grad_at(subset, sched.alpha_bar(t), x)
}

/// Optimal velocity for the path `x_t = x0 + t e`.
pub fn fm_velocity(gm: &GaussianMixture, cond: &Condition, x: &[f64], t: f64) -> Result<Vec<f64>> {
    if !(t > 0.0 && t.is_finite()) {
        return Err(Error::param("t", format!("{t} must be > 0")));
    }
    check_len(gm.dim(), x.len())?;
    check_finite(x, "x")?;
    let members = gm.members(cond)?;
    let mean = gm.posterior_mean_additive(&members, t, x);
    Ok(x.iter().zip(&mean).map(|(x, m)| (x - m) / t).collect())
}

/// Euler integration of the flow from `t = 1` down to `t = 0`.
pub fn fm_sample(gm: &GaussianMixture, cond: &Condition, x1: &[f64], steps: usize) -> Result<Vec<f64>> {
    if steps == 0 {
        return Err(Error::param("steps", "must be >= 1"));
    }
    let dt = 1.0 / steps as f64;
    let mut x = x1.to_vec();
    for i in 0..steps {
        let t = 1.0 - i as f64 * dt;
        let v = fm_velocity(gm, cond, &x, t)?;
        x = crate::schedule::fm_euler_step(&x, &v, dt)?;
    }
    Ok(x)
}

pub(crate) fn draw(gm: &GaussianMixture, cond: &Condition, seed: u64) -> Result<(usize, Vec<f64>)> {
    let members = gm.members(cond)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w: Vec<f64> = members.iter().map(|&i| gm.weights[i]).collect();
    let pick = WeightedIndex::new(&w)
        .map_err(|_| Error::Degenerate("condition has zero prior mass"))?
        .sample(&mut rng);
    let i = members[pick];
    let x = gm.means[i]
        .iter()
        .zip(&gm.vars[i])
        .map(|(m, v)| {
            let z: f64 = StandardNormal.sample(&mut rng);
            m + v.sqrt() * z
        })
        .collect();
    Ok((i, x))
}

pub fn sample_x0(gm: &GaussianMixture, cond: &Condition, seed: u64) -> Result<Vec<f64>> {
    Ok(draw(gm, cond, seed)?.1)
}
