//! What each denoising step computes, independent of timing.

use std::collections::VecDeque;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::discrepancy::{rel_mae, Stage, SwitchConfig, SwitchController};
use crate::error::Result;
use crate::mixture::{eps_prediction, Condition, GaussianMixture};
use crate::schedule::{cfg_combine, ddim_step, GuidanceParams, LatentState, NoiseSchedule};

pub trait NoisePredictor: Sync {
    fn dim(&self) -> usize;
    fn predict(&self, cond: &Condition, x: &[f64], t: usize) -> Result<Vec<f64>>;
}

/// Exact epsilon-prediction of a Gaussian mixture.
#[derive(Clone, Copy)]
pub struct MixtureOracle<'a> {
    pub gm: &'a GaussianMixture,
    pub sched: &'a NoiseSchedule,
}

impl NoisePredictor for MixtureOracle<'_> {
    fn dim(&self) -> usize {
        self.gm.dim()
    }

    fn predict(&self, cond: &Condition, x: &[f64], t: usize) -> Result<Vec<f64>> {
        eps_prediction(self.gm, cond, self.sched, x, t)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchItem {
    pub condition: Condition,
    pub seed: u64,
}

/// Starting latent `x_T ~ N(0, I)` for a seed.
pub fn initial_latent(dim: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect()
}

#[derive(Clone, Debug)]
pub enum Control {
    /// Both branches every step.
    Exact,
    Adaptive { cfg: SwitchConfig, fractions: Vec<f64> },
}

/// Branch outputs of a step that evaluated both branches.
pub struct StepView<'a> {
    pub t: usize,
    pub xs: &'a [Vec<f64>],
    pub eps_c: &'a [Vec<f64>],
    pub eps_u: &'a [Vec<f64>],
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub t: usize,
    /// `None` for runs without a controller.
    pub stage: Option<Stage>,
    pub rel_mae: Option<f64>,
    /// Position inside the parallel window, 0 for the fill step.
    pub window_pos: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct NumericRun {
    pub x0: Vec<Vec<f64>>,
    pub steps: Vec<StepRecord>,
    pub tau1: Option<usize>,
    pub tau2: Option<usize>,
}

pub type Observer<'o> = &'o mut dyn FnMut(&StepView) -> Result<()>;

/// Runs DDIM over the batch from `t = T` to 0.
///
/// Inside the parallel window only the conditional branch is evaluated.
/// Segment `j` of the split model sees the latent from `min(j, p)` steps
/// earlier, where `p` is the position in the window, and the prediction
/// is the fraction-weighted sum of the segment outputs.
pub fn denoise(
    pred: &dyn NoisePredictor,
    sched: &NoiseSchedule,
    guidance: GuidanceParams,
    batch: &[BatchItem],
    control: &Control,
    mut observer: Option<Observer>,
) -> Result<NumericRun> {
    let steps = sched.steps();
    let mut xs: Vec<Vec<f64>> = batch.iter().map(|b| initial_latent(pred.dim(), b.seed)).collect();
    let (mut ctrl, fractions) = match control {
        Control::Exact => (None, &[][..]),
        Control::Adaptive { cfg, fractions } => (Some(SwitchController::new(*cfg, steps)?), &fractions[..]),
    };
    let depth = fractions.len().saturating_sub(1);
    // history[s][i] is item i's latent from s + 1 steps earlier
    let mut history: VecDeque<Vec<Vec<f64>>> = VecDeque::new();
    let mut window_pos = 0;
    let mut records = Vec::with_capacity(steps);
    let uncond = Condition::Unconditional;

    for t in (1..=steps).rev() {
        let full = ctrl.as_ref().is_none_or(|c| c.needs_measurement(t));
        let mut record = StepRecord { t, stage: None, rel_mae: None, window_pos: None };
        let eps: Vec<Vec<f64>> = if full {
            let eps_c = batch
                .iter()
                .zip(&xs)
                .map(|(b, x)| pred.predict(&b.condition, x, t))
                .collect::<Result<Vec<_>>>()?;
            let eps_u = xs.iter().map(|x| pred.predict(&uncond, x, t)).collect::<Result<Vec<_>>>()?;
            if let Some(obs) = observer.as_mut() {
                obs(&StepView { t, xs: &xs, eps_c: &eps_c, eps_u: &eps_u })?;
            }
            match ctrl.as_mut() {
                Some(c) => {
                    let m = rel_mae(&eps_c, &eps_u)?;
                    record.rel_mae = Some(m);
                    record.stage = Some(c.advance(t, Some(m))?);
                }
                None => record.rel_mae = rel_mae(&eps_c, &eps_u).ok(),
            }
            eps_c
                .iter()
                .zip(&eps_u)
                .map(|(c, u)| cfg_combine(c, u, guidance))
                .collect::<Result<Vec<_>>>()?
        } else {
            let c = ctrl.as_mut().expect("parallel steps need a controller");
            record.stage = Some(c.advance(t, None)?);
            let p = window_pos;
            record.window_pos = Some(p);
            window_pos += 1;
            let mut out = Vec::with_capacity(xs.len());
            for (i, b) in batch.iter().enumerate() {
                // one evaluation per distinct staleness
                let per_lag: Vec<Vec<f64>> = (0..=depth.min(p))
                    .map(|s| {
                        let x = if s == 0 { &xs[i] } else { &history[s - 1][i] };
                        pred.predict(&b.condition, x, t)
                    })
                    .collect::<Result<_>>()?;
                let mut e = vec![0.0; xs[i].len()];
                for (j, f) in fractions.iter().enumerate() {
                    for (acc, v) in e.iter_mut().zip(&per_lag[j.min(p)]) {
                        *acc += f * v;
                    }
                }
                out.push(e);
            }
            out
        };
        records.push(record);
        let next = xs
            .iter()
            .zip(&eps)
            .map(|(x, e)| Ok(ddim_step(&LatentState::new(x.clone(), t)?, e, sched)?.x))
            .collect::<Result<Vec<_>>>()?;
        if depth > 0 {
            history.push_front(std::mem::replace(&mut xs, next));
            history.truncate(depth);
        } else {
            xs = next;
        }
    }
    let (tau1, tau2) = ctrl.map_or((None, None), |c| (c.state().tau1, c.state().tau2));
    Ok(NumericRun { x0: xs, steps: records, tau1, tau2 })
}
