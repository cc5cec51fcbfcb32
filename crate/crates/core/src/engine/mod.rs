//! Execution plans over virtual devices: numeric semantics plus simulated
//! timing and communication.
//!
//! A run first performs the numeric pass, which fixes the stage of every
//! step. The timing pass then builds a task graph from those stages and
//! simulates it. Compute cost and message size scale linearly with the
//! number of batch items a device group processes.

pub mod numeric;
pub mod sim;

use serde::{Deserialize, Serialize};

use crate::discrepancy::{Stage, SwitchConfig};
use crate::error::{Error, Result};
use crate::schedule::{GuidanceParams, NoiseSchedule};
use numeric::{denoise, Control, NumericRun};
use sim::{simulate, TaskGraph, TaskId, TaskKind, Timing};

pub use numeric::{initial_latent, BatchItem, MixtureOracle, NoisePredictor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeviceSpec {
    pub id: usize,
    /// Simulated seconds for one branch of the denoiser, one step, one item.
    pub branch_step_cost: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinkSpec {
    /// Bytes per second.
    pub bandwidth: f64,
    /// Seconds per message.
    pub base_latency: f64,
    pub message_bytes_latent: u64,
    pub message_bytes_activation: u64,
}

impl LinkSpec {
    /// Free and instantaneous link.
    pub fn ideal(message_bytes_latent: u64, message_bytes_activation: u64) -> Self {
        LinkSpec { bandwidth: f64::INFINITY, base_latency: 0.0, message_bytes_latent, message_bytes_activation }
    }

    pub fn latent_time(&self) -> f64 {
        sim::transfer_time(self, self.message_bytes_latent)
    }

    pub fn activation_time(&self) -> f64 {
        sim::transfer_time(self, self.message_bytes_activation)
    }

    fn validate(&self) -> Result<()> {
        if !(self.bandwidth > 0.0) {
            return Err(Error::param("bandwidth", "must be > 0"));
        }
        if !(self.base_latency >= 0.0 && self.base_latency.is_finite()) {
            return Err(Error::param("base_latency", "must be finite and >= 0"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case")]
pub enum PlanVariant {
    Serial,
    FullConditionPartition,
    Hybrid { switch: SwitchConfig },
    BatchLevel { devices: usize, switch: SwitchConfig },
    LayerWise { devices: usize, switch: SwitchConfig },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExecutionPlan {
    pub variant: PlanVariant,
    pub guidance: GuidanceParams,
    pub devices: Vec<DeviceSpec>,
    pub link: LinkSpec,
    /// Cost of one serial step in units of one branch: 2 runs the branches
    /// back to back, 1 batches them for free.
    pub batching_factor: f64,
    /// Share of the model held by each pipeline segment.
    pub segment_fractions: Vec<f64>,
    pub batch: Vec<BatchItem>,
}

impl ExecutionPlan {
    pub fn with_variant(&self, variant: PlanVariant) -> Self {
        ExecutionPlan { variant, ..self.clone() }
    }

    pub fn validate(&self, steps: usize) -> Result<()> {
        if self.batch.is_empty() {
            return Err(Error::Plan("empty batch".into()));
        }
        if self.devices.is_empty() {
            return Err(Error::Plan("no devices".into()));
        }
        for d in &self.devices {
            if !(d.branch_step_cost > 0.0 && d.branch_step_cost.is_finite()) {
                return Err(Error::param("branch_step_cost", format!("device {}: must be > 0", d.id)));
            }
        }
        if !(1.0..=2.0).contains(&self.batching_factor) {
            return Err(Error::param("batching_factor", "must lie in [1, 2]"));
        }
        self.link.validate()?;
        let need = |n: usize| -> Result<()> {
            if self.devices.len() != n {
                return Err(Error::Plan(format!("needs {n} devices, got {}", self.devices.len())));
            }
            Ok(())
        };
        let fractions = |n: usize| -> Result<()> {
            if self.segment_fractions.len() != n {
                return Err(Error::Plan(format!(
                    "needs {n} segment fractions, got {}",
                    self.segment_fractions.len()
                )));
            }
            if self.segment_fractions.iter().any(|f| !(*f > 0.0)) {
                return Err(Error::param("segment_fractions", "must be positive"));
            }
            let s: f64 = self.segment_fractions.iter().sum();
            if (s - 1.0).abs() > 1e-9 {
                return Err(Error::param("segment_fractions", format!("sum to {s}, not 1")));
            }
            Ok(())
        };
        match &self.variant {
            PlanVariant::Serial => Ok(()),
            PlanVariant::FullConditionPartition => need(2),
            PlanVariant::Hybrid { switch } => {
                need(2)?;
                fractions(2)?;
                switch.validate(steps)
            }
            PlanVariant::BatchLevel { devices, switch } => {
                if *devices < 2 || devices % 2 != 0 {
                    return Err(Error::Plan(format!("batch-level needs an even device count, got {devices}")));
                }
                need(*devices)?;
                fractions(2)?;
                switch.validate(steps)
            }
            PlanVariant::LayerWise { devices, switch } => {
                if *devices < 2 {
                    return Err(Error::Plan(format!("layer-wise needs at least 2 devices, got {devices}")));
                }
                need(*devices)?;
                fractions(*devices)?;
                switch.validate(steps)
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepLabel {
    Serial,
    ConditionPartition,
    WarmUp,
    Parallelism,
    FullyConnecting,
}

impl StepLabel {
    pub fn as_str(&self) -> &'static str {
        match self {
            StepLabel::Serial => "serial",
            StepLabel::ConditionPartition => "condition_partition",
            StepLabel::WarmUp => "warm_up",
            StepLabel::Parallelism => "parallelism",
            StepLabel::FullyConnecting => "fully_connecting",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BusyInterval {
    pub device: usize,
    pub start: f64,
    pub end: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Message {
    pub src: usize,
    pub dst: usize,
    pub bytes: u64,
    pub depart: f64,
    pub arrive: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepTrace {
    pub t: usize,
    /// Independent device group (batch-level pair) and its wave.
    pub group: usize,
    pub wave: usize,
    pub label: StepLabel,
    pub busy: Vec<BusyInterval>,
    pub messages: Vec<Message>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunTrace {
    pub steps: Vec<StepTrace>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupResult {
    pub group: usize,
    pub wave: usize,
    /// Indices into the plan's batch.
    pub items: Vec<usize>,
    pub tau1: Option<usize>,
    pub tau2: Option<usize>,
    pub latency_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    /// One final sample per batch item.
    pub x0: Vec<Vec<f64>>,
    pub latency_s: f64,
    pub comm_bytes: u64,
    pub serial_latency_s: f64,
    pub speedup: f64,
    pub throughput: f64,
    pub tau1: Option<usize>,
    pub tau2: Option<usize>,
    pub groups: Vec<GroupResult>,
    pub trace: RunTrace,
}

pub fn account_comm(trace: &RunTrace) -> u64 {
    trace.steps.iter().flat_map(|s| &s.messages).map(|m| m.bytes).sum()
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum StepKind {
    Serial,
    Exchange,
    /// Position inside the parallel window.
    Pipelined(usize),
}

fn label_of(variant: &PlanVariant, stage: Option<Stage>) -> StepLabel {
    match (variant, stage) {
        (PlanVariant::Serial, _) => StepLabel::Serial,
        (_, None) => StepLabel::ConditionPartition,
        (_, Some(Stage::WarmUp)) => StepLabel::WarmUp,
        (_, Some(Stage::Parallelism)) => StepLabel::Parallelism,
        (_, Some(Stage::FullyConnecting)) => StepLabel::FullyConnecting,
    }
}

struct GroupSteps {
    group: usize,
    wave: usize,
    devices: Vec<usize>,
    items: usize,
    run_steps: Vec<(usize, StepKind, StepLabel)>,
}

struct Builder<'a> {
    plan: &'a ExecutionPlan,
    graph: TaskGraph,
    /// (t, group, wave, label) per trace step.
    meta: Vec<(usize, usize, usize, StepLabel)>,
}

impl Builder<'_> {
    fn cost(&self, device: usize) -> f64 {
        self.plan.devices[device].branch_step_cost
    }

    fn add_group(&mut self, g: &GroupSteps) {
        let b = g.items as f64;
        let items = g.items as u64;
        let lat_bytes = self.plan.link.message_bytes_latent * items;
        let act_bytes = self.plan.link.message_bytes_activation * items;
        let fr = &self.plan.segment_fractions;
        // task after which each group device holds the current latent
        let mut avail: Vec<Option<TaskId>> = vec![None; g.devices.len()];
        // activations leaving each segment during the previous window step
        let mut prev_acts: Vec<TaskId> = vec![];
        let deps = |x: Option<TaskId>| x.into_iter().collect::<Vec<_>>();
        for &(t, kind, label) in &g.run_steps {
            let step = self.meta.len();
            self.meta.push((t, g.group, g.wave, label));
            let (a, bdev) = (g.devices[0], g.devices.get(1).copied().unwrap_or(g.devices[0]));
            match kind {
                StepKind::Serial => {
                    let c = self.plan.batching_factor * self.cost(a) * b;
                    avail[0] = Some(self.graph.compute(step, a, c, &deps(avail[0])));
                }
                StepKind::Exchange => {
                    let cc = self.graph.compute(step, a, self.cost(a) * b, &deps(avail[0]));
                    let cu = self.graph.compute(step, bdev, self.cost(bdev) * b, &deps(avail[1]));
                    let eps_u = self.graph.transfer(step, bdev, a, lat_bytes, &[cu]);
                    let upd = self.graph.join(step, &[cc, eps_u]);
                    let x_back = self.graph.transfer(step, a, bdev, lat_bytes, &[upd]);
                    avail[0] = Some(upd);
                    avail[1] = Some(x_back);
                }
                StepKind::Pipelined(p) => {
                    let mut segs = Vec::with_capacity(g.devices.len());
                    let mut acts = Vec::with_capacity(g.devices.len() - 1);
                    for (j, &dev) in g.devices.iter().enumerate() {
                        let d = match (j, p) {
                            (0, _) => deps(avail[0]),
                            (_, 0) => vec![acts[j - 1]],
                            _ => vec![prev_acts[j - 1]],
                        };
                        let s = self.graph.compute(step, dev, fr[j] * self.cost(dev) * b, &d);
                        segs.push(s);
                        if j + 1 < g.devices.len() {
                            acts.push(self.graph.transfer(step, dev, g.devices[j + 1], act_bytes, &[s]));
                        }
                    }
                    // the assembled prediction is available to the whole group
                    let upd = self.graph.join(step, &segs);
                    avail.iter_mut().for_each(|v| *v = Some(upd));
                    prev_acts = acts;
                }
            }
        }
    }

    fn trace(&self, timing: &Timing) -> RunTrace {
        let mut steps: Vec<StepTrace> = self
            .meta
            .iter()
            .map(|&(t, group, wave, label)| StepTrace { t, group, wave, label, busy: vec![], messages: vec![] })
            .collect();
        for (i, task) in self.graph.tasks.iter().enumerate() {
            let st = &mut steps[task.step];
            let (start, end) = (timing.start[i], timing.finish[i]);
            match task.kind {
                TaskKind::Compute { device, .. } => st.busy.push(BusyInterval { device, start, end }),
                TaskKind::Transfer { src, dst, bytes } => {
                    st.messages.push(Message { src, dst, bytes, depart: start, arrive: end })
                }
                TaskKind::Join => {}
            }
        }
        RunTrace { steps }
    }
}

fn step_kinds(variant: &PlanVariant, run: &NumericRun) -> Vec<(usize, StepKind, StepLabel)> {
    run.steps
        .iter()
        .map(|r| {
            let kind = match (variant, r.window_pos) {
                (PlanVariant::Serial, _) => StepKind::Serial,
                (_, Some(p)) => StepKind::Pipelined(p),
                (_, None) => StepKind::Exchange,
            };
            (r.t, kind, label_of(variant, r.stage))
        })
        .collect()
}

fn serial_latency(plan: &ExecutionPlan, steps: usize) -> Result<f64> {
    let mut b = Builder { plan, graph: TaskGraph::default(), meta: vec![] };
    let g = GroupSteps {
        group: 0,
        wave: 0,
        devices: vec![0],
        items: plan.batch.len(),
        run_steps: (1..=steps).rev().map(|t| (t, StepKind::Serial, StepLabel::Serial)).collect(),
    };
    b.add_group(&g);
    Ok(simulate(&b.graph, &plan.link)?.makespan())
}

/// Runs any plan variant.
pub fn run(plan: &ExecutionPlan, sched: &NoiseSchedule, pred: &dyn NoisePredictor) -> Result<RunResult> {
    let steps = sched.steps();
    plan.validate(steps)?;
    let ndev = plan.devices.len();
    // (group, wave, devices, item indices, numeric control)
    let mut jobs: Vec<(usize, usize, Vec<usize>, Vec<usize>, Control)> = vec![];
    let all: Vec<usize> = (0..plan.batch.len()).collect();
    let adaptive = |s: &SwitchConfig| Control::Adaptive { cfg: *s, fractions: plan.segment_fractions.clone() };
    match &plan.variant {
        PlanVariant::Serial => jobs.push((0, 0, vec![0], all, Control::Exact)),
        PlanVariant::FullConditionPartition => jobs.push((0, 0, vec![0, 1], all, Control::Exact)),
        PlanVariant::Hybrid { switch } => jobs.push((0, 0, vec![0, 1], all, adaptive(switch))),
        PlanVariant::LayerWise { switch, .. } => jobs.push((0, 0, (0..ndev).collect(), all, adaptive(switch))),
        PlanVariant::BatchLevel { devices, switch } => {
            let pairs = devices / 2;
            for (i, _) in plan.batch.iter().enumerate() {
                let (group, wave) = (i % pairs, i / pairs);
                jobs.push((group, wave, vec![2 * group, 2 * group + 1], vec![i], adaptive(switch)));
            }
        }
    }

    let runs = jobs
        .iter()
        .map(|(_, _, _, items, control)| {
            let batch: Vec<BatchItem> = items.iter().map(|&i| plan.batch[i].clone()).collect();
            denoise(pred, sched, plan.guidance, &batch, control, None)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut builder = Builder { plan, graph: TaskGraph::default(), meta: vec![] };
    // group boundaries in the task list, for per-group latency
    let mut spans = vec![];
    for ((group, wave, devices, items, _), run) in jobs.iter().zip(&runs) {
        let first = builder.graph.tasks.len();
        builder.add_group(&GroupSteps {
            group: *group,
            wave: *wave,
            devices: devices.clone(),
            items: items.len(),
            run_steps: step_kinds(&plan.variant, run),
        });
        spans.push(first..builder.graph.tasks.len());
    }
    let timing = simulate(&builder.graph, &plan.link)?;
    let trace = builder.trace(&timing);
    let latency = timing.makespan();
    let serial = serial_latency(plan, steps)?;

    let mut x0 = vec![vec![]; plan.batch.len()];
    let mut groups = vec![];
    for (((group, wave, _, items, _), run), span) in jobs.iter().zip(runs).zip(spans) {
        let start = span.clone().map(|i| timing.start[i]).fold(f64::INFINITY, f64::min);
        let end = span.map(|i| timing.finish[i]).fold(0.0, f64::max);
        for (&i, x) in items.iter().zip(run.x0) {
            x0[i] = x;
        }
        groups.push(GroupResult {
            group: *group,
            wave: *wave,
            items: items.clone(),
            tau1: run.tau1,
            tau2: run.tau2,
            latency_s: end - start,
        });
    }
    Ok(RunResult {
        x0,
        latency_s: latency,
        comm_bytes: account_comm(&trace),
        serial_latency_s: serial,
        speedup: serial / latency,
        throughput: plan.batch.len() as f64 / latency,
        tau1: groups[0].tau1,
        tau2: groups[0].tau2,
        groups,
        trace,
    })
}

fn expect_variant(plan: &ExecutionPlan, ok: bool, name: &str) -> Result<()> {
    if !ok {
        return Err(Error::Plan(format!("expected a {name} plan, got {:?}", plan.variant)));
    }
    Ok(())
}

pub fn run_serial(plan: &ExecutionPlan, sched: &NoiseSchedule, pred: &dyn NoisePredictor) -> Result<RunResult> {
    expect_variant(plan, matches!(plan.variant, PlanVariant::Serial), "serial")?;
    run(plan, sched, pred)
}

pub fn run_full_condition_partition(
    plan: &ExecutionPlan,
    sched: &NoiseSchedule,
    pred: &dyn NoisePredictor,
) -> Result<RunResult> {
    expect_variant(plan, matches!(plan.variant, PlanVariant::FullConditionPartition), "condition-partition")?;
    run(plan, sched, pred)
}

pub fn run_hybrid(plan: &ExecutionPlan, sched: &NoiseSchedule, pred: &dyn NoisePredictor) -> Result<RunResult> {
    expect_variant(plan, matches!(plan.variant, PlanVariant::Hybrid { .. }), "hybrid")?;
    run(plan, sched, pred)
}

pub fn run_batch_level(plan: &ExecutionPlan, sched: &NoiseSchedule, pred: &dyn NoisePredictor) -> Result<RunResult> {
    expect_variant(plan, matches!(plan.variant, PlanVariant::BatchLevel { .. }), "batch-level")?;
    run(plan, sched, pred)
}

pub fn run_layer_wise(plan: &ExecutionPlan, sched: &NoiseSchedule, pred: &dyn NoisePredictor) -> Result<RunResult> {
    expect_variant(plan, matches!(plan.variant, PlanVariant::LayerWise { .. }), "layer-wise")?;
    run(plan, sched, pred)
}

/// Bytes of a plan that pipelines every step over `devices` segments.
pub fn always_pipelined_comm(steps: usize, devices: usize, link: &LinkSpec, items: usize) -> u64 {
    (steps * (devices - 1)) as u64 * link.message_bytes_activation * items as u64
}
