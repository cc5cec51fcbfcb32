//! Experiment configuration, metrics and the command implementations
//! behind the CLI.

pub mod commands;
pub mod metrics;
pub mod table;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::discrepancy::SwitchConfig;
use crate::engine::{BatchItem, DeviceSpec, ExecutionPlan, LinkSpec, PlanVariant};
use crate::error::{Error, Result};
use crate::mixture::{Condition, GaussianMixture};
use crate::schedule::{GuidanceParams, NoiseSchedule, ScheduleKind, ScheduleSpec};

pub use commands::{cmd_calibrate, cmd_curve, cmd_detect, cmd_simulate, cmd_sweep};
pub use metrics::Metrics;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case")]
pub enum PlanKind {
    Serial,
    FullConditionPartition,
    Hybrid,
    BatchLevel { devices: usize },
    LayerWise { devices: usize },
}

impl PlanKind {
    pub fn variant(&self, switch: SwitchConfig) -> PlanVariant {
        match *self {
            PlanKind::Serial => PlanVariant::Serial,
            PlanKind::FullConditionPartition => PlanVariant::FullConditionPartition,
            PlanKind::Hybrid => PlanVariant::Hybrid { switch },
            PlanKind::BatchLevel { devices } => PlanVariant::BatchLevel { devices, switch },
            PlanKind::LayerWise { devices } => PlanVariant::LayerWise { devices, switch },
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            PlanKind::Serial => "serial",
            PlanKind::FullConditionPartition => "full_condition_partition",
            PlanKind::Hybrid => "hybrid",
            PlanKind::BatchLevel { .. } => "batch_level",
            PlanKind::LayerWise { .. } => "layer_wise",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schedule: ScheduleSpec,
    pub mixture: GaussianMixture,
    /// Cycled over the seeds to form the batch.
    pub conditions: Vec<Condition>,
    pub guidance: f64,
    pub switch: SwitchConfig,
    pub devices: Vec<DeviceSpec>,
    pub link: LinkSpec,
    pub batching_factor: f64,
    pub segment_fractions: Vec<f64>,
    pub plan: PlanKind,
    pub seeds: Vec<u64>,
    /// Peak for the PSNR analog; defaults to the largest magnitude seen.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub psnr_peak: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

pub const PRESETS: [&str; 2] = ["sdxl-like", "sd3-like"];

const SDXL_COST: f64 = 0.1649;
const SD3_COST: f64 = 0.1936;
const BANDWIDTH: f64 = 12e9;
// two latent transfers per step add 0.0199 s on the SDXL-like preset
const BASE_LATENCY: f64 = 0.0199 / 2.0 - 131_072.0 / BANDWIDTH;

impl ExperimentConfig {
    /// Built-in parameter sets. Costs and message sizes are fitted to the
    /// published latencies and traffic, not measured.
    pub fn preset(name: &str) -> Result<Self> {
        let (switch, cost, latent, activation) = match name {
            "sdxl-like" => (SwitchConfig::sdxl(), SDXL_COST, 131_072, 100_840_704),
            "sd3-like" => (SwitchConfig::sd3(), SD3_COST, 524_288, 28_362_816),
            other => {
                return Err(Error::param("preset", format!("unknown preset `{other}`, expected one of {PRESETS:?}")))
            }
        };
        let gm = GaussianMixture::testbed();
        Ok(ExperimentConfig {
            schedule: ScheduleSpec { kind: ScheduleKind::Linear, steps: 50, beta_start: 1e-4, beta_end: 0.2 },
            conditions: gm.singleton_conditions(),
            mixture: gm,
            guidance: 2.0,
            switch,
            devices: (0..2).map(|id| DeviceSpec { id, branch_step_cost: cost }).collect(),
            link: LinkSpec {
                bandwidth: BANDWIDTH,
                base_latency: BASE_LATENCY,
                message_bytes_latent: latent,
                message_bytes_activation: activation,
            },
            batching_factor: 2.0,
            segment_fractions: vec![0.5, 0.5],
            plan: PlanKind::Hybrid,
            seeds: vec![0],
            psnr_peak: None,
            output_dir: None,
        })
    }

    /// Parses a config document. A `preset` key selects the base values
    /// and the remaining top-level keys replace them.
    pub fn from_json(text: &str) -> Result<Self> {
        let v: Value = serde_json::from_str(text)?;
        let Value::Object(mut obj) = v else {
            return Err(Error::param("config", "expected a JSON object"));
        };
        let preset = match obj.remove("preset") {
            None => "sdxl-like".to_string(),
            Some(Value::String(s)) => s,
            Some(_) => return Err(Error::param("preset", "expected a string")),
        };
        let Value::Object(mut base) = serde_json::to_value(Self::preset(&preset)?)? else {
            unreachable!("config serializes to an object")
        };
        base.extend(obj);
        let cfg: Self = serde_json::from_value(Value::Object(base))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io { path: path.into(), source })?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::param("seeds", "must not be empty"));
        }
        if self.conditions.is_empty() {
            return Err(Error::param("conditions", "must not be empty"));
        }
        for c in &self.conditions {
            self.mixture.check_condition(c)?;
        }
        if let Some(p) = self.psnr_peak {
            if !(p > 0.0 && p.is_finite()) {
                return Err(Error::param("psnr_peak", "must be > 0"));
            }
        }
        let sched = self.schedule.build()?;
        self.plan()?.validate(sched.steps())
    }

    pub fn batch(&self) -> Vec<BatchItem> {
        self.seeds
            .iter()
            .enumerate()
            .map(|(i, &seed)| BatchItem { condition: self.conditions[i % self.conditions.len()].clone(), seed })
            .collect()
    }

    pub fn plan(&self) -> Result<ExecutionPlan> {
        Ok(ExecutionPlan {
            variant: self.plan.variant(self.switch),
            guidance: GuidanceParams::new(self.guidance)?,
            devices: self.devices.clone(),
            link: self.link.clone(),
            batching_factor: self.batching_factor,
            segment_fractions: self.segment_fractions.clone(),
            batch: self.batch(),
        })
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        self.schedule.build()
    }
}
