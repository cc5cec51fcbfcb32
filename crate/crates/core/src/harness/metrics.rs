use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::engine::RunResult;
use crate::error::{Error, Result};

/// PSNR analog in dB. An exact match has no finite value and is written
/// as the string `"inf"`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Psnr(pub f64);

impl Psnr {
    pub fn is_exact(&self) -> bool {
        self.0 == f64::INFINITY
    }
}

impl std::fmt::Display for Psnr {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.is_exact() {
            f.write_str("inf")
        } else {
            f.write_str(&super::table::fmt_f64(self.0))
        }
    }
}

impl Serialize for Psnr {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        if self.is_exact() {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(self.0)
        }
    }
}

impl<'de> Deserialize<'de> for Psnr {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(Psnr(v)),
            Raw::Text(s) if s == "inf" => Ok(Psnr(f64::INFINITY)),
            Raw::Text(s) => Err(serde::de::Error::custom(format!("bad psnr value `{s}`"))),
        }
    }
}

/// Agreement between a run's samples and the serial reference.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Fidelity {
    /// Mean absolute difference per coordinate.
    pub l1: f64,
    /// Root mean squared difference per coordinate.
    pub l2: f64,
    pub psnr: Psnr,
}

pub fn fidelity(samples: &[Vec<f64>], reference: &[Vec<f64>], peak: Option<f64>) -> Result<Fidelity> {
    if samples.len() != reference.len() {
        return Err(Error::Shape { expected: reference.len(), got: samples.len() });
    }
    if samples.is_empty() {
        return Err(Error::Degenerate("no samples"));
    }
    let (mut abs, mut sq, mut n, mut max) = (0.0, 0.0, 0usize, 0.0f64);
    for (a, b) in samples.iter().zip(reference) {
        if a.len() != b.len() {
            return Err(Error::Shape { expected: b.len(), got: a.len() });
        }
        for (x, y) in a.iter().zip(b) {
            let d = x - y;
            abs += d.abs();
            sq += d * d;
            max = max.max(x.abs()).max(y.abs());
        }
        n += a.len();
    }
    let l1 = abs / n as f64;
    let l2 = (sq / n as f64).sqrt();
    let peak = peak.unwrap_or(max);
    let psnr = if l2 == 0.0 { f64::INFINITY } else { 20.0 * (peak / l2).log10() };
    if !l1.is_finite() || !l2.is_finite() || psnr.is_nan() {
        return Err(Error::NonFinite("fidelity"));
    }
    Ok(Fidelity { l1, l2, psnr: Psnr(psnr) })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub plan: String,
    pub samples: usize,
    pub latency_s: f64,
    pub serial_latency_s: f64,
    pub speedup: f64,
    /// Samples per simulated second.
    pub throughput: f64,
    pub comm_bytes: u64,
    pub fidelity_l1: f64,
    pub fidelity_l2: f64,
    pub psnr_analog: Psnr,
    pub tau1: Option<usize>,
    pub tau2: Option<usize>,
}

impl Metrics {
    pub fn from_run(plan: &str, run: &RunResult, reference: &[Vec<f64>], peak: Option<f64>) -> Result<Self> {
        let f = fidelity(&run.x0, reference, peak)?;
        Ok(Metrics {
            plan: plan.to_string(),
            samples: run.x0.len(),
            latency_s: run.latency_s,
            serial_latency_s: run.serial_latency_s,
            speedup: run.speedup,
            throughput: run.throughput,
            comm_bytes: run.comm_bytes,
            fidelity_l1: f.l1,
            fidelity_l2: f.l2,
            psnr_analog: f.psnr,
            tau1: run.tau1,
            tau2: run.tau2,
        })
    }
}
