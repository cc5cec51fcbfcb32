//! Acceptance gate. Prints one PASS/FAIL line per criterion, then asserts
//! that the failing set is exactly the documented one.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use hybridpar::discrepancy::{
    detect_switch, hoeffding_false_alarm, rel_mae, score_ratio_estimate, DiscrepancySeries, SlopeNoiseModel,
    SwitchConfig,
};
use hybridpar::engine::{
    always_pipelined_comm, run, run_batch_level, run_hybrid, run_layer_wise, BatchItem, ExecutionPlan,
    MixtureOracle, PlanVariant,
};
use hybridpar::harness::commands::{curve, sweep};
use hybridpar::harness::{ExperimentConfig, PlanKind};
use hybridpar::mixture::{eps_prediction, score, Condition, GaussianMixture};
use hybridpar::schedule::{NoiseSchedule, ScheduleKind};

/// Criteria expected to fail, with the reason kept in the README.
const KNOWN_UNMET: &[usize] = &[5];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn random_mixture(rng: &mut ChaCha8Rng) -> GaussianMixture {
    let d = rng.random_range(1..=6);
    let k = rng.random_range(2..=5);
    let w: Vec<f64> = (0..k).map(|_| rng.random_range(0.1..1.0)).collect();
    let total: f64 = w.iter().sum();
    let w = w.iter().map(|v| v / total).collect();
    let means = (0..k).map(|_| (0..d).map(|_| rng.random_range(-3.0..3.0)).collect()).collect();
    let vars = (0..k).map(|_| (0..d).map(|_| rng.random_range(0.2..2.0)).collect()).collect();
    GaussianMixture::new(w, means, vars).unwrap()
}

fn proper_subset(rng: &mut ChaCha8Rng, k: usize) -> Vec<usize> {
    loop {
        let s: Vec<usize> = (0..k).filter(|_| rng.random_bool(0.5)).collect();
        if !s.is_empty() && s.len() < k {
            return s;
        }
    }
}

fn random_schedule(rng: &mut ChaCha8Rng) -> NoiseSchedule {
    if rng.random_bool(0.5) {
        NoiseSchedule::build(ScheduleKind::Linear, 50, 1e-4, 0.2).unwrap()
    } else {
        NoiseSchedule::build(ScheduleKind::ScaledLinear, 50, 0.00085, 0.012).unwrap()
    }
}

fn gauss(rng: &mut ChaCha8Rng, d: usize, scale: f64) -> Vec<f64> {
    (0..d).map(|_| scale * Distribution::<f64>::sample(&StandardNormal, rng)).collect()
}

fn within(value: f64, target: f64, tol: f64) -> bool {
    (value - target).abs() <= tol * target.abs()
}

/// Below this discrepancy two separately rounded epsilon vectors cannot
/// carry ten relative digits in their difference.
const RESOLVABLE: f64 = 2e-6;

fn c1_identity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    let (mut cases, mut unresolved, mut worst_abs) = (0, 0, 0.0f64);
    while cases < 200 {
        let gm = random_mixture(&mut rng);
        let sched = random_schedule(&mut rng);
        let subset = proper_subset(&mut rng, gm.components());
        let t = rng.random_range(1..=50);
        let xs: Vec<Vec<f64>> = (0..rng.random_range(1..=4)).map(|_| gauss(&mut rng, gm.dim(), 2.5)).collect();
        let cond = Condition::Conditional(subset.clone());
        let ec: Vec<_> = xs.iter().map(|x| eps_prediction(&gm, &cond, &sched, x, t).unwrap()).collect();
        let eu: Vec<_> =
            xs.iter().map(|x| eps_prediction(&gm, &Condition::Unconditional, &sched, x, t).unwrap()).collect();
        let m = rel_mae(&ec, &eu).unwrap();
        let r = score_ratio_estimate(&gm, &subset, &sched, &xs, t).unwrap();
        if r < RESOLVABLE {
            unresolved += 1;
            worst_abs = worst_abs.max((m - r).abs());
            continue;
        }
        cases += 1;
        worst = worst.max((m - r).abs() / r);
    }
    outcome(
        worst <= 1e-10 && worst_abs <= 1e-13,
        format!(
            "{cases} cases with M >= {RESOLVABLE:e}, worst relative error {worst:.3e}; \
             {unresolved} cases below that, worst absolute error {worst_abs:.1e}"
        ),
    )
}

fn c2_scores() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    let h = 1e-5;
    for _ in 0..100 {
        let gm = random_mixture(&mut rng);
        let sched = random_schedule(&mut rng);
        let cond = if rng.random_bool(0.5) {
            Condition::Unconditional
        } else {
            Condition::Conditional(proper_subset(&mut rng, gm.components()))
        };
        let t = rng.random_range(1..=50);
        let x = gauss(&mut rng, gm.dim(), 2.0);
        let s = score(&gm, &cond, &sched, &x, t).unwrap().score;
        let fd: Vec<f64> = (0..x.len())
            .map(|i| {
                let (mut a, mut b) = (x.clone(), x.clone());
                a[i] += h;
                b[i] -= h;
                let la = score(&gm, &cond, &sched, &a, t).unwrap().log_density;
                let lb = score(&gm, &cond, &sched, &b, t).unwrap().log_density;
                (la - lb) / (2.0 * h)
            })
            .collect();
        let num: f64 = s.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let den: f64 = fd.iter().map(|v| v * v).sum::<f64>().sqrt();
        worst = worst.max(num / den.max(1e-12));
    }
    outcome(worst <= 1e-5, format!("100 cases, worst relative error {worst:.3e}"))
}

fn c3_u_curve() -> Outcome {
    let mut cfg = ExperimentConfig::preset("sdxl-like").unwrap();
    cfg.seeds = (0..64).collect();
    let rows = curve(&cfg).unwrap();
    let min = rows.iter().map(|r| r.rel_mae).fold(f64::INFINITY, f64::min);
    let first = rows.iter().find(|r| r.t == 50).unwrap().rel_mae;
    let last = rows.iter().find(|r| r.t == 1).unwrap().rel_mae;
    outcome(
        first >= 1.5 * min && last >= 1.2 * min,
        format!("M_T/min = {:.3} (>= 1.5), M_1/min = {:.3} (>= 1.2)", first / min, last / min),
    )
}

/// Direct scan over step numbers, written independently of the controller.
fn scan_tau1(m: &[f64], cfg: &SwitchConfig) -> usize {
    let steps = m.len() - 1;
    let at = |n: usize| m[steps + 1 - n];
    for n in 1..=steps {
        if n >= cfg.tau_cap {
            return cfg.tau_cap;
        }
        if n > cfg.window {
            let g = (at(n) - at(n - cfg.window)) / cfg.window as f64;
            if (0.0..cfg.g_slope).contains(&g) {
                return n;
            }
        }
    }
    unreachable!("tau_cap <= T")
}

fn c4_detection() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let steps = 50;
    let mut mismatches = 0;
    let mut over_cap = 0;
    let mut elbow_hits = 0;
    for family in 0..50 {
        let depth = rng.random_range(0.01..0.2);
        let floor = rng.random_range(0.01..0.1);
        let center = rng.random_range(5.0..45.0);
        let width = rng.random_range(5.0..30.0);
        // m[t] for t = 0..=T; index 0 unused
        let m: Vec<f64> = (0..=steps)
            .map(|t| {
                let u = (t as f64 - center) / width;
                match family % 3 {
                    0 => floor + depth * u * u,
                    1 => floor + depth * (u.abs().powf(1.5)),
                    _ => floor + depth * (u.cosh() - 1.0),
                }
            })
            .collect();
        let window = rng.random_range(2..=15);
        let cfg = SwitchConfig {
            window,
            g_slope: rng.random_range(1e-4..5e-3),
            tau_cap: rng.random_range(window + 1..=steps - 6),
            k: 5,
        };
        let series = DiscrepancySeries::from_pairs((1..=steps).map(|t| (t, m[t]))).unwrap();
        let det = detect_switch(&series, &cfg, steps).unwrap();
        let want = scan_tau1(&m, &cfg);
        mismatches += usize::from(det.tau1 != want);
        over_cap += usize::from(det.tau1 > cfg.tau_cap);
        elbow_hits += usize::from(det.tau1 < cfg.tau_cap);
    }
    outcome(
        mismatches == 0 && over_cap == 0,
        format!("50 families, {mismatches} scan mismatches, {over_cap} above cap, {elbow_hits} detected before cap"),
    )
}

fn c5_latency() -> Outcome {
    let cfg = ExperimentConfig::preset("sdxl-like").unwrap();
    let sched = cfg.schedule().unwrap();
    let oracle = MixtureOracle { gm: &cfg.mixture, sched: &sched };
    let base = cfg.plan().unwrap();
    let targets = [
        ("serial", PlanVariant::Serial, 16.49, 1.0),
        ("condition-partition", PlanVariant::FullConditionPartition, 9.24, 1.78),
        ("hybrid", PlanVariant::Hybrid { switch: cfg.switch }, 7.12, 2.31),
    ];
    let mut pass = true;
    let mut parts = vec![];
    for (name, variant, lat, speed) in targets {
        let r = run(&base.with_variant(variant), &sched, &oracle).unwrap();
        let ok_l = within(r.latency_s, lat, 0.2);
        let ok_s = within(r.speedup, speed, 0.2);
        pass &= ok_l && ok_s;
        parts.push(format!(
            "{name} {:.3}s [{}] {:.3}x [{}]",
            r.latency_s,
            if ok_l { "ok" } else { "out" },
            r.speedup,
            if ok_s { "ok" } else { "out" }
        ));
    }
    outcome(pass, parts.join(", "))
}

fn c6_sweep() -> Outcome {
    let mut cfg = ExperimentConfig::preset("sdxl-like").unwrap();
    cfg.seeds = (0..32).collect();
    let rows = sweep(&cfg, &[5, 10, 20, 30]).unwrap();
    let m: Vec<_> = rows.iter().map(|r| r.metrics.clone().unwrap()).collect();
    let lat: Vec<f64> = m.iter().map(|m| m.latency_s / m.samples as f64).collect();
    let fid: Vec<f64> = m.iter().map(|m| m.fidelity_l1).collect();
    let dec = lat.windows(2).all(|w| w[1] < w[0]);
    let nondec = fid.iter().zip(fid.iter().skip(1)).all(|(a, b)| b >= a);
    outcome(
        dec && nondec,
        format!(
            "latency per sample {:?}, fidelity_l1 {:?}",
            lat.iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>(),
            fid.iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>()
        ),
    )
}

fn c7_exactness() -> Outcome {
    let mut cfg = ExperimentConfig::preset("sdxl-like").unwrap();
    cfg.seeds = (0..32).collect();
    let sched = cfg.schedule().unwrap();
    let oracle = MixtureOracle { gm: &cfg.mixture, sched: &sched };
    let base = cfg.plan().unwrap();
    let serial = run(&base.with_variant(PlanVariant::Serial), &sched, &oracle).unwrap().x0;
    let switch = cfg.switch.with_k(0);
    let mut checked = 0;
    let mut ok = true;
    let mut variants: Vec<(PlanVariant, usize, usize)> = vec![
        (PlanVariant::FullConditionPartition, 2, 2),
        (PlanVariant::Hybrid { switch }, 2, 2),
        (PlanVariant::LayerWise { devices: 2, switch }, 2, 2),
        (PlanVariant::LayerWise { devices: 4, switch }, 4, 4),
        (PlanVariant::BatchLevel { devices: 2, switch }, 2, 2),
        (PlanVariant::BatchLevel { devices: 4, switch }, 4, 2),
    ];
    for (variant, devices, fractions) in variants.drain(..) {
        let plan = ExecutionPlan {
            variant,
            devices: (0..devices).map(|id| hybridpar::engine::DeviceSpec { id, ..base.devices[0].clone() }).collect(),
            segment_fractions: vec![1.0 / fractions as f64; fractions],
            ..base.clone()
        };
        let r = run(&plan, &sched, &oracle).unwrap();
        ok &= r.x0 == serial;
        checked += 1;
    }
    outcome(ok, format!("{checked} plans x 32 seeds, bit-identical = {ok}"))
}

fn c8_comm() -> Outcome {
    let cfg = ExperimentConfig::preset("sdxl-like").unwrap();
    let sched = cfg.schedule().unwrap();
    let oracle = MixtureOracle { gm: &cfg.mixture, sched: &sched };
    let link = &cfg.link;
    let mut ok = true;
    let mut parts = vec![];
    for k in [0, 5, 10, 20, 30] {
        let plan = cfg.plan().unwrap().with_variant(PlanVariant::Hybrid { switch: cfg.switch.with_k(k) });
        let r = run_hybrid(&plan, &sched, &oracle).unwrap();
        let par = r.tau2.unwrap() - r.tau1.unwrap();
        let closed = 2 * (50 - par) as u64 * link.message_bytes_latent + par as u64 * link.message_bytes_activation;
        let pipe = always_pipelined_comm(50, 2, link, 1);
        ok &= r.comm_bytes == closed && r.comm_bytes < pipe;
        parts.push(format!("k={k}: {} B", r.comm_bytes));
    }
    let pipe = always_pipelined_comm(50, 2, link, 1);
    outcome(ok, format!("{}; always-pipelined {pipe} B", parts.join(", ")))
}

fn c9_hoeffding() -> Outcome {
    let trials = 100_000;
    let (lo, hi) = (-1.0, 1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut ok = true;
    let mut worst_margin = f64::INFINITY;
    for window in [4usize, 12, 30] {
        for delta in [0.3, 0.5, 0.7, 0.9] {
            let bound = hoeffding_false_alarm(window, &SlopeNoiseModel::new(delta, lo, hi).unwrap()).unwrap();
            // two-point noise is the extreme case, uniform the typical one
            for two_point in [true, false] {
                let draw = |rng: &mut ChaCha8Rng| {
                    if two_point {
                        if rng.random_bool(0.5) { hi } else { lo }
                    } else {
                        rng.random_range(lo..hi)
                    }
                };
                let (mut mean_alarms, mut g_alarms) = (0usize, 0usize);
                for _ in 0..trials {
                    // window-mean form: average of L i.i.d. slope increments
                    let mean: f64 = (0..window).map(|_| draw(&mut rng)).sum::<f64>() / window as f64;
                    mean_alarms += usize::from(mean.abs() >= delta);
                    // endpoint form: (M_t - M_{t+L}) / L with i.i.d. noise on M
                    let g = (draw(&mut rng) - draw(&mut rng)) / window as f64;
                    g_alarms += usize::from(g.abs() >= delta);
                }
                for alarms in [mean_alarms, g_alarms] {
                    let freq = alarms as f64 / trials as f64;
                    ok &= freq <= bound;
                    worst_margin = worst_margin.min(bound - freq);
                }
            }
        }
    }
    outcome(ok, format!("L in {{4, 12, 30}}, 1e5 trials each, smallest bound - frequency {worst_margin:.2e}"))
}

fn c10_extensions() -> Outcome {
    let mut cfg = ExperimentConfig::preset("sdxl-like").unwrap();
    cfg.seeds = vec![0, 1];
    cfg.conditions = vec![Condition::Conditional(vec![0])];
    let sched = cfg.schedule().unwrap();
    let oracle = MixtureOracle { gm: &cfg.mixture, sched: &sched };
    let base = cfg.plan().unwrap();
    let hybrid = run_hybrid(&base, &sched, &oracle).unwrap();
    let lw = run_layer_wise(
        &base.with_variant(PlanVariant::LayerWise { devices: 2, switch: cfg.switch }),
        &sched,
        &oracle,
    )
    .unwrap();
    let same = lw.x0 == hybrid.x0 && lw.latency_s == hybrid.latency_s && lw.comm_bytes == hybrid.comm_bytes;

    let mut four = base.with_variant(PlanVariant::BatchLevel { devices: 4, switch: cfg.switch });
    four.devices = (0..4).map(|id| hybridpar::engine::DeviceSpec { id, ..base.devices[0].clone() }).collect();
    let bl = run_batch_level(&four, &sched, &oracle).unwrap();
    // one sample per pair against the same sample alone on one pair
    let mut per_sample_ok = true;
    let mut single_lat = 0.0f64;
    for (i, item) in four.batch.iter().enumerate() {
        let one = ExecutionPlan { batch: vec![BatchItem { ..item.clone() }], ..base.clone() };
        let r = run_hybrid(&one, &sched, &oracle).unwrap();
        per_sample_ok &= (bl.groups[i].latency_s - r.latency_s).abs() <= 1e-12 * r.latency_s;
        single_lat = single_lat.max(r.latency_s);
    }
    let ratio = bl.throughput / (1.0 / single_lat);
    outcome(
        same && per_sample_ok && (ratio - 2.0).abs() < 1e-9,
        format!("layer-wise N=2 identical = {same}, batch-level N=4 throughput ratio {ratio:.6}, per-sample latency kept = {per_sample_ok}"),
    )
}

#[test]
fn acceptance() {
    let criteria: [(usize, &str, Duration, fn() -> Outcome); 10] = [
        (1, "discrepancy equals score ratio", Duration::from_secs(5), c1_identity),
        (2, "analytic scores match finite differences", Duration::from_secs(5), c2_scores),
        (3, "discrepancy curve is U-shaped", Duration::from_secs(10), c3_u_curve),
        (4, "switch detection matches scan", Duration::from_secs(2), c4_detection),
        (5, "calibrated latency and speedup", Duration::from_secs(5), c5_latency),
        (6, "k-sweep monotonicity", Duration::from_secs(60), c6_sweep),
        (7, "empty window is exact", Duration::from_secs(30), c7_exactness),
        (8, "communication adaptivity", Duration::from_secs(5), c8_comm),
        (9, "false-alarm bound", Duration::from_secs(60), c9_hoeffding),
        (10, "N-device extensions", Duration::from_secs(10), c10_extensions),
    ];
    let mut failed = vec![];
    for (id, name, budget, check) in criteria {
        let start = Instant::now();
        let o = check();
        let took = start.elapsed();
        let pass = o.pass && took <= budget;
        println!(
            "criterion {id:>2} {}: {name} ({}; {:.2}s of {}s)",
            if pass { "PASS" } else { "FAIL" },
            o.detail,
            took.as_secs_f64(),
            budget.as_secs()
        );
        if !pass {
            failed.push(id);
        }
    }
    assert_eq!(failed, KNOWN_UNMET, "unexpected set of failing criteria");
}

#[test]
fn config_plan_kinds_cover_variants() {
    for kind in [
        PlanKind::Serial,
        PlanKind::FullConditionPartition,
        PlanKind::Hybrid,
        PlanKind::LayerWise { devices: 2 },
        PlanKind::BatchLevel { devices: 2 },
    ] {
        let mut cfg = ExperimentConfig::preset("sd3-like").unwrap();
        cfg.plan = kind;
        cfg.validate().unwrap();
    }
}
