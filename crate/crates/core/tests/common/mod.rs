//! Independent oracles and fixtures shared by the integration tests and the
//! acceptance harness.
#![allow(dead_code)]

use std::collections::HashMap;
use std::path::PathBuf;

use has_sched::allocator::{AllocError, NewPod};
use has_sched::autoscaler::{Autoscaler, ScalerConfig};
use has_sched::model::{ClusterState, FunctionSpec, GpuId, PodId, PodState, ScalingAction, ScalingKind};
use has_sched::perf::{PerfModel, PerfSample, PerfTable, PodConfig};
use has_sched::predictor::{predict_and_update_with_gain, KalmanState};
use has_sched::sim::{compute_cost, PodInterval};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

pub const FIXTURE_TABLES: [&str; 2] = ["perf_resnet50.csv", "perf_bert.csv"];

pub fn fixture_samples(name: &str) -> Vec<PerfSample> {
    has_sched::perf::read_samples(&fixture(name)).expect("fixture parses")
}

pub fn fixture_table(name: &str) -> PerfTable {
    let samples = fixture_samples(name);
    PerfTable::from_samples(samples[0].function_id.clone(), &samples).expect("fixture is clean")
}

fn sorted_axis(values: impl Iterator<Item = u32>) -> Vec<u32> {
    let mut v: Vec<u32> = values.collect();
    v.sort_unstable();
    v.dedup();
    v
}

/// The two axis nodes around `x` and the weight of the upper one. `x` is
/// clamped into the axis range first.
fn corners(axis: &[u32], x: f64) -> [(u32, f64); 2] {
    let lo_end = f64::from(axis[0]);
    let hi_end = f64::from(*axis.last().unwrap());
    let x = x.max(lo_end).min(hi_end);
    if axis.len() == 1 {
        return [(axis[0], 1.0), (axis[0], 0.0)];
    }
    for pair in axis.windows(2) {
        let (a, b) = (f64::from(pair[0]), f64::from(pair[1]));
        if x <= b {
            let w = (x - a) / (b - a);
            return [(pair[0], 1.0 - w), (pair[1], w)];
        }
    }
    unreachable!("x was clamped into the axis")
}

/// Trilinear interpolation written as an explicit weighted sum over the 8
/// surrounding corners of the raw samples.
pub fn trilinear_oracle(samples: &[PerfSample], batch: f64, sm: f64, quota: f64) -> f64 {
    let cells: HashMap<(u32, u32, u32), f64> =
        samples.iter().map(|s| ((s.batch, s.sm_percent, s.quota_percent), s.latency_ms)).collect();
    let bs = corners(&sorted_axis(samples.iter().map(|s| s.batch)), batch);
    let ss = corners(&sorted_axis(samples.iter().map(|s| s.sm_percent)), sm);
    let qs = corners(&sorted_axis(samples.iter().map(|s| s.quota_percent)), quota);
    let mut total = 0.0;
    for &(b, wb) in &bs {
        for &(s, ws) in &ss {
            for &(q, wq) in &qs {
                let w = wb * ws * wq;
                if w != 0.0 {
                    total += w * cells[&(b, s, q)];
                }
            }
        }
    }
    total
}

/// Most efficient configuration by brute force over the whole lattice.
pub fn exhaustive_efficient(model: &dyn PerfModel, target: f64, step: u32, batches: Option<&[u32]>) -> PodConfig {
    let axis = model.batch_axis();
    let mut allowed: Vec<u32> = match batches {
        Some(list) => list.iter().copied().filter(|b| *b >= axis[0] && *b <= *axis.last().unwrap()).collect(),
        None => axis.to_vec(),
    };
    if allowed.is_empty() {
        allowed = axis.to_vec();
    }
    let mut lattice = Vec::new();
    for &batch in &allowed {
        for &sm in model.sm_axis() {
            let mut quota = step;
            while quota <= 100 {
                let rps = model.throughput(f64::from(batch), f64::from(sm), f64::from(quota)).unwrap();
                lattice.push((PodConfig { batch, sm, quota }, rps));
                quota += step;
            }
        }
    }
    let cost_key = |c: &PodConfig| (c.sm * c.quota, c.sm, c.quota, c.batch);
    let mut feasible: Vec<&(PodConfig, f64)> = lattice.iter().filter(|(_, rps)| *rps >= target).collect();
    feasible.sort_by_key(|(c, _)| cost_key(c));
    if let Some((c, _)) = feasible.first() {
        return *c;
    }
    let mut all: Vec<&(PodConfig, f64)> = lattice.iter().collect();
    all.sort_by(|a, b| b.1.total_cmp(&a.1).then(cost_key(&a.0).cmp(&cost_key(&b.0))));
    all[0].0
}

/// Whether `(sm, quota)` could join an existing partition of `gpu`, computed
/// from the resident pods rather than the partition bookkeeping.
pub fn join_is_legal(cluster: &ClusterState, gpu: GpuId, sm: u32, quota: u32) -> bool {
    cluster.gpus[&gpu].partitions.iter().any(|p| {
        let used: u32 = cluster.pods.values().filter(|pod| pod.gpu_id == gpu && pod.partition == p.id).map(|pod| pod.quota).sum();
        p.sm == sm && used + quota <= 100
    })
}

/// Whether a new partition of `sm` would fit into the unallocated SMs.
pub fn new_partition_is_legal(cluster: &ClusterState, gpu: GpuId, sm: u32) -> bool {
    let allocated: u32 = cluster.gpus[&gpu].partitions.iter().map(|p| p.sm).sum();
    allocated + sm <= 100
}

/// Check the allocator invariants from first principles.
pub fn audit_cluster(cluster: &ClusterState) -> Result<(), String> {
    for gpu in cluster.gpus.values() {
        let sm_total: u32 = gpu.partitions.iter().map(|p| p.sm).sum();
        if sm_total > 100 {
            return Err(format!("{} holds {sm_total}% sm", gpu.id));
        }
        for p in &gpu.partitions {
            let q: u32 = cluster.pods.values().filter(|pod| pod.gpu_id == gpu.id && pod.partition == p.id).map(|pod| pod.quota).sum();
            if q > 100 {
                return Err(format!("{} partition {:?} holds {q}% quota", gpu.id, p.id));
            }
        }
    }
    for pod in cluster.pods.values() {
        let part = cluster.gpus[&pod.gpu_id]
            .partition(pod.partition)
            .ok_or_else(|| format!("{} has no partition", pod.id))?;
        if part.sm != pod.sm {
            return Err(format!("{} sm {} on partition of sm {}", pod.id, pod.sm, part.sm));
        }
    }
    cluster.check_invariants()
}

#[derive(Debug, Default)]
pub struct FuzzStats {
    pub placed: u64,
    pub rejected: u64,
    pub released: u64,
    pub requota: u64,
    pub requota_rejected: u64,
}

const SM_CHOICES: [u32; 9] = [10, 20, 25, 30, 40, 50, 60, 75, 100];

/// Random place/release/quota-change operations, audited after every step.
/// Every rejection is confirmed illegal independently.
pub fn allocator_fuzz(seed: u64, ops: u64, gpus: u32) -> Result<FuzzStats, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cluster = ClusterState::with_gpus(gpus, 80, 100.0, 2.48);
    let mut stats = FuzzStats::default();
    for step in 0..ops {
        let pods: Vec<PodId> = cluster.pods.keys().copied().collect();
        let roll = rng.random_range(0..10);
        if roll < 5 || pods.is_empty() {
            let gpu = GpuId(rng.random_range(0..gpus));
            let sm = if rng.random_bool(0.8) { SM_CHOICES[rng.random_range(0..SM_CHOICES.len())] } else { rng.random_range(1..=100) };
            let quota = rng.random_range(1..=100);
            let join = join_is_legal(&cluster, gpu, sm, quota);
            let fresh = new_partition_is_legal(&cluster, gpu, sm);
            let new = NewPod { function_id: "f".into(), batch: 1, sm, quota, state: PodState::Running, capability_rps: 1.0 };
            match cluster.place_pod(gpu, new) {
                Ok((id, placement)) => {
                    if !(join || fresh) {
                        return Err(format!("op {step}: accepted illegal placement sm={sm} q={quota} on {gpu}"));
                    }
                    if !placement.joins_existing && join {
                        return Err(format!("op {step}: {id} opened a partition although an aligned one had room"));
                    }
                    stats.placed += 1;
                }
                Err(AllocError::PlacementRejected { .. }) => {
                    if join || fresh {
                        return Err(format!("op {step}: rejected legal placement sm={sm} q={quota} on {gpu}"));
                    }
                    stats.rejected += 1;
                }
                Err(e) => return Err(format!("op {step}: unexpected error {e}")),
            }
        } else if roll < 8 {
            let id = pods[rng.random_range(0..pods.len())];
            let pod = cluster.pods[&id].clone();
            let quota = rng.random_range(1..=100);
            let others: u32 = cluster
                .pods
                .values()
                .filter(|p| p.id != id && p.gpu_id == pod.gpu_id && p.partition == pod.partition)
                .map(|p| p.quota)
                .sum();
            let legal = others + quota <= 100;
            match cluster.set_quota(id, quota) {
                Ok(()) if legal => stats.requota += 1,
                Ok(()) => return Err(format!("op {step}: accepted quota {quota} for {id} beside {others}")),
                Err(AllocError::QuotaUnavailable { .. }) if !legal => stats.requota_rejected += 1,
                Err(e) => return Err(format!("op {step}: quota {quota} for {id} beside {others}: {e}")),
            }
        } else {
            let id = pods[rng.random_range(0..pods.len())];
            let gpu = cluster.pods[&id].gpu_id;
            cluster.release_pod(id).map_err(|e| format!("op {step}: {e}"))?;
            if cluster.pods_on(gpu).next().is_none() && !cluster.gpus[&gpu].is_idle() {
                return Err(format!("op {step}: {gpu} has no pods but keeps partitions"));
            }
            stats.released += 1;
        }
        audit_cluster(&cluster).map_err(|e| format!("op {step}: {e}"))?;
    }
    Ok(stats)
}

/// Perf table for the hand-traced scaling scenarios. At sm 50 and batch 8
/// the capability over quota 20..100 is 50, 90, 130, 160, 180 rps; other SM
/// shares scale it by 0.6 (sm 25), 1.1 (sm 60) and 1.5 (sm 100); batch 1
/// halves it.
pub fn scenario_table() -> PerfTable {
    let base = |q: u32| match q {
        20 => 50.0,
        40 => 90.0,
        60 => 130.0,
        80 => 160.0,
        100 => 180.0,
        _ => unreachable!(),
    };
    let sm_factor = |s: u32| match s {
        25 => 0.6,
        50 => 1.0,
        60 => 1.1,
        100 => 1.5,
        _ => unreachable!(),
    };
    PerfTable::from_fn("f".into(), &[1, 8], &[25, 50, 60, 100], &[20, 40, 60, 80, 100], |b, s, q| {
        let cap = base(q) * sm_factor(s) * if b == 1 { 0.5 } else { 1.0 };
        f64::from(b) * 1000.0 / cap
    })
    .unwrap()
}

pub fn scenario_spec(id: &str) -> FunctionSpec {
    FunctionSpec {
        function_id: id.into(),
        baseline_latency_ms: 10.0,
        slo_multiplier: 1.0,
        perf_table: "scenario".into(),
        min_rps: 1.0,
        allowed_batches: vec![8],
    }
}

/// Place a Running pod of `f` with its table capability.
pub fn put(cluster: &mut ClusterState, model: &PerfTable, f: &str, gpu: u32, batch: u32, sm: u32, quota: u32) -> PodId {
    let cap = model.throughput(f64::from(batch), f64::from(sm), f64::from(quota)).unwrap();
    cluster
        .place_pod(GpuId(gpu), NewPod { function_id: f.into(), batch, sm, quota, state: PodState::Running, capability_rps: cap })
        .unwrap()
        .0
}

/// An action reduced to what the conformance scenarios pin down.
#[derive(Debug, Clone, PartialEq)]
pub struct Expected {
    pub kind: ScalingKind,
    /// Existing pod for vertical and down actions; `None` for new pods.
    pub pod: Option<PodId>,
    pub gpu: GpuId,
    pub batch: u32,
    pub sm: u32,
    pub quota: u32,
}

pub fn summarize(actions: &[ScalingAction]) -> Vec<Expected> {
    actions
        .iter()
        .map(|a| Expected {
            kind: a.kind,
            pod: (a.kind != ScalingKind::HorizontalUp).then_some(a.target.id),
            gpu: a.target.gpu_id,
            batch: a.target.batch,
            sm: a.target.sm,
            quota: a.target.quota,
        })
        .collect()
}

pub struct Conformance {
    pub name: &'static str,
    pub got: Vec<Expected>,
    pub expected: Vec<Expected>,
}

fn exp(kind: ScalingKind, pod: Option<PodId>, gpu: u32, batch: u32, sm: u32, quota: u32) -> Expected {
    Expected { kind, pod, gpu: GpuId(gpu), batch, sm, quota }
}

fn scaler(alpha: f64, beta: f64, delta_iq: u32, cooldown_ms: f64) -> Autoscaler {
    Autoscaler::new(ScalerConfig { alpha, beta, delta_iq, cooldown_ms, r_min: 1.0 }).unwrap()
}

fn apply(cluster: &mut ClusterState, actions: &[ScalingAction]) {
    for a in actions {
        cluster.apply_action(a).unwrap();
        if a.kind == ScalingKind::HorizontalDown {
            cluster.release_pod(a.target.id).unwrap();
        }
    }
}

/// Hand-traced autoscaler scenarios with their exact expected action lists.
pub fn conformance_suite() -> Vec<Conformance> {
    use ScalingKind::*;
    let table = scenario_table();
    let spec = scenario_spec("f");
    let mut out = Vec::new();

    let base = || {
        let mut c = ClusterState::with_gpus(4, 80, 100.0, 2.48);
        c.register_function(scenario_spec("f"));
        c.register_function(scenario_spec("g"));
        c
    };

    // Capability 90 at q=40; 80 <= 0.9 * 90.
    {
        let mut c = base();
        put(&mut c, &table, "f", 0, 8, 50, 40);
        let got = scaler(0.9, 0.5, 20, 30_000.0).scale(&spec, &c, &table, 80.0, 0.0).unwrap();
        out.push(Conformance { name: "below alpha threshold", got: summarize(&got), expected: vec![] });
    }

    // Gap 120 - 81 = 39; q 40 -> 60 gains 40.
    {
        let mut c = base();
        let p = put(&mut c, &table, "f", 0, 8, 50, 40);
        let got = scaler(0.9, 0.5, 20, 30_000.0).scale(&spec, &c, &table, 120.0, 0.0).unwrap();
        out.push(Conformance {
            name: "vertical covering step",
            got: summarize(&got),
            expected: vec![exp(VerticalUp, Some(p), 0, 8, 50, 60)],
        });
    }

    // Pod saturated at q=100 (180 rps). Gap 300 - 162 = 138. gpu-1 holds a
    // sm 40 / q 50 pod of `g` (HGO 0.2) and offers a fresh sm 60 partition,
    // whose capability 99 at q=40 and 143 at q=60 covers the gap at q=60.
    {
        let mut c = base();
        put(&mut c, &table, "f", 0, 8, 50, 100);
        c.place_pod(GpuId(1), NewPod { function_id: "g".into(), batch: 8, sm: 40, quota: 50, state: PodState::Running, capability_rps: 50.0 })
            .unwrap();
        let got = scaler(0.9, 0.5, 20, 30_000.0).scale(&spec, &c, &table, 300.0, 0.0).unwrap();
        out.push(Conformance {
            name: "horizontal to lowest-occupancy gpu",
            got: summarize(&got),
            expected: vec![exp(HorizontalUp, None, 1, 8, 60, 60)],
        });
    }

    // R = 0 fails the R > R_min guard.
    {
        let mut c = base();
        put(&mut c, &table, "f", 0, 8, 50, 100);
        let got = scaler(0.9, 0.5, 20, 30_000.0).scale(&spec, &c, &table, 0.0, 60_000.0).unwrap();
        out.push(Conformance { name: "no scale-down at or below r_min", got: summarize(&got), expected: vec![] });
    }

    // Pods sm 25 (108 rps) and sm 50 (180 rps) at q=100; R = 100, surplus
    // 188. The sm 25 pod steps down to q=20 (loss 78) and the next step hits
    // zero with capability 108 <= 188, so it is removed; surplus 80. The
    // sm 50 pod loses 20, 50, 90: stops at q=60 (loss 50).
    {
        let mut c = base();
        let small = put(&mut c, &table, "f", 0, 8, 25, 100);
        let large = put(&mut c, &table, "f", 0, 8, 50, 100);
        let got = scaler(0.9, 0.5, 20, 30_000.0).scale(&spec, &c, &table, 100.0, 0.0).unwrap();
        out.push(Conformance {
            name: "scale-down smallest sm first",
            got: summarize(&got),
            expected: vec![exp(HorizontalDown, Some(small), 0, 8, 25, 100), exp(VerticalDown, Some(large), 0, 8, 50, 60)],
        });
    }

    // Single pod at q=100 (180 rps), R = 30, surplus 150: losses 20, 50, 90,
    // 130 reach q=20; removal is refused for the last pod. Inside the
    // cooldown nothing happens; after it the q=20 pod cannot shrink further.
    {
        let mut c = base();
        let p = put(&mut c, &table, "f", 0, 8, 50, 100);
        let mut s = scaler(0.9, 0.5, 20, 30_000.0);
        let first = s.scale(&spec, &c, &table, 30.0, 1_000.0).unwrap();
        let mut got = summarize(&first);
        apply(&mut c, &first);
        got.extend(summarize(&s.scale(&spec, &c, &table, 5.0, 30_999.0).unwrap()));
        got.extend(summarize(&s.scale(&spec, &c, &table, 5.0, 31_000.0).unwrap()));
        out.push(Conformance {
            name: "cooldown and last-pod retention",
            got,
            expected: vec![exp(VerticalDown, Some(p), 0, 8, 50, 20)],
        });
    }

    // Pods sm 100 / q 40 (1.5 * 90 = 135) and sm 50 / q 40 (90) on separate
    // GPUs; R = 400, gap 400 - 202.5 = 197.5. sm 100 first: q 60..100 gains
    // 60, 105, 135 -> q=100 (+135, gap 62.5). sm 50: gains 40, 70 -> q=80.
    {
        let mut c = base();
        let small = put(&mut c, &table, "f", 0, 8, 50, 40);
        let large = put(&mut c, &table, "f", 1, 8, 100, 40);
        let got = scaler(0.9, 0.5, 20, 30_000.0).scale(&spec, &c, &table, 400.0, 0.0).unwrap();
        out.push(Conformance {
            name: "vertical order by sm descending",
            got: summarize(&got),
            expected: vec![exp(VerticalUp, Some(large), 1, 8, 100, 100), exp(VerticalUp, Some(small), 0, 8, 50, 80)],
        });
    }
    out
}

/// Kalman examples: `(name, state, observation, expected gain, estimate, covariance)`.
pub fn kalman_examples() -> Vec<(&'static str, KalmanState, f64, f64, f64, f64)> {
    let st = |q: f64, d: f64, p: f64, r: f64| KalmanState { r, p, a: 1.0, q, h: 1.0, d };
    vec![
        ("zero covariance", st(0.0, 1.0, 0.0, 50.0), 80.0, 0.0, 50.0, 0.0),
        ("zero measurement noise", st(1.0, 0.0, 0.0, 50.0), 80.0, 1.0, 80.0, 0.0),
        ("general step", st(0.5, 2.0, 1.0, 100.0), 110.0, 3.0 / 7.0, 730.0 / 7.0, 6.0 / 7.0),
    ]
}

pub fn rel_err(got: f64, want: f64) -> f64 {
    if want == 0.0 {
        got.abs()
    } else {
        ((got - want) / want).abs()
    }
}

/// Run the Kalman examples; `Err` names the first mismatch.
pub fn check_kalman_examples(tol: f64) -> Result<(), String> {
    for (name, state, obs, k, r, p) in kalman_examples() {
        let (next, gain) = predict_and_update_with_gain(&state, obs).map_err(|e| format!("{name}: {e}"))?;
        for (what, got, want) in [("gain", gain, k), ("estimate", next.r, r), ("covariance", next.p, p)] {
            if rel_err(got, want) > tol {
                return Err(format!("{name}: {what} {got} != {want}"));
            }
        }
    }
    Ok(())
}

/// Random Kalman sequence; checks gain in [0, 1], covariance >= 0 and the
/// convex-combination bound at every step.
pub fn kalman_sequence(rng: &mut ChaCha8Rng, steps: usize) -> Result<(), String> {
    let mut state = KalmanState {
        r: rng.random_range(0.0..1000.0),
        p: rng.random_range(0.0..100.0),
        a: 1.0,
        q: rng.random_range(0.0..50.0),
        h: 1.0,
        d: if rng.random_bool(0.1) { 0.0 } else { rng.random_range(0.0..200.0) },
    };
    for i in 0..steps {
        let obs = rng.random_range(0.0..2000.0);
        if state.p + state.q + state.d == 0.0 {
            state.q = 1.0;
        }
        let prior = state.r;
        let (next, gain) = predict_and_update_with_gain(&state, obs).map_err(|e| format!("step {i}: {e}"))?;
        if !(0.0..=1.0).contains(&gain) {
            return Err(format!("step {i}: gain {gain}"));
        }
        if !(next.p >= 0.0) {
            return Err(format!("step {i}: covariance {}", next.p));
        }
        let (lo, hi) = (prior.min(obs), prior.max(obs));
        let slack = 1e-9 * hi.abs().max(1.0);
        if next.r < lo - slack || next.r > hi + slack {
            return Err(format!("step {i}: estimate {} outside [{lo}, {hi}]", next.r));
        }
        state = next;
    }
    Ok(())
}

/// Cost examples: `(name, intervals, expected dollars)` at $2.48 per hour.
pub fn cost_examples() -> Vec<(&'static str, Vec<PodInterval>, f64)> {
    let hour = 3_600_000.0;
    let iv = |sm, quota, start_ms, end_ms| PodInterval { pod_id: PodId(0), function_id: "f".into(), start_ms, end_ms, sm, quota };
    vec![
        ("half sm, half quota, one hour", vec![iv(50, 50, 0.0, hour)], 0.62),
        ("exclusive, half an hour", vec![iv(100, 100, 0.0, hour / 2.0)], 1.24),
        (
            "rescaled 40 -> 80 at half-life",
            vec![iv(50, 40, 0.0, hour / 2.0), iv(50, 80, hour / 2.0, hour)],
            2.48 * 0.5 * (0.4 * 0.5 + 0.8 * 0.5),
        ),
    ]
}

pub fn check_cost_examples(tol: f64) -> Result<(), String> {
    for (name, intervals, want) in cost_examples() {
        let got = compute_cost(&intervals, 2.48).values().sum::<f64>();
        if (got - want).abs() > tol {
            return Err(format!("{name}: {got} != {want}"));
        }
    }
    Ok(())
}
