mod common;

use has_sched::allocator::NewPod;
use has_sched::autoscaler::{Autoscaler, ScalerConfig};
use has_sched::model::{function_capability, hgo, ClusterState, GpuId, PodState, ScalingKind};
use has_sched::perf::{most_efficient_config, PerfModel, PerfTable};
use has_sched::sim::vgpu::{execute_window, token_budget_ms, PodDemand};
use has_sched::trace::{load_trace, save_trace, synth_trace, Arrival, SynthKind, WorkloadTrace};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::*;

/// Strictly increasing axis of `n` values within `lo..=hi`.
fn axis(n: usize, lo: u32, hi: u32) -> impl Strategy<Value = Vec<u32>> {
    proptest::sample::subsequence((lo..=hi).collect::<Vec<_>>(), n)
}

/// Random monotone table: latency grows with batch and falls with sm and
/// quota, built from positive increments so flat steps occur too.
fn monotone_table() -> impl Strategy<Value = PerfTable> {
    (axis(3, 1, 16), axis(4, 5, 100), axis(4, 5, 100), 0.5f64..20.0, 0.0f64..5.0, 0.0f64..3.0, 0.0f64..3.0).prop_map(
        |(bs, ss, qs, base, wb, ws, wq)| {
            PerfTable::from_fn("p".into(), &bs, &ss, &qs, |b, s, q| {
                base + wb * f64::from(b) + ws * (100.0 - f64::from(s)) + wq * (100.0 - f64::from(q)) + f64::from(b) * 100.0 / f64::from(s)
            })
            .unwrap()
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn interpolation_matches_oracle(table in monotone_table(), fb in 0.0f64..=1.0, fs in -0.2f64..1.2, fq in -0.2f64..1.2) {
        let samples = table.samples();
        let span = |a: &[u32], f: f64| f64::from(a[0]) + f * f64::from(a[a.len() - 1] - a[0]);
        let b = span(table.batch_axis(), fb);
        let s = span(table.sm_axis(), fs).clamp(1.0, 100.0);
        let q = span(table.quota_axis(), fq).clamp(1.0, 100.0);
        let got = table.predict_latency(b, s, q).unwrap();
        let want = trilinear_oracle(&samples, b, s, q);
        prop_assert!((got - want).abs() <= 1e-9 * want.max(1.0), "{got} vs {want}");
    }

    #[test]
    fn interpolation_is_monotone(table in monotone_table(), f in prop::array::uniform3(0.0f64..=1.0), d in prop::array::uniform3(0.0f64..=0.5)) {
        let span = |a: &[u32], f: f64| f64::from(a[0]) + f.min(1.0) * f64::from(a[a.len() - 1] - a[0]);
        let (bs, ss, qs) = (table.batch_axis().to_vec(), table.sm_axis().to_vec(), table.quota_axis().to_vec());
        let at = |b, s, q| table.predict_latency(span(&bs, b), span(&ss, s), span(&qs, q)).unwrap();
        let here = at(f[0], f[1], f[2]);
        prop_assert!(at(f[0] + d[0], f[1], f[2]) >= here - 1e-9);
        prop_assert!(at(f[0], f[1] + d[1], f[2]) <= here + 1e-9);
        prop_assert!(at(f[0], f[1], f[2] + d[2]) <= here + 1e-9);
        let tput = |q| table.throughput(span(&bs, f[0]), span(&ss, f[1]), span(&qs, q)).unwrap();
        prop_assert!(tput(f[2] + d[2]) >= tput(f[2]) - 1e-9);
    }

    #[test]
    fn efficient_config_matches_scan(table in monotone_table(), frac in 0.0001f64..1.5, step in prop::sample::select(vec![5u32, 10, 20, 25, 33])) {
        let peak = table.throughput(f64::from(*table.batch_axis().last().unwrap()), 100.0, 100.0).unwrap();
        let target = frac * peak;
        let got = most_efficient_config(&table, target, step, None).unwrap();
        prop_assert_eq!(got, exhaustive_efficient(&table, target, step, None));
        let rps = table.throughput(f64::from(got.batch), f64::from(got.sm), f64::from(got.quota)).unwrap();
        if frac <= 1.0 {
            prop_assert!(rps >= target);
        }
    }

    #[test]
    fn kalman_gain_and_covariance_stay_bounded(seed in any::<u64>(), steps in 1usize..60) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        prop_assert_eq!(kalman_sequence(&mut rng, steps), Ok(()));
    }

    #[test]
    fn allocator_sequences_keep_invariants(seed in any::<u64>(), gpus in 1u32..5) {
        let stats = allocator_fuzz(seed, 500, gpus);
        prop_assert!(stats.is_ok(), "{:?}", stats.err());
    }

    #[test]
    fn trace_save_load_round_trips(times in prop::collection::vec(0.0f64..1e7, 0..200), fns in prop::collection::vec(0usize..3, 200)) {
        let names = ["f1", "f2", "resnet-50"];
        let entries = times.iter().zip(&fns).map(|(&t, &f)| Arrival { arrival_ms: t, function_id: names[f].into() }).collect();
        let trace = WorkloadTrace::new(entries, 0.0).unwrap();
        let file = tempfile::NamedTempFile::new().unwrap();
        save_trace(file.path(), &trace).unwrap();
        prop_assert_eq!(load_trace(file.path()).unwrap(), trace);
    }

    #[test]
    fn synthetic_traces_are_valid(seed in any::<u64>(), low in 0.0f64..50.0, high in 0.0f64..200.0, p in 0.0f64..=1.0) {
        for kind in [
            SynthKind::Poisson { rate: low },
            SynthKind::Step { low, high, period_ms: 7_000.0 },
            SynthKind::Burst { base: low, spike: high, spike_prob: p, slot_ms: 3_000.0 },
        ] {
            let t = synth_trace(&kind, &"f".into(), 20_000.0, seed).unwrap();
            prop_assert!(t.entries().windows(2).all(|w| w[0].arrival_ms <= w[1].arrival_ms));
            prop_assert!(t.entries().iter().all(|a| a.arrival_ms >= 0.0 && a.arrival_ms < 20_000.0));
            prop_assert_eq!(t.horizon_ms(), 20_000.0);
        }
    }

    #[test]
    fn token_grants_fit_the_window(quotas in prop::collection::vec(1u32..=60, 1..5), needs in prop::collection::vec(prop::collection::vec(0.5f64..80.0, 0..6), 5)) {
        let mut cluster = ClusterState::with_gpus(1, 80, 100.0, 2.48);
        let mut demands = Vec::new();
        for (i, &q) in quotas.iter().enumerate() {
            let sm = if i % 2 == 0 { 50 } else { 40 };
            let new = NewPod { function_id: "f".into(), batch: 1, sm, quota: q, state: PodState::Running, capability_rps: 1.0 };
            if let Ok((id, placement)) = cluster.place_pod(GpuId(0), new) {
                demands.push(PodDemand { pod_id: id, partition: placement.partition, quota: q, batches: needs[i].clone() });
            }
        }
        let gpu = cluster.gpus[&GpuId(0)].clone();
        let services = execute_window(&gpu, &demands, 1_000.0, 100.0);
        for part in &gpu.partitions {
            let granted: f64 = services.iter().filter(|s| part.resident_pods.contains(&s.pod_id)).map(|s| s.served_ms).sum();
            prop_assert!(granted <= 100.0 + 1e-6, "partition granted {granted}");
        }
        for (s, d) in services.iter().zip(&demands) {
            prop_assert!(s.served_ms <= token_budget_ms(d.quota, 100.0) + 1e-6);
            let total: f64 = d.batches.iter().sum();
            let left: f64 = s.remaining.iter().sum();
            prop_assert!((s.served_ms + left - total).abs() < 1e-6);
            prop_assert!(s.completions.iter().all(|&t| (1_000.0..=1_100.0 + 1e-6).contains(&t)));
        }
    }

    #[test]
    fn hgo_never_decreases_when_adding_pods(shares in prop::collection::vec((prop::sample::select(vec![10u32, 20, 25, 50]), 1u32..=100), 1..12)) {
        let mut cluster = ClusterState::with_gpus(1, 80, 100.0, 2.48);
        let mut last = 0.0;
        for (sm, q) in shares {
            let new = NewPod { function_id: "f".into(), batch: 1, sm, quota: q, state: PodState::Running, capability_rps: 1.0 };
            if cluster.place_pod(GpuId(0), new).is_ok() {
                let h = hgo(&cluster.gpus[&GpuId(0)], cluster.pods.values());
                prop_assert!(h >= last);
                last = h;
            }
        }
    }
}

/// Random cluster holding pods of `f` and of a bystander `g`.
fn random_cluster(table: &PerfTable, layout: &[(u32, u32, u32, bool)]) -> ClusterState {
    let mut c = ClusterState::with_gpus(4, 80, 100.0, 2.48);
    c.register_function(scenario_spec("f"));
    c.register_function(scenario_spec("g"));
    for &(gpu, sm, quota, own) in layout {
        let f = if own { "f" } else { "g" };
        let cap = table.throughput(8.0, f64::from(sm), f64::from(quota)).unwrap();
        let _ = c.place_pod(GpuId(gpu), NewPod { function_id: f.into(), batch: 8, sm, quota, state: PodState::Running, capability_rps: cap });
    }
    if c.pods_of(&"f".into()).next().is_none() {
        let cap = table.throughput(8.0, 25.0, 20.0).unwrap();
        let gpu = c.gpus.keys().copied().find(|&g| c.check_placement(g, 25, 20).is_ok()).unwrap();
        c.place_pod(gpu, NewPod { function_id: "f".into(), batch: 8, sm: 25, quota: 20, state: PodState::Running, capability_rps: cap }).unwrap();
    }
    c
}

fn layout() -> impl Strategy<Value = Vec<(u32, u32, u32, bool)>> {
    prop::collection::vec((0u32..4, prop::sample::select(vec![25u32, 50, 60, 100]), prop::sample::select(vec![20u32, 40, 60, 80, 100]), any::<bool>()), 0..8)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(400))]

    #[test]
    fn autoscaler_fuzz(layout in layout(), r in 0.0f64..1500.0, alpha in 0.6f64..=1.0, beta_frac in 0.1f64..0.95, step in prop::sample::select(vec![10u32, 20]), since in 0.0f64..60_000.0) {
        let table = scenario_table();
        let cluster = random_cluster(&table, &layout);
        let spec = scenario_spec("f");
        let config = ScalerConfig { alpha, beta: alpha * beta_frac, delta_iq: step, cooldown_ms: 30_000.0, r_min: 1.0 };
        let mut scaler = Autoscaler::new(config).unwrap();
        let before_pods = cluster.pods_of(&"f".into()).count();
        let capability = function_capability(&cluster, &"f".into()).unwrap();

        // Seed the cooldown clock with a scale-down at t=0 when possible.
        let _ = scaler.scale(&spec, &cluster, &table, 0.5 * capability * config.beta, 0.0);
        let mut again = scaler.clone();
        let actions = scaler.scale(&spec, &cluster, &table, r, since).unwrap();
        prop_assert_eq!(&actions, &again.scale(&spec, &cluster, &table, r, since).unwrap());

        let mut work = cluster.clone();
        for a in &actions {
            work.apply_action(a).unwrap();
            audit_cluster(&work).unwrap();
        }

        let kinds: Vec<ScalingKind> = actions.iter().map(|a| a.kind).collect();
        let first_h = kinds.iter().position(|k| *k == ScalingKind::HorizontalUp).unwrap_or(kinds.len());
        prop_assert!(kinds[first_h..].iter().all(|k| *k == ScalingKind::HorizontalUp));
        let ups: Vec<u32> = actions.iter().filter(|a| a.kind == ScalingKind::VerticalUp).map(|a| a.target.sm).collect();
        prop_assert!(ups.windows(2).all(|w| w[0] >= w[1]));
        let downs: Vec<u32> = actions
            .iter()
            .filter(|a| matches!(a.kind, ScalingKind::VerticalDown | ScalingKind::HorizontalDown))
            .map(|a| a.target.sm)
            .collect();
        prop_assert!(downs.windows(2).all(|w| w[0] <= w[1]));

        if !downs.is_empty() {
            prop_assert!(r > config.r_min && r < capability * config.beta);
            prop_assert!(since >= 30_000.0 || again.last_scale_down(&"f".into()).is_none_or(|t| since - t >= 30_000.0));
            let removed = actions.iter().filter(|a| a.kind == ScalingKind::HorizontalDown).count();
            prop_assert!(removed < before_pods);
            let after = function_capability(&work, &"f".into()).unwrap();
            prop_assert!(after >= r - 1e-9, "scale-down left {after} < {r}");
        }

        if r > capability * config.alpha {
            let pending: f64 = work.pods_of(&"f".into()).filter(|p| !p.is_running()).map(|p| p.capability_rps).sum();
            let running = function_capability(&work, &"f".into()).unwrap();
            let grown = running + pending;
            let covered = grown >= capability + (r - capability * config.alpha) - 1e-6;
            let saturated = work.pods_of(&"f".into()).filter(|p| p.is_running()).all(|p| work.max_avail_quota_for_pod(p.id).unwrap() == p.quota);
            let fresh_gpu = actions.iter().any(|a| a.kind == ScalingKind::HorizontalUp && cluster.gpus[&a.target.gpu_id].is_idle());
            let no_idle = cluster.gpus.values().all(|g| !g.is_idle());
            prop_assert!(covered || (saturated && (fresh_gpu || no_idle)), "gap left open: {actions:?}");
        }
    }
}
