use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap, VecDeque};
use std::sync::Arc;

use log::{debug, trace};

use super::cost::{compute_cost, CostLedger};
use super::metrics::{percentile, violation_curve, FunctionMetrics, RequestOutcome, RequestRecord, RunMetrics, TimelineRow};
use super::policy::{make_policy, PolicyKind, ScalingPolicy};
use super::vgpu::{next_holder, token_budget_ms, EPS_MS};
use super::{ClusterConfig, FunctionSetup, SimError, SimInputs};
use crate::allocator::NewPod;
use crate::autoscaler::update_load_balancer_weights;
use crate::model::{function_capability, ClusterState, FunctionId, GpuId, PartitionId, PodId, PodState, ScalingKind, FULL};
use crate::perf::{PerfModel, PodConfig};
use crate::predictor::{KalmanPredictor, RatePredictor};

// Same-time events fire in this order.
const CLASS_WAKE: u8 = 0;
const CLASS_ARRIVAL: u8 = 1;
const CLASS_TICK: u8 = 2;
const CLASS_WINDOW: u8 = 3;

type PartitionKey = (GpuId, PartitionId);

#[derive(Debug, Clone, Copy)]
enum EventKind {
    /// The token holder of a partition finishes its batch or its budget.
    Wake { partition: PartitionKey, seq: u64 },
    Arrival(usize),
    Tick(u64),
    Window(u64),
}

#[derive(Debug, Clone, Copy)]
struct Event {
    t_ms: f64,
    class: u8,
    seq: u64,
    kind: EventKind,
}

impl PartialEq for Event {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Event {}

impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Event {
    // Reversed so the max-heap pops the earliest event.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .t_ms
            .total_cmp(&self.t_ms)
            .then(other.class.cmp(&self.class))
            .then(other.seq.cmp(&self.seq))
    }
}

#[derive(Debug)]
struct Batch {
    requests: Vec<usize>,
    remaining_ms: f64,
}

/// Execution state of a pod that exists in the cluster.
#[derive(Debug)]
struct PodRuntime {
    partition: PartitionKey,
    queue: VecDeque<usize>,
    batch: Option<Batch>,
    /// Token time left in the current window.
    budget_ms: f64,
    /// Set while the pod has a batch and waits for the token.
    waiting_since: Option<f64>,
}

impl PodRuntime {
    fn new(partition: PartitionKey) -> Self {
        PodRuntime { partition, queue: VecDeque::new(), batch: None, budget_ms: 0.0, waiting_since: None }
    }

    fn is_idle(&self) -> bool {
        self.batch.is_none() && self.queue.is_empty()
    }
}

#[derive(Debug, Clone, Copy)]
struct Holder {
    pod: PodId,
    since_ms: f64,
    requested_ms: f64,
}

#[derive(Debug, Default)]
struct PartitionRuntime {
    holder: Option<Holder>,
    wake_seq: u64,
}

/// Place each function's initial pods, first fit over the devices, as Running.
pub fn bootstrap_cluster(
    cluster: &ClusterConfig,
    window_ms: f64,
    price_per_gpu_hour: f64,
    functions: &[FunctionSetup],
    policy: PolicyKind,
) -> Result<ClusterState, SimError> {
    let mut state = ClusterState::with_gpus(cluster.gpus, cluster.total_sm_units, window_ms, price_per_gpu_hour);
    for setup in functions {
        setup.spec.validate()?;
        state.register_function(setup.spec.clone());
    }
    for setup in functions {
        let cfg = policy.initial_config(setup.initial);
        let capability = setup.model.throughput(f64::from(cfg.batch), f64::from(cfg.sm), f64::from(cfg.quota))?;
        for _ in 0..setup.initial_pods {
            let gpu = state
                .gpus
                .keys()
                .copied()
                .find(|&g| state.check_placement(g, cfg.sm, cfg.quota).is_ok())
                .ok_or_else(|| {
                    SimError::Config(format!("cluster too small for the initial pods of `{}`", setup.spec.function_id))
                })?;
            state.place_pod(
                gpu,
                NewPod {
                    function_id: setup.spec.function_id.clone(),
                    batch: cfg.batch,
                    sm: cfg.sm,
                    quota: cfg.quota,
                    state: PodState::Running,
                    capability_rps: capability,
                },
            )?;
        }
    }
    Ok(state)
}

struct Engine<'a> {
    inputs: &'a SimInputs,
    horizon_ms: f64,
    models: BTreeMap<FunctionId, Arc<dyn PerfModel>>,
    cluster: ClusterState,
    pods: BTreeMap<PodId, PodRuntime>,
    partitions: BTreeMap<PartitionKey, PartitionRuntime>,
    heap: BinaryHeap<Event>,
    seq: u64,
    requests: Vec<RequestRecord>,
    outstanding: u64,
    next_arrival: usize,
    last_completion_ms: f64,
    ledger: CostLedger,
    policy: Box<dyn ScalingPolicy>,
    predictors: BTreeMap<FunctionId, KalmanPredictor>,
    arrivals_since_tick: BTreeMap<FunctionId, u64>,
    balancer: BTreeMap<FunctionId, BTreeMap<PodId, f64>>,
    timeline: Vec<TimelineRow>,
}

/// Simulate `inputs.trace` under `inputs.policy`.
pub fn run(inputs: &SimInputs) -> Result<RunMetrics, SimError> {
    inputs.sim.validate()?;
    inputs.scaler.validate()?;
    inputs.kalman.validate()?;
    let models: BTreeMap<FunctionId, Arc<dyn PerfModel>> =
        inputs.functions.iter().map(|f| (f.spec.function_id.clone(), Arc::clone(&f.model))).collect();
    if let Some(a) = inputs.trace.entries().iter().find(|a| !models.contains_key(&a.function_id)) {
        return Err(SimError::UnknownFunction(a.function_id.clone()));
    }
    let cluster = bootstrap_cluster(&inputs.cluster, inputs.sim.window_ms, inputs.sim.price_per_gpu_hour, &inputs.functions, inputs.policy)?;
    let pod_configs: BTreeMap<FunctionId, PodConfig> =
        inputs.functions.iter().map(|f| (f.spec.function_id.clone(), f.initial)).collect();
    let policy = make_policy(inputs.policy, inputs.scaler, inputs.sim.cold_start_ms, &pod_configs)?;

    let mut engine = Engine {
        inputs,
        horizon_ms: inputs.sim.horizon_ms.unwrap_or(inputs.trace.horizon_ms()),
        models,
        cluster,
        pods: BTreeMap::new(),
        partitions: BTreeMap::new(),
        heap: BinaryHeap::new(),
        seq: 0,
        requests: Vec::new(),
        outstanding: 0,
        next_arrival: 0,
        last_completion_ms: 0.0,
        ledger: CostLedger::default(),
        policy,
        predictors: BTreeMap::new(),
        arrivals_since_tick: BTreeMap::new(),
        balancer: BTreeMap::new(),
        timeline: Vec::new(),
    };
    for setup in &inputs.functions {
        let fid = setup.spec.function_id.clone();
        engine.predictors.insert(fid.clone(), KalmanPredictor::new(inputs.kalman)?);
        engine.arrivals_since_tick.insert(fid, 0);
    }
    let initial: Vec<PodId> = engine.cluster.pods.keys().copied().collect();
    for id in initial {
        engine.track_pod(id, 0.0);
    }
    engine.execute()
}

impl<'a> Engine<'a> {
    fn push(&mut self, t_ms: f64, class: u8, kind: EventKind) {
        self.seq += 1;
        self.heap.push(Event { t_ms, class, seq: self.seq, kind });
    }

    fn push_next_arrival(&mut self) {
        let entries = self.inputs.trace.entries();
        if let Some(a) = entries.get(self.next_arrival) {
            if a.arrival_ms <= self.horizon_ms {
                self.push(a.arrival_ms, CLASS_ARRIVAL, EventKind::Arrival(self.next_arrival));
                return;
            }
        }
        self.next_arrival = entries.len();
    }

    fn arrivals_done(&self) -> bool {
        self.next_arrival >= self.inputs.trace.len()
    }

    /// Start cost accounting and execution state for a pod just placed.
    fn track_pod(&mut self, id: PodId, now: f64) {
        let pod = &self.cluster.pods[&id];
        self.ledger.open(id, pod.function_id.clone(), now, pod.sm, pod.quota);
        self.pods.insert(id, PodRuntime::new((pod.gpu_id, pod.partition)));
    }

    fn execute(mut self) -> Result<RunMetrics, SimError> {
        let sim = self.inputs.sim;
        let cutoff_ms = self.horizon_ms + sim.drain_ms;
        self.push(0.0, CLASS_WINDOW, EventKind::Window(0));
        self.push(sim.scaler_interval_ms, CLASS_TICK, EventKind::Tick(1));
        self.push_next_arrival();

        let mut end_ms = cutoff_ms;
        while let Some(ev) = self.heap.pop() {
            if ev.t_ms > cutoff_ms {
                break;
            }
            let now = ev.t_ms;
            self.cluster.clock_ms = now;
            match ev.kind {
                EventKind::Wake { partition, seq } => self.on_wake(partition, seq, now)?,
                EventKind::Arrival(index) => {
                    self.next_arrival = index + 1;
                    self.on_arrival(index, now)?;
                    self.push_next_arrival();
                }
                EventKind::Tick(k) => {
                    self.on_tick(now)?;
                    self.push((k + 1) as f64 * sim.scaler_interval_ms, CLASS_TICK, EventKind::Tick(k + 1));
                }
                EventKind::Window(k) => {
                    self.on_window(now)?;
                    self.push((k + 1) as f64 * sim.window_ms, CLASS_WINDOW, EventKind::Window(k + 1));
                }
            }
            if now >= self.horizon_ms && self.outstanding == 0 && self.arrivals_done() {
                end_ms = self.horizon_ms.max(self.last_completion_ms);
                break;
            }
        }
        self.finish(end_ms)
    }

    fn on_arrival(&mut self, index: usize, now: f64) -> Result<(), SimError> {
        let fid = self.inputs.trace.entries()[index].function_id.clone();
        let request = self.requests.len();
        self.requests.push(RequestRecord {
            request_id: request as u64,
            function_id: fid.clone(),
            arrival_ms: now,
            pod_id: None,
            start_ms: None,
            completion_ms: None,
            outcome: RequestOutcome::InFlight,
        });
        *self.arrivals_since_tick.get_mut(&fid).expect("known function") += 1;
        let capacity = self.inputs.sim.queue_capacity;
        match self.route(&fid) {
            Some(pod) if self.pods[&pod].queue.len() < capacity => {
                self.outstanding += 1;
                self.requests[request].pod_id = Some(pod);
                let rt = self.pods.get_mut(&pod).expect("routed to live pod");
                rt.queue.push_back(request);
                let partition = rt.partition;
                if self.start_batch(pod, now)? {
                    self.dispatch(partition, now);
                }
            }
            _ => {
                trace!("t={now}: rejected request {request} of {fid}");
                self.requests[request].outcome = RequestOutcome::Rejected;
            }
        }
        Ok(())
    }

    /// Smooth weighted round robin over the function's running pods.
    fn route(&mut self, fid: &FunctionId) -> Option<PodId> {
        let weights = update_load_balancer_weights(fid, &self.cluster).ok()?;
        let current = self.balancer.entry(fid.clone()).or_default();
        current.retain(|id, _| weights.contains_key(id));
        let mut best: Option<(PodId, f64)> = None;
        for (&id, &w) in &weights {
            let cw = current.entry(id).or_insert(0.0);
            *cw += w;
            if best.is_none_or(|(_, b)| *cw > b) {
                best = Some((id, *cw));
            }
        }
        let (pick, _) = best?;
        *current.get_mut(&pick).expect("inserted above") -= 1.0;
        Some(pick)
    }

    /// Form a new batch from the pod's queue if it is not busy. Returns true
    /// when the pod now waits for the token.
    fn start_batch(&mut self, pod_id: PodId, now: f64) -> Result<bool, SimError> {
        let pod = &self.cluster.pods[&pod_id];
        let rt = self.pods.get_mut(&pod_id).expect("runtime for live pod");
        if rt.batch.is_some() || rt.queue.is_empty() {
            return Ok(false);
        }
        let k = (pod.batch as usize).min(rt.queue.len());
        let requests: Vec<usize> = rt.queue.drain(..k).collect();
        for &r in &requests {
            self.requests[r].start_ms = Some(now);
        }
        let model = &self.models[&pod.function_id];
        let axis = model.batch_axis();
        let b = (k as f64).clamp(f64::from(axis[0]), f64::from(axis[axis.len() - 1]));
        let need = model.predict_latency(b, f64::from(pod.sm), f64::from(FULL))?;
        rt.batch = Some(Batch { requests, remaining_ms: need });
        rt.waiting_since = Some(now);
        Ok(true)
    }

    /// Hand a free token to the longest-waiting pod with budget left.
    fn dispatch(&mut self, key: PartitionKey, now: f64) {
        let part = self.partitions.entry(key).or_default();
        if part.holder.is_some() {
            return;
        }
        let requesters = self
            .pods
            .iter()
            .filter(|(_, rt)| rt.partition == key && rt.batch.is_some() && rt.budget_ms > EPS_MS)
            .filter_map(|(&id, rt)| rt.waiting_since.map(|t| (id, t)));
        let Some(pod) = next_holder(requesters) else { return };
        let rt = self.pods.get_mut(&pod).expect("requester is live");
        let requested_ms = rt.waiting_since.take().expect("requester waits");
        let run = rt.batch.as_ref().expect("requester has a batch").remaining_ms.min(rt.budget_ms);
        part.holder = Some(Holder { pod, since_ms: now, requested_ms });
        self.seq += 1;
        part.wake_seq = self.seq;
        let seq = self.seq;
        self.heap.push(Event { t_ms: now + run.max(0.0), class: CLASS_WAKE, seq, kind: EventKind::Wake { partition: key, seq } });
    }

    /// Charge the holder for the time it has run, and take the token back.
    fn revoke(&mut self, key: PartitionKey, now: f64) -> Option<Holder> {
        let holder = self.partitions.get_mut(&key)?.holder.take()?;
        let rt = self.pods.get_mut(&holder.pod).expect("holder is live");
        let served = (now - holder.since_ms).max(0.0);
        rt.budget_ms -= served;
        if let Some(batch) = rt.batch.as_mut() {
            batch.remaining_ms -= served;
        }
        Some(holder)
    }

    fn on_wake(&mut self, key: PartitionKey, seq: u64, now: f64) -> Result<(), SimError> {
        if self.partitions.get(&key).is_none_or(|p| p.wake_seq != seq || p.holder.is_none()) {
            return Ok(());
        }
        let holder = self.revoke(key, now).expect("checked above");
        let rt = self.pods.get_mut(&holder.pod).expect("holder is live");
        let done = rt.batch.as_ref().is_some_and(|b| b.remaining_ms <= EPS_MS);
        if done {
            let batch = rt.batch.take().expect("checked above");
            for r in batch.requests {
                let rec = &mut self.requests[r];
                rec.completion_ms = Some(now);
                rec.outcome = RequestOutcome::Completed;
                self.outstanding -= 1;
            }
            self.last_completion_ms = self.last_completion_ms.max(now);
            self.start_batch(holder.pod, now)?;
        } else {
            // budget spent: wait for the next window
            rt.waiting_since = Some(now);
        }
        self.release_if_drained(holder.pod, now)?;
        self.dispatch(key, now);
        Ok(())
    }

    fn release_if_drained(&mut self, pod_id: PodId, now: f64) -> Result<(), SimError> {
        let draining = self.cluster.pods.get(&pod_id).is_some_and(|p| p.state == PodState::Draining);
        if draining && self.pods.get(&pod_id).is_some_and(PodRuntime::is_idle) {
            debug!("t={now}: releasing {pod_id}");
            self.cluster.release_pod(pod_id)?;
            self.pods.remove(&pod_id);
            self.ledger.close(pod_id, now);
        }
        Ok(())
    }

    fn on_window(&mut self, now: f64) -> Result<(), SimError> {
        let window_ms = self.inputs.sim.window_ms;
        let ready: Vec<PodId> = self
            .cluster
            .pods
            .values()
            .filter(|p| matches!(p.state, PodState::ColdStarting { ready_at_ms } if ready_at_ms <= now + EPS_MS))
            .map(|p| p.id)
            .collect();
        for id in ready {
            debug!("t={now}: {id} is ready");
            self.cluster.set_pod_state(id, PodState::Running)?;
        }
        let keys: Vec<PartitionKey> = self.partitions.keys().copied().collect();
        for key in keys {
            if let Some(h) = self.revoke(key, now) {
                self.pods.get_mut(&h.pod).expect("holder is live").waiting_since = Some(h.requested_ms);
            }
        }
        // quota changes take effect here
        for (id, rt) in self.pods.iter_mut() {
            rt.budget_ms = token_budget_ms(self.cluster.pods[id].quota, window_ms);
        }
        let mut keys: Vec<PartitionKey> = self.pods.values().map(|rt| rt.partition).collect();
        keys.sort();
        keys.dedup();
        for key in keys {
            self.dispatch(key, now);
        }
        Ok(())
    }

    fn on_tick(&mut self, now: f64) -> Result<(), SimError> {
        let interval_s = self.inputs.sim.scaler_interval_ms / 1000.0;
        let functions: Vec<FunctionId> = self.models.keys().cloned().collect();
        for fid in functions {
            let arrived = std::mem::take(self.arrivals_since_tick.get_mut(&fid).expect("known function"));
            let observed = arrived as f64 / interval_s;
            let predicted = self.predictors.get_mut(&fid).expect("known function").observe(observed)?;
            let spec = self.cluster.functions[&fid].clone();
            let model = Arc::clone(&self.models[&fid]);
            let actions = self.policy.scale(&spec, &self.cluster, model.as_ref(), predicted, now)?;
            for action in &actions {
                debug!("t={now}: {fid} {} {} q={}", action.kind.arrow(), action.target.id, action.target.quota);
                let id = self.cluster.apply_action(action)?;
                match action.kind {
                    ScalingKind::VerticalUp | ScalingKind::VerticalDown => {
                        self.ledger.requota(id, now, action.target.quota);
                    }
                    ScalingKind::HorizontalUp => self.track_pod(id, now),
                    ScalingKind::HorizontalDown => self.release_if_drained(id, now)?,
                }
            }
            self.cluster.check_invariants().map_err(|message| SimError::Invariant {
                t_ms: now,
                message: format!("{message}\n{}", dump_cluster(&self.cluster)),
            })?;
            let pods = self.cluster.pods_of(&fid).filter(|p| p.state != PodState::Draining).count() as u32;
            self.timeline.push(TimelineRow {
                t_ms: now,
                function_id: fid.clone(),
                pods,
                capability_rps: function_capability(&self.cluster, &fid)?,
                observed_rps: observed,
                predicted_rps: predicted,
            });
        }
        Ok(())
    }

    fn finish(self, end_ms: f64) -> Result<RunMetrics, SimError> {
        let intervals = self.ledger.finish(end_ms);
        let costs = compute_cost(&intervals, self.inputs.sim.price_per_gpu_hour);
        let mut functions = Vec::new();
        for setup in &self.inputs.functions {
            let fid = &setup.spec.function_id;
            let mine: Vec<&RequestRecord> = self.requests.iter().filter(|r| &r.function_id == fid).collect();
            let arrived = mine.len() as u64;
            let count = |o: RequestOutcome| mine.iter().filter(|r| r.outcome == o).count() as u64;
            let (completed, rejected, in_flight) =
                (count(RequestOutcome::Completed), count(RequestOutcome::Rejected), count(RequestOutcome::InFlight));
            if completed + rejected + in_flight != arrived {
                return Err(SimError::Invariant { t_ms: end_ms, message: format!("{fid}: requests not conserved") });
            }
            let mut latencies: Vec<f64> = mine.iter().filter_map(|r| r.latency_ms()).collect();
            latencies.sort_by(f64::total_cmp);
            let violations = violation_curve(&latencies, arrived, setup.spec.baseline_latency_ms);
            if violations.windows(2).any(|w| w[1].1 > w[0].1) {
                return Err(SimError::Invariant { t_ms: end_ms, message: format!("{fid}: violation curve not monotone") });
            }
            let total_cost = costs.get(fid).copied().unwrap_or(0.0);
            functions.push(FunctionMetrics {
                function_id: fid.clone(),
                baseline_latency_ms: setup.spec.baseline_latency_ms,
                arrived,
                completed,
                rejected,
                in_flight,
                violations,
                p50_ms: percentile(&latencies, 50.0),
                p90_ms: percentile(&latencies, 90.0),
                p95_ms: percentile(&latencies, 95.0),
                p99_ms: percentile(&latencies, 99.0),
                total_cost,
                cost_per_1k: if arrived == 0 { 0.0 } else { total_cost / arrived as f64 * 1000.0 },
            });
        }
        Ok(RunMetrics { functions, timeline: self.timeline, pod_intervals: intervals, requests: self.requests, end_ms })
    }
}

fn dump_cluster(cluster: &ClusterState) -> String {
    let mut lines = Vec::new();
    for gpu in cluster.gpus.values().filter(|g| !g.is_idle()) {
        for part in &gpu.partitions {
            let pods: Vec<String> = part
                .resident_pods
                .iter()
                .map(|id| match cluster.pods.get(id) {
                    Some(p) => format!("{id}[{} sm={} q={}]", p.function_id, p.sm, p.quota),
                    None => format!("{id}[missing]"),
                })
                .collect();
            lines.push(format!("  {} {:?} sm={} q_alloc={}: {}", gpu.id, part.id, part.sm, part.quota_allocated, pods.join(" ")));
        }
    }
    lines.join("\n")
}
