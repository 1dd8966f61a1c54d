//! Domain types shared by the allocator, the autoscaler and the simulator.
//!
//! SM shares and time quotas are integer percentage points (1..=100) so that
//! capacity checks such as "partition quotas sum to at most 100" are exact.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Full capacity of an SM share or a time quota, in percentage points.
pub const FULL: u32 = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct GpuId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PodId(pub u64);

impl PodId {
    /// Placeholder id carried by a not-yet-placed pod.
    pub const PENDING: PodId = PodId(u64::MAX);
}

/// Partition identifier, unique within one GPU.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PartitionId(pub u32);

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FunctionId(pub String);

impl FunctionId {
    pub fn new(id: impl Into<String>) -> Self {
        FunctionId(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for GpuId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "gpu-{}", self.0)
    }
}

impl fmt::Display for PodId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "pod-{}", self.0)
    }
}

impl fmt::Display for FunctionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for FunctionId {
    fn from(s: &str) -> Self {
        FunctionId(s.to_string())
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("unknown function `{0}`")]
    UnknownFunction(FunctionId),
    #[error("invalid function spec `{0}`: {1}")]
    InvalidFunction(FunctionId, String),
}

/// A group of SMs carved out of a GPU. Every resident pod runs with exactly
/// this partition's SM share; the pods time-share the partition by quota.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmPartition {
    pub id: PartitionId,
    pub sm: u32,
    pub resident_pods: Vec<PodId>,
    /// Sum of the resident pods' quotas.
    pub quota_allocated: u32,
}

impl SmPartition {
    pub fn quota_headroom(&self) -> u32 {
        FULL.saturating_sub(self.quota_allocated)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpuDevice {
    pub id: GpuId,
    pub total_sm_units: u32,
    pub partitions: Vec<SmPartition>,
    pub window_ms: f64,
    pub price_per_hour: f64,
    pub(crate) next_partition: u32,
}

impl GpuDevice {
    pub fn new(id: GpuId, total_sm_units: u32, window_ms: f64, price_per_hour: f64) -> Self {
        GpuDevice {
            id,
            total_sm_units,
            partitions: Vec::new(),
            window_ms,
            price_per_hour,
            next_partition: 0,
        }
    }

    pub fn sm_allocated(&self) -> u32 {
        self.partitions.iter().map(|p| p.sm).sum()
    }

    pub fn sm_unallocated(&self) -> u32 {
        FULL.saturating_sub(self.sm_allocated())
    }

    /// A GPU with no partitions is back in the free pool.
    pub fn is_idle(&self) -> bool {
        self.partitions.is_empty()
    }

    pub fn partition(&self, id: PartitionId) -> Option<&SmPartition> {
        self.partitions.iter().find(|p| p.id == id)
    }

    pub(crate) fn partition_mut(&mut self, id: PartitionId) -> Option<&mut SmPartition> {
        self.partitions.iter_mut().find(|p| p.id == id)
    }

    pub fn resident_pods(&self) -> impl Iterator<Item = PodId> + '_ {
        self.partitions.iter().flat_map(|p| p.resident_pods.iter().copied())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum PodState {
    ColdStarting { ready_at_ms: f64 },
    Running,
    Draining,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PodInstance {
    pub id: PodId,
    pub function_id: FunctionId,
    pub batch: u32,
    pub sm: u32,
    pub quota: u32,
    pub gpu_id: GpuId,
    pub partition: PartitionId,
    pub state: PodState,
    /// Throughput at the current configuration, batch / latency, in rps.
    pub capability_rps: f64,
}

impl PodInstance {
    pub fn is_running(&self) -> bool {
        matches!(self.state, PodState::Running)
    }

    pub fn is_cold_starting(&self) -> bool {
        matches!(self.state, PodState::ColdStarting { .. })
    }

    /// SM share times quota as a fraction of a whole GPU.
    pub fn occupancy(&self) -> f64 {
        f64::from(self.sm) * f64::from(self.quota) / f64::from(FULL * FULL)
    }
}

fn default_slo_multiplier() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FunctionSpec {
    pub function_id: FunctionId,
    /// Shortest achievable inference latency of the function's batch.
    pub baseline_latency_ms: f64,
    #[serde(default = "default_slo_multiplier")]
    pub slo_multiplier: f64,
    pub perf_table: String,
    pub min_rps: f64,
    pub allowed_batches: Vec<u32>,
}

impl FunctionSpec {
    pub fn slo_ms(&self) -> f64 {
        self.baseline_latency_ms * self.slo_multiplier
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |msg: &str| Err(ModelError::InvalidFunction(self.function_id.clone(), msg.into()));
        if !(self.baseline_latency_ms > 0.0) {
            return bad("baseline latency must be positive");
        }
        if !(self.slo_multiplier >= 1.0) {
            return bad("slo multiplier must be >= 1");
        }
        if !(self.min_rps >= 0.0) {
            return bad("min_rps must be non-negative");
        }
        if self.allowed_batches.is_empty() || self.allowed_batches.contains(&0) {
            return bad("allowed_batches must be non-empty and positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ScalingKind {
    VerticalUp,
    VerticalDown,
    HorizontalUp,
    HorizontalDown,
}

impl ScalingKind {
    pub fn arrow(self) -> char {
        match self {
            ScalingKind::VerticalUp => '→',
            ScalingKind::VerticalDown => '←',
            ScalingKind::HorizontalUp => '↑',
            ScalingKind::HorizontalDown => '↓',
        }
    }
}

/// One autoscaler decision. `target` is the pod's configuration after the
/// action; for `HorizontalUp` it is a new pod whose `id` is assigned when the
/// action is applied and whose `gpu_id` names the placement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingAction {
    pub function_id: FunctionId,
    pub target: PodInstance,
    pub kind: ScalingKind,
}

/// The allocator's world: devices, pods and the simulation clock.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterState {
    pub gpus: BTreeMap<GpuId, GpuDevice>,
    pub pods: BTreeMap<PodId, PodInstance>,
    pub functions: BTreeMap<FunctionId, FunctionSpec>,
    pub clock_ms: f64,
    pub(crate) next_pod: u64,
}

impl ClusterState {
    pub fn new() -> Self {
        ClusterState {
            gpus: BTreeMap::new(),
            pods: BTreeMap::new(),
            functions: BTreeMap::new(),
            clock_ms: 0.0,
            next_pod: 0,
        }
    }

    /// A cluster of `count` identical, initially idle devices.
    pub fn with_gpus(count: u32, total_sm_units: u32, window_ms: f64, price_per_hour: f64) -> Self {
        let mut cluster = ClusterState::new();
        for i in 0..count {
            cluster
                .gpus
                .insert(GpuId(i), GpuDevice::new(GpuId(i), total_sm_units, window_ms, price_per_hour));
        }
        cluster
    }

    pub fn register_function(&mut self, spec: FunctionSpec) {
        self.functions.insert(spec.function_id.clone(), spec);
    }

    pub fn pods_of<'a>(&'a self, function_id: &'a FunctionId) -> impl Iterator<Item = &'a PodInstance> + 'a {
        self.pods.values().filter(move |p| &p.function_id == function_id)
    }

    pub fn pods_on(&self, gpu_id: GpuId) -> impl Iterator<Item = &PodInstance> + '_ {
        self.pods.values().filter(move |p| p.gpu_id == gpu_id)
    }

    /// GPUs currently hosting at least one pod of any function.
    pub fn used_gpus(&self) -> impl Iterator<Item = &GpuDevice> + '_ {
        self.gpus.values().filter(|g| !g.is_idle())
    }
}

impl Default for ClusterState {
    fn default() -> Self {
        ClusterState::new()
    }
}

/// Total capability of a function's Running pods. Cold-starting and draining
/// pods contribute nothing.
pub fn function_capability(cluster: &ClusterState, function_id: &FunctionId) -> Result<f64, ModelError> {
    if !cluster.functions.contains_key(function_id) {
        return Err(ModelError::UnknownFunction(function_id.clone()));
    }
    Ok(cluster
        .pods_of(function_id)
        .filter(|p| p.is_running())
        .map(|p| p.capability_rps)
        .sum())
}

/// GPU occupancy: Σ sm × quota over the pods resident on `gpu`, as a
/// fraction of the whole device.
pub fn hgo<'a>(gpu: &GpuDevice, pods: impl IntoIterator<Item = &'a PodInstance>) -> f64 {
    let units: u64 = pods
        .into_iter()
        .filter(|p| p.gpu_id == gpu.id)
        .map(|p| u64::from(p.sm) * u64::from(p.quota))
        .sum();
    units as f64 / f64::from(FULL * FULL)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pod(id: u64, f: &str, sm: u32, quota: u32, cap: f64, state: PodState) -> PodInstance {
        PodInstance {
            id: PodId(id),
            function_id: f.into(),
            batch: 8,
            sm,
            quota,
            gpu_id: GpuId(0),
            partition: PartitionId(0),
            state,
            capability_rps: cap,
        }
    }

    fn spec(f: &str) -> FunctionSpec {
        FunctionSpec {
            function_id: f.into(),
            baseline_latency_ms: 10.0,
            slo_multiplier: 2.0,
            perf_table: "t".into(),
            min_rps: 1.0,
            allowed_batches: vec![8],
        }
    }

    fn cluster_with(pods: Vec<PodInstance>) -> ClusterState {
        let mut c = ClusterState::with_gpus(1, 80, 100.0, 2.48);
        c.register_function(spec("f"));
        for p in pods {
            c.pods.insert(p.id, p);
        }
        c
    }

    #[test]
    fn capability_sums_running_pods() {
        let c = cluster_with(vec![
            pod(1, "f", 50, 50, 150.0, PodState::Running),
            pod(2, "f", 50, 50, 250.0, PodState::Running),
        ]);
        assert_eq!(function_capability(&c, &"f".into()).unwrap(), 400.0);
    }

    #[test]
    fn capability_ignores_cold_starting() {
        let c = cluster_with(vec![
            pod(1, "f", 50, 50, 150.0, PodState::Running),
            pod(2, "f", 50, 50, 300.0, PodState::ColdStarting { ready_at_ms: 5000.0 }),
        ]);
        assert_eq!(function_capability(&c, &"f".into()).unwrap(), 150.0);
    }

    #[test]
    fn capability_of_podless_function_is_zero() {
        let c = cluster_with(vec![]);
        assert_eq!(function_capability(&c, &"f".into()).unwrap(), 0.0);
        assert_eq!(
            function_capability(&c, &"nope".into()),
            Err(ModelError::UnknownFunction("nope".into()))
        );
    }

    #[test]
    fn hgo_examples() {
        let gpu = GpuDevice::new(GpuId(0), 80, 100.0, 2.48);
        let pods = [pod(1, "f", 50, 50, 0.0, PodState::Running), pod(2, "f", 25, 100, 0.0, PodState::Running)];
        assert_eq!(hgo(&gpu, &pods), 0.5);
        assert_eq!(hgo(&gpu, &[]), 0.0);
        assert_eq!(hgo(&gpu, &[pod(3, "f", 100, 100, 0.0, PodState::Running)]), 1.0);
    }

    #[test]
    fn hgo_is_monotone_and_capability_permutation_invariant() {
        let gpu = GpuDevice::new(GpuId(0), 80, 100.0, 2.48);
        let mut pods = vec![];
        let mut last = 0.0;
        for i in 0..10u32 {
            pods.push(pod(u64::from(i), "f", 10 + i, 5 + i, f64::from(i) * 7.5, PodState::Running));
            let h = hgo(&gpu, &pods);
            assert!(h >= last);
            last = h;
        }
        let forward = cluster_with(pods.clone());
        let total = function_capability(&forward, &"f".into()).unwrap();
        pods.reverse();
        let mut reversed = cluster_with(vec![]);
        for (i, mut p) in pods.into_iter().enumerate() {
            p.id = PodId(100 + i as u64);
            reversed.pods.insert(p.id, p);
        }
        assert_eq!(function_capability(&reversed, &"f".into()).unwrap(), total);
    }
}
