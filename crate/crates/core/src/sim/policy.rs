//! Scaling policies the simulator can run: the hybrid autoscaler and two
//! horizontal-only baselines with a fixed pod configuration.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::autoscaler::{Autoscaler, ScaleError, ScalerConfig};
use crate::model::{
    function_capability, ClusterState, FunctionId, FunctionSpec, GpuId, PartitionId, PodId, PodInstance, PodState,
    ScalingAction, ScalingKind, FULL,
};
use crate::perf::{PerfModel, PodConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyKind {
    /// Vertical quota scaling first, then horizontal placement.
    Hybrid,
    /// Replicate a fixed fine-grained pod configuration.
    HorizontalOnly,
    /// Replicate whole-GPU pods.
    #[serde(alias = "exclusive")]
    ExclusiveGpu,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 3] = [PolicyKind::Hybrid, PolicyKind::HorizontalOnly, PolicyKind::ExclusiveGpu];

    pub fn name(self) -> &'static str {
        match self {
            PolicyKind::Hybrid => "hybrid",
            PolicyKind::HorizontalOnly => "horizontal-only",
            PolicyKind::ExclusiveGpu => "exclusive-gpu",
        }
    }

    /// Pod configuration the policy starts a function with.
    pub fn initial_config(self, configured: PodConfig) -> PodConfig {
        match self {
            PolicyKind::ExclusiveGpu => PodConfig { sm: FULL, quota: FULL, ..configured },
            _ => configured,
        }
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PolicyKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "hybrid" => Ok(PolicyKind::Hybrid),
            "horizontal-only" => Ok(PolicyKind::HorizontalOnly),
            "exclusive-gpu" | "exclusive" => Ok(PolicyKind::ExclusiveGpu),
            other => Err(format!("unknown policy `{other}`")),
        }
    }
}

pub trait ScalingPolicy: Send {
    fn scale(
        &mut self,
        function: &FunctionSpec,
        cluster: &ClusterState,
        model: &dyn PerfModel,
        predicted_rps: f64,
        now_ms: f64,
    ) -> Result<Vec<ScalingAction>, ScaleError>;
}

impl ScalingPolicy for Autoscaler {
    fn scale(
        &mut self,
        function: &FunctionSpec,
        cluster: &ClusterState,
        model: &dyn PerfModel,
        predicted_rps: f64,
        now_ms: f64,
    ) -> Result<Vec<ScalingAction>, ScaleError> {
        Autoscaler::scale(self, function, cluster, model, predicted_rps, now_ms)
    }
}

/// Horizontal-only scaling of a fixed per-function pod configuration, with
/// the same thresholds and cooldown as the hybrid autoscaler.
#[derive(Debug, Clone)]
pub struct FixedReplicaPolicy {
    config: ScalerConfig,
    cold_start_ms: f64,
    pod_configs: BTreeMap<FunctionId, PodConfig>,
    last_scale_down: BTreeMap<FunctionId, f64>,
}

impl FixedReplicaPolicy {
    pub fn new(config: ScalerConfig, cold_start_ms: f64, pod_configs: BTreeMap<FunctionId, PodConfig>) -> Result<Self, ScaleError> {
        config.validate()?;
        Ok(FixedReplicaPolicy { config, cold_start_ms, pod_configs, last_scale_down: BTreeMap::new() })
    }

    /// Least occupied used GPU that can take the pod, else the first idle one.
    fn place_target(cluster: &ClusterState, cfg: PodConfig) -> Option<(GpuId, PartitionId)> {
        let mut used: Vec<(u64, GpuId)> = cluster
            .used_gpus()
            .map(|g| (cluster.pods_on(g.id).map(|p| u64::from(p.sm) * u64::from(p.quota)).sum(), g.id))
            .collect();
        used.sort();
        used.into_iter()
            .map(|(_, id)| id)
            .chain(cluster.gpus.values().filter(|g| g.is_idle()).map(|g| g.id))
            .find_map(|id| cluster.check_placement(id, cfg.sm, cfg.quota).ok().map(|p| (id, p.partition)))
    }
}

impl ScalingPolicy for FixedReplicaPolicy {
    fn scale(
        &mut self,
        function: &FunctionSpec,
        cluster: &ClusterState,
        model: &dyn PerfModel,
        predicted_rps: f64,
        now_ms: f64,
    ) -> Result<Vec<ScalingAction>, ScaleError> {
        let fid = &function.function_id;
        let cfg = match self.pod_configs.get(fid) {
            Some(c) => *c,
            None => return Ok(Vec::new()),
        };
        let per_pod = model.throughput(f64::from(cfg.batch), f64::from(cfg.sm), f64::from(cfg.quota))?;
        let capability = function_capability(cluster, fid)?;
        let mut actions = Vec::new();

        if predicted_rps > capability * self.config.alpha {
            let pending: f64 = cluster.pods_of(fid).filter(|p| p.is_cold_starting()).map(|p| p.capability_rps).sum();
            let gap = predicted_rps - capability * self.config.alpha - pending;
            if gap <= 0.0 || per_pod <= 0.0 {
                return Ok(actions);
            }
            let needed = (gap / per_pod).ceil() as usize;
            let mut work = cluster.clone();
            for _ in 0..needed {
                let Some((gpu_id, partition)) = Self::place_target(&work, cfg) else {
                    warn!("{fid}: no gpu can host another {}x{} pod", cfg.sm, cfg.quota);
                    break;
                };
                let action = ScalingAction {
                    function_id: fid.clone(),
                    kind: ScalingKind::HorizontalUp,
                    target: PodInstance {
                        id: PodId::PENDING,
                        function_id: fid.clone(),
                        batch: cfg.batch,
                        sm: cfg.sm,
                        quota: cfg.quota,
                        gpu_id,
                        partition,
                        state: PodState::ColdStarting { ready_at_ms: now_ms + self.cold_start_ms },
                        capability_rps: per_pod,
                    },
                };
                work.apply_action(&action)?;
                actions.push(action);
            }
            return Ok(actions);
        }

        let cooled = self.last_scale_down.get(fid).is_none_or(|&t| now_ms - t >= self.config.cooldown_ms);
        if predicted_rps < capability * self.config.beta && predicted_rps > self.config.r_min && cooled {
            let mut surplus = capability - predicted_rps;
            let mut running: Vec<&PodInstance> = cluster.pods_of(fid).filter(|p| p.is_running()).collect();
            // newest replicas go first
            running.sort_by(|a, b| b.id.cmp(&a.id));
            let mut left = running.len();
            for pod in running {
                if left <= 1 || surplus <= 0.0 {
                    break;
                }
                if pod.capability_rps <= surplus {
                    surplus -= pod.capability_rps;
                    left -= 1;
                    actions.push(ScalingAction {
                        function_id: fid.clone(),
                        kind: ScalingKind::HorizontalDown,
                        target: PodInstance { state: PodState::Draining, ..pod.clone() },
                    });
                }
            }
            if !actions.is_empty() {
                self.last_scale_down.insert(fid.clone(), now_ms);
            }
        }
        Ok(actions)
    }
}

/// Build the policy object for `kind`.
pub fn make_policy(
    kind: PolicyKind,
    config: ScalerConfig,
    cold_start_ms: f64,
    pod_configs: &BTreeMap<FunctionId, PodConfig>,
) -> Result<Box<dyn ScalingPolicy>, ScaleError> {
    Ok(match kind {
        PolicyKind::Hybrid => Box::new(Autoscaler::new(config)?.with_cold_start(cold_start_ms)),
        PolicyKind::HorizontalOnly | PolicyKind::ExclusiveGpu => {
            let configs = pod_configs.iter().map(|(f, c)| (f.clone(), kind.initial_config(*c))).collect();
            Box::new(FixedReplicaPolicy::new(config, cold_start_ms, configs)?)
        }
    })
}
