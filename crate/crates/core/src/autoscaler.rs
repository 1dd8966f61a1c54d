//! Hybrid vertical/horizontal autoscaling for one function at a time.
//!
//! Scale-up first raises the quota of the function's running pods (largest
//! SM share first), then adds a pod to the least occupied used GPU, and only
//! then opens a fresh GPU with the cheapest configuration that covers the
//! remaining gap. Scale-down lowers quotas of the smallest pods first and
//! removes a pod when its whole capability fits inside the surplus. It is
//! gated by a per-function cooldown and never removes the last running pod.

use std::collections::BTreeMap;

use log::{debug, warn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::allocator::AllocError;
use crate::model::{
    function_capability, ClusterState, FunctionId, FunctionSpec, GpuId, ModelError, PodId, PodInstance, PodState,
    ScalingAction, ScalingKind, FULL,
};
use crate::perf::{max_quota_capability, most_efficient_config, PerfError, PerfModel};

#[derive(Debug, Error)]
pub enum ScaleError {
    #[error(transparent)]
    Perf(#[from] PerfError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Alloc(#[from] AllocError),
    #[error("invalid scaler config: {0}")]
    Config(String),
    #[error("function `{0}` has no running pods to route to")]
    Unroutable(FunctionId),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScalerConfig {
    /// Scale up when predicted load exceeds `alpha` of current capability.
    pub alpha: f64,
    /// Scale down when predicted load falls under `beta` of capability.
    pub beta: f64,
    /// Quota step in percentage points.
    pub delta_iq: u32,
    /// Minimum time between two scale-downs of the same function.
    pub cooldown_ms: f64,
    /// No scale-down while the predicted load is at or under this rate.
    pub r_min: f64,
}

impl Default for ScalerConfig {
    fn default() -> Self {
        ScalerConfig { alpha: 0.9, beta: 0.5, delta_iq: 10, cooldown_ms: 30_000.0, r_min: 1.0 }
    }
}

impl ScalerConfig {
    pub fn validate(&self) -> Result<(), ScaleError> {
        if !(0.0 < self.beta && self.beta < self.alpha && self.alpha <= 1.0) {
            return Err(ScaleError::Config(format!(
                "need 0 < beta < alpha <= 1, got alpha={} beta={}",
                self.alpha, self.beta
            )));
        }
        if self.delta_iq == 0 || self.delta_iq > FULL {
            return Err(ScaleError::Config(format!("delta_iq must be in 1..=100, got {}", self.delta_iq)));
        }
        if !(self.cooldown_ms >= 0.0) {
            return Err(ScaleError::Config("cooldown_ms must be >= 0".into()));
        }
        if !(self.r_min >= 0.0) {
            return Err(ScaleError::Config("r_min must be >= 0".into()));
        }
        Ok(())
    }
}

/// Stateful wrapper holding per-function scale-down timestamps.
#[derive(Debug, Clone)]
pub struct Autoscaler {
    config: ScalerConfig,
    cold_start_ms: f64,
    last_scale_down: BTreeMap<FunctionId, f64>,
}

impl Autoscaler {
    pub fn new(config: ScalerConfig) -> Result<Self, ScaleError> {
        config.validate()?;
        Ok(Autoscaler { config, cold_start_ms: 0.0, last_scale_down: BTreeMap::new() })
    }

    /// New pods are emitted as ColdStarting until `now + cold_start_ms`.
    pub fn with_cold_start(mut self, cold_start_ms: f64) -> Self {
        self.cold_start_ms = cold_start_ms;
        self
    }

    pub fn config(&self) -> &ScalerConfig {
        &self.config
    }

    pub fn last_scale_down(&self, function_id: &FunctionId) -> Option<f64> {
        self.last_scale_down.get(function_id).copied()
    }

    /// Decide the scaling actions for `function` given its predicted load.
    pub fn scale(
        &mut self,
        function: &FunctionSpec,
        cluster: &ClusterState,
        model: &dyn PerfModel,
        predicted_rps: f64,
        now_ms: f64,
    ) -> Result<Vec<ScalingAction>, ScaleError> {
        let last = self.last_scale_down(&function.function_id);
        let planner = Planner {
            config: &self.config,
            function,
            model,
            now_ms,
            ready_at_ms: now_ms + self.cold_start_ms,
        };
        let actions = planner.plan(cluster, predicted_rps, last)?;
        if actions.iter().any(|a| matches!(a.kind, ScalingKind::VerticalDown | ScalingKind::HorizontalDown)) {
            self.last_scale_down.insert(function.function_id.clone(), now_ms);
        }
        Ok(actions)
    }
}

struct Planner<'a> {
    config: &'a ScalerConfig,
    function: &'a FunctionSpec,
    model: &'a dyn PerfModel,
    now_ms: f64,
    ready_at_ms: f64,
}

fn occupancy_units(cluster: &ClusterState, gpu: GpuId) -> u64 {
    cluster.pods_on(gpu).map(|p| u64::from(p.sm) * u64::from(p.quota)).sum()
}

impl Planner<'_> {
    fn capability(&self, batch: u32, sm: u32, quota: u32) -> Result<f64, PerfError> {
        self.model.throughput(f64::from(batch), f64::from(sm), f64::from(quota))
    }

    /// Running pods of the function ordered by SM share (descending when
    /// `largest_first`), ties by pod id.
    fn running_pods(&self, cluster: &ClusterState, largest_first: bool) -> Vec<PodId> {
        let mut pods: Vec<&PodInstance> = cluster.pods_of(&self.function.function_id).filter(|p| p.is_running()).collect();
        pods.sort_by(|a, b| {
            let by_sm = if largest_first { b.sm.cmp(&a.sm) } else { a.sm.cmp(&b.sm) };
            by_sm.then(a.id.cmp(&b.id))
        });
        pods.into_iter().map(|p| p.id).collect()
    }

    fn emit(&self, work: &mut ClusterState, actions: &mut Vec<ScalingAction>, kind: ScalingKind, mut target: PodInstance) -> Result<(), ScaleError> {
        if kind == ScalingKind::HorizontalUp {
            target.partition = work.check_placement(target.gpu_id, target.sm, target.quota)?.partition;
        }
        let action = ScalingAction { function_id: self.function.function_id.clone(), target, kind };
        work.apply_action(&action)?;
        debug!("{} {} {:?} q={}", self.function.function_id, kind.arrow(), action.target.id, action.target.quota);
        actions.push(action);
        Ok(())
    }

    fn new_pod(&self, gpu_id: GpuId, batch: u32, sm: u32, quota: u32, capability_rps: f64) -> PodInstance {
        PodInstance {
            id: PodId::PENDING,
            function_id: self.function.function_id.clone(),
            batch,
            sm,
            quota,
            gpu_id,
            partition: crate::model::PartitionId(u32::MAX),
            state: PodState::ColdStarting { ready_at_ms: self.ready_at_ms },
            capability_rps,
        }
    }

    fn plan(&self, cluster: &ClusterState, predicted: f64, last_scale_down: Option<f64>) -> Result<Vec<ScalingAction>, ScaleError> {
        let capability = function_capability(cluster, &self.function.function_id)?;
        let cfg = self.config;
        if predicted > capability * cfg.alpha {
            return self.scale_up(cluster, predicted - capability * cfg.alpha);
        }
        let cooled = last_scale_down.is_none_or(|t| self.now_ms - t >= cfg.cooldown_ms);
        if predicted < capability * cfg.beta && predicted > cfg.r_min && cooled {
            return self.scale_down(cluster, capability - predicted);
        }
        Ok(Vec::new())
    }

    fn scale_up(&self, cluster: &ClusterState, mut gap: f64) -> Result<Vec<ScalingAction>, ScaleError> {
        let step = self.config.delta_iq;
        let mut work = cluster.clone();
        let mut actions = Vec::new();
        let order = self.running_pods(cluster, true);

        for &pod_id in &order {
            if gap <= 0.0 {
                break;
            }
            let pod = work.pods[&pod_id].clone();
            let available = work.max_avail_quota_for_pod(pod_id)?;
            let mut gain = 0.0;
            let mut raised = None;
            let mut n = 1;
            while pod.quota + step * n <= available && gap - gain > 0.0 {
                let quota = pod.quota + step * n;
                let cap = self.capability(pod.batch, pod.sm, quota)?;
                gain = cap - pod.capability_rps;
                raised = Some((quota, cap));
                n += 1;
            }
            if let Some((quota, cap)) = raised {
                let target = PodInstance { quota, capability_rps: cap, ..pod };
                self.emit(&mut work, &mut actions, ScalingKind::VerticalUp, target)?;
                gap -= gain;
            }
        }

        // Capacity already on its way counts against the horizontal gap.
        let pending: f64 = cluster
            .pods_of(&self.function.function_id)
            .filter(|p| p.is_cold_starting())
            .map(|p| p.capability_rps)
            .sum();
        gap -= pending;
        if gap <= 0.0 {
            return Ok(actions);
        }

        let batch = order
            .first()
            .map(|id| cluster.pods[id].batch)
            .or_else(|| self.function.allowed_batches.iter().copied().max())
            .unwrap_or(1);
        let least_occupied = work
            .used_gpus()
            .map(|g| (occupancy_units(&work, g.id), g.id))
            .min()
            .map(|(_, id)| id);
        if let Some(gpu_id) = least_occupied {
            let (sm, quota_cap) = work.max_avail_quota_and_sm(gpu_id)?;
            if sm > 0 && quota_cap > 0 {
                let cap_max = max_quota_capability(self.model, batch, sm, quota_cap)?;
                if cap_max > gap {
                    let mut quotas: Vec<u32> = (1..).map(|n| n * step).take_while(|&q| q <= quota_cap).collect();
                    if quota_cap % step != 0 {
                        quotas.push(quota_cap);
                    }
                    let mut chosen = (quota_cap, cap_max);
                    for q in quotas {
                        let cap = self.capability(batch, sm, q)?;
                        if cap >= gap {
                            chosen = (q, cap);
                            break;
                        }
                    }
                    let target = self.new_pod(gpu_id, batch, sm, chosen.0, chosen.1);
                    self.emit(&mut work, &mut actions, ScalingKind::HorizontalUp, target)?;
                    gap -= chosen.1;
                }
            }
        }

        if gap > 0.0 {
            let cfg = most_efficient_config(self.model, gap, step, Some(&self.function.allowed_batches))?;
            match work.gpus.values().find(|g| g.is_idle()).map(|g| g.id) {
                Some(gpu_id) => {
                    let cap = self.capability(cfg.batch, cfg.sm, cfg.quota)?;
                    let target = self.new_pod(gpu_id, cfg.batch, cfg.sm, cfg.quota, cap);
                    self.emit(&mut work, &mut actions, ScalingKind::HorizontalUp, target)?;
                }
                None => warn!(
                    "{}: no idle gpu left for a new pod, {:.1} rps uncovered",
                    self.function.function_id, gap
                ),
            }
        }
        Ok(actions)
    }

    fn scale_down(&self, cluster: &ClusterState, mut surplus: f64) -> Result<Vec<ScalingAction>, ScaleError> {
        let step = self.config.delta_iq;
        let mut work = cluster.clone();
        let mut actions = Vec::new();
        let order = self.running_pods(cluster, false);
        let mut running = order.len();

        for &pod_id in &order {
            if surplus <= 0.0 {
                break;
            }
            let pod = work.pods[&pod_id].clone();
            // Walk the quota down while the lost capability stays within the
            // surplus; reaching zero quota means removing the pod.
            let mut choice: Option<(Option<(u32, f64)>, f64)> = None;
            let mut n = 1;
            loop {
                if pod.quota <= step * n {
                    if running > 1 && pod.capability_rps <= surplus {
                        choice = Some((None, pod.capability_rps));
                    }
                    break;
                }
                let quota = pod.quota - step * n;
                let cap = self.capability(pod.batch, pod.sm, quota)?;
                let loss = pod.capability_rps - cap;
                if loss > surplus {
                    break;
                }
                choice = Some((Some((quota, cap)), loss));
                n += 1;
            }
            match choice {
                Some((Some((quota, cap)), loss)) => {
                    let target = PodInstance { quota, capability_rps: cap, ..pod };
                    self.emit(&mut work, &mut actions, ScalingKind::VerticalDown, target)?;
                    surplus -= loss;
                }
                Some((None, loss)) => {
                    let target = PodInstance { state: PodState::Draining, ..pod };
                    self.emit(&mut work, &mut actions, ScalingKind::HorizontalDown, target)?;
                    running -= 1;
                    surplus -= loss;
                }
                None => {}
            }
        }
        Ok(actions)
    }
}

/// Request split across a function's running pods, proportional to their
/// capability.
pub fn update_load_balancer_weights(function_id: &FunctionId, cluster: &ClusterState) -> Result<BTreeMap<PodId, f64>, ScaleError> {
    let running: Vec<&PodInstance> = cluster.pods_of(function_id).filter(|p| p.is_running()).collect();
    let total: f64 = running.iter().map(|p| p.capability_rps).sum();
    if running.is_empty() || !(total > 0.0) {
        return Err(ScaleError::Unroutable(function_id.clone()));
    }
    Ok(running.into_iter().map(|p| (p.id, p.capability_rps / total)).collect())
}
