//! Trace-driven discrete-event simulation of a GPU serving cluster.

pub mod cost;
mod engine;
pub mod metrics;
pub mod policy;
pub mod vgpu;

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::allocator::AllocError;
use crate::autoscaler::{ScaleError, ScalerConfig};
use crate::model::{FunctionId, FunctionSpec, ModelError};
use crate::perf::{PerfError, PerfModel, PodConfig};
use crate::predictor::{KalmanParams, PredictorError};
use crate::trace::{TraceError, WorkloadTrace};

pub use cost::{compute_cost, PodInterval};
pub use engine::{bootstrap_cluster, run};
pub use metrics::{slo_multipliers, FunctionMetrics, RequestOutcome, RequestRecord, RunMetrics, TimelineRow};
pub use policy::{make_policy, FixedReplicaPolicy, PolicyKind, ScalingPolicy};

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error("no perf table for function `{0}`")]
    MissingPerfTable(FunctionId),
    #[error("trace references unknown function `{0}`")]
    UnknownFunction(FunctionId),
    #[error("invariant violated at t={t_ms} ms: {message}")]
    Invariant { t_ms: f64, message: String },
    #[error(transparent)]
    Scale(#[from] ScaleError),
    #[error(transparent)]
    Alloc(#[from] AllocError),
    #[error(transparent)]
    Perf(#[from] PerfError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Predictor(#[from] PredictorError),
    #[error("invalid simulation config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    /// Length of one vGPU token window.
    pub window_ms: f64,
    pub scaler_interval_ms: f64,
    pub cold_start_ms: f64,
    pub price_per_gpu_hour: f64,
    /// Pending requests a pod may hold before new arrivals are rejected.
    pub queue_capacity: usize,
    pub seed: u64,
    /// Defaults to the trace horizon.
    pub horizon_ms: Option<f64>,
    /// Grace period after the horizon for queued requests to finish.
    pub drain_ms: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            window_ms: 100.0,
            scaler_interval_ms: 1000.0,
            cold_start_ms: 5000.0,
            price_per_gpu_hour: 2.48,
            queue_capacity: 256,
            seed: 0,
            horizon_ms: None,
            drain_ms: 60_000.0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let positive = [
            ("window_ms", self.window_ms),
            ("scaler_interval_ms", self.scaler_interval_ms),
            ("cold_start_ms", self.cold_start_ms),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(SimError::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.price_per_gpu_hour >= 0.0 && self.price_per_gpu_hour.is_finite()) {
            return Err(SimError::Config(format!("price_per_gpu_hour must be non-negative, got {}", self.price_per_gpu_hour)));
        }
        if !(self.drain_ms >= 0.0) {
            return Err(SimError::Config(format!("drain_ms must be non-negative, got {}", self.drain_ms)));
        }
        if self.queue_capacity == 0 {
            return Err(SimError::Config("queue_capacity must be at least 1".into()));
        }
        if let Some(h) = self.horizon_ms {
            if !(h >= 0.0 && h.is_finite()) {
                return Err(SimError::Config(format!("horizon_ms must be non-negative, got {h}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClusterConfig {
    pub gpus: u32,
    /// Physical SMs per device.
    pub total_sm_units: u32,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        ClusterConfig { gpus: 8, total_sm_units: 80 }
    }
}

/// A function together with its perf model and starting deployment.
#[derive(Clone)]
pub struct FunctionSetup {
    pub spec: FunctionSpec,
    pub model: Arc<dyn PerfModel>,
    pub initial: PodConfig,
    pub initial_pods: u32,
}

impl std::fmt::Debug for FunctionSetup {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FunctionSetup")
            .field("spec", &self.spec)
            .field("initial", &self.initial)
            .field("initial_pods", &self.initial_pods)
            .finish_non_exhaustive()
    }
}

/// Everything one simulation run needs.
#[derive(Debug, Clone)]
pub struct SimInputs {
    pub trace: WorkloadTrace,
    pub functions: Vec<FunctionSetup>,
    pub cluster: ClusterConfig,
    pub scaler: ScalerConfig,
    pub kalman: KalmanParams,
    pub sim: SimConfig,
    pub policy: PolicyKind,
}
