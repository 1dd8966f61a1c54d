//! GPU cost accounting: every pod pays for the share of a GPU it holds
//! (sm × quota) for as long as it holds it.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::model::{FunctionId, PodId, FULL};

const MS_PER_HOUR: f64 = 3_600_000.0;

/// A stretch of a pod's life at a fixed configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PodInterval {
    pub pod_id: PodId,
    pub function_id: FunctionId,
    pub start_ms: f64,
    pub end_ms: f64,
    pub sm: u32,
    pub quota: u32,
}

impl PodInterval {
    pub fn cost(&self, price_per_gpu_hour: f64) -> f64 {
        let share = f64::from(self.sm) / f64::from(FULL) * f64::from(self.quota) / f64::from(FULL);
        share * (self.end_ms - self.start_ms).max(0.0) / MS_PER_HOUR * price_per_gpu_hour
    }
}

/// Total cost per function.
pub fn compute_cost(intervals: &[PodInterval], price_per_gpu_hour: f64) -> BTreeMap<FunctionId, f64> {
    let mut out: BTreeMap<FunctionId, f64> = BTreeMap::new();
    for iv in intervals {
        *out.entry(iv.function_id.clone()).or_default() += iv.cost(price_per_gpu_hour);
    }
    out
}

/// Open/close bookkeeping of pod intervals during a run.
#[derive(Debug, Default, Clone)]
pub(crate) struct CostLedger {
    open: BTreeMap<PodId, PodInterval>,
    closed: Vec<PodInterval>,
}

impl CostLedger {
    pub fn open(&mut self, pod_id: PodId, function_id: FunctionId, now_ms: f64, sm: u32, quota: u32) {
        self.open.insert(pod_id, PodInterval { pod_id, function_id, start_ms: now_ms, end_ms: now_ms, sm, quota });
    }

    pub fn close(&mut self, pod_id: PodId, now_ms: f64) -> Option<PodInterval> {
        let mut iv = self.open.remove(&pod_id)?;
        iv.end_ms = now_ms;
        self.closed.push(iv.clone());
        Some(iv)
    }

    /// Split the pod's interval at `now_ms` with a new quota.
    pub fn requota(&mut self, pod_id: PodId, now_ms: f64, quota: u32) {
        if let Some(iv) = self.close(pod_id, now_ms) {
            self.open(pod_id, iv.function_id, now_ms, iv.sm, quota);
        }
    }

    pub fn finish(mut self, end_ms: f64) -> Vec<PodInterval> {
        let open: Vec<PodId> = self.open.keys().copied().collect();
        for id in open {
            self.close(id, end_ms);
        }
        self.closed.sort_by(|a, b| a.pod_id.cmp(&b.pod_id).then(a.start_ms.total_cmp(&b.start_ms)));
        self.closed
    }
}
