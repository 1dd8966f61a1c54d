//! Time-token execution on a virtual GPU.
//!
//! Every window of `window_ms` each pod gets a token budget of
//! `quota% * window_ms`. Within an SM partition one pod holds the token at a
//! time; a pod asks for it when it has a batch to run, and the arbiter hands
//! it to the longest-waiting requester (lowest pod id on ties). The holder
//! runs until its batch completes or its budget is spent. Budgets reset at
//! window boundaries, so a partition never grants more than `window_ms` per
//! window. Different partitions run concurrently on disjoint SMs.

use crate::model::{GpuDevice, PartitionId, PodId, FULL};

/// Completion slack for floating-point service accounting, in ms.
pub(crate) const EPS_MS: f64 = 1e-6;

/// Per-window token budget of a pod holding `quota` percent.
pub fn token_budget_ms(quota: u32, window_ms: f64) -> f64 {
    f64::from(quota.min(FULL)) * window_ms / f64::from(FULL)
}

/// Pick the next token holder among `(pod, waiting_since)` requesters.
pub fn next_holder(requesters: impl IntoIterator<Item = (PodId, f64)>) -> Option<PodId> {
    requesters
        .into_iter()
        .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
        .map(|(id, _)| id)
}

/// Outstanding work of one pod at the start of a window.
#[derive(Debug, Clone, PartialEq)]
pub struct PodDemand {
    pub pod_id: PodId,
    pub partition: PartitionId,
    pub quota: u32,
    /// Remaining service need of each queued batch, in order, in ms.
    pub batches: Vec<f64>,
}

/// What a pod got out of one window.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowService {
    pub pod_id: PodId,
    pub budget_ms: f64,
    pub served_ms: f64,
    /// Wall-clock completion time of each batch finished in this window.
    pub completions: Vec<f64>,
    /// Service still owed to the unfinished batches.
    pub remaining: Vec<f64>,
}

struct Cursor<'a> {
    demand: &'a PodDemand,
    next: usize,
    head_left: f64,
    budget_left: f64,
    waiting_since: f64,
    service: WindowService,
}

/// Run one window on `gpu` with every demand queued at `window_start_ms`.
/// Pods are grouped by the partition named in their demand.
pub fn execute_window(gpu: &GpuDevice, demands: &[PodDemand], window_start_ms: f64, window_ms: f64) -> Vec<WindowService> {
    let mut out = Vec::with_capacity(demands.len());
    for part in &gpu.partitions {
        let mut cursors: Vec<Cursor> = demands
            .iter()
            .filter(|d| d.partition == part.id)
            .map(|d| {
                let budget = token_budget_ms(d.quota, window_ms);
                Cursor {
                    demand: d,
                    next: 0,
                    head_left: d.batches.first().copied().unwrap_or(0.0),
                    budget_left: budget,
                    waiting_since: window_start_ms,
                    service: WindowService {
                        pod_id: d.pod_id,
                        budget_ms: budget,
                        served_ms: 0.0,
                        completions: Vec::new(),
                        remaining: Vec::new(),
                    },
                }
            })
            .collect();
        let mut t = window_start_ms;
        loop {
            let eligible = cursors
                .iter()
                .filter(|c| c.next < c.demand.batches.len() && c.budget_left > EPS_MS)
                .map(|c| (c.demand.pod_id, c.waiting_since));
            let Some(holder) = next_holder(eligible) else { break };
            let c = cursors.iter_mut().find(|c| c.demand.pod_id == holder).expect("eligible pod");
            let run = c.head_left.min(c.budget_left);
            t += run;
            c.budget_left -= run;
            c.head_left -= run;
            c.service.served_ms += run;
            if c.head_left <= EPS_MS {
                c.service.completions.push(t);
                c.next += 1;
                c.head_left = c.demand.batches.get(c.next).copied().unwrap_or(0.0);
            }
            c.waiting_since = t;
        }
        for c in cursors {
            let mut service = c.service;
            if c.next < c.demand.batches.len() {
                service.remaining.push(c.head_left);
                service.remaining.extend_from_slice(&c.demand.batches[c.next + 1..]);
            }
            out.push(service);
        }
    }
    out.sort_by_key(|s| s.pod_id);
    out
}
