//! Per-run measurements and their CSV form.

use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::cost::PodInterval;
use crate::model::{FunctionId, PodId};

/// SLO multipliers 1.0, 1.25, ..., 10.0.
pub fn slo_multipliers() -> Vec<f64> {
    (0..=36).map(|i| 1.0 + 0.25 * f64::from(i)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RequestOutcome {
    Completed,
    Rejected,
    /// Still queued or executing when the run stopped.
    InFlight,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestRecord {
    pub request_id: u64,
    pub function_id: FunctionId,
    pub arrival_ms: f64,
    pub pod_id: Option<PodId>,
    pub start_ms: Option<f64>,
    pub completion_ms: Option<f64>,
    pub outcome: RequestOutcome,
}

impl RequestRecord {
    pub fn latency_ms(&self) -> Option<f64> {
        self.completion_ms.map(|c| c - self.arrival_ms)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FunctionMetrics {
    pub function_id: FunctionId,
    pub baseline_latency_ms: f64,
    pub arrived: u64,
    pub completed: u64,
    pub rejected: u64,
    pub in_flight: u64,
    /// `(multiplier, violation rate)` pairs.
    pub violations: Vec<(f64, f64)>,
    pub p50_ms: f64,
    pub p90_ms: f64,
    pub p95_ms: f64,
    pub p99_ms: f64,
    pub total_cost: f64,
    pub cost_per_1k: f64,
}

impl FunctionMetrics {
    pub fn violation_at(&self, multiplier: f64) -> Option<f64> {
        self.violations.iter().find(|(m, _)| (m - multiplier).abs() < 1e-9).map(|&(_, r)| r)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimelineRow {
    pub t_ms: f64,
    pub function_id: FunctionId,
    pub pods: u32,
    pub capability_rps: f64,
    pub observed_rps: f64,
    pub predicted_rps: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub functions: Vec<FunctionMetrics>,
    pub timeline: Vec<TimelineRow>,
    pub pod_intervals: Vec<PodInterval>,
    pub requests: Vec<RequestRecord>,
    pub end_ms: f64,
}

/// Nearest-rank percentile of sorted samples; 0 for an empty set.
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let rank = (p / 100.0 * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

/// Fraction of `arrived` requests that were not completed within
/// `multiplier * baseline`. Rejected and unfinished requests always count.
pub fn violation_curve(latencies: &[f64], arrived: u64, baseline_ms: f64) -> Vec<(f64, f64)> {
    slo_multipliers()
        .into_iter()
        .map(|m| {
            if arrived == 0 {
                return (m, 0.0);
            }
            let slo = m * baseline_ms;
            let met = latencies.iter().filter(|&&l| l <= slo).count() as u64;
            (m, (arrived - met) as f64 / arrived as f64)
        })
        .collect()
}

pub(crate) fn fmt_f(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.6}")
    } else if x.is_nan() {
        "nan".into()
    } else if x > 0.0 {
        "inf".into()
    } else {
        "-inf".into()
    }
}

impl RunMetrics {
    pub fn function(&self, id: &FunctionId) -> Option<&FunctionMetrics> {
        self.functions.iter().find(|f| &f.function_id == id)
    }

    pub fn total_cost(&self) -> f64 {
        self.functions.iter().map(|f| f.total_cost).sum()
    }

    /// Violation rate over all functions' requests at `multiplier`.
    pub fn overall_violation_at(&self, multiplier: f64) -> f64 {
        let arrived: u64 = self.functions.iter().map(|f| f.arrived).sum();
        if arrived == 0 {
            return 0.0;
        }
        let violated: f64 = self
            .functions
            .iter()
            .map(|f| f.violation_at(multiplier).unwrap_or(0.0) * f.arrived as f64)
            .sum();
        violated / arrived as f64
    }

    pub fn violations_csv(&self) -> String {
        let mut s = String::from("function_id,multiplier,violation_rate\n");
        for f in &self.functions {
            for &(m, r) in &f.violations {
                s.push_str(&format!("{},{:.2},{}\n", f.function_id, m, fmt_f(r)));
            }
        }
        s
    }

    pub fn latency_csv(&self) -> String {
        let mut s = String::from("function_id,p50,p90,p95,p99\n");
        for f in &self.functions {
            s.push_str(&format!(
                "{},{},{},{},{}\n",
                f.function_id,
                fmt_f(f.p50_ms),
                fmt_f(f.p90_ms),
                fmt_f(f.p95_ms),
                fmt_f(f.p99_ms)
            ));
        }
        s
    }

    pub fn cost_csv(&self) -> String {
        let mut s = String::from("function_id,total_cost,cost_per_1k\n");
        for f in &self.functions {
            s.push_str(&format!("{},{},{}\n", f.function_id, fmt_f(f.total_cost), fmt_f(f.cost_per_1k)));
        }
        s
    }

    pub fn timeline_csv(&self) -> String {
        let mut s = String::from("t_ms,function_id,pods,capacity_rps,observed_rps,predicted_rps\n");
        for r in &self.timeline {
            s.push_str(&format!(
                "{},{},{},{},{},{}\n",
                fmt_f(r.t_ms),
                r.function_id,
                r.pods,
                fmt_f(r.capability_rps),
                fmt_f(r.observed_rps),
                fmt_f(r.predicted_rps)
            ));
        }
        s
    }

    /// Write `violations.csv`, `latency.csv`, `cost.csv` and `timeline.csv`.
    pub fn write_csvs(&self, dir: &Path) -> io::Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("violations.csv"), self.violations_csv())?;
        fs::write(dir.join("latency.csv"), self.latency_csv())?;
        fs::write(dir.join("cost.csv"), self.cost_csv())?;
        fs::write(dir.join("timeline.csv"), self.timeline_csv())?;
        Ok(())
    }
}
