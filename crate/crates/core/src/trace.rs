//! Workload traces: loading Azure-style CSVs and generating synthetic load.

use std::path::Path;

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::FunctionId;

const MINUTE_MS: f64 = 60_000.0;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("{path}: line {line}: {message}")]
    Parse { path: String, line: u64, message: String },
    #[error("invalid trace: {0}")]
    Invalid(String),
    #[error("invalid synthetic workload: {0}")]
    Synth(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Arrival {
    pub arrival_ms: f64,
    pub function_id: FunctionId,
}

/// Time-ordered request arrivals over `[0, horizon_ms]`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct WorkloadTrace {
    entries: Vec<Arrival>,
    horizon_ms: f64,
}

impl WorkloadTrace {
    /// Validate and sort `entries`. The horizon is at least the last arrival.
    pub fn new(mut entries: Vec<Arrival>, horizon_ms: f64) -> Result<Self, TraceError> {
        if let Some(bad) = entries.iter().find(|a| !(a.arrival_ms >= 0.0) || !a.arrival_ms.is_finite()) {
            return Err(TraceError::Invalid(format!("arrival time {} is not a non-negative number", bad.arrival_ms)));
        }
        if !(horizon_ms >= 0.0) || !horizon_ms.is_finite() {
            return Err(TraceError::Invalid(format!("horizon {horizon_ms} is not a non-negative number")));
        }
        if !entries.windows(2).all(|w| w[0].arrival_ms <= w[1].arrival_ms) {
            entries.sort_by(|a, b| a.arrival_ms.total_cmp(&b.arrival_ms));
        }
        let last = entries.last().map_or(0.0, |a| a.arrival_ms);
        Ok(WorkloadTrace { entries, horizon_ms: horizon_ms.max(last) })
    }

    pub fn empty() -> Self {
        WorkloadTrace::default()
    }

    pub fn entries(&self) -> &[Arrival] {
        &self.entries
    }

    pub fn horizon_ms(&self) -> f64 {
        self.horizon_ms
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn with_horizon(mut self, horizon_ms: f64) -> Self {
        self.horizon_ms = self.horizon_ms.max(horizon_ms);
        self
    }

    /// Merge several traces. Simultaneous arrivals keep the order of the
    /// input traces.
    pub fn merge(traces: impl IntoIterator<Item = WorkloadTrace>) -> WorkloadTrace {
        let mut entries = Vec::new();
        let mut horizon_ms: f64 = 0.0;
        for t in traces {
            horizon_ms = horizon_ms.max(t.horizon_ms);
            entries.extend(t.entries);
        }
        entries.sort_by(|a, b| a.arrival_ms.total_cmp(&b.arrival_ms));
        WorkloadTrace { entries, horizon_ms }
    }

    pub fn count_for(&self, function_id: &FunctionId) -> usize {
        self.entries.iter().filter(|a| &a.function_id == function_id).count()
    }
}

/// How per-minute counts become individual arrivals.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum Expansion {
    /// Evenly spaced within the minute, starting at the minute boundary.
    #[default]
    Uniform,
    /// Uniformly random positions (a Poisson process conditioned on the count).
    Poisson { seed: u64 },
}

fn parse_error(path: &Path, line: u64, message: impl Into<String>) -> TraceError {
    TraceError::Parse { path: path.display().to_string(), line, message: message.into() }
}

pub fn load_trace(path: &Path) -> Result<WorkloadTrace, TraceError> {
    load_trace_with(path, Expansion::Uniform)
}

/// Load a trace CSV. The schema is detected from the header:
/// `arrival_ms,function_id` or `minute,function_id,count`.
pub fn load_trace_with(path: &Path, expansion: Expansion) -> Result<WorkloadTrace, TraceError> {
    let text = std::fs::read_to_string(path)?;
    if text.trim().is_empty() {
        return Ok(WorkloadTrace::empty());
    }
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let headers: Vec<String> = reader.headers()?.iter().map(str::to_owned).collect();
    let per_minute = match headers.iter().map(String::as_str).collect::<Vec<_>>().as_slice() {
        ["arrival_ms", "function_id"] => false,
        ["minute" | "minute_index", "function_id", "count"] => true,
        _ => {
            return Err(parse_error(
                path,
                1,
                format!("unrecognised header `{}`", headers.join(",")),
            ))
        }
    };
    let mut rng = match expansion {
        Expansion::Poisson { seed } => Some(ChaCha8Rng::seed_from_u64(seed)),
        Expansion::Uniform => None,
    };
    let mut entries = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| parse_error(path, e.position().map_or(0, |p| p.line()), e.to_string()))?;
        let line = record.position().map_or(0, |p| p.line());
        let field = |i: usize| record.get(i).ok_or_else(|| parse_error(path, line, "missing field"));
        let function_id = FunctionId::new(field(1)?);
        if per_minute {
            let minute: f64 = field(0)?.parse().map_err(|e| parse_error(path, line, format!("bad minute: {e}")))?;
            let count: u64 = field(2)?.parse().map_err(|e| parse_error(path, line, format!("bad count: {e}")))?;
            if !(minute >= 0.0) || minute.fract() != 0.0 {
                return Err(parse_error(path, line, format!("minute must be a non-negative integer, got {minute}")));
            }
            let start = minute * MINUTE_MS;
            let mut offsets: Vec<f64> = match rng.as_mut() {
                None => (0..count).map(|i| i as f64 * MINUTE_MS / count as f64).collect(),
                Some(rng) => (0..count).map(|_| rng.random::<f64>() * MINUTE_MS).collect(),
            };
            offsets.sort_by(f64::total_cmp);
            entries.extend(offsets.into_iter().map(|o| Arrival { arrival_ms: start + o, function_id: function_id.clone() }));
        } else {
            let t: f64 = field(0)?.parse().map_err(|e| parse_error(path, line, format!("bad arrival_ms: {e}")))?;
            if !(t >= 0.0) || !t.is_finite() {
                return Err(parse_error(path, line, format!("arrival_ms must be non-negative, got {t}")));
            }
            entries.push(Arrival { arrival_ms: t, function_id });
        }
    }
    if !entries.windows(2).all(|w| w[0].arrival_ms <= w[1].arrival_ms) {
        warn!("{}: arrivals are not sorted, sorting", path.display());
    }
    WorkloadTrace::new(entries, 0.0)
}

/// Write a trace in the per-arrival schema.
pub fn save_trace(path: &Path, trace: &WorkloadTrace) -> Result<(), TraceError> {
    let mut writer = csv::Writer::from_path(path)?;
    writer.write_record(["arrival_ms", "function_id"])?;
    for a in trace.entries() {
        writer.write_record([a.arrival_ms.to_string(), a.function_id.0.clone()])?;
    }
    writer.flush()?;
    Ok(())
}

/// Synthetic arrival processes. Rates are in requests per second.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum SynthKind {
    Poisson { rate: f64 },
    /// Alternate between `low` and `high` every `period_ms`, starting low.
    Step { low: f64, high: f64, period_ms: f64 },
    /// Each `slot_ms` slot runs at `spike` with probability `spike_prob`,
    /// otherwise at `base`.
    Burst {
        base: f64,
        spike: f64,
        spike_prob: f64,
        #[serde(default = "default_slot_ms")]
        slot_ms: f64,
    },
}

fn default_slot_ms() -> f64 {
    10_000.0
}

fn check_rate(name: &str, rate: f64) -> Result<(), TraceError> {
    if rate >= 0.0 && rate.is_finite() {
        Ok(())
    } else {
        Err(TraceError::Synth(format!("{name} must be a non-negative rate, got {rate}")))
    }
}

/// Poisson arrivals at `rate` rps over `[start, end)`.
fn poisson_segment(rng: &mut ChaCha8Rng, rate: f64, start: f64, end: f64, function_id: &FunctionId, out: &mut Vec<Arrival>) {
    if rate <= 0.0 {
        return;
    }
    let gap = Exp::new(rate / 1000.0).expect("positive rate");
    let mut t = start;
    loop {
        t += gap.sample(rng);
        if t >= end {
            break;
        }
        out.push(Arrival { arrival_ms: t, function_id: function_id.clone() });
    }
}

/// Generate a synthetic trace over `[0, horizon_ms)`, deterministic in `seed`.
pub fn synth_trace(kind: &SynthKind, function_id: &FunctionId, horizon_ms: f64, seed: u64) -> Result<WorkloadTrace, TraceError> {
    if !(horizon_ms >= 0.0) || !horizon_ms.is_finite() {
        return Err(TraceError::Synth(format!("horizon must be non-negative, got {horizon_ms}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::new();
    match *kind {
        SynthKind::Poisson { rate } => {
            check_rate("rate", rate)?;
            poisson_segment(&mut rng, rate, 0.0, horizon_ms, function_id, &mut entries);
        }
        SynthKind::Step { low, high, period_ms } => {
            check_rate("low", low)?;
            check_rate("high", high)?;
            if !(period_ms > 0.0) {
                return Err(TraceError::Synth(format!("period must be positive, got {period_ms}")));
            }
            let mut start = 0.0;
            let mut k = 0u64;
            while start < horizon_ms {
                let end = (start + period_ms).min(horizon_ms);
                let rate = if k.is_multiple_of(2) { low } else { high };
                poisson_segment(&mut rng, rate, start, end, function_id, &mut entries);
                k += 1;
                start = period_ms * k as f64;
            }
        }
        SynthKind::Burst { base, spike, spike_prob, slot_ms } => {
            check_rate("base", base)?;
            check_rate("spike", spike)?;
            if !(0.0..=1.0).contains(&spike_prob) {
                return Err(TraceError::Synth(format!("spike_prob must be in [0, 1], got {spike_prob}")));
            }
            if !(slot_ms > 0.0) {
                return Err(TraceError::Synth(format!("slot must be positive, got {slot_ms}")));
            }
            let mut k = 0u64;
            let mut start = 0.0;
            while start < horizon_ms {
                let end = (start + slot_ms).min(horizon_ms);
                let rate = if rng.random::<f64>() < spike_prob { spike } else { base };
                poisson_segment(&mut rng, rate, start, end, function_id, &mut entries);
                k += 1;
                start = slot_ms * k as f64;
            }
        }
    }
    WorkloadTrace::new(entries, horizon_ms)
}
