//! Resource-aware latency model backed by a profiled latency grid.
//!
//! A [`PerfTable`] holds latencies sampled on a rectangular
//! `(batch, sm_percent, quota_percent)` grid and answers arbitrary queries by
//! trilinear interpolation. Anything implementing [`PerfModel`] can stand in
//! for the table.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{FunctionId, FULL};

#[derive(Debug, Error)]
pub enum PerfError {
    #[error("performance table is empty")]
    EmptyTable,
    #[error("batch {batch} outside table range [{min}, {max}]")]
    BatchOutOfRange { batch: f64, min: u32, max: u32 },
    #[error("{what} {value} must be in (0, 100]")]
    OutOfDomain { what: &'static str, value: f64 },
    #[error("target throughput must be positive, got {0}")]
    InvalidTarget(f64),
    #[error("quota step must be in 1..=100, got {0}")]
    InvalidStep(u32),
    #[error("table for `{function}` rejected: {report}")]
    InvalidTable { function: FunctionId, report: Box<TableReport> },
    #[error("{path}: line {line}: {message}")]
    Parse { path: String, line: u64, message: String },
    #[error("no performance table for function `{0}`")]
    MissingTable(FunctionId),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Behavior contract for latency predictors.
pub trait PerfModel: Send + Sync {
    /// Latency in milliseconds of one batch at `(batch, sm, quota)`.
    fn predict_latency(&self, batch: f64, sm: f64, quota: f64) -> Result<f64, PerfError>;

    /// Sorted batch sizes the model was profiled at.
    fn batch_axis(&self) -> &[u32];

    /// Sorted SM shares the model was profiled at.
    fn sm_axis(&self) -> &[u32];

    /// Requests per second: batch / latency.
    fn throughput(&self, batch: f64, sm: f64, quota: f64) -> Result<f64, PerfError> {
        let latency = self.predict_latency(batch, sm, quota)?;
        Ok(batch / (latency / 1000.0))
    }
}

/// One row of a perf table file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerfSample {
    pub function_id: FunctionId,
    pub batch: u32,
    pub sm_percent: u32,
    pub quota_percent: u32,
    pub latency_ms: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct GridPoint {
    pub batch: u32,
    pub sm: u32,
    pub quota: u32,
}

impl fmt::Display for GridPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(batch={}, sm={}, quota={})", self.batch, self.sm, self.quota)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Batch,
    Sm,
    Quota,
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Axis::Batch => "batch",
            Axis::Sm => "sm",
            Axis::Quota => "quota",
        })
    }
}

/// Adjacent grid points whose latencies move the wrong way along `axis`.
#[derive(Debug, Clone, PartialEq)]
pub struct MonotonicityViolation {
    pub axis: Axis,
    pub lower: GridPoint,
    pub upper: GridPoint,
    pub lower_latency: f64,
    pub upper_latency: f64,
}

/// Outcome of checking a set of samples for one function.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TableReport {
    pub batches: Vec<u32>,
    pub sms: Vec<u32>,
    pub quotas: Vec<u32>,
    pub samples: usize,
    pub missing: Vec<GridPoint>,
    pub duplicates: Vec<GridPoint>,
    pub non_positive: Vec<GridPoint>,
    pub out_of_domain: Vec<GridPoint>,
    pub monotonicity: Vec<MonotonicityViolation>,
}

impl TableReport {
    pub fn is_clean(&self) -> bool {
        self.samples > 0
            && self.missing.is_empty()
            && self.duplicates.is_empty()
            && self.non_positive.is_empty()
            && self.out_of_domain.is_empty()
            && self.monotonicity.is_empty()
    }
}

impl fmt::Display for TableReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.samples == 0 {
            return f.write_str("no samples");
        }
        let mut parts = Vec::new();
        if !self.missing.is_empty() {
            parts.push(format!("{} missing grid cells (first {})", self.missing.len(), self.missing[0]));
        }
        if !self.duplicates.is_empty() {
            parts.push(format!("{} duplicate coordinates (first {})", self.duplicates.len(), self.duplicates[0]));
        }
        if !self.non_positive.is_empty() {
            parts.push(format!("{} non-positive latencies (first {})", self.non_positive.len(), self.non_positive[0]));
        }
        if !self.out_of_domain.is_empty() {
            parts.push(format!("{} coordinates outside (0, 100] (first {})", self.out_of_domain.len(), self.out_of_domain[0]));
        }
        if let Some(v) = self.monotonicity.first() {
            parts.push(format!(
                "{} monotonicity violations (first along {}: {} ms at {} vs {} ms at {})",
                self.monotonicity.len(),
                v.axis,
                v.lower_latency,
                v.lower,
                v.upper_latency,
                v.upper
            ));
        }
        if parts.is_empty() {
            f.write_str("OK")
        } else {
            f.write_str(&parts.join("; "))
        }
    }
}

/// Check samples of a single function for grid completeness, positivity and
/// monotonicity. Latency must not increase with sm or quota and must not
/// decrease with batch.
pub fn validate_samples(samples: &[PerfSample]) -> TableReport {
    let mut report = TableReport { samples: samples.len(), ..TableReport::default() };
    let mut cells: BTreeMap<GridPoint, f64> = BTreeMap::new();
    let (mut bs, mut ss, mut qs) = (BTreeSet::new(), BTreeSet::new(), BTreeSet::new());
    for s in samples {
        let p = GridPoint { batch: s.batch, sm: s.sm_percent, quota: s.quota_percent };
        if s.batch == 0 || s.sm_percent == 0 || s.sm_percent > FULL || s.quota_percent == 0 || s.quota_percent > FULL {
            report.out_of_domain.push(p);
        }
        if !(s.latency_ms > 0.0) || !s.latency_ms.is_finite() {
            report.non_positive.push(p);
        }
        if cells.insert(p, s.latency_ms).is_some() {
            report.duplicates.push(p);
        }
        bs.insert(s.batch);
        ss.insert(s.sm_percent);
        qs.insert(s.quota_percent);
    }
    report.batches = bs.into_iter().collect();
    report.sms = ss.into_iter().collect();
    report.quotas = qs.into_iter().collect();

    for &batch in &report.batches {
        for &sm in &report.sms {
            for &quota in &report.quotas {
                let p = GridPoint { batch, sm, quota };
                if !cells.contains_key(&p) {
                    report.missing.push(p);
                }
            }
        }
    }

    let mut check = |axis: Axis, lower: GridPoint, upper: GridPoint| {
        if let (Some(&lo), Some(&hi)) = (cells.get(&lower), cells.get(&upper)) {
            let bad = match axis {
                Axis::Batch => hi < lo,
                Axis::Sm | Axis::Quota => hi > lo,
            };
            if bad {
                report.monotonicity.push(MonotonicityViolation {
                    axis,
                    lower,
                    upper,
                    lower_latency: lo,
                    upper_latency: hi,
                });
            }
        }
    };
    let (b_axis, s_axis, q_axis) = (report.batches.clone(), report.sms.clone(), report.quotas.clone());
    for &batch in &b_axis {
        for &sm in &s_axis {
            for &quota in &q_axis {
                let here = GridPoint { batch, sm, quota };
                if let Some(&next) = b_axis.iter().find(|&&b| b > batch) {
                    check(Axis::Batch, here, GridPoint { batch: next, ..here });
                }
                if let Some(&next) = s_axis.iter().find(|&&s| s > sm) {
                    check(Axis::Sm, here, GridPoint { sm: next, ..here });
                }
                if let Some(&next) = q_axis.iter().find(|&&q| q > quota) {
                    check(Axis::Quota, here, GridPoint { quota: next, ..here });
                }
            }
        }
    }
    report
}

/// Immutable latency grid for one function.
#[derive(Debug, Clone, PartialEq)]
pub struct PerfTable {
    function_id: FunctionId,
    batches: Vec<u32>,
    sms: Vec<u32>,
    quotas: Vec<u32>,
    /// Row-major over (batch, sm, quota).
    latency: Vec<f64>,
}

impl PerfTable {
    /// Build a table from samples, rejecting anything [`validate_samples`]
    /// complains about.
    pub fn from_samples(function_id: FunctionId, samples: &[PerfSample]) -> Result<Self, PerfError> {
        if samples.is_empty() {
            return Err(PerfError::EmptyTable);
        }
        let report = validate_samples(samples);
        if !report.is_clean() {
            return Err(PerfError::InvalidTable { function: function_id, report: Box::new(report) });
        }
        let (nb, ns, nq) = (report.batches.len(), report.sms.len(), report.quotas.len());
        let mut latency = vec![0.0; nb * ns * nq];
        for s in samples {
            let i = report.batches.binary_search(&s.batch).unwrap();
            let j = report.sms.binary_search(&s.sm_percent).unwrap();
            let k = report.quotas.binary_search(&s.quota_percent).unwrap();
            latency[(i * ns + j) * nq + k] = s.latency_ms;
        }
        Ok(PerfTable {
            function_id,
            batches: report.batches,
            sms: report.sms,
            quotas: report.quotas,
            latency,
        })
    }

    /// Build a table from a latency function evaluated on every grid point.
    pub fn from_fn(
        function_id: FunctionId,
        batches: &[u32],
        sms: &[u32],
        quotas: &[u32],
        mut latency: impl FnMut(u32, u32, u32) -> f64,
    ) -> Result<Self, PerfError> {
        let mut samples = Vec::with_capacity(batches.len() * sms.len() * quotas.len());
        for &batch in batches {
            for &sm in sms {
                for &quota in quotas {
                    samples.push(PerfSample {
                        function_id: function_id.clone(),
                        batch,
                        sm_percent: sm,
                        quota_percent: quota,
                        latency_ms: latency(batch, sm, quota),
                    });
                }
            }
        }
        PerfTable::from_samples(function_id, &samples)
    }

    pub fn function_id(&self) -> &FunctionId {
        &self.function_id
    }

    pub fn quota_axis(&self) -> &[u32] {
        &self.quotas
    }

    /// Latency at a grid node, if the coordinates are on the grid.
    pub fn node(&self, batch: u32, sm: u32, quota: u32) -> Option<f64> {
        let i = self.batches.binary_search(&batch).ok()?;
        let j = self.sms.binary_search(&sm).ok()?;
        let k = self.quotas.binary_search(&quota).ok()?;
        Some(self.at(i, j, k))
    }

    pub fn nodes(&self) -> impl Iterator<Item = (GridPoint, f64)> + '_ {
        self.batches.iter().enumerate().flat_map(move |(i, &batch)| {
            self.sms.iter().enumerate().flat_map(move |(j, &sm)| {
                self.quotas
                    .iter()
                    .enumerate()
                    .map(move |(k, &quota)| (GridPoint { batch, sm, quota }, self.at(i, j, k)))
            })
        })
    }

    pub fn samples(&self) -> Vec<PerfSample> {
        self.nodes()
            .map(|(p, latency_ms)| PerfSample {
                function_id: self.function_id.clone(),
                batch: p.batch,
                sm_percent: p.sm,
                quota_percent: p.quota,
                latency_ms,
            })
            .collect()
    }

    fn at(&self, i: usize, j: usize, k: usize) -> f64 {
        self.latency[(i * self.sms.len() + j) * self.quotas.len() + k]
    }
}

/// Segment index and fractional position of `x` along `axis`, which must
/// already be clamped into the axis range.
fn bracket(axis: &[u32], x: f64) -> (usize, f64) {
    if axis.len() == 1 {
        return (0, 0.0);
    }
    let upper = axis.partition_point(|&a| f64::from(a) < x).clamp(1, axis.len() - 1);
    let (lo, hi) = (f64::from(axis[upper - 1]), f64::from(axis[upper]));
    (upper - 1, (x - lo) / (hi - lo))
}

fn lerp(a: f64, b: f64, t: f64) -> f64 {
    // Exact at t = 0 and t = 1.
    a * (1.0 - t) + b * t
}

fn clamp_to(axis: &[u32], x: f64) -> f64 {
    x.clamp(f64::from(axis[0]), f64::from(axis[axis.len() - 1]))
}

fn check_domain(what: &'static str, value: f64) -> Result<(), PerfError> {
    if value > 0.0 && value <= f64::from(FULL) {
        Ok(())
    } else {
        Err(PerfError::OutOfDomain { what, value })
    }
}

impl PerfModel for PerfTable {
    fn predict_latency(&self, batch: f64, sm: f64, quota: f64) -> Result<f64, PerfError> {
        if self.latency.is_empty() {
            return Err(PerfError::EmptyTable);
        }
        check_domain("sm", sm)?;
        check_domain("quota", quota)?;
        let (bmin, bmax) = (self.batches[0], self.batches[self.batches.len() - 1]);
        if !(batch >= f64::from(bmin) && batch <= f64::from(bmax)) {
            return Err(PerfError::BatchOutOfRange { batch, min: bmin, max: bmax });
        }
        let (i, tb) = bracket(&self.batches, batch);
        let (j, ts) = bracket(&self.sms, clamp_to(&self.sms, sm));
        let (k, tq) = bracket(&self.quotas, clamp_to(&self.quotas, quota));
        let (i1, j1, k1) = (
            (i + 1).min(self.batches.len() - 1),
            (j + 1).min(self.sms.len() - 1),
            (k + 1).min(self.quotas.len() - 1),
        );
        let along_quota = |i, j| lerp(self.at(i, j, k), self.at(i, j, k1), tq);
        let along_sm = |i| lerp(along_quota(i, j), along_quota(i, j1), ts);
        Ok(lerp(along_sm(i), along_sm(i1), tb))
    }

    fn batch_axis(&self) -> &[u32] {
        &self.batches
    }

    fn sm_axis(&self) -> &[u32] {
        &self.sms
    }
}

/// A `(batch, sm, quota)` pod configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PodConfig {
    pub batch: u32,
    pub sm: u32,
    pub quota: u32,
}

/// Throughput of `model` at quota `quota_cap`. Used for the capability of
/// the largest configuration a placement can offer.
pub fn max_quota_capability<M: PerfModel + ?Sized>(model: &M, batch: u32, sm: u32, quota_cap: u32) -> Result<f64, PerfError> {
    check_domain("quota", f64::from(quota_cap))?;
    model.throughput(f64::from(batch), f64::from(sm), f64::from(quota_cap))
}

/// Cheapest configuration that still delivers `target_rps`.
///
/// Searches batch sizes (the model's batch axis, restricted to `batches` when
/// given), the model's SM axis, and quotas in multiples of `quota_step`.
/// Cost density is `sm * quota`; ties go to smaller sm, then smaller quota,
/// then smaller batch. When no configuration reaches the target the
/// highest-throughput configuration is returned instead.
pub fn most_efficient_config<M: PerfModel + ?Sized>(
    model: &M,
    target_rps: f64,
    quota_step: u32,
    batches: Option<&[u32]>,
) -> Result<PodConfig, PerfError> {
    if !(target_rps > 0.0) {
        return Err(PerfError::InvalidTarget(target_rps));
    }
    if quota_step == 0 || quota_step > FULL {
        return Err(PerfError::InvalidStep(quota_step));
    }
    let axis = model.batch_axis();
    if axis.is_empty() || model.sm_axis().is_empty() {
        return Err(PerfError::EmptyTable);
    }
    let (bmin, bmax) = (axis[0], axis[axis.len() - 1]);
    let batch_choices: Vec<u32> = match batches {
        Some(allowed) => {
            let mut v: Vec<u32> = allowed.iter().copied().filter(|b| (bmin..=bmax).contains(b)).collect();
            v.sort_unstable();
            v.dedup();
            if v.is_empty() {
                axis.to_vec()
            } else {
                v
            }
        }
        None => axis.to_vec(),
    };

    let key = |c: &PodConfig| (u64::from(c.sm) * u64::from(c.quota), c.sm, c.quota, c.batch);
    let mut cheapest: Option<PodConfig> = None;
    let mut fastest: Option<(f64, PodConfig)> = None;
    for &sm in model.sm_axis() {
        for quota in (1..=FULL / quota_step).map(|n| n * quota_step) {
            for &batch in &batch_choices {
                let cfg = PodConfig { batch, sm, quota };
                let rps = model.throughput(f64::from(batch), f64::from(sm), f64::from(quota))?;
                if rps >= target_rps && cheapest.as_ref().is_none_or(|best| key(&cfg) < key(best)) {
                    cheapest = Some(cfg);
                }
                let better = match &fastest {
                    None => true,
                    Some((best_rps, best)) => rps > *best_rps || (rps == *best_rps && key(&cfg) < key(best)),
                };
                if better {
                    fastest = Some((rps, cfg));
                }
            }
        }
    }
    cheapest.or(fastest.map(|(_, c)| c)).ok_or(PerfError::EmptyTable)
}

fn csv_error(path: &Path, err: csv::Error) -> PerfError {
    let line = err.position().map(|p| p.line()).unwrap_or(0);
    PerfError::Parse { path: path.display().to_string(), line, message: err.to_string() }
}

/// Read raw samples from a perf table CSV
/// (`function_id,batch,sm_percent,quota_percent,latency_ms`).
pub fn read_samples(path: &Path) -> Result<Vec<PerfSample>, PerfError> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path).map_err(|e| csv_error(path, e))?;
    let headers = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    let expected = ["function_id", "batch", "sm_percent", "quota_percent", "latency_ms"];
    if headers.iter().collect::<Vec<_>>() != expected {
        return Err(PerfError::Parse {
            path: path.display().to_string(),
            line: 1,
            message: format!("expected header `{}`", expected.join(",")),
        });
    }
    reader
        .deserialize()
        .map(|row| row.map_err(|e| csv_error(path, e)))
        .collect()
}

/// Group samples by function id.
pub fn group_samples(samples: Vec<PerfSample>) -> BTreeMap<FunctionId, Vec<PerfSample>> {
    let mut groups: BTreeMap<FunctionId, Vec<PerfSample>> = BTreeMap::new();
    for s in samples {
        groups.entry(s.function_id.clone()).or_default().push(s);
    }
    groups
}

/// Load every function's table from one CSV file.
pub fn load_tables(path: &Path) -> Result<BTreeMap<FunctionId, PerfTable>, PerfError> {
    let groups = group_samples(read_samples(path)?);
    if groups.is_empty() {
        return Err(PerfError::EmptyTable);
    }
    groups
        .into_iter()
        .map(|(f, samples)| PerfTable::from_samples(f.clone(), &samples).map(|t| (f, t)))
        .collect()
}

pub fn write_table(path: &Path, table: &PerfTable) -> Result<(), PerfError> {
    let mut writer = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for s in table.samples() {
        writer.serialize(s).map_err(|e| csv_error(path, e))?;
    }
    writer.flush()?;
    Ok(())
}
