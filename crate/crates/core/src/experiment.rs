//! Experiment configuration and the policy-comparison runner behind the CLI.
//!
//! A config is one TOML document with the sections `functions`, `cluster`,
//! `scaler`, `kalman`, `sim` and `scenarios`. Relative paths are resolved
//! against the config file's directory.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autoscaler::ScalerConfig;
use crate::model::{FunctionId, FunctionSpec};
use crate::perf::{load_tables, PerfError, PerfModel, PodConfig};
use crate::predictor::KalmanParams;
use crate::sim::metrics::fmt_f;
use crate::sim::{run, ClusterConfig, FunctionSetup, PolicyKind, RunMetrics, SimConfig, SimError, SimInputs};
use crate::trace::{load_trace_with, synth_trace, Expansion, SynthKind, TraceError, WorkloadTrace};

/// Multipliers reported in `summary.csv`.
pub const SUMMARY_MULTIPLIERS: [f64; 3] = [1.5, 2.0, 2.5];

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("config: {0}")]
    Config(String),
    #[error("perf table for `{function}` not found in {path}")]
    MissingPerfTable { function: FunctionId, path: PathBuf },
    #[error("perf table {path}: {source}")]
    Perf { path: PathBuf, source: PerfError },
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error("scenario `{scenario}` with policy {policy}: {source}")]
    Sim { scenario: String, policy: PolicyKind, source: SimError },
    #[error("writing {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl ExperimentError {
    /// True when a simulation found the cluster in an inconsistent state.
    pub fn is_invariant_violation(&self) -> bool {
        matches!(self, ExperimentError::Sim { source: SimError::Invariant { .. }, .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FunctionConfig {
    pub function_id: FunctionId,
    pub baseline_latency_ms: f64,
    #[serde(default = "one")]
    pub slo_multiplier: f64,
    /// Perf table CSV holding a table for this function.
    pub perf_table: PathBuf,
    #[serde(default = "one")]
    pub min_rps: f64,
    pub allowed_batches: Vec<u32>,
    /// Starting pod configuration.
    pub batch: u32,
    pub sm: u32,
    pub quota: u32,
    #[serde(default = "one_pod")]
    pub initial_pods: u32,
}

fn one() -> f64 {
    1.0
}

fn one_pod() -> u32 {
    1
}

/// Where a scenario's arrivals come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadConfig {
    /// Required for synthetic workloads.
    pub function_id: Option<FunctionId>,
    pub path: Option<PathBuf>,
    pub synth: Option<SynthKind>,
    /// Spread per-minute counts at random instead of evenly.
    #[serde(default)]
    pub poisson_expansion: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    #[serde(default = "all_policies")]
    pub policies: Vec<PolicyKind>,
    /// Simulated horizon; defaults to the last arrival.
    pub horizon_ms: Option<f64>,
    #[serde(default)]
    pub workloads: Vec<WorkloadConfig>,
}

fn all_policies() -> Vec<PolicyKind> {
    PolicyKind::ALL.to_vec()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub functions: Vec<FunctionConfig>,
    #[serde(default)]
    pub cluster: ClusterConfig,
    #[serde(default)]
    pub scaler: ScalerConfig,
    #[serde(default)]
    pub kalman: KalmanParams,
    #[serde(default)]
    pub sim: SimConfig,
    #[serde(default)]
    pub scenarios: Vec<ScenarioConfig>,
    /// Directory relative paths are resolved against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

/// Apply one `section.key=value` override to a parsed config document.
/// Array sections are addressed by element name: `functions.<function_id>.key`
/// or `scenarios.<name>.key`.
pub fn apply_override(doc: &mut toml::Table, assignment: &str) -> Result<(), ExperimentError> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| ExperimentError::Config(format!("override `{assignment}` is not key=value")))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.len() < 2 || keys.iter().any(|k| k.is_empty()) {
        return Err(ExperimentError::Config(format!("override key `{path}` must look like section.key")));
    }
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));

    let section = keys[0];
    let mut table: &mut toml::Table = match section {
        "functions" | "scenarios" => {
            if keys.len() < 3 {
                return Err(ExperimentError::Config(format!("override `{path}` must name a {section} element")));
            }
            let id_key = if section == "functions" { "function_id" } else { "name" };
            let items = doc
                .get_mut(section)
                .and_then(|v| v.as_array_mut())
                .ok_or_else(|| ExperimentError::Config(format!("config has no {section}")))?;
            let item = items
                .iter_mut()
                .filter_map(|v| v.as_table_mut())
                .find(|t| t.get(id_key).and_then(|v| v.as_str()) == Some(keys[1]))
                .ok_or_else(|| ExperimentError::Config(format!("no {section} element named `{}`", keys[1])))?;
            return set_nested(item, &keys[2..], value);
        }
        _ => doc
            .entry(section)
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| ExperimentError::Config(format!("`{section}` is not a section")))?,
    };
    for key in &keys[1..keys.len() - 1] {
        table = table
            .entry(*key)
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| ExperimentError::Config(format!("`{key}` in `{path}` is not a table")))?;
    }
    table.insert(keys[keys.len() - 1].to_string(), value);
    Ok(())
}

fn set_nested(table: &mut toml::Table, keys: &[&str], value: toml::Value) -> Result<(), ExperimentError> {
    let mut t = table;
    for key in &keys[..keys.len() - 1] {
        t = t
            .entry(*key)
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| ExperimentError::Config(format!("`{key}` is not a table")))?;
    }
    t.insert(keys[keys.len() - 1].to_string(), value);
    Ok(())
}

impl ExperimentConfig {
    /// Parse config text, apply overrides in order, and validate.
    pub fn parse(text: &str, base_dir: &Path, overrides: &[String]) -> Result<Self, ExperimentError> {
        let mut doc: toml::Table = toml::from_str(text).map_err(|e| ExperimentError::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let mut config: ExperimentConfig =
            toml::Value::Table(doc).try_into().map_err(|e: toml::de::Error| ExperimentError::Config(e.to_string()))?;
        config.base_dir = base_dir.to_path_buf();
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self, ExperimentError> {
        let text = fs::read_to_string(path)
            .map_err(|e| ExperimentError::Config(format!("reading {}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, &base, overrides)
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        let cfg_err = |e: String| ExperimentError::Config(e);
        self.scaler.validate().map_err(|e| cfg_err(e.to_string()))?;
        self.kalman.validate().map_err(|e| cfg_err(e.to_string()))?;
        self.sim.validate().map_err(|e| cfg_err(e.to_string()))?;
        let mut seen = BTreeMap::new();
        for f in &self.functions {
            self.spec(f).validate().map_err(|e| cfg_err(e.to_string()))?;
            if seen.insert(f.function_id.clone(), ()).is_some() {
                return Err(cfg_err(format!("function `{}` defined twice", f.function_id)));
            }
            for (what, v) in [("sm", f.sm), ("quota", f.quota)] {
                if v == 0 || v > 100 {
                    return Err(cfg_err(format!("{}: {what} must be in 1..=100, got {v}", f.function_id)));
                }
            }
            if f.batch == 0 {
                return Err(cfg_err(format!("{}: batch must be positive", f.function_id)));
            }
        }
        let mut names = BTreeMap::new();
        for s in &self.scenarios {
            if s.name.is_empty() || s.name.contains(['/', '\\']) {
                return Err(cfg_err(format!("invalid scenario name `{}`", s.name)));
            }
            if names.insert(s.name.clone(), ()).is_some() {
                return Err(cfg_err(format!("scenario `{}` defined twice", s.name)));
            }
            if s.policies.is_empty() {
                return Err(cfg_err(format!("scenario `{}` lists no policies", s.name)));
            }
            for w in &s.workloads {
                match (&w.path, &w.synth) {
                    (Some(_), None) => {}
                    (None, Some(_)) if w.function_id.is_some() && s.horizon_ms.is_some() => {}
                    (None, Some(_)) => {
                        return Err(cfg_err(format!(
                            "scenario `{}`: synthetic workloads need function_id and a scenario horizon_ms",
                            s.name
                        )))
                    }
                    _ => return Err(cfg_err(format!("scenario `{}`: each workload needs exactly one of path or synth", s.name))),
                }
                if let Some(fid) = &w.function_id {
                    if !seen.contains_key(fid) {
                        return Err(cfg_err(format!("scenario `{}` uses unknown function `{fid}`", s.name)));
                    }
                }
            }
        }
        Ok(())
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn spec(&self, f: &FunctionConfig) -> FunctionSpec {
        FunctionSpec {
            function_id: f.function_id.clone(),
            baseline_latency_ms: f.baseline_latency_ms,
            slo_multiplier: f.slo_multiplier,
            perf_table: f.perf_table.display().to_string(),
            min_rps: f.min_rps,
            allowed_batches: f.allowed_batches.clone(),
        }
    }

    /// Load every function's perf table.
    pub fn function_setups(&self) -> Result<Vec<FunctionSetup>, ExperimentError> {
        let mut cache: BTreeMap<PathBuf, BTreeMap<FunctionId, Arc<dyn PerfModel>>> = BTreeMap::new();
        let mut out = Vec::new();
        for f in &self.functions {
            let path = self.resolve(&f.perf_table);
            if !cache.contains_key(&path) {
                let tables = match load_tables(&path) {
                    Ok(t) => t,
                    Err(PerfError::Io(_)) => {
                        return Err(ExperimentError::MissingPerfTable { function: f.function_id.clone(), path })
                    }
                    Err(source) => return Err(ExperimentError::Perf { path, source }),
                };
                let models = tables.into_iter().map(|(k, t)| (k, Arc::new(t) as Arc<dyn PerfModel>)).collect();
                cache.insert(path.clone(), models);
            }
            let model = cache[&path]
                .get(&f.function_id)
                .cloned()
                .ok_or_else(|| ExperimentError::MissingPerfTable { function: f.function_id.clone(), path: path.clone() })?;
            out.push(FunctionSetup {
                spec: self.spec(f),
                model,
                initial: PodConfig { batch: f.batch, sm: f.sm, quota: f.quota },
                initial_pods: f.initial_pods,
            });
        }
        Ok(out)
    }

    /// Build a scenario's merged trace. Each synthetic workload gets its own
    /// seed derived from the run seed and its position.
    pub fn scenario_trace(&self, scenario: &ScenarioConfig) -> Result<WorkloadTrace, ExperimentError> {
        let seed = self.sim.seed;
        let mut parts = Vec::new();
        for (i, w) in scenario.workloads.iter().enumerate() {
            let sub_seed = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(i as u64 + 1);
            let trace = match (&w.path, &w.synth) {
                (Some(path), _) => {
                    let expansion = if w.poisson_expansion { Expansion::Poisson { seed: sub_seed } } else { Expansion::Uniform };
                    load_trace_with(&self.resolve(path), expansion)?
                }
                (None, Some(kind)) => {
                    let fid = w.function_id.as_ref().expect("validated");
                    synth_trace(kind, fid, scenario.horizon_ms.expect("validated"), sub_seed)?
                }
                (None, None) => unreachable!("validated"),
            };
            parts.push(trace);
        }
        let merged = WorkloadTrace::merge(parts);
        Ok(match scenario.horizon_ms {
            Some(h) => merged.with_horizon(h),
            None => merged,
        })
    }

    pub fn sim_inputs(&self, setups: &[FunctionSetup], trace: WorkloadTrace, policy: PolicyKind) -> SimInputs {
        SimInputs {
            trace,
            functions: setups.to_vec(),
            cluster: self.cluster,
            scaler: self.scaler,
            kalman: self.kalman,
            sim: self.sim,
            policy,
        }
    }
}

/// Result of one scenario under one policy.
#[derive(Debug, Clone)]
pub struct ScenarioRun {
    pub scenario: String,
    pub policy: PolicyKind,
    pub metrics: RunMetrics,
}

impl ScenarioRun {
    pub fn dir_name(&self) -> String {
        format!("{}__{}", self.scenario, self.policy)
    }
}

/// Run every scenario under each of its policies. Runs are independent and
/// execute in parallel; results come back in config order.
pub fn run_all(config: &ExperimentConfig) -> Result<Vec<ScenarioRun>, ExperimentError> {
    let setups = config.function_setups()?;
    let mut jobs = Vec::new();
    for scenario in &config.scenarios {
        let trace = config.scenario_trace(scenario)?;
        for &policy in &scenario.policies {
            jobs.push((scenario.name.clone(), policy, trace.clone()));
        }
    }
    jobs.into_par_iter()
        .map(|(scenario, policy, trace)| {
            info!("running {scenario} with {policy} ({} arrivals)", trace.len());
            let inputs = config.sim_inputs(&setups, trace, policy);
            run(&inputs)
                .map(|metrics| ScenarioRun { scenario: scenario.clone(), policy, metrics })
                .map_err(|source| ExperimentError::Sim { scenario, policy, source })
        })
        .collect()
}

/// One row of `summary.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub scenario: String,
    pub policy: PolicyKind,
    pub function_id: FunctionId,
    pub arrived: u64,
    pub total_cost: f64,
    pub violations: [f64; 3],
    pub cost_ratio: f64,
    pub violation_ratios: [f64; 3],
}

/// `x / hybrid`, with 0/0 read as parity.
pub fn ratio(x: f64, hybrid: f64) -> f64 {
    if hybrid == 0.0 {
        if x == 0.0 {
            1.0
        } else {
            f64::INFINITY
        }
    } else {
        x / hybrid
    }
}

/// Round-trip through the CSV formatting so summary ratios match what a
/// reader recomputes from the written files.
fn as_written(x: f64) -> f64 {
    fmt_f(x).parse().unwrap_or(f64::NAN)
}

/// Summary rows: per scenario, policy and function, cost and violation
/// rates at 1.5x, 2.0x and 2.5x, each also as a ratio to the hybrid policy
/// in the same scenario (NaN when the scenario has no hybrid run).
pub fn summarize(runs: &[ScenarioRun]) -> Vec<SummaryRow> {
    let mut rows = Vec::new();
    for run in runs {
        for f in &run.metrics.functions {
            let violations = SUMMARY_MULTIPLIERS.map(|m| as_written(f.violation_at(m).unwrap_or(f64::NAN)));
            rows.push(SummaryRow {
                scenario: run.scenario.clone(),
                policy: run.policy,
                function_id: f.function_id.clone(),
                arrived: f.arrived,
                total_cost: as_written(f.total_cost),
                violations,
                cost_ratio: f64::NAN,
                violation_ratios: [f64::NAN; 3],
            });
        }
    }
    let reference: BTreeMap<(String, FunctionId), (f64, [f64; 3])> = rows
        .iter()
        .filter(|r| r.policy == PolicyKind::Hybrid)
        .map(|r| ((r.scenario.clone(), r.function_id.clone()), (r.total_cost, r.violations)))
        .collect();
    for r in &mut rows {
        if let Some(&(cost, viol)) = reference.get(&(r.scenario.clone(), r.function_id.clone())) {
            r.cost_ratio = ratio(r.total_cost, cost);
            for i in 0..3 {
                r.violation_ratios[i] = ratio(r.violations[i], viol[i]);
            }
        }
    }
    rows
}

pub fn summary_csv(rows: &[SummaryRow]) -> String {
    let mut s = String::from(
        "scenario,policy,function_id,arrived,total_cost,violation_1.5x,violation_2.0x,violation_2.5x,\
         cost_ratio,violation_ratio_1.5x,violation_ratio_2.0x,violation_ratio_2.5x\n",
    );
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            r.scenario,
            r.policy,
            r.function_id,
            r.arrived,
            fmt_f(r.total_cost),
            fmt_f(r.violations[0]),
            fmt_f(r.violations[1]),
            fmt_f(r.violations[2]),
            fmt_f(r.cost_ratio),
            fmt_f(r.violation_ratios[0]),
            fmt_f(r.violation_ratios[1]),
            fmt_f(r.violation_ratios[2]),
        );
    }
    s
}

/// Write each run's CSVs under `out/<scenario>__<policy>/` and the summary
/// to `out/summary.csv`.
pub fn write_outputs(out: &Path, runs: &[ScenarioRun]) -> Result<Vec<SummaryRow>, ExperimentError> {
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| ExperimentError::Io { path, source }
    };
    fs::create_dir_all(out).map_err(io(out))?;
    for run in runs {
        let dir = out.join(run.dir_name());
        run.metrics.write_csvs(&dir).map_err(io(&dir))?;
    }
    let rows = summarize(runs);
    let path = out.join("summary.csv");
    fs::write(&path, summary_csv(&rows)).map_err(io(&path))?;
    Ok(rows)
}

/// Load, run and write everything for one config.
pub fn run_experiment(config: &ExperimentConfig, out: &Path) -> Result<Vec<SummaryRow>, ExperimentError> {
    let runs = run_all(config)?;
    write_outputs(out, &runs)
}
