use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand};
use has_sched::experiment::{run_experiment, ExperimentConfig, ExperimentError};
use has_sched::model::FunctionId;
use has_sched::perf::{group_samples, read_samples, validate_samples, PerfModel, PerfTable};
use log::error;

#[derive(Debug, Parser)]
#[command(name = "has-sched", version, about = "Hybrid GPU autoscaling simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run every scenario of an experiment config and write metric CSVs.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "results")]
        out: PathBuf,
        /// Override a config value, e.g. `--set scaler.alpha=0.8`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Seed for synthetic workloads; replaces `sim.seed`.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Check a perf table for completeness and monotonicity.
    ValidateTable { path: PathBuf },
    /// Print interpolated latency and throughput at one point.
    Predict {
        table: PathBuf,
        /// Needed when the file holds more than one function.
        #[arg(long)]
        function: Option<String>,
        #[arg(long)]
        batch: f64,
        #[arg(long)]
        sm: f64,
        #[arg(long)]
        quota: f64,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("HAS_SCHED_LOG", "warn")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::Run { config, out, overrides, seed } => cmd_run(&config, &out, overrides, seed),
        Command::ValidateTable { path } => cmd_validate_table(&path),
        Command::Predict { table, function, batch, sm, quota } => match cmd_predict(&table, function, batch, sm, quota) {
            Ok(()) => ExitCode::SUCCESS,
            Err(e) => {
                eprintln!("error: {e:#}");
                ExitCode::from(1)
            }
        },
    }
}

fn cmd_run(config: &Path, out: &Path, mut overrides: Vec<String>, seed: Option<u64>) -> ExitCode {
    if let Some(seed) = seed {
        overrides.push(format!("sim.seed={seed}"));
    }
    let result = ExperimentConfig::load(config, &overrides).and_then(|cfg| run_experiment(&cfg, out));
    match result {
        Ok(rows) => {
            println!("wrote {} summary rows to {}", rows.len(), out.join("summary.csv").display());
            for r in &rows {
                println!(
                    "{:<16} {:<16} {:<12} requests={:<7} cost={:.4} viol@1.5x={:.4} viol@2.0x={:.4} viol@2.5x={:.4}",
                    r.scenario, r.policy.to_string(), r.function_id.to_string(), r.arrived, r.total_cost, r.violations[0], r.violations[1], r.violations[2]
                );
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            error!("{e}");
            eprintln!("error: {e}");
            match e {
                ExperimentError::Config(_) | ExperimentError::MissingPerfTable { .. } | ExperimentError::Perf { .. } => {
                    ExitCode::from(2)
                }
                e if e.is_invariant_violation() => ExitCode::from(3),
                _ => ExitCode::from(1),
            }
        }
    }
}

fn cmd_validate_table(path: &Path) -> ExitCode {
    let samples = match read_samples(path) {
        Ok(s) => s,
        Err(e) => {
            println!("{e}");
            return ExitCode::from(1);
        }
    };
    let groups = group_samples(samples);
    if groups.is_empty() {
        println!("{}: no samples", path.display());
        return ExitCode::from(1);
    }
    let mut clean = true;
    for (function, samples) in &groups {
        let report = validate_samples(samples);
        println!(
            "{function}: {} samples, batch {:?}, sm {:?}, quota {:?}",
            report.samples, report.batches, report.sms, report.quotas
        );
        for p in &report.missing {
            println!("  missing cell {p}");
        }
        for p in &report.duplicates {
            println!("  duplicate cell {p}");
        }
        for p in &report.non_positive {
            println!("  non-positive latency at {p}");
        }
        for p in &report.out_of_domain {
            println!("  coordinate out of domain at {p}");
        }
        for v in &report.monotonicity {
            println!(
                "  monotonicity violation along {}: {} ms at {} vs {} ms at {}",
                v.axis, v.lower_latency, v.lower, v.upper_latency, v.upper
            );
        }
        clean &= report.is_clean();
    }
    if clean {
        println!("OK");
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    }
}

fn cmd_predict(path: &Path, function: Option<String>, batch: f64, sm: f64, quota: f64) -> Result<()> {
    let mut groups = group_samples(read_samples(path).with_context(|| format!("reading {}", path.display()))?);
    let samples = match function {
        Some(f) => groups.remove(&FunctionId::new(f.as_str())).ok_or_else(|| anyhow!("no table for `{f}`"))?,
        None if groups.len() == 1 => groups.into_values().next().expect("one group"),
        None if groups.is_empty() => bail!("{} holds no samples", path.display()),
        None => bail!("{} holds several functions; pass --function", path.display()),
    };
    let function_id = samples[0].function_id.clone();
    let table = PerfTable::from_samples(function_id.clone(), &samples)?;
    let latency = table.predict_latency(batch, sm, quota)?;
    let throughput = table.throughput(batch, sm, quota)?;
    println!("function={function_id} batch={batch} sm={sm} quota={quota}");
    println!("latency_ms={latency:.6}");
    println!("throughput_rps={throughput:.6}");
    Ok(())
}
