//! The sweep subcommand: a policy x QPS x seed grid of simulations with
//! per-cell artifacts, one comparison CSV, and a per-cell-group summary.

use std::fs;
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;

use clap::Args;
use lmsim::config::ExperimentConfig;
use lmsim::error::{Error, SimError};
use lmsim::router::RouterPolicy;
use serde::Serialize;

use crate::common::{
    parse_router_policy, resolve, router_policy_name, run_to_dir, write_manifest, FileArg,
    OverrideArgs,
};

#[derive(Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub file: FileArg,
    #[command(flatten)]
    pub over: OverrideArgs,
    /// QPS values to sweep (comma separated); config QPS when omitted
    #[arg(long = "qps-grid", value_delimiter = ',')]
    pub qps_grid: Vec<f64>,
    /// Router policies to compare; config policy when omitted
    #[arg(long, value_delimiter = ',', value_parser = parse_router_policy)]
    pub policies: Vec<RouterPolicy>,
    /// Seeds per cell; config seed when omitted
    #[arg(long, value_delimiter = ',')]
    pub seeds: Vec<u64>,
    /// Parallel cell runs
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    #[arg(long, default_value = "sweep")]
    pub out_dir: PathBuf,
    /// Also write per-cell event logs
    #[arg(long)]
    pub event_log: bool,
}

#[derive(Debug, Clone, Serialize)]
struct SweepRow {
    policy: &'static str,
    qps: f64,
    seed: u64,
    total: usize,
    completed: usize,
    aborted: usize,
    mean_ttft: Option<f64>,
    p99_ttft: Option<f64>,
    mean_normalized: Option<f64>,
    p99_normalized: Option<f64>,
    slo_attainment: Option<f64>,
    slo_attainment_with_aborts: Option<f64>,
    preemptions: u64,
    instance_seconds: f64,
    mean_instances: Option<f64>,
}

#[derive(Debug, Clone, Copy)]
struct Cell {
    policy: RouterPolicy,
    qps: f64,
    seed: u64,
}

impl Cell {
    fn dir_name(&self) -> String {
        format!("{}-q{}-s{}", router_policy_name(self.policy), self.qps, self.seed)
    }
}

fn run_cell(
    base: &ExperimentConfig,
    cell: &Cell,
    out_dir: &std::path::Path,
    event_log: bool,
) -> Result<SweepRow, (String, bool)> {
    let mut cfg = base.clone();
    cfg.router.policy = cell.policy;
    cfg.workload.qps = cell.qps;
    cfg.workload.seed = cell.seed;
    cfg.sim.seed = cell.seed;

    let dir = out_dir.join("cells").join(cell.dir_name());
    let (report, _) = run_to_dir(&cfg, &dir, event_log)
        .map_err(|e| (format!("cell {}: {e}", cell.dir_name()), e.is_config()))?;

    Ok(SweepRow {
        policy: router_policy_name(cell.policy),
        qps: cell.qps,
        seed: cell.seed,
        total: report.requests.total,
        completed: report.requests.completed,
        aborted: report.requests.aborted,
        mean_ttft: report.ttft.map(|d| d.mean),
        p99_ttft: report.ttft.map(|d| d.p99),
        mean_normalized: report.normalized_latency.map(|d| d.mean),
        p99_normalized: report.normalized_latency.map(|d| d.p99),
        slo_attainment: report.slo.attainment,
        slo_attainment_with_aborts: report.slo.attainment_with_aborts,
        preemptions: report.requests.preemptions,
        instance_seconds: report.resource.instance_seconds,
        mean_instances: report.resource.mean_instances,
    })
}

#[derive(Debug, Serialize)]
struct SummaryRow {
    policy: &'static str,
    qps: f64,
    seeds: usize,
    mean_ttft_mean: Option<f64>,
    mean_ttft_std: Option<f64>,
    p99_normalized_mean: Option<f64>,
    p99_normalized_std: Option<f64>,
    slo_attainment_mean: Option<f64>,
    slo_attainment_std: Option<f64>,
    instance_seconds_mean: f64,
    instance_seconds_std: f64,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn opt_mean_std(values: &[Option<f64>]) -> (Option<f64>, Option<f64>) {
    let present: Vec<f64> = values.iter().filter_map(|v| *v).collect();
    if present.is_empty() {
        return (None, None);
    }
    let (m, s) = mean_std(&present);
    (Some(m), Some(s))
}

pub fn cmd_sweep(args: &SweepArgs) -> Result<(), Error> {
    let base = resolve(&args.file, &args.over)?;
    let qps_grid = if args.qps_grid.is_empty() {
        vec![base.workload.qps]
    } else {
        args.qps_grid.clone()
    };
    let policies = if args.policies.is_empty() {
        vec![base.router.policy]
    } else {
        args.policies.clone()
    };
    let seeds = if args.seeds.is_empty() {
        vec![base.workload.seed]
    } else {
        args.seeds.clone()
    };

    let mut cells = Vec::new();
    for &policy in &policies {
        for &qps in &qps_grid {
            for &seed in &seeds {
                cells.push(Cell { policy, qps, seed });
            }
        }
    }
    fs::create_dir_all(&args.out_dir)?;

    let jobs = args.jobs.max(1).min(cells.len().max(1));
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<(usize, Result<SweepRow, (String, bool)>)>> =
        Mutex::new(Vec::with_capacity(cells.len()));
    thread::scope(|s| {
        for _ in 0..jobs {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= cells.len() {
                    break;
                }
                let out = run_cell(&base, &cells[i], &args.out_dir, args.event_log);
                results.lock().unwrap().push((i, out));
            });
        }
    });

    let mut slots: Vec<Option<Result<SweepRow, (String, bool)>>> =
        cells.iter().map(|_| None).collect();
    for (i, r) in results.into_inner().unwrap() {
        slots[i] = Some(r);
    }

    let mut rows: Vec<SweepRow> = Vec::new();
    let mut failures: Vec<String> = Vec::new();
    for slot in slots {
        match slot.expect("every cell ran") {
            Ok(row) => rows.push(row),
            Err((msg, _)) => failures.push(msg),
        }
    }

    let mut wtr = csv::Writer::from_path(args.out_dir.join("sweep.csv"))
        .map_err(|e| Error::Io(std::io::Error::other(e)))?;
    for row in &rows {
        wtr.serialize(row).map_err(|e| Error::Io(std::io::Error::other(e)))?;
    }
    wtr.flush()?;

    let mut summary: Vec<SummaryRow> = Vec::new();
    for &policy in &policies {
        for &qps in &qps_grid {
            let name = router_policy_name(policy);
            let group: Vec<&SweepRow> = rows
                .iter()
                .filter(|r| r.policy == name && r.qps == qps)
                .collect();
            if group.is_empty() {
                continue;
            }
            let (ttft_m, ttft_s) =
                opt_mean_std(&group.iter().map(|r| r.mean_ttft).collect::<Vec<_>>());
            let (p99_m, p99_s) =
                opt_mean_std(&group.iter().map(|r| r.p99_normalized).collect::<Vec<_>>());
            let (slo_m, slo_s) =
                opt_mean_std(&group.iter().map(|r| r.slo_attainment).collect::<Vec<_>>());
            let (is_m, is_s) =
                mean_std(&group.iter().map(|r| r.instance_seconds).collect::<Vec<_>>());
            summary.push(SummaryRow {
                policy: name,
                qps,
                seeds: group.len(),
                mean_ttft_mean: ttft_m,
                mean_ttft_std: ttft_s,
                p99_normalized_mean: p99_m,
                p99_normalized_std: p99_s,
                slo_attainment_mean: slo_m,
                slo_attainment_std: slo_s,
                instance_seconds_mean: is_m,
                instance_seconds_std: is_s,
            });
        }
    }
    let mut wtr = csv::Writer::from_path(args.out_dir.join("sweep_summary.csv"))
        .map_err(|e| Error::Io(std::io::Error::other(e)))?;
    for row in &summary {
        wtr.serialize(row).map_err(|e| Error::Io(std::io::Error::other(e)))?;
    }
    wtr.flush()?;

    write_manifest(&args.out_dir, "sweep", &["sweep.csv", "sweep_summary.csv", "cells"])?;

    println!(
        "{} of {} cells finished; results in {}",
        rows.len(),
        cells.len(),
        args.out_dir.display()
    );
    if !failures.is_empty() {
        for f in &failures {
            eprintln!("{f}");
        }
        return Err(SimError::State(format!(
            "{} of {} sweep cells failed; finished cells are preserved",
            failures.len(),
            cells.len()
        ))
        .into());
    }
    Ok(())
}
