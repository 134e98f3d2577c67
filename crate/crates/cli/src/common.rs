//! Config resolution, workload construction, and the simulate,
//! profile-capacity, and report subcommands.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::Args;
use lmsim::config::{ExperimentConfig, LengthModelKind, PredictorKind};
use lmsim::error::{ConfigError, Error};
use lmsim::forecast::{profile_capacity, ForecastModel};
use lmsim::metrics::{write_report_files, MetricsReport};
use lmsim::router::RouterPolicy;
use lmsim::scaler::ScalerPolicy;
use lmsim::simcore::SimOutcome;
use lmsim::trace::{generate_poisson, load_trace, LengthSource, TraceRecord};

pub fn parse_router_policy(s: &str) -> Result<RouterPolicy, String> {
    match s {
        "predictive" => Ok(RouterPolicy::Predictive),
        "round_robin" => Ok(RouterPolicy::RoundRobin),
        "least_request" => Ok(RouterPolicy::LeastRequest),
        "min_use" => Ok(RouterPolicy::MinUse),
        _ => Err(format!(
            "unknown router policy {s:?}; expected predictive, round_robin, least_request, or min_use"
        )),
    }
}

pub fn router_policy_name(p: RouterPolicy) -> &'static str {
    match p {
        RouterPolicy::Predictive => "predictive",
        RouterPolicy::RoundRobin => "round_robin",
        RouterPolicy::LeastRequest => "least_request",
        RouterPolicy::MinUse => "min_use",
    }
}

pub fn parse_scaler_policy(s: &str) -> Result<ScalerPolicy, String> {
    match s {
        "predictive" => Ok(ScalerPolicy::Predictive),
        "reactive" => Ok(ScalerPolicy::Reactive),
        "proactive" => Ok(ScalerPolicy::Proactive),
        "hybrid" => Ok(ScalerPolicy::Hybrid),
        "none" => Ok(ScalerPolicy::None),
        _ => Err(format!(
            "unknown scaler policy {s:?}; expected predictive, reactive, proactive, hybrid, or none"
        )),
    }
}

pub fn parse_predictor(s: &str) -> Result<PredictorKind, String> {
    match s {
        "oracle" => Ok(PredictorKind::Oracle),
        "noisy" => Ok(PredictorKind::Noisy),
        "heuristic" => Ok(PredictorKind::Heuristic),
        _ => Err(format!(
            "unknown predictor {s:?}; expected oracle, noisy, or heuristic"
        )),
    }
}

/// The configuration file flag, shared by every subcommand.
#[derive(Args, Clone, Default)]
pub struct FileArg {
    /// Experiment configuration file (TOML); built-in defaults when omitted
    #[arg(long)]
    pub config: Option<PathBuf>,
}

impl FileArg {
    /// Parses the file without validating; callers validate after
    /// applying their flag overrides.
    pub fn load(&self) -> Result<ExperimentConfig, Error> {
        match &self.config {
            None => Ok(ExperimentConfig::default()),
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|e| {
                    ConfigError::Invalid(format!("cannot read {}: {e}", path.display()))
                })?;
                let cfg: ExperimentConfig =
                    toml::from_str(&text).map_err(|e| ConfigError::Parse(e.to_string()))?;
                Ok(cfg)
            }
        }
    }
}

/// Flag overrides applied on top of the config file.
#[derive(Args, Clone, Default)]
pub struct OverrideArgs {
    /// Mean arrival rate for the generated Poisson workload
    #[arg(long)]
    pub qps: Option<f64>,
    /// Generated workload length in seconds
    #[arg(long)]
    pub duration: Option<f64>,
    /// Master seed: arrivals, predictor noise, and validation runs
    #[arg(long)]
    pub seed: Option<u64>,
    /// Replay this trace file instead of generating arrivals
    #[arg(long)]
    pub trace: Option<PathBuf>,
    #[arg(long, value_parser = parse_router_policy)]
    pub router_policy: Option<RouterPolicy>,
    #[arg(long, value_parser = parse_scaler_policy)]
    pub scaler_policy: Option<ScalerPolicy>,
    #[arg(long, value_parser = parse_predictor)]
    pub predictor: Option<PredictorKind>,
    /// Pin the fleet to exactly this many instances (scaler must be off)
    #[arg(long)]
    pub fixed_instances: Option<u32>,
    #[arg(long)]
    pub initial_instances: Option<u32>,
    #[arg(long)]
    pub max_instances: Option<u32>,
    /// Forecaster checkpoint driving window-level scaling
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Forecast window length in seconds
    #[arg(long)]
    pub window: Option<f64>,
    /// SLO threshold in seconds per output token
    #[arg(long)]
    pub slo: Option<f64>,
}

impl OverrideArgs {
    pub fn apply(&self, cfg: &mut ExperimentConfig) {
        if let Some(v) = self.qps {
            cfg.workload.qps = v;
        }
        if let Some(v) = self.duration {
            cfg.workload.duration_s = v;
        }
        if let Some(v) = self.seed {
            cfg.workload.seed = v;
            cfg.sim.seed = v;
        }
        if let Some(v) = &self.trace {
            cfg.workload.trace = Some(v.clone());
        }
        if let Some(v) = self.router_policy {
            cfg.router.policy = v;
        }
        if let Some(v) = self.scaler_policy {
            cfg.scaler.policy = v;
        }
        if let Some(v) = self.predictor {
            cfg.predictor.kind = v;
        }
        if let Some(v) = self.fixed_instances {
            cfg.cluster.fixed_instances = Some(v);
        }
        if let Some(v) = self.initial_instances {
            cfg.cluster.initial_instances = v;
        }
        if let Some(v) = self.max_instances {
            cfg.cluster.max_instances = v;
        }
        if let Some(v) = &self.checkpoint {
            cfg.forecast.checkpoint = Some(v.clone());
        }
        if let Some(v) = self.window {
            cfg.forecast.window_s = v;
        }
        if let Some(v) = self.slo {
            cfg.metrics.slo_s_per_token = v;
        }
    }
}

pub fn resolve(file: &FileArg, over: &OverrideArgs) -> Result<ExperimentConfig, Error> {
    let mut cfg = file.load()?;
    over.apply(&mut cfg);
    cfg.validate()?;
    Ok(cfg)
}

pub fn length_source(cfg: &ExperimentConfig) -> Result<LengthSource, Error> {
    match cfg.workload.lengths.kind {
        LengthModelKind::LogNormal => Ok(LengthSource::LogNormal(cfg.workload.lengths.log_normal)),
        LengthModelKind::Empirical => {
            let path = cfg
                .workload
                .lengths
                .source_trace
                .as_ref()
                .or(cfg.workload.trace.as_ref())
                .ok_or_else(|| {
                    ConfigError::Invalid("empirical lengths need a source trace".into())
                })?;
            let records = load_trace(path)?;
            if records.is_empty() {
                return Err(ConfigError::Invalid(format!(
                    "length source trace {} is empty",
                    path.display()
                ))
                .into());
            }
            Ok(LengthSource::Empirical(
                records
                    .iter()
                    .map(|r| (r.prompt_tokens, r.response_tokens))
                    .collect(),
            ))
        }
    }
}

/// The workload: a replayed trace file, or Poisson arrivals generated
/// from the config.
pub fn build_records(cfg: &ExperimentConfig) -> Result<Vec<TraceRecord>, Error> {
    match &cfg.workload.trace {
        Some(path) => Ok(load_trace(path)?),
        None => {
            let lengths = length_source(cfg)?;
            Ok(generate_poisson(
                cfg.workload.qps,
                cfg.workload.duration_s,
                &lengths,
                cfg.workload.seed,
            )?)
        }
    }
}

pub fn load_model(cfg: &ExperimentConfig) -> Result<Option<ForecastModel>, Error> {
    match &cfg.forecast.checkpoint {
        Some(path) => Ok(Some(ForecastModel::load(path)?)),
        None => Ok(None),
    }
}

pub fn write_manifest(dir: &Path, command: &str, artifacts: &[&str]) -> Result<(), Error> {
    let mut names: Vec<&str> = artifacts.to_vec();
    names.sort_unstable();
    let manifest = serde_json::json!({
        "command": command,
        "artifacts": names,
    });
    let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    text.push('\n');
    fs::write(dir.join("manifest.json"), text)?;
    Ok(())
}

/// Runs one simulation and writes the full artifact set under `dir`.
pub fn run_to_dir(
    cfg: &ExperimentConfig,
    dir: &Path,
    event_log: bool,
) -> Result<(MetricsReport, SimOutcome), Error> {
    let records = build_records(cfg)?;
    let model = load_model(cfg)?;
    fs::create_dir_all(dir)?;

    let outcome = if event_log {
        let file = fs::File::create(dir.join("events.jsonl"))?;
        let mut writer = BufWriter::new(file);
        let outcome = lmsim::run(cfg, &records, model, Some(&mut writer))?;
        writer.flush()?;
        outcome
    } else {
        lmsim::run(cfg, &records, model, None)?
    };

    let report = write_report_files(&outcome, cfg, dir)?;
    let resolved = toml::to_string_pretty(cfg).expect("config serializes");
    fs::write(dir.join("config.toml"), resolved)?;

    let mut artifacts = vec![
        "config.toml",
        "instance_timeline.csv",
        "overhead.json",
        "report.json",
        "requests.csv",
        "timeline.csv",
    ];
    if event_log {
        artifacts.push("events.jsonl");
    }
    write_manifest(dir, "simulate", &artifacts)?;
    Ok((report, outcome))
}

#[derive(Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub file: FileArg,
    #[command(flatten)]
    pub over: OverrideArgs,
    /// Directory for report files
    #[arg(long, default_value = "run")]
    pub out_dir: PathBuf,
    /// Also write a JSON-lines event log
    #[arg(long)]
    pub event_log: bool,
}

pub fn cmd_simulate(args: &SimulateArgs) -> Result<(), Error> {
    let cfg = resolve(&args.file, &args.over)?;
    let (report, _) = run_to_dir(&cfg, &args.out_dir, args.event_log)?;
    print_report_summary(&report);
    println!("report written to {}", args.out_dir.display());
    Ok(())
}

#[derive(Args)]
pub struct ProfileArgs {
    #[command(flatten)]
    pub file: FileArg,
    #[command(flatten)]
    pub over: OverrideArgs,
    /// Output path for the capacity profile
    #[arg(long, default_value = "capacity.json")]
    pub out: PathBuf,
}

/// Simulates the configured calibration workload and keeps the largest
/// violation-free per-window token totals any instance handled.
pub fn cmd_profile(args: &ProfileArgs) -> Result<(), Error> {
    let cfg = resolve(&args.file, &args.over)?;
    let records = build_records(&cfg)?;
    let model = load_model(&cfg)?;
    let outcome = lmsim::run(&cfg, &records, model, None)?;

    let profile = profile_capacity(&outcome.instance_windows)?;
    let clean = outcome
        .instance_windows
        .iter()
        .filter(|w| !w.latency_violation)
        .count();
    let payload = serde_json::json!({
        "profile": profile,
        "windows_total": outcome.instance_windows.len(),
        "windows_violation_free": clean,
    });
    let mut text = serde_json::to_string_pretty(&payload).expect("profile serializes");
    text.push('\n');
    fs::write(&args.out, text)?;
    println!(
        "capacity per window: prefill {:.0}, decode {:.0}, total {:.0} tokens ({clean} clean windows)",
        profile.prefill_tokens, profile.decode_tokens, profile.total_tokens
    );
    println!("profile written to {}", args.out.display());
    Ok(())
}

#[derive(Args)]
pub struct ReportArgs {
    /// Run directory containing report.json, or a sweep directory
    pub run_dir: PathBuf,
}

pub fn cmd_report(args: &ReportArgs) -> Result<(), Error> {
    let report_path = args.run_dir.join("report.json");
    if report_path.exists() {
        let text = fs::read_to_string(&report_path)?;
        let v: serde_json::Value = serde_json::from_str(&text)
            .map_err(|e| ConfigError::Invalid(format!("bad report.json: {e}")))?;
        print_report_json(&v);
        let overhead_path = args.run_dir.join("overhead.json");
        if let Ok(text) = fs::read_to_string(&overhead_path) {
            if let Ok(o) = serde_json::from_str::<serde_json::Value>(&text) {
                if let Some(r) = o["overhead_ratio"].as_f64() {
                    println!("management overhead: {:.3}% of mean E2E", r * 100.0);
                }
            }
        }
        return Ok(());
    }
    let sweep_path = args.run_dir.join("sweep.csv");
    if sweep_path.exists() {
        print!("{}", fs::read_to_string(&sweep_path)?);
        return Ok(());
    }
    Err(ConfigError::Invalid(format!(
        "{} holds neither report.json nor sweep.csv",
        args.run_dir.display()
    ))
    .into())
}

pub fn print_report_summary(report: &MetricsReport) {
    let c = &report.requests;
    println!(
        "requests: {} total, {} completed, {} aborted",
        c.total, c.completed, c.aborted
    );
    if let Some(t) = &report.ttft {
        println!("ttft: mean {:.3}s p50 {:.3}s p99 {:.3}s", t.mean, t.p50, t.p99);
    }
    if let Some(n) = &report.normalized_latency {
        println!(
            "normalized latency: mean {:.4} p50 {:.4} p99 {:.4} s/token",
            n.mean, n.p50, n.p99
        );
    }
    match report.slo.attainment {
        Some(a) => println!(
            "slo attainment: {:.2}% (with aborts {:.2}%)",
            a * 100.0,
            report.slo.attainment_with_aborts.unwrap_or(0.0) * 100.0
        ),
        None => println!("slo attainment: no completed requests"),
    }
    println!(
        "resource: {:.0} instance-seconds over {:.0}s{}",
        report.resource.instance_seconds,
        report.resource.end_time,
        report
            .resource
            .mean_instances
            .map(|m| format!(" (mean {m:.2} instances)"))
            .unwrap_or_default()
    );
}

fn print_report_json(v: &serde_json::Value) {
    let g = |path: &[&str]| -> Option<f64> {
        let mut cur = v;
        for p in path {
            cur = &cur[*p];
        }
        cur.as_f64()
    };
    println!(
        "requests: {} total, {} completed, {} aborted",
        v["requests"]["total"],
        v["requests"]["completed"],
        v["requests"]["aborted"]
    );
    if let (Some(mean), Some(p99)) = (g(&["ttft", "mean"]), g(&["ttft", "p99"])) {
        println!("ttft: mean {mean:.3}s p99 {p99:.3}s");
    }
    if let (Some(mean), Some(p99)) = (
        g(&["normalized_latency", "mean"]),
        g(&["normalized_latency", "p99"]),
    ) {
        println!("normalized latency: mean {mean:.4} p99 {p99:.4} s/token");
    }
    if let Some(a) = g(&["slo", "attainment"]) {
        println!("slo attainment: {:.2}%", a * 100.0);
    }
    if let (Some(s), Some(t)) = (g(&["resource", "instance_seconds"]), g(&["resource", "end_time"])) {
        println!("resource: {s:.0} instance-seconds over {t:.0}s");
    }
    if let Some(ape) = g(&["forecast", "prefill", "mean_ape"]) {
        println!("forecast mean APE (prefill): {:.2}%", ape * 100.0);
    }
}
