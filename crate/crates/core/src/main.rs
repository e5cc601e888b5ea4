//! Command-line front end: calibrate a model profile, generate workload
//! traces, run single simulations, execute experiment plans, search for
//! goodput, and rebuild summaries from stored record files.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write as _};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use tcmsim::calibrate::{calibrate, load_artifacts, save_artifacts, CalibrationArtifacts};
use tcmsim::experiment::{builtin_plan, run_experiment, ExperimentPlan, BUILTIN_PLANS};
use tcmsim::metrics::{summarize, GoodputError, RequestRecord, Summary};
use tcmsim::workload::{generate, Trace, WorkloadSpec};
use tcmsim::{
    goodput, parse_mix, run, run_cell, ModelProfile, PolicyName, SimConfig, VehicleClass,
};

/// Environment variable naming the default output directory.
const OUT_DIR_ENV: &str = "TCMSIM_OUT_DIR";

#[derive(Parser)]
#[command(
    name = "tcmsim",
    version,
    about = "Simulator for modality-aware LLM serving schedulers"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Profile a model and fit the estimator and classifier artifacts.
    Calibrate {
        #[command(flatten)]
        overrides: ConfigArgs,
        /// Profiling requests per modality.
        #[arg(long, default_value_t = 300)]
        samples: usize,
        /// Artifact file to create or extend, one entry per profile name.
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
    /// Generate a workload trace with isolated-latency annotations.
    Generate {
        #[command(flatten)]
        overrides: ConfigArgs,
        /// Trace file to write, JSON lines.
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
    /// Simulate one trace under one policy and summarize the outcome.
    Simulate {
        #[command(flatten)]
        overrides: ConfigArgs,
        /// Trace file to replay instead of generating one from the config.
        #[arg(long, value_name = "FILE")]
        trace: Option<PathBuf>,
        /// Calibration artifacts to reuse instead of calibrating on the fly.
        #[arg(long, value_name = "FILE")]
        artifacts: Option<PathBuf>,
        /// Record file to write, JSON lines.
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
    /// Run every cell of an experiment plan and write records, summary
    /// CSV, and manifest.
    Experiment {
        /// Built-in plan name or path to a plan file.
        #[arg(value_name = "PLAN", required_unless_present = "list")]
        plan: Option<String>,
        /// List the built-in plans and exit.
        #[arg(long)]
        list: bool,
        #[command(flatten)]
        overrides: ConfigArgs,
        /// Root directory for plan output.
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
        /// Worker threads for parallel cells.
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Binary-search the highest request rate that sustains SLO attainment.
    Goodput {
        #[command(flatten)]
        overrides: ConfigArgs,
        /// Restrict attainment to one class.
        #[arg(long, value_parser = parse_class)]
        class: Option<VehicleClass>,
        /// Attainment level the searched rate must sustain.
        #[arg(long, default_value_t = 0.9)]
        threshold: f64,
        /// Lower search bound, requests per second.
        #[arg(long, default_value_t = 0.25)]
        lo: f64,
        /// Upper search bound, requests per second.
        #[arg(long, default_value_t = 6.0)]
        hi: f64,
        /// Calibration artifacts to reuse instead of calibrating on the fly.
        #[arg(long, value_name = "FILE")]
        artifacts: Option<PathBuf>,
    },
    /// Recompute summary statistics from stored record files.
    Report {
        /// Record files or directories holding `*.records.jsonl`.
        #[arg(value_name = "PATH", required = true)]
        paths: Vec<PathBuf>,
        /// CSV file to write instead of printing to stdout.
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
}

/// Config file plus the flag overrides shared by every verb.
#[derive(Args)]
struct ConfigArgs {
    /// Simulation config file, JSON with the same keys as the defaults.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Model profile file, JSON.
    #[arg(long, value_name = "FILE")]
    profile: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = parse_policy)]
    policy: Option<PolicyName>,
    /// Mean arrival rate, requests per second.
    #[arg(long)]
    rate: Option<f64>,
    /// KV cache capacity in tokens.
    #[arg(long)]
    kv_capacity: Option<u64>,
    /// SLO threshold as a multiple of isolated latency.
    #[arg(long)]
    slo_scale: Option<f64>,
    /// Workload mix: TO, ML, MH, or three comma-separated fractions.
    #[arg(long, value_parser = parse_mix_arg)]
    mix: Option<[f64; 3]>,
}

fn parse_policy(s: &str) -> Result<PolicyName, String> {
    s.parse()
}

fn parse_mix_arg(s: &str) -> Result<[f64; 3], String> {
    parse_mix(s)
}

fn parse_class(s: &str) -> Result<VehicleClass, String> {
    match s.to_ascii_lowercase().as_str() {
        "motorcycle" => Ok(VehicleClass::Motorcycle),
        "car" => Ok(VehicleClass::Car),
        "truck" => Ok(VehicleClass::Truck),
        other => Err(format!(
            "unknown class {other:?} (expected motorcycle, car, or truck)"
        )),
    }
}

impl ConfigArgs {
    fn resolve(&self) -> Result<SimConfig> {
        let mut config = match &self.config {
            Some(path) => {
                let raw = fs::read_to_string(path)
                    .with_context(|| format!("reading config {}", path.display()))?;
                serde_json::from_str(&raw)
                    .with_context(|| format!("parsing config {}", path.display()))?
            }
            None => SimConfig::default(),
        };
        self.apply(&mut config);
        config.validate().context("validating config")?;
        Ok(config)
    }

    fn apply(&self, config: &mut SimConfig) {
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        if let Some(policy) = self.policy {
            config.policy = policy;
        }
        if let Some(rate) = self.rate {
            config.request_rate = rate;
        }
        if let Some(kv) = self.kv_capacity {
            config.kv_capacity = kv;
        }
        if let Some(slo) = self.slo_scale {
            config.slo_scale = slo;
        }
        if let Some(mix) = self.mix {
            config.workload_mix = mix;
        }
    }

    fn load_profile(&self) -> Result<ModelProfile> {
        match &self.profile {
            Some(path) => {
                let raw = fs::read_to_string(path)
                    .with_context(|| format!("reading profile {}", path.display()))?;
                serde_json::from_str(&raw)
                    .with_context(|| format!("parsing profile {}", path.display()))
            }
            None => Ok(ModelProfile::default()),
        }
    }
}

/// Default output directory: the environment override or `out`.
fn out_dir() -> PathBuf {
    std::env::var_os(OUT_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("out"))
}

fn default_out(file: &str, explicit: Option<PathBuf>) -> PathBuf {
    explicit.unwrap_or_else(|| out_dir().join(file))
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)
                .with_context(|| format!("creating directory {}", parent.display()))?;
        }
    }
    Ok(())
}

/// Load the artifacts for `profile` from `path`, or calibrate fresh ones
/// from the config's workload when no file is given.
fn obtain_artifacts(
    path: Option<&Path>,
    profile: &ModelProfile,
    config: &SimConfig,
) -> Result<CalibrationArtifacts> {
    match path {
        Some(path) => {
            let store =
                load_artifacts(path).with_context(|| format!("reading {}", path.display()))?;
            store.get(&profile.name).cloned().with_context(|| {
                format!(
                    "no artifacts for profile {:?} in {} (found: {})",
                    profile.name,
                    path.display(),
                    store.keys().cloned().collect::<Vec<_>>().join(", ")
                )
            })
        }
        None => {
            let spec = WorkloadSpec::from_config(config);
            calibrate(profile, &spec, 300, config.chunk_budget, config.seed)
                .context("calibrating")
        }
    }
}

fn write_records(path: &Path, records: &[RequestRecord]) -> Result<()> {
    ensure_parent(path)?;
    let mut w = BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    );
    for record in records {
        serde_json::to_writer(&mut w, record)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn read_records(path: &Path) -> Result<Vec<RequestRecord>> {
    let raw =
        fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut records = Vec::new();
    for (i, line) in raw.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: RequestRecord = serde_json::from_str(line)
            .with_context(|| format!("{} line {}", path.display(), i + 1))?;
        records.push(record);
    }
    Ok(records)
}

fn print_summary(summary: &Summary) {
    println!(
        "{:<12} {:>8} {:>10} {:>10} {:>10} {:>12} {:>10} {:>10} {:>8}",
        "class",
        "requests",
        "mean_ttft",
        "p50_ttft",
        "p90_ttft",
        "norm_latency",
        "viol_rate",
        "severity",
        "preempt"
    );
    let rows = [
        ("motorcycle", summary.motorcycle.as_ref()),
        ("car", summary.car.as_ref()),
        ("truck", summary.truck.as_ref()),
        ("overall", Some(&summary.overall)),
    ];
    for (name, stats) in rows {
        let Some(g) = stats else { continue };
        println!(
            "{:<12} {:>8} {:>10.4} {:>10.4} {:>10.4} {:>12.4} {:>10.4} {:>10.4} {:>8}",
            name,
            g.requests,
            g.mean_ttft,
            g.p50_ttft,
            g.p90_ttft,
            g.mean_normalized_latency,
            g.violation_rate,
            g.mean_violation_severity,
            g.preemptions
        );
    }
}

fn cmd_calibrate(overrides: ConfigArgs, samples: usize, out: Option<PathBuf>) -> Result<()> {
    let config = overrides.resolve()?;
    let profile = overrides.load_profile()?;
    let spec = WorkloadSpec::from_config(&config);
    let artifacts = calibrate(&profile, &spec, samples, config.chunk_budget, config.seed)
        .context("calibrating")?;
    let path = default_out("artifacts.json", out);
    ensure_parent(&path)?;
    let mut store = if path.exists() {
        load_artifacts(&path).with_context(|| format!("reading {}", path.display()))?
    } else {
        Default::default()
    };
    store.insert(profile.name.clone(), artifacts);
    save_artifacts(&path, &store).with_context(|| format!("writing {}", path.display()))?;
    println!(
        "calibrated profile {:?} ({} samples per modality) -> {}",
        profile.name,
        samples,
        path.display()
    );
    Ok(())
}

fn cmd_generate(overrides: ConfigArgs, out: Option<PathBuf>) -> Result<()> {
    let config = overrides.resolve()?;
    let profile = overrides.load_profile()?;
    let spec = WorkloadSpec::from_config(&config);
    let mut trace = generate(&spec).context("generating workload")?;
    trace
        .annotate(&profile, config.chunk_budget)
        .context("annotating isolated latencies")?;
    let path = default_out("trace.jsonl", out);
    ensure_parent(&path)?;
    let mut w = BufWriter::new(
        File::create(&path).with_context(|| format!("creating {}", path.display()))?,
    );
    trace.to_jsonl(&mut w).context("writing trace")?;
    w.flush()?;
    println!("generated {} requests -> {}", trace.len(), path.display());
    Ok(())
}

fn cmd_simulate(
    overrides: ConfigArgs,
    trace_path: Option<PathBuf>,
    artifacts_path: Option<PathBuf>,
    out: Option<PathBuf>,
) -> Result<()> {
    let config = overrides.resolve()?;
    let profile = overrides.load_profile()?;
    let artifacts = obtain_artifacts(artifacts_path.as_deref(), &profile, &config)?;
    let output = match &trace_path {
        Some(path) => {
            let file =
                File::open(path).with_context(|| format!("opening {}", path.display()))?;
            let mut trace = Trace::from_jsonl(BufReader::new(file))
                .with_context(|| format!("parsing {}", path.display()))?;
            if trace.oracle.is_none() {
                trace
                    .annotate(&profile, config.chunk_budget)
                    .context("annotating isolated latencies")?;
            }
            let mut policy = tcmsim::build_policy(config.policy, &config.priority_params);
            run(&trace, &profile, policy.as_mut(), &config, &artifacts)
                .context("simulating")?
        }
        None => {
            run_cell(&config, &profile, &artifacts)
                .context("simulating")?
                .0
        }
    };
    let summary = summarize(&output.records).context("summarizing")?;
    let path = default_out("records.jsonl", out);
    write_records(&path, &output.records)?;
    println!(
        "policy {} finished {} requests in {} iterations, makespan {:.3} s -> {}",
        config.policy,
        output.records.len(),
        output.iterations,
        output.makespan,
        path.display()
    );
    print_summary(&summary);
    Ok(())
}

fn load_plan(name: &str) -> Result<ExperimentPlan> {
    if let Some(plan) = builtin_plan(name) {
        return Ok(plan);
    }
    let path = Path::new(name);
    if !path.exists() {
        bail!(
            "{name:?} is neither a built-in plan ({}) nor a plan file",
            BUILTIN_PLANS.join(", ")
        );
    }
    let raw =
        fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&raw).with_context(|| format!("parsing plan {}", path.display()))
}

fn cmd_experiment(
    plan_name: Option<String>,
    list: bool,
    overrides: ConfigArgs,
    out: Option<PathBuf>,
    workers: Option<usize>,
) -> Result<()> {
    if list {
        for name in BUILTIN_PLANS {
            println!("{name}");
        }
        return Ok(());
    }
    let mut plan = load_plan(plan_name.as_deref().expect("clap requires a plan"))?;
    overrides.apply(&mut plan.base);
    if overrides.profile.is_some() {
        plan.profile = overrides.load_profile()?;
    }
    if let Some(seed) = overrides.seed {
        plan.seeds = vec![seed];
    }
    if let Some(policy) = overrides.policy {
        plan.policies = vec![policy];
    }
    let workers = workers.unwrap_or_else(|| {
        std::thread::available_parallelism().map_or(1, |n| n.get())
    });
    let root = out.unwrap_or_else(out_dir);
    let output = run_experiment(&plan, &root, workers)
        .with_context(|| format!("running plan {:?}", plan.name))?;
    println!(
        "plan {} ran {} cells -> {}",
        plan.name,
        output.cells,
        output.dir.display()
    );
    println!("summary: {}", output.summary_csv.display());
    println!("manifest: {}", output.manifest.display());
    Ok(())
}

fn cmd_goodput(
    overrides: ConfigArgs,
    class: Option<VehicleClass>,
    threshold: f64,
    bounds: (f64, f64),
    artifacts_path: Option<PathBuf>,
) -> Result<()> {
    let config = overrides.resolve()?;
    let profile = overrides.load_profile()?;
    let artifacts = obtain_artifacts(artifacts_path.as_deref(), &profile, &config)?;
    let label = match class {
        Some(VehicleClass::Motorcycle) => "motorcycle",
        Some(VehicleClass::Car) => "car",
        Some(VehicleClass::Truck) => "truck",
        None => "overall",
    };
    match goodput(&config, &profile, &artifacts, class, bounds, threshold) {
        Ok(rate) => {
            println!(
                "{} goodput under {}: {:.2} req/s at attainment >= {:.2}",
                label, config.policy, rate, threshold
            );
            Ok(())
        }
        Err(GoodputError::BracketInvalid { hi, attained }) => {
            println!(
                "{} goodput under {}: at least {:.2} req/s (attainment {:.3} at the upper bound still meets {:.2})",
                label, config.policy, hi, attained, threshold
            );
            Ok(())
        }
        Err(GoodputError::Probe(e)) => Err(e).context("probing goodput"),
    }
}

fn records_files(paths: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for path in paths {
        if path.is_dir() {
            let mut found = Vec::new();
            for entry in fs::read_dir(path)
                .with_context(|| format!("listing {}", path.display()))?
            {
                let entry = entry?;
                let name = entry.file_name();
                if name.to_string_lossy().ends_with(".records.jsonl") {
                    found.push(entry.path());
                }
            }
            if found.is_empty() {
                bail!("no *.records.jsonl files in {}", path.display());
            }
            found.sort();
            files.extend(found);
        } else {
            files.push(path.clone());
        }
    }
    Ok(files)
}

fn cmd_report(paths: Vec<PathBuf>, out: Option<PathBuf>) -> Result<()> {
    let files = records_files(&paths)?;
    let mut csv = String::from(
        "source,class,requests,mean_ttft,p50_ttft,p90_ttft,mean_normalized_latency,\
         violation_rate,mean_violation_severity,preemptions,preempted_seconds\n",
    );
    for file in &files {
        let records = read_records(file)?;
        let summary = summarize(&records)
            .with_context(|| format!("summarizing {}", file.display()))?;
        let source = file
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| file.display().to_string());
        let source = source.trim_end_matches(".records.jsonl");
        let rows = [
            ("motorcycle", summary.motorcycle.as_ref()),
            ("car", summary.car.as_ref()),
            ("truck", summary.truck.as_ref()),
            ("overall", Some(&summary.overall)),
        ];
        for (class, stats) in rows {
            let Some(g) = stats else { continue };
            csv.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{}\n",
                source,
                class,
                g.requests,
                g.mean_ttft,
                g.p50_ttft,
                g.p90_ttft,
                g.mean_normalized_latency,
                g.violation_rate,
                g.mean_violation_severity,
                g.preemptions,
                g.preempted_seconds
            ));
        }
    }
    match out {
        Some(path) => {
            ensure_parent(&path)?;
            fs::write(&path, csv).with_context(|| format!("writing {}", path.display()))?;
            println!("report over {} record files -> {}", files.len(), path.display());
        }
        None => print!("{csv}"),
    }
    Ok(())
}

fn real_main() -> Result<()> {
    match Cli::parse().command {
        Command::Calibrate {
            overrides,
            samples,
            out,
        } => cmd_calibrate(overrides, samples, out),
        Command::Generate { overrides, out } => cmd_generate(overrides, out),
        Command::Simulate {
            overrides,
            trace,
            artifacts,
            out,
        } => cmd_simulate(overrides, trace, artifacts, out),
        Command::Experiment {
            plan,
            list,
            overrides,
            out,
            workers,
        } => cmd_experiment(plan, list, overrides, out, workers),
        Command::Goodput {
            overrides,
            class,
            threshold,
            lo,
            hi,
            artifacts,
        } => cmd_goodput(overrides, class, threshold, (lo, hi), artifacts),
        Command::Report { paths, out } => cmd_report(paths, out),
    }
}

fn main() -> ExitCode {
    match real_main() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
