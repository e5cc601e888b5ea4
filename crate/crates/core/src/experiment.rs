//! Experiment plans: sweeps over policies, request rate, KV capacity, SLO
//! scale, and workload mix, run across seeds on paired workloads and
//! reduced to per-cell CSV summaries with a hashed manifest.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::calibrate::{calibrate, CalibrationArtifacts, CalibrationError};
use crate::config::{
    PolicyName, SimConfig, MIX_MULTIMODAL_HEAVY, MIX_MULTIMODAL_LIGHT, MIX_TEXT_ONLY,
};
use crate::cost::{CostError, ModelProfile};
use crate::engine::{run, EngineError, SimOutput};
use crate::metrics::{
    attainment, goodput_search, summarize, GoodputError, GroupStats, MetricsError, Summary,
};
use crate::policy::build_policy;
use crate::request::VehicleClass;
use crate::workload::{generate, WorkloadError, WorkloadSpec};

#[derive(Debug, thiserror::Error)]
pub enum ExperimentError {
    #[error("experiment plan: {0}")]
    InvalidPlan(String),
    #[error(transparent)]
    Workload(#[from] WorkloadError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Calibration(#[from] CalibrationError),
    #[error(transparent)]
    Cost(#[from] CostError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// One named workload mix for a mix sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixPoint {
    pub name: String,
    pub mix: [f64; 3],
}

/// The axis an experiment varies, if any.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "axis", content = "values", rename_all = "snake_case")]
pub enum Sweep {
    None,
    Rate(Vec<f64>),
    KvCapacity(Vec<u64>),
    SloScale(Vec<f64>),
    Mix(Vec<MixPoint>),
}

fn number_label(x: f64) -> String {
    if x.fract() == 0.0 && x.abs() < 1e15 {
        format!("{}", x as i64)
    } else {
        format!("{x}")
    }
}

impl Sweep {
    pub fn axis(&self) -> &'static str {
        match self {
            Sweep::None => "none",
            Sweep::Rate(_) => "rate",
            Sweep::KvCapacity(_) => "kv_capacity",
            Sweep::SloScale(_) => "slo_scale",
            Sweep::Mix(_) => "mix",
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Sweep::None => 1,
            Sweep::Rate(v) => v.len(),
            Sweep::KvCapacity(v) => v.len(),
            Sweep::SloScale(v) => v.len(),
            Sweep::Mix(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Value label for one sweep point, empty when there is no axis.
    pub fn label(&self, idx: usize) -> String {
        match self {
            Sweep::None => String::new(),
            Sweep::Rate(v) => number_label(v[idx]),
            Sweep::KvCapacity(v) => format!("{}", v[idx]),
            Sweep::SloScale(v) => number_label(v[idx]),
            Sweep::Mix(v) => v[idx].name.clone(),
        }
    }

    pub fn apply(&self, idx: usize, config: &mut SimConfig) {
        match self {
            Sweep::None => {}
            Sweep::Rate(v) => config.request_rate = v[idx],
            Sweep::KvCapacity(v) => config.kv_capacity = v[idx],
            Sweep::SloScale(v) => config.slo_scale = v[idx],
            Sweep::Mix(v) => config.workload_mix = v[idx].mix,
        }
    }

    fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |msg: String| Err(ExperimentError::InvalidPlan(msg));
        if self.is_empty() && !matches!(self, Sweep::None) {
            return bad(format!("sweep over {} has no values", self.axis()));
        }
        match self {
            Sweep::None => {}
            Sweep::Rate(v) => {
                if v.iter().any(|&x| !x.is_finite() || x <= 0.0) {
                    return bad("rates must be positive".into());
                }
            }
            Sweep::KvCapacity(v) => {
                if v.contains(&0) {
                    return bad("kv capacities must be positive".into());
                }
            }
            Sweep::SloScale(v) => {
                if v.iter().any(|&x| !x.is_finite() || x <= 0.0) {
                    return bad("slo scales must be positive".into());
                }
            }
            Sweep::Mix(v) => {
                for point in v {
                    if point.name.is_empty()
                        || !point
                            .name
                            .chars()
                            .all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
                    {
                        return bad(format!("mix name {:?} is not a safe label", point.name));
                    }
                    let sum: f64 = point.mix.iter().sum();
                    if point.mix.iter().any(|&f| !(0.0..=1.0).contains(&f))
                        || (sum - 1.0).abs() > 1e-9
                    {
                        return bad(format!("mix {:?} must sum to 1", point.mix));
                    }
                }
            }
        }
        Ok(())
    }
}

/// A full experiment: policies crossed with sweep points and seeds.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentPlan {
    pub name: String,
    pub base: SimConfig,
    pub profile: ModelProfile,
    pub policies: Vec<PolicyName>,
    pub sweep: Sweep,
    pub seeds: Vec<u64>,
    /// Profiling requests per modality for the calibration pass.
    pub calibration_samples: usize,
}

impl Default for ExperimentPlan {
    fn default() -> Self {
        ExperimentPlan {
            name: "custom".into(),
            base: SimConfig::default(),
            profile: ModelProfile::default(),
            policies: vec![PolicyName::Fcfs, PolicyName::Tcm],
            sweep: Sweep::None,
            seeds: vec![1, 2, 3, 4, 5],
            calibration_samples: 300,
        }
    }
}

impl ExperimentPlan {
    pub fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |msg: String| Err(ExperimentError::InvalidPlan(msg));
        if self.name.is_empty()
            || !self
                .name
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
        {
            return bad(format!("plan name {:?} is not a safe directory name", self.name));
        }
        if self.policies.is_empty() {
            return bad("plan needs at least one policy".into());
        }
        let mut seen: Vec<String> = self.policies.iter().map(PolicyName::to_string).collect();
        seen.sort();
        seen.dedup();
        if seen.len() != self.policies.len() {
            return bad("duplicate policies in plan".into());
        }
        if self.seeds.is_empty() {
            return bad("plan needs at least one seed".into());
        }
        let mut seeds = self.seeds.clone();
        seeds.sort_unstable();
        seeds.dedup();
        if seeds.len() != self.seeds.len() {
            return bad("duplicate seeds in plan".into());
        }
        if self.calibration_samples < 2 {
            return bad("calibration needs at least 2 samples per modality".into());
        }
        self.sweep.validate()?;
        self.base.validate().map_err(EngineError::Core)?;
        Ok(())
    }

    /// Total number of simulation runs the plan describes.
    pub fn cells(&self) -> usize {
        self.policies.len() * self.sweep.len() * self.seeds.len()
    }

    fn cell_config(&self, policy_idx: usize, point_idx: usize, seed_idx: usize) -> SimConfig {
        let mut config = self.base.clone();
        config.policy = self.policies[policy_idx];
        config.seed = self.seeds[seed_idx];
        self.sweep.apply(point_idx, &mut config);
        config
    }

    fn records_file(&self, policy_idx: usize, point_idx: usize, seed_idx: usize) -> String {
        let mut name = self.policies[policy_idx].to_string();
        if !matches!(self.sweep, Sweep::None) {
            let _ = write!(
                name,
                "-{}-{}",
                self.sweep.axis(),
                self.sweep.label(point_idx)
            );
        }
        let _ = write!(name, "-s{}.records.jsonl", self.seeds[seed_idx]);
        name
    }
}

/// Names of the built-in experiment plans.
pub const BUILTIN_PLANS: [&str; 7] = [
    "fig7-policy-comparison",
    "ablation-fig8",
    "fig9-preemptions",
    "fig11-rate-sweep",
    "fig12-mix",
    "fig13-memory",
    "fig14-slo-sweep",
];

/// Look up a built-in plan by name.
pub fn builtin_plan(name: &str) -> Option<ExperimentPlan> {
    let with = |policies: Vec<PolicyName>, sweep: Sweep| ExperimentPlan {
        name: name.into(),
        policies,
        sweep,
        ..ExperimentPlan::default()
    };
    let headline = vec![PolicyName::Fcfs, PolicyName::Edf, PolicyName::Tcm];
    let pair = vec![PolicyName::Fcfs, PolicyName::Tcm];
    Some(match name {
        "fig7-policy-comparison" => with(headline, Sweep::None),
        "ablation-fig8" => with(
            vec![
                PolicyName::Fcfs,
                PolicyName::StaticNaive,
                PolicyName::StaticSmart,
                PolicyName::NaiveAging,
                PolicyName::Tcm,
            ],
            Sweep::None,
        ),
        "fig9-preemptions" => with(headline, Sweep::None),
        "fig11-rate-sweep" => with(pair, Sweep::Rate(vec![1.0, 2.0, 3.0, 4.0])),
        "fig12-mix" => with(
            pair,
            Sweep::Mix(vec![
                MixPoint {
                    name: "TO".into(),
                    mix: MIX_TEXT_ONLY,
                },
                MixPoint {
                    name: "ML".into(),
                    mix: MIX_MULTIMODAL_LIGHT,
                },
                MixPoint {
                    name: "MH".into(),
                    mix: MIX_MULTIMODAL_HEAVY,
                },
            ]),
        ),
        "fig13-memory" => with(pair, Sweep::KvCapacity(vec![131_072, 65_536, 32_768])),
        "fig14-slo-sweep" => with(pair, Sweep::SloScale(vec![2.5, 5.0, 10.0])),
        _ => return None,
    })
}

/// Generate the workload for one configuration, simulate it, and summarize.
pub fn run_cell(
    config: &SimConfig,
    profile: &ModelProfile,
    artifacts: &CalibrationArtifacts,
) -> Result<(SimOutput, Summary), ExperimentError> {
    let spec = WorkloadSpec::from_config(config);
    let mut trace = generate(&spec)?;
    trace.annotate(profile, config.chunk_budget)?;
    let mut policy = build_policy(config.policy, &config.priority_params);
    let out = run(&trace, profile, policy.as_mut(), config, artifacts)?;
    let summary = summarize(&out.records)?;
    Ok((out, summary))
}

/// Seed for one goodput probe, mixing the probed rate into the base seed.
fn probe_seed(seed: u64, rate: f64) -> u64 {
    seed ^ rate.to_bits().rotate_left(17)
}

/// Highest request rate whose SLO attainment stays at or above `threshold`
/// under the policy in `base`, probing a fresh workload per rate.
pub fn goodput(
    base: &SimConfig,
    profile: &ModelProfile,
    artifacts: &CalibrationArtifacts,
    class: Option<VehicleClass>,
    bounds: (f64, f64),
    threshold: f64,
) -> Result<f64, GoodputError<ExperimentError>> {
    goodput_search(
        |rate| {
            let mut config = base.clone();
            config.request_rate = rate;
            config.seed = probe_seed(base.seed, rate);
            let (out, _) = run_cell(&config, profile, artifacts)?;
            Ok(attainment(&out.records, class))
        },
        bounds,
        threshold,
        0.05,
    )
}

/// Where one finished experiment landed on disk.
#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub dir: PathBuf,
    pub summary_csv: PathBuf,
    pub manifest: PathBuf,
    pub cells: usize,
}

const CSV_HEADER: &str = "policy,axis,value,class,seeds,requests,mean_ttft,p50_ttft,p90_ttft,\
mean_normalized_latency,violation_rate,mean_violation_severity,preemptions,preempted_seconds";

fn class_rows(summary: &Summary) -> [(&'static str, Option<&GroupStats>); 4] {
    [
        ("motorcycle", summary.motorcycle.as_ref()),
        ("car", summary.car.as_ref()),
        ("truck", summary.truck.as_ref()),
        ("overall", Some(&summary.overall)),
    ]
}

fn summary_csv(plan: &ExperimentPlan, results: &BTreeMap<(usize, usize, usize), Summary>) -> String {
    let mut csv = String::from(CSV_HEADER);
    csv.push('\n');
    for policy_idx in 0..plan.policies.len() {
        for point_idx in 0..plan.sweep.len() {
            let cell: Vec<&Summary> = (0..plan.seeds.len())
                .map(|seed_idx| &results[&(policy_idx, point_idx, seed_idx)])
                .collect();
            for class_idx in 0..4 {
                let present: Vec<&GroupStats> = cell
                    .iter()
                    .filter_map(|s| class_rows(s)[class_idx].1)
                    .collect();
                if present.is_empty() {
                    continue;
                }
                let name = class_rows(cell[0])[class_idx].0;
                let n = present.len() as f64;
                let mean = |pick: fn(&GroupStats) -> f64| {
                    present.iter().map(|g| pick(g)).sum::<f64>() / n
                };
                let _ = write!(
                    csv,
                    "{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
                    plan.policies[policy_idx],
                    plan.sweep.axis(),
                    plan.sweep.label(point_idx),
                    name,
                    present.len(),
                    mean(|g| g.requests as f64),
                    mean(|g| g.mean_ttft),
                    mean(|g| g.p50_ttft),
                    mean(|g| g.p90_ttft),
                    mean(|g| g.mean_normalized_latency),
                    mean(|g| g.violation_rate),
                    mean(|g| g.mean_violation_severity),
                    mean(|g| g.preemptions as f64),
                    mean(|g| g.preempted_seconds),
                );
            }
        }
    }
    csv
}

fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for byte in digest {
        let _ = write!(out, "{byte:02x}");
    }
    out
}

#[derive(Serialize)]
struct ManifestEntry {
    path: String,
    sha256: String,
}

#[derive(Serialize)]
struct Manifest<'a> {
    plan: &'a ExperimentPlan,
    plan_sha256: String,
    tool_version: &'static str,
    cells: usize,
    outputs: Vec<ManifestEntry>,
}

/// Run every cell of a plan with a pool of worker threads and write record
/// files, the reduced summary CSV, and a manifest under
/// `<out_root>/<plan name>/`. Any failure removes the partial directory.
pub fn run_experiment(
    plan: &ExperimentPlan,
    out_root: &Path,
    workers: usize,
) -> Result<ExperimentOutput, ExperimentError> {
    plan.validate()?;
    let dir = out_root.join(&plan.name);
    let result = run_experiment_inner(plan, &dir, workers.max(1));
    if result.is_err() {
        let _ = fs::remove_dir_all(&dir);
    }
    result
}

fn run_experiment_inner(
    plan: &ExperimentPlan,
    dir: &Path,
    workers: usize,
) -> Result<ExperimentOutput, ExperimentError> {
    let records_dir = dir.join("records");
    fs::create_dir_all(&records_dir)?;

    let artifacts = calibrate(
        &plan.profile,
        &WorkloadSpec::from_config(&plan.base),
        plan.calibration_samples,
        plan.base.chunk_budget,
        plan.base.seed,
    )?;

    let mut jobs = Vec::with_capacity(plan.cells());
    for policy_idx in 0..plan.policies.len() {
        for point_idx in 0..plan.sweep.len() {
            for seed_idx in 0..plan.seeds.len() {
                jobs.push((policy_idx, point_idx, seed_idx));
            }
        }
    }

    let next = AtomicUsize::new(0);
    let results: Mutex<BTreeMap<(usize, usize, usize), Summary>> = Mutex::new(BTreeMap::new());
    let failure: Mutex<Option<ExperimentError>> = Mutex::new(None);
    std::thread::scope(|scope| {
        for _ in 0..workers.min(jobs.len()) {
            scope.spawn(|| loop {
                let job = next.fetch_add(1, Ordering::Relaxed);
                if job >= jobs.len() || failure.lock().unwrap().is_some() {
                    break;
                }
                let (policy_idx, point_idx, seed_idx) = jobs[job];
                let config = plan.cell_config(policy_idx, point_idx, seed_idx);
                let outcome = run_cell(&config, &plan.profile, &artifacts).and_then(|(out, summary)| {
                    let mut lines = String::new();
                    for record in &out.records {
                        lines.push_str(&serde_json::to_string(record)?);
                        lines.push('\n');
                    }
                    let file = records_dir.join(plan.records_file(policy_idx, point_idx, seed_idx));
                    fs::write(file, lines)?;
                    Ok(summary)
                });
                match outcome {
                    Ok(summary) => {
                        results
                            .lock()
                            .unwrap()
                            .insert((policy_idx, point_idx, seed_idx), summary);
                    }
                    Err(err) => {
                        failure.lock().unwrap().get_or_insert(err);
                        break;
                    }
                }
            });
        }
    });
    if let Some(err) = failure.into_inner().unwrap() {
        return Err(err);
    }

    let results = results.into_inner().unwrap();
    let csv = summary_csv(plan, &results);
    let summary_path = dir.join("summary.csv");
    fs::write(&summary_path, &csv)?;

    let plan_json = serde_json::to_vec_pretty(plan)?;
    let mut outputs = vec![ManifestEntry {
        path: "summary.csv".into(),
        sha256: sha256_hex(csv.as_bytes()),
    }];
    let mut record_files: Vec<String> = (0..plan.policies.len())
        .flat_map(|p| {
            (0..plan.sweep.len()).flat_map(move |x| {
                (0..plan.seeds.len()).map(move |s| (p, x, s))
            })
        })
        .map(|(p, x, s)| plan.records_file(p, x, s))
        .collect();
    record_files.sort();
    for file in record_files {
        let bytes = fs::read(records_dir.join(&file))?;
        outputs.push(ManifestEntry {
            path: format!("records/{file}"),
            sha256: sha256_hex(&bytes),
        });
    }
    let manifest = Manifest {
        plan,
        plan_sha256: sha256_hex(&plan_json),
        tool_version: env!("CARGO_PKG_VERSION"),
        cells: plan.cells(),
        outputs,
    };
    let manifest_path = dir.join("manifest.json");
    fs::write(&manifest_path, serde_json::to_vec_pretty(&manifest)?)?;

    Ok(ExperimentOutput {
        dir: dir.to_path_buf(),
        summary_csv: summary_path,
        manifest: manifest_path,
        cells: plan.cells(),
    })
}
