//! Scheduling policies.
//!
//! Every policy implements the same contract: given a snapshot of the queue
//! and the engine, produce the set of prefill chunks to run this iteration
//! and the requests to preempt. Admission walks candidates in policy order,
//! filling the shared token budget greedily; a waiting request is admitted
//! only if its whole prefill footprint fits in free KV. The single-queue
//! policies (FCFS, EDF, naive aging) stop admitting at the first waiting
//! request that does not fit, so a heavy request at the head holds the line;
//! the class-aware policies skip it and keep admitting lighter work.
//!
//! The TCM policy ranks candidates by an aging priority
//! `static_priority + (1 - exp(-k * waiting_time^p))` with per-class
//! constants, mapped to a scheduling score by `-ln(priority)` so that lower
//! scores run first.

use serde::{Deserialize, Serialize};

use crate::config::PolicyName;
use crate::request::{CoreError, Modality, VehicleClass};

/// Floor applied to priorities before the log transform.
pub const SCORE_EPSILON: f64 = 1e-12;

/// Aging constants for one class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassParams {
    pub static_priority: f64,
    pub k: f64,
    pub p: f64,
}

/// Per-class priority constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PriorityParams {
    pub motorcycle: ClassParams,
    pub car: ClassParams,
    pub truck: ClassParams,
}

impl Default for PriorityParams {
    fn default() -> Self {
        PriorityParams {
            motorcycle: ClassParams {
                static_priority: 0.1,
                k: 0.05,
                p: 3.5,
            },
            car: ClassParams {
                static_priority: 0.05,
                k: 0.003,
                p: 2.5,
            },
            truck: ClassParams {
                static_priority: 0.0,
                k: 0.00075,
                p: 1.1,
            },
        }
    }
}

impl PriorityParams {
    pub fn class(&self, class: VehicleClass) -> &ClassParams {
        match class {
            VehicleClass::Motorcycle => &self.motorcycle,
            VehicleClass::Car => &self.car,
            VehicleClass::Truck => &self.truck,
        }
    }

    /// All constants must be nonnegative and strictly ordered so that lighter
    /// classes both start higher and age faster.
    pub fn validate(&self) -> Result<(), CoreError> {
        let bad = |reason: String| CoreError::InvalidConfig {
            field: "priority_params",
            reason,
        };
        for (name, c) in [
            ("motorcycle", &self.motorcycle),
            ("car", &self.car),
            ("truck", &self.truck),
        ] {
            if !(c.static_priority.is_finite() && c.static_priority >= 0.0)
                || !(c.k.is_finite() && c.k >= 0.0)
                || !(c.p.is_finite() && c.p >= 0.0)
            {
                return Err(bad(format!("{name}: constants must be finite and >= 0")));
            }
        }
        let decreasing = |a: f64, b: f64, c: f64| a > b && b > c;
        if !decreasing(
            self.motorcycle.static_priority,
            self.car.static_priority,
            self.truck.static_priority,
        ) {
            return Err(bad("static_priority must strictly decrease M > C > T".into()));
        }
        if !decreasing(self.motorcycle.k, self.car.k, self.truck.k) {
            return Err(bad("k must strictly decrease M > C > T".into()));
        }
        if !decreasing(self.motorcycle.p, self.car.p, self.truck.p) {
            return Err(bad("p must strictly decrease M > C > T".into()));
        }
        Ok(())
    }
}

/// Aging priority of a request of `class` that has waited `waiting_time`
/// seconds. Monotonically nondecreasing in waiting time, bounded by
/// `static_priority + 1`.
pub fn priority(params: &PriorityParams, class: VehicleClass, waiting_time: f64) -> f64 {
    let c = params.class(class);
    let t = waiting_time.max(0.0);
    c.static_priority + (1.0 - (-c.k * t.powf(c.p)).exp())
}

/// Scheduling score: lower runs first. Priorities are floored at
/// [`SCORE_EPSILON`] so a zero priority maps to a large finite score.
pub fn score(priority: f64) -> f64 {
    -priority.max(SCORE_EPSILON).ln()
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PolicyError {
    #[error("unknown policy: {0}")]
    UnknownPolicy(String),
    #[error("policy {0} needs calibration artifacts (estimators and cluster model)")]
    MissingCalibration(PolicyName),
}

/// Where a candidate currently sits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SchedPhase {
    Queued,
    Prefilling,
    Decoding,
}

/// What a policy is allowed to see about one request. Ground-truth output
/// length is deliberately absent.
#[derive(Debug, Clone, Copy)]
pub struct SchedItem {
    pub id: u64,
    pub class: VehicleClass,
    pub modality: Modality,
    pub arrival_time: f64,
    /// SLO deadline (arrival + slo_scale x isolated e2e). Consumed by EDF.
    pub deadline: f64,
    /// Prefill footprint in tokens (prompt + media).
    pub footprint: u64,
    /// Prefill tokens already computed this pass.
    pub prefill_done: u64,
    /// Current KV reservation (0 while queued).
    pub kv_alloc: u64,
    pub phase: SchedPhase,
}

/// Snapshot handed to [`SchedulingPolicy::decide`].
#[derive(Debug)]
pub struct SchedState<'a> {
    pub clock: f64,
    pub chunk_budget: u64,
    pub kv_free: u64,
    /// Waiting and running requests, sorted by (arrival_time, id).
    pub items: &'a [SchedItem],
}

/// One prefill chunk grant.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Admission {
    pub id: u64,
    pub chunk: u64,
}

/// Output of one scheduling decision.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SchedDecision {
    /// Requests to admit or continue prefilling, in admission order.
    pub admissions: Vec<Admission>,
    /// Requests to evict (recompute later).
    pub preemptions: Vec<u64>,
}

/// Which classifier assigns the class recorded on ingested requests.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClassifierMode {
    /// Modality-mapped class drives scheduling.
    Naive,
    /// Clustered class drives scheduling.
    Smart,
    /// Policy ignores classes; the clustered class is recorded for metrics.
    MetricsOnly,
}

pub trait SchedulingPolicy: Send {
    fn name(&self) -> PolicyName;
    fn classifier_mode(&self) -> ClassifierMode;
    fn decide(&mut self, state: &SchedState) -> SchedDecision;
}

/// Construct the policy selected by `name`.
pub fn build_policy(name: PolicyName, params: &PriorityParams) -> Box<dyn SchedulingPolicy> {
    match name {
        PolicyName::Fcfs => Box::new(Fcfs),
        PolicyName::Edf => Box::new(Edf),
        PolicyName::NaiveAging => Box::new(NaiveAging),
        PolicyName::StaticNaive => Box::new(StaticPriority {
            name: PolicyName::StaticNaive,
            mode: ClassifierMode::Naive,
        }),
        PolicyName::StaticSmart => Box::new(StaticPriority {
            name: PolicyName::StaticSmart,
            mode: ClassifierMode::Smart,
        }),
        PolicyName::Tcm => Box::new(Tcm { params: *params }),
    }
}

fn class_rank(class: VehicleClass) -> u8 {
    match class {
        VehicleClass::Motorcycle => 0,
        VehicleClass::Car => 1,
        VehicleClass::Truck => 2,
    }
}

/// Sort `items` by a float key, ties broken by arrival time then id.
fn order_by_key(items: &[SchedItem], key: impl Fn(&SchedItem) -> f64) -> Vec<SchedItem> {
    let mut v: Vec<SchedItem> = items.to_vec();
    v.sort_by(|a, b| {
        key(a)
            .total_cmp(&key(b))
            .then(a.arrival_time.total_cmp(&b.arrival_time))
            .then(a.id.cmp(&b.id))
    });
    v
}

struct Planner<'a> {
    state: &'a SchedState<'a>,
    decision: SchedDecision,
    kv_free: u64,
    /// Decoding sequences still running after preemptions; each grows its KV
    /// allocation by one token this iteration.
    decode_seqs: u64,
    /// KV tokens the iteration will allocate at its end: one per decoding
    /// sequence plus one per prefill completing now (the first output token).
    pending_growth: u64,
    budget: u64,
}

impl<'a> Planner<'a> {
    fn new(state: &'a SchedState) -> Self {
        let decode_seqs = state
            .items
            .iter()
            .filter(|i| i.phase == SchedPhase::Decoding)
            .count() as u64;
        Planner {
            state,
            decision: SchedDecision::default(),
            kv_free: state.kv_free,
            decode_seqs,
            pending_growth: decode_seqs,
            budget: state.chunk_budget.saturating_sub(decode_seqs),
        }
    }

    fn preempt(&mut self, item: &SchedItem) {
        debug_assert!(item.phase != SchedPhase::Queued);
        self.decision.preemptions.push(item.id);
        self.kv_free += item.kv_alloc;
        if item.phase == SchedPhase::Decoding {
            self.decode_seqs -= 1;
            self.pending_growth -= 1;
            self.budget = self.state.chunk_budget.saturating_sub(self.decode_seqs);
        }
    }

    fn is_preempted(&self, id: u64) -> bool {
        self.decision.preemptions.contains(&id)
    }

    /// Evict victims (in the given order) until this iteration's decode
    /// growth fits in free KV.
    fn free_decode_headroom(&mut self, victims: &[SchedItem]) {
        let mut idx = 0;
        while self.kv_free < self.pending_growth && idx < victims.len() {
            let v = victims[idx];
            idx += 1;
            if !self.is_preempted(v.id) {
                self.preempt(&v);
            }
        }
    }

    /// Walk candidates in order, granting chunks while budget and KV last.
    /// With `head_blocking`, the first waiting candidate that does not fit
    /// in free KV closes admission for every waiting candidate behind it,
    /// the way a single FIFO line stalls; in-flight prefills keep their
    /// budget either way. Without it, non-fitting waiting candidates are
    /// skipped so lighter requests further down the order still get in.
    fn admit(&mut self, candidates: &[SchedItem], head_blocking: bool) {
        let mut waiting_closed = false;
        for item in candidates {
            if self.budget == 0 {
                break;
            }
            if self.is_preempted(item.id) {
                continue;
            }
            match item.phase {
                SchedPhase::Decoding => {}
                SchedPhase::Prefilling => {
                    let remaining = item.footprint - item.prefill_done;
                    let mut chunk = remaining.min(self.budget);
                    let mut completes = chunk == remaining;
                    // Hold the final token back if the first output token
                    // it emits has no KV headroom yet.
                    if completes && self.kv_free < self.pending_growth + 1 {
                        chunk -= 1;
                        completes = false;
                    }
                    if chunk == 0 {
                        continue;
                    }
                    self.decision.admissions.push(Admission {
                        id: item.id,
                        chunk,
                    });
                    self.budget -= chunk;
                    if completes {
                        self.pending_growth += 1;
                    }
                }
                SchedPhase::Queued => {
                    if waiting_closed {
                        continue;
                    }
                    let chunk = item.footprint.min(self.budget);
                    let completes = chunk == item.footprint;
                    let growth = if completes { 1 } else { 0 };
                    if self.kv_free < item.footprint + self.pending_growth + growth {
                        waiting_closed = head_blocking;
                        continue;
                    }
                    self.decision.admissions.push(Admission {
                        id: item.id,
                        chunk,
                    });
                    self.kv_free -= item.footprint;
                    self.budget -= chunk;
                    self.pending_growth += growth;
                }
            }
        }
    }

    fn finish(self) -> SchedDecision {
        self.decision
    }
}

fn running(items: &[SchedItem]) -> Vec<SchedItem> {
    items
        .iter()
        .filter(|i| i.phase != SchedPhase::Queued)
        .copied()
        .collect()
}

fn schedulable(items: &[SchedItem]) -> Vec<SchedItem> {
    items
        .iter()
        .filter(|i| i.phase != SchedPhase::Decoding)
        .copied()
        .collect()
}

/// First-come first-served with chunked prefill. Preempts only when decode
/// growth runs out of memory, evicting the most recently arrived running
/// request, as vLLM does.
struct Fcfs;

impl SchedulingPolicy for Fcfs {
    fn name(&self) -> PolicyName {
        PolicyName::Fcfs
    }

    fn classifier_mode(&self) -> ClassifierMode {
        ClassifierMode::MetricsOnly
    }

    fn decide(&mut self, state: &SchedState) -> SchedDecision {
        let mut planner = Planner::new(state);
        let victims = order_by_key(&running(state.items), |i| -i.arrival_time);
        planner.free_decode_headroom(&victims);
        let candidates = order_by_key(&schedulable(state.items), |i| i.arrival_time);
        planner.admit(&candidates, true);
        planner.finish()
    }
}

/// Earliest deadline first over the SLO deadlines. Preempts later-deadline
/// running requests to make room for an earlier-deadline arrival.
struct Edf;

impl SchedulingPolicy for Edf {
    fn name(&self) -> PolicyName {
        PolicyName::Edf
    }

    fn classifier_mode(&self) -> ClassifierMode {
        ClassifierMode::MetricsOnly
    }

    fn decide(&mut self, state: &SchedState) -> SchedDecision {
        let mut planner = Planner::new(state);
        let victims = order_by_key(&running(state.items), |i| -i.deadline);
        planner.free_decode_headroom(&victims);

        let candidates = order_by_key(&schedulable(state.items), |i| i.deadline);
        for item in &candidates {
            if planner.budget == 0 {
                break;
            }
            if planner.is_preempted(item.id) || item.phase != SchedPhase::Queued {
                continue;
            }
            // A waiting request with an earlier deadline than some running
            // request may evict the latest-deadline ones to fit.
            let needed = item.footprint + planner.pending_growth + 1;
            if planner.kv_free >= needed {
                continue;
            }
            let mut eligible: Vec<SchedItem> = running(state.items)
                .into_iter()
                .filter(|v| v.deadline > item.deadline && !planner.is_preempted(v.id))
                .collect();
            eligible = order_by_key(&eligible, |i| -i.deadline);

            let mut freed = planner.kv_free;
            let mut take = 0usize;
            for v in &eligible {
                if freed >= needed {
                    break;
                }
                freed += v.kv_alloc;
                take += 1;
            }
            if freed >= needed {
                for v in &eligible[..take] {
                    planner.preempt(v);
                }
            }
        }
        planner.admit(&candidates, true);
        planner.finish()
    }
}

/// Single queue ordered purely by waiting time, oldest first.
struct NaiveAging;

impl SchedulingPolicy for NaiveAging {
    fn name(&self) -> PolicyName {
        PolicyName::NaiveAging
    }

    fn classifier_mode(&self) -> ClassifierMode {
        ClassifierMode::MetricsOnly
    }

    fn decide(&mut self, state: &SchedState) -> SchedDecision {
        let mut planner = Planner::new(state);
        let victims = order_by_key(&running(state.items), |i| -i.arrival_time);
        planner.free_decode_headroom(&victims);
        // Oldest first is ascending arrival.
        let candidates = order_by_key(&schedulable(state.items), |i| i.arrival_time);
        planner.admit(&candidates, true);
        planner.finish()
    }
}

/// Strict class order (Motorcycle, Car, Truck), FCFS within a class, no
/// aging. Memory preemption evicts the heaviest class first, youngest first
/// within a class.
struct StaticPriority {
    name: PolicyName,
    mode: ClassifierMode,
}

impl SchedulingPolicy for StaticPriority {
    fn name(&self) -> PolicyName {
        self.name
    }

    fn classifier_mode(&self) -> ClassifierMode {
        self.mode
    }

    fn decide(&mut self, state: &SchedState) -> SchedDecision {
        let mut planner = Planner::new(state);
        let victims = order_by_key(&running(state.items), |i| {
            -(class_rank(i.class) as f64 * 1e12 + i.arrival_time)
        });
        planner.free_decode_headroom(&victims);
        let candidates = order_by_key(&schedulable(state.items), |i| {
            class_rank(i.class) as f64 * 1e12 + i.arrival_time
        });
        planner.admit(&candidates, false);
        planner.finish()
    }
}

/// Class-aware aging: candidates run in ascending score order, Motorcycles
/// are never preempted, and memory pressure evicts the worst-scored
/// non-Motorcycle running request first.
struct Tcm {
    params: PriorityParams,
}

impl SchedulingPolicy for Tcm {
    fn name(&self) -> PolicyName {
        PolicyName::Tcm
    }

    fn classifier_mode(&self) -> ClassifierMode {
        ClassifierMode::Smart
    }

    fn decide(&mut self, state: &SchedState) -> SchedDecision {
        let item_score =
            |i: &SchedItem| score(priority(&self.params, i.class, state.clock - i.arrival_time));

        let mut planner = Planner::new(state);
        let eligible: Vec<SchedItem> = running(state.items)
            .into_iter()
            .filter(|i| i.class != VehicleClass::Motorcycle)
            .collect();
        let victims = order_by_key(&eligible, |i| -item_score(i));
        planner.free_decode_headroom(&victims);
        let candidates = order_by_key(&schedulable(state.items), item_score);
        planner.admit(&candidates, false);
        let decision = planner.finish();
        debug_assert!(decision.preemptions.iter().all(|id| {
            state
                .items
                .iter()
                .find(|i| i.id == *id)
                .map(|i| i.class != VehicleClass::Motorcycle)
                .unwrap_or(false)
        }));
        decision
    }
}
