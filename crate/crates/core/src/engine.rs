//! Iteration-level simulation engine: continuous batching with chunked
//! prefill, a reservation-based KV cache, and preemption by recomputation.
//!
//! Time advances one batch iteration at a time. Each iteration ingests the
//! arrivals that have happened so far, asks the policy for a decision,
//! applies preemptions and admissions, then charges the batch's wall time
//! and advances every running request by one step. Idle stretches jump
//! straight to the next arrival.

use std::collections::{BTreeMap, BTreeSet};

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::calibrate::CalibrationArtifacts;
use crate::classify::{classify_naive, smart_class};
use crate::config::SimConfig;
use crate::cost::{iteration_time, request_rng, stage_costs, CostError, ModelProfile};
use crate::kahan::KahanSum;
use crate::metrics::RequestRecord;
use crate::policy::{ClassifierMode, SchedItem, SchedPhase, SchedState, SchedulingPolicy};
use crate::request::{
    advance_state, CoreError, LifecycleEvent, Request, RequestState, VehicleClass,
};
use crate::workload::Trace;

/// Iterations without a single request finishing before the engine assumes
/// the policy is thrashing and aborts.
const STALL_LIMIT: u64 = 10_000_000;

#[derive(Debug, thiserror::Error)]
pub enum EngineError {
    #[error("request {id} needs {required} kv tokens but capacity is {capacity}")]
    CapacityImpossible {
        id: u64,
        required: u64,
        capacity: u64,
    },
    #[error(
        "no further progress possible at t={clock:.3}: {queued} queued, \
         {running} running, no future arrivals"
    )]
    Deadlock {
        clock: f64,
        queued: usize,
        running: usize,
    },
    #[error("trace lacks isolated-latency annotations")]
    UnannotatedTrace,
    #[error("bad trace: {0}")]
    InvalidTrace(String),
    #[error("scheduling decision is inconsistent: {0}")]
    InconsistentDecision(String),
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error(transparent)]
    Cost(#[from] CostError),
}

fn bug(msg: String) -> EngineError {
    EngineError::InconsistentDecision(msg)
}

/// One line of the engine's event log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Event {
    Arrive { t: f64, id: u64, class: VehicleClass },
    Schedule { t: f64, id: u64 },
    FirstToken { t: f64, id: u64 },
    Preempt { t: f64, id: u64, tokens_generated: u64 },
    Finish { t: f64, id: u64 },
}

/// Everything one simulation run produces.
#[derive(Debug, Clone)]
pub struct SimOutput {
    /// Final per-request outcomes, ordered by request id.
    pub records: Vec<RequestRecord>,
    pub events: Vec<Event>,
    pub iterations: u64,
    /// Clock time when the last request finished.
    pub makespan: f64,
}

/// Class a request is scheduled under for the given classifier mode.
pub fn ingest_class(
    mode: ClassifierMode,
    artifacts: &CalibrationArtifacts,
    request: &Request,
) -> VehicleClass {
    match mode {
        ClassifierMode::Naive => classify_naive(request),
        ClassifierMode::Smart | ClassifierMode::MetricsOnly => {
            smart_class(&artifacts.estimators, &artifacts.clusters, request)
        }
    }
}

struct Active {
    request: Request,
    class: VehicleClass,
    deadline: f64,
    slo: f64,
    isolated_e2e: f64,
    kv_alloc: u64,
    rng: ChaCha8Rng,
    first_token: Option<f64>,
    preemption_count: u64,
    preempted_seconds: f64,
    preempted_since: Option<f64>,
}

impl Active {
    fn item(&self) -> SchedItem {
        let (phase, prefill_done) = match self.request.state {
            RequestState::Waiting | RequestState::Preempted { .. } => (SchedPhase::Queued, 0),
            RequestState::Prefilling { tokens_done } => (SchedPhase::Prefilling, tokens_done),
            RequestState::Decoding { .. } => (SchedPhase::Decoding, 0),
            RequestState::Finished => unreachable!("finished requests are removed"),
        };
        SchedItem {
            id: self.request.id,
            class: self.class,
            modality: self.request.modality,
            arrival_time: self.request.arrival_time,
            deadline: self.deadline,
            footprint: self.request.prefill_tokens(),
            prefill_done,
            kv_alloc: self.kv_alloc,
            phase,
        }
    }
}

struct Engine<'a> {
    profile: &'a ModelProfile,
    config: &'a SimConfig,
    clock: KahanSum,
    active: BTreeMap<u64, Active>,
    kv_used: u64,
    events: Vec<Event>,
    records: Vec<RequestRecord>,
    iterations: u64,
    makespan: f64,
}

impl<'a> Engine<'a> {
    fn reserve(&mut self, tokens: u64) -> Result<(), EngineError> {
        self.kv_used += tokens;
        if self.kv_used > self.config.kv_capacity {
            return Err(bug(format!(
                "kv over-committed: {} of {} tokens",
                self.kv_used, self.config.kv_capacity
            )));
        }
        Ok(())
    }

    fn release(&mut self, tokens: u64) {
        debug_assert!(self.kv_used >= tokens, "kv release underflow");
        self.kv_used = self.kv_used.saturating_sub(tokens);
    }

    fn ingest(&mut self, request: &Request, class: VehicleClass, slo: f64, isolated_e2e: f64) {
        self.active.insert(
            request.id,
            Active {
                request: request.clone(),
                class,
                deadline: request.arrival_time + slo,
                slo,
                isolated_e2e,
                kv_alloc: 0,
                rng: request_rng(self.config.seed, request.id),
                first_token: None,
                preemption_count: 0,
                preempted_seconds: 0.0,
                preempted_since: None,
            },
        );
        self.events.push(Event::Arrive {
            t: request.arrival_time,
            id: request.id,
            class,
        });
    }

    fn apply_preemption(&mut self, id: u64, now: f64) -> Result<(), EngineError> {
        let (freed, tokens_generated) = {
            let active = self
                .active
                .get_mut(&id)
                .ok_or_else(|| bug(format!("preempting unknown request {id}")))?;
            let tokens_generated = match active.request.state {
                RequestState::Prefilling { .. } => 0,
                RequestState::Decoding { tokens_generated } => tokens_generated,
                ref state => {
                    return Err(bug(format!("preempting request {id} in state {state:?}")))
                }
            };
            active.request = advance_state(active.request.clone(), LifecycleEvent::Preempt)?;
            active.preemption_count += 1;
            active.preempted_since = Some(now);
            let freed = active.kv_alloc;
            active.kv_alloc = 0;
            (freed, tokens_generated)
        };
        self.release(freed);
        self.events.push(Event::Preempt {
            t: now,
            id,
            tokens_generated,
        });
        Ok(())
    }

    /// Grant one prefill chunk, scheduling the request first if it was off
    /// the engine. Returns (chunk tokens, inline stage seconds, completed).
    fn apply_admission(
        &mut self,
        id: u64,
        chunk: u64,
        now: f64,
    ) -> Result<(u64, f64, bool), EngineError> {
        let mut inline = 0.0;
        let scheduled = {
            let active = self
                .active
                .get_mut(&id)
                .ok_or_else(|| bug(format!("admitting unknown request {id}")))?;
            if matches!(
                active.request.state,
                RequestState::Waiting | RequestState::Preempted { .. }
            ) {
                if let Some(since) = active.preempted_since.take() {
                    active.preempted_seconds += now - since;
                }
                active.request = advance_state(active.request.clone(), LifecycleEvent::Schedule)?;
                active.kv_alloc = active.request.prefill_tokens();
                let (pre, enc) = stage_costs(self.profile, &active.request, &mut active.rng);
                inline = pre + enc;
                Some(active.kv_alloc)
            } else {
                None
            }
        };
        if let Some(footprint) = scheduled {
            self.events.push(Event::Schedule { t: now, id });
            self.reserve(footprint)?;
        }

        let active = self
            .active
            .get_mut(&id)
            .expect("admitted request vanished");
        let done = match active.request.state {
            RequestState::Prefilling { tokens_done } => tokens_done,
            ref state => {
                return Err(bug(format!(
                    "chunk granted to request {id} in state {state:?}"
                )))
            }
        };
        let footprint = active.request.prefill_tokens();
        if chunk == 0 || done + chunk > footprint {
            return Err(bug(format!(
                "chunk of {chunk} tokens at {done}/{footprint} for request {id}"
            )));
        }
        active.request = advance_state(
            active.request.clone(),
            LifecycleEvent::PrefillChunk { tokens: chunk },
        )?;
        let completed = matches!(active.request.state, RequestState::Decoding { .. });
        Ok((chunk, inline, completed))
    }

    /// One token of KV growth for a sequence that just produced a token.
    fn grow(&mut self, id: u64) -> Result<(), EngineError> {
        self.reserve(1)?;
        self.active
            .get_mut(&id)
            .expect("growing unknown request")
            .kv_alloc += 1;
        Ok(())
    }

    fn note_first_token(&mut self, id: u64, t: f64) {
        let fresh = {
            let active = self.active.get_mut(&id).expect("unknown request");
            if active.first_token.is_none() {
                active.first_token = Some(t);
                true
            } else {
                false
            }
        };
        if fresh {
            self.events.push(Event::FirstToken { t, id });
        }
    }

    fn output_done(&self, id: u64) -> bool {
        let active = &self.active[&id];
        matches!(
            active.request.state,
            RequestState::Decoding { tokens_generated }
                if tokens_generated == active.request.output_tokens
        )
    }

    fn finish_request(&mut self, id: u64, now: f64) -> Result<(), EngineError> {
        let mut active = self.active.remove(&id).expect("finishing unknown request");
        active.request = advance_state(active.request, LifecycleEvent::Finish)?;
        self.release(active.kv_alloc);
        self.events.push(Event::Finish { t: now, id });
        self.makespan = now;
        self.records.push(RequestRecord {
            id,
            modality: active.request.modality,
            class: active.class,
            arrival: active.request.arrival_time,
            first_token: active
                .first_token
                .expect("finished request never emitted a token"),
            completion: now,
            output_tokens: active.request.output_tokens,
            preemption_count: active.preemption_count,
            preempted_seconds: active.preempted_seconds,
            isolated_e2e: active.isolated_e2e,
            slo: active.slo,
        });
        Ok(())
    }

    #[cfg(debug_assertions)]
    fn audit(&self) {
        let mut total = 0u64;
        for active in self.active.values() {
            let expected = match active.request.state {
                RequestState::Waiting | RequestState::Preempted { .. } => 0,
                RequestState::Prefilling { .. } => active.request.prefill_tokens(),
                RequestState::Decoding { tokens_generated } => {
                    active.request.prefill_tokens() + tokens_generated
                }
                RequestState::Finished => unreachable!(),
            };
            assert_eq!(
                active.kv_alloc, expected,
                "kv allocation of request {} drifted",
                active.request.id
            );
            total += active.kv_alloc;
        }
        assert_eq!(total, self.kv_used, "kv ledger drifted");
        assert!(self.kv_used <= self.config.kv_capacity, "kv over capacity");
    }

    #[cfg(not(debug_assertions))]
    fn audit(&self) {}
}

/// Simulate a trace under one policy.
///
/// The trace must carry isolated-latency annotations; deadlines are
/// `slo_scale` times each request's unloaded end-to-end latency. Requests
/// that could never complete because footprint plus output exceeds the KV
/// capacity are rejected up front.
pub fn run(
    trace: &Trace,
    profile: &ModelProfile,
    policy: &mut dyn SchedulingPolicy,
    config: &SimConfig,
    artifacts: &CalibrationArtifacts,
) -> Result<SimOutput, EngineError> {
    config.validate()?;
    let oracle = trace.oracle.as_ref().ok_or(EngineError::UnannotatedTrace)?;
    if oracle.len() != trace.requests.len() {
        return Err(EngineError::InvalidTrace(format!(
            "{} requests but {} oracle annotations",
            trace.requests.len(),
            oracle.len()
        )));
    }
    let mut seen = BTreeSet::new();
    for request in &trace.requests {
        request.validate()?;
        if !seen.insert(request.id) {
            return Err(EngineError::InvalidTrace(format!(
                "duplicate request id {}",
                request.id
            )));
        }
        let required = request.prefill_tokens() + request.output_tokens;
        if required > config.kv_capacity {
            return Err(EngineError::CapacityImpossible {
                id: request.id,
                required,
                capacity: config.kv_capacity,
            });
        }
    }
    let mut order: Vec<usize> = (0..trace.requests.len()).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (&trace.requests[a], &trace.requests[b]);
        ra.arrival_time
            .total_cmp(&rb.arrival_time)
            .then(ra.id.cmp(&rb.id))
    });

    let mode = policy.classifier_mode();
    let mut engine = Engine {
        profile,
        config,
        clock: KahanSum::new(0.0),
        active: BTreeMap::new(),
        kv_used: 0,
        events: Vec::new(),
        records: Vec::new(),
        iterations: 0,
        makespan: 0.0,
    };
    let total = trace.requests.len();
    let mut next_arrival = 0usize;
    let mut stall = 0u64;

    while engine.records.len() < total {
        let now = engine.clock.value();

        while next_arrival < total && trace.requests[order[next_arrival]].arrival_time <= now {
            let idx = order[next_arrival];
            let request = &trace.requests[idx];
            let class = ingest_class(mode, artifacts, request);
            let slo = config.slo_scale * oracle[idx].e2e;
            engine.ingest(request, class, slo, oracle[idx].e2e);
            next_arrival += 1;
        }

        let mut items: Vec<SchedItem> = engine.active.values().map(Active::item).collect();
        items.sort_by(|a, b| {
            a.arrival_time
                .total_cmp(&b.arrival_time)
                .then(a.id.cmp(&b.id))
        });
        let decision = policy.decide(&SchedState {
            clock: now,
            chunk_budget: config.chunk_budget,
            kv_free: config.kv_capacity - engine.kv_used,
            items: &items,
        });

        let mut touched = BTreeSet::new();
        for &id in &decision.preemptions {
            if !touched.insert(id) {
                return Err(bug(format!("request {id} preempted twice")));
            }
            engine.apply_preemption(id, now)?;
        }

        let decode_ids: Vec<u64> = engine
            .active
            .iter()
            .filter(|(_, a)| matches!(a.request.state, RequestState::Decoding { .. }))
            .map(|(&id, _)| id)
            .collect();

        let mut chunk_total = 0u64;
        let mut inline_stages = 0.0;
        let mut completions: Vec<u64> = Vec::new();
        for admission in &decision.admissions {
            if !touched.insert(admission.id) {
                return Err(bug(format!(
                    "request {} admitted after being touched this iteration",
                    admission.id
                )));
            }
            let (chunk, inline, completed) =
                engine.apply_admission(admission.id, admission.chunk, now)?;
            chunk_total += chunk;
            inline_stages += inline;
            if completed {
                completions.push(admission.id);
            }
        }

        if chunk_total + decode_ids.len() as u64 > config.chunk_budget {
            return Err(bug(format!(
                "iteration spends {} prefill tokens with {} decodes against a budget of {}",
                chunk_total,
                decode_ids.len(),
                config.chunk_budget
            )));
        }

        if chunk_total == 0 && decode_ids.is_empty() {
            if next_arrival < total {
                let jump = trace.requests[order[next_arrival]].arrival_time;
                debug_assert!(jump > now, "idle jump must move forward");
                engine.clock.set(jump);
                continue;
            }
            let queued = engine
                .active
                .values()
                .filter(|a| {
                    matches!(
                        a.request.state,
                        RequestState::Waiting | RequestState::Preempted { .. }
                    )
                })
                .count();
            return Err(EngineError::Deadlock {
                clock: now,
                queued,
                running: engine.active.len() - queued,
            });
        }

        let dt = iteration_time(profile, chunk_total, decode_ids.len() as u64, inline_stages)?;
        engine.clock.add(dt);
        engine.iterations += 1;
        let end = engine.clock.value();

        let finished_before = engine.records.len();
        for id in decode_ids {
            {
                let active = engine.active.get_mut(&id).expect("decoding request vanished");
                active.request = advance_state(active.request.clone(), LifecycleEvent::DecodeStep)?;
            }
            engine.grow(id)?;
            if engine.output_done(id) {
                engine.finish_request(id, end)?;
            }
        }
        for id in completions {
            engine.grow(id)?;
            engine.note_first_token(id, end);
            if engine.output_done(id) {
                engine.finish_request(id, end)?;
            }
        }

        stall = if engine.records.len() > finished_before {
            0
        } else {
            stall + 1
        };
        if stall > STALL_LIMIT {
            return Err(EngineError::Deadlock {
                clock: end,
                queued: 0,
                running: engine.active.len(),
            });
        }
        engine.audit();
    }

    engine.records.sort_by_key(|r| r.id);
    Ok(SimOutput {
        records: engine.records,
        events: engine.events,
        iterations: engine.iterations,
        makespan: engine.makespan,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calibrate::calibrate;
    use crate::config::PolicyName;
    use crate::policy::build_policy;
    use crate::request::Modality;
    use crate::workload::{generate, WorkloadSpec};
    use std::sync::OnceLock;

    fn artifacts() -> &'static CalibrationArtifacts {
        static CELL: OnceLock<CalibrationArtifacts> = OnceLock::new();
        CELL.get_or_init(|| {
            calibrate(
                &ModelProfile::default(),
                &WorkloadSpec::default(),
                60,
                2048,
                7,
            )
            .unwrap()
        })
    }

    fn text_request(id: u64, arrival: f64, prompt: u64, output: u64) -> Request {
        Request {
            id,
            modality: Modality::Text,
            arrival_time: arrival,
            prompt_tokens: prompt,
            media_tokens: 0,
            media_size: 0.0,
            output_tokens: output,
            class: None,
            state: RequestState::Waiting,
        }
    }

    fn annotated(requests: Vec<Request>, chunk_budget: u64) -> Trace {
        let mut trace = Trace {
            spec: None,
            requests,
            oracle: None,
        };
        trace
            .annotate(&ModelProfile::default().noiseless(), chunk_budget)
            .unwrap();
        trace
    }

    fn run_policy(trace: &Trace, config: &SimConfig, profile: &ModelProfile) -> SimOutput {
        let mut policy = build_policy(config.policy, &config.priority_params);
        run(trace, profile, policy.as_mut(), config, artifacts()).unwrap()
    }

    #[test]
    fn test_single_request_matches_isolated_run() {
        let trace = annotated(vec![text_request(0, 0.0, 400, 100)], 2048);
        let config = SimConfig {
            policy: PolicyName::Fcfs,
            ..SimConfig::default()
        };
        let out = run_policy(&trace, &config, &ModelProfile::default().noiseless());
        let iso = trace.oracle.as_ref().unwrap()[0];
        let record = &out.records[0];
        assert!((record.ttft() - iso.ttft).abs() < 1e-12);
        assert!((record.e2e() - iso.e2e).abs() < 1e-12);
        assert_eq!(record.preemption_count, 0);
        assert_eq!(out.iterations, 100);
        assert!(matches!(out.events[0], Event::Arrive { id: 0, .. }));
        assert!(matches!(out.events[1], Event::Schedule { id: 0, .. }));
        assert!(matches!(out.events[2], Event::FirstToken { id: 0, .. }));
        assert!(matches!(out.events.last().unwrap(), Event::Finish { id: 0, .. }));
    }

    #[test]
    fn test_shared_prefill_batch_shares_first_token_time() {
        let trace = annotated(
            vec![text_request(0, 0.0, 400, 2), text_request(1, 0.0, 400, 2)],
            2048,
        );
        let config = SimConfig {
            policy: PolicyName::Fcfs,
            ..SimConfig::default()
        };
        let out = run_policy(&trace, &config, &ModelProfile::default().noiseless());
        let expected = 0.005 + 800.0 * 2e-5;
        for record in &out.records {
            assert!((record.first_token - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn test_prefill_chunks_span_iterations() {
        let trace = annotated(vec![text_request(0, 0.0, 5000, 1)], 2048);
        let config = SimConfig {
            policy: PolicyName::Fcfs,
            ..SimConfig::default()
        };
        let out = run_policy(&trace, &config, &ModelProfile::default().noiseless());
        let record = &out.records[0];
        assert_eq!(out.iterations, 3);
        let expected = 3.0 * 0.005 + 5000.0 * 2e-5;
        assert!((record.ttft() - expected).abs() < 1e-12);
        assert!((record.e2e() - expected).abs() < 1e-12);
    }

    #[test]
    fn test_full_kv_queues_later_arrival() {
        let trace = annotated(
            vec![text_request(0, 0.0, 400, 10), text_request(1, 0.0, 400, 5)],
            2048,
        );
        let config = SimConfig {
            policy: PolicyName::Fcfs,
            kv_capacity: 500,
            ..SimConfig::default()
        };
        let out = run_policy(&trace, &config, &ModelProfile::default().noiseless());
        let first = &out.records[0];
        let second = &out.records[1];
        assert_eq!(first.preemption_count, 0);
        assert_eq!(second.preemption_count, 0);
        assert!(second.first_token > first.completion);
    }

    #[test]
    fn test_edf_preemption_restarts_prefill() {
        let trace = annotated(
            vec![text_request(0, 0.0, 450, 2), text_request(1, 0.01, 50, 1)],
            2048,
        );
        let config = SimConfig {
            policy: PolicyName::Edf,
            kv_capacity: 500,
            ..SimConfig::default()
        };
        let out = run_policy(&trace, &config, &ModelProfile::default().noiseless());
        let big = &out.records[0];
        let small = &out.records[1];

        assert_eq!(big.preemption_count, 1);
        assert!((big.first_token - 0.014).abs() < 1e-12);
        assert!((small.completion - 0.020).abs() < 1e-12);
        assert!((big.preempted_seconds - 0.006).abs() < 1e-12);
        assert!((big.completion - 0.0395).abs() < 1e-12);
        assert_eq!(out.iterations, 4);
        assert!(out.events.iter().any(|e| matches!(
            e,
            Event::Preempt { t, id: 0, tokens_generated: 1 } if (t - 0.014).abs() < 1e-12
        )));
    }

    #[test]
    fn test_infeasible_request_rejected_up_front() {
        let trace = annotated(vec![text_request(0, 0.0, 400, 200)], 2048);
        let config = SimConfig {
            policy: PolicyName::Fcfs,
            kv_capacity: 500,
            ..SimConfig::default()
        };
        let mut policy = build_policy(config.policy, &config.priority_params);
        let err = run(
            &trace,
            &ModelProfile::default().noiseless(),
            policy.as_mut(),
            &config,
            artifacts(),
        )
        .unwrap_err();
        assert!(matches!(
            err,
            EngineError::CapacityImpossible {
                id: 0,
                required: 600,
                capacity: 500,
            }
        ));
    }

    #[test]
    fn test_unannotated_trace_rejected() {
        let trace = Trace {
            spec: None,
            requests: vec![text_request(0, 0.0, 100, 1)],
            oracle: None,
        };
        let config = SimConfig::default();
        let mut policy = build_policy(config.policy, &config.priority_params);
        let err = run(
            &trace,
            &ModelProfile::default().noiseless(),
            policy.as_mut(),
            &config,
            artifacts(),
        )
        .unwrap_err();
        assert!(matches!(err, EngineError::UnannotatedTrace));
    }

    #[test]
    fn test_idle_gaps_are_skipped() {
        let trace = annotated(
            vec![text_request(0, 0.0, 400, 5), text_request(1, 100.0, 400, 5)],
            2048,
        );
        let config = SimConfig {
            policy: PolicyName::Fcfs,
            ..SimConfig::default()
        };
        let out = run_policy(&trace, &config, &ModelProfile::default().noiseless());
        assert_eq!(out.iterations, 10);
        assert!(out.records[1].first_token >= 100.0);
        assert!(out.makespan < 100.1);
    }

    #[test]
    fn test_every_policy_completes_a_stressed_workload() {
        let spec = WorkloadSpec {
            duration: 30.0,
            mix: [0.6, 0.25, 0.15],
            max_footprint: Some(16384),
            ..WorkloadSpec::default()
        };
        let mut trace = generate(&spec).unwrap();
        trace.annotate(&ModelProfile::default(), 2048).unwrap();
        for policy_name in PolicyName::ALL {
            let config = SimConfig {
                policy: policy_name,
                kv_capacity: 16384,
                ..SimConfig::default()
            };
            let out = run_policy(&trace, &config, &ModelProfile::default());
            assert_eq!(out.records.len(), trace.requests.len(), "{policy_name}");
            for record in &out.records {
                assert!(record.first_token >= record.arrival, "{policy_name}");
                assert!(record.completion >= record.first_token, "{policy_name}");
            }
        }
    }

    #[test]
    fn test_runs_are_deterministic() {
        let spec = WorkloadSpec {
            duration: 20.0,
            mix: [0.7, 0.2, 0.1],
            ..WorkloadSpec::default()
        };
        let mut trace = generate(&spec).unwrap();
        trace.annotate(&ModelProfile::default(), 2048).unwrap();
        let config = SimConfig {
            policy: PolicyName::Tcm,
            ..SimConfig::default()
        };
        let a = run_policy(&trace, &config, &ModelProfile::default());
        let b = run_policy(&trace, &config, &ModelProfile::default());
        assert_eq!(a.records, b.records);
        assert_eq!(a.events, b.events);
        assert_eq!(a.iterations, b.iterations);
    }

    #[test]
    fn test_classifier_mode_drives_ingest_class() {
        let video = Request {
            id: 9,
            modality: Modality::Video,
            arrival_time: 0.0,
            prompt_tokens: 50,
            media_tokens: 10 * 196,
            media_size: 10.0,
            output_tokens: 16,
            class: None,
            state: RequestState::Waiting,
        };
        let naive = ingest_class(ClassifierMode::Naive, artifacts(), &video);
        assert_eq!(naive, VehicleClass::Truck);
        let smart = ingest_class(ClassifierMode::Smart, artifacts(), &video);
        assert_eq!(smart, VehicleClass::Car);
    }
}
