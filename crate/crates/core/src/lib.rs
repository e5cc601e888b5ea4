//! Discrete-event simulator and scheduling library for multimodal LLM
//! serving.
//!
//! Requests carrying text, image, or video inputs arrive over a Poisson
//! process and run on a simulated continuous-batching engine with chunked
//! prefill and a KV cache. Scheduling policies range from FCFS to a
//! class-aware aging scheme that sorts requests into motorcycles, cars, and
//! trucks by predicted resource impact.

pub mod calibrate;
pub mod classify;
pub mod config;
pub mod cost;
pub mod engine;
pub mod experiment;
mod kahan;
pub mod metrics;
pub mod policy;
pub mod request;
pub mod workload;

pub use calibrate::{
    calibrate, estimate, fit_estimators, CalibrationArtifacts, Estimators, ImpactEstimate,
    ProfileSample,
};
pub use classify::{classify_naive, classify_smart, train_clusters, ClusterModel};
pub use config::{parse_mix, PolicyName, SimConfig};
pub use engine::{ingest_class, run, EngineError, Event, SimOutput};
pub use experiment::{
    builtin_plan, goodput, run_cell, run_experiment, ExperimentError, ExperimentPlan, MixPoint,
    Sweep, BUILTIN_PLANS,
};
pub use metrics::{attainment, goodput_search, summarize, GroupStats, RequestRecord, Summary};
pub use cost::{isolated_e2e, iteration_time, stage_costs, IsolatedLatency, ModelProfile};
pub use policy::{build_policy, priority, score, PriorityParams, SchedDecision, SchedulingPolicy};
pub use request::{advance_state, Modality, Request, RequestState, VehicleClass};
pub use workload::{generate, Trace, WorkloadSpec};
