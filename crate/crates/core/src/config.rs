//! Simulation configuration.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::policy::PriorityParams;
use crate::request::CoreError;

/// Named workload mixes as (text, image, video) fractions.
pub const MIX_TEXT_ONLY: [f64; 3] = [1.0, 0.0, 0.0];
pub const MIX_MULTIMODAL_LIGHT: [f64; 3] = [0.90, 0.07, 0.03];
pub const MIX_MULTIMODAL_HEAVY: [f64; 3] = [0.60, 0.25, 0.15];

/// Parse a mix given either as a named alias (TO, ML, MH) or as three
/// comma-separated fractions.
pub fn parse_mix(s: &str) -> Result<[f64; 3], String> {
    match s.to_ascii_uppercase().as_str() {
        "TO" => return Ok(MIX_TEXT_ONLY),
        "ML" => return Ok(MIX_MULTIMODAL_LIGHT),
        "MH" => return Ok(MIX_MULTIMODAL_HEAVY),
        _ => {}
    }
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 3 {
        return Err(format!(
            "mix must be TO, ML, MH or three comma-separated fractions, got {s:?}"
        ));
    }
    let mut mix = [0.0; 3];
    for (slot, part) in mix.iter_mut().zip(&parts) {
        *slot = part
            .trim()
            .parse::<f64>()
            .map_err(|e| format!("bad mix fraction {part:?}: {e}"))?;
    }
    Ok(mix)
}

/// Scheduling policy selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyName {
    Fcfs,
    Edf,
    NaiveAging,
    StaticNaive,
    StaticSmart,
    Tcm,
}

impl PolicyName {
    pub const ALL: [PolicyName; 6] = [
        PolicyName::Fcfs,
        PolicyName::Edf,
        PolicyName::NaiveAging,
        PolicyName::StaticNaive,
        PolicyName::StaticSmart,
        PolicyName::Tcm,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PolicyName::Fcfs => "fcfs",
            PolicyName::Edf => "edf",
            PolicyName::NaiveAging => "naive-aging",
            PolicyName::StaticNaive => "static-naive",
            PolicyName::StaticSmart => "static-smart",
            PolicyName::Tcm => "tcm",
        }
    }
}

impl fmt::Display for PolicyName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PolicyName {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "fcfs" => Ok(PolicyName::Fcfs),
            "edf" => Ok(PolicyName::Edf),
            "naive-aging" => Ok(PolicyName::NaiveAging),
            "static-naive" => Ok(PolicyName::StaticNaive),
            "static-smart" => Ok(PolicyName::StaticSmart),
            "tcm" => Ok(PolicyName::Tcm),
            other => Err(format!(
                "unknown policy {other:?} (expected one of fcfs, edf, naive-aging, static-naive, static-smart, tcm)"
            )),
        }
    }
}

/// Knobs for one simulation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    /// Mean arrival rate, requests per second.
    pub request_rate: f64,
    /// Length of the arrival window, seconds. The engine keeps running past
    /// this until every request finishes.
    pub duration: f64,
    /// (text, image, video) arrival fractions.
    pub workload_mix: [f64; 3],
    /// KV cache capacity, tokens.
    pub kv_capacity: u64,
    /// Per-iteration token budget shared by prefill chunks and decodes.
    pub chunk_budget: u64,
    /// SLO threshold as a multiple of the isolated end-to-end latency.
    pub slo_scale: f64,
    pub policy: PolicyName,
    pub seed: u64,
    pub priority_params: PriorityParams,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            request_rate: 2.0,
            duration: 300.0,
            workload_mix: MIX_MULTIMODAL_HEAVY,
            kv_capacity: 131_072,
            chunk_budget: 2048,
            slo_scale: 5.0,
            policy: PolicyName::Tcm,
            seed: 1,
            priority_params: PriorityParams::default(),
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), CoreError> {
        let bad = |field: &'static str, reason: String| CoreError::InvalidConfig { field, reason };
        if !(self.request_rate.is_finite() && self.request_rate > 0.0) {
            return Err(bad(
                "request_rate",
                format!("must be finite and > 0, got {}", self.request_rate),
            ));
        }
        if !(self.duration.is_finite() && self.duration > 0.0) {
            return Err(bad(
                "duration",
                format!("must be finite and > 0, got {}", self.duration),
            ));
        }
        let sum: f64 = self.workload_mix.iter().sum();
        if self.workload_mix.iter().any(|f| !f.is_finite() || *f < 0.0)
            || (sum - 1.0).abs() > 1e-9
        {
            return Err(bad(
                "workload_mix",
                format!("fractions must be >= 0 and sum to 1, got {:?}", self.workload_mix),
            ));
        }
        if self.kv_capacity == 0 {
            return Err(bad("kv_capacity", "must be >= 1".into()));
        }
        if self.chunk_budget == 0 {
            return Err(bad("chunk_budget", "must be >= 1".into()));
        }
        if !(self.slo_scale.is_finite() && self.slo_scale > 0.0) {
            return Err(bad(
                "slo_scale",
                format!("must be finite and > 0, got {}", self.slo_scale),
            ));
        }
        self.priority_params.validate()?;
        Ok(())
    }
}
