//! Per-request outcome records, grouped latency and SLO summaries, and the
//! bisection search for the highest sustainable request rate.

use serde::{Deserialize, Serialize};

use crate::calibrate::empirical_quantile;
use crate::request::{Modality, VehicleClass};

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("cannot summarize zero records")]
    EmptyInput,
}

/// Final outcome of one simulated request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestRecord {
    pub id: u64,
    pub modality: Modality,
    /// Class the scheduler grouped the request under. Policies without a
    /// classifier of their own carry the cluster-based class here so reports
    /// stay comparable.
    pub class: VehicleClass,
    pub arrival: f64,
    /// Absolute time the first output token came back.
    pub first_token: f64,
    /// Absolute time the last output token came back.
    pub completion: f64,
    pub output_tokens: u64,
    pub preemption_count: u64,
    /// Seconds spent evicted, summed over every preemption.
    pub preempted_seconds: f64,
    /// End-to-end latency of the same request on an empty system.
    pub isolated_e2e: f64,
    /// Deadline on end-to-end latency, `slo_scale` times the isolated run.
    pub slo: f64,
}

impl RequestRecord {
    pub fn ttft(&self) -> f64 {
        self.first_token - self.arrival
    }

    pub fn e2e(&self) -> f64 {
        self.completion - self.arrival
    }

    /// End-to-end latency per output token.
    pub fn normalized_latency(&self) -> f64 {
        self.e2e() / self.output_tokens.max(1) as f64
    }

    pub fn violated(&self) -> bool {
        self.e2e() > self.slo
    }

    /// Delay beyond the deadline in seconds, zero when met.
    pub fn severity(&self) -> f64 {
        (self.e2e() - self.slo).max(0.0)
    }
}

/// Aggregate statistics over one group of records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupStats {
    pub requests: usize,
    pub mean_ttft: f64,
    pub p50_ttft: f64,
    pub p90_ttft: f64,
    pub mean_normalized_latency: f64,
    pub violation_rate: f64,
    /// Mean severity across violators only; zero when nothing violated.
    pub mean_violation_severity: f64,
    pub preemptions: u64,
    pub preempted_seconds: f64,
}

/// Per-class and overall statistics for one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub motorcycle: Option<GroupStats>,
    pub car: Option<GroupStats>,
    pub truck: Option<GroupStats>,
    pub overall: GroupStats,
}

impl Summary {
    pub fn class(&self, class: VehicleClass) -> Option<&GroupStats> {
        match class {
            VehicleClass::Motorcycle => self.motorcycle.as_ref(),
            VehicleClass::Car => self.car.as_ref(),
            VehicleClass::Truck => self.truck.as_ref(),
        }
    }
}

fn group_stats(records: &[&RequestRecord]) -> GroupStats {
    let n = records.len();
    let ttfts: Vec<f64> = records.iter().map(|r| r.ttft()).collect();
    let violators: Vec<f64> = records
        .iter()
        .filter(|r| r.violated())
        .map(|r| r.severity())
        .collect();
    GroupStats {
        requests: n,
        mean_ttft: ttfts.iter().sum::<f64>() / n as f64,
        p50_ttft: empirical_quantile(&ttfts, 0.5),
        p90_ttft: empirical_quantile(&ttfts, 0.9),
        mean_normalized_latency: records
            .iter()
            .map(|r| r.normalized_latency())
            .sum::<f64>()
            / n as f64,
        violation_rate: violators.len() as f64 / n as f64,
        mean_violation_severity: if violators.is_empty() {
            0.0
        } else {
            violators.iter().sum::<f64>() / violators.len() as f64
        },
        preemptions: records.iter().map(|r| r.preemption_count).sum(),
        preempted_seconds: records.iter().map(|r| r.preempted_seconds).sum(),
    }
}

/// Reduce records to per-class and overall statistics.
pub fn summarize(records: &[RequestRecord]) -> Result<Summary, MetricsError> {
    if records.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let class_stats = |class: VehicleClass| {
        let members: Vec<&RequestRecord> =
            records.iter().filter(|r| r.class == class).collect();
        if members.is_empty() {
            None
        } else {
            Some(group_stats(&members))
        }
    };
    Ok(Summary {
        motorcycle: class_stats(VehicleClass::Motorcycle),
        car: class_stats(VehicleClass::Car),
        truck: class_stats(VehicleClass::Truck),
        overall: group_stats(&records.iter().collect::<Vec<_>>()),
    })
}

/// Fraction of records meeting their SLO, optionally restricted to one
/// class. An empty selection counts as full attainment.
pub fn attainment(records: &[RequestRecord], class: Option<VehicleClass>) -> f64 {
    let (met, total) = records
        .iter()
        .filter(|r| class.is_none_or(|c| r.class == c))
        .fold((0usize, 0usize), |(met, total), r| {
            (met + usize::from(!r.violated()), total + 1)
        });
    if total == 0 {
        1.0
    } else {
        met as f64 / total as f64
    }
}

#[derive(Debug, thiserror::Error)]
pub enum GoodputError<E: std::error::Error + 'static> {
    #[error(
        "attainment {attained:.3} at the high bound {hi} still meets the \
         threshold; the bounds do not bracket the knee"
    )]
    BracketInvalid { hi: f64, attained: f64 },
    #[error(transparent)]
    Probe(E),
}

/// Largest probed request rate whose SLO attainment stays at or above
/// `threshold`, located by bisection down to `resolution` requests per
/// second.
///
/// `attain` maps a rate to the attained SLO fraction on a fresh workload.
/// When even the low bound misses the threshold the low bound itself comes
/// back, marking that no probed rate sustains the target. A high bound that
/// still meets the threshold is rejected as an invalid bracket.
pub fn goodput_search<E, F>(
    mut attain: F,
    bounds: (f64, f64),
    threshold: f64,
    resolution: f64,
) -> Result<f64, GoodputError<E>>
where
    E: std::error::Error,
    F: FnMut(f64) -> Result<f64, E>,
{
    let (mut lo, mut hi) = bounds;
    assert!(
        lo > 0.0 && hi > lo && resolution > 0.0,
        "bounds must be positive and increasing"
    );
    if attain(lo).map_err(GoodputError::Probe)? < threshold {
        return Ok(lo);
    }
    let at_hi = attain(hi).map_err(GoodputError::Probe)?;
    if at_hi >= threshold {
        return Err(GoodputError::BracketInvalid {
            hi,
            attained: at_hi,
        });
    }
    while hi - lo > resolution {
        let mid = 0.5 * (lo + hi);
        if attain(mid).map_err(GoodputError::Probe)? >= threshold {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(lo)
}
