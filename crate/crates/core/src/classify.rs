//! Request classification into Motorcycle, Car, and Truck.
//!
//! The naive classifier maps modality directly to a class. The smart
//! classifier clusters profiling samples in a standardized
//! (log10 estimated latency, log10 KV footprint) plane with k-means, labels
//! the centroids light to heavy, and assigns new requests to the nearest
//! centroid, so a long text prompt can land with the images and a short
//! video clip with the cars.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::calibrate::{Estimators, ImpactEstimate, ProfileSample};
use crate::request::{Modality, Request, VehicleClass};

/// Floor for latency features so a degenerate zero estimate stays finite in
/// log space.
const LATENCY_FLOOR: f64 = 1e-6;

const RESTARTS: usize = 10;
const MAX_ITERS: usize = 100;
const MOVE_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ClassifyError {
    #[error("clustering needs at least 3 samples, got {0}")]
    InsufficientData(usize),
    #[error("clustering needs at least 3 distinct feature points")]
    DegenerateClusters,
}

/// Modality-only mapping: text rides light, video hauls heavy.
pub fn classify_naive(request: &Request) -> VehicleClass {
    match request.modality {
        Modality::Text => VehicleClass::Motorcycle,
        Modality::Image => VehicleClass::Car,
        Modality::Video => VehicleClass::Truck,
    }
}

/// Trained clustering model over standardized log-space features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterModel {
    /// Centroids in standardized feature space, ordered Motorcycle, Car,
    /// Truck by ascending coordinate sum.
    pub centroids: [[f64; 2]; 3],
    pub feature_mean: [f64; 2],
    pub feature_std: [f64; 2],
}

impl ClusterModel {
    fn feature(&self, latency: f64, footprint: u64) -> [f64; 2] {
        let raw = raw_feature(latency, footprint);
        [
            (raw[0] - self.feature_mean[0]) / self.feature_std[0],
            (raw[1] - self.feature_mean[1]) / self.feature_std[1],
        ]
    }
}

fn raw_feature(latency: f64, footprint: u64) -> [f64; 2] {
    [
        latency.max(LATENCY_FLOOR).log10(),
        (footprint.max(1) as f64).log10(),
    ]
}

fn dist2(a: [f64; 2], b: [f64; 2]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    dx * dx + dy * dy
}

/// K-means result with centroids in ascending coordinate-sum order.
#[derive(Debug, Clone, PartialEq)]
pub struct KmeansFit {
    pub centroids: [[f64; 2]; 3],
    /// Per-point index into `centroids`.
    pub assignments: Vec<usize>,
    /// Sum of squared distances to assigned centroids.
    pub objective: f64,
}

fn nearest(centroids: &[[f64; 2]; 3], p: [f64; 2]) -> (usize, f64) {
    let mut best = (0, dist2(p, centroids[0]));
    for (i, c) in centroids.iter().enumerate().skip(1) {
        let d = dist2(p, *c);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

fn lloyd(points: &[[f64; 2]], mut centroids: [[f64; 2]; 3]) -> KmeansFit {
    let mut assignments = vec![0usize; points.len()];
    for _ in 0..MAX_ITERS {
        for (a, &p) in assignments.iter_mut().zip(points) {
            *a = nearest(&centroids, p).0;
        }
        let mut sums = [[0.0f64; 2]; 3];
        let mut counts = [0usize; 3];
        for (&a, &p) in assignments.iter().zip(points) {
            sums[a][0] += p[0];
            sums[a][1] += p[1];
            counts[a] += 1;
        }
        let mut movement = 0.0f64;
        for i in 0..3 {
            let next = if counts[i] == 0 {
                // Restart an empty cluster at the point farthest from its
                // assigned centroid.
                let far = points
                    .iter()
                    .enumerate()
                    .max_by(|(ia, &pa), (ib, &pb)| {
                        let da = dist2(pa, centroids[assignments[*ia]]);
                        let db = dist2(pb, centroids[assignments[*ib]]);
                        da.total_cmp(&db).then(ib.cmp(ia))
                    })
                    .map(|(_, &p)| p)
                    .expect("nonempty points");
                far
            } else {
                [
                    sums[i][0] / counts[i] as f64,
                    sums[i][1] / counts[i] as f64,
                ]
            };
            movement = movement.max(dist2(centroids[i], next).sqrt());
            centroids[i] = next;
        }
        if movement < MOVE_TOL {
            break;
        }
    }
    for (a, &p) in assignments.iter_mut().zip(points) {
        *a = nearest(&centroids, p).0;
    }
    let objective = assignments
        .iter()
        .zip(points)
        .map(|(&a, &p)| dist2(p, centroids[a]))
        .sum();
    KmeansFit {
        centroids,
        assignments,
        objective,
    }
}

fn farthest_point_seed(points: &[[f64; 2]], first: usize) -> [[f64; 2]; 3] {
    let c0 = points[first];
    let pick = |chosen: &[[f64; 2]]| {
        points
            .iter()
            .enumerate()
            .max_by(|(ia, &pa), (ib, &pb)| {
                let da = chosen.iter().map(|&c| dist2(pa, c)).fold(f64::MAX, f64::min);
                let db = chosen.iter().map(|&c| dist2(pb, c)).fold(f64::MAX, f64::min);
                da.total_cmp(&db).then(ib.cmp(ia))
            })
            .map(|(_, &p)| p)
            .expect("nonempty points")
    };
    let c1 = pick(&[c0]);
    let c2 = pick(&[c0, c1]);
    [c0, c1, c2]
}

/// K-means with k=3: farthest-point seeding, multiple restarts, best
/// objective kept, deterministic under `seed`.
pub fn kmeans3(points: &[[f64; 2]], seed: u64) -> Result<KmeansFit, ClassifyError> {
    if points.len() < 3 {
        return Err(ClassifyError::InsufficientData(points.len()));
    }
    let mut distinct: Vec<[u64; 2]> = points
        .iter()
        .map(|p| [p[0].to_bits(), p[1].to_bits()])
        .collect();
    distinct.sort();
    distinct.dedup();
    if distinct.len() < 3 {
        return Err(ClassifyError::DegenerateClusters);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<KmeansFit> = None;
    for _ in 0..RESTARTS {
        let first = rng.random_range(0..points.len());
        let fit = lloyd(points, farthest_point_seed(points, first));
        if best.as_ref().map_or(true, |b| fit.objective < b.objective) {
            best = Some(fit);
        }
    }
    let mut fit = best.expect("at least one restart");

    // Relabel so centroid 0 is the lightest and 2 the heaviest.
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| {
        let sa = fit.centroids[a][0] + fit.centroids[a][1];
        let sb = fit.centroids[b][0] + fit.centroids[b][1];
        sa.total_cmp(&sb).then(fit.centroids[a][0].total_cmp(&fit.centroids[b][0]))
    });
    let centroids = [
        fit.centroids[order[0]],
        fit.centroids[order[1]],
        fit.centroids[order[2]],
    ];
    let mut relabel = [0usize; 3];
    for (new, &old) in order.iter().enumerate() {
        relabel[old] = new;
    }
    for a in &mut fit.assignments {
        *a = relabel[*a];
    }
    Ok(KmeansFit {
        centroids,
        assignments: fit.assignments,
        objective: fit.objective,
    })
}

/// Train the clustering model on profiling samples, using the fitted
/// estimators to produce the latency feature each request will carry at
/// serving time.
pub fn train_clusters(
    samples: &[ProfileSample],
    estimators: &Estimators,
    seed: u64,
) -> Result<ClusterModel, ClassifyError> {
    let raw: Vec<[f64; 2]> = samples
        .iter()
        .map(|s| {
            raw_feature(
                estimators.predict(s.modality, s.footprint_tokens),
                s.footprint_tokens,
            )
        })
        .collect();
    if raw.len() < 3 {
        return Err(ClassifyError::InsufficientData(raw.len()));
    }

    let n = raw.len() as f64;
    let mut mean = [0.0f64; 2];
    for p in &raw {
        mean[0] += p[0];
        mean[1] += p[1];
    }
    mean[0] /= n;
    mean[1] /= n;
    let mut var = [0.0f64; 2];
    for p in &raw {
        var[0] += (p[0] - mean[0]) * (p[0] - mean[0]);
        var[1] += (p[1] - mean[1]) * (p[1] - mean[1]);
    }
    let std = [
        (var[0] / n).sqrt().max(1e-12),
        (var[1] / n).sqrt().max(1e-12),
    ];

    let points: Vec<[f64; 2]> = raw
        .iter()
        .map(|p| [(p[0] - mean[0]) / std[0], (p[1] - mean[1]) / std[1]])
        .collect();
    let fit = kmeans3(&points, seed)?;
    Ok(ClusterModel {
        centroids: fit.centroids,
        feature_mean: mean,
        feature_std: std,
    })
}

/// Nearest-centroid assignment; distance ties go to the heavier class so
/// borderline requests are never under-provisioned.
pub fn classify_smart(model: &ClusterModel, estimate: &ImpactEstimate) -> VehicleClass {
    let p = model.feature(estimate.prefill_latency, estimate.kv_footprint);
    let mut best = (VehicleClass::Truck, dist2(p, model.centroids[2]));
    for (class, centroid) in [
        (VehicleClass::Car, model.centroids[1]),
        (VehicleClass::Motorcycle, model.centroids[0]),
    ] {
        let d = dist2(p, centroid);
        if d < best.1 {
            best = (class, d);
        }
    }
    best.0
}

/// Estimate a request's impact and classify it in one step.
pub fn smart_class(
    estimators: &Estimators,
    model: &ClusterModel,
    request: &Request,
) -> VehicleClass {
    classify_smart(model, &crate::calibrate::estimate(estimators, request))
}
