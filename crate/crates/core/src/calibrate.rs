//! Offline profiling and prefill-latency estimators.
//!
//! Profiling runs each request of a sample trace in isolation against the
//! cost model and records the preprocess, encode, and prefill times plus the
//! KV footprint. Estimators regress the summed latency on the footprint:
//! ordinary least squares for text, pinball-loss quantile regression at the
//! 90th percentile for image and video so that estimates err toward
//! overprediction.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::classify::ClusterModel;
use crate::cost::{request_rng, stage_costs, ModelProfile};
use crate::kahan::KahanSum;
use crate::request::{Modality, Request};
use crate::workload::{Trace, WorkloadError, WorkloadSpec};

/// Profiling dataset size per modality.
pub const PROFILE_SAMPLES_PER_MODALITY: usize = 300;

/// Quantile targeted by the image and video estimators.
pub const QUANTILE_TAU: f64 = 0.9;

/// Minimum text samples with distinct prompt lengths for an OLS fit.
pub const MIN_TEXT_SAMPLES: usize = 2;

/// Minimum image and video samples for a quantile fit.
pub const MIN_MEDIA_SAMPLES: usize = 10;

const QUANTILE_ITERS: usize = 10_000;

#[derive(Debug, thiserror::Error)]
pub enum CalibrationError {
    #[error("{modality:?}: need at least {needed} profiling samples, got {got}")]
    InsufficientData {
        modality: Modality,
        needed: usize,
        got: usize,
    },
    #[error("{modality:?}: all predictor values identical, cannot fit a slope")]
    DegenerateDesign { modality: Modality },
    #[error("calibration input: {0}")]
    BadInput(String),
    #[error(transparent)]
    Workload(#[from] WorkloadError),
    #[error(transparent)]
    Classify(#[from] crate::classify::ClassifyError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("artifact file {path}: {source}")]
    Artifact {
        path: String,
        source: serde_json::Error,
    },
}

/// One isolated profiling measurement.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProfileSample {
    pub modality: Modality,
    pub prompt_tokens: u64,
    pub media_tokens: u64,
    pub media_size: f64,
    pub preprocess_time: f64,
    pub encode_time: f64,
    pub prefill_time: f64,
    pub footprint_tokens: u64,
}

impl ProfileSample {
    /// The estimator regression target: everything between scheduling and
    /// the first output token when run alone.
    pub fn total_latency(&self) -> f64 {
        self.preprocess_time + self.encode_time + self.prefill_time
    }
}

/// Build a trace for profiling: a fixed number of draws per modality from
/// the spec's size distributions, all at arrival time zero.
pub fn profiling_trace(
    spec: &WorkloadSpec,
    per_modality: usize,
    seed: u64,
) -> Result<Trace, WorkloadError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut requests = Vec::with_capacity(per_modality * Modality::ALL.len());
    for modality in Modality::ALL {
        for _ in 0..per_modality {
            let id = requests.len() as u64;
            requests.push(spec.draw_body(&mut rng, id, modality, 0.0)?);
        }
    }
    Ok(Trace {
        spec: Some(spec.clone()),
        requests,
        oracle: None,
    })
}

/// Measure every request of `trace` in isolation. Stage times carry the
/// profile's noise, drawn from a per-request stream of `noise_seed`; the
/// chunked prefill compute time is deterministic.
pub fn profile(
    profile: &ModelProfile,
    trace: &Trace,
    chunk_budget: u64,
    noise_seed: u64,
) -> Result<Vec<ProfileSample>, CalibrationError> {
    if chunk_budget == 0 {
        return Err(CalibrationError::BadInput("chunk budget must be >= 1".into()));
    }
    let mut samples = Vec::with_capacity(trace.requests.len());
    for request in &trace.requests {
        let mut rng = request_rng(noise_seed, request.id);
        let (preprocess_time, encode_time) = stage_costs(profile, request, &mut rng);
        let total = request.prefill_tokens();
        let mut prefill = KahanSum::new(0.0);
        let mut done = 0u64;
        while done < total {
            let chunk = (total - done).min(chunk_budget);
            prefill.add(profile.iter_overhead + profile.prefill_cost * chunk as f64);
            done += chunk;
        }
        samples.push(ProfileSample {
            modality: request.modality,
            prompt_tokens: request.prompt_tokens,
            media_tokens: request.media_tokens,
            media_size: request.media_size,
            preprocess_time,
            encode_time,
            prefill_time: prefill.value(),
            footprint_tokens: total,
        });
    }
    Ok(samples)
}

/// Affine latency model over footprint tokens.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineModel {
    pub intercept: f64,
    pub slope: f64,
}

impl AffineModel {
    pub fn eval(&self, x: f64) -> f64 {
        self.intercept + self.slope * x
    }
}

/// Fitted per-modality latency models.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimators {
    pub text: AffineModel,
    pub image: AffineModel,
    pub video: AffineModel,
}

impl Estimators {
    pub fn model(&self, modality: Modality) -> &AffineModel {
        match modality {
            Modality::Text => &self.text,
            Modality::Image => &self.image,
            Modality::Video => &self.video,
        }
    }

    /// Predicted isolated prefill latency, clamped at zero.
    pub fn predict(&self, modality: Modality, footprint_tokens: u64) -> f64 {
        self.model(modality).eval(footprint_tokens as f64).max(0.0)
    }
}

/// Predicted scheduling impact of one request.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImpactEstimate {
    pub prefill_latency: f64,
    pub kv_footprint: u64,
}

/// Predict a request's prefill latency and KV footprint. The footprint is
/// exact (token counts are known from tokenization); only latency is
/// model-based.
pub fn estimate(estimators: &Estimators, request: &Request) -> ImpactEstimate {
    let kv_footprint = request.prefill_tokens();
    ImpactEstimate {
        prefill_latency: estimators.predict(request.modality, kv_footprint),
        kv_footprint,
    }
}

/// Empirical quantile with linear interpolation on the sorted values.
pub fn empirical_quantile(values: &[f64], q: f64) -> f64 {
    assert!(!values.is_empty(), "quantile of empty slice");
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let h = (sorted.len() - 1) as f64 * q.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Ordinary least squares of `y` on `x`.
pub fn fit_ols(x: &[f64], y: &[f64]) -> Result<AffineModel, CalibrationError> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(CalibrationError::BadInput(format!(
            "ols needs two same-length series, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    let mx = mean(x);
    let my = mean(y);
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for (&xi, &yi) in x.iter().zip(y) {
        sxx += (xi - mx) * (xi - mx);
        sxy += (xi - mx) * (yi - my);
    }
    if sxx == 0.0 {
        return Err(CalibrationError::BadInput(
            "ols predictor is constant".into(),
        ));
    }
    let slope = sxy / sxx;
    Ok(AffineModel {
        intercept: my - slope * mx,
        slope,
    })
}

/// Affine quantile regression by subgradient descent on the pinball loss.
///
/// Inputs are standardized, coefficients initialized at the empirical
/// quantile, and the returned model averages the second half of the iterate
/// sequence. A constant predictor degrades gracefully to the empirical
/// quantile of `y` with zero slope.
pub fn fit_quantile(x: &[f64], y: &[f64], tau: f64) -> Result<AffineModel, CalibrationError> {
    if x.len() != y.len() || x.is_empty() {
        return Err(CalibrationError::BadInput(format!(
            "quantile fit needs two same-length nonempty series, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    if !(tau > 0.0 && tau < 1.0) {
        return Err(CalibrationError::BadInput(format!(
            "tau must lie in (0, 1), got {tau}"
        )));
    }
    let n = x.len();
    let mx = mean(x);
    let sx = (x.iter().map(|v| (v - mx) * (v - mx)).sum::<f64>() / n as f64).sqrt();
    if sx == 0.0 {
        return Ok(AffineModel {
            intercept: empirical_quantile(y, tau),
            slope: 0.0,
        });
    }
    let my = mean(y);
    let sy = (y.iter().map(|v| (v - my) * (v - my)).sum::<f64>() / n as f64).sqrt();
    if sy == 0.0 {
        return Ok(AffineModel {
            intercept: y[0],
            slope: 0.0,
        });
    }

    let z: Vec<f64> = x.iter().map(|v| (v - mx) / sx).collect();
    let u: Vec<f64> = y.iter().map(|v| (v - my) / sy).collect();

    let mut a = empirical_quantile(&u, tau);
    let mut b = 0.0;
    let mut a_tail = KahanSum::new(0.0);
    let mut b_tail = KahanSum::new(0.0);
    let tail_start = QUANTILE_ITERS / 2;
    for t in 0..QUANTILE_ITERS {
        let mut ga = 0.0;
        let mut gb = 0.0;
        for (&zi, &ui) in z.iter().zip(&u) {
            let r = ui - a - b * zi;
            let d = if r > 0.0 {
                -tau
            } else if r < 0.0 {
                1.0 - tau
            } else {
                0.0
            };
            ga += d;
            gb += d * zi;
        }
        let step = 1.0 / ((t + 1) as f64).sqrt();
        a -= step * ga / n as f64;
        b -= step * gb / n as f64;
        if t >= tail_start {
            a_tail.add(a);
            b_tail.add(b);
        }
    }
    let tail = (QUANTILE_ITERS - tail_start) as f64;
    let a = a_tail.value() / tail;
    let b = b_tail.value() / tail;

    let slope = sy * b / sx;
    Ok(AffineModel {
        intercept: my + sy * a - slope * mx,
        slope,
    })
}

fn series(samples: &[ProfileSample], modality: Modality) -> (Vec<f64>, Vec<f64>) {
    let mut x = Vec::new();
    let mut y = Vec::new();
    for s in samples.iter().filter(|s| s.modality == modality) {
        x.push(s.footprint_tokens as f64);
        y.push(s.total_latency());
    }
    (x, y)
}

fn check_design(
    modality: Modality,
    x: &[f64],
    needed: usize,
) -> Result<(), CalibrationError> {
    if x.len() < needed {
        return Err(CalibrationError::InsufficientData {
            modality,
            needed,
            got: x.len(),
        });
    }
    if x.iter().all(|&v| v == x[0]) {
        return Err(CalibrationError::DegenerateDesign { modality });
    }
    Ok(())
}

/// Fit the three per-modality latency models from profiling samples.
pub fn fit_estimators(samples: &[ProfileSample]) -> Result<Estimators, CalibrationError> {
    let (tx, ty) = series(samples, Modality::Text);
    let (ix, iy) = series(samples, Modality::Image);
    let (vx, vy) = series(samples, Modality::Video);
    check_design(Modality::Text, &tx, MIN_TEXT_SAMPLES)?;
    check_design(Modality::Image, &ix, MIN_MEDIA_SAMPLES)?;
    check_design(Modality::Video, &vx, MIN_MEDIA_SAMPLES)?;
    Ok(Estimators {
        text: fit_ols(&tx, &ty)?,
        image: fit_quantile(&ix, &iy, QUANTILE_TAU)?,
        video: fit_quantile(&vx, &vy, QUANTILE_TAU)?,
    })
}

/// Everything a class-aware policy needs at serving time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationArtifacts {
    pub estimators: Estimators,
    pub clusters: ClusterModel,
}

/// Artifact files hold one entry per model profile name.
pub type ArtifactStore = BTreeMap<String, CalibrationArtifacts>;

/// Profile the model, fit estimators, and train the cluster model in one
/// pass. `seed` drives both the profiling draws and the measurement noise.
pub fn calibrate(
    model: &ModelProfile,
    spec: &WorkloadSpec,
    per_modality: usize,
    chunk_budget: u64,
    seed: u64,
) -> Result<CalibrationArtifacts, CalibrationError> {
    let trace = profiling_trace(spec, per_modality, seed)?;
    let samples = profile(model, &trace, chunk_budget, seed)?;
    let estimators = fit_estimators(&samples)?;
    let clusters = crate::classify::train_clusters(&samples, &estimators, seed)?;
    Ok(CalibrationArtifacts {
        estimators,
        clusters,
    })
}

pub fn save_artifacts(path: &Path, store: &ArtifactStore) -> Result<(), CalibrationError> {
    let json =
        serde_json::to_string_pretty(store).map_err(|source| CalibrationError::Artifact {
            path: path.display().to_string(),
            source,
        })?;
    fs::write(path, json + "\n")?;
    Ok(())
}

pub fn load_artifacts(path: &Path) -> Result<ArtifactStore, CalibrationError> {
    let raw = fs::read_to_string(path)?;
    serde_json::from_str(&raw).map_err(|source| CalibrationError::Artifact {
        path: path.display().to_string(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cost::noise_factor;
    use crate::request::RequestState;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;

    fn request(modality: Modality, prompt: u64, media: u64, size: f64) -> Request {
        Request {
            id: 0,
            modality,
            arrival_time: 0.0,
            prompt_tokens: prompt,
            media_tokens: media,
            media_size: size,
            output_tokens: 8,
            class: None,
            state: RequestState::Waiting,
        }
    }

    fn trace_of(requests: Vec<Request>) -> Trace {
        let requests = requests
            .into_iter()
            .enumerate()
            .map(|(i, mut r)| {
                r.id = i as u64;
                r
            })
            .collect();
        Trace {
            spec: None,
            requests,
            oracle: None,
        }
    }

    #[test]
    fn test_profile_records_stage_decomposition() {
        let model = ModelProfile::default().noiseless();
        let trace = trace_of(vec![
            request(Modality::Text, 400, 0, 0.0),
            request(Modality::Image, 50, 729, 1.0),
        ]);
        let samples = profile(&model, &trace, 2048, 0).unwrap();

        assert_eq!(samples[0].footprint_tokens, 400);
        assert_eq!(samples[0].preprocess_time, 0.0);
        assert_eq!(samples[0].encode_time, 0.0);
        assert_abs_diff_eq!(samples[0].prefill_time, 0.013, epsilon = 1e-12);

        assert_eq!(samples[1].footprint_tokens, 779);
        assert_abs_diff_eq!(samples[1].preprocess_time, 0.07, epsilon = 1e-12);
        assert_abs_diff_eq!(samples[1].encode_time, 0.10, epsilon = 1e-12);
        assert_abs_diff_eq!(samples[1].prefill_time, 0.02058, epsilon = 1e-12);

        assert!(profile(&model, &trace_of(vec![]), 2048, 0)
            .unwrap()
            .is_empty());
    }

    #[test]
    fn test_profile_noise_is_deterministic() {
        let model = ModelProfile::default();
        let trace = profiling_trace(&WorkloadSpec::default(), 20, 5).unwrap();
        let a = profile(&model, &trace, 2048, 11).unwrap();
        let b = profile(&model, &trace, 2048, 11).unwrap();
        assert_eq!(a, b);
        let c = profile(&model, &trace, 2048, 12).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn test_profiling_trace_shape() {
        let trace = profiling_trace(&WorkloadSpec::default(), 30, 1).unwrap();
        assert_eq!(trace.len(), 90);
        for (i, r) in trace.requests.iter().enumerate() {
            assert_eq!(r.id, i as u64);
            r.validate().unwrap();
        }
        let texts = trace
            .requests
            .iter()
            .filter(|r| r.modality == Modality::Text)
            .count();
        assert_eq!(texts, 30);
    }

    #[test]
    fn test_ols_recovers_exact_line() {
        let x: Vec<f64> = (1..=50).map(|i| (i * 40) as f64).collect();
        let y: Vec<f64> = x.iter().map(|v| 0.005 + 2e-5 * v).collect();
        let m = fit_ols(&x, &y).unwrap();
        assert_abs_diff_eq!(m.intercept, 0.005, epsilon = 1e-9);
        assert_abs_diff_eq!(m.slope, 2e-5, epsilon = 1e-9);
        let residual: f64 = x
            .iter()
            .zip(&y)
            .map(|(&xi, &yi)| (yi - m.eval(xi)).abs())
            .sum();
        assert!(residual < 1e-12, "residual {residual}");
    }

    #[test]
    fn test_noiseless_fit_recovers_cost_coefficients() {
        // Single-chunk prompts make the profiling latency exactly affine, so
        // OLS must return the cost model's own coefficients.
        let spec = WorkloadSpec {
            text_prompt: crate::workload::TokenDist {
                median: 350.0,
                sigma: 1.0,
                min: 10,
                max: 2000,
            },
            ..WorkloadSpec::default()
        };
        let model = ModelProfile::default().noiseless();
        let trace = profiling_trace(&spec, 50, 3).unwrap();
        let estimators = fit_estimators(&profile(&model, &trace, 2048, 3).unwrap()).unwrap();
        assert_abs_diff_eq!(estimators.text.intercept, 0.005, epsilon = 1e-12);
        assert_abs_diff_eq!(estimators.text.slope, 2e-5, epsilon = 1e-12);
    }

    #[test]
    fn test_quantile_constant_predictor_matches_sort_oracle() {
        let y: Vec<f64> = (0..200).map(|i| (i as f64 * 0.37).sin() + 2.0).collect();
        let x = vec![7.0; y.len()];
        let m = fit_quantile(&x, &y, 0.9).unwrap();
        assert_eq!(m.slope, 0.0);
        assert_abs_diff_eq!(m.intercept, empirical_quantile(&y, 0.9), epsilon = 1e-12);
    }

    #[test]
    fn test_quantile_coverage_on_multiplicative_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let n = 1000;
        let x: Vec<f64> = (0..n).map(|i| 500.0 + (i as f64) * 30.0).collect();
        let y: Vec<f64> = x
            .iter()
            .map(|&xi| (0.1 + 1e-4 * xi) * noise_factor(0.1, &mut rng))
            .collect();
        let m = fit_quantile(&x, &y, 0.9).unwrap();
        assert!(m.slope > 0.0);
        let covered = x
            .iter()
            .zip(&y)
            .filter(|(&xi, &yi)| yi <= m.eval(xi))
            .count() as f64
            / n as f64;
        assert!(
            (0.87..=0.93).contains(&covered),
            "coverage {covered} outside [0.87, 0.93]"
        );
    }

    #[test]
    fn test_quantile_coverage_on_symmetric_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let n = 1000;
        let x: Vec<f64> = (0..n).map(|i| i as f64).collect();
        let y: Vec<f64> = x
            .iter()
            .map(|&xi| {
                let z: f64 = rand_distr::Distribution::sample(
                    &rand_distr::StandardNormal,
                    &mut rng,
                );
                1.0 + 0.002 * xi + 0.05 * z
            })
            .collect();
        let m = fit_quantile(&x, &y, 0.9).unwrap();
        let covered = x
            .iter()
            .zip(&y)
            .filter(|(&xi, &yi)| yi <= m.eval(xi))
            .count() as f64
            / n as f64;
        assert!(
            (covered - 0.9).abs() <= 0.03,
            "coverage {covered} not within 0.9 +- 0.03"
        );
    }

    #[test]
    fn test_fit_estimators_rejects_thin_or_flat_data() {
        let model = ModelProfile::default().noiseless();
        let mut requests = vec![request(Modality::Text, 400, 0, 0.0)];
        for _ in 0..12 {
            requests.push(request(Modality::Image, 50, 729, 1.0));
            requests.push(request(Modality::Video, 50, 196 * 16, 16.0));
        }
        let samples = profile(&model, &trace_of(requests), 2048, 0).unwrap();
        assert!(matches!(
            fit_estimators(&samples),
            Err(CalibrationError::InsufficientData {
                modality: Modality::Text,
                ..
            })
        ));

        // Enough text rows but all the same prompt length.
        let mut requests = vec![request(Modality::Text, 400, 0, 0.0); 20];
        for _ in 0..12 {
            requests.push(request(Modality::Image, 50, 729, 1.0));
            requests.push(request(Modality::Video, 50, 196 * 16, 16.0));
        }
        let samples = profile(&model, &trace_of(requests), 2048, 0).unwrap();
        assert!(matches!(
            fit_estimators(&samples),
            Err(CalibrationError::DegenerateDesign {
                modality: Modality::Text,
            })
        ));

        // Too few image samples.
        let requests = vec![
            request(Modality::Text, 400, 0, 0.0),
            request(Modality::Text, 900, 0, 0.0),
            request(Modality::Image, 50, 729, 1.0),
        ];
        let samples = profile(&model, &trace_of(requests), 2048, 0).unwrap();
        assert!(matches!(
            fit_estimators(&samples),
            Err(CalibrationError::InsufficientData {
                modality: Modality::Image,
                ..
            })
        ));
    }

    #[test]
    fn test_estimate_footprint_is_exact() {
        let estimators = Estimators {
            text: AffineModel {
                intercept: 0.005,
                slope: 2e-5,
            },
            image: AffineModel {
                intercept: 0.2,
                slope: 2e-5,
            },
            video: AffineModel {
                intercept: 1.0,
                slope: 3e-5,
            },
        };
        let e = estimate(&estimators, &request(Modality::Text, 400, 0, 0.0));
        assert_eq!(e.kv_footprint, 400);
        assert_abs_diff_eq!(e.prefill_latency, 0.013, epsilon = 1e-12);

        let e = estimate(&estimators, &request(Modality::Image, 50, 729, 1.0));
        assert_eq!(e.kv_footprint, 779);

        // A negative-going model clamps at zero.
        let sloped = Estimators {
            text: AffineModel {
                intercept: -1.0,
                slope: 1e-6,
            },
            ..estimators
        };
        let e = estimate(&sloped, &request(Modality::Text, 10, 0, 0.0));
        assert_eq!(e.prefill_latency, 0.0);
    }

    #[test]
    fn test_default_calibration_predictions_sane() {
        // Text and video latencies grow with footprint, so their fitted
        // slopes must be positive. Image latency is dominated by the
        // megapixel-driven stage costs, which do not follow the footprint,
        // so only its predictions are constrained.
        let artifacts = calibrate(
            &ModelProfile::default(),
            &WorkloadSpec::default(),
            PROFILE_SAMPLES_PER_MODALITY,
            2048,
            1,
        )
        .unwrap();
        assert!(artifacts.estimators.text.slope > 0.0);
        assert!(artifacts.estimators.video.slope > 0.0);
        assert!(artifacts.estimators.video.intercept > 0.0);
        for fp in [675, 800, 1049] {
            let p = artifacts.estimators.predict(Modality::Image, fp);
            assert!(p > 0.1 && p < 1.0, "image prediction {p} at {fp}");
        }
    }

    #[test]
    fn test_artifact_store_round_trip() {
        let artifacts = calibrate(
            &ModelProfile::default(),
            &WorkloadSpec::default(),
            40,
            2048,
            2,
        )
        .unwrap();
        let mut store = ArtifactStore::new();
        store.insert("default".into(), artifacts);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("artifacts.json");
        save_artifacts(&path, &store).unwrap();
        let loaded = load_artifacts(&path).unwrap();
        assert_eq!(loaded, store);
    }
}
