//! Synthetic affine cost model for engine iterations and modality stages.
//!
//! One engine iteration costs `c0 + c_p * prefill_tokens + c_d * decode_seqs`,
//! plus any preprocess/encode stage time executed inline. Stage times are
//! affine in the raw media size and carry optional multiplicative log-normal
//! noise with mean 1; the LLM iteration terms are deterministic.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::kahan::KahanSum;
use crate::request::{Modality, Request};

/// Affine stage cost: `base + per_unit * media_size` seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageCost {
    pub base: f64,
    pub per_unit: f64,
}

impl StageCost {
    pub fn eval(&self, size: f64) -> f64 {
        self.base + self.per_unit * size
    }
}

/// Cost coefficients for one served model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelProfile {
    pub name: String,
    /// Fixed per-iteration overhead c0, seconds.
    pub iter_overhead: f64,
    /// Seconds per prefill token, c_p.
    pub prefill_cost: f64,
    /// Seconds per decoding sequence per iteration, c_d.
    pub decode_cost: f64,
    pub image_preprocess: StageCost,
    pub image_encode: StageCost,
    pub video_preprocess: StageCost,
    pub video_encode: StageCost,
    /// Coefficient of variation of the multiplicative noise on stage times.
    /// Zero disables noise entirely.
    pub noise_cv: f64,
}

impl Default for ModelProfile {
    fn default() -> Self {
        ModelProfile {
            name: "default".into(),
            iter_overhead: 0.005,
            prefill_cost: 2.0e-5,
            decode_cost: 5.0e-4,
            image_preprocess: StageCost {
                base: 0.05,
                per_unit: 0.02,
            },
            image_encode: StageCost {
                base: 0.08,
                per_unit: 0.02,
            },
            video_preprocess: StageCost {
                base: 0.42,
                per_unit: 0.0002,
            },
            video_encode: StageCost {
                base: 0.58,
                per_unit: 0.0004,
            },
            noise_cv: 0.1,
        }
    }
}

impl ModelProfile {
    /// Same coefficients with noise disabled, for oracle computations.
    pub fn noiseless(&self) -> ModelProfile {
        ModelProfile {
            noise_cv: 0.0,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CostError {
    #[error("iteration with no prefill tokens and no decode sequences")]
    EmptyIteration,
    #[error("chunk budget must be >= 1")]
    InvalidChunkBudget,
}

/// Deterministic per-request RNG stream, derived from the run seed and the
/// request id so that sampled noise does not depend on scheduling order.
pub(crate) fn request_rng(seed: u64, request_id: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&request_id.to_le_bytes());
    key[16] = 0x5C;
    ChaCha8Rng::from_seed(key)
}

/// Multiplicative log-normal factor with mean 1 and the given coefficient of
/// variation. Draws nothing when `cv` is zero.
pub fn noise_factor<R: Rng + ?Sized>(cv: f64, rng: &mut R) -> f64 {
    if cv <= 0.0 {
        return 1.0;
    }
    let sigma2 = (1.0 + cv * cv).ln();
    let sigma = sigma2.sqrt();
    let z: f64 = StandardNormal.sample(rng);
    (-0.5 * sigma2 + sigma * z).exp()
}

/// Sample the (preprocess, encode) stage times for a request.
///
/// Text requests cost exactly (0, 0) and consume no randomness.
pub fn stage_costs<R: Rng + ?Sized>(
    profile: &ModelProfile,
    request: &Request,
    rng: &mut R,
) -> (f64, f64) {
    let (pre, enc) = match request.modality {
        Modality::Text => return (0.0, 0.0),
        Modality::Image => (
            profile.image_preprocess.eval(request.media_size),
            profile.image_encode.eval(request.media_size),
        ),
        Modality::Video => (
            profile.video_preprocess.eval(request.media_size),
            profile.video_encode.eval(request.media_size),
        ),
    };
    (
        pre * noise_factor(profile.noise_cv, rng),
        enc * noise_factor(profile.noise_cv, rng),
    )
}

/// Wall time of one engine iteration.
pub fn iteration_time(
    profile: &ModelProfile,
    prefill_tokens: u64,
    decode_seqs: u64,
    inline_stage_seconds: f64,
) -> Result<f64, CostError> {
    if prefill_tokens == 0 && decode_seqs == 0 {
        return Err(CostError::EmptyIteration);
    }
    Ok(inline_stage_seconds
        + profile.iter_overhead
        + profile.prefill_cost * prefill_tokens as f64
        + profile.decode_cost * decode_seqs as f64)
}

/// Latency of a request run alone on the engine, noise disabled.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IsolatedLatency {
    pub ttft: f64,
    pub e2e: f64,
}

/// Closed-form single-request execution: chunked prefill with the stage costs
/// inline in the first iteration, then one decode iteration per remaining
/// output token. This is the SLO reference, so noise is always off.
pub fn isolated_e2e(
    profile: &ModelProfile,
    request: &Request,
    chunk_budget: u64,
) -> Result<IsolatedLatency, CostError> {
    if chunk_budget == 0 {
        return Err(CostError::InvalidChunkBudget);
    }
    let (pre, enc) = match request.modality {
        Modality::Text => (0.0, 0.0),
        Modality::Image => (
            profile.image_preprocess.eval(request.media_size),
            profile.image_encode.eval(request.media_size),
        ),
        Modality::Video => (
            profile.video_preprocess.eval(request.media_size),
            profile.video_encode.eval(request.media_size),
        ),
    };

    let total = request.prefill_tokens();
    let mut clock = KahanSum::new(0.0);
    let mut done = 0u64;
    let mut first_iteration = true;
    while done < total {
        let chunk = (total - done).min(chunk_budget);
        let inline = if first_iteration { pre + enc } else { 0.0 };
        clock.add(iteration_time(profile, chunk, 0, inline)?);
        done += chunk;
        first_iteration = false;
    }
    let ttft = clock.value();
    for _ in 1..request.output_tokens {
        clock.add(iteration_time(profile, 0, 1, 0.0)?);
    }
    Ok(IsolatedLatency {
        ttft,
        e2e: clock.value(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::request::RequestState;
    use approx::assert_abs_diff_eq;

    fn request(modality: Modality, prompt: u64, media: u64, size: f64, out: u64) -> Request {
        Request {
            id: 0,
            modality,
            arrival_time: 0.0,
            prompt_tokens: prompt,
            media_tokens: media,
            media_size: size,
            output_tokens: out,
            class: None,
            state: RequestState::Waiting,
        }
    }

    fn profile() -> ModelProfile {
        ModelProfile {
            noise_cv: 0.0,
            ..ModelProfile::default()
        }
    }

    fn per_megapixel(pre: f64, enc: f64) -> ModelProfile {
        ModelProfile {
            image_preprocess: StageCost {
                base: pre,
                per_unit: 0.02,
            },
            image_encode: StageCost {
                base: enc,
                per_unit: 0.02,
            },
            ..profile()
        }
    }

    #[test]
    fn test_stage_costs_image_one_megapixel() {
        let (pre, enc) = stage_costs(
            &per_megapixel(0.05, 0.08),
            &request(Modality::Image, 50, 729, 1.0, 64),
            &mut request_rng(0, 0),
        );
        assert_abs_diff_eq!(pre, 0.07, epsilon = 1e-12);
        assert_abs_diff_eq!(enc, 0.10, epsilon = 1e-12);
    }

    #[test]
    fn test_stage_costs_video_128_frames() {
        // Coefficients are affine in the frame count regardless of the
        // profile defaults; checked with explicit values.
        let mut p = profile();
        p.video_preprocess = StageCost {
            base: 0.1,
            per_unit: 0.008,
        };
        p.video_encode = StageCost {
            base: 0.2,
            per_unit: 0.008,
        };
        let (pre, enc) = stage_costs(
            &p,
            &request(Modality::Video, 50, 128 * 196, 128.0, 64),
            &mut request_rng(0, 0),
        );
        assert_abs_diff_eq!(pre, 1.124, epsilon = 1e-12);
        assert_abs_diff_eq!(enc, 1.224, epsilon = 1e-12);
    }

    #[test]
    fn test_stage_costs_text_exactly_zero() {
        let mut p = profile();
        p.noise_cv = 0.5;
        let (pre, enc) = stage_costs(
            &p,
            &request(Modality::Text, 500, 0, 0.0, 64),
            &mut request_rng(3, 9),
        );
        assert_eq!((pre, enc), (0.0, 0.0));
    }

    #[test]
    fn test_noise_factor_mean_near_one() {
        let mut rng = request_rng(42, 1);
        let n = 20_000;
        let mean: f64 = (0..n).map(|_| noise_factor(0.1, &mut rng)).sum::<f64>() / n as f64;
        assert!((mean - 1.0).abs() < 0.01, "mean {mean}");
        assert_eq!(noise_factor(0.0, &mut rng), 1.0);
    }

    #[test]
    fn test_iteration_time_examples() {
        let p = profile();
        assert_abs_diff_eq!(
            iteration_time(&p, 400, 0, 0.0).unwrap(),
            0.013,
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(
            iteration_time(&p, 0, 8, 0.0).unwrap(),
            0.009,
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(
            iteration_time(&p, 2048, 4, 1.0).unwrap(),
            1.04796,
            epsilon = 1e-12
        );
        assert_eq!(
            iteration_time(&p, 0, 0, 0.0),
            Err(CostError::EmptyIteration)
        );
    }

    #[test]
    fn test_iteration_time_monotone_in_load() {
        let p = profile();
        let base = iteration_time(&p, 100, 2, 0.0).unwrap();
        assert!(iteration_time(&p, 101, 2, 0.0).unwrap() > base);
        assert!(iteration_time(&p, 100, 3, 0.0).unwrap() > base);
        assert!(iteration_time(&p, 100, 2, 0.5).unwrap() > base);
    }

    #[test]
    fn test_isolated_text() {
        let lat = isolated_e2e(&profile(), &request(Modality::Text, 400, 0, 0.0, 100), 2048).unwrap();
        assert_abs_diff_eq!(lat.ttft, 0.013, epsilon = 1e-12);
        assert_abs_diff_eq!(lat.e2e, 0.5575, epsilon = 1e-12);
    }

    #[test]
    fn test_isolated_image_inline_stages() {
        // 0.17 s of inline stage time: preprocess 0.07 + encode 0.10 at 1 MP.
        let lat = isolated_e2e(
            &per_megapixel(0.05, 0.08),
            &request(Modality::Image, 50, 729, 1.0, 64),
            2048,
        )
        .unwrap();
        assert_abs_diff_eq!(lat.ttft, 0.19058, epsilon = 1e-12);
        assert_abs_diff_eq!(lat.e2e, 0.53708, epsilon = 1e-12);
    }

    #[test]
    fn test_isolated_video_chunked_prefill() {
        // 30,050 prefill tokens need 15 chunks of 2048; inline stage time 2.0 s.
        let mut p = profile();
        p.video_preprocess = StageCost {
            base: 0.9,
            per_unit: 0.0,
        };
        p.video_encode = StageCost {
            base: 1.1,
            per_unit: 0.0,
        };
        let lat = isolated_e2e(&p, &request(Modality::Video, 62, 29_988, 153.0, 1), 2048).unwrap();
        assert_abs_diff_eq!(lat.ttft, 2.676, epsilon = 1e-12);
        assert_abs_diff_eq!(lat.e2e, 2.676, epsilon = 1e-12);
    }

    #[test]
    fn test_isolated_rejects_zero_budget() {
        assert_eq!(
            isolated_e2e(&profile(), &request(Modality::Text, 10, 0, 0.0, 1), 0),
            Err(CostError::InvalidChunkBudget)
        );
    }

    #[test]
    fn test_isolated_ignores_noise() {
        let mut noisy = profile();
        noisy.noise_cv = 0.3;
        let req = request(Modality::Image, 50, 729, 2.0, 32);
        let a = isolated_e2e(&noisy, &req, 2048).unwrap();
        let b = isolated_e2e(&noisy.noiseless(), &req, 2048).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn test_request_rng_is_stable_per_request() {
        let a: u64 = request_rng(9, 4).random();
        let b: u64 = request_rng(9, 4).random();
        let c: u64 = request_rng(9, 5).random();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
