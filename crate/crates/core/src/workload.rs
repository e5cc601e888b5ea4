//! Synthetic open-loop workload generation.
//!
//! Arrivals form a Poisson process; each arrival draws a modality from the
//! configured mix and sizes from per-modality distributions. Generation is
//! bit-reproducible for a given spec.

use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::config::SimConfig;
use crate::cost::{isolated_e2e, CostError, IsolatedLatency, ModelProfile};
use crate::request::{Modality, Request, RequestState};

#[derive(Debug, thiserror::Error)]
pub enum WorkloadError {
    #[error("workload spec: {0}")]
    DistSanity(String),
    #[error("request {id} needs {required} kv tokens but capacity is {capacity}")]
    InfeasibleRequest {
        id: u64,
        required: u64,
        capacity: u64,
    },
    #[error("trace line {line}: {source}")]
    Parse {
        line: usize,
        source: serde_json::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Cost(#[from] CostError),
}

/// Clipped log-normal over integer token counts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TokenDist {
    pub median: f64,
    pub sigma: f64,
    pub min: u64,
    pub max: u64,
}

impl TokenDist {
    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> u64 {
        let z: f64 = StandardNormal.sample(rng);
        let v = (self.median.ln() + self.sigma * z).exp().round();
        (v as u64).clamp(self.min, self.max)
    }

    fn validate(&self, field: &str) -> Result<(), WorkloadError> {
        if !(self.median.is_finite() && self.median > 0.0)
            || !(self.sigma.is_finite() && self.sigma >= 0.0)
            || self.min == 0
            || self.min > self.max
        {
            return Err(WorkloadError::DistSanity(format!(
                "{field}: need median > 0, sigma >= 0, 1 <= min <= max, got {self:?}"
            )));
        }
        Ok(())
    }
}

/// Full description of a synthetic workload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorkloadSpec {
    pub rate: f64,
    pub duration: f64,
    /// (text, image, video) fractions.
    pub mix: [f64; 3],
    pub seed: u64,
    /// Prompt length for text requests.
    pub text_prompt: TokenDist,
    /// Accompanying prompt length for image and video requests.
    pub media_prompt: TokenDist,
    /// Generation length. Videos draw from the same shape with a
    /// frame-scaled median when `video_output_per_frame` is set.
    pub output: TokenDist,
    /// Center of the image token count.
    pub image_tokens: u64,
    /// Half-width of the uniform jitter around `image_tokens`.
    pub image_token_jitter: u64,
    /// Uniform range of image sizes in megapixels.
    pub image_megapixels: (f64, f64),
    /// Range of video frame counts. Draws are an even mixture of short
    /// clips, uniform over the bottom thirty-second of the range, and
    /// long-form videos, log-uniform over the top quarter, mirroring the
    /// clip-versus-film split of production video traffic while keeping
    /// the mean frame count moderate.
    pub video_frames: (u64, u64),
    pub tokens_per_frame: u64,
    /// Median generated tokens per input frame for videos: a short clip
    /// gets a brief answer, a long film a proportionally longer summary.
    /// `None` gives videos the shared output distribution instead.
    pub video_output_per_frame: Option<f64>,
    /// KV budget one request may ever occupy, prefill footprint plus all
    /// generated tokens (normally the KV capacity). Oversized draws are
    /// clamped down to it, or rejected in strict mode.
    pub max_footprint: Option<u64>,
    pub strict: bool,
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        WorkloadSpec {
            rate: 2.0,
            duration: 300.0,
            mix: crate::config::MIX_MULTIMODAL_HEAVY,
            seed: 1,
            text_prompt: TokenDist {
                median: 350.0,
                sigma: 0.75,
                min: 10,
                max: 10_000,
            },
            media_prompt: TokenDist {
                median: 50.0,
                sigma: 0.5,
                min: 10,
                max: 256,
            },
            output: TokenDist {
                median: 128.0,
                sigma: 0.5,
                min: 1,
                max: 2048,
            },
            image_tokens: 729,
            image_token_jitter: 64,
            image_megapixels: (0.25, 4.0),
            video_frames: (8, 512),
            tokens_per_frame: 196,
            video_output_per_frame: Some(0.75),
            max_footprint: None,
            strict: false,
        }
    }
}

impl WorkloadSpec {
    /// Adopt the knobs a [`SimConfig`] carries, including the KV capacity as
    /// the footprint clamp.
    pub fn from_config(config: &SimConfig) -> Self {
        WorkloadSpec {
            rate: config.request_rate,
            duration: config.duration,
            mix: config.workload_mix,
            seed: config.seed,
            max_footprint: Some(config.kv_capacity),
            ..WorkloadSpec::default()
        }
    }

    pub fn validate(&self) -> Result<(), WorkloadError> {
        if !(self.rate.is_finite() && self.rate > 0.0) {
            return Err(WorkloadError::DistSanity(format!(
                "rate must be > 0, got {}",
                self.rate
            )));
        }
        if !(self.duration.is_finite() && self.duration > 0.0) {
            return Err(WorkloadError::DistSanity(format!(
                "duration must be > 0, got {}",
                self.duration
            )));
        }
        let sum: f64 = self.mix.iter().sum();
        if self.mix.iter().any(|f| !f.is_finite() || *f < 0.0) || (sum - 1.0).abs() > 1e-9 {
            return Err(WorkloadError::DistSanity(format!(
                "mix fractions must be >= 0 and sum to 1, got {:?}",
                self.mix
            )));
        }
        self.text_prompt.validate("text_prompt")?;
        self.media_prompt.validate("media_prompt")?;
        self.output.validate("output")?;
        if self.image_tokens == 0 || self.image_tokens <= self.image_token_jitter {
            return Err(WorkloadError::DistSanity(format!(
                "image_tokens ({}) must exceed image_token_jitter ({})",
                self.image_tokens, self.image_token_jitter
            )));
        }
        if !(self.image_megapixels.0 > 0.0 && self.image_megapixels.0 <= self.image_megapixels.1) {
            return Err(WorkloadError::DistSanity(format!(
                "image_megapixels range invalid: {:?}",
                self.image_megapixels
            )));
        }
        if self.video_frames.0 == 0 || self.video_frames.0 > self.video_frames.1 {
            return Err(WorkloadError::DistSanity(format!(
                "video_frames range invalid: {:?}",
                self.video_frames
            )));
        }
        if let Some(per_frame) = self.video_output_per_frame {
            if !(per_frame.is_finite() && per_frame > 0.0) {
                return Err(WorkloadError::DistSanity(format!(
                    "video_output_per_frame must be > 0, got {per_frame}"
                )));
            }
        }
        if self.tokens_per_frame == 0 {
            return Err(WorkloadError::DistSanity(
                "tokens_per_frame must be >= 1".into(),
            ));
        }
        Ok(())
    }

    fn draw_modality<R: Rng + ?Sized>(&self, rng: &mut R) -> Modality {
        let u: f64 = rng.random();
        if u < self.mix[0] {
            Modality::Text
        } else if u < self.mix[0] + self.mix[1] {
            Modality::Image
        } else {
            Modality::Video
        }
    }

    /// Draw the size fields for one request of the given modality. Used by
    /// trace generation and by calibration's profiling set.
    pub(crate) fn draw_body<R: Rng + ?Sized>(
        &self,
        rng: &mut R,
        id: u64,
        modality: Modality,
        arrival_time: f64,
    ) -> Result<Request, WorkloadError> {
        let (prompt_tokens, media_tokens, media_size) = match modality {
            Modality::Text => (self.text_prompt.sample(rng), 0, 0.0),
            Modality::Image => {
                let prompt = self.media_prompt.sample(rng);
                let j = self.image_token_jitter as i64;
                let jitter = rng.random_range(-j..=j);
                let tokens = (self.image_tokens as i64 + jitter) as u64;
                let mp = rng.random_range(self.image_megapixels.0..=self.image_megapixels.1);
                (prompt, tokens, mp)
            }
            Modality::Video => {
                let prompt = self.media_prompt.sample(rng);
                let (lo, hi) = self.video_frames;
                let clip_max = (hi / 32).clamp(lo, hi);
                let film_min = (hi / 4).clamp(clip_max, hi);
                let frames = if rng.random::<f64>() < 0.5 {
                    rng.random_range(lo..=clip_max)
                } else {
                    let u: f64 = rng.random();
                    let scaled = film_min as f64 * (u * (hi as f64 / film_min as f64).ln()).exp();
                    (scaled.round() as u64).clamp(film_min, hi)
                };
                (prompt, frames * self.tokens_per_frame, frames as f64)
            }
        };
        let output_tokens = match (modality, self.video_output_per_frame) {
            (Modality::Video, Some(per_frame)) => {
                let scaled = TokenDist {
                    median: (media_size * per_frame).max(1.0),
                    ..self.output
                };
                scaled.sample(rng)
            }
            _ => self.output.sample(rng),
        };

        let mut request = Request {
            id,
            modality,
            arrival_time,
            prompt_tokens,
            media_tokens,
            media_size,
            output_tokens,
            class: None,
            state: RequestState::Waiting,
        };
        if let Some(cap) = self.max_footprint {
            if request.prefill_tokens() + request.output_tokens > cap {
                if self.strict {
                    return Err(WorkloadError::InfeasibleRequest {
                        id,
                        required: request.prefill_tokens() + request.output_tokens,
                        capacity: cap,
                    });
                }
                request.output_tokens =
                    request.output_tokens.min(cap.saturating_sub(1)).max(1);
                let room = cap - request.output_tokens;
                clamp_to_footprint(&mut request, room, self.tokens_per_frame);
            }
        }
        Ok(request)
    }
}

/// Shrink an oversized prefill until it fits `cap` tokens, trimming media
/// before the prompt. Video token counts stay a multiple of the frame size.
fn clamp_to_footprint(request: &mut Request, cap: u64, tokens_per_frame: u64) {
    if request.prompt_tokens >= cap {
        request.prompt_tokens = cap.max(1);
        request.media_tokens = 0;
        if request.modality != Modality::Text {
            request.media_size = 0.0;
        }
        return;
    }
    let media_room = cap - request.prompt_tokens;
    match request.modality {
        Modality::Text => {}
        Modality::Image => request.media_tokens = request.media_tokens.min(media_room),
        Modality::Video => {
            let frames = (media_room / tokens_per_frame).max(1);
            request.media_tokens = frames * tokens_per_frame;
            request.media_size = frames as f64;
        }
    }
}

/// A generated workload plus optional per-request isolated-latency
/// annotations.
#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub spec: Option<WorkloadSpec>,
    pub requests: Vec<Request>,
    pub oracle: Option<Vec<IsolatedLatency>>,
}

/// Wire format of one trace line.
#[derive(Debug, Serialize, Deserialize)]
struct TraceLine {
    id: u64,
    modality: Modality,
    arrival_time: f64,
    prompt_tokens: u64,
    media_tokens: u64,
    media_size: f64,
    output_tokens: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    isolated_ttft: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    isolated_e2e: Option<f64>,
}

impl Trace {
    pub fn len(&self) -> usize {
        self.requests.len()
    }

    pub fn is_empty(&self) -> bool {
        self.requests.is_empty()
    }

    /// Fill the isolated-latency oracle annotations.
    pub fn annotate(&mut self, profile: &ModelProfile, chunk_budget: u64) -> Result<(), CostError> {
        let noiseless = profile.noiseless();
        let mut oracle = Vec::with_capacity(self.requests.len());
        for request in &self.requests {
            oracle.push(isolated_e2e(&noiseless, request, chunk_budget)?);
        }
        self.oracle = Some(oracle);
        Ok(())
    }

    /// Serialize as JSON lines, one request per line.
    pub fn to_jsonl<W: Write>(&self, mut w: W) -> Result<(), WorkloadError> {
        for (i, request) in self.requests.iter().enumerate() {
            let isolated = self.oracle.as_ref().map(|o| o[i]);
            let line = TraceLine {
                id: request.id,
                modality: request.modality,
                arrival_time: request.arrival_time,
                prompt_tokens: request.prompt_tokens,
                media_tokens: request.media_tokens,
                media_size: request.media_size,
                output_tokens: request.output_tokens,
                isolated_ttft: isolated.map(|l| l.ttft),
                isolated_e2e: isolated.map(|l| l.e2e),
            };
            serde_json::to_writer(&mut w, &line).map_err(|e| WorkloadError::Parse {
                line: i + 1,
                source: e,
            })?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn from_jsonl<R: BufRead>(r: R) -> Result<Trace, WorkloadError> {
        let mut requests = Vec::new();
        let mut oracle = Vec::new();
        let mut fully_annotated = true;
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: TraceLine =
                serde_json::from_str(&line).map_err(|e| WorkloadError::Parse {
                    line: i + 1,
                    source: e,
                })?;
            requests.push(Request {
                id: parsed.id,
                modality: parsed.modality,
                arrival_time: parsed.arrival_time,
                prompt_tokens: parsed.prompt_tokens,
                media_tokens: parsed.media_tokens,
                media_size: parsed.media_size,
                output_tokens: parsed.output_tokens,
                class: None,
                state: RequestState::Waiting,
            });
            match (parsed.isolated_ttft, parsed.isolated_e2e) {
                (Some(ttft), Some(e2e)) => oracle.push(IsolatedLatency { ttft, e2e }),
                _ => fully_annotated = false,
            }
        }
        Ok(Trace {
            spec: None,
            requests,
            oracle: if fully_annotated && !oracle.is_empty() {
                Some(oracle)
            } else {
                None
            },
        })
    }
}

/// Generate a trace: Poisson arrivals over `[0, duration]`, sizes drawn per
/// modality. Identical specs produce bit-identical traces.
pub fn generate(spec: &WorkloadSpec) -> Result<Trace, WorkloadError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let gap = Exp::new(spec.rate).expect("rate validated above");

    let mut requests = Vec::new();
    let mut t = 0.0f64;
    loop {
        t += gap.sample(&mut rng);
        if t > spec.duration {
            break;
        }
        let modality = spec.draw_modality(&mut rng);
        let id = requests.len() as u64;
        requests.push(spec.draw_body(&mut rng, id, modality, t)?);
    }
    Ok(Trace {
        spec: Some(spec.clone()),
        requests,
        oracle: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn counts(trace: &Trace) -> [usize; 3] {
        let mut c = [0usize; 3];
        for r in &trace.requests {
            c[r.modality as usize] += 1;
        }
        c
    }

    #[test]
    fn test_generation_is_bit_reproducible() {
        let spec = WorkloadSpec {
            duration: 200.0,
            ..WorkloadSpec::default()
        };
        let a = generate(&spec).unwrap();
        let b = generate(&spec).unwrap();
        assert_eq!(a.requests, b.requests);

        let mut buf_a = Vec::new();
        let mut buf_b = Vec::new();
        a.to_jsonl(&mut buf_a).unwrap();
        b.to_jsonl(&mut buf_b).unwrap();
        assert_eq!(buf_a, buf_b);

        let other = generate(&WorkloadSpec { seed: 2, ..spec }).unwrap();
        assert_ne!(a.requests, other.requests);
    }

    #[test]
    fn test_arrivals_sorted_ids_dense() {
        let trace = generate(&WorkloadSpec::default()).unwrap();
        assert!(!trace.is_empty());
        for (i, r) in trace.requests.iter().enumerate() {
            assert_eq!(r.id, i as u64);
            r.validate().unwrap();
            if i > 0 {
                assert!(r.arrival_time >= trace.requests[i - 1].arrival_time);
            }
        }
    }

    #[test]
    fn test_empirical_mix_matches_spec() {
        let spec = WorkloadSpec {
            duration: 1000.0,
            ..WorkloadSpec::default()
        };
        let trace = generate(&spec).unwrap();
        let c = counts(&trace);
        let n = trace.len() as f64;
        for (i, want) in spec.mix.iter().enumerate() {
            let got = c[i] as f64 / n;
            assert!(
                (got - want).abs() < 0.03,
                "modality {i}: fraction {got} vs mix {want}"
            );
        }
    }

    #[test]
    fn test_mean_interarrival_close_to_rate() {
        let spec = WorkloadSpec {
            duration: 1000.0,
            ..WorkloadSpec::default()
        };
        let trace = generate(&spec).unwrap();
        let times: Vec<f64> = trace.requests.iter().map(|r| r.arrival_time).collect();
        let gaps: Vec<f64> = times.windows(2).map(|w| w[1] - w[0]).collect();
        let mean = gaps.iter().sum::<f64>() / gaps.len() as f64;
        let expected = 1.0 / spec.rate;
        assert!(
            (mean - expected).abs() / expected < 0.05,
            "mean gap {mean} vs {expected}"
        );
    }

    #[test]
    fn test_interarrival_gaps_pass_chi_square() {
        // Goodness of fit of the gaps against Exp(rate): ten equal-probability
        // bins, alpha = 0.01, critical value for 9 degrees of freedom.
        let spec = WorkloadSpec {
            duration: 1000.0,
            ..WorkloadSpec::default()
        };
        let trace = generate(&spec).unwrap();
        let times: Vec<f64> = trace.requests.iter().map(|r| r.arrival_time).collect();
        let gaps: Vec<f64> = times.windows(2).map(|w| w[1] - w[0]).collect();

        let bins = 10usize;
        let mut observed = vec![0usize; bins];
        for g in &gaps {
            // CDF of Exp(rate) maps gaps to uniform [0, 1).
            let u = 1.0 - (-spec.rate * g).exp();
            let b = ((u * bins as f64) as usize).min(bins - 1);
            observed[b] += 1;
        }
        let expected = gaps.len() as f64 / bins as f64;
        let stat: f64 = observed
            .iter()
            .map(|&o| {
                let d = o as f64 - expected;
                d * d / expected
            })
            .sum();
        assert!(stat < 21.666, "chi-square statistic {stat}");
    }

    #[test]
    fn test_token_ranges_respect_bands() {
        let spec = WorkloadSpec {
            duration: 2000.0,
            ..WorkloadSpec::default()
        };
        let trace = generate(&spec).unwrap();
        for r in &trace.requests {
            assert!(r.output_tokens >= 1 && r.output_tokens <= 2048);
            match r.modality {
                Modality::Text => {
                    assert!(r.prompt_tokens >= 10 && r.prompt_tokens <= 10_000);
                    assert_eq!(r.media_tokens, 0);
                }
                Modality::Image => {
                    assert!(r.media_tokens >= 665 && r.media_tokens <= 793);
                    assert!(r.media_size >= 0.25 && r.media_size <= 4.0);
                }
                Modality::Video => {
                    assert_eq!(r.media_tokens % spec.tokens_per_frame, 0);
                    let frames = r.media_tokens / spec.tokens_per_frame;
                    assert!(frames >= 8 && frames <= 512);
                    assert_eq!(r.media_size, frames as f64);
                }
            }
        }
    }

    #[test]
    fn test_video_outputs_scale_with_frames() {
        let spec = WorkloadSpec {
            duration: 2000.0,
            ..WorkloadSpec::default()
        };
        let trace = generate(&spec).unwrap();
        let (mut clip_out, mut film_out) = (Vec::new(), Vec::new());
        for r in &trace.requests {
            if r.modality == Modality::Video {
                if r.media_size <= 16.0 {
                    clip_out.push(r.output_tokens as f64);
                } else if r.media_size >= 128.0 {
                    film_out.push(r.output_tokens as f64);
                }
            }
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        assert!(!clip_out.is_empty() && !film_out.is_empty());
        assert!(mean(&clip_out) < 40.0, "clip mean {}", mean(&clip_out));
        assert!(mean(&film_out) > 150.0, "film mean {}", mean(&film_out));

        let flat = WorkloadSpec {
            video_output_per_frame: None,
            ..spec
        };
        let trace = generate(&flat).unwrap();
        let outs: Vec<f64> = trace
            .requests
            .iter()
            .filter(|r| r.modality == Modality::Video && r.media_size <= 16.0)
            .map(|r| r.output_tokens as f64)
            .collect();
        assert!(mean(&outs) > 100.0, "flat clip mean {}", mean(&outs));
    }

    #[test]
    fn test_footprint_clamping() {
        let spec = WorkloadSpec {
            duration: 500.0,
            max_footprint: Some(20_000),
            ..WorkloadSpec::default()
        };
        let trace = generate(&spec).unwrap();
        assert!(trace
            .requests
            .iter()
            .all(|r| r.prefill_tokens() + r.output_tokens <= 20_000));
        // Some videos must have been clamped down to the cap.
        assert!(trace.requests.iter().any(|r| {
            r.modality == Modality::Video && r.prefill_tokens() > 17_000
        }));

        let strict = WorkloadSpec {
            strict: true,
            ..spec
        };
        assert!(matches!(
            generate(&strict),
            Err(WorkloadError::InfeasibleRequest { .. })
        ));
    }

    #[test]
    fn test_jsonl_round_trip_with_annotations() {
        let spec = WorkloadSpec {
            duration: 50.0,
            ..WorkloadSpec::default()
        };
        let mut trace = generate(&spec).unwrap();
        trace.annotate(&ModelProfile::default(), 2048).unwrap();

        let mut buf = Vec::new();
        trace.to_jsonl(&mut buf).unwrap();
        let loaded = Trace::from_jsonl(buf.as_slice()).unwrap();
        assert_eq!(loaded.requests, trace.requests);
        assert_eq!(loaded.oracle, trace.oracle);

        // Round-tripping the loaded trace reproduces identical bytes.
        let mut buf2 = Vec::new();
        loaded.to_jsonl(&mut buf2).unwrap();
        assert_eq!(buf, buf2);
    }

    #[test]
    fn test_rejects_invalid_spec() {
        let mut spec = WorkloadSpec::default();
        spec.mix = [0.9, 0.2, 0.1];
        assert!(matches!(
            generate(&spec),
            Err(WorkloadError::DistSanity(_))
        ));

        let mut spec = WorkloadSpec::default();
        spec.rate = -1.0;
        assert!(generate(&spec).is_err());

        let mut spec = WorkloadSpec::default();
        spec.text_prompt.min = 0;
        assert!(generate(&spec).is_err());
    }
}
