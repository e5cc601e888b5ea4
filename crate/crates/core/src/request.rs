//! Request model and lifecycle state machine.
//!
//! A request moves through `Waiting -> Prefilling -> Decoding -> Finished`,
//! with `Preempted` reachable from the two active states. Preemption uses
//! recomputation: the next schedule restarts prefill from zero.

use serde::{Deserialize, Serialize};

/// Input modality of a request.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Text,
    Image,
    Video,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Text, Modality::Image, Modality::Video];

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Text => "text",
            Modality::Image => "image",
            Modality::Video => "video",
        }
    }
}

/// Scheduling class. Ordered by resource weight: a Motorcycle is the
/// lightest request kind, a Truck the heaviest.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VehicleClass {
    Motorcycle,
    Car,
    Truck,
}

impl VehicleClass {
    pub const ALL: [VehicleClass; 3] = [
        VehicleClass::Motorcycle,
        VehicleClass::Car,
        VehicleClass::Truck,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            VehicleClass::Motorcycle => "motorcycle",
            VehicleClass::Car => "car",
            VehicleClass::Truck => "truck",
        }
    }
}

/// Lifecycle state, carrying the progress counter relevant to that state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "phase", rename_all = "lowercase")]
pub enum RequestState {
    Waiting,
    Prefilling { tokens_done: u64 },
    Decoding { tokens_generated: u64 },
    Preempted { tokens_generated: u64 },
    Finished,
}

/// Events that drive the state machine.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LifecycleEvent {
    /// Move a waiting or preempted request onto the engine (prefill from zero).
    Schedule,
    /// Complete a prefill chunk of `tokens` tokens. The chunk that reaches the
    /// full prefill length also emits the first output token.
    PrefillChunk { tokens: u64 },
    /// Generate one output token.
    DecodeStep,
    /// Evict from the engine, discarding computed KV.
    Preempt,
    /// Retire a request whose last output token has been generated.
    Finish,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CoreError {
    #[error("illegal transition: {state:?} cannot take {event:?}")]
    IllegalTransition {
        state: RequestState,
        event: LifecycleEvent,
    },
    #[error("invalid config: {field}: {reason}")]
    InvalidConfig { field: &'static str, reason: String },
    #[error("invalid request {id}: {reason}")]
    InvalidRequest { id: u64, reason: String },
}

/// One inference request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Request {
    pub id: u64,
    pub modality: Modality,
    /// Arrival instant in seconds from the start of the trace.
    pub arrival_time: f64,
    /// Text tokens in the prompt (for media requests: the accompanying prompt).
    pub prompt_tokens: u64,
    /// Tokens the media input occupies after encoding. Zero for text.
    pub media_tokens: u64,
    /// Raw media size in modality units: megapixels for images, frames for
    /// videos. Unused for text.
    pub media_size: f64,
    /// Ground-truth generation length. Hidden from schedulers.
    pub output_tokens: u64,
    /// Scheduling class, assigned at ingest.
    pub class: Option<VehicleClass>,
    pub state: RequestState,
}

impl Request {
    /// Tokens the prefill must process (prompt plus encoded media), which is
    /// also the KV footprint reserved at admission.
    pub fn prefill_tokens(&self) -> u64 {
        self.prompt_tokens + self.media_tokens
    }

    pub fn validate(&self) -> Result<(), CoreError> {
        let fail = |reason: String| CoreError::InvalidRequest {
            id: self.id,
            reason,
        };
        if self.prompt_tokens == 0 {
            return Err(fail("prompt_tokens must be >= 1".into()));
        }
        if self.output_tokens == 0 {
            return Err(fail("output_tokens must be >= 1".into()));
        }
        if !self.arrival_time.is_finite() || self.arrival_time < 0.0 {
            return Err(fail(format!(
                "arrival_time must be finite and >= 0, got {}",
                self.arrival_time
            )));
        }
        if self.modality == Modality::Text && self.media_tokens != 0 {
            return Err(fail("text requests carry no media tokens".into()));
        }
        if self.modality != Modality::Text && self.media_tokens == 0 {
            return Err(fail("media requests need media_tokens >= 1".into()));
        }
        if !self.media_size.is_finite() || self.media_size < 0.0 {
            return Err(fail(format!(
                "media_size must be finite and >= 0, got {}",
                self.media_size
            )));
        }
        Ok(())
    }
}

/// Apply one lifecycle event, returning the updated request.
///
/// Every edge outside the legal transition set fails with
/// [`CoreError::IllegalTransition`], including prefill chunks that overshoot
/// the prefill length and decode steps past the output length.
pub fn advance_state(mut request: Request, event: LifecycleEvent) -> Result<Request, CoreError> {
    use LifecycleEvent as E;
    use RequestState as S;

    let illegal = |state: RequestState| CoreError::IllegalTransition { state, event };

    let prefill_total = request.prefill_tokens();
    let next = match (request.state, event) {
        (S::Waiting, E::Schedule) | (S::Preempted { .. }, E::Schedule) => {
            S::Prefilling { tokens_done: 0 }
        }
        (S::Prefilling { tokens_done }, E::PrefillChunk { tokens }) => {
            if tokens == 0 || tokens_done + tokens > prefill_total {
                return Err(illegal(request.state));
            }
            let done = tokens_done + tokens;
            if done == prefill_total {
                // The final chunk emits the first output token.
                S::Decoding { tokens_generated: 1 }
            } else {
                S::Prefilling { tokens_done: done }
            }
        }
        (S::Prefilling { .. }, E::Preempt) => S::Preempted { tokens_generated: 0 },
        (S::Decoding { tokens_generated }, E::DecodeStep) => {
            if tokens_generated >= request.output_tokens {
                return Err(illegal(request.state));
            }
            S::Decoding {
                tokens_generated: tokens_generated + 1,
            }
        }
        (S::Decoding { tokens_generated }, E::Preempt) => S::Preempted { tokens_generated },
        (S::Decoding { tokens_generated }, E::Finish) => {
            if tokens_generated != request.output_tokens {
                return Err(illegal(request.state));
            }
            S::Finished
        }
        (state, _) => return Err(illegal(state)),
    };
    request.state = next;
    Ok(request)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_request() -> Request {
        Request {
            id: 7,
            modality: Modality::Text,
            arrival_time: 1.5,
            prompt_tokens: 100,
            media_tokens: 0,
            media_size: 0.0,
            output_tokens: 3,
            class: None,
            state: RequestState::Waiting,
        }
    }

    #[test]
    fn test_full_lifecycle() {
        let mut r = sample_request();
        r = advance_state(r, LifecycleEvent::Schedule).unwrap();
        assert_eq!(r.state, RequestState::Prefilling { tokens_done: 0 });
        r = advance_state(r, LifecycleEvent::PrefillChunk { tokens: 60 }).unwrap();
        assert_eq!(r.state, RequestState::Prefilling { tokens_done: 60 });
        r = advance_state(r, LifecycleEvent::PrefillChunk { tokens: 40 }).unwrap();
        assert_eq!(r.state, RequestState::Decoding { tokens_generated: 1 });
        r = advance_state(r, LifecycleEvent::DecodeStep).unwrap();
        r = advance_state(r, LifecycleEvent::DecodeStep).unwrap();
        assert_eq!(r.state, RequestState::Decoding { tokens_generated: 3 });
        r = advance_state(r, LifecycleEvent::Finish).unwrap();
        assert_eq!(r.state, RequestState::Finished);
    }

    #[test]
    fn test_preemption_restarts_prefill() {
        let mut r = sample_request();
        r = advance_state(r, LifecycleEvent::Schedule).unwrap();
        r = advance_state(r, LifecycleEvent::PrefillChunk { tokens: 100 }).unwrap();
        r = advance_state(r, LifecycleEvent::DecodeStep).unwrap();
        r = advance_state(r, LifecycleEvent::Preempt).unwrap();
        assert_eq!(r.state, RequestState::Preempted { tokens_generated: 2 });
        r = advance_state(r, LifecycleEvent::Schedule).unwrap();
        assert_eq!(r.state, RequestState::Prefilling { tokens_done: 0 });
    }

    #[test]
    fn test_single_output_token_finishes_after_prefill() {
        let mut r = sample_request();
        r.output_tokens = 1;
        r = advance_state(r, LifecycleEvent::Schedule).unwrap();
        r = advance_state(r, LifecycleEvent::PrefillChunk { tokens: 100 }).unwrap();
        assert_eq!(r.state, RequestState::Decoding { tokens_generated: 1 });
        r = advance_state(r, LifecycleEvent::Finish).unwrap();
        assert_eq!(r.state, RequestState::Finished);
    }

    #[test]
    fn test_illegal_edges() {
        let r = sample_request();
        let err = advance_state(r.clone(), LifecycleEvent::DecodeStep).unwrap_err();
        assert!(matches!(err, CoreError::IllegalTransition { .. }));

        // Chunk overshooting the prefill length.
        let mut active = advance_state(r.clone(), LifecycleEvent::Schedule).unwrap();
        assert!(advance_state(
            active.clone(),
            LifecycleEvent::PrefillChunk { tokens: 101 }
        )
        .is_err());
        // Zero-token chunk.
        assert!(advance_state(active.clone(), LifecycleEvent::PrefillChunk { tokens: 0 }).is_err());

        // Finish before the last token.
        active = advance_state(active, LifecycleEvent::PrefillChunk { tokens: 100 }).unwrap();
        assert!(advance_state(active.clone(), LifecycleEvent::Finish).is_err());

        // Decode past the output length.
        active = advance_state(active, LifecycleEvent::DecodeStep).unwrap();
        active = advance_state(active, LifecycleEvent::DecodeStep).unwrap();
        assert!(advance_state(active.clone(), LifecycleEvent::DecodeStep).is_err());

        // Finished is terminal.
        let done = advance_state(active, LifecycleEvent::Finish).unwrap();
        assert!(advance_state(done, LifecycleEvent::Schedule).is_err());
    }

    #[test]
    fn test_waiting_cannot_be_preempted() {
        let r = sample_request();
        assert!(advance_state(r, LifecycleEvent::Preempt).is_err());
    }

    #[test]
    fn test_validate_rejects_bad_fields() {
        let mut r = sample_request();
        r.prompt_tokens = 0;
        assert!(r.validate().is_err());

        let mut r = sample_request();
        r.output_tokens = 0;
        assert!(r.validate().is_err());

        let mut r = sample_request();
        r.media_tokens = 10;
        assert!(r.validate().is_err(), "text with media tokens");

        let mut r = sample_request();
        r.modality = Modality::Image;
        assert!(r.validate().is_err(), "image without media tokens");

        let mut r = sample_request();
        r.arrival_time = f64::NAN;
        assert!(r.validate().is_err());

        assert!(sample_request().validate().is_ok());
    }
}
