//! Streaming backend abstraction.
//!
//! The orchestrator sees a model only as something that turns a
//! [`GenerationRequest`] into a pull-based stream of
//! [`TokenEvent`](crate::confidence::TokenEvent)s with top-k logprobs.
//! Two implementations ship: a deterministic [`scripted`] backend for
//! tests and offline fixtures, and a [`live`] HTTP client for
//! OpenAI-compatible completion endpoints.

pub mod live;
pub mod scripted;

use serde::{Deserialize, Serialize};

use crate::confidence::TokenEvent;
use crate::error::{Error, Result};

/// Parameters for one streamed completion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    /// Raw completion prompt. Continuations are expressed by appending the
    /// decoded text generated so far; there is no chat framing.
    pub prompt: String,
    /// Hard cap on tokens the stream may emit.
    pub max_tokens: usize,
    pub temperature: f64,
    pub top_p: f64,
    /// How many alternative logprobs each token event must carry.
    pub top_logprobs_k: usize,
    /// Stop strings; generation halts after a token completes one.
    pub stop_sequences: Vec<String>,
    /// Backend sampling seed, when the backend honours one.
    pub seed: Option<u64>,
}

impl GenerationRequest {
    pub fn validate(&self) -> Result<()> {
        if self.max_tokens == 0 {
            return Err(Error::InvalidParameter(
                "max_tokens must be at least 1".into(),
            ));
        }
        if self.top_logprobs_k == 0 {
            return Err(Error::InvalidParameter(
                "top_logprobs_k must be at least 1".into(),
            ));
        }
        if !self.temperature.is_finite() || self.temperature < 0.0 {
            return Err(Error::InvalidParameter(format!(
                "temperature must be finite and non-negative, got {}",
                self.temperature
            )));
        }
        if !self.top_p.is_finite() || self.top_p <= 0.0 || self.top_p > 1.0 {
            return Err(Error::InvalidParameter(format!(
                "top_p must lie in (0, 1], got {}",
                self.top_p
            )));
        }
        Ok(())
    }
}

/// Why a stream stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    /// The model finished on its own.
    Natural,
    /// The `max_tokens` cap was reached.
    Length,
    /// A stop sequence matched.
    StopSequence,
    /// The backend failed mid-stream.
    Error,
}

/// Terminal state of a stream.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamEnd {
    pub reason: StopReason,
    /// Backend-reported detail, verbatim (finish reason string, error text).
    pub detail: String,
    /// Prompt token count when the backend reports usage. The scripted
    /// backend reports a whitespace-word proxy.
    pub prompt_tokens: Option<usize>,
}

/// A pull-based token stream. Implementations yield validated events one
/// at a time; after the final event, `next_event` returns `None` and
/// [`TokenStream::end`] describes why the stream stopped.
pub trait TokenStream {
    /// Next token event, a mid-stream error, or `None` once the stream has
    /// ended (or been cancelled).
    fn next_event(&mut self) -> Option<Result<TokenEvent>>;

    /// Terminal state, available once the stream has ended on its own.
    /// `None` while live or after a cancellation that preempted the end.
    fn end(&self) -> Option<&StreamEnd>;

    /// Abandon the stream. Idempotent; a no-op after natural completion.
    /// Subsequent `next_event` calls return `None`.
    fn cancel(&mut self);
}

/// A model backend that can open token streams.
pub trait StreamingBackend: Send + Sync {
    fn start_stream(&self, request: &GenerationRequest) -> Result<Box<dyn TokenStream + '_>>;

    /// Short human-readable backend name for logs and archives.
    fn name(&self) -> &str;
}

/// Deterministic whitespace-word proxy for prompt size, used where a
/// backend does not report real token usage.
pub fn approx_prompt_tokens(prompt: &str) -> usize {
    prompt.split_whitespace().count()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn request() -> GenerationRequest {
        GenerationRequest {
            prompt: "p".into(),
            max_tokens: 8,
            temperature: 0.7,
            top_p: 0.95,
            top_logprobs_k: 5,
            stop_sequences: vec![],
            seed: Some(1),
        }
    }

    #[test]
    fn request_validation_catches_bad_fields() {
        let mut r = request();
        r.max_tokens = 0;
        assert!(r.validate().is_err());
        let mut r = request();
        r.top_logprobs_k = 0;
        assert!(r.validate().is_err());
        let mut r = request();
        r.top_p = 0.0;
        assert!(r.validate().is_err());
        assert!(request().validate().is_ok());
    }

    #[test]
    fn prompt_token_proxy_counts_words() {
        assert_eq!(approx_prompt_tokens("what is  2 + 2?"), 5);
        assert_eq!(approx_prompt_tokens(""), 0);
    }
}
