//! HTTP backend for OpenAI-compatible completion endpoints.
//!
//! Speaks the raw text-completion protocol (`POST {base}/completions` with
//! `stream: true` and `logprobs: k`), which is what lets the orchestrator
//! resume an interrupted path by simply appending decoded text to the
//! prompt. Server-sent events are parsed incrementally; every emitted
//! token must carry top logprobs — an endpoint that streams text without
//! them is misconfigured for confidence monitoring and is reported as a
//! fatal error, not retried.
//!
//! Connection-level failures and 5xx responses are retried with a fixed
//! backoff schedule (two retries by default). Mid-stream failures are
//! surfaced to the caller, which owns the retry-from-prefix decision.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Read};
use std::time::Duration;

use crate::backend::{GenerationRequest, StopReason, StreamEnd, StreamingBackend, TokenStream};
use crate::confidence::{select_top_k, TokenEvent};
use crate::error::{Error, Result};

/// Connection settings for a live endpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct LiveConfig {
    /// API base, e.g. `http://localhost:8000/v1`. The `/completions`
    /// suffix is appended automatically.
    pub base_url: String,
    /// Model name passed through in the request body.
    pub model: String,
    /// Bearer token, when the endpoint wants one.
    pub api_key: Option<String>,
    /// Sleep durations between connection attempts; the list length is the
    /// retry count.
    pub retry_backoff: Vec<Duration>,
    pub connect_timeout: Duration,
}

impl LiveConfig {
    pub fn new(base_url: impl Into<String>, model: impl Into<String>) -> Self {
        LiveConfig {
            base_url: base_url.into(),
            model: model.into(),
            api_key: None,
            retry_backoff: vec![Duration::from_millis(500), Duration::from_secs(2)],
            connect_timeout: Duration::from_secs(10),
        }
    }

    pub fn with_api_key(mut self, key: impl Into<String>) -> Self {
        self.api_key = Some(key.into());
        self
    }

    pub fn with_retry_backoff(mut self, backoff: Vec<Duration>) -> Self {
        self.retry_backoff = backoff;
        self
    }

    fn completions_url(&self) -> String {
        format!("{}/completions", self.base_url.trim_end_matches('/'))
    }
}

/// Streaming client for one endpoint.
pub struct LiveBackend {
    config: LiveConfig,
    client: reqwest::blocking::Client,
}

impl LiveBackend {
    pub fn new(config: LiveConfig) -> Result<Self> {
        if config.base_url.is_empty() {
            return Err(Error::InvalidConfig("live backend needs a base URL".into()));
        }
        if config.model.is_empty() {
            return Err(Error::InvalidConfig("live backend needs a model name".into()));
        }
        let client = reqwest::blocking::Client::builder()
            .connect_timeout(config.connect_timeout)
            .timeout(Option::<Duration>::None)
            .build()
            .map_err(|e| Error::InvalidConfig(format!("http client construction failed: {e}")))?;
        Ok(LiveBackend { config, client })
    }

    fn request_body(&self, request: &GenerationRequest) -> serde_json::Value {
        let mut body = serde_json::json!({
            "model": self.config.model,
            "prompt": request.prompt,
            "max_tokens": request.max_tokens,
            "temperature": request.temperature,
            "top_p": request.top_p,
            "logprobs": request.top_logprobs_k,
            "stream": true,
            "echo": false,
        });
        if let Some(seed) = request.seed {
            body["seed"] = serde_json::json!(seed);
        }
        if !request.stop_sequences.is_empty() {
            body["stop"] = serde_json::json!(request.stop_sequences);
        }
        body
    }

    fn open_response(&self, request: &GenerationRequest) -> Result<reqwest::blocking::Response> {
        let url = self.config.completions_url();
        let body = self.request_body(request);
        let mut last_failure = String::new();
        for attempt in 0..=self.config.retry_backoff.len() {
            if attempt > 0 {
                std::thread::sleep(self.config.retry_backoff[attempt - 1]);
            }
            let mut builder = self.client.post(&url).json(&body);
            if let Some(key) = &self.config.api_key {
                builder = builder.bearer_auth(key);
            }
            match builder.send() {
                Ok(response) => {
                    let status = response.status();
                    if status.is_success() {
                        return Ok(response);
                    }
                    let text = response.text().unwrap_or_default();
                    let detail = format!("endpoint returned {status}: {}", text.trim());
                    if status.is_server_error() {
                        last_failure = detail;
                        continue;
                    }
                    return Err(Error::backend_fatal(detail));
                }
                Err(e) => {
                    last_failure = format!("request to {url} failed: {e}");
                }
            }
        }
        Err(Error::backend_transient(last_failure))
    }
}

impl StreamingBackend for LiveBackend {
    fn start_stream(&self, request: &GenerationRequest) -> Result<Box<dyn TokenStream + '_>> {
        request.validate()?;
        let response = self.open_response(request)?;
        Ok(Box::new(LiveStream {
            reader: BufReader::new(Box::new(response)),
            top_k: request.top_logprobs_k,
            pending: Vec::new(),
            emitted: 0,
            prompt_tokens: None,
            end: None,
            cancelled: false,
            failed: false,
        }))
    }

    fn name(&self) -> &str {
        "live"
    }
}

/// One raw token parsed out of an SSE chunk.
#[derive(Debug, Clone, PartialEq)]
pub struct RawToken {
    pub text: String,
    pub chosen_logprob: f64,
    pub top_logprobs: Vec<(String, f64)>,
}

/// Everything a single SSE `data:` payload can tell us.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SseChunk {
    pub tokens: Vec<RawToken>,
    pub finish: Option<(StopReason, String)>,
    pub prompt_tokens: Option<usize>,
    pub done: bool,
}

/// Parse one SSE `data:` payload from a completions stream.
///
/// Expects the legacy completions shape: `choices[0].text` paired with
/// `choices[0].logprobs.{tokens,token_logprobs,top_logprobs}`. Text
/// without logprobs is a fatal protocol violation.
pub fn parse_sse_payload(payload: &str) -> Result<SseChunk> {
    let payload = payload.trim();
    if payload.is_empty() {
        return Ok(SseChunk::default());
    }
    if payload == "[DONE]" {
        return Ok(SseChunk {
            done: true,
            ..SseChunk::default()
        });
    }
    let value: serde_json::Value = serde_json::from_str(payload)
        .map_err(|e| Error::backend_fatal(format!("unparseable stream chunk: {e}")))?;
    let mut chunk = SseChunk::default();
    if let Some(usage) = value.get("usage") {
        if let Some(pt) = usage.get("prompt_tokens").and_then(|v| v.as_u64()) {
            chunk.prompt_tokens = Some(pt as usize);
        }
    }
    let Some(choice) = value
        .get("choices")
        .and_then(|c| c.as_array())
        .and_then(|c| c.first())
    else {
        return Ok(chunk);
    };
    if let Some(reason) = choice.get("finish_reason").and_then(|v| v.as_str()) {
        let stop_reason_field = choice.get("stop_reason").filter(|v| !v.is_null());
        let mapped = match reason {
            "length" => StopReason::Length,
            "stop" if stop_reason_field.is_some() => StopReason::StopSequence,
            "stop" => StopReason::Natural,
            _ => StopReason::Natural,
        };
        let detail = match stop_reason_field {
            Some(sr) => format!("finish_reason={reason} stop_reason={sr}"),
            None => format!("finish_reason={reason}"),
        };
        chunk.finish = Some((mapped, detail));
    }
    let text = choice.get("text").and_then(|v| v.as_str()).unwrap_or("");
    let logprobs = choice.get("logprobs").filter(|v| !v.is_null());
    let (tokens, token_logprobs, top_logprobs) = match logprobs {
        Some(lp) => (
            lp.get("tokens").and_then(|v| v.as_array()),
            lp.get("token_logprobs").and_then(|v| v.as_array()),
            lp.get("top_logprobs").and_then(|v| v.as_array()),
        ),
        None => (None, None, None),
    };
    let Some(tokens) = tokens else {
        if text.is_empty() {
            return Ok(chunk);
        }
        return Err(Error::MissingLogprobs(format!(
            "stream chunk carried text {text:?} without logprobs; \
             the endpoint must be started with logprobs enabled"
        )));
    };
    let token_logprobs = token_logprobs.unwrap_or(tokens);
    let empty = Vec::new();
    let top_logprobs = top_logprobs.unwrap_or(&empty);
    for (i, token) in tokens.iter().enumerate() {
        let text = token.as_str().ok_or_else(|| {
            Error::backend_fatal(format!("non-string token in stream chunk: {token}"))
        })?;
        let chosen = token_logprobs
            .get(i)
            .and_then(|v| v.as_f64())
            .ok_or_else(|| {
                Error::MissingLogprobs(format!(
                    "token {text:?} in stream chunk has no sampled logprob"
                ))
            })?;
        let top_map: BTreeMap<String, f64> = top_logprobs
            .get(i)
            .and_then(|v| v.as_object())
            .map(|m| {
                m.iter()
                    .filter_map(|(k, v)| v.as_f64().map(|lp| (k.clone(), lp)))
                    .collect()
            })
            .unwrap_or_default();
        let mut top: Vec<(String, f64)> = top_map.into_iter().collect();
        if top.is_empty() {
            return Err(Error::MissingLogprobs(format!(
                "token {text:?} in stream chunk has no top logprobs"
            )));
        }
        top.sort_by(|a, b| {
            b.1.partial_cmp(&a.1)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then_with(|| a.0.cmp(&b.0))
        });
        chunk.tokens.push(RawToken {
            text: text.to_string(),
            chosen_logprob: chosen,
            top_logprobs: top,
        });
    }
    Ok(chunk)
}

struct LiveStream {
    reader: BufReader<Box<dyn Read + Send>>,
    top_k: usize,
    pending: Vec<RawToken>,
    emitted: usize,
    prompt_tokens: Option<usize>,
    end: Option<StreamEnd>,
    cancelled: bool,
    failed: bool,
}

impl LiveStream {
    fn emit(&mut self, raw: RawToken) -> Result<TokenEvent> {
        self.emitted += 1;
        let top = select_top_k(&raw.top_logprobs, self.top_k)
            .map_err(|e| Error::backend_fatal(format!("bad top logprobs from endpoint: {e}")))?;
        let event = TokenEvent {
            token_text: raw.text,
            chosen_logprob: raw.chosen_logprob,
            top_logprobs: top,
            position: self.emitted,
        };
        event.validate()?;
        Ok(event)
    }
}

impl TokenStream for LiveStream {
    fn next_event(&mut self) -> Option<Result<TokenEvent>> {
        if self.cancelled || self.failed || self.end.is_some() {
            if !self.pending.is_empty() && !self.cancelled && !self.failed {
                let raw = self.pending.remove(0);
                return Some(self.emit(raw));
            }
            return None;
        }
        loop {
            if !self.pending.is_empty() {
                let raw = self.pending.remove(0);
                return Some(self.emit(raw));
            }
            let mut line = String::new();
            match self.reader.read_line(&mut line) {
                Ok(0) => {
                    if self.end.is_none() {
                        self.end = Some(StreamEnd {
                            reason: StopReason::Error,
                            detail: "stream closed before completion".into(),
                            prompt_tokens: self.prompt_tokens,
                        });
                        self.failed = true;
                        return Some(Err(Error::backend_transient(
                            "stream closed before completion",
                        )));
                    }
                    return None;
                }
                Ok(_) => {
                    let line = line.trim_end();
                    let Some(payload) = line.strip_prefix("data:") else {
                        continue;
                    };
                    match parse_sse_payload(payload) {
                        Ok(chunk) => {
                            if let Some(pt) = chunk.prompt_tokens {
                                self.prompt_tokens = Some(pt);
                            }
                            self.pending = chunk.tokens;
                            if chunk.done {
                                if self.end.is_none() {
                                    self.end = Some(StreamEnd {
                                        reason: StopReason::Natural,
                                        detail: "stream ended without finish_reason".into(),
                                        prompt_tokens: self.prompt_tokens,
                                    });
                                }
                                if self.pending.is_empty() {
                                    return None;
                                }
                            } else if let Some((reason, detail)) = chunk.finish {
                                self.end = Some(StreamEnd {
                                    reason,
                                    detail,
                                    prompt_tokens: self.prompt_tokens,
                                });
                                if self.pending.is_empty() {
                                    return None;
                                }
                            }
                        }
                        Err(e) => {
                            self.failed = true;
                            if self.end.is_none() {
                                self.end = Some(StreamEnd {
                                    reason: StopReason::Error,
                                    detail: e.to_string(),
                                    prompt_tokens: self.prompt_tokens,
                                });
                            }
                            return Some(Err(e));
                        }
                    }
                }
                Err(e) => {
                    self.failed = true;
                    let detail = format!("stream read failed: {e}");
                    self.end = Some(StreamEnd {
                        reason: StopReason::Error,
                        detail: detail.clone(),
                        prompt_tokens: self.prompt_tokens,
                    });
                    return Some(Err(Error::backend_transient(detail)));
                }
            }
        }
    }

    fn end(&self) -> Option<&StreamEnd> {
        self.end.as_ref()
    }

    fn cancel(&mut self) {
        if self.end.is_none() || !self.pending.is_empty() {
            self.cancelled = true;
            self.pending.clear();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_chunk_with_tokens_and_top_logprobs() {
        let payload = r#"{"choices":[{"text":" 4","index":0,"logprobs":{"tokens":[" 4"],"token_logprobs":[-0.1],"top_logprobs":[{" 4":-0.1," 5":-2.3}]},"finish_reason":null}]}"#;
        let chunk = parse_sse_payload(payload).unwrap();
        assert_eq!(chunk.tokens.len(), 1);
        assert_eq!(chunk.tokens[0].text, " 4");
        assert_eq!(chunk.tokens[0].chosen_logprob, -0.1);
        assert_eq!(
            chunk.tokens[0].top_logprobs,
            vec![(" 4".to_string(), -0.1), (" 5".to_string(), -2.3)]
        );
        assert!(chunk.finish.is_none());
        assert!(!chunk.done);
    }

    #[test]
    fn parse_multi_token_chunk_preserves_order() {
        let payload = r#"{"choices":[{"text":"ab","logprobs":{"tokens":["a","b"],"token_logprobs":[-0.1,-0.2],"top_logprobs":[{"a":-0.1},{"b":-0.2}]},"finish_reason":null}]}"#;
        let chunk = parse_sse_payload(payload).unwrap();
        let texts: Vec<&str> = chunk.tokens.iter().map(|t| t.text.as_str()).collect();
        assert_eq!(texts, vec!["a", "b"]);
    }

    #[test]
    fn parse_done_sentinel() {
        let chunk = parse_sse_payload(" [DONE]").unwrap();
        assert!(chunk.done);
        assert!(chunk.tokens.is_empty());
    }

    #[test]
    fn parse_finish_reasons() {
        let payload = r#"{"choices":[{"text":"","logprobs":{"tokens":[],"token_logprobs":[],"top_logprobs":[]},"finish_reason":"length"}]}"#;
        let chunk = parse_sse_payload(payload).unwrap();
        assert_eq!(chunk.finish.as_ref().unwrap().0, StopReason::Length);
        let payload = r#"{"choices":[{"text":"","logprobs":{"tokens":[],"token_logprobs":[],"top_logprobs":[]},"finish_reason":"stop"}]}"#;
        let chunk = parse_sse_payload(payload).unwrap();
        assert_eq!(chunk.finish.as_ref().unwrap().0, StopReason::Natural);
        let payload = r#"{"choices":[{"text":"","logprobs":{"tokens":[],"token_logprobs":[],"top_logprobs":[]},"finish_reason":"stop","stop_reason":"\n\n"}]}"#;
        let chunk = parse_sse_payload(payload).unwrap();
        assert_eq!(chunk.finish.as_ref().unwrap().0, StopReason::StopSequence);
    }

    #[test]
    fn text_without_logprobs_is_fatal() {
        let payload = r#"{"choices":[{"text":"hello","logprobs":null,"finish_reason":null}]}"#;
        match parse_sse_payload(payload) {
            Err(Error::MissingLogprobs(_)) => {}
            other => panic!("expected MissingLogprobs, got {other:?}"),
        }
    }

    #[test]
    fn usage_chunk_reports_prompt_tokens() {
        let payload = r#"{"choices":[],"usage":{"prompt_tokens":17,"completion_tokens":5}}"#;
        let chunk = parse_sse_payload(payload).unwrap();
        assert_eq!(chunk.prompt_tokens, Some(17));
    }

    #[test]
    fn malformed_json_is_fatal_not_retryable() {
        let err = parse_sse_payload("{oops").unwrap_err();
        assert!(!err.is_retryable());
    }

    #[test]
    fn completions_url_joins_cleanly() {
        let cfg = LiveConfig::new("http://h:1/v1/", "m");
        assert_eq!(cfg.completions_url(), "http://h:1/v1/completions");
    }
}
