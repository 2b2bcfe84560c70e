//! The per-path state machine and question-level driver.
//!
//! A path is pumped token by token from a backend stream. Each consumed
//! token updates the confidence series; when the smoothed signal dips
//! strictly below the calibrated threshold (with enough window fill and
//! outside any refractory period) the configured policy decides what
//! happens next: abandon the path, backtrack to the last sentence
//! boundary and regenerate, or interrupt for a reflection exchange whose
//! correction is spliced in before generation resumes.
//!
//! Restart never erases consumed tokens — they are marked retired so the
//! cost record stays complete — and every segment's end cause is kept,
//! which is what makes archived runs re-executable.

use crate::backend::{
    approx_prompt_tokens, GenerationRequest, StopReason, StreamEnd, StreamingBackend, TokenStream,
};
use crate::confidence::{
    calibrate_threshold, token_confidence, trajectory_min_group, ConfidenceSeries, TokenEvent,
};
use crate::error::{Error, Result};
use crate::eval::{canonicalize_answer, extract_answer, majority_vote, Problem};
use crate::orchestrator::{
    ConsumedEvent, InterventionAction, InterventionRecord, PathKind, PathRun, PathStatus, Policy,
    QuestionRun, SegmentEnd, SegmentInfo, SegmentRole, SessionConfig, Trajectory,
    TrajectorySegment,
};
use crate::reflection;

/// Mid-path retry budget for transient backend failures.
const MAX_PATH_RETRIES: usize = 2;

/// Derive the seed for one backend request.
///
/// Seeds are a pure function of the base seed, the path's ordinal within
/// its question (warmups first), and the request's ordinal within the path
/// (0 = initial, then reflections, restarts, resumptions, and retries in
/// issue order). Scripts can therefore target a specific path's request
/// with an exact-seed dispatch rule.
pub fn request_seed(base_seed: u64, path_ordinal: usize, request_ordinal: usize) -> u64 {
    base_seed
        .wrapping_add(path_ordinal as u64)
        .wrapping_add(10_000u64.wrapping_mul(request_ordinal as u64))
}

/// Render the reflection prompt for a path interrupted mid-trajectory.
/// The original prompt is the question rendered through the session's
/// prompt template; the partial path is the trajectory's decoded text.
pub fn build_reflection_prompt(
    question: &Problem,
    partial: &Trajectory,
    config: &SessionConfig,
) -> Result<String> {
    reflection::render(&config.render_prompt(question), &partial.decoded_text())
}

/// Everything the warmup phase produced.
#[derive(Debug)]
pub struct WarmupOutcome {
    /// Threshold calibration, absent when no warmup trace was usable.
    pub calibration: Option<crate::confidence::CalibrationResult>,
    /// All warmup paths, usable or not; their tokens count either way.
    pub paths: Vec<PathRun>,
    pub warnings: Vec<String>,
    /// Why calibration is absent, when it is.
    pub failure: Option<String>,
}

/// Generate the unmonitored warmup traces for a question and calibrate the
/// intervention threshold from their per-trace minimum group confidences.
/// Zero-length or aborted traces are excluded from the minima (with a
/// warning); if nothing usable remains, the outcome carries a failure and
/// no calibration.
pub fn run_warmup(
    question: &Problem,
    config: &SessionConfig,
    backend: &dyn StreamingBackend,
) -> Result<WarmupOutcome> {
    config.validate()?;
    question.validate()?;
    let mut paths = Vec::with_capacity(config.warmup_count);
    let mut warnings = Vec::new();
    let mut minima = Vec::new();
    for ordinal in 0..config.warmup_count {
        let path = PathDriver::new(question, config, backend, None, ordinal, PathKind::Warmup).run();
        match path.status {
            PathStatus::Completed if !path.confidence.is_empty() => {
                minima.push(trajectory_min_group(&path.confidence)?);
            }
            PathStatus::Completed => {
                let note = format!(
                    "warmup path {ordinal} produced no tokens; excluded from calibration"
                );
                tracing::warn!("{note}");
                warnings.push(note);
            }
            PathStatus::Aborted => {
                let note = format!(
                    "warmup path {ordinal} aborted ({}); excluded from calibration",
                    path.stop_detail
                );
                tracing::warn!("{note}");
                warnings.push(note);
            }
        }
        paths.push(path);
    }
    if minima.is_empty() {
        let failure = format!(
            "no usable warmup trace out of {} for question {}",
            config.warmup_count, question.id
        );
        return Ok(WarmupOutcome {
            calibration: None,
            paths,
            warnings,
            failure: Some(failure),
        });
    }
    let calibration = calibrate_threshold(&minima, config.confidence.percentile)?;
    Ok(WarmupOutcome {
        calibration: Some(calibration),
        paths,
        warnings,
        failure: None,
    })
}

/// Run one monitored reasoning path against a calibrated threshold.
/// `path_ordinal` is the path's position within its question (warmups
/// first); it feeds seed derivation.
pub fn run_path(
    question: &Problem,
    threshold_s: f64,
    config: &SessionConfig,
    backend: &dyn StreamingBackend,
    path_ordinal: usize,
) -> PathRun {
    PathDriver::new(
        question,
        config,
        backend,
        Some(threshold_s),
        path_ordinal,
        PathKind::Reasoning,
    )
    .run()
}

/// Run a full question: warmup calibration, monitored reasoning paths,
/// vote, and accounting. Errors only on invalid configuration or problem;
/// runtime trouble is recorded inside the returned run.
pub fn run_question(
    question: &Problem,
    config: &SessionConfig,
    backend: &dyn StreamingBackend,
) -> Result<QuestionRun> {
    config.validate()?;
    question.validate()?;
    let warmup = run_warmup(question, config, backend)?;
    let mut paths = warmup.paths;
    let warnings = warmup.warnings;
    let error = warmup.failure;
    if let Some(calibration) = &warmup.calibration {
        for ordinal in config.warmup_count..config.budget {
            paths.push(run_path(
                question,
                calibration.threshold_s,
                config,
                backend,
                ordinal,
            ));
        }
    }
    let gold = canonicalize_answer(&question.gold_answer, question.answer_kind);
    let candidates: Vec<String> = paths
        .iter()
        .filter(|p| p.status == PathStatus::Completed)
        .filter_map(|p| p.extracted_answer.clone())
        .collect();
    let vote = majority_vote(&candidates);
    let answered = vote.is_some();
    let correct = vote.as_ref().is_some_and(|(answer, _)| *answer == gold);
    let intervened_paths = paths.iter().filter(|p| p.intervened()).count();
    let salvaged_paths = paths
        .iter()
        .filter(|p| {
            p.intervened()
                && p.status == PathStatus::Completed
                && p.extracted_answer.as_deref() == Some(gold.as_str())
        })
        .count();
    let generated_tokens = paths.iter().map(|p| p.generated_tokens as u64).sum();
    let discarded_tokens = paths.iter().map(|p| p.discarded_tokens as u64).sum();
    let prompt_tokens = paths.iter().map(|p| p.prompt_tokens as u64).sum();
    Ok(QuestionRun {
        question: question.clone(),
        policy: config.policy,
        seed: config.sampling.seed,
        calibration: warmup.calibration,
        paths,
        vote,
        answered,
        correct,
        generated_tokens,
        discarded_tokens,
        prompt_tokens,
        intervened_paths,
        salvaged_paths,
        warnings,
        error,
        archive_id: None,
    })
}

/// Why the path's generation loop ended.
enum PathEnding {
    /// A stream reached a non-error stop.
    Completed(StopReason, String),
    /// The policy terminated the path.
    PolicyAborted(String),
    /// Backend failure exhausted the retry budget (or was fatal).
    Failed(String),
}

/// Why one stream episode ended, from the pump's point of view.
enum StreamOutcome {
    Ended(StreamEnd),
    TransientFailure(Error),
    FatalFailure(Error),
    Triggered,
}

/// What a fired trigger resolved to.
enum TriggerFlow {
    Abort(String),
    Resume(String),
    Failed(String),
}

struct SegmentBuild {
    role: SegmentRole,
    end: Option<SegmentEnd>,
    consumed: Vec<usize>,
}

struct PathDriver<'a> {
    question: &'a Problem,
    config: &'a SessionConfig,
    backend: &'a dyn StreamingBackend,
    /// `None` runs unmonitored (warmup).
    threshold: Option<f64>,
    path_ordinal: usize,
    kind: PathKind,
    base_prompt: String,
    series: ConfidenceSeries,
    consumed: Vec<ConsumedEvent>,
    segments: Vec<SegmentBuild>,
    interventions: Vec<InterventionRecord>,
    /// Tokens currently in the surviving trajectory.
    live_len: usize,
    discarded: usize,
    prompt_tokens: usize,
    /// Trigger suppressed while consumed count ≤ this.
    refractory_until: usize,
    request_ordinal: usize,
    retries_left: usize,
}

impl<'a> PathDriver<'a> {
    fn new(
        question: &'a Problem,
        config: &'a SessionConfig,
        backend: &'a dyn StreamingBackend,
        threshold: Option<f64>,
        path_ordinal: usize,
        kind: PathKind,
    ) -> Self {
        PathDriver {
            question,
            config,
            backend,
            threshold,
            path_ordinal,
            kind,
            base_prompt: config.render_prompt(question),
            series: ConfidenceSeries::new(config.confidence.window),
            consumed: Vec::new(),
            segments: Vec::new(),
            interventions: Vec::new(),
            live_len: 0,
            discarded: 0,
            prompt_tokens: 0,
            refractory_until: 0,
            request_ordinal: 0,
            retries_left: MAX_PATH_RETRIES,
        }
    }

    fn run(mut self) -> PathRun {
        let mut prompt = self.base_prompt.clone();
        let ending = 'generation: loop {
            let remaining = self
                .config
                .max_tokens_per_path
                .saturating_sub(self.live_len);
            if remaining == 0 {
                break PathEnding::Completed(
                    StopReason::Length,
                    "path token budget exhausted".into(),
                );
            }
            let request = self.next_request(&prompt, remaining);
            let mut stream = match self.backend.start_stream(&request) {
                Ok(stream) => stream,
                Err(e) if e.is_retryable() && self.retries_left > 0 => {
                    self.retries_left -= 1;
                    tracing::warn!(
                        "stream start failed for path {}: {e}; retrying",
                        self.path_ordinal
                    );
                    continue 'generation;
                }
                Err(e) => {
                    break PathEnding::Failed(format!("stream start failed: {e}"));
                }
            };
            self.open_segment(SegmentRole::Original);
            let outcome = self.pump(stream.as_mut());
            self.absorb_prompt_tokens(stream.end(), &request);
            match outcome {
                StreamOutcome::Ended(end) => {
                    self.close_segment(match end.reason {
                        StopReason::Natural => SegmentEnd::Natural,
                        StopReason::Length => SegmentEnd::Length,
                        StopReason::StopSequence => SegmentEnd::StopSequence,
                        StopReason::Error => SegmentEnd::Fail,
                    });
                    break PathEnding::Completed(end.reason, end.detail);
                }
                StreamOutcome::TransientFailure(e) => {
                    self.close_segment(SegmentEnd::Fail);
                    if self.retries_left > 0 {
                        self.retries_left -= 1;
                        tracing::warn!(
                            "stream failed mid-path {}: {e}; retrying from current prefix",
                            self.path_ordinal
                        );
                        prompt = self.continuation_prompt();
                        continue 'generation;
                    }
                    break PathEnding::Failed(format!("backend stream failed after retries: {e}"));
                }
                StreamOutcome::FatalFailure(e) => {
                    self.close_segment(SegmentEnd::Fatal);
                    break PathEnding::Failed(format!("backend produced unusable events: {e}"));
                }
                StreamOutcome::Triggered => {
                    self.close_segment(SegmentEnd::Trigger);
                    match self.on_trigger() {
                        TriggerFlow::Abort(detail) => break PathEnding::PolicyAborted(detail),
                        TriggerFlow::Failed(detail) => break PathEnding::Failed(detail),
                        TriggerFlow::Resume(next_prompt) => {
                            prompt = next_prompt;
                            continue 'generation;
                        }
                    }
                }
            }
        };
        self.finalize(ending)
    }

    fn pump(&mut self, stream: &mut dyn TokenStream) -> StreamOutcome {
        loop {
            match stream.next_event() {
                None => {
                    return match stream.end() {
                        Some(end) if end.reason != StopReason::Error => {
                            StreamOutcome::Ended(end.clone())
                        }
                        Some(end) => StreamOutcome::TransientFailure(Error::backend_transient(
                            end.detail.clone(),
                        )),
                        None => StreamOutcome::TransientFailure(Error::backend_transient(
                            "stream ended without a stop state",
                        )),
                    };
                }
                Some(Err(e)) => {
                    return if e.is_retryable() {
                        StreamOutcome::TransientFailure(e)
                    } else {
                        StreamOutcome::FatalFailure(e)
                    };
                }
                Some(Ok(mut event)) => {
                    event.position = self.live_len + 1;
                    if let Err(e) = event.validate() {
                        stream.cancel();
                        return StreamOutcome::FatalFailure(e);
                    }
                    let conf = match token_confidence(&event, self.config.confidence.top_k) {
                        Ok(conf) => conf,
                        Err(e) => {
                            stream.cancel();
                            return StreamOutcome::FatalFailure(e);
                        }
                    };
                    self.consume(event, conf);
                    if self.trigger_fires() {
                        stream.cancel();
                        return StreamOutcome::Triggered;
                    }
                }
            }
        }
    }

    fn consume(&mut self, event: TokenEvent, conf: f64) {
        self.series.push(conf);
        let segment = self.segments.len() - 1;
        let role = self.segments[segment].role;
        self.consumed.push(ConsumedEvent {
            event,
            segment,
            role,
            retired: false,
        });
        self.segments[segment].consumed.push(self.consumed.len() - 1);
        self.live_len += 1;
    }

    fn trigger_fires(&self) -> bool {
        let Some(threshold) = self.threshold else {
            return false;
        };
        if self.consumed.len() <= self.refractory_until {
            return false;
        }
        let basis = self.series.last_window_basis().unwrap_or(0);
        if basis < self.config.min_window_basis {
            return false;
        }
        self.series
            .last_group_conf()
            .is_some_and(|g| g < threshold)
    }

    fn on_trigger(&mut self) -> TriggerFlow {
        let trigger_step = self.consumed.len();
        let group_conf = self
            .series
            .last_group_conf()
            .expect("trigger implies at least one step");
        let exhausted = self.interventions.len() >= self.config.max_interventions_per_path;
        let action = if exhausted {
            InterventionAction::Discard
        } else {
            match self.config.policy {
                Policy::Discard => InterventionAction::Discard,
                Policy::Restart => InterventionAction::Restart,
                Policy::Reflect => InterventionAction::Reflect,
            }
        };
        match action {
            InterventionAction::Discard => {
                self.record(trigger_step, group_conf, InterventionAction::Discard, 0, 0);
                let detail = if exhausted && self.config.policy != Policy::Discard {
                    "intervention budget exhausted; low-confidence path discarded"
                } else {
                    "low-confidence path discarded"
                };
                TriggerFlow::Abort(detail.into())
            }
            InterventionAction::Restart => {
                let kept_text = self.restart_truncate();
                self.record(trigger_step, group_conf, InterventionAction::Restart, 0, 0);
                self.series.reset_window();
                self.refractory_until = self.consumed.len() + self.config.refractory_tokens;
                TriggerFlow::Resume(format!("{}{}", self.base_prompt, kept_text))
            }
            InterventionAction::Reflect => {
                let partial = self.live_text();
                let reflection_prompt = match reflection::render(&self.base_prompt, &partial) {
                    Ok(p) => p,
                    Err(e) => {
                        return TriggerFlow::Failed(format!(
                            "reflection prompt rejected: {e}"
                        ));
                    }
                };
                let correction_budget = self
                    .config
                    .correction_max_tokens
                    .min(self.config.max_tokens_per_path - self.live_len);
                if correction_budget == 0 {
                    self.record(trigger_step, group_conf, InterventionAction::Reflect, 0, 0);
                    return TriggerFlow::Abort(
                        "no token budget left for a correction; path discarded".into(),
                    );
                }
                let correction = self.run_correction(&reflection_prompt, correction_budget);
                self.record(
                    trigger_step,
                    group_conf,
                    InterventionAction::Reflect,
                    correction.prompt_tokens,
                    correction.tokens,
                );
                match correction.failure {
                    Some(detail) => {
                        TriggerFlow::Failed(format!("correction stream failed: {detail}"))
                    }
                    None if correction.tokens == 0 => {
                        TriggerFlow::Abort("empty correction; path discarded".into())
                    }
                    None => {
                        self.refractory_until =
                            self.consumed.len() + self.config.refractory_tokens;
                        TriggerFlow::Resume(format!("{}{}", self.base_prompt, self.live_text()))
                    }
                }
            }
        }
    }

    fn record(
        &mut self,
        trigger_step: usize,
        group_conf: f64,
        action: InterventionAction,
        reflection_prompt_tokens: usize,
        correction_tokens: usize,
    ) {
        self.interventions.push(InterventionRecord {
            trigger_step,
            group_conf_at_trigger: group_conf,
            action,
            reflection_prompt_tokens,
            correction_tokens,
        });
    }

    /// Retire everything after the last sentence boundary strictly before
    /// the trigger token; returns the decoded kept prefix.
    fn restart_truncate(&mut self) -> String {
        let live: Vec<usize> = self
            .consumed
            .iter()
            .enumerate()
            .filter(|(_, c)| !c.retired)
            .map(|(i, _)| i)
            .collect();
        let n = live.len();
        let mut keep = 0;
        for pos in (0..n.saturating_sub(1)).rev() {
            let text = &self.consumed[live[pos]].event.token_text;
            if text.contains(['.', '?', '!', '\n']) {
                keep = pos + 1;
                break;
            }
        }
        for &ci in &live[keep..] {
            self.consumed[ci].retired = true;
        }
        self.discarded += n - keep;
        self.live_len = keep;
        live[..keep]
            .iter()
            .map(|&ci| self.consumed[ci].event.token_text.as_str())
            .collect()
    }

    fn run_correction(&mut self, reflection_prompt: &str, budget: usize) -> CorrectionResult {
        let request = self.next_request(reflection_prompt, budget);
        let mut stream = match self.backend.start_stream(&request) {
            Ok(stream) => stream,
            Err(e) => {
                let prompt_tokens = approx_prompt_tokens(reflection_prompt);
                self.prompt_tokens += prompt_tokens;
                return CorrectionResult {
                    tokens: 0,
                    prompt_tokens,
                    failure: Some(e.to_string()),
                };
            }
        };
        self.open_segment(SegmentRole::Correction);
        self.series.reset_window();
        let mut tokens = 0usize;
        let mut failure: Option<(Error, SegmentEnd)> = None;
        loop {
            match stream.next_event() {
                None => break,
                Some(Err(e)) => {
                    let end = if e.is_retryable() {
                        SegmentEnd::Fail
                    } else {
                        SegmentEnd::Fatal
                    };
                    failure = Some((e, end));
                    break;
                }
                Some(Ok(mut event)) => {
                    event.position = self.live_len + 1;
                    let validity = event
                        .validate()
                        .and_then(|_| token_confidence(&event, self.config.confidence.top_k));
                    match validity {
                        Ok(conf) => {
                            self.consume(event, conf);
                            tokens += 1;
                        }
                        Err(e) => {
                            stream.cancel();
                            failure = Some((e, SegmentEnd::Fatal));
                            break;
                        }
                    }
                }
            }
        }
        let prompt_tokens = self.absorb_prompt_tokens(stream.end(), &request);
        match failure {
            Some((e, end)) => {
                self.close_segment(end);
                CorrectionResult {
                    tokens,
                    prompt_tokens,
                    failure: Some(e.to_string()),
                }
            }
            None => {
                let end = match stream.end().map(|e| e.reason) {
                    Some(StopReason::Length) => SegmentEnd::Length,
                    Some(StopReason::StopSequence) => SegmentEnd::StopSequence,
                    Some(StopReason::Error) => SegmentEnd::Fail,
                    Some(StopReason::Natural) | None => SegmentEnd::Natural,
                };
                self.close_segment(end);
                CorrectionResult {
                    tokens,
                    prompt_tokens,
                    failure: None,
                }
            }
        }
    }

    fn next_request(&mut self, prompt: &str, max_tokens: usize) -> GenerationRequest {
        let seed = request_seed(
            self.config.sampling.seed,
            self.path_ordinal,
            self.request_ordinal,
        );
        self.request_ordinal += 1;
        GenerationRequest {
            prompt: prompt.to_string(),
            max_tokens,
            temperature: self.config.sampling.temperature,
            top_p: self.config.sampling.top_p,
            top_logprobs_k: self.config.confidence.top_k,
            stop_sequences: Vec::new(),
            seed: Some(seed),
        }
    }

    fn open_segment(&mut self, role: SegmentRole) {
        self.segments.push(SegmentBuild {
            role,
            end: None,
            consumed: Vec::new(),
        });
    }

    fn close_segment(&mut self, end: SegmentEnd) {
        let segment = self.segments.last_mut().expect("a segment is open");
        debug_assert!(segment.end.is_none(), "segment closed twice");
        segment.end = Some(end);
    }

    /// Add the request's prompt-side cost: the backend's reported usage
    /// when the stream ended with one, else the deterministic proxy.
    fn absorb_prompt_tokens(
        &mut self,
        end: Option<&StreamEnd>,
        request: &GenerationRequest,
    ) -> usize {
        let count = end
            .and_then(|e| e.prompt_tokens)
            .unwrap_or_else(|| approx_prompt_tokens(&request.prompt));
        self.prompt_tokens += count;
        count
    }

    fn live_text(&self) -> String {
        self.consumed
            .iter()
            .filter(|c| !c.retired)
            .map(|c| c.event.token_text.as_str())
            .collect()
    }

    fn continuation_prompt(&self) -> String {
        format!("{}{}", self.base_prompt, self.live_text())
    }

    fn finalize(self, ending: PathEnding) -> PathRun {
        let (status, stop_reason, stop_detail, error_note) = match ending {
            PathEnding::Completed(reason, detail) => {
                (PathStatus::Completed, Some(reason), detail, None)
            }
            PathEnding::PolicyAborted(detail) => (PathStatus::Aborted, None, detail, None),
            PathEnding::Failed(detail) => (
                PathStatus::Aborted,
                Some(StopReason::Error),
                detail.clone(),
                Some(detail),
            ),
        };
        let mut segments_out = Vec::new();
        for segment in &self.segments {
            let events: Vec<TokenEvent> = segment
                .consumed
                .iter()
                .filter(|&&ci| !self.consumed[ci].retired)
                .map(|&ci| self.consumed[ci].event.clone())
                .collect();
            if !events.is_empty() {
                segments_out.push(TrajectorySegment {
                    role: segment.role,
                    events,
                });
            }
        }
        let trajectory = Trajectory {
            segments: segments_out,
        };
        debug_assert_eq!(trajectory.token_count(), self.live_len);
        let extracted_answer = if status == PathStatus::Completed {
            extract_answer(&trajectory.decoded_text(), self.question.answer_kind)
        } else {
            None
        };
        let segment_info = self
            .segments
            .iter()
            .map(|s| SegmentInfo {
                role: s.role,
                end: s.end.expect("every segment is closed"),
            })
            .collect();
        PathRun {
            path_ordinal: self.path_ordinal,
            kind: self.kind,
            trajectory,
            confidence: self.series,
            consumed: self.consumed,
            segment_info,
            status,
            stop_reason,
            stop_detail,
            interventions: self.interventions,
            generated_tokens: self.live_len,
            discarded_tokens: self.discarded,
            prompt_tokens: self.prompt_tokens,
            extracted_answer,
            error_note,
        }
    }
}

struct CorrectionResult {
    tokens: usize,
    prompt_tokens: usize,
    failure: Option<String>,
}
