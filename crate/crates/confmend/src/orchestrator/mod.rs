//! Question-level execution: types for paths, trajectories, interventions,
//! and the session configuration that governs them. The state machine that
//! drives generation lives in [`engine`].

pub mod engine;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::backend::StopReason;
use crate::confidence::{CalibrationResult, ConfidenceParams, ConfidenceSeries, TokenEvent};
use crate::error::{Error, Result};
use crate::eval::Problem;

pub use engine::{
    build_reflection_prompt, request_seed, run_path, run_question, run_warmup, WarmupOutcome,
};

/// What to do when group confidence dips below the calibrated threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Policy {
    /// Terminate the path; it keeps its cost but casts no vote.
    Discard,
    /// Backtrack to the last sentence boundary and regenerate.
    Restart,
    /// Ask the model to critique and correct its partial reasoning, splice
    /// the correction in, and resume.
    Reflect,
}

impl Policy {
    pub const ALL: [Policy; 3] = [Policy::Discard, Policy::Restart, Policy::Reflect];

    pub fn as_str(&self) -> &'static str {
        match self {
            Policy::Discard => "discard",
            Policy::Restart => "restart",
            Policy::Reflect => "reflect",
        }
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Policy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "discard" => Ok(Policy::Discard),
            "restart" => Ok(Policy::Restart),
            "reflect" => Ok(Policy::Reflect),
            other => Err(Error::InvalidConfig(format!(
                "unknown policy {other:?} (expected discard, restart, or reflect)"
            ))),
        }
    }
}

/// Sampling parameters forwarded to the backend.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingParams {
    pub temperature: f64,
    pub top_p: f64,
    /// Base seed; per-request seeds are derived from it (see
    /// [`request_seed`]).
    pub seed: u64,
}

impl Default for SamplingParams {
    fn default() -> Self {
        SamplingParams {
            temperature: 0.7,
            top_p: 0.95,
            seed: 0,
        }
    }
}

/// Everything that governs one question's execution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionConfig {
    /// Total paths per question (warmup + reasoning).
    pub budget: usize,
    /// Unmonitored paths generated first to calibrate the threshold.
    pub warmup_count: usize,
    /// Monitored paths run under the policy.
    pub reasoning_count: usize,
    pub policy: Policy,
    pub confidence: ConfidenceParams,
    /// How many non-fallback interventions a path may spend before the
    /// trigger degrades to discard behaviour.
    pub max_interventions_per_path: usize,
    /// Cap on a path's trajectory length in tokens.
    pub max_tokens_per_path: usize,
    /// Consumed-token cooldown after an intervention before the trigger
    /// may fire again.
    pub refractory_tokens: usize,
    /// Minimum window fill before the trigger may fire.
    pub min_window_basis: usize,
    /// Cap on one correction segment (further capped by remaining path
    /// budget).
    pub correction_max_tokens: usize,
    /// Prompt template; `{question}` is replaced by the problem text.
    pub prompt_template: String,
    pub sampling: SamplingParams,
}

impl Default for SessionConfig {
    fn default() -> Self {
        let confidence = ConfidenceParams::default();
        let min_window_basis = confidence.default_min_basis();
        let refractory_tokens = confidence.window;
        SessionConfig {
            budget: 2,
            warmup_count: 1,
            reasoning_count: 1,
            policy: Policy::Reflect,
            confidence,
            max_interventions_per_path: 2,
            max_tokens_per_path: 4096,
            refractory_tokens,
            min_window_basis,
            correction_max_tokens: 1024,
            prompt_template: "{question}".into(),
            sampling: SamplingParams::default(),
        }
    }
}

impl SessionConfig {
    /// Set total and warmup path counts; reasoning count is the remainder.
    pub fn with_budget(mut self, budget: usize, warmup_count: usize) -> Self {
        self.budget = budget;
        self.warmup_count = warmup_count;
        self.reasoning_count = budget.saturating_sub(warmup_count);
        self
    }

    pub fn with_policy(mut self, policy: Policy) -> Self {
        self.policy = policy;
        self
    }

    /// Set confidence parameters and re-derive the dependent defaults
    /// (refractory period = window, minimum basis = window / 4).
    pub fn with_confidence(mut self, confidence: ConfidenceParams) -> Self {
        self.min_window_basis = confidence.default_min_basis();
        self.refractory_tokens = confidence.window;
        self.confidence = confidence;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.sampling.seed = seed;
        self
    }

    pub fn with_max_tokens_per_path(mut self, max: usize) -> Self {
        self.max_tokens_per_path = max;
        self
    }

    pub fn with_max_interventions(mut self, max: usize) -> Self {
        self.max_interventions_per_path = max;
        self
    }

    pub fn with_refractory_tokens(mut self, tokens: usize) -> Self {
        self.refractory_tokens = tokens;
        self
    }

    pub fn with_min_window_basis(mut self, basis: usize) -> Self {
        self.min_window_basis = basis;
        self
    }

    pub fn with_correction_max_tokens(mut self, max: usize) -> Self {
        self.correction_max_tokens = max;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.warmup_count < 1 {
            return Err(Error::InvalidConfig(
                "warmup_count must be at least 1".into(),
            ));
        }
        if self.budget != self.warmup_count + self.reasoning_count {
            return Err(Error::InvalidConfig(format!(
                "budget ({}) must equal warmup_count ({}) plus reasoning_count ({})",
                self.budget, self.warmup_count, self.reasoning_count
            )));
        }
        if self.max_tokens_per_path < 1 {
            return Err(Error::InvalidConfig(
                "max_tokens_per_path must be at least 1".into(),
            ));
        }
        if self.correction_max_tokens < 1 {
            return Err(Error::InvalidConfig(
                "correction_max_tokens must be at least 1".into(),
            ));
        }
        if self.min_window_basis < 1 {
            return Err(Error::InvalidConfig(
                "min_window_basis must be at least 1".into(),
            ));
        }
        if !self.sampling.temperature.is_finite() || self.sampling.temperature < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "temperature must be finite and non-negative, got {}",
                self.sampling.temperature
            )));
        }
        if !self.sampling.top_p.is_finite()
            || self.sampling.top_p <= 0.0
            || self.sampling.top_p > 1.0
        {
            return Err(Error::InvalidConfig(format!(
                "top_p must lie in (0, 1], got {}",
                self.sampling.top_p
            )));
        }
        self.confidence
            .validate()
            .map_err(|e| Error::InvalidConfig(e.to_string()))?;
        Ok(())
    }

    /// Render the main prompt for a problem.
    pub fn render_prompt(&self, question: &Problem) -> String {
        self.prompt_template.replace("{question}", &question.question)
    }
}

/// Role of a trajectory segment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentRole {
    /// Main-line generation (initial, post-restart, or post-splice
    /// resumption).
    Original,
    /// A correction produced from a reflection prompt.
    Correction,
}

/// Why a generation segment stopped accepting tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentEnd {
    Natural,
    Length,
    StopSequence,
    /// Transport failure after the recorded events.
    Fail,
    /// Non-retryable backend fault (malformed event, missing logprobs).
    Fatal,
    /// The confidence monitor cancelled the stream.
    Trigger,
}

/// One generation episode within a path.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectorySegment {
    pub role: SegmentRole,
    pub events: Vec<TokenEvent>,
}

impl TrajectorySegment {
    pub fn decoded_text(&self) -> String {
        self.events.iter().map(|e| e.token_text.as_str()).collect()
    }
}

/// The surviving token sequence of a path: ordered segments whose
/// concatenation is the path's final text.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trajectory {
    pub segments: Vec<TrajectorySegment>,
}

impl Trajectory {
    pub fn decoded_text(&self) -> String {
        self.segments.iter().map(|s| s.decoded_text()).collect()
    }

    pub fn token_count(&self) -> usize {
        self.segments.iter().map(|s| s.events.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.token_count() == 0
    }

    pub fn correction_segments(&self) -> usize {
        self.segments
            .iter()
            .filter(|s| s.role == SegmentRole::Correction)
            .count()
    }

    /// Check that token positions increase strictly across the
    /// concatenation and the correction-segment cap holds.
    pub fn validate(&self, max_corrections: usize) -> Result<()> {
        let mut last = 0usize;
        for segment in &self.segments {
            for event in &segment.events {
                if event.position <= last {
                    return Err(Error::EmptyTrajectory(format!(
                        "token positions must increase strictly; saw {} after {}",
                        event.position, last
                    )));
                }
                last = event.position;
            }
        }
        if self.correction_segments() > max_corrections {
            return Err(Error::InvalidParameter(format!(
                "trajectory has {} correction segments, cap is {max_corrections}",
                self.correction_segments()
            )));
        }
        Ok(())
    }
}

/// One token as the path consumed it, whether or not it survived into the
/// final trajectory. Restart truncation marks events `retired` instead of
/// erasing them, so archives keep the full cost record.
#[derive(Debug, Clone, PartialEq)]
pub struct ConsumedEvent {
    pub event: TokenEvent,
    /// Ordinal of the segment this token belonged to.
    pub segment: usize,
    pub role: SegmentRole,
    pub retired: bool,
}

/// Role and terminal cause of each segment, in order, including segments
/// that ended up empty. Replay uses this to re-create the exact stream
/// episode structure.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegmentInfo {
    pub role: SegmentRole,
    pub end: SegmentEnd,
}

/// The action a fired trigger resolved to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InterventionAction {
    Discard,
    Restart,
    Reflect,
}

impl fmt::Display for InterventionAction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            InterventionAction::Discard => "discard",
            InterventionAction::Restart => "restart",
            InterventionAction::Reflect => "reflect",
        };
        f.write_str(s)
    }
}

/// Bookkeeping for one fired trigger.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionRecord {
    /// 1-based consumed-step index at which the trigger fired.
    pub trigger_step: usize,
    /// Group confidence at that step (strictly below the threshold).
    pub group_conf_at_trigger: f64,
    pub action: InterventionAction,
    /// Prompt tokens spent on the reflection request (reflect only).
    pub reflection_prompt_tokens: usize,
    /// Tokens in the correction segment (reflect only).
    pub correction_tokens: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PathStatus {
    Completed,
    Aborted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PathKind {
    Warmup,
    Reasoning,
}

impl fmt::Display for PathKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            PathKind::Warmup => "warmup",
            PathKind::Reasoning => "reasoning",
        };
        f.write_str(s)
    }
}

/// Complete record of one path's execution.
#[derive(Debug, Clone)]
pub struct PathRun {
    /// Ordinal within the question (warmups first).
    pub path_ordinal: usize,
    pub kind: PathKind,
    /// Surviving token sequence.
    pub trajectory: Trajectory,
    /// Confidence signal over every consumed token, in consumption order.
    pub confidence: ConfidenceSeries,
    /// Every consumed token, including restart-retired ones.
    pub consumed: Vec<ConsumedEvent>,
    /// Role and end cause of every segment, including empty ones.
    pub segment_info: Vec<SegmentInfo>,
    pub status: PathStatus,
    /// Backend stop reason when the path ended with a stream still open;
    /// `None` for policy-aborted paths.
    pub stop_reason: Option<StopReason>,
    pub stop_detail: String,
    pub interventions: Vec<InterventionRecord>,
    /// Tokens in the surviving trajectory.
    pub generated_tokens: usize,
    /// Tokens consumed but retired by restart truncation.
    pub discarded_tokens: usize,
    /// Prompt-side tokens across all requests this path issued.
    pub prompt_tokens: usize,
    pub extracted_answer: Option<String>,
    pub error_note: Option<String>,
}

impl PathRun {
    pub fn decoded_text(&self) -> String {
        self.trajectory.decoded_text()
    }

    /// Tokens the backend actually produced for this path (surviving plus
    /// retired).
    pub fn consumed_tokens(&self) -> usize {
        self.generated_tokens + self.discarded_tokens
    }

    pub fn intervened(&self) -> bool {
        !self.interventions.is_empty()
    }
}

/// Aggregate result of running one question under one policy.
#[derive(Debug, Clone)]
pub struct QuestionRun {
    pub question: Problem,
    pub policy: Policy,
    pub seed: u64,
    /// `None` when warmup failed outright.
    pub calibration: Option<CalibrationResult>,
    pub paths: Vec<PathRun>,
    /// Winning answer and its vote count.
    pub vote: Option<(String, usize)>,
    /// Whether any path produced a votable answer.
    pub answered: bool,
    pub correct: bool,
    /// Tokens in surviving trajectories, all paths.
    pub generated_tokens: u64,
    /// Restart-retired tokens, all paths.
    pub discarded_tokens: u64,
    /// Prompt-side tokens, all requests.
    pub prompt_tokens: u64,
    pub intervened_paths: usize,
    pub salvaged_paths: usize,
    pub warnings: Vec<String>,
    /// Set when the question could not be evaluated (warmup failure).
    pub error: Option<String>,
    /// Filled in after the run is persisted to an archive.
    pub archive_id: Option<String>,
}

impl QuestionRun {
    /// Everything the backend produced: surviving plus retired tokens.
    pub fn consumed_tokens(&self) -> u64 {
        self.generated_tokens + self.discarded_tokens
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn policy_parses_case_insensitively() {
        assert_eq!("Reflect".parse::<Policy>().unwrap(), Policy::Reflect);
        assert_eq!(" discard ".parse::<Policy>().unwrap(), Policy::Discard);
        assert!("mend".parse::<Policy>().is_err());
    }

    #[test]
    fn default_config_is_valid_and_consistent() {
        let config = SessionConfig::default();
        config.validate().unwrap();
        assert_eq!(config.budget, config.warmup_count + config.reasoning_count);
        assert_eq!(config.min_window_basis, 64);
        assert_eq!(config.refractory_tokens, 256);
    }

    #[test]
    fn with_budget_keeps_the_split_invariant() {
        let config = SessionConfig::default().with_budget(32, 16);
        config.validate().unwrap();
        assert_eq!(config.reasoning_count, 16);
        let bad = SessionConfig {
            reasoning_count: 5,
            ..SessionConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn config_rejects_zero_warmup() {
        let config = SessionConfig::default().with_budget(2, 0);
        assert!(config.validate().is_err());
    }

    #[test]
    fn with_confidence_rederives_dependent_defaults() {
        let config = SessionConfig::default().with_confidence(crate::confidence::ConfidenceParams {
            top_k: 3,
            window: 8,
            percentile: 25.0,
        });
        assert_eq!(config.min_window_basis, 2);
        assert_eq!(config.refractory_tokens, 8);
    }

    #[test]
    fn prompt_template_substitutes_question() {
        let config = SessionConfig {
            prompt_template: "Solve: {question}\nAnswer:".into(),
            ..SessionConfig::default()
        };
        let q = Problem {
            id: "q1".into(),
            question: "2+2?".into(),
            gold_answer: "4".into(),
            answer_kind: crate::eval::AnswerKind::Integer,
        };
        assert_eq!(config.render_prompt(&q), "Solve: 2+2?\nAnswer:");
    }

    #[test]
    fn trajectory_validation_catches_position_regressions() {
        let ev = |pos: usize| TokenEvent {
            token_text: "x".into(),
            chosen_logprob: -0.5,
            top_logprobs: vec![("x".into(), -0.5)],
            position: pos,
        };
        let good = Trajectory {
            segments: vec![TrajectorySegment {
                role: SegmentRole::Original,
                events: vec![ev(1), ev(2)],
            }],
        };
        good.validate(2).unwrap();
        let bad = Trajectory {
            segments: vec![TrajectorySegment {
                role: SegmentRole::Original,
                events: vec![ev(2), ev(2)],
            }],
        };
        assert!(bad.validate(2).is_err());
    }
}
