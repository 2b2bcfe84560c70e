//! Token-level confidence math.
//!
//! A generation step is scored by the mean of its top-k alternative
//! log-probabilities: a step where even the runner-up tokens are likely is
//! a step the model is sure about, while a flat distribution drags the
//! mean down. The per-step scores are smoothed by a causal sliding-window
//! mean ("group confidence"), and a per-question threshold is calibrated
//! as a nearest-rank percentile of the minimum group confidence observed
//! across warmup traces.
//!
//! All of this is plain `f64` arithmetic with documented tolerances: the
//! streaming window keeps a running sum, which stays within 1e-9 of the
//! definitional mean for any realistic trace length.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance granted when comparing the chosen token's logprob against the
/// top of its alternative list (backends round independently).
pub const LOGPROB_SLACK: f64 = 1e-6;

/// One emitted token together with the observable slice of the model's
/// next-token distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenEvent {
    /// Decoded text of the sampled token.
    pub token_text: String,
    /// Log-probability the model assigned to the sampled token.
    pub chosen_logprob: f64,
    /// Top alternative tokens with their log-probabilities, best first.
    pub top_logprobs: Vec<(String, f64)>,
    /// 1-based position of this token within its trajectory.
    pub position: usize,
}

impl TokenEvent {
    /// Build a validated event.
    pub fn new(
        token_text: impl Into<String>,
        chosen_logprob: f64,
        top_logprobs: Vec<(String, f64)>,
        position: usize,
    ) -> Result<Self> {
        let event = TokenEvent {
            token_text: token_text.into(),
            chosen_logprob,
            top_logprobs,
            position,
        };
        event.validate()?;
        Ok(event)
    }

    /// Check the structural invariants: a non-empty top list of finite,
    /// non-positive logprobs sorted best-first, a chosen logprob no better
    /// than the best alternative (modulo [`LOGPROB_SLACK`]), and a 1-based
    /// position.
    pub fn validate(&self) -> Result<()> {
        if self.position == 0 {
            return Err(Error::MalformedEvent(
                "token position must be 1-based".into(),
            ));
        }
        if self.top_logprobs.is_empty() {
            return Err(Error::MalformedEvent(format!(
                "token {:?} at position {} carries no top logprobs",
                self.token_text, self.position
            )));
        }
        for (token, lp) in &self.top_logprobs {
            if !lp.is_finite() || *lp > 0.0 {
                return Err(Error::MalformedEvent(format!(
                    "top logprob {lp} for token {token:?} at position {} is not a finite non-positive value",
                    self.position
                )));
            }
        }
        if !self.chosen_logprob.is_finite() || self.chosen_logprob > 0.0 {
            return Err(Error::MalformedEvent(format!(
                "chosen logprob {} at position {} is not a finite non-positive value",
                self.chosen_logprob, self.position
            )));
        }
        for pair in self.top_logprobs.windows(2) {
            if pair[0].1 < pair[1].1 {
                return Err(Error::MalformedEvent(format!(
                    "top logprobs at position {} are not sorted best-first",
                    self.position
                )));
            }
        }
        if self.chosen_logprob > self.top_logprobs[0].1 + LOGPROB_SLACK {
            return Err(Error::MalformedEvent(format!(
                "chosen logprob {} exceeds best alternative {} at position {}",
                self.chosen_logprob, self.top_logprobs[0].1, self.position
            )));
        }
        Ok(())
    }
}

/// Knobs for the confidence signal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceParams {
    /// How many top alternatives to average per step.
    pub top_k: usize,
    /// Sliding-window length for group confidence.
    pub window: usize,
    /// Percentile (0, 100] used to pick the threshold from warmup minima.
    pub percentile: f64,
}

impl Default for ConfidenceParams {
    fn default() -> Self {
        ConfidenceParams {
            top_k: 5,
            window: 256,
            percentile: 10.0,
        }
    }
}

impl ConfidenceParams {
    pub fn validate(&self) -> Result<()> {
        if self.top_k == 0 {
            return Err(Error::InvalidParameter("top_k must be at least 1".into()));
        }
        if self.window == 0 {
            return Err(Error::InvalidParameter("window must be at least 1".into()));
        }
        if !self.percentile.is_finite() || self.percentile <= 0.0 || self.percentile > 100.0 {
            return Err(Error::InvalidParameter(format!(
                "percentile must lie in (0, 100], got {}",
                self.percentile
            )));
        }
        Ok(())
    }

    /// Default minimum window fill before the trigger may fire: a quarter
    /// of the window, but always at least one step.
    pub fn default_min_basis(&self) -> usize {
        (self.window / 4).max(1)
    }
}

/// Score one step: the mean of the best `min(k, available)` alternative
/// log-probabilities. The chosen token's own logprob does not enter the
/// average; it is carried for diagnostics only.
pub fn token_confidence(event: &TokenEvent, k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::InvalidParameter("top_k must be at least 1".into()));
    }
    if event.top_logprobs.is_empty() {
        return Err(Error::MalformedEvent(format!(
            "token at position {} carries no top logprobs",
            event.position
        )));
    }
    let k_eff = k.min(event.top_logprobs.len());
    let sum: f64 = event.top_logprobs[..k_eff].iter().map(|(_, lp)| lp).sum();
    Ok(sum / k_eff as f64)
}

/// Sort a distribution best-first (ties broken by token text for
/// determinism) and keep the best `k` entries.
pub fn select_top_k(distribution: &[(String, f64)], k: usize) -> Result<Vec<(String, f64)>> {
    if k == 0 {
        return Err(Error::InvalidParameter("top_k must be at least 1".into()));
    }
    if distribution.is_empty() {
        return Err(Error::InvalidParameter(
            "cannot select from an empty distribution".into(),
        ));
    }
    if let Some((token, lp)) = distribution.iter().find(|(_, lp)| !lp.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "non-finite logprob {lp} for token {token:?}"
        )));
    }
    let mut sorted = distribution.to_vec();
    sorted.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .expect("logprobs checked finite")
            .then_with(|| a.0.cmp(&b.0))
    });
    sorted.truncate(k);
    Ok(sorted)
}

/// Streaming record of one trajectory's confidence signal.
///
/// Every consumed token is `push`ed in order; the series keeps the raw
/// per-token confidences, the sliding-window group confidence after each
/// push, and how many steps actually sat in the window (the "basis" —
/// partial windows average what they have). [`ConfidenceSeries::reset_window`]
/// starts a fresh window epoch without erasing history, which is how a
/// correction splice keeps post-splice smoothing untainted by the
/// low-confidence tokens that preceded it.
#[derive(Debug, Clone)]
pub struct ConfidenceSeries {
    window_len: usize,
    token_conf: Vec<f64>,
    group_conf: Vec<f64>,
    window_basis: Vec<usize>,
    /// 1-based step indices at which a new window epoch began.
    resets: Vec<usize>,
    running_min_group: f64,
    window: VecDeque<f64>,
    window_sum: f64,
    pending_reset: bool,
}

impl ConfidenceSeries {
    /// Create an empty series with the given window length (≥ 1).
    pub fn new(window_len: usize) -> Self {
        assert!(window_len >= 1, "window length must be at least 1");
        ConfidenceSeries {
            window_len,
            token_conf: Vec::new(),
            group_conf: Vec::new(),
            window_basis: Vec::new(),
            resets: Vec::new(),
            running_min_group: f64::INFINITY,
            window: VecDeque::with_capacity(window_len),
            window_sum: 0.0,
            pending_reset: false,
        }
    }

    /// Rebuild a series from recorded vectors (used when loading archives).
    /// The window state is reconstructed so further pushes behave as if the
    /// series had been streamed.
    pub fn from_recorded(
        window_len: usize,
        token_conf: Vec<f64>,
        group_conf: Vec<f64>,
        window_basis: Vec<usize>,
        resets: Vec<usize>,
    ) -> Result<Self> {
        if token_conf.len() != group_conf.len() || token_conf.len() != window_basis.len() {
            return Err(Error::InvalidParameter(
                "recorded series vectors have mismatched lengths".into(),
            ));
        }
        let mut series = ConfidenceSeries::new(window_len);
        let running_min_group = group_conf
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min);
        let epoch_start = resets.iter().copied().max().unwrap_or(1).max(1);
        let n = token_conf.len();
        if n > 0 {
            let tail_start = epoch_start.max(n.saturating_sub(window_len) + 1);
            for &c in &token_conf[tail_start - 1..] {
                series.window.push_back(c);
                series.window_sum += c;
            }
        }
        series.token_conf = token_conf;
        series.group_conf = group_conf;
        series.window_basis = window_basis;
        series.resets = resets;
        series.running_min_group = running_min_group;
        Ok(series)
    }

    /// Number of steps recorded so far.
    pub fn len(&self) -> usize {
        self.token_conf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_conf.is_empty()
    }

    /// Append one step's token confidence; returns the group confidence
    /// after this step.
    pub fn push(&mut self, token_conf: f64) -> f64 {
        if self.pending_reset {
            self.window.clear();
            self.window_sum = 0.0;
            self.pending_reset = false;
            self.resets.push(self.token_conf.len() + 1);
        }
        if self.window.len() == self.window_len {
            let evicted = self.window.pop_front().expect("window non-empty");
            self.window_sum -= evicted;
        }
        self.window.push_back(token_conf);
        self.window_sum += token_conf;
        let basis = self.window.len();
        let group = self.window_sum / basis as f64;
        self.token_conf.push(token_conf);
        self.group_conf.push(group);
        self.window_basis.push(basis);
        if group < self.running_min_group {
            self.running_min_group = group;
        }
        group
    }

    /// Start a fresh window epoch: the next push averages only itself and
    /// later steps. History (and the running minimum) is preserved.
    pub fn reset_window(&mut self) {
        self.pending_reset = true;
    }

    pub fn token_conf(&self) -> &[f64] {
        &self.token_conf
    }

    pub fn group_conf(&self) -> &[f64] {
        &self.group_conf
    }

    pub fn window_basis(&self) -> &[usize] {
        &self.window_basis
    }

    /// 1-based indices of steps that began a new window epoch.
    pub fn resets(&self) -> &[usize] {
        &self.resets
    }

    pub fn window_len(&self) -> usize {
        self.window_len
    }

    pub fn last_group_conf(&self) -> Option<f64> {
        self.group_conf.last().copied()
    }

    pub fn last_window_basis(&self) -> Option<usize> {
        self.window_basis.last().copied()
    }

    /// Minimum group confidence over the whole series (across epochs), or
    /// `None` for an empty series.
    pub fn min_group_conf(&self) -> Option<f64> {
        if self.group_conf.is_empty() {
            None
        } else {
            Some(self.running_min_group)
        }
    }
}

/// Minimum group confidence of a finished trajectory; errors on an empty
/// series because a zero-length trace has no minimum to contribute.
pub fn trajectory_min_group(series: &ConfidenceSeries) -> Result<f64> {
    series.min_group_conf().ok_or_else(|| {
        Error::EmptyTrajectory("minimum group confidence of an empty series".into())
    })
}

/// Outcome of warmup calibration for one question.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    /// Per-trace minimum group confidences, in warmup order.
    pub warmup_minima: Vec<f64>,
    /// How many warmup traces contributed.
    pub n_init: usize,
    /// Percentile requested.
    pub percentile_p: f64,
    /// The calibrated threshold: always one of `warmup_minima`.
    pub threshold_s: f64,
}

/// Nearest-rank percentile of the warmup minima: the smallest observed
/// value `g` such that at least `p` percent of the minima are ≤ `g`.
/// Equivalently the `ceil(n·p/100)`-th smallest minimum, so the threshold
/// is always an observed value, never an interpolation.
pub fn calibrate_threshold(warmup_minima: &[f64], percentile_p: f64) -> Result<CalibrationResult> {
    if warmup_minima.is_empty() {
        return Err(Error::EmptyWarmupSet);
    }
    if !percentile_p.is_finite() || percentile_p <= 0.0 || percentile_p > 100.0 {
        return Err(Error::InvalidParameter(format!(
            "percentile must lie in (0, 100], got {percentile_p}"
        )));
    }
    if let Some(bad) = warmup_minima.iter().find(|m| !m.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "non-finite warmup minimum {bad}"
        )));
    }
    let mut sorted = warmup_minima.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("minima checked finite"));
    let n = sorted.len();
    let rank = ((n as f64) * percentile_p / 100.0).ceil() as usize;
    let rank = rank.clamp(1, n);
    Ok(CalibrationResult {
        warmup_minima: warmup_minima.to_vec(),
        n_init: n,
        percentile_p,
        threshold_s: sorted[rank - 1],
    })
}
