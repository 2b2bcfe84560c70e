//! Deterministic scripted backend.
//!
//! A script is a set of named branches, each an ordered list of steps
//! (token text plus a next-token distribution) with optional injected
//! transport failures. Incoming requests are routed to a branch by
//! dispatch rules — substring-of-prompt and/or exact-seed matchers,
//! evaluated in file order — with two built-in fallbacks: a prompt
//! containing the reflection interruption notice is served the
//! `reflection` branch when one exists, and everything else falls back to
//! `main`. The same request always yields the same stream, which is what
//! makes end-to-end runs replayable byte for byte.
//!
//! Scripts load from JSONL. Lines are objects tagged by `type`:
//!
//! ```text
//! {"type":"branch","name":"main"}
//! {"type":"step","token":" 4","top":[[" 4",-0.1],[" 5",-2.3]],"chosen":-0.1}
//! {"type":"fail","detail":"connection reset"}
//! {"type":"rule","prompt_contains":"Q2","seed":1001,"branch":"q2-dip"}
//! ```
//!
//! Blank lines and lines starting with `#` are ignored. Step lines belong
//! to the most recent branch line (or to `main` before any branch line).
//! A rule with several conditions requires all of them; a rule with none
//! always matches.

use std::collections::BTreeMap;
use std::io::BufRead;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use crate::backend::{
    approx_prompt_tokens, GenerationRequest, StopReason, StreamEnd, StreamingBackend, TokenStream,
};
use crate::confidence::{select_top_k, TokenEvent};
use crate::error::{Error, Result};
use crate::reflection;

/// Branch name served to reflection prompts when present.
pub const REFLECTION_BRANCH: &str = "reflection";
/// Branch name served when nothing else matches.
pub const MAIN_BRANCH: &str = "main";

/// One scripted generation step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptStep {
    /// Decoded token text.
    pub token: String,
    /// Next-token distribution (full or already top-k), any order.
    pub top: Vec<(String, f64)>,
    /// Logprob of the sampled token; defaults to its entry in `top`, or
    /// the worst listed logprob if absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chosen: Option<f64>,
}

impl ScriptStep {
    pub fn new(token: impl Into<String>, top: Vec<(String, f64)>) -> Self {
        ScriptStep {
            token: token.into(),
            top,
            chosen: None,
        }
    }

    fn validate(&self) -> std::result::Result<(), String> {
        if self.top.is_empty() {
            return Err(format!("step {:?} has an empty distribution", self.token));
        }
        for (token, lp) in &self.top {
            if !lp.is_finite() || *lp > 0.0 {
                return Err(format!(
                    "step {:?} lists logprob {lp} for {token:?}; logprobs must be finite and ≤ 0",
                    self.token
                ));
            }
        }
        if let Some(chosen) = self.chosen {
            if !chosen.is_finite() || chosen > 0.0 {
                return Err(format!(
                    "step {:?} has chosen logprob {chosen}; must be finite and ≤ 0",
                    self.token
                ));
            }
        }
        Ok(())
    }

    fn chosen_logprob(&self) -> f64 {
        if let Some(c) = self.chosen {
            return c;
        }
        self.top
            .iter()
            .find(|(t, _)| *t == self.token)
            .map(|(_, lp)| *lp)
            .unwrap_or_else(|| {
                self.top
                    .iter()
                    .map(|(_, lp)| *lp)
                    .fold(f64::INFINITY, f64::min)
            })
    }
}

/// One entry in a branch: a step to emit or a failure to inject.
#[derive(Debug, Clone, PartialEq)]
pub enum ScriptEntry {
    Step(ScriptStep),
    Fail { detail: String },
}

/// How a request is routed to a branch. All present conditions must hold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DispatchRule {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_contains: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub branch: String,
}

impl DispatchRule {
    fn matches(&self, request: &GenerationRequest) -> bool {
        if let Some(needle) = &self.prompt_contains {
            if !request.prompt.contains(needle.as_str()) {
                return false;
            }
        }
        if let Some(seed) = self.seed {
            if request.seed != Some(seed) {
                return false;
            }
        }
        true
    }
}

#[derive(Debug, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
enum ScriptLine {
    Branch {
        name: String,
    },
    Step {
        token: String,
        top: Vec<(String, f64)>,
        #[serde(default)]
        chosen: Option<f64>,
    },
    Fail {
        #[serde(default)]
        detail: Option<String>,
    },
    Rule {
        #[serde(default)]
        prompt_contains: Option<String>,
        #[serde(default)]
        seed: Option<u64>,
        branch: String,
    },
}

/// A parsed, validated script.
#[derive(Debug, Clone, Default)]
pub struct Script {
    branches: BTreeMap<String, Vec<ScriptEntry>>,
    dispatch: Vec<DispatchRule>,
}

impl Script {
    /// Build a script programmatically. `main` must be among the branches.
    pub fn new() -> Self {
        Script::default()
    }

    /// Add or extend a branch.
    pub fn with_branch(
        mut self,
        name: impl Into<String>,
        steps: Vec<ScriptStep>,
    ) -> Result<Self> {
        let name = name.into();
        for step in &steps {
            step.validate()
                .map_err(|detail| Error::Script { line: 0, detail })?;
        }
        self.branches
            .entry(name)
            .or_default()
            .extend(steps.into_iter().map(ScriptEntry::Step));
        Ok(self)
    }

    /// Append an injected transport failure to a branch.
    pub fn with_failure(mut self, branch: impl Into<String>, detail: impl Into<String>) -> Self {
        self.branches
            .entry(branch.into())
            .or_default()
            .push(ScriptEntry::Fail {
                detail: detail.into(),
            });
        self
    }

    /// Append a dispatch rule (evaluated in insertion order).
    pub fn with_rule(mut self, rule: DispatchRule) -> Self {
        self.dispatch.push(rule);
        self
    }

    /// Parse a JSONL script from a reader.
    pub fn from_reader(reader: impl BufRead) -> Result<Self> {
        let mut script = Script::new();
        let mut current = MAIN_BRANCH.to_string();
        let mut saw_line = false;
        for (idx, line) in reader.lines().enumerate() {
            let line_no = idx + 1;
            let line = line.map_err(|e| Error::Script {
                line: line_no,
                detail: format!("unreadable line: {e}"),
            })?;
            let trimmed = line.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            saw_line = true;
            let parsed: ScriptLine =
                serde_json::from_str(trimmed).map_err(|e| Error::Script {
                    line: line_no,
                    detail: format!("unparseable entry: {e}"),
                })?;
            match parsed {
                ScriptLine::Branch { name } => {
                    if name.is_empty() {
                        return Err(Error::Script {
                            line: line_no,
                            detail: "branch name must be non-empty".into(),
                        });
                    }
                    script.branches.entry(name.clone()).or_default();
                    current = name;
                }
                ScriptLine::Step { token, top, chosen } => {
                    let step = ScriptStep { token, top, chosen };
                    step.validate().map_err(|detail| Error::Script {
                        line: line_no,
                        detail,
                    })?;
                    script
                        .branches
                        .entry(current.clone())
                        .or_default()
                        .push(ScriptEntry::Step(step));
                }
                ScriptLine::Fail { detail } => {
                    script
                        .branches
                        .entry(current.clone())
                        .or_default()
                        .push(ScriptEntry::Fail {
                            detail: detail.unwrap_or_else(|| "scripted transport failure".into()),
                        });
                }
                ScriptLine::Rule {
                    prompt_contains,
                    seed,
                    branch,
                } => {
                    script.dispatch.push(DispatchRule {
                        prompt_contains,
                        seed,
                        branch,
                    });
                }
            }
        }
        if !saw_line {
            return Err(Error::Script {
                line: 0,
                detail: "script contains no entries".into(),
            });
        }
        script.validate()?;
        Ok(script)
    }

    /// Load a JSONL script file.
    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::storage(path, e))?;
        Script::from_reader(std::io::BufReader::new(file))
    }

    /// Check cross-entry invariants: `main` exists and every rule targets
    /// an existing branch.
    pub fn validate(&self) -> Result<()> {
        if !self.branches.contains_key(MAIN_BRANCH) {
            return Err(Error::Script {
                line: 0,
                detail: format!("script must define a {MAIN_BRANCH:?} branch"),
            });
        }
        for rule in &self.dispatch {
            if !self.branches.contains_key(&rule.branch) {
                return Err(Error::Script {
                    line: 0,
                    detail: format!("dispatch rule targets unknown branch {:?}", rule.branch),
                });
            }
        }
        Ok(())
    }

    pub fn branch_names(&self) -> impl Iterator<Item = &str> {
        self.branches.keys().map(String::as_str)
    }

    pub fn branch(&self, name: &str) -> Option<&[ScriptEntry]> {
        self.branches.get(name).map(Vec::as_slice)
    }

    /// Route a request to a branch name.
    pub fn resolve_branch(&self, request: &GenerationRequest) -> &str {
        for rule in &self.dispatch {
            if rule.matches(request) {
                return &rule.branch;
            }
        }
        if self.branches.contains_key(REFLECTION_BRANCH)
            && request.prompt.contains(reflection::INTERRUPTION_MARKER)
        {
            return REFLECTION_BRANCH;
        }
        MAIN_BRANCH
    }
}

/// Backend that serves scripts. Tracks how many token events it has
/// emitted in total, which gives tests an accounting oracle independent of
/// the orchestrator's own bookkeeping.
pub struct ScriptedBackend {
    script: Script,
    served: AtomicUsize,
}

impl ScriptedBackend {
    pub fn new(script: Script) -> Result<Self> {
        script.validate()?;
        Ok(ScriptedBackend {
            script,
            served: AtomicUsize::new(0),
        })
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        ScriptedBackend::new(Script::from_path(path)?)
    }

    pub fn script(&self) -> &Script {
        &self.script
    }

    /// Total token events emitted across all streams so far.
    pub fn served_tokens(&self) -> usize {
        self.served.load(Ordering::Relaxed)
    }
}

impl StreamingBackend for ScriptedBackend {
    fn start_stream(&self, request: &GenerationRequest) -> Result<Box<dyn TokenStream + '_>> {
        request.validate()?;
        let branch = self.script.resolve_branch(request);
        let entries = self
            .script
            .branch(branch)
            .expect("resolve_branch returns existing branches");
        Ok(Box::new(ScriptedStream {
            entries,
            served: &self.served,
            idx: 0,
            emitted: 0,
            max_tokens: request.max_tokens,
            top_k: request.top_logprobs_k,
            stop_sequences: request.stop_sequences.clone(),
            decoded: String::new(),
            prompt_tokens: approx_prompt_tokens(&request.prompt),
            end: None,
            cancelled: false,
        }))
    }

    fn name(&self) -> &str {
        "scripted"
    }
}

/// Stream over one script branch.
pub struct ScriptedStream<'a> {
    entries: &'a [ScriptEntry],
    served: &'a AtomicUsize,
    idx: usize,
    emitted: usize,
    max_tokens: usize,
    top_k: usize,
    stop_sequences: Vec<String>,
    decoded: String,
    prompt_tokens: usize,
    end: Option<StreamEnd>,
    cancelled: bool,
}

impl ScriptedStream<'_> {
    fn finish(&mut self, reason: StopReason, detail: impl Into<String>) {
        self.end = Some(StreamEnd {
            reason,
            detail: detail.into(),
            prompt_tokens: Some(self.prompt_tokens),
        });
    }
}

impl TokenStream for ScriptedStream<'_> {
    fn next_event(&mut self) -> Option<Result<TokenEvent>> {
        if self.cancelled || self.end.is_some() {
            return None;
        }
        if self.emitted >= self.max_tokens {
            self.finish(StopReason::Length, "max_tokens reached");
            return None;
        }
        match self.entries.get(self.idx) {
            None => {
                self.finish(StopReason::Natural, "script branch exhausted");
                None
            }
            Some(ScriptEntry::Fail { detail }) => {
                self.idx += 1;
                self.finish(StopReason::Error, detail.clone());
                Some(Err(Error::backend_transient(detail.clone())))
            }
            Some(ScriptEntry::Step(step)) => {
                self.idx += 1;
                let top = match select_top_k(&step.top, self.top_k) {
                    Ok(top) => top,
                    Err(e) => {
                        self.finish(StopReason::Error, e.to_string());
                        return Some(Err(e));
                    }
                };
                self.emitted += 1;
                self.served.fetch_add(1, Ordering::Relaxed);
                self.decoded.push_str(&step.token);
                let event = TokenEvent {
                    token_text: step.token.clone(),
                    chosen_logprob: step.chosen_logprob(),
                    top_logprobs: top,
                    position: self.emitted,
                };
                if let Err(e) = event.validate() {
                    self.finish(StopReason::Error, e.to_string());
                    return Some(Err(e));
                }
                if let Some(stop) = self
                    .stop_sequences
                    .iter()
                    .find(|s| !s.is_empty() && self.decoded.contains(s.as_str()))
                {
                    let detail = format!("stop sequence {stop:?} matched");
                    self.finish(StopReason::StopSequence, detail);
                }
                Some(Ok(event))
            }
        }
    }

    fn end(&self) -> Option<&StreamEnd> {
        self.end.as_ref()
    }

    fn cancel(&mut self) {
        if self.end.is_none() {
            self.cancelled = true;
        }
    }
}
