//! Run archives: persistence, re-execution replay, and trajectory export.
//!
//! Every question run can be written to an archive directory holding a
//! `manifest.json` plus one JSONL file per path. The archive captures
//! each consumed token with its logprob evidence and confidence values,
//! every segment's end cause, and the full intervention record.
//!
//! Replay is re-execution, not playback: the archived segments become a
//! backend that serves the recorded tokens, the real engine runs against
//! it under the archived configuration, and the fresh run is compared
//! against the archive step by step. Any drift in confidence math,
//! trigger placement, truncation, or voting surfaces as a mismatch.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt::Write as FmtWrite;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::backend::{GenerationRequest, StopReason, StreamEnd, StreamingBackend, TokenStream};
use crate::confidence::{CalibrationResult, TokenEvent};
use crate::error::{Error, Result};
use crate::eval::Problem;
use crate::orchestrator::{
    run_question, InterventionRecord, PathKind, PathStatus, QuestionRun, SegmentEnd, SegmentInfo,
    SessionConfig,
};

/// Archive layout version this build reads and writes.
pub const SCHEMA_VERSION: u32 = 1;

/// Absolute tolerance for comparing replayed floating-point series.
const REPLAY_TOLERANCE: f64 = 1e-9;

/// Request seeds encode the path ordinal modulo this stride (see
/// `request_seed`); replay uses it to route requests to per-path sources.
const SEED_PATH_STRIDE: u64 = 10_000;

/// Archive metadata written as `manifest.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub archive_id: String,
    pub question: Problem,
    pub config: SessionConfig,
    pub calibration: Option<CalibrationResult>,
    pub vote: Option<(String, usize)>,
    pub answered: bool,
    pub correct: bool,
    pub generated_tokens: u64,
    pub discarded_tokens: u64,
    pub prompt_tokens: u64,
    pub intervened_paths: usize,
    pub salvaged_paths: usize,
    pub warnings: Vec<String>,
    pub error: Option<String>,
    pub n_paths: usize,
}

/// First line of a path file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathMeta {
    pub path_ordinal: usize,
    pub kind: PathKind,
    pub status: PathStatus,
    pub stop_reason: Option<StopReason>,
    pub stop_detail: String,
    pub error_note: Option<String>,
    pub generated_tokens: usize,
    pub discarded_tokens: usize,
    pub prompt_tokens: usize,
    pub extracted_answer: Option<String>,
    pub window_len: usize,
    /// 1-based consumed steps that began a new window epoch.
    pub resets: Vec<usize>,
    pub segments: Vec<SegmentInfo>,
    pub interventions: Vec<InterventionRecord>,
}

/// One consumed token with its confidence evidence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenLine {
    /// 1-based index in consumption order.
    pub step: usize,
    /// Position the engine assigned at consume time.
    pub position: usize,
    pub text: String,
    pub chosen: f64,
    pub top: Vec<(String, f64)>,
    pub token_conf: f64,
    pub group_conf: f64,
    pub basis: usize,
    /// Index into the path's segment table.
    pub seg: usize,
    pub retired: bool,
}

impl TokenLine {
    fn event(&self) -> TokenEvent {
        TokenEvent {
            token_text: self.text.clone(),
            chosen_logprob: self.chosen,
            top_logprobs: self.top.clone(),
            position: self.position,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum PathLine {
    Meta(PathMeta),
    Token(TokenLine),
}

/// A loaded archive.
#[derive(Debug, Clone)]
pub struct ArchivedRun {
    pub manifest: Manifest,
    pub paths: Vec<ArchivedPath>,
}

#[derive(Debug, Clone)]
pub struct ArchivedPath {
    pub meta: PathMeta,
    pub tokens: Vec<TokenLine>,
}

/// Successful replay verification.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplaySummary {
    pub archive_id: String,
    pub paths_compared: usize,
    pub tokens_compared: usize,
}

/// Column layout for trajectory export.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExportFormat {
    Csv,
    Tsv,
}

impl ExportFormat {
    fn separator(self) -> char {
        match self {
            ExportFormat::Csv => ',',
            ExportFormat::Tsv => '\t',
        }
    }
}

impl FromStr for ExportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "csv" => Ok(ExportFormat::Csv),
            "tsv" => Ok(ExportFormat::Tsv),
            other => Err(Error::InvalidConfig(format!(
                "unknown export format '{other}' (expected csv or tsv)"
            ))),
        }
    }
}

/// Directory-backed store of run archives.
#[derive(Debug, Clone)]
pub struct TraceStore {
    root: PathBuf,
}

impl TraceStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        TraceStore { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn archive_dir(&self, archive_id: &str) -> PathBuf {
        self.root.join(archive_id)
    }

    /// Ids of all archives in the store, sorted.
    pub fn list_archives(&self) -> Result<Vec<String>> {
        if !self.root.exists() {
            return Ok(Vec::new());
        }
        let entries =
            fs::read_dir(&self.root).map_err(|e| Error::storage(self.root.clone(), e))?;
        let mut ids = Vec::new();
        for entry in entries {
            let entry = entry.map_err(|e| Error::storage(self.root.clone(), e))?;
            if entry.path().join("manifest.json").is_file() {
                ids.push(entry.file_name().to_string_lossy().into_owned());
            }
        }
        ids.sort();
        Ok(ids)
    }

    /// Persist one question run; returns the archive id. Ids derive from
    /// the question id, policy, and seed; collisions get a `-rN` suffix so
    /// repeated sessions never overwrite an existing archive.
    pub fn persist_run(&self, run: &QuestionRun, config: &SessionConfig) -> Result<String> {
        if run.policy != config.policy || run.seed != config.sampling.seed {
            return Err(Error::InvalidParameter(
                "run was produced under a different policy or seed than the config being archived"
                    .into(),
            ));
        }
        let archive_id = self.claim_archive_id(run)?;
        let dir = self.archive_dir(&archive_id);
        fs::create_dir_all(&dir).map_err(|e| Error::storage(dir.clone(), e))?;
        for path_run in &run.paths {
            let meta = PathMeta {
                path_ordinal: path_run.path_ordinal,
                kind: path_run.kind,
                status: path_run.status,
                stop_reason: path_run.stop_reason,
                stop_detail: path_run.stop_detail.clone(),
                error_note: path_run.error_note.clone(),
                generated_tokens: path_run.generated_tokens,
                discarded_tokens: path_run.discarded_tokens,
                prompt_tokens: path_run.prompt_tokens,
                extracted_answer: path_run.extracted_answer.clone(),
                window_len: path_run.confidence.window_len(),
                resets: path_run.confidence.resets().to_vec(),
                segments: path_run.segment_info.clone(),
                interventions: path_run.interventions.clone(),
            };
            let mut body = String::new();
            body.push_str(&serde_json::to_string(&PathLine::Meta(meta))?);
            body.push('\n');
            let token_conf = path_run.confidence.token_conf();
            let group_conf = path_run.confidence.group_conf();
            let basis = path_run.confidence.window_basis();
            for (i, consumed) in path_run.consumed.iter().enumerate() {
                let line = PathLine::Token(TokenLine {
                    step: i + 1,
                    position: consumed.event.position,
                    text: consumed.event.token_text.clone(),
                    chosen: consumed.event.chosen_logprob,
                    top: consumed.event.top_logprobs.clone(),
                    token_conf: token_conf[i],
                    group_conf: group_conf[i],
                    basis: basis[i],
                    seg: consumed.segment,
                    retired: consumed.retired,
                });
                body.push_str(&serde_json::to_string(&line)?);
                body.push('\n');
            }
            let file = dir.join(format!("path_{:03}.jsonl", path_run.path_ordinal));
            fs::write(&file, body).map_err(|e| Error::storage(file.clone(), e))?;
        }
        let manifest = Manifest {
            schema_version: SCHEMA_VERSION,
            archive_id: archive_id.clone(),
            question: run.question.clone(),
            config: config.clone(),
            calibration: run.calibration.clone(),
            vote: run.vote.clone(),
            answered: run.answered,
            correct: run.correct,
            generated_tokens: run.generated_tokens,
            discarded_tokens: run.discarded_tokens,
            prompt_tokens: run.prompt_tokens,
            intervened_paths: run.intervened_paths,
            salvaged_paths: run.salvaged_paths,
            warnings: run.warnings.clone(),
            error: run.error.clone(),
            n_paths: run.paths.len(),
        };
        let manifest_path = dir.join("manifest.json");
        let mut body = serde_json::to_string_pretty(&manifest)?;
        body.push('\n');
        fs::write(&manifest_path, body).map_err(|e| Error::storage(manifest_path.clone(), e))?;
        Ok(archive_id)
    }

    fn claim_archive_id(&self, run: &QuestionRun) -> Result<String> {
        let base = format!(
            "{}-{}-seed{}",
            sanitize_component(&run.question.id),
            run.policy,
            run.seed
        );
        if !self.archive_dir(&base).exists() {
            return Ok(base);
        }
        for bump in 2.. {
            let candidate = format!("{base}-r{bump}");
            if !self.archive_dir(&candidate).exists() {
                return Ok(candidate);
            }
        }
        unreachable!("archive id space is unbounded")
    }

    /// Load an archive from disk.
    pub fn load_run(&self, archive_id: &str) -> Result<ArchivedRun> {
        let dir = self.archive_dir(archive_id);
        let manifest_path = dir.join("manifest.json");
        if !manifest_path.is_file() {
            return Err(Error::ArchiveNotFound(archive_id.to_string()));
        }
        let manifest_body = fs::read_to_string(&manifest_path)
            .map_err(|e| Error::storage(manifest_path.clone(), e))?;
        let manifest: Manifest = serde_json::from_str(&manifest_body)?;
        if manifest.schema_version != SCHEMA_VERSION {
            return Err(Error::SchemaVersion {
                found: manifest.schema_version,
                supported: SCHEMA_VERSION,
            });
        }
        let corrupt = |detail: String| Error::Archive {
            archive_id: archive_id.to_string(),
            detail,
        };
        let mut files = Vec::new();
        let entries = fs::read_dir(&dir).map_err(|e| Error::storage(dir.clone(), e))?;
        for entry in entries {
            let entry = entry.map_err(|e| Error::storage(dir.clone(), e))?;
            let name = entry.file_name().to_string_lossy().into_owned();
            if name.starts_with("path_") && name.ends_with(".jsonl") {
                files.push(entry.path());
            }
        }
        files.sort();
        if files.len() != manifest.n_paths {
            return Err(corrupt(format!(
                "manifest promises {} paths but {} path files are present",
                manifest.n_paths,
                files.len()
            )));
        }
        let mut paths = Vec::with_capacity(files.len());
        for file in files {
            let body =
                fs::read_to_string(&file).map_err(|e| Error::storage(file.clone(), e))?;
            let mut meta: Option<PathMeta> = None;
            let mut tokens = Vec::new();
            for (lineno, raw) in body.lines().enumerate() {
                if raw.trim().is_empty() {
                    continue;
                }
                let line: PathLine = serde_json::from_str(raw)?;
                match line {
                    PathLine::Meta(m) if meta.is_none() => meta = Some(m),
                    PathLine::Meta(_) => {
                        return Err(corrupt(format!(
                            "{}: duplicate meta line at line {}",
                            file.display(),
                            lineno + 1
                        )));
                    }
                    PathLine::Token(token) => {
                        if meta.is_none() {
                            return Err(corrupt(format!(
                                "{}: token line before meta at line {}",
                                file.display(),
                                lineno + 1
                            )));
                        }
                        tokens.push(token);
                    }
                }
            }
            let meta = meta.ok_or_else(|| {
                corrupt(format!("{}: missing meta line", file.display()))
            })?;
            for token in &tokens {
                if token.seg >= meta.segments.len() {
                    return Err(corrupt(format!(
                        "{}: token step {} references segment {} of {}",
                        file.display(),
                        token.step,
                        token.seg,
                        meta.segments.len()
                    )));
                }
            }
            paths.push(ArchivedPath { meta, tokens });
        }
        Ok(ArchivedRun { manifest, paths })
    }

    /// Re-execute an archived run against a backend built from its own
    /// recorded segments and verify the fresh run matches the archive.
    pub fn replay(&self, archive_id: &str) -> Result<ReplaySummary> {
        let archived = self.load_run(archive_id)?;
        let backend = ReplayBackend::from_archive(&archived);
        let replayed = run_question(
            &archived.manifest.question,
            &archived.manifest.config,
            &backend,
        )?;
        let mismatch = |detail: String| Error::ReplayMismatch {
            archive_id: archive_id.to_string(),
            detail,
        };
        let tokens_compared = compare_runs(&archived, &replayed).map_err(mismatch)?;
        let leftover = backend.remaining_segments();
        if leftover > 0 {
            return Err(Error::ReplayMismatch {
                archive_id: archive_id.to_string(),
                detail: format!(
                    "replay finished with {leftover} recorded segments never requested"
                ),
            });
        }
        Ok(ReplaySummary {
            archive_id: archive_id.to_string(),
            paths_compared: archived.paths.len(),
            tokens_compared,
        })
    }

    /// Render an archive's per-token confidence series as CSV or TSV.
    /// Rows carry the calibrated threshold for monitored paths and flag
    /// window resets and fired triggers in the `event` column.
    pub fn export_trajectories(
        &self,
        archive_id: &str,
        format: ExportFormat,
    ) -> Result<String> {
        let archived = self.load_run(archive_id)?;
        let sep = format.separator();
        let mut out = String::new();
        let header = [
            "path_id",
            "step",
            "token_conf",
            "group_conf",
            "window_basis",
            "threshold",
            "retired",
            "event",
        ];
        out.push_str(&header.join(&sep.to_string()));
        out.push('\n');
        for path in &archived.paths {
            let threshold = match (path.meta.kind, &archived.manifest.calibration) {
                (PathKind::Reasoning, Some(c)) => c.threshold_s.to_string(),
                _ => String::new(),
            };
            let resets: BTreeSet<usize> = path.meta.resets.iter().copied().collect();
            let triggers: BTreeMap<usize, String> = path
                .meta
                .interventions
                .iter()
                .map(|i| (i.trigger_step, format!("trigger_{}", i.action)))
                .collect();
            for token in &path.tokens {
                let mut events = Vec::new();
                if resets.contains(&token.step) {
                    events.push("window_reset".to_string());
                }
                if let Some(trigger) = triggers.get(&token.step) {
                    events.push(trigger.clone());
                }
                writeln!(
                    out,
                    "{}{sep}{}{sep}{}{sep}{}{sep}{}{sep}{}{sep}{}{sep}{}",
                    path.meta.path_ordinal,
                    token.step,
                    token.token_conf,
                    token.group_conf,
                    token.basis,
                    threshold,
                    token.retired,
                    events.join("+"),
                )
                .expect("writing to a String cannot fail");
            }
        }
        Ok(out)
    }
}

/// Archive ids keep only filesystem-safe characters.
fn sanitize_component(raw: &str) -> String {
    let mapped: String = raw
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() {
                c.to_ascii_lowercase()
            } else if c == '-' || c == '_' {
                c
            } else {
                '-'
            }
        })
        .collect();
    let trimmed = mapped.trim_matches('-');
    if trimmed.is_empty() {
        "q".to_string()
    } else {
        trimmed.to_string()
    }
}

/// One recorded stream episode.
#[derive(Debug, Clone)]
struct RecordedSegment {
    events: Vec<TokenEvent>,
    end: SegmentEnd,
}

/// Backend that serves an archive's recorded segments back to the engine.
/// Requests are routed to per-path queues via the path ordinal encoded in
/// the request seed; each queue yields its segments in recorded order.
struct ReplayBackend {
    base_seed: u64,
    queues: Mutex<BTreeMap<usize, VecDeque<RecordedSegment>>>,
}

impl ReplayBackend {
    fn from_archive(archived: &ArchivedRun) -> Self {
        let mut queues = BTreeMap::new();
        for path in &archived.paths {
            let mut per_segment: Vec<Vec<TokenEvent>> =
                path.meta.segments.iter().map(|_| Vec::new()).collect();
            for token in &path.tokens {
                per_segment[token.seg].push(token.event());
            }
            let queue: VecDeque<RecordedSegment> = path
                .meta
                .segments
                .iter()
                .zip(per_segment)
                .map(|(info, events)| RecordedSegment {
                    events,
                    end: info.end,
                })
                .collect();
            queues.insert(path.meta.path_ordinal, queue);
        }
        ReplayBackend {
            base_seed: archived.manifest.config.sampling.seed,
            queues: Mutex::new(queues),
        }
    }

    fn remaining_segments(&self) -> usize {
        self.queues
            .lock()
            .expect("replay queue lock")
            .values()
            .map(|q| q.len())
            .sum()
    }
}

impl StreamingBackend for ReplayBackend {
    fn start_stream(&self, request: &GenerationRequest) -> Result<Box<dyn TokenStream + '_>> {
        request.validate()?;
        let Some(seed) = request.seed else {
            return Err(Error::backend_transient(
                "replay requires seeded requests",
            ));
        };
        let ordinal = (seed.wrapping_sub(self.base_seed) % SEED_PATH_STRIDE) as usize;
        let segment = self
            .queues
            .lock()
            .expect("replay queue lock")
            .get_mut(&ordinal)
            .and_then(|q| q.pop_front());
        match segment {
            Some(segment) => Ok(Box::new(ReplayStream::new(segment, request.max_tokens))),
            None => Err(Error::backend_transient(format!(
                "replay source has no more recorded segments for path {ordinal}"
            ))),
        }
    }

    fn name(&self) -> &str {
        "replay"
    }
}

struct ReplayStream {
    events: std::vec::IntoIter<TokenEvent>,
    end_cause: SegmentEnd,
    max_tokens: usize,
    emitted: usize,
    end: Option<StreamEnd>,
    cancelled: bool,
}

impl ReplayStream {
    fn new(segment: RecordedSegment, max_tokens: usize) -> Self {
        ReplayStream {
            events: segment.events.into_iter(),
            end_cause: segment.end,
            max_tokens,
            emitted: 0,
            end: None,
            cancelled: false,
        }
    }

    fn finish(&mut self, reason: StopReason, detail: &str) {
        self.end = Some(StreamEnd {
            reason,
            detail: detail.to_string(),
            prompt_tokens: None,
        });
    }
}

impl TokenStream for ReplayStream {
    fn next_event(&mut self) -> Option<Result<TokenEvent>> {
        if self.cancelled || self.end.is_some() {
            return None;
        }
        if self.emitted >= self.max_tokens {
            self.finish(StopReason::Length, "replay token budget reached");
            return None;
        }
        if let Some(event) = self.events.next() {
            self.emitted += 1;
            return Some(Ok(event));
        }
        match self.end_cause {
            SegmentEnd::Natural => {
                self.finish(StopReason::Natural, "replay segment complete");
                None
            }
            SegmentEnd::Length => {
                self.finish(StopReason::Length, "replay segment complete");
                None
            }
            SegmentEnd::StopSequence => {
                self.finish(StopReason::StopSequence, "replay segment complete");
                None
            }
            SegmentEnd::Trigger => {
                // The recorded run was interrupted here by the monitor. A
                // faithful replay cancels before reaching this point; being
                // asked for more tokens means the replay diverged, and the
                // segment-end comparison will report it.
                self.finish(
                    StopReason::Natural,
                    "replay segment exhausted after recorded interruption",
                );
                None
            }
            SegmentEnd::Fail => {
                self.finish(StopReason::Error, "recorded stream failure");
                Some(Err(Error::backend_transient("recorded stream failure")))
            }
            SegmentEnd::Fatal => {
                self.finish(StopReason::Error, "recorded fatal backend fault");
                Some(Err(Error::backend_fatal("recorded fatal backend fault")))
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

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= REPLAY_TOLERANCE
}

/// Compare a fresh re-execution against the archive it came from. Returns
/// the number of consumed tokens compared, or a description of the first
/// divergence. Free-text stop details and prompt-token counts are not
/// compared: the former are backend wording, the latter differ between a
/// live backend's usage reports and the deterministic proxy replay uses.
fn compare_runs(
    archived: &ArchivedRun,
    replayed: &QuestionRun,
) -> std::result::Result<usize, String> {
    if archived.paths.len() != replayed.paths.len() {
        return Err(format!(
            "archived {} paths, replay produced {}",
            archived.paths.len(),
            replayed.paths.len()
        ));
    }
    match (&archived.manifest.calibration, &replayed.calibration) {
        (None, None) => {}
        (Some(a), Some(r)) => {
            if a.n_init != r.n_init {
                return Err(format!(
                    "calibration used {} warmup minima, replay {}",
                    a.n_init, r.n_init
                ));
            }
            if !close(a.threshold_s, r.threshold_s) {
                return Err(format!(
                    "threshold {} replayed as {}",
                    a.threshold_s, r.threshold_s
                ));
            }
            for (i, (&am, &rm)) in a.warmup_minima.iter().zip(&r.warmup_minima).enumerate() {
                if !close(am, rm) {
                    return Err(format!("warmup minimum {i}: {am} replayed as {rm}"));
                }
            }
        }
        (a, r) => {
            return Err(format!(
                "calibration presence differs: archived {} vs replayed {}",
                a.is_some(),
                r.is_some()
            ));
        }
    }
    let mut tokens_compared = 0usize;
    for (path, replay) in archived.paths.iter().zip(&replayed.paths) {
        let meta = &path.meta;
        let ordinal = meta.path_ordinal;
        let at = |detail: String| format!("path {ordinal}: {detail}");
        if ordinal != replay.path_ordinal {
            return Err(at(format!("replayed as ordinal {}", replay.path_ordinal)));
        }
        if meta.kind != replay.kind {
            return Err(at(format!("kind {} replayed as {}", meta.kind, replay.kind)));
        }
        if meta.status != replay.status {
            return Err(at(format!(
                "status {:?} replayed as {:?}",
                meta.status, replay.status
            )));
        }
        if meta.stop_reason != replay.stop_reason {
            return Err(at(format!(
                "stop reason {:?} replayed as {:?}",
                meta.stop_reason, replay.stop_reason
            )));
        }
        if meta.segments != replay.segment_info {
            return Err(at(format!(
                "segment structure {:?} replayed as {:?}",
                meta.segments, replay.segment_info
            )));
        }
        if path.tokens.len() != replay.consumed.len() {
            return Err(at(format!(
                "{} consumed tokens replayed as {}",
                path.tokens.len(),
                replay.consumed.len()
            )));
        }
        let token_conf = replay.confidence.token_conf();
        let group_conf = replay.confidence.group_conf();
        let basis = replay.confidence.window_basis();
        for (i, (token, consumed)) in path.tokens.iter().zip(&replay.consumed).enumerate() {
            let step = i + 1;
            if token.text != consumed.event.token_text {
                return Err(at(format!(
                    "step {step}: token {:?} replayed as {:?}",
                    token.text, consumed.event.token_text
                )));
            }
            if token.position != consumed.event.position {
                return Err(at(format!(
                    "step {step}: position {} replayed as {}",
                    token.position, consumed.event.position
                )));
            }
            if token.seg != consumed.segment {
                return Err(at(format!(
                    "step {step}: segment {} replayed as {}",
                    token.seg, consumed.segment
                )));
            }
            if token.retired != consumed.retired {
                return Err(at(format!(
                    "step {step}: retired {} replayed as {}",
                    token.retired, consumed.retired
                )));
            }
            if !close(token.token_conf, token_conf[i]) {
                return Err(at(format!(
                    "step {step}: token confidence {} replayed as {}",
                    token.token_conf, token_conf[i]
                )));
            }
            if !close(token.group_conf, group_conf[i]) {
                return Err(at(format!(
                    "step {step}: group confidence {} replayed as {}",
                    token.group_conf, group_conf[i]
                )));
            }
            if token.basis != basis[i] {
                return Err(at(format!(
                    "step {step}: window basis {} replayed as {}",
                    token.basis, basis[i]
                )));
            }
        }
        if meta.resets != replay.confidence.resets() {
            return Err(at(format!(
                "window resets {:?} replayed as {:?}",
                meta.resets,
                replay.confidence.resets()
            )));
        }
        if meta.interventions.len() != replay.interventions.len() {
            return Err(at(format!(
                "{} interventions replayed as {}",
                meta.interventions.len(),
                replay.interventions.len()
            )));
        }
        for (i, (a, r)) in meta
            .interventions
            .iter()
            .zip(&replay.interventions)
            .enumerate()
        {
            if a.trigger_step != r.trigger_step
                || a.action != r.action
                || a.correction_tokens != r.correction_tokens
                || !close(a.group_conf_at_trigger, r.group_conf_at_trigger)
            {
                return Err(at(format!(
                    "intervention {i}: {a:?} replayed as {r:?}"
                )));
            }
        }
        if meta.generated_tokens != replay.generated_tokens {
            return Err(at(format!(
                "generated {} replayed as {}",
                meta.generated_tokens, replay.generated_tokens
            )));
        }
        if meta.discarded_tokens != replay.discarded_tokens {
            return Err(at(format!(
                "discarded {} replayed as {}",
                meta.discarded_tokens, replay.discarded_tokens
            )));
        }
        if meta.extracted_answer != replay.extracted_answer {
            return Err(at(format!(
                "answer {:?} replayed as {:?}",
                meta.extracted_answer, replay.extracted_answer
            )));
        }
        tokens_compared += path.tokens.len();
    }
    let m = &archived.manifest;
    if m.vote != replayed.vote {
        return Err(format!(
            "vote {:?} replayed as {:?}",
            m.vote, replayed.vote
        ));
    }
    if m.answered != replayed.answered || m.correct != replayed.correct {
        return Err(format!(
            "verdict answered={} correct={} replayed as answered={} correct={}",
            m.answered, m.correct, replayed.answered, replayed.correct
        ));
    }
    if m.intervened_paths != replayed.intervened_paths
        || m.salvaged_paths != replayed.salvaged_paths
    {
        return Err(format!(
            "intervened/salvaged {}/{} replayed as {}/{}",
            m.intervened_paths, m.salvaged_paths, replayed.intervened_paths,
            replayed.salvaged_paths
        ));
    }
    if m.generated_tokens != replayed.generated_tokens
        || m.discarded_tokens != replayed.discarded_tokens
    {
        return Err(format!(
            "token totals {}+{} replayed as {}+{}",
            m.generated_tokens,
            m.discarded_tokens,
            replayed.generated_tokens,
            replayed.discarded_tokens
        ));
    }
    if m.error != replayed.error {
        return Err(format!(
            "question error {:?} replayed as {:?}",
            m.error, replayed.error
        ));
    }
    Ok(tokens_compared)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::scripted::{
        DispatchRule, Script, ScriptStep, ScriptedBackend, MAIN_BRANCH, REFLECTION_BRANCH,
    };
    use crate::confidence::ConfidenceParams;
    use crate::eval::AnswerKind;
    use crate::orchestrator::Policy;

    fn problem() -> Problem {
        Problem {
            id: "q1".into(),
            question: "What is 6 times 7?".into(),
            gold_answer: "42".into(),
            answer_kind: AnswerKind::Integer,
        }
    }

    fn step(token: &str, lp: f64) -> ScriptStep {
        ScriptStep::new(token, vec![(token.to_string(), lp), ("alt".into(), lp)])
    }

    fn config(policy: Policy) -> SessionConfig {
        SessionConfig::default()
            .with_confidence(ConfidenceParams {
                top_k: 2,
                window: 3,
                percentile: 10.0,
            })
            .with_min_window_basis(1)
            .with_refractory_tokens(3)
            .with_budget(2, 1)
            .with_policy(policy)
            .with_max_tokens_per_path(64)
    }

    fn warm_branch() -> Vec<ScriptStep> {
        vec![
            step(" w1", -0.5),
            step(" w2.", -0.5),
            step(" w3", -0.5),
            step(" w4", -0.5),
        ]
    }

    /// Warmup floor -0.5; reasoning path dips at step 5 and reflects to a
    /// correct answer.
    fn reflect_script() -> Script {
        let mut main: Vec<ScriptStep> = (1..=4).map(|i| step(&format!(" s{i}"), -0.5)).collect();
        main.push(step(" s5", -6.0));
        main.push(step(" s6", -0.5));
        Script::new()
            .with_branch("warm", warm_branch())
            .unwrap()
            .with_branch(MAIN_BRANCH, main)
            .unwrap()
            .with_branch(REFLECTION_BRANCH, vec![step(" fix.", -0.4)])
            .unwrap()
            .with_branch("resume", vec![step(" \\boxed{42}", -0.4)])
            .unwrap()
            .with_rule(DispatchRule {
                prompt_contains: None,
                seed: Some(0),
                branch: "warm".into(),
            })
            .with_rule(DispatchRule {
                prompt_contains: Some(" fix.".into()),
                seed: None,
                branch: "resume".into(),
            })
    }

    fn restart_script() -> Script {
        let main = vec![
            step(" one", -0.5),
            step(" two.", -0.5),
            step(" three", -0.5),
            step(" four", -0.5),
            step(" five", -6.0),
        ];
        Script::new()
            .with_branch("warm", warm_branch())
            .unwrap()
            .with_branch(MAIN_BRANCH, main)
            .unwrap()
            .with_branch(
                "regen",
                vec![step(" six.", -0.5), step(" \\boxed{42}", -0.5)],
            )
            .unwrap()
            .with_rule(DispatchRule {
                prompt_contains: None,
                seed: Some(0),
                branch: "warm".into(),
            })
            .with_rule(DispatchRule {
                prompt_contains: Some(" one two.".into()),
                seed: None,
                branch: "regen".into(),
            })
    }

    fn run_and_persist(script: Script, policy: Policy, store: &TraceStore) -> (String, QuestionRun) {
        let backend = ScriptedBackend::new(script).unwrap();
        let cfg = config(policy);
        let run = run_question(&problem(), &cfg, &backend).unwrap();
        let id = store.persist_run(&run, &cfg).unwrap();
        (id, run)
    }

    #[test]
    fn persist_and_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let store = TraceStore::new(dir.path());
        let (id, run) = run_and_persist(reflect_script(), Policy::Reflect, &store);
        assert_eq!(id, "q1-reflect-seed0");
        let archived = store.load_run(&id).unwrap();
        assert_eq!(archived.manifest.schema_version, SCHEMA_VERSION);
        assert_eq!(archived.manifest.question, problem());
        assert_eq!(archived.manifest.vote, Some(("42".into(), 1)));
        assert!(archived.manifest.correct);
        assert_eq!(archived.paths.len(), 2);
        let reasoning = &archived.paths[1];
        assert_eq!(reasoning.meta.kind, PathKind::Reasoning);
        assert_eq!(reasoning.meta.interventions.len(), 1);
        assert_eq!(reasoning.meta.segments.len(), 3);
        let consumed: usize = run.paths.iter().map(|p| p.consumed.len()).sum();
        let archived_tokens: usize = archived.paths.iter().map(|p| p.tokens.len()).sum();
        assert_eq!(consumed, archived_tokens);
        assert_eq!(store.list_archives().unwrap(), vec![id]);
    }

    #[test]
    fn colliding_archive_ids_get_bumped() {
        let dir = tempfile::tempdir().unwrap();
        let store = TraceStore::new(dir.path());
        let (first, _) = run_and_persist(reflect_script(), Policy::Reflect, &store);
        let (second, _) = run_and_persist(reflect_script(), Policy::Reflect, &store);
        assert_eq!(first, "q1-reflect-seed0");
        assert_eq!(second, "q1-reflect-seed0-r2");
        assert_eq!(store.list_archives().unwrap().len(), 2);
    }

    #[test]
    fn archive_ids_are_sanitized() {
        assert_eq!(sanitize_component("AMC 12/Q#17"), "amc-12-q-17");
        assert_eq!(sanitize_component("///"), "q");
        assert_eq!(sanitize_component("ok_id-7"), "ok_id-7");
    }

    #[test]
    fn replay_verifies_a_reflect_run() {
        let dir = tempfile::tempdir().unwrap();
        let store = TraceStore::new(dir.path());
        let (id, run) = run_and_persist(reflect_script(), Policy::Reflect, &store);
        let summary = store.replay(&id).unwrap();
        assert_eq!(summary.paths_compared, 2);
        let consumed: usize = run.paths.iter().map(|p| p.consumed.len()).sum();
        assert_eq!(summary.tokens_compared, consumed);
    }

    #[test]
    fn replay_verifies_a_restart_run_with_retired_tokens() {
        let dir = tempfile::tempdir().unwrap();
        let store = TraceStore::new(dir.path());
        let (id, run) = run_and_persist(restart_script(), Policy::Restart, &store);
        assert!(run.discarded_tokens > 0, "fixture must retire tokens");
        let summary = store.replay(&id).unwrap();
        assert!(summary.tokens_compared > 0);
    }

    #[test]
    fn replay_verifies_a_run_with_backend_failures() {
        let dir = tempfile::tempdir().unwrap();
        let store = TraceStore::new(dir.path());
        let script = Script::new()
            .with_branch(MAIN_BRANCH, vec![step(" a", -0.5)])
            .unwrap()
            .with_failure(MAIN_BRANCH, "flaky");
        let (id, run) = run_and_persist(script, Policy::Reflect, &store);
        assert!(run.error.is_some(), "warmup should have failed");
        assert_eq!(run.paths.len(), 1);
        let summary = store.replay(&id).unwrap();
        assert_eq!(summary.paths_compared, 1);
        assert_eq!(summary.tokens_compared, 3);
    }

    #[test]
    fn replay_detects_tampered_confidence_values() {
        let dir = tempfile::tempdir().unwrap();
        let store = TraceStore::new(dir.path());
        let (id, _) = run_and_persist(reflect_script(), Policy::Reflect, &store);
        let file = store.archive_dir(&id).join("path_001.jsonl");
        let body = fs::read_to_string(&file).unwrap();
        let mut lines: Vec<String> = body.lines().map(String::from).collect();
        let mut value: serde_json::Value = serde_json::from_str(&lines[1]).unwrap();
        let drifted = value["group_conf"].as_f64().unwrap() + 0.25;
        value["group_conf"] = serde_json::json!(drifted);
        lines[1] = value.to_string();
        fs::write(&file, lines.join("\n")).unwrap();
        let err = store.replay(&id).unwrap_err();
        match err {
            Error::ReplayMismatch { detail, .. } => {
                assert!(detail.contains("group confidence"), "{detail}");
            }
            other => panic!("expected replay mismatch, got {other}"),
        }
    }

    #[test]
    fn replay_detects_a_truncated_archive() {
        let dir = tempfile::tempdir().unwrap();
        let store = TraceStore::new(dir.path());
        let (id, _) = run_and_persist(reflect_script(), Policy::Reflect, &store);
        let file = store.archive_dir(&id).join("path_001.jsonl");
        let body = fs::read_to_string(&file).unwrap();
        let mut lines: Vec<String> = body.lines().map(String::from).collect();
        lines.pop();
        fs::write(&file, lines.join("\n")).unwrap();
        assert!(store.replay(&id).is_err());
    }

    #[test]
    fn missing_archive_is_reported_as_not_found() {
        let dir = tempfile::tempdir().unwrap();
        let store = TraceStore::new(dir.path());
        match store.load_run("nope") {
            Err(Error::ArchiveNotFound(id)) => assert_eq!(id, "nope"),
            other => panic!("expected not-found, got {other:?}"),
        }
    }

    #[test]
    fn newer_schema_versions_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let store = TraceStore::new(dir.path());
        let (id, _) = run_and_persist(reflect_script(), Policy::Reflect, &store);
        let manifest_path = store.archive_dir(&id).join("manifest.json");
        let body = fs::read_to_string(&manifest_path).unwrap();
        let mut value: serde_json::Value = serde_json::from_str(&body).unwrap();
        value["schema_version"] = serde_json::json!(99);
        fs::write(&manifest_path, value.to_string()).unwrap();
        match store.load_run(&id) {
            Err(Error::SchemaVersion { found, supported }) => {
                assert_eq!(found, 99);
                assert_eq!(supported, SCHEMA_VERSION);
            }
            other => panic!("expected schema rejection, got {other:?}"),
        }
    }

    #[test]
    fn export_csv_carries_thresholds_triggers_and_resets() {
        let dir = tempfile::tempdir().unwrap();
        let store = TraceStore::new(dir.path());
        let (id, _) = run_and_persist(reflect_script(), Policy::Reflect, &store);
        let csv = store.export_trajectories(&id, ExportFormat::Csv).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(
            lines[0],
            "path_id,step,token_conf,group_conf,window_basis,threshold,retired,event"
        );
        // 4 warmup rows + 7 reasoning rows (5 + correction + resumption).
        assert_eq!(lines.len(), 12);
        let warmup_row = lines[1];
        assert!(warmup_row.starts_with("0,1,"));
        assert!(warmup_row.contains(",,"), "warmup rows have no threshold");
        let trigger_row = lines
            .iter()
            .find(|l| l.contains("trigger_reflect"))
            .expect("trigger row present");
        assert!(trigger_row.starts_with("1,5,"));
        assert!(trigger_row.contains("-0.5"), "threshold column filled");
        let reset_row = lines
            .iter()
            .find(|l| l.contains("window_reset"))
            .expect("reset row present");
        assert!(reset_row.starts_with("1,6,"));
    }

    #[test]
    fn export_marks_retired_tokens() {
        let dir = tempfile::tempdir().unwrap();
        let store = TraceStore::new(dir.path());
        let (id, _) = run_and_persist(restart_script(), Policy::Restart, &store);
        let csv = store.export_trajectories(&id, ExportFormat::Csv).unwrap();
        let retired_rows = csv
            .lines()
            .filter(|l| l.split(',').nth(6) == Some("true"))
            .count();
        assert_eq!(retired_rows, 3);
        assert!(csv.contains("trigger_restart"));
    }

    #[test]
    fn export_tsv_uses_tab_separators() {
        let dir = tempfile::tempdir().unwrap();
        let store = TraceStore::new(dir.path());
        let (id, _) = run_and_persist(reflect_script(), Policy::Reflect, &store);
        let tsv = store.export_trajectories(&id, ExportFormat::Tsv).unwrap();
        assert!(tsv.lines().next().unwrap().contains('\t'));
        assert!(!tsv.lines().next().unwrap().contains(','));
    }

    #[test]
    fn export_format_parses_case_insensitively() {
        assert_eq!("CSV".parse::<ExportFormat>().unwrap(), ExportFormat::Csv);
        assert_eq!(" tsv ".parse::<ExportFormat>().unwrap(), ExportFormat::Tsv);
        assert!("xml".parse::<ExportFormat>().is_err());
    }
}
