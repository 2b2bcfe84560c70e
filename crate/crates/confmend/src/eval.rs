//! Benchmark plumbing: datasets, answer extraction, majority voting, and
//! salvage accounting.
//!
//! Correctness is exact string match on canonical forms — integers are
//! normalised (signs, leading zeros, digit separators), everything else is
//! whitespace-normalised. No symbolic equivalence is attempted.

use std::collections::BTreeSet;
use std::io::BufRead;
use std::path::Path;

use once_cell::sync::Lazy;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::orchestrator::{PathRun, PathStatus};

/// How a problem's answer should be read out of generated text.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnswerKind {
    Integer,
    Expression,
    Freeform,
}

/// One benchmark item.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Problem {
    pub id: String,
    pub question: String,
    /// Canonical-form gold answer.
    #[serde(rename = "answer")]
    pub gold_answer: String,
    #[serde(rename = "kind", default = "default_kind")]
    pub answer_kind: AnswerKind,
}

fn default_kind() -> AnswerKind {
    AnswerKind::Integer
}

impl Problem {
    pub fn validate(&self) -> Result<()> {
        if self.id.is_empty() {
            return Err(Error::InvalidParameter("problem id must be non-empty".into()));
        }
        if self.gold_answer.is_empty() {
            return Err(Error::InvalidParameter(format!(
                "problem {} has an empty gold answer",
                self.id
            )));
        }
        Ok(())
    }
}

/// Load a line-delimited dataset. Each line is a JSON object with `id`,
/// `question`, `answer`, and optional `kind` (default `integer`). Blank
/// lines and `#` comments are skipped. Duplicate ids are rejected.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<Problem>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::storage(path, e))?;
    load_dataset_from(std::io::BufReader::new(file))
}

/// Reader-based form of [`load_dataset`], used by tests.
pub fn load_dataset_from(reader: impl BufRead) -> Result<Vec<Problem>> {
    let mut problems = Vec::new();
    let mut seen = BTreeSet::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::Dataset {
            line: line_no,
            detail: format!("unreadable line: {e}"),
        })?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let problem: Problem = serde_json::from_str(trimmed).map_err(|e| Error::Dataset {
            line: line_no,
            detail: format!("unparseable problem: {e}"),
        })?;
        problem.validate().map_err(|e| Error::Dataset {
            line: line_no,
            detail: e.to_string(),
        })?;
        if !seen.insert(problem.id.clone()) {
            return Err(Error::Dataset {
                line: line_no,
                detail: format!("duplicate problem id {:?}", problem.id),
            });
        }
        problems.push(problem);
    }
    if problems.is_empty() {
        return Err(Error::Dataset {
            line: 0,
            detail: "dataset contains no problems".into(),
        });
    }
    Ok(problems)
}

/// Bring an answer into canonical form for exact-match comparison.
///
/// Integers: strip `$`, commas, spaces, a leading `+`; drop leading zeros;
/// collapse `-0` to `0`. Inputs that do not look like integers fall back to
/// whitespace normalisation. Expressions: all whitespace removed. Freeform:
/// trimmed, inner whitespace runs collapsed to single spaces.
pub fn canonicalize_answer(raw: &str, kind: AnswerKind) -> String {
    let trimmed = raw.trim();
    match kind {
        AnswerKind::Integer => {
            let cleaned: String = trimmed
                .chars()
                .filter(|c| !matches!(c, ',' | '$' | ' '))
                .collect();
            parse_integer_form(&cleaned).unwrap_or_else(|| collapse_whitespace(trimmed))
        }
        AnswerKind::Expression => trimmed.chars().filter(|c| !c.is_whitespace()).collect(),
        AnswerKind::Freeform => collapse_whitespace(trimmed),
    }
}

fn collapse_whitespace(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn parse_integer_form(s: &str) -> Option<String> {
    let (negative, digits) = match s.strip_prefix('-') {
        Some(rest) => (true, rest),
        None => (false, s.strip_prefix('+').unwrap_or(s)),
    };
    if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    let stripped = digits.trim_start_matches('0');
    let magnitude = if stripped.is_empty() { "0" } else { stripped };
    if negative && magnitude != "0" {
        Some(format!("-{magnitude}"))
    } else {
        Some(magnitude.to_string())
    }
}

static NUMBER_RE: Lazy<Regex> =
    Lazy::new(|| Regex::new(r"-?\d+(?:\.\d+)?").expect("static regex"));

/// Pull the final answer out of completed text.
///
/// The content of the last balanced `\boxed{...}` marker wins when one
/// exists. Otherwise, for integer problems, the last standalone integer is
/// taken (decimals and digits glued to words are skipped). The result is
/// canonicalised; absence is a value, not an error.
pub fn extract_answer(completed_text: &str, kind: AnswerKind) -> Option<String> {
    if let Some(inner) = last_boxed_content(completed_text) {
        let inner = inner.trim();
        if !inner.is_empty() {
            return Some(canonicalize_answer(inner, kind));
        }
    }
    match kind {
        AnswerKind::Integer => last_standalone_integer(completed_text)
            .map(|s| canonicalize_answer(&s, AnswerKind::Integer)),
        AnswerKind::Expression | AnswerKind::Freeform => None,
    }
}

/// Content of the last `\boxed{...}` whose braces balance, handling nested
/// braces such as `\boxed{\frac{1}{2}}`.
fn last_boxed_content(text: &str) -> Option<String> {
    const MARKER: &str = "\\boxed{";
    let starts: Vec<usize> = text.match_indices(MARKER).map(|(i, _)| i).collect();
    for &start in starts.iter().rev() {
        let body = &text[start + MARKER.len()..];
        let mut depth = 1usize;
        for (offset, ch) in body.char_indices() {
            match ch {
                '{' => depth += 1,
                '}' => {
                    depth -= 1;
                    if depth == 0 {
                        return Some(body[..offset].to_string());
                    }
                }
                _ => {}
            }
        }
    }
    None
}

fn last_standalone_integer(text: &str) -> Option<String> {
    let bytes = text.as_bytes();
    let mut found = None;
    for m in NUMBER_RE.find_iter(text) {
        if m.as_str().contains('.') {
            continue;
        }
        let prev = m.start().checked_sub(1).map(|i| bytes[i] as char);
        if matches!(prev, Some(c) if c.is_ascii_alphanumeric() || c == '_' || c == '.' || c == '-') {
            continue;
        }
        let next = bytes.get(m.end()).map(|&b| b as char);
        if matches!(next, Some(c) if c.is_ascii_alphanumeric() || c == '_') {
            continue;
        }
        found = Some(m.as_str().to_string());
    }
    found
}

/// Most frequent answer with its count; ties break to the answer whose
/// first occurrence is earliest. Empty input yields `None`.
pub fn majority_vote(answers: &[String]) -> Option<(String, usize)> {
    let mut tally: Vec<(&String, usize, usize)> = Vec::new();
    for (index, answer) in answers.iter().enumerate() {
        match tally.iter_mut().find(|(a, _, _)| *a == answer) {
            Some(entry) => entry.1 += 1,
            None => tally.push((answer, 1, index)),
        }
    }
    tally
        .into_iter()
        .max_by(|a, b| a.1.cmp(&b.1).then(b.2.cmp(&a.2)))
        .map(|(answer, count, _)| (answer.clone(), count))
}

/// Share of intervened paths that still completed with the gold answer:
/// `100 · salvaged / intervened`, or `None` when nothing was intervened.
/// `gold` must already be canonical.
pub fn compute_salvage_rate(runs: &[PathRun], gold: &str) -> Option<f64> {
    let intervened: Vec<&PathRun> = runs.iter().filter(|r| r.intervened()).collect();
    if intervened.is_empty() {
        return None;
    }
    let salvaged = intervened
        .iter()
        .filter(|r| {
            r.status == PathStatus::Completed && r.extracted_answer.as_deref() == Some(gold)
        })
        .count();
    Some(100.0 * salvaged as f64 / intervened.len() as f64)
}
