//! Aggregation of question runs into benchmark reports and the two
//! human-readable tables: an accuracy/cost summary per method and a
//! side-by-side policy comparison with salvage rates.
//!
//! The headline token figure is consumed tokens — everything the backend
//! generated, including tokens later retired by a restart — so cheaper-
//! looking policies cannot hide cost in discarded text.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::orchestrator::{Policy, QuestionRun, SessionConfig};

/// Per-question roll-up persisted in `report.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionSummary {
    pub id: String,
    /// Calibrated intervention threshold, absent when warmup failed.
    pub threshold_s: Option<f64>,
    pub n_paths: usize,
    pub answered: bool,
    pub vote_answer: Option<String>,
    pub vote_count: usize,
    pub correct: bool,
    pub generated_tokens: u64,
    pub discarded_tokens: u64,
    pub prompt_tokens: u64,
    pub intervened_paths: usize,
    pub salvaged_paths: usize,
    pub error: Option<String>,
    pub archive_id: Option<String>,
}

impl QuestionSummary {
    pub fn from_run(run: &QuestionRun) -> Self {
        QuestionSummary {
            id: run.question.id.clone(),
            threshold_s: run.calibration.as_ref().map(|c| c.threshold_s),
            n_paths: run.paths.len(),
            answered: run.answered,
            vote_answer: run.vote.as_ref().map(|(a, _)| a.clone()),
            vote_count: run.vote.as_ref().map_or(0, |(_, c)| *c),
            correct: run.correct,
            generated_tokens: run.generated_tokens,
            discarded_tokens: run.discarded_tokens,
            prompt_tokens: run.prompt_tokens,
            intervened_paths: run.intervened_paths,
            salvaged_paths: run.salvaged_paths,
            error: run.error.clone(),
            archive_id: run.archive_id.clone(),
        }
    }

    pub fn consumed_tokens(&self) -> u64 {
        self.generated_tokens + self.discarded_tokens
    }
}

/// A full single-policy benchmark result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub policy: Policy,
    pub seed: u64,
    pub paths_per_question: usize,
    pub warmup_per_question: usize,
    pub window: usize,
    pub top_k: usize,
    pub percentile: f64,
    pub questions: Vec<QuestionSummary>,
    pub total_questions: usize,
    pub answered_questions: usize,
    pub correct_questions: usize,
    /// Correct over all questions, in percent. Unevaluable questions count
    /// against accuracy; they cost tokens and produced no answer.
    pub accuracy_percent: f64,
    pub total_generated_tokens: u64,
    pub total_discarded_tokens: u64,
    /// Generated plus discarded: everything the backend actually produced.
    pub total_consumed_tokens: u64,
    pub total_prompt_tokens: u64,
    pub intervened_paths: usize,
    pub salvaged_paths: usize,
    /// Salvaged over intervened, in percent; absent when nothing fired.
    pub salvage_rate_percent: Option<f64>,
}

/// Aggregate the runs of one session into a report. All runs must share
/// one policy and seed; mixing sessions in a single report would make the
/// headline numbers meaningless.
pub fn compile_report(runs: &[QuestionRun], config: &SessionConfig) -> Result<BenchmarkReport> {
    for run in runs {
        if run.policy != config.policy {
            return Err(Error::Report(format!(
                "question {} ran under policy {} but the report is for {}",
                run.question.id, run.policy, config.policy
            )));
        }
        if run.seed != config.sampling.seed {
            return Err(Error::Report(format!(
                "question {} ran under seed {} but the report is for seed {}",
                run.question.id, run.seed, config.sampling.seed
            )));
        }
    }
    let questions: Vec<QuestionSummary> = runs.iter().map(QuestionSummary::from_run).collect();
    compile_from_summaries(questions, config)
}

/// Aggregate already-summarized questions (e.g. re-read from archives)
/// into a report under the given session settings.
pub fn compile_from_summaries(
    questions: Vec<QuestionSummary>,
    config: &SessionConfig,
) -> Result<BenchmarkReport> {
    if questions.is_empty() {
        return Err(Error::Report("no question runs to report on".into()));
    }
    let total_questions = questions.len();
    let answered_questions = questions.iter().filter(|q| q.answered).count();
    let correct_questions = questions.iter().filter(|q| q.correct).count();
    let accuracy_percent = 100.0 * correct_questions as f64 / total_questions as f64;
    let total_generated_tokens: u64 = questions.iter().map(|q| q.generated_tokens).sum();
    let total_discarded_tokens: u64 = questions.iter().map(|q| q.discarded_tokens).sum();
    let total_prompt_tokens: u64 = questions.iter().map(|q| q.prompt_tokens).sum();
    let intervened_paths: usize = questions.iter().map(|q| q.intervened_paths).sum();
    let salvaged_paths: usize = questions.iter().map(|q| q.salvaged_paths).sum();
    let salvage_rate_percent = if intervened_paths > 0 {
        Some(100.0 * salvaged_paths as f64 / intervened_paths as f64)
    } else {
        None
    };
    Ok(BenchmarkReport {
        policy: config.policy,
        seed: config.sampling.seed,
        paths_per_question: config.budget,
        warmup_per_question: config.warmup_count,
        window: config.confidence.window,
        top_k: config.confidence.top_k,
        percentile: config.confidence.percentile,
        questions,
        total_questions,
        answered_questions,
        correct_questions,
        accuracy_percent,
        total_generated_tokens,
        total_discarded_tokens,
        total_consumed_tokens: total_generated_tokens + total_discarded_tokens,
        total_prompt_tokens,
        intervened_paths,
        salvaged_paths,
        salvage_rate_percent,
    })
}

fn fmt_percent(value: f64) -> String {
    format!("{value:.1}")
}

fn fmt_millions(tokens: u64) -> String {
    format!("{:.2}", tokens as f64 / 1_000_000.0)
}

fn render_rows(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for row in rows {
        for (i, cell) in row.iter().enumerate() {
            widths[i] = widths[i].max(cell.len());
        }
    }
    let mut out = String::new();
    let fmt_row = |cells: &[String], widths: &[usize]| -> String {
        let padded: Vec<String> = cells
            .iter()
            .zip(widths)
            .map(|(c, w)| format!("{c:<w$}"))
            .collect();
        format!("| {} |", padded.join(" | "))
    };
    let header_cells: Vec<String> = header.iter().map(|h| h.to_string()).collect();
    out.push_str(&fmt_row(&header_cells, &widths));
    out.push('\n');
    let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
    out.push_str(&format!("|-{}-|", rule.join("-|-")));
    out.push('\n');
    for row in rows {
        out.push_str(&fmt_row(row, &widths));
        out.push('\n');
    }
    out
}

/// Accuracy/cost table, one row per report.
pub fn main_table(reports: &[BenchmarkReport]) -> String {
    let rows: Vec<Vec<String>> = reports
        .iter()
        .map(|r| {
            vec![
                r.policy.to_string(),
                r.paths_per_question.to_string(),
                fmt_percent(r.accuracy_percent),
                fmt_millions(r.total_consumed_tokens),
            ]
        })
        .collect();
    render_rows(
        &["Method", "Paths (K)", "Accuracy (%)", "Total Tokens (M)"],
        &rows,
    )
}

/// Policy comparison table with salvage rates; `-` marks a policy under
/// which no intervention ever fired.
pub fn compare_table(reports: &[BenchmarkReport]) -> String {
    let rows: Vec<Vec<String>> = reports
        .iter()
        .map(|r| {
            vec![
                r.policy.to_string(),
                fmt_percent(r.accuracy_percent),
                r.salvage_rate_percent
                    .map_or_else(|| "-".to_string(), fmt_percent),
                fmt_millions(r.total_consumed_tokens),
            ]
        })
        .collect();
    render_rows(
        &["Method", "Acc. (%)", "Salvage Rate (%)", "Tokens (M)"],
        &rows,
    )
}

/// Full human-readable report for one session (`report.txt`).
pub fn render_text(report: &BenchmarkReport) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "Policy {} | seed {} | {} paths/question ({} warmup) | window {} | top-k {} | percentile {}\n\n",
        report.policy,
        report.seed,
        report.paths_per_question,
        report.warmup_per_question,
        report.window,
        report.top_k,
        report.percentile,
    ));
    out.push_str(&main_table(std::slice::from_ref(report)));
    out.push('\n');
    out.push_str(&format!(
        "Questions: {} total, {} answered, {} correct\n",
        report.total_questions, report.answered_questions, report.correct_questions
    ));
    out.push_str(&format!(
        "Tokens: {} generated + {} discarded = {} consumed ({} prompt-side)\n",
        report.total_generated_tokens,
        report.total_discarded_tokens,
        report.total_consumed_tokens,
        report.total_prompt_tokens,
    ));
    match report.salvage_rate_percent {
        Some(rate) => out.push_str(&format!(
            "Interventions: {} paths intervened, {} salvaged ({}%)\n",
            report.intervened_paths,
            report.salvaged_paths,
            fmt_percent(rate)
        )),
        None => out.push_str("Interventions: none fired\n"),
    }
    out.push('\n');
    let rows: Vec<Vec<String>> = report
        .questions
        .iter()
        .map(|q| {
            vec![
                q.id.clone(),
                q.threshold_s
                    .map_or_else(|| "-".to_string(), |s| format!("{s:.4}")),
                q.vote_answer.clone().unwrap_or_else(|| "-".to_string()),
                if q.correct { "yes" } else { "no" }.to_string(),
                q.consumed_tokens().to_string(),
                q.intervened_paths.to_string(),
                q.salvaged_paths.to_string(),
                q.error.clone().unwrap_or_default(),
            ]
        })
        .collect();
    out.push_str(&render_rows(
        &[
            "Question",
            "Threshold",
            "Vote",
            "Correct",
            "Consumed",
            "Intervened",
            "Salvaged",
            "Note",
        ],
        &rows,
    ));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::{AnswerKind, Problem};

    fn sample_run(id: &str, correct: bool, config: &SessionConfig) -> QuestionRun {
        QuestionRun {
            question: Problem {
                id: id.into(),
                question: "2+2?".into(),
                gold_answer: "4".into(),
                answer_kind: AnswerKind::Integer,
            },
            policy: config.policy,
            seed: config.sampling.seed,
            calibration: None,
            paths: Vec::new(),
            vote: Some(("4".into(), 3)),
            answered: true,
            correct,
            generated_tokens: 600_000,
            discarded_tokens: 25_000,
            prompt_tokens: 1_000,
            intervened_paths: 2,
            salvaged_paths: 1,
            warnings: Vec::new(),
            error: None,
            archive_id: None,
        }
    }

    #[test]
    fn report_aggregates_counts_and_rates() {
        let config = SessionConfig::default();
        let runs = vec![
            sample_run("a", true, &config),
            sample_run("b", false, &config),
            sample_run("c", true, &config),
        ];
        let report = compile_report(&runs, &config).unwrap();
        assert_eq!(report.total_questions, 3);
        assert_eq!(report.correct_questions, 2);
        assert!((report.accuracy_percent - 200.0 / 3.0).abs() < 1e-9);
        assert_eq!(report.total_consumed_tokens, 3 * 625_000);
        assert_eq!(report.intervened_paths, 6);
        assert_eq!(report.salvaged_paths, 3);
        assert_eq!(report.salvage_rate_percent, Some(50.0));
    }

    #[test]
    fn empty_run_set_is_rejected() {
        let config = SessionConfig::default();
        assert!(compile_report(&[], &config).is_err());
    }

    #[test]
    fn mixed_policy_runs_are_rejected() {
        let config = SessionConfig::default().with_policy(Policy::Reflect);
        let mut run = sample_run("a", true, &config);
        run.policy = Policy::Discard;
        let err = compile_report(&[run], &config).unwrap_err();
        assert!(err.to_string().contains("policy"));
    }

    #[test]
    fn mixed_seed_runs_are_rejected() {
        let config = SessionConfig::default();
        let mut run = sample_run("a", true, &config);
        run.seed = 999;
        assert!(compile_report(&[run], &config).is_err());
    }

    #[test]
    fn main_table_formats_accuracy_and_token_millions() {
        let config = SessionConfig::default().with_policy(Policy::Reflect);
        let runs = vec![sample_run("a", true, &config), sample_run("b", false, &config)];
        let report = compile_report(&runs, &config).unwrap();
        let table = main_table(std::slice::from_ref(&report));
        assert!(table.contains("Method"));
        assert!(table.contains("Paths (K)"));
        assert!(table.contains("Accuracy (%)"));
        assert!(table.contains("Total Tokens (M)"));
        assert!(table.contains("reflect"));
        assert!(table.contains("50.0"));
        assert!(table.contains("1.25"), "2 * 625k consumed = 1.25M:\n{table}");
    }

    #[test]
    fn compare_table_marks_missing_salvage_with_dash() {
        let config = SessionConfig::default().with_policy(Policy::Discard);
        let mut run = sample_run("a", true, &config);
        run.intervened_paths = 0;
        run.salvaged_paths = 0;
        let report = compile_report(&[run], &config).unwrap();
        assert_eq!(report.salvage_rate_percent, None);
        let table = compare_table(std::slice::from_ref(&report));
        assert!(table.contains("Salvage Rate (%)"));
        let row = table.lines().nth(2).unwrap();
        assert!(row.contains(" - "), "dash for absent salvage:\n{table}");
    }

    #[test]
    fn salvage_rate_uses_raw_counts_not_per_question_means() {
        // 1/2 and 0/4 intervened: pooled rate is 1/6, not mean(50, 0).
        let config = SessionConfig::default();
        let mut a = sample_run("a", true, &config);
        a.intervened_paths = 2;
        a.salvaged_paths = 1;
        let mut b = sample_run("b", true, &config);
        b.intervened_paths = 4;
        b.salvaged_paths = 0;
        let report = compile_report(&[a, b], &config).unwrap();
        let rate = report.salvage_rate_percent.unwrap();
        assert!((rate - 100.0 / 6.0).abs() < 1e-9);
    }

    #[test]
    fn render_text_includes_per_question_rows() {
        let config = SessionConfig::default();
        let mut run = sample_run("q-17", true, &config);
        run.error = Some("warmup failed".into());
        let report = compile_report(&[run], &config).unwrap();
        let text = render_text(&report);
        assert!(text.contains("q-17"));
        assert!(text.contains("warmup failed"));
        assert!(text.contains("Questions: 1 total"));
    }

    #[test]
    fn report_round_trips_through_json() {
        let config = SessionConfig::default();
        let report = compile_report(&[sample_run("a", true, &config)], &config).unwrap();
        let json = serde_json::to_string_pretty(&report).unwrap();
        let back: BenchmarkReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, report);
    }
}
