//! Instrumented multi-attempt solving.
//!
//! Each example gets up to `budget` attempts under an unchanged system
//! prompt. After every failed attempt the engine appends the failed answer
//! and a severity-calibrated feedback message to the user turn; attempts
//! stop at the first success.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::gateway::{Gateway, Role};
use crate::harness::answer::{score_completion, ANSWER_FORMAT_INSTRUCTION};
use crate::metrics::{success, GoldTarget, MetricKind, Score};
use crate::prompts;

/// Scores below this get the coarse feedback message.
pub const SEVERE_FAILURE_BELOW: f64 = 0.3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskExample {
    pub id: String,
    pub input: String,
    pub gold: GoldTarget,
    pub task_threshold: f64,
}

impl TaskExample {
    pub fn new(id: impl Into<String>, input: impl Into<String>, gold: GoldTarget) -> Self {
        let task_threshold = gold.metric_kind().default_threshold();
        Self {
            id: id.into(),
            input: input.into(),
            gold,
            task_threshold,
        }
    }

    pub fn with_threshold(mut self, threshold: f64) -> Self {
        self.task_threshold = threshold;
        self
    }

    pub fn metric_kind(&self) -> MetricKind {
        self.gold.metric_kind()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorType {
    Formatting,
    WrongEntity,
    WrongCategory,
    Arithmetic,
    IncompleteReasoning,
    Other,
}

impl ErrorType {
    pub const ALL: [ErrorType; 6] = [
        ErrorType::Formatting,
        ErrorType::WrongEntity,
        ErrorType::WrongCategory,
        ErrorType::Arithmetic,
        ErrorType::IncompleteReasoning,
        ErrorType::Other,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ErrorType::Formatting => "formatting",
            ErrorType::WrongEntity => "wrong_entity",
            ErrorType::WrongCategory => "wrong_category",
            ErrorType::Arithmetic => "arithmetic",
            ErrorType::IncompleteReasoning => "incomplete_reasoning",
            ErrorType::Other => "other",
        }
    }

    pub fn description(self) -> &'static str {
        match self {
            ErrorType::Formatting => "the answer content may be right but its form does not match what is expected",
            ErrorType::WrongEntity => "the answer names the wrong person, place, thing or value",
            ErrorType::WrongCategory => "the answer picks the wrong class, option or label",
            ErrorType::Arithmetic => "a calculation or counting step is wrong",
            ErrorType::IncompleteReasoning => "the reasoning stops before combining all required facts",
            ErrorType::Other => "the error does not fit the other categories",
        }
    }

    /// Maps classifier output onto the closed label set. Case, surrounding
    /// punctuation and space/underscore/hyphen differences are ignored;
    /// anything else is `Other`.
    pub fn parse_label(text: &str) -> ErrorType {
        let cleaned: String = text
            .trim()
            .trim_matches(|c: char| c.is_ascii_punctuation() && c != '_')
            .to_ascii_lowercase()
            .split(|c: char| c.is_whitespace() || c == '-')
            .filter(|s| !s.is_empty())
            .collect::<Vec<_>>()
            .join("_");
        ErrorType::ALL
            .into_iter()
            .find(|e| e.as_str() == cleaned)
            .unwrap_or(ErrorType::Other)
    }
}

impl fmt::Display for ErrorType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Attempt {
    /// 1-based.
    pub index: u32,
    pub trace: String,
    pub answer: String,
    pub score: Score,
    /// Text appended to the user turn before this attempt; empty on the first.
    pub feedback_context: String,
    /// Set on failed attempts only.
    pub error_type: Option<ErrorType>,
    /// Answer sentinel missing or answer not mappable.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttemptSet {
    pub example_id: String,
    pub input: String,
    pub threshold: f64,
    pub attempts: Vec<Attempt>,
    pub terminated_early: bool,
    /// Set when the gateway failed mid-example; such sets are never mined.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provider_failure: Option<String>,
}

impl AttemptSet {
    pub fn best(&self) -> Option<&Attempt> {
        // first maximum keeps the choice deterministic
        self.attempts.iter().fold(None, |best: Option<&Attempt>, a| match best {
            Some(b) if b.score >= a.score => Some(b),
            _ => Some(a),
        })
    }

    pub fn worst(&self) -> Option<&Attempt> {
        self.attempts.iter().fold(None, |worst: Option<&Attempt>, a| match worst {
            Some(w) if w.score <= a.score => Some(w),
            _ => Some(a),
        })
    }

    pub fn first_failed(&self) -> bool {
        self.attempts
            .first()
            .is_some_and(|a| !success(a.score, self.threshold))
    }
}

/// Feedback after a failed attempt: coarse when the score is below 0.3,
/// otherwise naming the error type.
pub fn make_feedback(score: Score, error_type: ErrorType) -> String {
    if score.value() < SEVERE_FAILURE_BELOW {
        prompts::COARSE_FEEDBACK.to_string()
    } else {
        prompts::typed_feedback(error_type)
    }
}

/// User turn for an attempt: input, answer-format instruction, then any
/// accumulated feedback.
pub fn attempt_user_content(input: &str, feedback_context: &str) -> String {
    let mut out = format!("{input}\n\n{ANSWER_FORMAT_INSTRUCTION}");
    if !feedback_context.is_empty() {
        out.push_str("\n\n");
        out.push_str(feedback_context);
    }
    out
}

fn feedback_entry(index: u32, answer: &str, message: &str) -> String {
    format!("[Attempt {index} answer] {answer}\n[Feedback] {message}")
}

/// One classification call; gateway failure or unknown output gives `Other`.
pub fn infer_error_type(
    trace: &str,
    answer: &str,
    gold: &GoldTarget,
    gateway: &Gateway,
) -> ErrorType {
    let request = gateway.request(
        Role::FailureAnalyst,
        prompts::ERROR_TYPE_SYSTEM,
        prompts::error_type_user(trace, answer, &gold.display()),
    );
    match gateway.complete(&request) {
        Ok(response) => ErrorType::parse_label(&response.text),
        Err(e) => {
            log::warn!("error-type classification failed ({e}); using `other`");
            ErrorType::Other
        }
    }
}

pub fn solve_with_retries(
    example: &TaskExample,
    system_prompt: &str,
    budget: u32,
    gateway: &Gateway,
) -> AttemptSet {
    let budget = budget.max(1);
    let mut set = AttemptSet {
        example_id: example.id.clone(),
        input: example.input.clone(),
        threshold: example.task_threshold,
        attempts: Vec::new(),
        terminated_early: false,
        provider_failure: None,
    };
    let mut feedback_context = String::new();
    for index in 1..=budget {
        let request = gateway.request(
            Role::TaskSolver,
            system_prompt,
            attempt_user_content(&example.input, &feedback_context),
        );
        let completion = match gateway.complete(&request) {
            Ok(response) => response.text,
            Err(e) => {
                log::warn!("example {}: attempt {index} failed: {e}", example.id);
                set.provider_failure = Some(e.to_string());
                return set;
            }
        };
        let (parsed, score) = score_completion(&completion, &example.gold);
        let trace = if parsed.trace.is_empty() {
            completion.trim().to_string()
        } else {
            parsed.trace
        };
        let passed = success(score, example.task_threshold);
        let error_type =
            (!passed).then(|| infer_error_type(&trace, &parsed.answer, &example.gold, gateway));
        let attempt = Attempt {
            index,
            trace,
            answer: parsed.answer,
            score,
            feedback_context: feedback_context.clone(),
            error_type,
            flagged: parsed.flagged,
        };
        if passed {
            set.terminated_early = index < budget;
            set.attempts.push(attempt);
            break;
        }
        let entry = feedback_entry(
            index,
            &attempt.answer,
            &make_feedback(score, error_type.unwrap_or(ErrorType::Other)),
        );
        if !feedback_context.is_empty() {
            feedback_context.push_str("\n\n");
        }
        feedback_context.push_str(&entry);
        set.attempts.push(attempt);
    }
    set
}

/// Fraction of first-attempt failures that a later attempt recovered.
/// `None` when no example failed its first attempt.
pub fn compute_retry_success_rate(sets: &[AttemptSet]) -> Option<f64> {
    let mut failed = 0usize;
    let mut recovered = 0usize;
    for set in sets.iter().filter(|s| s.provider_failure.is_none()) {
        if !set.first_failed() {
            continue;
        }
        failed += 1;
        if set.attempts[1..]
            .iter()
            .any(|a| success(a.score, set.threshold))
        {
            recovered += 1;
        }
    }
    (failed > 0).then(|| recovered as f64 / failed as f64)
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::gateway::{Backoff, Cassette, CassetteMode, ScriptedProvider};

    fn example(gold: &str) -> TaskExample {
        TaskExample::new("ex1", "Where is the Louvre?", GoldTarget::FreeText { text: gold.into() })
    }

    fn gateway(script: &[&str]) -> (Gateway, Arc<ScriptedProvider>) {
        let provider = Arc::new(ScriptedProvider::new(script.iter().copied()).unwrap());
        let g = Gateway::new(provider.clone(), Arc::new(Cassette::new(CassetteMode::Record)))
            .with_backoff(Backoff::immediate());
        (g, provider)
    }

    #[test]
    fn feedback_calibration() {
        let coarse = make_feedback(Score::new(0.2), ErrorType::WrongEntity);
        assert_eq!(coarse, "Your previous answer was incorrect. Think more carefully.");
        assert!(!coarse.contains("wrong_entity"));
        let typed = make_feedback(Score::new(0.3), ErrorType::Formatting);
        assert!(typed.contains("formatting"));
        assert_eq!(
            make_feedback(Score::new(0.29), ErrorType::Arithmetic),
            prompts::COARSE_FEEDBACK
        );
    }

    #[test]
    fn error_label_parsing() {
        assert_eq!(ErrorType::parse_label("formatting"), ErrorType::Formatting);
        assert_eq!(ErrorType::parse_label("FORMATTING."), ErrorType::Formatting);
        assert_eq!(ErrorType::parse_label(" Wrong entity "), ErrorType::WrongEntity);
        assert_eq!(ErrorType::parse_label("incomplete-reasoning"), ErrorType::IncompleteReasoning);
        assert_eq!(
            ErrorType::parse_label("I think the model misread"),
            ErrorType::Other
        );
    }

    #[test]
    fn infer_error_type_uses_one_call() {
        let (g, provider) = gateway(&["FORMATTING."]);
        let gold = GoldTarget::FreeText { text: "Paris".into() };
        assert_eq!(infer_error_type("t", "a", &gold, &g), ErrorType::Formatting);
        assert_eq!(provider.requests().len(), 1);
        assert_eq!(provider.requests()[0].role, Role::FailureAnalyst);
        // exhausted script: gateway failure falls back
        assert_eq!(infer_error_type("t", "a", &gold, &g), ErrorType::Other);
    }

    #[test]
    fn retry_until_success() {
        // attempt 1: F1("paris france city", "paris") = 0.5 -> typed feedback
        let (g, provider) = gateway(&[
            "think\nFINAL: Paris France city",
            "wrong_entity",
            "think harder\nFINAL: Paris",
        ]);
        let set = solve_with_retries(&example("Paris"), "SYS", 3, &g);
        assert_eq!(set.attempts.len(), 2);
        assert!(set.terminated_early);
        assert!(set.attempts[0].feedback_context.is_empty());
        assert_eq!(set.attempts[0].error_type, Some(ErrorType::WrongEntity));
        assert_eq!(set.attempts[1].error_type, None);
        assert!(set.attempts[1].feedback_context.contains("wrong_entity"));
        assert!(set.attempts[1].feedback_context.contains("Paris France city"));
        let solver_calls: Vec<_> = provider
            .requests()
            .into_iter()
            .filter(|r| r.role == Role::TaskSolver)
            .collect();
        assert_eq!(solver_calls.len(), 2);
        assert!(solver_calls.iter().all(|r| r.system_prompt == "SYS"));
        assert!(solver_calls.iter().all(|r| r.temperature == 1.0));
    }

    #[test]
    fn immediate_success_is_single_attempt() {
        let (g, _) = gateway(&["r\nFINAL: Paris"]);
        let set = solve_with_retries(&example("Paris"), "SYS", 3, &g);
        assert_eq!(set.attempts.len(), 1);
        assert!(set.terminated_early);
    }

    #[test]
    fn budget_exhaustion_accumulates_feedback() {
        let (g, _) = gateway(&[
            "a\nFINAL: London", "other",
            "b\nFINAL: Rome", "other",
            "c\nFINAL: Berlin", "other",
        ]);
        let set = solve_with_retries(&example("Paris"), "SYS", 3, &g);
        assert_eq!(set.attempts.len(), 3);
        assert!(!set.terminated_early);
        for pair in set.attempts.windows(2) {
            assert!(pair[1].feedback_context.len() > pair[0].feedback_context.len());
            assert!(pair[1].feedback_context.starts_with(&pair[0].feedback_context));
        }
        assert!(set.attempts[2].feedback_context.contains("London"));
        assert!(set.attempts[2].feedback_context.contains("Rome"));
    }

    #[test]
    fn success_on_last_attempt_is_not_early() {
        let (g, _) = gateway(&["a\nFINAL: x", "other", "b\nFINAL: Paris"]);
        let set = solve_with_retries(&example("Paris"), "SYS", 2, &g);
        assert_eq!(set.attempts.len(), 2);
        assert!(!set.terminated_early);
    }

    #[test]
    fn provider_failure_is_recorded() {
        let (g, _) = gateway(&["a\nFINAL: x", "other"]);
        let set = solve_with_retries(&example("Paris"), "SYS", 3, &g);
        assert_eq!(set.attempts.len(), 1);
        assert!(set.provider_failure.is_some());
        assert_eq!(compute_retry_success_rate(&[set]), None);
    }

    fn set_with_scores(id: &str, scores: &[f64]) -> AttemptSet {
        AttemptSet {
            example_id: id.into(),
            input: id.into(),
            threshold: 0.6,
            attempts: scores
                .iter()
                .enumerate()
                .map(|(i, &s)| Attempt {
                    index: i as u32 + 1,
                    trace: format!("t{i}"),
                    answer: format!("a{i}"),
                    score: Score::new(s),
                    feedback_context: String::new(),
                    error_type: None,
                    flagged: false,
                })
                .collect(),
            terminated_early: false,
            provider_failure: None,
        }
    }

    #[test]
    fn retry_success_rate_examples() {
        let sets = vec![
            set_with_scores("a", &[0.1, 0.9]),
            set_with_scores("b", &[0.1, 0.2, 0.7]),
            set_with_scores("c", &[0.0, 0.0, 0.0]),
            set_with_scores("d", &[0.5, 0.5, 0.5]),
            set_with_scores("e", &[1.0]),
        ];
        assert_eq!(compute_retry_success_rate(&sets), Some(0.5));
        assert_eq!(compute_retry_success_rate(&sets[4..]), None);
        assert_eq!(compute_retry_success_rate(&[]), None);
    }

    #[test]
    fn best_and_worst_pick_first_extreme() {
        let set = set_with_scores("a", &[0.2, 0.8, 0.2, 0.8]);
        assert_eq!(set.best().unwrap().index, 2);
        assert_eq!(set.worst().unwrap().index, 1);
    }
}
