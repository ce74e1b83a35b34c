//! Splitting completions into trace and final answer, and turning the
//! answer text into a scoreable payload.

use std::collections::BTreeSet;

use crate::metrics::{self, GoldTarget, Normalizer, Score};

/// Line prefix that introduces the final answer in a completion.
pub const ANSWER_SENTINEL: &str = "FINAL:";

/// Instruction appended to every task input.
pub const ANSWER_FORMAT_INSTRUCTION: &str = "Think step by step and write out your reasoning. \
Then give your final answer on the last line, starting with `FINAL:`.";

#[derive(Debug, Clone, PartialEq)]
pub enum AnswerPayload {
    Text(String),
    Option(Option<usize>),
    Labels(Vec<String>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParsedAnswer {
    pub trace: String,
    pub answer: String,
    pub payload: AnswerPayload,
    /// Sentinel missing, or the answer could not be mapped onto the gold's
    /// answer space.
    pub flagged: bool,
}

/// Returns `(trace, answer, sentinel_found)`. Uses the last sentinel line;
/// without one the whole completion is both trace and answer.
pub fn split_completion(completion: &str) -> (String, String, bool) {
    let lines: Vec<&str> = completion.lines().collect();
    let found = lines.iter().rposition(|line| {
        line.trim_start()
            .to_ascii_uppercase()
            .starts_with(ANSWER_SENTINEL)
    });
    match found {
        Some(i) => {
            let first = lines[i].trim_start();
            let mut answer = first[ANSWER_SENTINEL.len()..].trim().to_string();
            let rest = lines[i + 1..].join("\n");
            if !rest.trim().is_empty() {
                if !answer.is_empty() {
                    answer.push('\n');
                }
                answer.push_str(rest.trim());
            }
            let trace = lines[..i].join("\n").trim().to_string();
            (trace, answer, true)
        }
        None => {
            let whole = completion.trim().to_string();
            (whole.clone(), whole, false)
        }
    }
}

pub fn parse_answer(completion: &str, gold: &GoldTarget) -> ParsedAnswer {
    let (trace, answer, sentinel) = split_completion(completion);
    let (payload, mapped) = interpret(&answer, gold);
    ParsedAnswer {
        trace,
        answer,
        payload,
        flagged: !sentinel || !mapped,
    }
}

fn interpret(answer: &str, gold: &GoldTarget) -> (AnswerPayload, bool) {
    match gold {
        GoldTarget::FreeText { .. } | GoldTarget::ExactString { .. } => {
            (AnswerPayload::Text(answer.to_string()), true)
        }
        GoldTarget::OptionIndex { options, .. } => {
            let choice = parse_option(answer, options);
            (AnswerPayload::Option(choice), choice.is_some())
        }
        GoldTarget::LabelSet { universe, .. } => {
            let (labels, all_known) = parse_labels(answer, universe);
            (AnswerPayload::Labels(labels), all_known)
        }
    }
}

/// Accepts `C`, `(C)`, `C)`, `C.` or the option text itself.
pub fn parse_option(answer: &str, options: &[String]) -> Option<usize> {
    let trimmed = answer.trim();
    let core = trimmed
        .trim_start_matches('(')
        .trim_end_matches(['.', ')', ':']);
    let mut chars = core.chars();
    if let (Some(c), None) = (chars.next(), chars.next()) {
        if c.is_ascii_alphabetic() {
            let ordinal = (c.to_ascii_uppercase() as u8 - b'A') as usize;
            if ordinal < options.len() {
                return Some(ordinal);
            }
        }
    }
    // "(C) option text"
    if let Some(rest) = trimmed.strip_prefix('(') {
        if let Some((letter, _)) = rest.split_once(')') {
            if let Some(ordinal) = parse_option(letter, options) {
                return Some(ordinal);
            }
        }
    }
    let normalizer = Normalizer::default();
    let wanted = normalizer.normalize(trimmed);
    options
        .iter()
        .position(|o| !wanted.is_empty() && normalizer.normalize(o) == wanted)
}

/// Splits on commas, semicolons and newlines; matches labels against the
/// universe case-insensitively. Returns the recognised labels and whether
/// every item was recognised.
pub fn parse_labels(answer: &str, universe: &[String]) -> (Vec<String>, bool) {
    let mut out = Vec::new();
    let mut seen = BTreeSet::new();
    let mut all_known = true;
    for item in answer.split([',', ';', '\n']) {
        let item = item.trim().trim_matches(['"', '\'', '[', ']', '.']).trim();
        if item.is_empty() || item.eq_ignore_ascii_case("none") {
            continue;
        }
        match universe.iter().find(|l| l.eq_ignore_ascii_case(item)) {
            Some(label) => {
                if seen.insert(label.clone()) {
                    out.push(label.clone());
                }
            }
            None => all_known = false,
        }
    }
    (out, all_known)
}

/// `s(a, y)` for a parsed answer.
pub fn score_payload(gold: &GoldTarget, payload: &AnswerPayload) -> Score {
    match (gold, payload) {
        (GoldTarget::FreeText { text }, AnswerPayload::Text(a)) => metrics::token_f1(a, text),
        (GoldTarget::ExactString { text }, AnswerPayload::Text(a)) => {
            metrics::exact_match(a, text)
        }
        (GoldTarget::OptionIndex { index, options, .. }, AnswerPayload::Option(Some(c))) => {
            metrics::mc_accuracy(*c, *index, options.len()).unwrap_or(Score::ZERO)
        }
        (GoldTarget::LabelSet { labels, universe }, AnswerPayload::Labels(pred)) => {
            metrics::macro_f1(std::slice::from_ref(pred), std::slice::from_ref(labels), universe)
                .unwrap_or(Score::ZERO)
        }
        _ => Score::ZERO,
    }
}

/// Parse and score in one step.
pub fn score_completion(completion: &str, gold: &GoldTarget) -> (ParsedAnswer, Score) {
    let parsed = parse_answer(completion, gold);
    let score = score_payload(gold, &parsed.payload);
    (parsed, score)
}
