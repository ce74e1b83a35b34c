//! Rule extraction from contrastive pairs and all-fail groups.
//!
//! Rules use the sentence template
//! `When <input pattern>, <strategy> because <justification>.`

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::RuleError;
use crate::gateway::{Gateway, Role};
use crate::metrics::token_f1;
use crate::mining::{AllFailGroup, ContrastivePair};
use crate::prompts::{self, AttemptView, FailureMemberView};
use crate::retry::ErrorType;

/// Incoming rules at or above this similarity to a kept rule are dropped.
pub const DEDUP_SIMILARITY: f64 = 0.9;
/// Members shown per failure-group analysis call.
pub const DEFAULT_GROUP_SAMPLE: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuleKind {
    Reasoning,
    Formatting,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum Provenance {
    Pair { example_id: String },
    FailureGroup { error_type: ErrorType },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuleParts {
    pub when_pattern: String,
    pub strategy: String,
    pub justification: String,
}

impl RuleParts {
    pub fn render(&self) -> String {
        format!(
            "When {}, {} because {}.",
            self.when_pattern, self.strategy, self.justification
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rule {
    pub id: String,
    pub when_pattern: String,
    pub strategy: String,
    pub justification: String,
    pub kind: RuleKind,
    pub provenance: Provenance,
    pub iteration_born: u32,
}

impl Rule {
    pub fn from_parts(
        id: impl Into<String>,
        parts: RuleParts,
        provenance: Provenance,
        iteration_born: u32,
    ) -> Self {
        Self {
            id: id.into(),
            when_pattern: parts.when_pattern,
            strategy: parts.strategy,
            justification: parts.justification,
            kind: RuleKind::Reasoning,
            provenance,
            iteration_born,
        }
    }

    pub fn parts(&self) -> RuleParts {
        RuleParts {
            when_pattern: self.when_pattern.clone(),
            strategy: self.strategy.clone(),
            justification: self.justification.clone(),
        }
    }

    pub fn render(&self) -> String {
        self.parts().render()
    }
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.render())
    }
}

/// Parses one template sentence. The input pattern ends at the first comma,
/// the strategy at the first ` because ` after it.
pub fn parse_template(sentence: &str) -> Option<RuleParts> {
    let s = sentence
        .trim()
        .trim_matches(|c| matches!(c, '"' | '\'' | '`' | '“' | '”'))
        .trim();
    let s = s.strip_suffix('.').unwrap_or(s).trim_end();
    let head = s.get(..5)?;
    if !head.eq_ignore_ascii_case("when ") {
        return None;
    }
    let rest = &s[5..];
    let (when_pattern, rest) = rest.split_once(',')?;
    let (strategy, justification) = rest.split_once(" because ")?;
    let parts = RuleParts {
        when_pattern: when_pattern.trim().to_string(),
        strategy: strategy.trim().to_string(),
        justification: justification.trim().to_string(),
    };
    let complete = !parts.when_pattern.is_empty()
        && !parts.strategy.is_empty()
        && !parts.justification.is_empty();
    complete.then_some(parts)
}

fn strip_line_marker(line: &str) -> &str {
    let line = line.trim().trim_start_matches(['-', '*', '•', '>']).trim_start();
    let digits = line.trim_start_matches(|c: char| c.is_ascii_digit());
    let line = if digits.len() < line.len() {
        digits.trim_start_matches(['.', ')', ':']).trim_start()
    } else {
        line
    };
    let line = line.trim_start_matches("**").trim_end_matches("**");
    for prefix in ["Rule:", "RULE:", "rule:"] {
        if let Some(rest) = line.strip_prefix(prefix) {
            return rest.trim_start();
        }
    }
    line
}

/// Every template rule found in a response, one per line.
pub fn find_rules(response: &str) -> Vec<RuleParts> {
    response
        .lines()
        .filter_map(|line| parse_template(strip_line_marker(line)))
        .collect()
}

/// Sends `user`; if no rule parses, re-prompts once quoting the template.
fn request_rules(
    gateway: &Gateway,
    system: &str,
    user: &str,
) -> Result<Vec<RuleParts>, RuleError> {
    let request = gateway.request(Role::RuleExtractor, system, user);
    let first = gateway.complete(&request)?.text;
    let rules = find_rules(&first);
    if !rules.is_empty() {
        return Ok(rules);
    }
    let repair = gateway.request(
        Role::RuleExtractor,
        system,
        format!("{user}\n\n---\n{}", prompts::repair_rule_user(&first)),
    );
    let second = gateway.complete(&repair)?.text;
    let rules = find_rules(&second);
    if rules.is_empty() {
        let snippet: String = second.chars().take(200).collect();
        return Err(RuleError::Unparseable(snippet));
    }
    Ok(rules)
}

/// Builds the dyadic extraction prompt for a pair.
pub fn extraction_prompt(pair: &ContrastivePair, answer_only: bool) -> String {
    let failed = AttemptView {
        score: pair.failed.score.value(),
        feedback_context: &pair.failed.feedback_context,
        trace: (!answer_only).then_some(pair.failed.trace.as_str()),
        answer: &pair.failed.answer,
    };
    let improved = AttemptView {
        score: pair.success.score.value(),
        feedback_context: &pair.success.feedback_context,
        trace: (!answer_only).then_some(pair.success.trace.as_str()),
        answer: &pair.success.answer,
    };
    prompts::extract_user(&pair.input, &failed, &improved)
}

/// One rule per pair. With `answer_only` the prompt carries final answers
/// and feedback contexts but no reasoning traces.
pub fn extract_rule(
    pair: &ContrastivePair,
    id: impl Into<String>,
    iteration: u32,
    answer_only: bool,
    gateway: &Gateway,
) -> Result<Rule, RuleError> {
    let user = extraction_prompt(pair, answer_only);
    let parts = request_rules(gateway, prompts::EXTRACT_SYSTEM, &user)?
        .into_iter()
        .next()
        .expect("request_rules returns at least one rule");
    Ok(Rule::from_parts(
        id,
        parts,
        Provenance::Pair {
            example_id: pair.example_id.clone(),
        },
        iteration,
    ))
}

/// Sets `kind` from one two-label classification call; anything other than
/// a clear `formatting` answer keeps `Reasoning`.
pub fn classify_rule_kind(mut rule: Rule, gateway: &Gateway) -> Rule {
    let request = gateway.request(
        Role::RuleExtractor,
        prompts::RULE_KIND_SYSTEM,
        prompts::rule_kind_user(&rule.render()),
    );
    rule.kind = match gateway.complete(&request) {
        Ok(response) => {
            let word = response
                .text
                .trim()
                .trim_matches(|c: char| c.is_ascii_punctuation())
                .to_ascii_lowercase();
            if word == "formatting" {
                RuleKind::Formatting
            } else {
                RuleKind::Reasoning
            }
        }
        Err(e) => {
            log::warn!("rule kind classification failed for {} ({e})", rule.id);
            RuleKind::Reasoning
        }
    };
    rule
}

/// Failure-analysis prompt for one group, showing at most `sample` members,
/// lowest scores first.
pub fn failure_group_prompt(group: &AllFailGroup, sample: usize, answer_only: bool) -> String {
    let mut members: Vec<_> = group.members.iter().collect();
    members.sort_by(|a, b| {
        a.best_score
            .value()
            .total_cmp(&b.best_score.value())
            .then_with(|| a.example_id.cmp(&b.example_id))
    });
    let views: Vec<FailureMemberView<'_>> = members
        .into_iter()
        .take(sample)
        .map(|m| FailureMemberView {
            input: &m.input,
            score: m.best_score.value(),
            trace: (!answer_only).then_some(m.best_trace.as_str()),
            answer: &m.best_answer,
        })
        .collect();
    prompts::failure_analysis_user(group.error_type, &views)
}

#[derive(Debug, Default)]
pub struct FailureAnalysis {
    pub rules: Vec<Rule>,
    pub skipped: Vec<(ErrorType, RuleError)>,
}

/// One analysis call per non-empty group.
pub fn aggregate_failure_rules(
    groups: &[AllFailGroup],
    sample: usize,
    iteration: u32,
    answer_only: bool,
    gateway: &Gateway,
) -> FailureAnalysis {
    let mut out = FailureAnalysis::default();
    for group in groups.iter().filter(|g| !g.members.is_empty()) {
        let user = failure_group_prompt(group, sample.max(1), answer_only);
        match request_rules(gateway, prompts::FAILURE_ANALYSIS_SYSTEM, &user) {
            Ok(parts) => {
                for (n, parts) in parts.into_iter().enumerate() {
                    out.rules.push(Rule::from_parts(
                        format!("t{iteration:02}-g-{}-{}", group.error_type, n + 1),
                        parts,
                        Provenance::FailureGroup {
                            error_type: group.error_type,
                        },
                        iteration,
                    ));
                }
            }
            Err(e) => {
                log::warn!("failure analysis for {} skipped: {e}", group.error_type);
                out.skipped.push((group.error_type, e));
            }
        }
    }
    out
}

pub fn rule_similarity(a: &Rule, b: &Rule) -> f64 {
    token_f1(&a.render(), &b.render()).value()
}

/// Appends incoming rules that are not near-duplicates of anything already
/// kept (existing rules or earlier survivors).
pub fn dedup_rules(existing: &[Rule], incoming: &[Rule]) -> Vec<Rule> {
    let mut kept: Vec<Rule> = existing.to_vec();
    for rule in incoming {
        if kept
            .iter()
            .all(|k| rule_similarity(k, rule) < DEDUP_SIMILARITY)
        {
            kept.push(rule.clone());
        }
    }
    kept
}
