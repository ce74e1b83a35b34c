//! Prompt text for every meta call the engine makes.

use crate::retry::ErrorType;

/// Used when no base prompt is supplied.
pub const DEFAULT_BASE_PROMPT: &str = "You are a careful problem solver. Read the task, reason it through, and answer precisely.";

pub const COARSE_FEEDBACK: &str = "Your previous answer was incorrect. Think more carefully.";

pub fn typed_feedback(error_type: ErrorType) -> String {
    format!(
        "Your previous answer was partially correct but shows a `{}` error: {}. \
         Revise the step of your reasoning that produced this error.",
        error_type.as_str(),
        error_type.description()
    )
}

pub const ERROR_TYPE_SYSTEM: &str = "You diagnose why an answer to a task was scored as wrong. \
Reply with exactly one label from this list and nothing else: \
formatting, wrong_entity, wrong_category, arithmetic, incomplete_reasoning, other.";

pub fn error_type_user(trace: &str, answer: &str, gold: &str) -> String {
    format!(
        "Reasoning trace:\n{trace}\n\nFinal answer given:\n{answer}\n\nExpected answer:\n{gold}\n\n\
         Which label best describes the error?"
    )
}

pub const RULE_TEMPLATE: &str = "When <input pattern>, <strategy> because <justification>.";

pub const EXTRACT_SYSTEM: &str = "You analyse two attempts by the same model on the same input. \
The attempts differ in their reasoning and also in the feedback text that was appended before \
each one. Ignore the feedback wording itself; attribute the improvement only to what the \
better attempt did differently in its reasoning. Reply with a single rule on one line in the form: \
When <input pattern>, <strategy> because <justification>. \
The input pattern must describe inputs observable from the task text alone.";

/// Either the full reasoning traces or only the final answers.
pub struct AttemptView<'a> {
    pub score: f64,
    pub feedback_context: &'a str,
    pub trace: Option<&'a str>,
    pub answer: &'a str,
}

fn render_attempt(label: &str, view: &AttemptView<'_>) -> String {
    let feedback = if view.feedback_context.is_empty() {
        "(none, first attempt)"
    } else {
        view.feedback_context
    };
    let mut out = format!(
        "## {label} (score {:.3})\nFeedback shown before this attempt:\n{feedback}\n\n",
        view.score
    );
    match view.trace {
        Some(trace) => out.push_str(&format!("Reasoning trace:\n{trace}\n\nFinal answer:\n{}\n", view.answer)),
        None => out.push_str(&format!("Final answer:\n{}\n", view.answer)),
    }
    out
}

pub fn extract_user(input: &str, failed: &AttemptView<'_>, improved: &AttemptView<'_>) -> String {
    let question = if failed.trace.is_some() {
        "Compare the two chains of thought step by step. Identify the reasoning step the \
         higher-scoring attempt took that the lower-scoring attempt skipped or got wrong, and \
         state it as one general rule that would help on other inputs of this kind."
    } else {
        "Compare the two final answers. State one general rule that would help on other \
         inputs of this kind."
    };
    format!(
        "# Task input\n{input}\n\n{}\n{}\n{question}\n\nRule template: {RULE_TEMPLATE}",
        render_attempt("Lower-scoring attempt", failed),
        render_attempt("Higher-scoring attempt", improved),
    )
}

pub fn repair_rule_user(previous: &str) -> String {
    format!(
        "Your previous reply did not contain a rule in the required form:\n{previous}\n\n\
         Reply again with exactly one line following this template: {RULE_TEMPLATE}"
    )
}

pub const RULE_KIND_SYSTEM: &str = "You classify instructions for a language model. \
Reply `formatting` if the instruction only concerns the surface form of the final answer \
(prefixes, casing, punctuation, answer-only output, length). Reply `reasoning` if it changes \
how the model reasons. Reply with exactly one word.";

pub fn rule_kind_user(rendered_rule: &str) -> String {
    format!("Instruction:\n{rendered_rule}\n\nformatting or reasoning?")
}

pub const FAILURE_ANALYSIS_SYSTEM: &str = "You study a group of task inputs on which a model \
failed every attempt, all sharing one error type. Find the systematic gap behind the failures. \
Reply with one to three rules, one per line, each in the form: \
When <input pattern>, <strategy> because <justification>.";

pub struct FailureMemberView<'a> {
    pub input: &'a str,
    pub score: f64,
    pub trace: Option<&'a str>,
    pub answer: &'a str,
}

pub fn failure_analysis_user(error_type: ErrorType, members: &[FailureMemberView<'_>]) -> String {
    let mut out = format!(
        "Shared error type: {} ({})\n\n",
        error_type.as_str(),
        error_type.description()
    );
    for (i, m) in members.iter().enumerate() {
        out.push_str(&format!("# Example {} (best score {:.3})\nInput:\n{}\n", i + 1, m.score, m.input));
        if let Some(trace) = m.trace {
            out.push_str(&format!("Best reasoning trace:\n{trace}\n"));
        }
        out.push_str(&format!("Best final answer:\n{}\n\n", m.answer));
    }
    out.push_str(&format!("Rule template: {RULE_TEMPLATE}"));
    out
}

pub const TREE_MERGE_SYSTEM: &str = "You organise prompt rules into an input-aware decision tree. \
Group the failing inputs by structural features visible in the input text, and assign each rule \
to the group it helps. Output only the tree in this grammar:\n\
<always>\n  <rule>rule that applies to every input</rule>\n</always>\n\
<branch condition=\"predicate observable from the input\">\n  <rule>...</rule>\n\
  <branch condition=\"narrower predicate\">\n    <rule>...</rule>\n  </branch>\n</branch>\n\
Constraints: at most two levels of branch nesting; every condition must be checkable from the \
input text alone; each rule appears exactly once; no empty branches. A rule's `When` clause \
becomes its branch condition; its `because` clause may be shortened, but keep the strategy \
wording intact.";

pub fn tree_merge_user(rules: &[String], failing_inputs: &[&str]) -> String {
    let mut out = String::from("# Rules\n");
    for (i, rule) in rules.iter().enumerate() {
        out.push_str(&format!("{}. {rule}\n", i + 1));
    }
    out.push_str("\n# Sample of failing inputs\n");
    if failing_inputs.is_empty() {
        out.push_str("(none)\n");
    }
    for input in failing_inputs {
        out.push_str(&format!("---\n{input}\n"));
    }
    out
}

pub fn repair_tree_user(previous: &str, problems: &str) -> String {
    format!(
        "Your previous tree broke these constraints:\n{problems}\n\nPrevious tree:\n{previous}\n\n\
         Output the corrected tree only, at most two levels of branch nesting."
    )
}

pub const ROUTER_SYSTEM: &str = "You decide which conditions hold for a task input. \
Reply with the numbers of all conditions that are true for the input, separated by commas, \
or `none`.";

pub fn router_user(input: &str, conditions: &[(usize, &str)]) -> String {
    let mut out = format!("Input:\n{input}\n\nConditions:\n");
    for (n, condition) in conditions {
        out.push_str(&format!("{n}. {condition}\n"));
    }
    out
}
