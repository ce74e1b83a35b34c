//! Input-aware rule tree.
//!
//! Canonical text form (two-space indent per level, one rule per line):
//!
//! ```text
//! <always>
//!   <rule>Applies to every input.</rule>
//! </always>
//! <branch condition="Question asks yes/no structure">
//!   <rule>Return only "yes" or "no".</rule>
//!   <branch condition="Question negates the premise">
//!     <rule>...</rule>
//!   </branch>
//! </branch>
//! ```
//!
//! Inside a branch, rules are written before sub-branches. Rule text escapes
//! `&`, `<` and `>`; conditions additionally escape `"`.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{TreeError, Violation};
use crate::gateway::{Gateway, Role};
use crate::metrics::Normalizer;
use crate::prompts;
use crate::rules::Rule;

pub const MAX_DEPTH: usize = 2;
pub const RULES_BEGIN: &str = "=== BEGIN RULES ===";
pub const RULES_END: &str = "=== END RULES ===";

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Branch {
    pub condition: String,
    pub rules: Vec<String>,
    pub sub_branches: Vec<Branch>,
}

impl Branch {
    pub fn new(condition: impl Into<String>, rules: Vec<String>) -> Self {
        Self {
            condition: condition.into(),
            rules,
            sub_branches: Vec::new(),
        }
    }

    pub fn with_sub_branches(mut self, sub_branches: Vec<Branch>) -> Self {
        self.sub_branches = sub_branches;
        self
    }

    fn depth(&self) -> usize {
        1 + self.sub_branches.iter().map(Branch::depth).max().unwrap_or(0)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuleTree {
    pub always: Vec<String>,
    pub branches: Vec<Branch>,
}

impl RuleTree {
    /// Every rule in the always-section.
    pub fn flat(rules: Vec<String>) -> Self {
        Self {
            always: rules,
            branches: Vec::new(),
        }
    }

    pub fn depth(&self) -> usize {
        self.branches.iter().map(Branch::depth).max().unwrap_or(0)
    }

    pub fn branch_count(&self) -> usize {
        fn count(b: &Branch) -> usize {
            1 + b.sub_branches.iter().map(count).sum::<usize>()
        }
        self.branches.iter().map(count).sum()
    }

    /// All rule texts in document order.
    pub fn rule_texts(&self) -> Vec<&str> {
        fn walk<'a>(b: &'a Branch, out: &mut Vec<&'a str>) {
            out.extend(b.rules.iter().map(String::as_str));
            for sub in &b.sub_branches {
                walk(sub, out);
            }
        }
        let mut out: Vec<&str> = self.always.iter().map(String::as_str).collect();
        for b in &self.branches {
            walk(b, &mut out);
        }
        out
    }

    pub fn is_empty(&self) -> bool {
        self.always.is_empty() && self.branches.is_empty()
    }
}

fn is_clean(text: &str) -> bool {
    !text.is_empty() && text.trim() == text && !text.chars().any(char::is_control)
}

struct Checker<'t> {
    placed: HashMap<&'t str, String>,
    violations: Vec<Violation>,
}

impl<'t> Checker<'t> {
    fn violation(&mut self, path: &str, message: impl Into<String>) {
        self.violations.push(Violation {
            path: path.to_string(),
            message: message.into(),
        });
    }

    fn rules(&mut self, rules: &'t [String], path: &str) {
        for (i, text) in rules.iter().enumerate() {
            let rule_path = format!("{path}/rule[{i}]");
            if !is_clean(text) {
                self.violation(&rule_path, "rule text must be non-empty single-line text");
            }
            if let Some(first) = self.placed.get(text.as_str()) {
                let message = format!("rule already placed at {first}");
                self.violation(&rule_path, message);
            } else {
                self.placed.insert(text, rule_path);
            }
        }
    }

    fn branch(&mut self, branch: &'t Branch, path: String, depth: usize) {
        if depth > MAX_DEPTH {
            self.violation(&path, format!("branch nesting deeper than {MAX_DEPTH} levels"));
        }
        if !is_clean(&branch.condition) {
            self.violation(&path, "condition must be non-empty single-line text");
        }
        if branch.rules.is_empty() && branch.sub_branches.is_empty() {
            self.violation(&path, "branch has no rules and no sub-branches");
        }
        self.rules(&branch.rules, &path);
        for (i, sub) in branch.sub_branches.iter().enumerate() {
            self.branch(sub, format!("{path}/branch[{i}]"), depth + 1);
        }
    }
}

/// Structural checks: depth, non-empty clean text, non-empty branches and
/// single placement of each rule text.
pub fn validate(tree: &RuleTree) -> Result<(), Vec<Violation>> {
    let mut checker = Checker {
        placed: HashMap::new(),
        violations: Vec::new(),
    };
    checker.rules(&tree.always, "always");
    for (i, branch) in tree.branches.iter().enumerate() {
        checker.branch(branch, format!("branch[{i}]"), 1);
    }
    if checker.violations.is_empty() {
        Ok(())
    } else {
        Err(checker.violations)
    }
}

fn escape_text(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn escape_attr(s: &str) -> String {
    escape_text(s).replace('"', "&quot;")
}

fn unescape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut rest = s;
    while let Some(i) = rest.find('&') {
        out.push_str(&rest[..i]);
        rest = &rest[i..];
        let known = [
            ("&amp;", '&'),
            ("&lt;", '<'),
            ("&gt;", '>'),
            ("&quot;", '"'),
            ("&apos;", '\''),
        ]
        .into_iter()
        .find(|(entity, _)| rest.starts_with(entity));
        match known {
            Some((entity, c)) => {
                out.push(c);
                rest = &rest[entity.len()..];
            }
            None => {
                out.push('&');
                rest = &rest[1..];
            }
        }
    }
    out.push_str(rest);
    out
}

/// Canonical text. Refuses trees that fail [`validate`].
pub fn serialize(tree: &RuleTree) -> Result<String, TreeError> {
    validate(tree).map_err(TreeError::Invalid)?;
    let mut lines = vec!["<always>".to_string()];
    for rule in &tree.always {
        lines.push(format!("  <rule>{}</rule>", escape_text(rule)));
    }
    lines.push("</always>".to_string());
    fn write_branch(b: &Branch, indent: usize, lines: &mut Vec<String>) {
        let pad = "  ".repeat(indent);
        lines.push(format!("{pad}<branch condition=\"{}\">", escape_attr(&b.condition)));
        for rule in &b.rules {
            lines.push(format!("{pad}  <rule>{}</rule>", escape_text(rule)));
        }
        for sub in &b.sub_branches {
            write_branch(sub, indent + 1, lines);
        }
        lines.push(format!("{pad}</branch>"));
    }
    for branch in &tree.branches {
        write_branch(branch, 0, &mut lines);
    }
    Ok(lines.join("\n"))
}

/// Collapses whitespace runs that contain line breaks or tabs; plain spaces
/// are kept as written.
fn clean_text(raw: &str) -> String {
    let mut out = String::with_capacity(raw.len());
    let mut run = String::new();
    for c in raw.trim().chars() {
        if c.is_whitespace() {
            run.push(c);
        } else {
            if !run.is_empty() {
                if run.chars().all(|r| r == ' ') {
                    out.push_str(&run);
                } else {
                    out.push(' ');
                }
                run.clear();
            }
            out.push(c);
        }
    }
    out
}

struct Parser<'a> {
    text: &'a str,
    pos: usize,
}

enum Node {
    Rule(String),
    Branch(Branch),
}

impl<'a> Parser<'a> {
    fn error(&self, at: usize, message: impl Into<String>) -> TreeError {
        let before = &self.text[..at.min(self.text.len())];
        let line = before.matches('\n').count() + 1;
        let column = before.rfind('\n').map_or(before.chars().count(), |nl| {
            before[nl + 1..].chars().count()
        }) + 1;
        TreeError::Parse {
            line,
            column,
            message: message.into(),
        }
    }

    fn rest(&self) -> &'a str {
        &self.text[self.pos..]
    }

    fn skip_ws(&mut self) {
        let rest = self.rest();
        self.pos += rest.len() - rest.trim_start().len();
    }

    fn eat(&mut self, token: &str) -> bool {
        if self.rest().starts_with(token) {
            self.pos += token.len();
            true
        } else {
            false
        }
    }

    fn expect(&mut self, token: &str) -> Result<(), TreeError> {
        if self.eat(token) {
            Ok(())
        } else {
            Err(self.error(self.pos, format!("expected `{token}`")))
        }
    }

    fn rule(&mut self) -> Result<String, TreeError> {
        let start = self.pos;
        let end = self
            .rest()
            .find("</rule>")
            .ok_or_else(|| self.error(start, "unterminated <rule>"))?;
        let raw = &self.rest()[..end];
        if raw.contains("<rule>") {
            return Err(self.error(start, "nested <rule>"));
        }
        self.pos += end + "</rule>".len();
        Ok(clean_text(&unescape(raw)))
    }

    fn condition(&mut self) -> Result<String, TreeError> {
        self.skip_ws();
        self.expect("condition=\"")?;
        let start = self.pos;
        let end = self
            .rest()
            .find('"')
            .ok_or_else(|| self.error(start, "unterminated condition attribute"))?;
        let raw = &self.rest()[..end];
        self.pos += end + 1;
        self.skip_ws();
        self.expect(">")?;
        Ok(clean_text(&unescape(raw)))
    }

    /// Children until `close`.
    fn children(&mut self, close: &str, allow_branches: bool) -> Result<Vec<Node>, TreeError> {
        let mut nodes = Vec::new();
        loop {
            self.skip_ws();
            let at = self.pos;
            if self.eat(close) {
                return Ok(nodes);
            }
            if self.eat("<rule>") {
                nodes.push(Node::Rule(self.rule()?));
            } else if allow_branches && self.eat("<branch") {
                nodes.push(Node::Branch(self.branch()?));
            } else if self.rest().is_empty() {
                return Err(self.error(at, format!("missing `{close}`")));
            } else {
                return Err(self.error(at, format!("unexpected content, expected <rule> or `{close}`")));
            }
        }
    }

    fn branch(&mut self) -> Result<Branch, TreeError> {
        let condition = self.condition()?;
        let mut branch = Branch::new(condition, Vec::new());
        for node in self.children("</branch>", true)? {
            match node {
                Node::Rule(r) => branch.rules.push(r),
                Node::Branch(b) => branch.sub_branches.push(b),
            }
        }
        Ok(branch)
    }

    fn document(&mut self) -> Result<RuleTree, TreeError> {
        let mut tree = RuleTree::default();
        let mut seen_always = false;
        loop {
            self.skip_ws();
            let at = self.pos;
            if self.rest().is_empty() {
                return Ok(tree);
            }
            if self.eat("<always>") {
                if seen_always {
                    return Err(self.error(at, "second <always> section"));
                }
                seen_always = true;
                for node in self.children("</always>", false)? {
                    if let Node::Rule(r) = node {
                        tree.always.push(r);
                    }
                }
            } else if self.eat("<branch") {
                tree.branches.push(self.branch()?);
            } else {
                return Err(self.error(at, "expected <always> or <branch>"));
            }
        }
    }
}

/// Parses the tag grammar without structural validation.
pub fn parse_unchecked(text: &str) -> Result<RuleTree, TreeError> {
    Parser { text, pos: 0 }.document()
}

/// Parses and validates.
pub fn parse(text: &str) -> Result<RuleTree, TreeError> {
    let tree = parse_unchecked(text)?;
    validate(&tree).map_err(TreeError::Invalid)?;
    Ok(tree)
}

/// Cuts the tree markup out of a model response (code fences, prose).
pub fn extract_tree_text(response: &str) -> Option<&str> {
    let start = [response.find("<always>"), response.find("<branch")]
        .into_iter()
        .flatten()
        .min()?;
    let end = [
        response.rfind("</branch>").map(|i| i + "</branch>".len()),
        response.rfind("</always>").map(|i| i + "</always>".len()),
    ]
    .into_iter()
    .flatten()
    .max()?;
    (end > start).then(|| &response[start..end])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoutingMode {
    #[default]
    FullInjection,
    Classifier,
}

impl std::str::FromStr for RoutingMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "full_injection" => Ok(Self::FullInjection),
            "classifier" => Ok(Self::Classifier),
            other => Err(format!("unknown routing mode `{other}`")),
        }
    }
}

impl RoutingMode {
    pub fn as_str(self) -> &'static str {
        match self {
            RoutingMode::FullInjection => "full_injection",
            RoutingMode::Classifier => "classifier",
        }
    }
}

/// What goes between the rule delimiters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RoutedRules {
    /// The whole tree; the model routes itself.
    Tree(RuleTree),
    /// An unstructured rule list.
    Selected(Vec<String>),
}

impl RoutedRules {
    pub fn block(&self) -> String {
        match self {
            RoutedRules::Tree(tree) if tree.is_empty() => String::new(),
            RoutedRules::Tree(tree) => serialize(tree).unwrap_or_else(|e| {
                log::warn!("unserializable tree injected as list: {e}");
                list_block(&tree.rule_texts())
            }),
            RoutedRules::Selected(rules) => list_block(rules),
        }
    }

    pub fn rule_texts(&self) -> Vec<String> {
        match self {
            RoutedRules::Tree(tree) => tree.rule_texts().into_iter().map(str::to_string).collect(),
            RoutedRules::Selected(rules) => rules.clone(),
        }
    }
}

fn list_block<S: AsRef<str>>(rules: &[S]) -> String {
    rules
        .iter()
        .map(|r| format!("- {}", r.as_ref()))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Conditions in numbering order: top-level branch, then its sub-branches.
fn numbered_conditions(tree: &RuleTree) -> Vec<(usize, Option<usize>, &str)> {
    let mut out = Vec::new();
    for (i, b) in tree.branches.iter().enumerate() {
        out.push((i, None, b.condition.as_str()));
        for (j, sub) in b.sub_branches.iter().enumerate() {
            out.push((i, Some(j), sub.condition.as_str()));
        }
    }
    out
}

fn parse_numbers(text: &str) -> Vec<usize> {
    text.split(|c: char| !c.is_ascii_digit())
        .filter_map(|s| s.parse().ok())
        .collect()
}

/// Selects `R(x)`. Classifier mode makes one multi-label call over all
/// branch conditions; a sub-branch counts only when its parent matched.
/// A classifier failure falls back to full injection.
pub fn route(tree: &RuleTree, input: &str, mode: RoutingMode, gateway: &Gateway) -> RoutedRules {
    if mode == RoutingMode::FullInjection {
        return RoutedRules::Tree(tree.clone());
    }
    if tree.branches.is_empty() {
        return RoutedRules::Selected(tree.always.clone());
    }
    let conditions = numbered_conditions(tree);
    let listed: Vec<(usize, &str)> = conditions
        .iter()
        .enumerate()
        .map(|(n, (_, _, c))| (n + 1, *c))
        .collect();
    let request = gateway.request(
        Role::Router,
        prompts::ROUTER_SYSTEM,
        prompts::router_user(input, &listed),
    );
    let response = match gateway.complete(&request) {
        Ok(r) => r.text,
        Err(e) => {
            log::warn!("routing call failed ({e}); injecting the full tree");
            return RoutedRules::Tree(tree.clone());
        }
    };
    let matched: Vec<bool> = {
        let mut m = vec![false; conditions.len()];
        for n in parse_numbers(&response) {
            if (1..=conditions.len()).contains(&n) {
                m[n - 1] = true;
            }
        }
        m
    };
    let mut selected = tree.always.clone();
    let mut parent_matched = false;
    for (k, (i, sub, _)) in conditions.iter().enumerate() {
        match sub {
            None => {
                parent_matched = matched[k];
                if parent_matched {
                    selected.extend(tree.branches[*i].rules.iter().cloned());
                }
            }
            Some(j) => {
                if parent_matched && matched[k] {
                    selected.extend(tree.branches[*i].sub_branches[*j].rules.iter().cloned());
                }
            }
        }
    }
    RoutedRules::Selected(selected)
}

/// Base prompt followed by the delimited rules block.
pub fn system_prompt(base_prompt: &str, routed: &RoutedRules) -> String {
    let block = routed.block();
    if block.is_empty() {
        format!("{base_prompt}\n\n{RULES_BEGIN}\n{RULES_END}")
    } else {
        format!("{base_prompt}\n\n{RULES_BEGIN}\n{block}\n{RULES_END}")
    }
}

/// `base ⊕ rules ⊕ input`.
pub fn inject(base_prompt: &str, routed: &RoutedRules, input: &str) -> String {
    format!("{}\n\n{input}", system_prompt(base_prompt, routed))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MergeOutcome {
    pub tree: RuleTree,
    /// The model never produced a valid tree; all rules went to `always`.
    pub degraded: bool,
    pub calls: usize,
}

/// Rule strategies that do not appear (normalized) in any tree rule text.
fn missing_strategies(tree: &RuleTree, rules: &[Rule]) -> Vec<Violation> {
    let n = Normalizer::default();
    let texts: Vec<String> = tree
        .rule_texts()
        .into_iter()
        .map(|t| format!(" {} ", n.normalize(t)))
        .collect();
    rules
        .iter()
        .filter(|r| {
            let strategy = format!(" {} ", n.normalize(&r.strategy));
            !texts.iter().any(|t| t.contains(&strategy))
        })
        .map(|r| Violation {
            path: format!("rule {}", r.id),
            message: format!("strategy \"{}\" was dropped or reworded", r.strategy),
        })
        .collect()
}

fn check_merge_response(response: &str, rules: &[Rule]) -> Result<RuleTree, String> {
    let text = extract_tree_text(response).ok_or_else(|| "no <always> or <branch> markup found".to_string())?;
    let tree = parse_unchecked(text).map_err(|e| e.to_string())?;
    let mut problems = validate(&tree).err().unwrap_or_default();
    problems.extend(missing_strategies(&tree, rules));
    if problems.is_empty() {
        Ok(tree)
    } else {
        Err(problems
            .iter()
            .map(|v| format!("- {v}"))
            .collect::<Vec<_>>()
            .join("\n"))
    }
}

/// Deduplicated rendered rules, all in the always-section.
pub fn flat_tree(rules: &[Rule]) -> RuleTree {
    let mut seen = std::collections::HashSet::new();
    RuleTree::flat(
        rules
            .iter()
            .map(|r| clean_text(&r.render()))
            .filter(|t| seen.insert(t.clone()))
            .collect(),
    )
}

/// One merge call, at most one repair, then flat fallback.
pub fn tree_merge(rules: &[Rule], failing_inputs: &[&str], gateway: &Gateway) -> MergeOutcome {
    if rules.is_empty() {
        return MergeOutcome {
            tree: RuleTree::default(),
            degraded: false,
            calls: 0,
        };
    }
    let rendered: Vec<String> = rules.iter().map(Rule::render).collect();
    let user = prompts::tree_merge_user(&rendered, failing_inputs);
    let request = gateway.request(Role::TreeMerger, prompts::TREE_MERGE_SYSTEM, user.clone());
    let first = match gateway.complete(&request) {
        Ok(r) => r.text,
        Err(e) => {
            log::warn!("tree merge call failed ({e}); using a flat tree");
            return MergeOutcome {
                tree: flat_tree(rules),
                degraded: true,
                calls: 1,
            };
        }
    };
    let problems = match check_merge_response(&first, rules) {
        Ok(tree) => {
            return MergeOutcome {
                tree,
                degraded: false,
                calls: 1,
            }
        }
        Err(problems) => problems,
    };
    let repair = gateway.request(
        Role::TreeMerger,
        prompts::TREE_MERGE_SYSTEM,
        format!("{user}\n\n---\n{}", prompts::repair_tree_user(&first, &problems)),
    );
    let second = gateway.complete(&repair).map(|r| r.text);
    match second.map_err(|e| e.to_string()).and_then(|t| check_merge_response(&t, rules)) {
        Ok(tree) => MergeOutcome {
            tree,
            degraded: false,
            calls: 2,
        },
        Err(problems) => {
            log::warn!("tree merge invalid after repair; using a flat tree:\n{problems}");
            MergeOutcome {
                tree: flat_tree(rules),
                degraded: true,
                calls: 2,
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::gateway::{Cassette, CassetteMode, ScriptedProvider};
    use crate::rules::{parse_template, Provenance};

    fn gateway(script: &[&str]) -> (Gateway, Arc<ScriptedProvider>) {
        let provider = Arc::new(ScriptedProvider::new(script.iter().copied()).unwrap());
        let g = Gateway::new(provider.clone(), Arc::new(Cassette::new(CassetteMode::Record)));
        (g, provider)
    }

    fn sample() -> RuleTree {
        RuleTree {
            always: vec!["A1".into(), "A2".into()],
            branches: vec![
                Branch::new("cond one", vec!["B1".into()])
                    .with_sub_branches(vec![Branch::new("cond one sub", vec!["S1".into()])]),
                Branch::new("cond two", vec!["B2".into(), "B3".into()]),
            ],
        }
    }

    #[test]
    fn empty_tree_text() {
        assert_eq!(serialize(&RuleTree::default()).unwrap(), "<always>\n</always>");
        assert_eq!(parse("<always>\n</always>").unwrap(), RuleTree::default());
        assert_eq!(parse("").unwrap(), RuleTree::default());
    }

    #[test]
    fn canonical_layout() {
        let text = serialize(&sample()).unwrap();
        let expected = "<always>\n  <rule>A1</rule>\n  <rule>A2</rule>\n</always>\n\
<branch condition=\"cond one\">\n  <rule>B1</rule>\n  <branch condition=\"cond one sub\">\n    <rule>S1</rule>\n  </branch>\n</branch>\n\
<branch condition=\"cond two\">\n  <rule>B2</rule>\n  <rule>B3</rule>\n</branch>";
        assert_eq!(text, expected);
        assert_eq!(parse(&text).unwrap(), sample());
    }

    #[test]
    fn escaping_round_trips() {
        let tree = RuleTree {
            always: vec!["use <b> & \"quotes\"".into()],
            branches: vec![Branch::new("asks \"why\" & <how>", vec!["x".into()])],
        };
        let text = serialize(&tree).unwrap();
        assert!(text.contains("condition=\"asks &quot;why&quot; &amp; &lt;how&gt;\""));
        assert_eq!(parse(&text).unwrap(), tree);
    }

    #[test]
    fn depth_three_is_rejected_with_path() {
        let mut tree = sample();
        tree.branches[0].sub_branches[0].sub_branches = vec![Branch::new("deep", vec!["D".into()])];
        let violations = validate(&tree).unwrap_err();
        assert_eq!(violations.len(), 1);
        assert_eq!(violations[0].path, "branch[0]/branch[0]/branch[0]");
        assert!(matches!(serialize(&tree), Err(TreeError::Invalid(_))));
    }

    #[test]
    fn duplicate_placement_is_rejected() {
        let mut tree = sample();
        tree.branches[1].rules.push("A1".into());
        let violations = validate(&tree).unwrap_err();
        assert_eq!(violations[0].path, "branch[1]/rule[2]");
        assert!(violations[0].message.contains("always/rule[0]"));
    }

    #[test]
    fn empty_branch_and_condition_rejected() {
        let tree = RuleTree {
            always: vec![],
            branches: vec![Branch::new("", vec![])],
        };
        assert_eq!(validate(&tree).unwrap_err().len(), 2);
        assert!(validate(&sample()).is_ok());
    }

    #[test]
    fn parse_errors_are_located() {
        let err = parse_unchecked("<always>\n  <rule>x</rule>\n  oops\n</always>").unwrap_err();
        assert_eq!(
            err,
            TreeError::Parse {
                line: 3,
                column: 3,
                message: "unexpected content, expected <rule> or `</always>`".into()
            }
        );
        assert!(matches!(parse_unchecked("<branch condition=\"c\">\n<rule>x</rule>"), Err(TreeError::Parse { .. })));
        assert!(matches!(parse_unchecked("<always></always><always></always>"), Err(TreeError::Parse { .. })));
        assert!(matches!(parse_unchecked("<always><rule>x</always>"), Err(TreeError::Parse { .. })));
    }

    #[test]
    fn parse_validates_depth() {
        let text = "<branch condition=\"a\"><branch condition=\"b\"><branch condition=\"c\"><rule>x</rule></branch></branch></branch>";
        assert!(parse_unchecked(text).is_ok());
        assert!(matches!(parse(text), Err(TreeError::Invalid(_))));
    }

    #[test]
    fn multiline_rule_text_is_collapsed() {
        let tree = parse("<always><rule>\n  one\n  two  words\n</rule></always>").unwrap();
        assert_eq!(tree.always, ["one two  words"]);
    }

    #[test]
    fn extract_from_fenced_response() {
        let response = "Sure:\n```\n<always>\n  <rule>x</rule>\n</always>\n```\nDone.";
        assert_eq!(extract_tree_text(response).unwrap(), "<always>\n  <rule>x</rule>\n</always>");
        assert!(extract_tree_text("no tree").is_none());
    }

    #[test]
    fn classifier_routing_selects_matched_branches() {
        let (g, provider) = gateway(&["1"]);
        let routed = route(&sample(), "input", RoutingMode::Classifier, &g);
        // branch 1 matched, its sub-branch (2) not, branch 2 (3) not
        assert_eq!(routed, RoutedRules::Selected(vec!["A1".into(), "A2".into(), "B1".into()]));
        assert_eq!(provider.requests()[0].role, Role::Router);
    }

    #[test]
    fn sub_branch_requires_parent() {
        let (g, _) = gateway(&["2, 3", "1,2"]);
        let routed = route(&sample(), "x", RoutingMode::Classifier, &g);
        assert_eq!(routed.rule_texts(), ["A1", "A2", "B2", "B3"]);
        let routed = route(&sample(), "x", RoutingMode::Classifier, &g);
        assert_eq!(routed.rule_texts(), ["A1", "A2", "B1", "S1"]);
    }

    #[test]
    fn routing_degrades_and_short_circuits() {
        let (g, _) = gateway(&["x"]);
        let _ = g.complete(&g.request(Role::Router, "", "burn the only response"));
        assert_eq!(route(&sample(), "x", RoutingMode::Classifier, &g), RoutedRules::Tree(sample()));
        let only_always = RuleTree::flat(vec!["A".into()]);
        let (g, provider) = gateway(&["unused"]);
        assert_eq!(route(&only_always, "x", RoutingMode::Classifier, &g), RoutedRules::Selected(vec!["A".into()]));
        assert_eq!(route(&only_always, "x", RoutingMode::FullInjection, &g).rule_texts(), ["A"]);
        assert!(provider.requests().is_empty());
    }

    #[test]
    fn injection_framing() {
        let empty = inject("BASE", &RoutedRules::Selected(vec![]), "INPUT");
        assert_eq!(empty, format!("BASE\n\n{RULES_BEGIN}\n{RULES_END}\n\nINPUT"));
        let flat = inject("BASE", &RoutedRules::Selected(vec!["a".into(), "b".into(), "c".into()]), "INPUT");
        assert_eq!(flat, format!("BASE\n\n{RULES_BEGIN}\n- a\n- b\n- c\n{RULES_END}\n\nINPUT"));
        let tree = inject("BASE", &RoutedRules::Tree(sample()), "INPUT");
        let inner = tree
            .split_once(&format!("{RULES_BEGIN}\n"))
            .unwrap()
            .1
            .split_once(&format!("\n{RULES_END}"))
            .unwrap()
            .0;
        assert_eq!(inner, serialize(&sample()).unwrap());
        assert!(tree.starts_with("BASE\n\n"));
    }

    fn rule(id: &str, text: &str) -> Rule {
        Rule::from_parts(id, parse_template(text).unwrap(), Provenance::Pair { example_id: id.into() }, 1)
    }

    const YES_NO_RULE: &str = "When the question asks a yes/no structure, return only yes or no because extra tokens reduce token F1.";
    const SPAN_RULE: &str = "When answering any question, output only the exact answer span because prefixes cost F1.";

    #[test]
    fn merge_builds_branch_from_when_clause() {
        let response = "<always>\n  <rule>Output only the exact answer span, because prefixes cost F1.</rule>\n</always>\n\
<branch condition=\"Question asks yes/no structure\">\n  <rule>Return only yes or no.</rule>\n</branch>";
        let (g, _) = gateway(&[response]);
        let out = tree_merge(&[rule("r1", YES_NO_RULE), rule("r2", SPAN_RULE)], &["Is it?"], &g);
        assert!(!out.degraded);
        assert_eq!(out.calls, 1);
        assert_eq!(out.tree.branches[0].condition, "Question asks yes/no structure");
    }

    #[test]
    fn merge_empty_rules_needs_no_call() {
        let (g, provider) = gateway(&["unused"]);
        let out = tree_merge(&[], &[], &g);
        assert_eq!(out.tree, RuleTree::default());
        assert!(provider.requests().is_empty());
    }

    #[test]
    fn merge_repairs_depth_violation() {
        let deep = "<branch condition=\"a\"><branch condition=\"b\"><branch condition=\"c\"><rule>return only yes or no</rule></branch></branch></branch>";
        let good = "<branch condition=\"Question asks yes/no structure\"><rule>Return only yes or no.</rule></branch>";
        let (g, provider) = gateway(&[deep, good]);
        let out = tree_merge(&[rule("r1", YES_NO_RULE)], &[], &g);
        assert!(!out.degraded);
        assert_eq!(out.calls, 2);
        assert_eq!(provider.requests().len(), 2);
        assert!(provider.requests()[1].user_content.contains("deeper than 2 levels"));
    }

    #[test]
    fn merge_falls_back_to_flat() {
        let (g, _) = gateway(&["garbage", "<always><rule>something else entirely</rule></always>"]);
        let out = tree_merge(&[rule("r1", YES_NO_RULE)], &[], &g);
        assert!(out.degraded);
        assert_eq!(out.tree, RuleTree::flat(vec![YES_NO_RULE.to_string()]));
    }
}
