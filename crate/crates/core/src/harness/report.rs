//! Run reports rebuilt from a run directory's persisted records.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::error::RunError;
use crate::gateway::{Cassette, CassetteMode, UsageTotals};
use crate::io::from_jsonl;
use crate::optimizer::{load_run, EvalRecord, Module};
use crate::retry::{compute_retry_success_rate, AttemptSet};
use crate::rules::RuleKind;
use crate::tree::{self, RoutedRules, RoutingMode, RuleTree};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SplitScore {
    pub split: String,
    pub mean: f64,
    pub n: usize,
    pub provider_failures: usize,
    pub flagged: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExampleScore {
    pub split: String,
    pub example_id: String,
    pub score: f64,
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RetryRate {
    pub iteration: u32,
    pub rho: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TreeStats {
    pub branches: usize,
    pub depth: usize,
    pub rules: usize,
    /// System prompt length in characters with the whole tree injected.
    pub full_injection_chars: usize,
    /// Lower bound under classifier routing: only the always-section.
    pub classifier_min_chars: usize,
    /// Upper bound under classifier routing: every branch selected.
    pub classifier_max_chars: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunReport {
    pub best_iteration: u32,
    pub iterations: u32,
    pub stop_reason: String,
    pub splits: Vec<SplitScore>,
    pub examples: Vec<ExampleScore>,
    pub retry_rates: Vec<RetryRate>,
    pub rules_total: usize,
    pub rules_reasoning: usize,
    pub rules_formatting: usize,
    pub tree: TreeStats,
    pub seconds: f64,
    pub usage: UsageTotals,
}

fn split_score(split: &str, records: &[EvalRecord]) -> SplitScore {
    let n = records.len();
    let mean = if n == 0 {
        0.0
    } else {
        records.iter().map(|r| r.score.value()).sum::<f64>() / n as f64
    };
    SplitScore {
        split: split.to_string(),
        mean,
        n,
        provider_failures: records.iter().filter(|r| r.provider_failure.is_some()).count(),
        flagged: records.iter().filter(|r| r.flagged).count(),
    }
}

pub fn tree_stats(base_prompt: &str, tree: &RuleTree) -> TreeStats {
    let chars = |routed: RoutedRules| tree::system_prompt(base_prompt, &routed).chars().count();
    TreeStats {
        branches: tree.branch_count(),
        depth: tree.depth(),
        rules: tree.rule_texts().len(),
        full_injection_chars: chars(RoutedRules::Tree(tree.clone())),
        classifier_min_chars: chars(RoutedRules::Selected(tree.always.clone())),
        classifier_max_chars: chars(RoutedRules::Selected(
            tree.rule_texts().into_iter().map(str::to_string).collect(),
        )),
    }
}

fn read_records<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Option<Vec<T>>, RunError> {
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(path).map_err(|e| RunError::io(path, e))?;
    from_jsonl(&text)
        .map(Some)
        .map_err(|(line, message)| RunError::Resume {
            path: path.display().to_string(),
            message: format!("line {line}: {message}"),
        })
}

/// Extra evaluation files written by `evaluate --run-dir`: `eval-<split>.jsonl`.
fn extra_splits(root: &Path) -> Result<Vec<(String, Vec<EvalRecord>)>, RunError> {
    let mut names: Vec<String> = fs::read_dir(root)
        .map_err(|e| RunError::io(root, e))?
        .filter_map(|e| e.ok())
        .filter_map(|e| e.file_name().into_string().ok())
        .filter(|n| n.starts_with("eval-") && n.ends_with(".jsonl"))
        .collect();
    names.sort();
    let mut out = Vec::new();
    for name in names {
        let split = name["eval-".len()..name.len() - ".jsonl".len()].to_string();
        if let Some(records) = read_records(&root.join(&name))? {
            out.push((split, records));
        }
    }
    Ok(out)
}

pub fn build_report(root: &Path) -> Result<RunReport, RunError> {
    let run = load_run(root)?;
    let state = &run.state;
    let best = state.best().ok_or_else(|| RunError::Resume {
        path: root.display().to_string(),
        message: "no completed iteration to report".into(),
    })?;
    let best_dir = crate::optimizer::iter_dir(root, best.iteration);

    let mut split_records: Vec<(String, Vec<EvalRecord>)> = Vec::new();
    if let Some(r) = read_records(&best_dir.join("eval.jsonl"))? {
        split_records.push(("train".into(), r));
    }
    if let Some(r) = read_records(&best_dir.join("val_eval.jsonl"))? {
        split_records.push(("val".into(), r));
    }
    split_records.extend(extra_splits(root)?);

    let splits = split_records.iter().map(|(s, r)| split_score(s, r)).collect();
    let examples = split_records
        .iter()
        .flat_map(|(split, records)| {
            records.iter().map(move |r| ExampleScore {
                split: split.clone(),
                example_id: r.example_id.clone(),
                score: r.score.value(),
                flagged: r.flagged,
            })
        })
        .collect();

    let mut retry_rates = Vec::new();
    for t in 1..=state.completed {
        let path = crate::optimizer::iter_dir(root, t).join("attempts.jsonl");
        if let Some(sets) = read_records::<AttemptSet>(&path)? {
            retry_rates.push(RetryRate {
                iteration: t,
                rho: compute_retry_success_rate(&sets),
            });
        }
    }

    let module = Module::new(run.base_prompt.clone(), tree::parse(&best.tree)?, RoutingMode::FullInjection);
    let seconds = fs::read_to_string(root.join("timing.txt"))
        .unwrap_or_default()
        .lines()
        .filter_map(|l| l.split("seconds=").nth(1)?.trim().parse::<f64>().ok())
        .sum();
    let usage = match Cassette::load(&root.join("cassette.jsonl"), CassetteMode::Passthrough) {
        Ok(c) => c.entries().iter().fold(UsageTotals::default(), |mut acc, e| {
            acc.calls += 1;
            acc.input_tokens += e.response.usage.input_tokens;
            acc.output_tokens += e.response.usage.output_tokens;
            acc
        }),
        Err(_) => UsageTotals::default(),
    };

    Ok(RunReport {
        best_iteration: best.iteration,
        iterations: state.completed,
        stop_reason: state.stop.map(|s| s.as_str()).unwrap_or("running").to_string(),
        splits,
        examples,
        retry_rates,
        rules_total: state.rules.len(),
        rules_reasoning: state.rules.iter().filter(|r| r.kind == RuleKind::Reasoning).count(),
        rules_formatting: state.rules.iter().filter(|r| r.kind == RuleKind::Formatting).count(),
        tree: tree_stats(&module.base_prompt, &module.tree),
        seconds,
        usage,
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|v| format!("{v:.4}")).unwrap_or_else(|| "absent".into())
}

impl RunReport {
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "best iteration {} of {} (stop: {})",
            self.best_iteration, self.iterations, self.stop_reason
        );
        let _ = writeln!(out);
        let _ = writeln!(out, "{:<10} {:>8} {:>5} {:>9} {:>8}", "split", "mean", "n", "failures", "flagged");
        for s in &self.splits {
            let _ = writeln!(
                out,
                "{:<10} {:>8.4} {:>5} {:>9} {:>8}",
                s.split, s.mean, s.n, s.provider_failures, s.flagged
            );
        }
        let _ = writeln!(out);
        let rates: Vec<String> = self
            .retry_rates
            .iter()
            .map(|r| format!("t{}={}", r.iteration, fmt_opt(r.rho)))
            .collect();
        let _ = writeln!(out, "retry success rate: {}", rates.join(" "));
        let _ = writeln!(
            out,
            "rules: {} total, {} reasoning, {} formatting",
            self.rules_total, self.rules_reasoning, self.rules_formatting
        );
        let t = &self.tree;
        let _ = writeln!(
            out,
            "tree: {} branches, depth {}, {} rules; prompt chars full={} classifier={}..{}",
            t.branches, t.depth, t.rules, t.full_injection_chars, t.classifier_min_chars, t.classifier_max_chars
        );
        let _ = writeln!(
            out,
            "usage: {} calls, {} input tokens, {} output tokens; {:.1}s",
            self.usage.calls, self.usage.input_tokens, self.usage.output_tokens, self.seconds
        );
        out
    }

    /// One JSON object per line, each tagged with `record`.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        let mut push = |record: &str, value: serde_json::Value| {
            let mut v = value;
            v.as_object_mut()
                .expect("records are objects")
                .insert("record".into(), record.into());
            out.push_str(&v.to_string());
            out.push('\n');
        };
        push(
            "run",
            serde_json::json!({
                "best_iteration": self.best_iteration,
                "iterations": self.iterations,
                "stop_reason": self.stop_reason,
                "seconds": self.seconds,
                "calls": self.usage.calls,
                "input_tokens": self.usage.input_tokens,
                "output_tokens": self.usage.output_tokens,
            }),
        );
        for s in &self.splits {
            push("split", serde_json::to_value(s).unwrap());
        }
        for e in &self.examples {
            push("example", serde_json::to_value(e).unwrap());
        }
        for r in &self.retry_rates {
            push("retry_rate", serde_json::to_value(r).unwrap());
        }
        push(
            "rules",
            serde_json::json!({
                "total": self.rules_total,
                "reasoning": self.rules_reasoning,
                "formatting": self.rules_formatting,
            }),
        );
        push("tree", serde_json::to_value(&self.tree).unwrap());
        out
    }
}
