//! Run directory layout.
//!
//! ```text
//! config.txt  base_prompt.txt  train.jsonl  val.jsonl
//! state.json  manifest.txt  timing.txt
//! iter-01/attempts.jsonl pairs.jsonl groups.jsonl rules.jsonl
//!         tree.txt eval.jsonl val_eval.jsonl summary.json
//! ```
//!
//! Everything except `timing.txt` is a pure function of the inputs and the
//! cassette, so two replays of the same run produce identical files.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::{iter_dir, IterationRecord, OptimizationConfig, OptimizationState};
use crate::error::RunError;
use crate::io::{from_jsonl, to_jsonl, write_atomic};
use crate::retry::TaskExample;

pub const CONFIG_FILE: &str = "config.txt";
pub const BASE_PROMPT_FILE: &str = "base_prompt.txt";
pub const TRAIN_FILE: &str = "train.jsonl";
pub const VAL_FILE: &str = "val.jsonl";
pub const STATE_FILE: &str = "state.json";
pub const MANIFEST_FILE: &str = "manifest.txt";
pub const TIMING_FILE: &str = "timing.txt";

#[derive(Debug, Clone)]
pub struct RunDir {
    root: PathBuf,
}

#[derive(Serialize)]
struct Summary {
    iteration: u32,
    train_score: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    val_score: Option<f64>,
    improved: bool,
    attempt_sets: usize,
    provider_failures: usize,
    pairs: usize,
    groups: usize,
    new_rules: usize,
    skipped_extractions: usize,
    merge_calls: usize,
    degraded_merge: bool,
    tree_depth: usize,
    tree_rules: usize,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn write(&self, rel: impl AsRef<Path>, contents: &str) -> Result<(), RunError> {
        let path = self.root.join(rel);
        write_atomic(&path, contents.as_bytes()).map_err(|e| RunError::io(&path, e))
    }

    pub fn write_inputs(
        &self,
        config: &OptimizationConfig,
        base_prompt: &str,
        train: &[TaskExample],
        val: &[TaskExample],
    ) -> Result<(), RunError> {
        if self.root.join(STATE_FILE).exists() {
            return Err(RunError::Resume {
                path: self.root.display().to_string(),
                message: "run directory already holds a run; resume it or pick another".into(),
            });
        }
        self.write(CONFIG_FILE, &config.to_text())?;
        self.write(BASE_PROMPT_FILE, base_prompt)?;
        self.write(TRAIN_FILE, &to_jsonl(train))?;
        self.write(VAL_FILE, &to_jsonl(val))?;
        let timing = self.root.join(TIMING_FILE);
        write_atomic(&timing, b"").map_err(|e| RunError::io(&timing, e))
    }

    pub fn write_iteration(&self, record: &IterationRecord) -> Result<(), RunError> {
        let dir = iter_dir(Path::new(""), record.iteration);
        self.write(dir.join("attempts.jsonl"), &to_jsonl(&record.attempt_sets))?;
        self.write(dir.join("pairs.jsonl"), &to_jsonl(&record.mined.pairs))?;
        self.write(dir.join("groups.jsonl"), &to_jsonl(&record.mined.groups))?;
        self.write(dir.join("rules.jsonl"), &to_jsonl(&record.new_rules))?;
        self.write(dir.join("tree.txt"), &crate::tree::serialize(&record.merge.tree)?)?;
        self.write(dir.join("eval.jsonl"), &to_jsonl(&record.evaluation.records))?;
        if let Some(val) = &record.val_evaluation {
            self.write(dir.join("val_eval.jsonl"), &to_jsonl(&val.records))?;
        }
        let summary = Summary {
            iteration: record.iteration,
            train_score: record.evaluation.mean,
            val_score: record.val_evaluation.as_ref().map(|e| e.mean),
            improved: record.improved,
            attempt_sets: record.attempt_sets.len(),
            provider_failures: record
                .attempt_sets
                .iter()
                .filter(|s| s.provider_failure.is_some())
                .count(),
            pairs: record.mined.pairs.len(),
            groups: record.mined.groups.len(),
            new_rules: record.new_rules.len(),
            skipped_extractions: record.skipped_extractions,
            merge_calls: record.merge.calls,
            degraded_merge: record.merge.degraded,
            tree_depth: record.merge.tree.depth(),
            tree_rules: record.merge.tree.rule_texts().len(),
        };
        let mut json = serde_json::to_string_pretty(&summary).expect("summary serializes");
        json.push('\n');
        self.write(dir.join("summary.json"), &json)
    }

    pub fn write_state(&self, state: &OptimizationState) -> Result<(), RunError> {
        let mut json = serde_json::to_string_pretty(state).expect("state serializes");
        json.push('\n');
        self.write(STATE_FILE, &json)?;
        self.write(MANIFEST_FILE, &manifest(state))
    }

    pub fn append_timing(&self, iteration: u32, seconds: f64) -> Result<(), RunError> {
        let path = self.root.join(TIMING_FILE);
        let mut file = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| RunError::io(&path, e))?;
        writeln!(file, "iteration={iteration} seconds={seconds:.3}").map_err(|e| RunError::io(&path, e))
    }
}

/// Summary of a run's outcome; contains no timestamps or durations.
pub fn manifest(state: &OptimizationState) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "format=contraprompt-run/1");
    let _ = writeln!(out, "iterations_completed={}", state.completed);
    let _ = writeln!(
        out,
        "stop_reason={}",
        state.stop.map(|s| s.as_str()).unwrap_or("running")
    );
    if let Some(best) = state.best() {
        let _ = writeln!(out, "best_iteration={}", best.iteration);
        let _ = writeln!(out, "best_train_score={}", best.train_score);
        let _ = writeln!(out, "best_tree=iter-{:02}/tree.txt", best.iteration);
    }
    let _ = writeln!(out, "rules_total={}", state.rules.len());
    let scores: Vec<String> = state.trajectory.iter().map(|p| p.score.to_string()).collect();
    let _ = writeln!(out, "train_scores={}", scores.join(","));
    let waits: Vec<String> = state.trajectory.iter().map(|p| p.wait.to_string()).collect();
    let _ = writeln!(out, "waits={}", waits.join(","));
    out
}

/// A run directory read back for resuming or reporting.
#[derive(Debug, Clone)]
pub struct LoadedRun {
    pub config: OptimizationConfig,
    pub base_prompt: String,
    pub train: Vec<TaskExample>,
    pub val: Vec<TaskExample>,
    pub state: OptimizationState,
}

pub fn load_run(root: &Path) -> Result<LoadedRun, RunError> {
    let fail = |message: String| RunError::Resume {
        path: root.display().to_string(),
        message,
    };
    if !root.is_dir() {
        return Err(fail("not a directory".into()));
    }
    let read = |name: &str| -> Result<String, RunError> {
        fs::read_to_string(root.join(name)).map_err(|e| fail(format!("{name}: {e}")))
    };
    let config = OptimizationConfig::parse(&read(CONFIG_FILE)?)
        .map_err(|e| fail(format!("{CONFIG_FILE}: {e}")))?;
    let base_prompt = read(BASE_PROMPT_FILE)?;
    let examples = |name: &str| -> Result<Vec<TaskExample>, RunError> {
        from_jsonl(&read(name)?).map_err(|(line, msg)| fail(format!("{name} line {line}: {msg}")))
    };
    let train = examples(TRAIN_FILE)?;
    let val = examples(VAL_FILE)?;
    let state_path = root.join(STATE_FILE);
    let state = if state_path.exists() {
        serde_json::from_str(&read(STATE_FILE)?).map_err(|e| fail(format!("{STATE_FILE}: {e}")))?
    } else {
        // inputs written but no iteration finished yet
        OptimizationState::new(config.patience)
    };
    if train.is_empty() {
        return Err(fail("training set is empty".into()));
    }
    Ok(LoadedRun {
        config,
        base_prompt,
        train,
        val,
        state,
    })
}
