//! The outer optimization loop.
//!
//! Each iteration solves the training set with retries under the current
//! best module, mines the attempt logs, extracts rules, merges every rule
//! seen so far into a tree and scores the resulting module. The best
//! checkpoint by training score is kept; the loop stops after `patience`
//! iterations without strict improvement.

pub mod config;
mod store;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use config::{Ablations, OptimizationConfig};
pub use store::{load_run, LoadedRun, RunDir};

use crate::error::{GatewayError, RunError};
use crate::gateway::{CassetteMode, Gateway};
use crate::harness::answer::score_completion;
use crate::metrics::Score;
use crate::mining::{mine, MineOptions, MineOutput};
use crate::pool::map_bounded;
use crate::retry::{attempt_user_content, solve_with_retries, AttemptSet, TaskExample};
use crate::rules::{
    aggregate_failure_rules, classify_rule_kind, dedup_rules, extract_rule, Rule,
};
use crate::tree::{
    self, flat_tree, route, tree_merge, MergeOutcome, RoutedRules, RoutingMode, RuleTree,
};

/// A base prompt plus a rule tree and how to route it.
#[derive(Debug, Clone, PartialEq)]
pub struct Module {
    pub base_prompt: String,
    pub tree: RuleTree,
    pub routing: RoutingMode,
    /// Inject every rule as a plain list, ignoring the tree structure.
    pub flat: bool,
}

impl Module {
    pub fn new(base_prompt: impl Into<String>, tree: RuleTree, routing: RoutingMode) -> Self {
        Self {
            base_prompt: base_prompt.into(),
            tree,
            routing,
            flat: false,
        }
    }

    pub fn flat(base_prompt: impl Into<String>, tree: RuleTree) -> Self {
        Self {
            flat: true,
            ..Self::new(base_prompt, tree, RoutingMode::FullInjection)
        }
    }

    pub fn routed(&self, input: &str, gateway: &Gateway) -> RoutedRules {
        if self.flat {
            RoutedRules::Selected(self.tree.rule_texts().into_iter().map(str::to_string).collect())
        } else {
            route(&self.tree, input, self.routing, gateway)
        }
    }

    /// System prompt for one input. May spend a router call.
    pub fn system_prompt(&self, input: &str, gateway: &Gateway) -> String {
        tree::system_prompt(&self.base_prompt, &self.routed(input, gateway))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub example_id: String,
    pub answer: String,
    pub score: Score,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub flagged: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provider_failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub mean: f64,
    pub records: Vec<EvalRecord>,
}

impl Evaluation {
    pub fn provider_failures(&self) -> usize {
        self.records
            .iter()
            .filter(|r| r.provider_failure.is_some())
            .count()
    }
}

/// Single attempt per example, no feedback. Gateway failures score zero
/// and are flagged rather than aborting.
pub fn evaluate(
    dataset: &[TaskExample],
    module: &Module,
    gateway: &Gateway,
    workers: usize,
) -> Result<Evaluation, RunError> {
    if dataset.is_empty() {
        return Err(RunError::EmptyDataset);
    }
    let records = map_bounded(dataset, workers, |example| {
        let system = module.system_prompt(&example.input, gateway);
        let request = gateway.request(
            crate::gateway::Role::TaskSolver,
            system,
            attempt_user_content(&example.input, ""),
        );
        match gateway.complete(&request) {
            Ok(response) => {
                let (parsed, score) = score_completion(&response.text, &example.gold);
                EvalRecord {
                    example_id: example.id.clone(),
                    answer: parsed.answer,
                    score,
                    flagged: parsed.flagged,
                    provider_failure: None,
                }
            }
            Err(e) => EvalRecord {
                example_id: example.id.clone(),
                answer: String::new(),
                score: Score::ZERO,
                flagged: true,
                provider_failure: Some(e.to_string()),
            },
        }
    });
    let mean = records.iter().map(|r| r.score.value()).sum::<f64>() / records.len() as f64;
    Ok(Evaluation { mean, records })
}

/// Early-stopping bookkeeping. The incumbent starts below any real score,
/// improvement is strict, and ties keep the earlier checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Patience {
    pub best_score: f64,
    pub best_iteration: Option<u32>,
    pub wait: u32,
    pub limit: u32,
}

impl Patience {
    pub fn new(limit: u32) -> Self {
        Self {
            best_score: -1.0,
            best_iteration: None,
            wait: 0,
            limit,
        }
    }

    /// Records one iteration's score; returns whether it became the best.
    pub fn observe(&mut self, iteration: u32, score: f64) -> bool {
        if score > self.best_score {
            self.best_score = score;
            self.best_iteration = Some(iteration);
            self.wait = 0;
            true
        } else {
            self.wait += 1;
            false
        }
    }

    pub fn exhausted(&self) -> bool {
        self.wait >= self.limit
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Patience,
    MaxIterations,
}

impl StopReason {
    pub fn as_str(self) -> &'static str {
        match self {
            StopReason::Patience => "patience",
            StopReason::MaxIterations => "max_iterations",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub iteration: u32,
    /// Canonical tree text.
    pub tree: String,
    pub train_score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_score: Option<f64>,
    pub degraded_merge: bool,
    pub rule_count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub iteration: u32,
    pub score: f64,
    pub best_score: f64,
    pub wait: u32,
}

/// Everything needed to continue a run after the last finished iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizationState {
    pub completed: u32,
    pub rules: Vec<Rule>,
    pub patience: Patience,
    pub checkpoints: Vec<Checkpoint>,
    pub trajectory: Vec<TrajectoryPoint>,
    pub stop: Option<StopReason>,
    /// Replay position per request fingerprint.
    pub cassette_cursor: BTreeMap<String, usize>,
}

impl OptimizationState {
    pub fn new(patience: u32) -> Self {
        Self {
            completed: 0,
            rules: Vec::new(),
            patience: Patience::new(patience),
            checkpoints: Vec::new(),
            trajectory: Vec::new(),
            stop: None,
            cassette_cursor: BTreeMap::new(),
        }
    }

    pub fn best(&self) -> Option<&Checkpoint> {
        let it = self.patience.best_iteration?;
        self.checkpoints.iter().find(|c| c.iteration == it)
    }
}

/// Per-iteration artifacts.
#[derive(Debug, Clone)]
pub struct IterationRecord {
    pub iteration: u32,
    pub attempt_sets: Vec<AttemptSet>,
    pub mined: MineOutput,
    pub new_rules: Vec<Rule>,
    pub skipped_extractions: usize,
    pub merge: MergeOutcome,
    pub evaluation: Evaluation,
    pub val_evaluation: Option<Evaluation>,
    pub improved: bool,
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub best: Checkpoint,
    pub module: Module,
    pub state: OptimizationState,
    /// Set when an iteration aborted after at least one checkpoint existed.
    pub aborted: Option<String>,
}

/// Mining input after ablations: contrastive mining off sends every failing
/// example to the all-fail groups; failure analysis off drops the groups.
pub fn mine_with_ablations(sets: &[AttemptSet], config: &OptimizationConfig) -> MineOutput {
    let delta_min = if config.ablations.disable_contrastive {
        f64::INFINITY
    } else {
        config.delta_min
    };
    let mut mined = mine(
        sets,
        &MineOptions {
            delta_min,
            threshold: None,
            strict_success_pairs: config.strict_success_pairs,
        },
    );
    if config.ablations.disable_failure_analysis {
        mined.groups.clear();
    }
    mined
}

pub struct Optimizer<'a> {
    config: OptimizationConfig,
    gateway: &'a Gateway,
    run_dir: Option<RunDir>,
    cassette_file: Option<PathBuf>,
}

impl<'a> Optimizer<'a> {
    pub fn new(config: OptimizationConfig, gateway: &'a Gateway) -> Self {
        Self {
            config,
            gateway,
            run_dir: None,
            cassette_file: None,
        }
    }

    /// Persist config, inputs, per-iteration artifacts and state here.
    pub fn with_run_dir(mut self, path: impl Into<PathBuf>) -> Self {
        self.run_dir = Some(RunDir::new(path));
        self
    }

    /// In record mode, save the cassette here after every iteration.
    pub fn with_cassette_file(mut self, path: impl Into<PathBuf>) -> Self {
        self.cassette_file = Some(path.into());
        self
    }

    pub fn config(&self) -> &OptimizationConfig {
        &self.config
    }

    /// Fresh run.
    pub fn run(
        &self,
        train: &[TaskExample],
        val: &[TaskExample],
        base_prompt: &str,
    ) -> Result<RunOutcome, RunError> {
        self.config.validate()?;
        if train.is_empty() {
            return Err(RunError::EmptyTrain);
        }
        if let Some(dir) = &self.run_dir {
            dir.write_inputs(&self.config, base_prompt, train, val)?;
        }
        self.continue_from(OptimizationState::new(self.config.patience), train, val, base_prompt)
    }

    /// Continues a run loaded with [`load_run`]. The config passed to
    /// [`Optimizer::new`] should be the loaded one.
    pub fn resume(&self, loaded: LoadedRun) -> Result<RunOutcome, RunError> {
        if self.gateway.cassette().mode() == CassetteMode::Replay {
            self.gateway
                .cassette()
                .set_cursor(loaded.state.cassette_cursor.clone());
        }
        self.continue_from(loaded.state, &loaded.train, &loaded.val, &loaded.base_prompt)
    }

    fn continue_from(
        &self,
        mut state: OptimizationState,
        train: &[TaskExample],
        val: &[TaskExample],
        base_prompt: &str,
    ) -> Result<RunOutcome, RunError> {
        let mut aborted = None;
        while state.stop.is_none() && state.completed < self.config.iterations {
            let t = state.completed + 1;
            let started = Instant::now();
            match self.iteration(t, &state, train, val, base_prompt) {
                Ok(mut record) => {
                    record.seconds = started.elapsed().as_secs_f64();
                    self.commit(&mut state, &mut record)?;
                }
                Err(e) => {
                    log::error!("iteration {t} aborted: {e}");
                    if state.best().is_none() {
                        return Err(e);
                    }
                    aborted = Some(format!("iteration {t}: {e}"));
                    break;
                }
            }
        }
        let best = state
            .best()
            .cloned()
            .ok_or_else(|| RunError::Resume {
                path: self.run_dir_display(),
                message: "no completed iteration".into(),
            })?;
        let module = self.module(base_prompt, tree::parse(&best.tree)?);
        Ok(RunOutcome {
            best,
            module,
            state,
            aborted,
        })
    }

    fn run_dir_display(&self) -> String {
        self.run_dir
            .as_ref()
            .map(|d| d.root().display().to_string())
            .unwrap_or_else(|| "<memory>".into())
    }

    fn module(&self, base_prompt: &str, tree: RuleTree) -> Module {
        if self.config.ablations.flat_injection {
            Module::flat(base_prompt, tree)
        } else {
            Module::new(base_prompt, tree, self.config.routing)
        }
    }

    fn check_fatal(&self) -> Result<(), RunError> {
        match self.gateway.take_fatal() {
            Some(e) => Err(RunError::Gateway(e)),
            None => Ok(()),
        }
    }

    fn iteration(
        &self,
        t: u32,
        state: &OptimizationState,
        train: &[TaskExample],
        val: &[TaskExample],
        base_prompt: &str,
    ) -> Result<IterationRecord, RunError> {
        let gw = self.gateway;
        let cfg = &self.config;
        let answer_only = cfg.ablations.answer_only_extraction;
        // stale errors from outside the loop must not abort this iteration
        let _ = gw.take_fatal();

        // 1. solve under the incumbent module; the first iteration has none
        let incumbent = match state.best() {
            Some(best) => Some(self.module(base_prompt, tree::parse(&best.tree)?)),
            None => None,
        };
        let attempt_sets = map_bounded(train, cfg.workers, |example| {
            let system = match &incumbent {
                Some(module) => module.system_prompt(&example.input, gw),
                None => base_prompt.to_string(),
            };
            solve_with_retries(example, &system, cfg.attempts, gw)
        });
        self.check_fatal()?;

        // 2. mine
        let mined = mine_with_ablations(&attempt_sets, cfg);

        // 3. extract: pairs in rank order, then failure groups
        let extracted = map_bounded(
            &mined.pairs.iter().enumerate().collect::<Vec<_>>(),
            cfg.workers,
            |(n, pair)| extract_rule(pair, format!("t{t:02}-p{:03}", n + 1), t, answer_only, gw),
        );
        let mut skipped = 0;
        let mut new_rules = Vec::new();
        for result in extracted {
            match result {
                Ok(rule) => new_rules.push(rule),
                Err(e) => {
                    log::warn!("rule extraction skipped: {e}");
                    skipped += 1;
                }
            }
        }
        let analysis = aggregate_failure_rules(
            &mined.groups,
            cfg.failure_group_sample,
            t,
            answer_only,
            gw,
        );
        skipped += analysis.skipped.len();
        new_rules.extend(analysis.rules);
        let new_rules: Vec<Rule> = new_rules
            .into_iter()
            .map(|rule| classify_rule_kind(rule, gw))
            .collect();
        self.check_fatal()?;
        let all_rules = dedup_rules(&state.rules, &new_rules);

        // 4. merge everything seen so far
        let failing: Vec<&str> = attempt_sets
            .iter()
            .filter(|s| s.provider_failure.is_none() && s.first_failed())
            .map(|s| s.input.as_str())
            .take(cfg.merge_input_sample)
            .collect();
        let merge = if cfg.ablations.flat_injection {
            MergeOutcome {
                tree: flat_tree(&all_rules),
                degraded: false,
                calls: 0,
            }
        } else {
            tree_merge(&all_rules, &failing, gw)
        };
        self.check_fatal()?;

        // 5. score the candidate
        let module = self.module(base_prompt, merge.tree.clone());
        let evaluation = evaluate(train, &module, gw, cfg.workers)?;
        let val_evaluation = if cfg.use_validation && !val.is_empty() {
            Some(evaluate(val, &module, gw, cfg.workers)?)
        } else {
            None
        };
        self.check_fatal()?;

        Ok(IterationRecord {
            iteration: t,
            attempt_sets,
            mined,
            new_rules,
            skipped_extractions: skipped,
            merge,
            evaluation,
            val_evaluation,
            improved: false,
            seconds: 0.0,
        })
    }

    /// Applies a finished iteration to the state and persists it.
    fn commit(&self, state: &mut OptimizationState, record: &mut IterationRecord) -> Result<(), RunError> {
        let t = record.iteration;
        let score = record.evaluation.mean;
        record.improved = state.patience.observe(t, score);
        state.completed = t;
        state.rules = dedup_rules(&state.rules, &record.new_rules);
        state.checkpoints.push(Checkpoint {
            iteration: t,
            tree: tree::serialize(&record.merge.tree)?,
            train_score: score,
            val_score: record.val_evaluation.as_ref().map(|e| e.mean),
            degraded_merge: record.merge.degraded,
            rule_count: state.rules.len(),
        });
        state.trajectory.push(TrajectoryPoint {
            iteration: t,
            score,
            best_score: state.patience.best_score,
            wait: state.patience.wait,
        });
        if state.patience.exhausted() {
            state.stop = Some(StopReason::Patience);
        } else if t >= self.config.iterations {
            state.stop = Some(StopReason::MaxIterations);
        }
        state.cassette_cursor = self.gateway.cassette().cursor();
        log::info!(
            "iteration {t}: score {score:.4} best {:.4} wait {}",
            state.patience.best_score,
            state.patience.wait
        );
        if let Some(dir) = &self.run_dir {
            dir.write_iteration(record)?;
            dir.write_state(state)?;
            dir.append_timing(t, record.seconds)?;
        }
        self.save_cassette()?;
        Ok(())
    }

    fn save_cassette(&self) -> Result<(), RunError> {
        if let Some(path) = &self.cassette_file {
            if self.gateway.cassette().mode() == CassetteMode::Record {
                self.gateway
                    .cassette()
                    .save(path)
                    .map_err(|e| RunError::io(path, e))?;
            }
        }
        Ok(())
    }
}

/// Convenience wrapper: in-memory run with no persistence.
pub fn optimize(
    train: &[TaskExample],
    base_prompt: &str,
    config: &OptimizationConfig,
    gateway: &Gateway,
) -> Result<RunOutcome, RunError> {
    Optimizer::new(config.clone(), gateway).run(train, &[], base_prompt)
}

/// Whether an error came from a setup problem rather than the data.
pub fn is_configuration_error(e: &RunError) -> bool {
    matches!(e, RunError::Gateway(g) if g.is_configuration())
        || matches!(e, RunError::Gateway(GatewayError::CorruptCassette { .. }))
        || matches!(e, RunError::Config(_))
}

pub(crate) fn iter_dir(root: &Path, t: u32) -> PathBuf {
    root.join(format!("iter-{t:02}"))
}
