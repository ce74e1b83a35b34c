//! Deterministic stand-in for a chat model, shared by integration tests.
//!
//! `SimulatedModel` answers every role the engine uses. The solver behaves
//! like a model with a formatting habit: it wraps yes/no and entity answers
//! in "The answer is ..." until feedback or an injected rule tells it not
//! to, and it cannot answer the multi-hop questions until a bridge-entity
//! rule is present.

#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::Mutex;

use contraprompt::error::ProviderError;
use contraprompt::gateway::{ChatProvider, ChatRequest, ChatResponse, Role};
use contraprompt::harness::dataset::DatasetRecord;
use contraprompt::metrics::MetricKind;
use contraprompt::optimizer::OptimizationConfig;
use contraprompt::prompts;

pub const YESNO_RULE: &str = "When the question asks whether two things share a property, \
answer with only yes or no because any extra words lower the overlap with the reference.";
pub const ENTITY_RULE: &str = "When the question asks for a named entity, give only the bare \
entity name because surrounding words are scored as noise.";
pub const BRIDGE_RULE: &str = "When a question chains two facts through a bridge entity, resolve \
the bridge entity first because the final answer depends on it.";

pub const YESNO_CONDITION: &str = "Question asks yes/no structure";
pub const BRIDGE_CONDITION: &str = "Question chains two facts";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Group {
    YesNo,
    Entity,
    Hard,
}

pub struct SimExample {
    pub id: &'static str,
    pub question: &'static str,
    pub answer: &'static str,
    pub group: Group,
    /// What a retry produces on a hard question before the bridge rule.
    pub partial: Option<&'static str>,
}

pub const EXAMPLES: [SimExample; 10] = [
    SimExample { id: "h01", question: "Were Scott Derrickson and Ed Wood of the same nationality?", answer: "yes", group: Group::YesNo, partial: None },
    SimExample { id: "h02", question: "Are the Laleli Mosque and Esma Sultan Mansion located in the same neighborhood?", answer: "no", group: Group::YesNo, partial: None },
    SimExample { id: "h03", question: "Is Kinkaku-ji older than the Eiffel Tower?", answer: "yes", group: Group::YesNo, partial: None },
    SimExample { id: "h04", question: "Which city hosted the 1992 Summer Olympics?", answer: "Barcelona", group: Group::Entity, partial: None },
    SimExample { id: "h05", question: "Who directed the film that won Best Picture at the 1998 ceremony?", answer: "James Cameron", group: Group::Entity, partial: None },
    SimExample { id: "h06", question: "Which river flows through Budapest?", answer: "Danube", group: Group::Entity, partial: None },
    SimExample { id: "h07", question: "What is the capital of the country where the Atacama Desert lies?", answer: "Santiago", group: Group::Entity, partial: None },
    SimExample { id: "h08", question: "Which magazine was started first, Arthur's Magazine or First for Women?", answer: "Arthur's Magazine", group: Group::Hard, partial: None },
    SimExample { id: "h09", question: "The director of the romantic comedy Big Stone Gap is based in what New York city?", answer: "Greenwich Village, New York City", group: Group::Hard, partial: Some("New York") },
    SimExample { id: "h10", question: "What government position was held by the woman who portrayed Corliss Archer in the film Kiss and Tell?", answer: "Chief of Protocol", group: Group::Hard, partial: None },
];

pub fn dataset_records() -> Vec<DatasetRecord> {
    EXAMPLES
        .iter()
        .map(|e| DatasetRecord {
            id: e.id.to_string(),
            input: format!("Question: {}", e.question),
            metric_kind: MetricKind::TokenF1,
            gold: serde_json::Value::String(e.answer.to_string()),
            options: None,
            label_universe: None,
            task_threshold: None,
        })
        .collect()
}

pub fn dataset_jsonl() -> String {
    contraprompt::io::to_jsonl(&dataset_records())
}

/// Trace text the solver writes for a question; distinctive enough to grep.
pub fn trace_for(example: &SimExample, attempt_marker: &str) -> String {
    format!(
        "Let me work through this carefully ({attempt_marker}).\nThe question is about: {}\nRecalling the relevant facts one at a time.",
        example.question
    )
}

fn find_example(text: &str) -> Option<&'static SimExample> {
    EXAMPLES.iter().find(|e| text.contains(e.question))
}

#[derive(Default)]
pub struct SimulatedModel {
    calls: Mutex<Vec<Role>>,
}

impl SimulatedModel {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn calls(&self) -> Vec<Role> {
        self.calls.lock().unwrap().clone()
    }

    fn solve(&self, request: &ChatRequest) -> String {
        let Some(example) = find_example(&request.user_content) else {
            return "I am not sure.\nFINAL: unknown".into();
        };
        let system = &request.system_prompt;
        let retry = request.user_content.contains("[Feedback]");
        let marker = if retry { "retry" } else { "first pass" };
        let trace = trace_for(example, marker);
        let answer = match example.group {
            Group::YesNo if system.contains("answer with only yes or no") || retry => {
                example.answer.to_string()
            }
            Group::Entity if system.contains("give only the bare entity name") || retry => {
                example.answer.to_string()
            }
            Group::YesNo | Group::Entity => format!("The answer is {}, as far as I can tell", example.answer),
            Group::Hard if system.contains("resolve the bridge entity first") => example.answer.to_string(),
            Group::Hard => match (retry, example.partial) {
                (true, Some(p)) => p.to_string(),
                _ => "Unknown".to_string(),
            },
        };
        format!("{trace}\nFINAL: {answer}")
    }

    fn error_type(&self, request: &ChatRequest) -> String {
        let answer = request
            .user_content
            .split("Final answer given:\n")
            .nth(1)
            .and_then(|rest| rest.lines().next())
            .unwrap_or_default();
        if answer.starts_with("The answer is") {
            "formatting"
        } else if answer == "Unknown" {
            "incomplete_reasoning"
        } else {
            "wrong_entity"
        }
        .into()
    }

    fn extract(&self, request: &ChatRequest) -> String {
        match find_example(&request.user_content).map(|e| e.group) {
            Some(Group::YesNo) => YESNO_RULE.into(),
            Some(Group::Entity) => ENTITY_RULE.into(),
            _ => BRIDGE_RULE.into(),
        }
    }

    fn merge(&self, request: &ChatRequest) -> String {
        let rules: Vec<&str> = request
            .user_content
            .lines()
            .skip_while(|l| *l != "# Rules")
            .skip(1)
            .take_while(|l| !l.is_empty())
            .filter_map(|l| l.split_once(". ").map(|(_, r)| r))
            .collect();
        let mut always = Vec::new();
        let mut yesno = Vec::new();
        let mut bridge = Vec::new();
        for rule in rules {
            if rule.contains("yes or no") {
                yesno.push(rule);
            } else if rule.contains("bridge entity") {
                bridge.push(rule);
            } else {
                always.push(rule);
            }
        }
        let mut out = String::from("Here is the tree.\n<always>\n");
        for r in &always {
            out.push_str(&format!("  <rule>{r}</rule>\n"));
        }
        out.push_str("</always>\n");
        for (condition, rules) in [(YESNO_CONDITION, &yesno), (BRIDGE_CONDITION, &bridge)] {
            if rules.is_empty() {
                continue;
            }
            out.push_str(&format!("<branch condition=\"{condition}\">\n"));
            for r in rules.iter() {
                out.push_str(&format!("  <rule>{r}</rule>\n"));
            }
            out.push_str("</branch>\n");
        }
        out
    }

    fn router(&self, request: &ChatRequest) -> String {
        let example = find_example(&request.user_content);
        let picks: Vec<String> = request
            .user_content
            .lines()
            .filter_map(|l| l.split_once(". "))
            .filter(|(n, _)| n.chars().all(|c| c.is_ascii_digit()))
            .filter(|(_, cond)| match example.map(|e| e.group) {
                Some(Group::YesNo) => *cond == YESNO_CONDITION,
                Some(Group::Hard) => *cond == BRIDGE_CONDITION,
                _ => false,
            })
            .map(|(n, _)| n.to_string())
            .collect();
        if picks.is_empty() {
            "none".into()
        } else {
            picks.join(", ")
        }
    }
}

impl ChatProvider for SimulatedModel {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, ProviderError> {
        self.calls.lock().unwrap().push(request.role);
        let text = match request.role {
            Role::TaskSolver => self.solve(request),
            Role::FailureAnalyst if request.system_prompt == prompts::ERROR_TYPE_SYSTEM => {
                self.error_type(request)
            }
            Role::RuleExtractor if request.system_prompt == prompts::RULE_KIND_SYSTEM => {
                "formatting".into()
            }
            Role::RuleExtractor if request.system_prompt == prompts::FAILURE_ANALYSIS_SYSTEM => {
                BRIDGE_RULE.into()
            }
            Role::RuleExtractor => self.extract(request),
            Role::TreeMerger => self.merge(request),
            Role::Router => self.router(request),
            Role::FailureAnalyst => "other".into(),
        };
        let mut response = ChatResponse::text(text);
        response.usage.input_tokens = (request.system_prompt.len() + request.user_content.len()) as u64 / 4;
        response.usage.output_tokens = response.text.len() as u64 / 4;
        Ok(response)
    }
}

/// Scripted train scores for control-flow tests. Train examples are
/// exact-match with gold `ok`; the tree merger stamps each merged tree with
/// a level number and the solver gets `scores[level - 1] * 10` examples
/// right under that tree.
pub struct ScoreScript {
    scores: Vec<f64>,
    merges: Mutex<usize>,
}

impl ScoreScript {
    pub fn new(scores: &[f64]) -> Self {
        Self {
            scores: scores.to_vec(),
            merges: Mutex::new(0),
        }
    }

    pub fn examples() -> Vec<contraprompt::TaskExample> {
        (0..10)
            .map(|i| {
                contraprompt::TaskExample::new(
                    format!("s{i:02}"),
                    format!("Item number {i:02}: reply ok."),
                    contraprompt::GoldTarget::ExactString { text: "ok".into() },
                )
            })
            .collect()
    }
}

impl ChatProvider for ScoreScript {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, ProviderError> {
        let text = match request.role {
            Role::TaskSolver => {
                let level = request
                    .system_prompt
                    .split("scripted level ")
                    .nth(1)
                    .and_then(|s| s.split_whitespace().next())
                    .and_then(|s| s.parse::<usize>().ok());
                let item: usize = request
                    .user_content
                    .split("Item number ")
                    .nth(1)
                    .and_then(|s| s.get(..2))
                    .and_then(|s| s.parse().ok())
                    .unwrap_or(99);
                let retry = request.user_content.contains("[Feedback]");
                let correct = match level {
                    Some(l) if !retry => {
                        let k = (self.scores[(l - 1).min(self.scores.len() - 1)] * 10.0).round() as usize;
                        item < k
                    }
                    _ => false,
                };
                format!("Checking.\nFINAL: {}", if correct { "ok" } else { "no" })
            }
            Role::FailureAnalyst => "wrong_entity".into(),
            Role::RuleExtractor if request.system_prompt == prompts::RULE_KIND_SYSTEM => {
                "reasoning".into()
            }
            Role::RuleExtractor => {
                "When an item asks for a fixed reply, copy the reply exactly because the check is literal.".into()
            }
            Role::TreeMerger => {
                let mut merges = self.merges.lock().unwrap();
                *merges += 1;
                format!(
                    "<always>\n  <rule>When an item asks for a fixed reply, copy the reply exactly because the check is literal; scripted level {} applies.</rule>\n</always>",
                    *merges
                )
            }
            Role::Router => "none".into(),
        };
        Ok(ChatResponse::text(text))
    }
}

pub fn fixtures_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests").join("fixtures")
}

pub fn sim_dir() -> PathBuf {
    fixtures_dir().join("sim")
}

/// The ablation arms that ship with recorded cassettes.
pub const ARMS: [&str; 5] = ["base", "answer_only", "flat", "no_contrastive", "classifier"];

pub fn arm_config(arm: &str) -> OptimizationConfig {
    let mut c = OptimizationConfig {
        iterations: 3,
        attempts: 3,
        patience: 3,
        train_n: 10,
        val_n: 0,
        workers: 1,
        seed: 7,
        model: "sim-model".into(),
        ..OptimizationConfig::default()
    };
    match arm {
        "base" => {}
        "answer_only" => c.ablations.answer_only_extraction = true,
        "flat" => c.ablations.flat_injection = true,
        "no_contrastive" => c.ablations.disable_contrastive = true,
        "classifier" => c.routing = contraprompt::RoutingMode::Classifier,
        other => panic!("unknown arm {other}"),
    }
    c
}

pub fn arm_cassette(arm: &str) -> PathBuf {
    sim_dir().join(format!("{arm}.cassette.jsonl"))
}

/// The training split the CLI derives from the shipped dataset file.
pub fn sim_train(config: &OptimizationConfig) -> Vec<contraprompt::TaskExample> {
    let all = contraprompt::harness::load_dataset(&sim_dir().join("dataset.jsonl"), config.seed)
        .expect("shipped dataset loads");
    contraprompt::harness::split(&all, config.train_n, config.val_n, config.seed)
        .expect("enough examples")
        .train
}

/// Runs one arm against the simulated model, recording every call.
pub fn record_arm(
    arm: &str,
    run_dir: &Path,
) -> (contraprompt::RunOutcome, std::sync::Arc<contraprompt::Cassette>) {
    use std::sync::Arc;
    use contraprompt::gateway::{Backoff, Cassette, CassetteMode, Gateway};
    let config = arm_config(arm);
    let cassette = Arc::new(Cassette::new(CassetteMode::Record));
    let gateway = Gateway::new(Arc::new(SimulatedModel::new()), cassette.clone())
        .with_model(config.model.clone())
        .with_backoff(Backoff::immediate());
    let train = sim_train(&config);
    let outcome = contraprompt::Optimizer::new(config, &gateway)
        .with_run_dir(run_dir)
        .run(&train, &[], prompts::DEFAULT_BASE_PROMPT)
        .expect("simulated run succeeds");
    (outcome, cassette)
}
