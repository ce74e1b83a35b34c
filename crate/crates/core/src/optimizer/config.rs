//! Flat `key=value` configuration file.
//!
//! Blank lines and lines starting with `#` are ignored. Keys mirror the
//! field names of [`OptimizationConfig`]; unknown keys are an error.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::error::ConfigError;
use crate::gateway::OutputLimits;
use crate::mining::DEFAULT_DELTA_MIN;
use crate::rules::DEFAULT_GROUP_SAMPLE;
use crate::tree::RoutingMode;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Ablations {
    pub disable_contrastive: bool,
    pub disable_failure_analysis: bool,
    pub flat_injection: bool,
    pub answer_only_extraction: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizationConfig {
    pub iterations: u32,
    pub attempts: u32,
    pub patience: u32,
    pub delta_min: f64,
    pub routing: RoutingMode,
    pub ablations: Ablations,
    pub strict_success_pairs: bool,
    pub failure_group_sample: usize,
    pub merge_input_sample: usize,
    /// Also score each checkpoint on the validation split (reported only).
    pub use_validation: bool,
    pub workers: usize,
    pub seed: u64,
    pub train_n: usize,
    pub val_n: usize,
    pub model: String,
    pub base_url: String,
    pub limits: OutputLimits,
}

impl Default for OptimizationConfig {
    fn default() -> Self {
        Self {
            iterations: 15,
            attempts: 3,
            patience: 3,
            delta_min: DEFAULT_DELTA_MIN,
            routing: RoutingMode::FullInjection,
            ablations: Ablations::default(),
            strict_success_pairs: false,
            failure_group_sample: DEFAULT_GROUP_SAMPLE,
            merge_input_sample: 10,
            use_validation: false,
            workers: 4,
            seed: 0,
            train_n: 50,
            val_n: 50,
            model: "gpt-4o-mini".to_string(),
            base_url: "https://api.openai.com/v1".to_string(),
            limits: OutputLimits::default(),
        }
    }
}

impl OptimizationConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.iterations < 1 || self.attempts < 1 || self.patience < 1 {
            return Err(ConfigError::Invalid(
                "iterations, attempts and patience must be at least 1".into(),
            ));
        }
        if !(self.delta_min >= 0.0 && self.delta_min.is_finite()) {
            return Err(ConfigError::Invalid("delta_min must be a finite value >= 0".into()));
        }
        if self.workers < 1 {
            return Err(ConfigError::Invalid("workers must be at least 1".into()));
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut config = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |message: String| ConfigError::Line {
                line: i + 1,
                message,
            };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err("expected key=value".into()))?;
            config
                .set(key.trim(), value.trim())
                .map_err(err)?;
        }
        config.validate()?;
        Ok(config)
    }

    /// Sets one field from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        fn num<T: FromStr>(key: &str, value: &str) -> Result<T, String> {
            value
                .parse()
                .map_err(|_| format!("`{key}` expects a number, got `{value}`"))
        }
        fn flag(key: &str, value: &str) -> Result<bool, String> {
            match value {
                "true" => Ok(true),
                "false" => Ok(false),
                _ => Err(format!("`{key}` expects true or false, got `{value}`")),
            }
        }
        match key {
            "iterations" => self.iterations = num(key, value)?,
            "attempts" => self.attempts = num(key, value)?,
            "patience" => self.patience = num(key, value)?,
            "delta_min" => self.delta_min = num(key, value)?,
            "routing" => self.routing = value.parse()?,
            "disable_contrastive" => self.ablations.disable_contrastive = flag(key, value)?,
            "disable_failure_analysis" => {
                self.ablations.disable_failure_analysis = flag(key, value)?
            }
            "flat_injection" => self.ablations.flat_injection = flag(key, value)?,
            "answer_only_extraction" => {
                self.ablations.answer_only_extraction = flag(key, value)?
            }
            "strict_success_pairs" => self.strict_success_pairs = flag(key, value)?,
            "failure_group_sample" => self.failure_group_sample = num(key, value)?,
            "merge_input_sample" => self.merge_input_sample = num(key, value)?,
            "use_validation" => self.use_validation = flag(key, value)?,
            "workers" => self.workers = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "train_n" => self.train_n = num(key, value)?,
            "val_n" => self.val_n = num(key, value)?,
            "model" => self.model = value.to_string(),
            "base_url" => self.base_url = value.to_string(),
            "max_output_task_solver" => self.limits.task_solver = num(key, value)?,
            "max_output_rule_extractor" => self.limits.rule_extractor = num(key, value)?,
            "max_output_tree_merger" => self.limits.tree_merger = num(key, value)?,
            "max_output_router" => self.limits.router = num(key, value)?,
            "max_output_failure_analyst" => self.limits.failure_analyst = num(key, value)?,
            other => return Err(format!("unknown key `{other}`")),
        }
        Ok(())
    }

    /// Canonical text, every key in a fixed order.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let a = &self.ablations;
        let l = &self.limits;
        let pairs: Vec<(&str, String)> = vec![
            ("iterations", self.iterations.to_string()),
            ("attempts", self.attempts.to_string()),
            ("patience", self.patience.to_string()),
            ("delta_min", self.delta_min.to_string()),
            ("routing", self.routing.as_str().to_string()),
            ("disable_contrastive", a.disable_contrastive.to_string()),
            ("disable_failure_analysis", a.disable_failure_analysis.to_string()),
            ("flat_injection", a.flat_injection.to_string()),
            ("answer_only_extraction", a.answer_only_extraction.to_string()),
            ("strict_success_pairs", self.strict_success_pairs.to_string()),
            ("failure_group_sample", self.failure_group_sample.to_string()),
            ("merge_input_sample", self.merge_input_sample.to_string()),
            ("use_validation", self.use_validation.to_string()),
            ("workers", self.workers.to_string()),
            ("seed", self.seed.to_string()),
            ("train_n", self.train_n.to_string()),
            ("val_n", self.val_n.to_string()),
            ("model", self.model.clone()),
            ("base_url", self.base_url.clone()),
            ("max_output_task_solver", l.task_solver.to_string()),
            ("max_output_rule_extractor", l.rule_extractor.to_string()),
            ("max_output_tree_merger", l.tree_merger.to_string()),
            ("max_output_router", l.router.to_string()),
            ("max_output_failure_analyst", l.failure_analyst.to_string()),
        ];
        for (k, v) in pairs {
            let _ = writeln!(out, "{k}={v}");
        }
        out
    }
}
