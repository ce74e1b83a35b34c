//! Prompt optimization by contrasting a model's own failed and successful
//! reasoning traces.
//!
//! The pipeline: [`retry`] solves examples with feedback-driven retries,
//! [`mining`] pairs the worst and best attempts, [`rules`] turns pairs and
//! all-fail groups into rules, [`tree`] organizes rules into an
//! input-aware tree, and [`optimizer`] runs the whole loop with patience.
//! Every model call goes through [`gateway::Gateway`], which can record and
//! replay cassettes.

pub mod error;
pub mod gateway;
pub mod harness;
pub mod io;
pub mod metrics;
pub mod mining;
pub mod optimizer;
pub mod pool;
pub mod prompts;
pub mod retry;
pub mod rules;
pub mod tree;

pub use error::{GatewayError, ProviderError, RunError};
pub use gateway::{Cassette, CassetteMode, ChatProvider, ChatRequest, ChatResponse, Gateway, Role};
pub use metrics::{GoldTarget, MetricKind, Score};
pub use mining::{mine, ContrastivePair, MineOptions, MineOutput};
pub use optimizer::{Module, OptimizationConfig, Optimizer, RunOutcome};
pub use retry::{compute_retry_success_rate, solve_with_retries, Attempt, AttemptSet, ErrorType, TaskExample};
pub use rules::Rule;
pub use tree::{RoutingMode, RuleTree};
