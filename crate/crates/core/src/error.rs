use thiserror::Error;

use crate::gateway::Role;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum ProviderError {
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("provider rejected request (HTTP {status}): {message}")]
    Rejected { status: u16, message: String },
    #[error("scripted provider exhausted")]
    ScriptExhausted,
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum GatewayError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("replay miss for {role} request {fingerprint}")]
    ReplayMiss { fingerprint: String, role: Role },
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error("no provider configured for a non-replay cassette")]
    NoProvider,
    #[error("provider returned an empty completion")]
    EmptyResponse,
    #[error("scripted provider needs at least one response")]
    EmptyScript,
    #[error("corrupt cassette at line {line}: {message}")]
    CorruptCassette { line: usize, message: String },
    #[error("cassette io: {0}")]
    Io(String),
    #[error("missing API key: set {0}")]
    MissingApiKey(&'static str),
}

impl GatewayError {
    /// Errors that retrying or degrading cannot fix.
    pub fn is_configuration(&self) -> bool {
        matches!(
            self,
            GatewayError::ReplayMiss { .. }
                | GatewayError::NoProvider
                | GatewayError::MissingApiKey(_)
                | GatewayError::InvalidRequest(_)
                | GatewayError::Provider(ProviderError::Rejected {
                    status: 401 | 403,
                    ..
                })
        )
    }
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum MetricError {
    #[error("label `{0}` is not in the label universe")]
    UnknownLabel(String),
    #[error("{predictions} predictions but {golds} gold label sets")]
    LengthMismatch { predictions: usize, golds: usize },
    #[error("option ordinal {ordinal} out of range for {count} options")]
    OptionOutOfRange { ordinal: usize, count: usize },
}

/// One failed structural check on a rule tree.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    /// Location such as `always`, `branch[1]` or `branch[0]/branch[2]`.
    pub path: String,
    pub message: String,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum TreeError {
    #[error("tree parse error at {line}:{column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("invalid tree: {}", join_violations(.0))]
    Invalid(Vec<Violation>),
}

fn join_violations(violations: &[Violation]) -> String {
    violations
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join("; ")
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum RuleError {
    #[error("no template rule in response after repair: {0}")]
    Unparseable(String),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Schema { line: usize, message: String },
    #[error("duplicate id `{id}` on lines {first_line} and {second_line}")]
    DuplicateId {
        id: String,
        first_line: usize,
        second_line: usize,
    },
    #[error("need {needed} examples for the requested splits, have {available}")]
    Insufficient { needed: usize, available: usize },
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum ConfigError {
    #[error("config line {line}: {message}")]
    Line { line: usize, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error("training set is empty")]
    EmptyTrain,
    #[error("dataset is empty")]
    EmptyDataset,
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error("cannot resume from {path}: {message}")]
    Resume { path: String, message: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

impl RunError {
    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        RunError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}
