//! Chat-completion gateway with cassette record/replay.
//!
//! Every LLM interaction in the engine goes through [`Gateway::complete`].
//! The gateway owns a [`Cassette`]; in replay mode responses come from the
//! cassette by request fingerprint and the provider is never touched, which
//! is what makes whole optimization runs reproducible offline.
//!
//! Cassette files are line-delimited JSON, one [`CassetteEntry`] per line:
//!
//! ```text
//! {"fingerprint":"<sha256 hex>","request":{...},"response":{...}}
//! ```
//!
//! Repeated identical requests are stored as separate entries and replayed
//! in file order; the per-fingerprint cursor is part of persisted run state.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::fmt;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{GatewayError, ProviderError};
use crate::io::write_atomic;

/// Environment variable holding the provider API key.
pub const API_KEY_ENV: &str = "CONTRAPROMPT_API_KEY";

/// What the call is for. Determines the default sampling temperature.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    TaskSolver,
    RuleExtractor,
    TreeMerger,
    Router,
    FailureAnalyst,
}

impl Role {
    pub const ALL: [Role; 5] = [
        Role::TaskSolver,
        Role::RuleExtractor,
        Role::TreeMerger,
        Role::Router,
        Role::FailureAnalyst,
    ];

    /// Solving samples at 1.0 for diverse retries; meta roles use 0.7.
    pub fn default_temperature(self) -> f64 {
        match self {
            Role::TaskSolver => 1.0,
            _ => 0.7,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Role::TaskSolver => "task_solver",
            Role::RuleExtractor => "rule_extractor",
            Role::TreeMerger => "tree_merger",
            Role::Router => "router",
            Role::FailureAnalyst => "failure_analyst",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A single system + user turn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model_id: String,
    pub system_prompt: String,
    pub user_content: String,
    pub temperature: f64,
    pub max_output: u32,
    pub role: Role,
}

impl ChatRequest {
    pub fn new(
        role: Role,
        model_id: impl Into<String>,
        system_prompt: impl Into<String>,
        user_content: impl Into<String>,
    ) -> Self {
        Self {
            model_id: model_id.into(),
            system_prompt: system_prompt.into(),
            user_content: user_content.into(),
            temperature: role.default_temperature(),
            max_output: 1024,
            role,
        }
    }

    pub fn with_temperature(mut self, temperature: f64) -> Self {
        self.temperature = temperature;
        self
    }

    pub fn with_max_output(mut self, max_output: u32) -> Self {
        self.max_output = max_output;
        self
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if !self.temperature.is_finite() || !(0.0..=2.0).contains(&self.temperature) {
            return Err(GatewayError::InvalidRequest(format!(
                "temperature {} outside [0, 2]",
                self.temperature
            )));
        }
        Ok(())
    }

    /// SHA-256 over length-prefixed (model_id, system_prompt, user_content,
    /// temperature bits). `max_output` and `role` are deliberately excluded.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        for field in [
            self.model_id.as_bytes(),
            self.system_prompt.as_bytes(),
            self.user_content.as_bytes(),
        ] {
            hasher.update((field.len() as u64).to_be_bytes());
            hasher.update(field);
        }
        hasher.update(self.temperature.to_bits().to_be_bytes());
        hex::encode(hasher.finalize())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub input_tokens: u64,
    pub output_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub text: String,
    pub usage: Usage,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub provider_meta: BTreeMap<String, String>,
}

impl ChatResponse {
    pub fn text(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            usage: Usage::default(),
            provider_meta: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CassetteMode {
    Record,
    Replay,
    Passthrough,
}

impl std::str::FromStr for CassetteMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "record" => Ok(Self::Record),
            "replay" => Ok(Self::Replay),
            "passthrough" => Ok(Self::Passthrough),
            other => Err(format!("unknown cassette mode `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CassetteEntry {
    pub fingerprint: String,
    pub request: ChatRequest,
    pub response: ChatResponse,
}

#[derive(Debug, Default)]
struct CassetteState {
    entries: Vec<CassetteEntry>,
    by_fingerprint: HashMap<String, Vec<usize>>,
    cursor: BTreeMap<String, usize>,
}

impl CassetteState {
    fn push(&mut self, entry: CassetteEntry) {
        self.by_fingerprint
            .entry(entry.fingerprint.clone())
            .or_default()
            .push(self.entries.len());
        self.entries.push(entry);
    }
}

/// Ordered request/response log. Mutations are serialized internally.
#[derive(Debug)]
pub struct Cassette {
    mode: CassetteMode,
    state: Mutex<CassetteState>,
}

impl Cassette {
    pub fn new(mode: CassetteMode) -> Self {
        Self {
            mode,
            state: Mutex::new(CassetteState::default()),
        }
    }

    pub fn from_entries(mode: CassetteMode, entries: Vec<CassetteEntry>) -> Self {
        let cassette = Self::new(mode);
        {
            let mut state = cassette.state.lock().unwrap();
            for entry in entries {
                state.push(entry);
            }
        }
        cassette
    }

    pub fn parse(text: &str, mode: CassetteMode) -> Result<Self, GatewayError> {
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let entry: CassetteEntry =
                serde_json::from_str(line).map_err(|e| GatewayError::CorruptCassette {
                    line: i + 1,
                    message: e.to_string(),
                })?;
            entries.push(entry);
        }
        Ok(Self::from_entries(mode, entries))
    }

    pub fn load(path: &Path, mode: CassetteMode) -> Result<Self, GatewayError> {
        if !path.exists() && mode != CassetteMode::Replay {
            return Ok(Self::new(mode));
        }
        let text = std::fs::read_to_string(path)
            .map_err(|e| GatewayError::Io(format!("{}: {e}", path.display())))?;
        Self::parse(&text, mode)
    }

    pub fn to_text(&self) -> String {
        let state = self.state.lock().unwrap();
        let mut out = String::new();
        for entry in &state.entries {
            out.push_str(&serde_json::to_string(entry).expect("cassette entry serializes"));
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        write_atomic(path, self.to_text().as_bytes())
    }

    pub fn mode(&self) -> CassetteMode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.state.lock().unwrap().entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn entries(&self) -> Vec<CassetteEntry> {
        self.state.lock().unwrap().entries.clone()
    }

    /// Per-fingerprint count of replayed entries.
    pub fn cursor(&self) -> BTreeMap<String, usize> {
        self.state.lock().unwrap().cursor.clone()
    }

    pub fn set_cursor(&self, cursor: BTreeMap<String, usize>) {
        self.state.lock().unwrap().cursor = cursor;
    }

    /// Next unreplayed response for this request's fingerprint.
    pub fn lookup(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        let fingerprint = request.fingerprint();
        let mut state = self.state.lock().unwrap();
        let used = state.cursor.get(&fingerprint).copied().unwrap_or(0);
        let index = state
            .by_fingerprint
            .get(&fingerprint)
            .and_then(|ix| ix.get(used))
            .copied()
            .ok_or_else(|| GatewayError::ReplayMiss {
                fingerprint: fingerprint.clone(),
                role: request.role,
            })?;
        state.cursor.insert(fingerprint, used + 1);
        Ok(state.entries[index].response.clone())
    }

    pub fn record(&self, request: &ChatRequest, response: &ChatResponse) {
        let entry = CassetteEntry {
            fingerprint: request.fingerprint(),
            request: request.clone(),
            response: response.clone(),
        };
        self.state.lock().unwrap().push(entry);
    }
}

/// Transport to a chat-completion service.
pub trait ChatProvider: Send + Sync {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, ProviderError>;
}

/// Retry delays for transport failures.
#[derive(Debug, Clone)]
pub struct Backoff {
    pub delays: Vec<Duration>,
    pub jitter: bool,
}

impl Default for Backoff {
    fn default() -> Self {
        Self {
            delays: vec![
                Duration::from_secs(1),
                Duration::from_secs(2),
                Duration::from_secs(4),
            ],
            jitter: true,
        }
    }
}

impl Backoff {
    /// Three retries with no waiting; used under test.
    pub fn immediate() -> Self {
        Self {
            delays: vec![Duration::ZERO; 3],
            jitter: false,
        }
    }

    fn delay(&self, retry: usize) -> Duration {
        let base = self.delays[retry];
        if self.jitter && !base.is_zero() {
            base.mul_f64(rand::thread_rng().gen_range(0.5..1.5))
        } else {
            base
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct UsageTotals {
    pub calls: u64,
    pub input_tokens: u64,
    pub output_tokens: u64,
}

/// Per-role output token limits.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OutputLimits {
    pub task_solver: u32,
    pub rule_extractor: u32,
    pub tree_merger: u32,
    pub router: u32,
    pub failure_analyst: u32,
}

impl Default for OutputLimits {
    fn default() -> Self {
        Self {
            task_solver: 2048,
            rule_extractor: 1024,
            tree_merger: 4096,
            router: 256,
            failure_analyst: 64,
        }
    }
}

impl OutputLimits {
    pub fn for_role(&self, role: Role) -> u32 {
        match role {
            Role::TaskSolver => self.task_solver,
            Role::RuleExtractor => self.rule_extractor,
            Role::TreeMerger => self.tree_merger,
            Role::Router => self.router,
            Role::FailureAnalyst => self.failure_analyst,
        }
    }
}

/// The single entry point for LLM calls. Safe to share across workers.
pub struct Gateway {
    provider: Option<Arc<dyn ChatProvider>>,
    cassette: Arc<Cassette>,
    backoff: Backoff,
    sleep: fn(Duration),
    model_id: String,
    limits: OutputLimits,
    calls: AtomicU64,
    input_tokens: AtomicU64,
    output_tokens: AtomicU64,
    history: Mutex<Vec<(ChatRequest, String)>>,
    fatal: Mutex<Option<GatewayError>>,
}

impl fmt::Debug for Gateway {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Gateway")
            .field("mode", &self.cassette.mode())
            .field("model_id", &self.model_id)
            .field("has_provider", &self.provider.is_some())
            .finish()
    }
}

impl Gateway {
    pub fn new(provider: Arc<dyn ChatProvider>, cassette: Arc<Cassette>) -> Self {
        Self::build(Some(provider), cassette)
    }

    /// Replay-only gateway with no transport at all.
    pub fn replay(cassette: Arc<Cassette>) -> Self {
        Self::build(None, cassette)
    }

    /// Passthrough gateway around a provider, nothing recorded.
    pub fn direct(provider: Arc<dyn ChatProvider>) -> Self {
        Self::build(
            Some(provider),
            Arc::new(Cassette::new(CassetteMode::Passthrough)),
        )
    }

    fn build(provider: Option<Arc<dyn ChatProvider>>, cassette: Arc<Cassette>) -> Self {
        Self {
            provider,
            cassette,
            backoff: Backoff::default(),
            sleep: std::thread::sleep,
            model_id: "default".to_string(),
            limits: OutputLimits::default(),
            calls: AtomicU64::new(0),
            input_tokens: AtomicU64::new(0),
            output_tokens: AtomicU64::new(0),
            history: Mutex::new(Vec::new()),
            fatal: Mutex::new(None),
        }
    }

    pub fn with_backoff(mut self, backoff: Backoff) -> Self {
        self.backoff = backoff;
        self
    }

    pub fn with_sleep(mut self, sleep: fn(Duration)) -> Self {
        self.sleep = sleep;
        self
    }

    pub fn with_model(mut self, model_id: impl Into<String>) -> Self {
        self.model_id = model_id.into();
        self
    }

    pub fn with_limits(mut self, limits: OutputLimits) -> Self {
        self.limits = limits;
        self
    }

    pub fn cassette(&self) -> &Arc<Cassette> {
        &self.cassette
    }

    pub fn model_id(&self) -> &str {
        &self.model_id
    }

    /// Builds a request for `role` with the gateway's model and limits.
    pub fn request(
        &self,
        role: Role,
        system_prompt: impl Into<String>,
        user_content: impl Into<String>,
    ) -> ChatRequest {
        ChatRequest::new(role, self.model_id.clone(), system_prompt, user_content)
            .with_max_output(self.limits.for_role(role))
    }

    pub fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        let result = self.complete_inner(request);
        if let Err(e) = &result {
            if e.is_configuration() {
                self.fatal.lock().unwrap().get_or_insert_with(|| e.clone());
            }
        }
        result
    }

    /// First configuration error seen since the last call, if any. Callers
    /// that degrade gracefully on gateway errors use this to tell a broken
    /// setup (replay miss, no provider) from a flaky provider.
    pub fn take_fatal(&self) -> Option<GatewayError> {
        self.fatal.lock().unwrap().take()
    }

    fn complete_inner(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        request.validate()?;
        let response = match self.cassette.mode() {
            CassetteMode::Replay => self.cassette.lookup(request)?,
            CassetteMode::Record => {
                let response = self.call_provider(request)?;
                self.cassette.record(request, &response);
                response
            }
            CassetteMode::Passthrough => self.call_provider(request)?,
        };
        self.calls.fetch_add(1, Ordering::Relaxed);
        self.input_tokens
            .fetch_add(response.usage.input_tokens, Ordering::Relaxed);
        self.output_tokens
            .fetch_add(response.usage.output_tokens, Ordering::Relaxed);
        self.history
            .lock()
            .unwrap()
            .push((request.clone(), response.text.clone()));
        Ok(response)
    }

    fn call_provider(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        let provider = self.provider.as_ref().ok_or(GatewayError::NoProvider)?;
        let mut retry = 0;
        loop {
            match provider.complete(request) {
                Ok(response) if response.text.trim().is_empty() => {
                    return Err(GatewayError::EmptyResponse)
                }
                Ok(response) => return Ok(response),
                Err(ProviderError::Transport(message)) if retry < self.backoff.delays.len() => {
                    log::warn!("transport failure ({message}); retry {}", retry + 1);
                    (self.sleep)(self.backoff.delay(retry));
                    retry += 1;
                }
                Err(e) => return Err(GatewayError::Provider(e)),
            }
        }
    }

    pub fn usage(&self) -> UsageTotals {
        UsageTotals {
            calls: self.calls.load(Ordering::Relaxed),
            input_tokens: self.input_tokens.load(Ordering::Relaxed),
            output_tokens: self.output_tokens.load(Ordering::Relaxed),
        }
    }

    /// Every completed call in completion order.
    pub fn history(&self) -> Vec<(ChatRequest, String)> {
        self.history.lock().unwrap().clone()
    }
}

/// Returns a fixed list of responses in order.
pub struct ScriptedProvider {
    script: Mutex<VecDeque<String>>,
    requests: Mutex<Vec<ChatRequest>>,
}

impl ScriptedProvider {
    pub fn new<I, S>(script: I) -> Result<Self, GatewayError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let script: VecDeque<String> = script.into_iter().map(Into::into).collect();
        if script.is_empty() {
            return Err(GatewayError::EmptyScript);
        }
        Ok(Self {
            script: Mutex::new(script),
            requests: Mutex::new(Vec::new()),
        })
    }

    pub fn requests(&self) -> Vec<ChatRequest> {
        self.requests.lock().unwrap().clone()
    }

    pub fn remaining(&self) -> usize {
        self.script.lock().unwrap().len()
    }
}

impl ChatProvider for ScriptedProvider {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, ProviderError> {
        self.requests.lock().unwrap().push(request.clone());
        let text = self
            .script
            .lock()
            .unwrap()
            .pop_front()
            .ok_or(ProviderError::ScriptExhausted)?;
        Ok(ChatResponse {
            usage: Usage {
                input_tokens: approx_tokens(&request.system_prompt)
                    + approx_tokens(&request.user_content),
                output_tokens: approx_tokens(&text),
            },
            text,
            provider_meta: BTreeMap::new(),
        })
    }
}

/// Provider backed by a closure.
pub struct FnProvider<F>(pub F);

impl<F> ChatProvider for FnProvider<F>
where
    F: Fn(&ChatRequest) -> Result<String, ProviderError> + Send + Sync,
{
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, ProviderError> {
        let text = (self.0)(request)?;
        Ok(ChatResponse {
            usage: Usage {
                input_tokens: approx_tokens(&request.system_prompt)
                    + approx_tokens(&request.user_content),
                output_tokens: approx_tokens(&text),
            },
            text,
            provider_meta: BTreeMap::new(),
        })
    }
}

/// Wraps a provider and counts transport calls.
pub struct CountingProvider {
    inner: Arc<dyn ChatProvider>,
    count: AtomicU64,
}

impl CountingProvider {
    pub fn new(inner: Arc<dyn ChatProvider>) -> Self {
        Self {
            inner,
            count: AtomicU64::new(0),
        }
    }

    pub fn count(&self) -> u64 {
        self.count.load(Ordering::SeqCst)
    }
}

impl ChatProvider for CountingProvider {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, ProviderError> {
        self.count.fetch_add(1, Ordering::SeqCst);
        self.inner.complete(request)
    }
}

fn approx_tokens(text: &str) -> u64 {
    text.split_whitespace().count() as u64
}

/// OpenAI-compatible `/chat/completions` endpoint.
pub struct OpenAiCompatProvider {
    base_url: String,
    api_key: String,
    agent: ureq::Agent,
}

impl OpenAiCompatProvider {
    pub fn new(base_url: impl Into<String>, api_key: impl Into<String>) -> Self {
        let agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs(300)))
            .build()
            .into();
        Self {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            api_key: api_key.into(),
            agent,
        }
    }

    /// Reads the key from [`API_KEY_ENV`].
    pub fn from_env(base_url: impl Into<String>) -> Result<Self, GatewayError> {
        match std::env::var(API_KEY_ENV) {
            Ok(key) if !key.trim().is_empty() => Ok(Self::new(base_url, key)),
            _ => Err(GatewayError::MissingApiKey(API_KEY_ENV)),
        }
    }
}

impl ChatProvider for OpenAiCompatProvider {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, ProviderError> {
        let body = serde_json::json!({
            "model": request.model_id,
            "temperature": request.temperature,
            "max_tokens": request.max_output,
            "messages": [
                {"role": "system", "content": request.system_prompt},
                {"role": "user", "content": request.user_content},
            ],
        });
        let mut response = self
            .agent
            .post(format!("{}/chat/completions", self.base_url))
            .header("Authorization", format!("Bearer {}", self.api_key))
            .send_json(&body)
            .map_err(|e| ProviderError::Transport(e.to_string()))?;
        let status = response.status().as_u16();
        let value: serde_json::Value = response
            .body_mut()
            .read_json()
            .map_err(|e| ProviderError::Transport(e.to_string()))?;
        if status == 429 || status >= 500 {
            return Err(ProviderError::Transport(format!("HTTP {status}: {value}")));
        }
        if status >= 400 {
            let message = value["error"]["message"]
                .as_str()
                .map(str::to_string)
                .unwrap_or_else(|| value.to_string());
            return Err(ProviderError::Rejected { status, message });
        }
        let text = value["choices"][0]["message"]["content"]
            .as_str()
            .unwrap_or_default()
            .to_string();
        let mut provider_meta = BTreeMap::new();
        if let Some(reason) = value["choices"][0]["finish_reason"].as_str() {
            provider_meta.insert("finish_reason".to_string(), reason.to_string());
        }
        Ok(ChatResponse {
            text,
            usage: Usage {
                input_tokens: value["usage"]["prompt_tokens"].as_u64().unwrap_or(0),
                output_tokens: value["usage"]["completion_tokens"].as_u64().unwrap_or(0),
            },
            provider_meta,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn req(user: &str) -> ChatRequest {
        ChatRequest::new(Role::TaskSolver, "m", "sys", user)
    }

    fn record_gateway(script: &[&str]) -> (Gateway, Arc<ScriptedProvider>) {
        let provider = Arc::new(ScriptedProvider::new(script.iter().copied()).unwrap());
        let gateway = Gateway::new(
            provider.clone(),
            Arc::new(Cassette::new(CassetteMode::Record)),
        )
        .with_backoff(Backoff::immediate());
        (gateway, provider)
    }

    #[test]
    fn role_default_temperatures() {
        assert_eq!(Role::TaskSolver.default_temperature(), 1.0);
        for role in &Role::ALL[1..] {
            assert_eq!(role.default_temperature(), 0.7);
        }
    }

    #[test]
    fn invalid_temperature_rejected() {
        let (gateway, _) = record_gateway(&["x"]);
        for t in [f64::NAN, -0.1, 2.5, f64::INFINITY] {
            let err = gateway.complete(&req("q").with_temperature(t)).unwrap_err();
            assert!(matches!(err, GatewayError::InvalidRequest(_)));
        }
    }

    #[test]
    fn fingerprint_ignores_max_output_and_role() {
        let a = req("q");
        let mut b = a.clone().with_max_output(7);
        b.role = Role::Router;
        assert_eq!(a.fingerprint(), b.fingerprint());
        assert_ne!(a.fingerprint(), req("q2").fingerprint());
        assert_ne!(
            a.fingerprint(),
            a.clone().with_temperature(0.7).fingerprint()
        );
    }

    #[test]
    fn fingerprint_fields_do_not_bleed() {
        let a = ChatRequest::new(Role::TaskSolver, "m", "ab", "c");
        let b = ChatRequest::new(Role::TaskSolver, "m", "a", "bc");
        assert_ne!(a.fingerprint(), b.fingerprint());
    }

    #[test]
    fn record_appends_and_replay_returns_in_order() {
        let (gateway, _) = record_gateway(&["A", "B"]);
        assert_eq!(gateway.complete(&req("q")).unwrap().text, "A");
        assert_eq!(gateway.cassette().len(), 1);
        assert_eq!(gateway.complete(&req("q")).unwrap().text, "B");
        assert_eq!(gateway.cassette().len(), 2);

        let replay = Gateway::replay(Arc::new(Cassette::from_entries(
            CassetteMode::Replay,
            gateway.cassette().entries(),
        )));
        assert_eq!(replay.complete(&req("q")).unwrap().text, "A");
        assert_eq!(replay.complete(&req("q")).unwrap().text, "B");
        assert!(matches!(
            replay.complete(&req("q")),
            Err(GatewayError::ReplayMiss { .. })
        ));
    }

    #[test]
    fn replay_miss_for_unknown_fingerprint() {
        let replay = Gateway::replay(Arc::new(Cassette::new(CassetteMode::Replay)));
        assert!(matches!(
            replay.complete(&req("nope")),
            Err(GatewayError::ReplayMiss { .. })
        ));
    }

    #[test]
    fn replay_never_calls_provider() {
        let (recorder, _) = record_gateway(&["A"]);
        recorder.complete(&req("q")).unwrap();
        let counting = Arc::new(CountingProvider::new(Arc::new(
            ScriptedProvider::new(["unused"]).unwrap(),
        )));
        let cassette = Arc::new(Cassette::from_entries(
            CassetteMode::Replay,
            recorder.cassette().entries(),
        ));
        let gateway = Gateway::new(counting.clone(), cassette);
        gateway.complete(&req("q")).unwrap();
        let _ = gateway.complete(&req("other"));
        assert_eq!(counting.count(), 0);
    }

    #[test]
    fn scripted_provider_exhaustion() {
        assert!(matches!(
            ScriptedProvider::new(Vec::<String>::new()),
            Err(GatewayError::EmptyScript)
        ));
        let gateway = Gateway::direct(Arc::new(ScriptedProvider::new(["A"]).unwrap()));
        assert_eq!(gateway.complete(&req("1")).unwrap().text, "A");
        assert!(matches!(
            gateway.complete(&req("2")),
            Err(GatewayError::Provider(ProviderError::ScriptExhausted))
        ));
    }

    #[test]
    fn transport_failures_retry_three_times() {
        use std::sync::atomic::AtomicUsize;
        let attempts = Arc::new(AtomicUsize::new(0));
        let seen = attempts.clone();
        let provider = FnProvider(move |_: &ChatRequest| {
            if seen.fetch_add(1, Ordering::SeqCst) < 3 {
                Err(ProviderError::Transport("reset".into()))
            } else {
                Ok("ok".to_string())
            }
        });
        let gateway = Gateway::direct(Arc::new(provider)).with_backoff(Backoff::immediate());
        assert_eq!(gateway.complete(&req("q")).unwrap().text, "ok");
        assert_eq!(attempts.load(Ordering::SeqCst), 4);

        let always_down = FnProvider(|_: &ChatRequest| -> Result<String, ProviderError> {
            Err(ProviderError::Transport("down".into()))
        });
        let gateway = Gateway::direct(Arc::new(always_down)).with_backoff(Backoff::immediate());
        assert!(matches!(
            gateway.complete(&req("q")),
            Err(GatewayError::Provider(ProviderError::Transport(_)))
        ));
    }

    #[test]
    fn rejection_is_not_retried() {
        use std::sync::atomic::AtomicUsize;
        let calls = Arc::new(AtomicUsize::new(0));
        let seen = calls.clone();
        let provider = FnProvider(move |_: &ChatRequest| -> Result<String, ProviderError> {
            seen.fetch_add(1, Ordering::SeqCst);
            Err(ProviderError::Rejected {
                status: 400,
                message: "bad model".into(),
            })
        });
        let gateway = Gateway::direct(Arc::new(provider)).with_backoff(Backoff::immediate());
        let err = gateway.complete(&req("q")).unwrap_err();
        assert!(err.to_string().contains("bad model"));
        assert_eq!(calls.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn backoff_schedule_is_one_two_four() {
        let backoff = Backoff {
            jitter: false,
            ..Backoff::default()
        };
        let secs: Vec<u64> = (0..3).map(|i| backoff.delay(i).as_secs()).collect();
        assert_eq!(secs, [1, 2, 4]);
    }

    #[test]
    fn cassette_text_round_trip_is_bit_exact() {
        let (gateway, _) = record_gateway(&["line one\nline \"two\"", "B"]);
        gateway.complete(&req("q")).unwrap();
        gateway
            .complete(&ChatRequest::new(Role::TreeMerger, "m", "s", "ü<tag>"))
            .unwrap();
        let text = gateway.cassette().to_text();
        let reparsed = Cassette::parse(&text, CassetteMode::Replay).unwrap();
        assert_eq!(reparsed.to_text(), text);
    }

    #[test]
    fn corrupt_cassette_reports_line() {
        let err = Cassette::parse("\n{bad", CassetteMode::Replay).unwrap_err();
        assert!(matches!(err, GatewayError::CorruptCassette { line: 2, .. }));
    }

    #[test]
    fn empty_completion_is_an_error() {
        let gateway = Gateway::direct(Arc::new(ScriptedProvider::new(["  "]).unwrap()));
        assert!(matches!(
            gateway.complete(&req("q")),
            Err(GatewayError::EmptyResponse)
        ));
    }
}
