//! Provider-neutral chat-completion gateway.
//!
//! [`ChatBackend`] is the seam: [`HttpBackend`] talks to an
//! OpenAI-compatible `/chat/completions` endpoint, [`ScriptedBackend`] answers
//! from registered scripts for offline runs. [`Gateway`] adds the shared rate
//! limiter in front of either.

use std::collections::VecDeque;
use std::fmt;
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::domain::{EscalationRisk, Label, LabelSchema};

pub const DEFAULT_EVAL_TEMPERATURE: f64 = 0.0;
pub const DEFAULT_INTERACTIVE_TEMPERATURE: f64 = 0.7;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GatewayError {
    #[error("transport failure (status {status:?}): {message}")]
    Transport { status: Option<u16>, message: String },
    #[error("local rate limit of {0} requests per window reached")]
    RateLimited(u32),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("missing API key: environment variable {0} is not set")]
    MissingApiKey(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
#[error("malformed verdict: {0}")]
pub struct MalformedVerdict(pub String);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn new(role: Role, content: impl Into<String>) -> Self {
        Self {
            role,
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub max_tokens: u32,
    pub request_tag: String,
}

impl ChatRequest {
    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.messages.is_empty() {
            return Err(GatewayError::InvalidRequest("no messages".into()));
        }
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(GatewayError::InvalidRequest("temperature must be >= 0".into()));
        }
        if self.max_tokens == 0 {
            return Err(GatewayError::InvalidRequest("max_tokens must be positive".into()));
        }
        Ok(())
    }

    /// The prompt as a single string, as seen by script matchers and digests.
    pub fn rendered_prompt(&self) -> String {
        let mut out = String::new();
        for m in &self.messages {
            out.push_str(&format!("[{}]\n{}\n", m.role, m.content));
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FinishReason {
    Stop,
    Length,
    Error,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u32,
    pub completion_tokens: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub content: String,
    pub finish_reason: FinishReason,
    pub usage: Usage,
    pub latency: Duration,
    /// Request parameters the provider refused and that were dropped on resend.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub dropped_params: Vec<String>,
}

pub trait ChatBackend: Send + Sync {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError>;
}

impl<T: ChatBackend + ?Sized> ChatBackend for Arc<T> {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        (**self).complete(request)
    }
}

// ---------------------------------------------------------------------------
// Scripted backend
// ---------------------------------------------------------------------------

pub const UNSCRIPTED: &str = "UNSCRIPTED";

type Responder = Arc<dyn Fn(&str) -> Option<String> + Send + Sync>;

/// Deterministic backend: the first registered script whose matcher accepts
/// the rendered prompt supplies the response.
#[derive(Clone, Default)]
pub struct ScriptedBackend {
    scripts: Vec<Responder>,
}

impl fmt::Debug for ScriptedBackend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ScriptedBackend")
            .field("scripts", &self.scripts.len())
            .finish()
    }
}

impl ScriptedBackend {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register_script<F>(&mut self, matcher: F, response: impl Into<String>)
    where
        F: Fn(&str) -> bool + Send + Sync + 'static,
    {
        let response = response.into();
        self.scripts
            .push(Arc::new(move |p: &str| matcher(p).then(|| response.clone())));
    }

    pub fn register_contains(&mut self, needle: impl Into<String>, response: impl Into<String>) {
        let needle = needle.into();
        self.register_script(move |p| p.contains(&needle), response);
    }

    /// Registers a responder that computes its answer from the prompt;
    /// returning `None` passes to the next script.
    pub fn register_fn<F>(&mut self, responder: F)
    where
        F: Fn(&str) -> Option<String> + Send + Sync + 'static,
    {
        self.scripts.push(Arc::new(responder));
    }

    /// Loads scripts from the JSON script-file format
    /// `{"scripts": [{"contains": "...", "response": "..."}]}`.
    pub fn from_script_file(json: &str) -> Result<Self, serde_json::Error> {
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct File {
            scripts: Vec<Entry>,
        }
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct Entry {
            contains: String,
            response: String,
        }
        let file: File = serde_json::from_str(json)?;
        let mut backend = Self::new();
        for e in file.scripts {
            backend.register_contains(e.contains, e.response);
        }
        Ok(backend)
    }

    pub fn len(&self) -> usize {
        self.scripts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scripts.is_empty()
    }
}

fn estimate_tokens(s: &str) -> u32 {
    s.split_whitespace().count() as u32
}

impl ChatBackend for ScriptedBackend {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        request.validate()?;
        let prompt = request.rendered_prompt();
        let hit = self.scripts.iter().find_map(|s| s(&prompt));
        let (content, finish_reason) = match hit {
            Some(c) => (c, FinishReason::Stop),
            None => (UNSCRIPTED.to_string(), FinishReason::Error),
        };
        Ok(ChatResponse {
            usage: Usage {
                prompt_tokens: estimate_tokens(&prompt),
                completion_tokens: estimate_tokens(&content),
            },
            content,
            finish_reason,
            latency: Duration::ZERO,
            dropped_params: Vec::new(),
        })
    }
}

// ---------------------------------------------------------------------------
// HTTP backend
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendConfig {
    pub endpoint_url: String,
    /// Name of the environment variable holding the API key.
    pub api_key_source: String,
    pub max_retries: u32,
    pub backoff_base: Duration,
    pub requests_per_minute: u32,
    pub timeout: Duration,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            endpoint_url: "https://api.openai.com/v1/chat/completions".into(),
            api_key_source: "OPENAI_API_KEY".into(),
            max_retries: 3,
            backoff_base: Duration::from_millis(500),
            requests_per_minute: 60,
            timeout: Duration::from_secs(120),
        }
    }
}

impl BackendConfig {
    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.requests_per_minute == 0 {
            return Err(GatewayError::InvalidRequest(
                "requests_per_minute must be positive".into(),
            ));
        }
        if self.endpoint_url.is_empty() {
            return Err(GatewayError::InvalidRequest("endpoint_url is empty".into()));
        }
        Ok(())
    }
}

/// Client for OpenAI-compatible chat-completions endpoints.
#[derive(Debug)]
pub struct HttpBackend {
    config: BackendConfig,
    agent: ureq::Agent,
    api_key: Option<String>,
}

// Parameters some reasoning-model endpoints refuse.
const DROPPABLE_PARAMS: [&str; 2] = ["temperature", "max_tokens"];

impl HttpBackend {
    /// Reads the API key from the configured environment variable. A missing
    /// variable is allowed for local endpoints that need no key.
    pub fn new(config: BackendConfig) -> Result<Self, GatewayError> {
        config.validate()?;
        let api_key = std::env::var(&config.api_key_source).ok();
        Ok(Self::with_key(config, api_key))
    }

    pub fn with_key(config: BackendConfig, api_key: Option<String>) -> Self {
        let agent = ureq::AgentBuilder::new().timeout(config.timeout).build();
        Self {
            config,
            agent,
            api_key,
        }
    }

    pub fn config(&self) -> &BackendConfig {
        &self.config
    }

    fn body(request: &ChatRequest, dropped: &[String]) -> serde_json::Value {
        let mut body = json!({
            "model": request.model,
            "messages": request.messages,
        });
        if !dropped.iter().any(|p| p == "temperature") {
            body["temperature"] = json!(request.temperature);
        }
        if !dropped.iter().any(|p| p == "max_tokens") {
            body["max_tokens"] = json!(request.max_tokens);
        }
        body
    }

    fn send_once(&self, body: &serde_json::Value) -> Result<serde_json::Value, (Option<u16>, String)> {
        let mut req = self
            .agent
            .post(&self.config.endpoint_url)
            .set("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            req = req.set("Authorization", &format!("Bearer {key}"));
        }
        match req.send_json(body) {
            Ok(resp) => resp
                .into_json::<serde_json::Value>()
                .map_err(|e| (None, format!("invalid JSON response: {e}"))),
            Err(ureq::Error::Status(code, resp)) => {
                Err((Some(code), resp.into_string().unwrap_or_default()))
            }
            Err(ureq::Error::Transport(t)) => Err((None, t.to_string())),
        }
    }

    fn is_transient(status: Option<u16>) -> bool {
        match status {
            None => true,
            Some(s) => s == 408 || s == 429 || s >= 500,
        }
    }

    fn map_response(value: &serde_json::Value, started: Instant, dropped: Vec<String>) -> Result<ChatResponse, GatewayError> {
        let choice = value
            .get("choices")
            .and_then(|c| c.get(0))
            .ok_or_else(|| GatewayError::Transport {
                status: None,
                message: "response has no choices".into(),
            })?;
        let content = choice
            .pointer("/message/content")
            .and_then(|c| c.as_str())
            .unwrap_or_default()
            .to_string();
        let finish_reason = match choice.get("finish_reason").and_then(|f| f.as_str()) {
            Some("length") => FinishReason::Length,
            Some("stop") | None if !content.is_empty() => FinishReason::Stop,
            _ => FinishReason::Error,
        };
        let usage = value
            .get("usage")
            .map(|u| Usage {
                prompt_tokens: u.get("prompt_tokens").and_then(|v| v.as_u64()).unwrap_or(0) as u32,
                completion_tokens: u
                    .get("completion_tokens")
                    .and_then(|v| v.as_u64())
                    .unwrap_or(0) as u32,
            })
            .unwrap_or_default();
        Ok(ChatResponse {
            content,
            finish_reason,
            usage,
            latency: started.elapsed(),
            dropped_params: dropped,
        })
    }
}

impl ChatBackend for HttpBackend {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        request.validate()?;
        let started = Instant::now();
        let mut dropped: Vec<String> = Vec::new();
        let mut retries = 0u32;
        loop {
            let body = Self::body(request, &dropped);
            match self.send_once(&body) {
                Ok(value) => return Self::map_response(&value, started, dropped),
                Err((Some(400), message)) => {
                    // Unsupported sampling parameters are dropped and the
                    // request resent; this does not count as a retry.
                    let newly: Vec<String> = DROPPABLE_PARAMS
                        .iter()
                        .filter(|p| message.contains(*p) && !dropped.iter().any(|d| d == *p))
                        .map(|p| p.to_string())
                        .collect();
                    if newly.is_empty() {
                        return Err(GatewayError::Transport {
                            status: Some(400),
                            message,
                        });
                    }
                    tracing::warn!(params = ?newly, tag = %request.request_tag, "provider rejected parameters; resending without them");
                    dropped.extend(newly);
                }
                Err((status, message)) => {
                    if !Self::is_transient(status) || retries >= self.config.max_retries {
                        return Err(GatewayError::Transport { status, message });
                    }
                    let delay = self.config.backoff_base.saturating_mul(1u32 << retries.min(16));
                    tracing::debug!(?status, retry = retries + 1, ?delay, "transient failure, backing off");
                    std::thread::sleep(delay);
                    retries += 1;
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Rate limiting
// ---------------------------------------------------------------------------

#[derive(Debug)]
struct LimiterState {
    next_ticket: u64,
    now_serving: u64,
    grants: VecDeque<Instant>,
}

/// Sliding-window limiter shared by every caller of a gateway. Blocked
/// callers are admitted strictly in arrival order.
#[derive(Debug)]
pub struct RateLimiter {
    limit: u32,
    window: Duration,
    state: Mutex<LimiterState>,
    turn: Condvar,
}

impl RateLimiter {
    pub fn per_minute(limit: u32) -> Self {
        Self::with_window(limit, Duration::from_secs(60))
    }

    pub fn with_window(limit: u32, window: Duration) -> Self {
        assert!(limit > 0, "rate limit must be positive");
        Self {
            limit,
            window,
            state: Mutex::new(LimiterState {
                next_ticket: 0,
                now_serving: 0,
                grants: VecDeque::new(),
            }),
            turn: Condvar::new(),
        }
    }

    fn prune(&self, state: &mut LimiterState, now: Instant) {
        while state
            .grants
            .front()
            .is_some_and(|t| now.duration_since(*t) >= self.window)
        {
            state.grants.pop_front();
        }
    }

    /// Takes a slot without waiting.
    pub fn try_acquire(&self) -> Result<(), GatewayError> {
        let mut state = self.state.lock().expect("limiter lock");
        let now = Instant::now();
        self.prune(&mut state, now);
        if state.next_ticket != state.now_serving || state.grants.len() >= self.limit as usize {
            return Err(GatewayError::RateLimited(self.limit));
        }
        state.grants.push_back(now);
        Ok(())
    }

    /// Waits for a slot, FIFO among waiters.
    pub fn acquire(&self) {
        let mut state = self.state.lock().expect("limiter lock");
        let ticket = state.next_ticket;
        state.next_ticket += 1;
        loop {
            let now = Instant::now();
            self.prune(&mut state, now);
            if state.now_serving == ticket {
                if state.grants.len() < self.limit as usize {
                    state.grants.push_back(now);
                    state.now_serving += 1;
                    self.turn.notify_all();
                    return;
                }
                let oldest = *state.grants.front().expect("window is full");
                let wait = self.window.saturating_sub(now.duration_since(oldest));
                state = self.turn.wait_timeout(state, wait).expect("limiter lock").0;
            } else {
                state = self.turn.wait(state).expect("limiter lock");
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Gateway
// ---------------------------------------------------------------------------

/// A backend behind the shared rate limiter.
#[derive(Clone)]
pub struct Gateway {
    backend: Arc<dyn ChatBackend>,
    limiter: Option<Arc<RateLimiter>>,
    fail_fast: bool,
}

impl fmt::Debug for Gateway {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Gateway")
            .field("limiter", &self.limiter)
            .field("fail_fast", &self.fail_fast)
            .finish()
    }
}

impl Gateway {
    pub fn new(backend: impl ChatBackend + 'static) -> Self {
        Self {
            backend: Arc::new(backend),
            limiter: None,
            fail_fast: false,
        }
    }

    pub fn from_arc(backend: Arc<dyn ChatBackend>) -> Self {
        Self {
            backend,
            limiter: None,
            fail_fast: false,
        }
    }

    pub fn with_limiter(mut self, limiter: Arc<RateLimiter>, fail_fast: bool) -> Self {
        self.limiter = Some(limiter);
        self.fail_fast = fail_fast;
        self
    }

    pub fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        if let Some(limiter) = &self.limiter {
            if self.fail_fast {
                limiter.try_acquire()?;
            } else {
                limiter.acquire();
            }
        }
        self.backend.complete(request)
    }
}

// ---------------------------------------------------------------------------
// Structured verdict wire format
// ---------------------------------------------------------------------------

/// Instruction appended to every classification prompt.
pub fn verdict_format_instruction(schema: &LabelSchema) -> String {
    format!(
        "Respond with exactly three lines and nothing else:\n\
         label: <one of: {}>\n\
         confidence: <a number between 0 and 1>\n\
         rationale: <one or two sentences explaining the judgment>",
        schema.classes().join(", ")
    )
}

pub const FORMAT_REMINDER: &str = "Your previous answer did not follow the required format. \
Answer again using exactly the three lines `label: ...`, `confidence: ...`, `rationale: ...`.";

#[derive(Debug, Clone, PartialEq)]
pub struct ParsedVerdict {
    pub label: Label,
    pub confidence: f64,
    pub rationale: String,
}

/// Parses the `label:` / `confidence:` / `rationale:` line format. Lines after
/// `rationale:` that start no other field continue the rationale.
pub fn parse_structured_verdict(content: &str, schema: &LabelSchema) -> Result<ParsedVerdict, MalformedVerdict> {
    let mut label_raw: Option<&str> = None;
    let mut confidence_raw: Option<&str> = None;
    let mut rationale: Option<String> = None;
    let mut in_rationale = false;
    for line in content.lines() {
        let field = line.split_once(':').and_then(|(k, v)| {
            let key = k.trim().trim_start_matches(['-', '*']).trim().to_lowercase();
            matches!(key.as_str(), "label" | "confidence" | "rationale").then_some((key, v.trim()))
        });
        match field {
            Some((key, value)) => {
                in_rationale = false;
                match key.as_str() {
                    "label" => label_raw = label_raw.or(Some(value)),
                    "confidence" => confidence_raw = confidence_raw.or(Some(value)),
                    _ if rationale.is_none() => {
                        rationale = Some(value.to_string());
                        in_rationale = true;
                    }
                    _ => {}
                }
            }
            None if in_rationale => {
                let r = rationale.as_mut().expect("in rationale");
                if !line.trim().is_empty() {
                    if !r.is_empty() {
                        r.push('\n');
                    }
                    r.push_str(line.trim());
                }
            }
            None => {}
        }
    }
    let label_raw = label_raw.ok_or_else(|| MalformedVerdict("missing label".into()))?;
    let label = schema
        .parse_label(label_raw)
        .map_err(|e| MalformedVerdict(e.to_string()))?;
    let confidence_raw = confidence_raw.ok_or_else(|| MalformedVerdict("missing confidence".into()))?;
    let confidence: f64 = confidence_raw
        .trim_end_matches('%')
        .trim()
        .parse()
        .map_err(|_| MalformedVerdict(format!("unparsable confidence {confidence_raw:?}")))?;
    if !(0.0..=1.0).contains(&confidence) {
        return Err(MalformedVerdict(format!("confidence {confidence} outside [0, 1]")));
    }
    let rationale = rationale
        .filter(|r| !r.trim().is_empty())
        .ok_or_else(|| MalformedVerdict("missing rationale".into()))?;
    Ok(ParsedVerdict {
        label,
        confidence,
        rationale,
    })
}

/// Output format of the manager's report-synthesis call.
pub const SYNTHESIS_FORMAT_INSTRUCTION: &str = "Respond in exactly this format:\n\
escalation: <low, medium or high>\n\
interventions:\n\
- <first concrete intervention>\n\
- <further interventions, one per line>";

/// Parses `escalation: ...` followed by `interventions:` and `- item` lines.
pub fn parse_synthesis(content: &str) -> Result<(EscalationRisk, Vec<String>), MalformedVerdict> {
    let mut escalation = None;
    let mut interventions = Vec::new();
    let mut in_list = false;
    for line in content.lines() {
        let trimmed = line.trim();
        if let Some((key, value)) = trimmed.split_once(':') {
            match key.trim().to_lowercase().as_str() {
                "escalation" | "escalation risk" | "escalation_risk" => {
                    escalation = Some(
                        EscalationRisk::parse(value)
                            .ok_or_else(|| MalformedVerdict(format!("unknown escalation risk {:?}", value.trim())))?,
                    );
                    in_list = false;
                    continue;
                }
                "interventions" => {
                    in_list = true;
                    if !value.trim().is_empty() {
                        interventions.push(value.trim().to_string());
                    }
                    continue;
                }
                _ => {}
            }
        }
        if in_list {
            let item = trimmed
                .trim_start_matches(|c: char| c == '-' || c == '*' || c.is_ascii_digit() || c == '.' || c == ')')
                .trim();
            if !item.is_empty() {
                interventions.push(item.to_string());
            }
        }
    }
    let escalation = escalation.ok_or_else(|| MalformedVerdict("missing escalation".into()))?;
    Ok((escalation, interventions))
}
