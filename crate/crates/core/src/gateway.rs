//! Completion backends: an OpenAI-compatible HTTP client and a seeded
//! scripted policy with known shift probabilities.
//!
//! Both sit behind [`CompletionBackend`]. Requests carry the rendered
//! system/user text that a real model sees plus a structured
//! [`RequestContext`] that only the scripted backend reads.

use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use async_trait::async_trait;
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;
use tokio::sync::Semaphore;

use crate::conversation::{Instantiation, RevealCondition, Role};
use crate::corpus::{Benchmark, QuestionInstance};
use crate::prompt::{compliant_completion, PromptVariant};
use crate::util::{derive_seed, keyed_rng};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GatewayError {
    #[error("transport failure after retries: {0}")]
    Transport(String),
    #[error("HTTP status {0}")]
    HttpStatus(u16),
    #[error("request timed out")]
    Timeout,
    #[error("scripted policy has no initial answer for question {0}")]
    PolicyGap(String),
    #[error("invalid endpoint: {0}")]
    InvalidEndpoint(String),
    #[error("malformed completion body: {0}")]
    MalformedResponse(String),
}

fn default_temperature() -> f64 {
    0.7
}
fn default_max_retries() -> u32 {
    3
}
fn default_timeout_secs() -> f64 {
    120.0
}
fn default_max_concurrency() -> usize {
    8
}
fn default_max_tokens() -> Option<u32> {
    Some(1024)
}
fn default_backoff_ms() -> u64 {
    500
}
fn default_api_key_env() -> Option<String> {
    Some("OPENAI_API_KEY".into())
}

/// One served model. Temperature defaults to 0.7 and is overridable per
/// endpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelEndpoint {
    pub name: String,
    pub base_url: String,
    pub model_id: String,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: f64,
    #[serde(default = "default_max_concurrency")]
    pub max_concurrency: usize,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: Option<u32>,
    #[serde(default = "default_backoff_ms")]
    pub backoff_base_ms: u64,
    /// Environment variable holding an optional bearer token.
    #[serde(default = "default_api_key_env")]
    pub api_key_env: Option<String>,
}

impl ModelEndpoint {
    pub fn new(name: &str, base_url: &str, model_id: &str) -> Self {
        Self {
            name: name.into(),
            base_url: base_url.into(),
            model_id: model_id.into(),
            temperature: default_temperature(),
            max_retries: default_max_retries(),
            timeout_secs: default_timeout_secs(),
            max_concurrency: default_max_concurrency(),
            max_tokens: default_max_tokens(),
            backoff_base_ms: default_backoff_ms(),
            api_key_env: default_api_key_env(),
        }
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(GatewayError::InvalidEndpoint(format!("{}: temperature {} outside [0, 2]", self.name, self.temperature)));
        }
        if self.max_concurrency == 0 {
            return Err(GatewayError::InvalidEndpoint(format!("{}: max_concurrency must be >= 1", self.name)));
        }
        if !(self.timeout_secs > 0.0) {
            return Err(GatewayError::InvalidEndpoint(format!("{}: timeout must be positive", self.name)));
        }
        let url = reqwest::Url::parse(&self.base_url)
            .map_err(|e| GatewayError::InvalidEndpoint(format!("{}: base_url: {e}", self.name)))?;
        if !matches!(url.scheme(), "http" | "https") {
            return Err(GatewayError::InvalidEndpoint(format!("{}: base_url must be http or https", self.name)));
        }
        Ok(())
    }

    /// `base_url` may or may not already end in `/v1`.
    pub fn completions_url(&self) -> String {
        let base = self.base_url.trim_end_matches('/');
        let base = base.strip_suffix("/v1").unwrap_or(base);
        format!("{base}/v1/chat/completions")
    }
}

/// Who is speaking and under which experimental condition.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShiftCondition {
    pub role: Role,
    /// Demographics of the identity agent of the conversation.
    pub demographics: Option<String>,
    /// Instantiation of the identity agent of the conversation.
    pub instantiation: Instantiation,
    pub reveal: RevealCondition,
}

#[derive(Debug, Clone)]
pub struct RequestContext {
    /// Conversation id, or the cell id for a single-shot question.
    pub key: String,
    pub question: Arc<QuestionInstance>,
    pub variant: PromptVariant,
    pub round: u32,
    pub agent_index: usize,
    /// Previous-round answers by agent index; empty in round 0.
    pub previous_answers: Vec<usize>,
    /// `None` for single-shot (instability) requests.
    pub condition: Option<ShiftCondition>,
    /// Format-retry attempt number, starting at 1.
    pub attempt: u32,
}

#[derive(Debug, Clone)]
pub struct CompletionRequest {
    pub system: String,
    pub user: String,
    pub context: RequestContext,
}

#[async_trait]
pub trait CompletionBackend: Send + Sync {
    /// Model name recorded in conversation keys and score tables.
    fn model(&self) -> &str;

    async fn complete(&self, request: &CompletionRequest) -> Result<String, GatewayError>;
}

/// OpenAI chat-completions client with retry/backoff and a per-endpoint
/// in-flight limit.
pub struct HttpBackend {
    endpoint: ModelEndpoint,
    client: reqwest::Client,
    permits: Semaphore,
    token: Option<String>,
    attempts: AtomicU64,
}

impl HttpBackend {
    pub fn new(endpoint: ModelEndpoint) -> Result<Self, GatewayError> {
        endpoint.validate()?;
        let client = reqwest::Client::builder()
            .timeout(Duration::from_secs_f64(endpoint.timeout_secs))
            .build()
            .map_err(|e| GatewayError::InvalidEndpoint(e.to_string()))?;
        let token = endpoint
            .api_key_env
            .as_deref()
            .and_then(|var| std::env::var(var).ok())
            .filter(|t| !t.is_empty());
        Ok(Self { permits: Semaphore::new(endpoint.max_concurrency), endpoint, client, token, attempts: AtomicU64::new(0) })
    }

    pub fn endpoint(&self) -> &ModelEndpoint {
        &self.endpoint
    }

    /// Total HTTP attempts issued, retries included.
    pub fn attempts(&self) -> u64 {
        self.attempts.load(Ordering::Relaxed)
    }

    async fn attempt_once(&self, body: &Value) -> Result<String, (GatewayError, bool)> {
        self.attempts.fetch_add(1, Ordering::Relaxed);
        let mut req = self.client.post(self.endpoint.completions_url()).json(body);
        if let Some(token) = &self.token {
            req = req.bearer_auth(token);
        }
        let resp = match req.send().await {
            Ok(r) => r,
            Err(e) if e.is_timeout() => return Err((GatewayError::Timeout, true)),
            Err(e) => return Err((GatewayError::Transport(e.to_string()), true)),
        };
        let status = resp.status();
        if !status.is_success() {
            let retryable = status.as_u16() == 429 || status.is_server_error();
            return Err((GatewayError::HttpStatus(status.as_u16()), retryable));
        }
        let payload: Value = match resp.json().await {
            Ok(v) => v,
            Err(e) if e.is_timeout() => return Err((GatewayError::Timeout, true)),
            Err(e) => return Err((GatewayError::MalformedResponse(e.to_string()), false)),
        };
        payload
            .pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| (GatewayError::MalformedResponse("missing choices[0].message.content".into()), false))
    }
}

#[async_trait]
impl CompletionBackend for HttpBackend {
    fn model(&self) -> &str {
        &self.endpoint.name
    }

    async fn complete(&self, request: &CompletionRequest) -> Result<String, GatewayError> {
        let _permit = self.permits.acquire().await.expect("semaphore never closed");
        let mut body = json!({
            "model": self.endpoint.model_id,
            "messages": [
                {"role": "system", "content": request.system},
                {"role": "user", "content": request.user},
            ],
            "temperature": self.endpoint.temperature,
        });
        if let Some(max_tokens) = self.endpoint.max_tokens {
            body["max_tokens"] = json!(max_tokens);
        }
        let mut retry = 0;
        loop {
            match self.attempt_once(&body).await {
                Ok(content) => return Ok(content),
                Err((err, retryable)) => {
                    if !retryable || retry >= self.endpoint.max_retries {
                        tracing::warn!(endpoint = %self.endpoint.name, attempts = retry + 1, error = %err, "completion failed");
                        return Err(err);
                    }
                    let delay = self.endpoint.backoff_base_ms.saturating_mul(1 << retry.min(16)).min(30_000);
                    tracing::debug!(endpoint = %self.endpoint.name, retry, delay_ms = delay, error = %err, "retrying");
                    tokio::time::sleep(Duration::from_millis(delay)).await;
                    retry += 1;
                }
            }
        }
    }
}

/// Round-0 answer assignment for the scripted backend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitialAnswerRule {
    /// Explicit table; a missing entry is a [`GatewayError::PolicyGap`].
    Table { entries: Vec<InitialEntry> },
    /// Fixed choice per role (taken modulo the number of choices).
    ByRole { identity: usize, baseline: usize },
    /// Seeded hash of (question id, agent index).
    Hashed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitialEntry {
    pub question_id: String,
    pub role: Role,
    pub index: usize,
}

/// Shift probability override. Unset fields match anything, except
/// `demographics`, which matches the null demographic unless
/// `any_demographics` is set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftRule {
    #[serde(default)]
    pub demographics: Option<String>,
    #[serde(default)]
    pub any_demographics: bool,
    #[serde(default)]
    pub instantiation: Option<Instantiation>,
    #[serde(default)]
    pub reveal: Option<RevealCondition>,
    #[serde(default)]
    pub role: Option<Role>,
    pub probability: f64,
}

impl ShiftRule {
    fn matches(&self, c: &ShiftCondition) -> bool {
        (self.any_demographics || self.demographics == c.demographics)
            && self.instantiation.is_none_or(|i| i == c.instantiation)
            && self.reveal.is_none_or(|r| r == c.reveal)
            && self.role.is_none_or(|r| r == c.role)
    }
}

/// Probability that a single-shot answer lands on the keyed target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasRule {
    #[serde(default)]
    pub variant: Option<PromptVariant>,
    #[serde(default)]
    pub benchmark: Option<Benchmark>,
    pub probability: f64,
}

/// Ground-truth conversational behaviour for offline runs.
///
/// Round 0 follows `initial_rule`; afterwards an agent that disagreed with
/// its peer adopts the peer's previous answer with the matching shift
/// probability and otherwise repeats its own. Every draw is keyed by
/// (seed, request key, round, agent), so results never depend on
/// scheduling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptedPolicy {
    pub initial_rule: InitialAnswerRule,
    #[serde(default)]
    pub shift: Vec<ShiftRule>,
    #[serde(default)]
    pub default_shift_probability: f64,
    /// Single-shot answers: probability of picking the keyed target.
    #[serde(default)]
    pub answer_bias: Vec<BiasRule>,
    #[serde(default)]
    pub default_answer_bias: Option<f64>,
    #[serde(default)]
    pub rng_seed: u64,
}

impl ScriptedPolicy {
    pub fn constant(probability: f64, rng_seed: u64) -> Self {
        Self {
            initial_rule: InitialAnswerRule::ByRole { identity: 0, baseline: 1 },
            shift: Vec::new(),
            default_shift_probability: probability,
            answer_bias: Vec::new(),
            default_answer_bias: None,
            rng_seed,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        let probs = self
            .shift
            .iter()
            .map(|r| r.probability)
            .chain(self.answer_bias.iter().map(|r| r.probability))
            .chain([self.default_shift_probability])
            .chain(self.default_answer_bias);
        for p in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(format!("probability {p} outside [0, 1]"));
            }
        }
        Ok(())
    }

    pub fn shift_probability(&self, condition: &ShiftCondition) -> f64 {
        self.shift
            .iter()
            .find(|r| r.matches(condition))
            .map_or(self.default_shift_probability, |r| r.probability)
    }

    fn draw(&self, key: &str, round: u32, agent_index: usize) -> f64 {
        let mut rng = keyed_rng([
            &self.rng_seed.to_le_bytes()[..],
            key.as_bytes(),
            &round.to_le_bytes(),
            &(agent_index as u64).to_le_bytes(),
        ]);
        rng.random::<f64>()
    }

    pub fn initial_answer(&self, question: &QuestionInstance, agent_index: usize, role: Role) -> Result<usize, GatewayError> {
        let n = question.choices.len();
        match &self.initial_rule {
            InitialAnswerRule::Table { entries } => entries
                .iter()
                .find(|e| e.question_id == question.id && e.role == role)
                .map(|e| e.index % n)
                .ok_or_else(|| GatewayError::PolicyGap(question.id.clone())),
            InitialAnswerRule::ByRole { identity, baseline } => Ok(match role {
                Role::Iden => identity % n,
                Role::Base => baseline % n,
            }),
            InitialAnswerRule::Hashed => {
                let seed = derive_seed([
                    &self.rng_seed.to_le_bytes()[..],
                    question.id.as_bytes(),
                    &(agent_index as u64).to_le_bytes(),
                ]);
                Ok((seed % n as u64) as usize)
            }
        }
    }

    /// Next answer of one agent in a conversation round.
    pub fn conversation_answer(
        &self,
        key: &str,
        question: &QuestionInstance,
        round: u32,
        agent_index: usize,
        previous_answers: &[usize],
        condition: &ShiftCondition,
    ) -> Result<usize, GatewayError> {
        if round == 0 || previous_answers.is_empty() {
            return self.initial_answer(question, agent_index, condition.role);
        }
        let own = previous_answers[agent_index];
        let peer = previous_answers
            .iter()
            .enumerate()
            .find(|&(i, &a)| i != agent_index && a != own)
            .map(|(_, &a)| a);
        match peer {
            Some(peer) if self.draw(key, round, agent_index) < self.shift_probability(condition) => Ok(peer),
            _ => Ok(own),
        }
    }

    /// Single-shot answer for the instability study.
    pub fn single_shot_answer(&self, key: &str, question: &QuestionInstance, variant: PromptVariant) -> Result<usize, GatewayError> {
        let bias = self
            .answer_bias
            .iter()
            .find(|r| r.variant.is_none_or(|v| v == variant) && r.benchmark.is_none_or(|b| b == question.benchmark))
            .map(|r| r.probability)
            .or(self.default_answer_bias);
        let Some(bias) = bias else {
            return self.initial_answer(question, 0, Role::Base);
        };
        let target = question.key.bias_target_index.or(question.key.correct_index).unwrap_or(0);
        let n = question.choices.len();
        if self.draw(key, 0, 0) < bias {
            return Ok(target);
        }
        let mut rng = keyed_rng([&self.rng_seed.to_le_bytes()[..], key.as_bytes(), b"other"]);
        let k = rng.random_range(0..n - 1);
        Ok(if k >= target { k + 1 } else { k })
    }
}

const SCRIPTED_RATIONALE: &str = "After weighing the question and the discussion so far, this is the answer I find best supported.";

/// Completion text the scripted policy produces for one request.
pub fn scripted_complete(policy: &ScriptedPolicy, ctx: &RequestContext) -> Result<String, GatewayError> {
    let index = match &ctx.condition {
        Some(condition) => {
            policy.conversation_answer(&ctx.key, &ctx.question, ctx.round, ctx.agent_index, &ctx.previous_answers, condition)?
        }
        None => policy.single_shot_answer(&ctx.key, &ctx.question, ctx.variant)?,
    };
    Ok(compliant_completion(&ctx.question, ctx.variant, index, SCRIPTED_RATIONALE))
}

pub struct ScriptedBackend {
    name: String,
    policy: ScriptedPolicy,
}

impl ScriptedBackend {
    pub fn new(name: impl Into<String>, policy: ScriptedPolicy) -> Self {
        Self { name: name.into(), policy }
    }

    pub fn policy(&self) -> &ScriptedPolicy {
        &self.policy
    }
}

#[async_trait]
impl CompletionBackend for ScriptedBackend {
    fn model(&self) -> &str {
        &self.name
    }

    async fn complete(&self, request: &CompletionRequest) -> Result<String, GatewayError> {
        scripted_complete(&self.policy, &request.context)
    }
}

/// One logged exchange.
#[derive(Debug, Clone)]
pub struct RecordedCall {
    pub key: String,
    pub round: u32,
    pub agent_index: usize,
    pub attempt: u32,
    pub system: String,
    pub user: String,
    pub response: Result<String, GatewayError>,
}

/// Wraps a backend and logs every request it forwards.
pub struct RecordingBackend<B> {
    inner: B,
    log: Mutex<Vec<RecordedCall>>,
    in_flight: AtomicUsize,
    peak_in_flight: AtomicUsize,
}

impl<B: CompletionBackend> RecordingBackend<B> {
    pub fn new(inner: B) -> Self {
        Self { inner, log: Mutex::new(Vec::new()), in_flight: AtomicUsize::new(0), peak_in_flight: AtomicUsize::new(0) }
    }

    pub fn calls(&self) -> Vec<RecordedCall> {
        self.log.lock().expect("log lock").clone()
    }

    pub fn peak_in_flight(&self) -> usize {
        self.peak_in_flight.load(Ordering::SeqCst)
    }
}

#[async_trait]
impl<B: CompletionBackend> CompletionBackend for RecordingBackend<B> {
    fn model(&self) -> &str {
        self.inner.model()
    }

    async fn complete(&self, request: &CompletionRequest) -> Result<String, GatewayError> {
        let now = self.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        self.peak_in_flight.fetch_max(now, Ordering::SeqCst);
        let response = self.inner.complete(request).await;
        self.in_flight.fetch_sub(1, Ordering::SeqCst);
        let ctx = &request.context;
        self.log.lock().expect("log lock").push(RecordedCall {
            key: ctx.key.clone(),
            round: ctx.round,
            agent_index: ctx.agent_index,
            attempt: ctx.attempt,
            system: request.system.clone(),
            user: request.user.clone(),
            response: response.clone(),
        });
        response
    }
}

#[async_trait]
impl<T: CompletionBackend + ?Sized> CompletionBackend for Arc<T> {
    fn model(&self) -> &str {
        (**self).model()
    }

    async fn complete(&self, request: &CompletionRequest) -> Result<String, GatewayError> {
        (**self).complete(request).await
    }
}
