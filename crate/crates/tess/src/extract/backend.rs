//! Completion backends: a chat-completion HTTP client and deterministic
//! mocks for tests and offline runs.

use std::collections::BTreeMap;
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Result, TessError};
use crate::primitives::{PrimitiveKind, PrimitiveLabel, ALL_KINDS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoringMode {
    /// Sum token log-probabilities of each candidate continuation.
    Logprob,
    /// Parse the structured four-line completion.
    Parse,
}

/// Connection settings for a hosted chat-completion endpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EndpointConfig {
    pub base_url: String,
    pub model_name: String,
    pub api_key_env_var: String,
    pub timeout_s: f64,
    pub max_retries: u32,
    pub max_parallel_requests: usize,
    pub scoring_mode: ScoringMode,
}

impl EndpointConfig {
    pub fn validate(&self) -> Result<()> {
        if self.timeout_s <= 0.0 {
            return Err(TessError::Config("timeout_s must be > 0".into()));
        }
        if self.max_parallel_requests < 1 {
            return Err(TessError::Config("max_parallel_requests must be >= 1".into()));
        }
        Ok(())
    }
}

impl Default for EndpointConfig {
    fn default() -> Self {
        Self {
            base_url: "http://localhost:8000/v1".into(),
            model_name: "local-model".into(),
            api_key_env_var: "TESS_API_KEY".into(),
            timeout_s: 30.0,
            max_retries: 3,
            max_parallel_requests: 4,
            scoring_mode: ScoringMode::Parse,
        }
    }
}

/// Per-token log-probabilities of one candidate continuation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TokenLogProbs {
    pub tokens: Vec<String>,
    pub logprobs: Vec<f64>,
}

impl TokenLogProbs {
    pub fn total(&self) -> f64 {
        self.logprobs.iter().sum()
    }
}

/// A scoring/completion provider. Implementations must be deterministic for
/// identical inputs so that cached responses stay valid.
pub trait CompletionBackend: Send + Sync {
    fn id(&self) -> String;

    fn supports_logprobs(&self) -> bool;

    /// Token-level log-probabilities of `continuation` following `context`.
    fn continuation_logprobs(&self, context: &str, continuation: &str) -> Result<TokenLogProbs>;

    /// Free-form completion of `prompt` (parse mode).
    fn complete(&self, prompt: &str) -> Result<String>;
}

// ---------------------------------------------------------------------------
// HTTP backend
// ---------------------------------------------------------------------------

/// Chat-completion client. Requests are sent as
/// `POST {base_url}/chat/completions` with body
/// `{model, messages, temperature: 0}` plus a `logprobs` flag in logprob
/// mode; the API key is read from the configured environment variable.
pub struct HttpBackend {
    cfg: EndpointConfig,
    client: reqwest::blocking::Client,
}

impl HttpBackend {
    pub fn new(cfg: EndpointConfig) -> Result<Self> {
        cfg.validate()?;
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs_f64(cfg.timeout_s))
            .build()
            .map_err(|e| TessError::Config(format!("http client: {e}")))?;
        Ok(Self { cfg, client })
    }

    fn api_key(&self) -> Result<String> {
        std::env::var(&self.cfg.api_key_env_var).map_err(|_| {
            TessError::Config(format!(
                "API key environment variable {} is not set",
                self.cfg.api_key_env_var
            ))
        })
    }

    fn post_chat(&self, body: serde_json::Value) -> Result<serde_json::Value> {
        let url = format!("{}/chat/completions", self.cfg.base_url.trim_end_matches('/'));
        let key = self.api_key()?;
        let mut attempts = 0;
        let mut backoff = Duration::from_millis(500);
        loop {
            attempts += 1;
            let sent = self
                .client
                .post(&url)
                .bearer_auth(&key)
                .json(&body)
                .send()
                .and_then(|r| r.error_for_status())
                .and_then(|r| r.json::<serde_json::Value>());
            match sent {
                Ok(v) => return Ok(v),
                Err(e) => {
                    if attempts > self.cfg.max_retries {
                        return Err(TessError::Transport {
                            attempts,
                            reason: e.to_string(),
                        });
                    }
                    std::thread::sleep(backoff);
                    backoff *= 2;
                }
            }
        }
    }
}

impl CompletionBackend for HttpBackend {
    fn id(&self) -> String {
        format!("http:{}", self.cfg.model_name)
    }

    fn supports_logprobs(&self) -> bool {
        true
    }

    fn continuation_logprobs(&self, context: &str, continuation: &str) -> Result<TokenLogProbs> {
        let body = json!({
            "model": self.cfg.model_name,
            "messages": [
                {"role": "user", "content": context},
                {"role": "assistant", "content": continuation},
            ],
            "temperature": 0,
            "logprobs": true,
            "echo": true,
            "max_tokens": 0,
        });
        let response = self.post_chat(body)?;
        let content = response
            .pointer("/choices/0/logprobs/content")
            .and_then(|v| v.as_array())
            .ok_or_else(|| {
                TessError::ModeUnsupported(
                    "backend response carries no token log-probabilities; use parse mode".into(),
                )
            })?;
        let mut tokens = Vec::new();
        let mut logprobs = Vec::new();
        for entry in content {
            let token = entry
                .get("token")
                .and_then(|t| t.as_str())
                .unwrap_or_default()
                .to_string();
            let lp = entry.get("logprob").and_then(|l| l.as_f64()).ok_or_else(|| {
                TessError::ModeUnsupported("token entry without logprob; use parse mode".into())
            })?;
            tokens.push(token);
            logprobs.push(lp);
        }
        // keep only the trailing tokens that belong to the continuation
        let mut keep = tokens.len();
        let mut covered = 0;
        while keep > 0 && covered < continuation.len() {
            keep -= 1;
            covered += tokens[keep].len();
        }
        Ok(TokenLogProbs {
            tokens: tokens.split_off(keep),
            logprobs: logprobs.split_off(keep),
        })
    }

    fn complete(&self, prompt: &str) -> Result<String> {
        let body = json!({
            "model": self.cfg.model_name,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": 0,
        });
        let response = self.post_chat(body)?;
        response
            .pointer("/choices/0/message/content")
            .and_then(|v| v.as_str())
            .map(|s| s.to_string())
            .ok_or_else(|| TessError::Transport {
                attempts: 1,
                reason: "response missing choices[0].message.content".into(),
            })
    }
}

// ---------------------------------------------------------------------------
// Mock backends
// ---------------------------------------------------------------------------

/// Deterministic offline backend.
///
/// `Fixed` serves preset token logprobs per (kind, candidate). `Keyword`
/// scores a candidate by counting its cue words inside the prompt's
/// `Textual Input:` line, which makes benchmark text extractable without a
/// hosted model; an optional confusion rate flips the favoured candidate on a
/// deterministic per-text basis.
pub struct MockBackend {
    mode: MockMode,
    calls: Mutex<u64>,
}

enum MockMode {
    Fixed {
        scores: BTreeMap<(PrimitiveKind, usize), Vec<f64>>,
    },
    Keyword {
        vocabulary: BTreeMap<(PrimitiveKind, usize), Vec<String>>,
        confusion: f64,
    },
}

const MOCK_HIT_LOGPROB: f64 = -0.05;
const MOCK_MISS_LOGPROB: f64 = -3.0;

impl MockBackend {
    /// Fixed per-token logprobs keyed by (kind, candidate index).
    pub fn fixed(scores: BTreeMap<(PrimitiveKind, usize), Vec<f64>>) -> Self {
        Self {
            mode: MockMode::Fixed { scores },
            calls: Mutex::new(0),
        }
    }

    /// Keyword-cue scoring over a label vocabulary.
    pub fn keyword(
        vocabulary: BTreeMap<(PrimitiveKind, usize), Vec<String>>,
        confusion: f64,
    ) -> Self {
        Self {
            mode: MockMode::Keyword {
                vocabulary,
                confusion,
            },
            calls: Mutex::new(0),
        }
    }

    pub fn call_count(&self) -> u64 {
        *self.calls.lock().unwrap()
    }

    fn bump(&self) {
        *self.calls.lock().unwrap() += 1;
    }

    fn label_for(&self, continuation: &str) -> Result<PrimitiveLabel> {
        for kind in ALL_KINDS {
            if let Some(label) = PrimitiveLabel::from_name(kind, continuation) {
                return Ok(label);
            }
        }
        Err(TessError::InvalidArgument(format!(
            "mock backend asked to score unknown continuation {continuation:?}"
        )))
    }

    fn kind_for_context(context: &str) -> Result<PrimitiveKind> {
        for kind in ALL_KINDS {
            if context.ends_with(&format!("{}: ", kind.line_key())) {
                return Ok(kind);
            }
        }
        Err(TessError::InvalidArgument(
            "scoring context does not end with an output-line prefix".into(),
        ))
    }

    fn extract_text_line(context: &str) -> &str {
        context
            .lines()
            .find_map(|l| l.strip_prefix("Textual Input: "))
            .unwrap_or("")
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf29ce484222325;
    for b in bytes {
        hash ^= *b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

impl CompletionBackend for MockBackend {
    fn id(&self) -> String {
        match &self.mode {
            MockMode::Fixed { .. } => "mock:fixed".into(),
            MockMode::Keyword { confusion, .. } => format!("mock:keyword:{confusion}"),
        }
    }

    fn supports_logprobs(&self) -> bool {
        true
    }

    fn continuation_logprobs(&self, context: &str, continuation: &str) -> Result<TokenLogProbs> {
        self.bump();
        let label = self.label_for(continuation)?;
        let kind = Self::kind_for_context(context)?;
        if kind != label.kind() {
            return Err(TessError::InvalidArgument(format!(
                "candidate {continuation:?} scored against {kind:?} context"
            )));
        }
        let tokens: Vec<String> = continuation.split('-').map(|t| t.to_string()).collect();
        match &self.mode {
            MockMode::Fixed { scores } => {
                let lp = scores
                    .get(&(label.kind(), label.index()))
                    .cloned()
                    .unwrap_or_else(|| vec![MOCK_MISS_LOGPROB; tokens.len()]);
                if lp.len() != tokens.len() {
                    return Err(TessError::InvalidArgument(format!(
                        "fixture for {continuation:?} has {} logprobs for {} tokens",
                        lp.len(),
                        tokens.len()
                    )));
                }
                Ok(TokenLogProbs {
                    tokens,
                    logprobs: lp,
                })
            }
            MockMode::Keyword {
                vocabulary,
                confusion,
            } => {
                let text = Self::extract_text_line(context);
                let hits = vocabulary
                    .get(&(label.kind(), label.index()))
                    .map(|cues| cues.iter().filter(|cue| text.contains(cue.as_str())).count())
                    .unwrap_or(0);
                // deterministic per-text confusion: favour the next candidate
                let confused = (fnv1a(format!("{text}|{:?}", label.kind()).as_bytes()) % 10_000)
                    as f64
                    < confusion * 10_000.0;
                let favoured = hits > 0;
                let per_token = if favoured != confused {
                    MOCK_HIT_LOGPROB
                } else {
                    MOCK_MISS_LOGPROB
                };
                Ok(TokenLogProbs {
                    logprobs: vec![per_token; tokens.len()],
                    tokens,
                })
            }
        }
    }

    fn complete(&self, prompt: &str) -> Result<String> {
        self.bump();
        // score every candidate of every kind and emit the best per line
        let mut out = String::new();
        for kind in ALL_KINDS {
            let context = format!("{prompt}\n{}: ", kind.line_key());
            let mut best = (f64::NEG_INFINITY, 0usize);
            for (i, cand) in kind.candidates().iter().enumerate() {
                let lp = self.continuation_logprobs(&context, cand)?;
                let mean = lp.total() / lp.logprobs.len().max(1) as f64;
                if mean > best.0 {
                    best = (mean, i);
                }
            }
            out.push_str(&format!(
                "{}: {}\n",
                kind.line_key(),
                kind.candidates()[best.1]
            ));
        }
        Ok(out)
    }
}
