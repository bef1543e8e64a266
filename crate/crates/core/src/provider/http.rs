//! Client for OpenAI-compatible `/v1/completions` endpoints used in echo
//! mode (`max_tokens = 0`, `echo = true`) to score a prompt in one call.

use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{offsets_from_tokens, LogprobProvider, ScoredToken, TokenScoreSeq};
use crate::error::{Error, Result};

pub const MIN_PROMPT_CHARS: usize = 1200;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub initial_backoff_ms: u64,
    pub multiplier: f64,
    pub max_backoff_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 5,
            initial_backoff_ms: 500,
            multiplier: 2.0,
            max_backoff_ms: 30_000,
        }
    }
}

impl RetryPolicy {
    /// Delay before retry number `attempt` (1-based).
    pub fn backoff(&self, attempt: u32) -> Duration {
        let exp = self.multiplier.powi(attempt.saturating_sub(1) as i32);
        let ms = (self.initial_backoff_ms as f64 * exp).min(self.max_backoff_ms as f64);
        Duration::from_millis(ms as u64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProviderConfig {
    pub endpoint: String,
    pub model_id: String,
    pub max_prompt_chars: usize,
    pub max_inflight: usize,
    pub retry: RetryPolicy,
    /// Name of the environment variable holding the bearer token. Only the
    /// name is ever stored or reported.
    pub auth_env_var: Option<String>,
    pub timeout_secs: u64,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        Self {
            endpoint: "http://127.0.0.1:8000".into(),
            model_id: "model".into(),
            max_prompt_chars: 8000,
            max_inflight: 8,
            retry: RetryPolicy::default(),
            auth_env_var: None,
            timeout_secs: 120,
        }
    }
}

impl ProviderConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut problems = Vec::new();
        if self.max_inflight < 1 {
            problems.push("max_inflight must be at least 1".to_string());
        }
        if self.max_prompt_chars < MIN_PROMPT_CHARS {
            problems.push(format!(
                "max_prompt_chars must be at least {MIN_PROMPT_CHARS}, got {}",
                self.max_prompt_chars
            ));
        }
        if self.retry.max_attempts < 1 {
            problems.push("retry.max_attempts must be at least 1".to_string());
        }
        if !(self.endpoint.starts_with("http://") || self.endpoint.starts_with("https://")) {
            problems.push(format!("endpoint {:?} is not an http(s) URL", self.endpoint));
        }
        if self.model_id.is_empty() {
            problems.push("model id is empty".to_string());
        }
        problems
    }
}

#[derive(Serialize)]
struct CompletionRequest<'a> {
    model: &'a str,
    prompt: &'a str,
    max_tokens: u32,
    echo: bool,
    logprobs: u32,
}

#[derive(Deserialize)]
struct CompletionResponse {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    logprobs: Option<Logprobs>,
}

#[derive(Deserialize)]
struct Logprobs {
    tokens: Vec<String>,
    token_logprobs: Vec<Option<f64>>,
    #[serde(default)]
    text_offset: Option<Vec<usize>>,
}

pub struct HttpProvider {
    config: ProviderConfig,
    agent: ureq::Agent,
    url: String,
    token: Option<String>,
}

impl std::fmt::Debug for HttpProvider {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HttpProvider")
            .field("config", &self.config)
            .field("token", &self.token.as_ref().map(|_| "<redacted>"))
            .finish()
    }
}

enum Attempt {
    Done(TokenScoreSeq),
    Retry(String),
}

impl HttpProvider {
    pub fn new(config: ProviderConfig) -> Result<Self> {
        let problems = config.validate();
        if !problems.is_empty() {
            return Err(Error::InvalidArgument(problems.join("; ")));
        }
        let token = config
            .auth_env_var
            .as_deref()
            .and_then(|v| std::env::var(v).ok())
            .filter(|t| !t.is_empty());
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs(config.timeout_secs)))
            .build()
            .into();
        let url = format!("{}/v1/completions", config.endpoint.trim_end_matches('/'));
        Ok(Self {
            config,
            agent,
            url,
            token,
        })
    }

    pub fn config(&self) -> &ProviderConfig {
        &self.config
    }

    fn attempt(&self, body: &str, prompt: &str) -> Result<Attempt> {
        let mut req = self
            .agent
            .post(&self.url)
            .header("Content-Type", "application/json");
        if let Some(t) = &self.token {
            req = req.header("Authorization", &format!("Bearer {t}"));
        }
        let mut resp = match req.send(body) {
            Ok(r) => r,
            Err(e) => return Ok(Attempt::Retry(e.to_string())),
        };
        let status = resp.status().as_u16();
        let text = match resp.body_mut().read_to_string() {
            Ok(t) => t,
            Err(e) => return Ok(Attempt::Retry(e.to_string())),
        };
        if status == 429 || (500..600).contains(&status) {
            return Ok(Attempt::Retry(format!("HTTP {status}")));
        }
        if !(200..300).contains(&status) {
            return Err(Error::HttpStatus {
                status,
                body: text.chars().take(500).collect(),
            });
        }
        parse_completion(prompt, &text).map(Attempt::Done)
    }
}

/// Turn a completions response body into a validated [`TokenScoreSeq`].
pub fn parse_completion(prompt: &str, body: &str) -> Result<TokenScoreSeq> {
    let resp: CompletionResponse = serde_json::from_str(body)
        .map_err(|e| Error::Protocol(format!("bad completions response: {e}")))?;
    let lp = resp
        .choices
        .into_iter()
        .next()
        .and_then(|c| c.logprobs)
        .ok_or_else(|| Error::Protocol("response has no choices[0].logprobs".into()))?;
    if lp.tokens.len() != lp.token_logprobs.len() {
        return Err(Error::Protocol(format!(
            "{} tokens but {} logprobs",
            lp.tokens.len(),
            lp.token_logprobs.len()
        )));
    }
    let offsets = match lp.text_offset {
        Some(off) => {
            if off.len() != lp.tokens.len() {
                return Err(Error::Protocol("text_offset length mismatch".into()));
            }
            off
        }
        None => offsets_from_tokens(prompt, &lp.tokens)?,
    };
    let tokens = lp
        .tokens
        .into_iter()
        .zip(lp.token_logprobs)
        .zip(offsets)
        .enumerate()
        .map(|(i, ((text, logprob), char_start))| ScoredToken {
            text,
            logprob: if i == 0 { None } else { logprob },
            char_start,
        })
        .collect();
    TokenScoreSeq::new(prompt, tokens)
}

impl LogprobProvider for HttpProvider {
    fn model_id(&self) -> &str {
        &self.config.model_id
    }

    fn max_prompt_chars(&self) -> usize {
        self.config.max_prompt_chars
    }

    fn score_tokens(&self, prompt: &str) -> Result<TokenScoreSeq> {
        let body = serde_json::to_string(&CompletionRequest {
            model: &self.config.model_id,
            prompt,
            max_tokens: 0,
            echo: true,
            logprobs: 0,
        })?;
        let mut last = String::new();
        for attempt in 1..=self.config.retry.max_attempts {
            match self.attempt(&body, prompt)? {
                Attempt::Done(seq) => return Ok(seq),
                Attempt::Retry(why) => {
                    last = why;
                    if attempt < self.config.retry.max_attempts {
                        std::thread::sleep(self.config.retry.backoff(attempt));
                    }
                }
            }
        }
        Err(Error::Transport {
            attempts: self.config.retry.max_attempts,
            message: last,
        })
    }

    fn describe(&self) -> serde_json::Value {
        serde_json::json!({
            "kind": "http",
            "endpoint": self.config.endpoint,
            "model_id": self.config.model_id,
            "max_prompt_chars": self.config.max_prompt_chars,
            "auth_env_var": self.config.auth_env_var,
            "retry": self.config.retry,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_canned_response() {
        let body = r#"{"choices":[{"logprobs":{
            "tokens":["hello"," world"],
            "token_logprobs":[null,-1.25],
            "text_offset":[0,5]}}]}"#;
        let seq = parse_completion("hello world", body).unwrap();
        assert_eq!(seq.tokens.len(), 2);
        assert_eq!(seq.tokens[0].logprob, None);
        assert_eq!(seq.tokens[1].logprob, Some(-1.25));
        assert_eq!(seq.tokens[1].char_start, 5);
    }

    #[test]
    fn parse_without_offsets_reconstructs() {
        let body = r#"{"choices":[{"logprobs":{"tokens":["ab","c"],"token_logprobs":[null,-0.5]}}]}"#;
        let seq = parse_completion("abc", body).unwrap();
        assert_eq!(seq.tokens[1].char_start, 2);
        assert!(parse_completion("abd", body).is_err());
    }

    #[test]
    fn parse_rejects_inconsistent_offsets() {
        let body = r#"{"choices":[{"logprobs":{"tokens":["ab","c"],"token_logprobs":[null,-0.5],"text_offset":[0,1]}}]}"#;
        assert!(matches!(parse_completion("abc", body), Err(Error::Protocol(_))));
    }

    #[test]
    fn config_validation_lists_all_problems() {
        let cfg = ProviderConfig {
            max_inflight: 0,
            max_prompt_chars: 10,
            endpoint: "ftp://x".into(),
            ..ProviderConfig::default()
        };
        assert_eq!(cfg.validate().len(), 3);
    }

    #[test]
    fn backoff_schedule() {
        let r = RetryPolicy {
            max_attempts: 4,
            initial_backoff_ms: 100,
            multiplier: 2.0,
            max_backoff_ms: 300,
        };
        assert_eq!(r.backoff(1), Duration::from_millis(100));
        assert_eq!(r.backoff(2), Duration::from_millis(200));
        assert_eq!(r.backoff(3), Duration::from_millis(300));
    }
}
