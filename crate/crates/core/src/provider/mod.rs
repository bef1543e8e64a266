//! Gray-box access to per-token log-probabilities.
//!
//! Every backend (the HTTP completions client, the toy LM) implements
//! [`LogprobProvider`]. Prompt assembly and target alignment live here too,
//! because they are the same for every backend.

pub mod engine;
pub mod http;
pub mod mock;

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::dataset::Sample;
use crate::error::{Error, Result};

pub use engine::{score_batch, ScoreCache};
pub use http::{HttpProvider, ProviderConfig, RetryPolicy};

pub const DEFAULT_SEPARATOR: &str = "\n\n";
pub const DEFAULT_SKIP_TOKENS: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredToken {
    pub text: String,
    /// Natural-log probability; `None` for the unscored first position.
    pub logprob: Option<f64>,
    /// Offset of the first character, counted in Unicode scalar values.
    pub char_start: usize,
}

/// One scored prompt: the provider's tokenization with a logprob per token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenScoreSeq {
    pub prompt: String,
    pub tokens: Vec<ScoredToken>,
}

impl TokenScoreSeq {
    /// Build a sequence, rejecting anything that violates the offset and
    /// logprob invariants. The first token's logprob is always dropped.
    pub fn new(prompt: impl Into<String>, mut tokens: Vec<ScoredToken>) -> Result<Self> {
        let prompt = prompt.into();
        if let Some(first) = tokens.first_mut() {
            first.logprob = None;
        }
        let seq = Self { prompt, tokens };
        seq.validate()?;
        Ok(seq)
    }

    pub fn validate(&self) -> Result<()> {
        let mut expected_start = 0usize;
        for (i, tok) in self.tokens.iter().enumerate() {
            if tok.char_start != expected_start {
                return Err(Error::Protocol(format!(
                    "token {i} starts at char {} but the previous tokens end at {expected_start}",
                    tok.char_start
                )));
            }
            let n = tok.text.chars().count();
            if n == 0 {
                return Err(Error::Protocol(format!("token {i} is empty")));
            }
            expected_start += n;
            if i > 0 {
                match tok.logprob {
                    Some(lp) if lp.is_finite() && lp <= 0.0 => {}
                    Some(lp) => {
                        return Err(Error::Protocol(format!("token {i} has logprob {lp}")))
                    }
                    None => return Err(Error::Protocol(format!("token {i} is unscored"))),
                }
            }
        }
        let joined: String = self.tokens.iter().map(|t| t.text.as_str()).collect();
        if joined != self.prompt {
            return Err(Error::Protocol(
                "token texts do not concatenate to the prompt".into(),
            ));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Scored logprobs inside `range`, position 0 excluded.
    pub fn scored_logprobs(&self, range: Range<usize>) -> Vec<f64> {
        self.tokens[range]
            .iter()
            .filter_map(|t| t.logprob)
            .collect()
    }
}

/// Anything that returns per-token logprobs for a whole prompt in one call.
pub trait LogprobProvider: Send + Sync {
    fn model_id(&self) -> &str;

    fn max_prompt_chars(&self) -> usize;

    fn score_tokens(&self, prompt: &str) -> Result<TokenScoreSeq>;

    /// Short description of the backend, recorded in reports.
    fn describe(&self) -> serde_json::Value {
        serde_json::json!({ "model_id": self.model_id() })
    }
}

impl<P: LogprobProvider + ?Sized> LogprobProvider for &P {
    fn model_id(&self) -> &str {
        (**self).model_id()
    }
    fn max_prompt_chars(&self) -> usize {
        (**self).max_prompt_chars()
    }
    fn score_tokens(&self, prompt: &str) -> Result<TokenScoreSeq> {
        (**self).score_tokens(prompt)
    }
    fn describe(&self) -> serde_json::Value {
        (**self).describe()
    }
}

impl<P: LogprobProvider + ?Sized> LogprobProvider for Box<P> {
    fn model_id(&self) -> &str {
        (**self).model_id()
    }
    fn max_prompt_chars(&self) -> usize {
        (**self).max_prompt_chars()
    }
    fn score_tokens(&self, prompt: &str) -> Result<TokenScoreSeq> {
        (**self).score_tokens(prompt)
    }
    fn describe(&self) -> serde_json::Value {
        (**self).describe()
    }
}

/// Check the prompt against the window before sending it anywhere.
pub fn check_prompt(provider: &dyn LogprobProvider, prompt: &str) -> Result<()> {
    if prompt.is_empty() {
        return Err(Error::InvalidArgument("prompt is empty".into()));
    }
    let len = prompt.chars().count();
    if len > provider.max_prompt_chars() {
        return Err(Error::PromptTooLong {
            len,
            max: provider.max_prompt_chars(),
        });
    }
    Ok(())
}

/// Join context samples and the target with `separator`. Returns the prompt
/// and the character offset at which the target begins.
pub fn build_prompt(context: &[&Sample], target: &Sample, separator: &str) -> (String, usize) {
    let mut prompt = String::new();
    for ctx in context {
        prompt.push_str(&ctx.text);
        prompt.push_str(separator);
    }
    let start = prompt.chars().count();
    prompt.push_str(&target.text);
    (prompt, start)
}

/// Drop whole context samples from the left until the prompt fits in
/// `max_chars`. The target is never truncated.
pub fn fit_context<'a>(
    context: &[&'a Sample],
    target: &Sample,
    separator: &str,
    max_chars: usize,
) -> Vec<&'a Sample> {
    let sep_len = separator.chars().count();
    let mut total = target.char_len()
        + context
            .iter()
            .map(|c| c.char_len() + sep_len)
            .sum::<usize>();
    let mut start = 0;
    while total > max_chars && start < context.len() {
        total -= context[start].char_len() + sep_len;
        start += 1;
    }
    context[start..].to_vec()
}

/// Tokens that lie entirely inside the target. A token that starts before
/// `target_char_start` belongs (at least partly) to the context and is
/// excluded even if it runs into the target.
pub fn target_token_range(scores: &TokenScoreSeq, target_char_start: usize) -> Result<Range<usize>> {
    let first = scores
        .tokens
        .iter()
        .position(|t| t.char_start >= target_char_start)
        .ok_or_else(|| {
            Error::Unscorable(format!(
                "no token starts at or after target offset {target_char_start}"
            ))
        })?;
    Ok(first..scores.tokens.len())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetScore {
    pub mean_logprob: f64,
    pub n_scored_tokens: usize,
    pub skipped_tokens: usize,
}

/// Mean logprob over the target after dropping its first `skip_tokens`
/// tokens and any unscored token.
pub fn mean_target_logprob(
    scores: &TokenScoreSeq,
    target_range: Range<usize>,
    skip_tokens: usize,
) -> Result<TargetScore> {
    if target_range.is_empty() {
        return Err(Error::Unscorable("empty target range".into()));
    }
    let start = (target_range.start + skip_tokens).min(target_range.end);
    let kept = scores.scored_logprobs(start..target_range.end);
    if kept.is_empty() {
        return Err(Error::Unscorable(format!(
            "{} target tokens leave nothing after skipping {skip_tokens}",
            target_range.len()
        )));
    }
    let sum: f64 = kept.iter().sum();
    Ok(TargetScore {
        mean_logprob: sum / kept.len() as f64,
        n_scored_tokens: kept.len(),
        skipped_tokens: target_range.len() - kept.len(),
    })
}

/// Reconstruct character offsets for backends that return only token
/// strings. Fails if the tokens do not spell out the prompt.
pub fn offsets_from_tokens(prompt: &str, tokens: &[String]) -> Result<Vec<usize>> {
    let mut rest = prompt;
    let mut pos = 0usize;
    let mut out = Vec::with_capacity(tokens.len());
    for (i, t) in tokens.iter().enumerate() {
        if !rest.starts_with(t.as_str()) {
            return Err(Error::Protocol(format!(
                "token {i} ({t:?}) does not match the prompt at char {pos}"
            )));
        }
        out.push(pos);
        pos += t.chars().count();
        rest = &rest[t.len()..];
    }
    if !rest.is_empty() {
        return Err(Error::Protocol("tokens do not cover the whole prompt".into()));
    }
    Ok(out)
}

#[cfg(test)]
pub(crate) fn seq_from(pieces: &[(&str, Option<f64>)]) -> TokenScoreSeq {
    let mut start = 0;
    let tokens = pieces
        .iter()
        .map(|(t, lp)| {
            let tok = ScoredToken {
                text: t.to_string(),
                logprob: *lp,
                char_start: start,
            };
            start += t.chars().count();
            tok
        })
        .collect::<Vec<_>>();
    let prompt: String = pieces.iter().map(|(t, _)| *t).collect();
    TokenScoreSeq::new(prompt, tokens).unwrap()
}
