//! Bounded-concurrency batch scoring and a content-addressed result cache.

use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use sha2::{Digest, Sha256};

use super::{check_prompt, LogprobProvider, TokenScoreSeq};
use crate::error::{Error, Result};

/// Score every prompt with at most `max_inflight` concurrent calls. Results
/// come back in input order regardless of completion order.
pub fn score_batch(
    provider: &dyn LogprobProvider,
    prompts: &[String],
    max_inflight: usize,
) -> Vec<Result<TokenScoreSeq>> {
    let workers = max_inflight.max(1).min(prompts.len().max(1));
    if workers == 1 {
        return prompts.iter().map(|p| score_one(provider, p)).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<Result<TokenScoreSeq>>>> =
        prompts.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= prompts.len() {
                    break;
                }
                let r = score_one(provider, &prompts[i]);
                *slots[i].lock().unwrap() = Some(r);
            });
        }
    });
    slots
        .into_iter()
        .map(|m| {
            m.into_inner()
                .unwrap()
                .unwrap_or_else(|| Err(Error::Internal("unfilled batch slot".into())))
        })
        .collect()
}

fn score_one(provider: &dyn LogprobProvider, prompt: &str) -> Result<TokenScoreSeq> {
    check_prompt(provider, prompt)?;
    let seq = provider.score_tokens(prompt)?;
    if seq.prompt != prompt {
        return Err(Error::Protocol("provider scored a different prompt".into()));
    }
    seq.validate()?;
    Ok(seq)
}

fn cache_key(model_id: &str, prompt: &str) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update((model_id.len() as u64).to_le_bytes());
    h.update(model_id.as_bytes());
    h.update(prompt.as_bytes());
    h.finalize().into()
}

/// Scored prompts keyed by a digest of (model id, prompt). Purely an
/// optimization: a disabled cache yields identical results.
#[derive(Debug, Default)]
pub struct ScoreCache {
    enabled: bool,
    entries: Mutex<HashMap<[u8; 32], Arc<TokenScoreSeq>>>,
}

impl ScoreCache {
    pub fn new() -> Self {
        Self {
            enabled: true,
            entries: Mutex::default(),
        }
    }

    pub fn disabled() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Score `prompts`, reusing cached entries and deduplicating within the
    /// batch. Output order matches input order.
    pub fn score_all(
        &self,
        provider: &dyn LogprobProvider,
        prompts: &[String],
        max_inflight: usize,
    ) -> Vec<Result<Arc<TokenScoreSeq>>> {
        let model = provider.model_id();
        let keys: Vec<[u8; 32]> = prompts.iter().map(|p| cache_key(model, p)).collect();

        let mut todo: Vec<String> = Vec::new();
        let mut todo_index: HashMap<[u8; 32], usize> = HashMap::new();
        {
            let entries = self.entries.lock().unwrap();
            for (k, p) in keys.iter().zip(prompts) {
                let cached = self.enabled && entries.contains_key(k);
                if !cached && !todo_index.contains_key(k) {
                    todo_index.insert(*k, todo.len());
                    todo.push(p.clone());
                }
            }
        }

        let fresh: Vec<Result<Arc<TokenScoreSeq>>> = score_batch(provider, &todo, max_inflight)
            .into_iter()
            .map(|r| r.map(Arc::new))
            .collect();

        let mut entries = self.entries.lock().unwrap();
        if self.enabled {
            for (k, &i) in &todo_index {
                if let Ok(seq) = &fresh[i] {
                    entries.insert(*k, Arc::clone(seq));
                }
            }
        }
        keys.iter()
            .map(|k| match todo_index.get(k) {
                Some(&i) => clone_result(&fresh[i]),
                None => Ok(Arc::clone(&entries[k])),
            })
            .collect()
    }
}

fn clone_result(r: &Result<Arc<TokenScoreSeq>>) -> Result<Arc<TokenScoreSeq>> {
    match r {
        Ok(s) => Ok(Arc::clone(s)),
        Err(e) => Err(rebuild_error(e)),
    }
}

// Error is not Clone (it can carry io::Error); reproduce it field for field.
pub(crate) fn rebuild_error(e: &Error) -> Error {
    match e {
        Error::Io { path, source } => Error::Io {
            path: path.clone(),
            source: std::io::Error::new(source.kind(), source.to_string()),
        },
        Error::MalformedJsonl { path, line, message } => Error::MalformedJsonl {
            path: path.clone(),
            line: *line,
            message: message.clone(),
        },
        Error::EmptyDataset(s) => Error::EmptyDataset(s.clone()),
        Error::InvalidArgument(s) => Error::InvalidArgument(s.clone()),
        Error::Unscorable(s) => Error::Unscorable(s.clone()),
        Error::PromptTooLong { len, max } => Error::PromptTooLong { len: *len, max: *max },
        Error::Transport { attempts, message } => Error::Transport {
            attempts: *attempts,
            message: message.clone(),
        },
        Error::HttpStatus { status, body } => Error::HttpStatus {
            status: *status,
            body: body.clone(),
        },
        Error::Protocol(s) => Error::Protocol(s.clone()),
        Error::Serialization(s) => Error::Serialization(s.clone()),
        Error::Internal(s) => Error::Internal(s.clone()),
        Error::Sample { sample_id, seed, source } => Error::Sample {
            sample_id: sample_id.clone(),
            seed: *seed,
            source: Box::new(rebuild_error(source)),
        },
    }
}
