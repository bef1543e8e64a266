//! A character-level n-gram language model interpolated with a unigram
//! cache over the recent prompt window.
//!
//! The global n-gram part is what training (and finetuning) changes; the
//! cache part is what lets prepended text influence predictions. Together
//! they make a cheap, fully deterministic stand-in for a real LM: train on a
//! corpus to contaminate the model with it, hold another corpus out to get
//! an unseen one.

pub mod lab;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rustc_hash::FxHashMap;
use serde::{Deserialize, Serialize};

use crate::dataset::TextDataset;
use crate::error::{Error, Result};
use crate::provider::{LogprobProvider, ScoredToken, TokenScoreSeq};

pub use lab::{augment_crop, LabCheckpoint};

/// Stand-in for characters outside the vocabulary.
pub const UNK: char = '\u{FFFF}';
pub const MAX_ORDER: usize = 8;
const CHECKPOINT_FORMAT: &str = "codec-toylm";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyLmParams {
    pub order: usize,
    pub alpha: f64,
    pub cache_lambda: f64,
    pub cache_window: usize,
    /// Characters always in the vocabulary, trained or not.
    pub base_alphabet: String,
}

impl Default for ToyLmParams {
    fn default() -> Self {
        Self {
            order: 4,
            alpha: 0.01,
            cache_lambda: 0.3,
            cache_window: 300,
            base_alphabet: default_alphabet(),
        }
    }
}

/// Printable ASCII plus newline.
pub fn default_alphabet() -> String {
    std::iter::once('\n').chain(' '..='~').collect()
}

impl ToyLmParams {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if !(2..=MAX_ORDER).contains(&self.order) {
            problems.push(format!("order must be in [2, {MAX_ORDER}], got {}", self.order));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            problems.push(format!("alpha must be positive, got {}", self.alpha));
        }
        if !(0.0..1.0).contains(&self.cache_lambda) {
            problems.push(format!("cache_lambda must be in [0, 1), got {}", self.cache_lambda));
        }
        if self.cache_window == 0 {
            problems.push("cache_window must be positive".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidArgument(problems.join("; ")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
struct CtxKey {
    len: u8,
    chars: [char; MAX_ORDER - 1],
}

impl CtxKey {
    fn new(ctx: &[char]) -> Self {
        let mut chars = ['\0'; MAX_ORDER - 1];
        chars[..ctx.len()].copy_from_slice(ctx);
        Self {
            len: ctx.len() as u8,
            chars,
        }
    }

    fn as_string(&self) -> String {
        self.chars[..self.len as usize].iter().collect()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
struct NextCounts {
    total: f64,
    next: FxHashMap<char, f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyLm {
    name: String,
    params: ToyLmParams,
    vocab: BTreeSet<char>,
    counts: FxHashMap<CtxKey, NextCounts>,
    /// Characters of training text consumed, weighted by finetune weight.
    chars_seen: f64,
}

impl ToyLm {
    /// An untrained model whose vocabulary is the base alphabet.
    pub fn new(params: ToyLmParams) -> Result<Self> {
        params.validate()?;
        let vocab = params.base_alphabet.chars().filter(|&c| c != UNK).collect();
        Ok(Self {
            name: "toylm".into(),
            params,
            vocab,
            counts: FxHashMap::default(),
            chars_seen: 0.0,
        })
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn params(&self) -> &ToyLmParams {
        &self.params
    }

    /// Vocabulary size including the unknown symbol.
    pub fn vocab_size(&self) -> usize {
        self.vocab.len() + 1
    }

    pub fn vocab(&self) -> impl Iterator<Item = char> + '_ {
        self.vocab.iter().copied().chain(std::iter::once(UNK))
    }

    pub fn chars_seen(&self) -> f64 {
        self.chars_seen
    }

    /// Raw count of `next` following `context` (context length < order).
    pub fn count(&self, context: &str, next: char) -> f64 {
        let ctx: Vec<char> = context.chars().collect();
        if ctx.len() >= self.params.order {
            return 0.0;
        }
        self.counts
            .get(&CtxKey::new(&ctx))
            .and_then(|n| n.next.get(&next).copied())
            .unwrap_or(0.0)
    }

    fn map_char(&self, c: char) -> char {
        if self.vocab.contains(&c) {
            c
        } else {
            UNK
        }
    }

    fn extend_vocab(&mut self, corpus: &TextDataset) {
        for s in corpus.samples() {
            self.vocab.extend(s.text.chars().filter(|&c| c != UNK));
        }
    }

    fn add_text(&mut self, text: &[char], weight: f64) {
        let n_ctx = self.params.order - 1;
        for i in 0..text.len() {
            let c = text[i];
            for k in 0..=n_ctx.min(i) {
                let entry = self.counts.entry(CtxKey::new(&text[i - k..i])).or_default();
                entry.total += weight;
                *entry.next.entry(c).or_insert(0.0) += weight;
            }
        }
        self.chars_seen += weight * text.len() as f64;
    }

    fn mapped(&self, text: &str) -> Vec<char> {
        text.chars().map(|c| self.map_char(c)).collect()
    }

    /// Train on `corpus` in order. Emits a checkpoint every
    /// `checkpoint_every` characters (plus the untrained state at step 0)
    /// and always a final one; `checkpoint_every == 0` gives only the final.
    pub fn train(
        params: ToyLmParams,
        corpus: &TextDataset,
        checkpoint_every: usize,
    ) -> Result<Vec<LabCheckpoint>> {
        let mut model = ToyLm::new(params)?;
        model.extend_vocab(corpus);
        let mut checkpoints = Vec::new();
        if checkpoint_every > 0 {
            checkpoints.push(LabCheckpoint {
                step: 0,
                model: model.clone(),
            });
        }
        let mut step = 0usize;
        for sample in corpus.samples() {
            let text = model.mapped(&sample.text);
            if checkpoint_every == 0 {
                model.add_text(&text, 1.0);
                step += text.len();
                continue;
            }
            // Grow the sample one char at a time so checkpoints land exactly.
            let n_ctx = model.params.order - 1;
            for i in 0..text.len() {
                let lo = i.saturating_sub(n_ctx);
                model.add_char_at(&text[lo..=i]);
                step += 1;
                if step % checkpoint_every == 0 {
                    checkpoints.push(LabCheckpoint {
                        step,
                        model: model.clone(),
                    });
                }
            }
        }
        if checkpoints.last().map_or(true, |c| c.step != step) {
            checkpoints.push(LabCheckpoint { step, model });
        }
        Ok(checkpoints)
    }

    /// Train to completion and return the final model.
    pub fn fit(params: ToyLmParams, corpus: &TextDataset) -> Result<Self> {
        let mut cps = Self::train(params, corpus, 0)?;
        Ok(cps.pop().expect("train emits a final checkpoint").model)
    }

    // Counts for the last char of `window` under each of its suffix contexts.
    fn add_char_at(&mut self, window: &[char]) {
        let (c, ctx) = window.split_last().expect("non-empty window");
        for k in 0..=ctx.len() {
            let entry = self
                .counts
                .entry(CtxKey::new(&ctx[ctx.len() - k..]))
                .or_default();
            entry.total += 1.0;
            *entry.next.entry(*c).or_insert(0.0) += 1.0;
        }
        self.chars_seen += 1.0;
    }

    /// A new model with `weight` × the corpus counts added.
    pub fn finetune(&self, corpus: &TextDataset, weight: f64) -> Result<Self> {
        if !(weight > 0.0 && weight.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "finetune weight must be positive, got {weight}"
            )));
        }
        let mut model = self.clone();
        model.extend_vocab(corpus);
        for s in corpus.samples() {
            let text = model.mapped(&s.text);
            model.add_text(&text, weight);
        }
        Ok(model)
    }

    /// Smoothed n-gram probability of `next` after `history` (mapped chars),
    /// backing off to the longest context seen in training.
    fn global_prob(&self, history: &[char], next: char) -> f64 {
        let v = self.vocab_size() as f64;
        let alpha = self.params.alpha;
        let max_k = (self.params.order - 1).min(history.len());
        for k in (0..=max_k).rev() {
            let key = CtxKey::new(&history[history.len() - k..]);
            if let Some(nc) = self.counts.get(&key) {
                if nc.total > 0.0 {
                    let c = nc.next.get(&next).copied().unwrap_or(0.0);
                    return (c + alpha) / (nc.total + alpha * v);
                }
            }
        }
        1.0 / v
    }

    /// Full next-character distribution after `history`, keyed by vocabulary
    /// symbol. Mostly useful for checking normalization.
    pub fn next_distribution(&self, history: &str) -> BTreeMap<char, f64> {
        let hist = self.mapped(history);
        let mut cache = Cache::new(self.params.cache_window);
        for &c in &hist {
            cache.push(c);
        }
        self.vocab()
            .map(|c| (c, self.mix(&hist, &cache, c)))
            .collect()
    }

    fn mix(&self, history: &[char], cache: &Cache, next: char) -> f64 {
        let lambda = self.params.cache_lambda;
        let g = self.global_prob(history, next);
        if lambda == 0.0 {
            return g;
        }
        let v = self.vocab_size() as f64;
        let alpha = self.params.alpha;
        let pc = (cache.count(next) + alpha) / (cache.len() as f64 + alpha * v);
        (1.0 - lambda) * g + lambda * pc
    }

    /// Score a prompt one character per token. Position 0 is unscored.
    pub fn logprobs(&self, prompt: &str) -> TokenScoreSeq {
        let raw: Vec<char> = prompt.chars().collect();
        let hist = self.mapped(prompt);
        let mut cache = Cache::new(self.params.cache_window);
        let mut tokens = Vec::with_capacity(raw.len());
        for i in 0..raw.len() {
            let logprob = (i > 0).then(|| self.mix(&hist[..i], &cache, hist[i]).ln());
            tokens.push(ScoredToken {
                text: raw[i].to_string(),
                logprob,
                char_start: i,
            });
            cache.push(hist[i]);
        }
        TokenScoreSeq {
            prompt: prompt.to_string(),
            tokens,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_vec(&self.to_file())?;
        crate::report::write_atomic(path, &json)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let file: CheckpointFile = serde_json::from_slice(&bytes)?;
        Self::from_file(file)
    }

    fn to_file(&self) -> CheckpointFile {
        let mut counts: Vec<(String, f64, Vec<(char, f64)>)> = self
            .counts
            .iter()
            .map(|(k, nc)| {
                let mut next: Vec<(char, f64)> = nc.next.iter().map(|(c, n)| (*c, *n)).collect();
                next.sort_by(|a, b| a.0.cmp(&b.0));
                (k.as_string(), nc.total, next)
            })
            .collect();
        counts.sort_by(|a, b| a.0.cmp(&b.0));
        CheckpointFile {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            name: self.name.clone(),
            params: self.params.clone(),
            vocab: self.vocab.iter().collect(),
            chars_seen: self.chars_seen,
            counts,
        }
    }

    fn from_file(file: CheckpointFile) -> Result<Self> {
        if file.format != CHECKPOINT_FORMAT || file.version != CHECKPOINT_VERSION {
            return Err(Error::Serialization(format!(
                "unsupported checkpoint {} v{}",
                file.format, file.version
            )));
        }
        file.params.validate()?;
        let mut counts = FxHashMap::default();
        for (ctx, total, next) in file.counts {
            let ctx: Vec<char> = ctx.chars().collect();
            if ctx.len() >= file.params.order {
                return Err(Error::Serialization("context longer than order - 1".into()));
            }
            let nc = NextCounts {
                total,
                next: next.into_iter().collect(),
            };
            counts.insert(CtxKey::new(&ctx), nc);
        }
        Ok(Self {
            name: file.name,
            params: file.params,
            vocab: file.vocab.chars().collect(),
            counts,
            chars_seen: file.chars_seen,
        })
    }

    /// Equality of vocabulary, hyperparameters and per-context counts.
    pub fn same_counts(&self, other: &Self) -> bool {
        self.vocab == other.vocab
            && self.params == other.params
            && self.counts.len() == other.counts.len()
            && self
                .counts
                .iter()
                .all(|(k, nc)| other.counts.get(k).is_some_and(|o| o.next == nc.next))
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    version: u32,
    name: String,
    params: ToyLmParams,
    vocab: String,
    chars_seen: f64,
    counts: Vec<(String, f64, Vec<(char, f64)>)>,
}

/// Sliding window of the most recent characters with per-symbol counts.
struct Cache {
    window: usize,
    buf: std::collections::VecDeque<char>,
    counts: FxHashMap<char, u32>,
}

impl Cache {
    fn new(window: usize) -> Self {
        Self {
            window,
            buf: std::collections::VecDeque::with_capacity(window + 1),
            counts: FxHashMap::default(),
        }
    }

    fn push(&mut self, c: char) {
        self.buf.push_back(c);
        *self.counts.entry(c).or_insert(0) += 1;
        if self.buf.len() > self.window {
            let old = self.buf.pop_front().unwrap();
            *self.counts.get_mut(&old).unwrap() -= 1;
        }
    }

    fn len(&self) -> usize {
        self.buf.len()
    }

    fn count(&self, c: char) -> f64 {
        self.counts.get(&c).copied().unwrap_or(0) as f64
    }
}

impl LogprobProvider for ToyLm {
    fn model_id(&self) -> &str {
        &self.name
    }

    fn max_prompt_chars(&self) -> usize {
        1 << 20
    }

    fn score_tokens(&self, prompt: &str) -> Result<TokenScoreSeq> {
        if prompt.is_empty() {
            return Err(Error::InvalidArgument("prompt is empty".into()));
        }
        Ok(self.logprobs(prompt))
    }

    fn describe(&self) -> serde_json::Value {
        serde_json::json!({
            "kind": "toylm",
            "model_id": self.name,
            "order": self.params.order,
            "alpha": self.params.alpha,
            "cache_lambda": self.params.cache_lambda,
            "cache_window": self.params.cache_window,
            "vocab_size": self.vocab_size(),
            "chars_seen": self.chars_seen,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Sample;
    use rand::{Rng, SeedableRng};

    fn ds(texts: &[&str]) -> TextDataset {
        let mut samples: Vec<Sample> = texts
            .iter()
            .enumerate()
            .map(|(i, t)| Sample::new(i.to_string(), *t))
            .collect();
        if samples.len() == 1 {
            samples.push(Sample::new("pad", "\u{FFFF}"));
        }
        TextDataset::new("t", samples).unwrap()
    }

    fn params(order: usize, alpha: f64, lambda: f64) -> ToyLmParams {
        ToyLmParams {
            order,
            alpha,
            cache_lambda: lambda,
            cache_window: 300,
            base_alphabet: String::new(),
        }
    }

    #[test]
    fn counts_and_laplace_by_hand() {
        let m = ToyLm::fit(params(2, 1.0, 0.0), &ds(&["abab"])).unwrap();
        assert_eq!(m.count("a", 'b'), 2.0);
        assert_eq!(m.count("b", 'a'), 1.0);
        assert_eq!(m.vocab_size(), 3);
        let seq = m.logprobs("ab");
        let p = seq.tokens[1].logprob.unwrap().exp();
        assert!((p - 0.6).abs() < 1e-12, "{p}");
    }

    #[test]
    fn training_is_deterministic() {
        let a = ToyLm::fit(params(4, 0.1, 0.3), &ds(&["the cat sat", "on the mat"])).unwrap();
        let b = ToyLm::fit(params(4, 0.1, 0.3), &ds(&["the cat sat", "on the mat"])).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn checkpoints_match_incremental_training() {
        let corpus = ds(&["abcabcabd", "bcdbcd"]);
        let cps = ToyLm::train(params(3, 0.1, 0.3), &corpus, 4).unwrap();
        let steps: Vec<usize> = cps.iter().map(|c| c.step).collect();
        assert_eq!(steps, vec![0, 4, 8, 12, 15]);
        let full = ToyLm::fit(params(3, 0.1, 0.3), &corpus).unwrap();
        assert!(cps.last().unwrap().model.same_counts(&full));
    }

    #[test]
    fn finetune_equals_concatenated_training() {
        let a = ds(&["hello there", "general kenobi"]);
        let b = ds(&["you are a bold one", "xyz"]);
        let both = TextDataset::new(
            "ab",
            a.samples().iter().chain(b.samples()).cloned().enumerate()
                .map(|(i, mut s)| { s.id = i.to_string(); s }).collect(),
        )
        .unwrap();
        let p = params(4, 0.1, 0.3);
        let tuned = ToyLm::fit(p.clone(), &a).unwrap().finetune(&b, 1.0).unwrap();
        let joint = ToyLm::fit(p, &both).unwrap();
        assert!(tuned.same_counts(&joint));
        assert_eq!(tuned.logprobs("hello you"), joint.logprobs("hello you"));
    }

    #[test]
    fn finetune_leaves_original_and_tiny_weight_is_identity() {
        let a = ds(&["abcabc", "cbacba"]);
        let m = ToyLm::fit(params(3, 0.1, 0.3), &a).unwrap();
        let before = m.clone();
        let t = m.finetune(&a, 1e-15).unwrap();
        assert_eq!(m, before);
        let x = m.logprobs("abcacb");
        let y = t.logprobs("abcacb");
        for (u, v) in x.tokens.iter().zip(&y.tokens) {
            if let (Some(u), Some(v)) = (u.logprob, v.logprob) {
                assert!((u.exp() - v.exp()).abs() < 1e-12);
            }
        }
        assert!(m.finetune(&a, 0.0).is_err());
    }

    #[test]
    fn heavy_finetune_raises_target_logprob() {
        let base = ToyLm::fit(params(4, 0.1, 0.3), &ds(&["lorem ipsum dolor", "sit amet"])).unwrap();
        let c = ds(&["zebra quartz fjord", "vexing wombat"]);
        let tuned = base.finetune(&c, 100.0).unwrap();
        let mean = |m: &ToyLm| {
            c.samples()
                .iter()
                .map(|s| {
                    let seq = m.logprobs(&s.text);
                    let v = seq.scored_logprobs(0..seq.len());
                    v.iter().sum::<f64>() / v.len() as f64
                })
                .sum::<f64>()
        };
        assert!(mean(&tuned) > mean(&base));
    }

    #[test]
    fn zero_lambda_is_pure_ngram() {
        let corpus = ds(&["abracadabra", "cadabra"]);
        let m0 = ToyLm::fit(params(3, 0.1, 0.0), &corpus).unwrap();
        let seq = m0.logprobs("abracad");
        let hist: Vec<char> = "abracad".chars().collect();
        for i in 1..hist.len() {
            let g = m0.global_prob(&hist[..i], hist[i]);
            assert_eq!(seq.tokens[i].logprob.unwrap(), g.ln());
        }
    }

    #[test]
    fn cache_helps_repeated_symbol() {
        let p = ToyLmParams {
            base_alphabet: "xyz".into(),
            ..ToyLmParams::default()
        };
        let untrained = ToyLm::new(p.clone()).unwrap();
        let no_cache = ToyLm::new(ToyLmParams { cache_lambda: 0.0, ..p }).unwrap();
        let prompt: String = "xy".repeat(25);
        let prompt = &prompt[..49];
        let probe = format!("{prompt}y");
        let with = untrained.logprobs(&probe).tokens[49].logprob.unwrap();
        let without = no_cache.logprobs(&probe).tokens[49].logprob.unwrap();
        assert!(with > without, "{with} vs {without}");
    }

    #[test]
    fn unknown_chars_map_to_unk() {
        let m = ToyLm::fit(params(3, 0.1, 0.3), &ds(&["aaaa", "abab"])).unwrap();
        let seq = m.logprobs("aé€");
        assert_eq!(seq.tokens.len(), 3);
        assert!(seq.tokens.iter().skip(1).all(|t| t.logprob.unwrap().is_finite()));
        seq.validate().unwrap();
    }

    #[test]
    fn normalization_over_random_states() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let alphabet: Vec<char> = "abcde fgh".chars().collect();
        let rand_text = |rng: &mut rand_chacha::ChaCha8Rng, n: usize| -> String {
            (0..n).map(|_| alphabet[rng.random_range(0..alphabet.len())]).collect()
        };
        for trial in 0..1000 {
            let order = 2 + trial % 5;
            let corpus_texts: Vec<String> = (0..3).map(|_| rand_text(&mut rng, 40)).collect();
            let refs: Vec<&str> = corpus_texts.iter().map(String::as_str).collect();
            // rebuild the model only every 50 trials; contexts vary every trial
            let m = ToyLm::fit(
                ToyLmParams {
                    order,
                    alpha: 0.05 + (trial % 7) as f64 * 0.1,
                    cache_lambda: (trial % 10) as f64 / 10.0,
                    cache_window: 1 + trial % 60,
                    base_alphabet: "xyz".into(),
                },
                &ds(&refs),
            )
            .unwrap();
            let hlen = rng.random_range(0..80);
            let mut hist = rand_text(&mut rng, hlen);
            if trial % 3 == 0 {
                hist.push('€');
            }
            let dist = m.next_distribution(&hist);
            let total: f64 = dist.values().sum();
            assert!((total - 1.0).abs() < 1e-9, "trial {trial}: {total}");
            assert!(dist.values().all(|&p| p > 0.0 && p < 1.0));
        }
    }

    #[test]
    fn save_load_round_trip() {
        let m = ToyLm::fit(ToyLmParams::default(), &ds(&["round trip text", "more text é"]))
            .unwrap()
            .finetune(&ds(&["weighted", "bits"]), 0.3)
            .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        m.save(&path).unwrap();
        let back = ToyLm::load(&path).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.logprobs("more round"), m.logprobs("more round"));
        let again = dir.path().join("m2.json");
        back.save(&again).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&again).unwrap());
    }

    #[test]
    fn invalid_params_rejected() {
        assert!(ToyLm::new(params(1, 0.1, 0.3)).is_err());
        assert!(ToyLm::new(params(9, 0.1, 0.3)).is_err());
        assert!(ToyLm::new(params(4, 0.0, 0.3)).is_err());
        assert!(ToyLm::new(params(4, 0.1, 1.0)).is_err());
    }
}
