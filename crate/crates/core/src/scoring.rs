//! Per-sample contamination evidence and the dataset-level score, plus the
//! loss, Min-K% and zlib-ratio membership-inference baselines.
//!
//! For a target `x` the model is scored twice: on `x` alone (baseline) and
//! with other samples of the same dataset prepended (in-context). The
//! per-sample delta is the in-context minus baseline mean target logprob,
//! averaged over context seeds. The dataset score is the fraction of samples
//! whose delta is strictly negative.

use std::fmt;
use std::io::Write;
use std::ops::Range;
use std::str::FromStr;
use std::sync::Arc;

use flate2::write::ZlibEncoder;
use flate2::Compression;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{Sample, TextDataset};
use crate::error::{Error, Result};
use crate::provider::engine::rebuild_error;
use crate::provider::{
    build_prompt, fit_context, mean_target_logprob, target_token_range, LogprobProvider,
    ScoreCache, TokenScoreSeq, DEFAULT_SEPARATOR, DEFAULT_SKIP_TOKENS,
};

pub const DEFAULT_N_CONTEXT: usize = 1;
pub const DEFAULT_N_SEEDS: u32 = 5;
pub const DEFAULT_K_PERCENT: f64 = 20.0;
pub const ZLIB_LEVEL: u32 = 6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodecConfig {
    pub n_context: usize,
    pub n_seeds: u32,
    pub skip_tokens: usize,
    pub separator: String,
    pub master_seed: u64,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            n_context: DEFAULT_N_CONTEXT,
            n_seeds: DEFAULT_N_SEEDS,
            skip_tokens: DEFAULT_SKIP_TOKENS,
            separator: DEFAULT_SEPARATOR.to_string(),
            master_seed: 0,
        }
    }
}

impl CodecConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut p = Vec::new();
        if self.n_context == 0 {
            p.push("n_context must be at least 1".to_string());
        }
        if self.n_seeds == 0 {
            p.push("n_seeds must be at least 1".to_string());
        }
        p
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaRecord {
    pub sample_id: String,
    pub baseline_mean: f64,
    pub incontext_means: Vec<f64>,
    pub delta: f64,
    pub indicator: bool,
    pub context_ids_per_seed: Vec<Vec<String>>,
}

impl DeltaRecord {
    /// Average the per-seed differences, then apply the strict `< 0` test.
    pub fn from_means(
        sample_id: impl Into<String>,
        baseline_mean: f64,
        incontext_means: Vec<f64>,
        context_ids_per_seed: Vec<Vec<String>>,
    ) -> Self {
        let sum: f64 = incontext_means.iter().map(|ic| ic - baseline_mean).sum();
        let delta = sum / incontext_means.len() as f64;
        Self {
            sample_id: sample_id.into(),
            baseline_mean,
            incontext_means,
            delta,
            indicator: delta < 0.0,
            context_ids_per_seed,
        }
    }
}

/// Seed for the context draw of (`master_seed`, `sample_id`, `seed`). Depends
/// on nothing else, so draws are independent of scheduling.
pub fn context_seed(master_seed: u64, sample_id: &str, seed: u32) -> u64 {
    let mut h = Sha256::new();
    h.update(b"codec-context\0");
    h.update(master_seed.to_le_bytes());
    h.update((sample_id.len() as u64).to_le_bytes());
    h.update(sample_id.as_bytes());
    h.update(seed.to_le_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().unwrap())
}

/// Indices of `n_context` samples drawn uniformly without replacement from
/// the dataset minus the target.
pub fn draw_context(
    dataset_len: usize,
    target_index: usize,
    n_context: usize,
    stream_seed: u64,
) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed);
    rand::seq::index::sample(&mut rng, dataset_len - 1, n_context)
        .into_iter()
        .map(|j| if j >= target_index { j + 1 } else { j })
        .collect()
}

struct PlannedPrompt {
    prompt: String,
    target_start: usize,
    context_ids: Vec<String>,
}

fn plan_incontext(
    dataset: &TextDataset,
    index: usize,
    cfg: &CodecConfig,
    seed: u32,
    max_chars: usize,
) -> PlannedPrompt {
    let samples = dataset.samples();
    let target = &samples[index];
    let picks = draw_context(
        samples.len(),
        index,
        cfg.n_context,
        context_seed(cfg.master_seed, &target.id, seed),
    );
    let ctx: Vec<&Sample> = picks.iter().map(|&i| &samples[i]).collect();
    let ctx = fit_context(&ctx, target, &cfg.separator, max_chars);
    let (prompt, target_start) = build_prompt(&ctx, target, &cfg.separator);
    PlannedPrompt {
        prompt,
        target_start,
        context_ids: ctx.iter().map(|s| s.id.clone()).collect(),
    }
}

fn target_mean(seq: &TokenScoreSeq, target_start: usize, skip: usize) -> Result<f64> {
    let range = target_token_range(seq, target_start)?;
    Ok(mean_target_logprob(seq, range, skip)?.mean_logprob)
}

fn check_codec_pre(dataset: &TextDataset, index: usize, cfg: &CodecConfig) -> Result<()> {
    let problems = cfg.validate();
    if !problems.is_empty() {
        return Err(Error::InvalidArgument(problems.join("; ")));
    }
    if dataset.len() <= cfg.n_context {
        return Err(Error::InvalidArgument(format!(
            "dataset {:?} has {} samples; need more than n_context = {}",
            dataset.name(),
            dataset.len(),
            cfg.n_context
        )));
    }
    if index >= dataset.len() {
        return Err(Error::InvalidArgument(format!("sample index {index} out of range")));
    }
    Ok(())
}

/// Delta record for one sample using context seeds `seeds`.
pub fn codec_delta_seeds(
    provider: &dyn LogprobProvider,
    dataset: &TextDataset,
    sample_index: usize,
    cfg: &CodecConfig,
    seeds: Range<u32>,
) -> Result<DeltaRecord> {
    check_codec_pre(dataset, sample_index, cfg)?;
    let target = &dataset.samples()[sample_index];
    let wrap = |seed: Option<u32>| move |e: Error| e.in_sample(&target.id, seed);
    let base = provider.score_tokens(&target.text).map_err(wrap(None))?;
    let baseline = target_mean(&base, 0, cfg.skip_tokens).map_err(wrap(None))?;
    let mut means = Vec::new();
    let mut ids = Vec::new();
    for seed in seeds {
        let plan = plan_incontext(dataset, sample_index, cfg, seed, provider.max_prompt_chars());
        let seq = provider.score_tokens(&plan.prompt).map_err(wrap(Some(seed)))?;
        means.push(target_mean(&seq, plan.target_start, cfg.skip_tokens).map_err(wrap(Some(seed)))?);
        ids.push(plan.context_ids);
    }
    Ok(DeltaRecord::from_means(target.id.clone(), baseline, means, ids))
}

/// Delta record for one sample over seeds `0..cfg.n_seeds`.
pub fn codec_delta(
    provider: &dyn LogprobProvider,
    dataset: &TextDataset,
    sample_index: usize,
    cfg: &CodecConfig,
) -> Result<DeltaRecord> {
    codec_delta_seeds(provider, dataset, sample_index, cfg, 0..cfg.n_seeds)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedSample {
    pub sample_id: String,
    pub reason: String,
}

/// Per-sample results for a whole dataset. Records are sorted by sample id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodecRun {
    pub records: Vec<DeltaRecord>,
    pub skipped: Vec<SkippedSample>,
}

/// Bare-target scores for every sample, one per dataset sample in order.
pub fn baseline_sequences(
    provider: &dyn LogprobProvider,
    cache: &ScoreCache,
    dataset: &TextDataset,
    max_inflight: usize,
) -> Vec<Result<Arc<TokenScoreSeq>>> {
    let prompts: Vec<String> = dataset.samples().iter().map(|s| s.text.clone()).collect();
    cache.score_all(provider, &prompts, max_inflight)
}

/// Delta records for every sample, scored as one batch through `cache`.
/// Unscorable samples are collected in `skipped`; any other failure aborts.
pub fn codec_run(
    provider: &dyn LogprobProvider,
    cache: &ScoreCache,
    dataset: &TextDataset,
    cfg: &CodecConfig,
    max_inflight: usize,
) -> Result<CodecRun> {
    check_codec_pre(dataset, 0, cfg)?;
    let samples = dataset.samples();
    let n_seeds = cfg.n_seeds as usize;
    let max_chars = provider.max_prompt_chars();
    let plans: Vec<Vec<PlannedPrompt>> = samples
        .iter()
        .enumerate()
        .map(|(i, _)| {
            (0..cfg.n_seeds)
                .map(|s| plan_incontext(dataset, i, cfg, s, max_chars))
                .collect()
        })
        .collect();
    let mut prompts = Vec::with_capacity(samples.len() * (n_seeds + 1));
    for (s, p) in samples.iter().zip(&plans) {
        prompts.push(s.text.clone());
        prompts.extend(p.iter().map(|pp| pp.prompt.clone()));
    }
    let scored = cache.score_all(provider, &prompts, max_inflight);

    let mut records = Vec::new();
    let mut skipped = Vec::new();
    for (i, (sample, plan)) in samples.iter().zip(plans).enumerate() {
        let row = &scored[i * (n_seeds + 1)..(i + 1) * (n_seeds + 1)];
        let outcome = (|| -> Result<DeltaRecord> {
            let base = row[0]
                .as_ref()
                .map_err(|e| rebuild_error(e).in_sample(&sample.id, None))?;
            let baseline = target_mean(base, 0, cfg.skip_tokens).map_err(|e| e.in_sample(&sample.id, None))?;
            let mut means = Vec::with_capacity(n_seeds);
            let mut ids = Vec::with_capacity(n_seeds);
            for (s, pp) in plan.into_iter().enumerate() {
                let seq = row[s + 1]
                    .as_ref()
                    .map_err(|e| rebuild_error(e).in_sample(&sample.id, Some(s as u32)))?;
                means.push(
                    target_mean(seq, pp.target_start, cfg.skip_tokens)
                        .map_err(|e| e.in_sample(&sample.id, Some(s as u32)))?,
                );
                ids.push(pp.context_ids);
            }
            Ok(DeltaRecord::from_means(sample.id.clone(), baseline, means, ids))
        })();
        match outcome {
            Ok(r) => records.push(r),
            Err(e) if e.is_unscorable() => skipped.push(SkippedSample {
                sample_id: sample.id.clone(),
                reason: e.to_string(),
            }),
            Err(e) => return Err(e),
        }
    }
    records.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
    skipped.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
    Ok(CodecRun { records, skipped })
}

/// Fraction of records with a strictly negative delta.
pub fn codec_score(records: &[DeltaRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::Unscorable("no scoreable samples".into()));
    }
    let hits = records.iter().filter(|r| r.indicator).count();
    Ok(hits as f64 / records.len() as f64)
}

fn scored_target(scores: &TokenScoreSeq, target_range: Range<usize>) -> Result<Vec<f64>> {
    let lps = scores.scored_logprobs(target_range);
    if lps.is_empty() {
        return Err(Error::Unscorable("no scored target tokens".into()));
    }
    Ok(lps)
}

/// Mean negative log-likelihood (nats/token) over all scored target tokens.
pub fn vanilla_loss_score(scores: &TokenScoreSeq, target_range: Range<usize>) -> Result<f64> {
    let lps = scored_target(scores, target_range)?;
    let sum: f64 = lps.iter().sum();
    Ok(-(sum / lps.len() as f64))
}

/// Mean NLL over the `max(1, ceil(k% · n))` least likely target tokens.
/// Ties at the cut go to the earliest positions; the selected tokens are
/// summed in position order.
pub fn mink_score(
    scores: &TokenScoreSeq,
    target_range: Range<usize>,
    k_percent: f64,
) -> Result<f64> {
    if !(k_percent > 0.0 && k_percent <= 100.0) {
        return Err(Error::InvalidArgument(format!(
            "k_percent must be in (0, 100], got {k_percent}"
        )));
    }
    let lps = scored_target(scores, target_range)?;
    // Multiply first so integral percentages give exact counts.
    let m = ((k_percent * lps.len() as f64 / 100.0).ceil() as usize).clamp(1, lps.len());
    let mut order: Vec<usize> = (0..lps.len()).collect();
    order.sort_by(|&a, &b| lps[a].total_cmp(&lps[b]).then(a.cmp(&b)));
    let mut chosen = order[..m].to_vec();
    chosen.sort_unstable();
    let sum: f64 = chosen.iter().map(|&i| lps[i]).sum();
    Ok(-(sum / m as f64))
}

/// Compressed size in bytes of `text` as a zlib stream at level 6.
pub fn zlib_len(text: &str) -> Result<usize> {
    let mut enc = ZlibEncoder::new(Vec::new(), Compression::new(ZLIB_LEVEL));
    enc.write_all(text.as_bytes())
        .map_err(|e| Error::Internal(format!("zlib: {e}")))?;
    let out = enc
        .finish()
        .map_err(|e| Error::Internal(format!("zlib: {e}")))?;
    Ok(out.len())
}

/// Total target NLL (nats) divided by the zlib-compressed size of the raw
/// target text.
pub fn zlib_score(
    scores: &TokenScoreSeq,
    target_range: Range<usize>,
    target_text: &str,
) -> Result<f64> {
    if target_text.is_empty() {
        return Err(Error::InvalidArgument("empty target text".into()));
    }
    let lps = scored_target(scores, target_range)?;
    let nll: f64 = -lps.iter().sum::<f64>();
    Ok(nll / zlib_len(target_text)? as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Codec,
    Loss,
    Mink,
    Zlib,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Codec, Method::Loss, Method::Mink, Method::Zlib];

    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Codec => "codec",
            Method::Loss => "loss",
            Method::Mink => "mink",
            Method::Zlib => "zlib",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "codec" => Ok(Method::Codec),
            "loss" | "vanilla" => Ok(Method::Loss),
            "mink" | "min-k" => Ok(Method::Mink),
            "zlib" => Ok(Method::Zlib),
            other => Err(Error::InvalidArgument(format!("unknown method {other:?}"))),
        }
    }
}

/// Map a raw score so that larger always means "more likely contaminated".
pub fn orient(method: Method, raw: f64) -> f64 {
    match method {
        Method::Codec => raw,
        Method::Loss | Method::Mink | Method::Zlib => -raw,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::provider::seq_from;
    use proptest::prelude::*;

    fn rec(id: &str, delta: f64) -> DeltaRecord {
        DeltaRecord::from_means(id, 0.0, vec![delta], vec![vec![]])
    }

    #[test]
    fn delta_record_examples() {
        let r = DeltaRecord::from_means("x", -2.0, vec![-1.8, -1.9, -2.1, -2.0, -1.7], vec![]);
        assert!((r.delta - 0.1).abs() < 1e-12);
        assert!(!r.indicator);
        let r = DeltaRecord::from_means("x", -2.0, vec![-2.0; 5], vec![]);
        assert_eq!(r.delta, 0.0);
        assert!(!r.indicator);
    }

    #[test]
    fn codec_score_examples() {
        let rs: Vec<_> = [-0.1, 0.2, -0.3, 0.0].iter().map(|&d| rec("a", d)).collect();
        assert_eq!(codec_score(&rs).unwrap(), 0.5);
        let neg: Vec<_> = (0..4).map(|_| rec("a", -1.0)).collect();
        assert_eq!(codec_score(&neg).unwrap(), 1.0);
        let pos: Vec<_> = (0..4).map(|_| rec("a", 1.0)).collect();
        assert_eq!(codec_score(&pos).unwrap(), 0.0);
        assert!(codec_score(&[]).is_err());
    }

    #[test]
    fn context_draw_excludes_target() {
        for t in 0..5 {
            for seed in 0..50 {
                let picks = draw_context(5, t, 3, seed);
                assert_eq!(picks.len(), 3);
                assert!(!picks.contains(&t));
                let mut u = picks.clone();
                u.sort();
                u.dedup();
                assert_eq!(u.len(), 3);
            }
        }
        assert_eq!(draw_context(2, 0, 1, 9), vec![1]);
        assert_eq!(draw_context(2, 1, 1, 9), vec![0]);
    }

    #[test]
    fn baseline_examples() {
        let s = seq_from(&[("p", None), ("a", Some(-1.0)), ("b", Some(-2.0)), ("c", Some(-3.0))]);
        assert_eq!(vanilla_loss_score(&s, 0..4).unwrap(), 2.0);
        let one = seq_from(&[("p", None), ("a", Some(-0.5))]);
        assert_eq!(vanilla_loss_score(&one, 0..2).unwrap(), 0.5);

        let five = seq_from(&[
            ("p", None),
            ("a", Some(-1.0)),
            ("b", Some(-2.0)),
            ("c", Some(-3.0)),
            ("d", Some(-4.0)),
            ("e", Some(-5.0)),
        ]);
        assert_eq!(mink_score(&five, 0..6, 40.0).unwrap(), 4.5);
        assert_eq!(mink_score(&s, 0..4, 1.0).unwrap(), 3.0);
        assert_eq!(
            mink_score(&five, 0..6, 100.0).unwrap(),
            vanilla_loss_score(&five, 0..6).unwrap()
        );
        assert!(mink_score(&five, 0..6, 0.0).is_err());
        assert!(vanilla_loss_score(&five, 0..1).is_err());
    }

    #[test]
    fn loss_is_negated_mean_target_logprob() {
        let s = seq_from(&[("p", None), ("a", Some(-0.3)), ("b", Some(-2.7)), ("c", Some(-0.1))]);
        let m = mean_target_logprob(&s, 0..4, 0).unwrap().mean_logprob;
        assert_eq!(vanilla_loss_score(&s, 0..4).unwrap(), -m);
    }

    #[test]
    fn zlib_repetitive_beats_random() {
        let rep: String = "ab".repeat(100);
        let rnd: String = {
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            use rand::Rng;
            let al: Vec<char> = ('a'..='z').chain('0'..='9').collect();
            (0..200).map(|_| al[rng.random_range(0..al.len())]).collect()
        };
        let pieces = |t: &str| -> Vec<(String, Option<f64>)> {
            t.chars().map(|c| (c.to_string(), Some(-1.0))).collect()
        };
        let mk = |t: &str| {
            let p = pieces(t);
            let r: Vec<(&str, Option<f64>)> = p.iter().map(|(a, b)| (a.as_str(), *b)).collect();
            seq_from(&r)
        };
        let a = zlib_score(&mk(&rep), 0..200, &rep).unwrap();
        let b = zlib_score(&mk(&rnd), 0..200, &rnd).unwrap();
        assert!(zlib_len(&rep).unwrap() < zlib_len(&rnd).unwrap());
        assert!(a > b);
    }

    #[test]
    fn zlib_linear_in_nll() {
        let s1 = seq_from(&[("p", None), ("q", Some(-1.25)), ("r", Some(-0.5))]);
        let s2 = seq_from(&[("p", None), ("q", Some(-2.5)), ("r", Some(-1.0))]);
        let a = zlib_score(&s1, 0..3, "pqr").unwrap();
        let b = zlib_score(&s2, 0..3, "pqr").unwrap();
        assert_eq!(b, 2.0 * a);
    }

    #[test]
    fn orient_examples() {
        assert_eq!(orient(Method::Codec, 0.8), 0.8);
        assert_eq!(orient(Method::Loss, 2.0), -2.0);
    }

    proptest! {
        #[test]
        fn orientation_reverses_ranking(xs in proptest::collection::vec(-10.0f64..10.0, 1..30)) {
            let mut raw: Vec<usize> = (0..xs.len()).collect();
            raw.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
            let o: Vec<f64> = xs.iter().map(|&x| orient(Method::Loss, x)).collect();
            for w in raw.windows(2) {
                prop_assert!(o[w[0]] >= o[w[1]]);
            }
        }

        #[test]
        fn codec_score_bounded(ds in proptest::collection::vec(-5.0f64..5.0, 1..50)) {
            let rs: Vec<_> = ds.iter().map(|&d| rec("a", d)).collect();
            let s = codec_score(&rs).unwrap();
            prop_assert!((0.0..=1.0).contains(&s));
        }
    }
}
