//! Dataset-level scores, seen/unseen AUC, ablation sweeps and per-token
//! delta traces.

use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::dataset::{sample_subset, Sample, TextDataset};
use crate::error::{Error, Result};
use crate::provider::engine::rebuild_error;
use crate::provider::{build_prompt, fit_context, score_batch, LogprobProvider, ScoreCache, ScoredToken};
use crate::report::digest_json;
use crate::scoring::{
    baseline_sequences, codec_run, codec_score, mink_score, orient, vanilla_loss_score,
    zlib_score, CodecConfig, DeltaRecord, Method, DEFAULT_K_PERCENT, ZLIB_LEVEL,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetScore {
    pub dataset_name: String,
    pub model_id: String,
    pub method: Method,
    pub value: f64,
    pub oriented_value: f64,
    pub n_samples_scored: usize,
    pub n_samples_skipped: usize,
    pub config_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AucResult {
    pub auc: f64,
    pub n_pos: usize,
    pub n_neg: usize,
    pub ties: usize,
}

/// Ground-truth membership of a dataset in an audit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Seen,
    Unseen,
}

impl Label {
    pub fn as_str(&self) -> &'static str {
        match self {
            Label::Seen => "seen",
            Label::Unseen => "unseen",
        }
    }
}

impl std::str::FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "seen" => Ok(Label::Seen),
            "unseen" => Ok(Label::Unseen),
            other => Err(Error::InvalidArgument(format!(
                "label must be seen or unseen, got {other:?}"
            ))),
        }
    }
}

/// A sample left out of one method's aggregate.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedRecord {
    pub dataset: String,
    pub method: Method,
    pub sample_id: String,
    pub reason: String,
}

/// Settings shared by every method in a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub codec: CodecConfig,
    pub k_percent: f64,
    /// Concurrency only; never changes a result.
    pub max_inflight: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            codec: CodecConfig::default(),
            k_percent: DEFAULT_K_PERCENT,
            max_inflight: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetEvaluation {
    pub scores: Vec<DatasetScore>,
    /// Per-sample CoDeC records, empty unless codec was requested.
    pub records: Vec<DeltaRecord>,
    pub skipped: Vec<SkippedRecord>,
}

/// Hex sha256 over the ids and texts of a dataset, in order.
pub fn dataset_digest(dataset: &TextDataset) -> String {
    let mut h = Sha256::new();
    for s in dataset.samples() {
        for part in [s.id.as_bytes(), s.text.as_bytes()] {
            h.update((part.len() as u64).to_le_bytes());
            h.update(part);
        }
    }
    hex::encode(h.finalize())
}

/// Digest of everything that can change one method's score on one dataset.
pub fn score_config_hash(
    provider: &dyn LogprobProvider,
    dataset: &TextDataset,
    method: Method,
    cfg: &EvalConfig,
) -> String {
    let mut v = json!({
        "provider": provider.describe(),
        "dataset": {
            "name": dataset.name(),
            "n_samples": dataset.len(),
            "digest": dataset_digest(dataset),
        },
        "method": method,
    });
    match method {
        Method::Codec => v["codec"] = json!(cfg.codec),
        Method::Mink => v["k_percent"] = json!(cfg.k_percent),
        Method::Zlib => v["zlib_level"] = json!(ZLIB_LEVEL),
        Method::Loss => {}
    }
    digest_json(&v)
}

/// Score `dataset` with every method in `methods`. Bare-target scores are
/// shared between the baselines and the CoDeC baseline pass via `cache`.
pub fn evaluate_dataset(
    provider: &dyn LogprobProvider,
    cache: &ScoreCache,
    dataset: &TextDataset,
    methods: &[Method],
    cfg: &EvalConfig,
) -> Result<DatasetEvaluation> {
    let mut seen = Vec::new();
    let methods: Vec<Method> = methods
        .iter()
        .copied()
        .filter(|m| {
            let fresh = !seen.contains(m);
            seen.push(*m);
            fresh
        })
        .collect();
    let mut out = DatasetEvaluation {
        scores: Vec::new(),
        records: Vec::new(),
        skipped: Vec::new(),
    };
    let bare = methods
        .iter()
        .any(|m| *m != Method::Codec)
        .then(|| baseline_sequences(provider, cache, dataset, cfg.max_inflight));

    for method in methods {
        let skip = |sample_id: &str, reason: String| SkippedRecord {
            dataset: dataset.name().to_string(),
            method,
            sample_id: sample_id.to_string(),
            reason,
        };
        let (value, n_scored, skipped) = match method {
            Method::Codec => {
                let run = codec_run(provider, cache, dataset, &cfg.codec, cfg.max_inflight)?;
                let skipped: Vec<_> = run
                    .skipped
                    .iter()
                    .map(|s| skip(&s.sample_id, s.reason.clone()))
                    .collect();
                let value = codec_score(&run.records).map_err(|_| no_scoreable(dataset, method))?;
                let n = run.records.len();
                out.records = run.records;
                (value, n, skipped)
            }
            _ => {
                let bare = bare.as_ref().expect("bare scores requested");
                let mut raws = Vec::new();
                let mut skipped = Vec::new();
                for (sample, seq) in dataset.samples().iter().zip(bare) {
                    let seq = match seq {
                        Ok(s) => s,
                        Err(e) => return Err(rebuild_error(e).in_sample(&sample.id, None)),
                    };
                    let range = 0..seq.len();
                    let raw = match method {
                        Method::Loss => vanilla_loss_score(seq, range),
                        Method::Mink => mink_score(seq, range, cfg.k_percent),
                        Method::Zlib => zlib_score(seq, range, &sample.text),
                        Method::Codec => unreachable!(),
                    };
                    match raw {
                        Ok(v) => raws.push(v),
                        Err(e) if e.is_unscorable() => skipped.push(skip(&sample.id, e.to_string())),
                        Err(e) => return Err(e.in_sample(&sample.id, None)),
                    }
                }
                if raws.is_empty() {
                    return Err(no_scoreable(dataset, method));
                }
                let value = raws.iter().sum::<f64>() / raws.len() as f64;
                (value, raws.len(), skipped)
            }
        };
        out.scores.push(DatasetScore {
            dataset_name: dataset.name().to_string(),
            model_id: provider.model_id().to_string(),
            method,
            value,
            oriented_value: orient(method, value),
            n_samples_scored: n_scored,
            n_samples_skipped: skipped.len(),
            config_hash: score_config_hash(provider, dataset, method, cfg),
        });
        out.skipped.extend(skipped);
    }
    Ok(out)
}

fn no_scoreable(dataset: &TextDataset, method: Method) -> Error {
    Error::Unscorable(format!(
        "dataset {:?} has no scoreable samples for {method}",
        dataset.name()
    ))
}

/// One method's dataset-level score.
pub fn dataset_score(
    provider: &dyn LogprobProvider,
    cache: &ScoreCache,
    dataset: &TextDataset,
    method: Method,
    cfg: &EvalConfig,
) -> Result<DatasetScore> {
    let mut ev = evaluate_dataset(provider, cache, dataset, &[method], cfg)?;
    Ok(ev.scores.remove(0))
}

/// Probability that a random positive outranks a random negative, ties
/// counted half, by full pairwise enumeration.
pub fn auc(seen: &[f64], unseen: &[f64]) -> Result<AucResult> {
    if seen.is_empty() || unseen.is_empty() {
        return Err(Error::InvalidArgument(
            "AUC needs at least one seen and one unseen score".into(),
        ));
    }
    if seen.iter().chain(unseen).any(|v| v.is_nan()) {
        return Err(Error::InvalidArgument("AUC input contains NaN".into()));
    }
    let (mut wins, mut ties) = (0usize, 0usize);
    for &p in seen {
        for &n in unseen {
            if p > n {
                wins += 1;
            } else if p == n {
                ties += 1;
            }
        }
    }
    // Half-units keep the numerator an integer.
    let num = (2 * wins + ties) as f64;
    let den = (2 * seen.len() * unseen.len()) as f64;
    Ok(AucResult {
        auc: num / den,
        n_pos: seen.len(),
        n_neg: unseen.len(),
        ties,
    })
}

/// min(seen) − max(unseen). Positive means the classes do not overlap.
pub fn separation_gap(seen: &[f64], unseen: &[f64]) -> f64 {
    let lo = seen.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = unseen.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    lo - hi
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextSweepRow {
    pub n_context: usize,
    pub dataset: String,
    pub seen: bool,
    /// Mean over context master seeds.
    pub score: f64,
    pub min: f64,
    pub max: f64,
    /// Separation gap at this `n_context`, repeated on every row.
    pub gap: f64,
}

/// CoDeC at each context size for every dataset. Each cell is repeated over
/// `n_repeats` master seeds starting at `cfg.codec.master_seed`.
pub fn sweep_context_size(
    provider: &dyn LogprobProvider,
    cache: &ScoreCache,
    seen: &[TextDataset],
    unseen: &[TextDataset],
    n_values: &[usize],
    n_repeats: usize,
    cfg: &EvalConfig,
) -> Result<Vec<ContextSweepRow>> {
    if seen.is_empty() || unseen.is_empty() || n_values.is_empty() || n_repeats == 0 {
        return Err(Error::InvalidArgument(
            "context sweep needs seen and unseen datasets, n values and repeats".into(),
        ));
    }
    let smallest = seen.iter().chain(unseen).map(|d| d.len()).min().unwrap_or(0);
    if let Some(&n) = n_values.iter().find(|&&n| n >= smallest) {
        return Err(Error::InvalidArgument(format!(
            "n_context {n} must be below the smallest dataset size {smallest}"
        )));
    }
    let mut rows = Vec::new();
    for &n in n_values {
        let mut block = Vec::new();
        for (d, is_seen) in seen.iter().map(|d| (d, true)).chain(unseen.iter().map(|d| (d, false))) {
            let values = (0..n_repeats as u64)
                .map(|r| {
                    let mut c = cfg.clone();
                    c.codec.n_context = n;
                    c.codec.master_seed = cfg.codec.master_seed.wrapping_add(r);
                    dataset_score(provider, cache, d, Method::Codec, &c).map(|s| s.value)
                })
                .collect::<Result<Vec<f64>>>()?;
            let (min, max, mean) = spread(&values);
            block.push(ContextSweepRow {
                n_context: n,
                dataset: d.name().to_string(),
                seen: is_seen,
                score: mean,
                min,
                max,
                gap: 0.0,
            });
        }
        let s: Vec<f64> = block.iter().filter(|r| r.seen).map(|r| r.score).collect();
        let u: Vec<f64> = block.iter().filter(|r| !r.seen).map(|r| r.score).collect();
        let gap = separation_gap(&s, &u);
        for r in &mut block {
            r.gap = gap;
        }
        rows.extend(block);
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizeSweepRow {
    pub size: usize,
    pub n_repeats: usize,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

impl SizeSweepRow {
    pub fn spread(&self) -> f64 {
        self.max - self.min
    }
}

/// CoDeC on a fixed subsample of each size, repeated over `n_repeats`
/// context master seeds. The subsample depends only on `subsample_seed`.
pub fn sweep_dataset_size(
    provider: &dyn LogprobProvider,
    cache: &ScoreCache,
    dataset: &TextDataset,
    sizes: &[usize],
    n_repeats: usize,
    subsample_seed: u64,
    cfg: &EvalConfig,
) -> Result<Vec<SizeSweepRow>> {
    if n_repeats == 0 {
        return Err(Error::InvalidArgument("n_repeats must be at least 1".into()));
    }
    let mut rows = Vec::new();
    for &size in sizes {
        if size > dataset.len() {
            return Err(Error::InvalidArgument(format!(
                "size {size} exceeds dataset size {}",
                dataset.len()
            )));
        }
        let sub = if size == dataset.len() {
            dataset.clone()
        } else {
            sample_subset(dataset, size, subsample_seed)?
        };
        let values = (0..n_repeats as u64)
            .map(|r| {
                let mut c = cfg.clone();
                c.codec.master_seed = cfg.codec.master_seed.wrapping_add(r);
                dataset_score(provider, cache, &sub, Method::Codec, &c).map(|s| s.value)
            })
            .collect::<Result<Vec<f64>>>()?;
        let (min, max, mean) = spread(&values);
        rows.push(SizeSweepRow {
            size,
            n_repeats,
            mean,
            min,
            max,
        });
    }
    Ok(rows)
}

fn spread(values: &[f64]) -> (f64, f64, f64) {
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (min, max, values.iter().sum::<f64>() / values.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceToken {
    /// Index among the bare target's tokens.
    pub position: usize,
    pub token_text: String,
    /// In-context minus bare logprob; `None` where the two tokenizations
    /// disagree or a side is unscored.
    pub delta: Option<f64>,
    /// Inside the leading `skip_tokens` window.
    pub skipped: bool,
}

/// Per-token change in target logprob when `context` is prepended. Tokens
/// are matched by character offset.
pub fn token_delta_trace(
    provider: &dyn LogprobProvider,
    context: &[&Sample],
    target: &Sample,
    cfg: &CodecConfig,
) -> Result<Vec<TraceToken>> {
    let ctx = fit_context(context, target, &cfg.separator, provider.max_prompt_chars());
    let (prompt, start) = build_prompt(&ctx, target, &cfg.separator);
    let mut scored = score_batch(provider, &[target.text.clone(), prompt], 2).into_iter();
    let bare = scored.next().expect("two results")?;
    let with = scored.next().expect("two results")?;

    let by_offset: std::collections::HashMap<usize, &ScoredToken> = with
        .tokens
        .iter()
        .filter(|t| t.char_start >= start)
        .map(|t| (t.char_start - start, t))
        .collect();
    let trace: Vec<TraceToken> = bare
        .tokens
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let delta = by_offset
                .get(&t.char_start)
                .filter(|w| w.text == t.text)
                .and_then(|w| Some(w.logprob? - t.logprob?));
            TraceToken {
                position: i,
                token_text: t.text.clone(),
                delta,
                skipped: i < cfg.skip_tokens,
            }
        })
        .collect();
    if trace.iter().all(|t| t.delta.is_none()) {
        return Err(Error::Unscorable(format!(
            "sample {}: no target token aligns between the two prompts",
            target.id
        )));
    }
    Ok(trace)
}

/// Mean delta over aligned tokens outside the skip window.
pub fn trace_mean(trace: &[TraceToken]) -> Option<f64> {
    let kept: Vec<f64> = trace
        .iter()
        .filter(|t| !t.skipped)
        .filter_map(|t| t.delta)
        .collect();
    (!kept.is_empty()).then(|| kept.iter().sum::<f64>() / kept.len() as f64)
}

pub const CONTEXT_SWEEP_HEADER: [&str; 7] = ["n_context", "dataset", "label", "score", "min", "max", "gap"];
pub const SIZE_SWEEP_HEADER: [&str; 6] = ["size", "n_repeats", "mean", "min", "max", "spread"];
pub const TRACE_HEADER: [&str; 5] = ["position", "token", "delta", "skipped", "aligned"];

fn csv_err(e: csv::Error) -> Error {
    Error::Serialization(format!("csv: {e}"))
}

fn finish_csv(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w.into_inner().map_err(|e| Error::Serialization(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Internal(e.to_string()))
}

fn fmt_f(v: f64) -> String {
    format!("{v:.6}")
}

pub fn context_sweep_csv(rows: &[ContextSweepRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(CONTEXT_SWEEP_HEADER).map_err(csv_err)?;
    for r in rows {
        let label = if r.seen { "seen" } else { "unseen" };
        w.write_record([
            r.n_context.to_string(),
            r.dataset.clone(),
            label.to_string(),
            fmt_f(r.score),
            fmt_f(r.min),
            fmt_f(r.max),
            fmt_f(r.gap),
        ])
        .map_err(csv_err)?;
    }
    finish_csv(w)
}

pub fn size_sweep_csv(rows: &[SizeSweepRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(SIZE_SWEEP_HEADER).map_err(csv_err)?;
    for r in rows {
        w.write_record([
            r.size.to_string(),
            r.n_repeats.to_string(),
            fmt_f(r.mean),
            fmt_f(r.min),
            fmt_f(r.max),
            fmt_f(r.spread()),
        ])
        .map_err(csv_err)?;
    }
    finish_csv(w)
}

pub fn trace_csv(trace: &[TraceToken]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(TRACE_HEADER).map_err(csv_err)?;
    for t in trace {
        w.write_record([
            t.position.to_string(),
            t.token_text.clone(),
            t.delta.map(|d| format!("{d:.9}")).unwrap_or_default(),
            t.skipped.to_string(),
            t.delta.is_some().to_string(),
        ])
        .map_err(csv_err)?;
    }
    finish_csv(w)
}
