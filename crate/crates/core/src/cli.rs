//! Command-line front end: `score`, `auc`, `trace` and the `lab` tools.
//!
//! Settings come from an optional JSON config file, then command-line flags
//! override them. Exit codes: 0 ok, 2 configuration, 3 provider or
//! protocol, 4 data.

use std::ffi::OsString;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use std::io::Write;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::dataset::{
    load_dataset, sample_subset, DatasetFormat, Sample, TextDataset, DEFAULT_CHUNK_CHARS,
    DEFAULT_MAX_SAMPLES,
};
use crate::error::{Error, Result};
use crate::evaluation::{
    auc, dataset_digest, evaluate_dataset, token_delta_trace, trace_csv, trace_mean, DatasetScore,
    EvalConfig, Label,
};
use crate::provider::{HttpProvider, LogprobProvider, ProviderConfig, RetryPolicy, ScoreCache, DEFAULT_SEPARATOR, DEFAULT_SKIP_TOKENS};
use crate::report::{
    emit_deltas_jsonl, emit_json, emit_markdown_table, emit_scatter_svg, emit_trace_svg,
    write_atomic, AuditReport, DatasetInfo, MethodAuc, Provenance, ToolInfo, SCHEMA_VERSION,
};
use crate::scoring::{
    codec_run, codec_score, context_seed, draw_context, CodecConfig, Method, DEFAULT_K_PERCENT,
    DEFAULT_N_CONTEXT, DEFAULT_N_SEEDS,
};
use crate::toylm::lab::{concat_corpora, crop_dataset, generate_corpus, CorpusSpec};
use crate::toylm::{ToyLm, ToyLmParams};

// Stdout writes ignore errors so a closed pipe (`| head`) is not a panic.
fn out(bytes: &[u8]) {
    let _ = std::io::stdout().lock().write_all(bytes);
}

macro_rules! outln {
    ($($t:tt)*) => {
        out(format!("{}\n", format_args!($($t)*)).as_bytes())
    };
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderKind {
    #[default]
    Http,
    Toylm,
}

impl FromStr for ProviderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "http" => Ok(ProviderKind::Http),
            "toylm" => Ok(ProviderKind::Toylm),
            other => Err(Error::InvalidArgument(format!(
                "provider must be http or toylm, got {other:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmitFormat {
    Json,
    Csv,
    Md,
    Svg,
}

impl FromStr for EmitFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(EmitFormat::Json),
            "csv" => Ok(EmitFormat::Csv),
            "md" | "markdown" => Ok(EmitFormat::Md),
            "svg" => Ok(EmitFormat::Svg),
            other => Err(Error::InvalidArgument(format!(
                "emit format must be json, csv, md or svg, got {other:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub path: PathBuf,
    #[serde(default)]
    pub format: Option<DatasetFormat>,
    #[serde(default)]
    pub label: Option<Label>,
}

impl DatasetSpec {
    /// `path` or `path:format`.
    pub fn parse(s: &str) -> Result<Self> {
        if let Some((p, f)) = s.rsplit_once(':') {
            if let Ok(format) = f.parse::<DatasetFormat>() {
                if p.is_empty() {
                    return Err(Error::InvalidArgument(format!("dataset {s:?} has no path")));
                }
                return Ok(Self {
                    path: p.into(),
                    format: Some(format),
                    label: None,
                });
            }
        }
        Ok(Self {
            path: s.into(),
            format: None,
            label: None,
        })
    }

    /// The explicit format, else one guessed from the path.
    pub fn resolved_format(&self) -> DatasetFormat {
        self.format.unwrap_or_else(|| {
            if self.path.is_dir() {
                DatasetFormat::TextDir
            } else if self.path.extension().is_some_and(|e| e == "jsonl") {
                DatasetFormat::Jsonl
            } else {
                DatasetFormat::RawText
            }
        })
    }
}

/// Everything a run depends on. Loaded from `--config`, then overridden by
/// flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub datasets: Vec<DatasetSpec>,
    pub provider: ProviderKind,
    pub endpoint: String,
    pub model: String,
    /// Environment variable holding the bearer token.
    pub auth_env_var: Option<String>,
    pub max_prompt_chars: usize,
    pub timeout_secs: u64,
    pub retry: RetryPolicy,
    pub toylm_checkpoint: Option<PathBuf>,
    pub methods: Vec<Method>,
    pub n_context: usize,
    pub n_seeds: u32,
    pub skip_tokens: usize,
    pub separator: String,
    pub seed: u64,
    pub k_percent: f64,
    pub max_samples: usize,
    pub chunk_chars: usize,
    pub out_dir: PathBuf,
    pub emit: Vec<EmitFormat>,
    pub max_inflight: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let http = ProviderConfig::default();
        Self {
            datasets: Vec::new(),
            provider: ProviderKind::Http,
            endpoint: http.endpoint,
            model: http.model_id,
            auth_env_var: None,
            max_prompt_chars: http.max_prompt_chars,
            timeout_secs: http.timeout_secs,
            retry: http.retry,
            toylm_checkpoint: None,
            methods: vec![Method::Codec],
            n_context: DEFAULT_N_CONTEXT,
            n_seeds: DEFAULT_N_SEEDS,
            skip_tokens: DEFAULT_SKIP_TOKENS,
            separator: DEFAULT_SEPARATOR.to_string(),
            seed: 0,
            k_percent: DEFAULT_K_PERCENT,
            max_samples: DEFAULT_MAX_SAMPLES,
            chunk_chars: DEFAULT_CHUNK_CHARS,
            out_dir: PathBuf::from("codec-out"),
            emit: vec![EmitFormat::Json],
            max_inflight: http.max_inflight,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| {
            Error::InvalidArgument(format!("cannot read config {}: {e}", path.display()))
        })?;
        serde_json::from_slice(&bytes).map_err(|e| {
            Error::InvalidArgument(format!("config {}: {e}", path.display()))
        })
    }

    pub fn codec(&self) -> CodecConfig {
        CodecConfig {
            n_context: self.n_context,
            n_seeds: self.n_seeds,
            skip_tokens: self.skip_tokens,
            separator: self.separator.clone(),
            master_seed: self.seed,
        }
    }

    pub fn eval(&self) -> EvalConfig {
        EvalConfig {
            codec: self.codec(),
            k_percent: self.k_percent,
            max_inflight: self.max_inflight,
        }
    }

    pub fn http(&self) -> ProviderConfig {
        ProviderConfig {
            endpoint: self.endpoint.clone(),
            model_id: self.model.clone(),
            max_prompt_chars: self.max_prompt_chars,
            max_inflight: self.max_inflight,
            retry: self.retry.clone(),
            auth_env_var: self.auth_env_var.clone(),
            timeout_secs: self.timeout_secs,
        }
    }

    /// Every problem with the configuration, not just the first.
    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        if self.datasets.is_empty() {
            p.push("no dataset given (use --dataset or \"datasets\" in the config)".to_string());
        }
        match self.provider {
            ProviderKind::Http => p.extend(self.http().validate()),
            ProviderKind::Toylm => {
                if self.toylm_checkpoint.is_none() {
                    p.push("provider toylm needs --toylm-checkpoint".to_string());
                }
                if self.max_inflight < 1 {
                    p.push("max_inflight must be at least 1".to_string());
                }
            }
        }
        p.extend(self.codec().validate());
        if self.methods.is_empty() {
            p.push("no method selected".to_string());
        }
        if !(self.k_percent > 0.0 && self.k_percent <= 100.0) {
            p.push(format!("k_percent must be in (0, 100], got {}", self.k_percent));
        }
        if self.max_samples < 2 {
            p.push(format!("max_samples must be at least 2, got {}", self.max_samples));
        }
        if self.chunk_chars == 0 {
            p.push("chunk_chars must be positive".to_string());
        }
        if self.max_samples <= self.n_context {
            p.push(format!(
                "max_samples ({}) must exceed n_context ({})",
                self.max_samples, self.n_context
            ));
        }
        p
    }

    /// The configuration as recorded in reports: no output location or
    /// concurrency setting, and only the active provider's fields.
    pub fn echo(&self) -> Value {
        let mut v = serde_json::to_value(self).expect("config serializes");
        let obj = v.as_object_mut().expect("config is an object");
        obj.remove("out_dir");
        obj.remove("max_inflight");
        let drop: &[&str] = match self.provider {
            ProviderKind::Http => &["toylm_checkpoint"],
            ProviderKind::Toylm => &[
                "endpoint",
                "model",
                "auth_env_var",
                "max_prompt_chars",
                "timeout_secs",
                "retry",
            ],
        };
        for k in drop {
            obj.remove(*k);
        }
        v
    }
}

fn invalid(problems: Vec<String>) -> Result<()> {
    if problems.is_empty() {
        return Ok(());
    }
    let mut msg = format!("{} configuration problem(s):", problems.len());
    for p in problems {
        msg.push_str("\n  - ");
        msg.push_str(&p);
    }
    Err(Error::InvalidArgument(msg))
}

#[derive(Parser, Debug)]
#[command(name = "codec-audit", version, about = "Dataset-level contamination auditing")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Score datasets and write a report.
    Score(RunArgs),
    /// Score seen and unseen datasets and report AUC per method.
    Auc(RunArgs),
    /// Per-token logprob change for one sample.
    Trace(TraceArgs),
    /// Toy LM laboratory.
    #[command(subcommand)]
    Lab(LabCommand),
}

#[derive(Args, Debug, Default)]
pub struct RunArgs {
    /// JSON config file; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset as PATH or PATH:FORMAT (jsonl, text_dir, raw_text). Repeatable.
    #[arg(long = "dataset")]
    pub datasets: Vec<String>,
    /// Label for the dataset at the same position (seen or unseen).
    #[arg(long = "label")]
    pub labels: Vec<String>,
    /// http or toylm.
    #[arg(long)]
    pub provider: Option<String>,
    #[arg(long)]
    pub endpoint: Option<String>,
    #[arg(long)]
    pub model: Option<String>,
    /// Environment variable holding the bearer token.
    #[arg(long)]
    pub auth_env_var: Option<String>,
    #[arg(long)]
    pub max_prompt_chars: Option<usize>,
    #[arg(long)]
    pub toylm_checkpoint: Option<PathBuf>,
    /// codec, loss, mink or zlib. Repeatable.
    #[arg(long = "method")]
    pub methods: Vec<String>,
    #[arg(long)]
    pub n_context: Option<usize>,
    /// Number of context seeds per sample.
    #[arg(long)]
    pub seeds: Option<u32>,
    #[arg(long)]
    pub skip_tokens: Option<usize>,
    #[arg(long)]
    pub k_percent: Option<f64>,
    #[arg(long)]
    pub max_samples: Option<usize>,
    #[arg(long)]
    pub chunk_chars: Option<usize>,
    /// Master seed for context draws and subsampling.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// json, csv, md or svg. Repeatable; json is always written.
    #[arg(long = "emit")]
    pub emit: Vec<String>,
    #[arg(long)]
    pub max_inflight: Option<usize>,
    /// Report timestamp (RFC 3339). Defaults to SOURCE_DATE_EPOCH, else now.
    #[arg(long)]
    pub timestamp: Option<String>,
}

#[derive(Args, Debug)]
pub struct TraceArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long)]
    pub sample_id: String,
}

#[derive(Subcommand, Debug)]
pub enum LabCommand {
    /// Write synthetic corpora as JSONL files.
    Gen(GenArgs),
    /// Train a toy LM, optionally writing intermediate checkpoints.
    Train(TrainArgs),
    /// Add weighted counts from a corpus to a checkpoint.
    Finetune(FinetuneArgs),
    /// CoDeC score of one dataset under each checkpoint, as CSV.
    Progress(ProgressArgs),
    /// CoDeC score of crop-augmented variants of a dataset, as CSV.
    Transfer(TransferArgs),
}

#[derive(Args, Debug)]
pub struct GenArgs {
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 10)]
    pub n_corpora: u64,
    #[arg(long, default_value_t = 0)]
    pub first_index: u64,
    #[arg(long, default_value_t = 200)]
    pub n_samples: usize,
    #[arg(long, default_value_t = 600)]
    pub sample_chars: usize,
    /// Letters per corpus; a list is cycled over the corpora.
    #[arg(long, value_delimiter = ',', default_value = "16")]
    pub alphabet_size: Vec<usize>,
    /// Words per corpus lexicon; a list is cycled over the corpora.
    #[arg(long, value_delimiter = ',', default_value = "150")]
    pub lexicon_size: Vec<usize>,
    /// Probability of drawing a sample's own topic words; cycled like the
    /// sizes.
    #[arg(long, value_delimiter = ',', default_value = "0.7")]
    pub topic_weight: Vec<f64>,
    /// Share of words that are random letter strings; cycled.
    #[arg(long, value_delimiter = ',', default_value = "0")]
    pub novel_word_rate: Vec<f64>,
}

#[derive(Args, Debug)]
pub struct ModelArgs {
    #[arg(long, default_value_t = 4)]
    pub order: usize,
    #[arg(long, default_value_t = ToyLmParams::default().alpha)]
    pub alpha: f64,
    #[arg(long, default_value_t = 0.3)]
    pub cache_lambda: f64,
    #[arg(long, default_value_t = 300)]
    pub cache_window: usize,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Training corpora, concatenated in order.
    #[arg(long = "dataset", required = true)]
    pub datasets: Vec<String>,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write a checkpoint every N training characters.
    #[arg(long, default_value_t = 0)]
    pub checkpoint_every: usize,
    #[arg(long, default_value = "toylm")]
    pub name: String,
    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Args, Debug)]
pub struct FinetuneArgs {
    #[arg(long)]
    pub toylm_checkpoint: PathBuf,
    #[arg(long = "dataset", required = true)]
    pub datasets: Vec<String>,
    #[arg(long)]
    pub weight: f64,
    #[arg(long)]
    pub out: PathBuf,
    /// Name of the new model; defaults to the old name plus "+ft".
    #[arg(long)]
    pub name: Option<String>,
}

#[derive(Args, Debug)]
pub struct LabScoreArgs {
    #[arg(long)]
    pub dataset: String,
    #[arg(long, default_value_t = DEFAULT_N_CONTEXT)]
    pub n_context: usize,
    #[arg(long, default_value_t = DEFAULT_N_SEEDS)]
    pub seeds: u32,
    #[arg(long, default_value_t = DEFAULT_SKIP_TOKENS)]
    pub skip_tokens: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = DEFAULT_MAX_SAMPLES)]
    pub max_samples: usize,
    #[arg(long, default_value_t = DEFAULT_CHUNK_CHARS)]
    pub chunk_chars: usize,
    #[arg(long, default_value_t = 8)]
    pub max_inflight: usize,
    /// Also write the CSV here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ProgressArgs {
    /// Checkpoints in training order. Repeatable.
    #[arg(long = "checkpoint", required = true)]
    pub checkpoints: Vec<PathBuf>,
    #[command(flatten)]
    pub score: LabScoreArgs,
}

#[derive(Args, Debug)]
pub struct TransferArgs {
    #[arg(long)]
    pub toylm_checkpoint: PathBuf,
    /// Fraction of each sample to keep. Repeatable.
    #[arg(long = "fraction", required = true)]
    pub fractions: Vec<f64>,
    #[arg(long, default_value_t = 0)]
    pub crop_seed: u64,
    #[command(flatten)]
    pub score: LabScoreArgs,
}

/// Run the tool on `args` (including the program name) and return the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Score(a) => cmd_score(&a, false),
        Command::Auc(a) => cmd_score(&a, true),
        Command::Trace(a) => cmd_trace(&a),
        Command::Lab(LabCommand::Gen(a)) => lab_gen(&a),
        Command::Lab(LabCommand::Train(a)) => lab_train(&a),
        Command::Lab(LabCommand::Finetune(a)) => lab_finetune(&a),
        Command::Lab(LabCommand::Progress(a)) => lab_progress(&a),
        Command::Lab(LabCommand::Transfer(a)) => lab_transfer(&a),
    }
}

/// Merge the config file and flags into one validated configuration.
/// Which command a configuration is resolved for; decides the label checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Purpose {
    Score,
    Auc,
    Trace,
}

pub fn resolve_config(args: &RunArgs, purpose: Purpose) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let mut problems = Vec::new();

    fn parse_all<T: FromStr<Err = Error>>(items: &[String], problems: &mut Vec<String>) -> Vec<T> {
        items
            .iter()
            .filter_map(|s| s.parse().map_err(|e: Error| problems.push(strip(e))).ok())
            .collect()
    }

    if !args.datasets.is_empty() {
        cfg.datasets = args
            .datasets
            .iter()
            .filter_map(|s| DatasetSpec::parse(s).map_err(|e| problems.push(strip(e))).ok())
            .collect();
    }
    if !args.labels.is_empty() {
        let labels: Vec<Label> = parse_all(&args.labels, &mut problems);
        if labels.len() == args.labels.len() {
            if labels.len() != cfg.datasets.len() {
                problems.push(format!(
                    "{} --label value(s) for {} dataset(s); give one per dataset, in order",
                    labels.len(),
                    cfg.datasets.len()
                ));
            } else {
                for (d, l) in cfg.datasets.iter_mut().zip(labels) {
                    d.label = Some(l);
                }
            }
        }
    }
    if let Some(p) = &args.provider {
        match p.parse() {
            Ok(k) => cfg.provider = k,
            Err(e) => problems.push(strip(e)),
        }
    }
    if !args.methods.is_empty() {
        cfg.methods = parse_all(&args.methods, &mut problems);
        let mut seen = Vec::new();
        cfg.methods.retain(|m| {
            let fresh = !seen.contains(m);
            seen.push(*m);
            fresh
        });
    }
    if !args.emit.is_empty() {
        cfg.emit = parse_all(&args.emit, &mut problems);
    }
    if !cfg.emit.contains(&EmitFormat::Json) {
        cfg.emit.insert(0, EmitFormat::Json);
    }
    cfg.emit.sort();
    cfg.emit.dedup();

    macro_rules! take {
        ($($flag:ident => $field:ident),* $(,)?) => {
            $(if let Some(v) = &args.$flag { cfg.$field = v.clone().into(); })*
        };
    }
    take!(
        endpoint => endpoint,
        model => model,
        max_prompt_chars => max_prompt_chars,
        n_context => n_context,
        seeds => n_seeds,
        skip_tokens => skip_tokens,
        k_percent => k_percent,
        max_samples => max_samples,
        chunk_chars => chunk_chars,
        seed => seed,
        out_dir => out_dir,
        max_inflight => max_inflight,
    );
    if let Some(v) = &args.auth_env_var {
        cfg.auth_env_var = Some(v.clone());
    }
    if let Some(v) = &args.toylm_checkpoint {
        cfg.toylm_checkpoint = Some(v.clone());
    }

    problems.extend(cfg.problems());
    if purpose == Purpose::Auc {
        let seen = cfg.datasets.iter().filter(|d| d.label == Some(Label::Seen)).count();
        let unseen = cfg.datasets.iter().filter(|d| d.label == Some(Label::Unseen)).count();
        if cfg.datasets.iter().any(|d| d.label.is_none()) {
            problems.push("auc needs a seen/unseen label for every dataset".to_string());
        }
        if seen == 0 || unseen == 0 {
            problems.push(format!(
                "auc needs at least one seen and one unseen dataset (got {seen} seen, {unseen} unseen)"
            ));
        }
    }
    if purpose != Purpose::Trace
        && cfg.emit.contains(&EmitFormat::Svg)
        && cfg.datasets.iter().any(|d| d.label.is_none()) {
        problems.push("--emit svg needs a seen/unseen label for every dataset".to_string());
    }
    invalid(problems)?;
    Ok(cfg)
}

fn strip(e: Error) -> String {
    match e {
        Error::InvalidArgument(m) => m,
        other => other.to_string(),
    }
}

/// Load, chunk and subsample every dataset in the config.
pub fn prepare_datasets(cfg: &RunConfig) -> Result<Vec<(DatasetSpec, TextDataset)>> {
    let mut out: Vec<(DatasetSpec, TextDataset)> = Vec::new();
    for spec in &cfg.datasets {
        let format = spec.resolved_format();
        let ds = load_dataset(&spec.path, format, cfg.chunk_chars)?;
        let ds = sample_subset(&ds, cfg.max_samples, cfg.seed)?;
        if out.iter().any(|(_, d)| d.name() == ds.name()) {
            return Err(Error::InvalidArgument(format!(
                "two datasets are both named {:?}; rename one file",
                ds.name()
            )));
        }
        let spec = DatasetSpec {
            format: Some(format),
            ..spec.clone()
        };
        out.push((spec, ds));
    }
    Ok(out)
}

pub fn build_provider(cfg: &RunConfig) -> Result<Box<dyn LogprobProvider>> {
    match cfg.provider {
        ProviderKind::Http => Ok(Box::new(HttpProvider::new(cfg.http())?)),
        ProviderKind::Toylm => {
            let path = cfg
                .toylm_checkpoint
                .as_ref()
                .ok_or_else(|| Error::InvalidArgument("missing --toylm-checkpoint".into()))?;
            Ok(Box::new(ToyLm::load(path)?))
        }
    }
}

/// `--timestamp`, else SOURCE_DATE_EPOCH, else the current time.
pub fn report_timestamp(flag: Option<&str>) -> Result<String> {
    use chrono::{DateTime, SecondsFormat, Utc};
    if let Some(t) = flag {
        let parsed = DateTime::parse_from_rfc3339(t)
            .map_err(|e| Error::InvalidArgument(format!("bad --timestamp {t:?}: {e}")))?;
        return Ok(parsed.with_timezone(&Utc).to_rfc3339_opts(SecondsFormat::Secs, true));
    }
    if let Ok(epoch) = std::env::var("SOURCE_DATE_EPOCH") {
        let secs: i64 = epoch
            .trim()
            .parse()
            .map_err(|_| Error::InvalidArgument(format!("bad SOURCE_DATE_EPOCH {epoch:?}")))?;
        let t = DateTime::<Utc>::from_timestamp(secs, 0)
            .ok_or_else(|| Error::InvalidArgument(format!("SOURCE_DATE_EPOCH {secs} out of range")))?;
        return Ok(t.to_rfc3339_opts(SecondsFormat::Secs, true));
    }
    Ok(Utc::now().to_rfc3339_opts(SecondsFormat::Secs, true))
}

struct Outputs(Vec<(PathBuf, Vec<u8>)>);

impl Outputs {
    fn add(&mut self, path: PathBuf, bytes: impl Into<Vec<u8>>) {
        self.0.push((path, bytes.into()));
    }

    fn write(self) -> Result<()> {
        for (p, b) in self.0 {
            write_atomic(&p, &b)?;
        }
        Ok(())
    }
}

fn cmd_score(args: &RunArgs, with_auc: bool) -> Result<()> {
    let cfg = resolve_config(args, if with_auc { Purpose::Auc } else { Purpose::Score })?;
    let timestamp = report_timestamp(args.timestamp.as_deref())?;
    let datasets = prepare_datasets(&cfg)?;
    let provider = build_provider(&cfg)?;
    let cache = ScoreCache::new();
    let eval = cfg.eval();

    let mut scores: Vec<DatasetScore> = Vec::new();
    let mut skipped = Vec::new();
    let mut deltas = Vec::new();
    for (_, ds) in &datasets {
        eprintln!("scoring {} ({} samples)", ds.name(), ds.len());
        let ev = evaluate_dataset(provider.as_ref(), &cache, ds, &cfg.methods, &eval)?;
        scores.extend(ev.scores);
        skipped.extend(ev.skipped);
        deltas.push((ds.name().to_string(), ev.records));
    }

    let label_of = |name: &str| {
        datasets
            .iter()
            .find(|(_, d)| d.name() == name)
            .and_then(|(s, _)| s.label)
    };
    let mut aucs = Vec::new();
    if with_auc {
        for &m in &cfg.methods {
            let pick = |l: Label| -> Vec<f64> {
                scores
                    .iter()
                    .filter(|s| s.method == m && label_of(&s.dataset_name) == Some(l))
                    .map(|s| s.oriented_value)
                    .collect()
            };
            aucs.push(MethodAuc {
                method: m,
                result: auc(&pick(Label::Seen), &pick(Label::Unseen))?,
            });
        }
    }

    let report = AuditReport {
        schema_version: SCHEMA_VERSION,
        tool: ToolInfo::default(),
        command: if with_auc { "auc" } else { "score" }.to_string(),
        timestamp,
        provider: provider.describe(),
        config: cfg.echo(),
        codec: cfg.codec(),
        k_percent: cfg.k_percent,
        provenance: Provenance::default(),
        datasets: datasets
            .iter()
            .map(|(spec, ds)| DatasetInfo {
                name: ds.name().to_string(),
                path: spec.path.display().to_string(),
                format: spec.resolved_format().to_string(),
                label: spec.label,
                n_samples: ds.len(),
                digest: dataset_digest(ds),
            })
            .collect(),
        scores,
        auc: aucs,
        skipped,
        config_hash: String::new(),
    }
    .seal();

    let dir = &cfg.out_dir;
    let mut out = Outputs(Vec::new());
    out.add(dir.join("report.json"), emit_json(&report)?);
    if cfg.methods.contains(&Method::Codec) {
        let mut jsonl = String::new();
        for (name, records) in &deltas {
            jsonl.push_str(&emit_deltas_jsonl(name, &report.config_hash, records)?);
        }
        out.add(dir.join("deltas.jsonl"), jsonl);
    }
    if cfg.emit.contains(&EmitFormat::Csv) {
        out.add(dir.join("scores.csv"), scores_csv(&report, &label_of)?);
    }
    if cfg.emit.contains(&EmitFormat::Md) {
        let models = vec![provider.model_id().to_string()];
        let names: Vec<String> = datasets.iter().map(|(_, d)| d.name().to_string()).collect();
        out.add(dir.join("leaderboard.md"), emit_markdown_table(&report.scores, &models, &names));
    }
    if cfg.emit.contains(&EmitFormat::Svg) {
        for &m in &cfg.methods {
            let points: Vec<(DatasetScore, Label)> = report
                .scores
                .iter()
                .filter(|s| s.method == m)
                .filter_map(|s| label_of(&s.dataset_name).map(|l| (s.clone(), l)))
                .collect();
            out.add(dir.join(format!("scatter-{m}.svg")), emit_scatter_svg(&points));
        }
    }
    out.write()?;

    for a in &report.auc {
        outln!("auc {} {:.6}", a.method, a.result.auc);
    }
    for s in report.scores.iter().filter(|s| s.method == Method::Codec) {
        outln!("codec {} {:.6}", s.dataset_name, s.value);
    }
    Ok(())
}

fn scores_csv(report: &AuditReport, label_of: &dyn Fn(&str) -> Option<Label>) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| Error::Serialization(format!("csv: {e}"));
    w.write_record([
        "model", "dataset", "label", "method", "value", "oriented_value", "n_scored", "n_skipped",
    ])
    .map_err(err)?;
    for s in &report.scores {
        w.write_record([
            s.model_id.clone(),
            s.dataset_name.clone(),
            label_of(&s.dataset_name).map(|l| l.as_str()).unwrap_or("").to_string(),
            s.method.to_string(),
            format!("{:.6}", s.value),
            format!("{:.6}", s.oriented_value),
            s.n_samples_scored.to_string(),
            s.n_samples_skipped.to_string(),
        ])
        .map_err(err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Serialization(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Internal(e.to_string()))
}

fn file_safe(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || "-_.".contains(c) { c } else { '_' })
        .collect()
}

fn cmd_trace(args: &TraceArgs) -> Result<()> {
    let cfg = resolve_config(&args.run, Purpose::Trace)?;
    let datasets = prepare_datasets(&cfg)?;
    let (_, ds) = &datasets[0];
    let (index, target) = ds.get(&args.sample_id).ok_or_else(|| {
        Error::InvalidArgument(format!(
            "sample {:?} not found in dataset {:?}",
            args.sample_id,
            ds.name()
        ))
    })?;
    if ds.len() <= cfg.n_context {
        return Err(Error::InvalidArgument(format!(
            "dataset {:?} is too small for n_context = {}",
            ds.name(),
            cfg.n_context
        )));
    }
    let provider = build_provider(&cfg)?;
    let codec = cfg.codec();
    let picks = draw_context(ds.len(), index, cfg.n_context, context_seed(cfg.seed, &target.id, 0));
    let context: Vec<&Sample> = picks.iter().map(|&i| &ds.samples()[i]).collect();
    let trace = token_delta_trace(provider.as_ref(), &context, target, &codec)?;

    let stem = format!("trace-{}", file_safe(&target.id));
    let mut out = Outputs(Vec::new());
    out.add(cfg.out_dir.join(format!("{stem}.csv")), trace_csv(&trace)?);
    if cfg.emit.contains(&EmitFormat::Svg) {
        let title = format!("{} / {}: in-context minus bare logprob", ds.name(), target.id);
        out.add(cfg.out_dir.join(format!("{stem}.svg")), emit_trace_svg(&trace, &title));
    }
    out.write()?;
    match trace_mean(&trace) {
        Some(m) => outln!("mean_delta {} {m:.6}", target.id),
        None => outln!("mean_delta {} nan", target.id),
    }
    Ok(())
}

fn load_spec(s: &str, chunk_chars: usize) -> Result<TextDataset> {
    let spec = DatasetSpec::parse(s)?;
    load_dataset(&spec.path, spec.resolved_format(), chunk_chars)
}

fn load_all(specs: &[String], name: &str) -> Result<TextDataset> {
    let parts = specs
        .iter()
        .map(|s| load_spec(s, DEFAULT_CHUNK_CHARS))
        .collect::<Result<Vec<_>>>()?;
    if parts.len() == 1 {
        return Ok(parts.into_iter().next().expect("one part"));
    }
    concat_corpora(name, &parts.iter().collect::<Vec<_>>())
}

#[derive(Serialize)]
struct JsonlRecord<'a> {
    id: &'a str,
    text: &'a str,
}

fn lab_gen(a: &GenArgs) -> Result<()> {
    if a.alphabet_size.is_empty() || a.lexicon_size.is_empty()
        || a.topic_weight.is_empty()
        || a.novel_word_rate.is_empty()
    {
        return Err(Error::InvalidArgument(
            "corpus shape lists need at least one value".into(),
        ));
    }
    let mut out = Outputs(Vec::new());
    for k in 0..a.n_corpora {
        let index = a.first_index + k;
        let spec = CorpusSpec {
            sample_chars: a.sample_chars,
            alphabet_size: a.alphabet_size[k as usize % a.alphabet_size.len()],
            lexicon_size: a.lexicon_size[k as usize % a.lexicon_size.len()],
            topic_weight: a.topic_weight[k as usize % a.topic_weight.len()],
            novel_word_rate: a.novel_word_rate[k as usize % a.novel_word_rate.len()],
            ..CorpusSpec::new(index, a.n_samples)
        };
        let ds = generate_corpus(&spec, a.seed)?;
        let mut body = String::new();
        for s in ds.samples() {
            body.push_str(&serde_json::to_string(&JsonlRecord { id: &s.id, text: &s.text })?);
            body.push('\n');
        }
        out.add(a.out_dir.join(format!("{}.jsonl", ds.name())), body);
    }
    let paths: Vec<PathBuf> = out.0.iter().map(|(p, _)| p.clone()).collect();
    out.write()?;
    for p in paths {
        outln!("{}", p.display());
    }
    Ok(())
}

fn lab_train(a: &TrainArgs) -> Result<()> {
    let corpus = load_all(&a.datasets, "train")?;
    let params = ToyLmParams {
        order: a.model.order,
        alpha: a.model.alpha,
        cache_lambda: a.model.cache_lambda,
        cache_window: a.model.cache_window,
        ..ToyLmParams::default()
    };
    let checkpoints = ToyLm::train(params, &corpus, a.checkpoint_every)?;
    let last = checkpoints.len() - 1;
    for (i, cp) in checkpoints.iter().enumerate() {
        let model = cp.model.clone().with_name(a.name.clone());
        if i == last {
            model.save(&a.out)?;
            outln!("{} step {}", a.out.display(), cp.step);
        } else {
            let p = step_path(&a.out, cp.step);
            model.save(&p)?;
            outln!("{} step {}", p.display(), cp.step);
        }
    }
    Ok(())
}

fn step_path(out: &Path, step: usize) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    out.with_file_name(format!("{stem}-step{step:09}.json"))
}

fn lab_finetune(a: &FinetuneArgs) -> Result<()> {
    let base = ToyLm::load(&a.toylm_checkpoint)?;
    let corpus = load_all(&a.datasets, "finetune")?;
    let name = a.name.clone().unwrap_or_else(|| format!("{}+ft", base.name()));
    let model = base.finetune(&corpus, a.weight)?.with_name(name);
    model.save(&a.out)?;
    outln!("{}", a.out.display());
    Ok(())
}

impl LabScoreArgs {
    fn codec(&self) -> CodecConfig {
        CodecConfig {
            n_context: self.n_context,
            n_seeds: self.seeds,
            skip_tokens: self.skip_tokens,
            master_seed: self.seed,
            ..CodecConfig::default()
        }
    }

    fn dataset(&self) -> Result<TextDataset> {
        let ds = load_spec(&self.dataset, self.chunk_chars)?;
        sample_subset(&ds, self.max_samples, self.seed)
    }

    fn finish(&self, csv: String) -> Result<()> {
        if let Some(p) = &self.out {
            write_atomic(p, csv.as_bytes())?;
        }
        out(csv.as_bytes());
        Ok(())
    }
}

fn codec_value(model: &ToyLm, ds: &TextDataset, a: &LabScoreArgs) -> Result<f64> {
    let run = codec_run(model, &ScoreCache::new(), ds, &a.codec(), a.max_inflight)?;
    codec_score(&run.records)
}

fn lab_progress(a: &ProgressArgs) -> Result<()> {
    let ds = a.score.dataset()?;
    let mut csv = String::from("checkpoint,chars_seen,codec\n");
    for p in &a.checkpoints {
        let m = ToyLm::load(p)?;
        let v = codec_value(&m, &ds, &a.score)?;
        csv.push_str(&format!("{},{},{v:.6}\n", p.display(), m.chars_seen()));
    }
    a.score.finish(csv)
}

fn lab_transfer(a: &TransferArgs) -> Result<()> {
    let ds = a.score.dataset()?;
    let m = ToyLm::load(&a.toylm_checkpoint)?;
    let mut csv = String::from("fraction,codec\n");
    for &f in &a.fractions {
        let cropped = crop_dataset(&ds, f, a.crop_seed)?;
        let v = codec_value(&m, &cropped, &a.score)?;
        csv.push_str(&format!("{f},{v:.6}\n"));
    }
    a.score.finish(csv)
}

impl fmt::Display for ProviderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ProviderKind::Http => "http",
            ProviderKind::Toylm => "toylm",
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn args(datasets: &[&str]) -> RunArgs {
        RunArgs {
            datasets: datasets.iter().map(|s| s.to_string()).collect(),
            ..RunArgs::default()
        }
    }

    #[test]
    fn dataset_spec_suffix() {
        let s = DatasetSpec::parse("data/x.txt:raw").unwrap();
        assert_eq!(s.format, Some(DatasetFormat::RawText));
        assert_eq!(s.path, PathBuf::from("data/x.txt"));
        let s = DatasetSpec::parse("data/x.jsonl").unwrap();
        assert_eq!(s.format, None);
        assert_eq!(s.resolved_format(), DatasetFormat::Jsonl);
        let s = DatasetSpec::parse("c:/weird:name").unwrap();
        assert_eq!(s.path, PathBuf::from("c:/weird:name"));
    }

    #[test]
    fn every_problem_reported_at_once() {
        let mut a = args(&[]);
        a.methods = vec!["nope".into()];
        a.n_context = Some(0);
        a.k_percent = Some(0.0);
        a.provider = Some("toylm".into());
        let Err(Error::InvalidArgument(msg)) = resolve_config(&a, Purpose::Score) else {
            panic!("expected config error")
        };
        for needle in ["no dataset", "unknown method", "n_context", "k_percent", "toylm-checkpoint"] {
            assert!(msg.contains(needle), "{needle} missing from {msg}");
        }
    }

    #[test]
    fn flags_override_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(
            &p,
            r#"{"datasets":[{"path":"a.jsonl","label":"seen"}],"n_seeds":3,"model":"m","k_percent":10}"#,
        )
        .unwrap();
        let mut a = args(&[]);
        a.config = Some(p.clone());
        a.seeds = Some(7);
        let cfg = resolve_config(&a, Purpose::Score).unwrap();
        assert_eq!(cfg.n_seeds, 7);
        assert_eq!(cfg.k_percent, 10.0);
        assert_eq!(cfg.datasets[0].label, Some(Label::Seen));
        assert_eq!(cfg.n_context, 1);

        std::fs::write(&p, r#"{"n_seedz":3}"#).unwrap();
        assert_eq!(resolve_config(&a, Purpose::Score).unwrap_err().exit_code(), 2);
    }

    #[test]
    fn auc_label_checks() {
        let mut a = args(&["a.jsonl", "b.jsonl"]);
        a.labels = vec!["seen".into()];
        assert!(resolve_config(&a, Purpose::Auc).is_err());
        a.labels = vec!["seen".into(), "seen".into()];
        let msg = resolve_config(&a, Purpose::Auc).unwrap_err().to_string();
        assert!(msg.contains("0 unseen"));
        a.labels = vec!["seen".into(), "unseen".into()];
        assert!(resolve_config(&a, Purpose::Auc).is_ok());
    }

    #[test]
    fn echo_drops_execution_settings() {
        let cfg = RunConfig {
            auth_env_var: Some("MY_TOKEN".into()),
            ..RunConfig::default()
        };
        let v = cfg.echo();
        assert!(v.get("out_dir").is_none());
        assert!(v.get("max_inflight").is_none());
        assert_eq!(v["auth_env_var"], "MY_TOKEN");
        let toy = RunConfig {
            provider: ProviderKind::Toylm,
            ..RunConfig::default()
        };
        assert!(toy.echo().get("endpoint").is_none());
    }

    #[test]
    fn timestamp_sources() {
        assert_eq!(
            report_timestamp(Some("2024-05-01T12:00:00+02:00")).unwrap(),
            "2024-05-01T10:00:00Z"
        );
        assert!(report_timestamp(Some("yesterday")).is_err());
    }
}
