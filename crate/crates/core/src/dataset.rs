//! Text datasets: loading, fixed-width character chunking and seeded
//! subsampling into the uniform [`Sample`] collection the scorers consume.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_CHUNK_CHARS: usize = 600;
pub const DEFAULT_MAX_SAMPLES: usize = 1000;
/// A trailing chunk shorter than this is folded into the chunk before it.
pub const MIN_TAIL_CHARS: usize = 50;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub text: String,
}

impl Sample {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            text: text.into(),
        }
    }

    pub fn char_len(&self) -> usize {
        self.text.chars().count()
    }
}

/// An ordered, named collection of at least two samples with unique ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextDataset {
    name: String,
    samples: Vec<Sample>,
}

impl TextDataset {
    pub fn new(name: impl Into<String>, samples: Vec<Sample>) -> Result<Self> {
        let name = name.into();
        if samples.is_empty() {
            return Err(Error::EmptyDataset(name));
        }
        if samples.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "dataset {name:?} has {} sample; at least 2 are required",
                samples.len()
            )));
        }
        let mut seen = HashSet::with_capacity(samples.len());
        for s in &samples {
            if s.text.is_empty() {
                return Err(Error::InvalidArgument(format!(
                    "dataset {name:?}: sample {:?} has empty text",
                    s.id
                )));
            }
            if !seen.insert(s.id.as_str()) {
                return Err(Error::InvalidArgument(format!(
                    "dataset {name:?}: duplicate sample id {:?}",
                    s.id
                )));
            }
        }
        Ok(Self { name, samples })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<(usize, &Sample)> {
        self.samples.iter().enumerate().find(|(_, s)| s.id == id)
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn into_samples(self) -> Vec<Sample> {
        self.samples
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetFormat {
    Jsonl,
    TextDir,
    RawText,
}

impl fmt::Display for DatasetFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DatasetFormat::Jsonl => "jsonl",
            DatasetFormat::TextDir => "text_dir",
            DatasetFormat::RawText => "raw_text",
        })
    }
}

impl FromStr for DatasetFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "jsonl" => Ok(DatasetFormat::Jsonl),
            "text_dir" | "dir" => Ok(DatasetFormat::TextDir),
            "raw_text" | "raw" | "text" => Ok(DatasetFormat::RawText),
            other => Err(Error::InvalidArgument(format!(
                "unknown dataset format {other:?} (expected jsonl, text_dir or raw_text)"
            ))),
        }
    }
}

#[derive(Deserialize)]
struct JsonlRecord {
    #[serde(default)]
    id: Option<serde_json::Value>,
    text: String,
}

/// Load a dataset from disk. The dataset name is the file or directory stem.
pub fn load_dataset(path: &Path, format: DatasetFormat, chunk_chars: usize) -> Result<TextDataset> {
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string());
    let samples = match format {
        DatasetFormat::Jsonl => load_jsonl(path)?,
        DatasetFormat::TextDir => load_text_dir(path)?,
        DatasetFormat::RawText => {
            if chunk_chars == 0 {
                return Err(Error::InvalidArgument("chunk_chars must be positive".into()));
            }
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            if text.is_empty() {
                return Err(Error::EmptyDataset(name));
            }
            chunk_text(&text, chunk_chars)?
        }
    };
    if samples.is_empty() {
        return Err(Error::EmptyDataset(name));
    }
    TextDataset::new(name, samples)
}

fn load_jsonl(path: &Path) -> Result<Vec<Sample>> {
    let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut samples = Vec::new();
    for (lineno, line) in raw.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |message: String| Error::MalformedJsonl {
            path: path.to_path_buf(),
            line: lineno + 1,
            message,
        };
        let rec: JsonlRecord = serde_json::from_str(line).map_err(|e| malformed(e.to_string()))?;
        let id = match rec.id {
            None | Some(serde_json::Value::Null) => lineno.to_string(),
            Some(serde_json::Value::String(s)) => s,
            Some(serde_json::Value::Number(n)) => n.to_string(),
            Some(other) => return Err(malformed(format!("unsupported id value {other}"))),
        };
        if rec.text.is_empty() {
            return Err(malformed("empty text".into()));
        }
        samples.push(Sample::new(id, rec.text));
    }
    Ok(samples)
}

fn load_text_dir(path: &Path) -> Result<Vec<Sample>> {
    let entries = fs::read_dir(path).map_err(|e| Error::io(path, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(path, e))?;
        let ft = entry.file_type().map_err(|e| Error::io(entry.path(), e))?;
        if ft.is_file() {
            files.push(entry.path());
        }
    }
    files.sort();
    files
        .into_iter()
        .map(|file| {
            let text = fs::read_to_string(&file).map_err(|e| Error::io(&file, e))?;
            let id = file
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default();
            Ok(Sample::new(id, text))
        })
        .filter(|s: &Result<Sample>| s.as_ref().map_or(true, |s| !s.text.is_empty()))
        .collect()
}

/// Split `text` into consecutive, non-overlapping chunks of `chunk_chars`
/// Unicode scalar values. A tail shorter than [`MIN_TAIL_CHARS`] is merged
/// into the previous chunk, so the concatenation always reproduces `text`.
pub fn chunk_text(text: &str, chunk_chars: usize) -> Result<Vec<Sample>> {
    if chunk_chars == 0 {
        return Err(Error::InvalidArgument("chunk_chars must be positive".into()));
    }
    if text.is_empty() {
        return Err(Error::InvalidArgument("cannot chunk empty text".into()));
    }
    // Byte offsets of every chunk_chars-th char boundary.
    let mut bounds: Vec<usize> = text
        .char_indices()
        .map(|(b, _)| b)
        .step_by(chunk_chars)
        .collect();
    bounds.push(text.len());
    let last_len = text[bounds[bounds.len() - 2]..].chars().count();
    if bounds.len() > 2 && last_len < MIN_TAIL_CHARS {
        bounds.remove(bounds.len() - 2);
    }
    Ok(bounds
        .windows(2)
        .enumerate()
        .map(|(i, w)| Sample::new(format!("chunk-{i:04}"), &text[w[0]..w[1]]))
        .collect())
}

/// Draw `n` samples uniformly without replacement, keeping source order.
/// Datasets with at most `n` samples are returned unchanged.
pub fn sample_subset(dataset: &TextDataset, n: usize, rng_seed: u64) -> Result<TextDataset> {
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "subset size must be at least 2, got {n}"
        )));
    }
    if dataset.len() <= n {
        return Ok(dataset.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut picked = rand::seq::index::sample(&mut rng, dataset.len(), n).into_vec();
    picked.sort_unstable();
    let samples = picked
        .into_iter()
        .map(|i| dataset.samples[i].clone())
        .collect();
    TextDataset::new(dataset.name.clone(), samples)
}
