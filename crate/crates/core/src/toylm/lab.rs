//! Contamination lab helpers: synthetic corpora with controlled style,
//! training checkpoints and crop augmentation.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ToyLm;
use crate::dataset::{Sample, TextDataset};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct LabCheckpoint {
    /// Training characters consumed so far.
    pub step: usize,
    pub model: ToyLm,
}

/// Recipe for one synthetic corpus. Each `index` gets its own letters,
/// syllables, lexicon and punctuation, so corpora with different indices
/// are mutually out-of-distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub index: u64,
    pub n_samples: usize,
    pub sample_chars: usize,
    /// Number of distinct letters the corpus draws from (2..=26).
    pub alphabet_size: usize,
    pub lexicon_size: usize,
    /// Probability that a word is drawn from the sample's own topic words.
    pub topic_weight: f64,
    /// Number of topic words each sample draws.
    pub topic_size: usize,
    /// Probability that a word is a fresh random string over the corpus
    /// letters instead of a lexicon word. Makes difficulty grow with the
    /// alphabet size.
    pub novel_word_rate: f64,
}

impl CorpusSpec {
    pub fn new(index: u64, n_samples: usize) -> Self {
        Self {
            index,
            n_samples,
            sample_chars: 600,
            alphabet_size: 16,
            lexicon_size: 150,
            topic_weight: 0.7,
            topic_size: 3,
            novel_word_rate: 0.0,
        }
    }
}

const PUNCT: &[&str] = &[". ", "! ", "; ", ", ", " - ", "? ", ": ", " / "];

fn mix_seed(a: u64, b: u64) -> u64 {
    // splitmix64 over the pair
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Generate a corpus. Deterministic in (`spec`, `generator_seed`).
pub fn generate_corpus(spec: &CorpusSpec, generator_seed: u64) -> Result<TextDataset> {
    if !(2..=26).contains(&spec.alphabet_size) {
        return Err(Error::InvalidArgument(format!(
            "alphabet_size must be in [2, 26], got {}",
            spec.alphabet_size
        )));
    }
    if !(0.0..=1.0).contains(&spec.novel_word_rate) || !(0.0..=1.0).contains(&spec.topic_weight) {
        return Err(Error::InvalidArgument(
            "topic_weight and novel_word_rate must be in [0, 1]".into(),
        ));
    }
    if spec.n_samples < 2 || spec.sample_chars == 0 || spec.lexicon_size < 2 {
        return Err(Error::InvalidArgument(
            "corpus needs at least 2 samples, positive length and a lexicon of 2+ words".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(generator_seed, spec.index));

    let mut letters: Vec<char> = ('a'..='z').collect();
    letters.shuffle(&mut rng);
    letters.truncate(spec.alphabet_size);
    let split = (spec.alphabet_size / 3).max(1);
    let (vowels, consonants) = letters.split_at(split);

    let n_syllables = 10 + rng.random_range(0..8);
    let syllables: Vec<String> = (0..n_syllables)
        .map(|_| {
            let mut s = String::new();
            if !consonants.is_empty() && rng.random_bool(0.8) {
                s.push(*consonants.choose(&mut rng).unwrap());
            }
            s.push(*vowels.choose(&mut rng).unwrap());
            if !consonants.is_empty() && rng.random_bool(0.4) {
                s.push(*consonants.choose(&mut rng).unwrap());
            }
            s
        })
        .collect();

    let mut lexicon: Vec<String> = Vec::with_capacity(spec.lexicon_size);
    let mut guard = 0;
    while lexicon.len() < spec.lexicon_size && guard < spec.lexicon_size * 50 {
        guard += 1;
        let n = rng.random_range(1..=3);
        let w: String = (0..n)
            .map(|_| syllables.choose(&mut rng).unwrap().as_str())
            .collect();
        if !lexicon.contains(&w) {
            lexicon.push(w);
        }
    }
    let punct: Vec<&str> = PUNCT.choose_multiple(&mut rng, 2).copied().collect();
    let (min_words, max_words) = {
        let lo = rng.random_range(3..7);
        (lo, lo + rng.random_range(2..6))
    };

    let samples = (0..spec.n_samples)
        .map(|i| {
            let topic: Vec<&String> = lexicon.choose_multiple(&mut rng, spec.topic_size.max(1)).collect();
            let mut text = String::new();
            while text.chars().count() < spec.sample_chars {
                let n_words = rng.random_range(min_words..=max_words);
                for w in 0..n_words {
                    let novel;
                    let word = if spec.novel_word_rate > 0.0 && rng.random_bool(spec.novel_word_rate) {
                        let len = rng.random_range(3..=7);
                        novel = (0..len).map(|_| *letters.choose(&mut rng).unwrap()).collect::<String>();
                        novel.as_str()
                    } else if rng.random_bool(spec.topic_weight) {
                        topic.choose(&mut rng).unwrap().as_str()
                    } else {
                        // Zipf-ish: favour the head of the lexicon.
                        let r: f64 = rng.random();
                        let idx = ((r * r) * lexicon.len() as f64) as usize;
                        lexicon[idx.min(lexicon.len() - 1)].as_str()
                    };
                    text.push_str(word);
                    if w + 1 < n_words {
                        text.push(' ');
                    }
                }
                text.push_str(punct.choose(&mut rng).unwrap());
            }
            let text: String = text.chars().take(spec.sample_chars).collect();
            Sample::new(format!("c{:02}-{i:05}", spec.index), text)
        })
        .collect();
    TextDataset::new(format!("corpus-{:02}", spec.index), samples)
}

/// Take a contiguous `fraction` of the sample (rounded up) at a seeded
/// uniformly random offset.
pub fn augment_crop(sample: &Sample, fraction: f64, rng_seed: u64) -> Result<Sample> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "crop fraction must be in (0, 1], got {fraction}"
        )));
    }
    let chars: Vec<char> = sample.text.chars().collect();
    let keep = (fraction * chars.len() as f64).ceil() as usize;
    if keep == 0 {
        return Err(Error::InvalidArgument("crop leaves no characters".into()));
    }
    let keep = keep.min(chars.len());
    let mut seed = rng_seed;
    for b in sample.id.bytes() {
        seed = mix_seed(seed, b as u64);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let start = rng.random_range(0..=chars.len() - keep);
    Ok(Sample::new(
        sample.id.clone(),
        chars[start..start + keep].iter().collect::<String>(),
    ))
}

/// Crop every sample of a dataset.
pub fn crop_dataset(dataset: &TextDataset, fraction: f64, rng_seed: u64) -> Result<TextDataset> {
    let samples = dataset
        .samples()
        .iter()
        .map(|s| augment_crop(s, fraction, rng_seed))
        .collect::<Result<Vec<_>>>()?;
    TextDataset::new(dataset.name().to_string(), samples)
}

/// Concatenate datasets into one training corpus, re-keying ids so they
/// stay unique.
pub fn concat_corpora(name: &str, parts: &[&TextDataset]) -> Result<TextDataset> {
    let samples = parts
        .iter()
        .flat_map(|d| {
            d.samples()
                .iter()
                .map(move |s| Sample::new(format!("{}/{}", d.name(), s.id), s.text.clone()))
        })
        .collect();
    TextDataset::new(name, samples)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generator_is_deterministic_and_sized() {
        let spec = CorpusSpec::new(3, 20);
        let a = generate_corpus(&spec, 1).unwrap();
        assert_eq!(a, generate_corpus(&spec, 1).unwrap());
        assert_ne!(a, generate_corpus(&spec, 2).unwrap());
        assert_eq!(a.len(), 20);
        assert!(a.samples().iter().all(|s| s.char_len() == 600));
    }

    #[test]
    fn alphabet_size_respected() {
        let spec = CorpusSpec { alphabet_size: 5, ..CorpusSpec::new(0, 10) };
        let d = generate_corpus(&spec, 0).unwrap();
        let letters: std::collections::BTreeSet<char> = d
            .samples()
            .iter()
            .flat_map(|s| s.text.chars())
            .filter(char::is_ascii_lowercase)
            .collect();
        assert!(letters.len() <= 5);
    }

    #[test]
    fn crop_examples() {
        let s = Sample::new("s", "q".repeat(10) + &"r".repeat(390));
        assert_eq!(augment_crop(&s, 1.0, 9).unwrap(), s);
        let c = augment_crop(&s, 0.25, 9).unwrap();
        assert_eq!(c.char_len(), 100);
        assert!(s.text.contains(&c.text));
        assert_eq!(c, augment_crop(&s, 0.25, 9).unwrap());
        assert!(augment_crop(&s, 0.0, 1).is_err());
        assert!(augment_crop(&s, 1.5, 1).is_err());
    }

    #[test]
    fn crop_seeds_move_the_window() {
        let text: String = (0..400).map(|i| char::from(b'a' + (i % 26) as u8)).collect();
        let s = Sample::new("s", text);
        let starts: std::collections::BTreeSet<String> = (0..8)
            .map(|seed| augment_crop(&s, 0.25, seed).unwrap().text)
            .collect();
        assert!(starts.len() > 1);
    }
}
