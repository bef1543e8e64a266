#![allow(dead_code)]

use codec_audit::dataset::TextDataset;
use codec_audit::evaluation::{auc, evaluate_dataset, AucResult, DatasetScore, EvalConfig};
use codec_audit::provider::ScoreCache;
use codec_audit::scoring::Method;
use codec_audit::toylm::lab::{concat_corpora, generate_corpus, CorpusSpec};
use codec_audit::toylm::{ToyLm, ToyLmParams};

/// Ten corpora, the first five trained on.
pub struct Lab {
    pub model: ToyLm,
    pub seen: Vec<TextDataset>,
    pub unseen: Vec<TextDataset>,
}

pub fn lab_from_specs(specs: &[CorpusSpec], generator_seed: u64, n_seen: usize) -> Lab {
    let corpora: Vec<TextDataset> = specs
        .iter()
        .map(|s| generate_corpus(s, generator_seed).unwrap())
        .collect();
    let (seen, unseen) = corpora.split_at(n_seen);
    let parts: Vec<&TextDataset> = seen.iter().collect();
    let train = concat_corpora("train", &parts).unwrap();
    let model = ToyLm::fit(ToyLmParams::default(), &train).unwrap().with_name("toy");
    Lab {
        model,
        seen: seen.to_vec(),
        unseen: unseen.to_vec(),
    }
}

/// The default suite: 10 corpora of 200 samples, 5 seen.
pub fn default_lab(generator_seed: u64) -> Lab {
    let specs: Vec<CorpusSpec> = (0..10).map(|i| CorpusSpec::new(i, 200)).collect();
    lab_from_specs(&specs, generator_seed, 5)
}

pub fn score(model: &ToyLm, ds: &TextDataset, method: Method) -> DatasetScore {
    score_with(model, ds, method, &EvalConfig::default())
}

pub fn score_with(model: &ToyLm, ds: &TextDataset, method: Method, cfg: &EvalConfig) -> DatasetScore {
    let ev = evaluate_dataset(model, &ScoreCache::new(), ds, &[method], cfg).unwrap();
    ev.scores.into_iter().next().unwrap()
}

pub struct LabScores {
    pub seen: Vec<DatasetScore>,
    pub unseen: Vec<DatasetScore>,
}

impl LabScores {
    pub fn values(&self) -> (Vec<f64>, Vec<f64>) {
        (
            self.seen.iter().map(|s| s.value).collect(),
            self.unseen.iter().map(|s| s.value).collect(),
        )
    }

    pub fn auc(&self) -> AucResult {
        let o = |v: &[DatasetScore]| v.iter().map(|s| s.oriented_value).collect::<Vec<_>>();
        auc(&o(&self.seen), &o(&self.unseen)).unwrap()
    }
}

pub fn lab_scores(lab: &Lab, method: Method) -> LabScores {
    LabScores {
        seen: lab.seen.iter().map(|d| score(&lab.model, d, method)).collect(),
        unseen: lab.unseen.iter().map(|d| score(&lab.model, d, method)).collect(),
    }
}

pub fn write_jsonl(path: &std::path::Path, ds: &TextDataset) {
    let mut body = String::new();
    for s in ds.samples() {
        body.push_str(&serde_json::json!({"id": s.id, "text": s.text}).to_string());
        body.push('\n');
    }
    std::fs::write(path, body).unwrap();
}
