//! Artifact analyses for any labeled corpus: partial-input baselines,
//! single-word label correlations, premise/hypothesis similarity by label.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::corpus::{Dataset, Example, Label};
use crate::dynamics::population_std;
use crate::exemplars::{cosine, EmbeddingTable};
use crate::text::{seeded_rng, tokenize};
use crate::toytrainer::{accuracy, train, ToyModelConfig, TrainError};

pub const SIMILARITY_BINS: usize = 50;

#[derive(Debug, thiserror::Error)]
pub enum AuditError {
    #[error("example {0:?} has no label")]
    Unlabeled(String),
    #[error("{0} set is empty")]
    Empty(&'static str),
    #[error("dataset is not label-balanced (counts {0:?}); balance it first")]
    Unbalanced([usize; Label::COUNT]),
    #[error("min_count must be at least 1")]
    BadMinCount,
    #[error("alpha must be in (0, 1), got {0}")]
    BadAlpha(f64),
    #[error("missing embedding {0:?}")]
    MissingEmbedding(String),
    #[error("embedding {0:?} has zero norm")]
    ZeroNorm(String),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

fn require_labels(ds: &Dataset) -> Result<(), AuditError> {
    match ds.iter().find(|e| e.label.is_none()) {
        Some(e) => Err(AuditError::Unlabeled(e.id.clone())),
        None => Ok(()),
    }
}

/// Downsamples every class to the smallest class size. Kept examples stay in
/// their original order.
pub fn balance_by_label(ds: &Dataset, seed: u64) -> Result<Dataset, AuditError> {
    require_labels(ds)?;
    let counts = ds.label_counts();
    let target = counts.iter().copied().min().unwrap_or(0);
    let mut rng = seeded_rng(seed);
    let mut keep = BTreeSet::new();
    for label in Label::ALL {
        let mut idx: Vec<usize> = (0..ds.len()).filter(|&i| ds.examples[i].label == Some(label)).collect();
        idx.shuffle(&mut rng);
        keep.extend(idx.into_iter().take(target));
    }
    Ok(Dataset {
        name: format!("{}-balanced", ds.name),
        examples: keep.into_iter().map(|i| ds.examples[i].clone()).collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Field {
    Premise,
    Hypothesis,
}

fn keep_field(ds: &Dataset, field: Field) -> Dataset {
    let examples = ds
        .iter()
        .map(|e| {
            let mut e = e.clone();
            match field {
                Field::Premise => e.hypothesis.clear(),
                Field::Hypothesis => e.premise.clear(),
            }
            e
        })
        .collect();
    Dataset {
        name: ds.name.clone(),
        examples,
    }
}

/// Test accuracy of the toy classifier trained and evaluated with the other
/// field blanked.
pub fn partial_input_accuracy(train_ds: &Dataset, test_ds: &Dataset, field: Field, cfg: &ToyModelConfig) -> Result<f64, AuditError> {
    if train_ds.is_empty() {
        return Err(AuditError::Empty("train"));
    }
    if test_ds.is_empty() {
        return Err(AuditError::Empty("test"));
    }
    require_labels(train_ds)?;
    require_labels(test_ds)?;
    let (state, _) = train(&keep_field(train_ds, field), cfg)?;
    Ok(accuracy(&state, &keep_field(test_ds, field)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WordLabelStat {
    pub word: String,
    pub label: Label,
    pub n: usize,
    pub p_hat: f64,
    pub z: f64,
    pub detectable: bool,
}

/// One-sided z of `p_hat` against `p0` with `n` trials.
pub fn z_statistic(p_hat: f64, p0: f64, n: usize) -> f64 {
    (p_hat - p0) / (p0 * (1.0 - p0) / n as f64).sqrt()
}

/// Critical z for `alpha` split over `tests` comparisons.
pub fn bonferroni_threshold(alpha: f64, tests: usize) -> f64 {
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    normal.inverse_cdf(1.0 - alpha / tests.max(1) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LexicalReport {
    pub tested_words: usize,
    pub threshold: f64,
    /// Sorted by z descending, then word, then label.
    pub stats: Vec<WordLabelStat>,
}

impl LexicalReport {
    pub fn detections(&self) -> impl Iterator<Item = &WordLabelStat> {
        self.stats.iter().filter(|s| s.detectable)
    }
}

fn words_of(e: &Example) -> BTreeSet<String> {
    tokenize(&format!("{} {}", e.premise, e.hypothesis)).into_iter().collect()
}

/// Tests every (word, label) pair for words present in at least `min_count`
/// examples. The input must have equal class counts.
pub fn lexical_correlations(ds: &Dataset, alpha: f64, min_count: usize) -> Result<LexicalReport, AuditError> {
    if min_count == 0 {
        return Err(AuditError::BadMinCount);
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(AuditError::BadAlpha(alpha));
    }
    require_labels(ds)?;
    let counts = ds.label_counts();
    if counts.iter().any(|c| *c != counts[0]) {
        return Err(AuditError::Unbalanced(counts));
    }
    let mut table: BTreeMap<String, [usize; Label::COUNT]> = BTreeMap::new();
    for e in ds.iter() {
        let l = e.label.expect("checked").index();
        for w in words_of(e) {
            table.entry(w).or_default()[l] += 1;
        }
    }
    table.retain(|_, c| c.iter().sum::<usize>() >= min_count);
    let tested = table.len();
    let threshold = bonferroni_threshold(alpha, tested * Label::COUNT);
    let p0 = 1.0 / Label::COUNT as f64;
    let mut stats: Vec<WordLabelStat> = table
        .into_iter()
        .flat_map(|(word, c)| {
            let n: usize = c.iter().sum();
            Label::ALL.into_iter().map(move |label| {
                let p_hat = c[label.index()] as f64 / n as f64;
                let z = z_statistic(p_hat, p0, n);
                WordLabelStat {
                    word: word.clone(),
                    label,
                    n,
                    p_hat,
                    z,
                    detectable: z > threshold,
                }
            })
        })
        .collect();
    stats.sort_by(|a, b| b.z.total_cmp(&a.z).then_with(|| a.word.cmp(&b.word)).then(a.label.cmp(&b.label)));
    Ok(LexicalReport {
        tested_words: tested,
        threshold,
        stats,
    })
}

pub fn write_lexical_csv(stats: &[WordLabelStat], path: &Path) -> Result<(), AuditError> {
    let mut w = csv::Writer::from_path(path)?;
    for s in stats {
        w.serialize(s)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelSimilarity {
    pub similarities: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    /// Fraction of examples per bin over [-1, 1].
    pub histogram: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairOverlap {
    pub a: Label,
    pub b: Label,
    pub overlap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityDistribution {
    pub per_label: BTreeMap<Label, LabelSimilarity>,
    /// Only pairs where both classes have examples.
    pub overlaps: Vec<PairOverlap>,
}

pub fn histogram(values: &[f64], bins: usize) -> Vec<f64> {
    let mut h = vec![0.0; bins];
    if values.is_empty() {
        return h;
    }
    for v in values {
        let i = (((v.clamp(-1.0, 1.0) + 1.0) / 2.0) * bins as f64).floor() as usize;
        h[i.min(bins - 1)] += 1.0;
    }
    let n = values.len() as f64;
    h.iter_mut().for_each(|x| *x /= n);
    h
}

/// Sum of bin-wise minima of two normalized histograms.
pub fn overlap_coefficient(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.min(*y)).sum()
}

fn embedding<'a>(table: &'a EmbeddingTable, key: String) -> Result<&'a [f64], AuditError> {
    let v = table.get(&key).ok_or_else(|| AuditError::MissingEmbedding(key.clone()))?;
    if v.iter().all(|x| *x == 0.0) {
        return Err(AuditError::ZeroNorm(key));
    }
    Ok(v)
}

/// Premise/hypothesis cosine per example, grouped by label. Embeddings are
/// looked up as `<id>#premise` and `<id>#hypothesis`.
pub fn similarity_distributions(ds: &Dataset, table: &EmbeddingTable) -> Result<SimilarityDistribution, AuditError> {
    require_labels(ds)?;
    let mut by_label: BTreeMap<Label, Vec<f64>> = BTreeMap::new();
    for e in ds.iter() {
        let p = embedding(table, format!("{}#premise", e.id))?;
        let h = embedding(table, format!("{}#hypothesis", e.id))?;
        by_label.entry(e.label.expect("checked")).or_default().push(cosine(p, h));
    }
    let per_label: BTreeMap<Label, LabelSimilarity> = by_label
        .into_iter()
        .map(|(l, sims)| {
            let mean = sims.iter().sum::<f64>() / sims.len() as f64;
            let stat = LabelSimilarity {
                mean,
                std: population_std(&sims),
                histogram: histogram(&sims, SIMILARITY_BINS),
                similarities: sims,
            };
            (l, stat)
        })
        .collect();
    let labels: Vec<&Label> = per_label.keys().collect();
    let mut overlaps = Vec::new();
    for (i, a) in labels.iter().enumerate() {
        for b in &labels[i + 1..] {
            overlaps.push(PairOverlap {
                a: **a,
                b: **b,
                overlap: overlap_coefficient(&per_label[*a].histogram, &per_label[*b].histogram),
            });
        }
    }
    Ok(SimilarityDistribution { per_label, overlaps })
}

/// Sentence-level stand-in embeddings from the hashed bag of words, keyed the
/// way [`similarity_distributions`] expects. Useful when no encoder output is
/// at hand.
pub fn hashed_sentence_embeddings(ds: &Dataset, dims: usize) -> EmbeddingTable {
    let mut t = EmbeddingTable::new(dims);
    for e in ds.iter() {
        for (field, text) in [("premise", &e.premise), ("hypothesis", &e.hypothesis)] {
            let mut v = vec![0.0; dims];
            for tok in tokenize(text) {
                v[(crate::text::fnv1a(tok.as_bytes()) % dims as u64) as usize] += 1.0;
            }
            t.insert(format!("{}#{field}", e.id), v).expect("dims match");
        }
    }
    t
}
