//! Stage 4: dual-annotation records, aggregation into a final labeled set,
//! agreement and revision analytics.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::corpus::{Dataset, Example, Label, Source};
use crate::text::{keyed_rng, tokenize, word_count};

pub const PRONOUNS: [&str; 23] = [
    "i", "me", "my", "mine", "we", "us", "our", "ours", "you", "your", "yours", "he", "him", "his", "she", "her", "hers",
    "it", "its", "they", "them", "their", "theirs",
];

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ReviewError {
    #[error("invalid annotation for {candidate_id:?} field {field}: {message}")]
    Invalid {
        candidate_id: String,
        field: &'static str,
        message: String,
    },
    #[error("both annotations of {0:?} come from worker {1:?}")]
    SameWorker(String, String),
    #[error("annotations refer to different candidates: {0:?} and {1:?}")]
    MixedCandidates(String, String),
    #[error("unknown candidate {0:?}")]
    UnknownCandidate(String),
    #[error("candidate {candidate_id:?} has {count} annotations, expected 2")]
    WrongAnnotationCount { candidate_id: String, count: usize },
    #[error("kappa needs at least one pair")]
    EmptyPairs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    LabelAsIs,
    Revise,
    Discard,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub candidate_id: String,
    pub worker_id: String,
    pub action: Action,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<Label>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub revised_premise: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub revised_hypothesis: Option<String>,
    /// Milliseconds since the Unix epoch.
    #[serde(default)]
    pub timestamp: u64,
}

impl AnnotationRecord {
    pub fn label_as_is(candidate: &str, worker: &str, label: Label) -> Self {
        AnnotationRecord {
            candidate_id: candidate.into(),
            worker_id: worker.into(),
            action: Action::LabelAsIs,
            label: Some(label),
            revised_premise: None,
            revised_hypothesis: None,
            timestamp: 0,
        }
    }

    pub fn revise(candidate: &str, worker: &str, label: Label, premise: Option<&str>, hypothesis: Option<&str>) -> Self {
        AnnotationRecord {
            action: Action::Revise,
            revised_premise: premise.map(str::to_string),
            revised_hypothesis: hypothesis.map(str::to_string),
            ..Self::label_as_is(candidate, worker, label)
        }
    }

    pub fn discard(candidate: &str, worker: &str) -> Self {
        AnnotationRecord {
            action: Action::Discard,
            label: None,
            ..Self::label_as_is(candidate, worker, Label::Neutral)
        }
    }

    /// Premise and hypothesis after applying this record's revision, if any.
    pub fn effective_text<'a>(&'a self, premise: &'a str, hypothesis: &'a str) -> (&'a str, &'a str) {
        (
            self.revised_premise.as_deref().unwrap_or(premise),
            self.revised_hypothesis.as_deref().unwrap_or(hypothesis),
        )
    }

    /// Checks the record against the candidate's original text.
    pub fn validate(&self, premise: &str, hypothesis: &str) -> Result<(), ReviewError> {
        let bad = |field, message: &str| {
            Err(ReviewError::Invalid {
                candidate_id: self.candidate_id.clone(),
                field,
                message: message.into(),
            })
        };
        if self.worker_id.trim().is_empty() {
            return bad("worker_id", "must not be empty");
        }
        match self.action {
            Action::Discard => {
                if self.revised_premise.is_some() || self.revised_hypothesis.is_some() {
                    return bad("action", "discard carries no revised text");
                }
            }
            Action::LabelAsIs | Action::Revise => {
                if self.label.is_none() {
                    return bad("label", "required unless discarding");
                }
            }
        }
        match self.action {
            Action::Revise => {
                if self.revised_premise.is_none() && self.revised_hypothesis.is_none() {
                    return bad("revised_hypothesis", "revise needs a revised premise or hypothesis");
                }
                let (p, h) = self.effective_text(premise, hypothesis);
                if p.trim().is_empty() {
                    return bad("revised_premise", "must not be empty");
                }
                if h.trim().is_empty() {
                    return bad("revised_hypothesis", "must not be empty");
                }
                if p == premise && h == hypothesis {
                    return bad("revised_hypothesis", "revision does not change the text");
                }
            }
            Action::LabelAsIs => {
                if self.revised_premise.is_some() || self.revised_hypothesis.is_some() {
                    return bad("action", "revised text requires action revise");
                }
            }
            Action::Discard => {}
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeStatus {
    Kept,
    Discarded,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregationOutcome {
    pub candidate_id: String,
    pub status: OutcomeStatus,
    pub final_premise: Option<String>,
    pub final_hypothesis: Option<String>,
    pub final_label: Option<Label>,
    pub used_revision: bool,
    pub label_disagreement: bool,
}

/// Combines two annotations of `candidate`. The random draws come from an RNG
/// keyed by (seed, candidate id) and the pair is put in worker-id order first,
/// so the result does not depend on argument order or on other candidates.
pub fn aggregate(
    a1: &AnnotationRecord,
    a2: &AnnotationRecord,
    candidate: &Example,
    seed: u64,
) -> Result<AggregationOutcome, ReviewError> {
    if a1.candidate_id != a2.candidate_id {
        return Err(ReviewError::MixedCandidates(a1.candidate_id.clone(), a2.candidate_id.clone()));
    }
    if a1.candidate_id != candidate.id {
        return Err(ReviewError::MixedCandidates(a1.candidate_id.clone(), candidate.id.clone()));
    }
    if a1.worker_id == a2.worker_id {
        return Err(ReviewError::SameWorker(a1.candidate_id.clone(), a1.worker_id.clone()));
    }
    for a in [a1, a2] {
        a.validate(&candidate.premise, &candidate.hypothesis)?;
    }
    let (a, b) = if a1.worker_id <= a2.worker_id { (a1, a2) } else { (a2, a1) };
    let mut rng = keyed_rng(seed, &candidate.id);
    let mut out = AggregationOutcome {
        candidate_id: candidate.id.clone(),
        status: OutcomeStatus::Discarded,
        final_premise: None,
        final_hypothesis: None,
        final_label: None,
        used_revision: false,
        label_disagreement: false,
    };
    if a.action == Action::Discard || b.action == Action::Discard {
        return Ok(out);
    }
    out.status = OutcomeStatus::Kept;
    if a.action == Action::Revise && b.action == Action::Revise {
        let pick = if rng.gen_bool(0.5) { a } else { b };
        let (p, h) = pick.effective_text(&candidate.premise, &candidate.hypothesis);
        out.final_premise = Some(p.to_string());
        out.final_hypothesis = Some(h.to_string());
        out.final_label = pick.label;
        out.used_revision = true;
        return Ok(out);
    }
    // A lone revision is dropped; its label still counts for the original text.
    out.final_premise = Some(candidate.premise.clone());
    out.final_hypothesis = Some(candidate.hypothesis.clone());
    let (la, lb) = (a.label.expect("validated"), b.label.expect("validated"));
    if la == lb {
        out.final_label = Some(la);
    } else {
        out.final_label = Some(if rng.gen_bool(0.5) { la } else { lb });
        out.label_disagreement = true;
    }
    Ok(out)
}

/// Groups records by candidate, in candidate-id order, requiring exactly two
/// per candidate.
pub fn pair_records(records: &[AnnotationRecord]) -> Result<Vec<(&AnnotationRecord, &AnnotationRecord)>, ReviewError> {
    let mut by_cand: BTreeMap<&str, Vec<&AnnotationRecord>> = BTreeMap::new();
    for r in records {
        by_cand.entry(&r.candidate_id).or_default().push(r);
    }
    by_cand
        .into_iter()
        .map(|(id, rs)| match rs.as_slice() {
            [a, b] => Ok((*a, *b)),
            _ => Err(ReviewError::WrongAnnotationCount {
                candidate_id: id.to_string(),
                count: rs.len(),
            }),
        })
        .collect()
}

pub fn aggregate_all(
    records: &[AnnotationRecord],
    candidates: &Dataset,
    seed: u64,
) -> Result<Vec<AggregationOutcome>, ReviewError> {
    let index = candidates.index();
    pair_records(records)?
        .into_iter()
        .map(|(a, b)| {
            let i = index
                .get(a.candidate_id.as_str())
                .ok_or_else(|| ReviewError::UnknownCandidate(a.candidate_id.clone()))?;
            aggregate(a, b, &candidates.examples[*i], seed)
        })
        .collect()
}

/// Cohen's kappa between two annotators. Returns 1 when chance agreement is 1.
pub fn cohens_kappa(pairs: &[(Label, Label)]) -> Result<f64, ReviewError> {
    if pairs.is_empty() {
        return Err(ReviewError::EmptyPairs);
    }
    let n = pairs.len() as f64;
    let mut first = [0.0; Label::COUNT];
    let mut second = [0.0; Label::COUNT];
    let mut agree = 0.0;
    for (x, y) in pairs {
        first[x.index()] += 1.0;
        second[y.index()] += 1.0;
        if x == y {
            agree += 1.0;
        }
    }
    let p_o = agree / n;
    let p_e: f64 = first.iter().zip(&second).map(|(a, b)| (a / n) * (b / n)).sum();
    if (1.0 - p_e).abs() < 1e-12 {
        return Ok(1.0);
    }
    Ok((p_o - p_e) / (1.0 - p_e))
}

/// Label pairs of candidates that both annotators labeled without revising,
/// ordered (lower worker id, higher worker id).
pub fn kappa_pairs(records: &[AnnotationRecord]) -> Result<Vec<(Label, Label)>, ReviewError> {
    Ok(pair_records(records)?
        .into_iter()
        .filter(|(a, b)| a.action == Action::LabelAsIs && b.action == Action::LabelAsIs)
        .filter_map(|(a, b)| {
            let (a, b) = if a.worker_id <= b.worker_id { (a, b) } else { (b, a) };
            Some((a.label?, b.label?))
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub annotated: usize,
    pub kept: usize,
    pub discarded: usize,
    pub kept_rate: f64,
    pub revised: usize,
    /// Share of kept examples whose text comes from a revision.
    pub revised_rate: f64,
    pub disagreements: usize,
    pub label_distribution: BTreeMap<Label, usize>,
    pub mean_premise_tokens: f64,
    pub mean_hypothesis_tokens: f64,
    pub unique_seeds: usize,
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Turns kept outcomes into labeled examples (in outcome order) and computes
/// summary statistics.
pub fn assemble(outcomes: &[AggregationOutcome], candidates: &Dataset) -> Result<(Dataset, DatasetStats), ReviewError> {
    let mut examples = Vec::new();
    let mut label_distribution: BTreeMap<Label, usize> = Label::ALL.iter().map(|l| (*l, 0)).collect();
    let (mut revised, mut disagreements) = (0, 0);
    let mut seeds = BTreeSet::new();
    for o in outcomes {
        let cand = candidates
            .get(&o.candidate_id)
            .ok_or_else(|| ReviewError::UnknownCandidate(o.candidate_id.clone()))?;
        if o.status == OutcomeStatus::Discarded {
            continue;
        }
        let (Some(p), Some(h), Some(label)) = (&o.final_premise, &o.final_hypothesis, o.final_label) else {
            return Err(ReviewError::Invalid {
                candidate_id: o.candidate_id.clone(),
                field: "final_label",
                message: "kept outcome without final text or label".into(),
            });
        };
        let mut ex = Example::new(o.candidate_id.clone(), p.clone(), h.clone()).with_label(label);
        ex.genre = cand.genre.clone();
        ex.seed_id = cand.seed_id.clone();
        ex.meta = cand.meta.clone();
        ex.source = if o.used_revision { Source::Revised } else { Source::Generated };
        if o.used_revision {
            revised += 1;
        }
        if o.label_disagreement {
            disagreements += 1;
            ex.meta.insert("label_disagreement".into(), Value::Bool(true));
        }
        if let Some(s) = &cand.seed_id {
            seeds.insert(s.clone());
        }
        *label_distribution.entry(label).or_default() += 1;
        examples.push(ex);
    }
    let kept = examples.len();
    let mean = |f: fn(&Example) -> &str| {
        if kept == 0 {
            0.0
        } else {
            examples.iter().map(|e| word_count(f(e)) as f64).sum::<f64>() / kept as f64
        }
    };
    let stats = DatasetStats {
        annotated: outcomes.len(),
        kept,
        discarded: outcomes.len() - kept,
        kept_rate: ratio(kept, outcomes.len()),
        revised,
        revised_rate: ratio(revised, kept),
        disagreements,
        label_distribution,
        mean_premise_tokens: mean(|e| &e.premise),
        mean_hypothesis_tokens: mean(|e| &e.hypothesis),
        unique_seeds: seeds.len(),
    };
    let ds = Dataset::new("collab", examples).map_err(|e| ReviewError::Invalid {
        candidate_id: String::new(),
        field: "candidate_id",
        message: e.to_string(),
    })?;
    Ok((ds, stats))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FieldRevisionStats {
    pub revisions: usize,
    /// Word-count delta (revised minus original) to number of revisions.
    pub delta_histogram: BTreeMap<i64, usize>,
    pub small_delta_fraction: f64,
    pub pronoun_change_fraction: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RevisionReport {
    pub premise: FieldRevisionStats,
    pub hypothesis: FieldRevisionStats,
}

pub fn pronoun_set(text: &str) -> BTreeSet<String> {
    tokenize(text)
        .into_iter()
        .filter(|t| PRONOUNS.contains(&t.as_str()))
        .collect()
}

#[derive(Default)]
struct Tally {
    n: usize,
    hist: BTreeMap<i64, usize>,
    small: usize,
    pronoun: usize,
}

impl Tally {
    fn add(&mut self, original: &str, revised: &str) {
        let delta = word_count(revised) as i64 - word_count(original) as i64;
        self.n += 1;
        *self.hist.entry(delta).or_default() += 1;
        if (-1..=2).contains(&delta) {
            self.small += 1;
        }
        if pronoun_set(original) != pronoun_set(revised) {
            self.pronoun += 1;
        }
    }

    fn finish(self) -> FieldRevisionStats {
        FieldRevisionStats {
            revisions: self.n,
            delta_histogram: self.hist,
            small_delta_fraction: ratio(self.small, self.n),
            pronoun_change_fraction: ratio(self.pronoun, self.n),
        }
    }
}

/// Length and pronoun changes of every field a revise record actually changed.
pub fn revision_stats(records: &[AnnotationRecord], originals: &Dataset) -> Result<RevisionReport, ReviewError> {
    let (mut prem, mut hyp) = (Tally::default(), Tally::default());
    for r in records.iter().filter(|r| r.action == Action::Revise) {
        let orig = originals
            .get(&r.candidate_id)
            .ok_or_else(|| ReviewError::UnknownCandidate(r.candidate_id.clone()))?;
        if let Some(p) = r.revised_premise.as_deref().filter(|p| *p != orig.premise) {
            prem.add(&orig.premise, p);
        }
        if let Some(h) = r.revised_hypothesis.as_deref().filter(|h| *h != orig.hypothesis) {
            hyp.add(&orig.hypothesis, h);
        }
    }
    Ok(RevisionReport {
        premise: prem.finish(),
        hypothesis: hyp.finish(),
    })
}
