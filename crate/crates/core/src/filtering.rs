//! Stage 3 filtering.
//!
//! Generated pairs first go through four cheap rejection rules, applied in a
//! fixed order (identical sides, copy of an in-context example, instruction
//! leakage, too short). Survivors are scored by estimated max variability
//! under the task model, and the top `q` fraction is kept with an equal quota
//! per intended label. Whatever survives is written out unlabeled.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::corpus::{Dataset, Example, Label, Source};
use crate::dynamics::{estimated_max_variability, DynamicsError, EpochPredictionLog};
use crate::exemplars::ExemplarGroup;
use crate::prompting::GeneratedCandidate;
use crate::toytrainer::{predict_over_epochs, ToyModelState};

#[derive(Debug, thiserror::Error)]
pub enum FilterError {
    #[error("candidate {0:?} did not parse and cannot be filtered")]
    Unparsed(String),
    #[error("no predictions for candidate {0:?}")]
    MissingPredictions(String),
    #[error("no score for kept candidate {0:?}")]
    MissingScore(String),
    #[error("q must be in (0, 1], got {0}")]
    BadFraction(f64),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterRule {
    IdenticalPair,
    CopiedIncontext,
    InstructionPhrase,
    TooShort,
    LowVariability,
}

impl FilterRule {
    pub const ALL: [FilterRule; 5] = [
        FilterRule::IdenticalPair,
        FilterRule::CopiedIncontext,
        FilterRule::InstructionPhrase,
        FilterRule::TooShort,
        FilterRule::LowVariability,
    ];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterVerdict {
    pub candidate_id: String,
    pub kept: bool,
    pub rule: Option<FilterRule>,
    pub score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterConfig {
    pub q: f64,
    pub min_chars: usize,
    pub instruction_phrases: Vec<String>,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            q: 0.5,
            min_chars: 5,
            instruction_phrases: vec![
                "pair of sentences".into(),
                "same relationship".into(),
                "previous examples".into(),
            ],
        }
    }
}

/// Lowercase, drop every character that is neither alphanumeric nor
/// whitespace, collapse whitespace runs, trim.
pub fn normalize_for_compare(text: &str) -> String {
    let stripped: String = text
        .chars()
        .filter(|c| c.is_alphanumeric() || c.is_whitespace())
        .flat_map(char::to_lowercase)
        .collect();
    stripped.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Normalized (premise, hypothesis) pairs of each group's in-context
/// examples, keyed by seed id.
pub fn context_pairs(groups: &[ExemplarGroup], dataset: &Dataset) -> BTreeMap<String, Vec<(String, String)>> {
    let index = dataset.index();
    groups
        .iter()
        .map(|g| {
            let pairs = g
                .members()
                .filter_map(|id| index.get(id).map(|&i| &dataset.examples[i]))
                .map(|e| (normalize_for_compare(&e.premise), normalize_for_compare(&e.hypothesis)))
                .collect();
            (g.seed_id.clone(), pairs)
        })
        .collect()
}

/// First matching rejection rule, or a pending keep (no score yet).
/// `in_context` holds normalized pairs, as built by [`context_pairs`].
pub fn apply_heuristics(
    c: &GeneratedCandidate,
    in_context: &[(String, String)],
    cfg: &FilterConfig,
) -> Result<FilterVerdict, FilterError> {
    let (Some(premise), Some(hypothesis)) = (c.premise.as_deref(), c.hypothesis.as_deref()) else {
        return Err(FilterError::Unparsed(c.id.clone()));
    };
    let np = normalize_for_compare(premise);
    let nh = normalize_for_compare(hypothesis);
    let rule = if np == nh {
        Some(FilterRule::IdenticalPair)
    } else if in_context.iter().any(|(p, h)| *p == np && *h == nh) {
        Some(FilterRule::CopiedIncontext)
    } else if {
        let (lp, lh) = (premise.to_lowercase(), hypothesis.to_lowercase());
        cfg.instruction_phrases.iter().any(|ph| {
            let ph = ph.to_lowercase();
            lp.contains(&ph) || lh.contains(&ph)
        })
    } {
        Some(FilterRule::InstructionPhrase)
    } else if premise.trim().chars().count() < cfg.min_chars || hypothesis.trim().chars().count() < cfg.min_chars {
        Some(FilterRule::TooShort)
    } else {
        None
    };
    Ok(FilterVerdict {
        candidate_id: c.id.clone(),
        kept: rule.is_none(),
        rule,
        score: None,
    })
}

/// Where per-epoch predictions for candidates come from.
pub enum Scorer<'a> {
    Model(&'a ToyModelState),
    /// Externally produced predictions keyed by candidate id.
    Log(&'a EpochPredictionLog),
}

fn as_example(c: &GeneratedCandidate) -> Example {
    Example::new(
        c.id.clone(),
        c.premise.clone().unwrap_or_default(),
        c.hypothesis.clone().unwrap_or_default(),
    )
}

/// Estimated max variability of each candidate.
pub fn score_candidates(cands: &[&GeneratedCandidate], scorer: &Scorer<'_>) -> Result<BTreeMap<String, f64>, FilterError> {
    let mut out = BTreeMap::new();
    let by_id = match scorer {
        Scorer::Log(log) => Some(
            log.example_ids
                .iter()
                .enumerate()
                .map(|(i, id)| (id.as_str(), i))
                .collect::<BTreeMap<_, _>>(),
        ),
        Scorer::Model(_) => None,
    };
    for c in cands {
        let sigma = match scorer {
            Scorer::Model(state) => estimated_max_variability(&predict_over_epochs(state, &as_example(c)))?,
            Scorer::Log(log) => {
                let i = by_id
                    .as_ref()
                    .and_then(|m| m.get(c.id.as_str()))
                    .ok_or_else(|| FilterError::MissingPredictions(c.id.clone()))?;
                estimated_max_variability(log.matrix(*i))?
            }
        };
        out.insert(c.id.clone(), sigma);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Shortfall {
    pub label: Label,
    pub quota: usize,
    pub available: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    /// Selected candidate ids, grouped by intended label and ranked.
    pub selected: Vec<String>,
    pub dataset: Dataset,
    pub shortfalls: Vec<Shortfall>,
    pub quota: usize,
}

/// Keeps `floor(floor(q * |kept|) / |labels|)` highest-scoring candidates per
/// intended label (ties by id). A class short of its quota contributes all it
/// has and is reported; other classes are not topped up.
pub fn select_balanced_top(
    cands: &[&GeneratedCandidate],
    scores: &BTreeMap<String, f64>,
    q: f64,
) -> Result<Selection, FilterError> {
    if !(q > 0.0 && q <= 1.0) {
        return Err(FilterError::BadFraction(q));
    }
    let target = (q * cands.len() as f64).floor() as usize;
    let quota = target / Label::COUNT;
    let mut by_label: BTreeMap<Label, Vec<(&GeneratedCandidate, f64)>> = Label::ALL.iter().map(|l| (*l, vec![])).collect();
    for c in cands {
        let s = *scores.get(&c.id).ok_or_else(|| FilterError::MissingScore(c.id.clone()))?;
        by_label.entry(c.intended_label).or_default().push((c, s));
    }
    let mut selected = Vec::new();
    let mut examples = Vec::new();
    let mut shortfalls = Vec::new();
    for (label, mut items) in by_label {
        items.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.id.cmp(&b.0.id)));
        if items.len() < quota {
            shortfalls.push(Shortfall {
                label,
                quota,
                available: items.len(),
            });
        }
        for (c, s) in items.into_iter().take(quota) {
            selected.push(c.id.clone());
            let mut ex = as_example(c);
            ex.source = Source::Generated;
            ex.seed_id = Some(c.seed_id.clone());
            ex.meta.insert("intended_label".into(), Value::from(label.as_str()));
            ex.meta.insert("est_max_variability".into(), Value::from(s));
            examples.push(ex);
        }
    }
    Ok(Selection {
        selected,
        dataset: Dataset {
            name: "filtered".into(),
            examples,
        },
        shortfalls,
        quota,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterReport {
    pub input: usize,
    pub discarded: BTreeMap<FilterRule, usize>,
    pub heuristic_kept: usize,
    pub selected: usize,
}

impl FilterReport {
    pub fn total_discarded(&self) -> usize {
        self.discarded.values().sum()
    }
}

pub fn stage_report(verdicts: &[FilterVerdict]) -> FilterReport {
    let mut discarded: BTreeMap<FilterRule, usize> = FilterRule::ALL.iter().map(|r| (*r, 0)).collect();
    let mut selected = 0;
    for v in verdicts {
        match v.rule {
            Some(r) => *discarded.entry(r).or_default() += 1,
            None if v.kept => selected += 1,
            None => {}
        }
    }
    let heuristic_kept = selected + discarded[&FilterRule::LowVariability];
    FilterReport {
        input: verdicts.len(),
        discarded,
        heuristic_kept,
        selected,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterOutput {
    /// One verdict per parsable candidate, in input order.
    pub verdicts: Vec<FilterVerdict>,
    pub selection: Selection,
    pub report: FilterReport,
}

/// The whole stage: heuristics, scoring of the survivors, balanced selection.
/// Unparsable candidates are ignored (they never entered the generated set).
pub fn filter_candidates(
    candidates: &[GeneratedCandidate],
    context: &BTreeMap<String, Vec<(String, String)>>,
    scorer: &Scorer<'_>,
    cfg: &FilterConfig,
) -> Result<FilterOutput, FilterError> {
    let empty = Vec::new();
    let mut verdicts = Vec::new();
    let mut survivors = Vec::new();
    for c in candidates.iter().filter(|c| c.parse_ok) {
        let v = apply_heuristics(c, context.get(&c.seed_id).unwrap_or(&empty), cfg)?;
        if v.kept {
            survivors.push(c);
        }
        verdicts.push(v);
    }
    let scores = score_candidates(&survivors, scorer)?;
    let selection = select_balanced_top(&survivors, &scores, cfg.q)?;
    let chosen: std::collections::BTreeSet<&str> = selection.selected.iter().map(String::as_str).collect();
    for v in verdicts.iter_mut().filter(|v| v.kept) {
        v.score = scores.get(&v.candidate_id).copied();
        if !chosen.contains(v.candidate_id.as_str()) {
            v.kept = false;
            v.rule = Some(FilterRule::LowVariability);
        }
    }
    let report = stage_report(&verdicts);
    Ok(FilterOutput {
        verdicts,
        selection,
        report,
    })
}
