//! Stage 2 overgeneration: render an exemplar group as a completion prompt,
//! sample n completions, and parse them into candidate pairs.
//!
//! Prompt layout (k = 2, entailment):
//!
//! ```text
//! Write a pair of sentences that have the same relationship as the previous examples. Examples:
//!
//! 1. <least similar premise>
//! Implication: <hypothesis>
//!
//! 2. <more similar premise>
//! Implication: <hypothesis>
//!
//! 3. <seed premise>
//! Implication: <seed hypothesis>
//!
//! 4.
//! ```

pub mod lm;

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::corpus::{Dataset, Label};
use crate::exemplars::ExemplarGroup;
use lm::{complete, CompletionRequest, LmEndpoint, RetryPolicy};

pub const DEFAULT_INSTRUCTION: &str =
    "Write a pair of sentences that have the same relationship as the previous examples. Examples:";

#[derive(Debug, thiserror::Error)]
pub enum PromptError {
    #[error("group member {0:?} is not in the dataset")]
    MissingMember(String),
    #[error("group member {0:?} has an empty premise or hypothesis")]
    EmptyMember(String),
    #[error("no relation word configured for {0}")]
    NoRelationWord(Label),
    #[error("invalid prompt config: {0}")]
    BadConfig(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PromptConfig {
    pub relation_words: BTreeMap<Label, String>,
    pub instruction: String,
    pub samples_per_context: usize,
}

impl Default for PromptConfig {
    fn default() -> Self {
        PromptConfig {
            relation_words: [
                (Label::Entailment, "Implication".to_string()),
                (Label::Neutral, "Possibility".to_string()),
                (Label::Contradiction, "Contradiction".to_string()),
            ]
            .into(),
            instruction: DEFAULT_INSTRUCTION.to_string(),
            samples_per_context: 5,
        }
    }
}

impl PromptConfig {
    pub fn validate(&self) -> Result<(), PromptError> {
        let mut seen = std::collections::BTreeSet::new();
        for l in Label::ALL {
            let w = self.relation_words.get(&l).ok_or(PromptError::NoRelationWord(l))?;
            if w.trim().is_empty() {
                return Err(PromptError::BadConfig(format!("empty relation word for {l}")));
            }
            if !seen.insert(w.as_str()) {
                return Err(PromptError::BadConfig(format!("relation word {w:?} used twice")));
            }
        }
        if self.samples_per_context == 0 {
            return Err(PromptError::BadConfig("samples_per_context must be >= 1".into()));
        }
        Ok(())
    }

    pub fn relation_word(&self, label: Label) -> Result<&str, PromptError> {
        self.relation_words
            .get(&label)
            .map(String::as_str)
            .ok_or(PromptError::NoRelationWord(label))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodingConfig {
    pub top_p: f64,
    pub temperature: f64,
    pub max_tokens: u32,
    pub stop: String,
    pub presence_penalty: f64,
    pub frequency_penalty: f64,
}

impl Default for DecodingConfig {
    fn default() -> Self {
        DecodingConfig {
            top_p: 0.5,
            temperature: 1.0,
            max_tokens: 120,
            stop: "\n\n".into(),
            presence_penalty: 0.0,
            frequency_penalty: 0.0,
        }
    }
}

impl DecodingConfig {
    pub fn validate(&self) -> Result<(), PromptError> {
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(PromptError::BadConfig(format!("top_p {} not in (0, 1]", self.top_p)));
        }
        if self.max_tokens == 0 {
            return Err(PromptError::BadConfig("max_tokens must be > 0".into()));
        }
        Ok(())
    }
}

fn one_line(s: &str) -> String {
    s.trim().replace(['\r', '\n'], " ")
}

/// Renders the few-shot prompt for one group. Neighbors appear in increasing
/// similarity to the seed, the seed comes last, and the prompt ends with the
/// next item number as the generation cue.
pub fn render_prompt(group: &ExemplarGroup, dataset: &Dataset, cfg: &PromptConfig) -> Result<String, PromptError> {
    let word = cfg.relation_word(group.label)?;
    let index = dataset.index();
    let mut out = String::new();
    out.push_str(&cfg.instruction);
    out.push_str("\n\n");
    let order = group.prompt_order();
    for (i, id) in order.iter().enumerate() {
        let ex = index
            .get(id)
            .map(|&n| &dataset.examples[n])
            .ok_or_else(|| PromptError::MissingMember(id.to_string()))?;
        if !ex.is_complete() {
            return Err(PromptError::EmptyMember(id.to_string()));
        }
        out.push_str(&format!(
            "{}. {}\n{}: {}\n\n",
            i + 1,
            one_line(&ex.premise),
            word,
            one_line(&ex.hypothesis)
        ));
    }
    out.push_str(&format!("{}.", order.len() + 1));
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, thiserror::Error)]
#[serde(rename_all = "kebab-case")]
pub enum ParseFailure {
    #[error("no separator line")]
    NoSeparator,
    #[error("more than one separator line")]
    MultipleSeparators,
    #[error("premise or hypothesis is empty")]
    EmptySide,
}

fn strip_leading_number(s: &str) -> &str {
    let t = s.trim_start();
    let digits = t.len() - t.trim_start_matches(|c: char| c.is_ascii_digit()).len();
    if digits > 0 {
        if let Some(rest) = t[digits..].strip_prefix('.') {
            return rest.trim_start();
        }
    }
    t
}

/// Splits a completion into (premise, hypothesis). The separator is the one
/// line starting with `<relation_word>:`; everything before it is the
/// premise (with any leading `N.` removed), everything after the colon the
/// hypothesis.
pub fn parse_completion(raw: &str, relation_word: &str) -> Result<(String, String), ParseFailure> {
    let marker = format!("{relation_word}:");
    let lines: Vec<&str> = raw.lines().collect();
    let seps: Vec<usize> = lines
        .iter()
        .enumerate()
        .filter(|(_, l)| l.trim_start().starts_with(&marker))
        .map(|(i, _)| i)
        .collect();
    let sep = match seps.as_slice() {
        [] => return Err(ParseFailure::NoSeparator),
        [one] => *one,
        _ => return Err(ParseFailure::MultipleSeparators),
    };
    let premise_lines: Vec<&str> = lines[..sep].iter().map(|l| l.trim()).filter(|l| !l.is_empty()).collect();
    let premise = strip_leading_number(&premise_lines.join(" ")).trim().to_string();
    let first = &lines[sep].trim_start()[marker.len()..];
    let hypothesis = std::iter::once(first)
        .chain(lines[sep + 1..].iter().copied())
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .collect::<Vec<_>>()
        .join(" ");
    if premise.is_empty() || hypothesis.is_empty() {
        return Err(ParseFailure::EmptySide);
    }
    Ok((premise, hypothesis))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratedCandidate {
    pub id: String,
    pub raw: String,
    pub premise: Option<String>,
    pub hypothesis: Option<String>,
    pub intended_label: Label,
    pub seed_id: String,
    pub sample_index: usize,
    pub parse_ok: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parse_error: Option<ParseFailure>,
}

impl GeneratedCandidate {
    pub fn candidate_id(seed_id: &str, sample_index: usize) -> String {
        format!("{seed_id}.g{sample_index}")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestFailure {
    pub seed_id: String,
    pub sample_index: usize,
    pub error: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Overgeneration {
    /// Every completion received, parsable or not, in (group, sample) order.
    pub candidates: Vec<GeneratedCandidate>,
    pub failures: Vec<RequestFailure>,
}

impl Overgeneration {
    /// The parsable candidates.
    pub fn generated(&self) -> impl Iterator<Item = &GeneratedCandidate> {
        self.candidates.iter().filter(|c| c.parse_ok)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GenerationOptions {
    pub max_in_flight: usize,
    pub retry: RetryPolicy,
}

impl Default for GenerationOptions {
    fn default() -> Self {
        GenerationOptions {
            max_in_flight: 4,
            retry: RetryPolicy::default(),
        }
    }
}

/// Requests `samples_per_context` completions for every group. Requests run
/// concurrently (bounded by `max_in_flight`); output order is (group order,
/// sample index) regardless of arrival order. Endpoint failures are recorded
/// and the run continues.
pub fn overgenerate(
    groups: &[ExemplarGroup],
    dataset: &Dataset,
    pcfg: &PromptConfig,
    dcfg: &DecodingConfig,
    endpoint: &dyn LmEndpoint,
    opts: &GenerationOptions,
) -> Result<Overgeneration, PromptError> {
    pcfg.validate()?;
    dcfg.validate()?;
    let n = pcfg.samples_per_context;
    let prompts: Vec<String> = groups
        .iter()
        .map(|g| render_prompt(g, dataset, pcfg))
        .collect::<Result<_, _>>()?;
    let jobs = groups.len() * n;
    let next = AtomicUsize::new(0);
    let results: Vec<Mutex<Option<Result<String, String>>>> = (0..jobs).map(|_| Mutex::new(None)).collect();

    std::thread::scope(|scope| {
        for _ in 0..opts.max_in_flight.clamp(1, jobs.max(1)) {
            scope.spawn(|| loop {
                let job = next.fetch_add(1, Ordering::Relaxed);
                if job >= jobs {
                    break;
                }
                let req = CompletionRequest::new(prompts[job / n].clone(), dcfg, job % n);
                let r = complete(endpoint, &req, &opts.retry).map_err(|e| e.to_string());
                *results[job].lock().expect("result slot poisoned") = Some(r);
            });
        }
    });

    let mut out = Overgeneration::default();
    for (job, slot) in results.into_iter().enumerate() {
        let group = &groups[job / n];
        let sample_index = job % n;
        match slot.into_inner().expect("result slot poisoned") {
            Some(Ok(raw)) => {
                let word = pcfg.relation_word(group.label)?;
                let parsed = parse_completion(&raw, word);
                let (premise, hypothesis, parse_error) = match parsed {
                    Ok((p, h)) => (Some(p), Some(h), None),
                    Err(e) => (None, None, Some(e)),
                };
                out.candidates.push(GeneratedCandidate {
                    id: GeneratedCandidate::candidate_id(&group.seed_id, sample_index),
                    raw,
                    premise,
                    hypothesis,
                    intended_label: group.label,
                    seed_id: group.seed_id.clone(),
                    sample_index,
                    parse_ok: parse_error.is_none(),
                    parse_error,
                });
            }
            Some(Err(error)) => out.failures.push(RequestFailure {
                seed_id: group.seed_id.clone(),
                sample_index,
                error,
            }),
            None => unreachable!("every job index below `jobs` is claimed exactly once"),
        }
    }
    Ok(out)
}
