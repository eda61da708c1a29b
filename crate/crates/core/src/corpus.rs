//! Canonical data model and JSONL I/O for datasets at every pipeline stage.
//!
//! One record per line:
//! `{"id", "premise", "hypothesis", "label", "genre", "source", "seed_id", "meta"}`.
//! Fields the reader does not know are folded into `meta` so nothing is lost
//! on a read/write cycle.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::text::seeded_rng;

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("{path}: line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("duplicate example id {0:?}")]
    DuplicateId(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("test_count {requested} exceeds dataset size {available}")]
    TestCountTooLarge { requested: usize, available: usize },
    #[error("unknown label {0:?}")]
    UnknownLabel(String),
}

impl CorpusError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        CorpusError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// NLI label set. The discriminant order is the column order used in every
/// probability vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Entailment,
    Neutral,
    Contradiction,
}

impl Label {
    pub const ALL: [Label; 3] = [Label::Entailment, Label::Neutral, Label::Contradiction];
    pub const COUNT: usize = 3;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Label> {
        Self::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Entailment => "entailment",
            Label::Neutral => "neutral",
            Label::Contradiction => "contradiction",
        }
    }

    pub fn names() -> Vec<String> {
        Self::ALL.iter().map(|l| l.as_str().to_string()).collect()
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Label {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "entailment" => Ok(Label::Entailment),
            "neutral" => Ok(Label::Neutral),
            "contradiction" => Ok(Label::Contradiction),
            _ => Err(CorpusError::UnknownLabel(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    #[default]
    Original,
    Generated,
    Revised,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub id: String,
    pub premise: String,
    pub hypothesis: String,
    #[serde(default)]
    pub label: Option<Label>,
    #[serde(default)]
    pub genre: Option<String>,
    #[serde(default)]
    pub source: Source,
    #[serde(default)]
    pub seed_id: Option<String>,
    #[serde(default)]
    pub meta: Map<String, Value>,
}

impl Example {
    pub fn new(id: impl Into<String>, premise: impl Into<String>, hypothesis: impl Into<String>) -> Self {
        Example {
            id: id.into(),
            premise: premise.into(),
            hypothesis: hypothesis.into(),
            label: None,
            genre: None,
            source: Source::Original,
            seed_id: None,
            meta: Map::new(),
        }
    }

    pub fn with_label(mut self, label: Label) -> Self {
        self.label = Some(label);
        self
    }

    pub fn with_genre(mut self, genre: impl Into<String>) -> Self {
        self.genre = Some(genre.into());
        self
    }

    /// Both sides non-empty after trimming; required from the filtering stage on.
    pub fn is_complete(&self) -> bool {
        !self.premise.trim().is_empty() && !self.hypothesis.trim().is_empty()
    }
}

/// On-disk record; `extra` catches unknown keys.
#[derive(Deserialize)]
struct RawRecord {
    id: String,
    premise: String,
    hypothesis: String,
    #[serde(default)]
    label: Option<Label>,
    #[serde(default)]
    genre: Option<String>,
    #[serde(default)]
    source: Source,
    #[serde(default)]
    seed_id: Option<String>,
    #[serde(default)]
    meta: Map<String, Value>,
    #[serde(flatten)]
    extra: BTreeMap<String, Value>,
}

impl From<RawRecord> for Example {
    fn from(raw: RawRecord) -> Self {
        let mut meta = raw.meta;
        for (k, v) in raw.extra {
            meta.entry(k).or_insert(v);
        }
        Example {
            id: raw.id,
            premise: raw.premise,
            hypothesis: raw.hypothesis,
            label: raw.label,
            genre: raw.genre,
            source: raw.source,
            seed_id: raw.seed_id,
            meta,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub name: String,
    pub examples: Vec<Example>,
}

impl Dataset {
    /// Builds a dataset, rejecting duplicate ids.
    pub fn new(name: impl Into<String>, examples: Vec<Example>) -> Result<Self, CorpusError> {
        let mut seen = HashSet::with_capacity(examples.len());
        for ex in &examples {
            if !seen.insert(ex.id.as_str()) {
                return Err(CorpusError::DuplicateId(ex.id.clone()));
            }
        }
        Ok(Dataset {
            name: name.into(),
            examples,
        })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Example> {
        self.examples.iter()
    }

    /// id → position lookup.
    pub fn index(&self) -> BTreeMap<&str, usize> {
        self.examples
            .iter()
            .enumerate()
            .map(|(i, e)| (e.id.as_str(), i))
            .collect()
    }

    pub fn get(&self, id: &str) -> Option<&Example> {
        self.examples.iter().find(|e| e.id == id)
    }

    pub fn label_counts(&self) -> [usize; Label::COUNT] {
        let mut counts = [0; Label::COUNT];
        for l in self.examples.iter().filter_map(|e| e.label) {
            counts[l.index()] += 1;
        }
        counts
    }
}

/// Reads a JSONL dataset. Blank lines are skipped but still counted for
/// error line numbers.
pub fn read_dataset(path: &Path) -> Result<Dataset, CorpusError> {
    let file = File::open(path).map_err(|e| CorpusError::io(path, e))?;
    let reader = BufReader::new(file);
    let mut examples = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| CorpusError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawRecord = serde_json::from_str(&line).map_err(|e| CorpusError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        if !seen.insert(raw.id.clone()) {
            return Err(CorpusError::DuplicateId(raw.id));
        }
        examples.push(Example::from(raw));
    }
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(Dataset { name, examples })
}

pub fn write_dataset(ds: &Dataset, path: &Path) -> Result<(), CorpusError> {
    write_jsonl(path, &ds.examples)
}

/// Writes any serializable records as JSONL.
pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<(), CorpusError> {
    let file = File::create(path).map_err(|e| CorpusError::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(|e| CorpusError::io(path, e.into()))?;
        w.write_all(b"\n").map_err(|e| CorpusError::io(path, e))?;
    }
    w.flush().map_err(|e| CorpusError::io(path, e))
}

/// Reads JSONL records of any deserializable type.
pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, CorpusError> {
    let file = File::open(path).map_err(|e| CorpusError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| CorpusError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| CorpusError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

/// Test size used when none is given: 5000, capped at 10% of the data.
pub fn default_test_count(n: usize) -> usize {
    5000.min(n / 10)
}

/// Uniform random (non-stratified) split. Both halves keep the input order.
pub fn split_train_test(
    ds: &Dataset,
    test_count: usize,
    rng_seed: u64,
) -> Result<(Dataset, Dataset), CorpusError> {
    if test_count > ds.len() {
        return Err(CorpusError::TestCountTooLarge {
            requested: test_count,
            available: ds.len(),
        });
    }
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.shuffle(&mut seeded_rng(rng_seed));
    let mut is_test = vec![false; ds.len()];
    for &i in &order[..test_count] {
        is_test[i] = true;
    }
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (ex, t) in ds.examples.iter().zip(is_test) {
        if t {
            test.push(ex.clone());
        } else {
            train.push(ex.clone());
        }
    }
    Ok((
        Dataset {
            name: format!("{}.train", ds.name),
            examples: train,
        },
        Dataset {
            name: format!("{}.test", ds.name),
            examples: test,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;

    fn ds(n: usize) -> Dataset {
        let examples = (0..n)
            .map(|i| Example::new(format!("e{i}"), format!("p {i}"), format!("h {i}")).with_label(Label::ALL[i % 3]))
            .collect();
        Dataset::new("t", examples).unwrap()
    }

    #[test]
    fn reads_in_file_order_and_keeps_unknown_fields() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.jsonl");
        fs::write(
            &p,
            concat!(
                r#"{"id":"b","premise":"P1","hypothesis":"H1","label":"neutral","extra":7}"#,
                "\n",
                r#"{"id":"a","premise":"P2","hypothesis":"H2","label":null,"genre":"fiction"}"#,
                "\n\n",
                r#"{"id":"c","premise":"P3","hypothesis":"H3","source":"generated","seed_id":"a"}"#,
                "\n"
            ),
        )
        .unwrap();
        let d = read_dataset(&p).unwrap();
        let ids: Vec<_> = d.iter().map(|e| e.id.as_str()).collect();
        assert_eq!(ids, ["b", "a", "c"]);
        assert_eq!(d.examples[0].meta["extra"], 7);
        assert_eq!(d.examples[0].label, Some(Label::Neutral));
        assert_eq!(d.examples[1].genre.as_deref(), Some("fiction"));
        assert_eq!(d.examples[2].source, Source::Generated);
    }

    #[test]
    fn duplicate_id_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.jsonl");
        let line = r#"{"id":"e1","premise":"a","hypothesis":"b"}"#;
        fs::write(&p, format!("{line}\n{line}\n")).unwrap();
        match read_dataset(&p) {
            Err(CorpusError::DuplicateId(id)) => assert_eq!(id, "e1"),
            other => panic!("expected duplicate id, got {other:?}"),
        }
    }

    #[test]
    fn missing_premise_cites_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.jsonl");
        fs::write(
            &p,
            "{\"id\":\"e1\",\"premise\":\"a\",\"hypothesis\":\"b\"}\n{\"id\":\"e2\",\"hypothesis\":\"b\"}\n",
        )
        .unwrap();
        match read_dataset(&p) {
            Err(CorpusError::Parse { line, message, .. }) => {
                assert_eq!(line, 2);
                assert!(message.contains("premise"), "{message}");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn empty_and_unicode_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.jsonl");
        let empty = Dataset::new("e", vec![]).unwrap();
        write_dataset(&empty, &p).unwrap();
        assert_eq!(fs::metadata(&p).unwrap().len(), 0);
        assert!(read_dataset(&p).unwrap().is_empty());

        let u = Dataset::new(
            "e",
            vec![Example::new("ü", "Ça va? 東京 🚀", "naïve \"quoted\"\ttab").with_label(Label::Contradiction)],
        )
        .unwrap();
        write_dataset(&u, &p).unwrap();
        assert_eq!(read_dataset(&p).unwrap().examples, u.examples);
    }

    #[test]
    fn thousand_examples_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("k.jsonl");
        let mut d = ds(1000);
        for (i, e) in d.examples.iter_mut().enumerate() {
            if i % 7 == 0 {
                e.genre = Some("travel".into());
                e.meta.insert("score".into(), Value::from(i as f64 / 3.0));
            }
            if i % 11 == 0 {
                e.label = None;
                e.source = Source::Revised;
                e.seed_id = Some(format!("s{i}"));
            }
        }
        write_dataset(&d, &p).unwrap();
        assert_eq!(read_dataset(&p).unwrap().examples, d.examples);
    }

    #[test]
    fn split_edges() {
        let d = ds(10);
        let (tr, te) = split_train_test(&d, 0, 1).unwrap();
        assert_eq!((tr.len(), te.len()), (10, 0));
        let (tr, te) = split_train_test(&d, 10, 1).unwrap();
        assert_eq!((tr.len(), te.len()), (0, 10));
        assert!(matches!(
            split_train_test(&d, 11, 1),
            Err(CorpusError::TestCountTooLarge { requested: 11, available: 10 })
        ));
    }

    #[test]
    fn split_is_deterministic_partition() {
        let d = ds(50);
        let a = split_train_test(&d, 17, 9).unwrap();
        let b = split_train_test(&d, 17, 9).unwrap();
        assert_eq!(a, b);
        let mut all: Vec<_> = a.0.iter().chain(a.1.iter()).map(|e| e.id.clone()).collect();
        all.sort();
        let mut orig: Vec<_> = d.iter().map(|e| e.id.clone()).collect();
        orig.sort();
        assert_eq!(all, orig);
        assert_eq!(a.1.len(), 17);
    }

    #[test]
    fn default_test_count_caps_at_ten_percent() {
        assert_eq!(default_test_count(107_885), 5000);
        assert_eq!(default_test_count(300), 30);
    }
}
