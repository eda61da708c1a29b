//! Stage 1 exemplar collection: for each ambiguous seed, its k nearest
//! same-label neighbors by cosine similarity.
//!
//! Search is exact brute force. Ties are broken by id so results never depend
//! on the storage order of the embedding table.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::{Dataset, Label};
use crate::toytrainer::{dot, featurize};

#[derive(Debug, thiserror::Error)]
pub enum ExemplarError {
    #[error("seed {0:?} is not in the dataset")]
    UnknownSeed(String),
    #[error("seed {0:?} has no label")]
    UnlabeledSeed(String),
    #[error("no embedding for {0:?}")]
    MissingVector(String),
    #[error("embedding of {0:?} has zero norm")]
    ZeroNorm(String),
    #[error("seed {seed:?}: needed {needed} same-label neighbors, found {found}")]
    NotEnoughNeighbors { seed: String, needed: usize, found: usize },
    #[error("vector for {id:?} has dimension {got}, table dimension is {expected}")]
    Dimension { id: String, expected: usize, got: usize },
    #[error("{path}: line {line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// id → fixed-dimension vector.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EmbeddingTable {
    dim: usize,
    vectors: BTreeMap<String, Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct EmbHeader {
    dim: usize,
}

#[derive(Serialize, Deserialize)]
struct EmbRecord {
    id: String,
    vec: Vec<f64>,
}

impl EmbeddingTable {
    pub fn new(dim: usize) -> Self {
        EmbeddingTable {
            dim,
            vectors: BTreeMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn insert(&mut self, id: impl Into<String>, v: Vec<f64>) -> Result<(), ExemplarError> {
        let id = id.into();
        if v.len() != self.dim {
            return Err(ExemplarError::Dimension {
                id,
                expected: self.dim,
                got: v.len(),
            });
        }
        self.vectors.insert(id, v);
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&[f64]> {
        self.vectors.get(id).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.vectors.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    /// Embeds every example with the toy featurizer.
    pub fn from_featurizer(ds: &Dataset, hash_dims: usize) -> Self {
        let mut t = EmbeddingTable::new(hash_dims);
        for ex in ds.iter() {
            t.vectors.insert(ex.id.clone(), featurize(ex, hash_dims));
        }
        t
    }

    pub fn read(path: &Path) -> Result<Self, ExemplarError> {
        let io = |source| ExemplarError::Io {
            path: path.to_path_buf(),
            source,
        };
        let parse = |line: usize, message: String| ExemplarError::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        let reader = BufReader::new(File::open(path).map_err(io)?);
        let mut table: Option<EmbeddingTable> = None;
        for (i, line) in reader.lines().enumerate() {
            let line = line.map_err(|source| ExemplarError::Io {
                path: path.to_path_buf(),
                source,
            })?;
            if line.trim().is_empty() {
                continue;
            }
            match table.as_mut() {
                None => {
                    let h: EmbHeader = serde_json::from_str(&line).map_err(|e| parse(i + 1, e.to_string()))?;
                    table = Some(EmbeddingTable::new(h.dim));
                }
                Some(t) => {
                    let r: EmbRecord = serde_json::from_str(&line).map_err(|e| parse(i + 1, e.to_string()))?;
                    t.insert(r.id, r.vec)?;
                }
            }
        }
        table.ok_or_else(|| parse(1, "missing {\"dim\": d} header".into()))
    }

    pub fn write(&self, path: &Path) -> Result<(), ExemplarError> {
        let io = |source| ExemplarError::Io {
            path: path.to_path_buf(),
            source,
        };
        let mut w = BufWriter::new(File::create(path).map_err(io)?);
        let mut line = |v: String| writeln!(w, "{v}");
        let header = serde_json::to_string(&EmbHeader { dim: self.dim }).expect("header serializes");
        line(header).map_err(io)?;
        for (id, v) in &self.vectors {
            let rec = serde_json::to_string(&EmbRecord {
                id: id.clone(),
                vec: v.clone(),
            })
            .expect("record serializes");
            line(rec).map_err(io)?;
        }
        w.flush().map_err(io)
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    (dot(a, b) / (na * nb)).clamp(-1.0, 1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExemplarGroup {
    pub seed_id: String,
    /// Most similar first.
    pub neighbor_ids: Vec<String>,
    pub label: Label,
    /// Aligned with `neighbor_ids`.
    pub similarities: Vec<f64>,
}

impl ExemplarGroup {
    /// Members in prompt order: increasing similarity to the seed, seed last.
    pub fn prompt_order(&self) -> Vec<&str> {
        let mut idx: Vec<usize> = (0..self.neighbor_ids.len()).collect();
        idx.sort_by(|&a, &b| {
            self.similarities[a]
                .total_cmp(&self.similarities[b])
                .then_with(|| self.neighbor_ids[b].cmp(&self.neighbor_ids[a]))
        });
        idx.iter()
            .map(|&i| self.neighbor_ids[i].as_str())
            .chain(std::iter::once(self.seed_id.as_str()))
            .collect()
    }

    pub fn members(&self) -> impl Iterator<Item = &str> {
        self.neighbor_ids
            .iter()
            .map(String::as_str)
            .chain(std::iter::once(self.seed_id.as_str()))
    }
}

fn nonzero<'a>(table: &'a EmbeddingTable, id: &str) -> Result<&'a [f64], ExemplarError> {
    let v = table.get(id).ok_or_else(|| ExemplarError::MissingVector(id.to_string()))?;
    if v.iter().all(|x| *x == 0.0) {
        return Err(ExemplarError::ZeroNorm(id.to_string()));
    }
    Ok(v)
}

/// The k most similar examples sharing the seed's label, most similar first.
/// Examples whose genre is in `exclude_genres` are never neighbors.
pub fn knn_same_label(
    seed_id: &str,
    table: &EmbeddingTable,
    dataset: &Dataset,
    k: usize,
    exclude_genres: &BTreeSet<String>,
) -> Result<ExemplarGroup, ExemplarError> {
    let seed = dataset
        .get(seed_id)
        .ok_or_else(|| ExemplarError::UnknownSeed(seed_id.to_string()))?;
    let label = seed.label.ok_or_else(|| ExemplarError::UnlabeledSeed(seed_id.to_string()))?;
    let sv = nonzero(table, seed_id)?;

    let mut scored: Vec<(f64, &str)> = Vec::new();
    for ex in dataset.iter() {
        if ex.id == seed_id || ex.label != Some(label) {
            continue;
        }
        if ex.genre.as_ref().is_some_and(|g| exclude_genres.contains(g)) {
            continue;
        }
        let v = nonzero(table, &ex.id)?;
        scored.push((cosine(sv, v), ex.id.as_str()));
    }
    if scored.len() < k {
        return Err(ExemplarError::NotEnoughNeighbors {
            seed: seed_id.to_string(),
            needed: k,
            found: scored.len(),
        });
    }
    scored.sort_by(|a, b| match b.0.total_cmp(&a.0) {
        Ordering::Equal => a.1.cmp(b.1),
        o => o,
    });
    scored.truncate(k);
    Ok(ExemplarGroup {
        seed_id: seed_id.to_string(),
        neighbor_ids: scored.iter().map(|(_, id)| id.to_string()).collect(),
        label,
        similarities: scored.iter().map(|(s, _)| *s).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedSeed {
    pub seed_id: String,
    pub reason: String,
}

/// One group per seed that succeeds; failures land in the skip report.
pub fn build_groups(
    seeds: &[String],
    table: &EmbeddingTable,
    dataset: &Dataset,
    k: usize,
    exclude_genres: &BTreeSet<String>,
) -> (Vec<ExemplarGroup>, Vec<SkippedSeed>) {
    let mut groups = Vec::with_capacity(seeds.len());
    let mut skipped = Vec::new();
    for s in seeds {
        match knn_same_label(s, table, dataset, k, exclude_genres) {
            Ok(g) => groups.push(g),
            Err(e) => skipped.push(SkippedSeed {
                seed_id: s.clone(),
                reason: e.to_string(),
            }),
        }
    }
    (groups, skipped)
}
