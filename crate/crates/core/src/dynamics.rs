//! Training-dynamics cartography.
//!
//! An [`EpochPredictionLog`] holds, for every example, the model's label
//! distribution at the end of each training epoch. From it we derive the
//! data-map statistics (confidence, variability, correctness) for labeled
//! training data, and the estimated max variability for examples the model
//! never saw: the largest per-label standard deviation across checkpoints.
//!
//! All standard deviations are population standard deviations (divide by E).

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::{Dataset, Label};

/// Rows whose sum is within this distance of 1 are renormalized; anything
/// further off is rejected.
pub const ROW_SUM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, thiserror::Error)]
pub enum DynamicsError {
    #[error("example {0:?} has no gold label")]
    MissingGold(String),
    #[error("need at least 2 epochs, got {0}")]
    TooFewEpochs(usize),
    #[error("example {id:?} epoch {epoch}: {reason}")]
    BadRow { id: String, epoch: usize, reason: String },
    #[error("example {id:?}: expected {expected} epochs, got {got}")]
    EpochCount { id: String, expected: usize, got: usize },
    #[error("label {label:?} of example {id:?} is not in the log header")]
    UnknownLabel { id: String, label: String },
    #[error("example {0:?} is not in the dataset")]
    UnknownExample(String),
    #[error("fraction must be in (0, 1], got {0}")]
    BadFraction(f64),
    #[error("{path}: line {line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("csv {path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DynamicsError + '_ {
    move |source| DynamicsError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Per-example, per-epoch probability vectors over a fixed label list.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochPredictionLog {
    pub label_names: Vec<String>,
    pub epochs: usize,
    pub example_ids: Vec<String>,
    /// Gold label index per example, when known.
    pub labels: Vec<Option<usize>>,
    /// `probs[n][e][y]`: example n, epoch e, label y.
    pub probs: Vec<Vec<Vec<f64>>>,
}

impl EpochPredictionLog {
    pub fn new(label_names: Vec<String>, epochs: usize) -> Result<Self, DynamicsError> {
        if epochs < 2 {
            return Err(DynamicsError::TooFewEpochs(epochs));
        }
        Ok(EpochPredictionLog {
            label_names,
            epochs,
            example_ids: Vec::new(),
            labels: Vec::new(),
            probs: Vec::new(),
        })
    }

    pub fn num_labels(&self) -> usize {
        self.label_names.len()
    }

    pub fn len(&self) -> usize {
        self.example_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.example_ids.is_empty()
    }

    /// Appends one example after validating (and, within tolerance,
    /// renormalizing) every row.
    pub fn push(
        &mut self,
        id: impl Into<String>,
        label: Option<usize>,
        mut rows: Vec<Vec<f64>>,
    ) -> Result<(), DynamicsError> {
        let id = id.into();
        if rows.len() != self.epochs {
            return Err(DynamicsError::EpochCount {
                id,
                expected: self.epochs,
                got: rows.len(),
            });
        }
        if let Some(l) = label {
            if l >= self.num_labels() {
                return Err(DynamicsError::UnknownLabel {
                    id,
                    label: l.to_string(),
                });
            }
        }
        for (e, row) in rows.iter_mut().enumerate() {
            if let Err(reason) = normalize_row(row, self.num_labels()) {
                return Err(DynamicsError::BadRow { id, epoch: e, reason });
            }
        }
        self.example_ids.push(id);
        self.labels.push(label);
        self.probs.push(rows);
        Ok(())
    }

    /// The E × |labels| matrix of one example.
    pub fn matrix(&self, n: usize) -> &[Vec<f64>] {
        &self.probs[n]
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.example_ids.iter().position(|x| x == id)
    }

    pub fn read(path: &Path) -> Result<Self, DynamicsError> {
        let file = File::open(path).map_err(io_err(path))?;
        let mut lines = BufReader::new(file).lines().enumerate();
        let parse = |line: usize, message: String| DynamicsError::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        let header: LogHeader = loop {
            match lines.next() {
                None => return Err(parse(1, "missing header record".into())),
                Some((i, line)) => {
                    let line = line.map_err(io_err(path))?;
                    if line.trim().is_empty() {
                        continue;
                    }
                    break serde_json::from_str(&line).map_err(|e| parse(i + 1, e.to_string()))?;
                }
            }
        };
        let mut log = EpochPredictionLog::new(header.labels, header.epochs)?;
        for (i, line) in lines {
            let line = line.map_err(io_err(path))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: LogRecord = serde_json::from_str(&line).map_err(|e| parse(i + 1, e.to_string()))?;
            let label = match rec.label {
                None => None,
                Some(name) => Some(log.label_names.iter().position(|l| *l == name).ok_or(
                    DynamicsError::UnknownLabel {
                        id: rec.id.clone(),
                        label: name,
                    },
                )?),
            };
            log.push(rec.id, label, rec.probs)?;
        }
        Ok(log)
    }

    pub fn write(&self, path: &Path) -> Result<(), DynamicsError> {
        let file = File::create(path).map_err(io_err(path))?;
        let mut w = BufWriter::new(file);
        let header = LogHeader {
            labels: self.label_names.clone(),
            epochs: self.epochs,
        };
        write_line(&mut w, &header).map_err(io_err(path))?;
        for n in 0..self.len() {
            let rec = LogRecord {
                id: self.example_ids[n].clone(),
                label: self.labels[n].map(|l| self.label_names[l].clone()),
                probs: self.probs[n].clone(),
            };
            write_line(&mut w, &rec).map_err(io_err(path))?;
        }
        w.flush().map_err(io_err(path))
    }
}

fn write_line<W: Write, T: Serialize>(w: &mut W, value: &T) -> std::io::Result<()> {
    serde_json::to_writer(&mut *w, value)?;
    w.write_all(b"\n")
}

#[derive(Serialize, Deserialize)]
struct LogHeader {
    labels: Vec<String>,
    epochs: usize,
}

#[derive(Serialize, Deserialize)]
struct LogRecord {
    id: String,
    label: Option<String>,
    probs: Vec<Vec<f64>>,
}

fn normalize_row(row: &mut [f64], width: usize) -> Result<(), String> {
    if row.len() != width {
        return Err(format!("expected {width} probabilities, got {}", row.len()));
    }
    if let Some(v) = row.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(format!("probability {v} outside [0, 1]"));
    }
    let sum: f64 = row.iter().sum();
    if (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
        return Err(format!("row sums to {sum}"));
    }
    if (sum - 1.0).abs() > 1e-12 {
        row.iter_mut().for_each(|v| *v /= sum);
    }
    Ok(())
}

/// Population standard deviation.
pub fn population_std(values: &[f64]) -> f64 {
    // Constant input must give exactly zero, which the two-pass formula
    // does not guarantee once the mean rounds.
    if values.iter().all(|v| *v == values[0]) {
        return 0.0;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    var.sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataMapPoint {
    pub example_id: String,
    pub confidence: f64,
    pub variability: f64,
    pub correctness: f64,
    pub est_max_variability: Option<f64>,
}

/// Argmax with ties going to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Confidence, variability and correctness of every example in `log`.
pub fn compute_data_map(log: &EpochPredictionLog) -> Result<Vec<DataMapPoint>, DynamicsError> {
    let mut out = Vec::with_capacity(log.len());
    for n in 0..log.len() {
        let gold = log.labels[n].ok_or_else(|| DynamicsError::MissingGold(log.example_ids[n].clone()))?;
        let m = log.matrix(n);
        let gold_probs: Vec<f64> = m.iter().map(|row| row[gold]).collect();
        let e = m.len() as f64;
        let confidence = gold_probs.iter().sum::<f64>() / e;
        let correct = m.iter().filter(|row| argmax(row) == gold).count() as f64;
        out.push(DataMapPoint {
            example_id: log.example_ids[n].clone(),
            confidence,
            variability: population_std(&gold_probs),
            correctness: correct / e,
            est_max_variability: Some(estimated_max_variability(m)?),
        });
    }
    Ok(out)
}

/// Max over label columns of the population std of that column across epochs.
/// Needs no gold label.
pub fn estimated_max_variability(probs_over_epochs: &[Vec<f64>]) -> Result<f64, DynamicsError> {
    let epochs = probs_over_epochs.len();
    if epochs < 2 {
        return Err(DynamicsError::TooFewEpochs(epochs));
    }
    let width = probs_over_epochs[0].len();
    let mut column = vec![0.0; epochs];
    let mut best = 0.0f64;
    for y in 0..width {
        for (e, row) in probs_over_epochs.iter().enumerate() {
            column[e] = row[y];
        }
        best = best.max(population_std(&column));
    }
    Ok(best)
}

/// Seeds for exemplar collection: the `fraction` most variable examples,
/// per gold-label class when `per_label` is set, after dropping excluded
/// genres. Ties go to the smaller id. Output is grouped by label (in label
/// order) and ranked within each group.
pub fn select_top_ambiguous(
    points: &[DataMapPoint],
    fraction: f64,
    per_label: bool,
    exclude_genres: &BTreeSet<String>,
    dataset: &Dataset,
) -> Result<Vec<String>, DynamicsError> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(DynamicsError::BadFraction(fraction));
    }
    let index = dataset.index();
    let mut buckets: BTreeMap<Option<Label>, Vec<&DataMapPoint>> = BTreeMap::new();
    for p in points {
        let ex = index
            .get(p.example_id.as_str())
            .map(|&i| &dataset.examples[i])
            .ok_or_else(|| DynamicsError::UnknownExample(p.example_id.clone()))?;
        if ex.genre.as_ref().is_some_and(|g| exclude_genres.contains(g)) {
            continue;
        }
        let key = if per_label { ex.label } else { None };
        buckets.entry(key).or_default().push(p);
    }
    let mut out = Vec::new();
    for (_, mut bucket) in buckets {
        bucket.sort_by(|a, b| {
            b.variability
                .total_cmp(&a.variability)
                .then_with(|| a.example_id.cmp(&b.example_id))
        });
        let take = (fraction * bucket.len() as f64).floor() as usize;
        out.extend(bucket.into_iter().take(take).map(|p| p.example_id.clone()));
    }
    Ok(out)
}

const DATAMAP_HEADER: [&str; 5] = [
    "example_id",
    "confidence",
    "variability",
    "correctness",
    "est_max_variability",
];

/// Writes data-map points as CSV, sorted by example id.
pub fn export_datamap(points: &[DataMapPoint], path: &Path) -> Result<(), DynamicsError> {
    let csv_err = |source| DynamicsError::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut sorted: Vec<&DataMapPoint> = points.iter().collect();
    sorted.sort_by(|a, b| a.example_id.cmp(&b.example_id));
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(DATAMAP_HEADER).map_err(csv_err)?;
    for p in sorted {
        w.write_record([
            p.example_id.clone(),
            p.confidence.to_string(),
            p.variability.to_string(),
            p.correctness.to_string(),
            p.est_max_variability.map(|v| v.to_string()).unwrap_or_default(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_datamap(path: &Path) -> Result<Vec<DataMapPoint>, DynamicsError> {
    let csv_err = |source| DynamicsError::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        let num = |k: usize| -> Result<f64, DynamicsError> {
            rec.get(k).unwrap_or("").parse().map_err(|e| DynamicsError::Parse {
                path: path.to_path_buf(),
                line: i + 2,
                message: format!("column {}: {e}", DATAMAP_HEADER[k]),
            })
        };
        out.push(DataMapPoint {
            example_id: rec.get(0).unwrap_or("").to_string(),
            confidence: num(1)?,
            variability: num(2)?,
            correctness: num(3)?,
            est_max_variability: match rec.get(4) {
                None | Some("") => None,
                Some(_) => Some(num(4)?),
            },
        });
    }
    Ok(out)
}
