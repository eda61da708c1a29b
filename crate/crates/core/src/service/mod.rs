//! Review back end: task store with two distinct workers per candidate,
//! leases, and a journal + snapshot on disk. [`http`] puts it behind a JSON API.
//!
//! Every state change is an [`Event`]. An event is appended to the journal
//! before it is applied, and applying events is the only way the state
//! changes, so replaying the journal rebuilds the store exactly. Lease expiry
//! is recorded as explicit release events; replay never consults a clock.

pub mod http;

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::corpus::Example;
use crate::review::{AnnotationRecord, ReviewError};

pub const SLOTS_PER_TASK: usize = 2;
pub const DEFAULT_LEASE_MS: u64 = 30 * 60 * 1000;
const JOURNAL_FILE: &str = "journal.jsonl";
const SNAPSHOT_FILE: &str = "snapshot.json";

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("unknown task {0:?}")]
    UnknownTask(String),
    #[error("worker {worker:?} holds no assignment on {candidate_id:?}")]
    NotAssigned { candidate_id: String, worker: String },
    #[error("worker {worker:?} already annotated {candidate_id:?}")]
    Duplicate { candidate_id: String, worker: String },
    #[error("candidate {0:?} was already imported with different content")]
    ImportConflict(String),
    #[error("worker id must not be empty")]
    EmptyWorker,
    #[error(transparent)]
    Invalid(#[from] ReviewError),
    #[error("journal {path}: line {line}: {message}")]
    CorruptJournal { path: PathBuf, line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub trait Clock: Send + Sync {
    fn now_ms(&self) -> u64;
}

pub struct SystemClock;

impl Clock for SystemClock {
    fn now_ms(&self) -> u64 {
        SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0)
    }
}

/// Clock that only moves when told to.
#[derive(Default)]
pub struct ManualClock(AtomicU64);

impl ManualClock {
    pub fn new(ms: u64) -> Self {
        ManualClock(AtomicU64::new(ms))
    }
    pub fn advance(&self, ms: u64) {
        self.0.fetch_add(ms, Ordering::SeqCst);
    }
}

impl Clock for ManualClock {
    fn now_ms(&self) -> u64 {
        self.0.load(Ordering::SeqCst)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskState {
    Open,
    InProgress,
    Done,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub candidate_id: String,
    pub premise: String,
    pub hypothesis: String,
    /// Import position, the tie-breaker for assignment.
    pub order: u64,
    pub assignments: BTreeSet<String>,
    pub completed: BTreeSet<String>,
    /// Lease expiry (ms) of assignments that are not completed yet.
    pub leases: BTreeMap<String, u64>,
}

impl Task {
    pub fn state(&self) -> TaskState {
        if self.completed.len() == SLOTS_PER_TASK {
            TaskState::Done
        } else if self.assignments.is_empty() {
            TaskState::Open
        } else {
            TaskState::InProgress
        }
    }

    fn free_slots(&self) -> usize {
        SLOTS_PER_TASK - self.assignments.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSeed {
    pub candidate_id: String,
    pub premise: String,
    pub hypothesis: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Event {
    Import { tasks: Vec<TaskSeed> },
    Assign { candidate_id: String, worker_id: String, expires_at: u64 },
    Annotate { record: AnnotationRecord },
    Release { candidate_id: String, worker_id: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JournalEntry {
    pub seq: u64,
    #[serde(flatten)]
    pub event: Event,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StoreState {
    pub seq: u64,
    pub tasks: BTreeMap<String, Task>,
    /// candidate id -> worker id -> record
    pub annotations: BTreeMap<String, BTreeMap<String, AnnotationRecord>>,
}

impl StoreState {
    pub fn apply(&mut self, entry: &JournalEntry) {
        self.seq = entry.seq;
        match &entry.event {
            Event::Import { tasks } => {
                for t in tasks {
                    let order = self.tasks.len() as u64;
                    self.tasks.entry(t.candidate_id.clone()).or_insert_with(|| Task {
                        candidate_id: t.candidate_id.clone(),
                        premise: t.premise.clone(),
                        hypothesis: t.hypothesis.clone(),
                        order,
                        assignments: BTreeSet::new(),
                        completed: BTreeSet::new(),
                        leases: BTreeMap::new(),
                    });
                }
            }
            Event::Assign {
                candidate_id,
                worker_id,
                expires_at,
            } => {
                if let Some(t) = self.tasks.get_mut(candidate_id) {
                    t.assignments.insert(worker_id.clone());
                    t.leases.insert(worker_id.clone(), *expires_at);
                }
            }
            Event::Annotate { record } => {
                if let Some(t) = self.tasks.get_mut(&record.candidate_id) {
                    t.completed.insert(record.worker_id.clone());
                    t.leases.remove(&record.worker_id);
                }
                self.annotations
                    .entry(record.candidate_id.clone())
                    .or_default()
                    .insert(record.worker_id.clone(), record.clone());
            }
            Event::Release {
                candidate_id,
                worker_id,
            } => {
                if let Some(t) = self.tasks.get_mut(candidate_id) {
                    t.assignments.remove(worker_id);
                    t.leases.remove(worker_id);
                }
            }
        }
    }

    fn expired(&self, now: u64) -> Vec<Event> {
        self.tasks
            .values()
            .flat_map(|t| {
                t.leases.iter().filter(|(_, exp)| **exp <= now).map(|(w, _)| Event::Release {
                    candidate_id: t.candidate_id.clone(),
                    worker_id: w.clone(),
                })
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImportReport {
    pub imported: usize,
    pub skipped: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoreStats {
    pub tasks: usize,
    pub open: usize,
    pub in_progress: usize,
    pub done: usize,
    pub annotations: usize,
    pub workers: usize,
}

#[derive(Debug, Clone)]
pub struct StoreConfig {
    pub lease_ms: u64,
    /// Write a snapshot after this many journal entries; 0 never does.
    pub snapshot_every: u64,
}

impl Default for StoreConfig {
    fn default() -> Self {
        StoreConfig {
            lease_ms: DEFAULT_LEASE_MS,
            snapshot_every: 1000,
        }
    }
}

struct Inner {
    state: StoreState,
    journal: Option<File>,
    since_snapshot: u64,
}

/// Thread-safe store. All mutations go through one lock, which is the single
/// writer per task the assignment rules need.
pub struct ReviewStore {
    inner: Mutex<Inner>,
    dir: Option<PathBuf>,
    clock: Arc<dyn Clock>,
    cfg: StoreConfig,
}

fn journal_entries(path: &Path) -> Result<Vec<JournalEntry>, ServiceError> {
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(vec![]),
        Err(e) => return Err(e.into()),
    };
    let lines: Vec<String> = BufReader::new(file).lines().collect::<Result<_, _>>()?;
    let mut out = Vec::new();
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<JournalEntry>(line) {
            Ok(e) => out.push(e),
            // a torn final line from a crash mid-append
            Err(_) if i + 1 == lines.len() => {
                log::warn!("ignoring incomplete last journal line in {}", path.display());
            }
            Err(e) => {
                return Err(ServiceError::CorruptJournal {
                    path: path.to_path_buf(),
                    line: i + 1,
                    message: e.to_string(),
                })
            }
        }
    }
    Ok(out)
}

/// Rebuilds the state from the snapshot (if any) plus newer journal entries.
pub fn load_state(dir: &Path) -> Result<StoreState, ServiceError> {
    let mut state = match fs::read(dir.join(SNAPSHOT_FILE)) {
        Ok(bytes) => serde_json::from_slice(&bytes)?,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => StoreState::default(),
        Err(e) => return Err(e.into()),
    };
    for entry in journal_entries(&dir.join(JOURNAL_FILE))? {
        if entry.seq > state.seq {
            state.apply(&entry);
        }
    }
    Ok(state)
}

/// Replays the full journal from an empty state, ignoring any snapshot.
pub fn replay_journal(dir: &Path) -> Result<StoreState, ServiceError> {
    let mut state = StoreState::default();
    for entry in journal_entries(&dir.join(JOURNAL_FILE))? {
        state.apply(&entry);
    }
    Ok(state)
}

impl ReviewStore {
    /// Store without persistence.
    pub fn in_memory(clock: Arc<dyn Clock>, cfg: StoreConfig) -> Self {
        ReviewStore {
            inner: Mutex::new(Inner {
                state: StoreState::default(),
                journal: None,
                since_snapshot: 0,
            }),
            dir: None,
            clock,
            cfg,
        }
    }

    /// Opens (or creates) a store persisted under `dir`.
    pub fn open(dir: &Path, clock: Arc<dyn Clock>, cfg: StoreConfig) -> Result<Self, ServiceError> {
        fs::create_dir_all(dir)?;
        let state = load_state(dir)?;
        let path = dir.join(JOURNAL_FILE);
        // Drop a torn tail so the next append starts on a fresh line.
        if let Ok(text) = fs::read_to_string(&path) {
            if !text.is_empty() && !text.ends_with('\n') {
                let keep = text.rfind('\n').map_or(0, |i| i + 1);
                fs::write(&path, &text[..keep])?;
            }
        }
        let journal = OpenOptions::new().create(true).append(true).open(&path)?;
        Ok(ReviewStore {
            inner: Mutex::new(Inner {
                state,
                journal: Some(journal),
                since_snapshot: 0,
            }),
            dir: Some(dir.to_path_buf()),
            clock,
            cfg,
        })
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, Inner> {
        self.inner.lock().unwrap_or_else(|p| p.into_inner())
    }

    fn commit(&self, inner: &mut Inner, event: Event) -> Result<(), ServiceError> {
        let entry = JournalEntry {
            seq: inner.state.seq + 1,
            event,
        };
        if let Some(f) = inner.journal.as_mut() {
            let mut line = serde_json::to_vec(&entry)?;
            line.push(b'\n');
            f.write_all(&line)?;
            f.flush()?;
        }
        inner.state.apply(&entry);
        inner.since_snapshot += 1;
        if self.cfg.snapshot_every > 0 && inner.since_snapshot >= self.cfg.snapshot_every {
            self.write_snapshot(inner)?;
        }
        Ok(())
    }

    fn write_snapshot(&self, inner: &mut Inner) -> Result<(), ServiceError> {
        if let Some(dir) = &self.dir {
            let tmp = dir.join(format!("{SNAPSHOT_FILE}.tmp"));
            fs::write(&tmp, serde_json::to_vec(&inner.state)?)?;
            fs::rename(&tmp, dir.join(SNAPSHOT_FILE))?;
        }
        inner.since_snapshot = 0;
        Ok(())
    }

    pub fn snapshot(&self) -> Result<(), ServiceError> {
        let mut inner = self.lock();
        self.write_snapshot(&mut inner)
    }

    fn expire_leases(&self, inner: &mut Inner) -> Result<(), ServiceError> {
        for ev in inner.state.expired(self.clock.now_ms()) {
            self.commit(inner, ev)?;
        }
        Ok(())
    }

    /// Adds one open task per candidate. Candidates already present with the
    /// same text are skipped; any with different text abort the whole import.
    pub fn import_tasks(&self, examples: &[Example]) -> Result<ImportReport, ServiceError> {
        let mut inner = self.lock();
        let mut fresh = Vec::new();
        let mut seen = BTreeSet::new();
        let mut skipped = 0;
        for e in examples {
            let seed = TaskSeed {
                candidate_id: e.id.clone(),
                premise: e.premise.clone(),
                hypothesis: e.hypothesis.clone(),
            };
            match inner.state.tasks.get(&e.id) {
                Some(t) if t.premise == e.premise && t.hypothesis == e.hypothesis => skipped += 1,
                Some(_) => return Err(ServiceError::ImportConflict(e.id.clone())),
                None if !seen.insert(e.id.clone()) => return Err(ServiceError::ImportConflict(e.id.clone())),
                None => fresh.push(seed),
            }
        }
        if skipped > 0 {
            log::warn!("import: {skipped} candidates already present, skipped");
        }
        let imported = fresh.len();
        if imported > 0 {
            self.commit(&mut inner, Event::Import { tasks: fresh })?;
        }
        Ok(ImportReport { imported, skipped })
    }

    /// Assigns `worker` to the task with the fewest free slots (ties by import
    /// order) that the worker has not touched yet.
    pub fn next_task(&self, worker: &str) -> Result<Option<Task>, ServiceError> {
        if worker.trim().is_empty() {
            return Err(ServiceError::EmptyWorker);
        }
        let mut inner = self.lock();
        self.expire_leases(&mut inner)?;
        let pick = inner
            .state
            .tasks
            .values()
            .filter(|t| t.free_slots() > 0 && !t.assignments.contains(worker) && !t.completed.contains(worker))
            .min_by_key(|t| (t.free_slots(), t.order))
            .map(|t| t.candidate_id.clone());
        let Some(id) = pick else { return Ok(None) };
        let expires_at = self.clock.now_ms().saturating_add(self.cfg.lease_ms);
        self.commit(
            &mut inner,
            Event::Assign {
                candidate_id: id.clone(),
                worker_id: worker.to_string(),
                expires_at,
            },
        )?;
        Ok(inner.state.tasks.get(&id).cloned())
    }

    pub fn submit_annotation(&self, mut record: AnnotationRecord) -> Result<(), ServiceError> {
        let mut inner = self.lock();
        self.expire_leases(&mut inner)?;
        let task = inner
            .state
            .tasks
            .get(&record.candidate_id)
            .ok_or_else(|| ServiceError::UnknownTask(record.candidate_id.clone()))?;
        if task.completed.contains(&record.worker_id) {
            return Err(ServiceError::Duplicate {
                candidate_id: record.candidate_id,
                worker: record.worker_id,
            });
        }
        if !task.assignments.contains(&record.worker_id) {
            return Err(ServiceError::NotAssigned {
                candidate_id: record.candidate_id,
                worker: record.worker_id,
            });
        }
        record.validate(&task.premise, &task.hypothesis)?;
        if record.timestamp == 0 {
            record.timestamp = self.clock.now_ms();
        }
        self.commit(&mut inner, Event::Annotate { record })
    }

    /// Records of done tasks ordered by (candidate id, worker id).
    pub fn export_annotations(&self) -> Vec<AnnotationRecord> {
        let inner = self.lock();
        inner
            .state
            .tasks
            .values()
            .filter(|t| t.state() == TaskState::Done)
            .flat_map(|t| inner.state.annotations.get(&t.candidate_id).into_iter().flat_map(|m| m.values().cloned()))
            .collect()
    }

    pub fn export_jsonl(&self) -> String {
        self.export_annotations()
            .iter()
            .map(|r| serde_json::to_string(r).expect("records serialize") + "\n")
            .collect()
    }

    pub fn stats(&self) -> StoreStats {
        let inner = self.lock();
        let s = &inner.state;
        let count = |st: TaskState| s.tasks.values().filter(|t| t.state() == st).count();
        let workers: BTreeSet<&String> = s.tasks.values().flat_map(|t| t.assignments.iter().chain(&t.completed)).collect();
        StoreStats {
            tasks: s.tasks.len(),
            open: count(TaskState::Open),
            in_progress: count(TaskState::InProgress),
            done: count(TaskState::Done),
            annotations: s.annotations.values().map(BTreeMap::len).sum(),
            workers: workers.len(),
        }
    }

    pub fn state(&self) -> StoreState {
        self.lock().state.clone()
    }

    pub fn task(&self, candidate_id: &str) -> Option<Task> {
        self.lock().state.tasks.get(candidate_id).cloned()
    }
}
