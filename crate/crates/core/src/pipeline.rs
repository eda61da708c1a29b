//! Stage orchestration. Every stage reads and writes fixed file names under
//! the run directory and leaves a manifest with hashes of what it consumed
//! and produced, so consecutive manifests chain.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::audit::{self, Field};
use crate::corpus::{self, Dataset, Label};
use crate::dynamics::{compute_data_map, export_datamap, select_top_ambiguous, EpochPredictionLog};
use crate::exemplars::{build_groups, EmbeddingTable, ExemplarGroup};
use crate::filtering::{context_pairs, filter_candidates, FilterConfig, Scorer};
use crate::prompting::lm::{HttpEndpoint, HttpEndpointConfig, LmEndpoint, MockLm, RetryPolicy};
use crate::prompting::{overgenerate, DecodingConfig, GeneratedCandidate, GenerationOptions, PromptConfig};
use crate::review::{self, AnnotationRecord};
use crate::service::{ManualClock, ReviewStore, StoreConfig};
use crate::text::keyed_rng;
use crate::toytrainer::{accuracy, train, ToyModelConfig, ToyModelState};

pub const BUNDLED_CORPUS: &str = include_str!("../data/synthetic_nli.jsonl");
pub const BUNDLED_CORPUS_NAME: &str = "bundled:synthetic_nli.jsonl";
pub const API_KEY_ENV: &str = "CARTOFORGE_LM_API_KEY";

pub const MODEL: &str = "model.json";
pub const TRAINING_LOG: &str = "training_log.jsonl";
pub const DATAMAP: &str = "datamap.csv";
pub const SEEDS: &str = "seeds.json";
pub const GROUPS: &str = "groups.jsonl";
pub const SKIPPED_SEEDS: &str = "skipped_seeds.jsonl";
pub const CANDIDATES: &str = "candidates.jsonl";
pub const GENERATION_FAILURES: &str = "generation_failures.jsonl";
pub const VERDICTS: &str = "verdicts.jsonl";
pub const FILTERED: &str = "filtered.jsonl";
pub const FILTER_REPORT: &str = "filter_report.json";
pub const ANNOTATIONS: &str = "annotations.jsonl";
pub const OUTCOMES: &str = "outcomes.jsonl";
pub const COLLAB: &str = "collab.jsonl";
pub const REVIEW_REPORT: &str = "review_report.json";
pub const AUDIT_REPORT: &str = "audit.json";
pub const FINAL_MODEL: &str = "final_model.json";
pub const TRAIN_REPORT: &str = "train_report.json";

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("stage {stage}: missing artifact {path} (run the upstream stage first)")]
    MissingArtifact { stage: Stage, path: PathBuf },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{context}: {message}")]
    Stage { context: String, message: String },
}

impl PipelineError {
    pub fn kind(&self) -> &'static str {
        match self {
            PipelineError::MissingArtifact { .. } => "missing_artifact",
            PipelineError::Config(_) => "config",
            PipelineError::Io { .. } => "io",
            PipelineError::Stage { .. } => "stage",
        }
    }
}

fn ctx<E: std::fmt::Display>(context: &str) -> impl FnOnce(E) -> PipelineError + '_ {
    move |e| PipelineError::Stage {
        context: context.into(),
        message: e.to_string(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Cartography,
    Exemplars,
    Generate,
    Filter,
    Aggregate,
    Audit,
    TrainToy,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::Cartography,
        Stage::Exemplars,
        Stage::Generate,
        Stage::Filter,
        Stage::Aggregate,
        Stage::Audit,
        Stage::TrainToy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Cartography => "cartography",
            Stage::Exemplars => "exemplars",
            Stage::Generate => "generate",
            Stage::Filter => "filter",
            Stage::Aggregate => "aggregate",
            Stage::Audit => "audit",
            Stage::TrainToy => "train-toy",
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    Mock,
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerationConfig {
    pub backend: Backend,
    pub max_in_flight: usize,
    pub max_attempts: u32,
    pub http: HttpEndpointConfig,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        GenerationConfig {
            backend: Backend::Mock,
            max_in_flight: 4,
            max_attempts: RetryPolicy::default().max_attempts,
            http: HttpEndpointConfig::default(),
        }
    }
}

/// Stand-in reviewers for desk runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationConfig {
    pub workers: usize,
    pub discard_rate: f64,
    pub revise_rate: f64,
    /// Chance a reviewer keeps the intended label.
    pub label_accuracy: f64,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        SimulationConfig {
            workers: 6,
            discard_rate: 0.05,
            revise_rate: 0.08,
            label_accuracy: 0.8,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReviewConfig {
    /// Exported annotations. Without it, simulated reviewers annotate.
    pub annotations: Option<PathBuf>,
    pub simulation: SimulationConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AuditConfig {
    pub alpha: f64,
    pub min_count: usize,
    pub test_fraction: f64,
}

impl Default for AuditConfig {
    fn default() -> Self {
        AuditConfig {
            alpha: 0.01,
            min_count: 20,
            test_fraction: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub run_dir: PathBuf,
    pub seed: u64,
    /// Original dataset; the bundled synthetic corpus when unset.
    pub corpus: Option<PathBuf>,
    /// Example embeddings for neighbor search; hashed features when unset.
    pub embeddings: Option<PathBuf>,
    /// Per-epoch predictions from an external model. When set, cartography
    /// uses it instead of training the toy model.
    pub training_log: Option<PathBuf>,
    /// Per-epoch predictions for candidates, required when `training_log`
    /// replaces the toy model.
    pub candidate_log: Option<PathBuf>,
    pub p: f64,
    pub k: usize,
    pub n: usize,
    pub q: f64,
    pub exclude_genres: Vec<String>,
    pub model: ToyModelConfig,
    pub prompt: PromptConfig,
    pub decoding: DecodingConfig,
    pub generation: GenerationConfig,
    pub filter: FilterConfig,
    pub review: ReviewConfig,
    pub audit: AuditConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            run_dir: PathBuf::from("run"),
            seed: 0,
            corpus: None,
            embeddings: None,
            training_log: None,
            candidate_log: None,
            p: 0.25,
            k: 4,
            n: 5,
            q: 0.5,
            exclude_genres: vec!["telephone".into()],
            // small corpora need bigger steps than the library default
            model: ToyModelConfig {
                learning_rate: 1.0,
                ..ToyModelConfig::default()
            },
            prompt: PromptConfig::default(),
            decoding: DecodingConfig::default(),
            generation: GenerationConfig::default(),
            filter: FilterConfig::default(),
            review: ReviewConfig::default(),
            audit: AuditConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let frac = |name: &str, v: f64| {
            if v > 0.0 && v <= 1.0 {
                Ok(())
            } else {
                Err(PipelineError::Config(format!("{name} must be in (0, 1], got {v}")))
            }
        };
        frac("p", self.p)?;
        frac("q", self.q)?;
        if self.k == 0 || self.n == 0 {
            return Err(PipelineError::Config("k and n must be at least 1".into()));
        }
        if self.review.simulation.workers < 2 {
            return Err(PipelineError::Config("simulation needs at least 2 workers".into()));
        }
        self.model.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        if !(self.audit.test_fraction > 0.0 && self.audit.test_fraction < 1.0) {
            return Err(PipelineError::Config("audit.test_fraction must be in (0, 1)".into()));
        }
        Ok(())
    }

    /// `prompt` and `filter` with the top-level `n` and `q` applied.
    pub fn prompt_config(&self) -> PromptConfig {
        PromptConfig {
            samples_per_context: self.n,
            ..self.prompt.clone()
        }
    }

    pub fn filter_config(&self) -> FilterConfig {
        FilterConfig {
            q: self.q,
            ..self.filter.clone()
        }
    }

    pub fn exclude(&self) -> BTreeSet<String> {
        self.exclude_genres.iter().cloned().collect()
    }

    /// Hash of everything that affects outputs. The run directory and API
    /// credentials are left out.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.run_dir = PathBuf::new();
        c.generation.http.api_key = None;
        sha256_hex(&serde_json::to_vec(&c).expect("config serializes"))
    }

    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.run_dir);
        for p in [
            &mut self.corpus,
            &mut self.embeddings,
            &mut self.training_log,
            &mut self.candidate_log,
            &mut self.review.annotations,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
    }
}

/// Sets `a.b.c = value` in a TOML table. The value is parsed as TOML and
/// falls back to a plain string.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<(), PipelineError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| PipelineError::Config(format!("override {assignment:?} is not key=value")))?;
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.trim().split('.').collect();
    let mut cur = table;
    for part in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| PipelineError::Config(format!("{key}: {part} is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// Parses a TOML config, applies overrides, and resolves relative paths
/// against `base`.
pub fn parse_config(text: &str, overrides: &[String], base: &Path) -> Result<PipelineConfig, PipelineError> {
    let mut table: toml::Table = text.parse().map_err(|e| PipelineError::Config(format!("{e}")))?;
    for o in overrides {
        apply_override(&mut table, o)?;
    }
    let mut cfg: PipelineConfig = table.try_into().map_err(|e| PipelineError::Config(format!("{e}")))?;
    cfg.resolve(base);
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<PipelineConfig, PipelineError> {
    match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|source| PipelineError::Io {
                path: p.to_path_buf(),
                source,
            })?;
            let base = p.parent().filter(|b| !b.as_os_str().is_empty()).unwrap_or(Path::new("."));
            parse_config(&text, overrides, base)
        }
        None => parse_config("", overrides, Path::new(".")),
    }
}

pub fn default_config_toml() -> String {
    toml::to_string_pretty(&PipelineConfig::default()).expect("default config serializes")
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactHash {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageManifest {
    pub stage: Stage,
    pub config_hash: String,
    pub inputs: Vec<ArtifactHash>,
    pub outputs: Vec<ArtifactHash>,
    pub counts: BTreeMap<String, usize>,
}

pub fn manifest_path(run_dir: &Path, stage: Stage) -> PathBuf {
    run_dir.join("manifests").join(format!("{}.json", stage.name()))
}

/// Tracks what a stage touched.
struct StageRun<'a> {
    stage: Stage,
    cfg: &'a PipelineConfig,
    inputs: Vec<ArtifactHash>,
    outputs: Vec<ArtifactHash>,
    counts: BTreeMap<String, usize>,
}

fn display(path: &Path, run_dir: &Path) -> String {
    path.strip_prefix(run_dir).unwrap_or(path).to_string_lossy().into_owned()
}

impl<'a> StageRun<'a> {
    fn new(stage: Stage, cfg: &'a PipelineConfig) -> Self {
        StageRun {
            stage,
            cfg,
            inputs: vec![],
            outputs: vec![],
            counts: BTreeMap::new(),
        }
    }

    fn run_path(&self, name: &str) -> PathBuf {
        self.cfg.run_dir.join(name)
    }

    fn read_input(&mut self, path: &Path) -> Result<Vec<u8>, PipelineError> {
        let bytes = fs::read(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                PipelineError::MissingArtifact {
                    stage: self.stage,
                    path: path.to_path_buf(),
                }
            } else {
                PipelineError::Io {
                    path: path.to_path_buf(),
                    source: e,
                }
            }
        })?;
        self.inputs.push(ArtifactHash {
            path: display(path, &self.cfg.run_dir),
            sha256: sha256_hex(&bytes),
        });
        Ok(bytes)
    }

    fn input_text(&mut self, name: &str) -> Result<String, PipelineError> {
        let path = self.run_path(name);
        String::from_utf8(self.read_input(&path)?).map_err(ctx(name))
    }

    fn input_jsonl<T: for<'de> Deserialize<'de>>(&mut self, name: &str) -> Result<Vec<T>, PipelineError> {
        parse_jsonl(&self.input_text(name)?, name)
    }

    fn corpus(&mut self) -> Result<Dataset, PipelineError> {
        let (name, text) = match &self.cfg.corpus {
            Some(p) => {
                let bytes = self.read_input(p)?;
                (p.display().to_string(), String::from_utf8(bytes).map_err(ctx("corpus"))?)
            }
            None => {
                self.inputs.push(ArtifactHash {
                    path: BUNDLED_CORPUS_NAME.into(),
                    sha256: sha256_hex(BUNDLED_CORPUS.as_bytes()),
                });
                (BUNDLED_CORPUS_NAME.to_string(), BUNDLED_CORPUS.to_string())
            }
        };
        let examples = parse_jsonl(&text, &name)?;
        Dataset::new("original", examples).map_err(ctx(&name))
    }

    fn dataset(&mut self, name: &str) -> Result<Dataset, PipelineError> {
        let examples = self.input_jsonl(name)?;
        Dataset::new(name, examples).map_err(ctx(name))
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<(), PipelineError> {
        let path = self.run_path(name);
        fs::write(&path, bytes).map_err(|source| PipelineError::Io { path, source })?;
        self.outputs.push(ArtifactHash {
            path: name.into(),
            sha256: sha256_hex(bytes),
        });
        Ok(())
    }

    fn write_jsonl<T: Serialize>(&mut self, name: &str, items: &[T]) -> Result<(), PipelineError> {
        let mut buf = Vec::new();
        for it in items {
            serde_json::to_writer(&mut buf, it).map_err(ctx(name))?;
            buf.push(b'\n');
        }
        self.write(name, &buf)
    }

    fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), PipelineError> {
        let mut buf = serde_json::to_vec_pretty(value).map_err(ctx(name))?;
        buf.push(b'\n');
        self.write(name, &buf)
    }

    /// Records a file some library call wrote itself.
    fn record_output(&mut self, name: &str) -> Result<(), PipelineError> {
        let path = self.run_path(name);
        let bytes = fs::read(&path).map_err(|source| PipelineError::Io { path, source })?;
        self.outputs.push(ArtifactHash {
            path: name.into(),
            sha256: sha256_hex(&bytes),
        });
        Ok(())
    }

    fn count(&mut self, key: &str, n: usize) {
        self.counts.insert(key.into(), n);
    }

    fn finish(self) -> Result<StageManifest, PipelineError> {
        let m = StageManifest {
            stage: self.stage,
            config_hash: self.cfg.hash(),
            inputs: self.inputs,
            outputs: self.outputs,
            counts: self.counts,
        };
        let path = manifest_path(&self.cfg.run_dir, self.stage);
        let mut bytes = serde_json::to_vec_pretty(&m).map_err(ctx("manifest"))?;
        bytes.push(b'\n');
        fs::write(&path, bytes).map_err(|source| PipelineError::Io { path, source })?;
        Ok(m)
    }
}

fn parse_jsonl<T: for<'de> Deserialize<'de>>(text: &str, name: &str) -> Result<Vec<T>, PipelineError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| PipelineError::Stage {
                context: format!("{name} line {}", i + 1),
                message: e.to_string(),
            })
        })
        .collect()
}

pub fn run_stage(stage: Stage, cfg: &PipelineConfig) -> Result<StageManifest, PipelineError> {
    cfg.validate()?;
    for dir in [cfg.run_dir.clone(), cfg.run_dir.join("manifests")] {
        fs::create_dir_all(&dir).map_err(|source| PipelineError::Io { path: dir, source })?;
    }
    let mut run = StageRun::new(stage, cfg);
    match stage {
        Stage::Cartography => cartography(&mut run)?,
        Stage::Exemplars => exemplars(&mut run)?,
        Stage::Generate => generate(&mut run)?,
        Stage::Filter => filter(&mut run)?,
        Stage::Aggregate => aggregate(&mut run)?,
        Stage::Audit => audit_stage(&mut run)?,
        Stage::TrainToy => train_toy(&mut run)?,
    }
    let m = run.finish()?;
    log::info!("stage {stage} done: {:?}", m.counts);
    Ok(m)
}

pub fn run_all(cfg: &PipelineConfig) -> Result<Vec<StageManifest>, PipelineError> {
    Stage::ALL.iter().map(|s| run_stage(*s, cfg)).collect()
}

fn cartography(run: &mut StageRun<'_>) -> Result<(), PipelineError> {
    let cfg = run.cfg;
    let d0 = run.corpus()?;
    let log = match &cfg.training_log {
        Some(path) => {
            let bytes = run.read_input(path)?;
            let text = String::from_utf8(bytes).map_err(ctx("training log"))?;
            let tmp = run.run_path(TRAINING_LOG);
            fs::write(&tmp, &text).map_err(|source| PipelineError::Io { path: tmp.clone(), source })?;
            EpochPredictionLog::read(&tmp).map_err(ctx("training log"))?
        }
        None => {
            let (state, log) = train(&d0, &cfg.model).map_err(ctx("cartography training"))?;
            run.write_json(MODEL, &state)?;
            log.write(&run.run_path(TRAINING_LOG)).map_err(ctx(TRAINING_LOG))?;
            log
        }
    };
    run.record_output(TRAINING_LOG)?;
    let points = compute_data_map(&log).map_err(ctx("data map"))?;
    export_datamap(&points, &run.run_path(DATAMAP)).map_err(ctx(DATAMAP))?;
    run.record_output(DATAMAP)?;
    let seeds = select_top_ambiguous(&points, cfg.p, true, &cfg.exclude(), &d0).map_err(ctx("seed selection"))?;
    run.write_json(SEEDS, &seeds)?;
    run.count("examples", d0.len());
    run.count("seeds", seeds.len());
    Ok(())
}

fn exemplars(run: &mut StageRun<'_>) -> Result<(), PipelineError> {
    let cfg = run.cfg;
    let d0 = run.corpus()?;
    let seeds: Vec<String> = serde_json::from_str(&run.input_text(SEEDS)?).map_err(ctx(SEEDS))?;
    let table = match &cfg.embeddings {
        Some(p) => {
            run.read_input(p)?;
            EmbeddingTable::read(p).map_err(ctx("embeddings"))?
        }
        None => EmbeddingTable::from_featurizer(&d0, cfg.model.hash_dims),
    };
    let (groups, skipped) = build_groups(&seeds, &table, &d0, cfg.k, &cfg.exclude());
    run.write_jsonl(GROUPS, &groups)?;
    run.write_jsonl(SKIPPED_SEEDS, &skipped)?;
    run.count("seeds", seeds.len());
    run.count("groups", groups.len());
    run.count("skipped", skipped.len());
    Ok(())
}

fn endpoint(cfg: &PipelineConfig) -> Result<Box<dyn LmEndpoint>, PipelineError> {
    Ok(match cfg.generation.backend {
        Backend::Mock => Box::new(MockLm::new(cfg.seed)),
        Backend::Http => {
            let mut http = cfg.generation.http.clone();
            if http.url.is_empty() {
                return Err(PipelineError::Config("generation.http.url is required for the http backend".into()));
            }
            if http.api_key.is_none() {
                http.api_key = std::env::var(API_KEY_ENV).ok();
            }
            Box::new(HttpEndpoint::new(http).map_err(ctx("lm endpoint"))?)
        }
    })
}

fn generate(run: &mut StageRun<'_>) -> Result<(), PipelineError> {
    let cfg = run.cfg;
    let d0 = run.corpus()?;
    let groups: Vec<ExemplarGroup> = run.input_jsonl(GROUPS)?;
    let lm = endpoint(cfg)?;
    let opts = GenerationOptions {
        max_in_flight: cfg.generation.max_in_flight.max(1),
        retry: RetryPolicy {
            max_attempts: cfg.generation.max_attempts.max(1),
            ..RetryPolicy::default()
        },
    };
    let out = overgenerate(&groups, &d0, &cfg.prompt_config(), &cfg.decoding, lm.as_ref(), &opts).map_err(ctx("generation"))?;
    run.write_jsonl(CANDIDATES, &out.candidates)?;
    run.write_jsonl(GENERATION_FAILURES, &out.failures)?;
    run.count("requests", groups.len() * cfg.n);
    run.count("completions", out.candidates.len());
    run.count("generated", out.generated().count());
    run.count("failures", out.failures.len());
    Ok(())
}

fn filter(run: &mut StageRun<'_>) -> Result<(), PipelineError> {
    let cfg = run.cfg;
    let d0 = run.corpus()?;
    let groups: Vec<ExemplarGroup> = run.input_jsonl(GROUPS)?;
    let candidates: Vec<GeneratedCandidate> = run.input_jsonl(CANDIDATES)?;
    let ctxp = context_pairs(&groups, &d0);
    let output = if cfg.training_log.is_some() {
        let path = cfg
            .candidate_log
            .clone()
            .ok_or_else(|| PipelineError::Config("candidate_log is required when training_log is set".into()))?;
        run.read_input(&path)?;
        let log = EpochPredictionLog::read(&path).map_err(ctx("candidate log"))?;
        filter_candidates(&candidates, &ctxp, &Scorer::Log(&log), &cfg.filter_config())
    } else {
        let state: ToyModelState = serde_json::from_str(&run.input_text(MODEL)?).map_err(ctx(MODEL))?;
        filter_candidates(&candidates, &ctxp, &Scorer::Model(&state), &cfg.filter_config())
    }
    .map_err(ctx("filter"))?;
    run.write_jsonl(VERDICTS, &output.verdicts)?;
    run.write_jsonl(FILTERED, &output.selection.dataset.examples)?;
    run.write_json(
        FILTER_REPORT,
        &json!({
            "report": output.report,
            "quota_per_label": output.selection.quota,
            "shortfalls": output.selection.shortfalls,
        }),
    )?;
    run.count("generated", output.report.input);
    run.count("heuristic_kept", output.report.heuristic_kept);
    run.count("filtered", output.report.selected);
    Ok(())
}

fn tweak_hypothesis<R: Rng>(rng: &mut R, h: &str) -> String {
    let body = h.trim_end_matches(['.', '!', '?']);
    let words: Vec<&str> = body.split_whitespace().collect();
    if words.len() >= 3 && rng.gen_bool(0.5) {
        format!("{}.", words[..words.len() - 1].join(" "))
    } else {
        const ADDS: [&str; 4] = ["today", "again", "there", "now"];
        format!("{body} {}.", ADDS[rng.gen_range(0..ADDS.len())])
    }
}

/// Runs simulated reviewers through an in-memory review store until no
/// task is left, and returns the exported records. Choices are keyed by
/// (seed, candidate, worker), so the output does not depend on scheduling.
pub fn simulate_review(filtered: &Dataset, sim: &SimulationConfig, seed: u64) -> Result<Vec<AnnotationRecord>, PipelineError> {
    let store = ReviewStore::in_memory(Arc::new(ManualClock::new(0)), StoreConfig::default());
    store.import_tasks(&filtered.examples).map_err(ctx("review import"))?;
    let workers: Vec<String> = (0..sim.workers).map(|i| format!("sim-{i:02}")).collect();
    loop {
        let mut progressed = false;
        for w in &workers {
            let Some(task) = store.next_task(w).map_err(ctx("review"))? else {
                continue;
            };
            progressed = true;
            let intended = filtered
                .get(&task.candidate_id)
                .and_then(|e| e.meta.get("intended_label"))
                .and_then(Value::as_str)
                .and_then(|s| s.parse::<Label>().ok())
                .unwrap_or(Label::Neutral);
            let mut rng = keyed_rng(seed, &format!("{}|{w}", task.candidate_id));
            let label = if rng.gen_bool(sim.label_accuracy.clamp(0.0, 1.0)) {
                intended
            } else {
                Label::ALL[(intended.index() + rng.gen_range(1..Label::COUNT)) % Label::COUNT]
            };
            let roll: f64 = rng.gen();
            let mut rec = if roll < sim.discard_rate {
                AnnotationRecord::discard(&task.candidate_id, w)
            } else if roll < sim.discard_rate + sim.revise_rate {
                let h = tweak_hypothesis(&mut rng, &task.hypothesis);
                AnnotationRecord::revise(&task.candidate_id, w, intended, None, Some(&h))
            } else {
                AnnotationRecord::label_as_is(&task.candidate_id, w, label)
            };
            rec.timestamp = 1;
            store.submit_annotation(rec).map_err(ctx("review submit"))?;
        }
        if !progressed {
            break;
        }
    }
    Ok(store.export_annotations())
}

fn aggregate(run: &mut StageRun<'_>) -> Result<(), PipelineError> {
    let cfg = run.cfg;
    let filtered = run.dataset(FILTERED)?;
    let records = match &cfg.review.annotations {
        Some(p) => {
            let text = String::from_utf8(run.read_input(p)?).map_err(ctx("annotations"))?;
            parse_jsonl(&text, &p.display().to_string())?
        }
        None => {
            let recs = simulate_review(&filtered, &cfg.review.simulation, cfg.seed)?;
            run.write_jsonl(ANNOTATIONS, &recs)?;
            recs
        }
    };
    let outcomes = review::aggregate_all(&records, &filtered, cfg.seed).map_err(ctx("aggregation"))?;
    let (collab, stats) = review::assemble(&outcomes, &filtered).map_err(ctx("assembly"))?;
    let pairs = review::kappa_pairs(&records).map_err(ctx("kappa"))?;
    let kappa = review::cohens_kappa(&pairs).ok();
    let revisions = review::revision_stats(&records, &filtered).map_err(ctx("revision stats"))?;
    run.write_jsonl(OUTCOMES, &outcomes)?;
    run.write_jsonl(COLLAB, &collab.examples)?;
    run.write_json(
        REVIEW_REPORT,
        &json!({"stats": stats, "kappa": kappa, "kappa_pairs": pairs.len(), "revisions": revisions}),
    )?;
    run.count("annotations", records.len());
    run.count("annotated", stats.annotated);
    run.count("kept", stats.kept);
    run.count("revised", stats.revised);
    Ok(())
}

fn audit_report(ds: &Dataset, cfg: &PipelineConfig) -> Value {
    let mut out = serde_json::Map::new();
    out.insert("size".into(), json!(ds.len()));
    let counts = ds.label_counts();
    out.insert(
        "label_counts".into(),
        json!(Label::ALL.iter().map(|l| (l.as_str(), counts[l.index()])).collect::<BTreeMap<_, _>>()),
    );
    let as_value = |r: Result<Value, String>| r.unwrap_or_else(|e| json!({ "error": e }));
    let balanced = audit::balance_by_label(ds, cfg.seed);
    let partial = balanced.as_ref().map_err(|e| e.to_string()).and_then(|b| {
        let n_test = ((b.len() as f64) * cfg.audit.test_fraction).round() as usize;
        let (tr, te) = corpus::split_train_test(b, n_test, cfg.seed).map_err(|e| e.to_string())?;
        let mut accs = serde_json::Map::new();
        for (name, field) in [("hypothesis", Field::Hypothesis), ("premise", Field::Premise)] {
            let acc = audit::partial_input_accuracy(&tr, &te, field, &cfg.model).map_err(|e| e.to_string())?;
            accs.insert(name.into(), json!(acc));
        }
        Ok(json!({"balanced_size": b.len(), "test_size": te.len(), "accuracy": accs}))
    });
    out.insert("partial_input".into(), as_value(partial));
    let lex = balanced
        .as_ref()
        .map_err(|e| e.to_string())
        .and_then(|b| audit::lexical_correlations(b, cfg.audit.alpha, cfg.audit.min_count).map_err(|e| e.to_string()))
        .map(|r| {
            let det: Vec<_> = r.detections().cloned().collect();
            json!({"tested_words": r.tested_words, "threshold": r.threshold, "detections": det})
        });
    out.insert("lexical".into(), as_value(lex));
    let emb = audit::hashed_sentence_embeddings(ds, cfg.model.hash_dims);
    let sim = audit::similarity_distributions(ds, &emb).map_err(|e| e.to_string()).map(|d| {
        let per_label: BTreeMap<&str, Value> = d
            .per_label
            .iter()
            .map(|(l, s)| (l.as_str(), json!({"n": s.similarities.len(), "mean": s.mean, "std": s.std})))
            .collect();
        json!({"per_label": per_label, "overlaps": d.overlaps})
    });
    out.insert("similarity".into(), as_value(sim));
    Value::Object(out)
}

fn audit_stage(run: &mut StageRun<'_>) -> Result<(), PipelineError> {
    let cfg = run.cfg;
    let collab = run.dataset(COLLAB)?;
    let d0 = run.corpus()?;
    run.write_json(
        AUDIT_REPORT,
        &json!({"collab": audit_report(&collab, cfg), "original": audit_report(&d0, cfg)}),
    )?;
    run.count("collab", collab.len());
    run.count("original", d0.len());
    Ok(())
}

fn train_toy(run: &mut StageRun<'_>) -> Result<(), PipelineError> {
    let cfg = run.cfg;
    let collab = run.dataset(COLLAB)?;
    let d0 = run.corpus()?;
    let n_test = corpus::default_test_count(d0.len()).max(1);
    let (d0_train, test) = corpus::split_train_test(&d0, n_test, cfg.seed).map_err(ctx("split"))?;
    let mut report = serde_json::Map::new();
    report.insert("test_size".into(), json!(test.len()));
    let (base, _) = train(&d0_train, &cfg.model).map_err(ctx("baseline training"))?;
    report.insert("original_train_accuracy_on_test".into(), json!(accuracy(&base, &test)));
    match train(&collab, &cfg.model) {
        Ok((state, _)) => {
            report.insert("collab_accuracy_on_test".into(), json!(accuracy(&state, &test)));
            run.write_json(FINAL_MODEL, &state)?;
        }
        Err(e) => {
            report.insert("collab_accuracy_on_test".into(), json!({ "error": e.to_string() }));
        }
    }
    run.write_json(TRAIN_REPORT, &Value::Object(report))?;
    run.count("collab", collab.len());
    run.count("test", test.len());
    Ok(())
}
