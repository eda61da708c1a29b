use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use cartoforge::audit::{self, Field};
use cartoforge::corpus::{read_dataset, read_jsonl, write_dataset, Dataset};
use cartoforge::dynamics::{compute_data_map, export_datamap, EpochPredictionLog};
use cartoforge::exemplars::{EmbeddingTable, ExemplarGroup};
use cartoforge::filtering::{context_pairs, filter_candidates, FilterConfig, Scorer};
use cartoforge::pipeline::{self, PipelineError, Stage};
use cartoforge::prompting::GeneratedCandidate;
use cartoforge::service::http::{self, AuthConfig};
use cartoforge::service::{ReviewStore, ServiceError, StoreConfig, SystemClock};
use cartoforge::synth::{self, SynthConfig};
use cartoforge::toytrainer::{self, ToyModelConfig};

#[derive(Parser)]
#[command(name = "cartoforge", version, about = "Worker-AI collaborative NLI dataset pipeline")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone, Default)]
struct StageArgs {
    /// Run config (TOML). Defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config field, e.g. --set q=0.4 or --set generation.backend=http
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a config file with every default spelled out.
    Init {
        #[arg(long, default_value = "run.toml")]
        out: PathBuf,
    },
    /// Generate a templated synthetic corpus.
    Synth {
        #[arg(long, default_value_t = 300)]
        n: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 0.0)]
        noise_rate: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run every stage in order.
    All(StageArgs),
    /// Train the task model on the original data, write the data map and pick seeds.
    Cartography(StageArgs),
    /// Collect same-label nearest neighbors for every seed.
    Exemplars(StageArgs),
    /// Prompt the language model for new pairs.
    Generate(StageArgs),
    /// Drop degenerate generations and keep the most ambiguous ones, or filter
    /// an arbitrary candidate file with --cands.
    Filter(FilterArgs),
    /// Combine the two reviews of every candidate into the final dataset.
    Aggregate(StageArgs),
    /// Run the artifact audit, or a single analysis via a subcommand.
    Audit(AuditArgs),
    /// Train the toy model on the final dataset and evaluate it.
    TrainToy(StageArgs),
    /// Train the toy classifier and write its per-epoch prediction log.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long)]
        datamap: Option<PathBuf>,
        #[arg(long, default_value_t = 5)]
        epochs: usize,
        #[arg(long, default_value_t = 0.1)]
        lr: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Serve the review API.
    Serve {
        #[arg(long, default_value = "review-data")]
        data_dir: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
        #[arg(long, default_value_t = 30)]
        lease_minutes: u64,
        /// JSON file {"workers": {"id": "token"}, "admin": "token"}
        #[arg(long)]
        auth: Option<PathBuf>,
        /// Plain-text reviewer guidelines served at /api/guidelines
        #[arg(long)]
        guidelines: Option<PathBuf>,
    },
}

#[derive(Args)]
struct FilterArgs {
    #[command(flatten)]
    stage: StageArgs,
    /// Candidates JSONL; switches to standalone mode
    #[arg(long)]
    cands: Option<PathBuf>,
    /// Per-epoch predictions for the candidates
    #[arg(long)]
    log: Option<PathBuf>,
    /// Toy model state to score with instead of --log
    #[arg(long)]
    model: Option<PathBuf>,
    /// Exemplar groups and corpus, for the in-context copy check
    #[arg(long, requires = "corpus")]
    groups: Option<PathBuf>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long, default_value_t = 0.5)]
    q: f64,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
#[command(args_conflicts_with_subcommands = true)]
struct AuditArgs {
    #[command(subcommand)]
    cmd: Option<AuditCmd>,
    #[command(flatten)]
    stage: StageArgs,
}

#[derive(Subcommand)]
enum AuditCmd {
    /// Accuracy of a classifier that sees one field only.
    PartialInput {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long, value_enum, default_value = "hypothesis")]
        field: Field,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Single-word label correlations (balances the data first).
    Lexcorr {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0.01)]
        alpha: f64,
        #[arg(long, default_value_t = 20)]
        min_count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Premise/hypothesis similarity distributions per label.
    Simdist {
        #[arg(long)]
        data: PathBuf,
        /// Sentence embeddings keyed "<id>#premise" and "<id>#hypothesis"
        #[arg(long)]
        emb: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn print_json<T: Serialize>(v: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(v)?;
    bytes.push(b'\n');
    std::fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn run_stages(stages: &[Stage], args: &StageArgs) -> Result<()> {
    let cfg = pipeline::load_config(args.config.as_deref(), &args.overrides)?;
    let mut summary = Vec::new();
    for s in stages {
        let m = pipeline::run_stage(*s, &cfg)?;
        summary.push(json!({"stage": m.stage, "counts": m.counts}));
    }
    print_json(&summary)
}

fn filter_standalone(a: &FilterArgs, cands: &Path) -> Result<()> {
    let Some(out) = &a.out else { bail!("--out is required with --cands") };
    let candidates: Vec<GeneratedCandidate> = read_jsonl(cands)?;
    let context = match (&a.groups, &a.corpus) {
        (Some(g), Some(c)) => {
            let groups: Vec<ExemplarGroup> = read_jsonl(g)?;
            context_pairs(&groups, &read_dataset(c)?)
        }
        _ => BTreeMap::new(),
    };
    let cfg = FilterConfig {
        q: a.q,
        ..FilterConfig::default()
    };
    let output = match (&a.log, &a.model) {
        (Some(log), _) => {
            let log = EpochPredictionLog::read(log)?;
            filter_candidates(&candidates, &context, &Scorer::Log(&log), &cfg)?
        }
        (None, Some(model)) => {
            let state = toytrainer::ToyModelState::load(model)?;
            filter_candidates(&candidates, &context, &Scorer::Model(&state), &cfg)?
        }
        (None, None) => bail!("standalone filtering needs --log or --model"),
    };
    write_dataset(&output.selection.dataset, out)?;
    let report = json!({
        "report": output.report,
        "quota_per_label": output.selection.quota,
        "shortfalls": output.selection.shortfalls,
    });
    match &a.report {
        Some(p) => write_json(p, &report),
        None => print_json(&report),
    }
}

fn audit_cmd(cmd: &AuditCmd) -> Result<()> {
    match cmd {
        AuditCmd::PartialInput { train, test, field, seed } => {
            let cfg = ToyModelConfig {
                rng_seed: *seed,
                ..ToyModelConfig::default()
            };
            let acc = audit::partial_input_accuracy(&read_dataset(train)?, &read_dataset(test)?, *field, &cfg)?;
            print_json(&json!({"field": field, "accuracy": acc}))
        }
        AuditCmd::Lexcorr {
            data,
            alpha,
            min_count,
            seed,
            out,
        } => {
            let balanced = audit::balance_by_label(&read_dataset(data)?, *seed)?;
            let r = audit::lexical_correlations(&balanced, *alpha, *min_count)?;
            audit::write_lexical_csv(&r.stats, out)?;
            print_json(&json!({
                "balanced_size": balanced.len(),
                "tested_words": r.tested_words,
                "threshold": r.threshold,
                "detections": r.detections().count(),
            }))
        }
        AuditCmd::Simdist { data, emb, out } => {
            let d = audit::similarity_distributions(&read_dataset(data)?, &EmbeddingTable::read(emb)?)?;
            write_json(out, &d)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Init { out } => {
            if out.exists() {
                bail!("{} already exists", out.display());
            }
            std::fs::write(&out, pipeline::default_config_toml())?;
            Ok(())
        }
        Cmd::Synth { n, seed, noise_rate, out } => {
            let ds = synth::generate(&SynthConfig {
                n,
                seed,
                noise_rate,
                ..SynthConfig::default()
            });
            write_dataset(&ds, &out)?;
            Ok(())
        }
        Cmd::All(a) => run_stages(&Stage::ALL, &a),
        Cmd::Cartography(a) => run_stages(&[Stage::Cartography], &a),
        Cmd::Exemplars(a) => run_stages(&[Stage::Exemplars], &a),
        Cmd::Generate(a) => run_stages(&[Stage::Generate], &a),
        Cmd::Aggregate(a) => run_stages(&[Stage::Aggregate], &a),
        Cmd::TrainToy(a) => run_stages(&[Stage::TrainToy], &a),
        Cmd::Filter(a) => match a.cands.clone() {
            Some(c) => filter_standalone(&a, &c),
            None => run_stages(&[Stage::Filter], &a.stage),
        },
        Cmd::Audit(a) => match &a.cmd {
            Some(c) => audit_cmd(c),
            None => run_stages(&[Stage::Audit], &a.stage),
        },
        Cmd::Train {
            data,
            out,
            log,
            datamap,
            epochs,
            lr,
            seed,
        } => {
            let cfg = ToyModelConfig {
                epochs,
                learning_rate: lr,
                rng_seed: seed,
                ..ToyModelConfig::default()
            };
            let ds: Dataset = read_dataset(&data)?;
            let (state, plog) = toytrainer::train(&ds, &cfg)?;
            state.save(&out)?;
            if let Some(p) = log {
                plog.write(&p)?;
            }
            if let Some(p) = datamap {
                export_datamap(&compute_data_map(&plog)?, &p)?;
            }
            print_json(&json!({"examples": ds.len(), "train_accuracy": toytrainer::accuracy(&state, &ds)}))
        }
        Cmd::Serve {
            data_dir,
            addr,
            lease_minutes,
            auth,
            guidelines,
        } => {
            let auth: AuthConfig = match auth {
                Some(p) => serde_json::from_slice(&std::fs::read(&p).with_context(|| format!("reading {}", p.display()))?)?,
                None => AuthConfig::default(),
            };
            let text = match guidelines {
                Some(p) => std::fs::read_to_string(&p)?,
                None => String::new(),
            };
            let store = ReviewStore::open(
                &data_dir,
                Arc::new(SystemClock),
                StoreConfig {
                    lease_ms: lease_minutes * 60_000,
                    ..StoreConfig::default()
                },
            )?;
            let store = Arc::new(store);
            http::run_blocking(addr, http::router(store.clone(), auth, text))?;
            store.snapshot()?;
            Ok(())
        }
    }
}

fn error_kind(e: &anyhow::Error) -> &'static str {
    if let Some(p) = e.downcast_ref::<PipelineError>() {
        return p.kind();
    }
    if e.downcast_ref::<ServiceError>().is_some() {
        return "service";
    }
    if e.downcast_ref::<std::io::Error>().is_some() {
        return "io";
    }
    "error"
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let causes: Vec<String> = e.chain().skip(1).map(|c| c.to_string()).collect();
            let body = json!({"error": error_kind(&e), "message": e.to_string(), "causes": causes});
            eprintln!("{body}");
            ExitCode::FAILURE
        }
    }
}
