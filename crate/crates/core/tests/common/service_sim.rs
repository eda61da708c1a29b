//! Many simulated reviewers against the HTTP API while the server is killed
//! and restarted from its journal.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, RwLock, Weak};
use std::thread;
use std::time::{Duration, Instant};

use rand::Rng;
use reqwest::blocking::Client;
use reqwest::StatusCode;

use cartoforge::corpus::{Example, Label};
use cartoforge::review::AnnotationRecord;
use cartoforge::service::http::{router, AuthConfig, TOKEN_HEADER};
use cartoforge::service::{load_state, replay_journal, Clock, ManualClock, ReviewStore, StoreConfig, StoreStats, Task};

use super::{check, rng, Outcome};

pub const ADMIN: &str = "admin-secret";

pub fn token(worker: &str) -> String {
    format!("tok-{worker}")
}

pub fn auth(workers: &[String]) -> AuthConfig {
    AuthConfig {
        workers: workers.iter().map(|w| (w.clone(), token(w))).collect(),
        admin: Some(ADMIN.into()),
    }
}

/// A server on an ephemeral port, running on its own runtime thread.
pub struct Server {
    pub base: String,
    stop: Option<tokio::sync::oneshot::Sender<()>>,
    thread: Option<thread::JoinHandle<()>>,
    store: Weak<ReviewStore>,
}

impl Server {
    pub fn start(store: ReviewStore, auth: AuthConfig) -> Server {
        let store = Arc::new(store);
        let weak = Arc::downgrade(&store);
        let app = router(store, auth, "Label, revise or discard.".into());
        let (addr_tx, addr_rx) = std::sync::mpsc::channel();
        let (stop_tx, stop_rx) = tokio::sync::oneshot::channel::<()>();
        let thread = thread::spawn(move || {
            let rt = tokio::runtime::Builder::new_multi_thread()
                .worker_threads(4)
                .enable_all()
                .build()
                .expect("runtime");
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.expect("bind");
                addr_tx.send(listener.local_addr().expect("addr")).expect("send addr");
                // Not graceful: open connections are cut when stop fires.
                tokio::select! {
                    r = axum::serve(listener, app) => r.expect("serve"),
                    _ = stop_rx => {}
                }
            });
            rt.shutdown_timeout(Duration::from_secs(2));
        });
        let addr = addr_rx.recv().expect("server address");
        Server {
            base: format!("http://{addr}"),
            stop: Some(stop_tx),
            thread: Some(thread),
            store: weak,
        }
    }

    /// Kills the server and waits until nothing holds the store any more.
    pub fn crash(mut self) {
        self.shutdown();
    }

    fn shutdown(&mut self) {
        if let Some(stop) = self.stop.take() {
            let _ = stop.send(());
        }
        if let Some(t) = self.thread.take() {
            t.join().expect("server thread");
        }
        let start = Instant::now();
        while self.store.strong_count() > 0 {
            assert!(start.elapsed() < Duration::from_secs(10), "store still referenced after shutdown");
            thread::sleep(Duration::from_millis(1));
        }
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn stats(client: &Client, base: &str) -> Option<StoreStats> {
    client.get(format!("{base}/api/stats")).send().ok()?.json().ok()
}

fn candidates(n: usize) -> Vec<Example> {
    (0..n)
        .map(|i| Example::new(format!("cand-{i:04}"), format!("Premise number {i} is here."), format!("Hypothesis {i} holds.")))
        .collect()
}

fn decide(r: &mut impl Rng, task: &Task, worker: &str) -> AnnotationRecord {
    let label = Label::ALL[r.gen_range(0..3)];
    match r.gen_range(0..10) {
        0 => AnnotationRecord::discard(&task.candidate_id, worker),
        1 | 2 => AnnotationRecord::revise(
            &task.candidate_id,
            worker,
            label,
            None,
            Some(format!("{} Surely.", task.hypothesis).as_str()),
        ),
        _ => AnnotationRecord::label_as_is(&task.candidate_id, worker, label),
    }
}

#[derive(Default)]
struct Tally {
    violations: AtomicUsize,
    submitted: AtomicUsize,
    abandoned: AtomicUsize,
    lost_leases: AtomicUsize,
    duplicates_rejected: AtomicUsize,
    first_violation: RwLock<Option<String>>,
}

impl Tally {
    fn violation(&self, what: String) {
        self.violations.fetch_add(1, Ordering::SeqCst);
        let mut first = self.first_violation.write().unwrap();
        if first.is_none() {
            *first = Some(what);
        }
    }
}

fn worker_loop(id: String, seed: u64, base: Arc<RwLock<String>>, stop: Arc<AtomicBool>, tally: Arc<Tally>) {
    let client = Client::builder().timeout(Duration::from_secs(5)).build().expect("client");
    let tok = token(&id);
    let mut r = rng(seed);
    let pause = || thread::sleep(Duration::from_millis(2));
    while !stop.load(Ordering::SeqCst) {
        let url = format!("{}/api/tasks/next?worker={id}", base.read().unwrap());
        let task: Task = match client.get(url).header(TOKEN_HEADER, &tok).send() {
            Err(_) => {
                pause();
                continue;
            }
            Ok(resp) if resp.status() == StatusCode::OK => match resp.json() {
                Ok(t) => t,
                Err(_) => continue,
            },
            Ok(resp) if resp.status() == StatusCode::NO_CONTENT => {
                pause();
                continue;
            }
            Ok(resp) => {
                tally.violation(format!("{id}: next returned {}", resp.status()));
                continue;
            }
        };
        if !task.assignments.contains(&id) || task.assignments.len() > 2 {
            tally.violation(format!("{id}: handed task {} with assignments {:?}", task.candidate_id, task.assignments));
        }
        if r.gen_bool(0.03) {
            // walks away; the lease has to expire
            tally.abandoned.fetch_add(1, Ordering::SeqCst);
            continue;
        }
        if r.gen_bool(0.3) {
            thread::sleep(Duration::from_micros(r.gen_range(0..1500)));
        }
        let rec = decide(&mut r, &task, &id);
        let mut attempt = 0;
        loop {
            attempt += 1;
            if attempt > 200 || stop.load(Ordering::SeqCst) {
                break;
            }
            let url = format!("{}/api/annotations", base.read().unwrap());
            match client.post(url).header(TOKEN_HEADER, &tok).json(&rec).send().map(|r| r.status()) {
                Err(_) => pause(),
                Ok(StatusCode::OK) => {
                    tally.submitted.fetch_add(1, Ordering::SeqCst);
                    if r.gen_bool(0.05) {
                        let url = format!("{}/api/annotations", base.read().unwrap());
                        if let Ok(resp) = client.post(url).header(TOKEN_HEADER, &tok).json(&rec).send() {
                            if resp.status() == StatusCode::CONFLICT {
                                tally.duplicates_rejected.fetch_add(1, Ordering::SeqCst);
                            } else {
                                tally.violation(format!("{id}: duplicate accepted with {}", resp.status()));
                            }
                        }
                    }
                    break;
                }
                // an earlier attempt landed before the connection dropped
                Ok(StatusCode::CONFLICT) if attempt > 1 => break,
                Ok(StatusCode::FORBIDDEN) => {
                    tally.lost_leases.fetch_add(1, Ordering::SeqCst);
                    break;
                }
                Ok(s) => {
                    tally.violation(format!("{id}: submit for {} returned {s}", rec.candidate_id));
                    break;
                }
            }
        }
    }
}

fn append_torn_line(dir: &Path) {
    let mut f = std::fs::OpenOptions::new()
        .append(true)
        .open(dir.join("journal.jsonl"))
        .expect("journal exists");
    f.write_all(br#"{"seq":999999,"event":"annotate","rec"#).expect("torn write");
}

pub struct SimReport {
    pub crashes: usize,
    pub submitted: usize,
    pub abandoned: usize,
    pub lost_leases: usize,
    pub duplicates_rejected: usize,
    pub elapsed: Duration,
}

pub fn simulate(workers: usize, tasks: usize, seed: u64) -> Result<SimReport, String> {
    const LEASE_MS: u64 = 60_000;
    let started = Instant::now();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let clock = Arc::new(ManualClock::new(1_000_000));
    let cfg = || StoreConfig {
        lease_ms: LEASE_MS,
        snapshot_every: 97,
    };
    let open = |clock: &Arc<ManualClock>| {
        let c: Arc<dyn Clock> = clock.clone();
        ReviewStore::open(dir.path(), c, cfg()).map_err(|e| e.to_string())
    };
    let names: Vec<String> = (0..workers).map(|i| format!("w{i:02}")).collect();
    let mut server = Server::start(open(&clock)?, auth(&names));
    let client = Client::new();

    let resp = client
        .post(format!("{}/api/tasks/import", server.base))
        .header(TOKEN_HEADER, ADMIN)
        .json(&candidates(tasks))
        .send()
        .map_err(|e| e.to_string())?;
    check!(resp.status() == StatusCode::OK, "import returned {}", resp.status());
    let unauth = client
        .post(format!("{}/api/tasks/import", server.base))
        .json(&candidates(1))
        .send()
        .map_err(|e| e.to_string())?;
    check!(unauth.status() == StatusCode::UNAUTHORIZED, "import without token returned {}", unauth.status());

    let base = Arc::new(RwLock::new(server.base.clone()));
    let stop = Arc::new(AtomicBool::new(false));
    let tally = Arc::new(Tally::default());
    let handles: Vec<_> = names
        .iter()
        .enumerate()
        .map(|(i, w)| {
            let (w, base, stop, tally) = (w.clone(), base.clone(), stop.clone(), tally.clone());
            thread::spawn(move || worker_loop(w, seed * 1000 + i as u64, base, stop, tally))
        })
        .collect();

    // crash when the annotation count passes these fractions of the total
    let mut crash_points: Vec<usize> = [0.15, 0.35, 0.55, 0.75, 0.9].iter().map(|f| (f * 2.0 * tasks as f64) as usize).collect();
    crash_points.reverse();
    let mut crashes = 0;
    let mut last_progress = (0, Instant::now());
    let deadline = Instant::now() + Duration::from_secs(120);
    let outcome = loop {
        if Instant::now() > deadline {
            break Err(format!("did not finish in time, last stats at {} annotations", last_progress.0));
        }
        thread::sleep(Duration::from_millis(3));
        let Some(s) = stats(&client, &server.base) else { continue };
        if s.done == tasks {
            break Ok(());
        }
        if s.annotations != last_progress.0 {
            last_progress = (s.annotations, Instant::now());
        } else if last_progress.1.elapsed() > Duration::from_millis(200) {
            // everyone idle: the remaining slots sit behind abandoned leases
            clock.advance(LEASE_MS + 1);
            last_progress.1 = Instant::now();
        }
        if crash_points.last().is_some_and(|&p| s.annotations >= p) {
            crash_points.pop();
            server.crash();
            crashes += 1;
            if crashes % 2 == 1 {
                append_torn_line(dir.path());
            }
            let fresh = open(&clock)?;
            server = Server::start(fresh, auth(&names));
            *base.write().unwrap() = server.base.clone();
        }
    };
    stop.store(true, Ordering::SeqCst);
    for h in handles {
        h.join().map_err(|_| "worker panicked".to_string())?;
    }
    outcome?;
    if let Some(v) = tally.first_violation.read().unwrap().clone() {
        return Err(format!("{} violations, first: {v}", tally.violations.load(Ordering::SeqCst)));
    }

    let s = stats(&client, &server.base).ok_or("stats unavailable")?;
    check!(
        s.tasks == tasks && s.done == tasks && s.annotations == 2 * tasks,
        "final stats {s:?}"
    );
    let export = |base: &str| -> Result<String, String> {
        let resp = client
            .get(format!("{base}/api/export"))
            .header(TOKEN_HEADER, ADMIN)
            .send()
            .map_err(|e| e.to_string())?;
        check!(resp.status() == StatusCode::OK, "export returned {}", resp.status());
        resp.text().map_err(|e| e.to_string())
    };
    let before = export(&server.base)?;
    let mut per_task: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    let mut lines = 0;
    for line in before.lines() {
        let rec: AnnotationRecord = serde_json::from_str(line).map_err(|e| e.to_string())?;
        check!(
            per_task.entry(rec.candidate_id.clone()).or_default().insert(rec.worker_id.clone()),
            "{} annotated twice by {}",
            rec.candidate_id,
            rec.worker_id
        );
        lines += 1;
    }
    check!(lines == 2 * tasks, "export has {lines} records");
    check!(per_task.len() == tasks && per_task.values().all(|w| w.len() == 2), "a done task lacks two distinct workers");

    // final crash: replay must reproduce the visible state
    server.crash();
    let replayed = replay_journal(dir.path()).map_err(|e| e.to_string())?;
    let loaded = load_state(dir.path()).map_err(|e| e.to_string())?;
    check!(replayed == loaded, "journal replay disagrees with snapshot + tail");
    for t in replayed.tasks.values() {
        check!(
            t.completed.is_subset(&t.assignments) && t.assignments.len() <= 2,
            "task {} has assignments {:?}, completed {:?}",
            t.candidate_id,
            t.assignments,
            t.completed
        );
    }
    let server = Server::start(open(&clock)?, auth(&names));
    check!(export(&server.base)? == before, "export changed across restart");
    drop(server);

    Ok(SimReport {
        crashes,
        submitted: tally.submitted.load(Ordering::SeqCst),
        abandoned: tally.abandoned.load(Ordering::SeqCst),
        lost_leases: tally.lost_leases.load(Ordering::SeqCst),
        duplicates_rejected: tally.duplicates_rejected.load(Ordering::SeqCst),
        elapsed: started.elapsed(),
    })
}

pub fn service_invariants() -> Outcome {
    let rep = simulate(20, 500, 1)?;
    check!(rep.crashes == 5, "only {} crashes injected", rep.crashes);
    Ok(format!(
        "20 workers, 500 tasks done, {} crashes, {} abandoned leases, {} lost leases, {} duplicate submits rejected, {:.1}s",
        rep.crashes,
        rep.abandoned,
        rep.lost_leases,
        rep.duplicates_rejected,
        rep.elapsed.as_secs_f64()
    ))
}
