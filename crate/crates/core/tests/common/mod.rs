//! The acceptance criteria, shared by the `acceptance` target and the
//! per-area integration tests. Every check returns a one-line summary of
//! what it measured, or the first failure.

#![allow(dead_code)]

pub mod service_sim;

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use cartoforge::audit::{balance_by_label, lexical_correlations, partial_input_accuracy, Field};
use cartoforge::corpus::{split_train_test, Dataset, Example, Label};
use cartoforge::dynamics::{compute_data_map, estimated_max_variability, EpochPredictionLog};
use cartoforge::exemplars::ExemplarGroup;
use cartoforge::filtering::{
    apply_heuristics, filter_candidates, normalize_for_compare, select_balanced_top, FilterConfig, FilterReport,
    FilterRule, Scorer,
};
use cartoforge::pipeline::{self, PipelineConfig};
use cartoforge::prompting::{render_prompt, GeneratedCandidate, PromptConfig};
use cartoforge::review::{aggregate, cohens_kappa, Action, AnnotationRecord, OutcomeStatus};
use cartoforge::synth::{self, SynthConfig};
use cartoforge::toytrainer::{self, gradient_check, predict_over_epochs, ToyModelConfig};

pub type Outcome = Result<String, String>;

macro_rules! check {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}
pub(crate) use check;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn criteria() -> Vec<(&'static str, fn() -> Outcome)> {
    vec![
        ("max-variability-oracle", max_variability_oracle),
        ("cartography-sanity", cartography_sanity),
        ("held-out-variability-correlation", held_out_correlation),
        ("prompt-goldens", prompt_goldens),
        ("filter-heuristics", filter_heuristics),
        ("balanced-selection", balanced_selection),
        ("aggregation-truth-table", aggregation_truth_table),
        ("gradient-check", gradient),
        ("partial-input-audit", partial_input),
        ("lexical-correlation", lexical_correlation),
        ("end-to-end-determinism", end_to_end_determinism),
        ("service-invariants", service_sim::service_invariants),
    ]
}

// ---------------------------------------------------------------- dynamics

fn random_matrix(r: &mut ChaCha8Rng, epochs: usize, labels: usize) -> Vec<Vec<f64>> {
    (0..epochs)
        .map(|_| {
            let raw: Vec<f64> = (0..labels).map(|_| r.gen_range(1e-3..1.0f64)).collect();
            let s: f64 = raw.iter().sum();
            raw.into_iter().map(|v| v / s).collect()
        })
        .collect()
}

/// Brute force: for each column, mean and then mean squared deviation.
fn oracle_max_std(m: &[Vec<f64>]) -> f64 {
    let e = m.len() as f64;
    let mut best = 0.0f64;
    for y in 0..m[0].len() {
        let mut sum = 0.0;
        for row in m {
            sum += row[y];
        }
        let mean = sum / e;
        let mut ss = 0.0;
        for row in m {
            ss += (row[y] - mean) * (row[y] - mean);
        }
        best = best.max((ss / e).sqrt());
    }
    best
}

pub fn max_variability_oracle() -> Outcome {
    let mut r = rng(2024);
    let mut worst = 0.0f64;
    for i in 0..1000 {
        let epochs = r.gen_range(2..=10);
        let labels = [2, 3, 5][r.gen_range(0..3)];
        let m = random_matrix(&mut r, epochs, labels);
        let got = estimated_max_variability(&m).map_err(|e| format!("matrix {i}: {e}"))?;
        let diff = (got - oracle_max_std(&m)).abs();
        worst = worst.max(diff);
        check!(diff <= 1e-12, "matrix {i} ({epochs}x{labels}): off by {diff:e}");
    }
    Ok(format!("1000 matrices, max abs error {worst:.1e}"))
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn cartography_sanity() -> Outcome {
    let ds = synth::generate(&SynthConfig {
        n: 2000,
        seed: 11,
        noise_rate: 0.1,
        ..Default::default()
    });
    let (_, log) = toytrainer::train(&ds, &ToyModelConfig::default()).map_err(|e| e.to_string())?;
    let points = compute_data_map(&log).map_err(|e| e.to_string())?;
    let (mut noisy, mut clean) = (vec![], vec![]);
    for p in &points {
        let ex = ds.get(&p.example_id).ok_or("data map id not in corpus")?;
        if ex.meta.contains_key("noisy") {
            noisy.push(p.confidence);
        } else {
            clean.push(p.confidence);
        }
    }
    check!(!noisy.is_empty() && !clean.is_empty(), "no noisy or no clean examples");
    let (mn, mc) = (mean(&noisy), mean(&clean));
    check!(mn < mc, "noisy mean confidence {mn:.4} not below clean {mc:.4}");

    let mut flat = EpochPredictionLog::new(Label::names(), 5).map_err(|e| e.to_string())?;
    let mut r = rng(3);
    for i in 0..50 {
        let row = random_matrix(&mut r, 1, 3).remove(0);
        flat.push(format!("c{i}"), Some(i % 3), vec![row; 5]).map_err(|e| e.to_string())?;
    }
    let flat_points = compute_data_map(&flat).map_err(|e| e.to_string())?;
    check!(
        flat_points.iter().all(|p| p.variability == 0.0 && p.est_max_variability == Some(0.0)),
        "constant predictions gave nonzero variability"
    );
    Ok(format!(
        "noisy {} mean conf {mn:.4} < clean {} mean conf {mc:.4}; 50 constant rows have variability 0",
        noisy.len(),
        clean.len()
    ))
}

pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let (mx, my) = (mean(x), mean(y));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    sxy / (sxx * syy).sqrt()
}

/// Correlation between held-out estimated max variability (model without them) and the
/// true variability (model trained on everything), for one seed.
pub fn held_out_r(seed: u64) -> Result<f64, String> {
    let ds = synth::generate(&SynthConfig {
        n: 5000,
        seed,
        ..Default::default()
    });
    let (train, held) = split_train_test(&ds, 50, seed).map_err(|e| e.to_string())?;
    let cfg = ToyModelConfig {
        rng_seed: seed,
        ..Default::default()
    };
    let (partial, _) = toytrainer::train(&train, &cfg).map_err(|e| e.to_string())?;
    let (_, full_log) = toytrainer::train(&ds, &cfg).map_err(|e| e.to_string())?;
    let truth: BTreeMap<String, f64> = compute_data_map(&full_log)
        .map_err(|e| e.to_string())?
        .into_iter()
        .map(|p| (p.example_id, p.variability))
        .collect();
    let mut est = vec![];
    let mut var = vec![];
    for ex in held.iter() {
        est.push(estimated_max_variability(&predict_over_epochs(&partial, ex)).map_err(|e| e.to_string())?);
        var.push(truth[&ex.id]);
    }
    Ok(pearson(&est, &var))
}

pub fn held_out_correlation() -> Outcome {
    let mut rs = vec![];
    for seed in 0..5 {
        let r = held_out_r(seed)?;
        check!(r.is_finite() && r >= 0.3, "seed {seed}: r = {r:.3}");
        rs.push(format!("{r:.3}"));
    }
    Ok(format!("r per seed [{}], all >= 0.3", rs.join(", ")))
}

// --------------------------------------------------------------- prompting

pub fn golden_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests").join("golden")
}

/// Three groups of k = 2 over a fixed nine-example corpus.
pub fn golden_fixture() -> (Dataset, Vec<(&'static str, ExemplarGroup)>) {
    let rows = [
        ("e1", "A man plays a guitar on stage.", "A man is performing music.", Label::Entailment),
        ("e2", "Two kids run through a park.", "Children are moving outdoors.", Label::Entailment),
        ("e3", "A chef slices onions.", "Someone is preparing food.", Label::Entailment),
        ("n1", "A woman reads on a bench.", "The woman is waiting for a friend.", Label::Neutral),
        ("n2", "A dog sleeps by the door.", "The dog is old.", Label::Neutral),
        ("n3", "People queue outside a bakery.", "The bread is fresh.", Label::Neutral),
        ("c1", "The train left at noon.", "The train never left.", Label::Contradiction),
        ("c2", "A girl is swimming.", "A girl is asleep in bed.", Label::Contradiction),
        ("c3", "The shop is closed.", "The shop is open all day.", Label::Contradiction),
    ];
    let ds = Dataset::new(
        "golden",
        rows.iter()
            .map(|(id, p, h, l)| Example::new(*id, *p, *h).with_label(*l))
            .collect(),
    )
    .expect("unique ids");
    let group = |seed: &str, n: [&str; 2], s: [f64; 2], label| ExemplarGroup {
        seed_id: seed.into(),
        neighbor_ids: n.iter().map(|x| x.to_string()).collect(),
        label,
        similarities: s.to_vec(),
    };
    let groups = vec![
        ("entailment", group("e1", ["e3", "e2"], [0.8, 0.6], Label::Entailment)),
        ("neutral", group("n1", ["n2", "n3"], [0.7, 0.5], Label::Neutral)),
        ("contradiction", group("c1", ["c3", "c2"], [0.9, 0.4], Label::Contradiction)),
    ];
    (ds, groups)
}

pub fn prompt_goldens() -> Outcome {
    let (ds, groups) = golden_fixture();
    let cfg = PromptConfig::default();
    for (name, g) in &groups {
        let path = golden_dir().join(format!("prompt_{name}.txt"));
        let want = std::fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?;
        let got = render_prompt(g, &ds, &cfg).map_err(|e| e.to_string())?;
        check!(got == want, "{name} prompt differs from {}:\n{got}", path.display());
        let mut rev = g.clone();
        rev.neighbor_ids.reverse();
        rev.similarities.reverse();
        check!(
            render_prompt(&rev, &ds, &cfg).map_err(|e| e.to_string())? == want,
            "{name} prompt depends on neighbor order"
        );
    }
    Ok(format!("{} goldens byte-identical", groups.len()))
}

// --------------------------------------------------------------- filtering

pub fn cand(id: &str, label: Label, premise: &str, hypothesis: &str) -> GeneratedCandidate {
    GeneratedCandidate {
        id: id.into(),
        raw: format!("{premise}\nX: {hypothesis}"),
        premise: Some(premise.into()),
        hypothesis: Some(hypothesis.into()),
        intended_label: label,
        seed_id: "s".into(),
        sample_index: 0,
        parse_ok: true,
        parse_error: None,
    }
}

/// (premise, hypothesis, expected rule) over the in-context pairs of
/// [`heuristic_context`].
pub const HEURISTIC_CASES: [(&str, &str, Option<FilterRule>); 12] = [
    ("The cat sat.", "the cat sat", Some(FilterRule::IdenticalPair)),
    ("A man walks a dog.", "A person is outside.", Some(FilterRule::CopiedIncontext)),
    ("The sun is bright.", "This pair of sentences shows a link.", Some(FilterRule::InstructionPhrase)),
    ("The sun is bright.", "Yes.", Some(FilterRule::TooShort)),
    ("The sun is bright today.", "It is daytime.", None),
    ("Hi.", "hi", Some(FilterRule::IdenticalPair)),
    ("Write previous examples here.", "Follow the same relationship.", Some(FilterRule::CopiedIncontext)),
    ("Previous examples say so.", "No.", Some(FilterRule::InstructionPhrase)),
    ("a MAN walks, a dog!", "A person is... outside", Some(FilterRule::CopiedIncontext)),
    ("  A  dog   runs! ", "a dog runs", Some(FilterRule::IdenticalPair)),
    ("The road is long.", "   abcd   ", Some(FilterRule::TooShort)),
    ("The road is long.", "abcde", None),
];

pub fn heuristic_context() -> Vec<(String, String)> {
    [
        ("A man walks a dog.", "A person is outside."),
        ("Write previous examples here.", "Follow the same relationship."),
    ]
    .iter()
    .map(|(p, h)| (normalize_for_compare(p), normalize_for_compare(h)))
    .collect()
}

fn random_text(r: &mut ChaCha8Rng) -> String {
    const WORDS: [&str; 12] = [
        "the", "dog", "A", "cat.", "runs", "pair of sentences", "!", "Yes", "park", "SAME", "relationship", "ok",
    ];
    let n = r.gen_range(0..6);
    (0..n).map(|_| WORDS[r.gen_range(0..WORDS.len())]).collect::<Vec<_>>().join(" ")
}

fn report_identity(rep: &FilterReport) -> bool {
    rep.input == rep.selected + rep.total_discarded() && rep.heuristic_kept >= rep.selected
}

pub fn filter_heuristics() -> Outcome {
    let cfg = FilterConfig::default();
    let ctx = heuristic_context();
    for (i, (p, h, want)) in HEURISTIC_CASES.iter().enumerate() {
        let v = apply_heuristics(&cand(&format!("h{i}"), Label::Neutral, p, h), &ctx, &cfg).map_err(|e| e.to_string())?;
        check!(v.rule == *want, "case {i} ({p:?}, {h:?}): got {:?}, want {want:?}", v.rule);
        check!(v.kept == want.is_none(), "case {i}: kept flag {}", v.kept);
    }

    let mut r = rng(77);
    let mut total = 0;
    for batch in 0..100 {
        let n = r.gen_range(0..60);
        let cands: Vec<GeneratedCandidate> = (0..n)
            .map(|i| {
                let mut c = cand(&format!("b{batch}.{i}"), Label::ALL[r.gen_range(0..3)], &random_text(&mut r), &random_text(&mut r));
                c.seed_id = "s".into();
                if r.gen_bool(0.1) {
                    c.parse_ok = false;
                    c.premise = None;
                    c.hypothesis = None;
                }
                c
            })
            .collect();
        let mut log = EpochPredictionLog::new(Label::names(), 3).map_err(|e| e.to_string())?;
        for c in &cands {
            log.push(c.id.clone(), None, random_matrix(&mut r, 3, 3)).map_err(|e| e.to_string())?;
        }
        let context = BTreeMap::from([("s".to_string(), heuristic_context())]);
        let q = r.gen_range(0.05..=1.0);
        let out = filter_candidates(&cands, &context, &Scorer::Log(&log), &FilterConfig { q, ..cfg.clone() })
            .map_err(|e| e.to_string())?;
        let rep = &out.report;
        let parsed = cands.iter().filter(|c| c.parse_ok).count();
        check!(rep.input == parsed, "batch {batch}: input {} != parsed {parsed}", rep.input);
        check!(report_identity(rep), "batch {batch}: counts do not add up: {rep:?}");
        let kept = out.verdicts.iter().filter(|v| v.kept).count();
        check!(kept == rep.selected && kept == out.selection.selected.len(), "batch {batch}: kept {kept} vs report {rep:?}");
        check!(
            out.verdicts.iter().all(|v| v.kept != v.rule.is_some() && (!v.kept || v.score.is_some())),
            "batch {batch}: verdict invariant broken"
        );
        total += rep.input;
    }
    Ok(format!("12 crafted cases exact; count identity on 100 fuzzed batches ({total} candidates)"))
}

/// Per-class sort-and-slice, written independently of the library.
fn oracle_selection(cands: &[GeneratedCandidate], scores: &BTreeMap<String, f64>, q: f64) -> (Vec<String>, usize) {
    let quota = ((q * cands.len() as f64).floor() as usize) / 3;
    let mut out = vec![];
    for label in [Label::Entailment, Label::Neutral, Label::Contradiction] {
        let mut mine: Vec<(f64, String)> = cands
            .iter()
            .filter(|c| c.intended_label == label)
            .map(|c| (scores[&c.id], c.id.clone()))
            .collect();
        mine.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        out.extend(mine.into_iter().take(quota).map(|(_, id)| id));
    }
    (out, quota)
}

pub fn balanced_selection() -> Outcome {
    let mut r = rng(5);
    let mut with_shortfall = 0;
    for set in 0..201 {
        // the last set is the 60-candidate instance
        let n = if set == 200 { 60 } else { r.gen_range(0..90) };
        let skew = r.gen_range(0.0..0.9);
        let cands: Vec<GeneratedCandidate> = (0..n)
            .map(|i| {
                let l = if r.gen_bool(skew) { Label::Entailment } else { Label::ALL[r.gen_range(0..3)] };
                cand(&format!("c{:03}", r.gen_range(0..1000) * 100 + i), l, "p", "h")
            })
            .collect();
        // coarse scores so ties are common
        let scores: BTreeMap<String, f64> = cands.iter().map(|c| (c.id.clone(), r.gen_range(0..8) as f64 / 16.0)).collect();
        let q = if set == 200 { 0.5 } else { r.gen_range(0.01..=1.0) };
        let mut refs: Vec<&GeneratedCandidate> = cands.iter().collect();
        let sel = select_balanced_top(&refs, &scores, q).map_err(|e| e.to_string())?;
        let (want, quota) = oracle_selection(&cands, &scores, q);
        check!(sel.quota == quota, "set {set}: quota {} vs {quota}", sel.quota);
        check!(sel.selected == want, "set {set}: selection differs from oracle");
        refs.shuffle(&mut r);
        check!(
            select_balanced_top(&refs, &scores, q).map_err(|e| e.to_string())?.selected == want,
            "set {set}: depends on input order"
        );
        let mut per_class = [0usize; 3];
        for ex in sel.dataset.iter() {
            check!(ex.label.is_none(), "set {set}: selected example carries a label");
            let id = &ex.id;
            let c = cands.iter().find(|c| &c.id == id).unwrap();
            per_class[c.intended_label.index()] += 1;
        }
        if sel.shortfalls.is_empty() {
            check!(per_class.iter().all(|&k| k == quota), "set {set}: unequal classes {per_class:?}");
        } else {
            with_shortfall += 1;
            for s in &sel.shortfalls {
                check!(per_class[s.label.index()] == s.available, "set {set}: shortfall count mismatch");
            }
        }
    }
    Ok(format!("201 sets match the oracle ({with_shortfall} with reported shortfalls)"))
}

// ------------------------------------------------------------------ review

#[derive(Clone, Copy, Debug)]
enum Act {
    Keep,
    Revise,
    Discard,
}

fn record(worker: &str, act: Act, label: Label) -> AnnotationRecord {
    match act {
        Act::Keep => AnnotationRecord::label_as_is("x", worker, label),
        Act::Revise => AnnotationRecord::revise("x", worker, label, None, Some(&format!("Revised by {worker}."))),
        Act::Discard => AnnotationRecord::discard("x", worker),
    }
}

pub fn aggregation_truth_table() -> Outcome {
    let original = Example::new("x", "A man rides a horse.", "A person is outdoors.");
    let acts = [Act::Keep, Act::Revise, Act::Discard];
    let mut cases = 0;
    for a1 in acts {
        for a2 in acts {
            for agree in [true, false] {
                let (l1, l2) = (Label::Entailment, if agree { Label::Entailment } else { Label::Contradiction });
                let r1 = record("w1", a1, l1);
                let r2 = record("w2", a2, l2);
                let mut seen = BTreeSet::new();
                for seed in 0..64u64 {
                    let o = aggregate(&r1, &r2, &original, seed).map_err(|e| e.to_string())?;
                    let swapped = aggregate(&r2, &r1, &original, seed).map_err(|e| e.to_string())?;
                    check!(o == swapped, "{a1:?}/{a2:?}/agree={agree}: argument order matters");
                    let tag = format!("{a1:?}/{a2:?}/agree={agree}");
                    match (a1, a2) {
                        (Act::Discard, _) | (_, Act::Discard) => {
                            check!(o.status == OutcomeStatus::Discarded, "{tag}: not discarded");
                            check!(o.final_label.is_none() && o.final_premise.is_none(), "{tag}: discarded with fields");
                        }
                        (Act::Revise, Act::Revise) => {
                            check!(o.status == OutcomeStatus::Kept && o.used_revision, "{tag}: revision not used");
                            let h = o.final_hypothesis.clone().unwrap_or_default();
                            let who = if h == "Revised by w1." { (l1, "w1") } else { (l2, "w2") };
                            check!(h == format!("Revised by {}.", who.1), "{tag}: unexpected text {h:?}");
                            check!(o.final_label == Some(who.0), "{tag}: label not the chosen reviser's");
                            check!(o.final_premise.as_deref() == Some(original.premise.as_str()), "{tag}: premise changed");
                            seen.insert(who.1.to_string());
                        }
                        _ => {
                            check!(o.status == OutcomeStatus::Kept && !o.used_revision, "{tag}: expected original text");
                            check!(
                                o.final_hypothesis.as_deref() == Some(original.hypothesis.as_str()),
                                "{tag}: text not original"
                            );
                            let l = o.final_label.ok_or(format!("{tag}: no label"))?;
                            check!(l == l1 || l == l2, "{tag}: label {l} not proposed");
                            check!(o.label_disagreement == !agree, "{tag}: disagreement flag {}", o.label_disagreement);
                            seen.insert(l.to_string());
                        }
                    }
                    check!(o == aggregate(&r1, &r2, &original, seed).unwrap(), "{tag}: not deterministic");
                }
                let random_pick = matches!((a1, a2), (Act::Revise, Act::Revise)) || (!agree && !matches!((a1, a2), (Act::Discard, _) | (_, Act::Discard)));
                if random_pick {
                    check!(seen.len() == 2, "{a1:?}/{a2:?}/agree={agree}: only {seen:?} drawn over 64 seeds");
                }
                cases += 1;
            }
        }
    }

    let e = Label::Entailment;
    let n = Label::Neutral;
    let c = Label::Contradiction;
    let perfect = cohens_kappa(&[(e, e), (n, n), (c, c), (e, e)]).map_err(|e| e.to_string())?;
    check!(perfect == 1.0, "perfect agreement kappa {perfect}");
    let mut worked = vec![(e, e); 3];
    worked.extend([(n, n); 3]);
    worked.extend([(e, n); 2]);
    worked.extend([(n, e); 2]);
    let k = cohens_kappa(&worked).map_err(|e| e.to_string())?;
    check!((k - 0.2).abs() < 1e-12, "worked example kappa {k}");
    let mut r = rng(10);
    let indep: Vec<(Label, Label)> = (0..10_000)
        .map(|_| (Label::ALL[r.gen_range(0..3)], Label::ALL[r.gen_range(0..3)]))
        .collect();
    let ki = cohens_kappa(&indep).map_err(|e| e.to_string())?;
    check!(ki.abs() < 0.05, "independent kappa {ki}");
    check!(
        matches!(record("w", Act::Revise, e).action, Action::Revise),
        "revise helper produced the wrong action"
    );
    Ok(format!("{cases} action/label cases match; kappa 1, {k:.3}, {ki:.4}"))
}

// ------------------------------------------------------------- toytrainer

pub fn gradient() -> Outcome {
    let mut worst = 0.0f64;
    for (seed, l2) in [(0, 0.0), (1, 0.0), (2, 0.01), (3, 0.1), (4, 0.0)] {
        let cfg = ToyModelConfig {
            rng_seed: seed,
            l2,
            hash_dims: 32,
            batch_size: 8,
            ..Default::default()
        };
        let rep = gradient_check(&cfg).map_err(|e| e.to_string())?;
        check!(rep.max_relative_error < 1e-4, "seed {seed}: relative error {:e} at {:?}", rep.max_relative_error, rep.worst);
        worst = worst.max(rep.max_relative_error);
    }
    Ok(format!("5 random models, max relative error {worst:.1e}"))
}

// ------------------------------------------------------------------- audit

const FILLER: [&str; 10] = ["red", "blue", "green", "small", "large", "old", "new", "calm", "loud", "fast"];

fn filler(r: &mut ChaCha8Rng, n: usize) -> Vec<&'static str> {
    (0..n).map(|_| FILLER[r.gen_range(0..FILLER.len())]).collect()
}

/// Hypothesis carries one label-determining cue word among filler words.
pub fn planted_corpus(n: usize, seed: u64, prefix: &str) -> Dataset {
    let mut r = rng(seed);
    let cues = ["surely", "maybe", "never"];
    let examples = (0..n)
        .map(|i| {
            let l = Label::ALL[r.gen_range(0..3)];
            let mut h = filler(&mut r, 4);
            let at = r.gen_range(0..=h.len());
            h.insert(at, cues[l.index()]);
            Example::new(format!("{prefix}{i:05}"), filler(&mut r, 5).join(" "), h.join(" ")).with_label(l)
        })
        .collect();
    Dataset::new(prefix, examples).expect("unique ids")
}

pub fn shuffled(ds: &Dataset, seed: u64) -> Dataset {
    let mut r = rng(seed);
    let mut labels: Vec<Option<Label>> = ds.iter().map(|e| e.label).collect();
    labels.shuffle(&mut r);
    let mut out = ds.clone();
    for (e, l) in out.examples.iter_mut().zip(labels) {
        e.label = l;
    }
    out
}

pub fn partial_input() -> Outcome {
    let cfg = ToyModelConfig::default();
    let train = planted_corpus(3000, 1, "tr");
    let test = planted_corpus(3000, 2, "te");
    let planted = partial_input_accuracy(&train, &test, Field::Hypothesis, &cfg).map_err(|e| e.to_string())?;
    check!(planted >= 0.95, "planted hypothesis-only accuracy {planted:.4}");
    let shuf = partial_input_accuracy(&shuffled(&train, 3), &shuffled(&test, 4), Field::Hypothesis, &cfg)
        .map_err(|e| e.to_string())?;
    check!((shuf - 1.0 / 3.0).abs() <= 0.05, "shuffled accuracy {shuf:.4}");
    Ok(format!("planted {planted:.4} >= 0.95; shuffled {shuf:.4} within 1/3 +- 0.05 (3000 test)"))
}

pub fn null_corpus(n: usize, seed: u64) -> Dataset {
    let mut r = rng(seed);
    let vocab: Vec<String> = (0..200).map(|i| format!("w{i}")).collect();
    let examples = (0..n)
        .map(|i| {
            let p: Vec<&str> = (0..6).map(|_| vocab[r.gen_range(0..vocab.len())].as_str()).collect();
            let h: Vec<&str> = (0..4).map(|_| vocab[r.gen_range(0..vocab.len())].as_str()).collect();
            Example::new(format!("n{i:05}"), p.join(" "), h.join(" ")).with_label(Label::ALL[i % 3])
        })
        .collect();
    Dataset::new("null", examples).expect("unique ids")
}

pub fn lexical_correlation() -> Outcome {
    let mut r = rng(8);
    let examples = (0..3000)
        .map(|i| {
            let l = Label::ALL[i % 3];
            let mut h = filler(&mut r, 4);
            if l == Label::Entailment {
                h.push("planted");
            }
            Example::new(format!("p{i:05}"), filler(&mut r, 4).join(" "), h.join(" ")).with_label(l)
        })
        .collect();
    let ds = Dataset::new("planted", examples).map_err(|e| e.to_string())?;
    let rep = lexical_correlations(&ds, 0.01, 20).map_err(|e| e.to_string())?;
    let hit = rep
        .stats
        .iter()
        .find(|s| s.word == "planted" && s.label == Label::Entailment)
        .ok_or("planted word not tested")?;
    let z = (1.0 - 1.0 / 3.0) / ((1.0 / 3.0) * (2.0 / 3.0) / 1000.0f64).sqrt();
    check!(hit.n == 1000 && hit.detectable, "planted word n={} detectable={}", hit.n, hit.detectable);
    check!((hit.z - z).abs() < 1e-9, "planted z {} vs formula {z}", hit.z);

    let mut clean_runs = 0;
    for seed in 0..20 {
        let ds = balance_by_label(&null_corpus(10_000, 100 + seed), seed).map_err(|e| e.to_string())?;
        let rep = lexical_correlations(&ds, 0.01, 20).map_err(|e| e.to_string())?;
        if rep.detections().count() == 0 {
            clean_runs += 1;
        }
    }
    check!(clean_runs >= 19, "only {clean_runs}/20 null runs had zero detections");
    Ok(format!("planted z = {:.2}; {clean_runs}/20 null corpora without detections", hit.z))
}

// ---------------------------------------------------------------- pipeline

pub fn files_under(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for entry in std::fs::read_dir(dir).expect("readable run dir") {
            let path = entry.expect("dir entry").path();
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                let rel = path.strip_prefix(root).expect("under root").to_path_buf();
                out.insert(rel, std::fs::read(&path).expect("readable artifact"));
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

pub fn run_in(dir: &Path, seed: u64) -> Result<(), String> {
    let cfg = PipelineConfig {
        run_dir: dir.to_path_buf(),
        seed,
        ..Default::default()
    };
    pipeline::run_all(&cfg).map(|_| ()).map_err(|e| e.to_string())
}

pub fn end_to_end_determinism() -> Outcome {
    let a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b = tempfile::tempdir().map_err(|e| e.to_string())?;
    run_in(a.path(), 3)?;
    run_in(b.path(), 3)?;
    let (fa, fb) = (files_under(a.path()), files_under(b.path()));
    check!(fa.len() > 10, "only {} artifacts written", fa.len());
    check!(fa.keys().eq(fb.keys()), "runs wrote different file sets");
    for (path, bytes) in &fa {
        check!(fb[path] == *bytes, "{} differs between runs", path.display());
    }
    let doc: serde_json::Value = serde_json::from_slice(&fa[Path::new(pipeline::FILTER_REPORT)]).map_err(|e| e.to_string())?;
    let rep: FilterReport = serde_json::from_value(doc["report"].clone()).map_err(|e| e.to_string())?;
    check!(
        rep.input >= rep.heuristic_kept && rep.heuristic_kept >= rep.selected && rep.selected > 0,
        "stage sizes not monotone: {} -> {} -> {}",
        rep.input,
        rep.heuristic_kept,
        rep.selected
    );
    Ok(format!(
        "{} artifacts byte-identical; generated {} >= heuristic-kept {} >= filtered {}",
        fa.len(),
        rep.input,
        rep.heuristic_kept,
        rep.selected
    ))
}
