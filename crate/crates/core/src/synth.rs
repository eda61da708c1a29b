//! Templated NLI-like corpus generator.
//!
//! Premises are random scene descriptions; hypotheses combine a core clause
//! tied to the gold label with a tail phrase whose label is drawn according to
//! a per-example ambiguity level. Ambiguous examples therefore carry mixed
//! lexical evidence, and the toy model's confidence in them moves around
//! between epochs. Optional label noise flips gold labels and marks the
//! example with `meta.noisy = true`.

use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::corpus::{Dataset, Example, Label};
use crate::text::seeded_rng;

pub const GENRES: [&str; 5] = ["fiction", "government", "slate", "telephone", "travel"];

const SUBJECTS: [&str; 12] = [
    "The farmer",
    "A young girl",
    "The old man",
    "Two tourists",
    "The teacher",
    "A musician",
    "The senator",
    "A group of children",
    "The chef",
    "A woman in a red coat",
    "The committee",
    "A tired driver",
];

const ACTIONS: [&str; 12] = [
    "walks to the market",
    "reads a long report",
    "sings near the fountain",
    "repairs an old bicycle",
    "waits for the evening train",
    "paints the garden fence",
    "writes a letter to the mayor",
    "carries groceries up the hill",
    "visits the museum",
    "cooks soup for the neighbors",
    "studies a map of the city",
    "feeds the pigeons",
];

const PLACES: [&str; 10] = [
    "in the morning",
    "after lunch",
    "near the harbor",
    "on a rainy day",
    "downtown",
    "during the festival",
    "by the river",
    "before sunrise",
    "in the old quarter",
    "at the weekend",
];

const CORES: [[&str; 4]; 3] = [
    [
        "is doing something",
        "is outside somewhere",
        "is an active person",
        "is present there",
    ],
    [
        "is there because of a friend",
        "is probably tired",
        "will win a prize tomorrow",
        "is there for the first time",
    ],
    [
        "is not doing anything",
        "is sleeping at home",
        "has never left the house",
        "is alone in bed",
    ],
];

const TAILS: [[&str; 4]; 3] = [
    ["indeed", "certainly", "clearly", "somehow"],
    ["perhaps", "hopefully", "likely", "again"],
    ["nowhere", "instead", "nobody", "never"],
];

const FILLERS: [&str; 4] = ["uh", "you know", "well", "i mean"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n: usize,
    pub seed: u64,
    /// Fraction of examples whose gold label is replaced by a different one.
    pub noise_rate: f64,
    /// Upper bound of the per-example ambiguity level, drawn uniformly.
    pub max_ambiguity: f64,
    pub id_prefix: String,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n: 300,
            seed: 7,
            noise_rate: 0.0,
            max_ambiguity: 1.0,
            id_prefix: "syn".into(),
        }
    }
}

fn pick<'a, R: Rng>(rng: &mut R, items: &[&'a str]) -> &'a str {
    items[rng.gen_range(0..items.len())]
}

/// Label that is the gold one with probability `1 - d + d/3`, otherwise one
/// of the other two uniformly.
fn mixed_label<R: Rng>(rng: &mut R, gold: Label, d: f64) -> Label {
    if rng.gen_bool(d) {
        Label::ALL[rng.gen_range(0..Label::COUNT)]
    } else {
        gold
    }
}

pub fn generate(cfg: &SynthConfig) -> Dataset {
    let mut rng = seeded_rng(cfg.seed);
    let width = cfg.n.max(1).to_string().len().max(4);
    let mut examples = Vec::with_capacity(cfg.n);
    for i in 0..cfg.n {
        let gold = Label::ALL[i % Label::COUNT];
        let d = rng.gen_range(0.0..=cfg.max_ambiguity.clamp(0.0, 1.0));
        let genre = GENRES[rng.gen_range(0..GENRES.len())];
        let subject = pick(&mut rng, &SUBJECTS);
        let action = pick(&mut rng, &ACTIONS);
        let place = pick(&mut rng, &PLACES);
        let premise = if genre == "telephone" {
            format!("{} {} {} {}.", pick(&mut rng, &FILLERS), subject.to_lowercase(), action, place)
        } else {
            format!("{subject} {action} {place}.")
        };
        // The core clause is tied to gold unless the example is very ambiguous.
        let core_label = mixed_label(&mut rng, gold, d * 0.5);
        let tail_label = mixed_label(&mut rng, gold, d);
        let core = pick(&mut rng, &CORES[core_label.index()]);
        let tail = pick(&mut rng, &TAILS[tail_label.index()]);
        let hypothesis = format!("{subject} {core} {tail}.");

        let mut label = gold;
        let noisy = cfg.noise_rate > 0.0 && rng.gen_bool(cfg.noise_rate.clamp(0.0, 1.0));
        if noisy {
            let shift = rng.gen_range(1..Label::COUNT);
            label = Label::ALL[(gold.index() + shift) % Label::COUNT];
        }
        let mut ex = Example::new(format!("{}-{:0width$}", cfg.id_prefix, i), premise, hypothesis)
            .with_label(label)
            .with_genre(genre);
        ex.meta.insert("ambiguity".into(), Value::from((d * 1e6).round() / 1e6));
        if noisy {
            ex.meta.insert("noisy".into(), Value::Bool(true));
        }
        examples.push(ex);
    }
    Dataset {
        name: format!("{}-{}", cfg.id_prefix, cfg.n),
        examples,
    }
}
