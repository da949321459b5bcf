//! Templated synthetic dialogues for reproducible desk-scale experiments.
//!
//! Every domain owns indicative words, slot types with their own value
//! lexicon, and a set of intents keyed by trigger phrases. Utterances are
//! assembled from a trigger phrase, a domain word, optional fillers and up to
//! two slot mentions, so all three tasks are learnable from surface tokens.

use std::collections::BTreeMap;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Dialogue, LabelCatalog, Split, Turn, OUTSIDE_TAG};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_dialogues: usize,
    pub n_domains: usize,
    pub intents_per_domain: usize,
    /// Slot types per domain; each contributes a `B-` and an `I-` tag.
    pub slot_tags_per_domain: usize,
    pub min_turns: usize,
    pub max_turns: usize,
    pub seed: u64,
}

impl SyntheticSpec {
    /// The reference corpus used by the end-to-end checks.
    pub fn reference() -> Self {
        SyntheticSpec {
            n_dialogues: 200,
            n_domains: 2,
            intents_per_domain: 3,
            slot_tags_per_domain: 3,
            min_turns: 3,
            max_turns: 6,
            seed: 7,
        }
    }
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self::reference()
    }
}

const DOMAINS: &[(&str, &[&str])] = &[
    ("restaurant", &["table", "dinner", "menu", "dining"]),
    ("movie", &["cinema", "film", "screening", "showing"]),
    ("hotel", &["room", "stay", "lodging", "reception"]),
    ("taxi", &["cab", "ride", "driver", "pickup"]),
    ("train", &["railway", "platform", "carriage", "rail"]),
    ("attraction", &["museum", "gallery", "sightseeing", "tour"]),
    ("flight", &["airline", "boarding", "plane", "airport"]),
    ("music", &["concert", "band", "album", "gig"]),
];

const VERBS: &[(&str, &[&str])] = &[
    ("inform", &["i would like", "i prefer", "looking for"]),
    ("request", &["what is", "can you tell", "which one"]),
    ("book", &["please book", "reserve", "make a reservation"]),
    ("confirm", &["is that right", "just to confirm", "correct"]),
    ("cancel", &["cancel", "call off", "drop it"]),
    ("affirm", &["yes", "sounds good", "sure"]),
    ("negate", &["no", "not really", "nope"]),
    ("greet", &["hello", "hi there", "good morning"]),
    ("thank", &["thanks", "thank you", "cheers"]),
];

type SlotLexicon = &'static [(&'static str, &'static [&'static str])];

const SLOTS: &[SlotLexicon] = &[
    &[
        ("num_people", &["two people", "four people", "six people", "couple", "eight guests"]),
        ("restaurant_name", &["golden dragon", "pizza hut", "bella italia", "bistro roma", "curry garden"]),
        ("time", &["7pm", "8pm", "noon", "half past six", "9pm"]),
        ("food", &["italian", "chinese", "indian", "thai food", "french"]),
    ],
    &[
        ("movie_name", &["star wars", "inception", "matrix", "frozen", "jaws"]),
        ("showtime", &["matinee", "late show", "10pm", "midnight", "early show"]),
        ("num_tickets", &["three tickets", "single ticket", "twin tickets", "five tickets", "ten tickets"]),
        ("genre", &["comedy", "horror", "thriller", "sci fi", "drama"]),
    ],
    &[
        ("hotel_name", &["grand hotel", "hilton", "lodge inn", "city inn", "park plaza"]),
        ("nights", &["one night", "weeknight", "whole week", "several nights", "weekend"]),
        ("area", &["north", "south", "centre", "east side", "west"]),
        ("price_range", &["budget", "luxury", "upscale", "boutique", "cosy"]),
    ],
    &[
        ("destination", &["station", "downtown", "harbour", "city hall", "stadium"]),
        ("leave_at", &["6am", "dawn", "quarter to five", "7am", "sunrise"]),
        ("car_type", &["sedan", "minivan", "suv", "estate car", "limo"]),
        ("departure", &["my house", "office", "campus", "mall", "hospital"]),
    ],
];

const FILLERS: &[&str] = &["please", "for", "me", "now", "ok", "about"];

struct DomainLexicon {
    name: String,
    words: Vec<String>,
    /// (verb, trigger phrases) per intent
    intents: Vec<(String, Vec<Vec<String>>)>,
    /// (slot type, values as token lists)
    slots: Vec<(String, Vec<Vec<String>>)>,
}

fn split_words(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_owned).collect()
}

fn domain_lexicon(d: usize, spec: &SyntheticSpec) -> DomainLexicon {
    let (name, words) = match DOMAINS.get(d) {
        Some((name, words)) => (name.to_string(), words.iter().map(|w| w.to_string()).collect()),
        None => {
            let name = format!("domain{d}");
            let words = (0..4).map(|i| format!("{name}w{i}")).collect();
            (name, words)
        }
    };
    let intents = (0..spec.intents_per_domain)
        .map(|j| match VERBS.get(j) {
            Some((verb, triggers)) => (
                verb.to_string(),
                triggers.iter().map(|t| split_words(t)).collect(),
            ),
            None => {
                let verb = format!("intent{j}");
                let triggers = (0..3).map(|k| vec![format!("{verb}t{k}")]).collect();
                (verb, triggers)
            }
        })
        .collect();
    let slots = (0..spec.slot_tags_per_domain)
        .map(|s| match SLOTS.get(d).and_then(|lex| lex.get(s)) {
            Some((slot, values)) => (
                slot.to_string(),
                values.iter().map(|v| split_words(v)).collect(),
            ),
            None => {
                let slot = format!("slot{s}");
                let values = (0..5)
                    .map(|v| {
                        let mut toks = vec![format!("{name}{slot}v{v}")];
                        if v % 2 == 1 {
                            toks.push(format!("{name}{slot}x{v}"));
                        }
                        toks
                    })
                    .collect();
                (slot, values)
            }
        })
        .collect();
    DomainLexicon {
        name,
        words,
        intents,
        slots,
    }
}

/// Generates a corpus deterministically from `spec`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Corpus> {
    if spec.n_dialogues == 0
        || spec.n_domains == 0
        || spec.intents_per_domain == 0
        || spec.slot_tags_per_domain == 0
        || spec.min_turns == 0
    {
        return Err(Error::Invalid("synthetic spec counts must all be >= 1".into()));
    }
    if spec.max_turns < spec.min_turns {
        return Err(Error::Invalid("max_turns must be >= min_turns".into()));
    }

    let lexicons: Vec<DomainLexicon> = (0..spec.n_domains).map(|d| domain_lexicon(d, spec)).collect();

    let mut slot_tags = vec![OUTSIDE_TAG.to_string()];
    let mut intents = Vec::new();
    let mut domains = Vec::new();
    // (B id, I id) per domain per slot type
    let mut slot_ids: Vec<Vec<(usize, usize)>> = Vec::new();
    for lex in &lexicons {
        domains.push(lex.name.clone());
        for (verb, _) in &lex.intents {
            intents.push(format!("{}.{verb}", lex.name));
        }
        let mut ids = Vec::new();
        for (slot, _) in &lex.slots {
            let b = slot_tags.len();
            slot_tags.push(format!("B-{}", slot_tag_name(&lex.name, slot)));
            slot_tags.push(format!("I-{}", slot_tag_name(&lex.name, slot)));
            ids.push((b, b + 1));
        }
        slot_ids.push(ids);
    }
    let catalog = LabelCatalog::new(slot_tags, intents, domains)?;

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut dialogues = Vec::with_capacity(spec.n_dialogues);
    for i in 0..spec.n_dialogues {
        let d = rng.random_range(0..spec.n_domains);
        let lex = &lexicons[d];
        let n_turns = rng.random_range(spec.min_turns..=spec.max_turns);
        let turns = (0..n_turns)
            .map(|_| {
                let j = rng.random_range(0..lex.intents.len());
                make_turn(&mut rng, lex, &slot_ids[d], j, d * spec.intents_per_domain + j)
            })
            .collect();
        dialogues.push(Dialogue {
            id: format!("synthetic:s{}-{i:05}", spec.seed),
            turns,
            domain_id: d,
            source: "synthetic".into(),
        });
    }

    let mut order: Vec<usize> = (0..dialogues.len()).collect();
    order.shuffle(&mut rng);
    let n = dialogues.len();
    let n_train = ((n as f64) * 0.8).round().max(1.0) as usize;
    let n_dev = ((n as f64) * 0.1).round() as usize;
    let mut split_of = BTreeMap::new();
    for (rank, &idx) in order.iter().enumerate() {
        let split = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_dev {
            Split::Dev
        } else {
            Split::Test
        };
        split_of.insert(dialogues[idx].id.clone(), split);
    }
    Corpus::new(catalog, dialogues, split_of)
}

fn slot_tag_name(domain: &str, slot: &str) -> String {
    if slot.starts_with(domain) {
        slot.to_string()
    } else {
        format!("{domain}_{slot}")
    }
}

fn make_turn(
    rng: &mut ChaCha8Rng,
    lex: &DomainLexicon,
    slot_ids: &[(usize, usize)],
    intent_local: usize,
    intent_id: usize,
) -> Turn {
    let mut tokens: Vec<String> = Vec::new();
    let mut tags: Vec<usize> = Vec::new();
    let o = 0;
    let trigger = lex.intents[intent_local].1.choose(rng).expect("non-empty triggers");
    for w in trigger {
        tokens.push(w.clone());
        tags.push(o);
    }
    if rng.random_bool(0.5) {
        tokens.push(FILLERS.choose(rng).unwrap().to_string());
        tags.push(o);
    }
    tokens.push(lex.words.choose(rng).unwrap().clone());
    tags.push(o);

    let n_slots = rng.random_range(0..=2.min(lex.slots.len()));
    let mut slot_order: Vec<usize> = (0..lex.slots.len()).collect();
    slot_order.shuffle(rng);
    for &s in slot_order.iter().take(n_slots) {
        if rng.random_bool(0.5) {
            tokens.push(FILLERS.choose(rng).unwrap().to_string());
            tags.push(o);
        }
        let value = lex.slots[s].1.choose(rng).unwrap();
        let (b, i) = slot_ids[s];
        for (k, w) in value.iter().enumerate() {
            tokens.push(w.clone());
            tags.push(if k == 0 { b } else { i });
        }
    }
    Turn {
        tokens,
        slot_tag_ids: tags,
        intent_id,
    }
}
