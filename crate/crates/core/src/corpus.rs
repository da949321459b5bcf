//! Tri-level annotated multi-turn dialogues.
//!
//! A [`Corpus`] holds dialogues whose turns carry per-token slot tags (BIO)
//! and a per-turn intent; each dialogue carries a single domain. Labels are
//! referenced by name on disk and by integer id in memory, with ids given by
//! the order of the [`LabelCatalog`] lists.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::error::{Error, Result};

/// Outside-of-slot tag; must be present in every catalog.
pub const OUTSIDE_TAG: &str = "O";

/// Ordered label lists for the three tasks. List order defines ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelCatalog {
    pub slot_tags: Vec<String>,
    pub intents: Vec<String>,
    pub domains: Vec<String>,
}

impl LabelCatalog {
    pub fn new(slot_tags: Vec<String>, intents: Vec<String>, domains: Vec<String>) -> Result<Self> {
        let catalog = LabelCatalog {
            slot_tags,
            intents,
            domains,
        };
        catalog.validate()?;
        Ok(catalog)
    }

    pub fn validate(&self) -> Result<()> {
        for (kind, list) in [
            ("slot_tags", &self.slot_tags),
            ("intents", &self.intents),
            ("domains", &self.domains),
        ] {
            if list.is_empty() {
                return Err(Error::Schema {
                    context: format!("catalog.{kind}"),
                    message: "label list is empty".into(),
                });
            }
            let mut seen = HashSet::new();
            for name in list {
                if !seen.insert(name.as_str()) {
                    return Err(Error::Label {
                        context: format!("catalog.{kind}"),
                        message: format!("duplicate label '{name}'"),
                    });
                }
            }
        }
        if !self.slot_tags.iter().any(|t| t == OUTSIDE_TAG) {
            return Err(Error::Label {
                context: "catalog.slot_tags".into(),
                message: format!("missing the '{OUTSIDE_TAG}' tag"),
            });
        }
        Ok(())
    }

    pub fn k_sf(&self) -> usize {
        self.slot_tags.len()
    }

    pub fn k_id(&self) -> usize {
        self.intents.len()
    }

    pub fn k_dc(&self) -> usize {
        self.domains.len()
    }

    pub fn num_classes(&self, task: crate::Task) -> usize {
        self.labels(task).len()
    }

    pub fn labels(&self, task: crate::Task) -> &[String] {
        match task {
            crate::Task::Id => &self.intents,
            crate::Task::Sf => &self.slot_tags,
            crate::Task::Dc => &self.domains,
        }
    }

    pub fn slot_id(&self, name: &str) -> Option<usize> {
        self.slot_tags.iter().position(|t| t == name)
    }

    pub fn intent_id(&self, name: &str) -> Option<usize> {
        self.intents.iter().position(|t| t == name)
    }

    pub fn domain_id(&self, name: &str) -> Option<usize> {
        self.domains.iter().position(|t| t == name)
    }

    pub fn outside_id(&self) -> usize {
        self.slot_id(OUTSIDE_TAG).expect("validated catalog contains O")
    }

    /// Union with `other`: own order first, then `other`'s novel labels.
    pub fn union(&self, other: &LabelCatalog) -> LabelCatalog {
        fn merge(a: &[String], b: &[String]) -> Vec<String> {
            let mut out = a.to_vec();
            for name in b {
                if !out.contains(name) {
                    out.push(name.clone());
                }
            }
            out
        }
        LabelCatalog {
            slot_tags: merge(&self.slot_tags, &other.slot_tags),
            intents: merge(&self.intents, &other.intents),
            domains: merge(&self.domains, &other.domains),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Turn {
    pub tokens: Vec<String>,
    pub slot_tag_ids: Vec<usize>,
    pub intent_id: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dialogue {
    pub id: String,
    pub turns: Vec<Turn>,
    pub domain_id: usize,
    pub source: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!(
                "unknown split '{other}' (expected train|dev|test)"
            ))),
        }
    }
}

/// One training/evaluation sample: a single turn paired with its dialogue's domain.
#[derive(Debug, Clone, Copy)]
pub struct Sample<'a> {
    pub turn: &'a Turn,
    pub domain_id: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    pub catalog: LabelCatalog,
    pub dialogues: Vec<Dialogue>,
    pub split_of: BTreeMap<String, Split>,
}

impl Corpus {
    /// Builds a corpus and checks every invariant.
    pub fn new(
        catalog: LabelCatalog,
        dialogues: Vec<Dialogue>,
        split_of: BTreeMap<String, Split>,
    ) -> Result<Self> {
        let corpus = Corpus {
            catalog,
            dialogues,
            split_of,
        };
        corpus.validate()?;
        Ok(corpus)
    }

    pub fn empty(catalog: LabelCatalog) -> Self {
        Corpus {
            catalog,
            dialogues: Vec::new(),
            split_of: BTreeMap::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.catalog.validate()?;
        let mut seen = HashSet::new();
        for d in &self.dialogues {
            if !seen.insert(d.id.as_str()) {
                return Err(Error::Schema {
                    context: format!("dialogue '{}'", d.id),
                    message: "duplicate dialogue id".into(),
                });
            }
            if !self.split_of.contains_key(&d.id) {
                return Err(Error::Schema {
                    context: format!("dialogue '{}'", d.id),
                    message: "no split assignment".into(),
                });
            }
            if d.turns.is_empty() {
                return Err(Error::Schema {
                    context: format!("dialogue '{}'", d.id),
                    message: "dialogue has no turns".into(),
                });
            }
            if d.domain_id >= self.catalog.k_dc() {
                return Err(Error::Label {
                    context: format!("dialogue '{}'", d.id),
                    message: format!("domain id {} out of range", d.domain_id),
                });
            }
            for (t, turn) in d.turns.iter().enumerate() {
                let ctx = || format!("dialogue '{}' turn {t}", d.id);
                if turn.tokens.is_empty() {
                    return Err(Error::Schema {
                        context: ctx(),
                        message: "turn has no tokens".into(),
                    });
                }
                if turn.tokens.len() != turn.slot_tag_ids.len() {
                    return Err(Error::Label {
                        context: ctx(),
                        message: format!(
                            "{} tokens but {} slot tags",
                            turn.tokens.len(),
                            turn.slot_tag_ids.len()
                        ),
                    });
                }
                if turn.intent_id >= self.catalog.k_id() {
                    return Err(Error::Label {
                        context: ctx(),
                        message: format!("intent id {} out of range", turn.intent_id),
                    });
                }
                if let Some(bad) = turn.slot_tag_ids.iter().find(|&&s| s >= self.catalog.k_sf()) {
                    return Err(Error::Label {
                        context: ctx(),
                        message: format!("slot id {bad} out of range"),
                    });
                }
            }
        }
        if self.split_of.len() != self.dialogues.len() {
            return Err(Error::Schema {
                context: "split_of".into(),
                message: "split assignments for unknown dialogues".into(),
            });
        }
        Ok(())
    }

    pub fn split(&self, dialogue: &Dialogue) -> Split {
        self.split_of[&dialogue.id]
    }

    pub fn dialogues_in(&self, split: Split) -> impl Iterator<Item = &Dialogue> {
        self.dialogues
            .iter()
            .filter(move |d| self.split_of.get(&d.id) == Some(&split))
    }

    /// Flattens a split into per-turn samples, in dialogue then turn order.
    pub fn samples(&self, split: Split) -> Vec<Sample<'_>> {
        self.dialogues_in(split)
            .flat_map(|d| {
                d.turns.iter().map(move |turn| Sample {
                    turn,
                    domain_id: d.domain_id,
                })
            })
            .collect()
    }

    pub fn num_turns(&self, split: Split) -> usize {
        self.dialogues_in(split).map(|d| d.turns.len()).sum()
    }

    /// Positions in every turn that break BIO, keyed by (dialogue id, turn index).
    pub fn bio_violations(&self) -> Vec<(String, usize, Vec<usize>)> {
        let mut out = Vec::new();
        for d in &self.dialogues {
            for (t, turn) in d.turns.iter().enumerate() {
                let tags: Vec<&str> = turn
                    .slot_tag_ids
                    .iter()
                    .map(|&s| self.catalog.slot_tags[s].as_str())
                    .collect();
                let bad = bio_violations(&tags);
                if !bad.is_empty() {
                    out.push((d.id.clone(), t, bad));
                }
            }
        }
        out
    }

    pub fn to_json(&self) -> Value {
        let dialogues: Vec<Value> = self
            .dialogues
            .iter()
            .map(|d| {
                let turns: Vec<Value> = d
                    .turns
                    .iter()
                    .map(|t| {
                        json!({
                            "tokens": t.tokens,
                            "slots": t.slot_tag_ids.iter()
                                .map(|&s| self.catalog.slot_tags[s].as_str())
                                .collect::<Vec<_>>(),
                            "intent": self.catalog.intents[t.intent_id],
                        })
                    })
                    .collect();
                json!({
                    "id": d.id,
                    "domain": self.catalog.domains[d.domain_id],
                    "source": d.source,
                    "split": self.split(d).name(),
                    "turns": turns,
                })
            })
            .collect();
        json!({
            "catalog": {
                "slot_tags": self.catalog.slot_tags,
                "intents": self.catalog.intents,
                "domains": self.catalog.domains,
            },
            "dialogues": dialogues,
        })
    }

    pub fn from_json(root: &Value) -> Result<Self> {
        parse_corpus(root)
    }
}

/// Positions where `I-x` follows neither `B-x` nor `I-x` (including position 0).
pub fn bio_violations<S: AsRef<str>>(tags: &[S]) -> Vec<usize> {
    let mut bad = Vec::new();
    for (i, tag) in tags.iter().enumerate() {
        if let Some(kind) = tag.as_ref().strip_prefix("I-") {
            let ok = i > 0 && {
                let prev = tags[i - 1].as_ref();
                prev.strip_prefix("B-") == Some(kind) || prev.strip_prefix("I-") == Some(kind)
            };
            if !ok {
                bad.push(i);
            }
        }
    }
    bad
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<Corpus> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let root: Value = serde_json::from_str(&text).map_err(|e| Error::Parse {
        context: path.display().to_string(),
        message: e.to_string(),
    })?;
    let corpus = parse_corpus(&root)?;
    for (id, t, positions) in corpus.bio_violations() {
        log::warn!("dialogue '{id}' turn {t}: BIO violation at positions {positions:?}");
    }
    Ok(corpus)
}

pub fn write_corpus(corpus: &Corpus, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(&corpus.to_json()).expect("corpus serializes");
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn field<'a>(obj: &'a Map<String, Value>, key: &str, ctx: &dyn Fn() -> String) -> Result<&'a Value> {
    obj.get(key).ok_or_else(|| Error::Schema {
        context: ctx(),
        message: format!("missing field '{key}'"),
    })
}

fn as_object<'a>(v: &'a Value, ctx: &dyn Fn() -> String) -> Result<&'a Map<String, Value>> {
    v.as_object().ok_or_else(|| Error::Schema {
        context: ctx(),
        message: "expected an object".into(),
    })
}

fn as_str<'a>(v: &'a Value, ctx: &dyn Fn() -> String) -> Result<&'a str> {
    v.as_str().ok_or_else(|| Error::Schema {
        context: ctx(),
        message: "expected a string".into(),
    })
}

fn as_str_list(v: &Value, ctx: &dyn Fn() -> String) -> Result<Vec<String>> {
    let arr = v.as_array().ok_or_else(|| Error::Schema {
        context: ctx(),
        message: "expected an array of strings".into(),
    })?;
    arr.iter().map(|x| as_str(x, ctx).map(str::to_owned)).collect()
}

fn parse_corpus(root: &Value) -> Result<Corpus> {
    let top = || "corpus".to_string();
    let root = as_object(root, &top)?;
    let cat_ctx = || "catalog".to_string();
    let cat = as_object(field(root, "catalog", &top)?, &cat_ctx)?;
    let catalog = LabelCatalog::new(
        as_str_list(field(cat, "slot_tags", &cat_ctx)?, &|| "catalog.slot_tags".into())?,
        as_str_list(field(cat, "intents", &cat_ctx)?, &|| "catalog.intents".into())?,
        as_str_list(field(cat, "domains", &cat_ctx)?, &|| "catalog.domains".into())?,
    )?;
    let slot_index: HashMap<&str, usize> = catalog
        .slot_tags
        .iter()
        .enumerate()
        .map(|(i, s)| (s.as_str(), i))
        .collect();

    let raw_dialogues = field(root, "dialogues", &top)?
        .as_array()
        .ok_or_else(|| Error::Schema {
            context: "dialogues".into(),
            message: "expected an array".into(),
        })?;

    let mut dialogues = Vec::with_capacity(raw_dialogues.len());
    let mut split_of = BTreeMap::new();
    for (i, raw) in raw_dialogues.iter().enumerate() {
        let pos_ctx = || format!("dialogue #{i}");
        let obj = as_object(raw, &pos_ctx)?;
        let id = as_str(field(obj, "id", &pos_ctx)?, &pos_ctx)?.to_string();
        let ctx = || format!("dialogue '{id}'");
        let domain_name = as_str(field(obj, "domain", &ctx)?, &ctx)?;
        let domain_id = catalog.domain_id(domain_name).ok_or_else(|| Error::Label {
            context: ctx(),
            message: format!("domain '{domain_name}' not in catalog"),
        })?;
        let source = as_str(field(obj, "source", &ctx)?, &ctx)?.to_string();
        let split_name = as_str(field(obj, "split", &ctx)?, &ctx)?;
        let split: Split = split_name.parse().map_err(|_| Error::Schema {
            context: ctx(),
            message: format!("unknown split '{split_name}'"),
        })?;
        let raw_turns = field(obj, "turns", &ctx)?.as_array().ok_or_else(|| Error::Schema {
            context: ctx(),
            message: "'turns' must be an array".into(),
        })?;
        let mut turns = Vec::with_capacity(raw_turns.len());
        for (t, raw_turn) in raw_turns.iter().enumerate() {
            let tctx = || format!("dialogue '{id}' turn {t}");
            let tobj = as_object(raw_turn, &tctx)?;
            let tokens = as_str_list(field(tobj, "tokens", &tctx)?, &tctx)?;
            let slots = as_str_list(field(tobj, "slots", &tctx)?, &tctx)?;
            let intent = as_str(field(tobj, "intent", &tctx)?, &tctx)?;
            if tokens.len() != slots.len() {
                return Err(Error::Label {
                    context: tctx(),
                    message: format!("{} tokens but {} slot tags", tokens.len(), slots.len()),
                });
            }
            let slot_tag_ids = slots
                .iter()
                .map(|s| {
                    slot_index.get(s.as_str()).copied().ok_or_else(|| Error::Label {
                        context: tctx(),
                        message: format!("slot tag '{s}' not in catalog"),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let intent_id = catalog.intent_id(intent).ok_or_else(|| Error::Label {
                context: tctx(),
                message: format!("intent '{intent}' not in catalog"),
            })?;
            turns.push(Turn {
                tokens,
                slot_tag_ids,
                intent_id,
            });
        }
        if split_of.insert(id.clone(), split).is_some() {
            return Err(Error::Schema {
                context: ctx(),
                message: "duplicate dialogue id".into(),
            });
        }
        dialogues.push(Dialogue {
            id,
            turns,
            domain_id,
            source,
        });
    }
    Corpus::new(catalog, dialogues, split_of)
}

fn prefixed_id(d: &Dialogue) -> String {
    let prefix = format!("{}:", d.source);
    if d.id.starts_with(&prefix) {
        d.id.clone()
    } else {
        format!("{prefix}{}", d.id)
    }
}

/// Merges two corpora into one with a unified catalog.
///
/// Dialogue ids are prefixed with `<source>:` unless they already carry that
/// prefix. Split assignments are preserved.
pub fn merge_corpora(a: &Corpus, b: &Corpus) -> Result<Corpus> {
    let catalog = a.catalog.union(&b.catalog);
    let mut dialogues = Vec::with_capacity(a.dialogues.len() + b.dialogues.len());
    let mut split_of = BTreeMap::new();
    for corpus in [a, b] {
        let remap = |names: &[String], merged: &[String]| -> Vec<usize> {
            names
                .iter()
                .map(|n| merged.iter().position(|m| m == n).expect("union contains label"))
                .collect()
        };
        let slot_map = remap(&corpus.catalog.slot_tags, &catalog.slot_tags);
        let intent_map = remap(&corpus.catalog.intents, &catalog.intents);
        let domain_map = remap(&corpus.catalog.domains, &catalog.domains);
        for d in &corpus.dialogues {
            let id = prefixed_id(d);
            if split_of.insert(id.clone(), corpus.split(d)).is_some() {
                return Err(Error::Schema {
                    context: format!("dialogue '{id}'"),
                    message: "id collision after source prefixing".into(),
                });
            }
            dialogues.push(Dialogue {
                id,
                turns: d
                    .turns
                    .iter()
                    .map(|t| Turn {
                        tokens: t.tokens.clone(),
                        slot_tag_ids: t.slot_tag_ids.iter().map(|&s| slot_map[s]).collect(),
                        intent_id: intent_map[t.intent_id],
                    })
                    .collect(),
                domain_id: domain_map[d.domain_id],
                source: d.source.clone(),
            });
        }
    }
    Corpus::new(catalog, dialogues, split_of)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(v: &[&str]) -> Vec<String> {
        v.iter().map(|x| x.to_string()).collect()
    }

    fn tiny(intents: &[&str], source: &str, ids: &[&str]) -> Corpus {
        let catalog = LabelCatalog::new(s(&["O"]), s(intents), s(&["d"])).unwrap();
        let dialogues: Vec<Dialogue> = ids
            .iter()
            .map(|id| Dialogue {
                id: id.to_string(),
                turns: vec![Turn {
                    tokens: s(&["hi"]),
                    slot_tag_ids: vec![0],
                    intent_id: intents.len() - 1,
                }],
                domain_id: 0,
                source: source.into(),
            })
            .collect();
        let split_of = dialogues.iter().map(|d| (d.id.clone(), Split::Train)).collect();
        Corpus::new(catalog, dialogues, split_of).unwrap()
    }

    #[test]
    fn catalog_rejects_missing_outside_tag() {
        let err = LabelCatalog::new(s(&["B-x"]), s(&["a"]), s(&["d"])).unwrap_err();
        assert!(matches!(err, Error::Label { .. }));
    }

    #[test]
    fn catalog_rejects_duplicates() {
        assert!(LabelCatalog::new(s(&["O", "O"]), s(&["a"]), s(&["d"])).is_err());
    }

    #[test]
    fn union_appends_novel_labels_in_order() {
        let a = LabelCatalog::new(s(&["O"]), s(&["A", "B"]), s(&["d"])).unwrap();
        let b = LabelCatalog::new(s(&["O"]), s(&["B", "C"]), s(&["d"])).unwrap();
        let u = a.union(&b);
        assert_eq!(u.intents, s(&["A", "B", "C"]));
        assert_eq!(u.intent_id("C"), Some(2));
    }

    #[test]
    fn merge_with_empty_is_identity_for_prefixed_ids() {
        let x = tiny(&["a", "b"], "syn", &["syn:1", "syn:2"]);
        let empty = Corpus::empty(x.catalog.clone());
        assert_eq!(merge_corpora(&x, &empty).unwrap(), x);
    }

    #[test]
    fn merge_prefixes_and_remaps() {
        let a = tiny(&["A", "B"], "m2m", &["1"]);
        let b = tiny(&["B", "C"], "mwoz", &["1"]);
        let m = merge_corpora(&a, &b).unwrap();
        assert_eq!(m.dialogues[0].id, "m2m:1");
        assert_eq!(m.dialogues[1].id, "mwoz:1");
        // b's intent "C" (id 1 in b) becomes id 2.
        assert_eq!(m.dialogues[1].turns[0].intent_id, 2);
        assert_eq!(m.catalog.k_id(), 3);
    }

    #[test]
    fn merge_reports_id_collision() {
        let a = tiny(&["A"], "src", &["1"]);
        let b = tiny(&["A"], "src", &["src:1"]);
        assert!(merge_corpora(&a, &b).is_err());
    }

    #[test]
    fn bio_flags_orphan_inside_tags() {
        assert_eq!(bio_violations(&["I-x", "O"]), vec![0]);
        assert_eq!(bio_violations(&["B-x", "I-x", "I-x"]), Vec::<usize>::new());
        assert_eq!(bio_violations(&["B-x", "I-y", "O", "I-x"]), vec![1, 3]);
    }
}
