use std::collections::BTreeMap;
use std::path::PathBuf;

use proptest::prelude::*;
use serde_json::json;

use mlkd::corpus::Sample;
use mlkd::vocab::{build_vocabulary, encode_batch, CLS_ID, IGNORE_INDEX, PAD_ID};
use mlkd::{
    generate_synthetic, load_corpus, merge_corpora, write_corpus, Corpus, Dialogue, Error, LabelCatalog, Split,
    SyntheticSpec, Task, Turn,
};

fn write(dir: &tempfile::TempDir, value: &serde_json::Value) -> PathBuf {
    let path = dir.path().join("corpus.json");
    std::fs::write(&path, serde_json::to_string_pretty(value).unwrap()).unwrap();
    path
}

fn minimal() -> serde_json::Value {
    json!({
        "catalog": {
            "slot_tags": ["O", "B-RN", "I-RN"],
            "intents": ["inform", "request"],
            "domains": ["restaurant"]
        },
        "dialogues": [{
            "id": "d0",
            "domain": "restaurant",
            "source": "m2m",
            "split": "train",
            "turns": [
                {"tokens": ["book", "golden", "dragon"], "slots": ["O", "B-RN", "I-RN"], "intent": "inform"},
                {"tokens": ["what", "time"], "slots": ["O", "O"], "intent": "request"}
            ]
        }]
    })
}

#[test]
fn minimal_file_loads() {
    let dir = tempfile::tempdir().unwrap();
    let c = load_corpus(write(&dir, &minimal())).unwrap();
    assert_eq!(c.dialogues.len(), 1);
    assert_eq!(c.dialogues[0].turns.len(), 2);
    assert_eq!((c.catalog.k_sf(), c.catalog.k_id(), c.catalog.k_dc()), (3, 2, 1));
    assert_eq!(c.split_of["d0"], Split::Train);
}

#[test]
fn token_tag_length_mismatch_names_the_turn() {
    let dir = tempfile::tempdir().unwrap();
    let mut v = minimal();
    v["dialogues"][0]["turns"][1]["tokens"] = json!(["what", "time", "now"]);
    match load_corpus(write(&dir, &v)).unwrap_err() {
        Error::Label { context, .. } => assert_eq!(context, "dialogue 'd0' turn 1"),
        e => panic!("expected a label error, got {e}"),
    }
}

#[test]
fn unknown_tag_and_missing_field_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let mut v = minimal();
    v["dialogues"][0]["turns"][0]["slots"] = json!(["O", "B-XX", "I-RN"]);
    let err = load_corpus(write(&dir, &v)).unwrap_err();
    assert!(matches!(err, Error::Label { .. }));
    assert!(err.to_string().contains("B-XX"));

    let mut v = minimal();
    v["dialogues"][0].as_object_mut().unwrap().remove("domain");
    let err = load_corpus(write(&dir, &v)).unwrap_err();
    assert!(matches!(err, Error::Schema { .. }));
    assert!(err.to_string().contains("'d0'"));

    std::fs::write(dir.path().join("bad.json"), "{ not json").unwrap();
    assert!(matches!(load_corpus(dir.path().join("bad.json")).unwrap_err(), Error::Parse { .. }));
}

#[test]
fn m2m_style_tags_load() {
    let dir = tempfile::tempdir().unwrap();
    let v = json!({
        "catalog": {
            "slot_tags": ["O", "B-num_people", "I-num_people", "B-restaurant_name", "I-restaurant_name"],
            "intents": ["INFORM"],
            "domains": ["restaurant"]
        },
        "dialogues": [{
            "id": "m0",
            "domain": "restaurant",
            "source": "m2m",
            "split": "train",
            "turns": [{
                "tokens": ["table", "for", "4", "at", "olive", "garden"],
                "slots": ["O", "O", "B-num_people", "O", "B-restaurant_name", "I-restaurant_name"],
                "intent": "INFORM"
            }]
        }]
    });
    let c = load_corpus(write(&dir, &v)).unwrap();
    assert!(c.catalog.slot_id("B-num_people").is_some());
    assert!(c.catalog.slot_id("B-restaurant_name").is_some());
    assert_eq!(c.dialogues[0].turns[0].slot_tag_ids, vec![0, 0, 1, 0, 3, 4]);
}

fn corpus_with_intents(source: &str, intents: &[String]) -> Corpus {
    let catalog = LabelCatalog::new(vec!["O".into()], intents.to_vec(), vec!["dom".into()]).unwrap();
    let dialogues: Vec<Dialogue> = (0..intents.len())
        .map(|i| Dialogue {
            id: format!("d{i}"),
            turns: vec![Turn {
                tokens: vec!["w".into()],
                slot_tag_ids: vec![0],
                intent_id: i,
            }],
            domain_id: 0,
            source: source.into(),
        })
        .collect();
    let split_of: BTreeMap<String, Split> = dialogues.iter().map(|d| (d.id.clone(), Split::Train)).collect();
    Corpus::new(catalog, dialogues, split_of).unwrap()
}

#[test]
fn intent_union_keeps_first_order() {
    let a = corpus_with_intents("a", &["A".into(), "B".into()]);
    let b = corpus_with_intents("b", &["B".into(), "C".into()]);
    let m = merge_corpora(&a, &b).unwrap();
    assert_eq!(m.catalog.intents, vec!["A", "B", "C"]);
    assert_eq!(
        ["A", "B", "C"].map(|s| m.catalog.intent_id(s).unwrap()),
        [0, 1, 2]
    );
    let c_turn = m.dialogues.iter().find(|d| d.id == "b:d1").unwrap();
    assert_eq!(c_turn.turns[0].intent_id, 2);
}

#[test]
fn merging_fifteen_and_eleven_intents_gives_at_most_twenty_six() {
    let m2m: Vec<String> = (0..15).map(|i| format!("intent_{i}")).collect();
    let mwoz: Vec<String> = (10..21).map(|i| format!("intent_{i}")).collect();
    let m = merge_corpora(&corpus_with_intents("m2m", &m2m), &corpus_with_intents("mwoz", &mwoz)).unwrap();
    assert!(m.catalog.k_id() <= 26);
    assert_eq!(m.catalog.k_id(), 21);
    assert_eq!(m.dialogues.len(), 26);
    assert!(m.split_of.values().all(|&s| s == Split::Train));
}

#[test]
fn write_then_load_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let c = generate_synthetic(&SyntheticSpec {
        n_dialogues: 20,
        ..SyntheticSpec::reference()
    })
    .unwrap();
    let path = dir.path().join("c.json");
    write_corpus(&c, &path).unwrap();
    assert_eq!(load_corpus(&path).unwrap(), c);
}

#[test]
fn two_domains_three_intents_each() {
    let c = generate_synthetic(&SyntheticSpec {
        n_dialogues: 30,
        n_domains: 2,
        intents_per_domain: 3,
        ..SyntheticSpec::reference()
    })
    .unwrap();
    assert_eq!((c.catalog.k_dc(), c.catalog.k_id()), (2, 6));
    assert_eq!(c.catalog.num_classes(Task::Sf), c.catalog.k_sf());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn batch_layout_invariants(seed in 0u64..1000, max_len in 2usize..12, take in 1usize..20) {
        let c = generate_synthetic(&SyntheticSpec { n_dialogues: 12, seed, ..SyntheticSpec::reference() }).unwrap();
        let vocab = build_vocabulary(&c, 1).unwrap();
        let samples: Vec<Sample<'_>> = c.samples(Split::Train).into_iter().take(take).collect();
        let b = encode_batch(&samples, &vocab, &c.catalog, max_len).unwrap();
        prop_assert!(b.width <= max_len);
        for (i, s) in samples.iter().enumerate() {
            let len = s.turn.tokens.len().min(max_len - 1);
            let row = i * b.width;
            prop_assert_eq!(b.token_ids[row], CLS_ID);
            prop_assert_eq!(b.slot_targets[row], IGNORE_INDEX);
            prop_assert_eq!(b.row_len(i), len + 1);
            for j in 0..b.width {
                let real = j <= len;
                prop_assert_eq!(b.mask[row + j] == 1, real);
                if !real {
                    prop_assert_eq!(b.token_ids[row + j], PAD_ID);
                    prop_assert_eq!(b.slot_targets[row + j], IGNORE_INDEX);
                } else if j > 0 {
                    prop_assert_eq!(b.slot_targets[row + j], s.turn.slot_tag_ids[j - 1] as i32);
                }
            }
            prop_assert_eq!(b.intent_targets[i], s.turn.intent_id);
            prop_assert_eq!(b.domain_targets[i], s.domain_id);
        }
    }

    #[test]
    fn merge_preserves_splits_and_turns(seed_a in 0u64..500, seed_b in 500u64..1000) {
        let a = generate_synthetic(&SyntheticSpec { n_dialogues: 10, seed: seed_a, ..SyntheticSpec::reference() }).unwrap();
        let mut b = generate_synthetic(&SyntheticSpec { n_dialogues: 10, n_domains: 3, seed: seed_b, ..SyntheticSpec::reference() }).unwrap();
        for d in &mut b.dialogues {
            d.source = "other".into();
        }
        b.split_of = b.dialogues.iter().map(|d| (d.id.clone(), a.split_of.values().next().copied().unwrap())).collect();
        let m = merge_corpora(&a, &b).unwrap();
        prop_assert_eq!(m.dialogues.len(), a.dialogues.len() + b.dialogues.len());
        for (src, merged) in a.dialogues.iter().chain(&b.dialogues).zip(&m.dialogues) {
            let original = if src.source == "other" { &b } else { &a };
            prop_assert_eq!(m.split(merged), original.split(src));
            for (t0, t1) in src.turns.iter().zip(&merged.turns) {
                prop_assert_eq!(&original.catalog.intents[t0.intent_id], &m.catalog.intents[t1.intent_id]);
                for (&s0, &s1) in t0.slot_tag_ids.iter().zip(&t1.slot_tag_ids) {
                    prop_assert_eq!(&original.catalog.slot_tags[s0], &m.catalog.slot_tags[s1]);
                }
            }
        }
    }
}
