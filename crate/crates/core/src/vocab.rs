//! Word-level vocabulary and batch encoding.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, LabelCatalog, Sample, Split};
use crate::error::{Error, Result};

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const CLS_ID: u32 = 2;
const RESERVED: [&str; 3] = ["[PAD]", "[UNK]", "[CLS]"];

/// Target value at positions that take no part in the slot loss.
pub const IGNORE_INDEX: i32 = -100;

/// Closed lowercase vocabulary with reserved ids PAD=0, UNK=1, CLS=2.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "VocabFile", into = "VocabFile")]
pub struct Vocabulary {
    words: Vec<String>,
    word_to_id: HashMap<String, u32>,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    words: Vec<String>,
}

impl From<VocabFile> for Vocabulary {
    fn from(f: VocabFile) -> Self {
        Vocabulary::from_words(f.words)
    }
}

impl From<Vocabulary> for VocabFile {
    fn from(v: Vocabulary) -> Self {
        VocabFile { words: v.words }
    }
}

impl Vocabulary {
    /// Builds from corpus words in id order (ids start at 3). Duplicates are dropped.
    pub fn from_words(words: Vec<String>) -> Self {
        let mut vocab = Vocabulary {
            words: Vec::with_capacity(words.len()),
            word_to_id: HashMap::with_capacity(words.len()),
        };
        for w in words {
            if !vocab.word_to_id.contains_key(&w) {
                let id = (RESERVED.len() + vocab.words.len()) as u32;
                vocab.word_to_id.insert(w.clone(), id);
                vocab.words.push(w);
            }
        }
        vocab
    }

    /// Total id space including reserved ids.
    pub fn len(&self) -> usize {
        RESERVED.len() + self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> u32 {
        self.word_to_id
            .get(&word.to_lowercase())
            .copied()
            .unwrap_or(UNK_ID)
    }

    pub fn contains(&self, word: &str) -> bool {
        self.word_to_id.contains_key(&word.to_lowercase())
    }

    pub fn word(&self, id: u32) -> Option<&str> {
        let id = id as usize;
        if id < RESERVED.len() {
            Some(RESERVED[id])
        } else {
            self.words.get(id - RESERVED.len()).map(String::as_str)
        }
    }

    /// Corpus words (excluding reserved entries) in id order.
    pub fn words(&self) -> &[String] {
        &self.words
    }
}

/// Vocabulary from lowercased train-split tokens occurring at least `min_freq` times.
///
/// Ids follow first occurrence in the train split so the layout is deterministic.
pub fn build_vocabulary(corpus: &Corpus, min_freq: usize) -> Result<Vocabulary> {
    if min_freq == 0 {
        return Err(Error::Invalid("min_freq must be >= 1".into()));
    }
    if corpus.dialogues_in(Split::Train).next().is_none() {
        return Err(Error::Invalid("corpus has no train dialogues".into()));
    }
    let mut order: Vec<String> = Vec::new();
    let mut counts: HashMap<String, usize> = HashMap::new();
    for d in corpus.dialogues_in(Split::Train) {
        for t in &d.turns {
            for tok in &t.tokens {
                let w = tok.to_lowercase();
                let c = counts.entry(w.clone()).or_insert(0);
                if *c == 0 {
                    order.push(w);
                }
                *c += 1;
            }
        }
    }
    Ok(Vocabulary::from_words(
        order.into_iter().filter(|w| counts[w] >= min_freq).collect(),
    ))
}

/// A padded batch of encoded turns, row-major `n × width`.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedBatch {
    pub n: usize,
    pub width: usize,
    pub token_ids: Vec<u32>,
    pub mask: Vec<u8>,
    pub slot_targets: Vec<i32>,
    pub intent_targets: Vec<usize>,
    pub domain_targets: Vec<usize>,
}

impl EncodedBatch {
    pub fn row_len(&self, i: usize) -> usize {
        self.mask[i * self.width..(i + 1) * self.width]
            .iter()
            .filter(|&&m| m == 1)
            .count()
    }

    /// Positions that are scored for slot filling: real tokens other than CLS.
    pub fn token_positions(&self) -> Vec<bool> {
        (0..self.n * self.width)
            .map(|p| self.mask[p] == 1 && p % self.width != 0)
            .collect()
    }

    /// A copy padded with extra PAD columns on the right.
    pub fn with_extra_padding(&self, extra: usize) -> EncodedBatch {
        let w = self.width + extra;
        let mut out = EncodedBatch {
            n: self.n,
            width: w,
            token_ids: vec![PAD_ID; self.n * w],
            mask: vec![0; self.n * w],
            slot_targets: vec![IGNORE_INDEX; self.n * w],
            intent_targets: self.intent_targets.clone(),
            domain_targets: self.domain_targets.clone(),
        };
        for i in 0..self.n {
            for j in 0..self.width {
                out.token_ids[i * w + j] = self.token_ids[i * self.width + j];
                out.mask[i * w + j] = self.mask[i * self.width + j];
                out.slot_targets[i * w + j] = self.slot_targets[i * self.width + j];
            }
        }
        out
    }
}

/// Encodes turns into a batch: CLS prepended, truncated to `max_len - 1`
/// tokens, PAD-filled to the longest row.
pub fn encode_batch(
    samples: &[Sample<'_>],
    vocab: &Vocabulary,
    catalog: &LabelCatalog,
    max_len: usize,
) -> Result<EncodedBatch> {
    if samples.is_empty() {
        return Err(Error::Invalid("cannot encode an empty batch".into()));
    }
    if max_len < 2 {
        return Err(Error::Invalid(format!("max_len must be >= 2, got {max_len}")));
    }
    let lens: Vec<usize> = samples
        .iter()
        .map(|s| s.turn.tokens.len().min(max_len - 1))
        .collect();
    let width = 1 + lens.iter().copied().max().unwrap_or(0);
    let n = samples.len();
    let mut batch = EncodedBatch {
        n,
        width,
        token_ids: vec![PAD_ID; n * width],
        mask: vec![0; n * width],
        slot_targets: vec![IGNORE_INDEX; n * width],
        intent_targets: Vec::with_capacity(n),
        domain_targets: Vec::with_capacity(n),
    };
    for (i, (s, &len)) in samples.iter().zip(&lens).enumerate() {
        if s.turn.intent_id >= catalog.k_id() || s.domain_id >= catalog.k_dc() {
            return Err(Error::Label {
                context: format!("batch row {i}"),
                message: "label id outside catalog".into(),
            });
        }
        let row = i * width;
        batch.token_ids[row] = CLS_ID;
        batch.mask[row] = 1;
        for j in 0..len {
            batch.token_ids[row + 1 + j] = vocab.id(&s.turn.tokens[j]);
            batch.mask[row + 1 + j] = 1;
            let tag = s.turn.slot_tag_ids[j];
            if tag >= catalog.k_sf() {
                return Err(Error::Label {
                    context: format!("batch row {i}"),
                    message: format!("slot id {tag} outside catalog"),
                });
            }
            batch.slot_targets[row + 1 + j] = tag as i32;
        }
        batch.intent_targets.push(s.turn.intent_id);
        batch.domain_targets.push(s.domain_id);
    }
    Ok(batch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Dialogue, Turn};
    use std::collections::BTreeMap;

    fn corpus(train: &[&[&str]], dev: &[&[&str]]) -> Corpus {
        let catalog = LabelCatalog::new(vec!["O".into()], vec!["i".into()], vec!["d".into()]).unwrap();
        let mut dialogues = Vec::new();
        let mut split_of = BTreeMap::new();
        for (split, turns) in [(Split::Train, train), (Split::Dev, dev)] {
            for (k, toks) in turns.iter().enumerate() {
                let id = format!("{split}-{k}");
                split_of.insert(id.clone(), split);
                dialogues.push(Dialogue {
                    id,
                    turns: vec![Turn {
                        tokens: toks.iter().map(|s| s.to_string()).collect(),
                        slot_tag_ids: vec![0; toks.len()],
                        intent_id: 0,
                    }],
                    domain_id: 0,
                    source: "t".into(),
                });
            }
        }
        Corpus::new(catalog, dialogues, split_of).unwrap()
    }

    #[test]
    fn min_freq_threshold() {
        let c = corpus(&[&["a", "a", "b"]], &[]);
        let v = build_vocabulary(&c, 2).unwrap();
        assert!(v.contains("a"));
        assert!(!v.contains("b"));
    }

    #[test]
    fn reserved_layout() {
        let c = corpus(&[&["Hello"]], &[]);
        let v = build_vocabulary(&c, 1).unwrap();
        assert_eq!(v.id("hello"), 3);
        assert_eq!(v.id("HELLO"), 3);
        assert_eq!(v.word(2), Some("[CLS]"));
    }

    #[test]
    fn dev_words_are_unknown() {
        let c = corpus(&[&["a"]], &[&["zebra"]]);
        let v = build_vocabulary(&c, 1).unwrap();
        assert_eq!(v.id("zebra"), UNK_ID);
        assert_eq!(v.len(), 4);
    }

    #[test]
    fn layout_and_padding() {
        let c = corpus(&[&["w1", "w2", "w3"], &["a", "b"], &["a", "b", "c", "d"]], &[]);
        let v = build_vocabulary(&c, 1).unwrap();
        let s = c.samples(Split::Train);
        let b = encode_batch(&s[..1], &v, &c.catalog, 512).unwrap();
        assert_eq!(b.token_ids, vec![CLS_ID, 3, 4, 5]);
        assert_eq!(b.mask, vec![1, 1, 1, 1]);
        assert_eq!(b.slot_targets, vec![IGNORE_INDEX, 0, 0, 0]);
        let b = encode_batch(&s[1..], &v, &c.catalog, 512).unwrap();
        assert_eq!(b.width, 5);
        assert_eq!(b.row_len(0), 3);
        assert_eq!(b.row_len(1), 5);
    }

    #[test]
    fn truncation_bound() {
        let long: Vec<String> = (0..600).map(|i| format!("w{i}")).collect();
        let refs: Vec<&str> = long.iter().map(String::as_str).collect();
        let c = corpus(&[&refs], &[]);
        let v = build_vocabulary(&c, 1).unwrap();
        let b = encode_batch(&c.samples(Split::Train), &v, &c.catalog, 512).unwrap();
        assert_eq!(b.width, 512);
        assert_eq!(b.row_len(0), 512);
    }

    #[test]
    fn empty_batch_is_an_error() {
        let c = corpus(&[&["a"]], &[]);
        let v = build_vocabulary(&c, 1).unwrap();
        assert!(encode_batch(&[], &v, &c.catalog, 8).is_err());
    }
}
