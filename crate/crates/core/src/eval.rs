//! Accuracy, token micro-F1 and JSON metric reports.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Split};
use crate::encoder::{Checkpoint, Encoder};
use crate::error::{Error, Result};
use crate::teacher::encode_indices;
use crate::vocab::EncodedBatch;
use crate::Task;

const EVAL_BATCH: usize = 32;

/// Which classes enter the micro-averaged F1 sums.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum F1Mode {
    #[default]
    AllClasses,
    /// The outside tag contributes no true positives; its confusions still
    /// count against the slot classes involved.
    ExcludeO,
}

impl F1Mode {
    pub fn name(self) -> &'static str {
        match self {
            F1Mode::AllClasses => "all_classes",
            F1Mode::ExcludeO => "exclude_o",
        }
    }
}

impl fmt::Display for F1Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for F1Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "all_classes" | "all" => Ok(F1Mode::AllClasses),
            "exclude_o" => Ok(F1Mode::ExcludeO),
            other => Err(Error::Config(format!("unknown F1 mode '{other}' (expected all-classes|exclude-o)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ClassTally {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

/// Fraction of positions where `pred == gold`.
pub fn accuracy(pred: &[usize], gold: &[usize]) -> Result<f64> {
    if pred.len() != gold.len() {
        return Err(Error::Shape(format!("{} predictions for {} gold labels", pred.len(), gold.len())));
    }
    if gold.is_empty() {
        return Err(Error::Invalid("accuracy of an empty set".into()));
    }
    let hits = pred.iter().zip(gold).filter(|(p, g)| p == g).count();
    Ok(hits as f64 / gold.len() as f64)
}

/// Per-class TP/FP/FN over masked positions; every class, including the outside tag, is tallied.
pub fn tally(pred: &[usize], gold: &[usize], mask: &[bool], classes: usize) -> Result<Vec<ClassTally>> {
    if pred.len() != gold.len() || mask.len() != gold.len() {
        return Err(Error::Shape(format!(
            "pred {}, gold {}, mask {} lengths differ",
            pred.len(),
            gold.len(),
            mask.len()
        )));
    }
    let mut out = vec![ClassTally::default(); classes];
    let mut scored = 0;
    for ((&p, &g), &m) in pred.iter().zip(gold).zip(mask) {
        if !m {
            continue;
        }
        if p >= classes || g >= classes {
            return Err(Error::Label {
                context: "metric tally".into(),
                message: format!("label {} outside {classes} classes", p.max(g)),
            });
        }
        scored += 1;
        if p == g {
            out[g].tp += 1;
        } else {
            out[p].fp += 1;
            out[g].fn_ += 1;
        }
    }
    if scored == 0 {
        return Err(Error::Invalid("no scoreable positions".into()));
    }
    Ok(out)
}

/// Micro-averaged F1 from tallies. With nothing to score in exclude-O mode
/// (every position O on both sides) the prediction is perfect and 1 is returned.
pub fn micro_f1(tallies: &[ClassTally], mode: F1Mode, outside: usize) -> f64 {
    let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
    for (c, t) in tallies.iter().enumerate() {
        if mode == F1Mode::ExcludeO && c == outside {
            continue;
        }
        tp += t.tp;
        fp += t.fp;
        fn_ += t.fn_;
    }
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        1.0
    } else {
        (2 * tp) as f64 / denom as f64
    }
}

pub fn token_micro_f1(
    pred: &[usize],
    gold: &[usize],
    mask: &[bool],
    classes: usize,
    mode: F1Mode,
    outside: usize,
) -> Result<f64> {
    Ok(micro_f1(&tally(pred, gold, mask, classes)?, mode, outside))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub task: Task,
    pub split: Split,
    pub metric: String,
    /// F1 mode for slot filling; absent for accuracy.
    pub mode: Option<F1Mode>,
    pub value: f64,
    /// Scored samples (sentence tasks) or tokens (slot filling).
    pub n: u64,
    pub per_class: BTreeMap<String, ClassTally>,
    pub checkpoint: Option<String>,
    pub corpus: Option<String>,
    pub seed: Option<u64>,
    pub config_hash: Option<String>,
}

impl MetricReport {
    /// The metric value recomputed from the stored tallies.
    pub fn recompute(&self, outside_label: &str) -> f64 {
        let names: Vec<&String> = self.per_class.keys().collect();
        let tallies: Vec<ClassTally> = self.per_class.values().copied().collect();
        let outside = names.iter().position(|n| *n == outside_label).unwrap_or(usize::MAX);
        match self.mode {
            Some(mode) => micro_f1(&tallies, mode, outside),
            None => {
                let hits: u64 = tallies.iter().map(|t| t.tp).sum();
                hits as f64 / self.n as f64
            }
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Argmax predictions for every logit row of `task` (rows as in the forward output).
pub fn predict(encoder: &Encoder, batch: &EncodedBatch, task: Task) -> Result<Vec<usize>> {
    let out = encoder.infer(batch, Some(task))?;
    Ok(out.logits.chunks(out.classes).map(argmax).collect())
}

/// Scores a checkpoint's `task` head on one corpus split.
pub fn evaluate(ckpt: &Checkpoint, corpus: &Corpus, split: Split, task: Task, mode: F1Mode) -> Result<MetricReport> {
    if ckpt.catalog != corpus.catalog {
        return Err(Error::CatalogMismatch(
            "checkpoint label catalog differs from corpus catalog".into(),
        ));
    }
    if !ckpt.encoder.has_head(task) {
        return Err(Error::Invalid(format!("checkpoint has no {task} head")));
    }
    let samples = corpus.samples(split);
    if samples.is_empty() {
        return Err(Error::Invalid(format!("{} split is empty", split.name())));
    }
    let classes = corpus.catalog.num_classes(task);
    let (mut pred, mut gold, mut mask) = (Vec::new(), Vec::new(), Vec::new());
    let idx: Vec<usize> = (0..samples.len()).collect();
    for chunk in idx.chunks(EVAL_BATCH) {
        let batch = encode_indices(&samples, chunk, &ckpt.vocab, corpus, ckpt.encoder.config.max_len)?;
        pred.extend(predict(&ckpt.encoder, &batch, task)?);
        match task {
            Task::Sf => {
                gold.extend(batch.slot_targets.iter().map(|&t| t.max(0) as usize));
                mask.extend(batch.token_positions());
            }
            Task::Id => {
                gold.extend(batch.intent_targets.iter().copied());
                mask.extend(std::iter::repeat_n(true, batch.n));
            }
            Task::Dc => {
                gold.extend(batch.domain_targets.iter().copied());
                mask.extend(std::iter::repeat_n(true, batch.n));
            }
        }
    }
    let tallies = tally(&pred, &gold, &mask, classes)?;
    let n = mask.iter().filter(|&&m| m).count() as u64;
    let (metric, mode, value) = if task.is_token_level() {
        ("micro_f1", Some(mode), micro_f1(&tallies, mode, corpus.catalog.outside_id()))
    } else {
        let hits: u64 = tallies.iter().map(|t| t.tp).sum();
        ("accuracy", None, hits as f64 / n as f64)
    };
    let per_class = corpus
        .catalog
        .labels(task)
        .iter()
        .cloned()
        .zip(tallies)
        .collect();
    Ok(MetricReport {
        task,
        split,
        metric: metric.into(),
        mode,
        value,
        n,
        per_class,
        checkpoint: None,
        corpus: None,
        seed: None,
        config_hash: None,
    })
}
