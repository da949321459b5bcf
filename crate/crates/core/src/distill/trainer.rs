//! Student training loop: cached teacher signals, voted triplets, AdamW and early stopping on dev loss.

use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::objective::{evaluate_objective, row_mask, task_targets, LossBreakdown, LossConfig, LossKind, ObjectiveInputs};
use super::triplet::{generate_triplets, HiddenStates, TripletIndex};
use crate::corpus::{Corpus, Sample, Split};
use crate::encoder::{adamw_step, seeded_rng, AdamWConfig, Checkpoint, Encoder, EncoderConfig, LrSchedule, Mode, OptimizerState, TrainRng};
use crate::error::{Error, Result};
use crate::teacher::{encode_indices, write_jsonl, SignalCache, TeacherEnsemble, TeacherSignals};
use crate::Task;

pub const HISTORY_FILE: &str = "history.jsonl";

/// Mixed into the seed for the stream that draws dev-split triplets.
const DEV_STREAM: u64 = 0x6465_765f_7472_6970;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillHyper {
    pub max_epochs: usize,
    pub patience: usize,
    pub min_delta: f64,
    pub early_stopping: bool,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_fraction: f64,
    pub adamw: AdamWConfig,
}

impl Default for DistillHyper {
    fn default() -> Self {
        DistillHyper {
            max_epochs: 100,
            patience: 10,
            min_delta: 1e-6,
            early_stopping: true,
            batch_size: 32,
            lr: 5e-5,
            warmup_fraction: 0.1,
            adamw: AdamWConfig::default(),
        }
    }
}

impl DistillHyper {
    pub fn validate(&self) -> Result<()> {
        if self.max_epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("max_epochs and batch_size must be >= 1".into()));
        }
        if self.early_stopping && self.patience == 0 {
            return Err(Error::Config("patience must be >= 1 when early stopping is on".into()));
        }
        if !(self.lr > 0.0) || !(0.0..=1.0).contains(&self.warmup_fraction) {
            return Err(Error::Config(format!(
                "lr must be > 0 and warmup_fraction in [0, 1] (got {}, {})",
                self.lr, self.warmup_fraction
            )));
        }
        Ok(())
    }
}

/// Outcome of feeding one epoch's monitored loss to [`EarlyStopping`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Improved,
    Stalled,
    Stop,
}

/// Patience counter on a monitored loss.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    pub min_delta: f64,
    best: f64,
    best_epoch: usize,
    stalled: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize, min_delta: f64) -> Self {
        EarlyStopping {
            patience,
            min_delta,
            best: f64::INFINITY,
            best_epoch: 0,
            stalled: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, loss: f64) -> Verdict {
        if loss < self.best - self.min_delta {
            self.best = loss;
            self.best_epoch = epoch;
            self.stalled = 0;
            Verdict::Improved
        } else {
            self.stalled += 1;
            if self.stalled >= self.patience {
                Verdict::Stop
            } else {
                Verdict::Stalled
            }
        }
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }
}

/// One line of the distillation history.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistoryRecord {
    pub epoch: usize,
    pub split: Split,
    #[serde(flatten)]
    pub losses: LossBreakdown,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistillRun {
    pub student: Checkpoint,
    pub history: Vec<HistoryRecord>,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub steps: usize,
}

impl DistillRun {
    /// Writes the student checkpoint and `history.jsonl` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        self.student.save(dir)?;
        write_jsonl(&dir.join(HISTORY_FILE), &self.history)
    }
}

struct Pass<'a> {
    corpus: &'a Corpus,
    samples: &'a [Sample<'a>],
    cache: &'a SignalCache,
    ens: &'a TeacherEnsemble,
    task: Task,
    loss: &'a LossConfig,
    batch_size: usize,
}

fn triplets_for(signals: &TeacherSignals, loss: &LossConfig, rng: &mut TrainRng) -> Result<Option<Vec<TripletIndex>>> {
    if !loss.enabled.contains(LossKind::Rel) || signals.n < 3 {
        return Ok(None);
    }
    let hidden: Vec<HiddenStates<'_>> = signals
        .pooled
        .iter()
        .zip(&signals.hidden_dims)
        .map(|(p, &d)| HiddenStates::new(p, d))
        .collect();
    generate_triplets(&hidden, signals.n, loss.vote_distance, rng).map(Some)
}

fn with_step(e: Error, step: usize) -> Error {
    match e {
        Error::Divergence { what, .. } => Error::Divergence { step, what },
        other => other,
    }
}

impl Pass<'_> {
    /// Mean dev-mode breakdown over the split, in order, without parameter updates.
    fn evaluate(&self, student: &Encoder, rng: &mut TrainRng) -> Result<LossBreakdown> {
        let idx: Vec<usize> = (0..self.samples.len()).collect();
        let mut parts = Vec::new();
        for chunk in idx.chunks(self.batch_size) {
            let batch = encode_indices(self.samples, chunk, self.ens.vocab(), self.corpus, student.config.max_len)?;
            let signals = self.cache.gather(chunk, &batch)?;
            let triplets = triplets_for(&signals, self.loss, rng)?;
            let out = student.infer(&batch, Some(self.task))?;
            let targets = task_targets(&batch, self.task);
            let mask = row_mask(&batch, self.task);
            let res = evaluate_objective(
                self.loss,
                ObjectiveInputs {
                    signals: &signals,
                    student_logits: &out.logits,
                    student_pooled: &out.pooled,
                    d_student: out.d_hidden,
                    targets: &targets,
                    mask: &mask,
                    triplets: triplets.as_deref(),
                },
            )?;
            parts.push(res.breakdown);
        }
        LossBreakdown::mean(&parts).ok_or_else(|| Error::Invalid("empty split".into()))
    }
}

/// Distills the ensemble into a fresh student for `task`.
///
/// Random stream order: student initialization, then per epoch the shuffle,
/// then per batch the triplet draws followed by dropout.
pub fn distill_student(
    student_cfg: &EncoderConfig,
    ens: &TeacherEnsemble,
    corpus: &Corpus,
    task: Task,
    loss: &LossConfig,
    hp: &DistillHyper,
    seed: u64,
) -> Result<DistillRun> {
    hp.validate()?;
    loss.validate()?;
    if ens.catalog() != &corpus.catalog {
        return Err(Error::CatalogMismatch("teacher and corpus label catalogs differ".into()));
    }
    let train = corpus.samples(Split::Train);
    let dev = corpus.samples(Split::Dev);
    if train.is_empty() {
        return Err(Error::Invalid("corpus has an empty train split".into()));
    }
    if hp.early_stopping && dev.is_empty() {
        return Err(Error::Invalid("early stopping needs a non-empty dev split".into()));
    }
    let mut cfg = student_cfg.clone();
    cfg.vocab_size = ens.vocab().len();
    let max_len = cfg.max_len;
    let mut rng = seeded_rng(seed);
    let mut student = Encoder::new(cfg, &mut rng)?;
    student.add_head(task, corpus.catalog.num_classes(task), &mut rng)?;

    let temp = loss.temperature;
    let train_cache = SignalCache::build(ens, corpus, &train, task, temp, hp.batch_size, max_len)?;
    let dev_cache = SignalCache::build(ens, corpus, &dev, task, temp, hp.batch_size, max_len)?;
    let train_pass = Pass {
        corpus,
        samples: &train,
        cache: &train_cache,
        ens,
        task,
        loss,
        batch_size: hp.batch_size,
    };
    let dev_pass = Pass {
        samples: &dev,
        cache: &dev_cache,
        ..train_pass
    };

    let steps_per_epoch = train.len().div_ceil(hp.batch_size);
    let sched = LrSchedule::new(hp.lr, hp.warmup_fraction, steps_per_epoch * hp.max_epochs);
    let mut state = OptimizerState::new(&student.params);
    let mut stopper = EarlyStopping::new(hp.patience, hp.min_delta);
    let mut best_params = None;
    let mut history = Vec::new();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epochs_run = 0;
    for epoch in 1..=hp.max_epochs {
        epochs_run = epoch;
        order.shuffle(&mut rng);
        let mut parts = Vec::with_capacity(steps_per_epoch);
        for chunk in order.chunks(hp.batch_size) {
            let step = state.step + 1;
            let batch = encode_indices(&train, chunk, ens.vocab(), corpus, max_len)?;
            let signals = train_cache.gather(chunk, &batch)?;
            let triplets = triplets_for(&signals, loss, &mut rng)?;
            let (out, tape) = student.forward(&batch, Some(task), Mode::Train, &mut rng)?;
            let targets = task_targets(&batch, task);
            let mask = row_mask(&batch, task);
            let res = evaluate_objective(
                loss,
                ObjectiveInputs {
                    signals: &signals,
                    student_logits: &out.logits,
                    student_pooled: &out.pooled,
                    d_student: out.d_hidden,
                    targets: &targets,
                    mask: &mask,
                    triplets: triplets.as_deref(),
                },
            )
            .map_err(|e| with_step(e, step))?;
            let grads = student.backward(&tape, Some(&res.dlogits), res.dpooled.as_deref())?;
            adamw_step(&mut student.params, &grads, &mut state, &sched, &hp.adamw, None)?;
            parts.push(res.breakdown);
        }
        history.push(HistoryRecord {
            epoch,
            split: Split::Train,
            losses: LossBreakdown::mean(&parts).expect("at least one batch"),
        });
        if dev.is_empty() {
            continue;
        }
        let mut dev_rng = seeded_rng(seed ^ DEV_STREAM);
        let dev_loss = dev_pass.evaluate(&student, &mut dev_rng)?;
        history.push(HistoryRecord {
            epoch,
            split: Split::Dev,
            losses: dev_loss,
        });
        if hp.early_stopping {
            match stopper.observe(epoch, dev_loss.total) {
                Verdict::Improved => best_params = Some(student.params.clone()),
                Verdict::Stalled => {}
                Verdict::Stop => break,
            }
        }
    }
    let best_epoch = if hp.early_stopping { stopper.best_epoch() } else { epochs_run };
    if let Some(p) = best_params {
        student.params = p;
    }
    let vocab = ens.vocab().clone();
    let student = Checkpoint::new(student, corpus.catalog.clone(), vocab, Some(task))?;
    Ok(DistillRun {
        student,
        history,
        epochs_run,
        best_epoch,
        steps: state.step,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(losses: impl Fn(usize) -> f64, patience: usize, max: usize) -> usize {
        let mut s = EarlyStopping::new(patience, 1e-6);
        for epoch in 1..=max {
            if s.observe(epoch, losses(epoch)) == Verdict::Stop {
                return epoch;
            }
        }
        max
    }

    #[test]
    fn strictly_decreasing_never_stops() {
        assert_eq!(run(|e| 10.0 - e as f64 * 0.01, 10, 100), 100);
    }

    #[test]
    fn constant_from_epoch_five_stops_at_fifteen() {
        assert_eq!(run(|e| 10.0 - e.min(5) as f64, 10, 100), 15);
    }

    #[test]
    fn sub_threshold_improvements_count_as_stalls() {
        assert_eq!(run(|e| 1.0 - e as f64 * 1e-8, 3, 100), 4);
    }

    #[test]
    fn best_epoch_tracks_minimum() {
        let mut s = EarlyStopping::new(5, 1e-6);
        for (e, v) in [3.0, 2.0, 2.5, 1.0, 1.5].into_iter().enumerate() {
            s.observe(e + 1, v);
        }
        assert_eq!(s.best_epoch(), 4);
        assert_eq!(s.best(), 1.0);
    }

    #[test]
    fn history_line_omits_disabled_components() {
        let rec = HistoryRecord {
            epoch: 2,
            split: Split::Dev,
            losses: LossBreakdown {
                parts: super::super::objective::LossParts {
                    kd: Some(0.5),
                    sce: Some(0.25),
                    ..Default::default()
                },
                total: 0.75,
            },
        };
        assert_eq!(
            serde_json::to_string(&rec).unwrap(),
            r#"{"epoch":2,"split":"dev","kd":0.5,"sce":0.25,"total":0.75}"#
        );
    }
}
