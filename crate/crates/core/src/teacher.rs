//! Task teachers: fine-tuning, cross-task probe heads, the frozen ensemble and its per-batch signals.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Sample, Split};
use crate::distill::losses::loss_sce;
use crate::distill::objective::task_targets;
use crate::encoder::{
    adamw_step, seeded_rng, AdamWConfig, Checkpoint, Encoder, EncoderConfig, Gradients, Mode, OptimizerState,
    ParameterStore, TaskHead,
};
use crate::encoder::{softmax_in_place, LrSchedule};
use crate::error::{Error, Result};
use crate::vocab::{build_vocabulary, encode_batch, EncodedBatch, Vocabulary};
use crate::Task;

pub const TRAIN_LOG_FILE: &str = "train_log.jsonl";

/// Optimizer settings for a supervised fine-tuning run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainHyper {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_fraction: f64,
    pub adamw: AdamWConfig,
}

impl Default for TrainHyper {
    fn default() -> Self {
        TrainHyper {
            epochs: 3,
            batch_size: 32,
            lr: 5e-5,
            warmup_fraction: 0.1,
            adamw: AdamWConfig::default(),
        }
    }
}

impl TrainHyper {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be >= 1".into()));
        }
        if !(self.lr > 0.0) || !(0.0..=1.0).contains(&self.warmup_fraction) {
            return Err(Error::Config(format!(
                "lr must be > 0 and warmup_fraction in [0, 1] (got {}, {})",
                self.lr, self.warmup_fraction
            )));
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, n_train: usize) -> usize {
        n_train.div_ceil(self.batch_size)
    }

    pub fn total_steps(&self, n_train: usize) -> usize {
        self.steps_per_epoch(n_train) * self.epochs
    }
}

/// One line of the fine-tuning sidecar log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub steps: usize,
}

/// A fine-tuned teacher together with its per-epoch log.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherRun {
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochLog>,
    pub steps: usize,
}

impl TeacherRun {
    /// Writes the checkpoint and `train_log.jsonl` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        self.checkpoint.save(dir)?;
        write_jsonl(&dir.join(TRAIN_LOG_FILE), &self.log)
    }
}

pub(crate) fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for r in rows {
        let line = serde_json::to_string(r).expect("record serializes");
        writeln!(file, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

pub(crate) fn encode_indices(
    samples: &[Sample<'_>],
    idx: &[usize],
    vocab: &Vocabulary,
    corpus: &Corpus,
    max_len: usize,
) -> Result<EncodedBatch> {
    let picked: Vec<Sample<'_>> = idx.iter().map(|&i| samples[i]).collect();
    encode_batch(&picked, vocab, &corpus.catalog, max_len)
}

/// Fine-tunes a fresh encoder on one task with cross-entropy and keeps the last-epoch parameters.
///
/// The vocabulary is built from the training split and `cfg.vocab_size` is
/// overwritten to match it.
pub fn finetune_teacher(
    corpus: &Corpus,
    task: Task,
    cfg: &EncoderConfig,
    hp: &TrainHyper,
    seed: u64,
) -> Result<TeacherRun> {
    hp.validate()?;
    let samples = corpus.samples(Split::Train);
    if samples.is_empty() {
        return Err(Error::Invalid("corpus has an empty train split".into()));
    }
    let vocab = build_vocabulary(corpus, 1)?;
    let mut cfg = cfg.clone();
    cfg.vocab_size = vocab.len();
    let mut rng = seeded_rng(seed);
    let mut encoder = Encoder::new(cfg, &mut rng)?;
    encoder.add_head(task, corpus.catalog.num_classes(task), &mut rng)?;

    let sched = LrSchedule::new(hp.lr, hp.warmup_fraction, hp.total_steps(samples.len()));
    let mut state = OptimizerState::new(&encoder.params);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut log = Vec::with_capacity(hp.epochs);
    for epoch in 1..=hp.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(hp.batch_size) {
            let batch = encode_indices(&samples, chunk, &vocab, corpus, encoder.config.max_len)?;
            let (out, tape) = encoder.forward(&batch, Some(task), Mode::Train, &mut rng)?;
            let loss = loss_sce(&out.logits, &task_targets(&batch, task), out.classes)?;
            if !loss.value.is_finite() {
                return Err(Error::Divergence {
                    step: state.step + 1,
                    what: format!("{task} teacher loss is {}", loss.value),
                });
            }
            let grads = encoder.backward(&tape, Some(&loss.grad), None)?;
            adamw_step(&mut encoder.params, &grads, &mut state, &sched, &hp.adamw, None)?;
            sum += loss.value;
            batches += 1;
        }
        log.push(EpochLog {
            epoch,
            train_loss: sum / batches as f64,
            steps: state.step,
        });
    }
    let checkpoint = Checkpoint::new(encoder, corpus.catalog.clone(), vocab, Some(task))?;
    Ok(TeacherRun {
        checkpoint,
        log,
        steps: state.step,
    })
}

/// Eval-mode features feeding a task head: pooled rows for sentence tasks,
/// scored token rows for slot filling.
fn probe_features(
    ckpt: &Checkpoint,
    corpus: &Corpus,
    samples: &[Sample<'_>],
    target: Task,
    batch_size: usize,
) -> Result<(Vec<f64>, Vec<i32>)> {
    let encoder = &ckpt.encoder;
    let d = encoder.config.d_hidden;
    let mut feats = Vec::new();
    let mut targets = Vec::new();
    let idx: Vec<usize> = (0..samples.len()).collect();
    for chunk in idx.chunks(batch_size) {
        let batch = encode_indices(samples, chunk, &ckpt.vocab, corpus, encoder.config.max_len)?;
        let out = encoder.infer(&batch, None)?;
        let t = task_targets(&batch, target);
        if target.is_token_level() {
            for (r, &label) in t.iter().enumerate() {
                if label >= 0 {
                    feats.extend_from_slice(&out.hidden[r * d..(r + 1) * d]);
                    targets.push(label);
                }
            }
        } else {
            feats.extend_from_slice(&out.pooled);
            targets.extend(t);
        }
    }
    Ok((feats, targets))
}

/// Trains a linear head for `target` on the frozen backbone of a teacher.
///
/// The head starts at zero; backbone tensors are never written.
pub fn train_probe_heads(
    ckpt: &Checkpoint,
    corpus: &Corpus,
    target: Task,
    hp: &TrainHyper,
    seed: u64,
) -> Result<Checkpoint> {
    hp.validate()?;
    if ckpt.task == Some(target) {
        return Err(Error::Invalid(format!(
            "{target} is this teacher's own task; its fine-tuned head is authoritative"
        )));
    }
    if ckpt.encoder.has_head(target) {
        return Err(Error::Invalid(format!("checkpoint already carries a {target} head")));
    }
    if ckpt.catalog != corpus.catalog {
        return Err(Error::CatalogMismatch("teacher and corpus label catalogs differ".into()));
    }
    let samples = corpus.samples(Split::Train);
    if samples.is_empty() {
        return Err(Error::Invalid("corpus has an empty train split".into()));
    }
    let d = ckpt.encoder.config.d_hidden;
    let k = corpus.catalog.num_classes(target);
    let (feats, targets) = probe_features(ckpt, corpus, &samples, target, hp.batch_size)?;
    let n = targets.len();

    let mut head = ParameterStore::new();
    head.insert(TaskHead::weight_name(target), vec![d, k], vec![0.0; d * k])?;
    head.insert(TaskHead::bias_name(target), vec![k], vec![0.0; k])?;
    let sched = LrSchedule::new(hp.lr, hp.warmup_fraction, hp.total_steps(n));
    let mut state = OptimizerState::new(&head);
    let mut rng = seeded_rng(seed);
    let mut order: Vec<usize> = (0..n).collect();
    for _ in 0..hp.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(hp.batch_size) {
            let w = &head.tensor(0).data;
            let b = &head.tensor(1).data;
            let mut logits = vec![0.0; chunk.len() * k];
            for (r, &i) in chunk.iter().enumerate() {
                let x = &feats[i * d..(i + 1) * d];
                for c in 0..k {
                    let mut s = b[c] as f64;
                    for (j, xj) in x.iter().enumerate() {
                        s += xj * w[j * k + c] as f64;
                    }
                    logits[r * k + c] = s;
                }
            }
            let t: Vec<i32> = chunk.iter().map(|&i| targets[i]).collect();
            let loss = loss_sce(&logits, &t, k)?;
            let mut grads = Gradients::zeros_like(&head);
            for (r, &i) in chunk.iter().enumerate() {
                let x = &feats[i * d..(i + 1) * d];
                let g = &loss.grad[r * k..(r + 1) * k];
                for (j, xj) in x.iter().enumerate() {
                    for c in 0..k {
                        grads.grads[0][j * k + c] += xj * g[c];
                    }
                }
                for c in 0..k {
                    grads.grads[1][c] += g[c];
                }
            }
            adamw_step(&mut head, &grads, &mut state, &sched, &hp.adamw, None)?;
        }
    }

    let mut params = ckpt.encoder.params.clone();
    for t in head.iter() {
        params.insert(t.name.clone(), t.shape.clone(), t.data.clone())?;
    }
    let mut heads = ckpt.encoder.heads().to_vec();
    heads.push(TaskHead { task: target, classes: k });
    let encoder = Encoder::from_parts(ckpt.encoder.config.clone(), params, heads)?;
    Checkpoint::new(encoder, ckpt.catalog.clone(), ckpt.vocab.clone(), ckpt.task)
}

/// A frozen teacher: its own task and the checkpoint carrying its heads.
#[derive(Debug, Clone, PartialEq)]
pub struct Teacher {
    task: Task,
    checkpoint: Checkpoint,
}

impl Teacher {
    pub fn new(checkpoint: Checkpoint) -> Result<Self> {
        let task = checkpoint
            .task
            .ok_or_else(|| Error::Checkpoint("teacher checkpoint does not record its task".into()))?;
        if !checkpoint.encoder.has_head(task) {
            return Err(Error::Checkpoint(format!("{task} teacher lacks its own {task} head")));
        }
        Ok(Teacher { task, checkpoint })
    }

    pub fn task(&self) -> Task {
        self.task
    }

    pub fn checkpoint(&self) -> &Checkpoint {
        &self.checkpoint
    }

    pub fn encoder(&self) -> &Encoder {
        &self.checkpoint.encoder
    }
}

/// One to three teachers with distinct tasks and a shared vocabulary and label catalog.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherEnsemble {
    members: Vec<Teacher>,
}

impl TeacherEnsemble {
    pub fn new(members: Vec<Teacher>) -> Result<Self> {
        if members.is_empty() || members.len() > 3 {
            return Err(Error::Config(format!(
                "an ensemble holds 1 to 3 teachers, got {}",
                members.len()
            )));
        }
        for (i, m) in members.iter().enumerate() {
            if members[..i].iter().any(|o| o.task == m.task) {
                return Err(Error::Config(format!("duplicate {} teacher in ensemble", m.task)));
            }
            let first = &members[0].checkpoint;
            if m.checkpoint.vocab != first.vocab {
                return Err(Error::Config(format!(
                    "{} teacher vocabulary differs from {} teacher",
                    m.task, members[0].task
                )));
            }
            if m.checkpoint.catalog != first.catalog {
                return Err(Error::CatalogMismatch(format!(
                    "{} teacher label catalog differs from {} teacher",
                    m.task, members[0].task
                )));
            }
        }
        Ok(TeacherEnsemble { members })
    }

    pub fn from_checkpoints(ckpts: Vec<Checkpoint>) -> Result<Self> {
        Self::new(ckpts.into_iter().map(Teacher::new).collect::<Result<_>>()?)
    }

    pub fn load(dirs: &[PathBuf]) -> Result<Self> {
        Self::from_checkpoints(dirs.iter().map(Checkpoint::load).collect::<Result<_>>()?)
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn members(&self) -> &[Teacher] {
        &self.members
    }

    pub fn tasks(&self) -> Vec<Task> {
        self.members.iter().map(|m| m.task).collect()
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.members[0].checkpoint.vocab
    }

    pub fn catalog(&self) -> &crate::corpus::LabelCatalog {
        &self.members[0].checkpoint.catalog
    }

    /// Parameter hashes of every member, in member order.
    pub fn fingerprint(&self) -> Vec<String> {
        self.members.iter().map(|m| m.checkpoint.encoder.params.hash()).collect()
    }

    /// Errors unless every member carries a head for `task`.
    pub fn check_heads(&self, task: Task) -> Result<()> {
        for m in &self.members {
            if !m.encoder().has_head(task) {
                return Err(Error::Checkpoint(format!(
                    "{} teacher has no {task} head (train a probe head first)",
                    m.task
                )));
            }
        }
        Ok(())
    }
}

/// Member checkpoints plus the task they are distilled into.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleDescription {
    pub task: Task,
    pub members: Vec<PathBuf>,
}

impl EnsembleDescription {
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).expect("description serializes");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Loads the members, resolving relative paths against `base`.
    pub fn load(&self, base: impl AsRef<Path>) -> Result<TeacherEnsemble> {
        let dirs: Vec<PathBuf> = self.members.iter().map(|p| base.as_ref().join(p)).collect();
        let ens = TeacherEnsemble::load(&dirs)?;
        ens.check_heads(self.task)?;
        Ok(ens)
    }
}

/// Per-teacher outputs for one batch, aligned with the student's logits for `task`.
///
/// `probs` and `logits` hold one `rows × classes` matrix per teacher, where
/// `rows` is `n` for sentence tasks and `n × width` for slot filling.
/// `pooled[j]` is `n × hidden_dims[j]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherSignals {
    pub task: Task,
    pub n: usize,
    pub width: usize,
    pub rows: usize,
    pub classes: usize,
    pub probs: Vec<Vec<f64>>,
    pub logits: Vec<Vec<f64>>,
    pub pooled: Vec<Vec<f64>>,
    pub hidden_dims: Vec<usize>,
}

fn tempered_probs(logits: &[f64], classes: usize, temperature: f64) -> Vec<f64> {
    let mut p: Vec<f64> = logits.iter().map(|v| v / temperature).collect();
    for row in p.chunks_mut(classes) {
        softmax_in_place(row);
    }
    p
}

/// Logits at padded positions carry no information; they are zeroed so every
/// source of signals agrees bit for bit.
fn clear_padding(logits: &mut [f64], batch: &EncodedBatch, classes: usize) {
    for (r, &m) in batch.mask.iter().enumerate() {
        if m == 0 {
            logits[r * classes..(r + 1) * classes].fill(0.0);
        }
    }
}

/// Runs every teacher in eval mode and returns `P_j = softmax(v_j / τ)`, `v_j` and pooled states.
pub fn teacher_signals(
    ens: &TeacherEnsemble,
    batch: &EncodedBatch,
    task: Task,
    temperature: f64,
) -> Result<TeacherSignals> {
    if !(temperature > 0.0) {
        return Err(Error::Config(format!("temperature must be > 0, got {temperature}")));
    }
    ens.check_heads(task)?;
    let classes = ens.catalog().num_classes(task);
    let rows = if task.is_token_level() { batch.n * batch.width } else { batch.n };
    let mut sig = TeacherSignals {
        task,
        n: batch.n,
        width: batch.width,
        rows,
        classes,
        probs: Vec::with_capacity(ens.len()),
        logits: Vec::with_capacity(ens.len()),
        pooled: Vec::with_capacity(ens.len()),
        hidden_dims: Vec::with_capacity(ens.len()),
    };
    for m in &ens.members {
        let out = m.encoder().infer(batch, Some(task))?;
        let mut logits = out.logits;
        if task.is_token_level() {
            clear_padding(&mut logits, batch, classes);
        }
        sig.probs.push(tempered_probs(&logits, classes, temperature));
        sig.logits.push(logits);
        sig.pooled.push(out.pooled);
        sig.hidden_dims.push(out.d_hidden);
    }
    Ok(sig)
}

#[derive(Debug, Clone, PartialEq)]
struct CachedSample {
    /// `len × classes` for slot filling (CLS included), `classes` otherwise.
    logits: Vec<Vec<f64>>,
    pooled: Vec<Vec<f64>>,
}

/// Teacher outputs precomputed once per sample.
///
/// Teachers are frozen and the encoder ignores padded keys, so assembling a
/// batch from cached rows reproduces [`teacher_signals`] exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct SignalCache {
    task: Task,
    classes: usize,
    temperature: f64,
    hidden_dims: Vec<usize>,
    samples: Vec<CachedSample>,
}

impl SignalCache {
    pub fn build(
        ens: &TeacherEnsemble,
        corpus: &Corpus,
        samples: &[Sample<'_>],
        task: Task,
        temperature: f64,
        batch_size: usize,
        max_len: usize,
    ) -> Result<Self> {
        let mut cached = Vec::with_capacity(samples.len());
        let idx: Vec<usize> = (0..samples.len()).collect();
        let mut hidden_dims = ens.members.iter().map(|m| m.encoder().config.d_hidden).collect();
        for chunk in idx.chunks(batch_size.max(1)) {
            let batch = encode_indices(samples, chunk, ens.vocab(), corpus, max_len)?;
            let sig = teacher_signals(ens, &batch, task, temperature)?;
            hidden_dims = sig.hidden_dims.clone();
            for i in 0..batch.n {
                let len = batch.row_len(i);
                let (lo, hi) = if task.is_token_level() {
                    (i * batch.width * sig.classes, (i * batch.width + len) * sig.classes)
                } else {
                    (i * sig.classes, (i + 1) * sig.classes)
                };
                cached.push(CachedSample {
                    logits: sig.logits.iter().map(|l| l[lo..hi].to_vec()).collect(),
                    pooled: sig
                        .pooled
                        .iter()
                        .zip(&sig.hidden_dims)
                        .map(|(p, &d)| p[i * d..(i + 1) * d].to_vec())
                        .collect(),
                });
            }
        }
        Ok(SignalCache {
            task,
            classes: ens.catalog().num_classes(task),
            temperature,
            hidden_dims,
            samples: cached,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Signals for the samples `idx`, laid out like `batch` (which must encode the same samples).
    pub fn gather(&self, idx: &[usize], batch: &EncodedBatch) -> Result<TeacherSignals> {
        if idx.len() != batch.n {
            return Err(Error::Shape(format!("{} indices for a batch of {}", idx.len(), batch.n)));
        }
        let k = self.classes;
        let n_t = self.hidden_dims.len();
        let rows = if self.task.is_token_level() { batch.n * batch.width } else { batch.n };
        let mut logits = vec![vec![0.0; rows * k]; n_t];
        let mut pooled: Vec<Vec<f64>> = self.hidden_dims.iter().map(|&d| vec![0.0; batch.n * d]).collect();
        for (b, &i) in idx.iter().enumerate() {
            let s = self
                .samples
                .get(i)
                .ok_or_else(|| Error::Shape(format!("sample {i} not in signal cache")))?;
            for j in 0..n_t {
                let src = &s.logits[j];
                let off = if self.task.is_token_level() { b * batch.width * k } else { b * k };
                if self.task.is_token_level() && src.len() != batch.row_len(b) * k {
                    return Err(Error::Shape(format!("cached sample {i} length disagrees with batch row {b}")));
                }
                logits[j][off..off + src.len()].copy_from_slice(src);
                let d = self.hidden_dims[j];
                pooled[j][b * d..(b + 1) * d].copy_from_slice(&s.pooled[j]);
            }
        }
        let probs = logits.iter().map(|l| tempered_probs(l, k, self.temperature)).collect();
        Ok(TeacherSignals {
            task: self.task,
            n: batch.n,
            width: batch.width,
            rows,
            classes: k,
            probs,
            logits,
            pooled,
            hidden_dims: self.hidden_dims.clone(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tempered_softmax_matches_direct_formula() {
        let p = tempered_probs(&[2.0, 0.0], 2, 2.0);
        assert!((p[0] - 0.731_058_578_630_004_9).abs() < 1e-12);
        assert!((p[1] - 0.268_941_421_369_995_1).abs() < 1e-12);
    }

    #[test]
    fn huge_temperature_is_nearly_uniform() {
        let p = tempered_probs(&[50.0, -20.0, 3.0, 0.5], 4, 1e6);
        for v in p {
            assert!((v - 0.25).abs() < 1e-3);
        }
    }

    #[test]
    fn default_hyper_matches_table() {
        let h = TrainHyper::default();
        assert_eq!((h.epochs, h.batch_size), (3, 32));
        assert_eq!(h.lr, 5e-5);
        assert_eq!(h.warmup_fraction, 0.1);
        assert_eq!(h.total_steps(100), 12);
    }
}
