//! Central finite-difference check of the distillation gradients through the encoder.
//!
//! Each loss is evaluated alone on a small eval-mode student against random
//! teacher signals; analytic parameter gradients are compared with
//! `(L(w + ε) − L(w − ε)) / Δ`, where `Δ` is the actual difference of the
//! two f32-rounded perturbed weights.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::corpus::Split;
use crate::distill::{
    evaluate_objective, generate_triplets, row_mask, task_targets, HiddenStates, LossConfig, LossKind, LossSet,
    ObjectiveInputs, TripletIndex,
};
use crate::encoder::{seeded_rng, softmax_in_place, Encoder, EncoderConfig, Gradients, Mode, TaskHead};
use crate::error::{Error, Result};
use crate::synth::{generate_synthetic, SyntheticSpec};
use crate::teacher::TeacherSignals;
use crate::vocab::{build_vocabulary, encode_batch, EncodedBatch};
use crate::Task;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckConfig {
    pub seed: u64,
    pub epsilon: f64,
    pub tolerance: f64,
    /// Random coordinates checked per loss and task.
    pub coordinates: usize,
    pub batch_size: usize,
    pub d_hidden: usize,
    pub teacher_dims: Vec<usize>,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            seed: 0,
            epsilon: 1e-3,
            tolerance: 1e-4,
            coordinates: 120,
            batch_size: 8,
            d_hidden: 16,
            teacher_dims: vec![16, 32, 24],
        }
    }
}

/// Agreement for one loss on one task's head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossCheck {
    pub loss: LossKind,
    pub task: Task,
    pub coordinates: usize,
    /// Relative error with the denominator floored at [`GRAD_FLOOR`].
    pub max_rel_err: f64,
    /// Plain `|a − n| / max(|a|, |n|)`.
    pub max_raw_rel_err: f64,
    pub max_abs_err: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub checks: Vec<LossCheck>,
    /// Max |∇total − Σ ∇component| over all parameters, per task.
    pub additivity_err: f64,
    pub tolerance: f64,
}

impl GradcheckReport {
    /// Worst relative error per loss across tasks.
    pub fn per_loss(&self) -> Vec<(LossKind, f64)> {
        LossKind::ALL
            .iter()
            .map(|&k| {
                let worst = self
                    .checks
                    .iter()
                    .filter(|c| c.loss == k)
                    .map(|c| c.max_rel_err)
                    .fold(0.0, f64::max);
                (k, worst)
            })
            .collect()
    }

    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.max_rel_err < self.tolerance) && self.additivity_err < 1e-9
    }
}

/// Gradient magnitude below which the O(ε²) truncation term of the central
/// difference, not the analytic gradient, dominates the disagreement.
pub const GRAD_FLOOR: f64 = 1e-3;

/// `|a − n| / max(|a|, |n|, GRAD_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_FLOOR)
}

/// `|a − n| / max(|a|, |n|)`, zero when both vanish below 1e-10.
pub fn raw_relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale < 1e-10 {
        0.0
    } else {
        (analytic - numeric).abs() / scale
    }
}

fn student_config(cfg: &GradcheckConfig, vocab_size: usize) -> EncoderConfig {
    EncoderConfig {
        n_layers: 1,
        n_heads: 2,
        d_hidden: cfg.d_hidden,
        d_ff: 2 * cfg.d_hidden,
        dropout: 0.0,
        max_len: 64,
        vocab_size,
        init_std: 0.1,
        embed_init_std: 1.0,
    }
}

fn random_signals<R: Rng>(batch: &EncodedBatch, task: Task, classes: usize, dims: &[usize], rng: &mut R) -> TeacherSignals {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let rows = if task.is_token_level() { batch.n * batch.width } else { batch.n };
    let mut logits = Vec::new();
    let mut probs = Vec::new();
    let mut pooled = Vec::new();
    for &d in dims {
        let l: Vec<f64> = (0..rows * classes).map(|_| 2.0 * normal.sample(rng)).collect();
        let mut p = l.clone();
        for row in p.chunks_mut(classes) {
            softmax_in_place(row);
        }
        logits.push(l);
        probs.push(p);
        pooled.push((0..batch.n * d).map(|_| normal.sample(rng)).collect());
    }
    TeacherSignals {
        task,
        n: batch.n,
        width: batch.width,
        rows,
        classes,
        probs,
        logits,
        pooled,
        hidden_dims: dims.to_vec(),
    }
}

struct Problem {
    batch: EncodedBatch,
    signals: TeacherSignals,
    triplets: Vec<TripletIndex>,
    task: Task,
}

impl Problem {
    fn objective(&self, loss: LossSet) -> LossConfig {
        LossConfig {
            enabled: loss,
            ..LossConfig::default()
        }
    }

    fn value(&self, student: &Encoder, loss: LossSet) -> Result<f64> {
        let out = student.infer(&self.batch, Some(self.task))?;
        let res = self.evaluate(&out.logits, &out.pooled, out.d_hidden, loss)?;
        Ok(res.breakdown.total)
    }

    fn evaluate(
        &self,
        logits: &[f64],
        pooled: &[f64],
        d: usize,
        loss: LossSet,
    ) -> Result<crate::distill::ObjectiveOutput> {
        let targets = task_targets(&self.batch, self.task);
        let mask = row_mask(&self.batch, self.task);
        evaluate_objective(
            &self.objective(loss),
            ObjectiveInputs {
                signals: &self.signals,
                student_logits: logits,
                student_pooled: pooled,
                d_student: d,
                targets: &targets,
                mask: &mask,
                triplets: Some(&self.triplets),
            },
        )
    }

    fn gradient(&self, student: &Encoder, loss: LossSet) -> Result<Gradients> {
        let mut unused = seeded_rng(0);
        let (out, tape) = student.forward(&self.batch, Some(self.task), Mode::Eval, &mut unused)?;
        let res = self.evaluate(&out.logits, &out.pooled, out.d_hidden, loss)?;
        student.backward(&tape, Some(&res.dlogits), res.dpooled.as_deref())
    }
}

fn check_loss<R: Rng>(
    problem: &Problem,
    student: &Encoder,
    kind: LossKind,
    cfg: &GradcheckConfig,
    rng: &mut R,
) -> Result<LossCheck> {
    let set = LossSet::empty().with(kind);
    let grads = problem.gradient(student, set)?;
    let sizes: Vec<usize> = student.params.iter().map(|t| t.numel()).collect();
    let reached: Vec<(usize, usize)> = sizes
        .iter()
        .enumerate()
        .flat_map(|(t, &len)| (0..len).map(move |i| (t, i)))
        .filter(|&(t, i)| grads.get(t)[i] != 0.0)
        .collect();
    if reached.is_empty() {
        return Err(Error::Invalid(format!("{} has no nonzero gradient", kind.name())));
    }
    let mut probe = student.clone();
    let (mut max_rel, mut max_raw, mut max_abs) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..cfg.coordinates {
        let (t, i) = reached[rng.random_range(0..reached.len())];
        let w = student.params.tensor(t).data[i];
        let plus = (w as f64 + cfg.epsilon) as f32;
        let minus = (w as f64 - cfg.epsilon) as f32;
        probe.params.tensor_mut(t).data[i] = plus;
        let lp = problem.value(&probe, set)?;
        probe.params.tensor_mut(t).data[i] = minus;
        let lm = problem.value(&probe, set)?;
        probe.params.tensor_mut(t).data[i] = w;
        let numeric = (lp - lm) / (plus as f64 - minus as f64);
        let analytic = grads.get(t)[i];
        max_rel = max_rel.max(relative_error(analytic, numeric));
        max_raw = max_raw.max(raw_relative_error(analytic, numeric));
        max_abs = max_abs.max((analytic - numeric).abs());
    }
    Ok(LossCheck {
        loss: kind,
        task: problem.task,
        coordinates: cfg.coordinates,
        max_rel_err: max_rel,
        max_raw_rel_err: max_raw,
        max_abs_err: max_abs,
    })
}

/// Redraws the head at scale `1/√d` so logits are not clustered near zero,
/// where cosine similarity is sharply curved.
fn scatter_head<R: Rng>(student: &mut Encoder, task: Task, rng: &mut R) {
    let std = 1.0 / (student.config.d_hidden as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("positive std");
    for name in [TaskHead::weight_name(task), TaskHead::bias_name(task)] {
        let id = student.params.id(&name).expect("head was just added");
        for v in student.params.tensor_mut(id).data.iter_mut() {
            *v = normal.sample(rng) as f32;
        }
    }
}

/// Runs every loss on an intent (sentence) head and, for the logit losses, a slot (token) head.
pub fn run_gradcheck(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    let corpus = generate_synthetic(&SyntheticSpec {
        n_dialogues: 10,
        seed: cfg.seed,
        ..SyntheticSpec::reference()
    })?;
    let vocab = build_vocabulary(&corpus, 1)?;
    let samples = corpus.samples(Split::Train);
    let picked = &samples[..cfg.batch_size.min(samples.len())];
    let batch = encode_batch(picked, &vocab, &corpus.catalog, 64)?;
    let mut rng = seeded_rng(cfg.seed);
    let mut checks = Vec::new();
    let mut additivity_err = 0.0f64;
    for task in [Task::Id, Task::Sf] {
        let mut student = Encoder::new(student_config(cfg, vocab.len()), &mut rng)?;
        student.add_head(task, corpus.catalog.num_classes(task), &mut rng)?;
        scatter_head(&mut student, task, &mut rng);
        let signals = random_signals(&batch, task, corpus.catalog.num_classes(task), &cfg.teacher_dims, &mut rng);
        let hidden: Vec<HiddenStates<'_>> = signals
            .pooled
            .iter()
            .zip(&signals.hidden_dims)
            .map(|(p, &d)| HiddenStates::new(p, d))
            .collect();
        let triplets = generate_triplets(&hidden, batch.n, Default::default(), &mut rng)?;
        let problem = Problem {
            batch: batch.clone(),
            signals,
            triplets,
            task,
        };
        for kind in LossKind::ALL {
            if task == Task::Sf && kind == LossKind::Rel {
                continue;
            }
            checks.push(check_loss(&problem, &student, kind, cfg, &mut rng)?);
        }
        let total = problem.gradient(&student, LossSet::all())?;
        let mut sum = Gradients::zeros_like(&student.params);
        for kind in LossKind::ALL {
            sum.add_assign(&problem.gradient(&student, LossSet::empty().with(kind))?);
        }
        for (a, b) in total.grads.iter().flatten().zip(sum.grads.iter().flatten()) {
            additivity_err = additivity_err.max((a - b).abs());
        }
    }
    Ok(GradcheckReport {
        checks,
        additivity_err,
        tolerance: cfg.tolerance,
    })
}
