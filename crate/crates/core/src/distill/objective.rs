//! Loss selection, the unweighted combined objective and its per-component breakdown.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::losses::{loss_kd, loss_rel, loss_sce, loss_sim, loss_tp};
use super::triplet::{TripletIndex, VoteDistance};
use crate::error::{Error, Result};
use crate::teacher::TeacherSignals;
use crate::vocab::EncodedBatch;
use crate::Task;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Kd,
    Sce,
    Sim,
    Rel,
    Tp,
}

impl LossKind {
    pub const ALL: [LossKind; 5] = [LossKind::Kd, LossKind::Sce, LossKind::Sim, LossKind::Rel, LossKind::Tp];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Kd => "kd",
            LossKind::Sce => "sce",
            LossKind::Sim => "sim",
            LossKind::Rel => "rel",
            LossKind::Tp => "tp",
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossKind::ALL
            .into_iter()
            .find(|k| k.name() == s.trim().to_ascii_lowercase())
            .ok_or_else(|| Error::Config(format!("unknown loss '{s}' (expected kd|sce|sim|rel|tp)")))
    }
}

/// Set of enabled loss components.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct LossSet(u8);

impl LossSet {
    pub fn empty() -> Self {
        LossSet(0)
    }

    pub fn all() -> Self {
        LossKind::ALL.into_iter().collect()
    }

    /// `{KD, SCE, SIM, REL}`: the best-performing combination in the loss ablation.
    pub fn best() -> Self {
        [LossKind::Kd, LossKind::Sce, LossKind::Sim, LossKind::Rel].into_iter().collect()
    }

    fn bit(kind: LossKind) -> u8 {
        1 << (kind as u8)
    }

    pub fn contains(self, kind: LossKind) -> bool {
        self.0 & Self::bit(kind) != 0
    }

    pub fn with(self, kind: LossKind) -> Self {
        LossSet(self.0 | Self::bit(kind))
    }

    pub fn without(self, kind: LossKind) -> Self {
        LossSet(self.0 & !Self::bit(kind))
    }

    pub fn iter(self) -> impl Iterator<Item = LossKind> {
        LossKind::ALL.into_iter().filter(move |k| self.contains(*k))
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }
}

impl FromIterator<LossKind> for LossSet {
    fn from_iter<I: IntoIterator<Item = LossKind>>(iter: I) -> Self {
        iter.into_iter().fold(LossSet::empty(), LossSet::with)
    }
}

impl fmt::Display for LossSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = self.iter().map(LossKind::name).collect();
        f.write_str(&names.join(","))
    }
}

impl FromStr for LossSet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        s.split(',')
            .filter(|p| !p.trim().is_empty())
            .map(LossKind::from_str)
            .collect()
    }
}

impl Serialize for LossSet {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_seq(self.iter())
    }
}

impl<'de> Deserialize<'de> for LossSet {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let kinds = Vec::<LossKind>::deserialize(d)?;
        Ok(kinds.into_iter().collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub enabled: LossSet,
    pub margin: f64,
    pub p_norm: u32,
    pub temperature: f64,
    pub vote_distance: VoteDistance,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            enabled: LossSet::best(),
            margin: 0.2,
            p_norm: 2,
            temperature: 1.0,
            vote_distance: VoteDistance::SquaredEuclidean,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.enabled.is_empty() {
            return Err(Error::Config("no loss components enabled".into()));
        }
        if !(self.margin > 0.0) {
            return Err(Error::Config(format!("margin must be > 0, got {}", self.margin)));
        }
        if self.p_norm == 0 {
            return Err(Error::Config("p_norm must be >= 1".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config(format!("temperature must be > 0, got {}", self.temperature)));
        }
        Ok(())
    }
}

/// Per-component values; `None` marks a component that was not computed.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossParts {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kd: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sce: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sim: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rel: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tp: Option<f64>,
}

impl LossParts {
    pub fn get(&self, kind: LossKind) -> Option<f64> {
        match kind {
            LossKind::Kd => self.kd,
            LossKind::Sce => self.sce,
            LossKind::Sim => self.sim,
            LossKind::Rel => self.rel,
            LossKind::Tp => self.tp,
        }
    }

    pub fn set(&mut self, kind: LossKind, v: Option<f64>) {
        let slot = match kind {
            LossKind::Kd => &mut self.kd,
            LossKind::Sce => &mut self.sce,
            LossKind::Sim => &mut self.sim,
            LossKind::Rel => &mut self.rel,
            LossKind::Tp => &mut self.tp,
        };
        *slot = v;
    }
}

/// Enabled component values and their unweighted sum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    #[serde(flatten)]
    pub parts: LossParts,
    pub total: f64,
}

impl LossBreakdown {
    /// Component-wise mean over the inputs where each component is present;
    /// the total is the sum of those means.
    pub fn mean(items: &[LossBreakdown]) -> Option<LossBreakdown> {
        if items.is_empty() {
            return None;
        }
        let mut parts = LossParts::default();
        for kind in LossKind::ALL {
            let vals: Vec<f64> = items.iter().filter_map(|b| b.parts.get(kind)).collect();
            if !vals.is_empty() {
                parts.set(kind, Some(vals.iter().sum::<f64>() / vals.len() as f64));
            }
        }
        let total = LossKind::ALL.into_iter().filter_map(|k| parts.get(k)).sum();
        Some(LossBreakdown { parts, total })
    }
}

/// Sums the enabled components without weights.
pub fn total_loss(parts: &LossParts, enabled: LossSet) -> Result<LossBreakdown> {
    let mut out = LossParts::default();
    let mut total = 0.0;
    for kind in LossKind::ALL {
        if enabled.contains(kind) {
            let v = parts
                .get(kind)
                .ok_or_else(|| Error::Invalid(format!("enabled component {kind} was not computed")))?;
            if !v.is_finite() {
                return Err(Error::Divergence {
                    step: 0,
                    what: format!("{kind} loss is {v}"),
                });
            }
            out.set(kind, Some(v));
            total += v;
        }
    }
    Ok(LossBreakdown { parts: out, total })
}

/// Per-row targets for `task`: one row per sample, or one per position for slot filling.
pub fn task_targets(batch: &EncodedBatch, task: Task) -> Vec<i32> {
    match task {
        Task::Sf => batch.slot_targets.clone(),
        Task::Id => batch.intent_targets.iter().map(|&t| t as i32).collect(),
        Task::Dc => batch.domain_targets.iter().map(|&t| t as i32).collect(),
    }
}

/// Rows that take part in reductions.
pub fn row_mask(batch: &EncodedBatch, task: Task) -> Vec<bool> {
    if task.is_token_level() {
        batch.token_positions()
    } else {
        vec![true; batch.n]
    }
}

/// Student outputs and supervision needed to evaluate the objective on one batch.
#[derive(Debug, Clone, Copy)]
pub struct ObjectiveInputs<'a> {
    pub signals: &'a TeacherSignals,
    pub student_logits: &'a [f64],
    pub student_pooled: &'a [f64],
    pub d_student: usize,
    pub targets: &'a [i32],
    pub mask: &'a [bool],
    /// `None` when the batch is too small to form triplets.
    pub triplets: Option<&'a [TripletIndex]>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveOutput {
    pub breakdown: LossBreakdown,
    pub dlogits: Vec<f64>,
    pub dpooled: Option<Vec<f64>>,
}

/// Evaluates every enabled component and the gradients of their sum.
///
/// REL is skipped on batches without triplets.
pub fn evaluate_objective(cfg: &LossConfig, inputs: ObjectiveInputs<'_>) -> Result<ObjectiveOutput> {
    let mut enabled = cfg.enabled;
    if inputs.triplets.is_none() {
        enabled = enabled.without(LossKind::Rel);
    }
    let classes = inputs.signals.classes;
    let mut parts = LossParts::default();
    let mut dlogits = vec![0.0; inputs.student_logits.len()];
    let mut dpooled = None;
    let mut add = |g: &[f64]| {
        for (a, b) in dlogits.iter_mut().zip(g) {
            *a += b;
        }
    };
    for kind in enabled.iter() {
        let lv = match kind {
            LossKind::Kd => loss_kd(inputs.signals, inputs.student_logits, inputs.mask)?,
            LossKind::Sce => loss_sce(inputs.student_logits, inputs.targets, classes)?,
            LossKind::Sim => loss_sim(inputs.signals, inputs.student_logits, inputs.mask)?,
            LossKind::Tp => loss_tp(inputs.signals, inputs.student_logits, inputs.mask)?,
            LossKind::Rel => {
                let lv = loss_rel(
                    inputs.student_pooled,
                    inputs.d_student,
                    inputs.triplets.expect("checked above"),
                    cfg.margin,
                    cfg.p_norm,
                )?;
                parts.set(kind, Some(lv.value));
                dpooled = Some(lv.grad);
                continue;
            }
        };
        parts.set(kind, Some(lv.value));
        add(&lv.grad);
    }
    let breakdown = total_loss(&parts, enabled)?;
    Ok(ObjectiveOutput {
        breakdown,
        dlogits,
        dpooled,
    })
}
