//! Run configuration: defaults, JSON file, flag overrides.
//!
//! Precedence is flags > file > defaults. Unknown keys in a file are errors.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::distill::{DistillHyper, LossConfig, LossSet, VoteDistance};
use crate::encoder::{AdamWConfig, EncoderConfig};
use crate::error::{Error, Result};
use crate::eval::F1Mode;
use crate::teacher::TrainHyper;
use crate::Task;

/// Encoder shape without the vocabulary size, which is fixed by the training data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelShape {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_hidden: usize,
    pub d_ff: usize,
    pub dropout: f64,
    pub init_std: f64,
    pub embed_init_std: f64,
}

impl ModelShape {
    fn from_config(c: &EncoderConfig) -> Self {
        ModelShape {
            n_layers: c.n_layers,
            n_heads: c.n_heads,
            d_hidden: c.d_hidden,
            d_ff: c.d_ff,
            dropout: c.dropout,
            init_std: c.init_std,
            embed_init_std: c.embed_init_std,
        }
    }

    pub fn desk_teacher() -> Self {
        Self::from_config(&EncoderConfig::desk_teacher(1))
    }

    pub fn desk_student() -> Self {
        Self::from_config(&EncoderConfig::desk_student(1))
    }

    /// Encoder config with a placeholder vocabulary size of 1.
    pub fn encoder_config(&self, max_len: usize) -> EncoderConfig {
        EncoderConfig {
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            d_hidden: self.d_hidden,
            d_ff: self.d_ff,
            dropout: self.dropout,
            max_len,
            vocab_size: 1,
            init_std: self.init_std,
            embed_init_std: self.embed_init_std,
        }
    }
}

impl Default for ModelShape {
    fn default() -> Self {
        Self::desk_student()
    }
}

/// Every tunable of a run, with all defaults materialized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub task: Option<Task>,
    pub corpus: Option<PathBuf>,
    pub teachers: Vec<PathBuf>,
    pub seed: u64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub warmup_fraction: f64,
    pub teacher_epochs: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub min_delta: f64,
    pub early_stopping: bool,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub max_tokens: usize,
    pub losses: LossSet,
    pub margin: f64,
    pub p_norm: u32,
    pub temperature: f64,
    pub vote_distance: VoteDistance,
    pub f1_mode: F1Mode,
    pub teacher_model: ModelShape,
    pub student_model: ModelShape,
}

impl Default for RunConfig {
    fn default() -> Self {
        let adamw = AdamWConfig::default();
        let loss = LossConfig::default();
        let distill = DistillHyper::default();
        let teacher = TrainHyper::default();
        RunConfig {
            task: None,
            corpus: None,
            teachers: Vec::new(),
            seed: 0,
            learning_rate: teacher.lr,
            batch_size: teacher.batch_size,
            warmup_fraction: teacher.warmup_fraction,
            teacher_epochs: teacher.epochs,
            max_epochs: distill.max_epochs,
            patience: distill.patience,
            min_delta: distill.min_delta,
            early_stopping: distill.early_stopping,
            weight_decay: adamw.weight_decay,
            beta1: adamw.beta1,
            beta2: adamw.beta2,
            adam_eps: adamw.eps,
            max_tokens: 512,
            losses: loss.enabled,
            margin: loss.margin,
            p_norm: loss.p_norm,
            temperature: loss.temperature,
            vote_distance: loss.vote_distance,
            f1_mode: F1Mode::default(),
            teacher_model: ModelShape::desk_teacher(),
            student_model: ModelShape::desk_student(),
        }
    }
}

/// Values given on the command line; `None` leaves the file or default value.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub task: Option<Task>,
    pub corpus: Option<PathBuf>,
    pub teachers: Option<Vec<PathBuf>>,
    pub seed: Option<u64>,
    pub learning_rate: Option<f64>,
    pub batch_size: Option<usize>,
    pub warmup_fraction: Option<f64>,
    pub teacher_epochs: Option<usize>,
    pub max_epochs: Option<usize>,
    pub patience: Option<usize>,
    pub early_stopping: Option<bool>,
    pub weight_decay: Option<f64>,
    pub max_tokens: Option<usize>,
    pub losses: Option<LossSet>,
    pub margin: Option<f64>,
    pub temperature: Option<f64>,
    pub f1_mode: Option<F1Mode>,
}

macro_rules! apply {
    ($cfg:ident, $ov:ident, $($field:ident),*) => {
        $(if let Some(v) = $ov.$field.clone() { $cfg.$field = v; })*
    };
}

impl RunConfig {
    /// Parses a JSON config; absent keys take defaults, unknown keys are rejected.
    pub fn from_json(text: &str, context: &str) -> Result<Self> {
        if text.trim().is_empty() {
            return Ok(RunConfig::default());
        }
        serde_json::from_str(text).map_err(|e| Error::Config(format!("{context}: {e}")))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text, &path.display().to_string())
    }

    pub fn apply(&mut self, ov: &Overrides) {
        if let Some(t) = ov.task {
            self.task = Some(t);
        }
        if let Some(c) = &ov.corpus {
            self.corpus = Some(c.clone());
        }
        apply!(
            self,
            ov,
            teachers,
            seed,
            learning_rate,
            batch_size,
            warmup_fraction,
            teacher_epochs,
            max_epochs,
            patience,
            early_stopping,
            weight_decay,
            max_tokens,
            losses,
            margin,
            temperature,
            f1_mode
        );
    }

    pub fn validate(&self) -> Result<()> {
        self.teacher_hyper().validate()?;
        self.distill_hyper().validate()?;
        self.loss_config().validate()?;
        self.teacher_encoder().validate()?;
        self.student_encoder().validate()?;
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return Err(Error::Config("betas must be in [0, 1) and adam_eps > 0".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config(format!("weight_decay must be >= 0, got {}", self.weight_decay)));
        }
        Ok(())
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn teacher_hyper(&self) -> TrainHyper {
        TrainHyper {
            epochs: self.teacher_epochs,
            batch_size: self.batch_size,
            lr: self.learning_rate,
            warmup_fraction: self.warmup_fraction,
            adamw: self.adamw(),
        }
    }

    pub fn distill_hyper(&self) -> DistillHyper {
        DistillHyper {
            max_epochs: self.max_epochs,
            patience: self.patience,
            min_delta: self.min_delta,
            early_stopping: self.early_stopping,
            batch_size: self.batch_size,
            lr: self.learning_rate,
            warmup_fraction: self.warmup_fraction,
            adamw: self.adamw(),
        }
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            enabled: self.losses,
            margin: self.margin,
            p_norm: self.p_norm,
            temperature: self.temperature,
            vote_distance: self.vote_distance,
        }
    }

    pub fn teacher_encoder(&self) -> EncoderConfig {
        self.teacher_model.encoder_config(self.max_tokens)
    }

    pub fn student_encoder(&self) -> EncoderConfig {
        self.student_model.encoder_config(self.max_tokens)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Hex SHA-256 of the compact JSON form.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }
}

/// Defaults, then the optional file, then flag overrides; the result is validated.
pub fn resolve_config(file: Option<&Path>, overrides: &Overrides) -> Result<RunConfig> {
    let mut cfg = match file {
        Some(p) => RunConfig::read(p)?,
        None => RunConfig::default(),
    };
    cfg.apply(overrides);
    cfg.validate()?;
    Ok(cfg)
}
