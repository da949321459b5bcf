//! Multi-level multi-teacher knowledge distillation for multi-turn NLU.
//!
//! Three task teachers (intent detection, slot filling, domain classification)
//! are fine-tuned independently, then distilled jointly into one student per
//! task through KD, supervised, similarity, triplet-relation and
//! teacher-prediction losses.

pub mod cli;
pub mod config;
pub mod corpus;
pub mod distill;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod sweep;
pub mod synth;
pub mod task;
pub mod teacher;
pub mod vocab;

pub use corpus::{load_corpus, merge_corpora, write_corpus, Corpus, Dialogue, LabelCatalog, Split, Turn};
pub use distill::{distill_student, DistillHyper, LossBreakdown, LossConfig, LossKind, LossSet};
pub use encoder::{Checkpoint, Encoder, EncoderConfig};
pub use error::{Error, Result};
pub use eval::{accuracy, evaluate, token_micro_f1, F1Mode, MetricReport};
pub use synth::{generate_synthetic, SyntheticSpec};
pub use task::Task;
pub use teacher::{finetune_teacher, teacher_signals, train_probe_heads, TeacherEnsemble, TeacherSignals, TrainHyper};
