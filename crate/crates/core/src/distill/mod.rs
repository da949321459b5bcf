//! Distillation losses, voted triplet relations and the student training loop.

pub mod losses;
pub mod objective;
pub mod trainer;
pub mod triplet;

pub use losses::{cosine, kl_teacher_mean, loss_kd, loss_rel, loss_sce, loss_sim, loss_tp, LossValue, EPS};
pub use objective::{
    evaluate_objective, row_mask, task_targets, total_loss, LossBreakdown, LossConfig, LossKind, LossParts, LossSet,
    ObjectiveInputs, ObjectiveOutput,
};
pub use trainer::{distill_student, DistillHyper, DistillRun, EarlyStopping, HistoryRecord, Verdict, HISTORY_FILE};
pub use triplet::{draw_distinct_three, generate_triplets, vote, HiddenStates, TripletIndex, VoteDistance};
