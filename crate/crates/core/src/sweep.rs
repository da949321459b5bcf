//! Ablation grids over teacher subsets and loss combinations.

use serde::{Deserialize, Serialize};

use crate::distill::{LossKind, LossSet};
use crate::encoder::Checkpoint;
use crate::error::{Error, Result};
use crate::teacher::TeacherEnsemble;
use crate::Task;

/// The seven non-empty teacher subsets, singles first.
pub fn all_teacher_subsets() -> Vec<Vec<Task>> {
    use Task::*;
    vec![
        vec![Id],
        vec![Sf],
        vec![Dc],
        vec![Id, Sf],
        vec![Id, Dc],
        vec![Sf, Dc],
        vec![Id, Sf, Dc],
    ]
}

/// Grid file contents. Cells are enumerated task-major, then teacher subset, then loss set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepGrid {
    pub tasks: Vec<Task>,
    pub teacher_subsets: Vec<Vec<Task>>,
    pub loss_sets: Vec<LossSet>,
}

impl Default for SweepGrid {
    fn default() -> Self {
        SweepGrid {
            tasks: Task::ALL.to_vec(),
            teacher_subsets: all_teacher_subsets(),
            loss_sets: vec![LossSet::best()],
        }
    }
}

impl SweepGrid {
    pub fn read(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Every loss combination that contains at least one component.
    pub fn all_loss_sets() -> Vec<LossSet> {
        (1u8..32)
            .map(|bits| {
                LossKind::ALL
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| bits & (1 << i) != 0)
                    .map(|(_, &k)| k)
                    .collect()
            })
            .collect()
    }
}

/// One distillation run of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub index: usize,
    pub task: Task,
    pub teachers: Vec<Task>,
    pub losses: LossSet,
    /// REL was requested but removed because the cell has exactly two teachers.
    pub rel_disabled: bool,
    pub seed: u64,
}

impl SweepCell {
    pub fn name(&self) -> String {
        let teachers: Vec<&str> = self.teachers.iter().map(|t| t.name()).collect();
        let losses: Vec<&str> = self.losses.iter().map(LossKind::name).collect();
        format!(
            "{:03}-{}-{}-{}",
            self.index,
            self.task,
            teachers.join("+"),
            losses.join("+")
        )
    }
}

/// Expands the grid; cell `i` gets seed `base_seed + i`.
pub fn enumerate_cells(grid: &SweepGrid, base_seed: u64) -> Result<Vec<SweepCell>> {
    if grid.tasks.is_empty() || grid.teacher_subsets.is_empty() || grid.loss_sets.is_empty() {
        return Err(Error::Config("sweep grid has an empty axis".into()));
    }
    let mut cells = Vec::new();
    for &task in &grid.tasks {
        for subset in &grid.teacher_subsets {
            let mut teachers = subset.clone();
            teachers.sort();
            teachers.dedup();
            if teachers.is_empty() || teachers.len() != subset.len() {
                return Err(Error::Config(format!("teacher subset {subset:?} is empty or repeats a task")));
            }
            for &requested in &grid.loss_sets {
                let rel_disabled = teachers.len() == 2 && requested.contains(LossKind::Rel);
                let losses = if rel_disabled { requested.without(LossKind::Rel) } else { requested };
                if losses.is_empty() {
                    return Err(Error::Config(format!(
                        "loss set '{requested}' is empty once REL is removed for a two-teacher cell"
                    )));
                }
                let index = cells.len();
                cells.push(SweepCell {
                    index,
                    task,
                    teachers: teachers.clone(),
                    losses,
                    rel_disabled,
                    seed: base_seed + index as u64,
                });
            }
        }
    }
    Ok(cells)
}

/// The ensemble of the given checkpoints whose own task is in `tasks`, in task order.
pub fn select_teachers(pool: &[Checkpoint], tasks: &[Task]) -> Result<TeacherEnsemble> {
    let mut picked = Vec::new();
    for &t in tasks {
        let found: Vec<&Checkpoint> = pool.iter().filter(|c| c.task == Some(t)).collect();
        match found.as_slice() {
            [one] => picked.push((*one).clone()),
            [] => return Err(Error::Config(format!("no {t} teacher among the supplied checkpoints"))),
            _ => return Err(Error::Config(format!("more than one {t} teacher supplied"))),
        }
    }
    TeacherEnsemble::from_checkpoints(picked)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn teacher_grid_has_seven_cells_per_task() {
        let cells = enumerate_cells(&SweepGrid::default(), 100).unwrap();
        assert_eq!(cells.len(), 21);
        for (i, c) in cells.iter().enumerate() {
            assert_eq!(c.index, i);
            assert_eq!(c.seed, 100 + i as u64);
        }
        for c in &cells {
            assert_eq!(c.rel_disabled, c.teachers.len() == 2);
            assert_eq!(c.losses.contains(LossKind::Rel), c.teachers.len() != 2);
        }
        assert_eq!(cells[6].teachers, Task::ALL.to_vec());
        assert_eq!(cells[6].losses, LossSet::best());
    }

    #[test]
    fn all_loss_sets_are_distinct_and_nonempty() {
        let sets = SweepGrid::all_loss_sets();
        assert_eq!(sets.len(), 31);
        let uniq: std::collections::BTreeSet<String> = sets.iter().map(|s| s.to_string()).collect();
        assert_eq!(uniq.len(), 31);
    }

    #[test]
    fn rel_only_two_teacher_cell_is_rejected() {
        let grid = SweepGrid {
            tasks: vec![Task::Id],
            teacher_subsets: vec![vec![Task::Id, Task::Sf]],
            loss_sets: vec!["rel".parse().unwrap()],
        };
        assert!(enumerate_cells(&grid, 0).is_err());
    }

    #[test]
    fn grid_file_rejects_unknown_keys() {
        let err = serde_json::from_str::<SweepGrid>(r#"{"taks": ["ID"]}"#).unwrap_err();
        assert!(err.to_string().contains("taks"));
        let g: SweepGrid = serde_json::from_str(r#"{"tasks": ["sf"], "loss_sets": [["kd", "tp"]]}"#).unwrap();
        assert_eq!(g.tasks, vec![Task::Sf]);
        assert_eq!(g.teacher_subsets.len(), 7);
    }
}
