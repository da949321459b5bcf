//! Command-line entry point: argument parsing, run directories and manifests.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::config::{resolve_config, Overrides, RunConfig};
use crate::corpus::{load_corpus, write_corpus, Corpus, Split};
use crate::distill::{distill_student, DistillRun, LossKind, LossSet};
use crate::encoder::Checkpoint;
use crate::error::{Error, Result};
use crate::eval::{evaluate, F1Mode, MetricReport};
use crate::gradcheck::{run_gradcheck, GradcheckConfig};
use crate::sweep::{enumerate_cells, select_teachers, SweepGrid};
use crate::synth::{generate_synthetic, SyntheticSpec};
use crate::teacher::{finetune_teacher, train_probe_heads, TeacherEnsemble};
use crate::Task;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CONFIG_FILE: &str = "config.json";

const DEFAULTS: &str = "Defaults: learning rate 5e-5, batch size 32, warmup 10%, teacher epochs 3, \
distillation max epochs 100, early-stopping patience 10, triplet margin 0.2, triplet norm 2, \
weight decay 1e-2, AdamW betas 0.9/0.999, max tokens 512, losses kd,sce,sim,rel.";

#[derive(Debug, Parser)]
#[command(name = "mlkd", version, about = "Multi-level multi-teacher distillation for multi-turn NLU", after_help = DEFAULTS)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic multi-turn corpus.
    GenData(GenDataArgs),
    /// Fine-tune one task teacher from scratch.
    TrainTeacher(TrainTeacherArgs),
    /// Train linear probe heads on frozen teachers.
    TrainProbes(TrainProbesArgs),
    /// Distill a teacher ensemble into a student for one task.
    Distill(DistillArgs),
    /// Score a checkpoint on a corpus split.
    Eval(EvalArgs),
    /// Run a grid of distillations over teacher subsets and loss sets.
    Sweep(SweepArgs),
    /// Finite-difference check of every loss gradient.
    Gradcheck(GradcheckArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenData(_) => "gen-data",
            Command::TrainTeacher(_) => "train-teacher",
            Command::TrainProbes(_) => "train-probes",
            Command::Distill(_) => "distill",
            Command::Eval(_) => "eval",
            Command::Sweep(_) => "sweep",
            Command::Gradcheck(_) => "gradcheck",
        }
    }

    fn common(&self) -> &CommonArgs {
        match self {
            Command::GenData(a) => &a.common,
            Command::TrainTeacher(a) => &a.common,
            Command::TrainProbes(a) => &a.common,
            Command::Distill(a) => &a.common,
            Command::Eval(a) => &a.common,
            Command::Sweep(a) => &a.common,
            Command::Gradcheck(a) => &a.common,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// Random seed
    #[arg(long)]
    pub seed: Option<u64>,
    /// Experiment config file (JSON); flags override it
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Exact output directory instead of <runs-root>/<timestamp>-<command>
    #[arg(long)]
    pub run_dir: Option<PathBuf>,
    /// Parent of timestamped run directories
    #[arg(long, default_value = "runs")]
    pub runs_root: PathBuf,
}

#[derive(Debug, Clone, Default, Args)]
pub struct HyperArgs {
    /// Peak learning rate [default: 5e-5]
    #[arg(long)]
    pub lr: Option<f64>,
    /// Batch size [default: 32]
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Warmup fraction of total steps [default: 0.1]
    #[arg(long)]
    pub warmup: Option<f64>,
    /// Teacher fine-tuning epochs [default: 3]
    #[arg(long)]
    pub teacher_epochs: Option<usize>,
    /// Distillation epoch cap [default: 100]
    #[arg(long)]
    pub max_epochs: Option<usize>,
    /// Early-stopping patience in epochs [default: 10]
    #[arg(long)]
    pub patience: Option<usize>,
    /// Train for exactly --max-epochs epochs
    #[arg(long)]
    pub no_early_stopping: bool,
    /// AdamW weight decay [default: 1e-2]
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// Maximum tokens per turn including CLS [default: 512]
    #[arg(long)]
    pub max_tokens: Option<usize>,
    /// Triplet margin [default: 0.2]
    #[arg(long)]
    pub margin: Option<f64>,
    /// Teacher softmax temperature [default: 1]
    #[arg(long)]
    pub temperature: Option<f64>,
}

impl HyperArgs {
    fn overrides(&self) -> Overrides {
        Overrides {
            learning_rate: self.lr,
            batch_size: self.batch_size,
            warmup_fraction: self.warmup,
            teacher_epochs: self.teacher_epochs,
            max_epochs: self.max_epochs,
            patience: self.patience,
            early_stopping: self.no_early_stopping.then_some(false),
            weight_decay: self.weight_decay,
            max_tokens: self.max_tokens,
            margin: self.margin,
            temperature: self.temperature,
            ..Overrides::default()
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct GenDataArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Generator spec file (JSON); flags override it
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub n_dialogues: Option<usize>,
    #[arg(long)]
    pub n_domains: Option<usize>,
    #[arg(long)]
    pub intents_per_domain: Option<usize>,
    #[arg(long)]
    pub slot_tags_per_domain: Option<usize>,
    #[arg(long)]
    pub min_turns: Option<usize>,
    #[arg(long)]
    pub max_turns: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct TrainTeacherArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub hyper: HyperArgs,
    /// Teacher task: id, sf or dc
    #[arg(long)]
    pub task: Option<Task>,
    /// Corpus JSON
    #[arg(long)]
    pub corpus: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct TrainProbesArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub hyper: HyperArgs,
    /// Target task(s) for the probe heads, comma separated
    #[arg(long, value_delimiter = ',', required = true)]
    pub target: Vec<Task>,
    /// Teacher checkpoint directories, comma separated
    #[arg(long, value_delimiter = ',')]
    pub teachers: Option<Vec<PathBuf>>,
    /// Corpus JSON
    #[arg(long)]
    pub corpus: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct DistillArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub hyper: HyperArgs,
    /// Student task: id, sf or dc
    #[arg(long)]
    pub task: Option<Task>,
    /// Teacher checkpoint directories, comma separated
    #[arg(long, value_delimiter = ',')]
    pub teachers: Option<Vec<PathBuf>>,
    /// Enabled losses from kd,sce,sim,rel,tp [default: kd,sce,sim,rel]
    #[arg(long)]
    pub losses: Option<LossSet>,
    /// Corpus JSON
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Slot-filling F1 mode for the reports: all-classes or exclude-o [default: all-classes]
    #[arg(long)]
    pub mode: Option<F1Mode>,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Checkpoint directory
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Corpus JSON
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// train, dev or test
    #[arg(long, default_value = "test")]
    pub split: Split,
    /// Head to score [default: the checkpoint's own task]
    #[arg(long)]
    pub task: Option<Task>,
    /// Slot-filling F1 mode: all-classes or exclude-o [default: all-classes]
    #[arg(long)]
    pub mode: Option<F1Mode>,
}

#[derive(Debug, Clone, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub hyper: HyperArgs,
    /// Grid file (JSON: tasks, teacher_subsets, loss_sets) [default: every teacher subset for every task]
    #[arg(long)]
    pub grid: Option<PathBuf>,
    /// Probed teacher checkpoint directories, comma separated
    #[arg(long, value_delimiter = ',')]
    pub teachers: Option<Vec<PathBuf>>,
    /// Corpus JSON
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Slot-filling F1 mode for the reports: all-classes or exclude-o [default: all-classes]
    #[arg(long)]
    pub mode: Option<F1Mode>,
}

#[derive(Debug, Clone, Args)]
pub struct GradcheckArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Random coordinates per loss and head
    #[arg(long)]
    pub coordinates: Option<usize>,
}

/// Written atomically to `manifest.json` when a run ends.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub config: Value,
    pub seed: u64,
    /// Files produced, relative to the run directory.
    pub artifacts: Vec<String>,
    pub tool_version: String,
    pub started_at: String,
    pub duration_secs: f64,
    pub status: String,
    pub error: Option<String>,
}

impl RunManifest {
    pub fn read(run_dir: impl AsRef<Path>) -> Result<Self> {
        let path = run_dir.as_ref().join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            context: path.display().to_string(),
            message: e.to_string(),
        })
    }
}

/// Writes via a temporary sibling and a rename.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, contents).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let text = serde_json::to_string_pretty(value).expect("value serializes");
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn list_files(root: &Path, dir: &Path, out: &mut Vec<String>) -> Result<()> {
    let mut entries: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    entries.sort();
    for p in entries {
        if p.is_dir() {
            list_files(root, &p, out)?;
        } else {
            let rel = p.strip_prefix(root).expect("under root");
            out.push(rel.to_string_lossy().replace('\\', "/"));
        }
    }
    Ok(())
}

fn create_run_dir(command: &str, common: &CommonArgs) -> Result<PathBuf> {
    let dir = match &common.run_dir {
        Some(d) => d.clone(),
        None => {
            let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%S%.3fZ");
            let base = common.runs_root.join(format!("{stamp}-{command}"));
            let mut dir = base.clone();
            let mut k = 1;
            while dir.exists() {
                dir = PathBuf::from(format!("{}-{k}", base.display()));
                k += 1;
            }
            dir
        }
    };
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(dir)
}

/// What a command hands back for the manifest.
struct Outcome {
    config: Value,
    seed: u64,
}

fn base_config(common: &CommonArgs, mut overrides: Overrides) -> Result<RunConfig> {
    overrides.seed = overrides.seed.or(common.seed);
    resolve_config(common.config.as_deref(), &overrides)
}

fn required<T: Clone>(value: &Option<T>, what: &str) -> Result<T> {
    value
        .clone()
        .ok_or_else(|| Error::Config(format!("missing {what} (flag or config key)")))
}

fn corpus_of(cfg: &RunConfig) -> Result<(Corpus, String)> {
    let path = required(&cfg.corpus, "corpus")?;
    Ok((load_corpus(&path)?, path.display().to_string()))
}

fn report_with(mut report: MetricReport, checkpoint: &str, corpus: &str, cfg: &RunConfig) -> MetricReport {
    report.checkpoint = Some(checkpoint.to_string());
    report.corpus = Some(corpus.to_string());
    report.seed = Some(cfg.seed);
    report.config_hash = Some(cfg.hash());
    report
}

fn write_report(dir: &Path, report: &MetricReport) -> Result<()> {
    let path = dir
        .join("reports")
        .join(format!("{}-{}.json", report.task.name().to_lowercase(), report.split.name()));
    write_json(&path, report)
}

/// Errors when `--config` is given to a command that takes no run config.
fn no_run_config(common: &CommonArgs, command: &str, instead: &str) -> Result<()> {
    match &common.config {
        Some(p) => Err(Error::Config(format!(
            "{command} takes no run config ({} given); use {instead}",
            p.display()
        ))),
        None => Ok(()),
    }
}

fn gen_data(a: &GenDataArgs, dir: &Path) -> Result<Outcome> {
    no_run_config(&a.common, "gen-data", "--spec for generator settings")?;
    let mut spec = match &a.spec {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => SyntheticSpec::reference(),
    };
    let set = |field: &mut usize, v: Option<usize>| {
        if let Some(v) = v {
            *field = v;
        }
    };
    set(&mut spec.n_dialogues, a.n_dialogues);
    set(&mut spec.n_domains, a.n_domains);
    set(&mut spec.intents_per_domain, a.intents_per_domain);
    set(&mut spec.slot_tags_per_domain, a.slot_tags_per_domain);
    set(&mut spec.min_turns, a.min_turns);
    set(&mut spec.max_turns, a.max_turns);
    if let Some(s) = a.common.seed {
        spec.seed = s;
    }
    let corpus = generate_synthetic(&spec)?;
    write_corpus(&corpus, dir.join("corpus.json"))?;
    log::info!("wrote {} dialogues to {}", corpus.dialogues.len(), dir.join("corpus.json").display());
    Ok(Outcome {
        config: serde_json::to_value(&spec).expect("spec serializes"),
        seed: spec.seed,
    })
}

fn train_teacher(a: &TrainTeacherArgs, dir: &Path) -> Result<Outcome> {
    let cfg = base_config(
        &a.common,
        Overrides {
            task: a.task,
            corpus: a.corpus.clone(),
            ..a.hyper.overrides()
        },
    )?;
    write_json(&dir.join(CONFIG_FILE), &cfg)?;
    let task = required(&cfg.task, "task")?;
    let (corpus, corpus_name) = corpus_of(&cfg)?;
    let run = finetune_teacher(&corpus, task, &cfg.teacher_encoder(), &cfg.teacher_hyper(), cfg.seed)?;
    let out = dir.join("teacher");
    run.save(&out)?;
    for split in [Split::Train, Split::Dev] {
        let report = evaluate(&run.checkpoint, &corpus, split, task, cfg.f1_mode)?;
        log::info!("{task} teacher {} {} = {:.4}", split.name(), report.metric, report.value);
        write_report(dir, &report_with(report, "teacher", &corpus_name, &cfg))?;
    }
    Ok(Outcome {
        config: serde_json::to_value(&cfg).expect("config serializes"),
        seed: cfg.seed,
    })
}

fn train_probes(a: &TrainProbesArgs, dir: &Path) -> Result<Outcome> {
    let cfg = base_config(
        &a.common,
        Overrides {
            teachers: a.teachers.clone(),
            corpus: a.corpus.clone(),
            ..a.hyper.overrides()
        },
    )?;
    write_json(&dir.join(CONFIG_FILE), &cfg)?;
    if cfg.teachers.is_empty() {
        return Err(Error::Config("missing teachers (flag or config key)".into()));
    }
    let (corpus, _) = corpus_of(&cfg)?;
    for path in &cfg.teachers {
        let mut ckpt = Checkpoint::load(path)?;
        let own = ckpt.task.ok_or_else(|| Error::Checkpoint(format!("{} records no task", path.display())))?;
        for &target in &a.target {
            if target == own || ckpt.encoder.has_head(target) {
                continue;
            }
            ckpt = train_probe_heads(&ckpt, &corpus, target, &cfg.teacher_hyper(), cfg.seed)?;
            log::info!("{own} teacher: trained {target} probe");
        }
        ckpt.save(dir.join("probed").join(own.name().to_lowercase()))?;
    }
    Ok(Outcome {
        config: serde_json::to_value(&cfg).expect("config serializes"),
        seed: cfg.seed,
    })
}

fn load_teachers(paths: &[PathBuf]) -> Result<Vec<Checkpoint>> {
    if paths.is_empty() {
        return Err(Error::Config("missing teachers (flag or config key)".into()));
    }
    paths.iter().map(Checkpoint::load).collect()
}

/// Saves the student and history under `out` and its dev/test reports under `dir`.
fn finish_distill(
    run: &DistillRun,
    corpus: &Corpus,
    corpus_name: &str,
    cfg: &RunConfig,
    task: Task,
    dir: &Path,
    student_rel: &str,
) -> Result<Vec<MetricReport>> {
    run.save(dir.join(student_rel))?;
    let mut reports = Vec::new();
    for split in [Split::Dev, Split::Test] {
        let report = evaluate(&run.student, corpus, split, task, cfg.f1_mode)?;
        let report = report_with(report, student_rel, corpus_name, cfg);
        write_report(dir, &report)?;
        reports.push(report);
    }
    Ok(reports)
}

fn warn_rel(ens: &TeacherEnsemble, losses: LossSet) {
    if losses.contains(LossKind::Rel) && ens.len() < 3 {
        log::warn!("REL with {} teacher(s): the vote has fewer than three voters", ens.len());
    }
}

fn distill(a: &DistillArgs, dir: &Path) -> Result<Outcome> {
    let cfg = base_config(
        &a.common,
        Overrides {
            task: a.task,
            corpus: a.corpus.clone(),
            teachers: a.teachers.clone(),
            losses: a.losses,
            f1_mode: a.mode,
            ..a.hyper.overrides()
        },
    )?;
    write_json(&dir.join(CONFIG_FILE), &cfg)?;
    let task = required(&cfg.task, "task")?;
    let (corpus, corpus_name) = corpus_of(&cfg)?;
    let ens = TeacherEnsemble::from_checkpoints(load_teachers(&cfg.teachers)?)?;
    ens.check_heads(task)?;
    warn_rel(&ens, cfg.losses);
    let run = distill_student(
        &cfg.student_encoder(),
        &ens,
        &corpus,
        task,
        &cfg.loss_config(),
        &cfg.distill_hyper(),
        cfg.seed,
    )?;
    let reports = finish_distill(&run, &corpus, &corpus_name, &cfg, task, dir, "student")?;
    log::info!(
        "{task} student: {} epochs, best {}, test {} = {:.4}",
        run.epochs_run,
        run.best_epoch,
        reports[1].metric,
        reports[1].value
    );
    Ok(Outcome {
        config: serde_json::to_value(&cfg).expect("config serializes"),
        seed: cfg.seed,
    })
}

fn eval_cmd(a: &EvalArgs, dir: &Path) -> Result<Outcome> {
    let cfg = base_config(
        &a.common,
        Overrides {
            task: a.task,
            corpus: a.corpus.clone(),
            f1_mode: a.mode,
            ..Overrides::default()
        },
    )?;
    write_json(&dir.join(CONFIG_FILE), &cfg)?;
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let task = cfg
        .task
        .or(ckpt.task)
        .ok_or_else(|| Error::Config("missing task and the checkpoint records none".into()))?;
    let (corpus, corpus_name) = corpus_of(&cfg)?;
    let report = evaluate(&ckpt, &corpus, a.split, task, cfg.f1_mode)?;
    let report = report_with(report, &a.checkpoint.display().to_string(), &corpus_name, &cfg);
    write_report(dir, &report)?;
    println!("{}", report.to_json());
    Ok(Outcome {
        config: serde_json::to_value(&cfg).expect("config serializes"),
        seed: cfg.seed,
    })
}

/// One summary row per sweep cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub cell: String,
    pub task: Task,
    pub teachers: Vec<Task>,
    pub losses: LossSet,
    pub rel_disabled: bool,
    pub seed: u64,
    pub epochs_run: usize,
    pub metric: String,
    pub dev: f64,
    pub test: f64,
}

fn sweep(a: &SweepArgs, dir: &Path, args: &[String]) -> Result<Outcome> {
    let cfg = base_config(
        &a.common,
        Overrides {
            corpus: a.corpus.clone(),
            teachers: a.teachers.clone(),
            f1_mode: a.mode,
            ..a.hyper.overrides()
        },
    )?;
    write_json(&dir.join(CONFIG_FILE), &cfg)?;
    let grid = match &a.grid {
        Some(p) => SweepGrid::read(p)?,
        None => SweepGrid::default(),
    };
    write_json(&dir.join("grid.json"), &grid)?;
    let cells = enumerate_cells(&grid, cfg.seed)?;
    let (corpus, corpus_name) = corpus_of(&cfg)?;
    let pool = load_teachers(&cfg.teachers)?;
    let mut rows = Vec::new();
    for cell in &cells {
        let ens = select_teachers(&pool, &cell.teachers)?;
        ens.check_heads(cell.task)?;
        if cell.rel_disabled {
            log::info!("cell {}: REL disabled for a two-teacher ensemble", cell.name());
        }
        warn_rel(&ens, cell.losses);
        let cell_cfg = RunConfig {
            task: Some(cell.task),
            seed: cell.seed,
            losses: cell.losses,
            teachers: cell
                .teachers
                .iter()
                .map(|t| {
                    let i = pool.iter().position(|c| c.task == Some(*t)).expect("selected above");
                    cfg.teachers[i].clone()
                })
                .collect(),
            ..cfg.clone()
        };
        let started_at = chrono::Utc::now().to_rfc3339();
        let clock = Instant::now();
        let cell_dir = dir.join("cells").join(cell.name());
        write_json(&cell_dir.join(CONFIG_FILE), &cell_cfg)?;
        write_json(&cell_dir.join("cell.json"), cell)?;
        let run = distill_student(
            &cell_cfg.student_encoder(),
            &ens,
            &corpus,
            cell.task,
            &cell_cfg.loss_config(),
            &cell_cfg.distill_hyper(),
            cell.seed,
        )?;
        let reports = finish_distill(&run, &corpus, &corpus_name, &cell_cfg, cell.task, &cell_dir, "student")?;
        log::info!("cell {}: test {:.4}", cell.name(), reports[1].value);
        let config = serde_json::to_value(&cell_cfg).expect("config serializes");
        manifest("sweep-cell", args, config, cell.seed, started_at, clock).finalize(&cell_dir)?;
        rows.push(SweepRow {
            cell: cell.name(),
            task: cell.task,
            teachers: cell.teachers.clone(),
            losses: cell.losses,
            rel_disabled: cell.rel_disabled,
            seed: cell.seed,
            epochs_run: run.epochs_run,
            metric: reports[1].metric.clone(),
            dev: reports[0].value,
            test: reports[1].value,
        });
        write_json(&dir.join("summary.json"), &rows)?;
    }
    Ok(Outcome {
        config: serde_json::to_value(&cfg).expect("config serializes"),
        seed: cfg.seed,
    })
}

fn gradcheck(a: &GradcheckArgs, dir: &Path) -> Result<Outcome> {
    no_run_config(&a.common, "gradcheck", "--seed and --coordinates")?;
    let mut gc = GradcheckConfig::default();
    if let Some(s) = a.common.seed {
        gc.seed = s;
    }
    if let Some(c) = a.coordinates {
        gc.coordinates = c;
    }
    let report = run_gradcheck(&gc)?;
    for (kind, err) in report.per_loss() {
        println!("{:<4} max_rel_err {:.3e}", kind.name(), err);
    }
    println!("additivity max_abs_err {:.3e}", report.additivity_err);
    write_json(&dir.join("gradcheck.json"), &report)?;
    if !report.passed() {
        return Err(Error::Divergence {
            step: 0,
            what: format!("gradient check exceeds relative error {}", gc.tolerance),
        });
    }
    Ok(Outcome {
        config: serde_json::to_value(&gc).expect("config serializes"),
        seed: gc.seed,
    })
}

fn dispatch(cmd: &Command, dir: &Path, args: &[String]) -> Result<Outcome> {
    match cmd {
        Command::GenData(a) => gen_data(a, dir),
        Command::TrainTeacher(a) => train_teacher(a, dir),
        Command::TrainProbes(a) => train_probes(a, dir),
        Command::Distill(a) => distill(a, dir),
        Command::Eval(a) => eval_cmd(a, dir),
        Command::Sweep(a) => sweep(a, dir, args),
        Command::Gradcheck(a) => gradcheck(a, dir),
    }
}

impl RunManifest {
    /// Lists every file under `dir` and writes the manifest there atomically.
    fn finalize(mut self, dir: &Path) -> Result<()> {
        let mut artifacts = Vec::new();
        list_files(dir, dir, &mut artifacts)?;
        artifacts.retain(|a| a != MANIFEST_FILE);
        self.artifacts = artifacts;
        let text = serde_json::to_string_pretty(&self).expect("manifest serializes");
        write_atomic(&dir.join(MANIFEST_FILE), text.as_bytes())
    }
}

fn manifest(command: &str, args: &[String], config: Value, seed: u64, started_at: String, clock: Instant) -> RunManifest {
    RunManifest {
        command: command.to_string(),
        args: args.to_vec(),
        config,
        seed,
        artifacts: Vec::new(),
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        started_at,
        duration_secs: clock.elapsed().as_secs_f64(),
        status: "ok".into(),
        error: None,
    }
}

/// Runs a parsed command and writes its manifest; returns the run directory.
pub fn execute(cli: &Cli, args: &[String]) -> Result<PathBuf> {
    let started_at = chrono::Utc::now().to_rfc3339();
    let clock = Instant::now();
    let name = cli.command.name();
    let dir = create_run_dir(name, cli.command.common())?;
    let result = dispatch(&cli.command, &dir, args);
    let m = match &result {
        Ok(o) => manifest(name, args, o.config.clone(), o.seed, started_at, clock),
        Err(e) => RunManifest {
            status: "error".into(),
            error: Some(e.to_string()),
            ..manifest(name, args, Value::Null, cli.command.common().seed.unwrap_or(0), started_at, clock)
        },
    };
    m.finalize(&dir)?;
    result.map(|_| dir)
}

/// One-line JSON failure record for the last stderr line.
pub fn failure_line(kind: &str, code: i32, message: &str) -> String {
    serde_json::json!({ "status": "error", "kind": kind, "exit_code": code, "message": message }).to_string()
}

/// Parses `args` (program name first), runs the command and returns the exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let printable: Vec<String> = args.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let rendered = e.to_string();
            eprint!("{rendered}");
            let first = rendered.lines().next().unwrap_or("invalid arguments");
            eprintln!("{}", failure_line("usage", 2, first.trim_start_matches("error: ")));
            return 2;
        }
    };
    match execute(&cli, &printable) {
        Ok(dir) => {
            eprintln!("{}", serde_json::json!({ "status": "ok", "run_dir": dir.display().to_string() }));
            0
        }
        Err(e) => {
            let code = e.exit_code();
            eprintln!("{}", failure_line(e.kind(), code, &e.to_string()));
            code
        }
    }
}
