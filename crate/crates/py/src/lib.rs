use std::path::PathBuf;

use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use serde::Serialize;

use mlkd::corpus::Split;
use mlkd::distill::{generate_triplets, HiddenStates, VoteDistance};
use mlkd::encoder::load_checkpoint;
use mlkd::gradcheck::{run_gradcheck, GradcheckConfig};
use mlkd::{F1Mode, Task};

fn py_err(e: mlkd::Error) -> PyErr {
    match e {
        mlkd::Error::Io { .. } => PyOSError::new_err(e.to_string()),
        mlkd::Error::Divergence { .. } => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn to_py<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn parse<T: std::str::FromStr<Err = mlkd::Error>>(s: &str) -> PyResult<T> {
    s.parse().map_err(py_err)
}

/// Runs the command line in-process; returns the exit status.
#[pyfunction]
fn run(args: Vec<String>) -> i32 {
    mlkd::cli::run(std::iter::once("mlkd".to_string()).chain(args))
}

/// Generates a synthetic corpus, writes it to `path` and returns its label counts.
#[pyfunction]
#[pyo3(signature = (path, n_dialogues=200, n_domains=2, intents_per_domain=3, slot_tags_per_domain=3, min_turns=3, max_turns=6, seed=7))]
#[allow(clippy::too_many_arguments)]
fn generate_corpus<'py>(
    py: Python<'py>,
    path: PathBuf,
    n_dialogues: usize,
    n_domains: usize,
    intents_per_domain: usize,
    slot_tags_per_domain: usize,
    min_turns: usize,
    max_turns: usize,
    seed: u64,
) -> PyResult<Bound<'py, PyAny>> {
    let spec = mlkd::SyntheticSpec {
        n_dialogues,
        n_domains,
        intents_per_domain,
        slot_tags_per_domain,
        min_turns,
        max_turns,
        seed,
    };
    let corpus = mlkd::generate_synthetic(&spec).map_err(py_err)?;
    mlkd::write_corpus(&corpus, &path).map_err(py_err)?;
    summary(py, &corpus)
}

#[derive(Serialize)]
struct CorpusSummary {
    dialogues: usize,
    k_sf: usize,
    k_id: usize,
    k_dc: usize,
    train_turns: usize,
    dev_turns: usize,
    test_turns: usize,
}

fn summary<'py>(py: Python<'py>, c: &mlkd::Corpus) -> PyResult<Bound<'py, PyAny>> {
    to_py(
        py,
        &CorpusSummary {
            dialogues: c.dialogues.len(),
            k_sf: c.catalog.k_sf(),
            k_id: c.catalog.k_id(),
            k_dc: c.catalog.k_dc(),
            train_turns: c.num_turns(Split::Train),
            dev_turns: c.num_turns(Split::Dev),
            test_turns: c.num_turns(Split::Test),
        },
    )
}

/// Loads and validates a corpus file; returns its label counts.
#[pyfunction]
fn corpus_summary(py: Python<'_>, path: PathBuf) -> PyResult<Bound<'_, PyAny>> {
    let c = mlkd::load_corpus(&path).map_err(py_err)?;
    summary(py, &c)
}

/// Scores a checkpoint directory on a corpus split; returns the metric report.
#[pyfunction]
#[pyo3(signature = (checkpoint, corpus, split="test", task=None, mode="all_classes"))]
fn evaluate<'py>(
    py: Python<'py>,
    checkpoint: PathBuf,
    corpus: PathBuf,
    split: &str,
    task: Option<&str>,
    mode: &str,
) -> PyResult<Bound<'py, PyAny>> {
    let ck = load_checkpoint(&checkpoint).map_err(py_err)?;
    let c = mlkd::load_corpus(&corpus).map_err(py_err)?;
    let task = match task {
        Some(t) => parse::<Task>(t)?,
        None => ck
            .task
            .ok_or_else(|| PyValueError::new_err("checkpoint has no own task; pass task="))?,
    };
    let report = mlkd::evaluate(&ck, &c, parse(split)?, task, parse::<F1Mode>(mode)?).map_err(py_err)?;
    to_py(py, &report)
}

#[pyfunction]
fn accuracy(pred: Vec<usize>, gold: Vec<usize>) -> PyResult<f64> {
    mlkd::accuracy(&pred, &gold).map_err(py_err)
}

/// Token micro-F1 over all positions.
#[pyfunction]
#[pyo3(signature = (pred, gold, classes, mode="all_classes", outside=0))]
fn token_micro_f1(pred: Vec<usize>, gold: Vec<usize>, classes: usize, mode: &str, outside: usize) -> PyResult<f64> {
    let mask = vec![true; gold.len()];
    mlkd::token_micro_f1(&pred, &gold, &mask, classes, parse(mode)?, outside).map_err(py_err)
}

/// Voted (anchor, positive, negative) triplets from per-teacher `n × d_j` hidden states.
#[pyfunction]
#[pyo3(signature = (hidden, seed, distance="squared_euclidean"))]
fn triplets(hidden: Vec<Vec<Vec<f64>>>, seed: u64, distance: &str) -> PyResult<Vec<(usize, usize, usize)>> {
    let distance: VoteDistance = serde_json::from_value(serde_json::Value::String(distance.into()))
        .map_err(|_| PyValueError::new_err(format!("unknown distance '{distance}'")))?;
    let n = hidden.first().map_or(0, Vec::len);
    let mut flat = Vec::with_capacity(hidden.len());
    for (j, h) in hidden.iter().enumerate() {
        let d = h.first().map_or(0, Vec::len);
        if h.len() != n || h.iter().any(|r| r.len() != d) {
            return Err(PyValueError::new_err(format!("teacher {j} hidden states are ragged")));
        }
        flat.push((h.concat(), d));
    }
    let views: Vec<HiddenStates<'_>> = flat.iter().map(|(f, d)| HiddenStates::new(f, *d)).collect();
    let mut rng = mlkd::encoder::seeded_rng(seed);
    let out = generate_triplets(&views, n, distance, &mut rng).map_err(py_err)?;
    Ok(out.iter().map(|t| (t.anchor, t.positive, t.negative)).collect())
}

/// Finite-difference check of every distillation loss; returns the report.
#[pyfunction]
#[pyo3(signature = (seed=0, coordinates=120))]
fn gradcheck(py: Python<'_>, seed: u64, coordinates: usize) -> PyResult<Bound<'_, PyAny>> {
    let cfg = GradcheckConfig {
        seed,
        coordinates,
        ..GradcheckConfig::default()
    };
    let report = run_gradcheck(&cfg).map_err(py_err)?;
    let out = to_py(py, &report)?;
    out.set_item("passed", report.passed())?;
    Ok(out)
}

#[pymodule]
#[pyo3(name = "mlkd")]
fn mlkd_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(generate_corpus, m)?)?;
    m.add_function(wrap_pyfunction!(corpus_summary, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(accuracy, m)?)?;
    m.add_function(wrap_pyfunction!(token_micro_f1, m)?)?;
    m.add_function(wrap_pyfunction!(triplets, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    Ok(())
}
