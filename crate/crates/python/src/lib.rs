//! Python bindings.

use std::path::PathBuf;
use std::sync::Arc;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use protfuse_core::config::{load_config, DESK_CONFIG};
use protfuse_core::evaluation;
use protfuse_core::fixtures::{write_corpus, CorpusSpec};
use protfuse_core::instruction_data::{self, AnnotationRecord, PeerInstance, TaskTag};
use protfuse_core::model::ProteinInput;
use protfuse_core::pipeline;
use protfuse_core::protein_io::{self, GraphConfig, ProteinStructure};
use protfuse_core::training::{load_checkpoint, TrainState};
use protfuse_core::{decoder, Error, ErrorClass};

fn py_err(e: Error) -> PyErr {
    match (&e, e.class()) {
        (Error::Io { .. }, _) => PyIOError::new_err(e.to_string()),
        (_, ErrorClass::Runtime) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn task(name: &str) -> PyResult<TaskTag> {
    TaskTag::from_name(name).ok_or_else(|| PyValueError::new_err(format!("unknown task {name:?}")))
}

/// A single-chain backbone structure.
#[pyclass(name = "Structure", frozen, from_py_object)]
#[derive(Clone)]
struct PyStructure {
    inner: ProteinStructure,
}

#[pymethods]
impl PyStructure {
    /// Parses PDB text (ATOM records with N, CA, C, O).
    #[staticmethod]
    fn parse(text: &str, id: &str) -> PyResult<Self> {
        Ok(Self {
            inner: protein_io::parse_structure(text, id).map_err(py_err)?,
        })
    }

    /// Reads the line-oriented cache format.
    #[staticmethod]
    fn from_cache(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: protein_io::deserialize_structure(text).map_err(py_err)?,
        })
    }

    fn to_cache(&self) -> String {
        protein_io::serialize_structure(&self.inner)
    }

    fn to_pdb(&self) -> String {
        protein_io::write_pdb(&self.inner)
    }

    #[getter]
    fn id(&self) -> String {
        self.inner.id.clone()
    }

    #[getter]
    fn sequence(&self) -> String {
        protein_io::derive_sequence(&self.inner)
    }

    #[getter]
    fn dropped_residues(&self) -> usize {
        self.inner.dropped_residues
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn ca_coords(&self) -> Vec<[f64; 3]> {
        self.inner.residues.iter().map(|r| r.ca_xyz).collect()
    }

    /// Neighbor indices (`L × k`) and RBF edge features (`L × k × rbf_count`).
    #[pyo3(signature = (k = 16, rbf_count = 16))]
    fn graph(&self, k: usize, rbf_count: usize) -> PyResult<(Vec<Vec<usize>>, Vec<Vec<Vec<f64>>>)> {
        if k == 0 || rbf_count == 0 {
            return Err(PyValueError::new_err("k and rbf_count must be positive"));
        }
        let g = protein_io::build_residue_graph(&self.inner, GraphConfig { k, rbf_count });
        let l = g.num_residues;
        let neighbors = (0..l).map(|i| g.neighbors(i).to_vec()).collect();
        let features = (0..l)
            .map(|i| (0..k).map(|j| g.edge_features.row(i * k + j).to_vec()).collect())
            .collect();
        Ok((neighbors, features))
    }

    fn __repr__(&self) -> String {
        format!("Structure(id={:?}, len={})", self.inner.id, self.inner.len())
    }
}

/// A trained model loaded from a checkpoint.
#[pyclass(name = "Model", frozen)]
struct PyModel {
    state: TrainState,
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            state: load_checkpoint(&path).map_err(py_err)?,
        })
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.state.seed
    }

    #[getter]
    fn step(&self) -> u64 {
        self.state.step
    }

    #[getter]
    fn loss_history(&self) -> Vec<f64> {
        self.state.loss_history.clone()
    }

    #[getter]
    fn config_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.state.config).map_err(|e| PyValueError::new_err(e.to_string()))
    }

    /// Greedy answer to `question`, which holds one `<protein>` per structure.
    #[pyo3(signature = (structures, question, max_new_tokens = 96))]
    fn generate(&self, py: Python<'_>, structures: Vec<PyStructure>, question: &str, max_new_tokens: usize) -> PyResult<String> {
        let cfg = self.state.config;
        let proteins = structures
            .iter()
            .map(|s| ProteinInput::from_structure(&s.inner, cfg.graph).map(Arc::new))
            .collect::<Result<Vec<_>, _>>()
            .map_err(py_err)?;
        py.detach(|| pipeline::answer(&cfg, &self.state, &proteins, question, max_new_tokens))
            .map_err(py_err)
    }
}

#[pyfunction]
fn tokenize_text(text: &str) -> Vec<u32> {
    decoder::tokenize_text(text)
}

#[pyfunction]
fn detokenize_text(ids: Vec<u32>) -> String {
    decoder::detokenize_text(&ids)
}

/// Returns `(protein_ids, question, answer, task_tag)`.
type ExampleTuple = (Vec<String>, String, String, String);

fn example_tuple(ex: instruction_data::InstructionExample) -> ExampleTuple {
    (ex.protein_ids, ex.question, ex.answer, ex.task_tag.name().to_string())
}

#[pyfunction]
#[pyo3(signature = (protein_id, name = None, location = None, function = None, families = None, template_id = 0))]
fn verbalize_description(
    protein_id: String,
    name: Option<String>,
    location: Option<String>,
    function: Option<String>,
    families: Option<String>,
    template_id: usize,
) -> PyResult<ExampleTuple> {
    let rec = AnnotationRecord {
        protein_id,
        name,
        subcellular_location: location,
        function_text: function,
        families,
    };
    instruction_data::verbalize_description(&rec, template_id)
        .map(example_tuple)
        .map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (task_tag, protein_ids, label, template_id = 0))]
fn verbalize_peer(task_tag: &str, protein_ids: Vec<String>, label: u32, template_id: usize) -> PyResult<ExampleTuple> {
    instruction_data::verbalize_peer(task(task_tag)?, &PeerInstance { protein_ids, label }, template_id)
        .map(example_tuple)
        .map_err(py_err)
}

#[pyfunction]
fn adapt_molinst_prompt(prompt: &str) -> String {
    instruction_data::adapt_molinst_prompt(prompt)
}

#[pyfunction]
fn rouge_l(reference: &str, hypothesis: &str) -> f64 {
    evaluation::rouge_l(reference, hypothesis)
}

#[pyfunction]
fn extract_critical(text: &str, task_tag: &str) -> PyResult<String> {
    evaluation::extract_critical(text, task(task_tag)?).map_err(py_err)
}

/// The parsed label, or `None` when the answer names no label.
#[pyfunction]
fn parse_classification(answer: &str, task_tag: &str) -> PyResult<Option<u32>> {
    Ok(evaluation::parse_classification(answer, task(task_tag)?).label())
}

/// Returns `(mean, std)` over exactly `expected` scores.
#[pyfunction]
#[pyo3(signature = (scores, expected = evaluation::DEFAULT_RUNS))]
fn aggregate_runs(scores: Vec<f64>, expected: usize) -> PyResult<(f64, f64)> {
    let r = evaluation::aggregate_runs(TaskTag::Solubility, "score", &scores, 0, expected).map_err(py_err)?;
    Ok((r.mean, r.std))
}

#[pyfunction]
fn desk_config() -> &'static str {
    DESK_CONFIG
}

/// Writes the synthetic corpus and `config.toml` under `out`.
#[pyfunction]
#[pyo3(signature = (out, seed = CorpusSpec::default().seed))]
fn write_fixtures(out: PathBuf, seed: u64) -> PyResult<PathBuf> {
    write_corpus(&out, &CorpusSpec { seed, ..CorpusSpec::default() }).map_err(py_err)?;
    let path = out.join("config.toml");
    std::fs::write(&path, DESK_CONFIG).map_err(|e| PyIOError::new_err(e.to_string()))?;
    Ok(path)
}

/// Builds the datasets; returns the summary as JSON.
#[pyfunction]
#[pyo3(signature = (config, overrides = Vec::new()))]
fn build_data(py: Python<'_>, config: PathBuf, overrides: Vec<String>) -> PyResult<String> {
    let cfg = load_config(&config, &overrides).map_err(py_err)?;
    let summary = py.detach(|| pipeline::cmd_build_data(&cfg)).map_err(py_err)?;
    serde_json::to_string(&summary).map_err(|e| PyValueError::new_err(e.to_string()))
}

/// Trains every seed; returns the checkpoint paths.
#[pyfunction]
#[pyo3(signature = (config, overrides = Vec::new()))]
fn train(py: Python<'_>, config: PathBuf, overrides: Vec<String>) -> PyResult<Vec<PathBuf>> {
    let cfg = load_config(&config, &overrides).map_err(py_err)?;
    let outcomes = py.detach(|| pipeline::cmd_train(&cfg)).map_err(py_err)?;
    Ok(outcomes.into_iter().map(|o| o.checkpoint).collect())
}

/// Evaluates the per-seed checkpoints; returns the report text.
#[pyfunction]
#[pyo3(signature = (config, overrides = Vec::new()))]
fn evaluate(py: Python<'_>, config: PathBuf, overrides: Vec<String>) -> PyResult<String> {
    let cfg = load_config(&config, &overrides).map_err(py_err)?;
    let reports = py.detach(|| pipeline::cmd_eval(&cfg, None)).map_err(py_err)?;
    Ok(evaluation::format_report(&reports))
}

#[pymodule]
fn protfuse(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyStructure>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(tokenize_text, m)?)?;
    m.add_function(wrap_pyfunction!(detokenize_text, m)?)?;
    m.add_function(wrap_pyfunction!(verbalize_description, m)?)?;
    m.add_function(wrap_pyfunction!(verbalize_peer, m)?)?;
    m.add_function(wrap_pyfunction!(adapt_molinst_prompt, m)?)?;
    m.add_function(wrap_pyfunction!(rouge_l, m)?)?;
    m.add_function(wrap_pyfunction!(extract_critical, m)?)?;
    m.add_function(wrap_pyfunction!(parse_classification, m)?)?;
    m.add_function(wrap_pyfunction!(aggregate_runs, m)?)?;
    m.add_function(wrap_pyfunction!(desk_config, m)?)?;
    m.add_function(wrap_pyfunction!(write_fixtures, m)?)?;
    m.add_function(wrap_pyfunction!(build_data, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    Ok(())
}
