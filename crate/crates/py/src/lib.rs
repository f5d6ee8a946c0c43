//! Python bindings: configuration, data generation, training sessions,
//! and the standalone loss and metric operations.

use std::path::PathBuf;

use ovd_distill::alignment::{contrastive_caption_loss, distill_loss, BatchReduction, DistillDenominator, Stage};
use ovd_distill::autograd::Graph;
use ovd_distill::checkpoint::Checkpoint;
use ovd_distill::eval::{compute_ap50, Detection, GroundTruth};
use ovd_distill::pipeline::{Session, TrainConfig};
use ovd_distill::teacher::{divergence_value, FilteredProposals};
use ovd_distill::tensor::Tensor;
use ovd_distill::world::{generate_corpus, write_dataset, ClassSplit, World};
use ovd_distill::Error;
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyBytes;
use serde::de::DeserializeOwned;
use serde::Serialize;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io(_) => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

trait OrPy<T> {
    fn or_py(self) -> PyResult<T>;
}

impl<T> OrPy<T> for ovd_distill::Result<T> {
    fn or_py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

/// Round-trips through Python's `json` module so plain dicts and lists
/// map onto the crate's serde types.
fn from_py<T: DeserializeOwned>(obj: &Bound<'_, PyAny>) -> PyResult<T> {
    let json = obj.py().import("json")?;
    let text: String = json.call_method1("dumps", (obj,))?.extract()?;
    serde_json::from_str(&text).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn to_py<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn matrix(rows: &[Vec<f64>]) -> PyResult<Tensor> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != cols) {
        return Err(PyValueError::new_err("ragged matrix"));
    }
    Ok(Tensor::from_rows(rows))
}

fn reduction(mean: bool) -> BatchReduction {
    if mean {
        BatchReduction::Mean
    } else {
        BatchReduction::Sum
    }
}

/// A training configuration with the CLI's `key=value` override syntax.
#[pyclass(name = "Config", unsendable)]
struct PyConfig {
    inner: TrainConfig,
}

#[pymethods]
impl PyConfig {
    #[new]
    #[pyo3(signature = (toml = None))]
    fn new(toml: Option<&str>) -> PyResult<Self> {
        let inner = match toml {
            Some(t) => TrainConfig::from_toml_str(t).or_py()?,
            None => TrainConfig::default(),
        };
        Ok(PyConfig { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyConfig { inner: TrainConfig::load(&path).or_py()? })
    }

    /// Applies one dotted-key override, e.g. `set("corpus.eval_count", "20")`.
    fn set(&mut self, key: &str, value: &str) -> PyResult<()> {
        let mut next = self.inner.clone();
        next.apply_overrides(&[(key.to_string(), value.to_string())]).or_py()?;
        next.validate().or_py()?;
        self.inner = next;
        Ok(())
    }

    fn to_toml(&self) -> String {
        self.inner.to_toml_string()
    }

    #[getter]
    fn hash(&self) -> String {
        self.inner.config_hash()
    }

    fn __repr__(&self) -> String {
        format!("Config(hash={:?})", self.inner.config_hash())
    }
}

/// Generates the corpus for `config` and writes it to its `data_dir`.
/// Returns the (detection, caption, eval) sample counts.
#[pyfunction]
fn generate_data(config: &PyConfig) -> PyResult<(usize, usize, usize)> {
    let cfg = &config.inner;
    let world = World::new(cfg.world.clone(), cfg.grammar().or_py()?).or_py()?;
    let corpus = generate_corpus(&world, &cfg.corpus).or_py()?;
    write_dataset(&cfg.data_dir, &corpus).or_py()?;
    Ok((corpus.detection.len(), corpus.captions.len(), corpus.eval.len()))
}

#[pyclass(name = "Session", unsendable)]
struct PySession {
    inner: Session,
}

impl PySession {
    fn checkpoint(&self, bytes: &[u8]) -> PyResult<Checkpoint> {
        Checkpoint::from_bytes(bytes).or_py()
    }
}

#[pymethods]
impl PySession {
    /// Loads the dataset from `config.data_dir`, or generates it in memory
    /// when `in_memory` is set.
    #[new]
    #[pyo3(signature = (config, in_memory = false))]
    fn new(config: &PyConfig, in_memory: bool) -> PyResult<Self> {
        let cfg = config.inner.clone();
        let inner = if in_memory {
            let world = World::new(cfg.world.clone(), cfg.grammar().or_py()?).or_py()?;
            let corpus = generate_corpus(&world, &cfg.corpus).or_py()?;
            Session::new(cfg, corpus).or_py()?
        } else {
            Session::load(cfg).or_py()?
        };
        Ok(PySession { inner })
    }

    /// Trains one stage and returns `(checkpoint_bytes, per_step_totals)`.
    /// Stage 2 needs `start`; other stages may continue from it.
    #[pyo3(signature = (stage, epochs = None, start = None))]
    fn train<'py>(&self, py: Python<'py>, stage: &str, epochs: Option<usize>, start: Option<&[u8]>) -> PyResult<(Bound<'py, PyBytes>, Vec<f64>)> {
        let stage: Stage = stage.parse().or_py()?;
        let cfg = &self.inner.cfg;
        let epochs = epochs.unwrap_or(match stage {
            Stage::Baseline => cfg.baseline_epochs,
            Stage::Stage1 => cfg.stage1_epochs,
            Stage::Stage2 => cfg.stage2_epochs,
        });
        let start = start.map(|b| self.checkpoint(b)).transpose()?;
        if stage == Stage::Stage2 && start.is_none() {
            return Err(PyValueError::new_err("stage 2 starts from a stage-1 checkpoint"));
        }
        let out = self.inner.train(stage, epochs, start.as_ref(), None).or_py()?;
        Ok((PyBytes::new(py, &out.checkpoint.to_bytes()), out.trace))
    }

    /// Evaluation report of a checkpoint as a dict.
    fn evaluate<'py>(&self, py: Python<'py>, checkpoint: &[u8]) -> PyResult<Bound<'py, PyAny>> {
        let ck = self.checkpoint(checkpoint)?;
        let eval = self.inner.evaluate(&ck.params).or_py()?;
        to_py(py, &eval.report)
    }

    /// Detections on evaluation image `index`.
    fn detect<'py>(&self, py: Python<'py>, checkpoint: &[u8], index: usize) -> PyResult<Bound<'py, PyAny>> {
        let ck = self.checkpoint(checkpoint)?;
        let img = self.inner.data.eval.get(index).ok_or_else(|| PyValueError::new_err("eval index out of range"))?;
        to_py(py, &self.inner.detect(&ck.params, &img.image))
    }

    #[getter]
    fn eval_count(&self) -> usize {
        self.inner.data.eval.len()
    }
}

/// Symmetric image/caption cross-entropy over an `n x n` score matrix.
#[pyfunction]
#[pyo3(signature = (scores, mean = true))]
fn contrastive_loss(scores: Vec<Vec<f64>>, mean: bool) -> PyResult<f64> {
    let m = matrix(&scores)?;
    let mut g = Graph::new();
    let v = g.input(m);
    let loss = contrastive_caption_loss(&mut g, v, reduction(mean)).or_py()?;
    Ok(g.scalar_value(loss))
}

/// Attention-guided distillation loss from an `n x n` similarity score
/// matrix and the `n` attention scores of the matched pairs.
#[pyfunction]
#[pyo3(signature = (scores, attention_scores, attention_positive = false, mean = true))]
fn distillation_loss(scores: Vec<Vec<f64>>, attention_scores: Vec<f64>, attention_positive: bool, mean: bool) -> PyResult<f64> {
    let s = matrix(&scores)?;
    let n = attention_scores.len();
    let a = Tensor::from_vec(n, 1, attention_scores);
    let den = if attention_positive { DistillDenominator::AttentionPositive } else { DistillDenominator::SimilarityOnly };
    let mut g = Graph::new();
    let (sv, av) = (g.input(s), g.input(a));
    let loss = distill_loss(&mut g, sv, av, den, reduction(mean)).or_py()?;
    Ok(g.scalar_value(loss))
}

/// Object-divergence hinge. Row `i` of `attention` is concept `i`'s
/// distribution over the concatenated proposal blocks, whose lengths are
/// `block_sizes`.
#[pyfunction]
#[pyo3(signature = (attention, block_sizes, alpha = 0.5, exponent = 1.0))]
fn divergence(attention: Vec<Vec<f64>>, block_sizes: Vec<usize>, alpha: f64, exponent: f64) -> PyResult<f64> {
    let att = matrix(&attention)?;
    let total: usize = block_sizes.iter().sum();
    if att.rows() != block_sizes.len() || att.cols() != total {
        return Err(PyValueError::new_err("attention must have one row per block and one column per proposal"));
    }
    let mut next = 0;
    let per_concept: Vec<Vec<usize>> = block_sizes
        .iter()
        .map(|&k| {
            next += k;
            (next - k..next).collect()
        })
        .collect();
    let fp = FilteredProposals { union_order: (0..total).collect(), per_concept };
    Ok(divergence_value(&att, &fp, alpha, exponent))
}

/// AP50 report. `results[i]` is a list of `{"bbox": [x1, y1, x2, y2],
/// "label": str, "confidence": float}`; `truth[i]` is `{"boxes": [...],
/// "labels": [...]}`.
#[pyfunction]
fn ap50<'py>(py: Python<'py>, results: &Bound<'py, PyAny>, truth: &Bound<'py, PyAny>, base: Vec<String>, novel: Vec<String>) -> PyResult<Bound<'py, PyAny>> {
    let results: Vec<Vec<Detection>> = from_py(results)?;
    let truth: Vec<GroundTruth> = from_py(truth)?;
    let split = ClassSplit { base, novel };
    split.validate().or_py()?;
    to_py(py, &compute_ap50(&results, &truth, &split))
}

#[pymodule(name = "ovd_distill")]
fn register(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyConfig>()?;
    m.add_class::<PySession>()?;
    m.add_function(wrap_pyfunction!(generate_data, m)?)?;
    m.add_function(wrap_pyfunction!(contrastive_loss, m)?)?;
    m.add_function(wrap_pyfunction!(distillation_loss, m)?)?;
    m.add_function(wrap_pyfunction!(divergence, m)?)?;
    m.add_function(wrap_pyfunction!(ap50, m)?)?;
    Ok(())
}
