//! Python bindings: datasets, trained models, metrics and the balanced
//! assignment routine.

use std::collections::HashSet;
use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use s4rec_core::dataio::{self, InputFormat, PrepareOptions};
use s4rec_core::evalkit::{self, Bucket, Scorer, Split};
use s4rec_core::intent;
use s4rec_core::pipeline::{self as core_pipeline, Checkpoint, FitOptions, TrainConfig};
use s4rec_core::tensor::Tensor;
use s4rec_core::Error;

fn err(e: Error) -> PyErr {
    match e {
        Error::Io(_) => PyIOError::new_err(e.to_string()),
        Error::Numerical(_) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn to_py_json(py: Python<'_>, value: &impl serde::Serialize) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Tensor<f64>> {
    Tensor::from_rows(&rows).map_err(err)
}

/// A filtered, relabelled interaction dataset.
#[pyclass(name = "Dataset", module = "s4rec")]
struct PyDataset {
    inner: dataio::PreparedDataset,
}

#[pymethods]
impl PyDataset {
    /// Builds a dataset from dense item ids `1..=num_items`.
    #[staticmethod]
    #[pyo3(signature = (sequences, num_items, head_ratio=0.2))]
    fn from_sequences(sequences: Vec<Vec<usize>>, num_items: usize, head_ratio: f64) -> PyResult<Self> {
        let inner = dataio::PreparedDataset::from_id_sequences(sequences, num_items, head_ratio).map_err(err)?;
        Ok(Self { inner })
    }

    /// Reads raw interactions, applies the k-core filter and labels head users.
    #[staticmethod]
    #[pyo3(signature = (path, format="triplet", min_count=5, head_ratio=0.2, max_len=50))]
    fn prepare(path: PathBuf, format: &str, min_count: usize, head_ratio: f64, max_len: usize) -> PyResult<Self> {
        let format: InputFormat = format.parse().map_err(err)?;
        let opts = PrepareOptions {
            min_count,
            head_ratio,
            max_len,
        };
        opts.validate().map_err(err)?;
        let raw = dataio::ingest(&path, format).map_err(err)?;
        let inner = dataio::preprocess(raw.into_sequences(), &opts).map_err(err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(dir: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: dataio::read_prepared(&dir).map_err(err)?,
        })
    }

    fn save(&self, dir: PathBuf) -> PyResult<()> {
        dataio::write_prepared(&self.inner, &dir).map_err(err)
    }

    #[getter]
    fn num_users(&self) -> usize {
        self.inner.num_users
    }

    #[getter]
    fn num_items(&self) -> usize {
        self.inner.num_items
    }

    #[getter]
    fn head_length_threshold(&self) -> usize {
        self.inner.head_length_threshold
    }

    /// `(user_id, is_head, items)` for every user.
    fn sequences(&self) -> Vec<(usize, bool, Vec<usize>)> {
        self.inner
            .sequences
            .iter()
            .map(|s| (s.user_id, s.is_head, s.items.clone()))
            .collect()
    }

    fn __len__(&self) -> usize {
        self.inner.num_users
    }

    fn __repr__(&self) -> String {
        format!(
            "Dataset(users={}, items={}, head={})",
            self.inner.num_users,
            self.inner.num_items,
            self.inner.num_head()
        )
    }
}

/// A trained model restored from a checkpoint.
#[pyclass(name = "Model", module = "s4rec")]
struct PyModel {
    checkpoint: Checkpoint,
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            checkpoint: Checkpoint::load(&path).map_err(err)?,
        })
    }

    #[getter]
    fn num_items(&self) -> usize {
        self.checkpoint.model.num_items()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.checkpoint.model.encoder.config.dim
    }

    #[getter]
    fn epoch(&self) -> usize {
        self.checkpoint.manifest.epoch
    }

    /// Scores of every item for each prefix; entry `j` scores item `j + 1`.
    fn score(&self, prefixes: Vec<Vec<usize>>) -> PyResult<Vec<Vec<f64>>> {
        self.checkpoint.model.score_batch(&prefixes).map_err(err)
    }

    /// Sequence representations of each prefix.
    fn represent(&self, prefixes: Vec<Vec<usize>>) -> PyResult<Vec<Vec<f32>>> {
        let t = self.checkpoint.model.represent(&prefixes).map_err(err)?;
        Ok((0..t.rows()).map(|r| t.row(r).to_vec()).collect())
    }

    /// Nearest intent prototype of each prefix.
    fn clusters(&self, prefixes: Vec<Vec<usize>>) -> PyResult<Vec<usize>> {
        let m = &self.checkpoint.model;
        Ok(m.clusters(&m.represent(&prefixes).map_err(err)?))
    }

    #[pyo3(signature = (dataset, split="test", bucket="all", ks=vec![5, 20]))]
    fn evaluate(
        &self,
        py: Python<'_>,
        dataset: &PyDataset,
        split: &str,
        bucket: &str,
        ks: Vec<usize>,
    ) -> PyResult<Py<PyAny>> {
        let split: Split = split.parse().map_err(err)?;
        let bucket: Bucket = bucket.parse().map_err(err)?;
        let splits = dataio::split(&dataset.inner, self.checkpoint.manifest.config.encoder.max_len);
        let report =
            evalkit::evaluate(&self.checkpoint.model, &dataset.inner, &splits, split, bucket, &ks).map_err(err)?;
        to_py_json(py, &report)
    }

    fn export_embeddings(&self, dataset: &PyDataset, path: PathBuf) -> PyResult<usize> {
        core_pipeline::export_embeddings(&self.checkpoint.model, &dataset.inner, &path).map_err(err)
    }
}

/// Trains from a JSON config string and returns the run summary.
#[pyfunction]
fn train(py: Python<'_>, config_json: &str, dataset: &PyDataset) -> PyResult<Py<PyAny>> {
    let cfg = TrainConfig::from_json(config_json).map_err(err)?;
    let summary = core_pipeline::fit(&cfg, &dataset.inner, &FitOptions::default()).map_err(err)?;
    to_py_json(py, &summary)
}

/// Balanced soft assignment of score rows to prototype columns.
#[pyfunction]
#[pyo3(signature = (scores, eps=0.05, iters=3))]
fn sinkhorn_codes(scores: Vec<Vec<f64>>, eps: f64, iters: usize) -> PyResult<Vec<Vec<f64>>> {
    let q = intent::sinkhorn_codes(&matrix(scores)?, eps, iters).map_err(err)?;
    Ok((0..q.rows()).map(|r| q.row(r).to_vec()).collect())
}

/// 1-based rank of `target`; `logits[j]` scores item `j + 1`.
#[pyfunction]
#[pyo3(signature = (logits, target, excluded=HashSet::new()))]
fn rank_target(logits: Vec<f64>, target: usize, excluded: HashSet<usize>) -> PyResult<usize> {
    evalkit::rank_target(&logits, target, &excluded).map_err(err)
}

#[pyfunction]
fn hr_at_k(rank: usize, k: usize) -> f64 {
    evalkit::hr_at_k(rank, k)
}

#[pyfunction]
fn ndcg_at_k(rank: usize, k: usize) -> f64 {
    evalkit::ndcg_at_k(rank, k)
}

#[pyfunction]
fn nmi(a: Vec<i64>, b: Vec<i64>) -> PyResult<f64> {
    if a.len() != b.len() {
        return Err(PyValueError::new_err("labelings differ in length"));
    }
    Ok(evalkit::nmi(&a, &b))
}

/// Returns `(centroids, assignments)`.
#[pyfunction]
#[pyo3(signature = (points, k, iters=100, seed=0))]
fn kmeans(points: Vec<Vec<f64>>, k: usize, iters: usize, seed: u64) -> PyResult<(Vec<Vec<f64>>, Vec<usize>)> {
    let r = evalkit::kmeans_oracle(&points, k, iters, seed).map_err(err)?;
    Ok((r.centroids, r.assignments))
}

#[pymodule]
fn s4rec(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(sinkhorn_codes, m)?)?;
    m.add_function(wrap_pyfunction!(rank_target, m)?)?;
    m.add_function(wrap_pyfunction!(hr_at_k, m)?)?;
    m.add_function(wrap_pyfunction!(ndcg_at_k, m)?)?;
    m.add_function(wrap_pyfunction!(nmi, m)?)?;
    m.add_function(wrap_pyfunction!(kmeans, m)?)?;
    Ok(())
}
