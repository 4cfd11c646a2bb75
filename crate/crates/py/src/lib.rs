//! Python bindings for the cross-modal retrieval engine: dataset generators,
//! CCA fitting and projection, the correlation loss with gradients, training,
//! and retrieval evaluation.
//!
//! Matrices cross the boundary as lists of row lists (plain `float`); the
//! heavy lifting stays on the Rust side.

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use std::path::PathBuf;

use dcca_core::datagen::{self, MultiViewDataset, NonlinearConfig, Split, View};
use dcca_core::error::Error;
use dcca_core::numerics::Matrix;
use dcca_core::retrieval::{self, Direction, Modality, SnippetIndex};
use dcca_core::trainer::{self, Arch, TrainConfig};

fn to_py_err(e: Error) -> PyErr {
    match e {
        Error::Io(_) | Error::Format(_) => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn matrix_from_rows(rows: Vec<Vec<f64>>) -> PyResult<Matrix> {
    Matrix::from_rows(&rows).map_err(to_py_err)
}

fn matrix_to_rows(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|i| m.row(i).to_vec()).collect()
}

fn parse_split(s: &str) -> PyResult<Split> {
    Split::parse(s).map_err(to_py_err)
}

fn parse_view(s: &str) -> PyResult<View> {
    match s {
        "x" => Ok(View::X),
        "y" => Ok(View::Y),
        other => Err(PyValueError::new_err(format!("unknown view '{other}' (use 'x' or 'y')"))),
    }
}

/// A paired two-view dataset with split tags and snippet provenance.
#[pyclass(name = "Dataset")]
struct PyDataset {
    inner: MultiViewDataset,
}

#[pymethods]
impl PyDataset {
    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn shape_x(&self) -> Vec<usize> {
        self.inner.shape_x.clone()
    }

    #[getter]
    fn shape_y(&self) -> Vec<usize> {
        self.inner.shape_y.clone()
    }

    #[getter]
    fn descriptor(&self) -> String {
        self.inner.descriptor.clone()
    }

    fn split_size(&self, split: &str) -> PyResult<usize> {
        Ok(self.inner.split_indices(parse_split(split)?).len())
    }

    /// Flat (samples × features) view matrix of one split.
    fn view(&self, split: &str, view: &str) -> PyResult<Vec<Vec<f64>>> {
        let m = self
            .inner
            .view_matrix(parse_split(split)?, parse_view(view)?)
            .map_err(to_py_err)?;
        Ok(matrix_to_rows(&m))
    }

    /// `(piece_id, position, split)` of one sample.
    fn meta(&self, i: usize) -> PyResult<(u64, u64, String)> {
        if i >= self.inner.len() {
            return Err(PyValueError::new_err(format!("sample {i} out of range")));
        }
        let m = self.inner.meta(i);
        Ok((m.piece_id, m.position, m.split.name().to_string()))
    }

    /// Copy with view-Y rows permuted (destroys the pairing).
    fn shuffle_pairing(&self, seed: u64) -> PyDataset {
        PyDataset { inner: self.inner.shuffle_pairing(seed) }
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(to_py_err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<PyDataset> {
        Ok(PyDataset { inner: MultiViewDataset::load(&path).map_err(to_py_err)? })
    }
}

/// Linear-Gaussian pair with constructed population canonical correlations.
#[pyfunction]
#[pyo3(signature = (n, corrs, d_x=None, d_y=None, seed=0))]
fn gen_linear_gaussian(
    n: usize,
    corrs: Vec<f64>,
    d_x: Option<usize>,
    d_y: Option<usize>,
    seed: u64,
) -> PyResult<PyDataset> {
    let d_x = d_x.unwrap_or(corrs.len());
    let d_y = d_y.unwrap_or(corrs.len());
    let inner = datagen::gen_linear_gaussian(n, &corrs, d_x, d_y, seed).map_err(to_py_err)?;
    Ok(PyDataset { inner })
}

/// Nonlinear paired snippets: smooth per-piece latent curves rendered into
/// two view geometries by fixed random maps.
#[pyfunction]
#[pyo3(signature = (pieces=100, snippets_per_piece=50, latent_dim=4, noise=0.1, seed=0, shape_x=None, shape_y=None))]
fn gen_nonlinear_snippets(
    pieces: usize,
    snippets_per_piece: usize,
    latent_dim: usize,
    noise: f64,
    seed: u64,
    shape_x: Option<Vec<usize>>,
    shape_y: Option<Vec<usize>>,
) -> PyResult<PyDataset> {
    let defaults = NonlinearConfig::default();
    let cfg = NonlinearConfig {
        pieces,
        snippets_per_piece,
        latent_dim,
        noise,
        seed,
        shape_x: shape_x.unwrap_or(defaults.shape_x),
        shape_y: shape_y.unwrap_or(defaults.shape_y),
        identical_views: false,
    };
    let inner = datagen::gen_nonlinear_snippets(&cfg).map_err(to_py_err)?;
    Ok(PyDataset { inner })
}

/// A fitted CCA model: training means, normalized projections, correlations.
#[pyclass(name = "CcaModel")]
struct PyCcaModel {
    inner: dcca_core::CcaModel,
}

#[pymethods]
impl PyCcaModel {
    #[getter]
    fn corrs(&self) -> Vec<f64> {
        self.inner.corrs.clone()
    }

    fn project_x(&self, rows: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let m = matrix_from_rows(rows)?;
        Ok(matrix_to_rows(&self.inner.project_x(&m).map_err(to_py_err)?))
    }

    fn project_y(&self, rows: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let m = matrix_from_rows(rows)?;
        Ok(matrix_to_rows(&self.inner.project_y(&m).map_err(to_py_err)?))
    }

    fn truncate(&self, k: usize) -> PyResult<PyCcaModel> {
        Ok(PyCcaModel { inner: self.inner.truncate(k).map_err(to_py_err)? })
    }
}

/// Classical CCA on two feature batches (rows are samples).
#[pyfunction]
#[pyo3(signature = (fx, gy, eps=1e-3))]
fn fit_cca(fx: Vec<Vec<f64>>, gy: Vec<Vec<f64>>, eps: f64) -> PyResult<PyCcaModel> {
    let fx = matrix_from_rows(fx)?;
    let gy = matrix_from_rows(gy)?;
    Ok(PyCcaModel { inner: dcca_core::fit_cca(&fx, &gy, eps).map_err(to_py_err)? })
}

/// Correlation loss of a batch pair. Returns
/// `(loss, grad_fx, grad_gy, corrs)`.
#[pyfunction]
#[pyo3(signature = (fx, gy, eps=1e-3))]
#[allow(clippy::type_complexity)]
fn dcca_loss(
    fx: Vec<Vec<f64>>,
    gy: Vec<Vec<f64>>,
    eps: f64,
) -> PyResult<(f64, Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<f64>)> {
    let fx = matrix_from_rows(fx)?;
    let gy = matrix_from_rows(gy)?;
    let res = dcca_core::dcca_loss(&fx, &gy, eps).map_err(to_py_err)?;
    Ok((
        res.loss,
        matrix_to_rows(&res.grad_fx),
        matrix_to_rows(&res.grad_gy),
        res.corrs,
    ))
}

/// A trained model: both encoders plus the refit CCA projections.
#[pyclass(name = "Checkpoint")]
struct PyCheckpoint {
    inner: trainer::Checkpoint,
}

#[pymethods]
impl PyCheckpoint {
    #[getter]
    fn epochs(&self) -> usize {
        self.inner.epoch
    }

    #[getter]
    fn corrs(&self) -> Vec<f64> {
        self.inner.cca.corrs.clone()
    }

    /// Per-epoch `(epoch, mean_loss, val_corr, lr)` records.
    fn history(&self) -> Vec<(usize, f64, f64, f64)> {
        self.inner
            .history
            .iter()
            .map(|e| (e.epoch, e.mean_loss, e.val_corr, e.lr))
            .collect()
    }

    fn evaluate_correlation(&self, dataset: &PyDataset, split: &str) -> PyResult<f64> {
        trainer::evaluate_correlation(&self.inner, &dataset.inner, parse_split(split)?)
            .map_err(to_py_err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(to_py_err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<PyCheckpoint> {
        Ok(PyCheckpoint { inner: trainer::Checkpoint::load(&path).map_err(to_py_err)? })
    }
}

/// Minibatch SGD-with-momentum training of both encoders against the
/// correlation loss, with a full-train-split CCA refit at the end.
#[pyfunction]
#[pyo3(signature = (dataset, epochs=100, batch_size=100, lr0=0.1, momentum=0.9, halve_every=25, eps=1e-3, seed=0, h=8, arch="desk"))]
#[allow(clippy::too_many_arguments)]
fn train(
    dataset: &PyDataset,
    epochs: usize,
    batch_size: usize,
    lr0: f64,
    momentum: f64,
    halve_every: usize,
    eps: f64,
    seed: u64,
    h: usize,
    arch: &str,
) -> PyResult<PyCheckpoint> {
    let cfg = TrainConfig {
        batch_size,
        lr0,
        momentum,
        halve_every,
        epochs,
        eps,
        seed,
        h,
        arch: Arch::parse(arch).map_err(to_py_err)?,
    };
    Ok(PyCheckpoint { inner: trainer::train(&dataset.inner, &cfg).map_err(to_py_err)? })
}

/// An immutable CCA-space embedding index over one modality.
#[pyclass(name = "SnippetIndex")]
struct PySnippetIndex {
    inner: SnippetIndex,
}

#[pymethods]
impl PySnippetIndex {
    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn modality(&self) -> String {
        self.inner.modality.name().to_string()
    }

    /// Top-k by ascending cosine distance:
    /// `[(snippet_id, piece_id, position, distance), ...]`.
    fn query(&self, q: Vec<f64>, k: usize) -> PyResult<Vec<(u64, u64, u64, f64)>> {
        let res = retrieval::query(&self.inner, &q, k).map_err(to_py_err)?;
        Ok(res
            .ranked
            .iter()
            .map(|&(id, dist)| {
                let rec = &self.inner.records[id as usize];
                (rec.snippet_id, rec.piece_id, rec.position, dist)
            })
            .collect())
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(to_py_err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<PySnippetIndex> {
        Ok(PySnippetIndex { inner: SnippetIndex::load(&path).map_err(to_py_err)? })
    }
}

/// Embeds one modality of a split into the CCA space and indexes it.
#[pyfunction]
#[pyo3(signature = (ckpt, dataset, split="test", modality="image", limit=None))]
fn build_index(
    ckpt: &PyCheckpoint,
    dataset: &PyDataset,
    split: &str,
    modality: &str,
    limit: Option<usize>,
) -> PyResult<PySnippetIndex> {
    let inner = retrieval::build_index(
        &ckpt.inner,
        &dataset.inner,
        parse_split(split)?,
        Modality::parse(modality).map_err(to_py_err)?,
        limit,
    )
    .map_err(to_py_err)?;
    Ok(PySnippetIndex { inner })
}

/// Runs one retrieval direction and returns the metrics as a dict.
#[pyfunction]
#[pyo3(signature = (ckpt, dataset, split="test", direction="audio-to-sheet", limit=None, relaxed_tol=None))]
fn evaluate_retrieval<'py>(
    py: Python<'py>,
    ckpt: &PyCheckpoint,
    dataset: &PyDataset,
    split: &str,
    direction: &str,
    limit: Option<usize>,
    relaxed_tol: Option<u64>,
) -> PyResult<Bound<'py, PyDict>> {
    let direction = match direction {
        "audio-to-sheet" => Direction::AudioToSheet,
        "sheet-to-audio" => Direction::SheetToAudio,
        other => return Err(PyValueError::new_err(format!("unknown direction '{other}'"))),
    };
    let split = parse_split(split)?;
    let limit = limit.unwrap_or_else(|| dataset.inner.split_indices(split).len());
    let report =
        retrieval::evaluate_retrieval(&ckpt.inner, &dataset.inner, split, direction, limit, relaxed_tol)
            .map_err(to_py_err)?;
    let dict = PyDict::new(py);
    dict.set_item("direction", report.direction.name())?;
    dict.set_item("r_at_1", report.r_at_1)?;
    dict.set_item("r_at_5", report.r_at_5)?;
    dict.set_item("r_at_10", report.r_at_10)?;
    dict.set_item("mr", report.median_rank)?;
    dict.set_item("m", report.m)?;
    if let Some(rel) = report.relaxed {
        dict.set_item("relaxed_tol", rel.tolerance)?;
        dict.set_item("relaxed_r_at_1", rel.r_at_1)?;
        dict.set_item("relaxed_r_at_5", rel.r_at_5)?;
        dict.set_item("relaxed_r_at_10", rel.r_at_10)?;
    }
    Ok(dict)
}

#[pyfunction]
fn cosine_distance(a: Vec<f64>, b: Vec<f64>) -> PyResult<f64> {
    retrieval::cosine_distance(&a, &b).map_err(to_py_err)
}

#[pyfunction]
fn recall_at_k(ranks: Vec<usize>, k: usize) -> PyResult<f64> {
    if ranks.is_empty() {
        return Err(PyValueError::new_err("ranks must be non-empty"));
    }
    Ok(retrieval::recall_at_k(&ranks, k))
}

#[pyfunction]
fn median_rank(ranks: Vec<usize>) -> PyResult<usize> {
    if ranks.is_empty() {
        return Err(PyValueError::new_err("ranks must be non-empty"));
    }
    Ok(retrieval::median_rank(&ranks))
}

#[pymodule]
fn dcca(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDataset>()?;
    m.add_class::<PyCcaModel>()?;
    m.add_class::<PyCheckpoint>()?;
    m.add_class::<PySnippetIndex>()?;
    m.add_function(wrap_pyfunction!(gen_linear_gaussian, m)?)?;
    m.add_function(wrap_pyfunction!(gen_nonlinear_snippets, m)?)?;
    m.add_function(wrap_pyfunction!(fit_cca, m)?)?;
    m.add_function(wrap_pyfunction!(dcca_loss, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(build_index, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_retrieval, m)?)?;
    m.add_function(wrap_pyfunction!(cosine_distance, m)?)?;
    m.add_function(wrap_pyfunction!(recall_at_k, m)?)?;
    m.add_function(wrap_pyfunction!(median_rank, m)?)?;
    Ok(())
}
