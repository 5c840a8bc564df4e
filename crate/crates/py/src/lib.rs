//! Python module `mirage`: grids are lists of rows, masks hold 0/1.

use std::path::PathBuf;

use mirage_core::filter::{apply_filter as core_filter, SimilarityQuad, Verdict};
use mirage_core::mask::{BinaryMask, ScoreMap};
use mirage_core::metrics::{ClassDistribution, LabeledScores};
use mirage_core::study::{self, Outcome, TrueSkillParams};
use mirage_core::{maskgen, metrics, Error};
use pyo3::exceptions::{PyConnectionError, PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyOSError::new_err(e.to_string()),
        Error::Backend(_) => PyConnectionError::new_err(e.to_string()),
        Error::Training { .. } => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn grid_dims<T>(rows: &[Vec<T>]) -> Result<(usize, usize), Error> {
    let w = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != w) {
        return Err(Error::validation("rows have different lengths"));
    }
    Ok((rows.len(), w))
}

pub fn to_score_map(rows: &[Vec<f32>]) -> Result<ScoreMap, Error> {
    let (h, w) = grid_dims(rows)?;
    ScoreMap::new(h, w, rows.concat())
}

pub fn to_mask(rows: &[Vec<u8>]) -> Result<BinaryMask, Error> {
    let (h, w) = grid_dims(rows)?;
    BinaryMask::new(h, w, rows.concat())
}

pub fn rows<T: Copy>(values: &[T], width: usize) -> Vec<Vec<T>> {
    values.chunks(width.max(1)).map(<[T]>::to_vec).collect()
}

fn json_to_py(py: Python<'_>, text: String) -> PyResult<Py<PyAny>> {
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

/// Pairwise-ranking AUROC; ties count one half.
#[pyfunction]
fn auroc(scores: Vec<f64>, labels: Vec<bool>) -> PyResult<f64> {
    let s = LabeledScores::new(scores, labels).map_err(py_err)?;
    metrics::auroc(&s).map_err(py_err)
}

/// Violated conditions (`"C1"`, `"C2"`, `"C3"`); an empty list means keep.
#[pyfunction]
fn apply_filter(s_aa: f64, s_nn: f64, s_an: f64, s_na: f64) -> PyResult<Vec<String>> {
    let q = SimilarityQuad::new(s_aa, s_nn, s_an, s_na).map_err(py_err)?;
    Ok(match core_filter(&q) {
        Verdict::Keep => Vec::new(),
        Verdict::Discard(c) => c.iter().map(|c| format!("{c:?}")).collect(),
    })
}

/// Normalized semantic map times structural map.
#[pyfunction]
fn fuse(semantic: Vec<Vec<f32>>, structural: Vec<Vec<f32>>) -> PyResult<Vec<Vec<f32>>> {
    let sem = to_score_map(&semantic).map_err(py_err)?.min_max_normalized();
    let st = to_score_map(&structural).map_err(py_err)?;
    let f = maskgen::fuse(&sem, &st).map_err(py_err)?;
    Ok(rows(f.values(), f.width()))
}

#[pyfunction]
fn binarize(score_map: Vec<Vec<f32>>, tau: f64) -> PyResult<Vec<Vec<u32>>> {
    let m = maskgen::binarize(&to_score_map(&score_map).map_err(py_err)?, tau);
    // u8 rows would surface as `bytes`
    let wide: Vec<u32> = m.values().iter().map(|&v| u32::from(v)).collect();
    Ok(rows(&wide, m.width()))
}

#[pyclass(frozen, name = "Calibration")]
struct PyCalibration {
    #[pyo3(get)]
    category: String,
    #[pyo3(get)]
    tau_star: f64,
    #[pyo3(get)]
    criterion_value: f64,
    #[pyo3(get)]
    num_reference_masks: usize,
}

#[pymethods]
impl PyCalibration {
    fn __repr__(&self) -> String {
        format!(
            "Calibration(category={:?}, tau_star={}, criterion_value={})",
            self.category, self.tau_star, self.criterion_value
        )
    }
}

/// Threshold maximizing balanced pixel accuracy over reference masks.
#[pyfunction]
fn calibrate(category: &str, score_maps: Vec<Vec<Vec<f32>>>, masks: Vec<Vec<Vec<u8>>>) -> PyResult<PyCalibration> {
    let maps = score_maps.iter().map(|m| to_score_map(m)).collect::<Result<Vec<_>, _>>().map_err(py_err)?;
    let refs = masks.iter().map(|m| to_mask(m)).collect::<Result<Vec<_>, _>>().map_err(py_err)?;
    let r = maskgen::calibrate_threshold(category, &maps, &refs).map_err(py_err)?;
    Ok(PyCalibration {
        category: r.category,
        tau_star: r.tau_star,
        criterion_value: r.criterion_value,
        num_reference_masks: r.num_reference_masks,
    })
}

#[pyfunction]
fn inception_score(distributions: Vec<Vec<f64>>) -> PyResult<f64> {
    let d = distributions
        .into_iter()
        .map(ClassDistribution::new)
        .collect::<Result<Vec<_>, _>>()
        .map_err(py_err)?;
    metrics::inception_score(&d).map_err(py_err)
}

#[pyclass(frozen, name = "Rating", skip_from_py_object)]
#[derive(Clone)]
struct PyRating(study::Rating);

#[pymethods]
impl PyRating {
    #[new]
    #[pyo3(signature = (method, mu=None, sigma=None))]
    fn new(method: String, mu: Option<f64>, sigma: Option<f64>) -> Self {
        let mut r = study::Rating::fresh(method, &TrueSkillParams::default());
        r.mu = mu.unwrap_or(r.mu);
        r.sigma = sigma.unwrap_or(r.sigma);
        PyRating(r)
    }

    #[getter]
    fn method(&self) -> &str {
        &self.0.method
    }

    #[getter]
    fn mu(&self) -> f64 {
        self.0.mu
    }

    #[getter]
    fn sigma(&self) -> f64 {
        self.0.sigma
    }

    #[getter]
    fn win_rate(&self) -> Option<f64> {
        self.0.win_rate()
    }

    fn __repr__(&self) -> String {
        format!("Rating({:?}, mu={:.4}, sigma={:.4})", self.0.method, self.0.mu, self.0.sigma)
    }
}

/// Two-player update; `outcome` is `"win"` (first beats second) or `"tie"`.
#[pyfunction]
fn rate_update(first: &PyRating, second: &PyRating, outcome: &str) -> PyResult<(PyRating, PyRating)> {
    let outcome = match outcome {
        "win" => Outcome::Win,
        "tie" => Outcome::Tie,
        o => return Err(PyValueError::new_err(format!("outcome must be \"win\" or \"tie\", got {o:?}"))),
    };
    let (a, b) = study::rate_update(&first.0, &second.0, outcome, &TrueSkillParams::default());
    Ok((PyRating(a), PyRating(b)))
}

/// Replays a JSONL vote log into ranking rows (dicts), best first.
#[pyfunction]
fn rank(py: Python<'_>, votes: PathBuf) -> PyResult<Py<PyAny>> {
    let log = study::read_vote_log(&votes).map_err(py_err)?;
    let rows = study::rank_methods(&log, &TrueSkillParams::default());
    json_to_py(py, serde_json::to_string(&rows).expect("rows serialize"))
}

/// Manifest records as dicts.
#[pyfunction]
fn read_manifest(py: Python<'_>, path: PathBuf) -> PyResult<Py<PyAny>> {
    let records = mirage_core::manifest::read_manifest(&path).map_err(py_err)?;
    json_to_py(py, serde_json::to_string(&records).expect("records serialize"))
}

#[pymodule]
fn mirage(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(auroc, m)?)?;
    m.add_function(wrap_pyfunction!(apply_filter, m)?)?;
    m.add_function(wrap_pyfunction!(fuse, m)?)?;
    m.add_function(wrap_pyfunction!(binarize, m)?)?;
    m.add_function(wrap_pyfunction!(calibrate, m)?)?;
    m.add_function(wrap_pyfunction!(inception_score, m)?)?;
    m.add_function(wrap_pyfunction!(rate_update, m)?)?;
    m.add_function(wrap_pyfunction!(rank, m)?)?;
    m.add_function(wrap_pyfunction!(read_manifest, m)?)?;
    m.add_class::<PyRating>()?;
    m.add_class::<PyCalibration>()?;
    Ok(())
}
