//! Python bindings. Matrices cross the boundary as lists of rows.

use std::path::PathBuf;

use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use focusmatch_core::attention::{attend, AttentionInputs};
use focusmatch_core::geoeval::{self, EvalConfig, SceneMode};
use focusmatch_core::gradcheck::{run_gradcheck, GradcheckConfig};
use focusmatch_core::image::Image;
use focusmatch_core::matcher::{self, MatcherConfig, ModelWeights};
use focusmatch_core::numgrid::Mat;
use focusmatch_core::transformer::{AttentionKind, TransformerConfig};
use focusmatch_core::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyOSError::new_err(e.to_string()),
        Error::Config(_) | Error::Shape(_) | Error::Format { .. } | Error::Truncated { .. } => {
            PyValueError::new_err(e.to_string())
        }
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn to_mat(rows: Vec<Vec<f64>>) -> PyResult<Mat> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != cols) {
        return Err(PyValueError::new_err("rows have different lengths"));
    }
    let n = rows.len();
    Mat::from_vec(n, cols, rows.into_iter().flatten().collect()).map_err(py_err)
}

fn from_mat(m: &Mat) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|i| m.row(i).to_vec()).collect()
}

/// Focused feature map applied row-wise.
#[pyfunction]
#[pyo3(signature = (x, p = 3.0, eps = 1e-6))]
fn focused_map(x: Vec<Vec<f64>>, p: f64, eps: f64) -> PyResult<Vec<Vec<f64>>> {
    Ok(from_mat(&focusmatch_core::attention::focused_map(&to_mat(x)?, p, eps)))
}

/// Attention output for `variant` in {"softmax", "linear", "focused"}.
#[pyfunction]
fn attention(variant: &str, q: Vec<Vec<f64>>, k: Vec<Vec<f64>>, v: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
    let inp = AttentionInputs::new(to_mat(q)?, to_mat(k)?, to_mat(v)?).map_err(py_err)?;
    let kind = AttentionKind::from_name(variant).map_err(py_err)?;
    let out = attend(&kind.variant(inp.q.cols()), &inp).map_err(py_err)?;
    Ok(from_mat(&out))
}

/// Dual-softmax confidence matrix of a similarity matrix.
#[pyfunction]
fn dual_softmax(s: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
    Ok(from_mat(&matcher::dual_softmax(&to_mat(s)?)))
}

/// Mutual nearest neighbours as `(i, j, conf)`.
#[pyfunction]
#[pyo3(signature = (p, threshold = 0.2))]
fn mnn_filter(p: Vec<Vec<f64>>, threshold: f64) -> PyResult<Vec<(usize, usize, f64)>> {
    Ok(matcher::mnn_filter(&to_mat(p)?, threshold)
        .into_iter()
        .map(|c| (c.i, c.j, c.conf))
        .collect())
}

/// Pose AUC per threshold; `inf` marks a failed pair.
#[pyfunction]
#[pyo3(signature = (errors, thresholds = vec![5.0, 10.0, 20.0]))]
fn auc(errors: Vec<f64>, thresholds: Vec<f64>) -> PyResult<Vec<f64>> {
    geoeval::auc(&errors, &thresholds).map_err(py_err)
}

/// Synthetic relative-pose evaluation; returns the report as JSON text.
#[pyfunction]
#[pyo3(signature = (pairs = 20, seed = 0, mode = "injection", noise = 0.0, ransac_iters = 1000))]
fn evaluate(py: Python<'_>, pairs: usize, seed: u64, mode: &str, noise: f64, ransac_iters: usize) -> PyResult<String> {
    let mut cfg = EvalConfig {
        pairs,
        seed,
        mode: SceneMode::from_name(mode).map_err(py_err)?,
        ransac_iters,
        ..Default::default()
    };
    cfg.scene.noise = noise;
    let report = py.detach(|| geoeval::evaluate(&cfg, None)).map_err(py_err)?;
    Ok(report.to_json())
}

/// Matches two image files; returns `(xa, ya, xb, yb, conf)` records.
#[pyfunction]
#[pyo3(signature = (path_a, path_b, variant = "focused", seed = 0, weights = None))]
fn match_images(
    py: Python<'_>,
    path_a: PathBuf,
    path_b: PathBuf,
    variant: &str,
    seed: u64,
    weights: Option<PathBuf>,
) -> PyResult<Vec<(f64, f64, f64, f64, f64)>> {
    let cfg = TransformerConfig {
        attention: AttentionKind::from_name(variant).map_err(py_err)?,
        seed,
        ..Default::default()
    };
    let set = py
        .detach(|| {
            let a = Image::load(&path_a)?;
            let b = Image::load(&path_b)?;
            let w = match &weights {
                Some(p) => ModelWeights::load(p, &cfg)?,
                None => ModelWeights::init_seeded(seed, &cfg),
            };
            matcher::match_pipeline(&a, &b, &w, &cfg, &MatcherConfig::default())
        })
        .map_err(py_err)?;
    Ok(set.refined.iter().map(|m| (m.xa, m.ya, m.xb, m.yb, m.conf)).collect())
}

/// Finite-difference gradient check; returns `(variant, seed, max_rel_error)`.
#[pyfunction]
#[pyo3(signature = (seeds = 5, h = 1e-5))]
fn gradcheck(seeds: u64, h: f64) -> PyResult<Vec<(String, u64, f64)>> {
    let cfg = GradcheckConfig {
        seeds: (0..seeds).collect(),
        h,
        ..Default::default()
    };
    Ok(run_gradcheck(&cfg)
        .map_err(py_err)?
        .into_iter()
        .map(|e| {
            let err = e.max_error();
            (e.variant, e.seed, err)
        })
        .collect())
}

#[pymodule]
fn focusmatch(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(focused_map, m)?)?;
    m.add_function(wrap_pyfunction!(attention, m)?)?;
    m.add_function(wrap_pyfunction!(dual_softmax, m)?)?;
    m.add_function(wrap_pyfunction!(mnn_filter, m)?)?;
    m.add_function(wrap_pyfunction!(auc, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(match_images, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    Ok(())
}
