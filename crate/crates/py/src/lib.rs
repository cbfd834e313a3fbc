use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use colorsem_core::color::{self, Lab, Rgb8, WhitePoint, XyY};
use colorsem_core::datasets::builtin_table;
use colorsem_core::evaluation;
use colorsem_core::features::{catalog, CatalogStage};
use colorsem_core::modeling::{self, LassoOptions};
use colorsem_core::pipeline::{self, RunConfig};

fn value_error(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn anyhow_error(e: anyhow::Error) -> PyErr {
    PyValueError::new_err(format!("{e:#}"))
}

fn lab_tuple(c: Lab) -> (f64, f64, f64) {
    (c.l, c.a, c.b)
}

/// CIELAB of an xyY color; the white point defaults to D65 at Y = 100.
#[pyfunction]
#[pyo3(signature = (x, y, big_y, white=None))]
fn xyy_to_lab(x: f64, y: f64, big_y: f64, white: Option<(f64, f64, f64)>) -> PyResult<(f64, f64, f64)> {
    let wp = white.map_or(WhitePoint::D65, |(wx, wy, wz)| WhitePoint::new(wx, wy, wz));
    color::xyy_to_lab(XyY::new(x, y, big_y), wp)
        .map(lab_tuple)
        .map_err(value_error)
}

#[pyfunction]
fn srgb_to_lab(r: u8, g: u8, b: u8) -> (f64, f64, f64) {
    lab_tuple(color::srgb_to_lab(Rgb8::new(r, g, b)))
}

/// (L, c, h) with h in degrees.
#[pyfunction]
fn lab_to_lch(l: f64, a: f64, b: f64) -> (f64, f64, f64) {
    let c = color::lab_to_lch(Lab::new(l, a, b));
    (c.l, c.c, c.h)
}

#[pyfunction]
fn delta_e(p: (f64, f64, f64), q: (f64, f64, f64)) -> f64 {
    color::delta_e_76(Lab::new(p.0, p.1, p.2), Lab::new(q.0, q.1, q.2))
}

/// Rows of a built-in table as (index, label, L, a, b, c, h).
#[pyfunction]
fn color_table(name: &str) -> PyResult<Vec<(usize, String, f64, f64, f64, f64, f64)>> {
    let table = builtin_table(name).map_err(value_error)?;
    Ok(table
        .entries
        .iter()
        .map(|e| (e.index, e.label.clone(), e.lab.l, e.lab.a, e.lab.b, e.lch.c, e.lch.h))
        .collect())
}

#[pyfunction]
#[pyo3(signature = (stage="full"))]
fn catalog_ids(stage: &str) -> PyResult<Vec<String>> {
    let stage: CatalogStage = stage.parse().map_err(value_error)?;
    Ok(catalog(stage).ids())
}

fn to_matrix(x: &[Vec<f64>]) -> PyResult<DMatrix<f64>> {
    let cols = x.first().map_or(0, Vec::len);
    if x.iter().any(|r| r.len() != cols) {
        return Err(PyValueError::new_err("rows have different lengths"));
    }
    Ok(DMatrix::from_fn(x.len(), cols, |i, j| x[i][j]))
}

/// Lasso weights and offset at one penalty.
#[pyfunction]
fn lasso_fit(x: Vec<Vec<f64>>, y: Vec<f64>, lam: f64) -> PyResult<(Vec<f64>, f64)> {
    let fit = modeling::lasso_fit(&to_matrix(&x)?, &y, lam, &LassoOptions::default())
        .map_err(value_error)?;
    Ok((fit.weights, fit.offset))
}

/// Penalties and nonzero counts along the default path.
#[pyfunction]
fn lasso_path(x: Vec<Vec<f64>>, y: Vec<f64>) -> PyResult<(Vec<f64>, Vec<usize>)> {
    let path = modeling::lasso_path(&to_matrix(&x)?, &y, &LassoOptions::default())
        .map_err(value_error)?;
    Ok((path.lambdas(), path.nonzero_counts()))
}

/// Least squares on all columns: (weights, offset, rank).
#[pyfunction]
fn ols_fit(x: Vec<Vec<f64>>, y: Vec<f64>) -> PyResult<(Vec<f64>, f64, usize)> {
    let m = to_matrix(&x)?;
    let support: Vec<usize> = (0..m.ncols()).collect();
    let fit = modeling::ols_fit(&m, &y, &support).map_err(value_error)?;
    Ok((fit.weights, fit.offset, fit.rank))
}

/// Pearson r and its two-tailed p value.
#[pyfunction]
fn pearson_r(xs: Vec<f64>, ys: Vec<f64>) -> PyResult<(f64, f64)> {
    evaluation::pearson_r(&xs, &ys).map_err(value_error)
}

/// Fisher z for two independent correlations and its two-tailed p value.
#[pyfunction]
fn fisher_z(r1: f64, n1: usize, r2: f64, n2: usize) -> PyResult<(f64, f64)> {
    evaluation::fisher_z_independent(r1, n1, r2, n2).map_err(value_error)
}

/// Build a run configuration from `key=value` settings, as in a config file.
fn config(settings: Option<Vec<(String, String)>>) -> PyResult<RunConfig> {
    let mut cfg = RunConfig::default();
    for (k, v) in settings.unwrap_or_default() {
        cfg.set(&k, &v).map_err(anyhow_error)?;
    }
    cfg.validate().map_err(anyhow_error)?;
    Ok(cfg)
}

fn path_str(p: PathBuf) -> String {
    p.display().to_string()
}

/// Featurize a corpus; returns the design matrix path.
#[pyfunction]
#[pyo3(signature = (settings=None))]
fn featurize(settings: Option<Vec<(String, String)>>) -> PyResult<String> {
    let cfg = config(settings)?;
    pipeline::run_featurize(&cfg).map_err(anyhow_error)?;
    Ok(path_str(cfg.output.join(pipeline::DESIGN_MATRIX_FILE)))
}

/// Cross-validation curve as (k, mean MSE) pairs.
#[pyfunction]
#[pyo3(signature = (matrix, settings=None))]
fn cv_curve(matrix: &str, settings: Option<Vec<(String, String)>>) -> PyResult<Vec<(usize, f64)>> {
    let cfg = config(settings)?;
    let curve = pipeline::run_cv_curve(&cfg, Path::new(matrix)).map_err(anyhow_error)?;
    Ok(curve.points.iter().map(|p| (p.k, p.mean_mse)).collect())
}

/// Train a model; returns its feature ids, weights and offset.
#[pyfunction]
#[pyo3(signature = (matrix, settings=None, loo_estimates=false))]
fn train(
    matrix: &str,
    settings: Option<Vec<(String, String)>>,
    loo_estimates: bool,
) -> PyResult<(Vec<String>, Vec<f64>, f64)> {
    let cfg = config(settings)?;
    let model = pipeline::run_train(&cfg, Path::new(matrix), loo_estimates).map_err(anyhow_error)?;
    Ok((
        model.features.iter().map(ToString::to_string).collect(),
        model.weights,
        model.offset,
    ))
}

/// Apply a model file to the configured corpus; returns the estimates path.
#[pyfunction]
#[pyo3(signature = (model, settings=None))]
fn estimate(model: &str, settings: Option<Vec<(String, String)>>) -> PyResult<String> {
    let cfg = config(settings)?;
    pipeline::run_estimate(&cfg, Path::new(model)).map_err(anyhow_error)?;
    Ok(path_str(cfg.output.join(pipeline::ESTIMATES_FILE)))
}

/// Overall (r, p, n) of estimates against ratings ("fruit" or a CSV path).
#[pyfunction]
#[pyo3(signature = (estimates, ratings, settings=None))]
fn evaluate(
    estimates: &str,
    ratings: &str,
    settings: Option<Vec<(String, String)>>,
) -> PyResult<(f64, f64, usize)> {
    let cfg = config(settings)?;
    let report = pipeline::run_evaluate(&cfg, Path::new(estimates), ratings).map_err(anyhow_error)?;
    Ok((report.overall.r, report.overall.p, report.overall.n))
}

#[pymodule]
fn colorsem(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(xyy_to_lab, m)?)?;
    m.add_function(wrap_pyfunction!(srgb_to_lab, m)?)?;
    m.add_function(wrap_pyfunction!(lab_to_lch, m)?)?;
    m.add_function(wrap_pyfunction!(delta_e, m)?)?;
    m.add_function(wrap_pyfunction!(color_table, m)?)?;
    m.add_function(wrap_pyfunction!(catalog_ids, m)?)?;
    m.add_function(wrap_pyfunction!(lasso_fit, m)?)?;
    m.add_function(wrap_pyfunction!(lasso_path, m)?)?;
    m.add_function(wrap_pyfunction!(ols_fit, m)?)?;
    m.add_function(wrap_pyfunction!(pearson_r, m)?)?;
    m.add_function(wrap_pyfunction!(fisher_z, m)?)?;
    m.add_function(wrap_pyfunction!(featurize, m)?)?;
    m.add_function(wrap_pyfunction!(cv_curve, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(estimate, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    Ok(())
}
