//! Sparse feature selection and linear models over design matrices.
//!
//! The lasso objective is `(1/2n)·‖y − Xw − b‖² + λ‖w‖₁` with an unpenalized
//! offset `b`. Features are not standardized: they are all fractions on the
//! same `[0, 1]` scale. The solver is cyclic coordinate descent on the
//! centered Gram matrix.

use std::collections::BTreeMap;

use log::warn;
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::categorization::CategoryModel;
use crate::corpus::CorpusManifest;
use crate::datasets::{ColorTable, ConceptColorMatrix, ConceptSet, DatasetError};
use crate::features::{
    canonical_records, load_context, with_pool, CatalogStage, DesignMatrix, FeatureCatalog,
    FeatureError, FeatureSpec, TargetColor,
};
use crate::image_pipeline::{ChanVeseParams, FigureSegmenter};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("non-finite value in the design matrix or response")]
    NonFinite,
    #[error("design matrix has no rows or no columns")]
    Empty,
    #[error("response length {y} does not match {rows} rows")]
    LengthMismatch { rows: usize, y: usize },
    #[error("design matrix has no response column")]
    MissingResponse,
    #[error("lambda must be non-negative and finite, got {0}")]
    BadLambda(f64),
    #[error("coordinate descent did not converge within {iterations} sweeps at lambda {lambda}")]
    NotConverged { lambda: f64, iterations: usize },
    #[error("cross-validation needs at least 2 concepts, found {0}")]
    TooFewConcepts(usize),
    #[error("k must be at least 1")]
    ZeroK,
    #[error("k = {k} exceeds the {columns} available features")]
    KTooLarge { k: usize, columns: usize },
    #[error("no lambda selects any feature")]
    NothingSelected,
    #[error("model has no features")]
    EmptyModel,
    #[error("model weights are not finite")]
    NonFiniteWeights,
    #[error("model has {features} features but {weights} weights")]
    WeightCount { features: usize, weights: usize },
    #[error("feature {0} is not in the design matrix")]
    MissingFeature(String),
    #[error("corpus has no images")]
    EmptyCorpus,
    #[error("model json: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("thread pool: {0}")]
    Pool(#[from] rayon::ThreadPoolBuildError),
}

/// Solver and λ-grid settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LassoOptions {
    /// Stop when the largest coordinate update in a sweep falls below this.
    pub tolerance: f64,
    pub max_iterations: usize,
    pub n_lambdas: usize,
    /// Smallest λ on the grid as a fraction of λ_max.
    pub min_ratio: f64,
}

impl Default for LassoOptions {
    fn default() -> Self {
        Self {
            tolerance: 1e-7,
            max_iterations: 100_000,
            n_lambdas: 100,
            min_ratio: 1e-4,
        }
    }
}

/// Centered second moments of a row subset.
#[derive(Debug, Clone)]
pub struct Gram {
    pub n: usize,
    pub x_mean: Vec<f64>,
    pub y_mean: f64,
    /// `X̃ᵀX̃ / n`
    pub xx: DMatrix<f64>,
    /// `X̃ᵀỹ / n`
    pub xy: Vec<f64>,
    /// For a column identical to an earlier one, the index of the first
    /// such column. Copies keep a zero weight.
    pub duplicate_of: Vec<Option<usize>>,
}

/// Map every column to the first earlier column with identical values.
fn find_duplicates(x: &DMatrix<f64>) -> Vec<Option<usize>> {
    use std::collections::hash_map::DefaultHasher;
    use std::collections::HashMap;
    use std::hash::{Hash, Hasher};
    let mut seen: HashMap<u64, Vec<usize>> = HashMap::new();
    let mut out = vec![None; x.ncols()];
    for j in 0..x.ncols() {
        let col = x.column(j);
        let mut h = DefaultHasher::new();
        for v in col.iter() {
            // fold -0.0 into 0.0
            (v + 0.0).to_bits().hash(&mut h);
        }
        let bucket = seen.entry(h.finish()).or_default();
        match bucket.iter().find(|&&k| x.column(k) == col) {
            Some(&k) => out[j] = Some(k),
            None => bucket.push(j),
        }
    }
    out
}

impl Gram {
    pub fn new(x: &DMatrix<f64>, y: &[f64]) -> Result<Self, ModelError> {
        let rows: Vec<usize> = (0..x.nrows()).collect();
        Self::from_rows(x, y, &rows)
    }

    pub fn from_rows(x: &DMatrix<f64>, y: &[f64], rows: &[usize]) -> Result<Self, ModelError> {
        if y.len() != x.nrows() {
            return Err(ModelError::LengthMismatch {
                rows: x.nrows(),
                y: y.len(),
            });
        }
        if rows.is_empty() || x.ncols() == 0 {
            return Err(ModelError::Empty);
        }
        let p = x.ncols();
        let n = rows.len();
        let mut xc = DMatrix::zeros(n, p);
        let mut yc = DVector::zeros(n);
        for (r, &i) in rows.iter().enumerate() {
            for j in 0..p {
                xc[(r, j)] = x[(i, j)];
            }
            yc[r] = y[i];
        }
        if xc.iter().chain(yc.iter()).any(|v| !v.is_finite()) {
            return Err(ModelError::NonFinite);
        }
        let duplicate_of = find_duplicates(&xc);
        let x_mean: Vec<f64> = (0..p).map(|j| xc.column(j).sum() / n as f64).collect();
        let y_mean = yc.sum() / n as f64;
        for j in 0..p {
            xc.column_mut(j).add_scalar_mut(-x_mean[j]);
        }
        yc.add_scalar_mut(-y_mean);
        let inv_n = 1.0 / n as f64;
        let xx = xc.tr_mul(&xc) * inv_n;
        let xy = (xc.tr_mul(&yc) * inv_n).iter().copied().collect();
        Ok(Self {
            n,
            x_mean,
            y_mean,
            xx,
            xy,
            duplicate_of,
        })
    }

    /// Whether coordinate descent may move this column's weight.
    pub fn is_free(&self, j: usize) -> bool {
        self.duplicate_of[j].is_none() && self.xx[(j, j)] > 0.0
    }

    pub fn n_features(&self) -> usize {
        self.xy.len()
    }

    /// Smallest λ at which every weight is zero.
    pub fn lambda_max(&self) -> f64 {
        self.xy.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Gradient of the smooth part of the objective at `w`.
    pub fn gradient(&self, w: &[f64]) -> Vec<f64> {
        let w = DVector::from_column_slice(w);
        let q = &self.xx * w;
        self.xy.iter().zip(q.iter()).map(|(c, q)| q - c).collect()
    }

    /// Largest violation of the lasso optimality conditions at `w`.
    pub fn kkt_violation(&self, w: &[f64], lambda: f64) -> f64 {
        self.gradient(w)
            .iter()
            .zip(w)
            .map(|(g, w)| {
                if *w == 0.0 {
                    (g.abs() - lambda).max(0.0)
                } else {
                    (g + w.signum() * lambda).abs()
                }
            })
            .fold(0.0, f64::max)
    }

    /// `(1/2n)‖ỹ − X̃w‖² + λ‖w‖₁` up to the constant `‖ỹ‖²/2n`.
    pub fn objective(&self, w: &[f64], lambda: f64) -> f64 {
        let wv = DVector::from_column_slice(w);
        let quad = 0.5 * wv.dot(&(&self.xx * &wv));
        let lin: f64 = self.xy.iter().zip(w).map(|(c, w)| c * w).sum();
        quad - lin + lambda * w.iter().map(|w| w.abs()).sum::<f64>()
    }

    pub fn offset(&self, w: &[f64]) -> f64 {
        self.y_mean - self.x_mean.iter().zip(w).map(|(m, w)| m * w).sum::<f64>()
    }
}

fn soft_threshold(v: f64, t: f64) -> f64 {
    if v > t {
        v - t
    } else if v < -t {
        v + t
    } else {
        0.0
    }
}

/// Sweeps between active-set steps.
const POLISH_EVERY: usize = 50;

/// Cyclic coordinate descent from the warm start in `w`.
fn coordinate_descent(
    gram: &Gram,
    lambda: f64,
    w: &mut [f64],
    opts: &LassoOptions,
) -> Result<usize, ModelError> {
    let p = gram.n_features();
    let xx = &gram.xx;
    // q = X̃ᵀX̃w / n, kept in sync with w
    let mut q: Vec<f64> = (0..p)
        .map(|k| (0..p).map(|j| xx[(k, j)] * w[j]).sum())
        .collect();
    for sweep in 1..=opts.max_iterations {
        let mut max_delta = 0.0f64;
        for j in 0..p {
            if !gram.is_free(j) {
                if w[j] != 0.0 {
                    for (k, qk) in q.iter_mut().enumerate() {
                        *qk -= w[j] * xx[(k, j)];
                    }
                    w[j] = 0.0;
                }
                continue;
            }
            let gjj = xx[(j, j)];
            let rho = gram.xy[j] - q[j] + gjj * w[j];
            let new = soft_threshold(rho, lambda) / gjj;
            let delta = new - w[j];
            if delta != 0.0 {
                for (k, qk) in q.iter_mut().enumerate() {
                    *qk += delta * xx[(k, j)];
                }
                w[j] = new;
                max_delta = max_delta.max(delta.abs());
            }
        }
        if max_delta < opts.tolerance {
            return Ok(sweep);
        }
        if sweep % POLISH_EVERY == 0 && active_set_descent(gram, lambda, w) {
            for (k, qk) in q.iter_mut().enumerate() {
                *qk = (0..p).map(|j| xx[(k, j)] * w[j]).sum();
            }
        }
    }
    Err(ModelError::NotConverged {
        lambda,
        iterations: opts.max_iterations,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LassoFit {
    pub lambda: f64,
    pub weights: Vec<f64>,
    pub offset: f64,
    pub sweeps: usize,
}

impl LassoFit {
    pub fn nonzeros(&self) -> usize {
        self.weights.iter().filter(|w| **w != 0.0).count()
    }

    pub fn support(&self) -> Vec<usize> {
        (0..self.weights.len())
            .filter(|&j| self.weights[j] != 0.0)
            .collect()
    }
}

fn check_lambda(lambda: f64) -> Result<(), ModelError> {
    if lambda.is_finite() && lambda >= 0.0 {
        Ok(())
    } else {
        Err(ModelError::BadLambda(lambda))
    }
}

/// A descent direction on the current support with fixed signs. `bounded`
/// means the restricted minimum lies at step 1; otherwise the objective
/// falls without bound along the ray until some weight reaches zero.
struct SupportStep {
    support: Vec<usize>,
    direction: Vec<f64>,
    bounded: bool,
}

fn support_step(gram: &Gram, lambda: f64, w: &[f64]) -> Option<SupportStep> {
    let support: Vec<usize> = (0..w.len()).filter(|&j| w[j] != 0.0).collect();
    let k = support.len();
    if k == 0 {
        return None;
    }
    let g = DMatrix::from_fn(k, k, |a, b| gram.xx[(support[a], support[b])]);
    // negative gradient of the restricted objective
    let r = DVector::from_fn(k, |a, _| {
        let j = support[a];
        let gw: f64 = support.iter().map(|&i| gram.xx[(j, i)] * w[i]).sum();
        gram.xy[j] - lambda * w[j].signum() - gw
    });
    let eig = g.symmetric_eigen();
    let top = eig.eigenvalues.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if top == 0.0 {
        return None;
    }
    let cutoff = top * k as f64 * 1e-12;
    let mut range = DVector::zeros(k);
    let mut null = DVector::zeros(k);
    for (i, &ev) in eig.eigenvalues.iter().enumerate() {
        let q = eig.eigenvectors.column(i);
        let coef = q.dot(&r);
        if ev > cutoff {
            range += q * (coef / ev);
        } else {
            null += q * coef;
        }
    }
    let bounded = null.norm() <= 1e-12 * r.norm().max(f64::MIN_POSITIVE);
    let direction = if bounded { range } else { null };
    if direction.iter().any(|v| !v.is_finite()) || direction.iter().all(|v| *v == 0.0) {
        return None;
    }
    Some(SupportStep {
        support,
        direction: direction.iter().copied().collect(),
        bounded,
    })
}

impl SupportStep {
    /// Largest step before a weight changes sign, and the weight that blocks.
    fn limit(&self, w: &[f64]) -> (f64, Option<usize>) {
        let mut t = if self.bounded { 1.0 } else { f64::INFINITY };
        let mut blocking = None;
        for (d, &j) in self.direction.iter().zip(&self.support) {
            if *d != 0.0 && d.signum() != w[j].signum() {
                let tj = -w[j] / d;
                if tj <= t {
                    t = tj;
                    blocking = Some(j);
                }
            }
        }
        (t, blocking)
    }

    fn apply(&self, w: &[f64], t: f64, blocking: Option<usize>) -> Vec<f64> {
        let mut cand = w.to_vec();
        for (d, &j) in self.direction.iter().zip(&self.support) {
            cand[j] = w[j] + t * d;
            if cand[j].signum() != w[j].signum() {
                cand[j] = 0.0;
            }
        }
        if let Some(j) = blocking {
            cand[j] = 0.0;
        }
        cand
    }
}

/// Jump to the exact solution on the current support. Accepted only if
/// every sign survives and the KKT violation does not grow.
fn polish(gram: &Gram, lambda: f64, w: &mut [f64]) -> bool {
    let Some(step) = support_step(gram, lambda, w) else {
        return false;
    };
    if !step.bounded {
        return false;
    }
    let (t, blocking) = step.limit(w);
    if blocking.is_some() || t < 1.0 {
        return false;
    }
    let cand = step.apply(w, 1.0, None);
    if cand.iter().zip(w.iter()).any(|(c, v)| (*v != 0.0) != (*c != 0.0)) {
        return false;
    }
    if gram.kkt_violation(&cand, lambda) <= gram.kkt_violation(w, lambda) {
        w.copy_from_slice(&cand);
        true
    } else {
        false
    }
}

/// Move along the support step, stopping where the first weight reaches
/// zero and dropping it. Kept only if the computed objective falls.
fn active_set_step(gram: &Gram, lambda: f64, w: &mut [f64]) -> bool {
    let Some(step) = support_step(gram, lambda, w) else {
        return false;
    };
    let (t, blocking) = step.limit(w);
    if !t.is_finite() {
        return false;
    }
    let cand = step.apply(w, t, blocking);
    if gram.objective(&cand, lambda) < gram.objective(w, lambda) {
        w.copy_from_slice(&cand);
        true
    } else {
        false
    }
}

/// Repeat support steps until one lands on the restricted minimum or
/// stops improving.
fn active_set_descent(gram: &Gram, lambda: f64, w: &mut [f64]) -> bool {
    let mut moved = false;
    for _ in 0..w.len() {
        let before = w.iter().filter(|v| **v != 0.0).count();
        if !active_set_step(gram, lambda, w) {
            break;
        }
        moved = true;
        if w.iter().filter(|v| **v != 0.0).count() == before {
            break;
        }
    }
    moved
}

pub fn lasso_fit_gram(
    gram: &Gram,
    lambda: f64,
    warm: Option<&[f64]>,
    opts: &LassoOptions,
) -> Result<LassoFit, ModelError> {
    check_lambda(lambda)?;
    let mut w = warm.map_or_else(|| vec![0.0; gram.n_features()], <[f64]>::to_vec);
    let sweeps = coordinate_descent(gram, lambda, &mut w, opts)?;
    polish(gram, lambda, &mut w);
    Ok(LassoFit {
        lambda,
        offset: gram.offset(&w),
        weights: w,
        sweeps,
    })
}

pub fn lasso_fit(
    x: &DMatrix<f64>,
    y: &[f64],
    lambda: f64,
    opts: &LassoOptions,
) -> Result<LassoFit, ModelError> {
    check_lambda(lambda)?;
    lasso_fit_gram(&Gram::new(x, y)?, lambda, None, opts)
}

/// `n` log-spaced values from `lambda_max` down to `min_ratio · lambda_max`.
pub fn lambda_grid(lambda_max: f64, n: usize, min_ratio: f64) -> Vec<f64> {
    if n == 0 || lambda_max <= 0.0 {
        return Vec::new();
    }
    if n == 1 {
        return vec![lambda_max];
    }
    let lo = min_ratio.ln();
    (0..n)
        .map(|i| {
            if i == 0 {
                lambda_max
            } else {
                lambda_max * (lo * i as f64 / (n - 1) as f64).exp()
            }
        })
        .collect()
}

/// Lasso solutions along a descending λ grid.
#[derive(Debug, Clone, PartialEq)]
pub struct RegularizationPath {
    pub fits: Vec<LassoFit>,
}

impl RegularizationPath {
    pub fn lambdas(&self) -> Vec<f64> {
        self.fits.iter().map(|f| f.lambda).collect()
    }

    pub fn nonzero_counts(&self) -> Vec<usize> {
        self.fits.iter().map(LassoFit::nonzeros).collect()
    }
}

pub fn lasso_path_gram(
    gram: &Gram,
    lambdas: &[f64],
    opts: &LassoOptions,
) -> Result<RegularizationPath, ModelError> {
    let mut fits: Vec<LassoFit> = Vec::with_capacity(lambdas.len());
    for &lambda in lambdas {
        let warm = fits.last().map(|f| f.weights.as_slice());
        fits.push(lasso_fit_gram(gram, lambda, warm, opts)?);
    }
    Ok(RegularizationPath { fits })
}

/// Path over the default grid for this data.
pub fn lasso_path(
    x: &DMatrix<f64>,
    y: &[f64],
    opts: &LassoOptions,
) -> Result<RegularizationPath, ModelError> {
    let gram = Gram::new(x, y)?;
    let grid = lambda_grid(gram.lambda_max(), opts.n_lambdas, opts.min_ratio);
    lasso_path_gram(&gram, &grid, opts)
}

/// Mean held-out MSE by nonzero count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvPoint {
    pub k: usize,
    pub mean_mse: f64,
    /// Folds whose path reached this count.
    pub folds: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvCurve {
    pub n_folds: usize,
    pub points: Vec<CvPoint>,
}

impl CvCurve {
    pub fn mse(&self, k: usize) -> Option<f64> {
        self.points.iter().find(|p| p.k == k).map(|p| p.mean_mse)
    }

    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<(), csv::Error> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["k", "mean_mse", "folds"])?;
        for p in &self.points {
            out.write_record([p.k.to_string(), p.mean_mse.to_string(), p.folds.to_string()])?;
        }
        out.flush()?;
        Ok(())
    }
}

fn response(matrix: &DesignMatrix) -> Result<&[f64], ModelError> {
    matrix.y.as_deref().ok_or(ModelError::MissingResponse)
}

/// Training and held-out row indices for one held-out concept.
pub fn fold_rows(matrix: &DesignMatrix, held_out: &str) -> (Vec<usize>, Vec<usize>) {
    let (test, train): (Vec<usize>, Vec<usize>) =
        (0..matrix.n_rows()).partition(|&i| matrix.rows[i].concept == held_out);
    debug_assert!(train.iter().all(|&i| matrix.rows[i].concept != held_out));
    (train, test)
}

fn mse_on(x: &DMatrix<f64>, y: &[f64], rows: &[usize], weights: &[f64], offset: f64) -> f64 {
    let support: Vec<(usize, f64)> = weights
        .iter()
        .enumerate()
        .filter(|(_, w)| **w != 0.0)
        .map(|(j, w)| (j, *w))
        .collect();
    let sse: f64 = rows
        .iter()
        .map(|&i| {
            let pred = offset + support.iter().map(|&(j, w)| w * x[(i, j)]).sum::<f64>();
            (y[i] - pred).powi(2)
        })
        .sum();
    sse / rows.len() as f64
}

/// Leave-one-concept-out cross-validation of the lasso path.
///
/// Each fold fits a path on the remaining concepts and records held-out MSE
/// per nonzero count, keeping the minimum when several λ share a count.
/// Folds are then averaged per count.
pub fn loo_cv_curve(
    matrix: &DesignMatrix,
    opts: &LassoOptions,
    jobs: usize,
) -> Result<CvCurve, ModelError> {
    let y = response(matrix)?;
    let concepts = matrix.concepts();
    if concepts.len() < 2 {
        return Err(ModelError::TooFewConcepts(concepts.len()));
    }
    let per_fold: Vec<BTreeMap<usize, f64>> = with_pool(jobs, || {
        concepts
            .par_iter()
            .map(|held_out| {
                let (train, test) = fold_rows(matrix, held_out);
                let gram = Gram::from_rows(&matrix.x, y, &train)?;
                let grid = lambda_grid(gram.lambda_max(), opts.n_lambdas, opts.min_ratio);
                let path = lasso_path_gram(&gram, &grid, opts)?;
                let mut best: BTreeMap<usize, f64> = BTreeMap::new();
                for fit in &path.fits {
                    let mse = mse_on(&matrix.x, y, &test, &fit.weights, fit.offset);
                    best.entry(fit.nonzeros())
                        .and_modify(|m| *m = m.min(mse))
                        .or_insert(mse);
                }
                Ok(best)
            })
            .collect::<Result<Vec<_>, ModelError>>()
    })??;
    let mut agg: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for fold in &per_fold {
        for (&k, &mse) in fold {
            let e = agg.entry(k).or_insert((0.0, 0));
            e.0 += mse;
            e.1 += 1;
        }
    }
    Ok(CvCurve {
        n_folds: concepts.len(),
        points: agg
            .into_iter()
            .map(|(k, (sum, folds))| CvPoint {
                k,
                mean_mse: sum / folds as f64,
                folds,
            })
            .collect(),
    })
}

/// Result of choosing λ for a target feature count.
#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub requested: usize,
    pub fit: LassoFit,
}

impl Selection {
    pub fn support(&self) -> Vec<usize> {
        self.fit.support()
    }

    pub fn shortfall(&self) -> usize {
        self.requested - self.fit.nonzeros()
    }
}

const BISECTION_STEPS: usize = 60;

/// Largest λ whose lasso solution has exactly `k` nonzero weights.
///
/// Scans the default grid, then bisects (in log λ) any interval where the
/// count jumps over `k`. When no λ gives exactly `k`, returns the solution
/// with the largest count below `k` and logs the shortfall.
pub fn select_features_gram(
    gram: &Gram,
    k: usize,
    opts: &LassoOptions,
) -> Result<Selection, ModelError> {
    let p = gram.n_features();
    if k == 0 {
        return Err(ModelError::ZeroK);
    }
    if k > p {
        return Err(ModelError::KTooLarge { k, columns: p });
    }
    let grid = lambda_grid(gram.lambda_max(), opts.n_lambdas, opts.min_ratio);
    let mut path = lasso_path_gram(gram, &grid, opts)?;
    if path.fits.last().is_some_and(|f| f.nonzeros() < k) {
        // extend to the unpenalized solution
        let warm = path.fits.last().map(|f| f.weights.clone());
        path.fits.push(lasso_fit_gram(gram, 0.0, warm.as_deref(), opts)?);
    }
    let choose = |fit: &LassoFit| Selection {
        requested: k,
        fit: fit.clone(),
    };
    if let Some(fit) = path.fits.iter().find(|f| f.nonzeros() == k) {
        return Ok(choose(fit));
    }
    for pair in path.fits.windows(2) {
        let (hi, lo) = (&pair[0], &pair[1]);
        if hi.nonzeros() < k && lo.nonzeros() > k {
            let (mut upper, mut lower) = (hi.clone(), lo.clone());
            for _ in 0..BISECTION_STEPS {
                let mid = if lower.lambda > 0.0 {
                    (upper.lambda * lower.lambda).sqrt()
                } else {
                    upper.lambda / 2.0
                };
                let fit = lasso_fit_gram(gram, mid, Some(&upper.weights), opts)?;
                match fit.nonzeros().cmp(&k) {
                    std::cmp::Ordering::Equal => return Ok(choose(&fit)),
                    std::cmp::Ordering::Less => upper = fit,
                    std::cmp::Ordering::Greater => lower = fit,
                }
            }
        }
    }
    let fallback = path
        .fits
        .iter()
        .filter(|f| f.nonzeros() < k && f.nonzeros() > 0)
        .max_by(|a, b| {
            a.nonzeros()
                .cmp(&b.nonzeros())
                .then(a.lambda.total_cmp(&b.lambda))
        })
        .ok_or(ModelError::NothingSelected)?;
    warn!(
        "no lambda yields exactly {k} features; using {} (lambda {})",
        fallback.nonzeros(),
        fallback.lambda
    );
    Ok(choose(fallback))
}

pub fn select_features(
    x: &DMatrix<f64>,
    y: &[f64],
    k: usize,
    opts: &LassoOptions,
) -> Result<Selection, ModelError> {
    select_features_gram(&Gram::new(x, y)?, k, opts)
}

/// Least-squares weights with an offset.
#[derive(Debug, Clone, PartialEq)]
pub struct OlsFit {
    pub weights: Vec<f64>,
    pub offset: f64,
    pub rank: usize,
}

impl OlsFit {
    pub fn rank_deficient(&self) -> bool {
        self.rank < self.weights.len()
    }
}

/// Ordinary least squares on the columns in `support` plus an offset.
///
/// A rank-deficient design is solved with the pseudo-inverse and reported
/// through [`OlsFit::rank`].
pub fn ols_fit(x: &DMatrix<f64>, y: &[f64], support: &[usize]) -> Result<OlsFit, ModelError> {
    let rows: Vec<usize> = (0..x.nrows()).collect();
    ols_fit_rows(x, y, &rows, support)
}

pub fn ols_fit_rows(
    x: &DMatrix<f64>,
    y: &[f64],
    rows: &[usize],
    support: &[usize],
) -> Result<OlsFit, ModelError> {
    if y.len() != x.nrows() {
        return Err(ModelError::LengthMismatch {
            rows: x.nrows(),
            y: y.len(),
        });
    }
    if rows.is_empty() {
        return Err(ModelError::Empty);
    }
    let n = rows.len();
    let k = support.len();
    let y_sub: Vec<f64> = rows.iter().map(|&i| y[i]).collect();
    if y_sub.iter().any(|v| !v.is_finite()) {
        return Err(ModelError::NonFinite);
    }
    let y_mean = y_sub.iter().sum::<f64>() / n as f64;
    if k == 0 {
        return Ok(OlsFit {
            weights: Vec::new(),
            offset: y_mean,
            rank: 0,
        });
    }
    let mut xs = DMatrix::from_fn(n, k, |r, c| x[(rows[r], support[c])]);
    if xs.iter().any(|v| !v.is_finite()) {
        return Err(ModelError::NonFinite);
    }
    let means: Vec<f64> = (0..k).map(|c| xs.column(c).sum() / n as f64).collect();
    for (c, m) in means.iter().enumerate() {
        xs.column_mut(c).add_scalar_mut(-m);
    }
    let yc = DVector::from_iterator(n, y_sub.iter().map(|v| v - y_mean));
    let svd = xs.svd(true, true);
    let s_max = svd.singular_values.max();
    let eps = s_max * n.max(k) as f64 * f64::EPSILON;
    let rank = svd.singular_values.iter().filter(|&&s| s > eps).count();
    if rank < k {
        warn!("least-squares design has rank {rank} < {k}; using the pseudo-inverse");
    }
    let w = svd
        .solve(&yc, eps)
        .map_err(|_| ModelError::NonFinite)?;
    let weights: Vec<f64> = w.iter().copied().collect();
    let offset = y_mean - means.iter().zip(&weights).map(|(m, w)| m * w).sum::<f64>();
    Ok(OlsFit {
        weights,
        offset,
        rank,
    })
}

/// A trained estimator: selected features, OLS weights and provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    /// Catalog stage the features were selected from, or `custom`.
    pub stage: String,
    pub features: Vec<FeatureSpec>,
    pub weights: Vec<f64>,
    pub offset: f64,
    pub lambda: f64,
    pub requested_k: usize,
    pub tolerances: LassoOptions,
    pub standardized: bool,
    pub category_model_version: String,
    pub corpus_digest: String,
    pub segmentation: ChanVeseParams,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.features.is_empty() {
            return Err(ModelError::EmptyModel);
        }
        if self.features.len() != self.weights.len() {
            return Err(ModelError::WeightCount {
                features: self.features.len(),
                weights: self.weights.len(),
            });
        }
        if !self.offset.is_finite() || self.weights.iter().any(|w| !w.is_finite()) {
            return Err(ModelError::NonFiniteWeights);
        }
        FeatureCatalog::from_specs(self.features.clone())?;
        Ok(())
    }

    pub fn catalog(&self) -> FeatureCatalog {
        FeatureCatalog::from_specs(self.features.clone()).expect("validated features are unique")
    }

    /// Linear score for feature values in `features` order.
    pub fn score(&self, values: &[f64]) -> f64 {
        self.offset + self.weights.iter().zip(values).map(|(w, v)| w * v).sum::<f64>()
    }

    pub fn to_json(&self) -> Result<String, ModelError> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json(s: &str) -> Result<Self, ModelError> {
        let m: Self = serde_json::from_str(s)?;
        m.validate()?;
        Ok(m)
    }
}

/// Provenance recorded in a trained model.
#[derive(Debug, Clone, Default)]
pub struct TrainMetadata {
    pub category_model_version: String,
    pub corpus_digest: String,
    pub segmentation: ChanVeseParams,
}

/// Select `k` features by lasso, then fit their weights by OLS.
pub fn train_rows(
    matrix: &DesignMatrix,
    rows: &[usize],
    k: usize,
    opts: &LassoOptions,
    meta: &TrainMetadata,
) -> Result<ModelSpec, ModelError> {
    let y = response(matrix)?;
    let gram = Gram::from_rows(&matrix.x, y, rows)?;
    let selection = select_features_gram(&gram, k, opts)?;
    let support = selection.support();
    let ols = ols_fit_rows(&matrix.x, y, rows, &support)?;
    let model = ModelSpec {
        stage: matrix
            .catalog
            .stage()
            .map_or("custom", CatalogStage::name)
            .to_string(),
        features: support.iter().map(|&j| matrix.catalog.specs()[j]).collect(),
        weights: ols.weights,
        offset: ols.offset,
        lambda: selection.fit.lambda,
        requested_k: k,
        tolerances: *opts,
        standardized: false,
        category_model_version: meta.category_model_version.clone(),
        corpus_digest: meta.corpus_digest.clone(),
        segmentation: meta.segmentation,
    };
    model.validate()?;
    Ok(model)
}

pub fn train(
    matrix: &DesignMatrix,
    k: usize,
    opts: &LassoOptions,
    meta: &TrainMetadata,
) -> Result<ModelSpec, ModelError> {
    let rows: Vec<usize> = (0..matrix.n_rows()).collect();
    train_rows(matrix, &rows, k, opts, meta)
}

/// Mean model score per (concept, color) from a design matrix's own rows.
pub fn estimate_from_matrix(
    model: &ModelSpec,
    matrix: &DesignMatrix,
    concepts: &[String],
) -> Result<ConceptColorMatrix, ModelError> {
    let cols = model
        .features
        .iter()
        .map(|f| {
            matrix
                .catalog
                .position(f)
                .ok_or_else(|| ModelError::MissingFeature(f.to_string()))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let n_colors = matrix.rows.iter().map(|r| r.color_index).max().unwrap_or(0);
    let mut values = Vec::with_capacity(concepts.len());
    for concept in concepts {
        let mut sums = vec![0.0; n_colors];
        let mut counts = vec![0usize; n_colors];
        for i in matrix.rows_for(concept) {
            let feats: Vec<f64> = cols.iter().map(|&j| matrix.x[(i, j)]).collect();
            let c = matrix.rows[i].color_index - 1;
            sums[c] += model.score(&feats);
            counts[c] += 1;
        }
        if counts.iter().all(|&n| n == 0) {
            return Err(ModelError::EmptyCorpus);
        }
        values.push(
            sums.iter()
                .zip(&counts)
                .map(|(s, &n)| if n == 0 { f64::NAN } else { s / n as f64 })
                .collect(),
        );
    }
    Ok(ConceptColorMatrix::new(ConceptSet::new(concepts.to_vec())?, values))
}

/// Per-concept held-out estimates: for each concept, select features and fit
/// weights on the other concepts only, then estimate the held-out concept.
pub fn leave_one_concept_out(
    matrix: &DesignMatrix,
    k: usize,
    opts: &LassoOptions,
    jobs: usize,
) -> Result<(ConceptColorMatrix, Vec<ModelSpec>), ModelError> {
    response(matrix)?;
    let concepts = matrix.concepts();
    if concepts.len() < 2 {
        return Err(ModelError::TooFewConcepts(concepts.len()));
    }
    let folds: Vec<(Vec<f64>, ModelSpec)> = with_pool(jobs, || {
        concepts
            .par_iter()
            .map(|held_out| {
                let (train, _) = fold_rows(matrix, held_out);
                let model = train_rows(matrix, &train, k, opts, &TrainMetadata::default())?;
                let est = estimate_from_matrix(&model, matrix, std::slice::from_ref(held_out))?;
                Ok((est.values.into_iter().next().expect("one concept"), model))
            })
            .collect::<Result<Vec<_>, ModelError>>()
    })??;
    let (values, models): (Vec<_>, Vec<_>) = folds.into_iter().unzip();
    Ok((
        ConceptColorMatrix::new(ConceptSet::new(concepts)?, values),
        models,
    ))
}

/// Apply a model to a corpus: the mean score over each concept's images,
/// for every color in `colors`. Scores are not clamped.
pub fn estimate(
    model: &ModelSpec,
    manifest: &CorpusManifest,
    colors: &ColorTable,
    category_model: &CategoryModel,
    segmenter: &dyn FigureSegmenter,
    jobs: usize,
) -> Result<ConceptColorMatrix, ModelError> {
    model.validate()?;
    let records = canonical_records(manifest);
    if records.is_empty() {
        return Err(ModelError::EmptyCorpus);
    }
    let catalog = model.catalog();
    let targets = TargetColor::from_table(colors, category_model);
    let scores: Vec<Vec<f64>> = with_pool(jobs, || {
        records
            .par_iter()
            .map(|rec| {
                let ctx = load_context(manifest, rec, &catalog, category_model, segmenter)?;
                Ok(targets
                    .iter()
                    .map(|t| model.score(&ctx.evaluate(&catalog, t)))
                    .collect())
            })
            .collect::<Result<Vec<_>, FeatureError>>()
    })??;
    let concepts = manifest.concepts();
    let mut values = Vec::with_capacity(concepts.len());
    for concept in &concepts {
        let mine: Vec<&Vec<f64>> = records
            .iter()
            .zip(&scores)
            .filter(|(r, _)| &r.concept == concept)
            .map(|(_, s)| s)
            .collect();
        if mine.is_empty() {
            return Err(ModelError::EmptyCorpus);
        }
        let n = mine.len() as f64;
        values.push(
            (0..targets.len())
                .map(|c| mine.iter().map(|s| s[c]).sum::<f64>() / n)
                .collect(),
        );
    }
    Ok(ConceptColorMatrix::new(ConceptSet::new(concepts)?, values))
}
