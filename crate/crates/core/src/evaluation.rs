//! Agreement between model estimates and human ratings.

use std::io::Write;

use log::warn;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};
use thiserror::Error;

use crate::datasets::ConceptColorMatrix;

#[derive(Debug, Error, PartialEq)]
pub enum StatsError {
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("need at least 3 pairs, got {0}")]
    TooFew(usize),
    #[error("zero variance")]
    ZeroVariance,
    #[error("non-finite input")]
    NonFinite,
    #[error("correlation must satisfy |r| < 1, got {0}")]
    DegenerateR(f64),
    #[error("sample size must exceed 3, got {0}")]
    DegenerateN(usize),
}

#[derive(Debug, Error)]
pub enum EvaluationError {
    #[error("concept {0} has no ratings")]
    MissingConcept(String),
    #[error("estimates have {estimates} colors but ratings have {ratings}")]
    DimensionMismatch { estimates: usize, ratings: usize },
    #[error("estimate for {concept}, color {color} is not finite")]
    NonFinite { concept: String, color: usize },
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Sample Pearson correlation with a two-tailed p-value from the t
/// distribution with `n − 2` degrees of freedom.
pub fn pearson_r(xs: &[f64], ys: &[f64]) -> Result<(f64, f64), StatsError> {
    if xs.len() != ys.len() {
        return Err(StatsError::LengthMismatch(xs.len(), ys.len()));
    }
    let n = xs.len();
    if n < 3 {
        return Err(StatsError::TooFew(n));
    }
    if xs.iter().chain(ys).any(|v| !v.is_finite()) {
        return Err(StatsError::NonFinite);
    }
    let mx = xs.iter().sum::<f64>() / n as f64;
    let my = ys.iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(StatsError::ZeroVariance);
    }
    let r = (sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0);
    let df = (n - 2) as f64;
    let p = if r.abs() >= 1.0 {
        0.0
    } else {
        let t = r * (df / (1.0 - r * r)).sqrt();
        let dist = StudentsT::new(0.0, 1.0, df).expect("df ≥ 1");
        (2.0 * dist.sf(t.abs())).min(1.0)
    };
    Ok((r, p))
}

/// Fisher z test for the difference between correlations from independent
/// samples. Returns the signed z and its two-tailed normal p-value.
pub fn fisher_z_independent(r1: f64, n1: usize, r2: f64, n2: usize) -> Result<(f64, f64), StatsError> {
    for r in [r1, r2] {
        if !r.is_finite() || r.abs() >= 1.0 {
            return Err(StatsError::DegenerateR(r));
        }
    }
    for n in [n1, n2] {
        if n <= 3 {
            return Err(StatsError::DegenerateN(n));
        }
    }
    let se = (1.0 / (n1 - 3) as f64 + 1.0 / (n2 - 3) as f64).sqrt();
    let z = (r1.atanh() - r2.atanh()) / se;
    let p = (2.0 * Normal::standard().sf(z.abs())).min(1.0);
    Ok((z, p))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub r: f64,
    pub p: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptScore {
    pub concept: String,
    pub n: usize,
    /// Absent when either side has zero variance.
    pub r: Option<f64>,
    pub p: Option<f64>,
    pub sse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub overall: Correlation,
    pub concepts: Vec<ConceptScore>,
}

/// Paired (human, estimate) values per concept in estimate order.
fn paired(
    estimates: &ConceptColorMatrix,
    ratings: &ConceptColorMatrix,
) -> Result<Vec<(String, Vec<f64>, Vec<f64>)>, EvaluationError> {
    if estimates.n_colors() != ratings.n_colors() {
        return Err(EvaluationError::DimensionMismatch {
            estimates: estimates.n_colors(),
            ratings: ratings.n_colors(),
        });
    }
    estimates
        .concepts
        .names()
        .iter()
        .zip(&estimates.values)
        .map(|(concept, est)| {
            let human = ratings
                .row(concept)
                .ok_or_else(|| EvaluationError::MissingConcept(concept.clone()))?;
            if let Some(c) = est.iter().position(|v| !v.is_finite()) {
                return Err(EvaluationError::NonFinite {
                    concept: concept.clone(),
                    color: c + 1,
                });
            }
            Ok((concept.clone(), human.to_vec(), est.clone()))
        })
        .collect()
}

/// Overall correlation across every (concept, color) cell plus per-concept
/// correlations and squared errors.
pub fn evaluate_model(
    estimates: &ConceptColorMatrix,
    ratings: &ConceptColorMatrix,
) -> Result<EvaluationReport, EvaluationError> {
    let pairs = paired(estimates, ratings)?;
    let all_h: Vec<f64> = pairs.iter().flat_map(|(_, h, _)| h.iter().copied()).collect();
    let all_e: Vec<f64> = pairs.iter().flat_map(|(_, _, e)| e.iter().copied()).collect();
    let (r, p) = pearson_r(&all_h, &all_e)?;
    let concepts = pairs
        .iter()
        .map(|(concept, h, e)| {
            let corr = match pearson_r(h, e) {
                Ok(v) => Some(v),
                Err(StatsError::ZeroVariance | StatsError::TooFew(_)) => None,
                Err(err) => return Err(err.into()),
            };
            Ok(ConceptScore {
                concept: concept.clone(),
                n: h.len(),
                r: corr.map(|c| c.0),
                p: corr.map(|c| c.1),
                sse: h.iter().zip(e).map(|(a, b)| (a - b).powi(2)).sum(),
            })
        })
        .collect::<Result<Vec<_>, EvaluationError>>()?;
    Ok(EvaluationReport {
        overall: Correlation {
            r,
            p,
            n: all_h.len(),
        },
        concepts,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

impl EvaluationReport {
    /// One `overall` row followed by one row per concept.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), EvaluationError> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["scope", "concept", "n", "r", "p", "sse"])?;
        let total_sse: f64 = self.concepts.iter().map(|c| c.sse).sum();
        out.write_record([
            "overall".to_string(),
            String::new(),
            self.overall.n.to_string(),
            self.overall.r.to_string(),
            self.overall.p.to_string(),
            total_sse.to_string(),
        ])?;
        for c in &self.concepts {
            out.write_record([
                "concept".to_string(),
                c.concept.clone(),
                c.n.to_string(),
                opt(c.r),
                opt(c.p),
                c.sse.to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn to_json(&self) -> Result<String, EvaluationError> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

/// Rows of `concept,color_index,human,estimate` for scatter plots.
pub fn write_scatter_csv<W: Write>(
    estimates: &ConceptColorMatrix,
    ratings: &ConceptColorMatrix,
    w: W,
) -> Result<(), EvaluationError> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["concept", "color_index", "human", "estimate"])?;
    for (concept, h, e) in paired(estimates, ratings)? {
        for (i, (h, e)) in h.iter().zip(&e).enumerate() {
            out.write_record([concept.clone(), (i + 1).to_string(), h.to_string(), e.to_string()])?;
        }
    }
    out.flush()?;
    Ok(())
}

/// One model's overall result in a stage comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageResult {
    pub model: String,
    pub overall: Correlation,
}

/// Names in the order their overall r is expected to increase.
pub const EXPECTED_STAGE_ORDER: [&str; 3] = ["ball_only", "ball_sector", "full"];

/// Whether the results respect [`EXPECTED_STAGE_ORDER`]. Stages that are
/// absent are ignored.
pub fn stage_order_holds(results: &[StageResult]) -> bool {
    let rs: Vec<f64> = EXPECTED_STAGE_ORDER
        .iter()
        .filter_map(|name| results.iter().find(|s| s.model == *name))
        .map(|s| s.overall.r)
        .collect();
    rs.windows(2).all(|w| w[1] >= w[0])
}

/// Table of overall correlations with a Fisher z test of each model
/// against the previous row. Logs a warning when the usual stage ordering
/// does not hold.
pub fn write_stage_comparison<W: Write>(results: &[StageResult], w: W) -> Result<(), EvaluationError> {
    if !stage_order_holds(results) {
        warn!("overall correlations do not increase from ball_only to ball_sector to full");
    }
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["model", "n", "r", "p", "z_vs_previous", "p_vs_previous"])?;
    for (i, s) in results.iter().enumerate() {
        let test = i
            .checked_sub(1)
            .map(|j| &results[j])
            .and_then(|prev| {
                fisher_z_independent(s.overall.r, s.overall.n, prev.overall.r, prev.overall.n).ok()
            });
        out.write_record([
            s.model.clone(),
            s.overall.n.to_string(),
            s.overall.r.to_string(),
            s.overall.p.to_string(),
            opt(test.map(|t| t.0)),
            opt(test.map(|t| t.1)),
        ])?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::ConceptSet;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn pearson_examples() {
        assert!(close(pearson_r(&[1., 2., 3.], &[2., 4., 6.]).unwrap().0, 1.0, 1e-15));
        assert!(close(pearson_r(&[1., 2., 3.], &[1., 3., 2.]).unwrap().0, 0.5, 1e-15));
        assert!(close(pearson_r(&[1., 2., 5.], &[-1., -2., -5.]).unwrap().0, -1.0, 1e-15));
        assert_eq!(pearson_r(&[1., 1., 1.], &[1., 2., 3.]), Err(StatsError::ZeroVariance));
        assert_eq!(pearson_r(&[1., 2.], &[1., 2.]), Err(StatsError::TooFew(2)));
        assert_eq!(pearson_r(&[1., 2., 3.], &[1., 2.]), Err(StatsError::LengthMismatch(3, 2)));
    }

    #[test]
    fn pearson_p_value_matches_closed_form() {
        // with 1 degree of freedom, t is Cauchy: p = 1 − (2/π)·atan|t|
        let (r, p) = pearson_r(&[1., 2., 3.], &[1., 3., 2.]).unwrap();
        let t = r * (1.0 / (1.0 - r * r)).sqrt();
        let want = 1.0 - 2.0 / std::f64::consts::PI * t.abs().atan();
        assert!(close(p, want, 1e-12), "{p} vs {want}");
    }

    #[test]
    fn pearson_affine_invariance() {
        let xs = [0.1, 0.7, 0.3, 0.9, 0.4];
        let ys = [0.2, 0.5, 0.1, 0.8, 0.6];
        let (r, _) = pearson_r(&xs, &ys).unwrap();
        let scaled: Vec<f64> = ys.iter().map(|y| 3.0 * y + 7.0).collect();
        assert!(close(pearson_r(&xs, &scaled).unwrap().0, r, 1e-12));
    }

    #[test]
    fn fisher_z_properties() {
        assert_eq!(fisher_z_independent(0.5, 100, 0.5, 100).unwrap().0, 0.0);
        let (a, pa) = fisher_z_independent(0.72, 696, 0.65, 300).unwrap();
        let (b, pb) = fisher_z_independent(0.65, 300, 0.72, 696).unwrap();
        assert_eq!(a, -b);
        assert_eq!(pa, pb);
        assert!(fisher_z_independent(1.0, 10, 0.5, 10).is_err());
        assert!(fisher_z_independent(0.2, 3, 0.5, 10).is_err());
    }

    #[test]
    fn fisher_z_reported_values() {
        let (z, p) = fisher_z_independent(0.72, 696, 0.65, 696).unwrap();
        assert!(close(z, 2.46, 0.01));
        assert!(close(p, 0.014, 0.0005));
    }

    fn matrix(names: &[&str], values: Vec<Vec<f64>>) -> ConceptColorMatrix {
        ConceptColorMatrix::new(ConceptSet::new(names.iter().copied()).unwrap(), values)
    }

    #[test]
    fn evaluate_identity_and_shift() {
        let ratings = matrix(&["a", "b"], vec![vec![0.1, 0.5, 0.9], vec![0.3, 0.2, 0.8]]);
        let rep = evaluate_model(&ratings, &ratings).unwrap();
        assert!(close(rep.overall.r, 1.0, 1e-12));
        assert_eq!(rep.overall.n, 6);
        assert!(rep.concepts.iter().all(|c| c.sse == 0.0));
        let shifted = matrix(&["a", "b"], vec![vec![1.1, 1.5, 1.9], vec![1.3, 1.2, 1.8]]);
        let rep = evaluate_model(&shifted, &ratings).unwrap();
        assert!(close(rep.overall.r, 1.0, 1e-12));
        assert!(close(rep.concepts[0].sse, 3.0, 1e-12));
    }

    #[test]
    fn evaluate_errors() {
        let ratings = matrix(&["a"], vec![vec![0.1, 0.5, 0.9]]);
        let short = matrix(&["a"], vec![vec![0.1, 0.5]]);
        assert!(matches!(
            evaluate_model(&short, &ratings),
            Err(EvaluationError::DimensionMismatch { .. })
        ));
        let other = matrix(&["z"], vec![vec![0.1, 0.5, 0.9]]);
        assert!(matches!(
            evaluate_model(&other, &ratings),
            Err(EvaluationError::MissingConcept(_))
        ));
    }

    #[test]
    fn flat_concept_has_no_correlation() {
        let ratings = matrix(&["a", "b"], vec![vec![0.1, 0.5, 0.9], vec![0.3, 0.2, 0.8]]);
        let est = matrix(&["a", "b"], vec![vec![0.2, 0.4, 0.8], vec![0.5, 0.5, 0.5]]);
        let rep = evaluate_model(&est, &ratings).unwrap();
        assert!(rep.concepts[1].r.is_none());
        let mut buf = Vec::new();
        rep.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 4);
        assert!(text.lines().nth(3).unwrap().starts_with("concept,b,3,,,"));
    }

    #[test]
    fn stage_ordering() {
        let mk = |model: &str, r: f64| StageResult {
            model: model.into(),
            overall: Correlation { r, p: 0.0, n: 696 },
        };
        assert!(stage_order_holds(&[mk("ball_only", 0.65), mk("ball_sector", 0.72), mk("full", 0.81)]));
        assert!(!stage_order_holds(&[mk("ball_only", 0.75), mk("full", 0.7)]));
        let mut buf = Vec::new();
        write_stage_comparison(&[mk("ball_only", 0.65), mk("ball_sector", 0.72)], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let row: Vec<&str> = text.lines().nth(2).unwrap().split(',').collect();
        assert!(close(row[4].parse::<f64>().unwrap(), 2.46, 0.01));
    }
}
