//! Detection metrics and principal-component projection of classifier inputs.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Confusion counts with precision, recall and F1.
///
/// Ratios lie in `[0, 1]`; a ratio whose denominator is zero is reported as 0
/// and flagged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub true_positives: usize,
    pub false_positives: usize,
    pub true_negatives: usize,
    pub false_negatives: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub precision_pct: f64,
    pub recall_pct: f64,
    pub f1_pct: f64,
    pub precision_undefined: bool,
    pub recall_undefined: bool,
    pub f1_undefined: bool,
}

/// Rounds a ratio to a percentage with two decimals.
pub fn percent(ratio: f64) -> f64 {
    (ratio * 10_000.0).round() / 100.0
}

impl MetricsReport {
    pub fn from_counts(tp: usize, fp: usize, tn: usize, fn_: usize) -> Self {
        let ratio = |num: usize, den: usize| {
            if den == 0 {
                (0.0, true)
            } else {
                (num as f64 / den as f64, false)
            }
        };
        let (precision, precision_undefined) = ratio(tp, tp + fp);
        let (recall, recall_undefined) = ratio(tp, tp + fn_);
        let (f1, f1_undefined) = if precision + recall > 0.0 {
            (2.0 * precision * recall / (precision + recall), false)
        } else {
            (0.0, true)
        };
        MetricsReport {
            true_positives: tp,
            false_positives: fp,
            true_negatives: tn,
            false_negatives: fn_,
            precision,
            recall,
            f1,
            precision_pct: percent(precision),
            recall_pct: percent(recall),
            f1_pct: percent(f1),
            precision_undefined,
            recall_undefined,
            f1_undefined,
        }
    }

    pub fn total(&self) -> usize {
        self.true_positives + self.false_positives + self.true_negatives + self.false_negatives
    }
}

pub fn compute_metrics(predictions: &[u8], labels: &[u8]) -> Result<MetricsReport> {
    if predictions.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::Shape("no predictions to score".into()));
    }
    let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
    for (&p, &y) in predictions.iter().zip(labels) {
        match (p, y) {
            (1, 1) => tp += 1,
            (1, 0) => fp += 1,
            (0, 0) => tn += 1,
            (0, 1) => fn_ += 1,
            (p, y) => return Err(Error::InvalidLabel(if p > 1 { p as i64 } else { y as i64 })),
        }
    }
    Ok(MetricsReport::from_counts(tp, fp, tn, fn_))
}

/// Low-dimensional coordinates from [`project_features`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Projection {
    pub coords: Vec<Vec<f64>>,
    /// Sample variance along each component, descending.
    pub variances: Vec<f64>,
    /// Unit loading vector of each component in input space.
    pub components: Vec<Vec<f64>>,
    /// All inputs coincide; coordinates are all zero.
    pub degenerate: bool,
}

/// Mean-centred projection onto the leading `dims` principal components.
///
/// Each component's sign is fixed so that its largest-magnitude loading is
/// positive. The eigenproblem is solved on whichever of the covariance or the
/// Gram matrix is smaller.
pub fn project_features(features: &[Vec<f64>], dims: usize) -> Result<Projection> {
    let m = features.len();
    if m < 2 {
        return Err(Error::Shape(format!("need at least 2 vectors, got {m}")));
    }
    let d = features[0].len();
    if let Some(bad) = features.iter().find(|f| f.len() != d) {
        return Err(Error::Shape(format!("vectors of length {d} and {} mixed", bad.len())));
    }
    if dims == 0 || dims > d {
        return Err(Error::Config(format!("cannot project {d}-dimensional data onto {dims} components")));
    }

    let mut x = DMatrix::<f64>::from_fn(m, d, |i, j| features[i][j]);
    for mut col in x.column_iter_mut() {
        let mean = col.mean();
        col.add_scalar_mut(-mean);
    }
    let denom = (m - 1) as f64;

    let mut variances = Vec::with_capacity(dims);
    let mut components = Vec::with_capacity(dims);
    let scale = x.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let tol = (scale * scale).max(f64::MIN_POSITIVE) * 1e-12 * (m.max(d) as f64);

    let (values, vectors) = if d <= m {
        let eig = SymmetricEigen::new(x.transpose() * &x / denom);
        (eig.eigenvalues, eig.eigenvectors)
    } else {
        let eig = SymmetricEigen::new(&x * x.transpose() / denom);
        (eig.eigenvalues, eig.eigenvectors)
    };
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));

    for &idx in order.iter().take(dims) {
        let lambda = values[idx].max(0.0);
        let loading: Vec<f64> = if lambda * denom <= tol {
            vec![0.0; d]
        } else if d <= m {
            vectors.column(idx).iter().copied().collect()
        } else {
            let v = x.transpose() * vectors.column(idx);
            let norm = v.norm();
            v.iter().map(|a| a / norm).collect()
        };
        let pivot = loading
            .iter()
            .copied()
            .fold(0.0f64, |best, a| if a.abs() > best.abs() { a } else { best });
        let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
        components.push(loading.into_iter().map(|a| a * sign).collect::<Vec<_>>());
        variances.push(if lambda * denom <= tol { 0.0 } else { lambda });
    }

    let coords = (0..m)
        .map(|i| {
            components
                .iter()
                .map(|c| x.row(i).iter().zip(c).map(|(a, b)| a * b).sum())
                .collect()
        })
        .collect();
    Ok(Projection {
        coords,
        degenerate: variances.iter().all(|&v| v == 0.0),
        variances,
        components,
    })
}
