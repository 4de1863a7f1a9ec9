use serde::{Deserialize, Serialize};

use super::check_matrix;
use crate::error::{Error, Result};

/// Linear model on centered features: `ŷ = (x − μ)·w + intercept`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RidgeModel {
    pub weights: Vec<f64>,
    pub intercept: f64,
    pub alpha: f64,
    pub means: Vec<f64>,
}

/// Solves `A·x = b` for symmetric positive definite `A` (row-major `n × n`)
/// by Cholesky factorization. Fails when a pivot is not clearly positive.
pub fn cholesky_solve(a: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    let n = b.len();
    debug_assert_eq!(a.len(), n * n);
    let scale = (0..n).map(|i| a[i * n + i].abs()).fold(0.0, f64::max);
    let tol = 1e-12 * scale.max(f64::MIN_POSITIVE);
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if s <= tol {
                    return Err(Error::SingularSystem);
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    let mut z = vec![0.0; n];
    for i in 0..n {
        let s: f64 = (0..i).map(|k| l[i * n + k] * z[k]).sum();
        z[i] = (b[i] - s) / l[i * n + i];
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let s: f64 = (i + 1..n).map(|k| l[k * n + i] * x[k]).sum();
        x[i] = (z[i] - s) / l[i * n + i];
    }
    Ok(x)
}

/// Closed-form ridge regression: centers features and targets, solves
/// `(XᵀX + αI)w = Xᵀy`, and leaves the intercept (the target mean)
/// unpenalized.
pub fn ridge_fit(x: &[Vec<f64>], y: &[f64], alpha: f64) -> Result<RidgeModel> {
    let p = check_matrix(x, y)?;
    if x.len() < 2 {
        return Err(Error::InvalidArgument("ridge needs at least 2 rows".into()));
    }
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(Error::InvalidArgument(format!("alpha must be finite and ≥ 0, got {alpha}")));
    }
    let n = x.len() as f64;
    let mut means = vec![0.0; p];
    for row in x {
        for (m, v) in means.iter_mut().zip(row) {
            *m += v / n;
        }
    }
    let y_mean = y.iter().sum::<f64>() / n;
    let mut gram = vec![0.0; p * p];
    let mut rhs = vec![0.0; p];
    for (row, &t) in x.iter().zip(y) {
        let c: Vec<f64> = row.iter().zip(&means).map(|(v, m)| v - m).collect();
        for i in 0..p {
            rhs[i] += c[i] * (t - y_mean);
            for j in 0..p {
                gram[i * p + j] += c[i] * c[j];
            }
        }
    }
    for i in 0..p {
        gram[i * p + i] += alpha;
    }
    let weights = cholesky_solve(&gram, &rhs)?;
    Ok(RidgeModel {
        weights,
        intercept: y_mean,
        alpha,
        means,
    })
}

pub fn ridge_predict(model: &RidgeModel, x: &[Vec<f64>]) -> Result<Vec<f64>> {
    x.iter()
        .map(|row| {
            if row.len() != model.weights.len() {
                return Err(Error::shape(
                    "ridge_predict",
                    format!("{} features, model has {}", row.len(), model.weights.len()),
                ));
            }
            Ok(row
                .iter()
                .zip(&model.means)
                .zip(&model.weights)
                .map(|((v, m), w)| (v - m) * w)
                .sum::<f64>()
                + model.intercept)
        })
        .collect()
}
