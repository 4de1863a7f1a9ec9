//! Stacking ensembles over sub-model predictions.
//!
//! Each sentence becomes a feature row holding every sub-model's predicted
//! score plus three length features (source length, target length, and
//! their ratio). A meta-regressor, ridge or boosted trees, is then fit on
//! development-set rows with k-fold cross-validated model selection.

pub mod gbt;
pub mod ridge;
pub mod stacking;

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::QESample;
use crate::error::{Error, Result};
use crate::estimator::ScoredPrediction;

pub use gbt::{gbt_fit, gbt_fit_from, gbt_predict, BoostedModel, GbtConfig, Node, RegressionTree};
pub use ridge::{ridge_fit, ridge_predict, RidgeModel};
pub use stacking::{default_grid, make_folds, stack_fit, CvReport, MetaModel, MetaSetting, RegressorKind};

/// Number of length features appended after the sub-model scores.
pub const AUX_FEATURES: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleFeatureRow {
    /// `[m₁ … m_M, |x|, |y|, |y|/|x|]`
    pub features: Vec<f64>,
    pub target: Option<f64>,
}

/// Returns the feature count shared by all rows.
pub(crate) fn check_matrix(x: &[Vec<f64>], y: &[f64]) -> Result<usize> {
    if x.is_empty() {
        return Err(Error::EmptyInput("feature matrix".into()));
    }
    if x.len() != y.len() {
        return Err(Error::shape("ensemble", format!("{} rows vs {} targets", x.len(), y.len())));
    }
    let p = x[0].len();
    if p == 0 {
        return Err(Error::shape("ensemble", "rows have no features"));
    }
    for (i, row) in x.iter().enumerate() {
        if row.len() != p {
            return Err(Error::shape("ensemble", format!("row {i} has {} features, expected {p}", row.len())));
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!("row {i} has a non-finite feature")));
        }
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("non-finite target".into()));
    }
    Ok(p)
}

/// Builds one row per sample. `predictions[m][i]` must be model `m`'s score
/// for `samples[i]`.
pub fn assemble_features(predictions: &[Vec<ScoredPrediction>], samples: &[QESample]) -> Result<Vec<EnsembleFeatureRow>> {
    if predictions.is_empty() {
        return Err(Error::InvalidArgument("no sub-model predictions to stack".into()));
    }
    for (m, preds) in predictions.iter().enumerate() {
        if preds.len() != samples.len() {
            return Err(Error::shape(
                "assemble_features",
                format!("model {} has {} predictions for {} samples", m + 1, preds.len(), samples.len()),
            ));
        }
        for (i, (p, s)) in preds.iter().zip(samples).enumerate() {
            if p.index != i || p.language_pair != s.language_pair {
                return Err(Error::shape(
                    "assemble_features",
                    format!(
                        "model {} row {i} is ({}, {}), sample is ({i}, {})",
                        m + 1,
                        p.index,
                        p.language_pair,
                        s.language_pair
                    ),
                ));
            }
        }
    }
    Ok(samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let (sx, sy) = (s.source_tokens.len() as f64, s.target_tokens.len() as f64);
            let mut features: Vec<f64> = predictions.iter().map(|p| p[i].score).collect();
            features.extend([sx, sy, sy / sx]);
            EnsembleFeatureRow {
                features,
                target: Some(s.score),
            }
        })
        .collect())
}

/// Splits rows into a feature matrix and targets; every row needs a target.
pub fn rows_to_xy(rows: &[EnsembleFeatureRow]) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    let mut x = Vec::with_capacity(rows.len());
    let mut y = Vec::with_capacity(rows.len());
    for (i, r) in rows.iter().enumerate() {
        let t = r
            .target
            .ok_or_else(|| Error::InvalidArgument(format!("feature row {i} has no target")))?;
        x.push(r.features.clone());
        y.push(t);
    }
    Ok((x, y))
}

pub fn feature_header(models: usize) -> Vec<String> {
    let mut h: Vec<String> = (1..=models).map(|m| format!("m{m}")).collect();
    h.extend(["src_len", "tgt_len", "len_ratio", "target"].map(String::from));
    h
}

pub fn write_feature_csv(path: impl AsRef<Path>, rows: &[EnsembleFeatureRow]) -> Result<()> {
    let path = path.as_ref();
    let width = rows.first().map_or(AUX_FEATURES, |r| r.features.len());
    if width < AUX_FEATURES + 1 {
        return Err(Error::InvalidArgument("feature rows need at least one model column".into()));
    }
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(feature_header(width - AUX_FEATURES))?;
    for r in rows {
        if r.features.len() != width {
            return Err(Error::shape("write_feature_csv", "rows differ in width"));
        }
        let mut rec: Vec<String> = r.features.iter().map(f64::to_string).collect();
        rec.push(r.target.map(|t| t.to_string()).unwrap_or_default());
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_feature_csv(path: impl AsRef<Path>) -> Result<Vec<EnsembleFeatureRow>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path)?;
    let header = r.headers()?.clone();
    let cols = header.len();
    if cols < AUX_FEATURES + 2 || header.iter().collect::<Vec<_>>() != feature_header(cols - AUX_FEATURES - 1) {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            message: format!("unexpected header {header:?}"),
        });
    }
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let bad = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 2,
            message,
        };
        let mut features = Vec::with_capacity(cols - 1);
        for v in rec.iter().take(cols - 1) {
            features.push(v.parse::<f64>().map_err(|_| bad(format!("bad number {v:?}")))?);
        }
        let t = &rec[cols - 1];
        let target = if t.is_empty() {
            None
        } else {
            Some(t.parse::<f64>().map_err(|_| bad(format!("bad target {t:?}")))?)
        };
        rows.push(EnsembleFeatureRow { features, target });
    }
    Ok(rows)
}

pub fn save_meta_model(model: &MetaModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, serde_json::to_string_pretty(model)?).map_err(|e| Error::io(path, e))
}

pub fn load_meta_model(path: impl AsRef<Path>) -> Result<MetaModel> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}
