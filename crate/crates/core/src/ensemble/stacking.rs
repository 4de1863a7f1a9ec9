use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::gbt::{gbt_fit, gbt_predict, BoostedModel, GbtConfig};
use super::ridge::{ridge_fit, ridge_predict, RidgeModel};
use super::check_matrix;
use crate::error::{Error, Result};
use crate::eval::pearson;

pub const DEFAULT_FOLDS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegressorKind {
    Ridge,
    Gbt,
}

impl std::str::FromStr for RegressorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ridge" => Ok(RegressorKind::Ridge),
            "gbt" => Ok(RegressorKind::Gbt),
            other => Err(Error::InvalidArgument(format!(
                "unknown regressor {other:?}; expected ridge or gbt"
            ))),
        }
    }
}

/// One candidate hyperparameter setting.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum MetaSetting {
    Ridge { alpha: f64 },
    Gbt(GbtConfig),
}

impl MetaSetting {
    pub fn kind(&self) -> RegressorKind {
        match self {
            MetaSetting::Ridge { .. } => RegressorKind::Ridge,
            MetaSetting::Gbt(_) => RegressorKind::Gbt,
        }
    }
}

pub const DEFAULT_RIDGE_ALPHAS: [f64; 6] = [0.01, 0.1, 0.5, 1.0, 5.0, 10.0];

pub fn default_grid(kind: RegressorKind) -> Vec<MetaSetting> {
    match kind {
        RegressorKind::Ridge => DEFAULT_RIDGE_ALPHAS
            .iter()
            .map(|&alpha| MetaSetting::Ridge { alpha })
            .collect(),
        RegressorKind::Gbt => {
            let mut grid = Vec::new();
            for max_depth in [1, 2, 3] {
                for rounds in [50, 100] {
                    grid.push(MetaSetting::Gbt(GbtConfig {
                        rounds,
                        max_depth,
                        ..GbtConfig::default()
                    }));
                }
            }
            grid
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum MetaModel {
    Ridge(RidgeModel),
    Gbt(BoostedModel),
}

impl MetaModel {
    pub fn fit(setting: &MetaSetting, x: &[Vec<f64>], y: &[f64]) -> Result<Self> {
        Ok(match setting {
            MetaSetting::Ridge { alpha } => MetaModel::Ridge(ridge_fit(x, y, *alpha)?),
            MetaSetting::Gbt(cfg) => MetaModel::Gbt(gbt_fit(x, y, cfg)?),
        })
    }

    pub fn predict(&self, x: &[Vec<f64>]) -> Result<Vec<f64>> {
        match self {
            MetaModel::Ridge(m) => ridge_predict(m, x),
            MetaModel::Gbt(m) => gbt_predict(m, x),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SettingReport {
    pub setting: MetaSetting,
    /// Out-of-fold Pearson per fold; `None` where it is undefined.
    pub fold_pearson: Vec<Option<f64>>,
    pub mean_pearson: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub folds: Vec<Vec<usize>>,
    pub settings: Vec<SettingReport>,
    pub best: usize,
    /// Out-of-fold predictions of the winning setting, in row order.
    pub oof_predictions: Vec<f64>,
}

impl CvReport {
    pub fn best_setting(&self) -> &SettingReport {
        &self.settings[self.best]
    }
}

/// Shuffles row indices and cuts them into `k` contiguous folds whose sizes
/// differ by at most one.
pub fn make_folds<R: Rng + ?Sized>(n: usize, k: usize, rng: &mut R) -> Result<Vec<Vec<usize>>> {
    if k < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 folds, got {k}")));
    }
    if n < k {
        return Err(Error::InvalidArgument(format!("{n} rows cannot fill {k} folds")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let (base, extra) = (n / k, n % k);
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for f in 0..k {
        let len = base + usize::from(f < extra);
        folds.push(idx[start..start + len].to_vec());
        start += len;
    }
    Ok(folds)
}

fn select(x: &[Vec<f64>], idx: &[usize]) -> Vec<Vec<f64>> {
    idx.iter().map(|&i| x[i].clone()).collect()
}

/// k-fold cross-validated model selection over `grid`, then a refit of the
/// winner on every row. The winner has the best mean out-of-fold Pearson;
/// earlier grid entries win ties.
pub fn stack_fit<R: Rng + ?Sized>(
    x: &[Vec<f64>],
    y: &[f64],
    grid: &[MetaSetting],
    k: usize,
    rng: &mut R,
) -> Result<(MetaModel, CvReport)> {
    check_matrix(x, y)?;
    if grid.is_empty() {
        return Err(Error::EmptyInput("hyperparameter grid".into()));
    }
    let folds = make_folds(x.len(), k, rng)?;
    let mut settings = Vec::with_capacity(grid.len());
    let mut oof_all = Vec::with_capacity(grid.len());
    for setting in grid {
        let mut oof = vec![0.0; y.len()];
        let mut fold_pearson = Vec::with_capacity(k);
        for (f, held) in folds.iter().enumerate() {
            let train: Vec<usize> = folds
                .iter()
                .enumerate()
                .filter(|&(g, _)| g != f)
                .flat_map(|(_, v)| v.iter().copied())
                .collect();
            let ty: Vec<f64> = train.iter().map(|&i| y[i]).collect();
            let model = MetaModel::fit(setting, &select(x, &train), &ty)?;
            let pred = model.predict(&select(x, held))?;
            let gold: Vec<f64> = held.iter().map(|&i| y[i]).collect();
            fold_pearson.push(pearson(&pred, &gold).ok());
            for (&i, p) in held.iter().zip(pred) {
                oof[i] = p;
            }
        }
        let defined: Vec<f64> = fold_pearson.iter().flatten().copied().collect();
        let mean_pearson = if defined.is_empty() {
            f64::NEG_INFINITY
        } else {
            defined.iter().sum::<f64>() / defined.len() as f64
        };
        settings.push(SettingReport {
            setting: *setting,
            fold_pearson,
            mean_pearson,
        });
        oof_all.push(oof);
    }
    let best = settings
        .iter()
        .enumerate()
        .fold(0, |b, (i, s)| if s.mean_pearson > settings[b].mean_pearson { i } else { b });
    let model = MetaModel::fit(&settings[best].setting, x, y)?;
    let report = CvReport {
        folds,
        settings,
        best,
        oof_predictions: oof_all.swap_remove(best),
    };
    Ok((model, report))
}
