//! Gradient-boosted regression trees with a second-order split objective.
//!
//! With squared error `l = ½(y − ŷ)²` every row has gradient `g = ŷ − y`
//! and hessian `h = 1`. A leaf holding rows with sums `G`, `H` takes weight
//! `−G/(H + λ)`, and a split is scored by
//!
//! ```text
//! gain = ½·[G_L²/(H_L+λ) + G_R²/(H_R+λ) − (G_L+G_R)²/(H_L+H_R+λ)] − γ
//! ```
//!
//! Splits are searched exactly over midpoints between consecutive distinct
//! feature values. Ties go to the lowest feature index, then the lowest
//! threshold.

use serde::{Deserialize, Serialize};

use super::check_matrix;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GbtConfig {
    pub rounds: usize,
    pub eta: f64,
    pub lambda: f64,
    pub gamma: f64,
    pub max_depth: usize,
}

impl Default for GbtConfig {
    fn default() -> Self {
        GbtConfig {
            rounds: 100,
            eta: 0.1,
            lambda: 1.0,
            gamma: 0.0,
            max_depth: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Node {
    Leaf {
        weight: f64,
    },
    /// Rows with `x[feature] < threshold` go left.
    Split {
        feature: usize,
        threshold: f64,
        left: Box<Node>,
        right: Box<Node>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionTree {
    pub root: Node,
    pub max_depth: usize,
}

impl RegressionTree {
    pub fn predict_row(&self, row: &[f64]) -> f64 {
        let mut node = &self.root;
        loop {
            match node {
                Node::Leaf { weight } => return *weight,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => node = if row[*feature] < *threshold { left } else { right },
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn depth(n: &Node) -> usize {
            match n {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + depth(left).max(depth(right)),
            }
        }
        depth(&self.root)
    }

    /// Visits every leaf with the indices of `x`'s rows routed to it.
    pub fn route<'a>(&'a self, x: &[Vec<f64>], mut visit: impl FnMut(&'a Node, &[usize])) {
        fn walk<'a>(n: &'a Node, x: &[Vec<f64>], rows: Vec<usize>, visit: &mut dyn FnMut(&'a Node, &[usize])) {
            match n {
                Node::Leaf { .. } => visit(n, &rows),
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    let (l, r): (Vec<usize>, Vec<usize>) = rows.iter().partition(|&&i| x[i][*feature] < *threshold);
                    walk(left, x, l, visit);
                    walk(right, x, r, visit);
                }
            }
        }
        walk(&self.root, x, (0..x.len()).collect(), &mut visit);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoostedModel {
    pub base: f64,
    pub eta: f64,
    pub lambda: f64,
    pub gamma: f64,
    pub num_features: usize,
    pub trees: Vec<RegressionTree>,
}

fn leaf_weight(g: f64, h: f64, lambda: f64) -> f64 {
    -g / (h + lambda)
}

fn score(g: f64, h: f64, lambda: f64) -> f64 {
    g * g / (h + lambda)
}

struct Grower<'a> {
    x: &'a [Vec<f64>],
    grad: &'a [f64],
    hess: &'a [f64],
    cfg: &'a GbtConfig,
}

impl Grower<'_> {
    fn grow(&self, rows: &[usize], depth: usize) -> Node {
        let g: f64 = rows.iter().map(|&i| self.grad[i]).sum();
        let h: f64 = rows.iter().map(|&i| self.hess[i]).sum();
        let leaf = Node::Leaf {
            weight: leaf_weight(g, h, self.cfg.lambda),
        };
        if depth >= self.cfg.max_depth || rows.len() < 2 {
            return leaf;
        }
        let lambda = self.cfg.lambda;
        let parent = score(g, h, lambda);
        let mut best: Option<(f64, usize, f64)> = None;
        let num_features = self.x[rows[0]].len();
        let mut sorted = rows.to_vec();
        for f in 0..num_features {
            sorted.sort_by(|&a, &b| self.x[a][f].total_cmp(&self.x[b][f]));
            let (mut gl, mut hl) = (0.0, 0.0);
            for k in 0..sorted.len() - 1 {
                let i = sorted[k];
                gl += self.grad[i];
                hl += self.hess[i];
                let (v, next) = (self.x[i][f], self.x[sorted[k + 1]][f]);
                if v == next {
                    continue;
                }
                let gain = 0.5 * (score(gl, hl, lambda) + score(g - gl, h - hl, lambda) - parent) - self.cfg.gamma;
                if best.map_or(true, |(b, _, _)| gain > b) {
                    best = Some((gain, f, 0.5 * (v + next)));
                }
            }
        }
        match best {
            Some((gain, feature, threshold)) if gain > 0.0 => {
                let (l, r): (Vec<usize>, Vec<usize>) = rows.iter().partition(|&&i| self.x[i][feature] < threshold);
                Node::Split {
                    feature,
                    threshold,
                    left: Box::new(self.grow(&l, depth + 1)),
                    right: Box::new(self.grow(&r, depth + 1)),
                }
            }
            _ => leaf,
        }
    }
}

fn validate(cfg: &GbtConfig) -> Result<()> {
    if !(cfg.eta > 0.0 && cfg.eta <= 1.0) {
        return Err(Error::InvalidArgument(format!("eta must be in (0, 1], got {}", cfg.eta)));
    }
    if !(cfg.lambda >= 0.0 && cfg.gamma >= 0.0) {
        return Err(Error::InvalidArgument("lambda and gamma must be ≥ 0".into()));
    }
    Ok(())
}

/// Fits with the target mean as base prediction.
pub fn gbt_fit(x: &[Vec<f64>], y: &[f64], cfg: &GbtConfig) -> Result<BoostedModel> {
    let base = y.iter().sum::<f64>() / y.len().max(1) as f64;
    gbt_fit_from(x, y, cfg, base)
}

/// Fits starting from a given constant base prediction.
pub fn gbt_fit_from(x: &[Vec<f64>], y: &[f64], cfg: &GbtConfig, base: f64) -> Result<BoostedModel> {
    let num_features = check_matrix(x, y)?;
    if x.len() < 2 {
        return Err(Error::InvalidArgument("boosting needs at least 2 rows".into()));
    }
    validate(cfg)?;
    let mut pred = vec![base; y.len()];
    let hess = vec![1.0; y.len()];
    let rows: Vec<usize> = (0..y.len()).collect();
    let mut trees = Vec::with_capacity(cfg.rounds);
    for _ in 0..cfg.rounds {
        let grad: Vec<f64> = pred.iter().zip(y).map(|(p, t)| p - t).collect();
        let grower = Grower {
            x,
            grad: &grad,
            hess: &hess,
            cfg,
        };
        let tree = RegressionTree {
            root: grower.grow(&rows, 0),
            max_depth: cfg.max_depth,
        };
        for (p, row) in pred.iter_mut().zip(x) {
            *p += cfg.eta * tree.predict_row(row);
        }
        trees.push(tree);
    }
    Ok(BoostedModel {
        base,
        eta: cfg.eta,
        lambda: cfg.lambda,
        gamma: cfg.gamma,
        num_features,
        trees,
    })
}

/// `base + η·Σ_t f_t(x)`.
pub fn gbt_predict(model: &BoostedModel, x: &[Vec<f64>]) -> Result<Vec<f64>> {
    x.iter()
        .map(|row| {
            if row.len() != model.num_features {
                return Err(Error::shape(
                    "gbt_predict",
                    format!("{} features, model has {}", row.len(), model.num_features),
                ));
            }
            Ok(model.base + model.eta * model.trees.iter().map(|t| t.predict_row(row)).sum::<f64>())
        })
        .collect()
}
