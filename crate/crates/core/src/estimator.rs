//! Sentence-level quality estimator: a BiLSTM over the predictor's feature
//! vectors, mean-pooled over time and projected to one score.
//!
//! The predictor stays frozen while the estimator trains, so each sample's
//! feature vectors are computed once up front.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::QESample;
use crate::error::{Error, Result};
use crate::eval::pearson;
use crate::nn::adam::{adam_step, AdamConfig, AdamState};
use crate::nn::lstm::{BiLstm, BiLstmCache};
use crate::nn::ops::sigmoid;
use crate::nn::params::{push, push_mut, Parameterized};
use crate::nn::tensor::{dot, Tensor2};
use crate::nn::{CLIP_NORM, INIT_SCALE};
use crate::predictor::{Predictor, QefvSequence};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Activation {
    Identity,
    Sigmoid,
    /// `lo + (hi − lo)·σ(z)`.
    AffineSigmoid { lo: f64, hi: f64 },
}

impl Activation {
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Identity => z,
            Activation::Sigmoid => sigmoid(z),
            Activation::AffineSigmoid { lo, hi } => lo + (hi - lo) * sigmoid(z),
        }
    }

    pub fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Sigmoid => {
                let s = sigmoid(z);
                s * (1.0 - s)
            }
            Activation::AffineSigmoid { lo, hi } => {
                let s = sigmoid(z);
                (hi - lo) * s * (1.0 - s)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorParams {
    pub bilstm: BiLstm,
    /// `1 × 2h`
    pub out_w: Tensor2,
    /// `1 × 1`
    pub out_b: Tensor2,
    pub activation: Activation,
}

impl EstimatorParams {
    pub fn new<R: Rng + ?Sized>(input_dim: usize, hidden: usize, activation: Activation, rng: &mut R) -> Self {
        EstimatorParams {
            bilstm: BiLstm::uniform(input_dim, hidden, 1, INIT_SCALE, rng),
            out_w: Tensor2::uniform(1, 2 * hidden, INIT_SCALE, rng),
            out_b: Tensor2::uniform(1, 1, INIT_SCALE, rng),
            activation,
        }
    }

    pub fn zeros_like(&self) -> Self {
        EstimatorParams {
            bilstm: self.bilstm.zeros_like(),
            out_w: self.out_w.zeros_like(),
            out_b: self.out_b.zeros_like(),
            activation: self.activation,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.bilstm.input_dim()
    }
}

impl Parameterized for EstimatorParams {
    fn params(&self) -> Vec<(String, &Tensor2)> {
        let mut out = Vec::new();
        self.bilstm.collect("bilstm", &mut out);
        push(&mut out, "output", "w", &self.out_w);
        push(&mut out, "output", "b", &self.out_b);
        out
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor2)> {
        let mut out = Vec::new();
        self.bilstm.collect_mut("bilstm", &mut out);
        push_mut(&mut out, "output", "w", &mut self.out_w);
        push_mut(&mut out, "output", "b", &mut self.out_b);
        out
    }
}

/// Intermediate values of one [`estimate_score`] call.
pub struct EstimateTrace {
    pub pooled: Vec<f64>,
    pub outputs: Tensor2,
    pub pre_activation: f64,
    pub score: f64,
    cache: BiLstmCache,
}

pub fn estimate_trace(est: &EstimatorParams, qefvs: &QefvSequence) -> Result<EstimateTrace> {
    if qefvs.is_empty() {
        return Err(Error::EmptyInput("feature sequence".into()));
    }
    if qefvs.dim() != est.input_dim() {
        return Err(Error::shape(
            "estimate_score",
            format!("feature width {} vs estimator input {}", qefvs.dim(), est.input_dim()),
        ));
    }
    let (outputs, cache) = est.bilstm.run(&qefvs.vectors)?;
    let t = outputs.rows() as f64;
    let mut pooled = vec![0.0; outputs.cols()];
    for r in 0..outputs.rows() {
        for (p, v) in pooled.iter_mut().zip(outputs.row(r)) {
            *p += v;
        }
    }
    pooled.iter_mut().for_each(|p| *p /= t);
    let z = dot(est.out_w.data(), &pooled) + est.out_b.data()[0];
    Ok(EstimateTrace {
        pooled,
        outputs,
        pre_activation: z,
        score: est.activation.apply(z),
        cache,
    })
}

/// `activation(w · mean_t BiLSTM(qefvs)_t + b)`.
pub fn estimate_score(est: &EstimatorParams, qefvs: &QefvSequence) -> Result<f64> {
    Ok(estimate_trace(est, qefvs)?.score)
}

/// Accumulates `d_score · ∂score/∂θ` into `grads`.
pub fn estimate_backward(est: &EstimatorParams, trace: &EstimateTrace, d_score: f64, grads: &mut EstimatorParams) {
    let dz = d_score * est.activation.derivative(trace.pre_activation);
    for (g, p) in grads.out_w.data_mut().iter_mut().zip(&trace.pooled) {
        *g += dz * p;
    }
    grads.out_b.data_mut()[0] += dz;
    let t = trace.outputs.rows();
    let mut d_out = Tensor2::zeros(t, trace.outputs.cols());
    for r in 0..t {
        for (d, w) in d_out.row_mut(r).iter_mut().zip(est.out_w.data()) {
            *d = dz * w / t as f64;
        }
    }
    est.bilstm.backward(&trace.cache, &d_out, &mut grads.bilstm);
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EstimatorConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub activation: Activation,
    pub clip_norm: f64,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        EstimatorConfig {
            hidden: 400,
            epochs: 50,
            batch_size: 64,
            adam: AdamConfig::default(),
            activation: Activation::Identity,
            clip_norm: CLIP_NORM,
        }
    }
}

impl EstimatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidArgument(
                "estimator hidden, epochs and batch_size must be positive".into(),
            ));
        }
        if !(self.adam.lr > 0.0 && self.clip_norm > 0.0) {
            return Err(Error::InvalidArgument("lr and clip_norm must be positive".into()));
        }
        if let Activation::AffineSigmoid { lo, hi } = self.activation {
            if !(lo < hi) {
                return Err(Error::InvalidArgument(format!("affine-sigmoid needs lo < hi, got {lo}, {hi}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimatorEpoch {
    pub epoch: usize,
    /// Mean squared error over the full training set after the epoch.
    pub train_mse: f64,
    pub valid_mse: f64,
    /// `None` when the validation predictions or targets are constant.
    pub valid_pearson: Option<f64>,
}

/// A feature sequence paired with its target score.
pub type Labeled = (QefvSequence, f64);

fn mse(est: &EstimatorParams, data: &[Labeled]) -> Result<(f64, Vec<f64>)> {
    let mut preds = Vec::with_capacity(data.len());
    let mut total = 0.0;
    for (q, y) in data {
        let s = estimate_score(est, q)?;
        total += (s - y).powi(2);
        preds.push(s);
    }
    Ok((total / data.len() as f64, preds))
}

/// Fits `init` by mini-batch Adam on mean squared error and returns the
/// parameters of the epoch with the lowest validation MSE (training MSE when
/// `valid` is empty).
pub fn train_estimator_on_features<R: Rng>(
    init: EstimatorParams,
    cfg: &EstimatorConfig,
    train: &[Labeled],
    valid: &[Labeled],
    rng: &mut R,
) -> Result<(EstimatorParams, Vec<EstimatorEpoch>)> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyInput("estimator training data".into()));
    }
    let mut est = init;
    let mut grads = est.zeros_like();
    let mut adam = AdamState::new(cfg.adam);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best: Option<(f64, EstimatorParams)> = None;
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        order.shuffle(rng);
        for (batch, chunk) in order.chunks(cfg.batch_size).enumerate() {
            grads.zero_grad();
            let mut loss = 0.0;
            let n = chunk.len() as f64;
            for &i in chunk {
                let (q, y) = &train[i];
                let trace = estimate_trace(&est, q)?;
                let err = trace.score - y;
                loss += err * err;
                estimate_backward(&est, &trace, 2.0 * err / n, &mut grads);
            }
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch });
            }
            grads.clip_global_norm(cfg.clip_norm);
            adam_step(&mut adam, &mut est, &grads)?;
        }
        let (train_mse, _) = mse(&est, train)?;
        let (valid_mse, valid_pearson) = if valid.is_empty() {
            (train_mse, None)
        } else {
            let (m, preds) = mse(&est, valid)?;
            let gold: Vec<f64> = valid.iter().map(|(_, y)| *y).collect();
            (m, pearson(&preds, &gold).ok())
        };
        let entry = EstimatorEpoch {
            epoch,
            train_mse,
            valid_mse,
            valid_pearson,
        };
        log::debug!("estimator epoch {epoch}: {entry:?}");
        log.push(entry);
        if best.as_ref().map_or(true, |(l, _)| valid_mse < *l) {
            best = Some((valid_mse, est.clone()));
        }
    }
    let (_, best) = best.expect("at least one epoch ran");
    Ok((best, log))
}

pub fn featurize(predictor: &Predictor, samples: &[QESample]) -> Result<Vec<Labeled>> {
    samples
        .iter()
        .map(|s| Ok((predictor.qefv(s)?, s.score)))
        .collect()
}

/// Trains a fresh estimator on top of a frozen predictor.
pub fn train_estimator<R: Rng>(
    cfg: &EstimatorConfig,
    predictor: &Predictor,
    qe_train: &[QESample],
    qe_valid: &[QESample],
    rng: &mut R,
) -> Result<(EstimatorParams, Vec<EstimatorEpoch>)> {
    cfg.validate()?;
    let train = featurize(predictor, qe_train)?;
    let valid = featurize(predictor, qe_valid)?;
    let init = EstimatorParams::new(predictor.feature_dim(), cfg.hidden, cfg.activation, rng);
    train_estimator_on_features(init, cfg, &train, &valid, rng)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredPrediction {
    pub index: usize,
    pub language_pair: String,
    pub score: f64,
}

/// Worker count from `QEFORGE_THREADS`, default 1.
pub fn worker_threads() -> usize {
    std::env::var("QEFORGE_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1)
}

/// Scores every sample in order. Uses [`worker_threads`] workers; the
/// result does not depend on the worker count.
pub fn predict_batch(predictor: &Predictor, est: &EstimatorParams, samples: &[QESample]) -> Result<Vec<ScoredPrediction>> {
    predict_batch_with(predictor, est, samples, worker_threads())
}

pub fn predict_batch_with(
    predictor: &Predictor,
    est: &EstimatorParams,
    samples: &[QESample],
    threads: usize,
) -> Result<Vec<ScoredPrediction>> {
    if est.input_dim() != predictor.feature_dim() {
        return Err(Error::shape(
            "predict_batch",
            format!(
                "estimator expects width {}, predictor emits {}",
                est.input_dim(),
                predictor.feature_dim()
            ),
        ));
    }
    let score_one = |(index, s): (usize, &QESample)| -> Result<ScoredPrediction> {
        Ok(ScoredPrediction {
            index,
            language_pair: s.language_pair.clone(),
            score: estimate_score(est, &predictor.qefv(s)?)?,
        })
    };
    let threads = threads.max(1).min(samples.len().max(1));
    if threads == 1 {
        return samples.iter().enumerate().map(score_one).collect();
    }
    let chunk = samples.len().div_ceil(threads);
    let parts: Vec<Result<Vec<ScoredPrediction>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = samples
            .chunks(chunk)
            .enumerate()
            .map(|(c, part)| {
                scope.spawn(move || {
                    part.iter()
                        .enumerate()
                        .map(|(i, s)| score_one((c * chunk + i, s)))
                        .collect()
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(samples.len());
    for part in parts {
        out.extend(part?);
    }
    Ok(out)
}

pub fn write_predictions(path: impl AsRef<Path>, preds: &[ScoredPrediction]) -> Result<()> {
    let path = path.as_ref();
    let mut text = String::new();
    for p in preds {
        text.push_str(&format!("{}\t{}\t{}\n", p.index, p.language_pair, p.score));
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_predictions(path: impl AsRef<Path>) -> Result<Vec<ScoredPrediction>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(parse_err(i + 1, format!("expected 3 tab-separated fields, got {}", fields.len())));
        }
        let index = fields[0]
            .parse()
            .map_err(|_| parse_err(i + 1, format!("bad index {:?}", fields[0])))?;
        let score: f64 = fields[2]
            .parse()
            .map_err(|_| parse_err(i + 1, format!("bad score {:?}", fields[2])))?;
        out.push(ScoredPrediction {
            index,
            language_pair: fields[1].to_string(),
            score,
        });
    }
    Ok(out)
}

/// JSON form of an estimator, for saving next to a predictor checkpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct EstimatorFile {
    activation: Activation,
    hidden: usize,
    input_dim: usize,
    tensors: Vec<(String, Tensor2)>,
}

pub fn save_estimator(est: &EstimatorParams, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = EstimatorFile {
        activation: est.activation,
        hidden: est.bilstm.fwd.hidden(),
        input_dim: est.input_dim(),
        tensors: est.params().into_iter().map(|(n, t)| (n, t.clone())).collect(),
    };
    fs::write(path, serde_json::to_string(&file)?).map_err(|e| Error::io(path, e))
}

pub fn load_estimator(path: impl AsRef<Path>) -> Result<EstimatorParams> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: EstimatorFile = serde_json::from_str(&text)?;
    let mut rng = rand::rngs::mock::StepRng::new(0, 0);
    let mut est = EstimatorParams::new(file.input_dim, file.hidden, file.activation, &mut rng);
    let slots = est.params_mut();
    if slots.len() != file.tensors.len() {
        return Err(Error::InvalidArgument(format!(
            "{}: expected {} tensors, found {}",
            path.display(),
            slots.len(),
            file.tensors.len()
        )));
    }
    for ((name, slot), (fname, t)) in slots.into_iter().zip(file.tensors) {
        if name != fname || slot.shape() != t.shape() {
            return Err(Error::InvalidArgument(format!(
                "{}: tensor {fname} {:?} does not fit {name} {:?}",
                path.display(),
                t.shape(),
                slot.shape()
            )));
        }
        *slot = t;
    }
    Ok(est)
}
