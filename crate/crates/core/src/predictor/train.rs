use rand::seq::SliceRandom;
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use super::loss::{ce_loss, LossKind};
use super::model::{pair_loss, Objective};
use super::params::PredictorParams;
use crate::corpus::{encode, sample_negatives, Encoded, NoiseDistribution, Vocab};
use crate::error::{Error, Result};
use crate::nn::adam::{adam_step, AdamConfig, AdamState};
use crate::nn::ops::softmax_in_place;
use crate::nn::params::Parameterized;
use crate::nn::CLIP_NORM;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PredictorTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub loss: LossKind,
    /// Negatives per position for the sampled losses.
    pub negatives: usize,
    /// Redraw negatives equal to the positive token.
    pub exclude_positive: bool,
    pub clip_norm: f64,
}

impl Default for PredictorTrainConfig {
    fn default() -> Self {
        PredictorTrainConfig {
            epochs: 20,
            batch_size: 64,
            adam: AdamConfig::default(),
            loss: LossKind::Ce,
            negatives: 100,
            exclude_positive: true,
            clip_norm: CLIP_NORM,
        }
    }
}

impl PredictorTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidArgument("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be at least 1".into()));
        }
        if self.loss != LossKind::Ce && self.negatives == 0 {
            return Err(Error::InvalidArgument("sampled losses need at least one negative".into()));
        }
        if !(self.adam.lr > 0.0 && self.clip_norm > 0.0) {
            return Err(Error::InvalidArgument("lr and clip_norm must be positive".into()));
        }
        Ok(())
    }
}

/// A source/target pair encoded with the predictor's vocabularies.
pub type EncodedPair = (Encoded, Encoded);

pub fn encode_pairs<S: AsRef<str>>(
    pairs: impl IntoIterator<Item = (impl AsRef<[S]>, impl AsRef<[S]>)>,
    source: &Vocab,
    target: &Vocab,
) -> Vec<EncodedPair> {
    pairs
        .into_iter()
        .map(|(x, y)| (encode(x.as_ref(), source), encode(y.as_ref(), target)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean per-token value of the training objective.
    pub train_loss: f64,
    /// Mean per-token cross-entropy on the validation pairs.
    pub valid_loss: f64,
    pub valid_accuracy: f64,
    pub clamped: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TokenMetrics {
    pub loss: f64,
    pub accuracy: f64,
    pub positions: usize,
}

/// Mean cross-entropy and argmax accuracy over every target position, in
/// inference mode.
pub fn evaluate_predictor(params: &PredictorParams, pairs: &[EncodedPair]) -> Result<TokenMetrics> {
    let (mut loss, mut correct, mut positions) = (0.0, 0usize, 0usize);
    for (x, y) in pairs {
        params.check_inputs(x, y)?;
        let fwd = params.forward(&x.ids, &y.ids, None)?;
        for p in 1..=fwd.positions() {
            let mut probs = params.logits(&fwd, p);
            softmax_in_place(&mut probs);
            let target = fwd.target_token(p);
            loss += ce_loss(&probs, target)?.loss;
            let best = probs
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |acc, (i, &q)| if q > acc.1 { (i, q) } else { acc })
                .0;
            correct += usize::from(best == target);
            positions += 1;
        }
    }
    if positions == 0 {
        return Err(Error::EmptyInput("evaluation pairs".into()));
    }
    Ok(TokenMetrics {
        loss: loss / positions as f64,
        accuracy: correct as f64 / positions as f64,
        positions,
    })
}

/// Trains with shuffled mini-batches and Adam. Each update follows the
/// per-token mean gradient of the batch, clipped by global norm.
///
/// Returns the parameters of the epoch with the lowest validation
/// cross-entropy; with no validation pairs the training pairs are scored
/// instead. `noise` is required for the sampled losses.
pub fn train_predictor<R: Rng>(
    init: PredictorParams,
    cfg: &PredictorTrainConfig,
    noise: Option<&NoiseDistribution>,
    train: &[EncodedPair],
    valid: &[EncodedPair],
    rng: &mut R,
) -> Result<(PredictorParams, Vec<EpochLog>)> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyInput("predictor training data".into()));
    }
    for (x, y) in train.iter().chain(valid) {
        init.check_inputs(x, y)?;
    }
    let noise = match (cfg.loss, noise) {
        (LossKind::Ce, _) => None,
        (_, Some(n)) => Some(n),
        (_, None) => {
            return Err(Error::InvalidArgument(
                "sampled losses need a noise distribution".into(),
            ))
        }
    };
    let scored = if valid.is_empty() { train } else { valid };

    let mut params = init;
    let mut grads = params.zeros_like();
    let mut adam = AdamState::new(cfg.adam);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best: Option<(f64, PredictorParams)> = None;
    let mut log = Vec::with_capacity(cfg.epochs);
    let training_dropout = params.hyper.dropout > 0.0;

    for epoch in 1..=cfg.epochs {
        order.shuffle(rng);
        let (mut epoch_loss, mut epoch_positions, mut clamped) = (0.0, 0usize, 0usize);
        for (batch, chunk) in order.chunks(cfg.batch_size).enumerate() {
            grads.zero_grad();
            let (mut loss, mut positions) = (0.0, 0usize);
            for &i in chunk {
                let (x, y) = &train[i];
                let negatives = match noise {
                    Some(n) => {
                        let mut lists = Vec::with_capacity(y.inner_len());
                        for &target in &y.ids[1..y.ids.len() - 1] {
                            let exclude = cfg.exclude_positive.then_some(target);
                            lists.push(sample_negatives(n, cfg.negatives, exclude, rng)?);
                        }
                        lists
                    }
                    None => Vec::new(),
                };
                let objective = match (cfg.loss, noise) {
                    (LossKind::Nce, Some(noise)) => Objective::Nce {
                        noise,
                        negatives: &negatives,
                    },
                    (LossKind::Neg, _) => Objective::Neg { negatives: &negatives },
                    _ => Objective::CrossEntropy,
                };
                let dropout_rng: Option<&mut dyn RngCore> = if training_dropout { Some(&mut *rng) } else { None };
                let pl = pair_loss(&params, &x.ids, &y.ids, objective, dropout_rng, Some(&mut grads))?;
                loss += pl.loss;
                positions += pl.positions;
                clamped += pl.clamped;
            }
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch });
            }
            epoch_loss += loss;
            epoch_positions += positions;
            grads.scale_params(1.0 / positions as f64);
            grads.clip_global_norm(cfg.clip_norm);
            adam_step(&mut adam, &mut params, &grads)?;
        }

        let metrics = evaluate_predictor(&params, scored)?;
        let entry = EpochLog {
            epoch,
            train_loss: epoch_loss / epoch_positions as f64,
            valid_loss: metrics.loss,
            valid_accuracy: metrics.accuracy,
            clamped,
        };
        log::debug!("predictor epoch {epoch}: {entry:?}");
        log.push(entry);
        if best.as_ref().map_or(true, |(l, _)| metrics.loss < *l) {
            best = Some((metrics.loss, params.clone()));
        }
    }
    let (_, best) = best.expect("at least one epoch ran");
    Ok((best, log))
}
