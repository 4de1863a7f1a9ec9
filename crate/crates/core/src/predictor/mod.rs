//! Word predictor: a conditional masked language model over target tokens
//! whose internal states feed the quality estimator.

pub mod attention;
pub mod checkpoint;
pub mod loss;
pub mod model;
pub mod params;
pub mod train;
pub mod transformer;

pub use attention::{attend, scaled_dot_attention, Mask};
pub use checkpoint::{
    load_checkpoint, load_pretrained_excluding_embeddings, read_manifest, save_checkpoint,
    transfer_excluding_embeddings, Checkpoint, Manifest,
};
pub use loss::{ce_loss, nce_loss, neg_loss, LossKind};
pub use model::{extract_qefv, pair_loss, predict_token_distribution, Objective, PairLoss, QefvSequence};
pub use params::{Architecture, PredictorHyper, PredictorParams};
pub use train::{encode_pairs, evaluate_predictor, train_predictor, EncodedPair, EpochLog, PredictorTrainConfig};

use crate::corpus::{encode, QESample, Vocab};
use crate::error::{Error, Result};

/// Trained predictor weights together with the vocabularies they expect.
#[derive(Debug, Clone)]
pub struct Predictor {
    pub params: PredictorParams,
    pub source_vocab: Vocab,
    pub target_vocab: Vocab,
}

impl Predictor {
    pub fn new(params: PredictorParams, source_vocab: Vocab, target_vocab: Vocab) -> Result<Self> {
        for (expected, vocab) in [
            (&params.source_fingerprint, &source_vocab),
            (&params.target_fingerprint, &target_vocab),
        ] {
            if expected != vocab.fingerprint() {
                return Err(Error::VocabMismatch {
                    expected: expected.to_string(),
                    found: vocab.fingerprint().to_string(),
                });
            }
        }
        Ok(Predictor {
            params,
            source_vocab,
            target_vocab,
        })
    }

    /// Width of the feature vectors this predictor emits (`2d`).
    pub fn feature_dim(&self) -> usize {
        self.params.hyper.state_dim()
    }

    pub fn qefv(&self, sample: &QESample) -> Result<QefvSequence> {
        let x = encode(&sample.source_tokens, &self.source_vocab);
        let y = encode(&sample.target_tokens, &self.target_vocab);
        extract_qefv(&self.params, &x, &y)
    }
}
