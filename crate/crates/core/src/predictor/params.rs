use rand::Rng;
use serde::{Deserialize, Serialize};

use super::transformer::TransformerStack;
use crate::corpus::{Vocab, VocabFingerprint};
use crate::error::{Error, Result};
use crate::nn::lstm::{BiLstm, LstmStack};
use crate::nn::params::{push, push_mut, Parameterized};
use crate::nn::tensor::Tensor2;
use crate::nn::INIT_SCALE;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    Rnn,
    Transformer,
}

impl std::fmt::Display for Architecture {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Architecture::Rnn => "rnn",
            Architecture::Transformer => "transformer",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PredictorHyper {
    pub architecture: Architecture,
    pub layers: usize,
    /// Per-direction hidden size `d`; predictor states are `2d` wide.
    pub hidden: usize,
    /// Embedding width. The transformer variant requires `emb_dim == hidden`.
    pub emb_dim: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub dropout: f64,
}

impl Default for PredictorHyper {
    fn default() -> Self {
        PredictorHyper::rnn()
    }
}

impl PredictorHyper {
    pub fn rnn() -> Self {
        PredictorHyper {
            architecture: Architecture::Rnn,
            layers: 2,
            hidden: 400,
            emb_dim: 200,
            heads: 4,
            ff_dim: 1600,
            dropout: 0.5,
        }
    }

    pub fn transformer() -> Self {
        PredictorHyper {
            architecture: Architecture::Transformer,
            layers: 6,
            hidden: 400,
            emb_dim: 400,
            heads: 4,
            ff_dim: 1600,
            dropout: 0.1,
        }
    }

    /// Copy with a different hidden size; the transformer keeps `emb_dim`
    /// and `ff_dim` tied to it.
    pub fn with_hidden(mut self, d: usize) -> Self {
        self.hidden = d;
        if self.architecture == Architecture::Transformer {
            self.emb_dim = d;
            self.ff_dim = 4 * d;
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.layers == 0 || self.hidden == 0 || self.emb_dim == 0 {
            return bad(format!("layers, hidden and emb_dim must be positive: {self:?}"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.architecture == Architecture::Transformer {
            if self.emb_dim != self.hidden {
                return bad(format!(
                    "transformer needs emb_dim == hidden, got {} and {}",
                    self.emb_dim, self.hidden
                ));
            }
            if self.heads == 0 || self.hidden % self.heads != 0 {
                return bad(format!("hidden {} not divisible by {} heads", self.hidden, self.heads));
            }
            if self.ff_dim == 0 {
                return bad("ff_dim must be positive".into());
            }
        }
        Ok(())
    }

    /// Width of the encoder states the attention reads.
    pub fn memory_dim(&self) -> usize {
        match self.architecture {
            Architecture::Rnn => 2 * self.hidden,
            Architecture::Transformer => self.hidden,
        }
    }

    pub fn state_dim(&self) -> usize {
        2 * self.hidden
    }

    pub fn combiner_input_dim(&self) -> usize {
        self.state_dim() + 2 * self.emb_dim + self.memory_dim()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Body {
    Rnn {
        encoder: BiLstm,
        fwd_decoder: LstmStack,
        bwd_decoder: LstmStack,
    },
    Transformer {
        encoder: TransformerStack,
        fwd_decoder: TransformerStack,
        bwd_decoder: TransformerStack,
    },
}

impl Body {
    fn zeros_like(&self) -> Self {
        match self {
            Body::Rnn {
                encoder,
                fwd_decoder,
                bwd_decoder,
            } => Body::Rnn {
                encoder: encoder.zeros_like(),
                fwd_decoder: fwd_decoder.zeros_like(),
                bwd_decoder: bwd_decoder.zeros_like(),
            },
            Body::Transformer {
                encoder,
                fwd_decoder,
                bwd_decoder,
            } => Body::Transformer {
                encoder: encoder.zeros_like(),
                fwd_decoder: fwd_decoder.zeros_like(),
                bwd_decoder: bwd_decoder.zeros_like(),
            },
        }
    }
}

/// All predictor weights plus the fingerprints of the vocabularies they
/// were built for.
///
/// Output logits for a state `h` are `hᵀ·W` with `W` of shape `2d × K_y`.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictorParams {
    pub hyper: PredictorHyper,
    pub source_embedding: Tensor2,
    pub target_embedding: Tensor2,
    pub body: Body,
    /// Projects decoder states `[→s ; ←s]` into the encoder-state space.
    pub attention_query: Tensor2,
    pub combiner_w: Tensor2,
    pub combiner_b: Tensor2,
    pub output: Tensor2,
    pub source_fingerprint: VocabFingerprint,
    pub target_fingerprint: VocabFingerprint,
}

impl PredictorParams {
    pub fn new<R: Rng + ?Sized>(hyper: PredictorHyper, source: &Vocab, target: &Vocab, rng: &mut R) -> Result<Self> {
        Self::with_sizes(
            hyper,
            source.len(),
            target.len(),
            source.fingerprint().clone(),
            target.fingerprint().clone(),
            rng,
        )
    }

    pub fn with_sizes<R: Rng + ?Sized>(
        hyper: PredictorHyper,
        source_vocab: usize,
        target_vocab: usize,
        source_fingerprint: VocabFingerprint,
        target_fingerprint: VocabFingerprint,
        rng: &mut R,
    ) -> Result<Self> {
        hyper.validate()?;
        let (d, e, s) = (hyper.hidden, hyper.emb_dim, INIT_SCALE);
        let source_embedding = Tensor2::uniform(source_vocab, e, s, rng);
        let target_embedding = Tensor2::uniform(target_vocab, e, s, rng);
        let body = match hyper.architecture {
            Architecture::Rnn => Body::Rnn {
                encoder: BiLstm::uniform(e, d, hyper.layers, s, rng),
                fwd_decoder: LstmStack::uniform(e, d, hyper.layers, s, rng),
                bwd_decoder: LstmStack::uniform(e, d, hyper.layers, s, rng),
            },
            Architecture::Transformer => {
                let mut stack = || TransformerStack::uniform(d, hyper.ff_dim, hyper.layers, hyper.heads, s, rng);
                Body::Transformer {
                    encoder: stack()?,
                    fwd_decoder: stack()?,
                    bwd_decoder: stack()?,
                }
            }
        };
        Ok(PredictorParams {
            hyper,
            source_embedding,
            target_embedding,
            body,
            attention_query: Tensor2::uniform(hyper.state_dim(), hyper.memory_dim(), s, rng),
            combiner_w: Tensor2::uniform(hyper.combiner_input_dim(), hyper.state_dim(), s, rng),
            combiner_b: Tensor2::uniform(1, hyper.state_dim(), s, rng),
            output: Tensor2::uniform(hyper.state_dim(), target_vocab, s, rng),
            source_fingerprint,
            target_fingerprint,
        })
    }

    /// Same shapes and metadata, every tensor zero. Doubles as a gradient
    /// accumulator.
    pub fn zeros_like(&self) -> Self {
        PredictorParams {
            hyper: self.hyper,
            source_embedding: self.source_embedding.zeros_like(),
            target_embedding: self.target_embedding.zeros_like(),
            body: self.body.zeros_like(),
            attention_query: self.attention_query.zeros_like(),
            combiner_w: self.combiner_w.zeros_like(),
            combiner_b: self.combiner_b.zeros_like(),
            output: self.output.zeros_like(),
            source_fingerprint: self.source_fingerprint.clone(),
            target_fingerprint: self.target_fingerprint.clone(),
        }
    }

    /// Target vocabulary size `K_y`.
    pub fn target_vocab_size(&self) -> usize {
        self.output.cols()
    }

    pub fn source_vocab_size(&self) -> usize {
        self.source_embedding.rows()
    }
}

/// Names of embedding tensors start with this prefix; transfer loading
/// skips them.
pub const EMBEDDING_PREFIX: &str = "embedding.";

impl Parameterized for PredictorParams {
    fn params(&self) -> Vec<(String, &Tensor2)> {
        let mut out = Vec::new();
        push(&mut out, "embedding", "source", &self.source_embedding);
        push(&mut out, "embedding", "target", &self.target_embedding);
        match &self.body {
            Body::Rnn {
                encoder,
                fwd_decoder,
                bwd_decoder,
            } => {
                encoder.collect("encoder", &mut out);
                fwd_decoder.collect("decoder_fwd", &mut out);
                bwd_decoder.collect("decoder_bwd", &mut out);
            }
            Body::Transformer {
                encoder,
                fwd_decoder,
                bwd_decoder,
            } => {
                encoder.collect("encoder", &mut out);
                fwd_decoder.collect("decoder_fwd", &mut out);
                bwd_decoder.collect("decoder_bwd", &mut out);
            }
        }
        push(&mut out, "attention", "query", &self.attention_query);
        push(&mut out, "combiner", "w", &self.combiner_w);
        push(&mut out, "combiner", "b", &self.combiner_b);
        push(&mut out, "output", "w", &self.output);
        out
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor2)> {
        let mut out = Vec::new();
        push_mut(&mut out, "embedding", "source", &mut self.source_embedding);
        push_mut(&mut out, "embedding", "target", &mut self.target_embedding);
        match &mut self.body {
            Body::Rnn {
                encoder,
                fwd_decoder,
                bwd_decoder,
            } => {
                encoder.collect_mut("encoder", &mut out);
                fwd_decoder.collect_mut("decoder_fwd", &mut out);
                bwd_decoder.collect_mut("decoder_bwd", &mut out);
            }
            Body::Transformer {
                encoder,
                fwd_decoder,
                bwd_decoder,
            } => {
                encoder.collect_mut("encoder", &mut out);
                fwd_decoder.collect_mut("decoder_fwd", &mut out);
                bwd_decoder.collect_mut("decoder_bwd", &mut out);
            }
        }
        push_mut(&mut out, "attention", "query", &mut self.attention_query);
        push_mut(&mut out, "combiner", "w", &mut self.combiner_w);
        push_mut(&mut out, "combiner", "b", &mut self.combiner_b);
        push_mut(&mut out, "output", "w", &mut self.output);
        out
    }
}
