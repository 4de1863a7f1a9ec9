//! Forward and backward passes of the word predictor.
//!
//! For a framed target `z₀ = BOS, z₁ … z_T, z_{T+1} = EOS` and each position
//! `1 ≤ p ≤ T`:
//!
//! ```text
//! →s_{p−1} = forward decoder over z₀ … z_{p−1}
//! ←s_{p+1} = backward decoder over z_{T+1} … z_{p+1}
//! s_p      = [→s_{p−1} ; ←s_{p+1}]
//! c_p      = attention(s_p·W_q, encoder states)
//! h_p      = tanh([s_p ; emb(z_{p−1}) ; emb(z_{p+1}) ; c_p]·W_g + b_g)
//! logits_p = h_pᵀ·W
//! ```
//!
//! `h_p` is the pre-projection state; the quality feature vector of position
//! `p` is `W[:, z_p] ⊙ h_p`.

use rand::RngCore;

use super::attention::{attend, attend_backward, Mask};
use super::loss::{ce_loss, nce_loss, neg_loss};
use super::params::{Body, PredictorParams};
use super::transformer::{positional_encoding, TransformerCache};
use crate::corpus::{Encoded, NoiseDistribution, VocabFingerprint};
use crate::error::{Error, Result};
use crate::nn::lstm::{BiLstmCache, StackCache};
use crate::nn::ops::{dropout, softmax_in_place, DropoutMask};
use crate::nn::tensor::{matmul_vec_t, outer_acc, vec_matmul, Tensor2};

enum BodyCache {
    Rnn {
        encoder: BiLstmCache,
        fwd: StackCache,
        bwd: StackCache,
    },
    Transformer {
        encoder: TransformerCache,
        fwd: TransformerCache,
        bwd: TransformerCache,
    },
}

/// Everything a forward pass keeps for the backward pass. `hidden` holds
/// one pre-projection state per target position.
pub struct Forward {
    source: Vec<usize>,
    target: Vec<usize>,
    body: BodyCache,
    memory: Tensor2,
    states: Tensor2,
    queries: Tensor2,
    attention: Tensor2,
    combined: Tensor2,
    mask: Option<DropoutMask>,
    pub hidden: Tensor2,
}

impl Forward {
    /// Number of predicted positions `T`.
    pub fn positions(&self) -> usize {
        self.hidden.rows()
    }

    /// Observed token at position `p` (1-based), i.e. `z_p`.
    pub fn target_token(&self, p: usize) -> usize {
        self.target[p]
    }
}

fn gather(table: &Tensor2, ids: &[usize]) -> Tensor2 {
    let mut out = Tensor2::zeros(ids.len(), table.cols());
    for (r, &id) in ids.iter().enumerate() {
        out.row_mut(r).copy_from_slice(table.row(id));
    }
    out
}

fn scatter_add(table: &mut Tensor2, ids: &[usize], rows: &Tensor2) {
    for (r, &id) in ids.iter().enumerate() {
        for (t, v) in table.row_mut(id).iter_mut().zip(rows.row(r)) {
            *t += v;
        }
    }
}

fn with_positions(x: &Tensor2, start: usize) -> Tensor2 {
    let mut out = x.clone();
    out.add_assign(&positional_encoding(start..start + x.rows(), x.cols()));
    out
}

fn check_ids(ids: &[usize], vocab: usize, what: &str) -> Result<()> {
    match ids.iter().find(|&&id| id >= vocab) {
        Some(id) => Err(Error::InvalidArgument(format!(
            "{what} id {id} outside vocabulary of size {vocab}"
        ))),
        None => Ok(()),
    }
}

fn check_fingerprint(expected: &VocabFingerprint, found: &VocabFingerprint) -> Result<()> {
    if expected != found {
        return Err(Error::VocabMismatch {
            expected: expected.to_string(),
            found: found.to_string(),
        });
    }
    Ok(())
}

impl PredictorParams {
    /// Checks that both encoded sequences come from this model's vocabularies.
    pub fn check_inputs(&self, x: &Encoded, y: &Encoded) -> Result<()> {
        check_fingerprint(&self.source_fingerprint, &x.fingerprint)?;
        check_fingerprint(&self.target_fingerprint, &y.fingerprint)
    }

    /// Runs the predictor over a framed source and target. Dropout is active
    /// only when `rng` is given.
    pub fn forward(&self, source: &[usize], target: &[usize], rng: Option<&mut dyn RngCore>) -> Result<Forward> {
        if source.is_empty() {
            return Err(Error::EmptyInput("source sequence".into()));
        }
        if target.len() < 3 {
            return Err(Error::EmptyInput("target sequence".into()));
        }
        check_ids(source, self.source_vocab_size(), "source")?;
        check_ids(target, self.target_vocab_size(), "target")?;
        let t = target.len() - 2;
        let d = self.hyper.hidden;

        let ex = gather(&self.source_embedding, source);
        let ez = gather(&self.target_embedding, target);
        let left = ez.slice_rows(0, t);
        let right = ez.slice_rows(2, t + 2);

        let (memory, fwd_states, bwd_states, body) = match &self.body {
            Body::Rnn {
                encoder,
                fwd_decoder,
                bwd_decoder,
            } => {
                let (memory, enc) = encoder.run(&ex)?;
                let (f, fwd) = fwd_decoder.run(&left)?;
                let (b_rev, bwd) = bwd_decoder.run(&right.reversed_rows())?;
                (memory, f, b_rev.reversed_rows(), BodyCache::Rnn { encoder: enc, fwd, bwd })
            }
            Body::Transformer {
                encoder,
                fwd_decoder,
                bwd_decoder,
            } => {
                let (memory, enc) = encoder.run(&with_positions(&ex, 0), Mask::None)?;
                let (f, fwd) = fwd_decoder.run(&with_positions(&left, 0), Mask::Causal)?;
                let (b, bwd) = bwd_decoder.run(&with_positions(&right, 2), Mask::AntiCausal)?;
                (memory, f, b, BodyCache::Transformer { encoder: enc, fwd, bwd })
            }
        };
        debug_assert_eq!(fwd_states.cols(), d);

        let states = fwd_states.hconcat(&bwd_states)?;
        let queries = states.matmul(&self.attention_query)?;
        let attended = attend(&queries, &memory, &memory, Mask::None)?;
        let combined = states.hconcat(&left)?.hconcat(&right)?.hconcat(&attended.output)?;
        let (combined, mask) = match rng {
            Some(rng) => dropout(&combined, self.hyper.dropout, true, rng)?,
            None => (combined, None),
        };
        let mut hidden = combined.matmul(&self.combiner_w)?;
        for r in 0..hidden.rows() {
            for (v, b) in hidden.row_mut(r).iter_mut().zip(self.combiner_b.data()) {
                *v = (*v + b).tanh();
            }
        }
        Ok(Forward {
            source: source.to_vec(),
            target: target.to_vec(),
            body,
            memory,
            states,
            queries,
            attention: attended.weights,
            combined,
            mask,
            hidden,
        })
    }

    /// Accumulates into `grads` the gradient of a loss whose derivative
    /// w.r.t. `fwd.hidden` is `d_hidden`. The output projection gradient is
    /// the caller's responsibility since it depends on the loss.
    pub fn backward(&self, fwd: &Forward, d_hidden: &Tensor2, grads: &mut PredictorParams) -> Result<()> {
        let t = fwd.positions();
        let (d, e) = (self.hyper.hidden, self.hyper.emb_dim);
        let sd = 2 * d;

        let mut da = d_hidden.clone();
        for (g, h) in da.data_mut().iter_mut().zip(fwd.hidden.data()) {
            *g *= 1.0 - h * h;
        }
        grads.combiner_w.add_assign(&fwd.combined.t_matmul(&da)?);
        for r in 0..t {
            for (b, g) in grads.combiner_b.data_mut().iter_mut().zip(da.row(r)) {
                *b += g;
            }
        }
        let mut du = da.matmul_t(&self.combiner_w)?;
        if let Some(mask) = &fwd.mask {
            mask.apply(&mut du);
        }
        let mut d_states = du.slice_cols(0, sd);
        let mut d_left = du.slice_cols(sd, sd + e);
        let mut d_right = du.slice_cols(sd + e, sd + 2 * e);
        let d_context = du.slice_cols(sd + 2 * e, du.cols());

        let ag = attend_backward(&fwd.queries, &fwd.memory, &fwd.memory, &fwd.attention, &d_context)?;
        grads.attention_query.add_assign(&fwd.states.t_matmul(&ag.dq)?);
        d_states.add_assign(&ag.dq.matmul_t(&self.attention_query)?);
        let mut d_memory = ag.dk;
        d_memory.add_assign(&ag.dv);
        let d_fwd = d_states.slice_cols(0, d);
        let d_bwd = d_states.slice_cols(d, sd);

        let d_source = match (&self.body, &mut grads.body, &fwd.body) {
            (
                Body::Rnn {
                    encoder,
                    fwd_decoder,
                    bwd_decoder,
                },
                Body::Rnn {
                    encoder: g_enc,
                    fwd_decoder: g_fwd,
                    bwd_decoder: g_bwd,
                },
                BodyCache::Rnn {
                    encoder: c_enc,
                    fwd: c_fwd,
                    bwd: c_bwd,
                },
            ) => {
                d_left.add_assign(&fwd_decoder.backward(c_fwd, &d_fwd, g_fwd));
                let d_rev = bwd_decoder.backward(c_bwd, &d_bwd.reversed_rows(), g_bwd);
                d_right.add_assign(&d_rev.reversed_rows());
                encoder.backward(c_enc, &d_memory, g_enc)
            }
            (
                Body::Transformer {
                    encoder,
                    fwd_decoder,
                    bwd_decoder,
                },
                Body::Transformer {
                    encoder: g_enc,
                    fwd_decoder: g_fwd,
                    bwd_decoder: g_bwd,
                },
                BodyCache::Transformer {
                    encoder: c_enc,
                    fwd: c_fwd,
                    bwd: c_bwd,
                },
            ) => {
                d_left.add_assign(&fwd_decoder.backward(c_fwd, &d_fwd, g_fwd)?);
                d_right.add_assign(&bwd_decoder.backward(c_bwd, &d_bwd, g_bwd)?);
                encoder.backward(c_enc, &d_memory, g_enc)?
            }
            _ => return Err(Error::shape("predictor backward", "gradient architecture differs from model")),
        };

        scatter_add(&mut grads.target_embedding, &fwd.target[..t], &d_left);
        scatter_add(&mut grads.target_embedding, &fwd.target[2..], &d_right);
        scatter_add(&mut grads.source_embedding, &fwd.source, &d_source);
        Ok(())
    }

    /// Logits `h_pᵀ·W` for one 1-based position.
    pub fn logits(&self, fwd: &Forward, p: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.target_vocab_size()];
        vec_matmul(fwd.hidden.row(p - 1), &self.output, &mut out);
        out
    }
}

/// Predictive distribution over the target vocabulary for the token at
/// 1-based position `j`, conditioned on the source and all other target
/// tokens.
pub fn predict_token_distribution(params: &PredictorParams, x: &Encoded, y: &Encoded, j: usize) -> Result<Vec<f64>> {
    params.check_inputs(x, y)?;
    let t = y.inner_len();
    if j == 0 || j > t {
        return Err(Error::PositionOutOfRange { position: j, len: t });
    }
    let fwd = params.forward(&x.ids, &y.ids, None)?;
    let mut probs = params.logits(&fwd, j);
    softmax_in_place(&mut probs);
    Ok(probs)
}

/// One quality feature vector of width `2d` per target token.
#[derive(Debug, Clone, PartialEq)]
pub struct QefvSequence {
    pub vectors: Tensor2,
}

impl QefvSequence {
    pub fn len(&self) -> usize {
        self.vectors.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }
}

/// `QEFV_p = W[:, z_p] ⊙ h_p` for every target position, in inference mode.
pub fn extract_qefv(params: &PredictorParams, x: &Encoded, y: &Encoded) -> Result<QefvSequence> {
    params.check_inputs(x, y)?;
    let fwd = params.forward(&x.ids, &y.ids, None)?;
    let mut vectors = fwd.hidden.clone();
    for p in 1..=fwd.positions() {
        let tok = fwd.target_token(p);
        for (r, v) in vectors.row_mut(p - 1).iter_mut().enumerate() {
            *v *= params.output.get(r, tok);
        }
    }
    Ok(QefvSequence { vectors })
}

/// Training objective with negatives pre-drawn per position, so the same
/// loss can be re-evaluated exactly (as a gradient check needs).
#[derive(Debug, Clone, Copy)]
pub enum Objective<'a> {
    CrossEntropy,
    Nce {
        noise: &'a NoiseDistribution,
        negatives: &'a [Vec<usize>],
    },
    Neg {
        negatives: &'a [Vec<usize>],
    },
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PairLoss {
    /// Sum of per-position losses.
    pub loss: f64,
    pub positions: usize,
    /// Positions whose target probability hit the cross-entropy floor.
    pub clamped: usize,
}

/// Loss summed over all target positions of one pair. With `grads`, also
/// accumulates the gradient of that sum.
pub fn pair_loss(
    params: &PredictorParams,
    source: &[usize],
    target: &[usize],
    objective: Objective<'_>,
    rng: Option<&mut dyn RngCore>,
    grads: Option<&mut PredictorParams>,
) -> Result<PairLoss> {
    let fwd = params.forward(source, target, rng)?;
    let t = fwd.positions();
    if let Objective::Nce { negatives, .. } | Objective::Neg { negatives } = objective {
        if negatives.len() != t {
            return Err(Error::shape(
                "pair_loss",
                format!("{} negative lists for {t} positions", negatives.len()),
            ));
        }
    }

    let mut out = PairLoss {
        positions: t,
        ..PairLoss::default()
    };
    let mut d_hidden = Tensor2::zeros(t, fwd.hidden.cols());
    let mut d_output = grads.as_ref().map(|_| params.output.zeros_like());
    for p in 1..=t {
        let h = fwd.hidden.row(p - 1);
        let y = fwd.target_token(p);
        match objective {
            Objective::CrossEntropy => {
                let mut probs = params.logits(&fwd, p);
                softmax_in_place(&mut probs);
                let l = ce_loss(&probs, y)?;
                out.loss += l.loss;
                out.clamped += usize::from(l.clamped);
                if let Some(dw) = d_output.as_mut() {
                    matmul_vec_t(&params.output, &l.d_logits, d_hidden.row_mut(p - 1));
                    outer_acc(h, &l.d_logits, dw);
                }
            }
            Objective::Nce { noise, negatives } => {
                let l = nce_loss(h, &params.output, y, &negatives[p - 1], noise)?;
                out.loss += l.loss;
                if let Some(dw) = d_output.as_mut() {
                    d_hidden.row_mut(p - 1).copy_from_slice(&l.d_state);
                    l.accumulate_output_grad(h, dw);
                }
            }
            Objective::Neg { negatives } => {
                let l = neg_loss(h, &params.output, y, &negatives[p - 1])?;
                out.loss += l.loss;
                if let Some(dw) = d_output.as_mut() {
                    d_hidden.row_mut(p - 1).copy_from_slice(&l.d_state);
                    l.accumulate_output_grad(h, dw);
                }
            }
        }
    }
    if let Some(grads) = grads {
        params.backward(&fwd, &d_hidden, grads)?;
        grads.output.add_assign(d_output.as_ref().expect("allocated with grads"));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_vocab, encode};
    use crate::nn::gradcheck::check_model;
    use crate::predictor::params::{Architecture, PredictorHyper};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small(arch: Architecture, rng: &mut ChaCha8Rng) -> PredictorParams {
        let hyper = PredictorHyper {
            architecture: arch,
            layers: 2,
            hidden: 4,
            emb_dim: if arch == Architecture::Rnn { 3 } else { 4 },
            heads: 2,
            ff_dim: 6,
            dropout: 0.5,
        };
        let fp = |s: &str| VocabFingerprint(s.into());
        let mut p = PredictorParams::with_sizes(hyper, 7, 9, fp("src"), fp("tgt"), rng).unwrap();
        // Larger weights than the default init so every path carries signal.
        for (_, t) in crate::nn::Parameterized::params_mut(&mut p) {
            t.scale(4.0);
        }
        p
    }

    const SRC: [usize; 5] = [2, 4, 5, 6, 3];
    const TGT: [usize; 5] = [2, 4, 7, 8, 3];

    #[test]
    fn full_predictor_gradients_for_each_objective() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let noise = NoiseDistribution::from_counts(vec![0.0, 0.0, 0.0, 0.0, 2.0, 1.0, 1.0, 3.0, 1.0]).unwrap();
        let negatives = vec![vec![5, 8], vec![4, 6], vec![6, 6]];
        for arch in [Architecture::Rnn, Architecture::Transformer] {
            let mut params = small(arch, &mut rng);
            for objective in [
                Objective::CrossEntropy,
                Objective::Nce {
                    noise: &noise,
                    negatives: &negatives,
                },
                Objective::Neg { negatives: &negatives },
            ] {
                let mut grads = params.zeros_like();
                pair_loss(&params, &SRC, &TGT, objective, None, Some(&mut grads)).unwrap();
                let report = check_model(&mut params, &grads, |p| {
                    pair_loss(p, &SRC, &TGT, objective, None, None).unwrap().loss
                });
                assert!(report.max_rel_error < 1e-4, "{arch:?} {objective:?}: {report:?}");
            }
        }
    }

    #[test]
    fn gradients_with_dropout_mask_match_fixed_mask_loss() {
        // The same seed reproduces the same mask, so the loss is a
        // deterministic function of the parameters.
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let mut params = small(Architecture::Rnn, &mut rng);
        let loss = |p: &PredictorParams, grads: Option<&mut PredictorParams>| {
            let mut r = ChaCha8Rng::seed_from_u64(99);
            pair_loss(p, &SRC, &TGT, Objective::CrossEntropy, Some(&mut r), grads).unwrap().loss
        };
        let mut grads = params.zeros_like();
        loss(&params, Some(&mut grads));
        let report = check_model(&mut params, &grads, |p| loss(p, None));
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    fn vocab_pair() -> (crate::corpus::Vocab, crate::corpus::Vocab) {
        let src = build_vocab([["das", "haus", "ist", "klein"]], 1, 100).unwrap();
        let tgt = build_vocab([["the", "house", "is", "small"]], 1, 100).unwrap();
        (src, tgt)
    }

    #[test]
    fn distribution_is_normalized_and_positive() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (sv, tv) = vocab_pair();
        for hyper in [PredictorHyper::rnn().with_hidden(6), PredictorHyper::transformer().with_hidden(8)] {
            let hyper = PredictorHyper { layers: 1, ..hyper };
            let p = PredictorParams::new(hyper, &sv, &tv, &mut rng).unwrap();
            let x = encode(&["das", "haus"], &sv);
            let y = encode(&["the", "house", "is"], &tv);
            for j in 1..=3 {
                let probs = predict_token_distribution(&p, &x, &y, j).unwrap();
                assert_eq!(probs.len(), tv.len());
                assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                assert!(probs.iter().all(|&q| q > 0.0));
            }
            assert!(matches!(
                predict_token_distribution(&p, &x, &y, 0),
                Err(Error::PositionOutOfRange { .. })
            ));
            assert!(predict_token_distribution(&p, &x, &y, 4).is_err());
            assert!(matches!(
                predict_token_distribution(&p, &y, &x, 1),
                Err(Error::VocabMismatch { .. })
            ));
        }
    }

    #[test]
    fn zero_model_is_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (sv, tv) = vocab_pair();
        let p = PredictorParams::new(PredictorHyper::rnn().with_hidden(4), &sv, &tv, &mut rng)
            .unwrap()
            .zeros_like();
        let x = encode(&["das"], &sv);
        let y = encode(&["the", "house"], &tv);
        let probs = predict_token_distribution(&p, &x, &y, 2).unwrap();
        for q in probs {
            assert!((q - 1.0 / tv.len() as f64).abs() < 1e-15);
        }
    }

    #[test]
    fn qefv_identity_and_zero_columns() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (sv, tv) = vocab_pair();
        let mut p = PredictorParams::new(PredictorHyper::rnn().with_hidden(5), &sv, &tv, &mut rng).unwrap();
        let x = encode(&["das", "haus"], &sv);
        let y = encode(&["the", "house"], &tv);
        let (the, house) = (tv.id("the"), tv.id("house"));
        for r in 0..p.output.rows() {
            p.output.set(r, the, 1.0);
            p.output.set(r, house, 0.0);
        }
        let q = extract_qefv(&p, &x, &y).unwrap();
        let h = p.forward(&x.ids, &y.ids, None).unwrap().hidden;
        assert_eq!((q.len(), q.dim()), (2, 10));
        assert_eq!(q.vectors.row(0), h.row(0));
        assert!(q.vectors.row(1).iter().all(|&v| v == 0.0));
        assert_eq!(extract_qefv(&p, &x, &y).unwrap(), q);
        let empty = encode::<&str>(&[], &tv);
        assert!(matches!(extract_qefv(&p, &x, &empty), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn decoders_respect_context_direction() {
        // z₃ is visible to the forward half from position 4 on and to the
        // backward half up to position 2, never to position 3 itself.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for arch in [Architecture::Rnn, Architecture::Transformer] {
            let p = small(arch, &mut rng);
            let a = p.forward(&SRC, &[2, 4, 5, 6, 7, 3], None).unwrap();
            let b = p.forward(&SRC, &[2, 4, 5, 8, 7, 3], None).unwrap();
            let d = p.hyper.hidden;
            assert_eq!(a.states.row(2)[..d], b.states.row(2)[..d], "{arch:?} forward half at p=3");
            assert_ne!(a.states.row(3)[..d], b.states.row(3)[..d], "{arch:?} forward half at p=4");
            assert_eq!(a.states.row(2)[d..], b.states.row(2)[d..], "{arch:?} backward half at p=3");
            assert_ne!(a.states.row(1)[d..], b.states.row(1)[d..], "{arch:?} backward half at p=2");
        }
    }
}
