//! Per-position training losses for the predictor.
//!
//! Cross-entropy works on the full softmax. The two sampled losses score
//! only the positive column and `k` sampled columns of the output
//! projection, so their gradients touch only those columns.

use crate::corpus::NoiseDistribution;
use crate::error::{Error, Result};
use crate::nn::ops::{log_sigmoid, sigmoid};
use crate::nn::tensor::Tensor2;

/// Probabilities below this are clamped before taking the log.
pub const PROB_FLOOR: f64 = 1e-30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Ce,
    Nce,
    Neg,
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ce" => Ok(LossKind::Ce),
            "nce" => Ok(LossKind::Nce),
            "neg" => Ok(LossKind::Neg),
            other => Err(Error::InvalidArgument(format!(
                "unknown loss {other:?}; expected ce, nce or neg"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CeLoss {
    pub loss: f64,
    /// Gradient w.r.t. the logits: `probs − onehot(target)`.
    pub d_logits: Vec<f64>,
    pub clamped: bool,
}

/// `−ln probs[target]`, clamped at [`PROB_FLOOR`].
pub fn ce_loss(probs: &[f64], target: usize) -> Result<CeLoss> {
    if target >= probs.len() {
        return Err(Error::PositionOutOfRange {
            position: target,
            len: probs.len(),
        });
    }
    let p = probs[target];
    let clamped = p < PROB_FLOOR;
    let mut d_logits = probs.to_vec();
    d_logits[target] -= 1.0;
    Ok(CeLoss {
        loss: -p.max(PROB_FLOOR).ln(),
        d_logits,
        clamped,
    })
}

/// Loss and gradients of a sampled objective for one position.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledLoss {
    pub loss: f64,
    /// Gradient w.r.t. the pre-projection state.
    pub d_state: Vec<f64>,
    /// `(column, dJ/ds)` for the positive then each negative, in order.
    /// Repeated negatives appear once per draw.
    pub d_scores: Vec<(usize, f64)>,
}

impl SampledLoss {
    /// Accumulates `dJ/dW[:, c] = dJ/ds_c · state` into `grad_w`.
    pub fn accumulate_output_grad(&self, state: &[f64], grad_w: &mut Tensor2) {
        for &(c, ds) in &self.d_scores {
            for (r, s) in state.iter().enumerate() {
                let v = grad_w.get(r, c) + ds * s;
                grad_w.set(r, c, v);
            }
        }
    }
}

fn column_score(state: &[f64], w: &Tensor2, c: usize) -> f64 {
    state.iter().enumerate().map(|(r, s)| s * w.get(r, c)).sum()
}

fn check_columns(w: &Tensor2, state: &[f64], ids: impl IntoIterator<Item = usize>) -> Result<()> {
    if state.len() != w.rows() {
        return Err(Error::shape(
            "sampled loss",
            format!("state width {} vs projection rows {}", state.len(), w.rows()),
        ));
    }
    for c in ids {
        if c >= w.cols() {
            return Err(Error::PositionOutOfRange {
                position: c,
                len: w.cols(),
            });
        }
    }
    Ok(())
}

fn finish(state: &[f64], w: &Tensor2, loss: f64, d_scores: Vec<(usize, f64)>) -> SampledLoss {
    let mut d_state = vec![0.0; state.len()];
    for &(c, ds) in &d_scores {
        for (r, d) in d_state.iter_mut().enumerate() {
            *d += ds * w.get(r, c);
        }
    }
    SampledLoss {
        loss,
        d_state,
        d_scores,
    }
}

/// Noise-contrastive estimation with a word-specific noise term:
///
/// ```text
/// J = −[ ln σ(s⁺ − ln kQ(w⁺)) + Σ ln σ(−(s′ − ln kQ(w′))) ]
/// ```
///
/// which equals `−[ln e^{s⁺}/(e^{s⁺}+kQ) + Σ ln(1 − e^{s′}/(e^{s′}+kQ′))]`.
pub fn nce_loss(
    state: &[f64],
    w: &Tensor2,
    target: usize,
    negatives: &[usize],
    noise: &NoiseDistribution,
) -> Result<SampledLoss> {
    check_columns(w, state, std::iter::once(target).chain(negatives.iter().copied()))?;
    let k = negatives.len() as f64;
    let log_kq = |id: usize| -> Result<f64> {
        let q = noise.prob(id);
        if q <= 0.0 {
            return Err(Error::ZeroNoiseMass(id));
        }
        Ok((k * q).ln())
    };
    let delta = column_score(state, w, target) - log_kq(target)?;
    let mut loss = -log_sigmoid(delta);
    let mut d_scores = vec![(target, sigmoid(delta) - 1.0)];
    for &neg in negatives {
        let delta = column_score(state, w, neg) - log_kq(neg)?;
        loss -= log_sigmoid(-delta);
        d_scores.push((neg, sigmoid(delta)));
    }
    Ok(finish(state, w, loss, d_scores))
}

/// Negative sampling: `J = −[ln σ(s⁺) + Σ ln σ(−s′)]`.
pub fn neg_loss(state: &[f64], w: &Tensor2, target: usize, negatives: &[usize]) -> Result<SampledLoss> {
    check_columns(w, state, std::iter::once(target).chain(negatives.iter().copied()))?;
    let s = column_score(state, w, target);
    let mut loss = -log_sigmoid(s);
    let mut d_scores = vec![(target, sigmoid(s) - 1.0)];
    for &neg in negatives {
        let s = column_score(state, w, neg);
        loss -= log_sigmoid(-s);
        d_scores.push((neg, sigmoid(s)));
    }
    Ok(finish(state, w, loss, d_scores))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::check_gradients;
    use crate::nn::ops::softmax;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn noise_half() -> NoiseDistribution {
        // ids 4 and 5 each carry mass 0.5.
        NoiseDistribution::from_counts(vec![0.0, 0.0, 0.0, 0.0, 1.0, 1.0]).unwrap()
    }

    #[test]
    fn ce_uniform_and_certain() {
        let l = ce_loss(&[0.25; 4], 2).unwrap();
        assert!((l.loss - 4f64.ln()).abs() < 1e-12);
        assert_eq!(ce_loss(&[0.0, 1.0], 1).unwrap().loss, 0.0);
        let l = ce_loss(&[1.0, 0.0], 1).unwrap();
        assert!(l.clamped);
        assert!((l.loss - 1e30f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn ce_gradient_is_probs_minus_onehot() {
        let logits = vec![0.3, -1.2, 2.0, 0.1];
        let probs = softmax(&logits);
        let g = ce_loss(&probs, 1).unwrap().d_logits;
        let h = 1e-5;
        for i in 0..logits.len() {
            let mut a = logits.clone();
            let mut b = logits.clone();
            a[i] += h;
            b[i] -= h;
            let fd = (ce_loss(&softmax(&a), 1).unwrap().loss - ce_loss(&softmax(&b), 1).unwrap().loss) / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-8, "{i}: {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn nce_hand_example() {
        // Zero state gives s⁺ = s′ = 0; k = 1, Q = 0.5 for both words.
        let w = Tensor2::zeros(2, 6);
        let l = nce_loss(&[0.0, 0.0], &w, 4, &[5], &noise_half()).unwrap();
        let expected = -((2.0f64 / 3.0).ln() + (1.0f64 / 3.0).ln());
        assert!((l.loss - expected).abs() < 1e-12);
        assert!((l.loss - 1.5041).abs() < 1e-3);
    }

    #[test]
    fn neg_hand_example() {
        let w = Tensor2::zeros(2, 6);
        let l = neg_loss(&[0.0, 0.0], &w, 4, &[5]).unwrap();
        assert!((l.loss - 2.0 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn sampled_losses_vanish_in_the_separable_limit() {
        let mut w = Tensor2::zeros(1, 6);
        w.set(0, 4, 1.0);
        w.set(0, 5, -1.0);
        let state = [60.0];
        assert!(neg_loss(&state, &w, 4, &[5]).unwrap().loss < 1e-20);
        assert!(nce_loss(&state, &w, 4, &[5], &noise_half()).unwrap().loss < 1e-20);
    }

    #[test]
    fn nce_rejects_target_without_noise_mass() {
        let w = Tensor2::zeros(1, 6);
        assert!(matches!(
            nce_loss(&[0.0], &w, 1, &[5], &noise_half()),
            Err(Error::ZeroNoiseMass(1))
        ));
    }

    #[test]
    fn sampled_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let noise = NoiseDistribution::from_counts(vec![0.0, 0.0, 0.0, 0.0, 3.0, 1.0, 2.0, 5.0]).unwrap();
        let negatives = [5, 7, 5, 6];
        for nce in [true, false] {
            let state = Tensor2::uniform(1, 3, 1.0, &mut rng);
            let w = Tensor2::uniform(3, 8, 1.0, &mut rng);
            let eval = |s: &Tensor2, w: &Tensor2| {
                if nce {
                    nce_loss(s.row(0), w, 4, &negatives, &noise).unwrap()
                } else {
                    neg_loss(s.row(0), w, 4, &negatives).unwrap()
                }
            };
            let l = eval(&state, &w);
            let mut gw = w.zeros_like();
            l.accumulate_output_grad(state.row(0), &mut gw);
            let gs = Tensor2::row_vector(&l.d_state);
            for c in [0, 1, 2, 3] {
                assert_eq!(gw.column(c), vec![0.0; 3], "untouched column {c}");
            }
            let report = check_gradients(&mut [state, w], &[gs, gw], |p| eval(&p[0], &p[1]).loss);
            assert!(report.max_rel_error < 1e-6, "nce={nce}: {report:?}");
        }
    }
}
