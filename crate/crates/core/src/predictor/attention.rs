//! Scaled dot-product attention, `softmax(QKᵀ/√d_k)·V`, with an optional
//! causal or anti-causal mask.

use crate::error::{Error, Result};
use crate::nn::ops::{softmax_backward, softmax_in_place};
use crate::nn::tensor::Tensor2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mask {
    None,
    /// Query `i` sees keys `0..=i`.
    Causal,
    /// Query `i` sees keys `i..`.
    AntiCausal,
}

impl Mask {
    #[inline]
    fn allows(self, query: usize, key: usize) -> bool {
        match self {
            Mask::None => true,
            Mask::Causal => key <= query,
            Mask::AntiCausal => key >= query,
        }
    }
}

/// Forward result; `weights` is the row-stochastic attention matrix kept for
/// the backward pass.
#[derive(Debug, Clone)]
pub struct Attended {
    pub output: Tensor2,
    pub weights: Tensor2,
}

pub fn scaled_dot_attention(q: &Tensor2, k: &Tensor2, v: &Tensor2) -> Result<Tensor2> {
    Ok(attend(q, k, v, Mask::None)?.output)
}

pub fn attend(q: &Tensor2, k: &Tensor2, v: &Tensor2, mask: Mask) -> Result<Attended> {
    if q.cols() != k.cols() {
        return Err(Error::shape(
            "attention",
            format!("query width {} vs key width {}", q.cols(), k.cols()),
        ));
    }
    if k.rows() != v.rows() {
        return Err(Error::shape(
            "attention",
            format!("{} keys vs {} values", k.rows(), v.rows()),
        ));
    }
    if k.rows() == 0 {
        return Err(Error::EmptyInput("attention keys".into()));
    }
    if mask != Mask::None && q.rows() != k.rows() {
        return Err(Error::shape("attention", "masked attention needs square scores"));
    }
    let scale = 1.0 / (k.cols() as f64).sqrt();
    let mut weights = q.matmul_t(k)?;
    for i in 0..weights.rows() {
        let row = weights.row_mut(i);
        for (j, s) in row.iter_mut().enumerate() {
            *s = if mask.allows(i, j) {
                *s * scale
            } else {
                f64::NEG_INFINITY
            };
        }
        softmax_in_place(row);
    }
    let output = weights.matmul(v)?;
    Ok(Attended { output, weights })
}

pub struct AttentionGrads {
    pub dq: Tensor2,
    pub dk: Tensor2,
    pub dv: Tensor2,
}

pub fn attend_backward(
    q: &Tensor2,
    k: &Tensor2,
    v: &Tensor2,
    weights: &Tensor2,
    d_out: &Tensor2,
) -> Result<AttentionGrads> {
    let scale = 1.0 / (k.cols() as f64).sqrt();
    let dv = weights.t_matmul(d_out)?;
    let d_weights = d_out.matmul_t(v)?;
    let mut d_scores = Tensor2::zeros(weights.rows(), weights.cols());
    for i in 0..weights.rows() {
        let ds = softmax_backward(weights.row(i), d_weights.row(i));
        for (dst, v) in d_scores.row_mut(i).iter_mut().zip(ds) {
            *dst = v * scale;
        }
    }
    let dq = d_scores.matmul(k)?;
    let dk = d_scores.t_matmul(q)?;
    Ok(AttentionGrads { dq, dk, dv })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::check_gradients;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(rows: usize, cols: usize, v: &[f64]) -> Tensor2 {
        Tensor2::from_vec(rows, cols, v.to_vec()).unwrap()
    }

    #[test]
    fn single_key_returns_its_value() {
        let q = t(2, 2, &[3.0, -1.0, 0.2, 9.0]);
        let k = t(1, 2, &[0.5, 0.5]);
        let v = t(1, 3, &[1.0, 2.0, 3.0]);
        let out = scaled_dot_attention(&q, &k, &v).unwrap();
        for r in 0..2 {
            assert_eq!(out.row(r), &[1.0, 2.0, 3.0]);
        }
    }

    #[test]
    fn orthogonal_query_averages_values() {
        let q = t(1, 2, &[0.0, 1.0]);
        let k = t(3, 2, &[1.0, 0.0, 2.0, 0.0, -1.0, 0.0]);
        let v = t(3, 1, &[1.0, 2.0, 6.0]);
        let out = scaled_dot_attention(&q, &k, &v).unwrap();
        assert!((out.get(0, 0) - 3.0).abs() < 1e-12);
    }

    #[test]
    fn hand_computed_two_by_two() {
        let q = t(1, 2, &[1.0, 0.0]);
        let k = t(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let v = t(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let a = attend(&q, &k, &v, Mask::None).unwrap();
        let e = (1.0 / 2f64.sqrt()).exp();
        let w0 = e / (e + 1.0);
        assert!((a.weights.get(0, 0) - 0.6698).abs() < 1e-4);
        assert!((a.weights.get(0, 1) - 0.3302).abs() < 1e-4);
        assert!((a.output.get(0, 0) - w0).abs() < 1e-15);
        assert!((a.output.get(0, 1) - (1.0 - w0)).abs() < 1e-15);
    }

    #[test]
    fn dimension_mismatch() {
        let q = Tensor2::zeros(1, 3);
        let k = Tensor2::zeros(2, 2);
        let v = Tensor2::zeros(2, 2);
        assert!(scaled_dot_attention(&q, &k, &v).is_err());
        let q = Tensor2::zeros(1, 2);
        let v = Tensor2::zeros(3, 2);
        assert!(scaled_dot_attention(&q, &k, &v).is_err());
    }

    #[test]
    fn causal_masks_future() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor2::uniform(4, 3, 1.0, &mut rng);
        let a = attend(&x, &x, &x, Mask::Causal).unwrap();
        let b = attend(&x, &x, &x, Mask::AntiCausal).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                if j > i {
                    assert_eq!(a.weights.get(i, j), 0.0);
                }
                if j < i {
                    assert_eq!(b.weights.get(i, j), 0.0);
                }
            }
        }
        assert_eq!(a.output.row(0), x.row(0));
        assert_eq!(b.output.row(3), x.row(3));
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for mask in [Mask::None, Mask::Causal, Mask::AntiCausal] {
            let q = Tensor2::uniform(3, 4, 1.0, &mut rng);
            let k = Tensor2::uniform(3, 4, 1.0, &mut rng);
            let v = Tensor2::uniform(3, 2, 1.0, &mut rng);
            let probe = Tensor2::uniform(3, 2, 1.0, &mut rng);
            let a = attend(&q, &k, &v, mask).unwrap();
            let g = attend_backward(&q, &k, &v, &a.weights, &probe).unwrap();
            let report = check_gradients(&mut [q, k, v], &[g.dq, g.dk, g.dv], |p| {
                let o = attend(&p[0], &p[1], &p[2], mask).unwrap().output;
                o.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum()
            });
            assert!(report.max_rel_error < 1e-6, "{mask:?}: {report:?}");
        }
    }
}
