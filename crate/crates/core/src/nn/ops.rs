//! Elementwise and dense primitives with hand-written backward passes.

use rand::Rng;

use super::tensor::Tensor2;
use crate::error::{Error, Result};

/// `y = xW + b`, with `b` broadcast over rows.
pub fn affine(x: &Tensor2, w: &Tensor2, b: &[f64]) -> Result<Tensor2> {
    if b.len() != w.cols() {
        return Err(Error::shape(
            "affine",
            format!("bias of length {} for {} outputs", b.len(), w.cols()),
        ));
    }
    let mut y = x.matmul(w)?;
    for r in 0..y.rows() {
        for (v, bi) in y.row_mut(r).iter_mut().zip(b) {
            *v += bi;
        }
    }
    Ok(y)
}

#[derive(Debug, Clone)]
pub struct AffineGrads {
    pub dx: Tensor2,
    pub dw: Tensor2,
    pub db: Vec<f64>,
}

pub fn affine_backward(x: &Tensor2, w: &Tensor2, dy: &Tensor2) -> Result<AffineGrads> {
    let dx = dy.matmul_t(w)?;
    let dw = x.t_matmul(dy)?;
    let mut db = vec![0.0; dy.cols()];
    for r in 0..dy.rows() {
        for (acc, v) in db.iter_mut().zip(dy.row(r)) {
            *acc += v;
        }
    }
    Ok(AffineGrads { dx, dw, db })
}

/// Max-subtracted softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let mut out = logits.to_vec();
    softmax_in_place(&mut out);
    out
}

pub fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

/// Gradient w.r.t. the logits given the gradient w.r.t. the probabilities.
pub fn softmax_backward(probs: &[f64], dprobs: &[f64]) -> Vec<f64> {
    let inner: f64 = probs.iter().zip(dprobs).map(|(p, d)| p * d).sum();
    probs
        .iter()
        .zip(dprobs)
        .map(|(p, d)| p * (d - inner))
        .collect()
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid_vec(xs: &[f64]) -> Vec<f64> {
    xs.iter().map(|&x| sigmoid(x)).collect()
}

/// Derivative through a sigmoid, expressed with its output `y`.
#[inline]
pub fn sigmoid_backward(y: f64, dy: f64) -> f64 {
    dy * y * (1.0 - y)
}

/// `ln σ(x)` without overflow for large `|x|`.
#[inline]
pub fn log_sigmoid(x: f64) -> f64 {
    -((-x).max(0.0) + (-x.abs()).exp().ln_1p())
}

#[inline]
pub fn tanh_backward(y: f64, dy: f64) -> f64 {
    dy * (1.0 - y * y)
}

/// Keep-mask produced by [`dropout`]; already holds the `1/(1-rate)` scale.
#[derive(Debug, Clone)]
pub struct DropoutMask(pub Vec<f64>);

impl DropoutMask {
    pub fn apply(&self, t: &mut Tensor2) {
        for (v, m) in t.data_mut().iter_mut().zip(&self.0) {
            *v *= m;
        }
    }
}

/// Inverted dropout. Returns the identity (and no mask) at inference or at rate 0.
pub fn dropout<R: Rng + ?Sized>(
    x: &Tensor2,
    rate: f64,
    training: bool,
    rng: &mut R,
) -> Result<(Tensor2, Option<DropoutMask>)> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::InvalidArgument(format!(
            "dropout rate {rate} outside [0, 1)"
        )));
    }
    if !training || rate == 0.0 {
        return Ok((x.clone(), None));
    }
    let keep = 1.0 / (1.0 - rate);
    let mask = DropoutMask(
        (0..x.len())
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
            .collect(),
    );
    let mut y = x.clone();
    mask.apply(&mut y);
    Ok((y, Some(mask)))
}
