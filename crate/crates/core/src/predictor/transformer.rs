//! Pre-norm transformer blocks used by the transformer predictor variant.
//!
//! Each block computes
//!
//! ```text
//! x₁ = x + MultiHead(LN₁(x))·W_o + b_o
//! y  = x₁ + ReLU(LN₂(x₁)·W₁ + b₁)·W₂ + b₂
//! ```
//!
//! and a stack ends with a final layer norm. Heads split the model width
//! into equal contiguous column groups.

use rand::Rng;

use super::attention::{attend, attend_backward, Mask};
use crate::error::{Error, Result};
use crate::nn::params::{push, push_mut};
use crate::nn::tensor::Tensor2;

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct TransformerLayerParams {
    pub w_q: Tensor2,
    pub w_k: Tensor2,
    pub w_v: Tensor2,
    pub w_o: Tensor2,
    pub b_o: Tensor2,
    pub ln1_gain: Tensor2,
    pub ln1_bias: Tensor2,
    pub ln2_gain: Tensor2,
    pub ln2_bias: Tensor2,
    pub w_ff1: Tensor2,
    pub b_ff1: Tensor2,
    pub w_ff2: Tensor2,
    pub b_ff2: Tensor2,
}

impl TransformerLayerParams {
    pub fn uniform<R: Rng + ?Sized>(d: usize, ff: usize, scale: f64, rng: &mut R) -> Self {
        let ones = Tensor2::from_vec(1, d, vec![1.0; d]).expect("1×d");
        TransformerLayerParams {
            w_q: Tensor2::uniform(d, d, scale, rng),
            w_k: Tensor2::uniform(d, d, scale, rng),
            w_v: Tensor2::uniform(d, d, scale, rng),
            w_o: Tensor2::uniform(d, d, scale, rng),
            b_o: Tensor2::uniform(1, d, scale, rng),
            ln1_gain: ones.clone(),
            ln1_bias: Tensor2::zeros(1, d),
            ln2_gain: ones,
            ln2_bias: Tensor2::zeros(1, d),
            w_ff1: Tensor2::uniform(d, ff, scale, rng),
            b_ff1: Tensor2::uniform(1, ff, scale, rng),
            w_ff2: Tensor2::uniform(ff, d, scale, rng),
            b_ff2: Tensor2::uniform(1, d, scale, rng),
        }
    }

    fn zeros_like(&self) -> Self {
        TransformerLayerParams {
            w_q: self.w_q.zeros_like(),
            w_k: self.w_k.zeros_like(),
            w_v: self.w_v.zeros_like(),
            w_o: self.w_o.zeros_like(),
            b_o: self.b_o.zeros_like(),
            ln1_gain: self.ln1_gain.zeros_like(),
            ln1_bias: self.ln1_bias.zeros_like(),
            ln2_gain: self.ln2_gain.zeros_like(),
            ln2_bias: self.ln2_bias.zeros_like(),
            w_ff1: self.w_ff1.zeros_like(),
            b_ff1: self.b_ff1.zeros_like(),
            w_ff2: self.w_ff2.zeros_like(),
            b_ff2: self.b_ff2.zeros_like(),
        }
    }

    fn tensors(&self) -> [(&'static str, &Tensor2); 13] {
        [
            ("w_q", &self.w_q),
            ("w_k", &self.w_k),
            ("w_v", &self.w_v),
            ("w_o", &self.w_o),
            ("b_o", &self.b_o),
            ("ln1_gain", &self.ln1_gain),
            ("ln1_bias", &self.ln1_bias),
            ("ln2_gain", &self.ln2_gain),
            ("ln2_bias", &self.ln2_bias),
            ("w_ff1", &self.w_ff1),
            ("b_ff1", &self.b_ff1),
            ("w_ff2", &self.w_ff2),
            ("b_ff2", &self.b_ff2),
        ]
    }

    fn tensors_mut(&mut self) -> [(&'static str, &mut Tensor2); 13] {
        [
            ("w_q", &mut self.w_q),
            ("w_k", &mut self.w_k),
            ("w_v", &mut self.w_v),
            ("w_o", &mut self.w_o),
            ("b_o", &mut self.b_o),
            ("ln1_gain", &mut self.ln1_gain),
            ("ln1_bias", &mut self.ln1_bias),
            ("ln2_gain", &mut self.ln2_gain),
            ("ln2_bias", &mut self.ln2_bias),
            ("w_ff1", &mut self.w_ff1),
            ("b_ff1", &mut self.b_ff1),
            ("w_ff2", &mut self.w_ff2),
            ("b_ff2", &mut self.b_ff2),
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransformerStack {
    pub layers: Vec<TransformerLayerParams>,
    pub final_gain: Tensor2,
    pub final_bias: Tensor2,
    pub heads: usize,
}

impl TransformerStack {
    pub fn uniform<R: Rng + ?Sized>(
        d: usize,
        ff: usize,
        layers: usize,
        heads: usize,
        scale: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || d % heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "model width {d} not divisible by {heads} heads"
            )));
        }
        Ok(TransformerStack {
            layers: (0..layers)
                .map(|_| TransformerLayerParams::uniform(d, ff, scale, rng))
                .collect(),
            final_gain: Tensor2::from_vec(1, d, vec![1.0; d])?,
            final_bias: Tensor2::zeros(1, d),
            heads,
        })
    }

    pub fn zeros_like(&self) -> Self {
        TransformerStack {
            layers: self.layers.iter().map(TransformerLayerParams::zeros_like).collect(),
            final_gain: self.final_gain.zeros_like(),
            final_bias: self.final_bias.zeros_like(),
            heads: self.heads,
        }
    }

    pub fn width(&self) -> usize {
        self.final_gain.cols()
    }

    pub fn run(&self, x: &Tensor2, mask: Mask) -> Result<(Tensor2, TransformerCache)> {
        if x.cols() != self.width() {
            return Err(Error::shape(
                "transformer",
                format!("input width {} vs model width {}", x.cols(), self.width()),
            ));
        }
        let mut h = x.clone();
        let mut layer_caches = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (out, cache) = layer_forward(layer, &h, self.heads, mask)?;
            layer_caches.push(cache);
            h = out;
        }
        let (y, final_ln) = layer_norm(&h, &self.final_gain, &self.final_bias);
        Ok((
            y,
            TransformerCache {
                layers: layer_caches,
                final_ln,
                mask,
            },
        ))
    }

    pub fn backward(&self, cache: &TransformerCache, d_out: &Tensor2, grads: &mut TransformerStack) -> Result<Tensor2> {
        let mut dh = layer_norm_backward(
            &cache.final_ln,
            &self.final_gain,
            d_out,
            &mut grads.final_gain,
            &mut grads.final_bias,
        );
        for (l, layer) in self.layers.iter().enumerate().rev() {
            dh = layer_backward(layer, &cache.layers[l], &dh, self.heads, cache.mask, &mut grads.layers[l])?;
        }
        Ok(dh)
    }

    pub(crate) fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor2)>) {
        for (l, layer) in self.layers.iter().enumerate() {
            let p = format!("{prefix}.{l}");
            for (name, t) in layer.tensors() {
                push(out, &p, name, t);
            }
        }
        push(out, prefix, "final_gain", &self.final_gain);
        push(out, prefix, "final_bias", &self.final_bias);
    }

    pub(crate) fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor2)>) {
        for (l, layer) in self.layers.iter_mut().enumerate() {
            let p = format!("{prefix}.{l}");
            for (name, t) in layer.tensors_mut() {
                push_mut(out, &p, name, t);
            }
        }
        push_mut(out, prefix, "final_gain", &mut self.final_gain);
        push_mut(out, prefix, "final_bias", &mut self.final_bias);
    }
}

#[derive(Debug, Clone)]
pub struct TransformerCache {
    layers: Vec<LayerCache>,
    final_ln: LnCache,
    mask: Mask,
}

#[derive(Debug, Clone)]
struct LnCache {
    normed: Tensor2,
    inv_std: Vec<f64>,
}

#[derive(Debug, Clone)]
struct LayerCache {
    ln1: LnCache,
    a: Tensor2,
    q: Tensor2,
    k: Tensor2,
    v: Tensor2,
    head_weights: Vec<Tensor2>,
    concat: Tensor2,
    ln2: LnCache,
    b: Tensor2,
    hidden: Tensor2,
}

/// Sinusoidal position encoding for `positions` rows of width `d`.
pub fn positional_encoding(positions: std::ops::Range<usize>, d: usize) -> Tensor2 {
    let mut pe = Tensor2::zeros(positions.len(), d);
    for (r, pos) in positions.enumerate() {
        for i in 0..d {
            let rate = 1.0 / 10_000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let angle = pos as f64 * rate;
            pe.set(r, i, if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    pe
}

fn layer_norm(x: &Tensor2, gain: &Tensor2, bias: &Tensor2) -> (Tensor2, LnCache) {
    let d = x.cols();
    let mut normed = Tensor2::zeros(x.rows(), d);
    let mut y = Tensor2::zeros(x.rows(), d);
    let mut inv_std = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + LN_EPS).sqrt();
        inv_std.push(is);
        for c in 0..d {
            let n = (row[c] - mean) * is;
            normed.set(r, c, n);
            y.set(r, c, n * gain.get(0, c) + bias.get(0, c));
        }
    }
    (y, LnCache { normed, inv_std })
}

fn layer_norm_backward(
    cache: &LnCache,
    gain: &Tensor2,
    dy: &Tensor2,
    d_gain: &mut Tensor2,
    d_bias: &mut Tensor2,
) -> Tensor2 {
    let d = dy.cols();
    let mut dx = Tensor2::zeros(dy.rows(), d);
    for r in 0..dy.rows() {
        let n = cache.normed.row(r);
        let g = dy.row(r);
        let mut dn = vec![0.0; d];
        for c in 0..d {
            d_gain.data_mut()[c] += g[c] * n[c];
            d_bias.data_mut()[c] += g[c];
            dn[c] = g[c] * gain.get(0, c);
        }
        let mean_dn = dn.iter().sum::<f64>() / d as f64;
        let mean_dn_n = dn.iter().zip(n).map(|(a, b)| a * b).sum::<f64>() / d as f64;
        let is = cache.inv_std[r];
        for c in 0..d {
            dx.set(r, c, is * (dn[c] - mean_dn - n[c] * mean_dn_n));
        }
    }
    dx
}

fn add_bias(t: &mut Tensor2, b: &Tensor2) {
    for r in 0..t.rows() {
        for (v, bi) in t.row_mut(r).iter_mut().zip(b.data()) {
            *v += bi;
        }
    }
}

fn col_sum_into(t: &Tensor2, acc: &mut Tensor2) {
    for r in 0..t.rows() {
        for (a, v) in acc.data_mut().iter_mut().zip(t.row(r)) {
            *a += v;
        }
    }
}

fn layer_forward(p: &TransformerLayerParams, x: &Tensor2, heads: usize, mask: Mask) -> Result<(Tensor2, LayerCache)> {
    let d = x.cols();
    let dk = d / heads;
    let (a, ln1) = layer_norm(x, &p.ln1_gain, &p.ln1_bias);
    let q = a.matmul(&p.w_q)?;
    let k = a.matmul(&p.w_k)?;
    let v = a.matmul(&p.w_v)?;
    let mut concat = Tensor2::zeros(x.rows(), d);
    let mut head_weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let (s, e) = (h * dk, (h + 1) * dk);
        let att = attend(&q.slice_cols(s, e), &k.slice_cols(s, e), &v.slice_cols(s, e), mask)?;
        concat.add_cols_from(s, &att.output);
        head_weights.push(att.weights);
    }
    let mut x1 = concat.matmul(&p.w_o)?;
    add_bias(&mut x1, &p.b_o);
    x1.add_assign(x);

    let (b, ln2) = layer_norm(&x1, &p.ln2_gain, &p.ln2_bias);
    let mut hidden = b.matmul(&p.w_ff1)?;
    add_bias(&mut hidden, &p.b_ff1);
    hidden.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
    let mut y = hidden.matmul(&p.w_ff2)?;
    add_bias(&mut y, &p.b_ff2);
    y.add_assign(&x1);

    Ok((
        y,
        LayerCache {
            ln1,
            a,
            q,
            k,
            v,
            head_weights,
            concat,
            ln2,
            b,
            hidden,
        },
    ))
}

fn layer_backward(
    p: &TransformerLayerParams,
    c: &LayerCache,
    dy: &Tensor2,
    heads: usize,
    _mask: Mask,
    g: &mut TransformerLayerParams,
) -> Result<Tensor2> {
    let d = dy.cols();
    let dk = d / heads;

    // Feed-forward branch; the residual passes dy straight to x₁.
    g.w_ff2.add_assign(&c.hidden.t_matmul(dy)?);
    col_sum_into(dy, &mut g.b_ff2);
    let mut d_hidden = dy.matmul_t(&p.w_ff2)?;
    for (dh, h) in d_hidden.data_mut().iter_mut().zip(c.hidden.data()) {
        if *h <= 0.0 {
            *dh = 0.0;
        }
    }
    g.w_ff1.add_assign(&c.b.t_matmul(&d_hidden)?);
    col_sum_into(&d_hidden, &mut g.b_ff1);
    let d_b = d_hidden.matmul_t(&p.w_ff1)?;
    let mut dx1 = layer_norm_backward(&c.ln2, &p.ln2_gain, &d_b, &mut g.ln2_gain, &mut g.ln2_bias);
    dx1.add_assign(dy);

    // Attention branch; residual passes dx₁ to x.
    g.w_o.add_assign(&c.concat.t_matmul(&dx1)?);
    col_sum_into(&dx1, &mut g.b_o);
    let d_concat = dx1.matmul_t(&p.w_o)?;
    let mut dq = Tensor2::zeros(c.q.rows(), d);
    let mut dk_all = Tensor2::zeros(c.k.rows(), d);
    let mut dv = Tensor2::zeros(c.v.rows(), d);
    for h in 0..heads {
        let (s, e) = (h * dk, (h + 1) * dk);
        let ag = attend_backward(
            &c.q.slice_cols(s, e),
            &c.k.slice_cols(s, e),
            &c.v.slice_cols(s, e),
            &c.head_weights[h],
            &d_concat.slice_cols(s, e),
        )?;
        dq.add_cols_from(s, &ag.dq);
        dk_all.add_cols_from(s, &ag.dk);
        dv.add_cols_from(s, &ag.dv);
    }
    g.w_q.add_assign(&c.a.t_matmul(&dq)?);
    g.w_k.add_assign(&c.a.t_matmul(&dk_all)?);
    g.w_v.add_assign(&c.a.t_matmul(&dv)?);
    let mut d_a = dq.matmul_t(&p.w_q)?;
    d_a.add_assign(&dk_all.matmul_t(&p.w_k)?);
    d_a.add_assign(&dv.matmul_t(&p.w_v)?);
    let mut dx = layer_norm_backward(&c.ln1, &p.ln1_gain, &d_a, &mut g.ln1_gain, &mut g.ln1_bias);
    dx.add_assign(&dx1);
    Ok(dx)
}
