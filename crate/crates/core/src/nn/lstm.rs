//! LSTM cells, unidirectional stacks and bidirectional runs with exact
//! backpropagation through time.
//!
//! Gate layout inside the `4d`-wide pre-activation is `[input, forget,
//! candidate, output]`:
//!
//! ```text
//! z = x·W_ih + h_prev·W_hh + b
//! i = σ(z_i)   f = σ(z_f)   g = tanh(z_g)   o = σ(z_o)
//! c = f ⊙ c_prev + i ⊙ g
//! h = o ⊙ tanh(c)
//! ```

use rand::Rng;

use super::ops::{sigmoid, sigmoid_backward, tanh_backward};
use super::params::{push, push_mut, Parameterized};
use super::tensor::{matmul_vec_t, outer_acc, vec_matmul, Tensor2};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct LstmCellParams {
    /// `input_dim × 4d`
    pub w_ih: Tensor2,
    /// `d × 4d`
    pub w_hh: Tensor2,
    /// `1 × 4d`
    pub bias: Tensor2,
}

impl LstmCellParams {
    pub fn zeros(input_dim: usize, hidden: usize) -> Self {
        LstmCellParams {
            w_ih: Tensor2::zeros(input_dim, 4 * hidden),
            w_hh: Tensor2::zeros(hidden, 4 * hidden),
            bias: Tensor2::zeros(1, 4 * hidden),
        }
    }

    pub fn uniform<R: Rng + ?Sized>(input_dim: usize, hidden: usize, scale: f64, rng: &mut R) -> Self {
        LstmCellParams {
            w_ih: Tensor2::uniform(input_dim, 4 * hidden, scale, rng),
            w_hh: Tensor2::uniform(hidden, 4 * hidden, scale, rng),
            bias: Tensor2::uniform(1, 4 * hidden, scale, rng),
        }
    }

    pub fn hidden(&self) -> usize {
        self.w_hh.rows()
    }

    pub fn input_dim(&self) -> usize {
        self.w_ih.rows()
    }

    pub(crate) fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor2)>) {
        push(out, prefix, "w_ih", &self.w_ih);
        push(out, prefix, "w_hh", &self.w_hh);
        push(out, prefix, "bias", &self.bias);
    }

    pub(crate) fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor2)>) {
        push_mut(out, prefix, "w_ih", &mut self.w_ih);
        push_mut(out, prefix, "w_hh", &mut self.w_hh);
        push_mut(out, prefix, "bias", &mut self.bias);
    }
}

impl Parameterized for LstmCellParams {
    fn params(&self) -> Vec<(String, &Tensor2)> {
        let mut out = Vec::new();
        self.collect("", &mut out);
        out
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor2)> {
        let mut out = Vec::new();
        self.collect_mut("", &mut out);
        out
    }
}

/// Activations saved by [`lstm_cell_step`] for the backward pass.
#[derive(Debug, Clone)]
pub struct StepCache {
    x: Vec<f64>,
    h_prev: Vec<f64>,
    c_prev: Vec<f64>,
    /// `[i, f, g, o]` after their nonlinearities.
    gates: Vec<f64>,
    tanh_c: Vec<f64>,
}

pub fn lstm_cell_step(
    params: &LstmCellParams,
    x: &[f64],
    h_prev: &[f64],
    c_prev: &[f64],
) -> Result<(Vec<f64>, Vec<f64>, StepCache)> {
    let d = params.hidden();
    if x.len() != params.input_dim() || h_prev.len() != d || c_prev.len() != d {
        return Err(Error::shape(
            "lstm_cell_step",
            format!(
                "x={}, h={}, c={} for input_dim={}, hidden={d}",
                x.len(),
                h_prev.len(),
                c_prev.len(),
                params.input_dim()
            ),
        ));
    }
    let mut z = params.bias.data().to_vec();
    vec_matmul(x, &params.w_ih, &mut z);
    vec_matmul(h_prev, &params.w_hh, &mut z);

    let mut gates = z;
    for (k, v) in gates.iter_mut().enumerate() {
        *v = if (2 * d..3 * d).contains(&k) {
            v.tanh()
        } else {
            sigmoid(*v)
        };
    }
    let mut c = vec![0.0; d];
    let mut h = vec![0.0; d];
    let mut tanh_c = vec![0.0; d];
    for k in 0..d {
        let (i, f, g, o) = (gates[k], gates[d + k], gates[2 * d + k], gates[3 * d + k]);
        c[k] = f * c_prev[k] + i * g;
        tanh_c[k] = c[k].tanh();
        h[k] = o * tanh_c[k];
    }
    let cache = StepCache {
        x: x.to_vec(),
        h_prev: h_prev.to_vec(),
        c_prev: c_prev.to_vec(),
        gates,
        tanh_c,
    };
    Ok((h, c, cache))
}

/// Backward through one step. `dh` and `dc` are the total gradients arriving
/// at `h_t` and `c_t`; parameter gradients accumulate into `grads`.
/// Returns `(dx, dh_prev, dc_prev)`.
pub fn lstm_cell_backward(
    params: &LstmCellParams,
    cache: &StepCache,
    dh: &[f64],
    dc: &[f64],
    grads: &mut LstmCellParams,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let d = params.hidden();
    let gates = &cache.gates;
    let mut dz = vec![0.0; 4 * d];
    let mut dc_prev = vec![0.0; d];
    for k in 0..d {
        let (i, f, g, o) = (gates[k], gates[d + k], gates[2 * d + k], gates[3 * d + k]);
        let tc = cache.tanh_c[k];
        let dc_total = dc[k] + tanh_backward(tc, dh[k] * o);
        dz[k] = sigmoid_backward(i, dc_total * g);
        dz[d + k] = sigmoid_backward(f, dc_total * cache.c_prev[k]);
        dz[2 * d + k] = tanh_backward(g, dc_total * i);
        dz[3 * d + k] = sigmoid_backward(o, dh[k] * tc);
        dc_prev[k] = dc_total * f;
    }
    outer_acc(&cache.x, &dz, &mut grads.w_ih);
    outer_acc(&cache.h_prev, &dz, &mut grads.w_hh);
    for (b, v) in grads.bias.data_mut().iter_mut().zip(&dz) {
        *b += v;
    }
    let mut dx = vec![0.0; params.input_dim()];
    matmul_vec_t(&params.w_ih, &dz, &mut dx);
    let mut dh_prev = vec![0.0; d];
    matmul_vec_t(&params.w_hh, &dz, &mut dh_prev);
    (dx, dh_prev, dc_prev)
}

/// Stacked unidirectional LSTM; layer `l + 1` consumes layer `l`'s hidden states.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmStack {
    pub layers: Vec<LstmCellParams>,
}

/// Per-layer, per-step caches of one [`LstmStack::run`].
#[derive(Debug, Clone)]
pub struct StackCache {
    steps: Vec<Vec<StepCache>>,
}

impl LstmStack {
    pub fn uniform<R: Rng + ?Sized>(
        input_dim: usize,
        hidden: usize,
        layers: usize,
        scale: f64,
        rng: &mut R,
    ) -> Self {
        let layers = (0..layers)
            .map(|l| {
                let inp = if l == 0 { input_dim } else { hidden };
                LstmCellParams::uniform(inp, hidden, scale, rng)
            })
            .collect();
        LstmStack { layers }
    }

    pub fn zeros_like(&self) -> Self {
        LstmStack {
            layers: self
                .layers
                .iter()
                .map(|c| LstmCellParams::zeros(c.input_dim(), c.hidden()))
                .collect(),
        }
    }

    pub fn hidden(&self) -> usize {
        self.layers.last().map_or(0, LstmCellParams::hidden)
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, LstmCellParams::input_dim)
    }

    /// Runs the stack over the rows of `inputs` (time along rows) from zero
    /// state. Returns top-layer hidden states, one row per step.
    pub fn run(&self, inputs: &Tensor2) -> Result<(Tensor2, StackCache)> {
        let mut current = inputs.clone();
        let mut steps = Vec::with_capacity(self.layers.len());
        for cell in &self.layers {
            let d = cell.hidden();
            let mut h = vec![0.0; d];
            let mut c = vec![0.0; d];
            let mut out = Tensor2::zeros(current.rows(), d);
            let mut layer_cache = Vec::with_capacity(current.rows());
            for t in 0..current.rows() {
                let (h_t, c_t, cache) = lstm_cell_step(cell, current.row(t), &h, &c)?;
                out.row_mut(t).copy_from_slice(&h_t);
                h = h_t;
                c = c_t;
                layer_cache.push(cache);
            }
            steps.push(layer_cache);
            current = out;
        }
        Ok((current, StackCache { steps }))
    }

    /// Backpropagates `d_out` (gradient w.r.t. each top-layer output row) and
    /// returns the gradient w.r.t. each input row.
    pub fn backward(&self, cache: &StackCache, d_out: &Tensor2, grads: &mut LstmStack) -> Tensor2 {
        let mut d_current = d_out.clone();
        for (l, cell) in self.layers.iter().enumerate().rev() {
            let d = cell.hidden();
            let steps = &cache.steps[l];
            let mut d_in = Tensor2::zeros(steps.len(), cell.input_dim());
            let mut dh_next = vec![0.0; d];
            let mut dc_next = vec![0.0; d];
            for t in (0..steps.len()).rev() {
                let mut dh = d_current.row(t).to_vec();
                for (a, b) in dh.iter_mut().zip(&dh_next) {
                    *a += b;
                }
                let (dx, dh_prev, dc_prev) =
                    lstm_cell_backward(cell, &steps[t], &dh, &dc_next, &mut grads.layers[l]);
                d_in.row_mut(t).copy_from_slice(&dx);
                dh_next = dh_prev;
                dc_next = dc_prev;
            }
            d_current = d_in;
        }
        d_current
    }

    pub(crate) fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor2)>) {
        for (l, cell) in self.layers.iter().enumerate() {
            cell.collect(&format!("{prefix}.{l}"), out);
        }
    }

    pub(crate) fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor2)>) {
        for (l, cell) in self.layers.iter_mut().enumerate() {
            cell.collect_mut(&format!("{prefix}.{l}"), out);
        }
    }
}

/// Independent forward and backward stacks whose top-layer states are
/// concatenated per position: output row `t` is `[→h_t ; ←h_t]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BiLstm {
    pub fwd: LstmStack,
    pub bwd: LstmStack,
}

#[derive(Debug, Clone)]
pub struct BiLstmCache {
    fwd: StackCache,
    bwd: StackCache,
}

impl BiLstm {
    pub fn uniform<R: Rng + ?Sized>(
        input_dim: usize,
        hidden: usize,
        layers: usize,
        scale: f64,
        rng: &mut R,
    ) -> Self {
        let fwd = LstmStack::uniform(input_dim, hidden, layers, scale, rng);
        let bwd = LstmStack::uniform(input_dim, hidden, layers, scale, rng);
        BiLstm { fwd, bwd }
    }

    pub fn zeros_like(&self) -> Self {
        BiLstm {
            fwd: self.fwd.zeros_like(),
            bwd: self.bwd.zeros_like(),
        }
    }

    pub fn output_dim(&self) -> usize {
        self.fwd.hidden() + self.bwd.hidden()
    }

    pub fn input_dim(&self) -> usize {
        self.fwd.input_dim()
    }

    pub fn run(&self, inputs: &Tensor2) -> Result<(Tensor2, BiLstmCache)> {
        bilstm_run(&self.fwd, &self.bwd, inputs)
    }

    pub fn backward(&self, cache: &BiLstmCache, d_out: &Tensor2, grads: &mut BiLstm) -> Tensor2 {
        let df = self.fwd.hidden();
        let d_fwd = d_out.slice_cols(0, df);
        let d_bwd = d_out.slice_cols(df, d_out.cols()).reversed_rows();
        let mut dx = self.fwd.backward(&cache.fwd, &d_fwd, &mut grads.fwd);
        let dx_rev = self.bwd.backward(&cache.bwd, &d_bwd, &mut grads.bwd);
        dx.add_assign(&dx_rev.reversed_rows());
        dx
    }

    pub(crate) fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor2)>) {
        self.fwd.collect(&format!("{prefix}.fwd"), out);
        self.bwd.collect(&format!("{prefix}.bwd"), out);
    }

    pub(crate) fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor2)>) {
        self.fwd.collect_mut(&format!("{prefix}.fwd"), out);
        self.bwd.collect_mut(&format!("{prefix}.bwd"), out);
    }
}

impl Parameterized for LstmStack {
    fn params(&self) -> Vec<(String, &Tensor2)> {
        let mut out = Vec::new();
        self.collect("stack", &mut out);
        out
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor2)> {
        let mut out = Vec::new();
        self.collect_mut("stack", &mut out);
        out
    }
}

impl Parameterized for BiLstm {
    fn params(&self) -> Vec<(String, &Tensor2)> {
        let mut out = Vec::new();
        self.collect("bilstm", &mut out);
        out
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor2)> {
        let mut out = Vec::new();
        self.collect_mut("bilstm", &mut out);
        out
    }
}

/// Runs `fwd` left to right and `bwd` right to left over `inputs`, returning
/// `[→h_t ; ←h_t]` for each position `t`.
pub fn bilstm_run(fwd: &LstmStack, bwd: &LstmStack, inputs: &Tensor2) -> Result<(Tensor2, BiLstmCache)> {
    if inputs.rows() == 0 {
        return Err(Error::EmptyInput("bidirectional LSTM input".into()));
    }
    let (out_f, cache_f) = fwd.run(inputs)?;
    let (out_b, cache_b) = bwd.run(&inputs.reversed_rows())?;
    let out = out_f.hconcat(&out_b.reversed_rows())?;
    Ok((
        out,
        BiLstmCache {
            fwd: cache_f,
            bwd: cache_b,
        },
    ))
}
