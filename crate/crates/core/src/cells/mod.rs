//! Single-timestep recurrent kernels: the regular LSTM, the highway layer and
//! the three highway-LSTM variants, with analytic backward passes.
//!
//! Every kernel works on a batch of rows; rows never interact.

mod highway;

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use highway::{carry_gate, highway_step, transform_gate, CarryGate, HighwayParams};
pub(crate) use highway::HighwayCache;

use crate::error::{Error, Result};
use crate::linalg::{add_row_bias, matmul_nn, matmul_nt, matmul_tn_acc, sum_rows_acc};
use crate::ops::{layer_norm_row, layer_norm_row_backward, sigmoid, LAYER_NORM_EPS};
use crate::tensor::{Real, Tensor};

/// Which recurrent cell a layer uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CellKind {
    #[serde(rename = "lstm")]
    Lstm,
    /// Highway stack on the memory cell.
    #[serde(rename = "hw-lstm-c")]
    HwC,
    /// Highway stack on the hidden state.
    #[serde(rename = "hw-lstm-h")]
    HwH,
    /// Both stacks; cell first.
    #[serde(rename = "hw-lstm-ch")]
    HwCh,
}

impl CellKind {
    pub fn has_cell_highway(self) -> bool {
        matches!(self, CellKind::HwC | CellKind::HwCh)
    }

    pub fn has_hidden_highway(self) -> bool {
        matches!(self, CellKind::HwH | CellKind::HwCh)
    }

    pub fn name(self) -> &'static str {
        match self {
            CellKind::Lstm => "lstm",
            CellKind::HwC => "hw-lstm-c",
            CellKind::HwH => "hw-lstm-h",
            CellKind::HwCh => "hw-lstm-ch",
        }
    }
}

impl fmt::Display for CellKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CellKind {
    type Err = Error;

    /// Accepts `lstm`, `hw-lstm-c|h|ch` and the bare variant letters.
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "lstm" => Ok(CellKind::Lstm),
            "hw-lstm-c" | "c" => Ok(CellKind::HwC),
            "hw-lstm-h" | "h" => Ok(CellKind::HwH),
            "hw-lstm-ch" | "ch" => Ok(CellKind::HwCh),
            other => Err(Error::InvalidArgument(format!("unknown cell kind `{other}`"))),
        }
    }
}

/// Learnable gain/bias for normalizing the four gate pre-activation blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct GateNorm<T> {
    pub gain: Tensor<T>,
    pub bias: Tensor<T>,
}

/// LSTM weights with the four gates fused along the output dimension in the
/// order `i` (tanh), `j`, `f`, `o` (sigmoid).
#[derive(Debug, Clone, PartialEq)]
pub struct LstmParams<T> {
    /// `[4H × E]`
    pub w_x: Tensor<T>,
    /// `[4H × H]`
    pub w_h: Tensor<T>,
    /// `[4H]`
    pub b: Tensor<T>,
    pub norm: Option<GateNorm<T>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Gate {
    I,
    J,
    F,
    O,
}

impl Gate {
    fn block(self) -> usize {
        match self {
            Gate::I => 0,
            Gate::J => 1,
            Gate::F => 2,
            Gate::O => 3,
        }
    }
}

impl<T: Real> LstmParams<T> {
    pub fn zeros(hidden: usize, input: usize, layer_norm: bool) -> Self {
        LstmParams {
            w_x: Tensor::zeros(&[4 * hidden, input]),
            w_h: Tensor::zeros(&[4 * hidden, hidden]),
            b: Tensor::zeros(&[4 * hidden]),
            norm: layer_norm.then(|| GateNorm {
                gain: Tensor::full(&[4 * hidden], T::one()),
                bias: Tensor::zeros(&[4 * hidden]),
            }),
        }
    }

    /// Uniform `±range` matrices, zero biases except `b_f = forget_bias`.
    pub fn init<R: Rng>(rng: &mut R, hidden: usize, input: usize, range: f64, forget_bias: f64, layer_norm: bool) -> Self {
        let mut p = Self::zeros(hidden, input, layer_norm);
        for t in [&mut p.w_x, &mut p.w_h] {
            t.data_mut()
                .iter_mut()
                .for_each(|x| *x = T::c(rng.random_range(-range..range)));
        }
        p.b.data_mut()[2 * hidden..3 * hidden]
            .iter_mut()
            .for_each(|x| *x = T::c(forget_bias));
        p
    }

    pub fn hidden(&self) -> usize {
        self.b.len() / 4
    }

    pub fn input(&self) -> usize {
        self.w_x.cols()
    }

    /// Rows of `W_x` belonging to one gate, `[H × E]`.
    pub fn w_x_gate(&self, g: Gate) -> &[T] {
        let n = self.hidden() * self.input();
        &self.w_x.data()[g.block() * n..(g.block() + 1) * n]
    }

    /// Rows of `W_h` belonging to one gate, `[H × H]`.
    pub fn w_h_gate(&self, g: Gate) -> &[T] {
        let n = self.hidden() * self.hidden();
        &self.w_h.data()[g.block() * n..(g.block() + 1) * n]
    }

    pub fn b_gate(&self, g: Gate) -> &[T] {
        let h = self.hidden();
        &self.b.data()[g.block() * h..(g.block() + 1) * h]
    }

    pub fn validate(&self) -> Result<()> {
        let (h, e) = (self.hidden(), self.input());
        if h == 0 || self.b.len() % 4 != 0 {
            return Err(Error::Shape("lstm: bias must have 4H entries".into()));
        }
        self.w_x.ensure_shape(&[4 * h, e], "lstm W_x")?;
        self.w_h.ensure_shape(&[4 * h, h], "lstm W_h")?;
        if let Some(n) = &self.norm {
            n.gain.ensure_shape(&[4 * h], "lstm norm gain")?;
            n.bias.ensure_shape(&[4 * h], "lstm norm bias")?;
        }
        Ok(())
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = Self::zeros(self.hidden(), self.input(), self.norm.is_some());
        if let Some(n) = &mut z.norm {
            n.gain.fill(T::zero());
        }
        z
    }

    pub(crate) fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        out.push((format!("{prefix}.w_x"), &self.w_x));
        out.push((format!("{prefix}.w_h"), &self.w_h));
        out.push((format!("{prefix}.b"), &self.b));
        if let Some(n) = &self.norm {
            out.push((format!("{prefix}.ln_gain"), &n.gain));
            out.push((format!("{prefix}.ln_bias"), &n.bias));
        }
    }

    pub(crate) fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor<T>>) {
        out.push(&mut self.w_x);
        out.push(&mut self.w_h);
        out.push(&mut self.b);
        if let Some(n) = &mut self.norm {
            out.push(&mut n.gain);
            out.push(&mut n.bias);
        }
    }
}

/// Recurrent layer parameters: an LSTM core plus optional highway stacks.
///
/// For [`CellKind::Lstm`] both stacks are empty.
#[derive(Debug, Clone, PartialEq)]
pub struct CellParams<T> {
    pub kind: CellKind,
    pub lstm: LstmParams<T>,
    pub cell_highways: Vec<HighwayParams<T>>,
    pub hidden_highways: Vec<HighwayParams<T>>,
}

impl<T: Real> CellParams<T> {
    pub fn lstm(lstm: LstmParams<T>) -> Self {
        CellParams {
            kind: CellKind::Lstm,
            lstm,
            cell_highways: Vec::new(),
            hidden_highways: Vec::new(),
        }
    }

    /// Number of stacked highway layers (0 for a plain LSTM).
    pub fn depth(&self) -> usize {
        self.cell_highways.len().max(self.hidden_highways.len())
    }

    pub fn hidden(&self) -> usize {
        self.lstm.hidden()
    }

    pub fn input(&self) -> usize {
        self.lstm.input()
    }

    pub fn validate(&self) -> Result<()> {
        self.lstm.validate()?;
        let d = self.depth();
        let want_c = if self.kind.has_cell_highway() { d } else { 0 };
        let want_h = if self.kind.has_hidden_highway() { d } else { 0 };
        if self.kind != CellKind::Lstm && d == 0 {
            return Err(Error::InvalidArgument(format!("{} needs depth ≥ 1", self.kind)));
        }
        if self.cell_highways.len() != want_c || self.hidden_highways.len() != want_h {
            return Err(Error::InvalidArgument(format!(
                "{}: {} cell / {} hidden highway layers inconsistent with depth {d}",
                self.kind,
                self.cell_highways.len(),
                self.hidden_highways.len()
            )));
        }
        for hw in self.cell_highways.iter().chain(&self.hidden_highways) {
            hw.validate()?;
            if hw.width() != self.hidden() {
                return Err(Error::Shape("highway width differs from hidden size".into()));
            }
        }
        Ok(())
    }

    pub fn zeros_like(&self) -> Self {
        CellParams {
            kind: self.kind,
            lstm: self.lstm.zeros_like(),
            cell_highways: self.cell_highways.iter().map(HighwayParams::zeros_like).collect(),
            hidden_highways: self.hidden_highways.iter().map(HighwayParams::zeros_like).collect(),
        }
    }

    pub(crate) fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        self.lstm.visit(prefix, out);
        for (k, hw) in self.cell_highways.iter().enumerate() {
            hw.visit(&format!("{prefix}.cell_hw{k}"), out);
        }
        for (k, hw) in self.hidden_highways.iter().enumerate() {
            hw.visit(&format!("{prefix}.hidden_hw{k}"), out);
        }
    }

    pub(crate) fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor<T>>) {
        self.lstm.visit_mut(out);
        for hw in self.cell_highways.iter_mut().chain(self.hidden_highways.iter_mut()) {
            hw.visit_mut(out);
        }
    }

    pub(crate) fn forward(&self, x: &[T], rows: usize, c_prev: &[T], h_prev: &[T]) -> CellCache<T> {
        let hsz = self.hidden();
        let (gates, norm, c_lstm) = lstm_core_forward(&self.lstm, x, rows, c_prev, h_prev);
        let mut c = c_lstm.clone();
        let mut cell_hw = Vec::with_capacity(self.cell_highways.len());
        for hw in &self.cell_highways {
            let (y, cache) = hw.forward(&c, rows);
            cell_hw.push(cache);
            c = y;
        }
        let tanh_c: Vec<T> = c.iter().map(|v| v.tanh()).collect();
        let mut h = vec![T::zero(); rows * hsz];
        for r in 0..rows {
            for k in 0..hsz {
                h[r * hsz + k] = tanh_c[r * hsz + k] * gates[r * 4 * hsz + 3 * hsz + k];
            }
        }
        let mut hidden_hw = Vec::with_capacity(self.hidden_highways.len());
        for hw in &self.hidden_highways {
            let (y, cache) = hw.forward(&h, rows);
            hidden_hw.push(cache);
            h = y;
        }
        CellCache {
            rows,
            x: x.to_vec(),
            c_prev: c_prev.to_vec(),
            h_prev: h_prev.to_vec(),
            gates,
            norm,
            cell_hw,
            c,
            tanh_c,
            hidden_hw,
            h,
        }
    }

    /// Given gradients w.r.t. this step's outputs `h` and `c`, accumulates
    /// parameter gradients and returns `(dx, dh_prev, dc_prev)`.
    pub(crate) fn backward(&self, cache: &CellCache<T>, dh: &[T], dc: &[T], grads: &mut CellParams<T>) -> (Vec<T>, Vec<T>, Vec<T>) {
        let rows = cache.rows;
        let hsz = self.hidden();
        let mut dh_dot = dh.to_vec();
        for (k, hw) in self.hidden_highways.iter().enumerate().rev() {
            dh_dot = hw.backward(&cache.hidden_hw[k], &dh_dot, rows, &mut grads.hidden_highways[k]);
        }
        let mut d_o = vec![T::zero(); rows * hsz];
        let mut dc_total = dc.to_vec();
        for r in 0..rows {
            for k in 0..hsz {
                let i = r * hsz + k;
                let o = cache.gates[r * 4 * hsz + 3 * hsz + k];
                let tc = cache.tanh_c[i];
                d_o[i] = dh_dot[i] * tc;
                dc_total[i] += dh_dot[i] * o * (T::one() - tc * tc);
            }
        }
        let mut dc_lstm = dc_total;
        for (k, hw) in self.cell_highways.iter().enumerate().rev() {
            dc_lstm = hw.backward(&cache.cell_hw[k], &dc_lstm, rows, &mut grads.cell_highways[k]);
        }
        lstm_core_backward(&self.lstm, cache, &dc_lstm, &d_o, &mut grads.lstm)
    }
}

/// Saved activations of one cell step.
#[derive(Debug, Clone)]
pub(crate) struct CellCache<T> {
    rows: usize,
    x: Vec<T>,
    c_prev: Vec<T>,
    h_prev: Vec<T>,
    /// Activated gates `[rows × 4H]`.
    gates: Vec<T>,
    /// Normalized pre-activations and per-(row, gate) inverse std.
    norm: Option<(Vec<T>, Vec<T>)>,
    cell_hw: Vec<HighwayCache<T>>,
    pub(crate) c: Vec<T>,
    tanh_c: Vec<T>,
    hidden_hw: Vec<HighwayCache<T>>,
    pub(crate) h: Vec<T>,
}

type CoreOut<T> = (Vec<T>, Option<(Vec<T>, Vec<T>)>, Vec<T>);

fn lstm_core_forward<T: Real>(p: &LstmParams<T>, x: &[T], rows: usize, c_prev: &[T], h_prev: &[T]) -> CoreOut<T> {
    let (h, e) = (p.hidden(), p.input());
    let g4 = 4 * h;
    let mut pre = vec![T::zero(); rows * g4];
    matmul_nt(x, p.w_x.data(), &mut pre, rows, e, g4, T::zero());
    matmul_nt(h_prev, p.w_h.data(), &mut pre, rows, h, g4, T::one());
    let norm = p.norm.as_ref().map(|n| {
        let eps = T::c(LAYER_NORM_EPS);
        let mut xhat = vec![T::zero(); rows * g4];
        let mut inv = vec![T::zero(); rows * 4];
        let mut y = vec![T::zero(); h];
        for r in 0..rows {
            for blk in 0..4 {
                let s = r * g4 + blk * h;
                inv[r * 4 + blk] = layer_norm_row(
                    &pre[s..s + h],
                    &n.gain.data()[blk * h..(blk + 1) * h],
                    &n.bias.data()[blk * h..(blk + 1) * h],
                    eps,
                    &mut xhat[s..s + h],
                    &mut y,
                );
                pre[s..s + h].copy_from_slice(&y);
            }
        }
        (xhat, inv)
    });
    add_row_bias(&mut pre, p.b.data());
    let mut c = vec![T::zero(); rows * h];
    for r in 0..rows {
        let row = &mut pre[r * g4..(r + 1) * g4];
        for k in 0..h {
            row[k] = row[k].tanh();
            row[h + k] = sigmoid(row[h + k]);
            row[2 * h + k] = sigmoid(row[2 * h + k]);
            row[3 * h + k] = sigmoid(row[3 * h + k]);
            c[r * h + k] = c_prev[r * h + k] * row[2 * h + k] + row[k] * row[h + k];
        }
    }
    (pre, norm, c)
}

fn lstm_core_backward<T: Real>(
    p: &LstmParams<T>,
    cache: &CellCache<T>,
    dc_new: &[T],
    d_o: &[T],
    grads: &mut LstmParams<T>,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let rows = cache.rows;
    let (h, e) = (p.hidden(), p.input());
    let g4 = 4 * h;
    let mut dpre = vec![T::zero(); rows * g4];
    let mut dc_prev = vec![T::zero(); rows * h];
    for r in 0..rows {
        let g = &cache.gates[r * g4..(r + 1) * g4];
        let d = &mut dpre[r * g4..(r + 1) * g4];
        for k in 0..h {
            let idx = r * h + k;
            let (i, j, f, o) = (g[k], g[h + k], g[2 * h + k], g[3 * h + k]);
            let dcn = dc_new[idx];
            dc_prev[idx] = dcn * f;
            d[k] = dcn * j * (T::one() - i * i);
            d[h + k] = dcn * i * j * (T::one() - j);
            d[2 * h + k] = dcn * cache.c_prev[idx] * f * (T::one() - f);
            d[3 * h + k] = d_o[idx] * o * (T::one() - o);
        }
    }
    sum_rows_acc(&dpre, grads.b.data_mut());
    if let (Some(n), Some((xhat, inv)), Some(gn)) = (p.norm.as_ref(), cache.norm.as_ref(), grads.norm.as_mut()) {
        let mut dx = vec![T::zero(); h];
        for r in 0..rows {
            for blk in 0..4 {
                let s = r * g4 + blk * h;
                let range = blk * h..(blk + 1) * h;
                layer_norm_row_backward(
                    &xhat[s..s + h],
                    inv[r * 4 + blk],
                    &n.gain.data()[range.clone()],
                    &dpre[s..s + h],
                    &mut dx,
                    &mut gn.gain.data_mut()[range.clone()],
                    &mut gn.bias.data_mut()[range],
                );
                dpre[s..s + h].copy_from_slice(&dx);
            }
        }
    }
    matmul_tn_acc(&dpre, &cache.x, grads.w_x.data_mut(), rows, g4, e);
    matmul_tn_acc(&dpre, &cache.h_prev, grads.w_h.data_mut(), rows, g4, h);
    let mut dx = vec![T::zero(); rows * e];
    matmul_nn(&dpre, p.w_x.data(), &mut dx, rows, g4, e, T::zero());
    let mut dh_prev = vec![T::zero(); rows * h];
    matmul_nn(&dpre, p.w_h.data(), &mut dh_prev, rows, g4, h, T::zero());
    (dx, dh_prev, dc_prev)
}

/// Memory cell and hidden state, each `[B × H]` (or `[H]`).
#[derive(Debug, Clone, PartialEq)]
pub struct CellState<T> {
    pub c: Tensor<T>,
    pub h: Tensor<T>,
}

impl<T: Real> CellState<T> {
    pub fn zeros(batch: usize, hidden: usize) -> Self {
        CellState {
            c: Tensor::zeros(&[batch, hidden]),
            h: Tensor::zeros(&[batch, hidden]),
        }
    }

    fn check(&self, rows: usize, hidden: usize) -> Result<()> {
        if self.c.shape() != self.h.shape() || self.c.rows() != rows || self.c.cols() != hidden {
            return Err(Error::Shape(format!(
                "state c {:?} / h {:?}, expected {rows} rows of width {hidden}",
                self.c.shape(),
                self.h.shape()
            )));
        }
        if !self.c.is_finite() || !self.h.is_finite() {
            return Err(Error::NonFinite("recurrent state".into()));
        }
        Ok(())
    }
}

fn out_shape(x: &Tensor<impl Real>, width: usize) -> Vec<usize> {
    let mut s = x.shape().to_vec();
    *s.last_mut().expect("non-scalar input") = width;
    s
}

/// One step of the regular LSTM (no peepholes).
pub fn lstm_step<T: Real>(x: &Tensor<T>, prev: &CellState<T>, p: &LstmParams<T>) -> Result<(Tensor<T>, CellState<T>)> {
    hw_lstm_step(x, prev, &CellParams::lstm(p.clone()))
}

/// One step of a (highway-)LSTM layer.
pub fn hw_lstm_step<T: Real>(x: &Tensor<T>, prev: &CellState<T>, p: &CellParams<T>) -> Result<(Tensor<T>, CellState<T>)> {
    p.validate()?;
    if x.shape().is_empty() || x.cols() != p.input() {
        return Err(Error::Shape(format!(
            "cell input {:?}, expected width {}",
            x.shape(),
            p.input()
        )));
    }
    let rows = x.rows();
    prev.check(rows, p.hidden())?;
    let cache = p.forward(x.data(), rows, prev.c.data(), prev.h.data());
    let shape = out_shape(x, p.hidden());
    let h = Tensor::from_vec(&shape, cache.h)?;
    let c = Tensor::from_vec(&shape, cache.c)?;
    Ok((h.clone(), CellState { c, h }))
}

/// Analytic gradients for one step of [`hw_lstm_step`].
#[derive(Debug, Clone)]
pub struct StepGradients<T> {
    pub params: CellParams<T>,
    pub x: Tensor<T>,
    pub prev: CellState<T>,
}

/// Backward pass of one cell step given upstream gradients on the output
/// hidden state and memory cell.
pub fn hw_lstm_step_backward<T: Real>(
    x: &Tensor<T>,
    prev: &CellState<T>,
    p: &CellParams<T>,
    dh: &Tensor<T>,
    dc: &Tensor<T>,
) -> Result<StepGradients<T>> {
    p.validate()?;
    let rows = x.rows();
    prev.check(rows, p.hidden())?;
    if dh.len() != rows * p.hidden() || dc.len() != rows * p.hidden() {
        return Err(Error::Shape("step backward: upstream gradient shape".into()));
    }
    let cache = p.forward(x.data(), rows, prev.c.data(), prev.h.data());
    let mut grads = p.zeros_like();
    let (dx, dhp, dcp) = p.backward(&cache, dh.data(), dc.data(), &mut grads);
    Ok(StepGradients {
        params: grads,
        x: Tensor::from_vec(x.shape(), dx)?,
        prev: CellState {
            c: Tensor::from_vec(prev.c.shape(), dcp)?,
            h: Tensor::from_vec(prev.h.shape(), dhp)?,
        },
    })
}

/// Builds highway-LSTM parameters around an existing LSTM core.
pub fn with_highways<T: Real, R: Rng>(
    lstm: LstmParams<T>,
    kind: CellKind,
    depth: usize,
    rng: &mut R,
    range: f64,
    transform_bias: f64,
) -> Result<CellParams<T>> {
    if kind != CellKind::Lstm && depth == 0 {
        return Err(Error::InvalidArgument("highway depth must be ≥ 1".into()));
    }
    let h = lstm.hidden();
    let mut make = |on: bool| -> Vec<HighwayParams<T>> {
        if on {
            (0..depth).map(|_| HighwayParams::init(rng, h, range, transform_bias)).collect()
        } else {
            Vec::new()
        }
    };
    let cell_highways = make(kind.has_cell_highway());
    let hidden_highways = make(kind.has_hidden_highway());
    Ok(CellParams {
        kind,
        lstm,
        cell_highways,
        hidden_highways,
    })
}

/// Flattened view of every parameter tensor with stable names.
pub fn cell_tensors<T: Real>(p: &CellParams<T>) -> Vec<(String, &Tensor<T>)> {
    let mut out = Vec::new();
    p.visit("cell", &mut out);
    out
}

/// Mutable counterpart of [`cell_tensors`], same order.
pub fn cell_tensors_mut<T: Real>(p: &mut CellParams<T>) -> Vec<&mut Tensor<T>> {
    let mut out = Vec::new();
    p.visit_mut(&mut out);
    out
}
