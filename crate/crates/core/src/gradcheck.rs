//! Finite-difference gradient checking, plus ready-made checks of the cell
//! and network gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cells::{cell_tensors, cell_tensors_mut, hw_lstm_step, hw_lstm_step_backward, with_highways, CellKind, CellParams, CellState, LstmParams};
use crate::error::{Error, Result};
use crate::network::{bptt_backward, Batch, LmArchitecture, LmModel, Mode};
use crate::tensor::Tensor;

/// Worst element found by [`grad_check`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Finite-difference formula used by [`grad_check_with`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stencil {
    /// `(f(θ+ε) − f(θ−ε)) / 2ε`
    Central,
    /// `(−f(θ+2ε) + 8f(θ+ε) − 8f(θ−ε) + f(θ−2ε)) / 12ε`. Truncation error
    /// is O(ε⁴), so a larger ε can be used and rounding noise shrinks;
    /// useful when some gradient entries are tiny.
    FivePoint,
    /// [`Stencil::FivePoint`] at steps ε, ε/2, …, ε/2⁸, keeping the estimate
    /// whose error bound (change from the previous step plus rounding in f)
    /// is smallest. Copes with entries that need a large step (tiny
    /// gradients) and ones that need a small one (strong curvature) in the
    /// same parameter vector.
    Adaptive,
}

const ADAPTIVE_HALVINGS: usize = 8;

/// Compares `analytic` against central differences of `f` around `theta`.
///
/// `theta` is perturbed in place and restored exactly before returning.
/// The relative error of element `i` is
/// `|a − n| / max(|a|, |n|, 1e−8)`.
pub fn grad_check<F>(f: F, theta: &mut [f64], analytic: &[f64], eps: f64) -> Result<GradCheckReport>
where
    F: FnMut(&[f64]) -> f64,
{
    grad_check_with(f, theta, analytic, eps, Stencil::Central)
}

/// [`grad_check`] with a chosen stencil.
pub fn grad_check_with<F>(mut f: F, theta: &mut [f64], analytic: &[f64], eps: f64, stencil: Stencil) -> Result<GradCheckReport>
where
    F: FnMut(&[f64]) -> f64,
{
    if theta.len() != analytic.len() {
        return Err(Error::Shape(format!(
            "grad_check: {} parameters, {} gradient entries",
            theta.len(),
            analytic.len()
        )));
    }
    if eps <= 0.0 {
        return Err(Error::InvalidArgument("grad_check: eps must be positive".into()));
    }
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
    };
    for i in 0..theta.len() {
        let orig = theta[i];
        let mut at = |d: f64| -> Result<f64> {
            theta[i] = orig + d;
            let v = f(theta);
            theta[i] = orig;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(Error::NonFinite(format!("objective at parameter {i}")))
            }
        };
        let numeric = match stencil {
            Stencil::Central => (at(eps)? - at(-eps)?) / (2.0 * eps),
            Stencil::FivePoint => {
                let (p1, m1, p2, m2) = (at(eps)?, at(-eps)?, at(2.0 * eps)?, at(-2.0 * eps)?);
                (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * eps)
            }
            Stencil::Adaptive => {
                // f(±h) at one level is f(±2h) at the next.
                let mut h = eps;
                let (mut p2, mut m2) = (at(2.0 * h)?, at(-2.0 * h)?);
                let (mut p1, mut m1) = (at(h)?, at(-h)?);
                let mut prev = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h);
                let (mut best, mut spread) = (prev, f64::INFINITY);
                for _ in 0..ADAPTIVE_HALVINGS {
                    h *= 0.5;
                    (p2, m2) = (p1, m1);
                    (p1, m1) = (at(h)?, at(-h)?);
                    let d = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h);
                    // Disagreement with the previous level bounds truncation;
                    // the second term bounds rounding in f, which consecutive
                    // small steps can share and so fail to reveal.
                    let err = (d - prev).abs() + 1.5 * f64::EPSILON * p1.abs().max(m1.abs()) / h;
                    if err < spread {
                        spread = err;
                        best = d;
                    }
                    prev = d;
                }
                best
            }
        };
        let a = analytic[i];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        if err > report.max_relative_error || i == 0 {
            report = GradCheckReport {
                max_relative_error: err,
                worst_index: i,
                analytic: a,
                numeric,
            };
        }
    }
    Ok(report)
}

/// Largest step tried by the model checks below.
pub const FD_STEP: f64 = 0.04;

fn uniform(r: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| r.random_range(-scale..scale)).collect()
}

fn fill_all<'a>(tensors: impl IntoIterator<Item = &'a mut Tensor<f64>>, r: &mut ChaCha8Rng, scale: f64) {
    for t in tensors {
        t.data_mut().iter_mut().for_each(|v| *v = r.random_range(-scale..scale));
    }
}

fn check(f: impl FnMut(&[f64]) -> f64, theta: &mut [f64], analytic: &[f64]) -> Result<f64> {
    Ok(grad_check_with(f, theta, analytic, FD_STEP, Stencil::Adaptive)?.max_relative_error)
}

/// Worst relative error of one cell step's gradients (parameters, input
/// and both incoming states) for a random cell with H=4, E=3 and 2 rows.
pub fn cell_gradient_error(kind: CellKind, depth: usize, layer_norm: bool, seed: u64) -> Result<f64> {
    let (h, e, b) = (4, 3, 2);
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut p = with_highways(LstmParams::zeros(h, e, layer_norm), kind, depth, &mut r, 0.1, 0.0)?;
    fill_all(cell_tensors_mut(&mut p), &mut r, 0.6);
    if let Some(n) = &mut p.lstm.norm {
        n.gain.data_mut().iter_mut().for_each(|g| *g += 1.0);
    }
    let x = Tensor::from_vec(&[b, e], uniform(&mut r, b * e, 1.0))?;
    let prev = CellState {
        c: Tensor::from_vec(&[b, h], uniform(&mut r, b * h, 1.0))?,
        h: Tensor::from_vec(&[b, h], uniform(&mut r, b * h, 1.0))?,
    };
    // Random projections of both outputs, so every output element matters.
    let wh = Tensor::from_vec(&[b, h], uniform(&mut r, b * h, 1.0))?;
    let wc = Tensor::from_vec(&[b, h], uniform(&mut r, b * h, 1.0))?;
    let loss = |p: &CellParams<f64>, x: &Tensor<f64>, prev: &CellState<f64>| -> f64 {
        match hw_lstm_step(x, prev, p) {
            Ok((out, next)) => {
                let a: f64 = out.data().iter().zip(wh.data()).map(|(u, v)| u * v).sum();
                a + next.c.data().iter().zip(wc.data()).map(|(u, v)| u * v).sum::<f64>()
            }
            Err(_) => f64::NAN,
        }
    };
    let g = hw_lstm_step_backward(&x, &prev, &p, &wh, &wc)?;

    let flat = |p: &CellParams<f64>| -> Vec<f64> { cell_tensors(p).iter().flat_map(|(_, t)| t.data().to_vec()).collect() };
    let mut theta = flat(&p);
    let mut scratch = p.clone();
    let mut worst = check(
        |t| {
            let mut off = 0;
            for dst in cell_tensors_mut(&mut scratch) {
                let n = dst.len();
                dst.data_mut().copy_from_slice(&t[off..off + n]);
                off += n;
            }
            loss(&scratch, &x, &prev)
        },
        &mut theta,
        &flat(&g.params),
    )?;
    let mut xv = x.data().to_vec();
    worst = worst.max(check(
        |t| loss(&p, &Tensor::from_vec(&[b, e], t.to_vec()).expect("shape"), &prev),
        &mut xv,
        g.x.data(),
    )?);
    let mut hv = prev.h.data().to_vec();
    worst = worst.max(check(
        |t| {
            let s = CellState {
                c: prev.c.clone(),
                h: Tensor::from_vec(&[b, h], t.to_vec()).expect("shape"),
            };
            loss(&p, &x, &s)
        },
        &mut hv,
        g.prev.h.data(),
    )?);
    let mut cv = prev.c.data().to_vec();
    worst = worst.max(check(
        |t| {
            let s = CellState {
                c: Tensor::from_vec(&[b, h], t.to_vec()).expect("shape"),
                h: prev.h.clone(),
            };
            loss(&p, &x, &s)
        },
        &mut cv,
        g.prev.c.data(),
    )?);
    Ok(worst)
}

/// Worst relative error of the full network's parameter gradients for a
/// random model with V=5, E=H=4, two lanes of three steps and random
/// incoming states.
pub fn network_gradient_error(kind: CellKind, depth: usize, layer_norm: bool, seed: u64) -> Result<f64> {
    let arch = LmArchitecture::new(5, 4, 4)
        .with_dropout(0.0)
        .with_layer_norm(layer_norm)
        .with_cell(kind, depth);
    let mut m = LmModel::<f64>::new(arch, seed)?;
    let mut r = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    fill_all(m.tensors_mut(), &mut r, 0.5);
    for layer in &mut m.layers {
        if let Some(n) = &mut layer.lstm.norm {
            n.gain.data_mut().iter_mut().for_each(|g| *g += 1.0);
        }
    }
    let batch = Batch::new(2, 3, vec![1, 3, 0, 2, 4, 4], vec![3, 0, 2, 4, 4, 1])?;
    let h = m.arch.hidden_dim;
    let init = (0..m.arch.num_layers)
        .map(|_| {
            Ok(CellState {
                c: Tensor::from_vec(&[2, h], uniform(&mut r, 2 * h, 0.5))?,
                h: Tensor::from_vec(&[2, h], uniform(&mut r, 2 * h, 0.5))?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let out = bptt_backward(&m, &batch, &init, Mode::Eval)?;
    let flat = |m: &LmModel<f64>| -> Vec<f64> { m.tensors().iter().flat_map(|(_, t)| t.data().to_vec()).collect() };
    let mut theta = flat(&m);
    let mut scratch = m.clone();
    check(
        |t| {
            let mut off = 0;
            for dst in scratch.tensors_mut() {
                let n = dst.len();
                dst.data_mut().copy_from_slice(&t[off..off + n]);
                off += n;
            }
            bptt_backward(&scratch, &batch, &init, Mode::Eval).map_or(f64::NAN, |o| o.loss)
        },
        &mut theta,
        &flat(&out.grads),
    )
}
