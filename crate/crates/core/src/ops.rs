//! Nonlinearities, layer normalization, the gated linear unit and the fused
//! softmax cross-entropy, each with its analytic backward pass.

use crate::error::{Error, Result};
use crate::linalg::{add_row_bias, matmul_nn, matmul_nt, matmul_tn_acc, sum_rows_acc};
use crate::tensor::{Real, Tensor};

/// Default layer-norm variance floor.
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Normalizes one vector; writes `x̂` and `y`, returns `1/σ`.
pub fn layer_norm_row<T: Real>(
    x: &[T],
    gain: &[T],
    bias: &[T],
    eps: T,
    xhat: &mut [T],
    y: &mut [T],
) -> T {
    let n = T::c(x.len() as f64);
    let mean = x.iter().copied().sum::<T>() / n;
    let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
    let inv_std = T::one() / (var + eps).sqrt();
    for i in 0..x.len() {
        xhat[i] = (x[i] - mean) * inv_std;
        y[i] = gain[i] * xhat[i] + bias[i];
    }
    inv_std
}

/// Backward of [`layer_norm_row`]; accumulates into `dgain`/`dbias` and
/// overwrites `dx`.
pub fn layer_norm_row_backward<T: Real>(
    xhat: &[T],
    inv_std: T,
    gain: &[T],
    dy: &[T],
    dx: &mut [T],
    dgain: &mut [T],
    dbias: &mut [T],
) {
    let n = T::c(xhat.len() as f64);
    let mut mean_d = T::zero();
    let mut mean_dx = T::zero();
    for i in 0..xhat.len() {
        let d = dy[i] * gain[i];
        dgain[i] += dy[i] * xhat[i];
        dbias[i] += dy[i];
        mean_d += d;
        mean_dx += d * xhat[i];
    }
    mean_d /= n;
    mean_dx /= n;
    for i in 0..xhat.len() {
        let d = dy[i] * gain[i];
        dx[i] = inv_std * (d - mean_d - xhat[i] * mean_dx);
    }
}

/// Layer normalization over the last dimension of `x`.
pub fn layer_norm<T: Real>(x: &Tensor<T>, gain: &Tensor<T>, bias: &Tensor<T>, eps: T) -> Result<Tensor<T>> {
    let n = x.cols();
    if n == 0 || gain.len() != n || bias.len() != n {
        return Err(Error::Shape(format!(
            "layer_norm: x {:?}, gain {:?}, bias {:?}",
            x.shape(),
            gain.shape(),
            bias.shape()
        )));
    }
    if eps <= T::zero() {
        return Err(Error::InvalidArgument("layer_norm: eps must be positive".into()));
    }
    let mut out = Tensor::zeros(x.shape());
    let mut xhat = vec![T::zero(); n];
    for r in 0..x.rows() {
        layer_norm_row(x.row(r), gain.data(), bias.data(), eps, &mut xhat, out.row_mut(r));
    }
    Ok(out)
}

/// Gradients of [`layer_norm`] given the upstream gradient `dy`.
pub fn layer_norm_backward<T: Real>(
    x: &Tensor<T>,
    gain: &Tensor<T>,
    eps: T,
    dy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let n = x.cols();
    if gain.len() != n || dy.shape() != x.shape() {
        return Err(Error::Shape("layer_norm_backward".into()));
    }
    let mut dx = Tensor::zeros(x.shape());
    let mut dgain = Tensor::zeros(&[n]);
    let mut dbias = Tensor::zeros(&[n]);
    let zeros = vec![T::zero(); n];
    let mut xhat = vec![T::zero(); n];
    let mut y = vec![T::zero(); n];
    for r in 0..x.rows() {
        let inv = layer_norm_row(x.row(r), gain.data(), &zeros, eps, &mut xhat, &mut y);
        layer_norm_row_backward(
            &xhat,
            inv,
            gain.data(),
            dy.row(r),
            dx.row_mut(r),
            dgain.data_mut(),
            dbias.data_mut(),
        );
    }
    Ok((dx, dgain, dbias))
}

/// Gated linear unit `(Wx + b) ⊙ σ(Vx + c)` mapping `n` inputs to `m` outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct GluParams<T> {
    pub w: Tensor<T>,
    pub b: Tensor<T>,
    pub v: Tensor<T>,
    pub c: Tensor<T>,
}

/// Saved activations for [`GluParams::backward`].
#[derive(Debug, Clone)]
pub struct GluCache<T> {
    lin: Vec<T>,
    gate: Vec<T>,
}

impl<T: Real> GluParams<T> {
    pub fn zeros(out_dim: usize, in_dim: usize) -> Self {
        GluParams {
            w: Tensor::zeros(&[out_dim, in_dim]),
            b: Tensor::zeros(&[out_dim]),
            v: Tensor::zeros(&[out_dim, in_dim]),
            c: Tensor::zeros(&[out_dim]),
        }
    }

    pub fn out_dim(&self) -> usize {
        self.w.rows()
    }

    pub fn in_dim(&self) -> usize {
        self.w.cols()
    }

    pub fn validate(&self) -> Result<()> {
        let (m, n) = (self.out_dim(), self.in_dim());
        self.w.ensure_shape(&[m, n], "glu W")?;
        self.v.ensure_shape(&[m, n], "glu V")?;
        self.b.ensure_shape(&[m], "glu b")?;
        self.c.ensure_shape(&[m], "glu c")
    }

    /// Forward over `rows` stacked inputs; returns output and cache.
    pub fn forward(&self, x: &[T], rows: usize) -> (Vec<T>, GluCache<T>) {
        let (m, n) = (self.out_dim(), self.in_dim());
        let mut lin = vec![T::zero(); rows * m];
        let mut gate = vec![T::zero(); rows * m];
        matmul_nt(x, self.w.data(), &mut lin, rows, n, m, T::zero());
        add_row_bias(&mut lin, self.b.data());
        matmul_nt(x, self.v.data(), &mut gate, rows, n, m, T::zero());
        add_row_bias(&mut gate, self.c.data());
        gate.iter_mut().for_each(|g| *g = sigmoid(*g));
        let out = lin.iter().zip(&gate).map(|(&a, &s)| a * s).collect();
        (out, GluCache { lin, gate })
    }

    /// Accumulates parameter gradients into `grads`; returns `dx`.
    pub fn backward(&self, x: &[T], rows: usize, cache: &GluCache<T>, dy: &[T], grads: &mut GluParams<T>) -> Vec<T> {
        let (m, n) = (self.out_dim(), self.in_dim());
        let mut dlin = vec![T::zero(); rows * m];
        let mut dgate = vec![T::zero(); rows * m];
        for i in 0..rows * m {
            let s = cache.gate[i];
            dlin[i] = dy[i] * s;
            dgate[i] = dy[i] * cache.lin[i] * s * (T::one() - s);
        }
        matmul_tn_acc(&dlin, x, grads.w.data_mut(), rows, m, n);
        matmul_tn_acc(&dgate, x, grads.v.data_mut(), rows, m, n);
        sum_rows_acc(&dlin, grads.b.data_mut());
        sum_rows_acc(&dgate, grads.c.data_mut());
        let mut dx = vec![T::zero(); rows * n];
        matmul_nn(&dlin, self.w.data(), &mut dx, rows, m, n, T::zero());
        matmul_nn(&dgate, self.v.data(), &mut dx, rows, m, n, T::one());
        dx
    }
}

/// Gated linear unit on a single vector or a batch of row vectors.
pub fn glu<T: Real>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>, v: &Tensor<T>, c: &Tensor<T>) -> Result<Tensor<T>> {
    let p = GluParams {
        w: w.clone(),
        b: b.clone(),
        v: v.clone(),
        c: c.clone(),
    };
    if w.shape().len() != 2 {
        return Err(Error::Shape("glu: W must be a matrix".into()));
    }
    p.validate()?;
    if x.cols() != p.in_dim() {
        return Err(Error::Shape(format!(
            "glu: input width {} vs W {:?}",
            x.cols(),
            w.shape()
        )));
    }
    let (out, _) = p.forward(x.data(), x.rows());
    let mut shape = x.shape().to_vec();
    *shape.last_mut().expect("non-scalar") = p.out_dim();
    Tensor::from_vec(&shape, out)
}

/// `log Σ exp(x)` with max subtraction.
pub fn log_sum_exp<T: Real>(xs: &[T]) -> T {
    let max = xs.iter().copied().fold(T::c(f64::NEG_INFINITY), T::max);
    if !max.is_finite() {
        return max;
    }
    max + xs.iter().map(|&x| (x - max).exp()).sum::<T>().ln()
}

/// Log-softmax written into `out`.
pub fn log_softmax_into<T: Real>(logits: &[T], out: &mut [T]) {
    let lse = log_sum_exp(logits);
    for (o, &l) in out.iter_mut().zip(logits) {
        *o = l - lse;
    }
}

pub fn softmax<T: Real>(logits: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); logits.len()];
    log_softmax_into(logits, &mut out);
    out.iter_mut().for_each(|v| *v = v.exp());
    out
}

/// Returns `(−log softmax(logits)[target], softmax(logits) − onehot(target))`.
pub fn softmax_cross_entropy<T: Real>(logits: &[T], target: usize) -> Result<(T, Vec<T>)> {
    if target >= logits.len() {
        return Err(Error::TokenOutOfRange {
            id: target,
            vocab: logits.len(),
        });
    }
    let mut grad = vec![T::zero(); logits.len()];
    let loss = softmax_cross_entropy_into(logits, target, T::one(), &mut grad);
    Ok((loss, grad))
}

/// Fused kernel: writes `scale · (softmax − onehot)` into `grad` and returns
/// the unscaled loss. `target` must be in range.
pub fn softmax_cross_entropy_into<T: Real>(logits: &[T], target: usize, scale: T, grad: &mut [T]) -> T {
    let lse = log_sum_exp(logits);
    for (g, &l) in grad.iter_mut().zip(logits) {
        *g = (l - lse).exp() * scale;
    }
    grad[target] -= scale;
    lse - logits[target]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(&[v.len()], v).unwrap()
    }

    #[test]
    fn layer_norm_two_points() {
        let y = layer_norm(&t(&[1.0, 3.0]), &t(&[1.0, 1.0]), &t(&[0.0, 0.0]), 1e-12).unwrap();
        assert!((y.data()[0] + 1.0).abs() < 1e-9);
        assert!((y.data()[1] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn layer_norm_constant_input_maps_to_bias() {
        let y = layer_norm(&t(&[5.0, 5.0]), &t(&[2.0, -7.0]), &t(&[0.3, -0.4]), 1e-5).unwrap();
        assert!((y.data()[0] - 0.3).abs() < 1e-6);
        assert!((y.data()[1] + 0.4).abs() < 1e-6);
    }

    #[test]
    fn layer_norm_matches_scalar_formula() {
        // Independent scalar evaluation of gain·(x−μ)/sqrt(σ²+eps)+bias.
        let x = [0.2f64, -0.4, 1.1];
        let mu = (0.2 - 0.4 + 1.1) / 3.0;
        let var = ((0.2 - mu) * (0.2 - mu) + (-0.4 - mu) * (-0.4 - mu) + (1.1 - mu) * (1.1 - mu)) / 3.0;
        let want: Vec<f64> = x.iter().map(|v| (v - mu) / (var + 1e-5).sqrt()).collect();
        let y = layer_norm(&t(&x), &t(&[1.0; 3]), &t(&[0.0; 3]), 1e-5).unwrap();
        for (a, b) in y.data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn layer_norm_rejects_mismatch() {
        assert!(layer_norm(&t(&[1.0, 2.0]), &t(&[1.0]), &t(&[0.0, 0.0]), 1e-5).is_err());
    }

    #[test]
    fn glu_scalar_and_limits() {
        let one = Tensor::<f64>::from_f64(&[1, 1], &[1.0]).unwrap();
        let zero_m = Tensor::<f64>::from_f64(&[1, 1], &[0.0]).unwrap();
        let y = glu(&t(&[2.0]), &one, &t(&[0.0]), &zero_m, &t(&[0.0])).unwrap();
        assert!((y.data()[0] - 1.0).abs() < 1e-15);

        let w = Tensor::<f64>::from_f64(&[2, 2], &[0.5, -1.0, 2.0, 0.25]).unwrap();
        let v = Tensor::<f64>::zeros(&[2, 2]);
        let x = t(&[0.7, -0.3]);
        let b = t(&[0.1, -0.2]);
        let lin = [0.5 * 0.7 + 0.3 + 0.1, 2.0 * 0.7 - 0.25 * 0.3 - 0.2];
        let open = glu(&x, &w, &b, &v, &t(&[20.0, 20.0])).unwrap();
        let closed = glu(&x, &w, &b, &v, &t(&[-20.0, -20.0])).unwrap();
        for i in 0..2 {
            assert!((open.data()[i] - lin[i]).abs() < 1e-6);
            assert!(closed.data()[i].abs() < 1e-6);
        }
    }

    #[test]
    fn glu_rejects_shape_mismatch() {
        let w = Tensor::<f64>::zeros(&[2, 3]);
        let v = Tensor::<f64>::zeros(&[2, 3]);
        assert!(glu(&t(&[1.0, 2.0]), &w, &t(&[0.0, 0.0]), &v, &t(&[0.0, 0.0])).is_err());
    }

    #[test]
    fn cross_entropy_cases() {
        let (loss, _) = softmax_cross_entropy(&[0.3f64; 4], 2).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-12);

        let (loss, grad) = softmax_cross_entropy(&[30.0f64, 0.0, 0.0], 0).unwrap();
        assert!(loss < 1e-12);
        assert!(grad.iter().all(|g| g.abs() < 1e-12));

        let e = std::f64::consts::E;
        let want = -(e * e / (e + e * e + 0.5f64.exp())).ln();
        let (loss, _) = softmax_cross_entropy(&[1.0f64, 2.0, 0.5], 1).unwrap();
        assert!((loss - want).abs() < 1e-14);

        assert!(softmax_cross_entropy(&[0.0f64; 3], 3).is_err());
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert_eq!(sigmoid(-1000.0f64), 0.0);
        assert_eq!(sigmoid(1000.0f64), 1.0);
        assert!((sigmoid(-3.0f64) - 0.047425873177566774).abs() < 1e-15);
    }
}
