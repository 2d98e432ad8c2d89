use rand::Rng;

use crate::error::{Error, Result};
use crate::linalg::{add_row_bias, matmul_nn, matmul_nt, matmul_tn_acc, sum_rows_acc};
use crate::ops::sigmoid;
use crate::tensor::{Real, Tensor};

/// Separate carry gate `g_C = σ(W_C x + b_C)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CarryGate<T> {
    pub w_c: Tensor<T>,
    pub b_c: Tensor<T>,
}

/// One highway layer `y = x ⊙ g_C + tanh(Wx + b) ⊙ g_T`.
///
/// With `carry == None` the carry gate is tied to `1 − g_T`.
#[derive(Debug, Clone, PartialEq)]
pub struct HighwayParams<T> {
    pub w_t: Tensor<T>,
    pub b_t: Tensor<T>,
    pub w: Tensor<T>,
    pub b: Tensor<T>,
    pub carry: Option<CarryGate<T>>,
}

#[derive(Debug, Clone)]
pub(crate) struct HighwayCache<T> {
    x: Vec<T>,
    g: Vec<T>,
    u: Vec<T>,
    gc: Option<Vec<T>>,
}

impl<T: Real> HighwayParams<T> {
    pub fn zeros(width: usize, full_carry: bool) -> Self {
        HighwayParams {
            w_t: Tensor::zeros(&[width, width]),
            b_t: Tensor::zeros(&[width]),
            w: Tensor::zeros(&[width, width]),
            b: Tensor::zeros(&[width]),
            carry: full_carry.then(|| CarryGate {
                w_c: Tensor::zeros(&[width, width]),
                b_c: Tensor::zeros(&[width]),
            }),
        }
    }

    /// Uniform `±range` weights and `b`, constant transform bias.
    pub fn init<R: Rng>(rng: &mut R, width: usize, range: f64, transform_bias: f64) -> Self {
        let mut p = Self::zeros(width, false);
        for t in [&mut p.w_t, &mut p.w, &mut p.b] {
            t.data_mut()
                .iter_mut()
                .for_each(|x| *x = T::c(rng.random_range(-range..range)));
        }
        p.b_t.fill(T::c(transform_bias));
        p
    }

    pub fn width(&self) -> usize {
        self.b_t.len()
    }

    pub fn validate(&self) -> Result<()> {
        let h = self.width();
        self.w_t.ensure_shape(&[h, h], "highway W_T")?;
        self.w.ensure_shape(&[h, h], "highway W")?;
        self.b.ensure_shape(&[h], "highway b")?;
        if let Some(c) = &self.carry {
            c.w_c.ensure_shape(&[h, h], "highway W_C")?;
            c.b_c.ensure_shape(&[h], "highway b_C")?;
        }
        Ok(())
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.width(), self.carry.is_some())
    }

    pub(crate) fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        out.push((format!("{prefix}.w_t"), &self.w_t));
        out.push((format!("{prefix}.b_t"), &self.b_t));
        out.push((format!("{prefix}.w"), &self.w));
        out.push((format!("{prefix}.b"), &self.b));
        if let Some(c) = &self.carry {
            out.push((format!("{prefix}.w_c"), &c.w_c));
            out.push((format!("{prefix}.b_c"), &c.b_c));
        }
    }

    pub(crate) fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor<T>>) {
        out.push(&mut self.w_t);
        out.push(&mut self.b_t);
        out.push(&mut self.w);
        out.push(&mut self.b);
        if let Some(c) = &mut self.carry {
            out.push(&mut c.w_c);
            out.push(&mut c.b_c);
        }
    }

    pub(crate) fn forward(&self, x: &[T], rows: usize) -> (Vec<T>, HighwayCache<T>) {
        let h = self.width();
        let mut g = vec![T::zero(); rows * h];
        let mut u = vec![T::zero(); rows * h];
        matmul_nt(x, self.w_t.data(), &mut g, rows, h, h, T::zero());
        add_row_bias(&mut g, self.b_t.data());
        g.iter_mut().for_each(|v| *v = sigmoid(*v));
        matmul_nt(x, self.w.data(), &mut u, rows, h, h, T::zero());
        add_row_bias(&mut u, self.b.data());
        u.iter_mut().for_each(|v| *v = v.tanh());
        let gc = self.carry.as_ref().map(|c| {
            let mut gc = vec![T::zero(); rows * h];
            matmul_nt(x, c.w_c.data(), &mut gc, rows, h, h, T::zero());
            add_row_bias(&mut gc, c.b_c.data());
            gc.iter_mut().for_each(|v| *v = sigmoid(*v));
            gc
        });
        let y = match &gc {
            None => (0..rows * h).map(|i| x[i] * (T::one() - g[i]) + u[i] * g[i]).collect(),
            Some(gc) => (0..rows * h).map(|i| x[i] * gc[i] + u[i] * g[i]).collect(),
        };
        (
            y,
            HighwayCache {
                x: x.to_vec(),
                g,
                u,
                gc,
            },
        )
    }

    pub(crate) fn backward(&self, cache: &HighwayCache<T>, dy: &[T], rows: usize, grads: &mut HighwayParams<T>) -> Vec<T> {
        let h = self.width();
        let n = rows * h;
        let (x, g, u) = (&cache.x, &cache.g, &cache.u);
        let mut dx = vec![T::zero(); n];
        let mut dt = vec![T::zero(); n];
        let mut du = vec![T::zero(); n];
        let mut dcg = cache.gc.as_ref().map(|_| vec![T::zero(); n]);
        for i in 0..n {
            let gi = g[i];
            let dg = match &cache.gc {
                None => {
                    dx[i] = dy[i] * (T::one() - gi);
                    dy[i] * (u[i] - x[i])
                }
                Some(gc) => {
                    dx[i] = dy[i] * gc[i];
                    if let Some(d) = dcg.as_mut() {
                        d[i] = dy[i] * x[i] * gc[i] * (T::one() - gc[i]);
                    }
                    dy[i] * u[i]
                }
            };
            dt[i] = dg * gi * (T::one() - gi);
            du[i] = dy[i] * gi * (T::one() - u[i] * u[i]);
        }
        matmul_tn_acc(&dt, x, grads.w_t.data_mut(), rows, h, h);
        sum_rows_acc(&dt, grads.b_t.data_mut());
        matmul_tn_acc(&du, x, grads.w.data_mut(), rows, h, h);
        sum_rows_acc(&du, grads.b.data_mut());
        matmul_nn(&dt, self.w_t.data(), &mut dx, rows, h, h, T::one());
        matmul_nn(&du, self.w.data(), &mut dx, rows, h, h, T::one());
        if let (Some(d), Some(c), Some(gc)) = (dcg, self.carry.as_ref(), grads.carry.as_mut()) {
            matmul_tn_acc(&d, x, gc.w_c.data_mut(), rows, h, h);
            sum_rows_acc(&d, gc.b_c.data_mut());
            matmul_nn(&d, c.w_c.data(), &mut dx, rows, h, h, T::one());
        }
        dx
    }
}

/// Applies one highway layer to a vector or a batch of row vectors.
pub fn highway_step<T: Real>(x: &Tensor<T>, p: &HighwayParams<T>) -> Result<Tensor<T>> {
    p.validate()?;
    if x.cols() != p.width() {
        return Err(Error::Shape(format!(
            "highway: input width {} vs layer width {}",
            x.cols(),
            p.width()
        )));
    }
    let (y, _) = p.forward(x.data(), x.rows());
    Tensor::from_vec(x.shape(), y)
}

/// Transform-gate activations `σ(W_T x + b_T)` for inspection.
pub fn transform_gate<T: Real>(x: &Tensor<T>, p: &HighwayParams<T>) -> Result<Tensor<T>> {
    p.validate()?;
    if x.cols() != p.width() {
        return Err(Error::Shape("transform_gate: width".into()));
    }
    let (_, cache) = p.forward(x.data(), x.rows());
    Tensor::from_vec(x.shape(), cache.g)
}

/// Carry-gate activations (tied or separate).
pub fn carry_gate<T: Real>(x: &Tensor<T>, p: &HighwayParams<T>) -> Result<Tensor<T>> {
    p.validate()?;
    if x.cols() != p.width() {
        return Err(Error::Shape("carry_gate: width".into()));
    }
    let (_, cache) = p.forward(x.data(), x.rows());
    let gc = match cache.gc {
        Some(gc) => gc,
        None => cache.g.iter().map(|&g| T::one() - g).collect(),
    };
    Tensor::from_vec(x.shape(), gc)
}
