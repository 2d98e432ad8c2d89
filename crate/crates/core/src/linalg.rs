//! Row-major matrix products on raw slices.
//!
//! All weight matrices are stored `[out × in]`, so a forward affine map is
//! `y = x · Wᵀ` and the weight gradient is `dW += dyᵀ · x`.

use crate::par;
use crate::tensor::Real;

/// Output rows handled per task. Fixed so results never depend on threads.
const ROW_CHUNK: usize = 64;
/// Below this many multiply-adds a product runs as a single call.
const SPLIT_THRESHOLD: usize = 1 << 18;

#[derive(Clone, Copy)]
struct SendPtr<T>(*const T);
unsafe impl<T> Send for SendPtr<T> {}
unsafe impl<T> Sync for SendPtr<T> {}

impl<T> SendPtr<T> {
    fn get(self) -> *const T {
        self.0
    }
}

/// `out[m×n] = a[m×k] · w[n×k]ᵀ + beta · out`.
pub fn matmul_nt<T: Real>(a: &[T], w: &[T], out: &mut [T], m: usize, k: usize, n: usize, beta: T) {
    assert_eq!(a.len(), m * k, "matmul_nt: lhs");
    assert_eq!(w.len(), n * k, "matmul_nt: rhs");
    assert_eq!(out.len(), m * n, "matmul_nt: out");
    if m == 0 || n == 0 {
        return;
    }
    let ap = SendPtr(a.as_ptr());
    let wp = SendPtr(w.as_ptr());
    let run = move |row0: usize, rows: usize, c: &mut [T]| unsafe {
        T::gemm(
            rows,
            k,
            n,
            T::one(),
            ap.get().add(row0 * k),
            k as isize,
            1,
            wp.get(),
            1,
            k as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    };
    if m * n * k < SPLIT_THRESHOLD || m <= ROW_CHUNK {
        run(0, m, out);
    } else {
        par::for_each_chunk_mut(out, ROW_CHUNK * n, |i, c| run(i * ROW_CHUNK, c.len() / n, c));
    }
}

/// `out[m×k] = a[m×n] · w[n×k] + beta · out`.
pub fn matmul_nn<T: Real>(a: &[T], w: &[T], out: &mut [T], m: usize, n: usize, k: usize, beta: T) {
    assert_eq!(a.len(), m * n, "matmul_nn: lhs");
    assert_eq!(w.len(), n * k, "matmul_nn: rhs");
    assert_eq!(out.len(), m * k, "matmul_nn: out");
    if m == 0 || k == 0 {
        return;
    }
    let ap = SendPtr(a.as_ptr());
    let wp = SendPtr(w.as_ptr());
    let run = move |row0: usize, rows: usize, c: &mut [T]| unsafe {
        T::gemm(
            rows,
            n,
            k,
            T::one(),
            ap.get().add(row0 * n),
            n as isize,
            1,
            wp.get(),
            k as isize,
            1,
            beta,
            c.as_mut_ptr(),
            k as isize,
            1,
        );
    };
    if m * n * k < SPLIT_THRESHOLD || m <= ROW_CHUNK {
        run(0, m, out);
    } else {
        par::for_each_chunk_mut(out, ROW_CHUNK * k, |i, c| run(i * ROW_CHUNK, c.len() / k, c));
    }
}

/// `dw[n×k] += dy[m×n]ᵀ · x[m×k]`.
pub fn matmul_tn_acc<T: Real>(dy: &[T], x: &[T], dw: &mut [T], m: usize, n: usize, k: usize) {
    assert_eq!(dy.len(), m * n, "matmul_tn: dy");
    assert_eq!(x.len(), m * k, "matmul_tn: x");
    assert_eq!(dw.len(), n * k, "matmul_tn: dw");
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    let dp = SendPtr(dy.as_ptr());
    let xp = SendPtr(x.as_ptr());
    let run = move |row0: usize, rows: usize, c: &mut [T]| unsafe {
        T::gemm(
            rows,
            m,
            k,
            T::one(),
            dp.get().add(row0),
            1,
            n as isize,
            xp.get(),
            k as isize,
            1,
            T::one(),
            c.as_mut_ptr(),
            k as isize,
            1,
        );
    };
    if m * n * k < SPLIT_THRESHOLD || n <= ROW_CHUNK {
        run(0, n, dw);
    } else {
        par::for_each_chunk_mut(dw, ROW_CHUNK * k, |i, c| run(i * ROW_CHUNK, c.len() / k, c));
    }
}

/// Adds `bias` to every row of `out[rows×bias.len()]`.
pub fn add_row_bias<T: Real>(out: &mut [T], bias: &[T]) {
    for row in out.chunks_mut(bias.len()) {
        for (o, &b) in row.iter_mut().zip(bias) {
            *o += b;
        }
    }
}

/// `db += Σ_rows dy`.
pub fn sum_rows_acc<T: Real>(dy: &[T], db: &mut [T]) {
    for row in dy.chunks(db.len()) {
        for (d, &g) in db.iter_mut().zip(row) {
            *d += g;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_nt(a: &[f64], w: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] = (0..k).map(|p| a[i * k + p] * w[j * k + p]).sum();
            }
        }
        out
    }

    fn ramp(len: usize, s: f64) -> Vec<f64> {
        (0..len).map(|i| ((i as f64) * s).sin()).collect()
    }

    #[test]
    fn products_match_naive_loops() {
        for &(m, k, n) in &[(1, 1, 1), (3, 4, 5), (130, 70, 90), (200, 64, 300)] {
            let a = ramp(m * k, 0.37);
            let w = ramp(n * k, 0.11);
            let mut out = vec![0.0; m * n];
            matmul_nt(&a, &w, &mut out, m, k, n, 0.0);
            let want = naive_nt(&a, &w, m, k, n);
            for (x, y) in out.iter().zip(&want) {
                assert!((x - y).abs() < 1e-10);
            }

            // dx = dy · W with dy = out
            let mut dx = vec![0.0; m * k];
            matmul_nn(&out, &w, &mut dx, m, n, k, 0.0);
            for i in 0..m {
                for p in 0..k {
                    let s: f64 = (0..n).map(|j| out[i * n + j] * w[j * k + p]).sum();
                    assert!((dx[i * k + p] - s).abs() < 1e-8);
                }
            }

            let mut dw = vec![1.0; n * k];
            matmul_tn_acc(&out, &a, &mut dw, m, n, k);
            for j in 0..n {
                for p in 0..k {
                    let s: f64 = 1.0 + (0..m).map(|i| out[i * n + j] * a[i * k + p]).sum::<f64>();
                    assert!((dw[j * k + p] - s).abs() < 1e-8);
                }
            }
        }
    }

    #[test]
    fn parallel_and_sequential_agree_bitwise() {
        let (m, k, n) = (300, 96, 257);
        let a = ramp(m * k, 0.3);
        let w = ramp(n * k, 0.7);
        let mut x = vec![0.0f64; m * n];
        let mut y = vec![0.0f64; m * n];
        matmul_nt(&a, &w, &mut x, m, k, n, 0.0);
        par::set_parallel(false);
        matmul_nt(&a, &w, &mut y, m, k, n, 0.0);
        par::set_parallel(true);
        assert_eq!(x, y);
    }
}
