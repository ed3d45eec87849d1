//! Row-major dense kernels. Weights are stored `[in × out]` so the forward
//! inner loop runs over contiguous output columns.

use super::scalar::Scalar;

/// Dot product with eight independent accumulators so the loop vectorizes.
/// Summation order is fixed, so results are reproducible.
#[inline]
pub fn dot<F: Scalar>(a: &[F], b: &[F]) -> F {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [F::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for k in 0..8 {
            acc[k] += x[k] * y[k];
        }
    }
    let mut tail = F::zero();
    for (x, y) in ra.iter().zip(rb) {
        tail += *x * *y;
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

/// `y += alpha * x`
#[inline]
pub fn axpy<F: Scalar>(alpha: F, x: &[F], y: &mut [F]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * *xi;
    }
}

/// `y[rows × dout] = x[rows × din] · w[din × dout] (+ b)`
pub fn matmul<F: Scalar>(x: &[F], w: &[F], b: Option<&[F]>, rows: usize, din: usize, dout: usize, y: &mut [F]) {
    debug_assert_eq!(x.len(), rows * din);
    debug_assert_eq!(w.len(), din * dout);
    debug_assert_eq!(y.len(), rows * dout);
    for t in 0..rows {
        let yr = &mut y[t * dout..(t + 1) * dout];
        match b {
            Some(b) => yr.copy_from_slice(b),
            None => yr.fill(F::zero()),
        }
        let xr = &x[t * din..(t + 1) * din];
        for (i, &a) in xr.iter().enumerate() {
            if a != F::zero() {
                axpy(a, &w[i * dout..(i + 1) * dout], yr);
            }
        }
    }
}

/// `dx[rows × din] += dy · wᵀ`
pub fn matmul_dx<F: Scalar>(dy: &[F], w: &[F], rows: usize, din: usize, dout: usize, dx: &mut [F]) {
    for t in 0..rows {
        let dyr = &dy[t * dout..(t + 1) * dout];
        let dxr = &mut dx[t * din..(t + 1) * din];
        for (i, d) in dxr.iter_mut().enumerate() {
            *d += dot(dyr, &w[i * dout..(i + 1) * dout]);
        }
    }
}

/// `dw[din × dout] += xᵀ · dy`
pub fn matmul_dw<F: Scalar>(x: &[F], dy: &[F], rows: usize, din: usize, dout: usize, dw: &mut [F]) {
    for t in 0..rows {
        let dyr = &dy[t * dout..(t + 1) * dout];
        let xr = &x[t * din..(t + 1) * din];
        for (i, &a) in xr.iter().enumerate() {
            if a != F::zero() {
                axpy(a, dyr, &mut dw[i * dout..(i + 1) * dout]);
            }
        }
    }
}

/// `db[dout] += Σ_rows dy`
pub fn bias_grad<F: Scalar>(dy: &[F], rows: usize, dout: usize, db: &mut [F]) {
    for t in 0..rows {
        for (d, g) in db.iter_mut().zip(&dy[t * dout..(t + 1) * dout]) {
            *d += *g;
        }
    }
}

/// In-place softmax of one row; returns nothing, row sums to one.
pub fn softmax_in_place<F: Scalar>(row: &mut [F]) {
    let max = row.iter().copied().fold(F::neg_infinity(), F::max);
    let mut sum = F::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = F::one() / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

/// Log-softmax of one row into `out`.
pub fn log_softmax<F: Scalar>(row: &[F], out: &mut [F]) {
    let max = row.iter().copied().fold(F::neg_infinity(), F::max);
    let mut sum = F::zero();
    for &v in row {
        sum += (v - max).exp();
    }
    let lse = max + sum.ln();
    for (o, &v) in out.iter_mut().zip(row) {
        *o = v - lse;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use alloc::vec::Vec;

    #[test]
    fn dot_matches_naive() {
        let a: Vec<f64> = (0..19).map(|i| i as f64 * 0.5 - 3.0).collect();
        let b: Vec<f64> = (0..19).map(|i| (i * i) as f64 * 0.1).collect();
        let naive: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        assert!((dot(&a, &b) - naive).abs() < 1e-12);
    }

    #[test]
    fn matmul_and_grads() {
        // x: 2×3, w: 3×2
        let x = vec![1.0, 2.0, 3.0, -1.0, 0.0, 1.0];
        let w = vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0];
        let b = vec![0.5, -0.5];
        let mut y = vec![0.0; 4];
        matmul(&x, &w, Some(&b), 2, 3, 2, &mut y);
        assert_eq!(y, vec![4.5, 4.5, 0.5, 0.5]);
        let dy = vec![1.0, 0.0, 0.0, 1.0];
        let mut dx = vec![0.0; 6];
        matmul_dx(&dy, &w, 2, 3, 2, &mut dx);
        assert_eq!(dx, vec![1.0, 0.0, 1.0, 0.0, 1.0, 1.0]);
        let mut dw = vec![0.0; 6];
        matmul_dw(&x, &dy, 2, 3, 2, &mut dw);
        assert_eq!(dw, vec![1.0, -1.0, 2.0, 0.0, 3.0, 1.0]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut r = vec![1.0f32, 2.0, 3.0, -100.0];
        softmax_in_place(&mut r);
        let s: f32 = r.iter().sum();
        assert!((s - 1.0).abs() < 1e-6);
    }
}
