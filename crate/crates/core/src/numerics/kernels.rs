//! Inner loops shared by the graph ops. Slices are row-major.

use super::tensor::Real;

/// `c[m,n] += a[m,k] * b[k,n]`
pub fn matmul_acc<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    T::gemm(m, k, n, T::one(), a, (k, 1), b, (n, 1), T::one(), c, (n, 1));
}

/// `c[m,k] += a[m,n] * b[k,n]^T`
pub fn matmul_nt_acc<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, n: usize, k: usize) {
    T::gemm(m, n, k, T::one(), a, (n, 1), b, (1, n), T::one(), c, (k, 1));
}

/// `c[k,n] += a[m,k]^T * b[m,n]`
pub fn matmul_tn_acc<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    T::gemm(k, m, n, T::one(), a, (1, k), b, (n, 1), T::one(), c, (n, 1));
}

/// `tanh` through one `exp`; much cheaper than the libm call and exact
/// to a few ulps. Saturates cleanly at both ends.
#[inline]
pub fn tanh_exp<T: Real>(u: T) -> T {
    T::one() - T::of(2.0) / ((u + u).exp() + T::one())
}

#[inline]
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    // four accumulators so the loop vectorizes
    let mut acc = [T::zero(); 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..a.len() {
        s += a[i] * b[i];
    }
    s
}

#[inline]
pub fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}

/// In-place softmax of one row; returns nothing, row sums to one.
pub fn softmax_row<T: Real>(row: &mut [T]) {
    let max = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = T::one() / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
}
