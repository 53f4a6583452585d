//! Small dense helpers for state-sized vectors and matrices.
//!
//! State dimensions in this crate are tiny (usually 1 or 2), so vectors and
//! row-major square matrices live inline in `SmallVec`s to keep the per-path
//! inner loops allocation free.

use smallvec::SmallVec;

/// State, noise, gradient or control vector.
pub type Vector = SmallVec<[f64; 4]>;

/// Row-major `m x m` matrix.
pub type MatrixBuf = SmallVec<[f64; 16]>;

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn norm_inf(a: &[f64]) -> f64 {
    a.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
}

/// `A x` for a row-major square `A`.
pub fn mat_vec(a: &[f64], x: &[f64]) -> Vector {
    let m = x.len();
    debug_assert_eq!(a.len(), m * m);
    (0..m).map(|r| dot(&a[r * m..(r + 1) * m], x)).collect()
}

/// `A^T x` for a row-major square `A`.
pub fn mat_t_vec(a: &[f64], x: &[f64]) -> Vector {
    let m = x.len();
    debug_assert_eq!(a.len(), m * m);
    (0..m)
        .map(|c| (0..m).map(|r| a[r * m + c] * x[r]).sum())
        .collect()
}

pub fn mat_mul(a: &[f64], b: &[f64], m: usize) -> MatrixBuf {
    let mut out: MatrixBuf = smallvec::smallvec![0.0; m * m];
    for r in 0..m {
        for c in 0..m {
            out[r * m + c] = (0..m).map(|k| a[r * m + k] * b[k * m + c]).sum();
        }
    }
    out
}

pub fn identity(m: usize) -> MatrixBuf {
    let mut out: MatrixBuf = smallvec::smallvec![0.0; m * m];
    for i in 0..m {
        out[i * m + i] = 1.0;
    }
    out
}

/// Inverse of a small square matrix, `None` when singular.
pub fn invert(a: &[f64], m: usize) -> Option<MatrixBuf> {
    let mat = nalgebra::DMatrix::from_row_slice(m, m, a);
    let inv = mat.try_inverse()?;
    let mut out: MatrixBuf = smallvec::smallvec![0.0; m * m];
    for r in 0..m {
        for c in 0..m {
            out[r * m + c] = inv[(r, c)];
        }
    }
    Some(out)
}

/// Extreme eigenvalues of the symmetric matrix `A A^T`.
pub fn gram_eigen_range(a: &[f64], m: usize) -> (f64, f64) {
    let mat = nalgebra::DMatrix::from_row_slice(m, m, a);
    let gram = &mat * mat.transpose();
    let eig = gram.symmetric_eigenvalues();
    let lo = eig.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = eig.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    (lo, hi)
}

/// Paths per block in parallel reductions. Partial sums are formed per block
/// and then added in block order, so results do not depend on thread count.
pub const REDUCTION_CHUNK: usize = 4096;

/// Deterministic parallel sum of `f(i)` for `i in 0..n`.
pub fn chunked_sum<F>(n: usize, f: F) -> f64
where
    F: Fn(usize) -> f64 + Sync,
{
    use rayon::prelude::*;
    let n_chunks = n.div_ceil(REDUCTION_CHUNK);
    let partials: Vec<f64> = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let lo = c * REDUCTION_CHUNK;
            let hi = (lo + REDUCTION_CHUNK).min(n);
            (lo..hi).map(&f).sum()
        })
        .collect();
    partials.iter().sum()
}

/// Deterministic parallel fold: each block of [`REDUCTION_CHUNK`] indices is
/// folded into a fresh accumulator, and the block results are merged in
/// block order.
pub fn chunked_fold<T, I, F, M>(n: usize, init: I, fold: F, merge: M) -> T
where
    T: Send,
    I: Fn() -> T + Sync,
    F: Fn(&mut T, usize) + Sync,
    M: Fn(&mut T, T),
{
    use rayon::prelude::*;
    let n_chunks = n.div_ceil(REDUCTION_CHUNK);
    let partials: Vec<T> = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let mut acc = init();
            let lo = c * REDUCTION_CHUNK;
            for i in lo..(lo + REDUCTION_CHUNK).min(n) {
                fold(&mut acc, i);
            }
            acc
        })
        .collect();
    let mut total = init();
    for p in partials {
        merge(&mut total, p);
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inverse_of_diagonal() {
        let a = [2.0, 0.0, 0.0, 4.0];
        let inv = invert(&a, 2).unwrap();
        assert_eq!(inv.as_slice(), &[0.5, 0.0, 0.0, 0.25]);
        assert!(invert(&[1.0, 2.0, 2.0, 4.0], 2).is_none());
    }

    #[test]
    fn transpose_product() {
        let a = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(mat_vec(&a, &[1.0, 1.0]).as_slice(), &[3.0, 7.0]);
        assert_eq!(mat_t_vec(&a, &[1.0, 1.0]).as_slice(), &[4.0, 6.0]);
    }
}
