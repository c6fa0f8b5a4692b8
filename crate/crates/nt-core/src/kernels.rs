//! Matrix multiply kernels.
//!
//! Each kernel has a sequential implementation and, behind the `parallel`
//! feature, a rayon implementation that splits work over output rows. Both
//! accumulate every output element in the same ascending-k order, so the two
//! paths produce bit-identical results and the feature flag never changes
//! numerics.

use crate::scalar::Scalar;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Below this many multiply-adds the rayon dispatch overhead dominates and
/// the sequential kernel is used even when the feature is enabled.
pub const PAR_THRESHOLD: usize = 1 << 15;

/// C[m,n] = A[m,k] * B[k,n]
pub fn matmul_nn<F: Scalar>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut c = vec![F::zero(); m * n];
    if use_parallel(m, k, n) {
        par_rows(&mut c, n, |i, row| nn_row(a, b, k, n, i, row));
    } else {
        for i in 0..m {
            nn_row(a, b, k, n, i, &mut c[i * n..(i + 1) * n]);
        }
    }
    c
}

#[inline]
fn nn_row<F: Scalar>(a: &[F], b: &[F], k: usize, n: usize, i: usize, out: &mut [F]) {
    for p in 0..k {
        let aip = a[i * k + p];
        let brow = &b[p * n..(p + 1) * n];
        for (o, &bv) in out.iter_mut().zip(brow.iter()) {
            *o += aip * bv;
        }
    }
}

/// C[m,n] = A[m,k] * B[n,k]^T, i.e. rows of A dotted with rows of B.
pub fn matmul_nt<F: Scalar>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    let mut c = vec![F::zero(); m * n];
    if use_parallel(m, k, n) {
        par_rows(&mut c, n, |i, row| nt_row(a, b, k, i, row));
    } else {
        for i in 0..m {
            nt_row(a, b, k, i, &mut c[i * n..(i + 1) * n]);
        }
    }
    c
}

#[inline]
fn nt_row<F: Scalar>(a: &[F], b: &[F], k: usize, i: usize, out: &mut [F]) {
    let arow = &a[i * k..(i + 1) * k];
    for (j, o) in out.iter_mut().enumerate() {
        let brow = &b[j * k..(j + 1) * k];
        let mut acc = F::zero();
        for (&av, &bv) in arow.iter().zip(brow.iter()) {
            acc += av * bv;
        }
        *o = acc;
    }
}

/// C[m,n] = A[k,m]^T * B[k,n]
pub fn matmul_tn<F: Scalar>(a: &[F], b: &[F], k: usize, m: usize, n: usize) -> Vec<F> {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    let mut c = vec![F::zero(); m * n];
    if use_parallel(m, k, n) {
        par_rows(&mut c, n, |i, row| tn_row(a, b, k, m, n, i, row));
    } else {
        for i in 0..m {
            tn_row(a, b, k, m, n, i, &mut c[i * n..(i + 1) * n]);
        }
    }
    c
}

#[inline]
fn tn_row<F: Scalar>(a: &[F], b: &[F], k: usize, m: usize, n: usize, i: usize, out: &mut [F]) {
    for p in 0..k {
        let aip = a[p * m + i];
        let brow = &b[p * n..(p + 1) * n];
        for (o, &bv) in out.iter_mut().zip(brow.iter()) {
            *o += aip * bv;
        }
    }
}

#[inline]
fn use_parallel(m: usize, k: usize, n: usize) -> bool {
    #[cfg(feature = "parallel")]
    {
        m > 1 && m * k * n >= PAR_THRESHOLD
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = (m, k, n);
        false
    }
}

#[cfg(feature = "parallel")]
fn par_rows<F: Scalar>(c: &mut [F], n: usize, body: impl Fn(usize, &mut [F]) + Sync) {
    c.par_chunks_mut(n).enumerate().for_each(|(i, row)| body(i, row));
}

#[cfg(not(feature = "parallel"))]
#[allow(dead_code)]
fn par_rows<F: Scalar>(_c: &mut [F], _n: usize, _body: impl Fn(usize, &mut [F]) + Sync) {
    unreachable!("parallel path compiled out");
}

/// Always-sequential entry points for the benchmark comparison.
pub mod seq {
    use super::*;

    pub fn matmul_nn<F: Scalar>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
        let mut c = vec![F::zero(); m * n];
        for i in 0..m {
            nn_row(a, b, k, n, i, &mut c[i * n..(i + 1) * n]);
        }
        c
    }

    pub fn matmul_nt<F: Scalar>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
        let mut c = vec![F::zero(); m * n];
        for i in 0..m {
            nt_row(a, b, k, i, &mut c[i * n..(i + 1) * n]);
        }
        c
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Triple-loop reference in the plain textbook index order.
    fn matmul_oracle(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for p in 0..k {
                    acc += a[i * k + p] * b[p * n + j];
                }
                c[i * n + j] = acc;
            }
        }
        c
    }

    fn transpose(x: &[f64], r: usize, c: usize) -> Vec<f64> {
        let mut t = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                t[j * r + i] = x[i * c + j];
            }
        }
        t
    }

    #[test]
    fn identity_passthrough() {
        // [[1,2],[3,4]] x I = same matrix
        let a = vec![1.0f64, 2.0, 3.0, 4.0];
        let i = vec![1.0, 0.0, 0.0, 1.0];
        assert_eq!(matmul_nn(&a, &i, 2, 2, 2), a);
    }

    #[test]
    fn fixed_2x3_3x2_case() {
        // [[1,2,3],[4,5,6]] x [[7,8],[9,10],[11,12]] = [[58,64],[139,154]]
        let a = vec![1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0];
        assert_eq!(matmul_nn(&a, &b, 2, 3, 2), vec![58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn variants_match_triple_loop_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let m = rng.gen_range(1..9);
            let k = rng.gen_range(1..9);
            let n = rng.gen_range(1..9);
            let a: Vec<f64> = (0..m * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..k * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let want = matmul_oracle(&a, &b, m, k, n);
            let got_nn = matmul_nn(&a, &b, m, k, n);
            let got_nt = matmul_nt(&a, &transpose(&b, k, n), m, k, n);
            let got_tn = matmul_tn(&transpose(&a, m, k), &b, k, m, n);
            for (g, w) in [&got_nn, &got_nt, &got_tn].iter().flat_map(|g| g.iter().zip(&want)) {
                assert!((g - w).abs() < 1e-12, "{g} vs {w}");
            }
        }
    }

    #[test]
    fn parallel_equals_sequential_bitwise() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        // Large enough to clear PAR_THRESHOLD when the feature is on.
        let (m, k, n) = (64, 48, 40);
        let a: Vec<f32> = (0..m * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f32> = (0..k * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        assert_eq!(matmul_nn(&a, &b, m, k, n), seq::matmul_nn(&a, &b, m, k, n));
        let bt = {
            let mut t = vec![0.0f32; k * n];
            for i in 0..k {
                for j in 0..n {
                    t[j * k + i] = b[i * n + j];
                }
            }
            t
        };
        assert_eq!(matmul_nt(&a, &bt, m, k, n), seq::matmul_nt(&a, &bt, m, k, n));
    }
}
