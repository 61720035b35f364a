//! Raw dense kernels behind the tape ops. Parallelism is over fixed-size
//! row chunks so results are bit-identical regardless of thread count.

use crate::scalar::Scalar;
use rayon::prelude::*;

/// Below this many multiply-adds the rayon dispatch overhead dominates.
const PAR_THRESHOLD: usize = 1 << 15;
const ROW_CHUNK: usize = 8;

/// C = A(m,k) · B(k,n), row-major.
pub fn matmul_nn<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut c = vec![T::ZERO; m * n];
    if m * n * k < PAR_THRESHOLD || m == 1 {
        matmul_rows(a, b, &mut c, 0, m, k, n);
    } else {
        c.par_chunks_mut(ROW_CHUNK * n)
            .enumerate()
            .for_each(|(chunk, cs)| {
                let i0 = chunk * ROW_CHUNK;
                let rows = cs.len() / n;
                matmul_rows(&a[i0 * k..(i0 + rows) * k], b, cs, 0, rows, k, n);
            });
    }
    c
}

fn matmul_rows<T: Scalar>(a: &[T], b: &[T], c: &mut [T], i0: usize, rows: usize, k: usize, n: usize) {
    for i in i0..i0 + rows {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            let brow = &b[kk * n..(kk + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// C = A(m,k) · B(n,k)ᵀ. Row-by-row dot products, cache friendly for both.
pub fn matmul_nt<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    let mut c = vec![T::ZERO; m * n];
    let body = |i0: usize, cs: &mut [T]| {
        let rows = cs.len() / n;
        for r in 0..rows {
            let arow = &a[(i0 + r) * k..(i0 + r + 1) * k];
            for j in 0..n {
                let brow = &b[j * k..(j + 1) * k];
                let mut acc = T::ZERO;
                for (av, bv) in arow.iter().zip(brow) {
                    acc += *av * *bv;
                }
                cs[r * n + j] = acc;
            }
        }
    };
    if m * n * k < PAR_THRESHOLD || m == 1 {
        body(0, &mut c);
    } else {
        c.par_chunks_mut(ROW_CHUNK * n)
            .enumerate()
            .for_each(|(chunk, cs)| body(chunk * ROW_CHUNK, cs));
    }
    c
}

/// C = A(m,k)ᵀ · B(m,n) = (k,n). Transposes A into scratch first so the
/// inner loops stay contiguous.
pub fn matmul_tn<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    let at = transpose(a, m, k);
    matmul_nn(&at, b, k, m, n)
}

pub fn transpose<T: Scalar>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::ZERO; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

/// y += alpha * x
pub fn axpy<T: Scalar>(y: &mut [T], x: &[T], alpha: T) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}

pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = T::ZERO;
    for (av, bv) in a.iter().zip(b) {
        acc += *av * *bv;
    }
    acc
}

/// Numerically stabilized softmax over a contiguous lane, in place.
pub fn softmax_lane<T: Scalar>(lane: &mut [T]) {
    let mut max = lane[0];
    for &v in lane.iter() {
        max = max.maxs(v);
    }
    for v in lane.iter_mut() {
        *v -= max;
    }
    T::exp_slice(lane);
    let mut sum = T::ZERO;
    for &v in lane.iter() {
        sum += v;
    }
    let inv = T::ONE / sum;
    for v in lane.iter_mut() {
        *v *= inv;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn kernels_agree_with_triple_loop() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for &(m, k, n) in &[(3, 4, 2), (17, 9, 31), (64, 33, 65)] {
            let a: Vec<f64> = (0..m * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..k * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let want = naive_matmul(&a, &b, m, k, n);
            let got = matmul_nn(&a, &b, m, k, n);
            for (g, w) in got.iter().zip(&want) {
                assert!((g - w).abs() < 1e-9);
            }
            let bt = transpose(&b, k, n);
            let got_nt = matmul_nt(&a, &bt, m, k, n);
            for (g, w) in got_nt.iter().zip(&want) {
                assert!((g - w).abs() < 1e-9);
            }
            let at = transpose(&a, m, k);
            let got_tn = matmul_tn(&at, &b, k, m, n);
            for (g, w) in got_tn.iter().zip(&want) {
                assert!((g - w).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn softmax_lane_sums_to_one() {
        let mut lane = vec![3.0f64, -2.0, 0.5, 900.0, -900.0];
        softmax_lane(&mut lane);
        let sum: f64 = lane.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        assert!(lane.iter().all(|&v| v >= 0.0));
    }
}
