//! Blocked matrix multiply and the small vector kernels shared with the
//! sparse FFN path.
//!
//! Every output element accumulates over `k` in ascending order no matter how
//! rows are split between workers, so results are bit-identical across runs
//! and thread counts.

use rayon::prelude::*;

use crate::error::{shape_err, Result};

use super::{Real, Tensor};

/// Tile edge in both the reduction and output-column dimensions.
pub const BLOCK: usize = 64;

/// Below this many multiply-adds the worker pool is not worth waking.
const PAR_THRESHOLD: usize = 1 << 18;

pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = (a.rows(), a.cols());
    let (k2, n) = (b.rows(), b.cols());
    if k != k2 {
        return Err(shape_err!("matmul inner dimensions {k} vs {k2}"));
    }
    let mut c = vec![T::zero(); m * n];
    matmul_into(a.data(), b.data(), &mut c, m, k, n);
    Tensor::matrix(m, n, c)
}

/// `c += a · b` for row-major slices.
pub fn matmul_into<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m * k * n >= PAR_THRESHOLD && m > BLOCK {
        c.par_chunks_mut(BLOCK * n)
            .zip(a.par_chunks(BLOCK * k))
            .for_each(|(c_rows, a_rows)| gemm_panel(a_rows, b, c_rows, k, n));
    } else {
        for (c_rows, a_rows) in c.chunks_mut(BLOCK * n).zip(a.chunks(BLOCK * k)) {
            gemm_panel(a_rows, b, c_rows, k, n);
        }
    }
}

fn gemm_panel<T: Real>(a: &[T], b: &[T], c: &mut [T], k: usize, n: usize) {
    let rows = c.len() / n;
    for k0 in (0..k).step_by(BLOCK) {
        let k1 = (k0 + BLOCK).min(k);
        for j0 in (0..n).step_by(BLOCK) {
            let j1 = (j0 + BLOCK).min(n);
            for i in 0..rows {
                let a_row = &a[i * k..(i + 1) * k];
                let c_row = &mut c[i * n + j0..i * n + j1];
                for kk in k0..k1 {
                    let aik = a_row[kk];
                    let b_row = &b[kk * n + j0..kk * n + j1];
                    for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                        *cv += aik * bv;
                    }
                }
            }
        }
    }
}

/// `aᵀ · b` without materialising the transpose of `a`.
pub fn matmul_tn<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    matmul(&a.transpose(), b)
}

/// `a · bᵀ`.
pub fn matmul_nt<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    matmul(a, &b.transpose())
}

/// Straight triple loop; the reference the blocked kernel is tested against.
pub fn matmul_naive<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = (a.rows(), a.cols());
    let n = b.cols();
    if b.rows() != k {
        return Err(shape_err!("matmul inner dimensions {k} vs {}", b.rows()));
    }
    let mut c = vec![T::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = T::zero();
            for kk in 0..k {
                s += a.at(i, kk) * b.at(kk, j);
            }
            c[i * n + j] = s;
        }
    }
    Tensor::matrix(m, n, c)
}

/// Dot product with eight independent accumulators so the loop vectorises.
/// The reduction tree is fixed, so the result is deterministic.
#[inline]
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let (ac, bc) = (&a[c * 8..c * 8 + 8], &b[c * 8..c * 8 + 8]);
        for l in 0..8 {
            acc[l] += ac[l] * bc[l];
        }
    }
    let mut tail = T::zero();
    for i in chunks * 8..a.len() {
        tail += a[i] * b[i];
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// `y += alpha · x`.
#[inline]
pub fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    debug_assert_eq!(x.len(), y.len());
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    fn random(rng: &mut Rng, r: usize, c: usize) -> Tensor<f64> {
        Tensor::from_fn(&[r, c], |_| rng.uniform(-1.0, 1.0))
    }

    #[test]
    fn identity_and_projector() {
        let b = Tensor::<f32>::from_rows(&[vec![1., 2.], vec![3., 4.]]).unwrap();
        assert_eq!(matmul(&Tensor::identity(2), &b).unwrap(), b);
        let p = Tensor::<f32>::from_rows(&[vec![1., 0.], vec![0., 0.]]).unwrap();
        let b = Tensor::<f32>::from_rows(&[vec![5., 6.], vec![7., 8.]]).unwrap();
        let expect = Tensor::from_rows(&[vec![5., 6.], vec![0., 0.]]).unwrap();
        assert_eq!(matmul(&p, &b).unwrap(), expect);
    }

    #[test]
    fn matches_naive_on_random_7x5x3() {
        let mut rng = Rng::new(7);
        let a = random(&mut rng, 7, 5);
        let b = random(&mut rng, 5, 3);
        let d = matmul(&a, &b)
            .unwrap()
            .max_abs_diff(&matmul_naive(&a, &b).unwrap())
            .unwrap();
        assert!(d < 1e-6, "{d}");
    }

    #[test]
    fn matches_naive_across_block_edges() {
        let mut rng = Rng::new(11);
        for &(m, k, n) in &[(130, 70, 65), (1, 200, 129), (65, 64, 1), (200, 100, 90)] {
            let a = random(&mut rng, m, k);
            let b = random(&mut rng, k, n);
            let d = matmul(&a, &b)
                .unwrap()
                .max_abs_diff(&matmul_naive(&a, &b).unwrap())
                .unwrap();
            assert!(d < 1e-10, "{m}x{k}x{n}: {d}");
        }
    }

    #[test]
    fn shape_mismatch_is_error() {
        let a = Tensor::<f32>::zeros(&[2, 3]);
        assert!(matmul(&a, &a).is_err());
    }

    #[test]
    fn bit_deterministic() {
        let mut rng = Rng::new(3);
        let a: Tensor<f32> = random(&mut rng, 300, 150).cast();
        let b: Tensor<f32> = random(&mut rng, 150, 100).cast();
        let c1 = matmul(&a, &b).unwrap();
        let c2 = matmul(&a, &b).unwrap();
        assert!(c1
            .data()
            .iter()
            .zip(c2.data())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn dot_handles_tails() {
        let a: Vec<f64> = (0..19).map(f64::from).collect();
        let b = vec![1.0; 19];
        assert_eq!(dot(&a, &b), 171.0);
    }
}
