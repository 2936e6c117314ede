//! Dense kernels: a strided GEMM and a symmetric eigensolver.

use crate::parallel;

/// Row/column strides of a matrix stored in a flat slice.
#[derive(Debug, Clone, Copy)]
pub struct Layout {
    pub row_stride: usize,
    pub col_stride: usize,
}

impl Layout {
    /// Row-major `rows x cols`.
    pub const fn row_major(cols: usize) -> Self {
        Layout {
            row_stride: cols,
            col_stride: 1,
        }
    }

    /// The transpose of a row-major matrix with `cols` columns.
    pub const fn transposed(cols: usize) -> Self {
        Layout {
            row_stride: 1,
            col_stride: cols,
        }
    }
}

/// `c = a * b + beta * c` where `a` is `m x k`, `b` is `k x n` and `c` is a
/// row-major `m x n` buffer.
///
/// Rows of `c` are split across [`parallel::threads`] workers. Each output
/// element is reduced over `k` in the same order regardless of the split, so
/// the result does not depend on the thread count.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    la: Layout,
    b: &[f64],
    lb: Layout,
    beta: f64,
    c: &mut [f64],
) {
    assert!(c.len() >= m * n, "gemm output buffer too small");
    if m == 0 || n == 0 {
        return;
    }
    if k > 0 {
        let last_a = (m - 1) * la.row_stride + (k - 1) * la.col_stride;
        let last_b = (k - 1) * lb.row_stride + (n - 1) * lb.col_stride;
        assert!(last_a < a.len(), "gemm lhs buffer too small");
        assert!(last_b < b.len(), "gemm rhs buffer too small");
    }

    let workers = parallel::threads();
    // Below this many multiply-adds the spawn cost dominates.
    if workers <= 1 || m < 2 || m * n * k < 1 << 18 {
        gemm_block(0..m, k, n, a, la, b, lb, beta, &mut c[..m * n]);
        return;
    }
    let ranges = parallel::split_ranges(m, workers);
    std::thread::scope(|s| {
        let mut rest = &mut c[..m * n];
        for r in ranges {
            let (head, tail) = rest.split_at_mut(r.len() * n);
            rest = tail;
            s.spawn(move || gemm_block(r, k, n, a, la, b, lb, beta, head));
        }
    });
}

#[allow(clippy::too_many_arguments)]
fn gemm_block(
    rows: std::ops::Range<usize>,
    k: usize,
    n: usize,
    a: &[f64],
    la: Layout,
    b: &[f64],
    lb: Layout,
    beta: f64,
    c: &mut [f64],
) {
    let m = rows.len();
    if m == 0 {
        return;
    }
    if k == 0 {
        for v in c.iter_mut() {
            *v *= beta;
        }
        return;
    }
    let a_off = rows.start * la.row_stride;
    // SAFETY: the bounds of every element addressed through the strides were
    // checked in `gemm`; `c` holds exactly `m * n` row-major elements.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr().add(a_off),
            la.row_stride as isize,
            la.col_stride as isize,
            b.as_ptr(),
            lb.row_stride as isize,
            lb.col_stride as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Eigen-decomposition of a symmetric `n x n` row-major matrix by cyclic
/// Jacobi rotations.
///
/// Returns `(eigenvalues, eigenvectors)` with eigenvectors stored as the
/// columns of a row-major `n x n` matrix, sorted by descending eigenvalue.
/// Iterates until the off-diagonal Frobenius norm drops below `tol` (or a
/// sweep limit is reached).
pub fn symmetric_eigen(matrix: &[f64], n: usize, tol: f64) -> (Vec<f64>, Vec<f64>) {
    assert_eq!(matrix.len(), n * n);
    let mut a = matrix.to_vec();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }

    const MAX_SWEEPS: usize = 100;
    for _ in 0..MAX_SWEEPS {
        if off_diagonal_norm(&a, n) < tol {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let app = a[p * n + p];
                let aqq = a[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;

                for r in 0..n {
                    let arp = a[r * n + p];
                    let arq = a[r * n + q];
                    a[r * n + p] = c * arp - s * arq;
                    a[r * n + q] = s * arp + c * arq;
                }
                for r in 0..n {
                    let apr = a[p * n + r];
                    let aqr = a[q * n + r];
                    a[p * n + r] = c * apr - s * aqr;
                    a[q * n + r] = s * apr + c * aqr;
                }
                a[p * n + q] = 0.0;
                a[q * n + p] = 0.0;
                for r in 0..n {
                    let vrp = v[r * n + p];
                    let vrq = v[r * n + q];
                    v[r * n + p] = c * vrp - s * vrq;
                    v[r * n + q] = s * vrp + c * vrq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[j * n + j].total_cmp(&a[i * n + i]));
    let values = order.iter().map(|&i| a[i * n + i]).collect();
    let mut vectors = vec![0.0; n * n];
    for (dst, &src) in order.iter().enumerate() {
        for r in 0..n {
            vectors[r * n + dst] = v[r * n + src];
        }
    }
    (values, vectors)
}

fn off_diagonal_norm(a: &[f64], n: usize) -> f64 {
    let mut sum = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                sum += a[i * n + j] * a[i * n + j];
            }
        }
    }
    sum.sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn naive(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
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
    fn gemm_matches_triple_loop_including_transposed_operands() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (m, k, n) = (13, 9, 11);
        let a: Vec<f64> = (0..m * k).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..k * n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let expect = naive(m, k, n, &a, &b);

        let mut c = vec![0.0; m * n];
        gemm(m, k, n, &a, Layout::row_major(k), &b, Layout::row_major(n), 0.0, &mut c);
        for (x, y) in c.iter().zip(&expect) {
            assert!((x - y).abs() < 1e-12);
        }

        // Same product with b supplied as its transpose.
        let mut bt = vec![0.0; n * k];
        for p in 0..k {
            for j in 0..n {
                bt[j * k + p] = b[p * n + j];
            }
        }
        let mut c2 = vec![0.0; m * n];
        gemm(m, k, n, &a, Layout::row_major(k), &bt, Layout::transposed(k), 0.0, &mut c2);
        for (x, y) in c2.iter().zip(&expect) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn gemm_is_bitwise_independent_of_thread_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (m, k, n) = (301, 77, 65);
        let a: Vec<f64> = (0..m * k).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..k * n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut c1 = vec![0.0; m * n];
        gemm_block(0..m, k, n, &a, Layout::row_major(k), &b, Layout::row_major(n), 0.0, &mut c1);
        for parts in [2, 3, 7] {
            let mut c2 = vec![0.0; m * n];
            let mut rest = &mut c2[..];
            for r in parallel::split_ranges(m, parts) {
                let (head, tail) = rest.split_at_mut(r.len() * n);
                rest = tail;
                gemm_block(r, k, n, &a, Layout::row_major(k), &b, Layout::row_major(n), 0.0, head);
            }
            assert!(c1.iter().zip(&c2).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn gemm_beta_accumulates() {
        let a = [1.0, 2.0];
        let b = [3.0, 4.0];
        let mut c = [10.0];
        gemm(1, 2, 1, &a, Layout::row_major(2), &b, Layout::row_major(1), 1.0, &mut c);
        assert_eq!(c[0], 21.0);
    }

    #[test]
    fn jacobi_reconstructs_symmetric_matrix() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 6;
        let mut m = vec![0.0; n * n];
        for i in 0..n {
            for j in i..n {
                let x = rng.random_range(-1.0..1.0);
                m[i * n + j] = x;
                m[j * n + i] = x;
            }
        }
        let (vals, vecs) = symmetric_eigen(&m, n, 1e-12);
        assert!(vals.windows(2).all(|w| w[0] >= w[1]));
        for i in 0..n {
            for j in 0..n {
                let mut r = 0.0;
                for p in 0..n {
                    r += vecs[i * n + p] * vals[p] * vecs[j * n + p];
                }
                assert!((r - m[i * n + j]).abs() < 1e-9);
            }
        }
    }
}
