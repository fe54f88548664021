//! Dense helpers shared by the ICA fit and the network kernels.

use nalgebra::{DMatrix, SymmetricEigen};

/// `c = alpha * a * b + beta * c` on row-major buffers with explicit strides.
///
/// `a` is `m x k` with strides `(rsa, csa)`, `b` is `k x n`, `c` is `m x n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_strided(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    beta: f64,
    c: &mut [f64],
    rsc: isize,
    csc: isize,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                let idx = (i as isize * rsc + j as isize * csc) as usize;
                c[idx] *= beta;
            }
        }
        return;
    }
    // SAFETY: callers pass buffers whose extents cover every strided index
    // touched by an m x k, k x n and m x n traversal; checked below in debug.
    debug_assert!(extent(m, k, rsa, csa) <= a.len());
    debug_assert!(extent(k, n, rsb, csb) <= b.len());
    debug_assert!(extent(m, n, rsc, csc) <= c.len());
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            rsc,
            csc,
        );
    }
}

fn extent(rows: usize, cols: usize, rs: isize, cs: isize) -> usize {
    ((rows as isize - 1) * rs + (cols as isize - 1) * cs) as usize + 1
}

/// Row-major `c = a * b` for contiguous `m x k` and `k x n` operands.
pub(crate) fn matmul(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    gemm_strided(m, k, n, 1.0, a, k as isize, 1, b, n as isize, 1, 0.0, &mut c, n as isize, 1);
    c
}

/// Row-major `a^T * a` for a contiguous `rows x cols` matrix.
pub(crate) fn gram(rows: usize, cols: usize, a: &[f64]) -> Vec<f64> {
    let mut c = vec![0.0; cols * cols];
    gemm_strided(
        cols, rows, cols, 1.0, a, 1, cols as isize, a, cols as isize, 1, 0.0, &mut c, cols as isize, 1,
    );
    // exact symmetry regardless of summation order
    for i in 0..cols {
        for j in 0..i {
            let v = 0.5 * (c[i * cols + j] + c[j * cols + i]);
            c[i * cols + j] = v;
            c[j * cols + i] = v;
        }
    }
    c
}

/// Eigen-decomposition of a symmetric `n x n` row-major matrix.
///
/// Eigenvalues come back in descending order; each eigenvector (a column of the
/// returned row-major `n x n` matrix) is sign-normalized so its largest-magnitude
/// entry is positive.
pub(crate) fn sym_eigen_desc(n: usize, a: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let m = DMatrix::from_row_slice(n, n, a);
    let eig = SymmetricEigen::new(m);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        eig.eigenvalues[j]
            .partial_cmp(&eig.eigenvalues[i])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(i.cmp(&j))
    });
    let mut values = Vec::with_capacity(n);
    let mut vectors = vec![0.0; n * n];
    for (col, &src) in order.iter().enumerate() {
        values.push(eig.eigenvalues[src]);
        let v = eig.eigenvectors.column(src);
        let mut pivot = 0.0f64;
        for &x in v.iter() {
            if x.abs() > pivot.abs() + 1e-12 {
                pivot = x;
            }
        }
        let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
        for row in 0..n {
            vectors[row * n + col] = sign * v[row];
        }
    }
    (values, vectors)
}

/// Inverse square root of a symmetric positive semi-definite matrix, clamping
/// tiny eigenvalues.
pub(crate) fn sym_inv_sqrt(n: usize, a: &[f64]) -> Vec<f64> {
    let (vals, vecs) = sym_eigen_desc(n, a);
    let mut out = vec![0.0; n * n];
    for (k, &lam) in vals.iter().enumerate() {
        let s = 1.0 / lam.max(1e-300).sqrt();
        for i in 0..n {
            let vik = vecs[i * n + k] * s;
            if vik == 0.0 {
                continue;
            }
            for j in 0..n {
                out[i * n + j] += vik * vecs[j * n + k];
            }
        }
    }
    out
}

/// Moore-Penrose pseudo-inverse via SVD; `None` when the matrix has a zero
/// singular value relative to its largest.
pub(crate) fn pinv(rows: usize, cols: usize, a: &[f64]) -> Option<Vec<f64>> {
    let m = DMatrix::from_row_slice(rows, cols, a);
    let svd = m.svd(true, true);
    let smax = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    let tol = smax * 1e-12 * rows.max(cols) as f64;
    if smax == 0.0 || svd.singular_values.iter().any(|&s| s <= tol) {
        return None;
    }
    let p = svd.pseudo_inverse(tol).ok()?;
    let mut out = vec![0.0; cols * rows];
    for i in 0..cols {
        for j in 0..rows {
            out[i * rows + j] = p[(i, j)];
        }
    }
    Some(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_matches_naive() {
        let a: Vec<f64> = (0..6).map(|v| v as f64 * 0.5 - 1.0).collect();
        let b: Vec<f64> = (0..12).map(|v| (v as f64).sin()).collect();
        let c = matmul(2, 3, 4, &a, &b);
        for i in 0..2 {
            for j in 0..4 {
                let want: f64 = (0..3).map(|k| a[i * 3 + k] * b[k * 4 + j]).sum();
                assert!((c[i * 4 + j] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn eigen_reconstructs_and_sorts() {
        let a = [4.0, 1.0, 0.0, 1.0, 3.0, 0.5, 0.0, 0.5, 1.0];
        let (vals, vecs) = sym_eigen_desc(3, &a);
        assert!(vals[0] >= vals[1] && vals[1] >= vals[2]);
        for i in 0..3 {
            for j in 0..3 {
                let r: f64 = (0..3).map(|k| vecs[i * 3 + k] * vals[k] * vecs[j * 3 + k]).sum();
                assert!((r - a[i * 3 + j]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn inv_sqrt_squares_to_inverse() {
        let a = [2.0, 0.3, 0.3, 1.0];
        let s = sym_inv_sqrt(2, &a);
        let s2 = matmul(2, 2, 2, &s, &s);
        let prod = matmul(2, 2, 2, &s2, &a);
        assert!((prod[0] - 1.0).abs() < 1e-10 && prod[1].abs() < 1e-10);
        assert!(prod[2].abs() < 1e-10 && (prod[3] - 1.0).abs() < 1e-10);
    }

    #[test]
    fn pinv_rejects_singular() {
        assert!(pinv(2, 2, &[1.0, 2.0, 2.0, 4.0]).is_none());
        let p = pinv(2, 2, &[2.0, 0.0, 0.0, 4.0]).unwrap();
        assert!((p[0] - 0.5).abs() < 1e-12 && (p[3] - 0.25).abs() < 1e-12);
    }
}
