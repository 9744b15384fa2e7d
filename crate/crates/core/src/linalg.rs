// SPDX-License-Identifier: Apache-2.0

//! Small dense helpers on top of nalgebra used by the model and the fast flow.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

/// Eigen-decomposition of the symmetric part of `m`, eigenvalues sorted ascending.
pub fn sorted_symmetric_eigen(m: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let sym = symmetrize(m);
    let eig = SymmetricEigen::new(sym);
    let n = eig.eigenvalues.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let values = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vectors = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        vectors.set_column(dst, &eig.eigenvectors.column(src));
    }
    (values, vectors)
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Largest singular value.
pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.clone()
        .singular_values()
        .iter()
        .fold(0.0_f64, |acc, &s| acc.max(s))
}

/// Applies `f` to the eigenvalues of a symmetric matrix.
pub fn symmetric_function(m: &DMatrix<f64>, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
    let (values, vectors) = sorted_symmetric_eigen(m);
    let mapped = DMatrix::from_diagonal(&values.map(f));
    &vectors * mapped * vectors.transpose()
}

pub fn is_diagonal(m: &DMatrix<f64>) -> bool {
    m.iter()
        .enumerate()
        .all(|(k, &v)| k % m.nrows() == k / m.nrows() || v == 0.0)
}

/// Frobenius norm of the off-diagonal part.
pub fn off_diagonal_norm(m: &DMatrix<f64>) -> f64 {
    let mut acc = 0.0;
    for j in 0..m.ncols() {
        for i in 0..m.nrows() {
            if i != j {
                acc += m[(i, j)] * m[(i, j)];
            }
        }
    }
    acc.sqrt()
}

/// Factor `G` with `G Gᵀ = m` for a symmetric positive semi-definite `m`.
/// Negative eigenvalues (roundoff) are clamped to zero.
pub fn psd_factor(m: &DMatrix<f64>) -> DMatrix<f64> {
    let (values, vectors) = sorted_symmetric_eigen(m);
    let roots = values.map(|v| v.max(0.0).sqrt());
    let mut g = vectors;
    for (j, r) in roots.iter().enumerate() {
        g.column_mut(j).scale_mut(*r);
    }
    g
}

/// `[[a, b], [c, d]]` from four equally sized square blocks.
pub fn block2(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    c: &DMatrix<f64>,
    d: &DMatrix<f64>,
) -> DMatrix<f64> {
    let n = a.nrows();
    let mut out = DMatrix::zeros(2 * n, 2 * n);
    out.view_mut((0, 0), (n, n)).copy_from(a);
    out.view_mut((0, n), (n, n)).copy_from(b);
    out.view_mut((n, 0), (n, n)).copy_from(c);
    out.view_mut((n, n), (n, n)).copy_from(d);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psd_factor_reproduces_matrix() {
        let m = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 0.5, 1.0, 3.0, 0.2, 0.5, 0.2, 2.0]);
        let g = psd_factor(&m);
        assert!((&g * g.transpose() - &m).norm() < 1e-12);
    }

    #[test]
    fn psd_factor_clamps_roundoff_negatives() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0 - 1e-17]);
        let g = psd_factor(&m);
        assert!(g.iter().all(|v| v.is_finite()));
        assert!((&g * g.transpose() - &m).norm() < 1e-12);
    }

    #[test]
    fn eigen_sorted_ascending() {
        let m = DMatrix::from_diagonal(&DVector::from_vec(vec![3.0, 1.0, 2.0]));
        let (v, _) = sorted_symmetric_eigen(&m);
        assert_eq!(v.as_slice(), &[1.0, 2.0, 3.0]);
    }
}
