//! Dense symmetric linear algebra, wrapped behind ndarray-facing helpers.
//! Decompositions are delegated to nalgebra; everything here is f64.

use crate::error::{Error, Result};
use nalgebra::{DMatrix, DVector};
use ndarray::{Array1, Array2, ArrayView2};

pub fn to_nalgebra(a: &ArrayView2<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), a.ncols(), |r, c| a[[r, c]])
}

pub fn to_ndarray(a: &DMatrix<f64>) -> Array2<f64> {
    Array2::from_shape_fn((a.nrows(), a.ncols()), |(r, c)| a[(r, c)])
}

/// Eigendecomposition of a symmetric matrix, eigenvalues sorted descending.
/// Returns `(eigenvalues, eigenvectors)` with eigenvectors in columns.
pub fn sym_eigen_desc(a: &ArrayView2<f64>) -> Result<(Array1<f64>, Array2<f64>)> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::Shape(format!(
            "eigendecomposition needs a square matrix, got {}x{}",
            n,
            a.ncols()
        )));
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("symmetric eigendecomposition input".into()));
    }
    let m = to_nalgebra(a);
    let eig = m.symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        eig.eigenvalues[j]
            .partial_cmp(&eig.eigenvalues[i])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let vals = Array1::from_iter(order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vecs = Array2::zeros((n, n));
    for (c, &i) in order.iter().enumerate() {
        for r in 0..n {
            vecs[[r, c]] = eig.eigenvectors[(r, i)];
        }
    }
    Ok((vals, vecs))
}

/// Square root of a symmetric PSD matrix; eigenvalues are floored at zero to
/// absorb round-off.
pub fn sqrt_psd(a: &ArrayView2<f64>) -> Result<Array2<f64>> {
    let (vals, vecs) = sym_eigen_desc(a)?;
    let n = a.nrows();
    let mut out = Array2::zeros((n, n));
    for c in 0..n {
        let s = vals[c].max(0.0).sqrt();
        if s == 0.0 {
            continue;
        }
        for r in 0..n {
            for r2 in 0..n {
                out[[r, r2]] += s * vecs[[r, c]] * vecs[[r2, c]];
            }
        }
    }
    Ok(out)
}

/// Solves `(a + ridge*I) x = b` for symmetric positive definite `a + ridge*I`
/// via Cholesky. `b` may have many columns.
pub fn solve_spd(a: &ArrayView2<f64>, ridge: f64, b: &ArrayView2<f64>) -> Result<Array2<f64>> {
    let n = a.nrows();
    if a.ncols() != n || b.nrows() != n {
        return Err(Error::Shape(format!(
            "solve needs {n}x{n} lhs and {n}-row rhs, got {}x{} and {}-row",
            a.nrows(),
            a.ncols(),
            b.nrows()
        )));
    }
    let mut m = to_nalgebra(a);
    for i in 0..n {
        m[(i, i)] += ridge;
    }
    let chol = m
        .cholesky()
        .ok_or_else(|| Error::Rank("matrix is not positive definite".into()))?;
    let rhs = to_nalgebra(b);
    let x = chol.solve(&rhs);
    Ok(to_ndarray(&x))
}

/// Determinant of a small square matrix (used to cross-check log-dets).
pub fn det(a: &ArrayView2<f64>) -> f64 {
    to_nalgebra(a).determinant()
}

/// Solves the ridge system `(x'x + ridge*I) w = x'y` column-wise.
pub fn ridge_solve(xtx: &ArrayView2<f64>, ridge: f64, xty: &ArrayView2<f64>) -> Result<Array2<f64>> {
    solve_spd(xtx, ridge, xty)
}

#[allow(dead_code)]
pub fn to_nalgebra_vec(v: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn eigen_recovers_diagonal() {
        let a = array![[3.0, 0.0], [0.0, 1.0]];
        let (vals, vecs) = sym_eigen_desc(&a.view()).unwrap();
        assert!((vals[0] - 3.0).abs() < 1e-12);
        assert!((vals[1] - 1.0).abs() < 1e-12);
        // Columns are unit vectors along the axes (up to sign).
        assert!((vecs.column(0)[0].abs() - 1.0).abs() < 1e-12);
        assert!((vecs.column(1)[1].abs() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn eigen_reconstructs_matrix() {
        let a = array![
            [4.0, 1.0, 0.5],
            [1.0, 3.0, -0.2],
            [0.5, -0.2, 1.0]
        ];
        let (vals, vecs) = sym_eigen_desc(&a.view()).unwrap();
        let mut rec = Array2::<f64>::zeros((3, 3));
        for c in 0..3 {
            for r in 0..3 {
                for r2 in 0..3 {
                    rec[[r, r2]] += vals[c] * vecs[[r, c]] * vecs[[r2, c]];
                }
            }
        }
        for (x, y) in rec.iter().zip(a.iter()) {
            assert!((x - y).abs() < 1e-10);
        }
        assert!(vals[0] >= vals[1] && vals[1] >= vals[2]);
    }

    #[test]
    fn sqrt_squares_back() {
        let a = array![[2.0, 0.3], [0.3, 1.0]];
        let s = sqrt_psd(&a.view()).unwrap();
        let back = s.dot(&s);
        for (x, y) in back.iter().zip(a.iter()) {
            assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn spd_solve_matches_direct() {
        let a = array![[4.0, 1.0], [1.0, 3.0]];
        let b = array![[1.0], [2.0]];
        let x = solve_spd(&a.view(), 0.0, &b.view()).unwrap();
        let r = a.dot(&x);
        assert!((r[[0, 0]] - 1.0).abs() < 1e-12);
        assert!((r[[1, 0]] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn indefinite_matrix_rejected_by_cholesky() {
        let a = array![[1.0, 0.0], [0.0, -5.0]];
        let b = array![[1.0], [1.0]];
        assert!(matches!(
            solve_spd(&a.view(), 0.0, &b.view()),
            Err(Error::Rank(_))
        ));
    }
}
