//! Dense symmetric eigensolver: cyclic Jacobi rotations.
//!
//! Oracle-grade accuracy at oracle sizes; no attempt at performance. The
//! matrix-free estimators in [`super::spectral`] are validated against this.

use super::{DenseMatrix, NumlinError};

/// Full real spectrum of a symmetric matrix, ascending.
///
/// The input is symmetrized internally as (A + Aᵀ)/2, so mild asymmetry
/// (finite-difference noise) is tolerated. Sweeps run until the off-diagonal
/// Frobenius norm falls below 1e-12·‖A‖_F.
pub fn dense_sym_eig(m: &DenseMatrix) -> Result<Vec<f64>, NumlinError> {
    Ok(jacobi_eig(m, false)?.0)
}

/// Spectrum plus matching eigenvectors (columns of the returned matrix).
/// Used internally by the Lanczos solver for Ritz pairs of the tridiagonal.
pub(crate) fn sym_eig_full(m: &DenseMatrix) -> Result<(Vec<f64>, DenseMatrix), NumlinError> {
    let (eigs, vectors) = jacobi_eig(m, true)?;
    Ok((eigs, vectors.expect("vectors requested")))
}

fn jacobi_eig(
    m: &DenseMatrix,
    want_vectors: bool,
) -> Result<(Vec<f64>, Option<DenseMatrix>), NumlinError> {
    if m.rows() != m.cols() {
        return Err(NumlinError::NotSquare {
            rows: m.rows(),
            cols: m.cols(),
        });
    }
    if !m.is_finite() {
        return Err(NumlinError::NonFinite);
    }
    let n = m.rows();
    if n == 0 {
        return Ok((Vec::new(), want_vectors.then(|| DenseMatrix::zeros(0, 0))));
    }

    let mut a = DenseMatrix::zeros(n, n);
    for r in 0..n {
        for c in 0..n {
            a.set(r, c, 0.5 * (m.get(r, c) + m.get(c, r)));
        }
    }
    let mut v = want_vectors.then(|| identity(n));

    let threshold = 1e-12 * m.frobenius_norm();
    // Quadratic convergence: a few dozen sweeps is already generous.
    const MAX_SWEEPS: usize = 100;

    for _ in 0..MAX_SWEEPS {
        if off_diagonal_norm(&a) <= threshold {
            break;
        }
        for p in 0..n - 1 {
            for q in p + 1..n {
                rotate(&mut a, v.as_mut(), p, q);
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        a.get(i, i)
            .partial_cmp(&a.get(j, j))
            .expect("eigenvalues are finite")
    });
    let eigs: Vec<f64> = order.iter().map(|&i| a.get(i, i)).collect();
    let vectors = v.map(|v| {
        let mut sorted = DenseMatrix::zeros(n, n);
        for (new_col, &old_col) in order.iter().enumerate() {
            for r in 0..n {
                sorted.set(r, new_col, v.get(r, old_col));
            }
        }
        sorted
    });
    Ok((eigs, vectors))
}

fn identity(n: usize) -> DenseMatrix {
    let mut m = DenseMatrix::zeros(n, n);
    for i in 0..n {
        m.set(i, i, 1.0);
    }
    m
}

fn off_diagonal_norm(a: &DenseMatrix) -> f64 {
    let n = a.rows();
    let mut s = 0.0;
    for r in 0..n {
        for c in 0..n {
            if r != c {
                let v = a.get(r, c);
                s += v * v;
            }
        }
    }
    s.sqrt()
}

/// One Jacobi rotation annihilating a[p][q] (Golub & Van Loan 8.5),
/// accumulated into the eigenvector matrix when one is carried.
fn rotate(a: &mut DenseMatrix, v: Option<&mut DenseMatrix>, p: usize, q: usize) {
    let apq = a.get(p, q);
    if apq == 0.0 {
        return;
    }
    let app = a.get(p, p);
    let aqq = a.get(q, q);
    let tau = (aqq - app) / (2.0 * apq);
    let t = if tau >= 0.0 {
        1.0 / (tau + (1.0 + tau * tau).sqrt())
    } else {
        -1.0 / (-tau + (1.0 + tau * tau).sqrt())
    };
    let c = 1.0 / (1.0 + t * t).sqrt();
    let s = t * c;

    let n = a.rows();
    for k in 0..n {
        let akp = a.get(k, p);
        let akq = a.get(k, q);
        a.set(k, p, c * akp - s * akq);
        a.set(k, q, s * akp + c * akq);
    }
    for k in 0..n {
        let apk = a.get(p, k);
        let aqk = a.get(q, k);
        a.set(p, k, c * apk - s * aqk);
        a.set(q, k, s * apk + c * aqk);
    }
    if let Some(v) = v {
        for k in 0..n {
            let vkp = v.get(k, p);
            let vkq = v.get(k, q);
            v.set(k, p, c * vkp - s * vkq);
            v.set(k, q, s * vkp + c * vkq);
        }
    }
}
