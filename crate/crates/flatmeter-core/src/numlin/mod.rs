//! Dense linear algebra and matrix-free spectral estimators.
//!
//! Everything downstream leans on this module: weight matrices are
//! [`DenseMatrix`] values, restricted Hessians appear only through the
//! [`SymmetricOperator`] trait, and the spectral quantities that feed the
//! flatness measures come from [`lambda_max`] and [`trace_estimate`].
//! [`dense_sym_eig`] is the oracle-grade dense eigensolver used to
//! cross-check the matrix-free estimators at small sizes.

mod jacobi;
mod spectral;
mod trace;

pub use jacobi::dense_sym_eig;
pub use spectral::{lambda_max, LambdaMax};
pub use trace::{trace_estimate, TraceEstimate, TraceMode, DEFAULT_HUTCHINSON_PROBES};

use std::fmt;

/// Errors surfaced by the linear-algebra layer.
#[derive(Debug, Clone, PartialEq)]
pub enum NumlinError {
    /// A dense eigendecomposition was requested for a non-square matrix.
    NotSquare { rows: usize, cols: usize },
    /// A matrix argument contains NaN or infinite entries.
    NonFinite,
    /// A [`SymmetricOperator::apply`] produced NaN or infinite output.
    NonFiniteOperator,
    /// An iterative eigensolver hit its iteration cap before meeting the
    /// residual tolerance. The best estimate found so far is carried along
    /// so callers can still use it (flagged) instead of discarding work.
    DidNotConverge {
        estimate: f64,
        residual: f64,
        iterations: usize,
    },
}

impl fmt::Display for NumlinError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NumlinError::NotSquare { rows, cols } => {
                write!(f, "matrix is not square ({rows}x{cols})")
            }
            NumlinError::NonFinite => write!(f, "matrix contains non-finite entries"),
            NumlinError::NonFiniteOperator => {
                write!(f, "operator produced non-finite output")
            }
            NumlinError::DidNotConverge {
                estimate,
                residual,
                iterations,
            } => write!(
                f,
                "eigensolver did not converge after {iterations} iterations \
                 (best estimate {estimate:.6e}, residual {residual:.3e})"
            ),
        }
    }
}

impl std::error::Error for NumlinError {}

/// Row-major dense matrix of 64-bit floats.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    entries: Vec<f64>,
}

impl DenseMatrix {
    /// All-zero matrix of the given shape.
    pub fn zeros(rows: usize, cols: usize) -> Self {
        DenseMatrix {
            rows,
            cols,
            entries: vec![0.0; rows * cols],
        }
    }

    /// Builds a matrix from a row-major entry vector.
    ///
    /// Panics if `entries.len() != rows * cols`; shape mismatches here are
    /// programming errors, not runtime conditions.
    pub fn from_vec(rows: usize, cols: usize, entries: Vec<f64>) -> Self {
        assert_eq!(
            entries.len(),
            rows * cols,
            "entry count {} does not match shape {}x{}",
            entries.len(),
            rows,
            cols
        );
        DenseMatrix {
            rows,
            cols,
            entries,
        }
    }

    /// Convenience constructor from explicit rows (test fixtures mostly).
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let nrows = rows.len();
        let ncols = if nrows == 0 { 0 } else { rows[0].len() };
        let mut entries = Vec::with_capacity(nrows * ncols);
        for row in rows {
            assert_eq!(row.len(), ncols, "ragged rows");
            entries.extend_from_slice(row);
        }
        DenseMatrix::from_vec(nrows, ncols, entries)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.entries[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.entries[r * self.cols + c] = v;
    }

    /// Row `r` as a contiguous slice.
    pub fn row(&self, r: usize) -> &[f64] {
        &self.entries[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.entries[r * self.cols..(r + 1) * self.cols]
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [f64] {
        &mut self.entries
    }

    pub fn is_finite(&self) -> bool {
        self.entries.iter().all(|v| v.is_finite())
    }

    /// y = A x.
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.rows];
        self.matvec_into(x, &mut y);
        y
    }

    pub fn matvec_into(&self, x: &[f64], y: &mut [f64]) {
        assert_eq!(x.len(), self.cols);
        assert_eq!(y.len(), self.rows);
        for (r, out) in y.iter_mut().enumerate() {
            *out = dot(self.row(r), x);
        }
    }

    /// y += Aᵀ x, accumulating row-by-row so memory access stays sequential.
    pub fn matvec_t_add(&self, x: &[f64], y: &mut [f64]) {
        assert_eq!(x.len(), self.rows);
        assert_eq!(y.len(), self.cols);
        for (r, &xr) in x.iter().enumerate() {
            axpy(xr, self.row(r), y);
        }
    }

    pub fn matmul(&self, other: &DenseMatrix) -> DenseMatrix {
        assert_eq!(self.cols, other.rows, "inner dimensions must agree");
        let mut out = DenseMatrix::zeros(self.rows, other.cols);
        for r in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(r, k);
                if a != 0.0 {
                    let src = other.row(k);
                    let dst = out.row_mut(r);
                    axpy(a, src, dst);
                }
            }
        }
        out
    }

    pub fn transpose(&self) -> DenseMatrix {
        let mut out = DenseMatrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.set(c, r, self.get(r, c));
            }
        }
        out
    }

    /// Frobenius norm ‖A‖_F.
    pub fn frobenius_norm(&self) -> f64 {
        self.frobenius_norm_sq().sqrt()
    }

    /// Squared Frobenius norm Σ aᵢⱼ².
    pub fn frobenius_norm_sq(&self) -> f64 {
        dot(&self.entries, &self.entries)
    }

    pub fn scale(&mut self, c: f64) {
        for v in &mut self.entries {
            *v *= c;
        }
    }
}

/// Implicit symmetric linear map, the only way restricted Hessians are seen.
///
/// Implementations capture read-only state and must be safe to call from
/// multiple workers concurrently.
pub trait SymmetricOperator: Sync {
    fn dim(&self) -> usize;

    /// H·v. Must be linear in `v` and symmetric as a bilinear form.
    fn apply(&self, v: &[f64]) -> Vec<f64>;

    /// Diagonal entry eᵢᵀ H eᵢ. The default realizes it with one basis
    /// apply; implementations with cheaper structure may override, and the
    /// override must agree with the default to rounding error.
    fn diag_entry(&self, i: usize) -> f64 {
        let mut e = vec![0.0; self.dim()];
        e[i] = 1.0;
        self.apply(&e)[i]
    }
}

/// A dense symmetric matrix viewed as an operator.
#[derive(Debug, Clone)]
pub struct MatrixOperator {
    m: DenseMatrix,
}

impl MatrixOperator {
    /// Wraps a square matrix. The matrix is taken as-is; callers are
    /// responsible for symmetry (tests symmetrize explicitly).
    pub fn new(m: DenseMatrix) -> Self {
        assert_eq!(m.rows(), m.cols(), "operator matrix must be square");
        MatrixOperator { m }
    }

    pub fn matrix(&self) -> &DenseMatrix {
        &self.m
    }
}

impl SymmetricOperator for MatrixOperator {
    fn dim(&self) -> usize {
        self.m.rows()
    }

    fn apply(&self, v: &[f64]) -> Vec<f64> {
        self.m.matvec(v)
    }

    fn diag_entry(&self, i: usize) -> f64 {
        self.m.get(i, i)
    }
}

/// Which iterative eigensolver [`lambda_max`] runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpectralMethod {
    /// Power iteration on a spectrally shifted operator.
    Power,
    /// Lanczos with full reorthogonalization.
    Lanczos,
}

/// Configuration for the iterative spectral estimators.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpectralConfig {
    pub max_iterations: usize,
    /// Relative residual threshold: converged when
    /// ‖H v − λ v‖ / ‖v‖ ≤ tolerance · max(|λ|, 1).
    pub tolerance: f64,
    pub seed: u64,
    pub method: SpectralMethod,
}

/// Krylov dimensions above this use shifted power iteration instead of
/// Lanczos with full reorthogonalization (basis storage gets heavy).
pub const LANCZOS_DIM_LIMIT: usize = 5000;

impl SpectralConfig {
    /// Default configuration with the method picked by problem size.
    pub fn auto(dim: usize, seed: u64) -> Self {
        let method = if dim <= LANCZOS_DIM_LIMIT {
            SpectralMethod::Lanczos
        } else {
            SpectralMethod::Power
        };
        SpectralConfig {
            max_iterations: 1000,
            tolerance: 1e-9,
            seed,
            method,
        }
    }
}

/// Dot product with four independent accumulators. The association order is
/// fixed, so results are bit-reproducible run to run.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let n = a.len();
    let split = n - n % 4;
    let (mut s0, mut s1, mut s2, mut s3) = (0.0, 0.0, 0.0, 0.0);
    let mut i = 0;
    while i < split {
        s0 += a[i] * b[i];
        s1 += a[i + 1] * b[i + 1];
        s2 += a[i + 2] * b[i + 2];
        s3 += a[i + 3] * b[i + 3];
        i += 4;
    }
    let mut tail = 0.0;
    for k in split..n {
        tail += a[k] * b[k];
    }
    ((s0 + s1) + (s2 + s3)) + tail
}

/// Euclidean norm.
pub fn norm2(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// y += α x.
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Pairwise-tree sum in index order: deterministic and more accurate than a
/// running sum on long inputs. This is the reduction every module uses when
/// collapsing per-sample or per-probe terms.
pub fn pairwise_sum(v: &[f64]) -> f64 {
    const BASE: usize = 16;
    if v.len() <= BASE {
        let mut s = 0.0;
        for x in v {
            s += x;
        }
        return s;
    }
    let mid = v.len() / 2;
    pairwise_sum(&v[..mid]) + pairwise_sum(&v[mid..])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matvec_matches_hand_computation() {
        let m = DenseMatrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        assert_eq!(m.matvec(&[1.0, 1.0]), vec![3.0, 7.0]);
    }

    #[test]
    fn matvec_t_add_matches_transpose() {
        let m = DenseMatrix::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]);
        let mut y = vec![0.0; 3];
        m.matvec_t_add(&[1.0, 2.0], &mut y);
        assert_eq!(y, m.transpose().matvec(&[1.0, 2.0]));
    }

    #[test]
    fn matmul_identity() {
        let m = DenseMatrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        let id = DenseMatrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert_eq!(m.matmul(&id), m);
        assert_eq!(id.matmul(&m), m);
    }

    #[test]
    fn frobenius_norm_of_3_4_vector() {
        let m = DenseMatrix::from_rows(&[vec![3.0, 4.0]]);
        assert!((m.frobenius_norm() - 5.0).abs() < 1e-15);
        assert!((m.frobenius_norm_sq() - 25.0).abs() < 1e-12);
    }

    #[test]
    fn pairwise_sum_matches_exact_on_integers() {
        let v: Vec<f64> = (1..=1000).map(|i| i as f64).collect();
        assert_eq!(pairwise_sum(&v), 500500.0);
    }

    #[test]
    fn dot_handles_odd_lengths() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0];
        let b = [5.0, 4.0, 3.0, 2.0, 1.0];
        assert_eq!(dot(&a, &b), 35.0);
    }

    #[test]
    fn matrix_operator_diag_override_matches_default() {
        let m = DenseMatrix::from_rows(&[
            vec![2.0, 1.0, 0.5],
            vec![1.0, -3.0, 0.25],
            vec![0.5, 0.25, 7.0],
        ]);
        let op = MatrixOperator::new(m);
        for i in 0..3 {
            let mut e = vec![0.0; 3];
            e[i] = 1.0;
            assert_eq!(op.diag_entry(i), op.apply(&e)[i]);
        }
    }

    #[test]
    fn spectral_config_auto_picks_method_by_dim() {
        assert_eq!(
            SpectralConfig::auto(100, 0).method,
            SpectralMethod::Lanczos
        );
        assert_eq!(
            SpectralConfig::auto(LANCZOS_DIM_LIMIT + 1, 0).method,
            SpectralMethod::Power
        );
    }
}
