//! Trace estimation for matrix-free symmetric operators.

use super::{dot, pairwise_sum, NumlinError, SymmetricOperator};
use crate::rng::Stream;

/// Default probe count for the Hutchinson estimator.
pub const DEFAULT_HUTCHINSON_PROBES: usize = 64;

/// How [`trace_estimate`] evaluates the trace.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceMode {
    /// Exact: Σᵢ eᵢᵀ H eᵢ over the full basis.
    ExactBasis,
    /// Unbiased stochastic estimate from Rademacher probes.
    Hutchinson { probes: usize },
}

/// A trace value with its sampling uncertainty (zero for exact modes).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceEstimate {
    pub trace: f64,
    pub stderr: f64,
    pub mode: TraceMode,
}

/// Trace of a symmetric operator.
///
/// Exact-basis sums the operator diagonal in index order with a pairwise
/// reduction. Hutchinson averages zᵀHz over Rademacher probes, each probe
/// drawn from its own counter-derived stream so the result is independent
/// of evaluation order.
pub fn trace_estimate<O: SymmetricOperator + ?Sized>(
    op: &O,
    mode: TraceMode,
    seed: u64,
) -> Result<TraceEstimate, NumlinError> {
    assert!(op.dim() >= 1, "operator dimension must be at least 1");
    match mode {
        TraceMode::ExactBasis => {
            let diag: Vec<f64> = (0..op.dim()).map(|i| op.diag_entry(i)).collect();
            if diag.iter().any(|v| !v.is_finite()) {
                return Err(NumlinError::NonFiniteOperator);
            }
            Ok(TraceEstimate {
                trace: pairwise_sum(&diag),
                stderr: 0.0,
                mode,
            })
        }
        TraceMode::Hutchinson { probes } => {
            assert!(probes >= 1, "need at least one probe");
            let n = op.dim();
            let samples: Vec<f64> = (0..probes)
                .map(|p| {
                    let mut stream = Stream::new(seed, p as u64);
                    let z: Vec<f64> = (0..n).map(|_| stream.next_sign()).collect();
                    dot(&z, &op.apply(&z))
                })
                .collect();
            if samples.iter().any(|v| !v.is_finite()) {
                return Err(NumlinError::NonFiniteOperator);
            }
            let mean = pairwise_sum(&samples) / probes as f64;
            let stderr = if probes > 1 {
                let sq_dev: Vec<f64> = samples.iter().map(|s| (s - mean) * (s - mean)).collect();
                (pairwise_sum(&sq_dev) / (probes as f64 - 1.0)).sqrt() / (probes as f64).sqrt()
            } else {
                0.0
            };
            Ok(TraceEstimate {
                trace: mean,
                stderr,
                mode,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::super::{DenseMatrix, MatrixOperator};
    use super::*;

    fn diag_op(values: &[f64]) -> MatrixOperator {
        let n = values.len();
        let mut m = DenseMatrix::zeros(n, n);
        for (i, &v) in values.iter().enumerate() {
            m.set(i, i, v);
        }
        MatrixOperator::new(m)
    }

    #[test]
    fn exact_basis_sums_diagonal_exactly() {
        let r = trace_estimate(&diag_op(&[1.0, 2.0, 3.0]), TraceMode::ExactBasis, 0).unwrap();
        assert_eq!(r.trace, 6.0);
        assert_eq!(r.stderr, 0.0);
    }

    #[test]
    fn hutchinson_is_unbiased_within_sampling_error() {
        // Diagonal operators are estimated exactly by sign probes (zᵢ² = 1),
        // so the diag(1,2,3) reference lands on 6 with zero spread.
        let r = trace_estimate(
            &diag_op(&[1.0, 2.0, 3.0]),
            TraceMode::Hutchinson { probes: 2000 },
            42,
        )
        .unwrap();
        assert!((r.trace - 6.0).abs() <= 3.0 * r.stderr + 1e-12);

        // Off-diagonal structure produces genuine sampling noise; the
        // estimate must still cover the exact trace at 3 standard errors.
        let m = DenseMatrix::from_rows(&[
            vec![1.0, 0.7, -0.3],
            vec![0.7, 2.0, 0.4],
            vec![-0.3, 0.4, 3.0],
        ]);
        let r = trace_estimate(
            &MatrixOperator::new(m),
            TraceMode::Hutchinson { probes: 2000 },
            42,
        )
        .unwrap();
        assert!(r.stderr > 0.0);
        assert!(
            (r.trace - 6.0).abs() <= 3.0 * r.stderr,
            "estimate {} ± {} vs exact 6",
            r.trace,
            r.stderr
        );
    }

    #[test]
    fn zero_operator_in_both_modes() {
        let op = diag_op(&[0.0, 0.0, 0.0, 0.0]);
        let exact = trace_estimate(&op, TraceMode::ExactBasis, 0).unwrap();
        assert_eq!((exact.trace, exact.stderr), (0.0, 0.0));
        let hutch = trace_estimate(&op, TraceMode::Hutchinson { probes: 8 }, 0).unwrap();
        assert_eq!((hutch.trace, hutch.stderr), (0.0, 0.0));
    }

    #[test]
    fn hutchinson_is_exact_for_diagonal_free_probe_identity() {
        // For any diagonal matrix, zᵀDz = Σ dᵢ zᵢ² = Σ dᵢ for sign probes,
        // so even one probe is exact.
        let r = trace_estimate(
            &diag_op(&[4.0, -1.5, 2.5]),
            TraceMode::Hutchinson { probes: 1 },
            3,
        )
        .unwrap();
        assert!((r.trace - 5.0).abs() < 1e-12);
        assert_eq!(r.stderr, 0.0);
    }

    #[test]
    fn hutchinson_is_deterministic_per_seed() {
        let m = {
            let mut m = DenseMatrix::zeros(5, 5);
            for r in 0..5 {
                for c in 0..5 {
                    m.set(r, c, ((r * 5 + c) as f64).sin());
                }
            }
            let t = m.transpose();
            let mut s = DenseMatrix::zeros(5, 5);
            for r in 0..5 {
                for c in 0..5 {
                    s.set(r, c, 0.5 * (m.get(r, c) + t.get(r, c)));
                }
            }
            s
        };
        let op = MatrixOperator::new(m);
        let a = trace_estimate(&op, TraceMode::Hutchinson { probes: 16 }, 9).unwrap();
        let b = trace_estimate(&op, TraceMode::Hutchinson { probes: 16 }, 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn exact_basis_matches_eigensum() {
        use super::super::dense_sym_eig;
        let mut m = DenseMatrix::zeros(6, 6);
        let mut s = crate::rng::Stream::new(31, 0);
        for r in 0..6 {
            for c in r..6 {
                let v = s.next_standard_normal();
                m.set(r, c, v);
                m.set(c, r, v);
            }
        }
        let eig_sum: f64 = dense_sym_eig(&m).unwrap().iter().sum();
        let r = trace_estimate(&MatrixOperator::new(m), TraceMode::ExactBasis, 0).unwrap();
        assert!((r.trace - eig_sum).abs() <= 1e-8 * eig_sum.abs().max(1.0));
    }
}
