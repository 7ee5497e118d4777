//! Brute-force verification: finite-difference Hessians and algebraic
//! property checks that the fast paths are tested against.
//!
//! The Hessian oracle takes central differences of the *analytic gradient*
//! (one order less noise than double-differencing the loss) with a
//! per-coordinate step `h·(1+|wᵢ|)`. ReLU losses are only piecewise smooth,
//! so fixtures must keep pre-activations away from kinks; [`clear_of_kinks`]
//! is the guard test harnesses use to resample contaminated instances.

use crate::net::{
    gradient, selected_param_indices, LabeledSet, LossKind, MlpNetwork, NetError,
    ParamSelector,
};
use crate::numlin::{
    lambda_max, DenseMatrix, NumlinError, SpectralConfig, SpectralMethod, SymmetricOperator,
};
use crate::reparam::{self, ReparamError, ReparamKind, ReparamSpec};
use rayon::prelude::*;
use std::fmt;

/// Pre-activation magnitudes below this make a Hessian fixture unusable
/// (the loss is non-smooth on the kink set); harnesses resample such draws.
pub const KINK_EXCLUSION_THRESHOLD: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub enum OracleError {
    /// The selector picks more coordinates than the dense oracle handles.
    TooLarge { coords: usize, limit: usize },
    /// `frobenius_contraction_check` was handed a non-contraction.
    PreconditionViolated { spectral_norm: f64 },
    /// Two matrices fed to a check do not compose.
    Dimension {
        context: &'static str,
        expected: usize,
        got: usize,
    },
    Net(NetError),
    Numlin(NumlinError),
    Reparam(ReparamError),
}

impl fmt::Display for OracleError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OracleError::TooLarge { coords, limit } => write!(
                f,
                "{coords} selected coordinates exceed the dense-oracle limit of {limit}"
            ),
            OracleError::PreconditionViolated { spectral_norm } => write!(
                f,
                "matrix has spectral norm {spectral_norm}, not a contraction"
            ),
            OracleError::Dimension {
                context,
                expected,
                got,
            } => write!(f, "{context}: expected {expected}, got {got}"),
            OracleError::Net(e) => e.fmt(f),
            OracleError::Numlin(e) => e.fmt(f),
            OracleError::Reparam(e) => e.fmt(f),
        }
    }
}

impl std::error::Error for OracleError {}

impl From<NetError> for OracleError {
    fn from(e: NetError) -> Self {
        OracleError::Net(e)
    }
}

impl From<NumlinError> for OracleError {
    fn from(e: NumlinError) -> Self {
        OracleError::Numlin(e)
    }
}

impl From<ReparamError> for OracleError {
    fn from(e: ReparamError) -> Self {
        OracleError::Reparam(e)
    }
}

/// Finite-difference settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FdConfig {
    /// Base step; each coordinate uses `base_step · (1 + |wᵢ|)`.
    pub base_step: f64,
    /// Average the result with its transpose.
    pub symmetrize: bool,
    /// Dense-oracle coordinate budget.
    pub max_coordinates: usize,
}

impl Default for FdConfig {
    fn default() -> Self {
        FdConfig {
            base_step: 1e-4,
            symmetrize: true,
            max_coordinates: 2000,
        }
    }
}

/// Dense Hessian of the empirical error restricted to the selected weights,
/// by central differences of the analytic gradient. Columns are computed in
/// parallel and assembled in index order, so the result is deterministic.
pub fn fd_hessian(
    net: &MlpNetwork,
    set: &LabeledSet,
    loss: LossKind,
    sel: ParamSelector,
    cfg: &FdConfig,
) -> Result<DenseMatrix, OracleError> {
    assert!(
        cfg.base_step.is_finite() && cfg.base_step > 0.0,
        "finite-difference step must be positive"
    );
    let idx = selected_param_indices(net, sel)?;
    let n = idx.len();
    if n > cfg.max_coordinates {
        return Err(OracleError::TooLarge {
            coords: n,
            limit: cfg.max_coordinates,
        });
    }
    let base = net.params_flat();
    let columns = (0..n)
        .into_par_iter()
        .map(|c| -> Result<Vec<f64>, OracleError> {
            let k = idx[c];
            let h = cfg.base_step * (1.0 + base[k].abs());
            let mut params = base.clone();
            let mut bumped = net.clone();
            params[k] = base[k] + h;
            bumped.set_params_flat(&params)?;
            let gp = gradient(&bumped, set, loss)?;
            params[k] = base[k] - h;
            bumped.set_params_flat(&params)?;
            let gm = gradient(&bumped, set, loss)?;
            Ok(idx.iter().map(|&j| (gp[j] - gm[j]) / (2.0 * h)).collect())
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut hess = DenseMatrix::zeros(n, n);
    for (c, col) in columns.iter().enumerate() {
        for (r, &v) in col.iter().enumerate() {
            hess.set(r, c, v);
        }
    }
    if cfg.symmetrize {
        let t = hess.transpose();
        for (x, &y) in hess.entries_mut().iter_mut().zip(t.entries()) {
            *x = 0.5 * (*x + y);
        }
    }
    if !hess.is_finite() {
        return Err(OracleError::Numlin(NumlinError::NonFinite));
    }
    Ok(hess)
}

/// True when every hidden pre-activation keeps at least `threshold` distance
/// from its ReLU kink on every sample, so the loss is smooth around the
/// current weights and finite differences can be trusted.
pub fn clear_of_kinks(
    net: &MlpNetwork,
    set: &LabeledSet,
    threshold: f64,
) -> Result<bool, NetError> {
    Ok(crate::net::min_preactivation_magnitude(net, set)? > threshold)
}

/// Numerically verifies the Hessian scaling identity: rescaling layer `l` by
/// α (inside a function-preserving layerwise spec) divides the restricted
/// Hessian by α². Returns the max relative elementwise deviation of
/// `H_before` vs `α²·H_after`, ignoring entries below `1e-10·max|H_before|`.
pub fn scaling_law_check(
    net: &MlpNetwork,
    spec: &ReparamSpec,
    layer: usize,
    set: &LabeledSet,
    loss: LossKind,
    cfg: &FdConfig,
) -> Result<f64, OracleError> {
    let ReparamKind::Layerwise { factors } = &spec.kind else {
        return Err(OracleError::Reparam(ReparamError::InvalidSpec {
            reason: "scaling-law check needs a layerwise spec".to_string(),
        }));
    };
    if layer >= factors.len() {
        return Err(OracleError::Dimension {
            context: "scaling-law layer index",
            expected: factors.len(),
            got: layer,
        });
    }
    let alpha = factors[layer];
    let scaled = reparam::apply(net, spec)?;
    let sel = ParamSelector::Layer(layer);
    let before = fd_hessian(net, set, loss, sel, cfg)?;
    let after = fd_hessian(&scaled, set, loss, sel, cfg)?;
    let max_abs = before
        .entries()
        .iter()
        .fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = 1e-10 * max_abs;
    let mut max_rel = 0.0f64;
    for (&b, &a) in before.entries().iter().zip(after.entries()) {
        if b.abs() <= floor {
            continue;
        }
        max_rel = max_rel.max((b - alpha * alpha * a).abs() / b.abs());
    }
    Ok(max_rel)
}

struct GramOperator<'a> {
    a: &'a DenseMatrix,
}

impl SymmetricOperator for GramOperator<'_> {
    fn dim(&self) -> usize {
        self.a.cols()
    }

    fn apply(&self, v: &[f64]) -> Vec<f64> {
        let av = self.a.matvec(v);
        let mut out = vec![0.0; self.a.cols()];
        self.a.matvec_t_add(&av, &mut out);
        out
    }
}

/// Largest singular value of `a`, by power iteration on the Gram matrix aᵀa.
pub fn spectral_norm(a: &DenseMatrix) -> Result<f64, NumlinError> {
    if a.rows() == 0 || a.cols() == 0 {
        return Ok(0.0);
    }
    let cfg = SpectralConfig {
        max_iterations: 10_000,
        tolerance: 1e-10,
        seed: 1,
        method: SpectralMethod::Power,
    };
    let top = lambda_max(&GramOperator { a }, &cfg)?;
    Ok(top.eigenvalue.max(0.0).sqrt())
}

/// Checks the contraction inequality ‖w·a‖_F ≤ ‖w‖_F, which holds whenever
/// ‖a‖₂ ≤ 1. The small additive slack absorbs accumulated rounding.
pub fn frobenius_contraction_check(
    w: &DenseMatrix,
    a: &DenseMatrix,
) -> Result<bool, OracleError> {
    if w.cols() != a.rows() {
        return Err(OracleError::Dimension {
            context: "contraction product inner dimension",
            expected: w.cols(),
            got: a.rows(),
        });
    }
    let norm = spectral_norm(a)?;
    if norm > 1.0 + 1e-12 {
        return Err(OracleError::PreconditionViolated {
            spectral_norm: norm,
        });
    }
    Ok(w.matmul(a).frobenius_norm() <= w.frobenius_norm() + 1e-10)
}
