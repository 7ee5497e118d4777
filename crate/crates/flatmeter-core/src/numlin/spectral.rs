//! Largest-algebraic-eigenvalue estimation for matrix-free operators.
//!
//! Two methods sit behind [`lambda_max`]: Lanczos with full
//! reorthogonalization (the default up to [`super::LANCZOS_DIM_LIMIT`]) and
//! power iteration on a spectrally shifted operator above that. Both target
//! the largest *algebraic* eigenvalue — raw power iteration would return the
//! largest magnitude, which can be a negative eigenvalue away from minima.

use super::jacobi::sym_eig_full;
use super::{axpy, dot, norm2, DenseMatrix, NumlinError, SpectralConfig, SpectralMethod, SymmetricOperator};
use crate::rng::Stream;

/// Result of a converged [`lambda_max`] run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LambdaMax {
    /// Estimate of the largest algebraic eigenvalue.
    pub eigenvalue: f64,
    /// ‖H v − λ v‖ / ‖v‖ for the returned Ritz pair.
    pub residual: f64,
    /// Operator applications spent.
    pub iterations: usize,
    /// Smallest Ritz value observed (Lanczos only); feeds the PSD
    /// diagnostic in flatness reports.
    pub min_ritz: Option<f64>,
}

/// Largest algebraic eigenvalue of a symmetric operator.
///
/// Converged when the residual drops below `cfg.tolerance · |λ|`. Hitting
/// `cfg.max_iterations` first yields [`NumlinError::DidNotConverge`]
/// carrying the best estimate, so callers can still use it flagged.
pub fn lambda_max<O: SymmetricOperator + ?Sized>(
    op: &O,
    cfg: &SpectralConfig,
) -> Result<LambdaMax, NumlinError> {
    assert!(op.dim() >= 1, "operator dimension must be at least 1");
    assert!(cfg.tolerance > 0.0, "tolerance must be positive");
    assert!(cfg.max_iterations >= 1, "need at least one iteration");
    match cfg.method {
        SpectralMethod::Lanczos => lanczos_max(op, cfg),
        SpectralMethod::Power => power_shift_max(op, cfg),
    }
}

fn converged(residual: f64, theta: f64, tolerance: f64) -> bool {
    residual <= tolerance * theta.abs()
}

fn random_unit_vector(dim: usize, stream: &mut Stream) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| stream.next_standard_normal()).collect();
        let n = norm2(&v);
        if n > 1e-30 {
            return v.iter().map(|x| x / n).collect();
        }
    }
}

fn checked_apply<O: SymmetricOperator + ?Sized>(
    op: &O,
    v: &[f64],
) -> Result<Vec<f64>, NumlinError> {
    let w = op.apply(v);
    assert_eq!(w.len(), op.dim(), "operator changed dimension");
    if w.iter().any(|x| !x.is_finite()) {
        return Err(NumlinError::NonFiniteOperator);
    }
    Ok(w)
}

/// Lanczos with full reorthogonalization. The Krylov basis is kept dense in
/// memory; fine for the dimensions this branch is used at.
fn lanczos_max<O: SymmetricOperator + ?Sized>(
    op: &O,
    cfg: &SpectralConfig,
) -> Result<LambdaMax, NumlinError> {
    let n = op.dim();
    let max_steps = cfg.max_iterations.min(n);
    // Ritz extraction is O(j³) in the Krylov size j; checking every step
    // would be wasteful, every few steps costs nothing noticeable.
    const CHECK_EVERY: usize = 4;

    let mut stream = Stream::new(cfg.seed, 0);
    let mut basis: Vec<Vec<f64>> = vec![random_unit_vector(n, &mut stream)];
    let mut alphas: Vec<f64> = Vec::new();
    let mut betas: Vec<f64> = Vec::new();
    let mut applies = 0usize;
    let mut best: Option<LambdaMax> = None;
    let mut exhausted_krylov = false;

    for step in 0..max_steps {
        let v = basis[step].clone();
        let mut w = checked_apply(op, &v)?;
        applies += 1;
        let alpha = dot(&w, &v);
        alphas.push(alpha);
        axpy(-alpha, &v, &mut w);
        if step > 0 {
            let beta_prev = betas[step - 1];
            axpy(-beta_prev, &basis[step - 1], &mut w);
        }
        // Full reorthogonalization, two passes: cheap insurance against the
        // ghost eigenvalues classical Lanczos is notorious for.
        for _ in 0..2 {
            for u in &basis {
                let c = dot(&w, u);
                axpy(-c, u, &mut w);
            }
        }
        let beta = norm2(&w);

        // Breakdown test relative to the magnitude of the tridiagonal built
        // so far, so the decision is invariant under operator scaling.
        let t_scale = alphas
            .iter()
            .map(|a| a.abs())
            .chain(betas.iter().copied())
            .fold(beta, f64::max);
        let breakdown = beta <= 1e-13 * t_scale;
        let krylov_done = breakdown || step + 1 == max_steps;
        if krylov_done || (step + 1) % CHECK_EVERY == 0 {
            let (theta, y, min_ritz) = top_ritz(&alphas, &betas);
            // Cheap a posteriori bound before paying for the Ritz vector.
            let bound = beta * y.last().map(|c| c.abs()).unwrap_or(1.0);
            if converged(bound, theta, cfg.tolerance) || krylov_done {
                let ritz = assemble_ritz(&basis, &y);
                let hv = checked_apply(op, &ritz)?;
                applies += 1;
                let residual = residual_norm(&hv, theta, &ritz);
                let candidate = LambdaMax {
                    eigenvalue: theta,
                    residual,
                    iterations: applies,
                    min_ritz: Some(min_ritz),
                };
                if converged(residual, theta, cfg.tolerance) {
                    return Ok(candidate);
                }
                if best.is_none_or(|b| candidate.residual < b.residual) {
                    best = Some(candidate);
                }
            }
        }
        if breakdown {
            exhausted_krylov = true;
            break;
        }
        if step + 1 < max_steps {
            let next: Vec<f64> = w.iter().map(|x| x / beta).collect();
            betas.push(beta);
            basis.push(next);
        }
    }

    // An exactly invariant subspace makes the Ritz pair exact; accept it
    // even when a strict relative test against λ = 0 cannot be met.
    if exhausted_krylov {
        if let Some(b) = best {
            return Ok(b);
        }
    }
    let best = best.expect("at least one Ritz extraction ran");
    Err(NumlinError::DidNotConverge {
        estimate: best.eigenvalue,
        residual: best.residual,
        iterations: best.iterations,
    })
}

/// Largest Ritz value, its tridiagonal eigenvector, and the smallest Ritz
/// value of the current Lanczos tridiagonal.
fn top_ritz(alphas: &[f64], betas: &[f64]) -> (f64, Vec<f64>, f64) {
    let j = alphas.len();
    let mut t = DenseMatrix::zeros(j, j);
    for i in 0..j {
        t.set(i, i, alphas[i]);
        if i + 1 < j {
            t.set(i, i + 1, betas[i]);
            t.set(i + 1, i, betas[i]);
        }
    }
    let (eigs, vectors) = sym_eig_full(&t).expect("tridiagonal is square and finite");
    let theta = eigs[j - 1];
    let y: Vec<f64> = (0..j).map(|r| vectors.get(r, j - 1)).collect();
    (theta, y, eigs[0])
}

fn assemble_ritz(basis: &[Vec<f64>], y: &[f64]) -> Vec<f64> {
    let n = basis[0].len();
    let mut v = vec![0.0; n];
    for (coeff, b) in y.iter().zip(basis) {
        axpy(*coeff, b, &mut v);
    }
    let norm = norm2(&v);
    if norm > 0.0 {
        for x in &mut v {
            *x /= norm;
        }
    }
    v
}

fn residual_norm(hv: &[f64], theta: f64, v: &[f64]) -> f64 {
    let mut r = hv.to_vec();
    axpy(-theta, v, &mut r);
    norm2(&r) / norm2(v).max(1e-300)
}

/// Power iteration on op + σI where σ estimates ‖op‖₂, so the dominant
/// eigenvalue of the shifted operator is λ_max(op) + σ — algebraic, not
/// largest-magnitude.
fn power_shift_max<O: SymmetricOperator + ?Sized>(
    op: &O,
    cfg: &SpectralConfig,
) -> Result<LambdaMax, NumlinError> {
    let n = op.dim();
    let mut stream = Stream::new(cfg.seed, 1);
    let mut v = random_unit_vector(n, &mut stream);

    // Opnorm estimate: 20 plain power steps, tracking the largest ‖op v‖
    // seen on unit vectors (a lower bound on ‖op‖₂ that is plenty for a
    // shift; slight inflation guards clustered negative spectra).
    let mut sigma = 0.0f64;
    let mut applies = 0usize;
    for _ in 0..20 {
        let w = checked_apply(op, &v)?;
        applies += 1;
        let norm = norm2(&w);
        sigma = sigma.max(norm);
        if norm <= 1e-300 {
            break;
        }
        v = w.iter().map(|x| x / norm).collect();
    }
    sigma *= 1.05;

    let mut best: Option<LambdaMax> = None;
    let mut u = random_unit_vector(n, &mut stream);
    for _ in 0..cfg.max_iterations {
        let w = checked_apply(op, &u)?;
        applies += 1;
        let theta = dot(&u, &w);
        let residual = residual_norm(&w, theta, &u);
        let candidate = LambdaMax {
            eigenvalue: theta,
            residual,
            iterations: applies,
            min_ritz: None,
        };
        if converged(residual, theta, cfg.tolerance) {
            return Ok(candidate);
        }
        if best.is_none_or(|b| candidate.residual < b.residual) {
            best = Some(candidate);
        }
        // u ← normalize(op u + σ u)
        let mut next = w;
        axpy(sigma, &u, &mut next);
        let norm = norm2(&next);
        if norm <= 1e-300 {
            // Shifted operator annihilated the iterate; restart afresh.
            u = random_unit_vector(n, &mut stream);
            continue;
        }
        u = next.iter().map(|x| x / norm).collect();
    }

    let best = best.expect("at least one iteration ran");
    Err(NumlinError::DidNotConverge {
        estimate: best.eigenvalue,
        residual: best.residual,
        iterations: best.iterations,
    })
}
