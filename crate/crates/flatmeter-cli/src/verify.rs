//! Numeric verification suites: invariance of the measures under
//! function-preserving reparameterizations, agreement of the matrix-free
//! estimators with dense finite-difference oracles, and the classical
//! reductions (Tikhonov, Frobenius contraction).
//!
//! Each criterion function draws its own deterministic random population,
//! checks a pinned tolerance, and reports the worst observed deviation so
//! failures carry their evidence.

use flatmeter_core::flatness::{full_report, MeasureConfig, TracePolicy};
use flatmeter_core::net::{
    gradient, hvp, min_preactivation_magnitude, HessianOperator, LabeledSet, LossKind,
    MlpNetwork, ParamSelector, Target,
};
use flatmeter_core::numlin::{
    dense_sym_eig, dot, lambda_max, trace_estimate, DenseMatrix, SpectralConfig,
    SymmetricOperator, TraceMode,
};
use flatmeter_core::oracle::{
    fd_hessian, frobenius_contraction_check, scaling_law_check, spectral_norm, FdConfig,
};
use flatmeter_core::reparam::{apply, sample_random, ReparamFamily, ReparamKind};
use flatmeter_core::rng::{mix, Stream};
use flatmeter_core::trainer::{initialize, InitScheme};
use std::fmt;
use std::time::Instant;

/// Outcome of one verification criterion.
#[derive(Debug, Clone)]
pub struct CriterionReport {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

impl fmt::Display for CriterionReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {:<28} {} [{:.1}s]",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.detail,
            self.seconds
        )
    }
}

fn finish(
    name: &'static str,
    t0: Instant,
    result: anyhow::Result<(bool, String)>,
) -> CriterionReport {
    let seconds = t0.elapsed().as_secs_f64();
    match result {
        Ok((passed, detail)) => CriterionReport {
            name,
            passed,
            detail,
            seconds,
        },
        Err(e) => CriterionReport {
            name,
            passed: false,
            detail: format!("errored: {e}"),
            seconds,
        },
    }
}

/// |a − b| relative to the larger magnitude; zero when both vanish.
fn rel(a: f64, b: f64) -> f64 {
    let denom = a.abs().max(b.abs());
    if denom <= f64::MIN_POSITIVE {
        0.0
    } else {
        (a - b).abs() / denom
    }
}

fn range(stream: &mut Stream, lo: usize, hi: usize) -> usize {
    lo + (stream.next_f64() * (hi - lo + 1) as f64) as usize % (hi - lo + 1)
}

/// Size limits for a random test instance.
#[derive(Debug, Clone, Copy)]
struct InstanceLimits {
    min_weight_layers: usize,
    max_weight_layers: usize,
    min_units: usize,
    max_units: usize,
    max_io: usize,
    min_samples: usize,
    max_samples: usize,
}

const INVARIANCE_LIMITS: InstanceLimits = InstanceLimits {
    min_weight_layers: 2,
    max_weight_layers: 4,
    min_units: 3,
    max_units: 50,
    max_io: 16,
    min_samples: 8,
    max_samples: 64,
};

/// Small instances for finite-difference work: dense Hessians stay cheap
/// and kink-free margins are easy to find.
const FD_LIMITS: InstanceLimits = InstanceLimits {
    min_weight_layers: 2,
    max_weight_layers: 3,
    min_units: 3,
    max_units: 8,
    max_io: 8,
    min_samples: 6,
    max_samples: 16,
};

/// Like [`FD_LIMITS`] but wide enough to reach a few hundred parameters in
/// the selected layer.
const ORACLE_LIMITS: InstanceLimits = InstanceLimits {
    min_weight_layers: 2,
    max_weight_layers: 3,
    min_units: 4,
    max_units: 15,
    max_io: 15,
    min_samples: 6,
    max_samples: 16,
};

fn rand_shape(stream: &mut Stream, lim: InstanceLimits, loss: LossKind) -> Vec<usize> {
    let weight_layers = range(stream, lim.min_weight_layers, lim.max_weight_layers);
    let mut shape = vec![range(stream, 2, lim.max_io)];
    for _ in 0..weight_layers.saturating_sub(1) {
        shape.push(range(stream, lim.min_units, lim.max_units));
    }
    let out = match loss {
        LossKind::Squared => range(stream, 1, lim.max_io.min(8)),
        LossKind::SoftmaxCrossEntropy => range(stream, 2, lim.max_io.min(8)),
    };
    shape.push(out);
    shape
}

fn rand_set(
    stream: &mut Stream,
    input_dim: usize,
    output_dim: usize,
    samples: usize,
    loss: LossKind,
) -> LabeledSet {
    let inputs: Vec<Vec<f64>> = (0..samples)
        .map(|_| (0..input_dim).map(|_| stream.next_standard_normal()).collect())
        .collect();
    let targets: Vec<Target> = (0..samples)
        .map(|_| match loss {
            LossKind::Squared => {
                Target::Vector((0..output_dim).map(|_| stream.next_standard_normal()).collect())
            }
            LossKind::SoftmaxCrossEntropy => Target::Class(range(stream, 0, output_dim - 1)),
        })
        .collect();
    LabeledSet::new(inputs, targets).expect("nonempty set")
}

/// A random network + dataset + loss, deterministic per seed. Alternates
/// the loss kind by instance index.
fn rand_instance(seed: u64, index: usize, lim: InstanceLimits) -> (MlpNetwork, LabeledSet, LossKind) {
    let loss = if index.is_multiple_of(2) {
        LossKind::Squared
    } else {
        LossKind::SoftmaxCrossEntropy
    };
    let mut stream = Stream::new(mix(seed, index as u64), 0);
    let shape = rand_shape(&mut stream, lim, loss);
    let samples = range(&mut stream, lim.min_samples, lim.max_samples);
    let set = rand_set(
        &mut stream,
        shape[0],
        *shape.last().expect("nonempty shape"),
        samples,
        loss,
    );
    let net = initialize(&shape, InitScheme::XavierNormal, stream.next_u64()).expect("valid shape");
    (net, set, loss)
}

/// Resamples until every preactivation sits at least `margin` away from
/// the ReLU kink, so finite differences never cross a mask boundary.
fn kink_free_instance(
    seed: u64,
    index: usize,
    lim: InstanceLimits,
    margin: f64,
) -> anyhow::Result<(MlpNetwork, LabeledSet, LossKind)> {
    for attempt in 0..500u64 {
        let (net, set, loss) = rand_instance(mix(seed, attempt), index, lim);
        if min_preactivation_magnitude(&net, &set)? > margin {
            return Ok((net, set, loss));
        }
    }
    anyhow::bail!("no kink-free instance found for index {index} at margin {margin}")
}

fn invariance_measure_config(seed: u64) -> MeasureConfig {
    MeasureConfig {
        max_iterations: 4000,
        tolerance: 1e-10,
        seed,
        method: None,
        trace: TracePolicy::Auto,
    }
}

/// Layer-wise reparameterization invariance of κ and κ_τ.
pub fn thm1_invariance(triples: usize, seed: u64) -> CriterionReport {
    let t0 = Instant::now();
    finish("theorem-1-invariance", t0, (|| {
        let mut worst = 0.0f64;
        for i in 0..triples {
            let (net, set, loss) = rand_instance(seed, i, INVARIANCE_LIMITS);
            let spec = sample_random(&net.shape(), ReparamFamily::Layerwise, (5.0, 25.0), mix(seed, 9000 + i as u64))?;
            let rescaled = apply(&net, &spec)?;
            let mcfg = invariance_measure_config(mix(seed, i as u64));
            let before = full_report(&net, &set, loss, &mcfg)?;
            let after = full_report(&rescaled, &set, loss, &mcfg)?;
            for (b, a) in before.layers.iter().zip(&after.layers) {
                worst = worst.max(rel(b.kappa, a.kappa));
                worst = worst.max(rel(b.kappa_tau, a.kappa_tau));
            }
        }
        let elapsed = t0.elapsed().as_secs_f64();
        let ok = worst <= 1e-6 && elapsed < 120.0;
        Ok((ok, format!(
            "max rel dev of κ/κ_τ {worst:.3e} over {triples} layer-wise triples (tol 1e-6)"
        )))
    })())
}

/// Neuron-wise reparameterization invariance of ρ(j) for every (l, j).
pub fn thm2_invariance(triples: usize, seed: u64) -> CriterionReport {
    let t0 = Instant::now();
    finish("theorem-2-invariance", t0, (|| {
        let mut worst = 0.0f64;
        for i in 0..triples {
            let (net, set, loss) = rand_instance(seed, i, INVARIANCE_LIMITS);
            let spec = sample_random(&net.shape(), ReparamFamily::Neuronwise, (5.0, 25.0), mix(seed, 9000 + i as u64))?;
            let rescaled = apply(&net, &spec)?;
            let mcfg = invariance_measure_config(mix(seed, i as u64));
            let before = full_report(&net, &set, loss, &mcfg)?;
            let after = full_report(&rescaled, &set, loss, &mcfg)?;
            for (b, a) in before.layers.iter().zip(&after.layers) {
                for (rb, ra) in b.rho_neuron.iter().zip(&a.rho_neuron) {
                    worst = worst.max(rel(*rb, *ra));
                }
            }
        }
        let elapsed = t0.elapsed().as_secs_f64();
        let ok = worst <= 1e-6 && elapsed < 120.0;
        Ok((ok, format!(
            "max rel dev of ρ(j) {worst:.3e} over {triples} neuron-wise triples (tol 1e-6)"
        )))
    })())
}

/// Appendix-A scaling law: H(w) = α²·H(w^α) on the rescaled layer, checked
/// against finite differences, plus the matching raw λ_max ratio 1/α².
pub fn scaling_law(instances: usize, seed: u64) -> CriterionReport {
    let t0 = Instant::now();
    finish("scaling-law", t0, (|| {
        let fd_cfg = FdConfig {
            base_step: 1e-6,
            ..FdConfig::default()
        };
        let mut worst_fd = 0.0f64;
        let mut worst_ratio = 0.0f64;
        for i in 0..instances {
            let (net, set, loss) = kink_free_instance(seed, i, FD_LIMITS, 1e-3)?;
            let mut stream = Stream::new(mix(seed, 7000 + i as u64), 0);
            let layers = net.num_layers();
            let layer = range(&mut stream, 0, layers - 1);
            let spec = sample_random(&net.shape(), ReparamFamily::Layerwise, (5.0, 25.0), stream.next_u64())?;
            worst_fd = worst_fd.max(scaling_law_check(&net, &spec, layer, &set, loss, &fd_cfg)?);

            let ReparamKind::Layerwise { factors } = &spec.kind else {
                unreachable!("layer-wise by construction")
            };
            let alpha = factors[layer];
            let rescaled = apply(&net, &spec)?;
            let sel = ParamSelector::Layer(layer);
            let op_before = HessianOperator::new(&net, &set, loss, sel)?;
            let op_after = HessianOperator::new(&rescaled, &set, loss, sel)?;
            let scfg = SpectralConfig::auto(op_before.dim(), mix(seed, i as u64));
            let lb = lambda_max(&op_before, &scfg)?.eigenvalue;
            let la = lambda_max(&op_after, &scfg)?.eigenvalue;
            if lb.abs() > 1e-12 {
                worst_ratio = worst_ratio.max(rel(la / lb, 1.0 / (alpha * alpha)));
            }
        }
        let ok = worst_fd <= 1e-3 && worst_ratio <= 1e-3;
        Ok((ok, format!(
            "max rel dev {worst_fd:.3e} (fd Hessian, tol 1e-3), {worst_ratio:.3e} (raw λ ratio vs 1/α², tol 1e-3) over {instances} instances"
        )))
    })())
}

/// Matrix-free λ_max and exact-basis trace versus the dense
/// finite-difference oracle.
pub fn oracle_equivalence(instances: usize, seed: u64) -> CriterionReport {
    let t0 = Instant::now();
    finish("oracle-equivalence", t0, (|| {
        let fd_cfg = FdConfig {
            base_step: 1e-6,
            ..FdConfig::default()
        };
        let mut worst_lambda = 0.0f64;
        let mut worst_trace = 0.0f64;
        let mut largest = 0usize;
        for i in 0..instances {
            let (net, set, loss) = kink_free_instance(seed, i, ORACLE_LIMITS, 1e-3)?;
            let mut stream = Stream::new(mix(seed, 5000 + i as u64), 0);
            let layer = range(&mut stream, 0, net.num_layers() - 1);
            let sel = ParamSelector::Layer(layer);
            let op = HessianOperator::new(&net, &set, loss, sel)?;
            largest = largest.max(op.dim());
            let dense = fd_hessian(&net, &set, loss, sel, &fd_cfg)?;
            let spectrum = dense_sym_eig(&dense)?;
            let dense_top = *spectrum.last().expect("nonempty spectrum");
            let dense_trace: f64 = (0..dense.rows()).map(|k| dense.get(k, k)).sum();

            let scfg = SpectralConfig::auto(op.dim(), mix(seed, i as u64));
            let top = lambda_max(&op, &scfg)?.eigenvalue;
            let tr = trace_estimate(&op, TraceMode::ExactBasis, 0)?.trace;
            worst_lambda = worst_lambda.max(rel(top, dense_top));
            worst_trace = worst_trace.max(rel(tr, dense_trace));
        }
        let ok = worst_lambda <= 1e-3 && worst_trace <= 1e-3 && largest <= 500;
        Ok((ok, format!(
            "max rel dev {worst_lambda:.3e} (λ_max), {worst_trace:.3e} (trace) vs dense fd oracle over {instances} nets (≤{largest} params, tol 1e-3)"
        )))
    })())
}

/// §2 reduction: for a linear model under squared loss, κ/‖w‖² is the
/// data Gram eigenvalue λ_max((2/|S|)·Σ x xᵀ), independent of w.
pub fn tikhonov(seed: u64) -> CriterionReport {
    let t0 = Instant::now();
    finish("tikhonov-reduction", t0, (|| {
        let d = 6;
        let samples = 24;
        let mut stream = Stream::new(seed, 0);
        let set = rand_set(&mut stream, d, 1, samples, LossKind::Squared);

        let mut gram = DenseMatrix::zeros(d, d);
        for x in set.inputs() {
            for r in 0..d {
                for c in 0..d {
                    gram.set(r, c, gram.get(r, c) + 2.0 * x[r] * x[c] / samples as f64);
                }
            }
        }
        let dense_top = *dense_sym_eig(&gram)?.last().expect("nonempty");

        let mut ratios = Vec::new();
        for k in 0..20u64 {
            let net = initialize(&[d, 1], InitScheme::XavierNormal, mix(seed, k))?;
            let w_norm_sq = net.layers()[0].weights.frobenius_norm_sq();
            let kappa = flatmeter_core::flatness::kappa_layer(
                &net,
                &set,
                LossKind::Squared,
                0,
                &SpectralConfig::auto(d, seed),
            )?;
            ratios.push(kappa / w_norm_sq);
        }
        let mut worst_const = 0.0f64;
        for r in &ratios {
            worst_const = worst_const.max(rel(*r, ratios[0]));
        }
        let worst_dense = rel(ratios[0], dense_top);
        let ok = worst_const <= 1e-8 && worst_dense <= 1e-6;
        Ok((ok, format!(
            "κ/‖w‖² spread {worst_const:.3e} over 20 draws (tol 1e-8), dev vs dense Gram eigenvalue {worst_dense:.3e} (tol 1e-6)"
        )))
    })())
}

/// Analytic gradient and HVP versus finite differences on kink-free
/// instances.
pub fn gradient_hvp(instances: usize, seed: u64) -> CriterionReport {
    let t0 = Instant::now();
    finish("gradient-hvp-fd", t0, (|| {
        let mut worst_grad = 0.0f64;
        let mut worst_hvp = 0.0f64;
        let fd_cfg = FdConfig {
            base_step: 1e-6,
            ..FdConfig::default()
        };
        for i in 0..instances {
            let (net, set, loss) = kink_free_instance(seed, i, FD_LIMITS, 1e-3)?;
            let g = gradient(&net, &set, loss)?;
            let g_fd = fd_loss_gradient(&net, &set, loss, 1e-6)?;
            let g_norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
            let diff = g
                .iter()
                .zip(&g_fd)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            worst_grad = worst_grad.max(diff / g_norm.max(1e-9));

            let mut stream = Stream::new(mix(seed, 3000 + i as u64), 0);
            let layer = range(&mut stream, 0, net.num_layers() - 1);
            let sel = ParamSelector::Layer(layer);
            let dense = fd_hessian(&net, &set, loss, sel, &fd_cfg)?;
            let dim = dense.rows();
            let scale = dense
                .entries()
                .iter()
                .fold(0.0f64, |m, v| m.max(v.abs()))
                .max(1e-9);
            for j in 0..dim {
                let mut e = vec![0.0; dim];
                e[j] = 1.0;
                let col = hvp(&net, &set, loss, sel, &e)?;
                for (r, &cv) in col.iter().enumerate() {
                    let fd_v = dense.get(r, j);
                    let dev = (cv - fd_v).abs() / fd_v.abs().max(scale);
                    worst_hvp = worst_hvp.max(dev);
                }
            }
        }
        let ok = worst_grad <= 1e-5 && worst_hvp <= 1e-4;
        Ok((ok, format!(
            "gradient vs fd {worst_grad:.3e} (tol 1e-5), hvp vs fd columns {worst_hvp:.3e} (tol 1e-4) over {instances} kink-free instances"
        )))
    })())
}

/// Central finite difference of the empirical loss in every parameter.
fn fd_loss_gradient(
    net: &MlpNetwork,
    set: &LabeledSet,
    loss: LossKind,
    base_step: f64,
) -> anyhow::Result<Vec<f64>> {
    use flatmeter_core::net::empirical_error;
    let params = net.params_flat();
    let mut grad = vec![0.0; params.len()];
    let mut work = net.clone();
    for k in 0..params.len() {
        let h = base_step * (1.0 + params[k].abs());
        let mut bumped = params.clone();
        bumped[k] = params[k] + h;
        work.set_params_flat(&bumped)?;
        let up = empirical_error(&work, set, loss)?;
        bumped[k] = params[k] - h;
        work.set_params_flat(&bumped)?;
        let down = empirical_error(&work, set, loss)?;
        grad[k] = (up - down) / (2.0 * h);
    }
    Ok(grad)
}

/// ‖wA‖_F ≤ ‖w‖_F whenever ‖A‖₂ ≤ 1, with equality for orthogonal A.
pub fn frobenius_contraction(cases: usize, seed: u64) -> CriterionReport {
    let t0 = Instant::now();
    finish("frobenius-contraction", t0, (|| {
        let mut failures = 0usize;
        let mut worst_eq = 0.0f64;
        let mut orthogonal_cases = 0usize;
        for i in 0..cases as u64 {
            let mut stream = Stream::new(mix(seed, i), 0);
            let m = range(&mut stream, 2, 10);
            let n = range(&mut stream, 2, 10);
            let w = rand_dense(&mut stream, m, n, 1.0);
            if i % 5 == 0 {
                let a = rand_orthogonal(&mut stream, n);
                orthogonal_cases += 1;
                if !frobenius_contraction_check(&w, &a)? {
                    failures += 1;
                }
                let before = w.frobenius_norm();
                let after = w.matmul(&a).frobenius_norm();
                worst_eq = worst_eq.max((after - before).abs() / before.max(f64::MIN_POSITIVE));
            } else {
                let k = range(&mut stream, 2, 10);
                let mut a = rand_dense(&mut stream, n, k, 1.0);
                let norm = spectral_norm(&a)?;
                if norm > f64::MIN_POSITIVE {
                    let target = 0.05 + 0.95 * stream.next_f64();
                    a.scale(target / norm);
                }
                if !frobenius_contraction_check(&w, &a)? {
                    failures += 1;
                }
            }
        }
        let ok = failures == 0 && worst_eq <= 1e-12;
        Ok((ok, format!(
            "{failures} contraction violations over {cases} cases, orthogonal equality dev {worst_eq:.3e} over {orthogonal_cases} (tol 1e-12)"
        )))
    })())
}

fn rand_dense(stream: &mut Stream, rows: usize, cols: usize, scale: f64) -> DenseMatrix {
    let mut m = DenseMatrix::zeros(rows, cols);
    for r in 0..rows {
        for c in 0..cols {
            m.set(r, c, scale * stream.next_standard_normal());
        }
    }
    m
}

/// Random orthogonal matrix via modified Gram-Schmidt on a Gaussian draw.
fn rand_orthogonal(stream: &mut Stream, n: usize) -> DenseMatrix {
    loop {
        let g = rand_dense(stream, n, n, 1.0);
        let mut cols: Vec<Vec<f64>> = (0..n)
            .map(|c| (0..n).map(|r| g.get(r, c)).collect())
            .collect();
        let mut ok = true;
        for j in 0..n {
            for i in 0..j {
                let proj = dot(&cols[j], &cols[i]);
                let prev = cols[i].clone();
                for (v, p) in cols[j].iter_mut().zip(&prev) {
                    *v -= proj * p;
                }
            }
            let norm = dot(&cols[j], &cols[j]).sqrt();
            if norm < 1e-8 {
                ok = false;
                break;
            }
            for v in &mut cols[j] {
                *v /= norm;
            }
        }
        if !ok {
            continue;
        }
        let mut q = DenseMatrix::zeros(n, n);
        for (c, col) in cols.iter().enumerate() {
            for (r, v) in col.iter().enumerate() {
                q.set(r, c, *v);
            }
        }
        return q;
    }
}

/// Named verification suites for the `verify` subcommand. Reduced
/// population sizes keep a fresh-build check fast; the acceptance tests
/// run the same criteria at full size.
pub fn run_suite(name: &str) -> anyhow::Result<Vec<CriterionReport>> {
    let reports = match name {
        "invariance" => vec![thm1_invariance(20, 101), thm2_invariance(20, 202)],
        "oracle" => vec![
            oracle_equivalence(8, 404),
            gradient_hvp(20, 606),
            scaling_law(12, 303),
            tikhonov(505),
            frobenius_contraction(200, 707),
        ],
        "all" => {
            let mut r = run_suite("invariance")?;
            r.extend(run_suite("oracle")?);
            r
        }
        other => anyhow::bail!("unknown suite '{other}' (expected invariance, oracle, or all)"),
    };
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rand_orthogonal_is_orthogonal() {
        let mut stream = Stream::new(5, 0);
        let q = rand_orthogonal(&mut stream, 6);
        let qt = q.transpose();
        let prod = qt.matmul(&q);
        for r in 0..6 {
            for c in 0..6 {
                let expect = if r == c { 1.0 } else { 0.0 };
                assert!((prod.get(r, c) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn instances_are_deterministic_and_in_bounds() {
        let (net, set, _loss) = rand_instance(9, 4, INVARIANCE_LIMITS);
        let (net2, set2, _) = rand_instance(9, 4, INVARIANCE_LIMITS);
        assert_eq!(net, net2);
        assert_eq!(set, set2);
        assert!(net.num_layers() >= 2 && net.num_layers() <= 4);
        assert!(net.shape().iter().all(|&u| (1..=50).contains(&u)));
        assert!(set.len() >= 8 && set.len() <= 64);
    }

    #[test]
    fn kink_free_instances_respect_the_margin() {
        let (net, set, _) = kink_free_instance(3, 1, FD_LIMITS, 1e-3).unwrap();
        assert!(min_preactivation_magnitude(&net, &set).unwrap() > 1e-3);
    }

    #[test]
    fn unknown_suite_is_rejected() {
        assert!(run_suite("bogus").is_err());
    }
}
