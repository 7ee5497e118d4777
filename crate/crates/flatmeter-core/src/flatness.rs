//! The flatness measures themselves.
//!
//! For layer l with weight matrix w_l and layer-restricted empirical-loss
//! Hessian H_l:
//!
//! * κ^l      = ‖vec w_l‖² · λ_max(H_l)   (largest algebraic eigenvalue)
//! * κ^l_τ    = ‖vec w_l‖² · Tr(H_l)
//! * ρ^l(j)   = w_l(j)ᵀ H_l w_l(j) for column j of w_l, embedded in the
//!   layer parameter space with zeros elsewhere
//! * ρ^l      = max_j ρ^l(j),  ρ^l_σ = Σ_j ρ^l(j)
//!
//! Network aggregates take the max/sum of these over layers. The normalized
//! measures are invariant under the function-preserving rescalings of the
//! reparam module; the raw λ_max and trace are kept in the report as the
//! non-invariance witness.
//!
//! ‖vec w_l‖ is the Frobenius norm of the weight matrix (vectorization
//! preserves it); biases are not part of any measure.

use crate::expstats::{json_f64, json_f64_vec};
use crate::net::{HessianOperator, LabeledSet, LossKind, MlpNetwork, NetError, ParamSelector};
use crate::numlin::{
    dot, lambda_max, pairwise_sum, trace_estimate, NumlinError, SpectralConfig, SpectralMethod,
    SymmetricOperator, TraceMode, DEFAULT_HUTCHINSON_PROBES, LANCZOS_DIM_LIMIT,
};
use crate::rng::mix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fmt;

/// Layers at or below this many weight parameters get an exact basis trace;
/// larger ones use Hutchinson probing.
pub const EXACT_TRACE_PARAM_LIMIT: usize = 20_000;

#[derive(Debug, Clone, PartialEq)]
pub enum FlatnessError {
    /// `aggregate` was handed no layers.
    MissingLayer,
    Net(NetError),
    Numlin(NumlinError),
}

impl fmt::Display for FlatnessError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FlatnessError::MissingLayer => write!(f, "report needs at least one layer"),
            FlatnessError::Net(e) => e.fmt(f),
            FlatnessError::Numlin(e) => e.fmt(f),
        }
    }
}

impl std::error::Error for FlatnessError {}

impl From<NetError> for FlatnessError {
    fn from(e: NetError) -> Self {
        FlatnessError::Net(e)
    }
}

impl From<NumlinError> for FlatnessError {
    fn from(e: NumlinError) -> Self {
        FlatnessError::Numlin(e)
    }
}

/// How [`full_report`] picks the trace estimator per layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TracePolicy {
    /// Exact basis sweep up to [`EXACT_TRACE_PARAM_LIMIT`] weight
    /// parameters, Hutchinson with the default probe count above it.
    Auto,
    Force(TraceMode),
}

/// Measurement settings for [`full_report`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeasureConfig {
    pub max_iterations: usize,
    pub tolerance: f64,
    pub seed: u64,
    /// `None` picks Lanczos up to [`LANCZOS_DIM_LIMIT`], power iteration
    /// above.
    pub method: Option<SpectralMethod>,
    pub trace: TracePolicy,
}

impl Default for MeasureConfig {
    fn default() -> Self {
        MeasureConfig {
            max_iterations: 1000,
            tolerance: 1e-9,
            seed: 0,
            method: None,
            trace: TracePolicy::Auto,
        }
    }
}

/// Numerical bookkeeping for one layer's measurements.
///
/// Float fields use the [`json_f64`] encoding so reports with non-finite
/// entries (a diverged run's placeholder) survive JSON round-trips.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerDiagnostics {
    #[serde(with = "json_f64")]
    pub eig_residual: f64,
    pub eig_iterations: usize,
    /// False when the eigensolver hit its iteration cap; the best estimate
    /// is still used.
    pub eig_converged: bool,
    /// Smallest Ritz value seen by Lanczos (absent under power iteration).
    pub min_ritz: Option<f64>,
    /// Set when the smallest Ritz value is materially negative — the point
    /// is not (numerically) a positive-semidefinite minimum.
    pub psd_violation: bool,
    pub trace_mode: String,
    #[serde(with = "json_f64")]
    pub trace_stderr: f64,
}

/// Every Table-style measure for one layer, plus the raw spectral
/// quantities they normalize.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerMeasures {
    #[serde(with = "json_f64")]
    pub kappa: f64,
    #[serde(with = "json_f64")]
    pub kappa_tau: f64,
    /// max_j ρ(j)
    #[serde(with = "json_f64")]
    pub rho: f64,
    /// Σ_j ρ(j)
    #[serde(with = "json_f64")]
    pub rho_sigma: f64,
    #[serde(with = "json_f64_vec")]
    pub rho_neuron: Vec<f64>,
    #[serde(with = "json_f64")]
    pub weight_norm_sq: f64,
    /// Raw largest eigenvalue — changes under reparameterization.
    #[serde(with = "json_f64")]
    pub lambda_max: f64,
    /// Raw trace — changes under reparameterization.
    #[serde(with = "json_f64")]
    pub trace: f64,
    pub diagnostics: LayerDiagnostics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlatnessReport {
    pub layers: Vec<LayerMeasures>,
    #[serde(with = "json_f64")]
    pub kappa_max: f64,
    #[serde(with = "json_f64")]
    pub kappa_sum: f64,
    #[serde(with = "json_f64")]
    pub kappa_tau_max: f64,
    #[serde(with = "json_f64")]
    pub kappa_tau_sum: f64,
    /// max_l ρ^l
    #[serde(with = "json_f64")]
    pub rho_max: f64,
    /// Σ_l ρ^l_σ
    #[serde(with = "json_f64")]
    pub rho_sum: f64,
}

impl FlatnessReport {
    /// All-NaN placeholder with the layer/neuron shape of `net`, for runs
    /// whose checkpoint cannot be measured (diverged training). Keeps the
    /// record schema identical to measured runs so tables stay rectangular.
    pub fn unmeasured(net_shape: &[usize]) -> FlatnessReport {
        let layers = net_shape
            .windows(2)
            .map(|dims| LayerMeasures {
                kappa: f64::NAN,
                kappa_tau: f64::NAN,
                rho: f64::NAN,
                rho_sigma: f64::NAN,
                // ρ(j) runs over columns of w_l, i.e. the incoming dimension.
                rho_neuron: vec![f64::NAN; dims[0]],
                weight_norm_sq: f64::NAN,
                lambda_max: f64::NAN,
                trace: f64::NAN,
                diagnostics: LayerDiagnostics {
                    eig_residual: f64::NAN,
                    eig_iterations: 0,
                    eig_converged: false,
                    min_ritz: None,
                    psd_violation: false,
                    trace_mode: "skipped".to_string(),
                    trace_stderr: f64::NAN,
                },
            })
            .collect();
        FlatnessReport {
            layers,
            kappa_max: f64::NAN,
            kappa_sum: f64::NAN,
            kappa_tau_max: f64::NAN,
            kappa_tau_sum: f64::NAN,
            rho_max: f64::NAN,
            rho_sum: f64::NAN,
        }
    }

    /// Flat key-value view (`kappa.l1`, `rho.l2.j3`, `kappa_max`, …; layer
    /// and neuron indices are 1-based), in a fixed deterministic order.
    pub fn to_key_values(&self) -> Vec<(String, f64)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            let l = i + 1;
            out.push((format!("kappa.l{l}"), layer.kappa));
            out.push((format!("kappa_tau.l{l}"), layer.kappa_tau));
            out.push((format!("rho.l{l}"), layer.rho));
            out.push((format!("rho_sigma.l{l}"), layer.rho_sigma));
            for (j, &r) in layer.rho_neuron.iter().enumerate() {
                out.push((format!("rho.l{l}.j{}", j + 1), r));
            }
        }
        out.push(("kappa_max".to_string(), self.kappa_max));
        out.push(("kappa_sum".to_string(), self.kappa_sum));
        out.push(("kappa_tau_max".to_string(), self.kappa_tau_max));
        out.push(("kappa_tau_sum".to_string(), self.kappa_tau_sum));
        out.push(("rho_max".to_string(), self.rho_max));
        out.push(("rho_sum".to_string(), self.rho_sum));
        out
    }
}

/// κ^l: squared Frobenius norm of w_l times the largest eigenvalue of the
/// layer-restricted Hessian. Convergence failures propagate as errors here;
/// [`full_report`] instead records them in the diagnostics.
pub fn kappa_layer(
    net: &MlpNetwork,
    set: &LabeledSet,
    loss: LossKind,
    layer: usize,
    cfg: &SpectralConfig,
) -> Result<f64, FlatnessError> {
    let op = HessianOperator::new(net, set, loss, ParamSelector::Layer(layer))?;
    let top = lambda_max(&op, cfg)?;
    Ok(net.layers()[layer].weights.frobenius_norm_sq() * top.eigenvalue)
}

/// κ^l_τ: squared Frobenius norm of w_l times the Hessian trace.
pub fn kappa_tau_layer(
    net: &MlpNetwork,
    set: &LabeledSet,
    loss: LossKind,
    layer: usize,
    mode: TraceMode,
    seed: u64,
) -> Result<f64, FlatnessError> {
    let op = HessianOperator::new(net, set, loss, ParamSelector::Layer(layer))?;
    let tr = trace_estimate(&op, mode, seed)?;
    Ok(net.layers()[layer].weights.frobenius_norm_sq() * tr.trace)
}

/// ρ^l(j): one Hessian-vector product against column j of w_l and one inner
/// product.
pub fn rho_neuron(
    net: &MlpNetwork,
    set: &LabeledSet,
    loss: LossKind,
    layer: usize,
    column: usize,
) -> Result<f64, FlatnessError> {
    let sel = ParamSelector::NeuronColumn { layer, column };
    let op = HessianOperator::new(net, set, loss, sel)?;
    let w = &net.layers()[layer].weights;
    let wcol: Vec<f64> = (0..w.rows()).map(|r| w.get(r, column)).collect();
    let hw = op.apply(&wcol);
    Ok(dot(&wcol, &hw))
}

/// Fills the network aggregates from finished per-layer measures.
pub fn aggregate(layers: Vec<LayerMeasures>) -> Result<FlatnessReport, FlatnessError> {
    if layers.is_empty() {
        return Err(FlatnessError::MissingLayer);
    }
    let fold_max = |f: fn(&LayerMeasures) -> f64| {
        layers.iter().map(f).fold(f64::NEG_INFINITY, f64::max)
    };
    let fold_sum = |f: fn(&LayerMeasures) -> f64| layers.iter().map(f).sum::<f64>();
    let report = FlatnessReport {
        kappa_max: fold_max(|l| l.kappa),
        kappa_sum: fold_sum(|l| l.kappa),
        kappa_tau_max: fold_max(|l| l.kappa_tau),
        kappa_tau_sum: fold_sum(|l| l.kappa_tau),
        rho_max: fold_max(|l| l.rho),
        rho_sum: fold_sum(|l| l.rho_sigma),
        layers,
    };
    Ok(report)
}

fn measure_layer(
    net: &MlpNetwork,
    set: &LabeledSet,
    loss: LossKind,
    layer: usize,
    cfg: &MeasureConfig,
) -> Result<LayerMeasures, FlatnessError> {
    let op = HessianOperator::new(net, set, loss, ParamSelector::Layer(layer))?;
    let dim = op.dim();
    let spectral = SpectralConfig {
        max_iterations: cfg.max_iterations,
        tolerance: cfg.tolerance,
        seed: mix(cfg.seed, layer as u64),
        method: cfg.method.unwrap_or(if dim <= LANCZOS_DIM_LIMIT {
            SpectralMethod::Lanczos
        } else {
            SpectralMethod::Power
        }),
    };
    let (lam, residual, iterations, converged, min_ritz) = match lambda_max(&op, &spectral) {
        Ok(top) => (
            top.eigenvalue,
            top.residual,
            top.iterations,
            true,
            top.min_ritz,
        ),
        Err(NumlinError::DidNotConverge {
            estimate,
            residual,
            iterations,
        }) => (estimate, residual, iterations, false, None),
        Err(e) => return Err(e.into()),
    };
    let mode = match cfg.trace {
        TracePolicy::Auto => {
            if dim <= EXACT_TRACE_PARAM_LIMIT {
                TraceMode::ExactBasis
            } else {
                TraceMode::Hutchinson {
                    probes: DEFAULT_HUTCHINSON_PROBES,
                }
            }
        }
        TracePolicy::Force(mode) => mode,
    };
    let tr = trace_estimate(&op, mode, mix(cfg.seed, 1_000_000 + layer as u64))?;
    let w = &net.layers()[layer].weights;
    let weight_norm_sq = w.frobenius_norm_sq();
    let rho_neuron: Vec<f64> = (0..w.cols())
        .map(|j| {
            let wcol: Vec<f64> = (0..w.rows()).map(|r| w.get(r, j)).collect();
            op.column_quadratic_form(j, &wcol)
        })
        .collect();
    let rho = rho_neuron.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let rho_sigma = pairwise_sum(&rho_neuron);
    let trace_mode = match mode {
        TraceMode::ExactBasis => "exact_basis".to_string(),
        TraceMode::Hutchinson { probes } => format!("hutchinson({probes})"),
    };
    Ok(LayerMeasures {
        kappa: weight_norm_sq * lam,
        kappa_tau: weight_norm_sq * tr.trace,
        rho,
        rho_sigma,
        rho_neuron,
        weight_norm_sq,
        lambda_max: lam,
        trace: tr.trace,
        diagnostics: LayerDiagnostics {
            eig_residual: residual,
            eig_iterations: iterations,
            eig_converged: converged,
            min_ritz,
            psd_violation: min_ritz
                .is_some_and(|m| m < -cfg.tolerance * lam.abs().max(1.0)),
            trace_mode,
            trace_stderr: tr.stderr,
        },
    })
}

/// Computes every measure for every layer. Eigensolver iteration caps are
/// recorded in the diagnostics rather than failing the report; genuine
/// numerical errors (non-finite values) abort — a partial report is never
/// returned. Identical inputs and seed give a bit-identical report.
pub fn full_report(
    net: &MlpNetwork,
    set: &LabeledSet,
    loss: LossKind,
    cfg: &MeasureConfig,
) -> Result<FlatnessReport, FlatnessError> {
    let layers = (0..net.num_layers())
        .into_par_iter()
        .map(|l| measure_layer(net, set, loss, l, cfg))
        .collect::<Result<Vec<_>, _>>()?;
    aggregate(layers)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{Layer, Target};
    use crate::numlin::{dense_sym_eig, dot, DenseMatrix};
    use crate::oracle::{clear_of_kinks, fd_hessian, FdConfig};
    use crate::reparam::{self, ReparamFamily};
    use crate::rng::Stream;

    fn regression_fixture() -> (MlpNetwork, LabeledSet) {
        let net = MlpNetwork::new(vec![Layer::new(
            DenseMatrix::from_rows(&[vec![3.0, 4.0]]),
            vec![0.0],
        )
        .unwrap()])
        .unwrap();
        let set = LabeledSet::new(
            vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            vec![Target::Vector(vec![0.0]), Target::Vector(vec![0.0])],
        )
        .unwrap();
        (net, set)
    }

    fn random_net(shape: &[usize], seed: u64) -> MlpNetwork {
        let mut s = Stream::new(seed, 0);
        let layers = (1..shape.len())
            .map(|i| {
                let (rows, cols) = (shape[i], shape[i - 1]);
                let w = DenseMatrix::from_vec(
                    rows,
                    cols,
                    (0..rows * cols)
                        .map(|_| 0.8 * s.next_standard_normal())
                        .collect(),
                );
                let b: Vec<f64> = (0..rows).map(|_| 0.3 * s.next_standard_normal()).collect();
                Layer::new(w, b).unwrap()
            })
            .collect();
        MlpNetwork::new(layers).unwrap()
    }

    fn random_regression_set(n: usize, in_dim: usize, out_dim: usize, seed: u64) -> LabeledSet {
        let mut s = Stream::new(seed, 1);
        let inputs = (0..n)
            .map(|_| (0..in_dim).map(|_| s.next_standard_normal()).collect())
            .collect();
        let targets = (0..n)
            .map(|_| Target::Vector((0..out_dim).map(|_| s.next_standard_normal()).collect()))
            .collect();
        LabeledSet::new(inputs, targets).unwrap()
    }

    #[test]
    fn unmeasured_report_has_the_measured_schema() {
        let net = random_net(&[3, 4, 2], 9);
        let set = random_regression_set(6, 3, 2, 10);
        let measured =
            full_report(&net, &set, LossKind::Squared, &MeasureConfig::default()).unwrap();
        let placeholder = FlatnessReport::unmeasured(&net.shape());
        let keys = |r: &FlatnessReport| -> Vec<String> {
            r.to_key_values().into_iter().map(|(k, _)| k).collect()
        };
        assert_eq!(keys(&measured), keys(&placeholder));
        assert!(placeholder.to_key_values().iter().all(|(_, v)| v.is_nan()));
    }

    #[test]
    fn fixture_report_matches_hand_computation() {
        let (net, set) = regression_fixture();
        let report =
            full_report(&net, &set, LossKind::Squared, &MeasureConfig::default()).unwrap();
        assert_eq!(report.layers.len(), 1);
        let l = &report.layers[0];
        assert!((l.kappa - 25.0).abs() < 1e-9, "kappa {}", l.kappa);
        assert!((l.kappa_tau - 50.0).abs() < 1e-9, "kappa_tau {}", l.kappa_tau);
        assert!((l.rho_neuron[0] - 9.0).abs() < 1e-9);
        assert!((l.rho_neuron[1] - 16.0).abs() < 1e-9);
        assert!((l.rho - 16.0).abs() < 1e-9);
        assert!((l.rho_sigma - 25.0).abs() < 1e-9);
        assert!((l.weight_norm_sq - 25.0).abs() < 1e-12);
        assert!((l.lambda_max - 1.0).abs() < 1e-9);
        assert!((l.trace - 2.0).abs() < 1e-9);
        assert_eq!(report.kappa_max, l.kappa);
        assert_eq!(report.kappa_sum, l.kappa);
        assert_eq!(report.kappa_tau_max, l.kappa_tau);
        assert_eq!(report.kappa_tau_sum, l.kappa_tau);
        assert_eq!(report.rho_max, l.rho);
        assert_eq!(report.rho_sum, l.rho_sigma);
        assert!(l.diagnostics.eig_converged);
        assert!(!l.diagnostics.psd_violation);
        assert_eq!(l.diagnostics.trace_mode, "exact_basis");
        assert_eq!(l.diagnostics.trace_stderr, 0.0);
    }

    #[test]
    fn zero_weight_layer_measures_zero() {
        let net = MlpNetwork::new(vec![Layer::new(DenseMatrix::zeros(1, 2), vec![0.0]).unwrap()])
            .unwrap();
        let set = LabeledSet::new(
            vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            vec![Target::Vector(vec![0.5]), Target::Vector(vec![0.5])],
        )
        .unwrap();
        let report =
            full_report(&net, &set, LossKind::Squared, &MeasureConfig::default()).unwrap();
        let l = &report.layers[0];
        assert_eq!(l.kappa, 0.0);
        assert_eq!(l.kappa_tau, 0.0);
        assert_eq!(l.rho, 0.0);
        assert_eq!(l.rho_sigma, 0.0);
    }

    #[test]
    fn linear_regression_kappa_is_the_tikhonov_form() {
        let mut s = Stream::new(5, 0);
        let w = DenseMatrix::from_vec(1, 3, vec![0.4, -1.1, 2.0]);
        let net =
            MlpNetwork::new(vec![Layer::new(w.clone(), vec![0.2]).unwrap()]).unwrap();
        let n = 7;
        let inputs: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..3).map(|_| s.next_standard_normal()).collect())
            .collect();
        let targets = (0..n)
            .map(|_| Target::Vector(vec![s.next_standard_normal()]))
            .collect();
        let set = LabeledSet::new(inputs.clone(), targets).unwrap();
        let kappa = kappa_layer(
            &net,
            &set,
            LossKind::Squared,
            0,
            &SpectralConfig::auto(3, 1),
        )
        .unwrap();
        // (2/|S|) Σ x xᵀ is the exact Hessian of the mean squared error of a
        // linear model, so κ must equal ‖w‖² times its top eigenvalue.
        let mut gram = DenseMatrix::zeros(3, 3);
        for x in &inputs {
            for r in 0..3 {
                for c in 0..3 {
                    let v = gram.get(r, c) + 2.0 * x[r] * x[c] / n as f64;
                    gram.set(r, c, v);
                }
            }
        }
        let top = *dense_sym_eig(&gram).unwrap().last().unwrap();
        let want = w.frobenius_norm_sq() * top;
        assert!(
            (kappa - want).abs() <= 1e-9 * want.abs(),
            "kappa {kappa} vs tikhonov {want}"
        );
    }

    #[test]
    fn kappa_tau_dominates_kappa_on_psd_instances() {
        for seed in 0..5u64 {
            let net = random_net(&[3, 5, 4, 2], seed);
            let set = random_regression_set(8, 3, 2, seed + 50);
            let report =
                full_report(&net, &set, LossKind::Squared, &MeasureConfig::default()).unwrap();
            for (l, layer) in report.layers.iter().enumerate() {
                assert!(!layer.diagnostics.psd_violation, "seed {seed} layer {l}");
                assert!(
                    layer.kappa_tau >= layer.kappa * (1.0 - 1e-9),
                    "seed {seed} layer {l}: trace {} < lambda_max {}",
                    layer.trace,
                    layer.lambda_max
                );
            }
        }
    }

    #[test]
    fn rho_neuron_matches_dense_oracle_quadratic_form() {
        let mut found = false;
        for seed in 0..20u64 {
            let net = random_net(&[3, 4, 2], seed);
            let set = random_regression_set(6, 3, 2, seed + 31);
            if !clear_of_kinks(&net, &set, 1e-2).unwrap() {
                continue;
            }
            found = true;
            let cfg = FdConfig {
                base_step: 1e-6,
                ..FdConfig::default()
            };
            for (layer, column) in [(0usize, 1usize), (1, 2)] {
                let got =
                    rho_neuron(&net, &set, LossKind::Squared, layer, column).unwrap();
                let sel = ParamSelector::NeuronColumn { layer, column };
                let dense = fd_hessian(&net, &set, LossKind::Squared, sel, &cfg).unwrap();
                let w = &net.layers()[layer].weights;
                let wcol: Vec<f64> =
                    (0..w.rows()).map(|r| w.get(r, column)).collect();
                let hw = dense.matvec(&wcol);
                let want = dot(&wcol, &hw);
                assert!(
                    (got - want).abs() <= 1e-4 * want.abs().max(1e-12),
                    "seed {seed} layer {layer} col {column}: {got} vs {want}"
                );
            }
            break;
        }
        assert!(found, "no kink-free instance in 20 seeds");
    }

    #[test]
    fn zero_column_has_zero_rho() {
        let (mut net, set) = regression_fixture();
        net.layers_mut()[0].weights.set(0, 0, 0.0);
        let rho = rho_neuron(&net, &set, LossKind::Squared, 0, 0).unwrap();
        assert_eq!(rho, 0.0);
    }

    #[test]
    fn aggregate_arithmetic_is_table_exact() {
        let mk = |kappa: f64, kappa_tau: f64, rho_neuron: Vec<f64>| {
            let rho = rho_neuron.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let rho_sigma = rho_neuron.iter().sum();
            LayerMeasures {
                kappa,
                kappa_tau,
                rho,
                rho_sigma,
                rho_neuron,
                weight_norm_sq: 1.0,
                lambda_max: kappa,
                trace: kappa_tau,
                diagnostics: LayerDiagnostics {
                    eig_residual: 0.0,
                    eig_iterations: 1,
                    eig_converged: true,
                    min_ritz: None,
                    psd_violation: false,
                    trace_mode: "exact_basis".to_string(),
                    trace_stderr: 0.0,
                },
            }
        };
        let report = aggregate(vec![
            mk(2.0, 4.0, vec![9.0, 16.0]),
            mk(5.0, 1.0, vec![1.0, 2.0]),
            mk(3.0, 2.0, vec![7.0]),
        ])
        .unwrap();
        assert_eq!(report.kappa_max, 5.0);
        assert_eq!(report.kappa_sum, 10.0);
        assert_eq!(report.kappa_tau_max, 4.0);
        assert_eq!(report.kappa_tau_sum, 7.0);
        assert_eq!(report.layers[0].rho, 16.0);
        assert_eq!(report.layers[0].rho_sigma, 25.0);
        assert_eq!(report.rho_max, 16.0);
        assert_eq!(report.rho_sum, 25.0 + 3.0 + 7.0);
        assert!(matches!(
            aggregate(Vec::new()),
            Err(FlatnessError::MissingLayer)
        ));
    }

    #[test]
    fn aggregates_recompute_exactly_from_layers() {
        let net = random_net(&[4, 6, 3], 17);
        let set = random_regression_set(10, 4, 3, 18);
        let report =
            full_report(&net, &set, LossKind::Squared, &MeasureConfig::default()).unwrap();
        let again = aggregate(report.layers.clone()).unwrap();
        assert_eq!(report, again);
    }

    #[test]
    fn report_is_bit_identical_across_calls() {
        let net = random_net(&[3, 8, 5, 2], 23);
        let set = random_regression_set(12, 3, 2, 24);
        let cfg = MeasureConfig {
            seed: 99,
            trace: TracePolicy::Force(TraceMode::Hutchinson { probes: 16 }),
            ..MeasureConfig::default()
        };
        let a = full_report(&net, &set, LossKind::Squared, &cfg).unwrap();
        let b = full_report(&net, &set, LossKind::Squared, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn layerwise_rescaling_leaves_kappa_and_kappa_tau_invariant() {
        let net = random_net(&[3, 6, 4, 2], 29);
        let set = random_regression_set(8, 3, 2, 30);
        let spec =
            reparam::sample_random(&net.shape(), ReparamFamily::Layerwise, (5.0, 25.0), 3)
                .unwrap();
        let scaled = reparam::apply(&net, &spec).unwrap();
        let cfg = MeasureConfig::default();
        let before = full_report(&net, &set, LossKind::Squared, &cfg).unwrap();
        let after = full_report(&scaled, &set, LossKind::Squared, &cfg).unwrap();
        for (b, a) in before.layers.iter().zip(&after.layers) {
            assert!(
                (b.kappa - a.kappa).abs() <= 1e-6 * b.kappa.abs(),
                "kappa {} vs {}",
                b.kappa,
                a.kappa
            );
            assert!(
                (b.kappa_tau - a.kappa_tau).abs() <= 1e-6 * b.kappa_tau.abs(),
                "kappa_tau {} vs {}",
                b.kappa_tau,
                a.kappa_tau
            );
            // The raw top eigenvalue must NOT be invariant for a non-unit
            // factor; this is exactly what the normalization repairs.
        }
    }

    #[test]
    fn neuronwise_rescaling_leaves_rho_invariant() {
        let net = random_net(&[3, 6, 4, 2], 37);
        let set = random_regression_set(8, 3, 2, 38);
        let spec =
            reparam::sample_random(&net.shape(), ReparamFamily::Neuronwise, (5.0, 25.0), 4)
                .unwrap();
        let scaled = reparam::apply(&net, &spec).unwrap();
        let cfg = MeasureConfig::default();
        let before = full_report(&net, &set, LossKind::Squared, &cfg).unwrap();
        let after = full_report(&scaled, &set, LossKind::Squared, &cfg).unwrap();
        for (l, (b, a)) in before.layers.iter().zip(&after.layers).enumerate() {
            for (j, (rb, ra)) in b.rho_neuron.iter().zip(&a.rho_neuron).enumerate() {
                assert!(
                    (rb - ra).abs() <= 1e-6 * rb.abs().max(1e-300),
                    "layer {l} col {j}: {rb} vs {ra}"
                );
            }
        }
    }

    #[test]
    fn raw_lambda_max_is_not_invariant() {
        let net = random_net(&[3, 5, 2], 41);
        let set = random_regression_set(8, 3, 2, 42);
        let alpha = 3.0;
        let spec = crate::reparam::ReparamSpec::layerwise(vec![alpha, 1.0 / alpha]);
        let scaled = reparam::apply(&net, &spec).unwrap();
        let cfg = MeasureConfig::default();
        let before = full_report(&net, &set, LossKind::Squared, &cfg).unwrap();
        let after = full_report(&scaled, &set, LossKind::Squared, &cfg).unwrap();
        let ratio = after.layers[0].lambda_max / before.layers[0].lambda_max;
        assert!(
            (ratio - 1.0 / (alpha * alpha)).abs() <= 1e-4 / (alpha * alpha),
            "ratio {ratio}"
        );
    }

    #[test]
    fn hutchinson_policy_is_recorded_and_consistent() {
        let net = random_net(&[3, 5, 2], 47);
        let set = random_regression_set(8, 3, 2, 48);
        let exact = full_report(&net, &set, LossKind::Squared, &MeasureConfig::default())
            .unwrap();
        let cfg = MeasureConfig {
            trace: TracePolicy::Force(TraceMode::Hutchinson { probes: 256 }),
            ..MeasureConfig::default()
        };
        let probed = full_report(&net, &set, LossKind::Squared, &cfg).unwrap();
        for (e, p) in exact.layers.iter().zip(&probed.layers) {
            assert_eq!(p.diagnostics.trace_mode, "hutchinson(256)");
            let slack = 4.0 * p.diagnostics.trace_stderr + 1e-9 * e.trace.abs();
            assert!(
                (e.trace - p.trace).abs() <= slack,
                "trace {} vs probed {} (stderr {})",
                e.trace,
                p.trace,
                p.diagnostics.trace_stderr
            );
        }
    }

    #[test]
    fn iteration_cap_is_flagged_not_fatal() {
        let net = random_net(&[4, 6, 3], 53);
        let set = random_regression_set(10, 4, 3, 54);
        let cfg = MeasureConfig {
            max_iterations: 1,
            ..MeasureConfig::default()
        };
        let report = full_report(&net, &set, LossKind::Squared, &cfg).unwrap();
        assert!(report.layers.iter().any(|l| !l.diagnostics.eig_converged));
        for l in &report.layers {
            assert!(l.kappa.is_finite());
        }
    }

    #[test]
    fn key_values_are_complete_and_ordered() {
        let (net, set) = regression_fixture();
        let report =
            full_report(&net, &set, LossKind::Squared, &MeasureConfig::default()).unwrap();
        let kv = report.to_key_values();
        let keys: Vec<&str> = kv.iter().map(|(k, _)| k.as_str()).collect();
        assert_eq!(
            keys,
            vec![
                "kappa.l1",
                "kappa_tau.l1",
                "rho.l1",
                "rho_sigma.l1",
                "rho.l1.j1",
                "rho.l1.j2",
                "kappa_max",
                "kappa_sum",
                "kappa_tau_max",
                "kappa_tau_sum",
                "rho_max",
                "rho_sum"
            ]
        );
        let lookup = |k: &str| kv.iter().find(|(key, _)| key == k).unwrap().1;
        assert!((lookup("rho.l1.j1") - 9.0).abs() < 1e-9);
        assert!((lookup("rho.l1.j2") - 16.0).abs() < 1e-9);
    }

    #[test]
    fn report_serializes_round_trip() {
        let (net, set) = regression_fixture();
        let report =
            full_report(&net, &set, LossKind::Squared, &MeasureConfig::default()).unwrap();
        let json = serde_json::to_string(&report).unwrap();
        let back: FlatnessReport = serde_json::from_str(&json).unwrap();
        assert_eq!(report, back);
    }
}
