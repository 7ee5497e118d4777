//! Initialization schemes and plain SGD, for growing populations of
//! distinct local minima.
//!
//! Training is deterministic per (config, dataset): the epoch shuffle is
//! derived from the run seed and the epoch index alone, so a rerun
//! reproduces the parameter trajectory bit for bit. "Train error" means
//! classification error for cross-entropy tasks and mean squared loss for
//! regression tasks; convergence is declared after the error stays at or
//! below the threshold for `patience` consecutive epochs, evaluated exactly
//! on the full training set after every epoch.

use crate::net::{
    classification_error, empirical_error, gradient_indexed, LabeledSet, LossKind, MlpNetwork,
    NetError, Workspace,
};
use crate::rng::Stream;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

#[derive(Debug, Clone, PartialEq)]
pub enum TrainError {
    UnknownScheme { name: String },
    InvalidShape { reason: String },
    InvalidBatch { batch_size: usize, samples: usize },
    Net(NetError),
}

impl fmt::Display for TrainError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrainError::UnknownScheme { name } => {
                write!(f, "unknown initialization scheme '{name}'")
            }
            TrainError::InvalidShape { reason } => write!(f, "invalid network shape: {reason}"),
            TrainError::InvalidBatch {
                batch_size,
                samples,
            } => write!(
                f,
                "batch size {batch_size} invalid for a training set of {samples} samples"
            ),
            TrainError::Net(e) => e.fmt(f),
        }
    }
}

impl std::error::Error for TrainError {}

impl From<NetError> for TrainError {
    fn from(e: NetError) -> Self {
        TrainError::Net(e)
    }
}

/// Weight initialization schemes. Biases always start at zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    /// Normal with std √(2/(fan_in+fan_out)).
    XavierNormal,
    /// Uniform in ±√(6/fan_in).
    KaimingUniform,
    /// Uniform in (−0.1, 0.1).
    UniformPm01,
    /// Normal with mean 0 and variance 0.1.
    NormalSigma,
}

impl InitScheme {
    pub const ALL: [InitScheme; 4] = [
        InitScheme::XavierNormal,
        InitScheme::KaimingUniform,
        InitScheme::UniformPm01,
        InitScheme::NormalSigma,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            InitScheme::XavierNormal => "xavier_normal",
            InitScheme::KaimingUniform => "kaiming_uniform",
            InitScheme::UniformPm01 => "uniform_pm01",
            InitScheme::NormalSigma => "normal_sigma",
        }
    }
}

impl fmt::Display for InitScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for InitScheme {
    type Err = TrainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        InitScheme::ALL
            .iter()
            .copied()
            .find(|scheme| scheme.name() == s)
            .ok_or_else(|| TrainError::UnknownScheme {
                name: s.to_string(),
            })
    }
}

/// Stopping rule: converged once train error ≤ `train_error_threshold` for
/// `patience_epochs` consecutive epochs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Convergence {
    pub train_error_threshold: f64,
    pub patience_epochs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub init_scheme: InitScheme,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub max_epochs: usize,
    pub convergence: Convergence,
    pub loss: LossKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub network: MlpNetwork,
    pub epochs_run: usize,
    /// Train error after the last completed epoch (+∞ for diverged runs).
    pub final_train_error: f64,
    pub converged: bool,
    /// Training hit non-finite values; the run is kept for the record but
    /// its network is the last finite iterate.
    pub diverged: bool,
    /// Train error after each completed epoch.
    pub error_history: Vec<f64>,
}

/// Fresh network with weights drawn per scheme and zero biases,
/// deterministic in the seed.
pub fn initialize(
    shape: &[usize],
    scheme: InitScheme,
    seed: u64,
) -> Result<MlpNetwork, TrainError> {
    if shape.len() < 2 {
        return Err(TrainError::InvalidShape {
            reason: format!("need at least input and output sizes, got {shape:?}"),
        });
    }
    if shape.contains(&0) {
        return Err(TrainError::InvalidShape {
            reason: format!("zero-sized layer in {shape:?}"),
        });
    }
    let mut stream = Stream::new(seed, 0);
    let layers = (1..shape.len())
        .map(|i| {
            let (rows, cols) = (shape[i], shape[i - 1]);
            let entries: Vec<f64> = (0..rows * cols)
                .map(|_| match scheme {
                    InitScheme::XavierNormal => {
                        (2.0 / (cols + rows) as f64).sqrt() * stream.next_standard_normal()
                    }
                    InitScheme::KaimingUniform => {
                        (6.0 / cols as f64).sqrt() * (2.0 * stream.next_f64() - 1.0)
                    }
                    InitScheme::UniformPm01 => 0.1 * (2.0 * stream.next_f64() - 1.0),
                    InitScheme::NormalSigma => 0.1f64.sqrt() * stream.next_standard_normal(),
                })
                .collect();
            let weights = crate::numlin::DenseMatrix::from_vec(rows, cols, entries);
            crate::net::Layer::new(weights, vec![0.0; rows]).map_err(TrainError::from)
        })
        .collect::<Result<Vec<_>, _>>()?;
    MlpNetwork::new(layers).map_err(TrainError::from)
}

/// The stopping-rule metric: classification error for cross-entropy,
/// mean loss for squared error.
pub fn train_error(
    net: &MlpNetwork,
    set: &LabeledSet,
    loss: LossKind,
) -> Result<f64, NetError> {
    match loss {
        LossKind::Squared => empirical_error(net, set, loss),
        LossKind::SoftmaxCrossEntropy => classification_error(net, set),
    }
}

fn shuffle(perm: &mut [usize], stream: &mut Stream) {
    for i in (1..perm.len()).rev() {
        let j = (stream.next_u64() % (i as u64 + 1)) as usize;
        perm.swap(i, j);
    }
}

fn apply_step(net: &mut MlpNetwork, grad: &[f64], lr: f64) {
    let mut offset = 0;
    for layer in net.layers_mut() {
        for w in layer.weights.entries_mut() {
            *w -= lr * grad[offset];
            offset += 1;
        }
        for b in &mut layer.bias {
            *b -= lr * grad[offset];
            offset += 1;
        }
    }
}

/// Plain SGD: no momentum, no weight decay, per-epoch reshuffle from the
/// run seed, `w ← w − lr·g(batch)`. Non-finite losses or parameters mark
/// the outcome diverged instead of failing.
pub fn sgd_train(
    net: &MlpNetwork,
    train: &LabeledSet,
    cfg: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    if cfg.batch_size == 0 || cfg.batch_size > train.len() {
        return Err(TrainError::InvalidBatch {
            batch_size: cfg.batch_size,
            samples: train.len(),
        });
    }
    let mut current = net.clone();
    let mut ws = Workspace::for_net(&current);
    let mut perm: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::new();
    let mut epochs_run = 0;
    let mut streak = 0;
    let mut converged = false;
    let mut diverged = false;
    for epoch in 0..cfg.max_epochs {
        let mut stream = Stream::new(cfg.seed, 1 + epoch as u64);
        shuffle(&mut perm, &mut stream);
        let mut snapshot = current.clone();
        for batch in perm.chunks(cfg.batch_size) {
            match gradient_indexed(&current, train, batch, cfg.loss, &mut ws) {
                Ok(grad) => apply_step(&mut current, &grad, cfg.learning_rate),
                Err(NetError::NonFinite { .. }) => {
                    diverged = true;
                    break;
                }
                Err(e) => return Err(e.into()),
            }
        }
        if !diverged && !current.is_finite() {
            diverged = true;
        }
        if diverged {
            // Keep the last finite iterate for the record.
            std::mem::swap(&mut current, &mut snapshot);
            epochs_run = epoch + 1;
            break;
        }
        let err = match train_error(&current, train, cfg.loss) {
            Ok(e) if e.is_finite() => e,
            Ok(_) | Err(NetError::NonFinite { .. }) => {
                std::mem::swap(&mut current, &mut snapshot);
                diverged = true;
                epochs_run = epoch + 1;
                break;
            }
            Err(e) => return Err(e.into()),
        };
        history.push(err);
        epochs_run = epoch + 1;
        if err <= cfg.convergence.train_error_threshold {
            streak += 1;
        } else {
            streak = 0;
        }
        if streak >= cfg.convergence.patience_epochs {
            converged = true;
            break;
        }
    }
    let final_train_error = if diverged {
        f64::INFINITY
    } else if let Some(&last) = history.last() {
        last
    } else {
        train_error(&current, train, cfg.loss)?
    };
    Ok(TrainOutcome {
        network: current,
        epochs_run,
        final_train_error,
        converged,
        diverged,
        error_history: history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{forward, Target};

    fn sample_std(values: &[f64]) -> f64 {
        let n = values.len() as f64;
        let mean: f64 = values.iter().sum::<f64>() / n;
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    }

    fn all_weights(net: &MlpNetwork) -> Vec<f64> {
        net.layers()
            .iter()
            .flat_map(|l| l.weights.entries().iter().copied())
            .collect()
    }

    #[test]
    fn initialization_is_deterministic_per_seed() {
        for scheme in InitScheme::ALL {
            let a = initialize(&[5, 8, 3], scheme, 7).unwrap();
            let b = initialize(&[5, 8, 3], scheme, 7).unwrap();
            let c = initialize(&[5, 8, 3], scheme, 8).unwrap();
            assert_eq!(a, b);
            assert_ne!(a, c);
        }
    }

    #[test]
    fn biases_start_at_zero() {
        for scheme in InitScheme::ALL {
            let net = initialize(&[4, 6, 2], scheme, 1).unwrap();
            for layer in net.layers() {
                assert!(layer.bias.iter().all(|&b| b == 0.0));
            }
        }
    }

    #[test]
    fn uniform_pm01_stays_in_its_interval() {
        let net = initialize(&[50, 50], InitScheme::UniformPm01, 3).unwrap();
        let w = all_weights(&net);
        assert!(w.iter().all(|&v| v.abs() < 0.1));
        assert!(w.iter().any(|&v| v.abs() > 0.05), "suspiciously narrow");
    }

    #[test]
    fn normal_sigma_std_matches_sqrt_point_one() {
        let net = initialize(&[100, 100], InitScheme::NormalSigma, 5).unwrap();
        let std = sample_std(&all_weights(&net));
        let want = 0.1f64.sqrt();
        assert!(
            (std - want).abs() <= 0.05 * want,
            "std {std} vs {want}"
        );
    }

    #[test]
    fn xavier_normal_std_matches_fan_formula() {
        let net = initialize(&[50, 50], InitScheme::XavierNormal, 9).unwrap();
        let std = sample_std(&all_weights(&net));
        let want = (2.0f64 / 100.0).sqrt();
        assert!(
            (std - want).abs() <= 0.05 * want,
            "std {std} vs {want}"
        );
    }

    #[test]
    fn kaiming_uniform_respects_its_bound() {
        let net = initialize(&[24, 40], InitScheme::KaimingUniform, 11).unwrap();
        let bound = (6.0f64 / 24.0).sqrt();
        let w = all_weights(&net);
        assert!(w.iter().all(|&v| v.abs() <= bound));
        let max = w.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
        assert!(max > 0.9 * bound, "bound never approached: {max} vs {bound}");
    }

    #[test]
    fn scheme_names_round_trip() {
        for scheme in InitScheme::ALL {
            assert_eq!(scheme.name().parse::<InitScheme>().unwrap(), scheme);
        }
        assert!(matches!(
            "glorot".parse::<InitScheme>(),
            Err(TrainError::UnknownScheme { .. })
        ));
    }

    fn teacher_regression_set(n: usize, seed: u64) -> LabeledSet {
        let teacher = initialize(&[2, 4, 1], InitScheme::NormalSigma, seed).unwrap();
        let mut s = Stream::new(seed, 9);
        let inputs: Vec<Vec<f64>> = (0..n)
            .map(|_| vec![s.next_standard_normal(), s.next_standard_normal()])
            .collect();
        let targets = inputs
            .iter()
            .map(|x| Target::Vector(forward(&teacher, x).unwrap()))
            .collect();
        LabeledSet::new(inputs, targets).unwrap()
    }

    fn base_config() -> TrainConfig {
        TrainConfig {
            init_scheme: InitScheme::XavierNormal,
            batch_size: 16,
            learning_rate: 0.05,
            seed: 13,
            max_epochs: 2000,
            convergence: Convergence {
                train_error_threshold: 1e-3,
                patience_epochs: 5,
            },
            loss: LossKind::Squared,
        }
    }

    #[test]
    fn zero_learning_rate_changes_nothing() {
        let set = teacher_regression_set(32, 1);
        let net = initialize(&[2, 8, 1], InitScheme::XavierNormal, 2).unwrap();
        let cfg = TrainConfig {
            learning_rate: 0.0,
            max_epochs: 3,
            ..base_config()
        };
        let out = sgd_train(&net, &set, &cfg).unwrap();
        assert_eq!(out.network, net);
        assert_eq!(out.epochs_run, 3);
        assert!(!out.diverged);
    }

    #[test]
    fn student_learns_the_teacher() {
        let set = teacher_regression_set(64, 3);
        let net = initialize(&[2, 8, 1], InitScheme::XavierNormal, 4).unwrap();
        let out = sgd_train(&net, &set, &base_config()).unwrap();
        assert!(out.converged, "final error {}", out.final_train_error);
        assert!(out.final_train_error <= 1e-3);
        assert!(!out.diverged);
        assert_eq!(out.error_history.len(), out.epochs_run);
        // Patience means the last five epochs were all at or below threshold.
        let tail = &out.error_history[out.error_history.len() - 5..];
        assert!(tail.iter().all(|&e| e <= 1e-3));
    }

    #[test]
    fn training_is_bit_deterministic() {
        let set = teacher_regression_set(48, 5);
        let net = initialize(&[2, 6, 1], InitScheme::UniformPm01, 6).unwrap();
        let cfg = TrainConfig {
            max_epochs: 50,
            ..base_config()
        };
        let a = sgd_train(&net, &set, &cfg).unwrap();
        let b = sgd_train(&net, &set, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn absurd_learning_rate_diverges_gracefully() {
        let set = teacher_regression_set(32, 7);
        let net = initialize(&[2, 8, 1], InitScheme::NormalSigma, 8).unwrap();
        let cfg = TrainConfig {
            learning_rate: 1e8,
            max_epochs: 50,
            ..base_config()
        };
        let out = sgd_train(&net, &set, &cfg).unwrap();
        assert!(out.diverged);
        assert!(!out.converged);
        assert!(out.final_train_error.is_infinite());
        assert!(out.network.is_finite(), "last finite iterate kept");
        assert!(out.epochs_run <= 50);
    }

    #[test]
    fn oversized_batch_is_rejected() {
        let set = teacher_regression_set(8, 9);
        let net = initialize(&[2, 4, 1], InitScheme::UniformPm01, 1).unwrap();
        let cfg = TrainConfig {
            batch_size: 9,
            ..base_config()
        };
        assert!(matches!(
            sgd_train(&net, &set, &cfg),
            Err(TrainError::InvalidBatch { .. })
        ));
    }

    #[test]
    fn cross_entropy_uses_classification_error() {
        let mut s = Stream::new(11, 0);
        let inputs: Vec<Vec<f64>> = (0..40)
            .map(|i| {
                let center = if i % 2 == 0 { 2.0 } else { -2.0 };
                vec![
                    center + 0.3 * s.next_standard_normal(),
                    center + 0.3 * s.next_standard_normal(),
                ]
            })
            .collect();
        let targets = (0..40).map(|i| Target::Class(i % 2)).collect();
        let set = LabeledSet::new(inputs, targets).unwrap();
        let net = initialize(&[2, 8, 2], InitScheme::XavierNormal, 12).unwrap();
        let cfg = TrainConfig {
            loss: LossKind::SoftmaxCrossEntropy,
            batch_size: 8,
            learning_rate: 0.1,
            max_epochs: 500,
            convergence: Convergence {
                train_error_threshold: 0.0,
                patience_epochs: 3,
            },
            ..base_config()
        };
        let out = sgd_train(&net, &set, &cfg).unwrap();
        assert!(out.converged, "final error {}", out.final_train_error);
        assert_eq!(out.final_train_error, 0.0);
    }

    #[test]
    fn config_serializes_round_trip() {
        let cfg = base_config();
        let json = serde_json::to_string(&cfg).unwrap();
        let back: TrainConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(cfg, back);
    }
}
