//! Experiment configuration: JSON schema, built-in presets, validation,
//! and the content hash that makes run directories resumable.

use flatmeter_core::flatness::{MeasureConfig, TracePolicy};
use flatmeter_core::net::LossKind;
use flatmeter_core::numlin::{SpectralMethod, TraceMode, DEFAULT_HUTCHINSON_PROBES};
use flatmeter_core::reparam::ReparamFamily;
use flatmeter_core::trainer::{Convergence, InitScheme};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::path::{Path, PathBuf};

#[derive(Debug)]
pub enum ConfigError {
    EmptyGrid {
        what: &'static str,
    },
    ZeroRepeats,
    BadShape {
        reason: String,
    },
    ZipLengthMismatch {
        batches: usize,
        rates: usize,
    },
    BadField {
        field: &'static str,
        reason: String,
    },
    /// The output directory was produced by a different configuration.
    HashMismatch {
        dir: PathBuf,
        expected: String,
        got: String,
    },
    UnknownPreset {
        name: String,
    },
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConfigError::EmptyGrid { what } => write!(f, "grid field '{what}' is empty"),
            ConfigError::ZeroRepeats => write!(f, "repeat count must be at least 1"),
            ConfigError::BadShape { reason } => write!(f, "bad network shape: {reason}"),
            ConfigError::ZipLengthMismatch { batches, rates } => write!(
                f,
                "zip pairing needs equally many batch sizes and learning rates, got {batches} vs {rates}"
            ),
            ConfigError::BadField { field, reason } => write!(f, "config field '{field}': {reason}"),
            ConfigError::HashMismatch { dir, expected, got } => write!(
                f,
                "directory {} was created from a different config (hash {got}, this config is {expected})",
                dir.display()
            ),
            ConfigError::UnknownPreset { name } => {
                write!(f, "unknown preset '{name}' (available: appendix-c-desk, teacher-smoke)")
            }
        }
    }
}

impl std::error::Error for ConfigError {}

/// Where the train/test pair comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSpec {
    /// IDX files with the standard MNIST names under a directory. The
    /// directory defaults to `$FLATMETER_DATA` or `./data`; when the files
    /// are absent a deterministic synthetic image set is generated there
    /// so the pipeline stays runnable offline.
    Mnist {
        dir: Option<PathBuf>,
        train_subset: Option<usize>,
        test_subset: Option<usize>,
    },
    /// Regression data labeled by a frozen random teacher network.
    Teacher {
        seed: u64,
        input_dim: usize,
        hidden: Vec<usize>,
        n_train: usize,
        n_test: usize,
    },
}

/// How batch sizes and learning rates combine into grid cells.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pairing {
    /// Full cross product.
    Cross,
    /// Positionally paired lists (batch k with rate k).
    Zip,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub init_schemes: Vec<InitScheme>,
    pub batch_sizes: Vec<usize>,
    pub learning_rates: Vec<f64>,
    pub pairing: Pairing,
    pub repeats: usize,
    pub base_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSpec {
    pub max_epochs: usize,
    pub convergence: Convergence,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasurementSpec {
    /// 1-based layer indices for single-checkpoint inspection; `None`
    /// measures every layer (the record pipeline always does).
    pub layers: Option<Vec<usize>>,
    /// "auto", "exact", or "hutchinson:N".
    pub trace_mode: String,
    /// "auto", "lanczos", or "power".
    pub spectral_method: String,
    pub max_iterations: usize,
    pub tolerance: f64,
    /// Measure the Hessian on a stratified subset of the training set of
    /// this size (it is itself an empirical loss, just a cheaper one).
    pub subset: Option<usize>,
    /// Defaults to the grid's base seed.
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReparamStudySpec {
    pub family: ReparamFamily,
    pub interval: (f64, f64),
    pub repetitions: usize,
    pub certificate_probes: usize,
    pub certificate_tolerance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub name: String,
    pub dataset: DatasetSpec,
    pub shape: Vec<usize>,
    pub loss: LossKind,
    pub grid: GridSpec,
    pub training: TrainingSpec,
    pub measurement: MeasurementSpec,
    pub reparam: ReparamStudySpec,
}

impl ExperimentConfig {
    /// Validates structural invariants. Returns warnings (currently only
    /// the constant learning-rate/batch-size ratio rule) for the caller to
    /// print; warnings never fail the run.
    pub fn validate(&self) -> Result<Vec<String>, ConfigError> {
        if self.grid.init_schemes.is_empty() {
            return Err(ConfigError::EmptyGrid {
                what: "init_schemes",
            });
        }
        if self.grid.batch_sizes.is_empty() {
            return Err(ConfigError::EmptyGrid { what: "batch_sizes" });
        }
        if self.grid.learning_rates.is_empty() {
            return Err(ConfigError::EmptyGrid {
                what: "learning_rates",
            });
        }
        if self.grid.repeats == 0 {
            return Err(ConfigError::ZeroRepeats);
        }
        if self.shape.len() < 2 {
            return Err(ConfigError::BadShape {
                reason: format!("need at least input and output sizes, got {:?}", self.shape),
            });
        }
        if self.shape.contains(&0) {
            return Err(ConfigError::BadShape {
                reason: "zero-width layer".to_string(),
            });
        }
        if self.grid.pairing == Pairing::Zip
            && self.grid.batch_sizes.len() != self.grid.learning_rates.len()
        {
            return Err(ConfigError::ZipLengthMismatch {
                batches: self.grid.batch_sizes.len(),
                rates: self.grid.learning_rates.len(),
            });
        }
        if !(self.reparam.interval.0 > 0.0 && self.reparam.interval.1 >= self.reparam.interval.0)
        {
            return Err(ConfigError::BadField {
                field: "reparam.interval",
                reason: format!("{:?} is not a positive interval", self.reparam.interval),
            });
        }
        parse_trace_mode(&self.measurement.trace_mode).map_err(|reason| ConfigError::BadField {
            field: "measurement.trace_mode",
            reason,
        })?;
        parse_spectral_method(&self.measurement.spectral_method).map_err(|reason| {
            ConfigError::BadField {
                field: "measurement.spectral_method",
                reason,
            }
        })?;

        let mut warnings = Vec::new();
        let ratios: Vec<f64> = self
            .cells()
            .iter()
            .map(|c| c.learning_rate / c.batch_size as f64)
            .collect();
        if let (Some(lo), Some(hi)) = (
            ratios.iter().cloned().reduce(f64::min),
            ratios.iter().cloned().reduce(f64::max),
        ) {
            if hi - lo > 1e-12 * hi.abs() {
                warnings.push(format!(
                    "learning-rate/batch-size ratio is not constant across the grid \
                     ({lo:.3e}..{hi:.3e}); setups are not scale-matched"
                ));
            }
        }
        Ok(warnings)
    }

    /// All grid cells (without repeats) in a fixed deterministic order.
    pub fn cells(&self) -> Vec<GridCell> {
        let mut out = Vec::new();
        for &scheme in &self.grid.init_schemes {
            match self.grid.pairing {
                Pairing::Cross => {
                    for &batch in &self.grid.batch_sizes {
                        for &lr in &self.grid.learning_rates {
                            out.push(GridCell {
                                init_scheme: scheme,
                                batch_size: batch,
                                learning_rate: lr,
                            });
                        }
                    }
                }
                Pairing::Zip => {
                    for (&batch, &lr) in self.grid.batch_sizes.iter().zip(&self.grid.learning_rates)
                    {
                        out.push(GridCell {
                            init_scheme: scheme,
                            batch_size: batch,
                            learning_rate: lr,
                        });
                    }
                }
            }
        }
        out
    }

    /// Measurement configuration with strings and defaults resolved.
    pub fn measure_config(&self) -> MeasureConfig {
        MeasureConfig {
            max_iterations: self.measurement.max_iterations,
            tolerance: self.measurement.tolerance,
            seed: self.measurement.seed.unwrap_or(self.grid.base_seed),
            method: parse_spectral_method(&self.measurement.spectral_method)
                .expect("validated earlier"),
            trace: parse_trace_mode(&self.measurement.trace_mode).expect("validated earlier"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridCell {
    pub init_scheme: InitScheme,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl GridCell {
    pub fn run_id(&self, repeat: usize) -> String {
        format!(
            "{}-b{}-lr{}-r{}",
            self.init_scheme.name(),
            self.batch_size,
            self.learning_rate,
            repeat
        )
    }
}

pub fn parse_trace_mode(s: &str) -> Result<TracePolicy, String> {
    match s {
        "auto" => Ok(TracePolicy::Auto),
        "exact" => Ok(TracePolicy::Force(TraceMode::ExactBasis)),
        other => {
            if let Some(n) = other.strip_prefix("hutchinson:") {
                let probes: usize = n
                    .parse()
                    .map_err(|_| format!("bad probe count in '{other}'"))?;
                if probes == 0 {
                    return Err("hutchinson needs at least one probe".to_string());
                }
                Ok(TracePolicy::Force(TraceMode::Hutchinson { probes }))
            } else if other == "hutchinson" {
                Ok(TracePolicy::Force(TraceMode::Hutchinson {
                    probes: DEFAULT_HUTCHINSON_PROBES,
                }))
            } else {
                Err(format!(
                    "unknown trace mode '{other}' (expected auto, exact, hutchinson, or hutchinson:N)"
                ))
            }
        }
    }
}

pub fn parse_spectral_method(s: &str) -> Result<Option<SpectralMethod>, String> {
    match s {
        "auto" => Ok(None),
        "lanczos" => Ok(Some(SpectralMethod::Lanczos)),
        "power" => Ok(Some(SpectralMethod::Power)),
        other => Err(format!(
            "unknown spectral method '{other}' (expected auto, lanczos, or power)"
        )),
    }
}

/// FNV-1a over the canonical JSON encoding. Collision resistance is not a
/// goal; this only tells run directories and configs apart.
pub fn config_hash(cfg: &ExperimentConfig) -> String {
    let json = serde_json::to_string(cfg).expect("config serializes");
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in json.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    format!("{h:016x}")
}

pub fn load_config(path: &Path) -> anyhow::Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| anyhow::anyhow!("cannot read config {}: {e}", path.display()))?;
    let cfg: ExperimentConfig = serde_json::from_str(&text)
        .map_err(|e| anyhow::anyhow!("cannot parse config {}: {e}", path.display()))?;
    Ok(cfg)
}

/// Desk-scale analog of the paper's appendix experiment: a 10000/2000
/// image subset, the 784-50-50-50-30-10 network, and batch sizes paired
/// with learning rates at a constant ratio.
pub fn preset_appendix_c_desk() -> ExperimentConfig {
    ExperimentConfig {
        name: "appendix-c-desk".to_string(),
        dataset: DatasetSpec::Mnist {
            dir: None,
            train_subset: Some(10_000),
            test_subset: Some(2_000),
        },
        shape: vec![784, 50, 50, 50, 30, 10],
        loss: LossKind::SoftmaxCrossEntropy,
        grid: GridSpec {
            init_schemes: vec![InitScheme::XavierNormal],
            batch_sizes: vec![1_000, 2_000, 4_000, 8_000],
            // The classic ladder keeps lr/batch constant; its absolute
            // scale is tuned to this subset size — above 0.4 the top
            // batch rung collapses to chance level instead of converging.
            learning_rates: vec![0.05, 0.1, 0.2, 0.4],
            pairing: Pairing::Zip,
            repeats: 7,
            base_seed: 20,
        },
        training: TrainingSpec {
            max_epochs: 300,
            convergence: Convergence {
                train_error_threshold: 0.07,
                patience_epochs: 3,
            },
        },
        measurement: MeasurementSpec {
            layers: None,
            trace_mode: "auto".to_string(),
            // The first layer is 39200-dimensional; reorthogonalized
            // Lanczos converges in far fewer matvecs than shifted power
            // iteration there, and its basis fits comfortably in memory.
            spectral_method: "lanczos".to_string(),
            max_iterations: 400,
            tolerance: 1e-9,
            subset: Some(512),
            seed: None,
        },
        reparam: ReparamStudySpec {
            family: ReparamFamily::Layerwise,
            interval: (5.0, 25.0),
            repetitions: 1,
            certificate_probes: 8,
            certificate_tolerance: 1e-10,
        },
    }
}

/// Fast pure-synthetic pipeline exercise: a teacher-labeled regression
/// task small enough to train, measure, reparameterize, and correlate in
/// well under a minute.
pub fn preset_teacher_smoke() -> ExperimentConfig {
    ExperimentConfig {
        name: "teacher-smoke".to_string(),
        dataset: DatasetSpec::Teacher {
            seed: 7,
            input_dim: 6,
            hidden: vec![10, 8],
            n_train: 256,
            n_test: 128,
        },
        shape: vec![6, 10, 8, 1],
        loss: LossKind::Squared,
        grid: GridSpec {
            init_schemes: vec![InitScheme::XavierNormal],
            batch_sizes: vec![32, 64],
            learning_rates: vec![0.05, 0.1],
            pairing: Pairing::Zip,
            repeats: 3,
            base_seed: 11,
        },
        training: TrainingSpec {
            max_epochs: 300,
            convergence: Convergence {
                train_error_threshold: 0.02,
                patience_epochs: 3,
            },
        },
        measurement: MeasurementSpec {
            layers: None,
            trace_mode: "auto".to_string(),
            spectral_method: "auto".to_string(),
            max_iterations: 1000,
            tolerance: 1e-9,
            subset: None,
            seed: None,
        },
        reparam: ReparamStudySpec {
            family: ReparamFamily::Layerwise,
            interval: (5.0, 25.0),
            repetitions: 1,
            certificate_probes: 8,
            certificate_tolerance: 1e-10,
        },
    }
}

pub fn preset(name: &str) -> Result<ExperimentConfig, ConfigError> {
    match name {
        "appendix-c-desk" => Ok(preset_appendix_c_desk()),
        "teacher-smoke" => Ok(preset_teacher_smoke()),
        other => Err(ConfigError::UnknownPreset {
            name: other.to_string(),
        }),
    }
}
