//! Function-preserving reparameterizations of ReLU networks.
//!
//! ReLU positive homogeneity, σ(λz) = λσ(z) for λ > 0, admits two rescaling
//! families that leave the network function untouched: layer-wise factors
//! whose product is one, and per-neuron factors compensated on the neuron's
//! outgoing weights. Both are constructed, validated, applied, and certified
//! here; the flatness measures are tested for invariance against them.

use crate::net::{forward, MlpNetwork};
use crate::rng::Stream;
use serde::{Deserialize, Serialize};
use std::fmt;

#[derive(Debug, Clone, PartialEq)]
pub enum ReparamError {
    /// The spec violates a validity rule (non-positive factor, layer product
    /// away from one, output-layer neuron, …).
    InvalidSpec { reason: String },
    ShapeMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },
    EmptyInterval { lo: f64, hi: f64 },
}

impl fmt::Display for ReparamError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ReparamError::InvalidSpec { reason } => write!(f, "invalid reparam spec: {reason}"),
            ReparamError::ShapeMismatch {
                context,
                expected,
                got,
            } => write!(f, "{context}: expected {expected}, got {got}"),
            ReparamError::EmptyInterval { lo, hi } => {
                write!(f, "factor interval [{lo}, {hi}] is not a positive interval")
            }
        }
    }
}

impl std::error::Error for ReparamError {}

/// One per-neuron rescaling: row `neuron` of layer `layer`'s weights and its
/// bias entry are multiplied by `lambda`, column `neuron` of the next
/// layer's weights by `1/lambda`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NeuronScale {
    pub layer: usize,
    pub neuron: usize,
    pub lambda: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ReparamKind {
    /// One factor per layer; the product must be 1 so the identity output
    /// layer keeps its scale.
    Layerwise { factors: Vec<f64> },
    /// Per-neuron factors on hidden neurons only.
    Neuronwise { scales: Vec<NeuronScale> },
}

/// Which family [`sample_random`] draws from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReparamFamily {
    Layerwise,
    Neuronwise,
}

impl ReparamFamily {
    pub fn name(self) -> &'static str {
        match self {
            ReparamFamily::Layerwise => "layerwise",
            ReparamFamily::Neuronwise => "neuronwise",
        }
    }
}

impl fmt::Display for ReparamFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for ReparamFamily {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "layerwise" => Ok(ReparamFamily::Layerwise),
            "neuronwise" => Ok(ReparamFamily::Neuronwise),
            other => Err(format!(
                "unknown reparameterization family '{other}' (expected layerwise or neuronwise)"
            )),
        }
    }
}

/// A function-preserving rescaling plan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReparamSpec {
    pub kind: ReparamKind,
    /// Seed used to generate the spec, when it was sampled.
    pub seed: Option<u64>,
}

impl ReparamSpec {
    pub fn layerwise(factors: Vec<f64>) -> Self {
        ReparamSpec {
            kind: ReparamKind::Layerwise { factors },
            seed: None,
        }
    }

    pub fn neuronwise(scales: Vec<NeuronScale>) -> Self {
        ReparamSpec {
            kind: ReparamKind::Neuronwise { scales },
            seed: None,
        }
    }

    /// The spec undoing this one.
    pub fn inverse(&self) -> ReparamSpec {
        let kind = match &self.kind {
            ReparamKind::Layerwise { factors } => ReparamKind::Layerwise {
                factors: factors.iter().map(|a| 1.0 / a).collect(),
            },
            ReparamKind::Neuronwise { scales } => ReparamKind::Neuronwise {
                scales: scales
                    .iter()
                    .map(|s| NeuronScale {
                        layer: s.layer,
                        neuron: s.neuron,
                        lambda: 1.0 / s.lambda,
                    })
                    .collect(),
            },
        };
        ReparamSpec { kind, seed: None }
    }

    /// Checks validity against a network shape (`[input, …, output]`).
    pub fn validate(&self, shape: &[usize]) -> Result<(), ReparamError> {
        let layers = shape.len() - 1;
        match &self.kind {
            ReparamKind::Layerwise { factors } => {
                if factors.len() != layers {
                    return Err(ReparamError::ShapeMismatch {
                        context: "layerwise factor count",
                        expected: layers,
                        got: factors.len(),
                    });
                }
                for &a in factors {
                    if !(a.is_finite() && a > 0.0) {
                        return Err(ReparamError::InvalidSpec {
                            reason: format!("factor {a} is not strictly positive and finite"),
                        });
                    }
                }
                let product: f64 = factors.iter().product();
                if (product - 1.0).abs() > 1e-12 {
                    return Err(ReparamError::InvalidSpec {
                        reason: format!(
                            "layer factors multiply to {product}, which changes the output scale"
                        ),
                    });
                }
            }
            ReparamKind::Neuronwise { scales } => {
                for s in scales {
                    if s.layer + 1 >= layers {
                        return Err(ReparamError::InvalidSpec {
                            reason: format!(
                                "neuron scale on layer {} but only layers 0..{} have a \
                                 downstream layer to compensate",
                                s.layer,
                                layers - 1
                            ),
                        });
                    }
                    let units = shape[s.layer + 1];
                    if s.neuron >= units {
                        return Err(ReparamError::ShapeMismatch {
                            context: "neuron index",
                            expected: units,
                            got: s.neuron,
                        });
                    }
                    if !(s.lambda.is_finite() && s.lambda > 0.0) {
                        return Err(ReparamError::InvalidSpec {
                            reason: format!(
                                "neuron factor {} is not strictly positive and finite",
                                s.lambda
                            ),
                        });
                    }
                }
            }
        }
        Ok(())
    }
}

/// Applies a spec, returning the rescaled network; the input is untouched.
pub fn apply(net: &MlpNetwork, spec: &ReparamSpec) -> Result<MlpNetwork, ReparamError> {
    spec.validate(&net.shape())?;
    let mut out = net.clone();
    match &spec.kind {
        ReparamKind::Layerwise { factors } => {
            let mut cumulative = 1.0;
            for (layer, &alpha) in out.layers_mut().iter_mut().zip(factors) {
                cumulative *= alpha;
                layer.weights.scale(alpha);
                for b in &mut layer.bias {
                    *b *= cumulative;
                }
            }
        }
        ReparamKind::Neuronwise { scales } => {
            for s in scales {
                let layers = out.layers_mut();
                {
                    let layer = &mut layers[s.layer];
                    for w in layer.weights.row_mut(s.neuron) {
                        *w *= s.lambda;
                    }
                    layer.bias[s.neuron] *= s.lambda;
                }
                let next = &mut layers[s.layer + 1];
                let inv = 1.0 / s.lambda;
                for r in 0..next.weights.rows() {
                    let v = next.weights.get(r, s.neuron) * inv;
                    next.weights.set(r, s.neuron, v);
                }
            }
        }
    }
    Ok(out)
}

/// Outcome of probing two networks for functional equality.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Certificate {
    pub max_abs_deviation: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub probes: usize,
}

/// Max-norm output deviation between two networks over `probes` standard
/// normal inputs plus the all-zeros vector and ±unit axes (kink coverage).
pub fn verify_function_preserving(
    a: &MlpNetwork,
    b: &MlpNetwork,
    probes: usize,
    seed: u64,
    tolerance: f64,
) -> Result<Certificate, ReparamError> {
    if a.input_dim() != b.input_dim() || a.output_dim() != b.output_dim() {
        return Err(ReparamError::ShapeMismatch {
            context: "probe networks input dimension",
            expected: a.input_dim(),
            got: b.input_dim(),
        });
    }
    let dim = a.input_dim();
    let mut stream = Stream::new(seed, 0);
    let mut max_dev = 0.0f64;
    let mut count = 0usize;
    let check = |x: &[f64], max_dev: &mut f64| {
        let ya = forward(a, x).expect("probe dimension matches");
        let yb = forward(b, x).expect("probe dimension matches");
        for (p, q) in ya.iter().zip(&yb) {
            *max_dev = max_dev.max((p - q).abs());
        }
    };
    check(&vec![0.0; dim], &mut max_dev);
    count += 1;
    for axis in 0..dim {
        for sign in [1.0, -1.0] {
            let mut x = vec![0.0; dim];
            x[axis] = sign;
            check(&x, &mut max_dev);
            count += 1;
        }
    }
    for _ in 0..probes {
        let x: Vec<f64> = (0..dim).map(|_| stream.next_standard_normal()).collect();
        check(&x, &mut max_dev);
        count += 1;
    }
    Ok(Certificate {
        max_abs_deviation: max_dev,
        tolerance,
        passed: max_dev <= tolerance,
        probes: count,
    })
}

/// Draws a valid random spec for a network shape.
///
/// Layerwise: L−1 factors uniform in `[lo, hi]`, the last the inverse of
/// their product — valid by construction. Neuronwise: each hidden neuron
/// joins an independent coin flip (at least one always joins), with λ
/// uniform in `[lo, hi]`.
pub fn sample_random(
    shape: &[usize],
    family: ReparamFamily,
    interval: (f64, f64),
    seed: u64,
) -> Result<ReparamSpec, ReparamError> {
    let (lo, hi) = interval;
    if !(lo.is_finite() && hi.is_finite()) || lo <= 0.0 || hi < lo {
        return Err(ReparamError::EmptyInterval { lo, hi });
    }
    let layers = shape.len() - 1;
    let mut stream = Stream::new(seed, 0);
    let uniform = |s: &mut Stream| lo + (hi - lo) * s.next_f64();
    let kind = match family {
        ReparamFamily::Layerwise => {
            let mut factors: Vec<f64> = (0..layers.saturating_sub(1))
                .map(|_| uniform(&mut stream))
                .collect();
            let product: f64 = factors.iter().product();
            factors.push(1.0 / product);
            ReparamKind::Layerwise { factors }
        }
        ReparamFamily::Neuronwise => {
            let mut scales = Vec::new();
            for l in 0..layers.saturating_sub(1) {
                for j in 0..shape[l + 1] {
                    if stream.next_u64() & 1 == 0 {
                        scales.push(NeuronScale {
                            layer: l,
                            neuron: j,
                            lambda: uniform(&mut stream),
                        });
                    }
                }
            }
            if scales.is_empty() && layers > 1 {
                scales.push(NeuronScale {
                    layer: 0,
                    neuron: 0,
                    lambda: uniform(&mut stream),
                });
            }
            ReparamKind::Neuronwise { scales }
        }
    };
    let spec = ReparamSpec {
        kind,
        seed: Some(seed),
    };
    spec.validate(shape)?;
    Ok(spec)
}
