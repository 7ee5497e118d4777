//! ReLU multilayer-perceptron engine: forward evaluation, empirical error,
//! gradients, and Hessian-vector products restricted to parameter subspaces.
//!
//! Parameter layout is fixed everywhere: layers in order, each layer's
//! weights row-major, then its bias. Checkpoints, selectors, and the
//! trainer all rely on that ordering.

mod hvp;

pub use hvp::{hvp, HessianOperator};

use crate::numlin::{pairwise_sum, DenseMatrix};
use serde::{Deserialize, Serialize};
use std::fmt;

/// Errors from network construction and evaluation.
#[derive(Debug, Clone, PartialEq)]
pub enum NetError {
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },
    NonFinite {
        context: &'static str,
    },
    EmptySet,
    InvalidLayer {
        layer: usize,
        layers: usize,
    },
    InvalidColumn {
        column: usize,
        cols: usize,
    },
    /// A loss/target pairing that makes no sense (e.g. cross-entropy with a
    /// vector target).
    TargetKindMismatch {
        context: &'static str,
    },
}

impl fmt::Display for NetError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NetError::DimensionMismatch {
                context,
                expected,
                got,
            } => write!(f, "{context}: expected dimension {expected}, got {got}"),
            NetError::NonFinite { context } => write!(f, "{context}: non-finite value"),
            NetError::EmptySet => write!(f, "labeled set must contain at least one sample"),
            NetError::InvalidLayer { layer, layers } => {
                write!(f, "layer index {layer} out of range (network has {layers})")
            }
            NetError::InvalidColumn { column, cols } => {
                write!(f, "column index {column} out of range (layer has {cols})")
            }
            NetError::TargetKindMismatch { context } => {
                write!(f, "{context}: target kind does not match the loss")
            }
        }
    }
}

impl std::error::Error for NetError {}

/// One affine layer: `z = W a + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weights: DenseMatrix,
    pub bias: Vec<f64>,
}

impl Layer {
    pub fn new(weights: DenseMatrix, bias: Vec<f64>) -> Result<Self, NetError> {
        if bias.len() != weights.rows() {
            return Err(NetError::DimensionMismatch {
                context: "layer bias length",
                expected: weights.rows(),
                got: bias.len(),
            });
        }
        Ok(Layer { weights, bias })
    }

    pub fn out_dim(&self) -> usize {
        self.weights.rows()
    }

    pub fn in_dim(&self) -> usize {
        self.weights.cols()
    }
}

/// ReLU multilayer perceptron: hidden activations are ReLU, the output
/// layer is identity (any output nonlinearity is absorbed into the loss).
#[derive(Debug, Clone, PartialEq)]
pub struct MlpNetwork {
    layers: Vec<Layer>,
}

impl MlpNetwork {
    pub fn new(layers: Vec<Layer>) -> Result<Self, NetError> {
        if layers.is_empty() {
            return Err(NetError::DimensionMismatch {
                context: "network layer count",
                expected: 1,
                got: 0,
            });
        }
        for i in 1..layers.len() {
            if layers[i].in_dim() != layers[i - 1].out_dim() {
                return Err(NetError::DimensionMismatch {
                    context: "adjacent layer dimensions",
                    expected: layers[i - 1].out_dim(),
                    got: layers[i].in_dim(),
                });
            }
        }
        for layer in &layers {
            if !layer.weights.is_finite() || layer.bias.iter().any(|v| !v.is_finite()) {
                return Err(NetError::NonFinite {
                    context: "network parameters",
                });
            }
        }
        Ok(MlpNetwork { layers })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("nonempty").out_dim()
    }

    /// `[input, hidden…, output]` unit counts.
    pub fn shape(&self) -> Vec<usize> {
        let mut s = vec![self.input_dim()];
        s.extend(self.layers.iter().map(|l| l.out_dim()));
        s
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.rows() * l.weights.cols() + l.bias.len())
            .sum()
    }

    /// Flattens all parameters: per layer, weights row-major then bias.
    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for layer in &self.layers {
            out.extend_from_slice(layer.weights.entries());
            out.extend_from_slice(&layer.bias);
        }
        out
    }

    /// Overwrites all parameters from [`Self::params_flat`] layout. Values
    /// are taken as-is (divergence detection is the caller's business).
    pub fn set_params_flat(&mut self, params: &[f64]) -> Result<(), NetError> {
        if params.len() != self.param_count() {
            return Err(NetError::DimensionMismatch {
                context: "flat parameter vector",
                expected: self.param_count(),
                got: params.len(),
            });
        }
        let mut offset = 0;
        for layer in &mut self.layers {
            let w = layer.weights.entries_mut();
            w.copy_from_slice(&params[offset..offset + w.len()]);
            offset += w.len();
            let b = layer.bias.len();
            layer.bias.copy_from_slice(&params[offset..offset + b]);
            offset += b;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.is_finite() && l.bias.iter().all(|v| v.is_finite()))
    }
}

/// Loss attached to the network output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Σ (ŷᵢ − yᵢ)², target is a vector of output dimension.
    Squared,
    /// Softmax fused into cross-entropy via a stable log-sum-exp; target is
    /// a class index.
    SoftmaxCrossEntropy,
}

/// Supervision for one sample.
#[derive(Debug, Clone, PartialEq)]
pub enum Target {
    Vector(Vec<f64>),
    Class(usize),
}

/// An immutable labeled dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSet {
    inputs: Vec<Vec<f64>>,
    targets: Vec<Target>,
}

impl LabeledSet {
    pub fn new(inputs: Vec<Vec<f64>>, targets: Vec<Target>) -> Result<Self, NetError> {
        if inputs.is_empty() {
            return Err(NetError::EmptySet);
        }
        if inputs.len() != targets.len() {
            return Err(NetError::DimensionMismatch {
                context: "targets per input",
                expected: inputs.len(),
                got: targets.len(),
            });
        }
        let dim = inputs[0].len();
        for x in &inputs {
            if x.len() != dim {
                return Err(NetError::DimensionMismatch {
                    context: "input dimension",
                    expected: dim,
                    got: x.len(),
                });
            }
        }
        Ok(LabeledSet { inputs, targets })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.inputs[0].len()
    }

    pub fn input(&self, i: usize) -> &[f64] {
        &self.inputs[i]
    }

    pub fn target(&self, i: usize) -> &Target {
        &self.targets[i]
    }

    pub fn inputs(&self) -> &[Vec<f64>] {
        &self.inputs
    }

    pub fn targets(&self) -> &[Target] {
        &self.targets
    }

    /// New set holding clones of the selected samples (index order kept).
    pub fn subset(&self, indices: &[usize]) -> Result<LabeledSet, NetError> {
        let inputs = indices.iter().map(|&i| self.inputs[i].clone()).collect();
        let targets = indices.iter().map(|&i| self.targets[i].clone()).collect();
        LabeledSet::new(inputs, targets)
    }
}

/// Which weight entries a restricted Hessian ranges over. Biases are never
/// selected: the layer factorization behind the flatness measures puts them
/// in the outer function, and ‖vec w‖ is a weight-matrix norm.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamSelector {
    /// All weights of layer `l` (0-based).
    Layer(usize),
    /// Column `j` of layer `l`'s weight matrix: the weights multiplying
    /// input coordinate `j`, i.e. the fan-out of the previous layer's
    /// neuron `j` under the `w·x` orientation.
    NeuronColumn { layer: usize, column: usize },
}

impl ParamSelector {
    pub fn layer_index(&self) -> usize {
        match *self {
            ParamSelector::Layer(l) => l,
            ParamSelector::NeuronColumn { layer, .. } => layer,
        }
    }

    pub fn validate(&self, net: &MlpNetwork) -> Result<(), NetError> {
        let l = self.layer_index();
        if l >= net.num_layers() {
            return Err(NetError::InvalidLayer {
                layer: l,
                layers: net.num_layers(),
            });
        }
        if let ParamSelector::NeuronColumn { column, .. } = *self {
            let cols = net.layers()[l].weights.cols();
            if column >= cols {
                return Err(NetError::InvalidColumn { column, cols });
            }
        }
        Ok(())
    }

    /// Number of selected weight entries.
    pub fn param_count(&self, net: &MlpNetwork) -> usize {
        let w = &net.layers()[self.layer_index()].weights;
        match *self {
            ParamSelector::Layer(_) => w.rows() * w.cols(),
            ParamSelector::NeuronColumn { .. } => w.rows(),
        }
    }
}

/// Reads the selected weights as a flat vector (layer weights row-major, or
/// a single column top to bottom).
pub fn selected_weights(net: &MlpNetwork, sel: ParamSelector) -> Result<Vec<f64>, NetError> {
    sel.validate(net)?;
    let w = &net.layers()[sel.layer_index()].weights;
    Ok(match sel {
        ParamSelector::Layer(_) => w.entries().to_vec(),
        ParamSelector::NeuronColumn { column, .. } => {
            (0..w.rows()).map(|r| w.get(r, column)).collect()
        }
    })
}

/// Writes the selected weights back; inverse of [`selected_weights`].
pub fn set_selected_weights(
    net: &mut MlpNetwork,
    sel: ParamSelector,
    values: &[f64],
) -> Result<(), NetError> {
    sel.validate(net)?;
    let expected = sel.param_count(net);
    if values.len() != expected {
        return Err(NetError::DimensionMismatch {
            context: "selected weight vector",
            expected,
            got: values.len(),
        });
    }
    let w = &mut net.layers_mut()[sel.layer_index()].weights;
    match sel {
        ParamSelector::Layer(_) => w.entries_mut().copy_from_slice(values),
        ParamSelector::NeuronColumn { column, .. } => {
            for (r, &v) in values.iter().enumerate() {
                w.set(r, column, v);
            }
        }
    }
    Ok(())
}

/// Flat-layout parameter indices of the selected weights, in the same order
/// [`selected_weights`] reads them. Gradients share the parameter layout, so
/// this also pulls the selected block out of a gradient vector.
pub fn selected_param_indices(
    net: &MlpNetwork,
    sel: ParamSelector,
) -> Result<Vec<usize>, NetError> {
    sel.validate(net)?;
    let l = sel.layer_index();
    let mut offset = 0;
    for layer in &net.layers()[..l] {
        offset += layer.weights.rows() * layer.weights.cols() + layer.bias.len();
    }
    let w = &net.layers()[l].weights;
    let (rows, cols) = (w.rows(), w.cols());
    Ok(match sel {
        ParamSelector::Layer(_) => (offset..offset + rows * cols).collect(),
        ParamSelector::NeuronColumn { column, .. } => {
            (0..rows).map(|r| offset + r * cols + column).collect()
        }
    })
}

/// Network output for one input. Hidden ReLU, identity output.
pub fn forward(net: &MlpNetwork, x: &[f64]) -> Result<Vec<f64>, NetError> {
    if x.len() != net.input_dim() {
        return Err(NetError::DimensionMismatch {
            context: "forward input",
            expected: net.input_dim(),
            got: x.len(),
        });
    }
    let last = net.num_layers() - 1;
    let mut a = x.to_vec();
    for (l, layer) in net.layers.iter().enumerate() {
        let mut z = layer.weights.matvec(&a);
        for (zi, bi) in z.iter_mut().zip(&layer.bias) {
            *zi += bi;
        }
        if l < last {
            for zi in &mut z {
                if *zi <= 0.0 {
                    *zi = 0.0;
                }
            }
        }
        a = z;
    }
    Ok(a)
}

/// Per-sample loss value. Squared loss carries no ½ factor.
fn loss_value(loss: LossKind, yhat: &[f64], target: &Target) -> Result<f64, NetError> {
    match (loss, target) {
        (LossKind::Squared, Target::Vector(y)) => {
            if y.len() != yhat.len() {
                return Err(NetError::DimensionMismatch {
                    context: "squared-loss target",
                    expected: yhat.len(),
                    got: y.len(),
                });
            }
            Ok(yhat
                .iter()
                .zip(y)
                .map(|(a, b)| (a - b) * (a - b))
                .sum())
        }
        (LossKind::SoftmaxCrossEntropy, Target::Class(c)) => {
            if *c >= yhat.len() {
                return Err(NetError::DimensionMismatch {
                    context: "class index",
                    expected: yhat.len(),
                    got: *c,
                });
            }
            Ok(log_sum_exp(yhat) - yhat[*c])
        }
        _ => Err(NetError::TargetKindMismatch {
            context: "loss evaluation",
        }),
    }
}

/// dℓ/dŷ for one sample.
fn loss_grad(loss: LossKind, yhat: &[f64], target: &Target, out: &mut [f64]) {
    match (loss, target) {
        (LossKind::Squared, Target::Vector(y)) => {
            for ((o, a), b) in out.iter_mut().zip(yhat).zip(y) {
                *o = 2.0 * (a - b);
            }
        }
        (LossKind::SoftmaxCrossEntropy, Target::Class(c)) => {
            softmax_into(yhat, out);
            out[*c] -= 1.0;
        }
        _ => unreachable!("loss/target compatibility checked before backprop"),
    }
}

fn log_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    let s: f64 = z.iter().map(|v| (v - m).exp()).sum();
    m + s.ln()
}

pub(crate) fn softmax_into(z: &[f64], out: &mut [f64]) {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for (o, v) in out.iter_mut().zip(z) {
        *o = (v - m).exp();
        s += *o;
    }
    for o in out.iter_mut() {
        *o /= s;
    }
}

fn check_compat(net: &MlpNetwork, set: &LabeledSet, loss: LossKind) -> Result<(), NetError> {
    if set.input_dim() != net.input_dim() {
        return Err(NetError::DimensionMismatch {
            context: "dataset input dimension",
            expected: net.input_dim(),
            got: set.input_dim(),
        });
    }
    let out = net.output_dim();
    for t in set.targets() {
        match (loss, t) {
            (LossKind::Squared, Target::Vector(y)) if y.len() == out => {}
            (LossKind::SoftmaxCrossEntropy, Target::Class(c)) if *c < out => {}
            _ => {
                return Err(NetError::TargetKindMismatch {
                    context: "dataset targets vs loss",
                })
            }
        }
    }
    Ok(())
}

/// Mean per-sample loss over the set. Per-sample terms are collapsed with
/// the fixed pairwise reduction, so the value is reproducible bit for bit.
pub fn empirical_error(
    net: &MlpNetwork,
    set: &LabeledSet,
    loss: LossKind,
) -> Result<f64, NetError> {
    check_compat(net, set, loss)?;
    let losses: Vec<f64> = (0..set.len())
        .map(|i| {
            let yhat = forward(net, set.input(i))?;
            loss_value(loss, &yhat, set.target(i))
        })
        .collect::<Result<_, _>>()?;
    let mean = pairwise_sum(&losses) / set.len() as f64;
    if !mean.is_finite() {
        return Err(NetError::NonFinite {
            context: "empirical error",
        });
    }
    Ok(mean)
}

/// Fraction of samples whose argmax prediction misses the class target.
/// Ties resolve to the lowest index, deterministically.
pub fn classification_error(net: &MlpNetwork, set: &LabeledSet) -> Result<f64, NetError> {
    if set.input_dim() != net.input_dim() {
        return Err(NetError::DimensionMismatch {
            context: "dataset input dimension",
            expected: net.input_dim(),
            got: set.input_dim(),
        });
    }
    let mut wrong = 0usize;
    for i in 0..set.len() {
        let class = match set.target(i) {
            Target::Class(c) => *c,
            Target::Vector(_) => {
                return Err(NetError::TargetKindMismatch {
                    context: "classification error needs class targets",
                })
            }
        };
        let yhat = forward(net, set.input(i))?;
        let mut best = 0usize;
        for k in 1..yhat.len() {
            if yhat[k] > yhat[best] {
                best = k;
            }
        }
        if best != class {
            wrong += 1;
        }
    }
    Ok(wrong as f64 / set.len() as f64)
}

/// Reusable per-sample buffers for backprop; sized once per network shape.
pub(crate) struct Workspace {
    /// Post-activation per layer (input excluded), one Vec per layer.
    acts: Vec<Vec<f64>>,
    /// ReLU masks (1.0/0.0) for hidden layers; last entry unused.
    masks: Vec<Vec<f64>>,
    deltas: Vec<Vec<f64>>,
}

impl Workspace {
    pub(crate) fn for_net(net: &MlpNetwork) -> Self {
        let acts = net.layers.iter().map(|l| vec![0.0; l.out_dim()]).collect();
        let masks = net.layers.iter().map(|l| vec![0.0; l.out_dim()]).collect();
        let deltas = net.layers.iter().map(|l| vec![0.0; l.out_dim()]).collect();
        Workspace {
            acts,
            masks,
            deltas,
        }
    }
}

/// Forward pass caching post-activations and hidden ReLU masks (σ'(0) = 0).
pub(crate) fn forward_cached(net: &MlpNetwork, x: &[f64], ws: &mut Workspace) {
    let last = net.num_layers() - 1;
    for l in 0..net.layers.len() {
        let layer = &net.layers[l];
        // Split borrow: activations of layer l-1 feed layer l.
        let (prev, rest) = ws.acts.split_at_mut(l);
        let z = &mut rest[0];
        let input: &[f64] = if l == 0 { x } else { &prev[l - 1] };
        layer.weights.matvec_into(input, z);
        for (zi, bi) in z.iter_mut().zip(&layer.bias) {
            *zi += bi;
        }
        if l < last {
            let mask = &mut ws.masks[l];
            for (zi, mi) in z.iter_mut().zip(mask.iter_mut()) {
                if *zi > 0.0 {
                    *mi = 1.0;
                } else {
                    *zi = 0.0;
                    *mi = 0.0;
                }
            }
        }
    }
}

/// Accumulates one sample's loss gradient into `grad` (flat layout), using
/// cached forward state. Returns the sample's loss value.
fn backward_accumulate(
    net: &MlpNetwork,
    x: &[f64],
    target: &Target,
    loss: LossKind,
    ws: &mut Workspace,
    grad: &mut [f64],
) -> Result<f64, NetError> {
    forward_cached(net, x, ws);
    let last = net.num_layers() - 1;
    let yhat = &ws.acts[last];
    let value = loss_value(loss, yhat, target)?;
    {
        let (acts, deltas) = (&ws.acts, &mut ws.deltas);
        loss_grad(loss, &acts[last], target, &mut deltas[last]);
    }
    // Backward through layers, writing into the flat gradient layout:
    // weights row-major then bias, layers in order.
    let mut offsets = Vec::with_capacity(net.num_layers());
    let mut off = 0;
    for layer in &net.layers {
        offsets.push(off);
        off += layer.weights.rows() * layer.weights.cols() + layer.bias.len();
    }
    for l in (0..net.num_layers()).rev() {
        let layer = &net.layers[l];
        let (rows, cols) = (layer.weights.rows(), layer.weights.cols());
        let w_off = offsets[l];
        {
            let delta = &ws.deltas[l];
            let input: &[f64] = if l == 0 { x } else { &ws.acts[l - 1] };
            for r in 0..rows {
                let row = &mut grad[w_off + r * cols..w_off + (r + 1) * cols];
                crate::numlin::axpy(delta[r], input, row);
            }
            let b_off = w_off + rows * cols;
            for (g, d) in grad[b_off..b_off + rows].iter_mut().zip(delta) {
                *g += d;
            }
        }
        if l > 0 {
            let (lower, upper) = ws.deltas.split_at_mut(l);
            let prev_delta = &mut lower[l - 1];
            prev_delta.iter_mut().for_each(|v| *v = 0.0);
            layer.weights.matvec_t_add(&upper[0], prev_delta);
            for (d, m) in prev_delta.iter_mut().zip(&ws.masks[l - 1]) {
                *d *= m;
            }
        }
    }
    Ok(value)
}

/// Gradient of [`empirical_error`] over all weights and biases, flat layout.
/// ReLU subgradient convention σ'(0) = 0. Samples accumulate in index
/// order — the module's fixed reduction order.
pub fn gradient(net: &MlpNetwork, set: &LabeledSet, loss: LossKind) -> Result<Vec<f64>, NetError> {
    let indices: Vec<usize> = (0..set.len()).collect();
    let mut ws = Workspace::for_net(net);
    gradient_indexed(net, set, &indices, loss, &mut ws)
}

/// Mean gradient over the samples named by `indices` (the trainer's
/// minibatch path; `gradient` is the whole-set special case).
pub(crate) fn gradient_indexed(
    net: &MlpNetwork,
    set: &LabeledSet,
    indices: &[usize],
    loss: LossKind,
    ws: &mut Workspace,
) -> Result<Vec<f64>, NetError> {
    check_compat(net, set, loss)?;
    if indices.is_empty() {
        return Err(NetError::EmptySet);
    }
    let mut grad = vec![0.0; net.param_count()];
    for &i in indices {
        backward_accumulate(net, set.input(i), set.target(i), loss, ws, &mut grad)?;
    }
    let scale = 1.0 / indices.len() as f64;
    for g in &mut grad {
        *g *= scale;
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(NetError::NonFinite {
            context: "gradient",
        });
    }
    Ok(grad)
}

/// Smallest |pre-activation| over all hidden units and samples: the
/// distance-to-kink statistic oracle fixtures use to reject instances where
/// the Hessian is ill-defined. Networks without hidden layers have no kinks
/// and report +∞.
pub fn min_preactivation_magnitude(net: &MlpNetwork, set: &LabeledSet) -> Result<f64, NetError> {
    if set.input_dim() != net.input_dim() {
        return Err(NetError::DimensionMismatch {
            context: "dataset input dimension",
            expected: net.input_dim(),
            got: set.input_dim(),
        });
    }
    let last = net.num_layers() - 1;
    let mut min = f64::INFINITY;
    for i in 0..set.len() {
        let mut a = set.input(i).to_vec();
        for (l, layer) in net.layers.iter().enumerate() {
            let mut z = layer.weights.matvec(&a);
            for (zi, bi) in z.iter_mut().zip(&layer.bias) {
                *zi += bi;
            }
            if l < last {
                for zi in &mut z {
                    min = min.min(zi.abs());
                    if *zi <= 0.0 {
                        *zi = 0.0;
                    }
                }
            }
            a = z;
        }
    }
    Ok(min)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(super) fn single_layer_net(rows: &[Vec<f64>], bias: Vec<f64>) -> MlpNetwork {
        MlpNetwork::new(vec![Layer::new(DenseMatrix::from_rows(rows), bias).unwrap()]).unwrap()
    }

    fn one_one_one() -> MlpNetwork {
        MlpNetwork::new(vec![
            Layer::new(DenseMatrix::from_rows(&[vec![1.0]]), vec![-1.0]).unwrap(),
            Layer::new(DenseMatrix::from_rows(&[vec![2.0]]), vec![0.0]).unwrap(),
        ])
        .unwrap()
    }

    #[test]
    fn forward_hand_example() {
        let net = one_one_one();
        assert_eq!(forward(&net, &[2.0]).unwrap(), vec![2.0]);
    }

    #[test]
    fn forward_dead_relu() {
        let net = one_one_one();
        assert_eq!(forward(&net, &[0.0]).unwrap(), vec![0.0]);
    }

    #[test]
    fn forward_single_linear_layer() {
        let net = single_layer_net(&[vec![3.0, 4.0]], vec![0.0]);
        assert_eq!(forward(&net, &[1.0, 1.0]).unwrap(), vec![7.0]);
    }

    #[test]
    fn forward_rejects_wrong_input_dim() {
        let net = one_one_one();
        assert!(matches!(
            forward(&net, &[1.0, 2.0]),
            Err(NetError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn empirical_error_squared_single_sample() {
        let net = single_layer_net(&[vec![2.0]], vec![0.0]);
        let set = LabeledSet::new(vec![vec![1.0]], vec![Target::Vector(vec![0.0])]).unwrap();
        assert_eq!(empirical_error(&net, &set, LossKind::Squared).unwrap(), 4.0);
    }

    #[test]
    fn empirical_error_is_mean() {
        let net = single_layer_net(&[vec![2.0]], vec![0.0]);
        let set = LabeledSet::new(
            vec![vec![1.0], vec![0.0]],
            vec![Target::Vector(vec![0.0]), Target::Vector(vec![0.0])],
        )
        .unwrap();
        assert_eq!(empirical_error(&net, &set, LossKind::Squared).unwrap(), 2.0);
    }

    #[test]
    fn cross_entropy_uniform_logits_is_ln_k() {
        let k = 5;
        let net = single_layer_net(
            &(0..k).map(|_| vec![0.0, 0.0]).collect::<Vec<_>>(),
            vec![0.0; k],
        );
        let set = LabeledSet::new(vec![vec![0.3, -0.7]], vec![Target::Class(2)]).unwrap();
        let err = empirical_error(&net, &set, LossKind::SoftmaxCrossEntropy).unwrap();
        assert!((err - (k as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn gradient_single_linear_unit() {
        // d/dw (w·x − y)² at w=3, x=1, y=0 is 2·3 = 6, plus bias gradient 6.
        let net = single_layer_net(&[vec![3.0]], vec![0.0]);
        let set = LabeledSet::new(vec![vec![1.0]], vec![Target::Vector(vec![0.0])]).unwrap();
        let g = gradient(&net, &set, LossKind::Squared).unwrap();
        assert_eq!(g.len(), 2);
        assert!((g[0] - 6.0).abs() < 1e-12);
        assert!((g[1] - 6.0).abs() < 1e-12);
    }

    #[test]
    fn gradient_zero_at_exact_minimum() {
        let net = single_layer_net(&[vec![3.0, 4.0]], vec![0.0]);
        // Targets equal the prediction: the loss is exactly at its minimum.
        let set = LabeledSet::new(vec![vec![1.0, 1.0]], vec![Target::Vector(vec![7.0])]).unwrap();
        let g = gradient(&net, &set, LossKind::Squared).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        // 2-3-2 net with fixed parameters placed away from ReLU kinks.
        let net = MlpNetwork::new(vec![
            Layer::new(
                DenseMatrix::from_rows(&[
                    vec![0.6, -0.4],
                    vec![0.3, 0.8],
                    vec![-0.5, 0.2],
                ]),
                vec![0.15, -0.1, 0.25],
            )
            .unwrap(),
            Layer::new(
                DenseMatrix::from_rows(&[vec![0.7, -0.3, 0.4], vec![0.2, 0.5, -0.6]]),
                vec![0.05, -0.2],
            )
            .unwrap(),
        ])
        .unwrap();
        let set = LabeledSet::new(
            vec![vec![0.9, -0.3], vec![-0.4, 0.7]],
            vec![
                Target::Vector(vec![0.5, -0.2]),
                Target::Vector(vec![-0.1, 0.3]),
            ],
        )
        .unwrap();
        assert!(min_preactivation_magnitude(&net, &set).unwrap() > 1e-3);

        let g = gradient(&net, &set, LossKind::Squared).unwrap();
        let params = net.params_flat();
        for i in 0..params.len() {
            let h = 1e-6 * (1.0 + params[i].abs());
            let mut plus = net.clone();
            let mut p = params.clone();
            p[i] += h;
            plus.set_params_flat(&p).unwrap();
            let mut minus = net.clone();
            p[i] = params[i] - h;
            minus.set_params_flat(&p).unwrap();
            let fd = (empirical_error(&plus, &set, LossKind::Squared).unwrap()
                - empirical_error(&minus, &set, LossKind::Squared).unwrap())
                / (2.0 * h);
            assert!(
                (g[i] - fd).abs() <= 1e-5 * (1.0 + fd.abs()),
                "coord {i}: analytic {} vs fd {}",
                g[i],
                fd
            );
        }
    }

    #[test]
    fn gradient_cross_entropy_matches_finite_differences() {
        let net = MlpNetwork::new(vec![
            Layer::new(
                DenseMatrix::from_rows(&[vec![0.5, -0.2], vec![-0.3, 0.6]]),
                vec![0.2, 0.1],
            )
            .unwrap(),
            Layer::new(
                DenseMatrix::from_rows(&[vec![0.4, 0.3], vec![-0.5, 0.2], vec![0.1, -0.4]]),
                vec![0.0, 0.05, -0.05],
            )
            .unwrap(),
        ])
        .unwrap();
        let set = LabeledSet::new(
            vec![vec![0.8, 0.4], vec![-0.6, 0.9]],
            vec![Target::Class(0), Target::Class(2)],
        )
        .unwrap();
        let g = gradient(&net, &set, LossKind::SoftmaxCrossEntropy).unwrap();
        let params = net.params_flat();
        for i in 0..params.len() {
            let h = 1e-6 * (1.0 + params[i].abs());
            let mut p = params.clone();
            let mut plus = net.clone();
            p[i] += h;
            plus.set_params_flat(&p).unwrap();
            let mut minus = net.clone();
            p[i] = params[i] - h;
            minus.set_params_flat(&p).unwrap();
            let fd = (empirical_error(&plus, &set, LossKind::SoftmaxCrossEntropy).unwrap()
                - empirical_error(&minus, &set, LossKind::SoftmaxCrossEntropy).unwrap())
                / (2.0 * h);
            assert!(
                (g[i] - fd).abs() <= 1e-5 * (1.0 + fd.abs()),
                "coord {i}: analytic {} vs fd {}",
                g[i],
                fd
            );
        }
    }

    #[test]
    fn params_flat_roundtrip() {
        let net = one_one_one();
        let mut copy = net.clone();
        let mut params = net.params_flat();
        assert_eq!(params, vec![1.0, -1.0, 2.0, 0.0]);
        params[2] = 5.0;
        copy.set_params_flat(&params).unwrap();
        assert_eq!(copy.layers()[1].weights.get(0, 0), 5.0);
    }

    #[test]
    fn labeled_set_rejects_empty_and_ragged() {
        assert_eq!(
            LabeledSet::new(vec![], vec![]).unwrap_err(),
            NetError::EmptySet
        );
        assert!(matches!(
            LabeledSet::new(
                vec![vec![1.0], vec![1.0, 2.0]],
                vec![Target::Class(0), Target::Class(0)]
            ),
            Err(NetError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn network_rejects_mismatched_layers() {
        let result = MlpNetwork::new(vec![
            Layer::new(DenseMatrix::zeros(3, 2), vec![0.0; 3]).unwrap(),
            Layer::new(DenseMatrix::zeros(2, 4), vec![0.0; 2]).unwrap(),
        ]);
        assert!(matches!(result, Err(NetError::DimensionMismatch { .. })));
    }

    #[test]
    fn classification_error_counts_argmax_misses() {
        let net = single_layer_net(&[vec![1.0, 0.0], vec![0.0, 1.0]], vec![0.0, 0.0]);
        let set = LabeledSet::new(
            vec![vec![2.0, 1.0], vec![1.0, 2.0], vec![2.0, 1.0]],
            vec![Target::Class(0), Target::Class(1), Target::Class(1)],
        )
        .unwrap();
        let err = classification_error(&net, &set).unwrap();
        assert!((err - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn selected_weights_roundtrip_column() {
        let mut net = single_layer_net(&[vec![3.0, 4.0], vec![5.0, 6.0]], vec![0.0, 0.0]);
        let sel = ParamSelector::NeuronColumn { layer: 0, column: 1 };
        assert_eq!(selected_weights(&net, sel).unwrap(), vec![4.0, 6.0]);
        set_selected_weights(&mut net, sel, &[40.0, 60.0]).unwrap();
        assert_eq!(net.layers()[0].weights.get(0, 1), 40.0);
        assert_eq!(net.layers()[0].weights.get(1, 1), 60.0);
    }

    #[test]
    fn selector_validation() {
        let net = one_one_one();
        assert!(ParamSelector::Layer(2).validate(&net).is_err());
        assert!(ParamSelector::NeuronColumn { layer: 0, column: 1 }
            .validate(&net)
            .is_err());
        assert!(ParamSelector::Layer(1).validate(&net).is_ok());
    }

    #[test]
    fn shape_reports_unit_counts() {
        let net = one_one_one();
        assert_eq!(net.shape(), vec![1, 1, 1]);
        assert_eq!(net.param_count(), 4);
    }
}
