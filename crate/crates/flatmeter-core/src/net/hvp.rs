//! Hessian-vector products restricted to one layer's weights or one weight
//! column, with the ReLU activation pattern frozen from the primal pass
//! (σ'(0) = 0, σ'' ≡ 0).
//!
//! With the pattern frozen, the network output is linear in the selected
//! layer's weights, so the directional derivative of the gradient — the
//! forward-over-reverse Hessian-vector product — collapses per sample to
//!
//!   H·vec(V) = (1/|S|) Σ_s vec( M_s (V a_s) a_sᵀ ),
//!
//! where `a_s` is the layer input and `M_s = C_sᵀ ℓ''(ŷ_s) C_s` with
//! `C_s = ∂ŷ/∂z_l` the downstream Jacobian. [`HessianOperator`] caches
//! `(M_s, a_s)` once per (net, set, loss, selector), so each apply costs
//! roughly one pass over the selected parameters per sample instead of a
//! full network traversal. A neuron-column restriction is the same formula
//! with `a_s` replaced by the single coordinate `a_s[j]`.

use super::{
    check_compat, forward_cached, softmax_into, LabeledSet, LossKind, MlpNetwork, NetError,
    ParamSelector, Workspace,
};
use crate::numlin::{axpy, dot, DenseMatrix, SymmetricOperator};
use std::sync::OnceLock;

/// Implicit symmetric map v ↦ H·v for the Hessian of the empirical error
/// restricted to the weights named by a [`ParamSelector`].
pub struct HessianOperator {
    sel: ParamSelector,
    /// n_l: output units of the selected layer.
    rows: usize,
    /// Columns of the restricted weight view: n_{l-1} for a layer selector,
    /// 1 for a neuron column.
    cols: usize,
    samples: usize,
    inv_s: f64,
    /// Per-sample M_s, `samples × rows × rows`, each block row-major.
    m_blocks: Vec<f64>,
    /// Per-sample restricted layer input, `samples × cols`.
    acts: Vec<f64>,
    diag: OnceLock<Vec<f64>>,
}

impl HessianOperator {
    pub fn new(
        net: &MlpNetwork,
        set: &LabeledSet,
        loss: LossKind,
        sel: ParamSelector,
    ) -> Result<Self, NetError> {
        sel.validate(net)?;
        check_compat(net, set, loss)?;
        let l = sel.layer_index();
        let rows = net.layers()[l].weights.rows();
        let layer_cols = net.layers()[l].weights.cols();
        let cols = match sel {
            ParamSelector::Layer(_) => layer_cols,
            ParamSelector::NeuronColumn { .. } => 1,
        };
        let samples = set.len();

        let mut m_blocks = vec![0.0; samples * rows * rows];
        let mut acts = vec![0.0; samples * cols];
        let mut ws = Workspace::for_net(net);
        let mut p = vec![0.0; net.output_dim()];

        for s in 0..samples {
            forward_cached(net, set.input(s), &mut ws);
            let last = net.num_layers() - 1;
            {
                let a_in: &[f64] = if l == 0 {
                    set.input(s)
                } else {
                    &ws.acts[l - 1]
                };
                match sel {
                    ParamSelector::Layer(_) => {
                        acts[s * cols..(s + 1) * cols].copy_from_slice(a_in)
                    }
                    ParamSelector::NeuronColumn { column, .. } => acts[s] = a_in[column],
                }
            }

            let c = downstream_jacobian(net, l, &ws);
            let yhat = &ws.acts[last];
            let r = match loss {
                LossKind::Squared => {
                    let mut r = c.clone();
                    r.scale(2.0);
                    r
                }
                LossKind::SoftmaxCrossEntropy => {
                    softmax_into(yhat, &mut p);
                    // ℓ'' = diag(p) − ppᵀ, so R[k,:] = p_k (C[k,:] − pᵀC).
                    let mut q = vec![0.0; rows];
                    for (k, &pk) in p.iter().enumerate() {
                        axpy(pk, c.row(k), &mut q);
                    }
                    let mut r = DenseMatrix::zeros(c.rows(), rows);
                    for (k, &pk) in p.iter().enumerate() {
                        let src = c.row(k);
                        let dst = r.row_mut(k);
                        for i in 0..rows {
                            dst[i] = pk * (src[i] - q[i]);
                        }
                    }
                    r
                }
            };
            // M_s = Cᵀ R, accumulated as a sum of row outer products, then
            // symmetrized to kill the last-bit asymmetry of the fused form.
            let block = &mut m_blocks[s * rows * rows..(s + 1) * rows * rows];
            for k in 0..c.rows() {
                let crow = c.row(k);
                let rrow = r.row(k);
                for i in 0..rows {
                    if crow[i] != 0.0 {
                        axpy(crow[i], rrow, &mut block[i * rows..(i + 1) * rows]);
                    }
                }
            }
            for i in 0..rows {
                for jj in (i + 1)..rows {
                    let sym = 0.5 * (block[i * rows + jj] + block[jj * rows + i]);
                    block[i * rows + jj] = sym;
                    block[jj * rows + i] = sym;
                }
            }
        }

        if m_blocks.iter().any(|v| !v.is_finite()) || acts.iter().any(|v| !v.is_finite()) {
            return Err(NetError::NonFinite {
                context: "hessian operator state",
            });
        }

        Ok(HessianOperator {
            sel,
            rows,
            cols,
            samples,
            inv_s: 1.0 / samples as f64,
            m_blocks,
            acts,
            diag: OnceLock::new(),
        })
    }

    pub fn selector(&self) -> ParamSelector {
        self.sel
    }

    /// vᵀ H_col(j) v for the neuron-column restriction at column `j`,
    /// sharing this layer operator's cached per-sample state. One
    /// Hessian-vector product and one inner product, fused per sample.
    pub fn column_quadratic_form(&self, j: usize, v: &[f64]) -> f64 {
        assert!(
            matches!(self.sel, ParamSelector::Layer(_)),
            "column quadratic forms live on a layer operator"
        );
        assert!(j < self.cols, "column out of range");
        assert_eq!(v.len(), self.rows);
        let rows = self.rows;
        let mut u = vec![0.0; rows];
        let mut total = 0.0;
        for s in 0..self.samples {
            let block = &self.m_blocks[s * rows * rows..(s + 1) * rows * rows];
            for r in 0..rows {
                u[r] = dot(&block[r * rows..(r + 1) * rows], v);
            }
            let aj = self.acts[s * self.cols + j];
            total += aj * aj * dot(v, &u);
        }
        total * self.inv_s
    }

    fn diag_vec(&self) -> &Vec<f64> {
        self.diag.get_or_init(|| {
            let (rows, cols) = (self.rows, self.cols);
            let mut diag = vec![0.0; rows * cols];
            let mut asq = vec![0.0; cols];
            for s in 0..self.samples {
                let block = &self.m_blocks[s * rows * rows..(s + 1) * rows * rows];
                let a = &self.acts[s * cols..(s + 1) * cols];
                for (sq, v) in asq.iter_mut().zip(a) {
                    *sq = v * v;
                }
                for r in 0..rows {
                    axpy(block[r * rows + r], &asq, &mut diag[r * cols..(r + 1) * cols]);
                }
            }
            for d in &mut diag {
                *d *= self.inv_s;
            }
            diag
        })
    }
}

impl SymmetricOperator for HessianOperator {
    fn dim(&self) -> usize {
        self.rows * self.cols
    }

    fn apply(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(v.len(), self.dim(), "direction dimension mismatch");
        let (rows, cols) = (self.rows, self.cols);
        let mut out = vec![0.0; rows * cols];
        let mut t = vec![0.0; rows];
        let mut u = vec![0.0; rows];
        for s in 0..self.samples {
            let block = &self.m_blocks[s * rows * rows..(s + 1) * rows * rows];
            let a = &self.acts[s * cols..(s + 1) * cols];
            for r in 0..rows {
                t[r] = dot(&v[r * cols..(r + 1) * cols], a);
            }
            for r in 0..rows {
                u[r] = dot(&block[r * rows..(r + 1) * rows], &t);
            }
            for r in 0..rows {
                axpy(u[r], a, &mut out[r * cols..(r + 1) * cols]);
            }
        }
        for o in &mut out {
            *o *= self.inv_s;
        }
        out
    }

    fn diag_entry(&self, i: usize) -> f64 {
        self.diag_vec()[i]
    }
}

/// C = ∂ŷ/∂z_l with frozen hidden masks: the product of the downstream
/// weight matrices with masked columns, identity at the output layer.
fn downstream_jacobian(net: &MlpNetwork, l: usize, ws: &Workspace) -> DenseMatrix {
    let last = net.num_layers() - 1;
    let out_dim = net.output_dim();
    let mut c = DenseMatrix::zeros(out_dim, out_dim);
    for i in 0..out_dim {
        c.set(i, i, 1.0);
    }
    for k in ((l + 1)..=last).rev() {
        let mut next = c.matmul(&net.layers()[k].weights);
        let mask = &ws.masks[k - 1];
        for r in 0..next.rows() {
            let row = next.row_mut(r);
            for (v, m) in row.iter_mut().zip(mask) {
                *v *= m;
            }
        }
        c = next;
    }
    c
}

/// H_sel · v computed from scratch: builds the operator for `sel` and
/// applies it once. For repeated products against the same restriction,
/// construct a [`HessianOperator`] and reuse it.
pub fn hvp(
    net: &MlpNetwork,
    set: &LabeledSet,
    loss: LossKind,
    sel: ParamSelector,
    v: &[f64],
) -> Result<Vec<f64>, NetError> {
    let op = HessianOperator::new(net, set, loss, sel)?;
    if v.len() != op.dim() {
        return Err(NetError::DimensionMismatch {
            context: "hvp direction",
            expected: op.dim(),
            got: v.len(),
        });
    }
    Ok(op.apply(v))
}
