//! Computation record for reverse-mode differentiation.
//!
//! Every forward op appends one node; `backward` walks the record once in
//! reverse. Nodes are created in topological order by construction, so no
//! sorting is needed. Ops panic on shape mismatch with the offending shapes
//! named — composed model code treats those as invariant violations.

use super::kernels::{matmul_nn, matmul_nt, matmul_tn};
use super::params::{Gradients, ParameterSet};
use super::{Tensor, TensorError};
use std::collections::BTreeMap;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

enum Op {
    Leaf,
    Matmul { a: usize, b: usize },
    Transpose { x: usize },
    Add { a: usize, b: usize },
    AddBiasRow { x: usize, bias: usize },
    Sub { a: usize, b: usize },
    ScalarMul { x: usize, k: f64 },
    Hadamard { a: usize, b: usize },
    Relu { x: usize },
    Sigmoid { x: usize },
    Softplus { x: usize },
    Clamp { x: usize, lo: f64, hi: f64 },
    Softmax { x: usize, axis: usize },
    LayerNorm { x: usize, gamma: usize, beta: usize, eps: f64 },
    ConcatRows { xs: Vec<usize> },
    ConcatCols { xs: Vec<usize> },
    GatherRows { x: usize, idx: Vec<usize> },
    SliceCols { x: usize, start: usize, end: usize },
    RowGroupMean { x: usize, group: usize },
    MeanAll { x: usize },
    SumAll { x: usize },
    SumSqAll { x: usize },
    SumSqRows { x: usize },
}

struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
    /// Parameter name for named leaves; gradients are keyed by it.
    param: Option<String>,
}

/// Records forward ops and replays them backward for gradients.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool) -> Var {
        debug_assert!(
            value.all_finite(),
            "non-finite value produced on tape (node {})",
            self.nodes.len()
        );
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Tracked leaf bound to a parameter name; its gradient is reported by
    /// [`Tape::backward`].
    pub fn leaf_param(&mut self, name: &str, value: Tensor) -> Var {
        let v = self.push(Op::Leaf, value, true);
        self.nodes[v.0].param = Some(name.to_string());
        v
    }

    /// Untracked constant; backward never flows into it.
    pub fn leaf_const(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value, false)
    }

    /// Register every parameter in `params` as a tracked leaf.
    ///
    /// Returns a name → [`Var`] map in the set's deterministic order.
    pub fn bind_params(&mut self, params: &ParameterSet) -> BTreeMap<String, Var> {
        let mut out = BTreeMap::new();
        for (name, tensor) in params.iter() {
            out.insert(name.to_string(), self.leaf_param(name, tensor.clone()));
        }
        out
    }

    /// Register every parameter as a frozen constant (no gradients).
    pub fn bind_params_frozen(&mut self, params: &ParameterSet) -> BTreeMap<String, Var> {
        let mut out = BTreeMap::new();
        for (name, tensor) in params.iter() {
            out.insert(name.to_string(), self.leaf_const(tensor.clone()));
        }
        out
    }

    // ── forward ops ─────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert!(
            ta.shape().len() == 2 && tb.shape().len() == 2 && ta.cols() == tb.rows(),
            "matmul shape mismatch: {:?} x {:?}",
            ta.shape(),
            tb.shape()
        );
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        let mut out = Tensor::zeros(vec![m, n]);
        matmul_nn(ta.data(), tb.data(), m, k, n, out.data_mut());
        let ng = self.needs(a) || self.needs(b);
        self.push(Op::Matmul { a: a.0, b: b.0 }, out, ng)
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let t = self.value(x);
        assert!(t.shape().len() == 2, "transpose needs 2-D, got {:?}", t.shape());
        let (r, c) = (t.rows(), t.cols());
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = t.data()[i * c + j];
            }
        }
        let ng = self.needs(x);
        self.push(Op::Transpose { x: x.0 }, Tensor::new(vec![c, r], data), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(
            ta.shape(),
            tb.shape(),
            "add shape mismatch: {:?} vs {:?}",
            ta.shape(),
            tb.shape()
        );
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let shape = ta.shape().to_vec();
        let ng = self.needs(a) || self.needs(b);
        self.push(Op::Add { a: a.0, b: b.0 }, Tensor::new(shape, data), ng)
    }

    /// Matrix + row vector, the only supported broadcast.
    pub fn add_bias_row(&mut self, x: Var, bias: Var) -> Var {
        let (tx, tb) = (self.value(x), self.value(bias));
        assert!(
            tx.shape().len() == 2 && tb.shape().len() == 1 && tx.cols() == tb.cols(),
            "bias-add shape mismatch: {:?} + {:?}",
            tx.shape(),
            tb.shape()
        );
        let (r, c) = (tx.rows(), tx.cols());
        let mut data = tx.data().to_vec();
        for i in 0..r {
            for j in 0..c {
                data[i * c + j] += tb.data()[j];
            }
        }
        let ng = self.needs(x) || self.needs(bias);
        self.push(
            Op::AddBiasRow { x: x.0, bias: bias.0 },
            Tensor::new(vec![r, c], data),
            ng,
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(
            ta.shape(),
            tb.shape(),
            "sub shape mismatch: {:?} vs {:?}",
            ta.shape(),
            tb.shape()
        );
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x - y).collect();
        let shape = ta.shape().to_vec();
        let ng = self.needs(a) || self.needs(b);
        self.push(Op::Sub { a: a.0, b: b.0 }, Tensor::new(shape, data), ng)
    }

    pub fn scalar_mul(&mut self, x: Var, k: f64) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|v| v * k).collect();
        let shape = t.shape().to_vec();
        let ng = self.needs(x);
        self.push(Op::ScalarMul { x: x.0, k }, Tensor::new(shape, data), ng)
    }

    /// Elementwise product of same-shape tensors.
    pub fn hadamard(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(
            ta.shape(),
            tb.shape(),
            "elementwise-mul shape mismatch: {:?} vs {:?}",
            ta.shape(),
            tb.shape()
        );
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let shape = ta.shape().to_vec();
        let ng = self.needs(a) || self.needs(b);
        self.push(Op::Hadamard { a: a.0, b: b.0 }, Tensor::new(shape, data), ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| v.max(0.0)).collect();
        let shape = t.shape().to_vec();
        let ng = self.needs(x);
        self.push(Op::Relu { x: x.0 }, Tensor::new(shape, data), ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| sigmoid_scalar(v)).collect();
        let shape = t.shape().to_vec();
        let ng = self.needs(x);
        self.push(Op::Sigmoid { x: x.0 }, Tensor::new(shape, data), ng)
    }

    /// `ln(1 + e^x)`, computed in the overflow-safe form.
    pub fn softplus(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| softplus_scalar(v)).collect();
        let shape = t.shape().to_vec();
        let ng = self.needs(x);
        self.push(Op::Softplus { x: x.0 }, Tensor::new(shape, data), ng)
    }

    /// Clamp to `[lo, hi]`; gradient is zero outside the open interval.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        assert!(lo < hi, "clamp bounds inverted: [{lo}, {hi}]");
        let t = self.value(x);
        let data = t.data().iter().map(|&v| v.clamp(lo, hi)).collect();
        let shape = t.shape().to_vec();
        let ng = self.needs(x);
        self.push(Op::Clamp { x: x.0, lo, hi }, Tensor::new(shape, data), ng)
    }

    /// Softmax along `axis` (0 = down columns, 1 = along rows) of a 2-D tensor.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Var {
        let t = self.value(x);
        assert!(
            t.shape().len() == 2 && axis < 2,
            "softmax needs 2-D and axis in {{0,1}}: shape {:?}, axis {axis}",
            t.shape()
        );
        let (r, c) = (t.rows(), t.cols());
        let mut data = t.data().to_vec();
        let (outer, span, stride) = if axis == 1 { (r, c, 1) } else { (c, r, c) };
        for o in 0..outer {
            let base = if axis == 1 { o * c } else { o };
            let mut max = f64::NEG_INFINITY;
            for s in 0..span {
                max = max.max(data[base + s * stride]);
            }
            let mut sum = 0.0;
            for s in 0..span {
                let e = (data[base + s * stride] - max).exp();
                data[base + s * stride] = e;
                sum += e;
            }
            for s in 0..span {
                data[base + s * stride] /= sum;
            }
        }
        let ng = self.needs(x);
        self.push(Op::Softmax { x: x.0, axis }, Tensor::new(vec![r, c], data), ng)
    }

    /// Layer normalization over the last axis with learnable gain and bias.
    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        assert!(
            tx.shape().len() == 2
                && tg.shape().len() == 1
                && tb.shape().len() == 1
                && tg.cols() == tx.cols()
                && tb.cols() == tx.cols(),
            "layernorm shape mismatch: x {:?}, gamma {:?}, beta {:?}",
            tx.shape(),
            tg.shape(),
            tb.shape()
        );
        let (r, c) = (tx.rows(), tx.cols());
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            let row = tx.row_slice(i);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv_std = 1.0 / (var + eps).sqrt();
            for j in 0..c {
                data[i * c + j] = (row[j] - mean) * inv_std * tg.data()[j] + tb.data()[j];
            }
        }
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(
            Op::LayerNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                eps,
            },
            Tensor::new(vec![r, c], data),
            ng,
        )
    }

    pub fn concat_rows(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty(), "concat of zero tensors");
        let c = self.value(xs[0]).cols();
        let mut rows = 0;
        let mut data = Vec::new();
        let mut ng = false;
        for &v in xs {
            let t = self.value(v);
            assert!(
                t.shape().len() == 2 && t.cols() == c,
                "concat-rows column mismatch: {:?} vs {} cols",
                t.shape(),
                c
            );
            rows += t.rows();
            data.extend_from_slice(t.data());
            ng |= self.needs(v);
        }
        self.push(
            Op::ConcatRows {
                xs: xs.iter().map(|v| v.0).collect(),
            },
            Tensor::new(vec![rows, c], data),
            ng,
        )
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty(), "concat of zero tensors");
        let r = self.value(xs[0]).rows();
        let mut total_c = 0;
        let mut ng = false;
        for &v in xs {
            let t = self.value(v);
            assert!(
                t.shape().len() == 2 && t.rows() == r,
                "concat-cols row mismatch: {:?} vs {} rows",
                t.shape(),
                r
            );
            total_c += t.cols();
            ng |= self.needs(v);
        }
        let mut data = vec![0.0; r * total_c];
        let mut col_off = 0;
        for &v in xs {
            let t = self.value(v);
            let c = t.cols();
            for i in 0..r {
                data[i * total_c + col_off..i * total_c + col_off + c]
                    .copy_from_slice(t.row_slice(i));
            }
            col_off += c;
        }
        self.push(
            Op::ConcatCols {
                xs: xs.iter().map(|v| v.0).collect(),
            },
            Tensor::new(vec![r, total_c], data),
            ng,
        )
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Var {
        let t = self.value(x);
        assert!(t.shape().len() == 2, "gather-rows needs 2-D, got {:?}", t.shape());
        let (r, c) = (t.rows(), t.cols());
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            assert!(i < r, "gather-rows index {i} out of {r} rows");
            data.extend_from_slice(t.row_slice(i));
        }
        let ng = self.needs(x);
        self.push(
            Op::GatherRows {
                x: x.0,
                idx: idx.to_vec(),
            },
            Tensor::new(vec![idx.len(), c], data),
            ng,
        )
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Var {
        let t = self.value(x);
        assert!(
            t.shape().len() == 2 && start < end && end <= t.cols(),
            "slice-cols [{start}, {end}) invalid for shape {:?}",
            t.shape()
        );
        let (r, c) = (t.rows(), t.cols());
        let w = end - start;
        let mut data = Vec::with_capacity(r * w);
        for i in 0..r {
            data.extend_from_slice(&t.data()[i * c + start..i * c + end]);
        }
        let ng = self.needs(x);
        self.push(
            Op::SliceCols { x: x.0, start, end },
            Tensor::new(vec![r, w], data),
            ng,
        )
    }

    /// Mean over consecutive groups of `group` rows: `[g*k, c] -> [g, c]`.
    pub fn row_group_mean(&mut self, x: Var, group: usize) -> Var {
        let t = self.value(x);
        assert!(
            t.shape().len() == 2 && group > 0 && t.rows() % group == 0,
            "row-group-mean: {:?} not divisible into groups of {group}",
            t.shape()
        );
        let (r, c) = (t.rows(), t.cols());
        let g = r / group;
        let mut data = vec![0.0; g * c];
        for i in 0..r {
            let out_row = i / group;
            for j in 0..c {
                data[out_row * c + j] += t.data()[i * c + j] / group as f64;
            }
        }
        let ng = self.needs(x);
        self.push(
            Op::RowGroupMean { x: x.0, group },
            Tensor::new(vec![g, c], data),
            ng,
        )
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let m = t.data().iter().sum::<f64>() / t.numel() as f64;
        let ng = self.needs(x);
        self.push(Op::MeanAll { x: x.0 }, Tensor::scalar(m), ng)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>();
        let ng = self.needs(x);
        self.push(Op::SumAll { x: x.0 }, Tensor::scalar(s), ng)
    }

    /// Sum of squared entries, reduced to a scalar.
    pub fn sum_sq_all(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().map(|v| v * v).sum::<f64>();
        let ng = self.needs(x);
        self.push(Op::SumSqAll { x: x.0 }, Tensor::scalar(s), ng)
    }

    /// Per-row sum of squares: `[r, c] -> [r, 1]`.
    pub fn sum_sq_rows(&mut self, x: Var) -> Var {
        let t = self.value(x);
        assert!(t.shape().len() == 2, "sum-sq-rows needs 2-D, got {:?}", t.shape());
        let r = t.rows();
        let data = (0..r)
            .map(|i| t.row_slice(i).iter().map(|v| v * v).sum())
            .collect();
        let ng = self.needs(x);
        self.push(Op::SumSqRows { x: x.0 }, Tensor::new(vec![r, 1], data), ng)
    }

    // ── backward ────────────────────────────────────────────────────

    /// Reverse pass from a scalar loss.
    ///
    /// Returns one gradient per parameter in `params`; parameters that do not
    /// touch the loss get zero gradients of matching shape.
    pub fn backward(&self, loss: Var, params: &ParameterSet) -> Result<Gradients, TensorError> {
        let loss_t = self.value(loss);
        if !loss_t.is_scalar() {
            return Err(TensorError::NonScalarLoss(loss_t.shape().to_vec()));
        }
        if !loss_t.data()[0].is_finite() {
            return Err(TensorError::NonFinite { op: "backward(loss)" });
        }

        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }

        let mut by_name: BTreeMap<&str, usize> = BTreeMap::new();
        for (idx, node) in self.nodes.iter().enumerate() {
            if let Some(name) = node.param.as_deref() {
                by_name.entry(name).or_insert(idx);
            }
        }
        let mut out = Gradients::default();
        for (name, tensor) in params.iter() {
            let grad = by_name
                .get(name)
                .and_then(|&idx| grads[idx].as_ref().map(|g| (idx, g)))
                .map(|(idx, g)| Tensor::new(self.nodes[idx].value.shape().to_vec(), g.clone()))
                .unwrap_or_else(|| Tensor::zeros(tensor.shape().to_vec()));
            out.insert(name.to_string(), grad);
        }
        Ok(out)
    }

    fn accumulate(
        &self,
        grads: &mut [Option<Vec<f64>>],
        target: usize,
        update: impl FnOnce(&mut [f64]),
    ) {
        if !self.nodes[target].needs_grad {
            return;
        }
        let numel = self.nodes[target].value.numel();
        let slot = grads[target].get_or_insert_with(|| vec![0.0; numel]);
        update(slot);
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out_val = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (ta, tb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                if self.nodes[*a].needs_grad {
                    let mut da = vec![0.0; m * k];
                    matmul_nt(g, tb.data(), m, n, k, &mut da);
                    self.accumulate(grads, *a, |s| add_into(s, &da));
                }
                if self.nodes[*b].needs_grad {
                    let mut db = vec![0.0; k * n];
                    matmul_tn(ta.data(), g, m, k, n, &mut db);
                    self.accumulate(grads, *b, |s| add_into(s, &db));
                }
            }
            Op::Transpose { x } => {
                let (r, c) = (out_val.rows(), out_val.cols());
                let mut dx = vec![0.0; r * c];
                for p in 0..r {
                    for q in 0..c {
                        dx[q * r + p] = g[p * c + q];
                    }
                }
                self.accumulate(grads, *x, |s| add_into(s, &dx));
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, |s| add_into(s, g));
                self.accumulate(grads, *b, |s| add_into(s, g));
            }
            Op::AddBiasRow { x, bias } => {
                self.accumulate(grads, *x, |s| add_into(s, g));
                let (r, c) = (out_val.rows(), out_val.cols());
                let mut db = vec![0.0; c];
                for i in 0..r {
                    for j in 0..c {
                        db[j] += g[i * c + j];
                    }
                }
                self.accumulate(grads, *bias, |s| add_into(s, &db));
            }
            Op::Sub { a, b } => {
                self.accumulate(grads, *a, |s| add_into(s, g));
                self.accumulate(grads, *b, |s| {
                    for (sv, gv) in s.iter_mut().zip(g) {
                        *sv -= gv;
                    }
                });
            }
            Op::ScalarMul { x, k } => {
                let k = *k;
                self.accumulate(grads, *x, |s| {
                    for (sv, gv) in s.iter_mut().zip(g) {
                        *sv += k * gv;
                    }
                });
            }
            Op::Hadamard { a, b } => {
                let (ta, tb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                if self.nodes[*a].needs_grad {
                    let db = tb.data();
                    self.accumulate(grads, *a, |s| {
                        for ((sv, gv), bv) in s.iter_mut().zip(g).zip(db) {
                            *sv += gv * bv;
                        }
                    });
                }
                if self.nodes[*b].needs_grad {
                    let da = ta.data();
                    self.accumulate(grads, *b, |s| {
                        for ((sv, gv), av) in s.iter_mut().zip(g).zip(da) {
                            *sv += gv * av;
                        }
                    });
                }
            }
            Op::Relu { x } => {
                let tx = &self.nodes[*x].value;
                self.accumulate(grads, *x, |s| {
                    // derivative at exactly 0 is taken as 0
                    for ((sv, gv), xv) in s.iter_mut().zip(g).zip(tx.data()) {
                        if *xv > 0.0 {
                            *sv += gv;
                        }
                    }
                });
            }
            Op::Sigmoid { x } => {
                self.accumulate(grads, *x, |s| {
                    for ((sv, gv), ov) in s.iter_mut().zip(g).zip(out_val.data()) {
                        *sv += gv * ov * (1.0 - ov);
                    }
                });
            }
            Op::Softplus { x } => {
                let tx = &self.nodes[*x].value;
                self.accumulate(grads, *x, |s| {
                    for ((sv, gv), xv) in s.iter_mut().zip(g).zip(tx.data()) {
                        *sv += gv * sigmoid_scalar(*xv);
                    }
                });
            }
            Op::Clamp { x, lo, hi } => {
                let tx = &self.nodes[*x].value;
                let (lo, hi) = (*lo, *hi);
                self.accumulate(grads, *x, |s| {
                    for ((sv, gv), xv) in s.iter_mut().zip(g).zip(tx.data()) {
                        if *xv > lo && *xv < hi {
                            *sv += gv;
                        }
                    }
                });
            }
            Op::Softmax { x, axis } => {
                let (r, c) = (out_val.rows(), out_val.cols());
                let (outer, span, stride) = if *axis == 1 { (r, c, 1) } else { (c, r, c) };
                let mut dx = vec![0.0; r * c];
                let sm = out_val.data();
                for o in 0..outer {
                    let base = if *axis == 1 { o * c } else { o };
                    let mut dot = 0.0;
                    for s in 0..span {
                        dot += g[base + s * stride] * sm[base + s * stride];
                    }
                    for s in 0..span {
                        let idx = base + s * stride;
                        dx[idx] = sm[idx] * (g[idx] - dot);
                    }
                }
                self.accumulate(grads, *x, |s| add_into(s, &dx));
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let tx = &self.nodes[*x].value;
                let tg = &self.nodes[*gamma].value;
                let (r, c) = (tx.rows(), tx.cols());
                let cf = c as f64;
                let mut dx = vec![0.0; r * c];
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for i in 0..r {
                    let row = tx.row_slice(i);
                    let grow = &g[i * c..(i + 1) * c];
                    let mean = row.iter().sum::<f64>() / cf;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cf;
                    let inv_std = 1.0 / (var + eps).sqrt();
                    let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * inv_std).collect();
                    let mut dxhat = vec![0.0; c];
                    for j in 0..c {
                        dgamma[j] += grow[j] * xhat[j];
                        dbeta[j] += grow[j];
                        dxhat[j] = grow[j] * tg.data()[j];
                    }
                    let sum_dxhat: f64 = dxhat.iter().sum();
                    let sum_dxhat_xhat: f64 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        dx[i * c + j] =
                            inv_std / cf * (cf * dxhat[j] - sum_dxhat - xhat[j] * sum_dxhat_xhat);
                    }
                }
                self.accumulate(grads, *x, |s| add_into(s, &dx));
                self.accumulate(grads, *gamma, |s| add_into(s, &dgamma));
                self.accumulate(grads, *beta, |s| add_into(s, &dbeta));
            }
            Op::ConcatRows { xs } => {
                let c = out_val.cols();
                let mut row_off = 0;
                for &xi in xs {
                    let rows = self.nodes[xi].value.rows();
                    let chunk = &g[row_off * c..(row_off + rows) * c];
                    self.accumulate(grads, xi, |s| add_into(s, chunk));
                    row_off += rows;
                }
            }
            Op::ConcatCols { xs } => {
                let total_c = out_val.cols();
                let r = out_val.rows();
                let mut col_off = 0;
                for &xi in xs {
                    let c = self.nodes[xi].value.cols();
                    if self.nodes[xi].needs_grad {
                        let mut dx = vec![0.0; r * c];
                        for i in 0..r {
                            dx[i * c..(i + 1) * c].copy_from_slice(
                                &g[i * total_c + col_off..i * total_c + col_off + c],
                            );
                        }
                        self.accumulate(grads, xi, |s| add_into(s, &dx));
                    }
                    col_off += c;
                }
            }
            Op::GatherRows { x, idx } => {
                let c = out_val.cols();
                if self.nodes[*x].needs_grad {
                    let numel = self.nodes[*x].value.numel();
                    let slot = grads[*x].get_or_insert_with(|| vec![0.0; numel]);
                    for (out_row, &src_row) in idx.iter().enumerate() {
                        for j in 0..c {
                            slot[src_row * c + j] += g[out_row * c + j];
                        }
                    }
                }
            }
            Op::SliceCols { x, start, end } => {
                let w = end - start;
                let r = out_val.rows();
                let c = self.nodes[*x].value.cols();
                let start = *start;
                if self.nodes[*x].needs_grad {
                    let numel = self.nodes[*x].value.numel();
                    let slot = grads[*x].get_or_insert_with(|| vec![0.0; numel]);
                    for i in 0..r {
                        for j in 0..w {
                            slot[i * c + start + j] += g[i * w + j];
                        }
                    }
                }
            }
            Op::RowGroupMean { x, group } => {
                let c = out_val.cols();
                let in_rows = self.nodes[*x].value.rows();
                let group = *group;
                let scale = 1.0 / group as f64;
                let mut dx = vec![0.0; in_rows * c];
                for i in 0..in_rows {
                    let out_row = i / group;
                    for j in 0..c {
                        dx[i * c + j] = g[out_row * c + j] * scale;
                    }
                }
                self.accumulate(grads, *x, |s| add_into(s, &dx));
            }
            Op::MeanAll { x } => {
                let n = self.nodes[*x].value.numel() as f64;
                let gv = g[0] / n;
                self.accumulate(grads, *x, |s| {
                    for sv in s.iter_mut() {
                        *sv += gv;
                    }
                });
            }
            Op::SumAll { x } => {
                let gv = g[0];
                self.accumulate(grads, *x, |s| {
                    for sv in s.iter_mut() {
                        *sv += gv;
                    }
                });
            }
            Op::SumSqAll { x } => {
                let tx = &self.nodes[*x].value;
                let gv = g[0];
                self.accumulate(grads, *x, |s| {
                    for (sv, xv) in s.iter_mut().zip(tx.data()) {
                        *sv += 2.0 * gv * xv;
                    }
                });
            }
            Op::SumSqRows { x } => {
                let tx = &self.nodes[*x].value;
                let c = tx.cols();
                self.accumulate(grads, *x, |s| {
                    for (i, sv) in s.iter_mut().enumerate() {
                        *sv += 2.0 * g[i / c] * tx.data()[i];
                    }
                });
            }
        }
    }
}

pub(crate) fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus_scalar(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn add_into(target: &mut [f64], src: &[f64]) {
    debug_assert_eq!(target.len(), src.len());
    for (t, s) in target.iter_mut().zip(src) {
        *t += s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params_with(name: &str, t: Tensor) -> ParameterSet {
        let mut p = ParameterSet::new();
        p.insert(name.to_string(), t);
        p
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let eye = tape.leaf_const(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]));
        let a = tape.leaf_const(Tensor::new(vec![2, 2], vec![3.0, -1.0, 2.5, 7.0]));
        let out = tape.matmul(eye, a);
        assert_eq!(tape.value(out).data(), tape.value(a).data());
    }

    #[test]
    fn sigmoid_at_zero_is_half() {
        let mut tape = Tape::new();
        let x = tape.leaf_const(Tensor::scalar(0.0));
        let s = tape.sigmoid(x);
        assert_eq!(tape.value(s).item(), 0.5);
    }

    #[test]
    fn softmax_uniform_on_equal_inputs() {
        let mut tape = Tape::new();
        let x = tape.leaf_const(Tensor::new(vec![1, 3], vec![0.0, 0.0, 0.0]));
        let s = tape.softmax(x, 1);
        for v in tape.value(s).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut tape = Tape::new();
        let x = tape.leaf_const(Tensor::new(vec![2, 4], vec![1.0, -2.0, 0.3, 4.0, 9.0, 9.0, -3.0, 0.0]));
        let s = tape.softmax(x, 1);
        for i in 0..2 {
            let sum: f64 = tape.value(s).row_slice(i).iter().sum();
            assert!((sum - 1.0).abs() < 1e-12, "row sum {sum}");
        }
    }

    #[test]
    fn layernorm_rows_have_zero_mean() {
        let mut tape = Tape::new();
        let x = tape.leaf_const(Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, -5.0, 0.0, 5.0]));
        let g = tape.leaf_const(Tensor::new(vec![3], vec![1.0, 1.0, 1.0]));
        let b = tape.leaf_const(Tensor::new(vec![3], vec![0.0, 0.0, 0.0]));
        let ln = tape.layernorm(x, g, b, 1e-9);
        for i in 0..2 {
            let mean: f64 = tape.value(ln).row_slice(i).iter().sum::<f64>() / 3.0;
            assert!(mean.abs() < 1e-10, "row mean {mean}");
        }
    }

    #[test]
    fn backward_of_sum_of_squares() {
        let mut tape = Tape::new();
        let params = params_with("x", Tensor::new(vec![2], vec![1.0, 2.0]));
        let x = tape.leaf_param("x", params.get("x").unwrap().clone());
        let loss = tape.sum_sq_all(x);
        let grads = tape.backward(loss, &params).unwrap();
        assert_eq!(grads.get("x").unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_of_sigmoid_at_zero() {
        let mut tape = Tape::new();
        let params = params_with("w", Tensor::scalar(0.0));
        let w = tape.leaf_param("w", Tensor::scalar(0.0));
        let s = tape.sigmoid(w);
        let loss = tape.sum_all(s);
        let grads = tape.backward(loss, &params).unwrap();
        assert!((grads.get("w").unwrap().item() - 0.25).abs() < 1e-15);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let params = params_with("x", Tensor::new(vec![2], vec![1.0, 2.0]));
        let x = tape.leaf_param("x", params.get("x").unwrap().clone());
        let err = tape.backward(x, &params).unwrap_err();
        assert!(matches!(err, TensorError::NonScalarLoss(_)));
    }

    #[test]
    fn untouched_parameters_get_zero_gradients() {
        let mut params = ParameterSet::new();
        params.insert("used".into(), Tensor::scalar(2.0));
        params.insert("unused".into(), Tensor::new(vec![3], vec![1.0, 1.0, 1.0]));
        let mut tape = Tape::new();
        let used = tape.leaf_param("used", Tensor::scalar(2.0));
        let loss = tape.sum_sq_all(used);
        let grads = tape.backward(loss, &params).unwrap();
        assert_eq!(grads.get("used").unwrap().item(), 4.0);
        assert_eq!(grads.get("unused").unwrap().data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    #[should_panic(expected = "matmul shape mismatch")]
    fn matmul_rejects_mismatched_shapes() {
        let mut tape = Tape::new();
        let a = tape.leaf_const(Tensor::zeros(vec![2, 3]));
        let b = tape.leaf_const(Tensor::zeros(vec![2, 3]));
        let _ = tape.matmul(a, b);
    }

    #[test]
    #[should_panic(expected = "add shape mismatch")]
    fn add_rejects_mismatched_shapes() {
        let mut tape = Tape::new();
        let a = tape.leaf_const(Tensor::zeros(vec![2, 3]));
        let b = tape.leaf_const(Tensor::zeros(vec![3, 2]));
        let _ = tape.add(a, b);
    }

    #[test]
    fn frozen_leaves_receive_no_gradient_flow() {
        let mut params = ParameterSet::new();
        params.insert("w".into(), Tensor::scalar(3.0));
        let mut tape = Tape::new();
        let w = tape.leaf_param("w", Tensor::scalar(3.0));
        let frozen = tape.leaf_const(Tensor::scalar(5.0));
        let prod = tape.hadamard(w, frozen);
        let loss = tape.sum_all(prod);
        let grads = tape.backward(loss, &params).unwrap();
        assert_eq!(grads.get("w").unwrap().item(), 5.0);
    }
}
