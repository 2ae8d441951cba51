//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! Nodes are appended in evaluation order, so insertion order is a topological
//! order and `backward` simply walks the tape in reverse.

use alloc::borrow::ToOwned;
use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::rng::counter_uniform;
use crate::tensor::{Real, Tensor};

/// Layernorm epsilon used throughout the model.
pub const LAYERNORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// The differentiable primitives exposed through [`Graph::apply`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PrimitiveKind {
    MatMul,
    Add,
    Scale,
    Relu,
    Softmax,
    LogSoftmax,
    LayerNorm,
    Embedding,
    Dropout,
    Concat,
    Slice,
    WeightedSum,
}

impl PrimitiveKind {
    pub const ALL: [PrimitiveKind; 12] = [
        PrimitiveKind::MatMul,
        PrimitiveKind::Add,
        PrimitiveKind::Scale,
        PrimitiveKind::Relu,
        PrimitiveKind::Softmax,
        PrimitiveKind::LogSoftmax,
        PrimitiveKind::LayerNorm,
        PrimitiveKind::Embedding,
        PrimitiveKind::Dropout,
        PrimitiveKind::Concat,
        PrimitiveKind::Slice,
        PrimitiveKind::WeightedSum,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PrimitiveKind::MatMul => "matmul",
            PrimitiveKind::Add => "add",
            PrimitiveKind::Scale => "scale-by-scalar",
            PrimitiveKind::Relu => "relu",
            PrimitiveKind::Softmax => "softmax-lastdim",
            PrimitiveKind::LogSoftmax => "log-softmax-lastdim",
            PrimitiveKind::LayerNorm => "layernorm-lastdim",
            PrimitiveKind::Embedding => "embedding-lookup",
            PrimitiveKind::Dropout => "dropout",
            PrimitiveKind::Concat => "concat-lastdim",
            PrimitiveKind::Slice => "slice-lastdim",
            PrimitiveKind::WeightedSum => "weighted-sum",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|k| k.name() == name)
            .ok_or_else(|| Error::UnknownPrimitive(name.to_owned()))
    }
}

/// Attributes consumed by [`Graph::apply`]; each primitive reads only the fields it needs.
#[derive(Clone, Debug, Default)]
pub struct Attrs {
    pub training: bool,
    /// Layernorm epsilon; defaults to [`LAYERNORM_EPS`].
    pub eps: Option<f64>,
    /// Dropout rate.
    pub rate: Option<f64>,
    /// Constant factor for `scale-by-scalar` with a single input.
    pub factor: Option<f64>,
    /// Row ids for `embedding-lookup`.
    pub ids: Option<Vec<usize>>,
    /// Leading output dims for `embedding-lookup` (defaults to `[ids.len()]`).
    pub lead_shape: Option<Vec<usize>>,
    pub start: Option<usize>,
    pub len: Option<usize>,
    /// Multiply by the transpose of the second operand.
    pub trans_b: bool,
    /// Weights for `weighted-sum`.
    pub weights: Option<Vec<f64>>,
}

enum Op<T> {
    Leaf,
    MatMul { trans_b: bool },
    Add,
    Scale(T),
    ScaleBy,
    Relu,
    Softmax,
    LogSoftmax,
    LayerNorm { eps: T },
    Embedding { ids: Vec<usize> },
    Dropout { mask: Vec<T> },
    Concat,
    Slice { start: usize },
    WeightedSum { weights: Vec<T> },
}

struct Node<T> {
    op: Op<T>,
    inputs: Vec<NodeId>,
    value: Tensor<T>,
    needs_grad: bool,
    trainable: bool,
}

/// A single-writer computation tape.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    seed: u64,
    training: bool,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients<T> {
    grads: BTreeMap<NodeId, Tensor<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(&id)
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor<T>> {
        self.grads.remove(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (NodeId, &Tensor<T>)> {
        self.grads.iter().map(|(k, v)| (*k, v))
    }
}

impl<T: Real> Graph<T> {
    /// `seed` drives dropout masks; `training` enables dropout for the typed helpers.
    pub fn new(seed: u64, training: bool) -> Self {
        Self {
            nodes: Vec::new(),
            seed,
            training,
        }
    }

    pub fn training(&self) -> bool {
        self.training
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    /// Trainable leaf.
    pub fn parameter(&mut self, value: Tensor<T>) -> NodeId {
        self.push(Op::Leaf, Vec::new(), value, true, true)
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.push(Op::Leaf, Vec::new(), value, false, false)
    }

    pub fn is_trainable(&self, id: NodeId) -> bool {
        self.nodes[id.0].trainable
    }

    fn push(
        &mut self,
        op: Op<T>,
        inputs: Vec<NodeId>,
        value: Tensor<T>,
        needs_grad: bool,
        trainable: bool,
    ) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op,
            inputs,
            value,
            needs_grad,
            trainable,
        });
        id
    }

    fn push_op(&mut self, op: Op<T>, inputs: Vec<NodeId>, value: Tensor<T>) -> NodeId {
        let needs = inputs.iter().any(|i| self.nodes[i.0].needs_grad);
        self.push(op, inputs, value, needs, false)
    }

    /// Generic entry point: evaluates `kind` on `inputs` and records the node.
    pub fn apply(&mut self, kind: PrimitiveKind, inputs: &[NodeId], attrs: &Attrs) -> Result<NodeId> {
        let arity = |expected: usize| -> Result<()> {
            if inputs.len() == expected {
                Ok(())
            } else {
                Err(Error::Arity {
                    op: kind.name(),
                    expected,
                    got: inputs.len(),
                })
            }
        };
        match kind {
            PrimitiveKind::MatMul => {
                arity(2)?;
                self.matmul_impl(inputs[0], inputs[1], attrs.trans_b)
            }
            PrimitiveKind::Add => {
                arity(2)?;
                self.add(inputs[0], inputs[1])
            }
            PrimitiveKind::Scale => match inputs.len() {
                1 => {
                    let f = attrs.factor.ok_or(Error::BadAttribute("scale-by-scalar"))?;
                    Ok(self.scale(inputs[0], f))
                }
                2 => self.scale_by(inputs[0], inputs[1]),
                got => Err(Error::Arity {
                    op: kind.name(),
                    expected: 2,
                    got,
                }),
            },
            PrimitiveKind::Relu => {
                arity(1)?;
                Ok(self.relu(inputs[0]))
            }
            PrimitiveKind::Softmax => {
                arity(1)?;
                Ok(self.softmax(inputs[0]))
            }
            PrimitiveKind::LogSoftmax => {
                arity(1)?;
                Ok(self.log_softmax(inputs[0]))
            }
            PrimitiveKind::LayerNorm => {
                arity(3)?;
                self.layer_norm_eps(
                    inputs[0],
                    inputs[1],
                    inputs[2],
                    attrs.eps.unwrap_or(LAYERNORM_EPS),
                )
            }
            PrimitiveKind::Embedding => {
                arity(1)?;
                let ids = attrs.ids.as_ref().ok_or(Error::BadAttribute("embedding-lookup"))?;
                let lead = attrs.lead_shape.clone().unwrap_or_else(|| vec![ids.len()]);
                self.embedding(inputs[0], ids, &lead)
            }
            PrimitiveKind::Dropout => {
                arity(1)?;
                let rate = attrs.rate.ok_or(Error::BadAttribute("dropout"))?;
                Ok(self.dropout_with(inputs[0], rate, attrs.training))
            }
            PrimitiveKind::Concat => self.concat(inputs),
            PrimitiveKind::Slice => {
                arity(1)?;
                let (start, len) = attrs
                    .start
                    .zip(attrs.len)
                    .ok_or(Error::BadAttribute("slice-lastdim"))?;
                self.slice(inputs[0], start, len)
            }
            PrimitiveKind::WeightedSum => {
                arity(1)?;
                let w = attrs.weights.as_ref().ok_or(Error::BadAttribute("weighted-sum"))?;
                let w: Vec<T> = w.iter().map(|&v| T::from_f64_lossy(v)).collect();
                self.weighted_sum(inputs[0], w)
            }
        }
    }

    /// `a @ b` for `a: [.., k]` and `b: [k, n]`, or batched `a: [B.., m, k]`, `b: [B.., k, n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.matmul_impl(a, b, false)
    }

    /// `a @ b^T` with `b: [n, k]` or batched `b: [B.., n, k]`.
    pub fn matmul_t(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: NodeId, b: NodeId, trans_b: bool) -> Result<NodeId> {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let geo = MatMulGeometry::new(av.shape(), bv.shape(), trans_b)?;
        let mut out = vec![T::zero(); geo.batch * geo.m * geo.n];
        let (rsb, csb) = geo.b_strides();
        for bi in 0..geo.batch {
            let a_off = if geo.batched { bi * geo.m * geo.k } else { 0 };
            let b_off = if geo.batched { bi * geo.k * geo.n } else { 0 };
            let c_off = bi * geo.m * geo.n;
            // SAFETY: offsets and strides are derived from validated shapes.
            unsafe {
                T::gemm(
                    geo.m,
                    geo.k,
                    geo.n,
                    T::one(),
                    av.data().as_ptr().add(a_off),
                    geo.k as isize,
                    1,
                    bv.data().as_ptr().add(b_off),
                    rsb,
                    csb,
                    T::zero(),
                    out.as_mut_ptr().add(c_off),
                    geo.n as isize,
                    1,
                );
            }
        }
        let value = Tensor::from_parts(geo.out_shape, out);
        Ok(self.push_op(Op::MatMul { trans_b }, vec![a, b], value))
    }

    /// Elementwise `a + b`, where `b`'s shape must be a suffix of `a`'s (row broadcast).
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        if !is_suffix(bv.shape(), av.shape()) {
            return Err(Error::ShapeMismatch {
                op: "add",
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let bn = bv.numel();
        let bd = bv.data();
        let data: Vec<T> = av
            .data()
            .chunks_exact(bn)
            .flat_map(|chunk| chunk.iter().zip(bd).map(|(&x, &y)| x + y))
            .collect();
        let value = Tensor::from_parts(av.shape().to_vec(), data);
        Ok(self.push_op(Op::Add, vec![a, b], value))
    }

    /// Multiplies by a constant.
    pub fn scale(&mut self, x: NodeId, factor: f64) -> NodeId {
        let f = T::from_f64_lossy(factor);
        let value = self.nodes[x.0].value.map(|v| v * f);
        self.push_op(Op::Scale(f), vec![x], value)
    }

    /// Multiplies by a differentiable scalar node of shape `[1]`.
    pub fn scale_by(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        let sv = &self.nodes[s.0].value;
        if sv.numel() != 1 {
            return Err(Error::ShapeMismatch {
                op: "scale-by-scalar",
                lhs: self.nodes[x.0].value.shape().to_vec(),
                rhs: sv.shape().to_vec(),
            });
        }
        let f = sv.item();
        let value = self.nodes[x.0].value.map(|v| v * f);
        Ok(self.push_op(Op::ScaleBy, vec![x, s], value))
    }

    /// Sign bits of every relu input on the tape, in tape order.
    ///
    /// Two evaluations with equal patterns lie on the same linear piece of every relu.
    pub fn relu_pattern(&self) -> Vec<bool> {
        self.nodes
            .iter()
            .filter(|n| matches!(n.op, Op::Relu))
            .flat_map(|n| self.nodes[n.inputs[0].0].value.data().iter().map(|&v| v > T::zero()))
            .collect()
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let value = self.nodes[x.0].value.map(|v| if v > T::zero() { v } else { T::zero() });
        self.push_op(Op::Relu, vec![x], value)
    }

    pub fn softmax(&mut self, x: NodeId) -> NodeId {
        let xv = &self.nodes[x.0].value;
        let d = xv.last_dim();
        let mut data = xv.data().to_vec();
        for row in data.chunks_exact_mut(d) {
            softmax_in_place(row);
        }
        let value = Tensor::from_parts(xv.shape().to_vec(), data);
        self.push_op(Op::Softmax, vec![x], value)
    }

    pub fn log_softmax(&mut self, x: NodeId) -> NodeId {
        let xv = &self.nodes[x.0].value;
        let d = xv.last_dim();
        let mut data = xv.data().to_vec();
        for row in data.chunks_exact_mut(d) {
            log_softmax_in_place(row);
        }
        let value = Tensor::from_parts(xv.shape().to_vec(), data);
        self.push_op(Op::LogSoftmax, vec![x], value)
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId> {
        self.layer_norm_eps(x, gain, bias, LAYERNORM_EPS)
    }

    fn layer_norm_eps(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> Result<NodeId> {
        let xv = &self.nodes[x.0].value;
        let gv = &self.nodes[gain.0].value;
        let bv = &self.nodes[bias.0].value;
        let d = xv.last_dim();
        if gv.shape() != [d] || bv.shape() != [d] {
            return Err(Error::ShapeMismatch {
                op: "layernorm-lastdim",
                lhs: xv.shape().to_vec(),
                rhs: gv.shape().to_vec(),
            });
        }
        let eps_t = T::from_f64_lossy(eps);
        let mut data = Vec::with_capacity(xv.numel());
        for row in xv.data().chunks_exact(d) {
            let (mean, rstd) = row_moments(row, eps_t);
            for j in 0..d {
                data.push((row[j] - mean) * rstd * gv.data()[j] + bv.data()[j]);
            }
        }
        let value = Tensor::from_parts(xv.shape().to_vec(), data);
        Ok(self.push_op(Op::LayerNorm { eps: eps_t }, vec![x, gain, bias], value))
    }

    /// Gathers rows of `table: [V, d]`; output shape is `lead_shape ++ [d]`.
    pub fn embedding(&mut self, table: NodeId, ids: &[usize], lead_shape: &[usize]) -> Result<NodeId> {
        let tv = &self.nodes[table.0].value;
        if tv.shape().len() != 2 || lead_shape.iter().product::<usize>() != ids.len() {
            return Err(Error::ShapeMismatch {
                op: "embedding-lookup",
                lhs: tv.shape().to_vec(),
                rhs: lead_shape.to_vec(),
            });
        }
        let (v, d) = (tv.shape()[0], tv.shape()[1]);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::TokenIdOutOfRange(id));
            }
            data.extend_from_slice(tv.row(id));
        }
        let mut shape = lead_shape.to_vec();
        shape.push(d);
        let value = Tensor::from_parts(shape, data);
        Ok(self.push_op(Op::Embedding { ids: ids.to_vec() }, vec![table], value))
    }

    /// Inverted dropout using the graph's training flag.
    pub fn dropout(&mut self, x: NodeId, rate: f64) -> NodeId {
        let training = self.training;
        self.dropout_with(x, rate, training)
    }

    /// Inverted dropout; the mask is a pure function of `(graph seed, node index, element)`.
    /// Identity (no node recorded) when not training or `rate == 0`.
    pub fn dropout_with(&mut self, x: NodeId, rate: f64, training: bool) -> NodeId {
        if !training || rate <= 0.0 {
            return x;
        }
        let stream = self.nodes.len() as u64;
        let keep = T::from_f64_lossy(1.0 / (1.0 - rate));
        let xv = &self.nodes[x.0].value;
        let mask: Vec<T> = (0..xv.numel() as u64)
            .map(|i| {
                if counter_uniform(self.seed, stream, i) < rate {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        let data = xv.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let value = Tensor::from_parts(xv.shape().to_vec(), data);
        self.push_op(Op::Dropout { mask }, vec![x], value)
    }

    /// Concatenates along the last dimension; leading dims must agree.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = parts.first().ok_or(Error::Arity {
            op: "concat-lastdim",
            expected: 1,
            got: 0,
        })?;
        let lead = {
            let s = self.nodes[first.0].value.shape();
            s[..s.len() - 1].to_vec()
        };
        let mut total = 0;
        for p in parts {
            let s = self.nodes[p.0].value.shape();
            if s[..s.len() - 1] != lead[..] {
                return Err(Error::ShapeMismatch {
                    op: "concat-lastdim",
                    lhs: self.nodes[first.0].value.shape().to_vec(),
                    rhs: s.to_vec(),
                });
            }
            total += s[s.len() - 1];
        }
        let rows: usize = lead.iter().product();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(self.nodes[p.0].value.row(r));
            }
        }
        let mut shape = lead;
        shape.push(total);
        let value = Tensor::from_parts(shape, data);
        Ok(self.push_op(Op::Concat, parts.to_vec(), value))
    }

    /// Columns `start..start+len` of the last dimension.
    pub fn slice(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let xv = &self.nodes[x.0].value;
        let d = xv.last_dim();
        if len == 0 || start + len > d {
            return Err(Error::ShapeMismatch {
                op: "slice-lastdim",
                lhs: xv.shape().to_vec(),
                rhs: vec![start, len],
            });
        }
        let mut data = Vec::with_capacity(xv.rows() * len);
        for row in xv.data().chunks_exact(d) {
            data.extend_from_slice(&row[start..start + len]);
        }
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().expect("rank >= 1") = len;
        let value = Tensor::from_parts(shape, data);
        Ok(self.push_op(Op::Slice { start }, vec![x], value))
    }

    /// `sum_i w_i x_i` as a `[1]` tensor.
    pub fn weighted_sum(&mut self, x: NodeId, weights: Vec<T>) -> Result<NodeId> {
        let xv = &self.nodes[x.0].value;
        if weights.len() != xv.numel() {
            return Err(Error::ShapeMismatch {
                op: "weighted-sum",
                lhs: xv.shape().to_vec(),
                rhs: vec![weights.len()],
            });
        }
        let s: T = xv.data().iter().zip(&weights).map(|(&a, &b)| a * b).sum();
        Ok(self.push_op(Op::WeightedSum { weights }, vec![x], Tensor::scalar(s)))
    }

    /// Plain sum to a `[1]` tensor.
    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let n = self.nodes[x.0].value.numel();
        self.weighted_sum(x, vec![T::one(); n])
            .expect("weights sized from input")
    }

    /// Gradients of scalar `loss` for every trainable leaf (zeros when unused).
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>> {
        self.backward_retaining(loss, &[])
    }

    /// Like [`Graph::backward`], additionally keeping gradients of the `retain` nodes.
    pub fn backward_retaining(&self, loss: NodeId, retain: &[NodeId]) -> Result<Gradients<T>> {
        let lv = &self.nodes[loss.0].value;
        if lv.numel() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut keep = vec![false; self.nodes.len()];
        for r in retain {
            keep[r.0] = true;
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        let mut out = BTreeMap::new();

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            let Some(g) = grads[idx].take() else {
                continue;
            };
            if node.needs_grad {
                self.propagate(node, &g, &mut grads);
            }
            if keep[idx] || node.trainable {
                out.insert(NodeId(idx), Tensor::from_parts(node.value.shape().to_vec(), g));
            }
        }
        for (idx, node) in self.nodes.iter().enumerate() {
            if node.trainable {
                out.entry(NodeId(idx))
                    .or_insert_with(|| Tensor::zeros(node.value.shape()));
            }
        }
        for r in retain {
            out.entry(*r)
                .or_insert_with(|| Tensor::zeros(self.nodes[r.0].value.shape()));
        }
        Ok(Gradients { grads: out })
    }

    fn grad_buf<'a>(&self, grads: &'a mut [Option<Vec<T>>], id: NodeId) -> Option<&'a mut Vec<T>> {
        let node = &self.nodes[id.0];
        if !node.needs_grad {
            return None;
        }
        let n = node.value.numel();
        Some(grads[id.0].get_or_insert_with(|| vec![T::zero(); n]))
    }

    fn propagate(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let ins = &node.inputs;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { trans_b } => {
                let av = &self.nodes[ins[0].0].value;
                let bv = &self.nodes[ins[1].0].value;
                let geo = MatMulGeometry::new(av.shape(), bv.shape(), *trans_b)
                    .expect("validated in forward");
                if let Some(ga) = self.grad_buf(grads, ins[0]) {
                    // dA = dC @ B^T
                    let (rsb, csb) = geo.b_strides();
                    for bi in 0..geo.batch {
                        let a_off = if geo.batched { bi * geo.m * geo.k } else { 0 };
                        let b_off = if geo.batched { bi * geo.k * geo.n } else { 0 };
                        let c_off = bi * geo.m * geo.n;
                        // SAFETY: same geometry as the forward pass.
                        unsafe {
                            T::gemm(
                                geo.m,
                                geo.n,
                                geo.k,
                                T::one(),
                                g.as_ptr().add(c_off),
                                geo.n as isize,
                                1,
                                bv.data().as_ptr().add(b_off),
                                csb,
                                rsb,
                                T::one(),
                                ga.as_mut_ptr().add(a_off),
                                geo.k as isize,
                                1,
                            );
                        }
                    }
                }
                if let Some(gb) = self.grad_buf(grads, ins[1]) {
                    // dB = A^T @ dC, written through B's (possibly transposed) strides.
                    let (rsb, csb) = geo.b_strides();
                    for bi in 0..geo.batch {
                        let a_off = if geo.batched { bi * geo.m * geo.k } else { 0 };
                        let b_off = if geo.batched { bi * geo.k * geo.n } else { 0 };
                        let c_off = bi * geo.m * geo.n;
                        // SAFETY: same geometry as the forward pass.
                        unsafe {
                            T::gemm(
                                geo.k,
                                geo.m,
                                geo.n,
                                T::one(),
                                av.data().as_ptr().add(a_off),
                                1,
                                geo.k as isize,
                                g.as_ptr().add(c_off),
                                geo.n as isize,
                                1,
                                T::one(),
                                gb.as_mut_ptr().add(b_off),
                                rsb,
                                csb,
                            );
                        }
                    }
                }
            }
            Op::Add => {
                if let Some(ga) = self.grad_buf(grads, ins[0]) {
                    for (a, &d) in ga.iter_mut().zip(g) {
                        *a = *a + d;
                    }
                }
                if let Some(gb) = self.grad_buf(grads, ins[1]) {
                    let bn = gb.len();
                    for chunk in g.chunks_exact(bn) {
                        for (b, &d) in gb.iter_mut().zip(chunk) {
                            *b = *b + d;
                        }
                    }
                }
            }
            Op::Scale(f) => {
                if let Some(ga) = self.grad_buf(grads, ins[0]) {
                    for (a, &d) in ga.iter_mut().zip(g) {
                        *a = *a + d * *f;
                    }
                }
            }
            Op::ScaleBy => {
                let xv = &self.nodes[ins[0].0].value;
                let s = self.nodes[ins[1].0].value.item();
                if let Some(gx) = self.grad_buf(grads, ins[0]) {
                    for (a, &d) in gx.iter_mut().zip(g) {
                        *a = *a + d * s;
                    }
                }
                if let Some(gs) = self.grad_buf(grads, ins[1]) {
                    let dot: T = xv.data().iter().zip(g).map(|(&x, &d)| x * d).sum();
                    gs[0] = gs[0] + dot;
                }
            }
            Op::Relu => {
                let y = node.value.data();
                if let Some(gx) = self.grad_buf(grads, ins[0]) {
                    for ((a, &d), &yv) in gx.iter_mut().zip(g).zip(y) {
                        if yv > T::zero() {
                            *a = *a + d;
                        }
                    }
                }
            }
            Op::Softmax => {
                let y = node.value.data();
                let d = node.value.last_dim();
                if let Some(gx) = self.grad_buf(grads, ins[0]) {
                    for ((gxr, gr), yr) in gx.chunks_exact_mut(d).zip(g.chunks_exact(d)).zip(y.chunks_exact(d)) {
                        let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                        for j in 0..d {
                            gxr[j] = gxr[j] + yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::LogSoftmax => {
                let y = node.value.data();
                let d = node.value.last_dim();
                if let Some(gx) = self.grad_buf(grads, ins[0]) {
                    for ((gxr, gr), yr) in gx.chunks_exact_mut(d).zip(g.chunks_exact(d)).zip(y.chunks_exact(d)) {
                        let total: T = gr.iter().copied().sum();
                        for j in 0..d {
                            gxr[j] = gxr[j] + gr[j] - yr[j].exp() * total;
                        }
                    }
                }
            }
            Op::LayerNorm { eps } => {
                let xv = &self.nodes[ins[0].0].value;
                let gain = self.nodes[ins[1].0].value.data();
                let d = xv.last_dim();
                let dn = T::from_usize(d).expect("small dim");
                let mut dgain = vec![T::zero(); d];
                let mut dbias = vec![T::zero(); d];
                let mut dx = if self.nodes[ins[0].0].needs_grad {
                    Some(vec![T::zero(); xv.numel()])
                } else {
                    None
                };
                let mut xhat = vec![T::zero(); d];
                let mut dxhat = vec![T::zero(); d];
                for (r, (row, gr)) in xv.data().chunks_exact(d).zip(g.chunks_exact(d)).enumerate() {
                    let (mean, rstd) = row_moments(row, *eps);
                    for j in 0..d {
                        xhat[j] = (row[j] - mean) * rstd;
                        dgain[j] = dgain[j] + gr[j] * xhat[j];
                        dbias[j] = dbias[j] + gr[j];
                        dxhat[j] = gr[j] * gain[j];
                    }
                    if let Some(dx) = dx.as_mut() {
                        let m1: T = dxhat.iter().copied().sum::<T>() / dn;
                        let m2: T = dxhat.iter().zip(&xhat).map(|(&a, &b)| a * b).sum::<T>() / dn;
                        let out = &mut dx[r * d..(r + 1) * d];
                        for j in 0..d {
                            out[j] = rstd * (dxhat[j] - m1 - xhat[j] * m2);
                        }
                    }
                }
                if let (Some(dx), Some(buf)) = (dx, self.grad_buf(grads, ins[0])) {
                    for (a, b) in buf.iter_mut().zip(dx) {
                        *a = *a + b;
                    }
                }
                if let Some(buf) = self.grad_buf(grads, ins[1]) {
                    for (a, b) in buf.iter_mut().zip(dgain) {
                        *a = *a + b;
                    }
                }
                if let Some(buf) = self.grad_buf(grads, ins[2]) {
                    for (a, b) in buf.iter_mut().zip(dbias) {
                        *a = *a + b;
                    }
                }
            }
            Op::Embedding { ids } => {
                let d = node.value.last_dim();
                if let Some(gt) = self.grad_buf(grads, ins[0]) {
                    for (i, &id) in ids.iter().enumerate() {
                        let dst = &mut gt[id * d..(id + 1) * d];
                        for (a, &b) in dst.iter_mut().zip(&g[i * d..(i + 1) * d]) {
                            *a = *a + b;
                        }
                    }
                }
            }
            Op::Dropout { mask } => {
                if let Some(gx) = self.grad_buf(grads, ins[0]) {
                    for ((a, &d), &m) in gx.iter_mut().zip(g).zip(mask) {
                        *a = *a + d * m;
                    }
                }
            }
            Op::Concat => {
                let total = node.value.last_dim();
                let rows = node.value.rows();
                let mut offset = 0;
                for p in ins {
                    let w = self.nodes[p.0].value.last_dim();
                    if let Some(gp) = self.grad_buf(grads, *p) {
                        for r in 0..rows {
                            let src = &g[r * total + offset..r * total + offset + w];
                            for (a, &b) in gp[r * w..(r + 1) * w].iter_mut().zip(src) {
                                *a = *a + b;
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::Slice { start } => {
                let w = node.value.last_dim();
                let d = self.nodes[ins[0].0].value.last_dim();
                if let Some(gx) = self.grad_buf(grads, ins[0]) {
                    for (r, gr) in g.chunks_exact(w).enumerate() {
                        let dst = &mut gx[r * d + start..r * d + start + w];
                        for (a, &b) in dst.iter_mut().zip(gr) {
                            *a = *a + b;
                        }
                    }
                }
            }
            Op::WeightedSum { weights } => {
                let s = g[0];
                if let Some(gx) = self.grad_buf(grads, ins[0]) {
                    for (a, &w) in gx.iter_mut().zip(weights) {
                        *a = *a + w * s;
                    }
                }
            }
        }
    }
}

struct MatMulGeometry {
    batched: bool,
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    trans_b: bool,
    out_shape: Vec<usize>,
}

impl MatMulGeometry {
    fn new(a: &[usize], b: &[usize], trans_b: bool) -> Result<Self> {
        let err = || Error::ShapeMismatch {
            op: "matmul",
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        };
        if a.is_empty() || b.len() < 2 {
            return Err(err());
        }
        let (bk, bn) = if trans_b {
            (b[b.len() - 1], b[b.len() - 2])
        } else {
            (b[b.len() - 2], b[b.len() - 1])
        };
        let k = a[a.len() - 1];
        if k != bk {
            return Err(err());
        }
        if b.len() == 2 {
            let rows: usize = a[..a.len() - 1].iter().product();
            let mut out_shape = a[..a.len() - 1].to_vec();
            out_shape.push(bn);
            Ok(Self {
                batched: false,
                batch: 1,
                m: rows,
                k,
                n: bn,
                trans_b,
                out_shape,
            })
        } else {
            if a.len() != b.len() || a[..a.len() - 2] != b[..b.len() - 2] {
                return Err(err());
            }
            let batch: usize = a[..a.len() - 2].iter().product();
            let m = a[a.len() - 2];
            let mut out_shape = a[..a.len() - 1].to_vec();
            out_shape.push(bn);
            Ok(Self {
                batched: true,
                batch,
                m,
                k,
                n: bn,
                trans_b,
                out_shape,
            })
        }
    }

    /// Row/column strides of the logical `[k, n]` right operand.
    fn b_strides(&self) -> (isize, isize) {
        if self.trans_b {
            (1, self.k as isize)
        } else {
            (self.n as isize, 1)
        }
    }
}

fn is_suffix(suffix: &[usize], full: &[usize]) -> bool {
    suffix.len() <= full.len() && full[full.len() - suffix.len()..] == *suffix
}

fn row_moments<T: Real>(row: &[T], eps: T) -> (T, T) {
    let n = T::from_usize(row.len()).expect("small dim");
    let mean = row.iter().copied().sum::<T>() / n;
    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
    (mean, T::one() / (var + eps).sqrt())
}

pub(crate) fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total = total + *v;
    }
    for v in row.iter_mut() {
        *v = *v / total;
    }
}

pub(crate) fn log_softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
    for v in row.iter_mut() {
        *v = *v - lse;
    }
}

/// Central finite differences of a scalar function, one coordinate at a time.
pub fn finite_difference_grad<T: Real>(
    mut f: impl FnMut(&Tensor<T>) -> T,
    x: &Tensor<T>,
    eps: f64,
) -> Tensor<T> {
    let e = T::from_f64_lossy(eps);
    let two_e = e + e;
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + e;
        let plus = f(&probe);
        probe.data_mut()[i] = orig - e;
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        out.push((plus - minus) / two_e);
    }
    Tensor::from_parts(x.shape().to_vec(), out)
}
