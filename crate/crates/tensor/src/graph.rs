use std::collections::BTreeMap;

use crate::error::{Result, TensorError};
use crate::ops::{self, Axis, Op};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(pub usize);

#[derive(Debug, Clone)]
struct Node<T> {
    op: Op,
    inputs: Vec<NodeId>,
    value: Tensor<T>,
    requires_grad: bool,
}

/// Recorded computation.
///
/// Operations evaluate eagerly as they are appended, so nodes are always
/// in topological order (every input id precedes its consumer). The
/// recording can be re-run against new input bindings with
/// [`Graph::forward`].
#[derive(Debug, Clone, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    inputs: BTreeMap<String, NodeId>,
    outputs: BTreeMap<String, NodeId>,
}

/// Gradients of one backward pass, indexed by node.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    names: BTreeMap<String, NodeId>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.names.get(name).and_then(|&id| self.get(id))
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor<T>> {
        self.grads.get_mut(id.0).and_then(Option::take)
    }

    /// Named inputs that received a gradient.
    pub fn named(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names
            .iter()
            .filter_map(|(name, &id)| self.get(id).map(|g| (name.as_str(), g)))
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, value: Tensor<T>, requires_grad: bool) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op,
            inputs,
            value,
            requires_grad,
        });
        id
    }

    /// Named leaf. `requires_grad` on the tensor decides whether the
    /// backward pass produces a gradient for it.
    pub fn input(&mut self, name: &str, value: Tensor<T>) -> NodeId {
        let rg = value.requires_grad();
        let id = self.push(Op::Input { name: name.to_string() }, Vec::new(), value, rg);
        self.inputs.insert(name.to_string(), id);
        id
    }

    pub fn param(&mut self, name: &str, value: Tensor<T>) -> NodeId {
        self.input(name, value.with_requires_grad(true))
    }

    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.push(Op::Constant, Vec::new(), value.with_requires_grad(false), false)
    }

    pub fn mark_output(&mut self, name: &str, id: NodeId) {
        self.outputs.insert(name.to_string(), id);
    }

    pub fn input_id(&self, name: &str) -> Option<NodeId> {
        self.inputs.get(name).copied()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn op(&self, id: NodeId) -> &Op {
        &self.nodes[id.0].op
    }

    pub fn node_inputs(&self, id: NodeId) -> &[NodeId] {
        &self.nodes[id.0].inputs
    }

    /// Names of inputs whose gradient is tracked.
    pub fn trainable_inputs(&self) -> Vec<String> {
        self.inputs
            .iter()
            .filter(|(_, &id)| self.nodes[id.0].requires_grad)
            .map(|(n, _)| n.clone())
            .collect()
    }

    fn apply(&mut self, op: Op, inputs: Vec<NodeId>) -> Result<NodeId> {
        let next = self.nodes.len();
        for &i in &inputs {
            if i.0 >= next {
                return Err(TensorError::UnknownNode(i.0));
            }
        }
        let value = {
            let vals: Vec<&Tensor<T>> = inputs.iter().map(|i| &self.nodes[i.0].value).collect();
            ops::forward(&op, next, &vals)?
        };
        let rg = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        Ok(self.push(op, inputs, value, rg))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::MatMul { trans_a: false, trans_b: false }, vec![a, b])
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::MatMul { trans_a: false, trans_b: true }, vec![a, b])
    }

    /// `aᵀ · b`
    pub fn matmul_tn(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::MatMul { trans_a: true, trans_b: false }, vec![a, b])
    }

    /// Element-wise sum; either operand may broadcast along a unit row
    /// or column dimension.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::Add, vec![a, b])
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let nb = self.scale(b, -1.0)?;
        self.add(a, nb)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::Mul, vec![a, b])
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId> {
        self.apply(Op::Scale { factor }, vec![a])
    }

    pub fn row_softmax(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::RowSoftmax, vec![a])
    }

    /// Per-row normalization to zero mean and unit variance (no affine).
    pub fn layer_norm(&mut self, a: NodeId, eps: f64) -> Result<NodeId> {
        self.apply(Op::LayerNorm { eps }, vec![a])
    }

    pub fn silu(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::Silu, vec![a])
    }

    pub fn gelu(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::Gelu, vec![a])
    }

    /// Row lookup: output row `k` is `table[indices[k]]`.
    pub fn gather(&mut self, table: NodeId, indices: Vec<usize>) -> Result<NodeId> {
        self.apply(Op::Gather { indices }, vec![table])
    }

    pub fn concat(&mut self, parts: &[NodeId], axis: Axis) -> Result<NodeId> {
        if parts.len() == 1 {
            return Ok(parts[0]);
        }
        self.apply(Op::Concat { axis }, parts.to_vec())
    }

    pub fn slice(&mut self, a: NodeId, axis: Axis, start: usize, end: usize) -> Result<NodeId> {
        self.apply(Op::Slice { axis, start, end }, vec![a])
    }

    pub fn sum(&mut self, a: NodeId, axis: Option<Axis>) -> Result<NodeId> {
        self.apply(Op::Sum { axis }, vec![a])
    }

    pub fn mean(&mut self, a: NodeId, axis: Option<Axis>) -> Result<NodeId> {
        self.apply(Op::Mean { axis }, vec![a])
    }

    /// Mean token cross-entropy over the rows selected by `mask`.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: Vec<usize>, mask: Vec<bool>) -> Result<NodeId> {
        self.apply(Op::CrossEntropy { targets, mask }, vec![logits])
    }

    /// Mean squared difference over all elements.
    pub fn mse(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::Mse, vec![a, b])
    }

    /// Re-evaluates every node. Entries of `bindings` replace the values
    /// of the inputs they name; other inputs keep their current value.
    /// Returns the values of outputs registered via [`Graph::mark_output`].
    pub fn forward(&mut self, bindings: &BTreeMap<String, Tensor<T>>) -> Result<BTreeMap<String, Tensor<T>>> {
        for (name, value) in bindings {
            let id = *self.inputs.get(name).ok_or_else(|| TensorError::UnboundInput(name.clone()))?;
            let node = &mut self.nodes[id.0];
            if node.value.shape() != value.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "input",
                    node: id.0,
                    expected: format!("{:?}", node.value.shape()),
                    actual: format!("{:?}", value.shape()),
                });
            }
            let rg = node.requires_grad;
            node.value = value.clone().with_requires_grad(rg);
        }
        self.recompute()?;
        Ok(self
            .outputs
            .iter()
            .map(|(n, &id)| (n.clone(), self.nodes[id.0].value.clone()))
            .collect())
    }

    fn recompute(&mut self) -> Result<()> {
        for idx in 0..self.nodes.len() {
            if self.nodes[idx].op.is_leaf() {
                continue;
            }
            let value = {
                let node = &self.nodes[idx];
                let vals: Vec<&Tensor<T>> = node.inputs.iter().map(|i| &self.nodes[i.0].value).collect();
                ops::forward(&node.op, idx, &vals)?
            };
            self.nodes[idx].value = value;
        }
        Ok(())
    }

    /// Overwrites one element of a named input and re-runs the graph.
    pub(crate) fn set_input_element(&mut self, id: NodeId, index: usize, value: T) -> Result<()> {
        self.nodes[id.0].value.data_mut()[index] = value;
        self.recompute()
    }

    /// Reverse pass from a scalar node. Nodes are visited in exact reverse
    /// order, so gradient accumulation across fan-out is deterministic.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>> {
        let loss_node = self.nodes.get(loss.0).ok_or(TensorError::UnknownNode(loss.0))?;
        if !loss_node.value.is_scalar() {
            return Err(TensorError::NonScalarLoss {
                node: loss.0,
                shape: loss_node.value.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::ones(loss_node.value.shape()));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || node.op.is_leaf() {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let vals: Vec<&Tensor<T>> = node.inputs.iter().map(|i| &self.nodes[i.0].value).collect();
            let needs: Vec<bool> = node.inputs.iter().map(|i| self.nodes[i.0].requires_grad).collect();
            let local = ops::backward(&node.op, &vals, &node.value, &g, &needs);
            for (input, lg) in node.inputs.iter().zip(local) {
                let Some(lg) = lg else { continue };
                match &mut grads[input.0] {
                    Some(acc) => {
                        for (a, &b) in acc.data_mut().iter_mut().zip(lg.data()) {
                            *a = *a + b;
                        }
                    }
                    slot @ None => *slot = Some(lg),
                }
            }
        }
        // Only leaves keep their gradients.
        for (idx, node) in self.nodes.iter().enumerate() {
            if !node.op.is_leaf() {
                grads[idx] = None;
            }
        }
        Ok(Gradients {
            grads,
            names: self.inputs.clone(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: usize, cols: usize, data: &[f64]) -> Tensor<f64> {
        Tensor::matrix(rows, cols, data.to_vec())
    }

    #[test]
    fn matmul_with_identity_columns() {
        let mut g = Graph::new();
        let a = g.constant(t(2, 3, &[1., 2., 3., 4., 5., 6.]));
        let b = g.constant(t(3, 2, &[1., 0., 0., 1., 0., 0.]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[1., 2., 4., 5.]);
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut g = Graph::new();
        let a = g.constant(t(1, 3, &[0., 0., 0.]));
        let s = g.row_softmax(a).unwrap();
        for &v in g.value(s).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn layer_norm_matches_hand_formula() {
        let mut g = Graph::new();
        let a = g.constant(t(1, 3, &[1., 2., 3.]));
        let eps = 1e-5;
        let y = g.layer_norm(a, eps).unwrap();
        // mean 2, population variance 2/3
        let std = (2.0f64 / 3.0 + eps).sqrt();
        let expected = [-1.0 / std, 0.0, 1.0 / std];
        for (v, e) in g.value(y).data().iter().zip(expected) {
            assert!((v - e).abs() < 1e-12);
        }
        let out = g.value(y).data();
        let mean: f64 = out.iter().sum::<f64>() / 3.0;
        let var: f64 = out.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 3.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-4);
    }

    #[test]
    fn shape_error_names_node() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(t(2, 3, &[0.; 6]));
        let b = g.constant(t(2, 3, &[0.; 6]));
        let err = g.matmul(a, b).unwrap_err();
        match err {
            TensorError::ShapeMismatch { op, node, .. } => {
                assert_eq!(op, "matmul");
                assert_eq!(node, 2);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn grad_of_sum_is_ones() {
        let mut g = Graph::new();
        let x = g.param("x", t(2, 2, &[1., -2., 3., 0.5]));
        let s = g.sum(x, None).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn grad_of_square() {
        let mut g = Graph::new();
        let x = g.param("x", Tensor::scalar(3.0f64));
        let y = g.mul(x, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.by_name("x").unwrap().item(), 6.0);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let x = g.param("x", t(1, 2, &[1., 2.]));
        assert!(matches!(g.backward(x), Err(TensorError::NonScalarLoss { .. })));
    }

    #[test]
    fn fan_out_accumulates() {
        // y = sum(x * x + x) → dy/dx = 2x + 1
        let mut g = Graph::new();
        let x = g.param("x", t(1, 3, &[1., 2., 3.]));
        let sq = g.mul(x, x).unwrap();
        let s = g.add(sq, x).unwrap();
        let y = g.sum(s, None).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[3., 5., 7.]);
    }

    #[test]
    fn replay_with_new_binding() {
        let mut g = Graph::new();
        let x = g.param("x", t(1, 2, &[1., 2.]));
        let y = g.mul(x, x).unwrap();
        let s = g.sum(y, None).unwrap();
        g.mark_output("loss", s);
        let mut b = BTreeMap::new();
        b.insert("x".to_string(), t(1, 2, &[3., 4.]));
        let out = g.forward(&b).unwrap();
        assert_eq!(out["loss"].item(), 25.0);
        b.insert("nope".to_string(), t(1, 1, &[0.]));
        assert!(matches!(g.forward(&b), Err(TensorError::UnboundInput(_))));
    }

    #[test]
    fn broadcast_add_reduces_gradient() {
        let mut g = Graph::new();
        let x = g.param("x", t(2, 3, &[0.; 6]));
        let bias = g.param("b", t(1, 3, &[1., 2., 3.]));
        let col = g.param("c", t(2, 1, &[1., 1.]));
        let y = g.add(x, bias).unwrap();
        let y = g.mul(y, col).unwrap();
        let s = g.sum(y, None).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(bias).unwrap().data(), &[2., 2., 2.]);
        assert_eq!(grads.get(col).unwrap().data(), &[6., 6.]);
    }

    #[test]
    fn gather_grad_touches_only_looked_up_rows() {
        let mut g = Graph::new();
        let table = g.param("table", t(4, 2, &[0.; 8]));
        let rows = g.gather(table, vec![2, 2, 0]).unwrap();
        let s = g.sum(rows, None).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(table).unwrap().data(), &[1., 1., 0., 0., 2., 2., 0., 0.]);
    }

    #[test]
    fn backward_is_deterministic() {
        let build = || {
            let mut g = Graph::new();
            let x = g.param("x", t(3, 3, &[0.3, -1.2, 0.7, 2.0, 0.1, -0.4, 1.1, 0.9, -2.2]));
            let y = g.matmul_nt(x, x).unwrap();
            let y = g.row_softmax(y).unwrap();
            let y = g.gelu(y).unwrap();
            let s = g.mean(y, None).unwrap();
            let grads = g.backward(s).unwrap();
            grads.get(x).unwrap().clone()
        };
        assert!(build().bits_eq(&build()));
    }
}
