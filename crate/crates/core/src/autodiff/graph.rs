use crate::autodiff::ops::{self, Op, Unary};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
struct Node<E: Element> {
    value: Tensor<E>,
    op: Op,
    inputs: Vec<NodeId>,
    requires_grad: bool,
}

/// Append-only record of evaluated operations. Values are computed eagerly
/// when recorded; [`Graph::backward`] walks the record in reverse.
#[derive(Debug)]
pub struct Graph<E: Element = f32> {
    nodes: Vec<Node<E>>,
}

impl<E: Element> Default for Graph<E> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`]. Nodes that do not track
/// gradients or have no path to the loss are absent.
#[derive(Debug)]
pub struct Gradients<E: Element = f32> {
    grads: Vec<Option<Tensor<E>>>,
}

impl<E: Element> Gradients<E> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<E>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor<E>> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }
}

impl<E: Element> Graph<E> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push_leaf(&mut self, value: Tensor<E>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            inputs: Vec::new(),
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Leaf whose gradient is tracked (inputs under test, parameters).
    pub fn input(&mut self, value: Tensor<E>) -> NodeId {
        self.push_leaf(value, true)
    }

    /// Leaf without gradient tracking.
    pub fn constant(&mut self, value: Tensor<E>) -> NodeId {
        self.push_leaf(value, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<E> {
        &self.nodes[id.0].value
    }

    pub fn dims(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.dims()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Evaluates `op` on existing nodes and appends the result.
    pub fn record(&mut self, op: Op, inputs: &[NodeId]) -> Result<NodeId> {
        if matches!(op, Op::Leaf) {
            return Err(Error::invalid("leaves are created with input/constant"));
        }
        if let Some(bad) = inputs.iter().find(|id| id.0 >= self.nodes.len()) {
            return Err(Error::invalid(format!("node {} does not exist", bad.0)));
        }
        let values: Vec<&Tensor<E>> = inputs.iter().map(|id| &self.nodes[id.0].value).collect();
        let value = ops::forward(&op, &values)?;
        let requires_grad = inputs.iter().any(|id| self.nodes[id.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            inputs: inputs.to_vec(),
            requires_grad,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    /// Reverse-mode sweep from a scalar `loss` node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<E>> {
        let loss_node = self
            .nodes
            .get(loss.0)
            .ok_or_else(|| Error::invalid(format!("node {} does not exist", loss.0)))?;
        if !loss_node.value.is_scalar() {
            return Err(Error::NonScalarLoss(loss_node.value.dims().to_vec()));
        }
        let mut acc: Vec<Option<Vec<E>>> = vec![None; loss.0 + 1];
        let mut out: Vec<Option<Tensor<E>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !loss_node.requires_grad {
            return Ok(Gradients { grads: out });
        }
        acc[loss.0] = Some(vec![E::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = acc[i].take() else { continue };
            let node = &self.nodes[i];
            let grad = Tensor::from_parts(node.value.dims().to_vec(), g);
            if !node.inputs.is_empty() {
                let needs: Vec<bool> = node
                    .inputs
                    .iter()
                    .map(|id| self.nodes[id.0].requires_grad)
                    .collect();
                let values: Vec<&Tensor<E>> =
                    node.inputs.iter().map(|id| &self.nodes[id.0].value).collect();
                let input_grads = ops::backward(&node.op, &values, &node.value, &grad, &needs);
                for (id, ig) in node.inputs.iter().zip(input_grads) {
                    let Some(ig) = ig else { continue };
                    match &mut acc[id.0] {
                        Some(existing) => {
                            for (a, b) in existing.iter_mut().zip(&ig) {
                                *a = *a + *b;
                            }
                        }
                        slot @ None => *slot = Some(ig),
                    }
                }
            }
            out[i] = Some(grad);
        }
        Ok(Gradients { grads: out })
    }

    // Convenience builders.

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(Op::Add, &[a, b])
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(Op::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(Op::Mul, &[a, b])
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(Op::Div, &[a, b])
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> Result<NodeId> {
        self.record(Op::Scale(s), &[a])
    }

    pub fn add_scalar(&mut self, a: NodeId, s: f64) -> Result<NodeId> {
        self.record(Op::AddScalar(s), &[a])
    }

    pub fn unary(&mut self, a: NodeId, u: Unary) -> Result<NodeId> {
        self.record(Op::Unary(u), &[a])
    }

    pub fn silu(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, Unary::Silu)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, Unary::Sigmoid)
    }

    pub fn square(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, Unary::Square)
    }

    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> Result<NodeId> {
        self.record(Op::Clamp { lo, hi }, &[a])
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(Op::MatMul, &[a, b])
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(Op::Transpose, &[a])
    }

    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        let op = Op::Conv2d { stride, pad };
        match b {
            Some(b) => self.record(op, &[x, w, b]),
            None => self.record(op, &[x, w]),
        }
    }

    pub fn upsample2x(&mut self, x: NodeId) -> Result<NodeId> {
        self.record(Op::UpsampleNearest2x, &[x])
    }

    pub fn mean_pool2x(&mut self, x: NodeId) -> Result<NodeId> {
        self.record(Op::MeanPool2x, &[x])
    }

    /// Group normalization with `min(8, channels)` groups and eps 1e-5.
    pub fn group_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> Result<NodeId> {
        let c = self.dims(x).get(1).copied().unwrap_or(1);
        let mut groups = c.min(8);
        while c % groups != 0 {
            groups -= 1;
        }
        self.record(Op::GroupNorm { groups, eps: 1e-5 }, &[x, gamma, beta])
    }

    pub fn add_channel_bias(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(Op::AddChannelBias, &[x, b])
    }

    pub fn add_row_bias(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(Op::AddRowBias, &[x, b])
    }

    pub fn reshape(&mut self, x: NodeId, dims: &[usize]) -> Result<NodeId> {
        self.record(Op::Reshape(dims.to_vec()), &[x])
    }

    pub fn concat(&mut self, xs: &[NodeId], axis: usize) -> Result<NodeId> {
        self.record(Op::Concat { axis }, xs)
    }

    pub fn slice(&mut self, x: NodeId, axis: usize, start: usize, len: usize) -> Result<NodeId> {
        self.record(Op::Slice { axis, start, len }, &[x])
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        self.record(Op::Sum, &[x])
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        self.record(Op::Mean, &[x])
    }

    pub fn spatial_mean(&mut self, x: NodeId) -> Result<NodeId> {
        self.record(Op::SpatialMean, &[x])
    }

    pub fn norm2(&mut self, x: NodeId) -> Result<NodeId> {
        self.record(Op::Norm2, &[x])
    }

    pub fn normalize_rows(&mut self, x: NodeId) -> Result<NodeId> {
        self.record(Op::NormalizeRows { eps: 1e-8 }, &[x])
    }

    pub fn gather_rows(&mut self, x: NodeId, rows: Vec<usize>) -> Result<NodeId> {
        self.record(Op::GatherRows(rows), &[x])
    }

    pub fn softmax_cross_entropy(&mut self, logits: NodeId, targets: Vec<usize>) -> Result<NodeId> {
        self.record(Op::SoftmaxCrossEntropy(targets), &[logits])
    }

    /// `mean((a - b)^2)`.
    pub fn mse(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let d = self.sub(a, b)?;
        let sq = self.square(d)?;
        self.mean(sq)
    }
}
