//! Computation graphs with reverse-mode differentiation.
//!
//! A [`Graph`] is an append-only list of primitive applications. Nodes only
//! refer to earlier nodes, so insertion order is a topological order.
//! [`Graph::grad`] appends the backward pass as ordinary nodes, which means
//! a gradient can be differentiated again: this is how objectives that
//! contain a gradient norm are trained.
//!
//! ```
//! use gradreg::autodiff::{Bindings, Graph};
//! use gradreg::Tensor;
//!
//! let mut g = Graph::<f64>::new();
//! let x = g.input("x", &[]);
//! let xx = g.mul(x, x).unwrap();
//! let y = g.mul(xx, x).unwrap();
//! let dy = g.grad(y, &[x]).unwrap()[0];
//! let d2y = g.grad(dy, &[x]).unwrap()[0];
//!
//! let mut b = Bindings::new();
//! b.bind_owned("x", Tensor::scalar(2.0));
//! let v = g.eval(&b, &[d2y]).unwrap();
//! assert_eq!(v[d2y].item().unwrap(), 12.0);
//! ```

mod backward;
pub mod check;
mod op;

use std::borrow::Cow;
use std::collections::HashMap;
use std::ops::Index;
use std::sync::atomic::{AtomicU32, Ordering};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};
use op::Op;

static NEXT_GRAPH_ID: AtomicU32 = AtomicU32::new(0);

/// Handle to one node of a [`Graph`]. Only meaningful for the graph that
/// created it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeRef {
    graph: u32,
    index: usize,
}

impl NodeRef {
    pub fn index(&self) -> usize {
        self.index
    }
}

#[derive(Clone, Debug)]
struct Node<T: Real> {
    op: Op<T>,
    inputs: Vec<NodeRef>,
    shape: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct Graph<T: Real> {
    id: u32,
    nodes: Vec<Node<T>>,
}

/// Named tensors for the placeholders and parameters of a graph.
#[derive(Clone, Debug, Default)]
pub struct Bindings<'a, T: Real> {
    map: HashMap<String, Cow<'a, Tensor<T>>>,
}

impl<'a, T: Real> Bindings<'a, T> {
    pub fn new() -> Self {
        Bindings {
            map: HashMap::new(),
        }
    }

    pub fn bind(&mut self, name: impl Into<String>, value: &'a Tensor<T>) -> &mut Self {
        self.map.insert(name.into(), Cow::Borrowed(value));
        self
    }

    pub fn bind_owned(&mut self, name: impl Into<String>, value: Tensor<T>) -> &mut Self {
        self.map.insert(name.into(), Cow::Owned(value));
        self
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.map.get(name).map(|c| c.as_ref())
    }
}

/// Node values produced by [`Graph::eval`].
#[derive(Debug)]
pub struct Values<'a, T: Real> {
    graph: u32,
    values: Vec<Option<Cow<'a, Tensor<T>>>>,
}

impl<'a, T: Real> Values<'a, T> {
    pub fn get(&self, node: NodeRef) -> Option<&Tensor<T>> {
        if node.graph != self.graph {
            return None;
        }
        self.values.get(node.index)?.as_deref()
    }

    /// Moves a value out, cloning only when it borrows from the bindings.
    pub fn take(&mut self, node: NodeRef) -> Option<Tensor<T>> {
        if node.graph != self.graph {
            return None;
        }
        self.values.get_mut(node.index)?.take().map(Cow::into_owned)
    }
}

impl<'a, T: Real> Index<NodeRef> for Values<'a, T> {
    type Output = Tensor<T>;

    fn index(&self, node: NodeRef) -> &Tensor<T> {
        self.get(node).expect("node was not evaluated")
    }
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, node: NodeRef) -> &[usize] {
        &self.nodes[node.index].shape
    }

    fn check(&self, node: NodeRef) -> Result<()> {
        if node.graph != self.id || node.index >= self.nodes.len() {
            return Err(Error::ForeignNode);
        }
        Ok(())
    }

    fn leaf(&mut self, op: Op<T>, shape: Vec<usize>) -> NodeRef {
        self.nodes.push(Node {
            op,
            inputs: Vec::new(),
            shape,
        });
        NodeRef {
            graph: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn push(&mut self, op: Op<T>, inputs: Vec<NodeRef>) -> Result<NodeRef> {
        for &i in &inputs {
            self.check(i)?;
        }
        let shapes: Vec<&[usize]> = inputs
            .iter()
            .map(|i| self.nodes[i.index].shape.as_slice())
            .collect();
        let shape = op.infer_shape(&shapes)?;
        Ok(self.leaf_with_inputs(op, inputs, shape))
    }

    fn leaf_with_inputs(&mut self, op: Op<T>, inputs: Vec<NodeRef>, shape: Vec<usize>) -> NodeRef {
        self.nodes.push(Node { op, inputs, shape });
        NodeRef {
            graph: self.id,
            index: self.nodes.len() - 1,
        }
    }

    /// Placeholder bound at evaluation time.
    pub fn input(&mut self, name: &str, shape: &[usize]) -> NodeRef {
        self.leaf(Op::Input(name.to_string()), shape.to_vec())
    }

    /// Trainable value bound at evaluation time.
    pub fn param(&mut self, name: &str, shape: &[usize]) -> NodeRef {
        self.leaf(Op::Param(name.to_string()), shape.to_vec())
    }

    pub fn constant(&mut self, value: Tensor<T>) -> NodeRef {
        let shape = value.shape().to_vec();
        self.leaf(Op::Const(value), shape)
    }

    pub fn scalar(&mut self, value: T) -> NodeRef {
        self.constant(Tensor::scalar(value))
    }

    /// Names of all placeholder and parameter nodes, in creation order.
    pub fn bound_names(&self) -> Vec<(&str, NodeRef)> {
        self.nodes
            .iter()
            .enumerate()
            .filter_map(|(index, n)| match &n.op {
                Op::Input(name) | Op::Param(name) => Some((
                    name.as_str(),
                    NodeRef {
                        graph: self.id,
                        index,
                    },
                )),
                _ => None,
            })
            .collect()
    }

    pub fn add(&mut self, a: NodeRef, b: NodeRef) -> Result<NodeRef> {
        self.push(Op::Add, vec![a, b])
    }

    pub fn sub(&mut self, a: NodeRef, b: NodeRef) -> Result<NodeRef> {
        self.push(Op::Sub, vec![a, b])
    }

    pub fn mul(&mut self, a: NodeRef, b: NodeRef) -> Result<NodeRef> {
        self.push(Op::Mul, vec![a, b])
    }

    pub fn div(&mut self, a: NodeRef, b: NodeRef) -> Result<NodeRef> {
        self.push(Op::Div, vec![a, b])
    }

    pub fn neg(&mut self, a: NodeRef) -> Result<NodeRef> {
        self.push(Op::Neg, vec![a])
    }

    /// Multiplies by a constant.
    pub fn scale(&mut self, a: NodeRef, c: T) -> Result<NodeRef> {
        self.push(Op::Scale(c), vec![a])
    }

    pub fn sum(&mut self, a: NodeRef) -> Result<NodeRef> {
        self.push(Op::Sum, vec![a])
    }

    /// Repeats a rank-0 node over `shape`.
    pub fn broadcast(&mut self, a: NodeRef, shape: &[usize]) -> Result<NodeRef> {
        self.push(Op::Broadcast(shape.to_vec()), vec![a])
    }

    pub fn sum_cols(&mut self, a: NodeRef) -> Result<NodeRef> {
        self.push(Op::SumCols, vec![a])
    }

    pub fn repeat_cols(&mut self, a: NodeRef, cols: usize) -> Result<NodeRef> {
        self.push(Op::RepeatCols(cols), vec![a])
    }

    pub fn matmul(&mut self, a: NodeRef, b: NodeRef) -> Result<NodeRef> {
        self.push(Op::MatMul, vec![a, b])
    }

    pub fn transpose(&mut self, a: NodeRef) -> Result<NodeRef> {
        self.push(Op::Transpose, vec![a])
    }

    pub fn reshape(&mut self, a: NodeRef, shape: &[usize]) -> Result<NodeRef> {
        self.push(Op::Reshape(shape.to_vec()), vec![a])
    }

    pub fn relu(&mut self, a: NodeRef) -> Result<NodeRef> {
        self.push(Op::Relu, vec![a])
    }

    pub fn relu_mask(&mut self, a: NodeRef) -> Result<NodeRef> {
        self.push(Op::ReluMask, vec![a])
    }

    /// Maximum of a vector (`[k] -> []`) or of each row of a matrix
    /// (`[r, k] -> [r]`). The derivative goes to the lowest maximal index.
    pub fn max_over_time(&mut self, a: NodeRef) -> Result<NodeRef> {
        self.push(Op::SelectMax, vec![a, a])
    }

    pub fn select_max(&mut self, key: NodeRef, value: NodeRef) -> Result<NodeRef> {
        self.push(Op::SelectMax, vec![key, value])
    }

    pub fn scatter_max(&mut self, key: NodeRef, grad: NodeRef) -> Result<NodeRef> {
        self.push(Op::ScatterMax, vec![key, grad])
    }

    /// Bank of wide convolutions: `E[m,n]` with `W[f,m,t]` gives
    /// `[f, n+t-1]`. The sentence is padded with `t-1` zero columns on each
    /// side, so every window that overlaps it produces an output.
    pub fn conv_bank(&mut self, embedded: NodeRef, weight: NodeRef) -> Result<NodeRef> {
        self.push(Op::Conv, vec![embedded, weight])
    }

    pub fn conv_grad_weight(&mut self, embedded: NodeRef, grad: NodeRef, width: usize) -> Result<NodeRef> {
        self.push(Op::ConvGradWeight { width }, vec![embedded, grad])
    }

    pub fn conv_grad_input(&mut self, grad: NodeRef, weight: NodeRef) -> Result<NodeRef> {
        self.push(Op::ConvGradInput, vec![grad, weight])
    }

    /// Single wide filter `W[m,t]` with scalar bias: `E[m,n] -> [n+t-1]`.
    pub fn conv1d_wide(&mut self, embedded: NodeRef, weight: NodeRef, bias: NodeRef) -> Result<NodeRef> {
        let (m, t) = match self.shape(weight) {
            [m, t] => (*m, *t),
            s => return Err(Error::shape(format!("conv1d_wide weight must be [m,t], got {s:?}"))),
        };
        if !self.shape(bias).is_empty() {
            return Err(Error::shape("conv1d_wide bias must be a scalar"));
        }
        let bank = self.reshape(weight, &[1, m, t])?;
        let out = self.conv_bank(embedded, bank)?;
        let len = self.shape(out)[1];
        let out = self.reshape(out, &[len])?;
        let b = self.broadcast(bias, &[len])?;
        self.add(out, b)
    }

    /// Column `j` of the result is row `ids[j]` of `table`.
    pub fn gather_rows(&mut self, table: NodeRef, ids: &[usize]) -> Result<NodeRef> {
        self.push(Op::Gather(ids.to_vec()), vec![table])
    }

    pub fn scatter_rows(&mut self, grad: NodeRef, ids: &[usize], rows: usize) -> Result<NodeRef> {
        self.push(
            Op::Scatter {
                ids: ids.to_vec(),
                rows,
            },
            vec![grad],
        )
    }

    pub fn softmax(&mut self, logits: NodeRef) -> Result<NodeRef> {
        self.push(Op::Softmax, vec![logits])
    }

    pub fn log_softmax(&mut self, logits: NodeRef) -> Result<NodeRef> {
        self.push(Op::LogSoftmax, vec![logits])
    }

    /// Returns `(loss, probs)`. The target must be a distribution; it is
    /// treated as data and cannot be differentiated.
    pub fn softmax_cross_entropy(&mut self, logits: NodeRef, target: NodeRef) -> Result<(NodeRef, NodeRef)> {
        let loss = self.push(Op::SoftmaxCrossEntropy, vec![logits, target])?;
        let probs = self.softmax(logits)?;
        Ok((loss, probs))
    }

    pub fn l2_norm_eps(&mut self, v: NodeRef, eps: T) -> Result<NodeRef> {
        if eps < T::zero() {
            return Err(Error::invalid("l2_norm_eps: eps must be >= 0"));
        }
        self.push(Op::L2NormEps(eps), vec![v])
    }

    pub fn concat(&mut self, parts: &[NodeRef]) -> Result<NodeRef> {
        self.push(Op::Concat, parts.to_vec())
    }

    pub fn slice(&mut self, a: NodeRef, start: usize, len: usize) -> Result<NodeRef> {
        self.push(Op::Slice { start, len }, vec![a])
    }

    pub fn place(&mut self, a: NodeRef, start: usize, total: usize) -> Result<NodeRef> {
        self.push(Op::Place { start, total }, vec![a])
    }

    /// `x * mask * scale` with a fixed 0/1 mask.
    pub fn scale_mask(&mut self, a: NodeRef, mask: Tensor<T>, scale: T) -> Result<NodeRef> {
        if mask.data().iter().any(|&v| v != T::zero() && v != T::one()) {
            return Err(Error::invalid("scale_mask: mask entries must be 0 or 1"));
        }
        self.push(Op::ScaleMask { mask, scale }, vec![a])
    }

    /// Evaluates `outputs` and everything they depend on.
    pub fn eval<'a>(&self, bindings: &Bindings<'a, T>, outputs: &[NodeRef]) -> Result<Values<'a, T>> {
        for &o in outputs {
            self.check(o)?;
        }
        let mut needed = vec![false; self.nodes.len()];
        for &o in outputs {
            needed[o.index] = true;
        }
        for i in (0..self.nodes.len()).rev() {
            if needed[i] {
                for inp in &self.nodes[i].inputs {
                    needed[inp.index] = true;
                }
            }
        }

        let mut values: Vec<Option<Cow<'a, Tensor<T>>>> = vec![None; self.nodes.len()];
        for (i, node) in self.nodes.iter().enumerate() {
            if !needed[i] {
                continue;
            }
            let value = match &node.op {
                Op::Input(name) | Op::Param(name) => {
                    let bound = bindings
                        .map
                        .get(name)
                        .ok_or_else(|| Error::MissingBinding(name.clone()))?;
                    if bound.shape() != node.shape.as_slice() {
                        return Err(Error::shape(format!(
                            "binding `{name}` has shape {:?}, expected {:?}",
                            bound.shape(),
                            node.shape
                        )));
                    }
                    bound.clone()
                }
                Op::Const(t) => Cow::Owned(t.clone()),
                op => {
                    let args: Vec<&Tensor<T>> = node
                        .inputs
                        .iter()
                        .map(|inp| values[inp.index].as_deref().expect("inputs evaluated first"))
                        .collect();
                    let out = op.forward(&args, &node.shape);
                    if !out.all_finite() {
                        return Err(Error::NonFinite {
                            op: op.name(),
                            node: i,
                        });
                    }
                    Cow::Owned(out)
                }
            };
            values[i] = Some(value);
        }
        Ok(Values {
            graph: self.id,
            values,
        })
    }

    /// Convenience wrapper returning owned tensors in `outputs` order.
    pub fn eval_many(&self, bindings: &Bindings<'_, T>, outputs: &[NodeRef]) -> Result<Vec<Tensor<T>>> {
        let values = self.eval(bindings, outputs)?;
        Ok(outputs.iter().map(|&o| values[o].clone()).collect())
    }
}

#[cfg(test)]
mod tests;
