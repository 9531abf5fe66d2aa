//! Reverse-mode differentiation that emits its result as graph nodes.

use super::op::Op;
use super::{Graph, NodeRef};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

impl<T: Real> Graph<T> {
    /// Appends nodes computing `d scalar / d wrt[i]` for each target and
    /// returns them. Targets the objective does not depend on get a zero
    /// constant. The returned nodes are ordinary graph nodes and may be
    /// differentiated again.
    pub fn grad(&mut self, scalar: NodeRef, wrt: &[NodeRef]) -> Result<Vec<NodeRef>> {
        self.check(scalar)?;
        for &w in wrt {
            self.check(w)?;
        }
        let out_shape = self.shape(scalar).to_vec();
        if !(out_shape.is_empty() || out_shape == [1]) {
            return Err(Error::NonScalarObjective(out_shape));
        }

        let end = scalar.index + 1;
        // Nodes that depend on at least one target.
        let mut from_wrt = vec![false; end];
        for &w in wrt {
            if w.index < end {
                from_wrt[w.index] = true;
            }
        }
        for i in 0..end {
            if !from_wrt[i] && self.nodes[i].inputs.iter().any(|p| from_wrt[p.index]) {
                from_wrt[i] = true;
            }
        }

        let mut adjoint: Vec<Option<NodeRef>> = vec![None; end];
        if from_wrt[scalar.index] {
            adjoint[scalar.index] = Some(self.constant(Tensor::ones(&out_shape)));
        }
        for i in (0..end).rev() {
            let Some(upstream) = adjoint[i] else { continue };
            let node = self.nodes[i].clone();
            let wanted: Vec<bool> = node.inputs.iter().map(|p| from_wrt[p.index]).collect();
            if !wanted.iter().any(|&w| w) {
                continue;
            }
            let y = NodeRef {
                graph: self.id,
                index: i,
            };
            let contributions = self.vjp(&node.op, &node.inputs, y, upstream, &wanted)?;
            for (input, contribution) in node.inputs.iter().zip(contributions) {
                if let Some(c) = contribution {
                    adjoint[input.index] = Some(match adjoint[input.index] {
                        Some(acc) => self.add(acc, c)?,
                        None => c,
                    });
                }
            }
        }

        wrt.iter()
            .map(|&w| match adjoint.get(w.index).copied().flatten() {
                Some(a) => Ok(a),
                None => {
                    let shape = self.shape(w).to_vec();
                    Ok(self.constant(Tensor::zeros(&shape)))
                }
            })
            .collect()
    }

    /// Vector-Jacobian products of one node. `None` marks a zero
    /// contribution (or an input nobody asked for).
    fn vjp(
        &mut self,
        op: &Op<T>,
        inputs: &[NodeRef],
        y: NodeRef,
        u: NodeRef,
        wanted: &[bool],
    ) -> Result<Vec<Option<NodeRef>>> {
        let mut out: Vec<Option<NodeRef>> = vec![None; inputs.len()];
        let x = inputs;
        macro_rules! set {
            ($i:expr, $e:expr) => {
                if wanted[$i] {
                    out[$i] = Some($e);
                }
            };
        }
        match op {
            Op::Input(_) | Op::Param(_) | Op::Const(_) => {}
            Op::Add => {
                set!(0, u);
                set!(1, u);
            }
            Op::Sub => {
                set!(0, u);
                set!(1, self.neg(u)?);
            }
            Op::Mul => {
                set!(0, self.mul(u, x[1])?);
                set!(1, self.mul(u, x[0])?);
            }
            Op::Div => {
                set!(0, self.div(u, x[1])?);
                if wanted[1] {
                    let uy = self.mul(u, y)?;
                    let q = self.div(uy, x[1])?;
                    out[1] = Some(self.neg(q)?);
                }
            }
            Op::Neg => set!(0, self.neg(u)?),
            Op::Scale(c) => set!(0, self.scale(u, *c)?),
            Op::Sum => {
                let shape = self.shape(x[0]).to_vec();
                set!(0, self.broadcast_any(u, &shape)?);
            }
            Op::Broadcast(_) => set!(0, self.sum(u)?),
            Op::SumCols => {
                let cols = self.shape(x[0])[1];
                set!(0, self.repeat_cols(u, cols)?);
            }
            Op::RepeatCols(_) => set!(0, self.sum_cols(u)?),
            Op::MatMul => {
                if wanted[0] {
                    let bt = self.transpose(x[1])?;
                    out[0] = Some(self.matmul(u, bt)?);
                }
                if wanted[1] {
                    let at = self.transpose(x[0])?;
                    out[1] = Some(self.matmul(at, u)?);
                }
            }
            Op::Transpose => set!(0, self.transpose(u)?),
            Op::Reshape(_) => {
                let shape = self.shape(x[0]).to_vec();
                set!(0, self.reshape(u, &shape)?);
            }
            Op::Relu => {
                if wanted[0] {
                    let mask = self.relu_mask(x[0])?;
                    out[0] = Some(self.mul(u, mask)?);
                }
            }
            // Piecewise constant in the key.
            Op::ReluMask => {}
            Op::SelectMax => set!(1, self.scatter_max(x[0], u)?),
            Op::ScatterMax => set!(1, self.select_max(x[0], u)?),
            // All three conv kernels are partial derivatives of the trilinear
            // form sum G[k,j] W[k,i,s] Ep[i,j+s], so their derivatives are
            // each other.
            Op::Conv => {
                set!(0, self.conv_grad_input(u, x[1])?);
                if wanted[1] {
                    let t = self.shape(x[1])[2];
                    out[1] = Some(self.conv_grad_weight(x[0], u, t)?);
                }
            }
            Op::ConvGradWeight { .. } => {
                set!(0, self.conv_grad_input(x[1], u)?);
                set!(1, self.conv_bank(x[0], u)?);
            }
            Op::ConvGradInput => {
                set!(0, self.conv_bank(u, x[1])?);
                if wanted[1] {
                    let t = self.shape(x[1])[2];
                    out[1] = Some(self.conv_grad_weight(u, x[0], t)?);
                }
            }
            Op::Gather(ids) => {
                let rows = self.shape(x[0])[0];
                set!(0, self.scatter_rows(u, ids, rows)?);
            }
            Op::Scatter { ids, .. } => set!(0, self.gather_rows(u, ids)?),
            Op::Softmax => {
                if wanted[0] {
                    // p * (u - <u, p>)
                    let shape = self.shape(y).to_vec();
                    let up = self.mul(u, y)?;
                    let s = self.sum(up)?;
                    let s = self.broadcast(s, &shape)?;
                    let centered = self.sub(u, s)?;
                    out[0] = Some(self.mul(y, centered)?);
                }
            }
            Op::LogSoftmax => {
                if wanted[0] {
                    // u - softmax * sum(u)
                    let shape = self.shape(y).to_vec();
                    let p = self.softmax(x[0])?;
                    let s = self.sum(u)?;
                    let s = self.broadcast(s, &shape)?;
                    let ps = self.mul(p, s)?;
                    out[0] = Some(self.sub(u, ps)?);
                }
            }
            Op::SoftmaxCrossEntropy => {
                if wanted[1] {
                    return Err(Error::NoDerivative {
                        op: op.name(),
                        input: 1,
                    });
                }
                if wanted[0] {
                    // u * (p * sum(t) - t)
                    let shape = self.shape(x[0]).to_vec();
                    let p = self.softmax(x[0])?;
                    let mass = self.sum(x[1])?;
                    let mass = self.broadcast(mass, &shape)?;
                    let pm = self.mul(p, mass)?;
                    let d = self.sub(pm, x[1])?;
                    let ub = self.broadcast(u, &shape)?;
                    out[0] = Some(self.mul(ub, d)?);
                }
            }
            Op::L2NormEps(_) => {
                if wanted[0] {
                    let shape = self.shape(x[0]).to_vec();
                    let ratio = self.div(u, y)?;
                    let ratio = self.broadcast(ratio, &shape)?;
                    out[0] = Some(self.mul(ratio, x[0])?);
                }
            }
            Op::Concat => {
                let mut start = 0;
                for (i, &part) in x.iter().enumerate() {
                    let len = self.shape(part)[0];
                    if wanted[i] {
                        out[i] = Some(self.slice(u, start, len)?);
                    }
                    start += len;
                }
            }
            Op::Slice { start, .. } => {
                let total = self.shape(x[0])[0];
                set!(0, self.place(u, *start, total)?);
            }
            Op::Place { start, .. } => {
                let len = self.shape(x[0])[0];
                set!(0, self.slice(u, *start, len)?);
            }
            Op::ScaleMask { mask, scale } => {
                set!(0, self.scale_mask(u, mask.clone(), *scale)?);
            }
        }
        Ok(out)
    }

    /// Broadcast that also accepts a `[1]`-shaped source.
    fn broadcast_any(&mut self, u: NodeRef, shape: &[usize]) -> Result<NodeRef> {
        let u = if self.shape(u).is_empty() {
            u
        } else {
            self.reshape(u, &[])?
        };
        self.broadcast(u, shape)
    }
}
