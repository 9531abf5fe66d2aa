//! Primitive operations: static attributes, shape rules and forward kernels.

use crate::error::{Error, Result};
use crate::tensor::{argmax, numel, Real, Tensor};

#[derive(Clone, Debug)]
pub(crate) enum Op<T: Real> {
    Input(String),
    Param(String),
    Const(Tensor<T>),
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Scale(T),
    /// Sum of all entries, shape `[]`.
    Sum,
    /// Rank-0 value repeated over a shape.
    Broadcast(Vec<usize>),
    /// `[r, c] -> [r]`, summing each row.
    SumCols,
    /// `[r] -> [r, c]`, repeating each entry along the row.
    RepeatCols(usize),
    MatMul,
    Transpose,
    Reshape(Vec<usize>),
    Relu,
    /// Indicator of `x > 0`; derivative zero.
    ReluMask,
    /// `(key, value)`: value at the first maximal position of key, per row.
    SelectMax,
    /// `(key, grad)`: adjoint of `SelectMax`; places each grad entry at the
    /// first maximal position of its key row.
    ScatterMax,
    /// `(E[m,n], W[f,m,t]) -> [f, n+t-1]`, wide correlation with zero padding.
    Conv,
    /// `(E[m,n], G[f,n+t-1]) -> [f,m,t]`.
    ConvGradWeight { width: usize },
    /// `(G[f,n+t-1], W[f,m,t]) -> [m,n]`.
    ConvGradInput,
    /// `table[V,m] -> [m, ids.len()]`, column j = row ids[j].
    Gather(Vec<usize>),
    /// `[m, n] -> [rows, m]`, adjoint of `Gather`.
    Scatter { ids: Vec<usize>, rows: usize },
    Softmax,
    LogSoftmax,
    /// `(logits[c], target[c]) -> []`.
    SoftmaxCrossEntropy,
    /// `sqrt(sum(v^2) + eps)`.
    L2NormEps(T),
    Concat,
    Slice { start: usize, len: usize },
    /// Adjoint of `Slice`: embeds into zeros of length `total`.
    Place { start: usize, total: usize },
    ScaleMask { mask: Tensor<T>, scale: T },
}

impl<T: Real> Op<T> {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Input(_) => "input",
            Op::Param(_) => "param",
            Op::Const(_) => "const",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::Neg => "neg",
            Op::Scale(_) => "scale",
            Op::Sum => "sum",
            Op::Broadcast(_) => "broadcast",
            Op::SumCols => "sum_cols",
            Op::RepeatCols(_) => "repeat_cols",
            Op::MatMul => "matmul",
            Op::Transpose => "transpose",
            Op::Reshape(_) => "reshape",
            Op::Relu => "relu",
            Op::ReluMask => "relu_mask",
            Op::SelectMax => "select_max",
            Op::ScatterMax => "scatter_max",
            Op::Conv => "conv1d_wide",
            Op::ConvGradWeight { .. } => "conv_grad_weight",
            Op::ConvGradInput => "conv_grad_input",
            Op::Gather(_) => "gather_rows",
            Op::Scatter { .. } => "scatter_rows",
            Op::Softmax => "softmax",
            Op::LogSoftmax => "log_softmax",
            Op::SoftmaxCrossEntropy => "softmax_cross_entropy",
            Op::L2NormEps(_) => "l2_norm_eps",
            Op::Concat => "concat",
            Op::Slice { .. } => "slice",
            Op::Place { .. } => "place",
            Op::ScaleMask { .. } => "scale_mask",
        }
    }

    /// Output shape for the given input shapes, or a shape error.
    pub(crate) fn infer_shape(&self, inputs: &[&[usize]]) -> Result<Vec<usize>> {
        let name = self.name();
        let arity = |n: usize| -> Result<()> {
            if inputs.len() == n {
                Ok(())
            } else {
                Err(Error::shape(format!(
                    "{name} takes {n} inputs, got {}",
                    inputs.len()
                )))
            }
        };
        let same = |a: &[usize], b: &[usize]| -> Result<()> {
            if a == b {
                Ok(())
            } else {
                Err(Error::shape(format!("{name}: {a:?} vs {b:?}")))
            }
        };
        let rank = |s: &[usize], r: usize| -> Result<()> {
            if s.len() == r {
                Ok(())
            } else {
                Err(Error::shape(format!("{name}: expected rank {r}, got {s:?}")))
            }
        };
        match self {
            Op::Input(_) | Op::Param(_) | Op::Const(_) => {
                unreachable!("leaf shapes are fixed at creation")
            }
            Op::Add | Op::Sub | Op::Mul | Op::Div => {
                arity(2)?;
                same(inputs[0], inputs[1])?;
                Ok(inputs[0].to_vec())
            }
            Op::Neg | Op::Scale(_) | Op::Relu | Op::ReluMask => {
                arity(1)?;
                Ok(inputs[0].to_vec())
            }
            Op::Sum => {
                arity(1)?;
                Ok(Vec::new())
            }
            Op::Broadcast(shape) => {
                arity(1)?;
                rank(inputs[0], 0)?;
                Ok(shape.clone())
            }
            Op::SumCols => {
                arity(1)?;
                rank(inputs[0], 2)?;
                Ok(vec![inputs[0][0]])
            }
            Op::RepeatCols(cols) => {
                arity(1)?;
                rank(inputs[0], 1)?;
                Ok(vec![inputs[0][0], *cols])
            }
            Op::MatMul => {
                arity(2)?;
                rank(inputs[0], 2)?;
                rank(inputs[1], 2)?;
                if inputs[0][1] != inputs[1][0] {
                    return Err(Error::shape(format!(
                        "matmul: inner dimensions {:?} x {:?}",
                        inputs[0], inputs[1]
                    )));
                }
                Ok(vec![inputs[0][0], inputs[1][1]])
            }
            Op::Transpose => {
                arity(1)?;
                rank(inputs[0], 2)?;
                Ok(vec![inputs[0][1], inputs[0][0]])
            }
            Op::Reshape(shape) => {
                arity(1)?;
                if numel(shape) != numel(inputs[0]) {
                    return Err(Error::shape(format!(
                        "reshape: {:?} into {:?}",
                        inputs[0], shape
                    )));
                }
                Ok(shape.clone())
            }
            Op::SelectMax => {
                arity(2)?;
                same(inputs[0], inputs[1])?;
                match inputs[0] {
                    [k] if *k >= 1 => Ok(Vec::new()),
                    [r, k] if *k >= 1 => Ok(vec![*r]),
                    s => Err(Error::shape(format!(
                        "max_over_time needs a non-empty vector or matrix, got {s:?}"
                    ))),
                }
            }
            Op::ScatterMax => {
                arity(2)?;
                let expect: Vec<usize> = match inputs[0] {
                    [k] if *k >= 1 => Vec::new(),
                    [r, k] if *k >= 1 => vec![*r],
                    s => {
                        return Err(Error::shape(format!(
                            "scatter_max key must be non-empty, got {s:?}"
                        )))
                    }
                };
                same(inputs[1], &expect)?;
                Ok(inputs[0].to_vec())
            }
            Op::Conv => {
                arity(2)?;
                rank(inputs[0], 2)?;
                rank(inputs[1], 3)?;
                let (m, n) = (inputs[0][0], inputs[0][1]);
                let (f, wm, t) = (inputs[1][0], inputs[1][1], inputs[1][2]);
                if n == 0 {
                    return Err(Error::EmptySentence);
                }
                if t == 0 {
                    return Err(Error::shape("conv: filter width must be >= 1"));
                }
                if m != wm {
                    return Err(Error::shape(format!(
                        "conv: embedding rows {m} vs filter rows {wm}"
                    )));
                }
                Ok(vec![f, n + t - 1])
            }
            Op::ConvGradWeight { width } => {
                arity(2)?;
                rank(inputs[0], 2)?;
                rank(inputs[1], 2)?;
                let (m, n) = (inputs[0][0], inputs[0][1]);
                let (f, len) = (inputs[1][0], inputs[1][1]);
                if len != n + width - 1 {
                    return Err(Error::shape(format!(
                        "conv_grad_weight: {n} columns with width {width} vs {len} outputs"
                    )));
                }
                Ok(vec![f, m, *width])
            }
            Op::ConvGradInput => {
                arity(2)?;
                rank(inputs[0], 2)?;
                rank(inputs[1], 3)?;
                let (f, len) = (inputs[0][0], inputs[0][1]);
                let (wf, m, t) = (inputs[1][0], inputs[1][1], inputs[1][2]);
                if f != wf || len < t {
                    return Err(Error::shape(format!(
                        "conv_grad_input: {:?} vs {:?}",
                        inputs[0], inputs[1]
                    )));
                }
                Ok(vec![m, len + 1 - t])
            }
            Op::Gather(ids) => {
                arity(1)?;
                rank(inputs[0], 2)?;
                if ids.is_empty() {
                    return Err(Error::EmptySentence);
                }
                let rows = inputs[0][0];
                if let Some(&id) = ids.iter().find(|&&id| id >= rows) {
                    return Err(Error::IdOutOfRange { id, rows });
                }
                Ok(vec![inputs[0][1], ids.len()])
            }
            Op::Scatter { ids, rows } => {
                arity(1)?;
                rank(inputs[0], 2)?;
                if inputs[0][1] != ids.len() {
                    return Err(Error::shape("scatter_rows: column count vs ids"));
                }
                Ok(vec![*rows, inputs[0][0]])
            }
            Op::Softmax | Op::LogSoftmax => {
                arity(1)?;
                rank(inputs[0], 1)?;
                Ok(inputs[0].to_vec())
            }
            Op::SoftmaxCrossEntropy => {
                arity(2)?;
                rank(inputs[0], 1)?;
                same(inputs[0], inputs[1])?;
                if inputs[0][0] < 2 {
                    return Err(Error::invalid("softmax_cross_entropy needs at least 2 classes"));
                }
                Ok(Vec::new())
            }
            Op::L2NormEps(_) => {
                arity(1)?;
                Ok(Vec::new())
            }
            Op::Concat => {
                if inputs.is_empty() {
                    return Err(Error::invalid("concat of an empty list"));
                }
                let mut total = 0;
                for s in inputs {
                    rank(s, 1)?;
                    total += s[0];
                }
                Ok(vec![total])
            }
            Op::Slice { start, len } => {
                arity(1)?;
                rank(inputs[0], 1)?;
                if start + len > inputs[0][0] {
                    return Err(Error::shape("slice out of range"));
                }
                Ok(vec![*len])
            }
            Op::Place { start, total } => {
                arity(1)?;
                rank(inputs[0], 1)?;
                if start + inputs[0][0] > *total {
                    return Err(Error::shape("place out of range"));
                }
                Ok(vec![*total])
            }
            Op::ScaleMask { mask, .. } => {
                arity(1)?;
                same(inputs[0], mask.shape())?;
                Ok(inputs[0].to_vec())
            }
        }
    }

    /// Evaluates a non-leaf primitive. Shapes were validated at construction.
    pub(crate) fn forward(&self, x: &[&Tensor<T>], out_shape: &[usize]) -> Tensor<T> {
        let shape = out_shape.to_vec();
        let data: Vec<T> = match self {
            Op::Input(_) | Op::Param(_) | Op::Const(_) => unreachable!("leaves are bound"),
            Op::Add => zip(x[0], x[1], |a, b| a + b),
            Op::Sub => zip(x[0], x[1], |a, b| a - b),
            Op::Mul => zip(x[0], x[1], |a, b| a * b),
            Op::Div => zip(x[0], x[1], |a, b| a / b),
            Op::Neg => x[0].data().iter().map(|&v| -v).collect(),
            Op::Scale(c) => x[0].data().iter().map(|&v| v * *c).collect(),
            Op::Sum => vec![x[0].sum()],
            Op::Broadcast(s) => vec![x[0].data()[0]; numel(s)],
            Op::SumCols => {
                let cols = x[0].shape()[1];
                x[0].data()
                    .chunks(cols.max(1))
                    .take(x[0].shape()[0])
                    .map(|row| row.iter().copied().sum())
                    .collect()
            }
            Op::RepeatCols(cols) => x[0]
                .data()
                .iter()
                .flat_map(|&v| std::iter::repeat(v).take(*cols))
                .collect(),
            Op::MatMul => matmul(x[0], x[1]),
            Op::Transpose => {
                let (r, c) = (x[0].shape()[0], x[0].shape()[1]);
                let d = x[0].data();
                let mut out = Vec::with_capacity(r * c);
                for j in 0..c {
                    for i in 0..r {
                        out.push(d[i * c + j]);
                    }
                }
                out
            }
            Op::Reshape(_) => x[0].data().to_vec(),
            Op::Relu => x[0]
                .data()
                .iter()
                .map(|&v| if v > T::zero() { v } else { T::zero() })
                .collect(),
            Op::ReluMask => x[0]
                .data()
                .iter()
                .map(|&v| if v > T::zero() { T::one() } else { T::zero() })
                .collect(),
            Op::SelectMax => {
                let k = *x[0].shape().last().unwrap();
                x[0].data()
                    .chunks(k)
                    .zip(x[1].data().chunks(k))
                    .map(|(key, val)| val[argmax(key).unwrap()])
                    .collect()
            }
            Op::ScatterMax => {
                let k = *x[0].shape().last().unwrap();
                let mut out = vec![T::zero(); x[0].len()];
                for (r, key) in x[0].data().chunks(k).enumerate() {
                    out[r * k + argmax(key).unwrap()] = x[1].data()[r];
                }
                out
            }
            Op::Conv => conv_forward(x[0], x[1]),
            Op::ConvGradWeight { width } => conv_grad_weight(x[0], x[1], *width),
            Op::ConvGradInput => conv_grad_input(x[0], x[1]),
            Op::Gather(ids) => {
                let m = x[0].shape()[1];
                let table = x[0].data();
                let n = ids.len();
                let mut out = vec![T::zero(); m * n];
                for (j, &id) in ids.iter().enumerate() {
                    for i in 0..m {
                        out[i * n + j] = table[id * m + i];
                    }
                }
                out
            }
            Op::Scatter { ids, rows } => {
                let m = x[0].shape()[0];
                let n = ids.len();
                let g = x[0].data();
                let mut out = vec![T::zero(); rows * m];
                for (j, &id) in ids.iter().enumerate() {
                    for i in 0..m {
                        out[id * m + i] += g[i * n + j];
                    }
                }
                out
            }
            Op::Softmax => softmax(x[0].data()),
            Op::LogSoftmax => log_softmax(x[0].data()),
            Op::SoftmaxCrossEntropy => {
                let logp = log_softmax(x[0].data());
                let loss = x[1]
                    .data()
                    .iter()
                    .zip(&logp)
                    .fold(T::zero(), |acc, (&t, &lp)| acc - t * lp);
                vec![loss]
            }
            Op::L2NormEps(eps) => {
                let ss: T = x[0].data().iter().map(|&v| v * v).sum();
                vec![(ss + *eps).sqrt()]
            }
            Op::Concat => x.iter().flat_map(|t| t.data().iter().copied()).collect(),
            Op::Slice { start, len } => x[0].data()[*start..start + len].to_vec(),
            Op::Place { start, total } => {
                let mut out = vec![T::zero(); *total];
                out[*start..start + x[0].len()].copy_from_slice(x[0].data());
                out
            }
            Op::ScaleMask { mask, scale } => zip(x[0], mask, |v, m| v * m * *scale),
        };
        Tensor::new(shape, data).expect("kernel output matches inferred shape")
    }
}

fn zip<T: Real>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Vec<T> {
    a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect()
}

fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Vec<T> {
    let (p, q) = (a.shape()[0], a.shape()[1]);
    let r = b.shape()[1];
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![T::zero(); p * r];
    for i in 0..p {
        let row = &mut out[i * r..(i + 1) * r];
        for k in 0..q {
            let aik = ad[i * q + k];
            if aik == T::zero() {
                continue;
            }
            for (o, &bkj) in row.iter_mut().zip(&bd[k * r..(k + 1) * r]) {
                *o += aik * bkj;
            }
        }
    }
    out
}

pub(crate) fn softmax<T: Real>(z: &[T]) -> Vec<T> {
    let max = z.iter().copied().fold(T::neg_infinity(), T::max);
    let exp: Vec<T> = z.iter().map(|&v| (v - max).exp()).collect();
    let total: T = exp.iter().copied().sum();
    exp.into_iter().map(|e| e / total).collect()
}

fn log_softmax<T: Real>(z: &[T]) -> Vec<T> {
    let max = z.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = z.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
    z.iter().map(|&v| v - lse).collect()
}

// Wide correlation. With padded input Ep[i, p] = E[i, p - (t-1)] (zero outside
// [0, n)), out[k, j] = sum_{i,s} W[k,i,s] * Ep[i, j+s].
fn conv_forward<T: Real>(e: &Tensor<T>, w: &Tensor<T>) -> Vec<T> {
    let (m, n) = (e.shape()[0], e.shape()[1]);
    let (f, t) = (w.shape()[0], w.shape()[2]);
    let len = n + t - 1;
    let (ed, wd) = (e.data(), w.data());
    let mut out = vec![T::zero(); f * len];
    for k in 0..f {
        let orow = &mut out[k * len..(k + 1) * len];
        for i in 0..m {
            let erow = &ed[i * n..(i + 1) * n];
            for s in 0..t {
                let wv = wd[(k * m + i) * t + s];
                if wv == T::zero() {
                    continue;
                }
                // j + s - (t-1) = c in [0, n)  =>  j = c + t - 1 - s
                let offset = t - 1 - s;
                for (o, &ev) in orow[offset..offset + n].iter_mut().zip(erow) {
                    *o += wv * ev;
                }
            }
        }
    }
    out
}

fn conv_grad_weight<T: Real>(e: &Tensor<T>, g: &Tensor<T>, t: usize) -> Vec<T> {
    let (m, n) = (e.shape()[0], e.shape()[1]);
    let (f, len) = (g.shape()[0], g.shape()[1]);
    let (ed, gd) = (e.data(), g.data());
    let mut out = vec![T::zero(); f * m * t];
    for k in 0..f {
        let grow = &gd[k * len..(k + 1) * len];
        for i in 0..m {
            let erow = &ed[i * n..(i + 1) * n];
            for s in 0..t {
                let offset = t - 1 - s;
                let acc: T = grow[offset..offset + n]
                    .iter()
                    .zip(erow)
                    .map(|(&gv, &ev)| gv * ev)
                    .sum();
                out[(k * m + i) * t + s] = acc;
            }
        }
    }
    out
}

fn conv_grad_input<T: Real>(g: &Tensor<T>, w: &Tensor<T>) -> Vec<T> {
    let (f, len) = (g.shape()[0], g.shape()[1]);
    let (m, t) = (w.shape()[1], w.shape()[2]);
    let n = len + 1 - t;
    let (gd, wd) = (g.data(), w.data());
    let mut out = vec![T::zero(); m * n];
    for k in 0..f {
        let grow = &gd[k * len..(k + 1) * len];
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for s in 0..t {
                let wv = wd[(k * m + i) * t + s];
                if wv == T::zero() {
                    continue;
                }
                let offset = t - 1 - s;
                for (o, &gv) in orow.iter_mut().zip(&grow[offset..offset + n]) {
                    *o += wv * gv;
                }
            }
        }
    }
    out
}
