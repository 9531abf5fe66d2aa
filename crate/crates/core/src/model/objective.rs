use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{build_forward, padded_ids, Example, ModelConfig, ModelParams, Source, EMBEDDED};
use crate::autodiff::check::finite_difference_oracle;
use crate::autodiff::{Bindings, Graph, NodeRef};
use crate::corpus::PAD;
use crate::error::{Error, Result};
use crate::tensor::{Precision, Real, Tensor};

/// Sentence matrix `[m, n]` for `ids`, padded to the widest filter.
pub fn embed_sentence<T: Real>(params: &ModelParams<T>, config: &ModelConfig, ids: &[usize]) -> Result<Tensor<T>> {
    let ids = padded_ids(config, ids)?;
    let mut g = Graph::new();
    let table = g.param(super::EMBEDDING, &[config.vocab_size, config.embed_dim]);
    let e = g.gather_rows(table, &ids)?;
    let mut b = Bindings::new();
    b.bind(super::EMBEDDING, &params.embedding);
    Ok(g.eval(&b, &[e])?[e].clone())
}

/// Hidden vector `h` for a sentence matrix.
pub fn hidden_forward<T: Real>(params: &ModelParams<T>, config: &ModelConfig, embedded: &Tensor<T>) -> Result<Tensor<T>> {
    let n = match embedded.shape() {
        [m, n] if *m == config.embed_dim => *n,
        s => return Err(Error::shape(format!("sentence matrix must be [{}, n], got {s:?}", config.embed_dim))),
    };
    let mut g = Graph::new();
    let fwd = build_forward(&mut g, config, Source::Embedded(n), None, None)?;
    let mut b = params.bindings();
    b.bind(EMBEDDED, embedded);
    Ok(g.eval(&b, &[fwd.hidden])?[fwd.hidden].clone())
}

/// 0/1 mask where each unit is dropped with probability `rate`.
pub fn sample_dropout_mask<T: Real, R: Rng + ?Sized>(len: usize, rate: f64, rng: &mut R) -> Result<Tensor<T>> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::invalid(format!("dropout rate {rate} outside [0, 1)")));
    }
    Ok(Tensor::vector(
        (0..len)
            .map(|_| if rng.gen::<f64>() < rate { T::zero() } else { T::one() })
            .collect(),
    ))
}

/// Inverted dropout: units are zeroed with probability `rate` and survivors
/// scaled by `1 / (1 - rate)`. `rate == 0` returns `h` unchanged without
/// drawing from `rng`.
pub fn apply_hidden_dropout<T: Real, R: Rng + ?Sized>(h: &Tensor<T>, rate: f64, rng: &mut R) -> Result<Tensor<T>> {
    if rate == 0.0 {
        return Ok(h.clone());
    }
    let mask = sample_dropout_mask::<T, R>(h.len(), rate, rng)?;
    let scale = T::from_f64_lossy(1.0 / (1.0 - rate));
    h.zip_map(&mask.reshaped(h.shape().to_vec())?, |v, m| v * m * scale)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction<T: Real> {
    pub logits: Tensor<T>,
    pub probs: Tensor<T>,
}

impl<T: Real> Prediction<T> {
    pub fn label(&self) -> usize {
        self.probs.argmax().unwrap_or(0)
    }
}

/// Output layer applied to a (possibly dropped-out) hidden vector.
pub fn predict<T: Real>(params: &ModelParams<T>, hidden: &Tensor<T>) -> Result<Prediction<T>> {
    let (c, h) = (params.out_weight.shape()[0], params.out_weight.shape()[1]);
    if hidden.shape() != [h] {
        return Err(Error::shape(format!("hidden vector must be [{h}], got {:?}", hidden.shape())));
    }
    let mut g = Graph::new();
    let x = g.input("hidden", &[h, 1]);
    let w = g.param(super::OUT_WEIGHT, &[c, h]);
    let b = g.param(super::OUT_BIAS, &[c]);
    let wx = g.matmul(w, x)?;
    let wx = g.reshape(wx, &[c])?;
    let logits = g.add(wx, b)?;
    let probs = g.softmax(logits)?;
    let mut bind = Bindings::new();
    bind.bind_owned("hidden", hidden.clone().reshaped(vec![h, 1])?)
        .bind(super::OUT_WEIGHT, &params.out_weight)
        .bind(super::OUT_BIAS, &params.out_bias);
    let v = g.eval(&bind, &[logits, probs])?;
    Ok(Prediction {
        logits: v[logits].clone(),
        probs: v[probs].clone(),
    })
}

/// Cross-entropy of a prediction against a class index.
pub fn data_loss<T: Real>(prediction: &Prediction<T>, label: usize) -> Result<T> {
    let z = prediction.logits.data();
    if label >= z.len() {
        return Err(Error::invalid(format!("label {label} out of range for {} classes", z.len())));
    }
    let max = z.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = z.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
    Ok(lse - z[label])
}

/// `||dL/dh||_2`, smoothed, for one example without dropout.
pub fn hidden_grad_norm<T: Real>(params: &ModelParams<T>, config: &ModelConfig, example: &Example) -> Result<T> {
    hidden_grad_norm_with_mask(params, config, example, None)
}

/// As [`hidden_grad_norm`], with the gradient taken at the dropped-out
/// classifier input when a mask is given.
pub fn hidden_grad_norm_with_mask<T: Real>(
    params: &ModelParams<T>,
    config: &ModelConfig,
    example: &Example,
    mask: Option<Tensor<T>>,
) -> Result<T> {
    example.check(config)?;
    let ids = padded_ids(config, &example.token_ids)?;
    let mut g = Graph::new();
    let fwd = build_forward(&mut g, config, Source::Tokens(&ids), mask, Some(example.label))?;
    let loss = fwd.loss.expect("label given");
    let penalty = penalty_node(&mut g, config, loss, fwd.classifier_input)?;
    g.eval(&params.bindings(), &[penalty])?[penalty].item()
}

fn penalty_node<T: Real>(g: &mut Graph<T>, config: &ModelConfig, loss: NodeRef, at: NodeRef) -> Result<NodeRef> {
    let dh = g.grad(loss, &[at])?[0];
    g.l2_norm_eps(dh, T::from_f64_lossy(config.norm_eps))
}

/// Which per-example loss to optimize.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Objective {
    /// Cross-entropy only.
    CrossEntropy,
    /// Cross-entropy plus `robust_weight * ||dL/dh_hat||_2`.
    Robust,
}

impl Objective {
    /// Robust when the config has a non-zero penalty weight.
    pub fn for_config(config: &ModelConfig) -> Self {
        if config.robust_weight > 0.0 {
            Objective::Robust
        } else {
            Objective::CrossEntropy
        }
    }
}

struct ExampleGraph<T: Real> {
    graph: Graph<T>,
    ids: Vec<usize>,
    embedded: NodeRef,
    params: Vec<NodeRef>,
    total: NodeRef,
}

fn example_graph<T: Real>(
    config: &ModelConfig,
    example: &Example,
    mask: Option<Tensor<T>>,
    objective: Objective,
) -> Result<ExampleGraph<T>> {
    example.check(config)?;
    let ids = padded_ids(config, &example.token_ids)?;
    let mut g = Graph::new();
    let fwd = build_forward(&mut g, config, Source::Tokens(&ids), mask, Some(example.label))?;
    let loss = fwd.loss.expect("label given");
    let total = match objective {
        Objective::CrossEntropy => loss,
        Objective::Robust => {
            let penalty = penalty_node(&mut g, config, loss, fwd.classifier_input)?;
            let weighted = g.scale(penalty, T::from_f64_lossy(config.robust_weight))?;
            g.add(loss, weighted)?
        }
    };
    let mut params = Vec::new();
    for &(w, b) in &fwd.params.filters {
        params.push(w);
        params.push(b);
    }
    params.push(fwd.params.out_weight);
    params.push(fwd.params.out_bias);
    Ok(ExampleGraph {
        graph: g,
        ids,
        embedded: fwd.embedded,
        params,
        total,
    })
}

fn sample_masks<T: Real, R: Rng + ?Sized>(config: &ModelConfig, n: usize, rng: &mut R) -> Result<Vec<Option<Tensor<T>>>> {
    (0..n)
        .map(|_| {
            if config.dropout_rate > 0.0 {
                sample_dropout_mask(config.hidden_dim(), config.dropout_rate, rng).map(Some)
            } else {
                Ok(None)
            }
        })
        .collect()
}

/// Mean over the batch of `L + lambda * ||dL/dh_hat||_2`, with one dropout
/// mask per example (when the dropout rate is non-zero) shared by both
/// terms.
pub fn robust_objective<T: Real, R: Rng + ?Sized>(
    params: &ModelParams<T>,
    config: &ModelConfig,
    batch: &[Example],
    rng: &mut R,
) -> Result<T> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let masks = sample_masks(config, batch.len(), rng)?;
    let bindings = params.bindings();
    let values = batch
        .iter()
        .zip(masks)
        .map(|(ex, mask)| {
            let eg = example_graph(config, ex, mask, Objective::Robust)?;
            eg.graph.eval(&bindings, &[eg.total])?[eg.total].item()
        })
        .collect::<Result<Vec<T>>>()?;
    Ok(mean(&values))
}

fn mean<T: Real>(values: &[T]) -> T {
    let mut total = T::zero();
    for &v in values {
        total += v;
    }
    total / T::from_usize(values.len()).unwrap()
}

/// Batch-mean objective value and its gradient wrt every parameter.
#[derive(Clone, Debug)]
pub struct BatchGradient<T: Real> {
    pub loss: T,
    pub grads: ModelParams<T>,
}

struct ExampleGradient<T: Real> {
    loss: T,
    ids: Vec<usize>,
    embedded: Tensor<T>,
    params: Vec<Tensor<T>>,
}

fn example_gradient<T: Real>(
    params: &ModelParams<T>,
    config: &ModelConfig,
    example: &Example,
    mask: Option<Tensor<T>>,
    objective: Objective,
) -> Result<ExampleGradient<T>> {
    let mut eg = example_graph(config, example, mask, objective)?;
    let mut wrt = vec![eg.embedded];
    wrt.extend_from_slice(&eg.params);
    let grads = eg.graph.grad(eg.total, &wrt)?;
    let mut outputs = vec![eg.total];
    outputs.extend_from_slice(&grads);
    let values = eg.graph.eval(&params.bindings(), &outputs)?;
    let loss = values[eg.total].item()?;
    let mut taken = grads.iter().map(|&n| values[n].clone());
    let embedded = taken.next().expect("embedded gradient");
    Ok(ExampleGradient {
        loss,
        ids: std::mem::take(&mut eg.ids),
        embedded,
        params: taken.collect(),
    })
}

/// Mean objective over `batch` and its parameter gradient. Examples are
/// processed in parallel and reduced in batch order, so the result does not
/// depend on scheduling. The PAD embedding row receives no gradient.
pub fn objective_and_grad<T: Real, R: Rng + ?Sized>(
    params: &ModelParams<T>,
    config: &ModelConfig,
    batch: &[Example],
    objective: Objective,
    rng: &mut R,
) -> Result<BatchGradient<T>> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let masks = sample_masks(config, batch.len(), rng)?;
    let per_example = batch
        .par_iter()
        .zip(masks)
        .map(|(ex, mask)| example_gradient(params, config, ex, mask, objective))
        .collect::<Result<Vec<_>>>()?;

    let mut grads = params.zeros_like();
    let m = config.embed_dim;
    let mut losses = Vec::with_capacity(per_example.len());
    for eg in &per_example {
        losses.push(eg.loss);
        let n = eg.ids.len();
        let table = grads.embedding.data_mut();
        for (j, &id) in eg.ids.iter().enumerate() {
            if id == PAD {
                continue;
            }
            for i in 0..m {
                table[id * m + i] += eg.embedded.data()[i * n + j];
            }
        }
        let mut dense = grads.tensors_mut().into_iter().skip(1);
        for g in &eg.params {
            let acc = dense.next().expect("matching parameter count");
            for (a, &v) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += v;
            }
        }
    }
    let scale = T::one() / T::from_usize(batch.len()).unwrap();
    for t in grads.tensors_mut() {
        for v in t.data_mut() {
            *v *= scale;
        }
    }
    Ok(BatchGradient {
        loss: mean(&losses),
        grads,
    })
}

/// Frobenius norm of the Jacobian of the class probabilities with respect
/// to the sentence matrix, by central differences. Diagnostic only.
pub fn output_jacobian_norm<T: Real>(params: &ModelParams<T>, config: &ModelConfig, ids: &[usize]) -> Result<f64> {
    let embedded = embed_sentence(params, config, ids)?;
    let n = embedded.shape()[1];
    let mut g = Graph::new();
    let fwd = build_forward(&mut g, config, Source::Embedded(n), None, None)?;
    let base = params.bindings();
    let mut total = 0.0;
    for class in 0..config.num_classes {
        let column = finite_difference_oracle(
            |e: &Tensor<T>| {
                let mut b = base.clone();
                b.bind(EMBEDDED, e);
                Ok(g.eval(&b, &[fwd.probs])?[fwd.probs].data()[class])
            },
            &embedded,
            T::from_f64_lossy(match T::PRECISION {
                Precision::Double => 1e-5,
                Precision::Single => 1e-2,
            }),
        )?;
        total += column.data().iter().map(|v| v.to_f64_lossy().powi(2)).sum::<f64>();
    }
    Ok(total.sqrt())
}
