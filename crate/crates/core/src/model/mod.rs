//! Convolutional sentence classifier with hidden-layer dropout and the
//! gradient-norm penalty.
//!
//! Forward pass for a sentence of token ids:
//!
//! 1. look up embeddings, giving `E[m, n]` (one column per word);
//! 2. for each filter width `t` (ascending) and each of its filters: wide
//!    convolution, ReLU, max over time;
//! 3. concatenate into `h` (width-major, then filter index);
//! 4. in training, inverted dropout gives `h_hat`; otherwise `h_hat = h`;
//! 5. `logits = W h_hat + b`, softmax, cross-entropy against the label.
//!
//! The robust objective is `L + lambda * ||dL/dh_hat||_2` per example,
//! averaged over the batch.

pub mod gradcheck;
mod objective;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Bindings, Graph, NodeRef};
use crate::corpus::PAD;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub use objective::{
    apply_hidden_dropout, data_loss, embed_sentence, hidden_forward, hidden_grad_norm,
    hidden_grad_norm_with_mask, objective_and_grad, output_jacobian_norm, predict,
    robust_objective, sample_dropout_mask, BatchGradient, Objective, Prediction,
};

/// Hyperparameters of the classifier and its regularizers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub embed_dim: usize,
    /// Strictly ascending.
    pub filter_widths: Vec<usize>,
    pub filters_per_width: usize,
    pub num_classes: usize,
    pub vocab_size: usize,
    /// Hidden-layer dropout rate, in `[0, 1)`.
    pub dropout_rate: f64,
    /// Weight of the gradient-norm penalty, `>= 0`.
    pub robust_weight: f64,
    /// Smoothing inside the penalty's square root.
    pub norm_eps: f64,
}

impl ModelConfig {
    pub fn new(vocab_size: usize, num_classes: usize) -> Self {
        ModelConfig {
            embed_dim: 300,
            filter_widths: vec![3, 4, 5],
            filters_per_width: 128,
            num_classes,
            vocab_size,
            dropout_rate: 0.0,
            robust_weight: 0.0,
            norm_eps: 1e-12,
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.filters_per_width * self.filter_widths.len()
    }

    pub fn max_width(&self) -> usize {
        self.filter_widths.iter().copied().max().unwrap_or(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.filters_per_width == 0 {
            return Err(Error::invalid("embedding size and filter count must be positive"));
        }
        if self.filter_widths.is_empty()
            || self.filter_widths[0] == 0
            || self.filter_widths.windows(2).any(|w| w[0] >= w[1])
        {
            return Err(Error::invalid(format!(
                "filter widths must be positive and strictly ascending, got {:?}",
                self.filter_widths
            )));
        }
        if self.num_classes < 2 {
            return Err(Error::invalid("need at least 2 classes"));
        }
        if self.vocab_size <= crate::corpus::MASK {
            return Err(Error::invalid("vocabulary must include the reserved ids"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::invalid(format!("dropout rate {} outside [0, 1)", self.dropout_rate)));
        }
        if !(self.robust_weight >= 0.0 && self.robust_weight.is_finite()) {
            return Err(Error::invalid(format!("robust weight {} must be >= 0", self.robust_weight)));
        }
        if !(self.norm_eps >= 0.0) {
            return Err(Error::invalid("norm eps must be >= 0"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct FilterBank<T: Real> {
    pub width: usize,
    /// `[filters, m, width]`
    pub weight: Tensor<T>,
    /// `[filters]`
    pub bias: Tensor<T>,
}

/// Trainable parameters. Also used as the gradient container, since
/// gradients have the same shapes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct ModelParams<T: Real> {
    /// `[V, m]`
    pub embedding: Tensor<T>,
    pub filters: Vec<FilterBank<T>>,
    /// `[c, hidden]`
    pub out_weight: Tensor<T>,
    /// `[c]`
    pub out_bias: Tensor<T>,
}

pub(crate) const EMBEDDING: &str = "embedding";
pub(crate) const OUT_WEIGHT: &str = "output.weight";
pub(crate) const OUT_BIAS: &str = "output.bias";

pub(crate) fn filter_weight_name(width: usize) -> String {
    format!("conv{width}.weight")
}

pub(crate) fn filter_bias_name(width: usize) -> String {
    format!("conv{width}.bias")
}

impl<T: Real> ModelParams<T> {
    /// Filters drawn from U(-1/sqrt(m t), 1/sqrt(m t)), output weights from
    /// U(-1/sqrt(hidden), 1/sqrt(hidden)), biases zero.
    pub fn init(config: &ModelConfig, embedding: Tensor<T>, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut uniform = |shape: &[usize], bound: f64| {
            let n = shape.iter().product();
            Tensor::new(
                shape.to_vec(),
                (0..n)
                    .map(|_| T::from_f64_lossy(rng.gen_range(-bound..bound)))
                    .collect(),
            )
            .unwrap()
        };
        let m = config.embed_dim;
        let f = config.filters_per_width;
        let filters = config
            .filter_widths
            .iter()
            .map(|&t| FilterBank {
                width: t,
                weight: uniform(&[f, m, t], 1.0 / ((m * t) as f64).sqrt()),
                bias: Tensor::zeros(&[f]),
            })
            .collect();
        let hidden = config.hidden_dim();
        let out_weight = uniform(&[config.num_classes, hidden], 1.0 / (hidden as f64).sqrt());
        let params = ModelParams {
            embedding,
            filters,
            out_weight,
            out_bias: Tensor::zeros(&[config.num_classes]),
        };
        params.check(config)?;
        Ok(params)
    }

    /// The same values at another precision.
    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        let c = |t: &Tensor<T>| t.map_to(|v| U::from_f64_lossy(v.to_f64_lossy()));
        ModelParams {
            embedding: c(&self.embedding),
            filters: self
                .filters
                .iter()
                .map(|b| FilterBank {
                    width: b.width,
                    weight: c(&b.weight),
                    bias: c(&b.bias),
                })
                .collect(),
            out_weight: c(&self.out_weight),
            out_bias: c(&self.out_bias),
        }
    }

    pub fn zeros_like(&self) -> Self {
        ModelParams {
            embedding: Tensor::zeros(self.embedding.shape()),
            filters: self
                .filters
                .iter()
                .map(|b| FilterBank {
                    width: b.width,
                    weight: Tensor::zeros(b.weight.shape()),
                    bias: Tensor::zeros(b.bias.shape()),
                })
                .collect(),
            out_weight: Tensor::zeros(self.out_weight.shape()),
            out_bias: Tensor::zeros(self.out_bias.shape()),
        }
    }

    /// Shapes must match `config`, and all values must be finite.
    pub fn check(&self, config: &ModelConfig) -> Result<()> {
        let expect = |what: &str, t: &Tensor<T>, shape: &[usize]| -> Result<()> {
            if t.shape() != shape {
                return Err(Error::shape(format!(
                    "{what}: expected {shape:?}, got {:?}",
                    t.shape()
                )));
            }
            if !t.all_finite() {
                return Err(Error::invalid(format!("{what} has non-finite values")));
            }
            Ok(())
        };
        let m = config.embed_dim;
        let f = config.filters_per_width;
        expect(EMBEDDING, &self.embedding, &[config.vocab_size, m])?;
        if self.filters.len() != config.filter_widths.len() {
            return Err(Error::shape("filter bank count differs from config"));
        }
        for (bank, &t) in self.filters.iter().zip(&config.filter_widths) {
            if bank.width != t {
                return Err(Error::shape("filter widths differ from config"));
            }
            expect(&filter_weight_name(t), &bank.weight, &[f, m, t])?;
            expect(&filter_bias_name(t), &bank.bias, &[f])?;
        }
        expect(OUT_WEIGHT, &self.out_weight, &[config.num_classes, config.hidden_dim()])?;
        expect(OUT_BIAS, &self.out_bias, &[config.num_classes])
    }

    /// Every parameter tensor in a fixed order: embedding, each bank's
    /// weight then bias, output weight, output bias.
    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        let mut out = vec![&self.embedding];
        for b in &self.filters {
            out.push(&b.weight);
            out.push(&b.bias);
        }
        out.push(&self.out_weight);
        out.push(&self.out_bias);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = vec![&mut self.embedding];
        for b in &mut self.filters {
            out.push(&mut b.weight);
            out.push(&mut b.bias);
        }
        out.push(&mut self.out_weight);
        out.push(&mut self.out_bias);
        out
    }

    /// Parameter names in [`tensors`](Self::tensors) order.
    pub fn names(&self) -> Vec<String> {
        let mut out = vec![EMBEDDING.to_string()];
        for b in &self.filters {
            out.push(filter_weight_name(b.width));
            out.push(filter_bias_name(b.width));
        }
        out.push(OUT_WEIGHT.to_string());
        out.push(OUT_BIAS.to_string());
        out
    }

    pub fn num_values(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn bindings(&self) -> Bindings<'_, T> {
        let mut b = Bindings::new();
        for (name, t) in self.names().into_iter().zip(self.tensors()) {
            b.bind(name, t);
        }
        b
    }
}

/// A sentence as token ids with its label.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Example {
    pub token_ids: Vec<usize>,
    pub label: usize,
}

impl Example {
    pub fn new(token_ids: Vec<usize>, label: usize) -> Self {
        Example { token_ids, label }
    }

    pub fn check(&self, config: &ModelConfig) -> Result<()> {
        if self.token_ids.is_empty() {
            return Err(Error::EmptySentence);
        }
        if let Some(&id) = self.token_ids.iter().find(|&&id| id >= config.vocab_size) {
            return Err(Error::IdOutOfRange {
                id,
                rows: config.vocab_size,
            });
        }
        if self.label >= config.num_classes {
            return Err(Error::invalid(format!(
                "label {} out of range for {} classes",
                self.label, config.num_classes
            )));
        }
        Ok(())
    }
}

/// Ids right-padded with PAD up to the widest filter.
pub(crate) fn padded_ids(config: &ModelConfig, ids: &[usize]) -> Result<Vec<usize>> {
    if ids.is_empty() {
        return Err(Error::EmptySentence);
    }
    let mut out = ids.to_vec();
    if out.len() < config.max_width() {
        out.resize(config.max_width(), PAD);
    }
    Ok(out)
}

/// Where the sentence matrix comes from when building a graph.
#[derive(Clone, Copy, Debug)]
pub(crate) enum Source<'a> {
    /// Token ids, looked up in the embedding parameter.
    Tokens(&'a [usize]),
    /// A precomputed `[m, n]` sentence matrix bound under [`EMBEDDED`].
    Embedded(usize),
}

pub(crate) const EMBEDDED: &str = "embedded";

/// Parameter nodes of one example graph, in [`ModelParams::tensors`] order
/// minus the embedding.
#[derive(Clone, Debug)]
pub(crate) struct ParamNodes {
    pub filters: Vec<(NodeRef, NodeRef)>,
    pub out_weight: NodeRef,
    pub out_bias: NodeRef,
}

#[derive(Clone, Debug)]
pub(crate) struct ForwardNodes {
    pub params: ParamNodes,
    /// `[m, n]`
    pub embedded: NodeRef,
    pub hidden: NodeRef,
    /// Hidden vector after dropout; the classifier's input.
    pub classifier_input: NodeRef,
    pub probs: NodeRef,
    pub loss: Option<NodeRef>,
}

/// Appends the classifier to `g`. With `label`, the one-hot target is a
/// constant and `loss` is set.
pub(crate) fn build_forward<T: Real>(
    g: &mut Graph<T>,
    config: &ModelConfig,
    source: Source<'_>,
    dropout_mask: Option<Tensor<T>>,
    label: Option<usize>,
) -> Result<ForwardNodes> {
    let m = config.embed_dim;
    let f = config.filters_per_width;
    let embedded = match source {
        Source::Tokens(ids) => {
            let table = g.param(EMBEDDING, &[config.vocab_size, m]);
            g.gather_rows(table, ids)?
        }
        Source::Embedded(n) => g.input(EMBEDDED, &[m, n]),
    };

    let mut filters = Vec::with_capacity(config.filter_widths.len());
    let mut pooled = Vec::with_capacity(config.filter_widths.len());
    for &t in &config.filter_widths {
        let w = g.param(&filter_weight_name(t), &[f, m, t]);
        let b = g.param(&filter_bias_name(t), &[f]);
        let conv = g.conv_bank(embedded, w)?;
        let len = g.shape(conv)[1];
        let bias = g.repeat_cols(b, len)?;
        let pre = g.add(conv, bias)?;
        let act = g.relu(pre)?;
        pooled.push(g.max_over_time(act)?);
        filters.push((w, b));
    }
    let hidden = g.concat(&pooled)?;
    let classifier_input = match dropout_mask {
        Some(mask) => {
            let keep = 1.0 - config.dropout_rate;
            g.scale_mask(hidden, mask, T::from_f64_lossy(1.0 / keep))?
        }
        None => hidden,
    };

    let h = config.hidden_dim();
    let c = config.num_classes;
    let out_weight = g.param(OUT_WEIGHT, &[c, h]);
    let out_bias = g.param(OUT_BIAS, &[c]);
    let col = g.reshape(classifier_input, &[h, 1])?;
    let wx = g.matmul(out_weight, col)?;
    let wx = g.reshape(wx, &[c])?;
    let logits = g.add(wx, out_bias)?;

    let (loss, probs) = match label {
        Some(label) => {
            if label >= c {
                return Err(Error::invalid(format!("label {label} out of range for {c} classes")));
            }
            let mut onehot = Tensor::zeros(&[c]);
            onehot.data_mut()[label] = T::one();
            let target = g.constant(onehot);
            let (loss, probs) = g.softmax_cross_entropy(logits, target)?;
            (Some(loss), probs)
        }
        None => (None, g.softmax(logits)?),
    };

    Ok(ForwardNodes {
        params: ParamNodes {
            filters,
            out_weight,
            out_bias,
        },
        embedded,
        hidden,
        classifier_input,
        probs,
        loss,
    })
}
