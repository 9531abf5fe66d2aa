//! Mini-batch Adam training with dev-set early stopping, and accuracy
//! evaluation under test-time noise.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{gaussian_embedding_noise, word_dropout_noise, NoiseSpec};
use crate::error::{Error, Result};
use crate::model::{
    embed_sentence, hidden_forward, objective_and_grad, predict, Example, ModelConfig, ModelParams, Objective,
};
use crate::seed::derive_seed;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment accumulators, shaped like the parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct AdamState<T: Real> {
    pub config: AdamConfig,
    pub m: ModelParams<T>,
    pub v: ModelParams<T>,
    pub step: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &ModelParams<T>, config: AdamConfig) -> Self {
        AdamState {
            config,
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }
}

/// One Adam update. Non-finite gradients leave `params` and `state`
/// untouched and name the offending parameter.
pub fn adam_step<T: Real>(params: &mut ModelParams<T>, grads: &ModelParams<T>, state: &mut AdamState<T>) -> Result<()> {
    let names = params.names();
    let grad_tensors = grads.tensors();
    if grad_tensors.len() != names.len() {
        return Err(Error::shape("gradient does not match parameter layout"));
    }
    for ((name, g), p) in names.iter().zip(&grad_tensors).zip(params.tensors()) {
        if g.shape() != p.shape() {
            return Err(Error::shape(format!("gradient for `{name}` has shape {:?}, expected {:?}", g.shape(), p.shape())));
        }
        if !g.all_finite() {
            return Err(Error::NonFiniteGradient(name.clone()));
        }
    }

    state.step += 1;
    let c = state.config;
    let cast = T::from_f64_lossy;
    let (b1, b2) = (cast(c.beta1), cast(c.beta2));
    let (one_b1, one_b2) = (cast(1.0 - c.beta1), cast(1.0 - c.beta2));
    let t = state.step as i32;
    let bc1 = cast(1.0 - c.beta1.powi(t));
    let bc2 = cast(1.0 - c.beta2.powi(t));
    let (lr, eps) = (cast(c.lr), cast(c.eps));

    let ms = state.m.tensors_mut();
    let vs = state.v.tensors_mut();
    for (((p, g), m), v) in params.tensors_mut().into_iter().zip(grad_tensors).zip(ms).zip(vs) {
        let p = p.data_mut();
        let (m, v) = (m.data_mut(), v.data_mut());
        for (i, &gi) in g.data().iter().enumerate() {
            m[i] = b1 * m[i] + one_b1 * gi;
            v[i] = b2 * v[i] + one_b2 * gi * gi;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            p[i] = p[i] - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without dev improvement before stopping.
    pub patience: usize,
    pub dev_fraction: f64,
    pub seed: u64,
    pub adam: AdamConfig,
    pub freeze_embeddings: bool,
    /// Also report accuracy on the training portion every epoch.
    pub track_train_accuracy: bool,
    /// Forces an objective; by default it follows the penalty weight.
    pub objective: Option<Objective>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 50,
            max_epochs: 20,
            patience: 3,
            dev_fraction: 0.1,
            seed: 0,
            adam: AdamConfig::default(),
            freeze_embeddings: false,
            track_train_accuracy: false,
            objective: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be at least 1"));
        }
        if !(self.dev_fraction > 0.0 && self.dev_fraction < 0.5) {
            return Err(Error::invalid(format!("dev fraction {} outside (0, 0.5)", self.dev_fraction)));
        }
        if !(self.adam.lr > 0.0) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        Ok(())
    }
}

/// Progress after one epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Mean objective over the epoch's batches.
    pub train_loss: f64,
    pub dev_accuracy: f64,
    pub train_accuracy: Option<f64>,
    /// Wall-clock time of this epoch's optimization, excluding evaluation.
    pub epoch_seconds: f64,
    /// Running total of `epoch_seconds`.
    pub cumulative_seconds: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T: Real> {
    /// Snapshot with the best dev accuracy, earliest epoch on ties.
    pub params: ModelParams<T>,
    pub best_epoch: Option<usize>,
    pub history: Vec<EpochRecord>,
    pub optimizer_steps: u64,
}

/// Splits off the dev portion: a seeded shuffle, with the last
/// `round(n * dev_fraction)` (at least one) examples held out.
pub fn split_dev(n: usize, dev_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    let dev = ((n as f64 * dev_fraction).round() as usize).max(1);
    if dev >= n {
        return Err(Error::invalid(format!("{n} training examples are too few to hold out a dev set")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0xde7])));
    let held = order.split_off(n - dev);
    Ok((order, held))
}

/// Trains from `init` on `examples`, of which a dev portion is held out for
/// model selection. `observer` sees each epoch's record and the current
/// parameters as the epoch completes.
pub fn train<T: Real>(
    config: &ModelConfig,
    init: ModelParams<T>,
    examples: &[Example],
    tc: &TrainConfig,
    observer: &mut dyn FnMut(&EpochRecord, &ModelParams<T>),
) -> Result<TrainOutcome<T>> {
    config.validate()?;
    tc.validate()?;
    init.check(config)?;
    if examples.is_empty() {
        return Err(Error::invalid("empty training split"));
    }
    for ex in examples {
        ex.check(config)?;
    }
    let (train_idx, dev_idx) = split_dev(examples.len(), tc.dev_fraction, tc.seed)?;
    let train_set: Vec<Example> = train_idx.iter().map(|&i| examples[i].clone()).collect();
    let dev_set: Vec<Example> = dev_idx.iter().map(|&i| examples[i].clone()).collect();
    let objective = tc.objective.unwrap_or_else(|| Objective::for_config(config));

    let mut params = init;
    let mut best = params.clone();
    let mut best_acc = f64::NEG_INFINITY;
    let mut best_epoch = None;
    let mut stale = 0;
    let mut history = Vec::new();
    let mut state = AdamState::new(&params, tc.adam);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(tc.seed, &[0x7a1]));
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut cumulative = 0.0;

    for epoch in 1..=tc.max_epochs {
        let start = Instant::now();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for (b, chunk) in order.chunks(tc.batch_size).enumerate() {
            let batch: Vec<Example> = chunk.iter().map(|&i| train_set[i].clone()).collect();
            let diverged = |what| Error::Diverged { epoch, batch: b, what };
            let mut bg = match objective_and_grad(&params, config, &batch, objective, &mut rng) {
                Ok(bg) => bg,
                Err(Error::NonFinite { .. }) => return Err(diverged("loss")),
                Err(e) => return Err(e),
            };
            if !bg.loss.is_finite() {
                return Err(diverged("loss"));
            }
            if tc.freeze_embeddings {
                bg.grads.embedding = Tensor::zeros(bg.grads.embedding.shape());
            }
            match adam_step(&mut params, &bg.grads, &mut state) {
                Ok(()) => {}
                Err(Error::NonFiniteGradient(_)) => return Err(diverged("gradient")),
                Err(e) => return Err(e),
            }
            loss_sum += bg.loss.to_f64_lossy();
            batches += 1;
        }
        let epoch_seconds = start.elapsed().as_secs_f64();
        cumulative += epoch_seconds;

        let dev_accuracy = evaluate(&params, config, &dev_set, NoiseSpec::default(), 0)?;
        let train_accuracy = if tc.track_train_accuracy {
            Some(evaluate(&params, config, &train_set, NoiseSpec::default(), 0)?)
        } else {
            None
        };
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / batches as f64,
            dev_accuracy,
            train_accuracy,
            epoch_seconds,
            cumulative_seconds: cumulative,
        };
        observer(&record, &params);
        history.push(record);

        if dev_accuracy > best_acc {
            best_acc = dev_accuracy;
            best = params.clone();
            best_epoch = Some(epoch);
            stale = 0;
        } else {
            stale += 1;
            if stale >= tc.patience {
                break;
            }
        }
    }

    Ok(TrainOutcome {
        params: if best_epoch.is_some() { best } else { params },
        best_epoch,
        history,
        optimizer_steps: state.step,
    })
}

/// Predicted class for a clean sentence.
pub fn classify<T: Real>(params: &ModelParams<T>, config: &ModelConfig, ids: &[usize]) -> Result<usize> {
    let e = embed_sentence(params, config, ids)?;
    let h = hidden_forward(params, config, &e)?;
    Ok(predict(params, &h)?.label())
}

fn classify_noisy<T: Real>(
    params: &ModelParams<T>,
    config: &ModelConfig,
    ids: &[usize],
    noise: NoiseSpec,
    seed: u64,
) -> Result<usize> {
    if noise.is_clean() {
        return classify(params, config, ids);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids = word_dropout_noise(ids, noise.alpha, &mut rng);
    let e = embed_sentence(params, config, &ids)?;
    let e = gaussian_embedding_noise(&e, noise.sigma, &mut rng)?;
    let h = hidden_forward(params, config, &e)?;
    Ok(predict(params, &h)?.label())
}

/// Fraction of `examples` classified correctly after corrupting each one
/// with `noise`. Example `i` draws its noise from a stream derived from
/// `seed` and `i`, so results do not depend on scheduling.
pub fn evaluate<T: Real>(
    params: &ModelParams<T>,
    config: &ModelConfig,
    examples: &[Example],
    noise: NoiseSpec,
    seed: u64,
) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::invalid("empty evaluation set"));
    }
    noise.validate()?;
    let correct = examples
        .par_iter()
        .enumerate()
        .map(|(i, ex)| {
            ex.check(config)?;
            let label = classify_noisy(params, config, &ex.token_ids, noise, derive_seed(seed, &[i as u64]))?;
            Ok(usize::from(label == ex.label))
        })
        .collect::<Result<Vec<usize>>>()?
        .into_iter()
        .sum::<usize>();
    Ok(correct as f64 / examples.len() as f64)
}
