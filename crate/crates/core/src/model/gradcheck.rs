//! Finite-difference verification of the full training gradient.
//!
//! The analytic gradient comes from [`objective_and_grad`], which
//! differentiates through the penalty's own gradient subgraph. The numeric
//! side only evaluates [`robust_objective`] at perturbed parameters.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{objective_and_grad, robust_objective, Example, ModelConfig, ModelParams, Objective};
use crate::autodiff::check::{finite_difference_oracle, max_relative_error};
use crate::error::Result;
use crate::tensor::Tensor;

/// A random model small enough to difference every parameter.
#[derive(Clone, Debug)]
pub struct TinyModel {
    pub config: ModelConfig,
    pub params: ModelParams<f64>,
    pub batch: Vec<Example>,
}

/// Vocabulary 50, 8-dim embeddings, widths 2 and 3 with 4 filters each,
/// 2 classes, and a batch of sentences of length 7.
pub fn random_tiny_model(seed: u64, robust_weight: f64, dropout_rate: f64, batch_size: usize) -> Result<TinyModel> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let config = ModelConfig {
        embed_dim: 8,
        filter_widths: vec![2, 3],
        filters_per_width: 4,
        num_classes: 2,
        vocab_size: 50,
        dropout_rate,
        robust_weight,
        norm_eps: 1e-12,
    };
    let embedding = Tensor::new(
        vec![50, 8],
        (0..400).map(|_| rng.gen_range(-0.5..0.5)).collect(),
    )?;
    let mut params = ModelParams::init(&config, embedding, rng.gen())?;
    // Scale the output layer up so the penalty is not negligible.
    for v in params.out_weight.data_mut() {
        *v *= 3.0;
    }
    for v in params.out_bias.data_mut() {
        *v = rng.gen_range(-0.2..0.2);
    }
    for bank in &mut params.filters {
        for v in bank.bias.data_mut() {
            *v = rng.gen_range(-0.1..0.1);
        }
    }
    let batch = (0..batch_size)
        .map(|_| {
            Example::new(
                (0..7).map(|_| rng.gen_range(3..50)).collect(),
                rng.gen_range(0..2),
            )
        })
        .collect();
    Ok(TinyModel { config, params, batch })
}

#[derive(Clone, Debug, Serialize)]
pub struct GroupError {
    pub name: String,
    pub max_relative_error: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub groups: Vec<GroupError>,
    pub max_relative_error: f64,
}

/// Compares the analytic gradient of the robust objective with central
/// differences (step `eps`) for every parameter value. Dropout masks are
/// drawn from `mask_seed` on every evaluation, so both sides see the same
/// network. No absolute floor is applied: only entries that agree exactly
/// count as zero error.
pub fn check_gradient(model: &TinyModel, eps: f64, mask_seed: u64) -> Result<GradCheckReport> {
    let analytic = objective_and_grad(
        &model.params,
        &model.config,
        &model.batch,
        Objective::Robust,
        &mut ChaCha8Rng::seed_from_u64(mask_seed),
    )?
    .grads;

    let names = model.params.names();
    let mut groups = Vec::with_capacity(names.len());
    for (index, name) in names.into_iter().enumerate() {
        let x0 = model.params.tensors()[index].clone();
        let numeric = finite_difference_oracle(
            |x: &Tensor<f64>| {
                let mut p = model.params.clone();
                *p.tensors_mut()[index] = x.clone();
                robust_objective(&p, &model.config, &model.batch, &mut ChaCha8Rng::seed_from_u64(mask_seed))
            },
            &x0,
            eps,
        )?;
        let analytic = analytic.tensors()[index];
        groups.push(GroupError {
            name,
            max_relative_error: max_relative_error(analytic.data(), numeric.data(), 0.0),
        });
    }
    let max_relative_error = groups.iter().map(|g| g.max_relative_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        groups,
        max_relative_error,
    })
}
