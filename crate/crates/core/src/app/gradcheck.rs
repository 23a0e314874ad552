//! Finite-difference check of the full classification loss on the tiny
//! preset model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{Observation, Sample, VariateSeries};
use crate::error::Result;
use crate::model::{Model, ModelConfig};
use crate::nn::{finite_difference_gradcheck, GradCheckOptions, GradCheckReport};
use crate::parallel::Execution;

/// Observations for the tiny preset: three variates of at most five
/// samples each, labels alternating.
pub fn tiny_observations(seed: u64, n: usize) -> Vec<Observation> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|k| {
            let variates = (0..3)
                .map(|v| {
                    let len = rng.random_range(if v == 0 { 1 } else { 0 }..=5);
                    VariateSeries::new(
                        (0..len)
                            .map(|_| Sample {
                                timestamp: rng.random_range(0.0..5.0),
                                value: rng.random_range(-2.0..2.0),
                            })
                            .collect(),
                    )
                })
                .collect();
            Observation {
                id: format!("tiny-{k}"),
                variates,
                label: k % 2,
                static_features: None,
            }
        })
        .collect()
}

/// Checks every coordinate of every parameter of the tiny preset against
/// central differences of the mean loss over a small batch.
pub fn run_gradcheck(seed: u64, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let model = Model::new(ModelConfig::tiny(), seed)?;
    let batch = tiny_observations(seed, 4);
    let refs: Vec<&Observation> = batch.iter().collect();
    let (_, grads) = model.batch_loss_and_grad(&refs, Execution::Sequential)?;
    let loss = |params: &crate::nn::ParameterStore| {
        let m = Model {
            config: model.config.clone(),
            params: params.clone(),
        };
        m.batch_loss(&refs, Execution::Sequential)
            .unwrap_or(f64::NAN)
    };
    Ok(finite_difference_gradcheck(
        loss,
        &model.params,
        &grads,
        opts,
    ))
}
