//! Shared helpers for unit tests.

use rand::Rng;

use crate::data::{Observation, Sample, VariateSeries};
use crate::encoder::EncoderConfig;
use crate::neighbors::NeighborQuery;

pub fn tiny_encoder(layers: usize, neighbors: NeighborQuery) -> EncoderConfig {
    EncoderConfig {
        time_dim: 8,
        variate_dim: 4,
        linear_dim: 12,
        embed_dim: 6,
        mlp_hidden: 5,
        heads: 2,
        layers,
        neighbors,
        zero_time_code: false,
    }
}

/// Observation with `lengths[v]` (at most 40) samples in variate `v`,
/// stored unsorted. Timestamps sit on a coarse grid so ties across variates
/// occur; within a variate they are distinct.
pub fn random_observation<R: Rng>(rng: &mut R, lengths: &[usize], label: usize) -> Observation {
    let variates = lengths
        .iter()
        .map(|&n| {
            VariateSeries::new(
                rand::seq::index::sample(rng, 40, n)
                    .into_iter()
                    .map(|slot| Sample {
                        timestamp: slot as f64 * 0.5,
                        value: rng.random_range(-2.0..2.0),
                    })
                    .collect(),
            )
        })
        .collect();
    Observation {
        id: "fixture".into(),
        variates,
        label,
        static_features: None,
    }
}

/// Permutes the stored sample order of every variate.
pub fn shuffle_storage<R: Rng>(obs: &Observation, rng: &mut R) -> Observation {
    use rand::seq::SliceRandom;
    let mut out = obs.clone();
    for v in &mut out.variates {
        v.samples.shuffle(rng);
    }
    out
}
