//! Encoder plus readout as one trainable classifier.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{validate_observation, DatasetMeta, Observation};
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::head::{self, ClassifierOutput, HeadConfig, HeadParams};
use crate::neighbors::{NeighborIndex, NeighborQuery};
use crate::nn::{GradientMap, Graph, NodeId, ParameterStore};
use crate::parallel::Execution;

/// Observations whose gradients are held in memory at once while a batch
/// is reduced. Fixed, so the summation order never depends on threads.
const REDUCE_CHUNK: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_variates: usize,
    pub n_classes: usize,
    #[serde(default)]
    pub static_dim: usize,
    pub encoder: EncoderConfig,
    #[serde(default)]
    pub head: HeadConfig,
}

impl ModelConfig {
    /// Smallest useful model, used for gradient checks: three variates,
    /// width 16, one layer, two heads, two classes.
    pub fn tiny() -> Self {
        Self {
            n_variates: 3,
            n_classes: 2,
            static_dim: 0,
            encoder: EncoderConfig {
                time_dim: 8,
                variate_dim: 4,
                linear_dim: 12,
                embed_dim: 8,
                mlp_hidden: 8,
                heads: 2,
                layers: 1,
                neighbors: NeighborQuery::Knn(2),
                zero_time_code: false,
            },
            head: HeadConfig {
                static_proj_dim: 4,
                classifier_hidden: 8,
            },
        }
    }

    pub fn meta(&self) -> DatasetMeta {
        DatasetMeta {
            n_variates: self.n_variates,
            n_classes: self.n_classes,
            static_dim: self.static_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_variates == 0 {
            return Err(Error::Config("at least one variate is required".into()));
        }
        if self.n_classes < 2 {
            return Err(Error::Config("at least two classes are required".into()));
        }
        self.encoder.validate()?;
        self.head.validate()
    }

    /// Fails unless `meta` describes data this model can consume.
    pub fn check_meta(&self, meta: &DatasetMeta) -> Result<()> {
        if *meta != self.meta() {
            return Err(Error::DatasetMismatch(format!(
                "dataset has N={}, C={}, static_dim={}; model expects N={}, C={}, static_dim={}",
                meta.n_variates,
                meta.n_classes,
                meta.static_dim,
                self.n_variates,
                self.n_classes,
                self.static_dim
            )));
        }
        Ok(())
    }

    /// Fresh parameters drawn from a seeded generator.
    pub fn init_params(&self, seed: u64) -> Result<ParameterStore> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParameterStore::new();
        self.encoder
            .init_params(self.n_variates, &mut store, &mut rng)?;
        self.head.init_params(
            self.encoder.model_dim(),
            self.static_dim,
            self.n_classes,
            &mut store,
            &mut rng,
        )?;
        Ok(store)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParameterStore,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = config.init_params(seed)?;
        Ok(Self { config, params })
    }

    /// Wraps existing parameters after checking they fit the config.
    pub fn from_parts(config: ModelConfig, params: ParameterStore) -> Result<Self> {
        let expected = config.init_params(0)?;
        if !expected.same_layout(&params) {
            return Err(Error::Shape(
                "parameters do not match the model configuration".into(),
            ));
        }
        Ok(Self { config, params })
    }

    fn check(&self, obs: &Observation) -> Result<()> {
        validate_observation(obs, &self.config.meta()).map_err(|v| Error::InvalidObservation {
            id: obs.id.clone(),
            violations: v
                .iter()
                .map(ToString::to_string)
                .collect::<Vec<_>>()
                .join("; "),
        })
    }

    /// Records the full forward pass on `g`; returns the `1 x C` logits.
    pub fn record(config: &ModelConfig, g: &mut Graph<'_>, obs: &Observation) -> Result<NodeId> {
        let index = NeighborIndex::build(obs);
        let encoder = Encoder::new(&config.encoder, config.n_variates, g.params());
        let features = encoder.forward(g, obs, &index)?;
        head::forward(
            g,
            features,
            &index,
            config.encoder.heads,
            obs.static_features.as_deref(),
        )
    }

    pub fn predict(&self, obs: &Observation) -> Result<ClassifierOutput> {
        self.check(obs)?;
        let mut g = Graph::new(&self.params);
        let logits = Self::record(&self.config, &mut g, obs)?;
        ClassifierOutput::new(g.value(logits).data().to_vec())
    }

    /// Same prediction through the per-point reference route.
    pub fn predict_reference(&self, obs: &Observation) -> Result<ClassifierOutput> {
        self.check(obs)?;
        let index = NeighborIndex::build(obs);
        let encoder = Encoder::new(&self.config.encoder, self.config.n_variates, &self.params);
        let features = encoder.encode_observation(obs, &index)?;
        let params = HeadParams::load(&self.params, self.config.encoder.heads)?;
        head::readout(&params, &features, &index, obs.static_features.as_deref())
    }

    pub fn predict_all(
        &self,
        observations: &[Observation],
        exec: Execution,
    ) -> Result<Vec<ClassifierOutput>> {
        exec.map(observations, |o| self.predict(o))
            .into_iter()
            .collect()
    }

    /// Cross-entropy of one observation and its gradient.
    pub fn loss_and_grad(&self, obs: &Observation) -> Result<(f64, GradientMap)> {
        self.check(obs)?;
        let mut g = Graph::new(&self.params);
        let logits = Self::record(&self.config, &mut g, obs)?;
        let loss = g.cross_entropy(logits, &[obs.label]);
        let value = g.value(loss).item();
        if !value.is_finite() {
            return Err(Error::NonFinite(format!(
                "loss of observation `{}`",
                obs.id
            )));
        }
        Ok((value, g.backward(loss)?))
    }

    pub fn observation_loss(&self, obs: &Observation) -> Result<f64> {
        self.check(obs)?;
        let mut g = Graph::new(&self.params);
        let logits = Self::record(&self.config, &mut g, obs)?;
        let loss = g.cross_entropy(logits, &[obs.label]);
        Ok(g.value(loss).item())
    }

    /// Mean loss over the batch and the gradient of that mean. Per-item
    /// gradients are summed in batch order whatever the execution mode.
    pub fn batch_loss_and_grad(
        &self,
        batch: &[&Observation],
        exec: Execution,
    ) -> Result<(f64, GradientMap)> {
        if batch.is_empty() {
            return Err(Error::Shape("empty batch".into()));
        }
        let mut total = GradientMap::zeros_like(&self.params);
        let mut loss = 0.0;
        for chunk in batch.chunks(REDUCE_CHUNK) {
            for item in exec.map(chunk, |o| self.loss_and_grad(o)) {
                let (l, g) = item?;
                loss += l;
                total.add_scaled(&g, 1.0);
            }
        }
        let inv = 1.0 / batch.len() as f64;
        total.scale(inv);
        Ok((loss * inv, total))
    }

    pub fn batch_loss(&self, batch: &[&Observation], exec: Execution) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::Shape("empty batch".into()));
        }
        let losses = exec.map(batch, |o| self.observation_loss(o));
        let mut sum = 0.0;
        for l in losses {
            sum += l?;
        }
        Ok(sum / batch.len() as f64)
    }
}
