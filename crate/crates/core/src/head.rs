//! Observation-level readout.
//!
//! Per nonempty variate, the final sample features are averaged and that
//! mean queries an attention pool over the same features. The pooled
//! vectors are averaged over variates, optionally joined with a linear
//! projection of the static vector, and fed to an MLP classifier.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::encoder::SampleFeatureMap;
use crate::error::{Error, Result};
use crate::neighbors::NeighborIndex;
use crate::nn::ops::{self, AttentionParams, Dense, Mlp};
use crate::nn::{Graph, NodeId, ParameterStore, Tensor};

pub const POOL: &str = "head.pool";
pub const STATIC: &str = "head.static";
pub const CLASSIFIER: &str = "head.classifier";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadConfig {
    /// Output width of the static projection (unused without statics).
    pub static_proj_dim: usize,
    pub classifier_hidden: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            static_proj_dim: 64,
            classifier_hidden: 256,
        }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.static_proj_dim == 0 || self.classifier_hidden == 0 {
            return Err(Error::Config("head widths must be positive".into()));
        }
        Ok(())
    }

    pub fn classifier_input(&self, model_dim: usize, static_dim: usize) -> usize {
        if static_dim > 0 {
            model_dim + self.static_proj_dim
        } else {
            model_dim
        }
    }

    pub fn init_params<R: rand::Rng + ?Sized>(
        &self,
        model_dim: usize,
        static_dim: usize,
        n_classes: usize,
        store: &mut ParameterStore,
        rng: &mut R,
    ) -> Result<()> {
        self.validate()?;
        for proj in ["q", "k", "v", "o"] {
            store.init_dense(&format!("{POOL}.{proj}"), model_dim, model_dim, rng)?;
        }
        if static_dim > 0 {
            store.init_dense(STATIC, static_dim, self.static_proj_dim, rng)?;
        }
        let input = self.classifier_input(model_dim, static_dim);
        let hidden = self.classifier_hidden;
        store.init_dense(&format!("{CLASSIFIER}.l1"), input, hidden, rng)?;
        store.init_dense(&format!("{CLASSIFIER}.l2"), hidden, hidden, rng)?;
        store.init_dense(&format!("{CLASSIFIER}.l3"), hidden, n_classes, rng)
    }
}

#[derive(Clone, Debug)]
pub struct HeadParams {
    pub pool: AttentionParams,
    pub static_proj: Option<Dense>,
    pub classifier: Mlp,
}

impl HeadParams {
    pub fn load(store: &ParameterStore, heads: usize) -> Result<Self> {
        let static_proj = match store.get(&format!("{STATIC}.weight")) {
            Some(_) => Some(Dense::from_store(store, STATIC)?),
            None => None,
        };
        Ok(Self {
            pool: AttentionParams::from_store(store, POOL, heads)?,
            static_proj,
            classifier: Mlp::from_store(store, CLASSIFIER)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierOutput {
    pub logits: Vec<f64>,
    pub predicted: usize,
}

impl ClassifierOutput {
    pub fn new(logits: Vec<f64>) -> Result<Self> {
        if logits.is_empty() || logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("classifier logits".into()));
        }
        let predicted = argmax(&logits);
        Ok(Self { logits, predicted })
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub fn variate_mean(features: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = features
        .first()
        .ok_or_else(|| Error::Shape("mean of an empty variate".into()))?;
    let mut out = vec![0.0; first.len()];
    for f in features {
        if f.len() != out.len() {
            return Err(Error::Shape("ragged feature widths".into()));
        }
        for (o, v) in out.iter_mut().zip(f) {
            *o += v;
        }
    }
    let inv = 1.0 / features.len() as f64;
    out.iter_mut().for_each(|o| *o *= inv);
    Ok(out)
}

/// Attention of the variate mean over the variate's own features.
pub fn variate_attention_pool(
    mean: &[f64],
    features: &[Vec<f64>],
    params: &AttentionParams,
) -> Result<Vec<f64>> {
    ops::multi_head_attention(mean, features, features, params)
}

/// Mean of the pooled vectors of nonempty variates (`None` marks empty).
pub fn observation_feature(pooled: &[Option<Vec<f64>>]) -> Result<Vec<f64>> {
    let present: Vec<Vec<f64>> = pooled.iter().flatten().cloned().collect();
    if present.is_empty() {
        return Err(Error::Shape("every variate is empty".into()));
    }
    variate_mean(&present)
}

pub fn embed_static(static_features: &[f64], proj: &Dense) -> Result<Vec<f64>> {
    proj.forward(static_features)
}

pub fn classify(input: &[f64], mlp: &Mlp) -> Result<ClassifierOutput> {
    ClassifierOutput::new(ops::mlp_forward(input, mlp)?)
}

fn check_static(params_have_static: bool, static_features: Option<&[f64]>) -> Result<()> {
    match (params_have_static, static_features) {
        (true, None) => Err(Error::DatasetMismatch(
            "model expects a static vector".into(),
        )),
        (false, Some(s)) if !s.is_empty() => Err(Error::DatasetMismatch(
            "static vector given to a model without static projection".into(),
        )),
        _ => Ok(()),
    }
}

/// Readout evaluated variate by variate from a feature map.
pub fn readout(
    params: &HeadParams,
    features: &SampleFeatureMap,
    index: &NeighborIndex,
    static_features: Option<&[f64]>,
) -> Result<ClassifierOutput> {
    check_static(params.static_proj.is_some(), static_features)?;
    let pooled = (0..index.n_variates())
        .map(|v| {
            let rows: Vec<Vec<f64>> = index
                .variate_range(v)
                .map(|id| features.features.row(id).to_vec())
                .collect();
            if rows.is_empty() {
                return Ok(None);
            }
            let mean = variate_mean(&rows)?;
            variate_attention_pool(&mean, &rows, &params.pool).map(Some)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut input = observation_feature(&pooled)?;
    if let (Some(proj), Some(s)) = (&params.static_proj, static_features) {
        input.extend(embed_static(s, proj)?);
    }
    classify(&input, &params.classifier)
}

/// Records the readout on `g`, consuming the encoder output node (one row
/// per point in the index's global order). Returns a `1 x C` logits node.
pub fn forward(
    g: &mut Graph<'_>,
    features: NodeId,
    index: &NeighborIndex,
    heads: usize,
    static_features: Option<&[f64]>,
) -> Result<NodeId> {
    let has_static = g.params().get(&format!("{STATIC}.weight")).is_some();
    check_static(has_static, static_features)?;
    let segments: Vec<_> = (0..index.n_variates())
        .map(|v| index.variate_range(v))
        .filter(|r| !r.is_empty())
        .collect();
    if segments.is_empty() {
        return Err(Error::Shape("every variate is empty".into()));
    }
    let means = g.segment_mean(features, &segments);
    let lists = Arc::new(segments.iter().map(|r| r.clone().collect()).collect());
    let pooled = g.multi_head_attention(means, features, POOL, heads, lists)?;
    let mut input = g.mean_rows(pooled);
    if let (true, Some(s)) = (has_static, static_features) {
        let x = g.constant(Tensor::matrix(1, s.len(), s.to_vec()));
        let projected = g.dense(x, STATIC)?;
        input = g.concat_cols(&[input, projected]);
    }
    g.mlp(input, CLASSIFIER)
}
