//! The variate-time attention encoder.
//!
//! Each sample `(variate i, time t, measurement m)` becomes
//! `h = v_i ⊕ Linear(MLP_i(m) ⊕ u(t))`, where `u` is a sinusoidal time code
//! and `v_i` a trainable variate code. A stack of layers then applies
//!
//! ```text
//! t = LayerNorm1(h + MHA_intra(h, same-variate points))
//! s = LayerNorm2(t + MHA_inter(t, temporally close points of other variates))
//! ```
//!
//! with every point of a layer reading the same input snapshot.
//!
//! Two routes compute the same thing: [`Encoder::encode_observation`]
//! assembles the per-point steps from the vector-level reference ops, and
//! [`Encoder::forward`] records the whole observation as batched matrix
//! operations on a [`Graph`] for training.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::data::{Observation, VariateTimePoint};
use crate::error::{Error, Result};
use crate::neighbors::{NeighborIndex, NeighborQuery};
use crate::nn::ops::{self, AttentionParams, Mlp};
use crate::nn::{Dense, Graph, NodeId, ParameterStore, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    /// Width of the sinusoidal time code (even).
    pub time_dim: usize,
    pub variate_dim: usize,
    /// Output width of the aggregation linear layer.
    pub linear_dim: usize,
    /// Width of the measurement embedding.
    pub embed_dim: usize,
    /// Hidden width of the per-variate measurement MLPs.
    pub mlp_hidden: usize,
    pub heads: usize,
    pub layers: usize,
    pub neighbors: NeighborQuery,
    /// Replace every time code by zeros (ablation).
    #[serde(default)]
    pub zero_time_code: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            time_dim: 256,
            variate_dim: 32,
            linear_dim: 224,
            embed_dim: 256,
            mlp_hidden: 256,
            heads: 8,
            layers: 4,
            neighbors: NeighborQuery::Knn(30),
            zero_time_code: false,
        }
    }
}

impl EncoderConfig {
    pub fn model_dim(&self) -> usize {
        self.variate_dim + self.linear_dim
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.time_dim == 0 || !self.time_dim.is_multiple_of(2) {
            return fail(format!(
                "time_dim must be even and positive, got {}",
                self.time_dim
            ));
        }
        if self.variate_dim == 0
            || self.linear_dim == 0
            || self.embed_dim == 0
            || self.mlp_hidden == 0
        {
            return fail("encoder widths must be positive".into());
        }
        if self.heads == 0 || !self.model_dim().is_multiple_of(self.heads) {
            return fail(format!(
                "{} heads do not divide model width {}",
                self.heads,
                self.model_dim()
            ));
        }
        if self.layers == 0 {
            return fail("at least one layer is required".into());
        }
        self.neighbors.validate()
    }

    /// Registers every encoder parameter for `n_variates` variates.
    pub fn init_params<R: rand::Rng + ?Sized>(
        &self,
        n_variates: usize,
        store: &mut ParameterStore,
        rng: &mut R,
    ) -> Result<()> {
        self.validate()?;
        let d = self.model_dim();
        for v in 0..n_variates {
            let prefix = measurement_prefix(v);
            store.init_dense(&format!("{prefix}.l1"), 1, self.mlp_hidden, rng)?;
            store.init_dense(
                &format!("{prefix}.l2"),
                self.mlp_hidden,
                self.mlp_hidden,
                rng,
            )?;
            store.init_dense(
                &format!("{prefix}.l3"),
                self.mlp_hidden,
                self.embed_dim,
                rng,
            )?;
        }
        // one row per variate; a lookup is a one-hot product, so fan-in is N
        let bound = 1.0 / (n_variates.max(1) as f64).sqrt();
        let codes = (0..n_variates * self.variate_dim)
            .map(|_| rng.random_range(-bound..=bound))
            .collect();
        store.insert(
            VARIATE_CODES,
            Tensor::matrix(n_variates, self.variate_dim, codes),
        )?;
        store.init_dense(
            AGGREGATE,
            self.embed_dim + self.time_dim,
            self.linear_dim,
            rng,
        )?;
        for layer in 0..self.layers {
            for block in ["intra", "inter"] {
                for proj in ["q", "k", "v", "o"] {
                    store.init_dense(
                        &format!("{}.{block}.{proj}", layer_prefix(layer)),
                        d,
                        d,
                        rng,
                    )?;
                }
            }
            for norm in ["norm1", "norm2"] {
                store.init_constant(format!("{}.{norm}.gain", layer_prefix(layer)), d, 1.0)?;
                store.init_constant(format!("{}.{norm}.bias", layer_prefix(layer)), d, 0.0)?;
            }
        }
        Ok(())
    }
}

pub const VARIATE_CODES: &str = "encoder.variate_codes";
pub const AGGREGATE: &str = "encoder.aggregate";

pub fn measurement_prefix(variate: usize) -> String {
    format!("encoder.measurement.{variate}")
}

pub fn layer_prefix(layer: usize) -> String {
    format!("encoder.layer.{layer}")
}

/// Sinusoidal code of a continuous timestamp: element `2k` is
/// `sin(t / 10000^(2k/dim))`, element `2k+1` the matching cosine.
pub fn encode_time(t: f64, dim: usize) -> Result<Vec<f64>> {
    if !dim.is_multiple_of(2) {
        return Err(Error::Config(format!("time code width {dim} is odd")));
    }
    let mut code = vec![0.0; dim];
    write_time_code(t, &mut code);
    Ok(code)
}

fn write_time_code(t: f64, out: &mut [f64]) {
    let dim = out.len() as f64;
    for (k, pair) in out.chunks_exact_mut(2).enumerate() {
        let angle = t / 10000f64.powf(2.0 * k as f64 / dim);
        pair[0] = angle.sin();
        pair[1] = angle.cos();
    }
}

/// Which step produced a feature map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Aggregated,
    Intra,
    Inter,
}

/// One feature row per variate-time point, in the index's global order.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleFeatureMap {
    pub stage: Stage,
    pub features: Tensor,
    /// `rows[variate][sample]` locates a point's row.
    rows: Vec<Vec<usize>>,
}

impl SampleFeatureMap {
    fn new(stage: Stage, features: Tensor, index: &NeighborIndex) -> Self {
        let mut rows: Vec<Vec<usize>> = (0..index.n_variates())
            .map(|v| vec![0; index.variate_len(v)])
            .collect();
        for (id, p) in index.points().enumerate() {
            rows[p.variate][p.sample] = id;
        }
        Self {
            stage,
            features,
            rows,
        }
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, p: &VariateTimePoint) -> &[f64] {
        self.features.row(self.rows[p.variate][p.sample])
    }

    fn gather(&self, points: &[VariateTimePoint]) -> Vec<Vec<f64>> {
        points.iter().map(|p| self.get(p).to_vec()).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.features.is_finite()
    }
}

/// Parameters of one stacked layer, read out of the store.
#[derive(Clone, Debug)]
pub struct LayerParams {
    pub intra: AttentionParams,
    pub norm1: (Vec<f64>, Vec<f64>),
    pub inter: AttentionParams,
    pub norm2: (Vec<f64>, Vec<f64>),
}

impl LayerParams {
    pub fn load(store: &ParameterStore, layer: usize, heads: usize) -> Result<Self> {
        let prefix = layer_prefix(layer);
        let norm = |name: &str| -> Result<(Vec<f64>, Vec<f64>)> {
            Ok((
                store
                    .expect(&format!("{prefix}.{name}.gain"))?
                    .data()
                    .to_vec(),
                store
                    .expect(&format!("{prefix}.{name}.bias"))?
                    .data()
                    .to_vec(),
            ))
        };
        Ok(Self {
            intra: AttentionParams::from_store(store, &format!("{prefix}.intra"), heads)?,
            norm1: norm("norm1")?,
            inter: AttentionParams::from_store(store, &format!("{prefix}.inter"), heads)?,
            norm2: norm("norm2")?,
        })
    }
}

fn residual_norm(x: &[f64], delta: &[f64], norm: &(Vec<f64>, Vec<f64>)) -> Result<Vec<f64>> {
    let sum: Vec<f64> = x.iter().zip(delta).map(|(a, b)| a + b).collect();
    ops::layer_norm(&sum, &norm.0, &norm.1)
}

/// Encoder bound to a configuration and a parameter store.
#[derive(Clone, Copy, Debug)]
pub struct Encoder<'a> {
    pub config: &'a EncoderConfig,
    pub n_variates: usize,
    pub params: &'a ParameterStore,
}

impl<'a> Encoder<'a> {
    pub fn new(config: &'a EncoderConfig, n_variates: usize, params: &'a ParameterStore) -> Self {
        Self {
            config,
            n_variates,
            params,
        }
    }

    fn check_variate(&self, variate: usize) -> Result<()> {
        if variate >= self.n_variates {
            return Err(Error::OutOfRange(format!(
                "variate {variate} with {} variates",
                self.n_variates
            )));
        }
        Ok(())
    }

    /// Measurement embedding through the variate's own MLP.
    pub fn encode_measurement(&self, variate: usize, value: f64) -> Result<Vec<f64>> {
        self.check_variate(variate)?;
        let mlp = Mlp::from_store(self.params, &measurement_prefix(variate))?;
        ops::mlp_forward(&[value], &mlp)
    }

    pub fn encode_variate(&self, variate: usize) -> Result<Vec<f64>> {
        self.check_variate(variate)?;
        Ok(self.params.expect(VARIATE_CODES)?.row(variate).to_vec())
    }

    /// Time code as consumed by the model (zeros under the ablation).
    pub fn time_code(&self, t: f64) -> Result<Vec<f64>> {
        let mut u = encode_time(t, self.config.time_dim)?;
        if self.config.zero_time_code {
            u.fill(0.0);
        }
        Ok(u)
    }

    /// `h = v ⊕ Linear(e ⊕ u)`
    pub fn aggregate(&self, e: &[f64], u: &[f64], v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.config.variate_dim {
            return Err(Error::Shape(format!(
                "variate code of width {} (expected {})",
                v.len(),
                self.config.variate_dim
            )));
        }
        let linear = Dense::from_store(self.params, AGGREGATE)?;
        let mut h = v.to_vec();
        h.extend(linear.forward(&[e, u].concat())?);
        Ok(h)
    }

    fn initial_features(
        &self,
        obs: &Observation,
        index: &NeighborIndex,
    ) -> Result<SampleFeatureMap> {
        let rows = index
            .points()
            .map(|p| {
                let m = obs.variates[p.variate].samples[p.sample].value;
                let e = self.encode_measurement(p.variate, m)?;
                let u = self.time_code(p.timestamp)?;
                let v = self.encode_variate(p.variate)?;
                self.aggregate(&e, &u, &v)
            })
            .collect::<Result<Vec<_>>>()?;
        let features = Tensor::matrix(rows.len(), self.config.model_dim(), rows.concat());
        Ok(SampleFeatureMap::new(Stage::Aggregated, features, index))
    }

    /// `t_p = LN1(h_p + MHA_intra(h_p, H, H))` over the point's own variate.
    pub fn intra_attention_step(
        &self,
        p: &VariateTimePoint,
        features: &SampleFeatureMap,
        index: &NeighborIndex,
        layer: &LayerParams,
    ) -> Result<Vec<f64>> {
        let set = features.gather(&index.intra_neighbors(p)?);
        let h = features.get(p);
        let raw = ops::multi_head_attention(h, &set, &set, &layer.intra)?;
        residual_norm(h, &raw, &layer.norm1)
    }

    /// `s_p = LN2(t_p + MHA_inter(t_p, T, T))`; an empty neighbor set falls
    /// back to the point itself.
    pub fn inter_attention_step(
        &self,
        p: &VariateTimePoint,
        features: &SampleFeatureMap,
        index: &NeighborIndex,
        layer: &LayerParams,
    ) -> Result<Vec<f64>> {
        let mut neighbors = index.inter(p, self.config.neighbors)?;
        if neighbors.is_empty() {
            neighbors.push(*p);
        }
        let set = features.gather(&neighbors);
        let t = features.get(p);
        let raw = ops::multi_head_attention(t, &set, &set, &layer.inter)?;
        residual_norm(t, &raw, &layer.norm2)
    }

    fn check_observation(&self, obs: &Observation, index: &NeighborIndex) -> Result<()> {
        if obs.n_variates() != self.n_variates || index.n_variates() != self.n_variates {
            return Err(Error::DatasetMismatch(format!(
                "observation `{}` has {} variates, encoder expects {}",
                obs.id,
                obs.n_variates(),
                self.n_variates
            )));
        }
        if index.is_empty() {
            return Err(Error::InvalidObservation {
                id: obs.id.clone(),
                violations: "no samples".into(),
            });
        }
        Ok(())
    }

    /// Final-layer features of every point, evaluated point by point.
    pub fn encode_observation(
        &self,
        obs: &Observation,
        index: &NeighborIndex,
    ) -> Result<SampleFeatureMap> {
        self.check_observation(obs, index)?;
        let mut h = self.initial_features(obs, index)?;
        let d = self.config.model_dim();
        for layer in 0..self.config.layers {
            let lp = LayerParams::load(self.params, layer, self.config.heads)?;
            let points: Vec<VariateTimePoint> = index.points().collect();
            let t_rows = points
                .iter()
                .map(|p| self.intra_attention_step(p, &h, index, &lp))
                .collect::<Result<Vec<_>>>()?;
            let t = SampleFeatureMap::new(
                Stage::Intra,
                Tensor::matrix(points.len(), d, t_rows.concat()),
                index,
            );
            let s_rows = points
                .iter()
                .map(|p| self.inter_attention_step(p, &t, index, &lp))
                .collect::<Result<Vec<_>>>()?;
            h = SampleFeatureMap::new(
                Stage::Inter,
                Tensor::matrix(points.len(), d, s_rows.concat()),
                index,
            );
        }
        Ok(h)
    }

    /// Records the encoder on `g`; the returned node holds one row per point
    /// in the index's global order.
    pub fn forward(
        &self,
        g: &mut Graph<'_>,
        obs: &Observation,
        index: &NeighborIndex,
    ) -> Result<NodeId> {
        self.check_observation(obs, index)?;
        let cfg = self.config;
        let points: Vec<VariateTimePoint> = index.points().collect();

        let mut embeddings = Vec::new();
        for v in 0..self.n_variates {
            let range = index.variate_range(v);
            if range.is_empty() {
                continue;
            }
            let values: Vec<f64> = points[range]
                .iter()
                .map(|p| obs.variates[v].samples[p.sample].value)
                .collect();
            let x = g.constant(Tensor::matrix(values.len(), 1, values));
            embeddings.push(g.mlp(x, &measurement_prefix(v))?);
        }
        let e = g.concat_rows(&embeddings);

        let mut codes = vec![0.0; points.len() * cfg.time_dim];
        if !cfg.zero_time_code {
            for (p, out) in points.iter().zip(codes.chunks_exact_mut(cfg.time_dim)) {
                write_time_code(p.timestamp, out);
            }
        }
        let u = g.constant(Tensor::matrix(points.len(), cfg.time_dim, codes));

        let dictionary = g.param(VARIATE_CODES)?;
        let ids: Vec<usize> = points.iter().map(|p| p.variate).collect();
        let v = g.gather_rows(dictionary, &ids);
        let eu = g.concat_cols(&[e, u]);
        let linear = g.dense(eu, AGGREGATE)?;
        let mut h = g.concat_cols(&[v, linear]);

        let intra = Arc::new(index.intra_id_lists());
        let mut inter_lists = index.inter_id_lists(cfg.neighbors);
        for (id, list) in inter_lists.iter_mut().enumerate() {
            if list.is_empty() {
                list.push(id);
            }
        }
        let inter = Arc::new(inter_lists);

        for layer in 0..cfg.layers {
            let prefix = layer_prefix(layer);
            let raw = g.multi_head_attention(
                h,
                h,
                &format!("{prefix}.intra"),
                cfg.heads,
                Arc::clone(&intra),
            )?;
            let res = g.add(h, raw);
            let t = g.layer_norm_named(res, &format!("{prefix}.norm1"))?;
            let raw = g.multi_head_attention(
                t,
                t,
                &format!("{prefix}.inter"),
                cfg.heads,
                Arc::clone(&inter),
            )?;
            let res = g.add(t, raw);
            h = g.layer_norm_named(res, &format!("{prefix}.norm2"))?;
        }
        Ok(h)
    }

    /// Batched route packaged as a feature map.
    pub fn encode_batched(
        &self,
        obs: &Observation,
        index: &NeighborIndex,
    ) -> Result<SampleFeatureMap> {
        let mut g = Graph::new(self.params);
        let out = self.forward(&mut g, obs, index)?;
        Ok(SampleFeatureMap::new(
            Stage::Inter,
            g.value(out).clone(),
            index,
        ))
    }
}
