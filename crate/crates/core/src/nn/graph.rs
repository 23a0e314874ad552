//! Reverse-mode differentiation over a tape of matrix operations.
//!
//! Every node holds a 2-D value (rows x cols; vectors are single rows).
//! Operations are coarse: a dense layer, a fused multi-head attention core
//! over per-query neighbor lists, row-wise layer norm, and so on, each with
//! a hand-written backward. Reductions run in a fixed order, so a forward
//! and backward pass is bit-reproducible.
//!
//! Shape mismatches in graph construction are programming errors and
//! panic; the vector-level functions in [`super::ops`] return `Result`.

use std::collections::HashMap;
use std::ops::Range;
use std::sync::Arc;

use super::ops::{shifted_log_sum_exp, LAYER_NORM_EPS};
use super::params::{GradientMap, ParameterStore};
use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

enum Op {
    Constant,
    Param(usize),
    Linear {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
    },
    Relu(NodeId),
    Add(NodeId, NodeId),
    Scale(NodeId, f64),
    ConcatCols(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
    GatherRows {
        x: NodeId,
        rows: Vec<usize>,
    },
    SegmentMean {
        x: NodeId,
        segments: Vec<Range<usize>>,
    },
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        neighbors: Arc<Vec<Vec<usize>>>,
        /// Softmax weights laid out per query, then head, then neighbor.
        weights: Vec<f64>,
    },
    CrossEntropy {
        logits: NodeId,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    Sum(NodeId),
}

struct Node {
    /// `None` for parameters, which are read from the store.
    value: Option<Tensor>,
    op: Op,
}

pub struct Graph<'p> {
    params: &'p ParameterStore,
    nodes: Vec<Node>,
    param_nodes: HashMap<usize, NodeId>,
}

fn as_matrix(t: Tensor) -> Tensor {
    let (r, c) = (t.rows(), t.cols());
    Tensor::matrix(r, c, t.into_data())
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParameterStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
        }
    }

    pub fn params(&self) -> &'p ParameterStore {
        self.params
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node {
            value: Some(value),
            op,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        let node = &self.nodes[id.0];
        match (&node.value, &node.op) {
            (Some(v), _) => v,
            (None, Op::Param(i)) => self.params.tensor_at(*i),
            _ => unreachable!("non-parameter node without value"),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(as_matrix(value), Op::Constant)
    }

    pub fn param(&mut self, name: &str) -> Result<NodeId> {
        let index = self
            .params
            .index_of(name)
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))?;
        Ok(*self.param_nodes.entry(index).or_insert_with(|| {
            self.nodes.push(Node {
                value: None,
                op: Op::Param(index),
            });
            NodeId(self.nodes.len() - 1)
        }))
    }

    /// `x W^T + b` with `x: n x in`, `W: out x in`, `b: out`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> NodeId {
        let (xv, wv) = (self.value(x), self.value(w));
        let (n, d_in, d_out) = (xv.rows(), xv.cols(), wv.rows());
        assert_eq!(
            wv.cols(),
            d_in,
            "linear: weight {:?} vs input width {d_in}",
            wv.shape()
        );
        let mut out = vec![0.0; n * d_out];
        if let Some(b) = b {
            let bv = self.value(b);
            assert_eq!(bv.len(), d_out, "linear: bias length");
            for row in out.chunks_mut(d_out) {
                row.copy_from_slice(bv.data());
            }
        }
        gemm(
            n,
            d_in,
            d_out,
            1.0,
            xv.data(),
            (d_in as isize, 1),
            wv.data(),
            (1, d_in as isize),
            1.0,
            &mut out,
            d_out,
        );
        self.push(Tensor::matrix(n, d_out, out), Op::Linear { x, w, b })
    }

    /// Dense layer reading `prefix.weight` and `prefix.bias`.
    pub fn dense(&mut self, x: NodeId, prefix: &str) -> Result<NodeId> {
        let w = self.param(&format!("{prefix}.weight"))?;
        let b = self.param(&format!("{prefix}.bias"))?;
        Ok(self.linear(x, w, Some(b)))
    }

    /// Three dense layers (`prefix.l1..l3`) with ReLU between them.
    pub fn mlp(&mut self, x: NodeId, prefix: &str) -> Result<NodeId> {
        let h = self.dense(x, &format!("{prefix}.l1"))?;
        let h = self.relu(h);
        let h = self.dense(h, &format!("{prefix}.l2"))?;
        let h = self.relu(h);
        self.dense(h, &format!("{prefix}.l3"))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let data = xv.data().iter().map(|v| v.max(0.0)).collect();
        let t = Tensor::matrix(xv.rows(), xv.cols(), data);
        self.push(t, Op::Relu(x))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.len(), bv.len(), "add: operand sizes");
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(x, y)| x + y)
            .collect();
        let t = Tensor::matrix(av.rows(), av.cols(), data);
        self.push(t, Op::Add(a, b))
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> NodeId {
        let xv = self.value(x);
        let data = xv.data().iter().map(|v| v * factor).collect();
        let t = Tensor::matrix(xv.rows(), xv.cols(), data);
        self.push(t, Op::Scale(x, factor))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        let rows = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                let v = self.value(p);
                assert_eq!(v.rows(), rows, "concat_cols: row counts");
                data.extend_from_slice(v.row(r));
            }
        }
        self.push(
            Tensor::matrix(rows, total, data),
            Op::ConcatCols(parts.to_vec()),
        )
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.cols(), cols, "concat_rows: widths");
            data.extend_from_slice(v.data());
            rows += v.rows();
        }
        self.push(
            Tensor::matrix(rows, cols, data),
            Op::ConcatRows(parts.to_vec()),
        )
    }

    pub fn gather_rows(&mut self, x: NodeId, rows: &[usize]) -> NodeId {
        let xv = self.value(x);
        let mut data = Vec::with_capacity(rows.len() * xv.cols());
        for &r in rows {
            data.extend_from_slice(xv.row(r));
        }
        let t = Tensor::matrix(rows.len(), xv.cols(), data);
        self.push(
            t,
            Op::GatherRows {
                x,
                rows: rows.to_vec(),
            },
        )
    }

    /// One output row per segment: the mean of the rows in that range.
    pub fn segment_mean(&mut self, x: NodeId, segments: &[Range<usize>]) -> NodeId {
        let xv = self.value(x);
        let cols = xv.cols();
        let mut data = vec![0.0; segments.len() * cols];
        for (s, range) in segments.iter().enumerate() {
            assert!(!range.is_empty(), "segment_mean: empty segment");
            let out = &mut data[s * cols..(s + 1) * cols];
            for r in range.clone() {
                for (o, v) in out.iter_mut().zip(xv.row(r)) {
                    *o += v;
                }
            }
            let inv = 1.0 / range.len() as f64;
            for o in out.iter_mut() {
                *o *= inv;
            }
        }
        let t = Tensor::matrix(segments.len(), cols, data);
        self.push(
            t,
            Op::SegmentMean {
                x,
                segments: segments.to_vec(),
            },
        )
    }

    pub fn mean_rows(&mut self, x: NodeId) -> NodeId {
        let rows = self.value(x).rows();
        self.segment_mean(x, std::slice::from_ref(&(0..rows)))
    }

    /// Row-wise layer normalization with population variance.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> NodeId {
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let (rows, cols) = (xv.rows(), xv.cols());
        assert!(
            gv.len() == cols && bv.len() == cols,
            "layer_norm: gain/bias width"
        );
        let mut normalized = vec![0.0; rows * cols];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = inv;
            for c in 0..cols {
                let n = (row[c] - mean) * inv;
                normalized[r * cols + c] = n;
                out[r * cols + c] = gv.data()[c] * n + bv.data()[c];
            }
        }
        self.push(
            Tensor::matrix(rows, cols, out),
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            },
        )
    }

    /// Layer norm reading `prefix.gain` and `prefix.bias`.
    pub fn layer_norm_named(&mut self, x: NodeId, prefix: &str) -> Result<NodeId> {
        let g = self.param(&format!("{prefix}.gain"))?;
        let b = self.param(&format!("{prefix}.bias"))?;
        Ok(self.layer_norm(x, g, b))
    }

    /// Scaled dot-product attention of already-projected inputs. Query row
    /// `i` attends over the key/value rows listed in `neighbors[i]`,
    /// separately for each of `heads` equal column slices.
    pub fn attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        neighbors: Arc<Vec<Vec<usize>>>,
    ) -> NodeId {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (n, d) = (qv.rows(), qv.cols());
        assert!(kv.cols() == d && vv.cols() == d, "attention: widths");
        assert_eq!(kv.rows(), vv.rows(), "attention: key/value counts");
        assert_eq!(neighbors.len(), n, "attention: one neighbor list per query");
        assert!(
            heads > 0 && d % heads == 0,
            "attention: heads must divide width"
        );
        let hd = d / heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let mut out = vec![0.0; n * d];
        let mut weights = Vec::with_capacity(neighbors.iter().map(Vec::len).sum::<usize>() * heads);
        let mut scores = Vec::new();
        for (i, list) in neighbors.iter().enumerate() {
            assert!(!list.is_empty(), "attention: query {i} has no keys");
            let qi = qv.row(i);
            for h in 0..heads {
                let cols = h * hd..(h + 1) * hd;
                scores.clear();
                let mut max = f64::NEG_INFINITY;
                for &j in list {
                    let s = qi[cols.clone()]
                        .iter()
                        .zip(&kv.row(j)[cols.clone()])
                        .map(|(a, b)| a * b)
                        .sum::<f64>()
                        * scale;
                    max = max.max(s);
                    scores.push(s);
                }
                let mut total = 0.0;
                for s in scores.iter_mut() {
                    *s = (*s - max).exp();
                    total += *s;
                }
                let oi = &mut out[i * d + cols.start..i * d + cols.end];
                for (s, &j) in scores.iter().zip(list) {
                    let w = s / total;
                    weights.push(w);
                    for (o, x) in oi.iter_mut().zip(&vv.row(j)[cols.clone()]) {
                        *o += w * x;
                    }
                }
            }
        }
        self.push(
            Tensor::matrix(n, d, out),
            Op::Attention {
                q,
                k,
                v,
                heads,
                neighbors,
                weights,
            },
        )
    }

    /// Multi-head attention with projections `prefix.{q,k,v,o}`. Queries
    /// come from the rows of `query_in`, keys and values from `kv_in`.
    pub fn multi_head_attention(
        &mut self,
        query_in: NodeId,
        kv_in: NodeId,
        prefix: &str,
        heads: usize,
        neighbors: Arc<Vec<Vec<usize>>>,
    ) -> Result<NodeId> {
        let q = self.dense(query_in, &format!("{prefix}.q"))?;
        let k = self.dense(kv_in, &format!("{prefix}.k"))?;
        let v = self.dense(kv_in, &format!("{prefix}.v"))?;
        let a = self.attention(q, k, v, heads, neighbors);
        self.dense(a, &format!("{prefix}.o"))
    }

    /// Mean over rows of `-log softmax(row)[label]`; a scalar node.
    pub fn cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> NodeId {
        let lv = self.value(logits);
        let (rows, classes) = (lv.rows(), lv.cols());
        assert_eq!(labels.len(), rows, "cross_entropy: one label per row");
        let mut probs = Vec::with_capacity(rows * classes);
        let mut loss = 0.0;
        for (r, &label) in labels.iter().enumerate() {
            assert!(label < classes, "cross_entropy: label {label} out of range");
            let row = lv.row(r);
            let (max, tail) = shifted_log_sum_exp(row);
            loss += (max - row[label]) + tail;
            let total: f64 = row.iter().map(|z| (z - max).exp()).sum();
            probs.extend(row.iter().map(|z| (z - max).exp() / total));
        }
        self.push(
            Tensor::scalar(loss / rows as f64),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        )
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let total = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(total), Op::Sum(x))
    }

    /// Gradients of the scalar node `loss` with respect to every parameter.
    pub fn backward(&self, loss: NodeId) -> Result<GradientMap> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::Shape(format!(
                "backward from non-scalar node of shape {:?}",
                lv.shape()
            )));
        }
        if !lv.is_finite() {
            return Err(Error::NonFinite("loss".into()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        let mut map = GradientMap::zeros_like(self.params);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop(i, &g, &mut grads, &mut map);
        }
        if let Some(name) = map.first_non_finite() {
            return Err(Error::NonFinite(format!("gradient of `{name}`")));
        }
        Ok(map)
    }

    fn grad_slot<'a>(&self, grads: &'a mut [Option<Tensor>], id: NodeId) -> &'a mut Tensor {
        let v = self.value(id);
        grads[id.0].get_or_insert_with(|| Tensor::matrix(v.rows(), v.cols(), vec![0.0; v.len()]))
    }

    fn backprop(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>], map: &mut GradientMap) {
        let gd = g.data();
        match &self.nodes[i].op {
            Op::Constant => {}
            Op::Param(index) => map.accumulate(*index, g),
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (n, d_in, d_out) = (xv.rows(), xv.cols(), wv.rows());
                gemm(
                    n,
                    d_out,
                    d_in,
                    1.0,
                    gd,
                    (d_out as isize, 1),
                    wv.data(),
                    (d_in as isize, 1),
                    1.0,
                    self.grad_slot(grads, *x).data_mut(),
                    d_in,
                );
                gemm(
                    d_out,
                    n,
                    d_in,
                    1.0,
                    gd,
                    (1, d_out as isize),
                    xv.data(),
                    (d_in as isize, 1),
                    1.0,
                    self.grad_slot(grads, *w).data_mut(),
                    d_in,
                );
                if let Some(b) = b {
                    let gb = self.grad_slot(grads, *b).data_mut();
                    for row in gd.chunks(d_out) {
                        for (a, v) in gb.iter_mut().zip(row) {
                            *a += v;
                        }
                    }
                }
            }
            Op::Relu(x) => {
                let out = self.nodes[i].value.as_ref().expect("relu value");
                let gx = self.grad_slot(grads, *x).data_mut();
                for ((a, v), y) in gx.iter_mut().zip(gd).zip(out.data()) {
                    if *y > 0.0 {
                        *a += v;
                    }
                }
            }
            Op::Add(a, b) => {
                for id in [a, b] {
                    let gx = self.grad_slot(grads, *id).data_mut();
                    for (s, v) in gx.iter_mut().zip(gd) {
                        *s += v;
                    }
                }
            }
            Op::Scale(x, factor) => {
                let gx = self.grad_slot(grads, *x).data_mut();
                for (s, v) in gx.iter_mut().zip(gd) {
                    *s += factor * v;
                }
            }
            Op::ConcatCols(parts) => {
                let total = g.cols();
                let mut offset = 0;
                for p in parts {
                    let w = self.value(*p).cols();
                    let gp = self.grad_slot(grads, *p);
                    for r in 0..gp.rows() {
                        let src = &gd[r * total + offset..r * total + offset + w];
                        for (s, v) in gp.row_mut(r).iter_mut().zip(src) {
                            *s += v;
                        }
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = self.value(*p).len();
                    let gp = self.grad_slot(grads, *p).data_mut();
                    for (s, v) in gp.iter_mut().zip(&gd[offset..offset + len]) {
                        *s += v;
                    }
                    offset += len;
                }
            }
            Op::GatherRows { x, rows } => {
                let gx = self.grad_slot(grads, *x);
                for (k, &r) in rows.iter().enumerate() {
                    for (s, v) in gx.row_mut(r).iter_mut().zip(g.row(k)) {
                        *s += v;
                    }
                }
            }
            Op::SegmentMean { x, segments } => {
                let gx = self.grad_slot(grads, *x);
                for (s, range) in segments.iter().enumerate() {
                    let inv = 1.0 / range.len() as f64;
                    for r in range.clone() {
                        for (a, v) in gx.row_mut(r).iter_mut().zip(g.row(s)) {
                            *a += inv * v;
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            } => {
                let gv = self.value(*gain).data().to_vec();
                let cols = gv.len();
                let rows = inv_std.len();
                {
                    let gg = self.grad_slot(grads, *gain).data_mut();
                    for r in 0..rows {
                        for c in 0..cols {
                            gg[c] += gd[r * cols + c] * normalized[r * cols + c];
                        }
                    }
                }
                {
                    let gb = self.grad_slot(grads, *bias).data_mut();
                    for r in 0..rows {
                        for c in 0..cols {
                            gb[c] += gd[r * cols + c];
                        }
                    }
                }
                let gx = self.grad_slot(grads, *x).data_mut();
                let mut dn = vec![0.0; cols];
                for r in 0..rows {
                    let nrow = &normalized[r * cols..(r + 1) * cols];
                    for c in 0..cols {
                        dn[c] = gd[r * cols + c] * gv[c];
                    }
                    let mean_dn = dn.iter().sum::<f64>() / cols as f64;
                    let mean_dn_n =
                        dn.iter().zip(nrow).map(|(a, b)| a * b).sum::<f64>() / cols as f64;
                    for c in 0..cols {
                        gx[r * cols + c] += inv_std[r] * (dn[c] - mean_dn - nrow[c] * mean_dn_n);
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                neighbors,
                weights,
            } => {
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let d = qv.cols();
                let hd = d / heads;
                let scale = 1.0 / (hd as f64).sqrt();
                let mut dq = vec![0.0; qv.len()];
                let mut dk = vec![0.0; kv.len()];
                let mut dv = vec![0.0; vv.len()];
                let mut dw = Vec::new();
                let mut w_at = 0;
                for (i, list) in neighbors.iter().enumerate() {
                    for h in 0..*heads {
                        let cols = h * hd..(h + 1) * hd;
                        let go = &gd[i * d + cols.start..i * d + cols.end];
                        let w = &weights[w_at..w_at + list.len()];
                        w_at += list.len();
                        dw.clear();
                        let mut dot = 0.0;
                        for (&j, &a) in list.iter().zip(w) {
                            let vj = &vv.row(j)[cols.clone()];
                            let da: f64 = go.iter().zip(vj).map(|(x, y)| x * y).sum();
                            dw.push(da);
                            dot += a * da;
                            let dvj = &mut dv[j * d + cols.start..j * d + cols.end];
                            for (s, x) in dvj.iter_mut().zip(go) {
                                *s += a * x;
                            }
                        }
                        let qi = &qv.row(i)[cols.clone()];
                        for ((&j, &a), &da) in list.iter().zip(w).zip(&dw) {
                            let ds = a * (da - dot) * scale;
                            let kj = &kv.row(j)[cols.clone()];
                            let dqi = &mut dq[i * d + cols.start..i * d + cols.end];
                            for (s, x) in dqi.iter_mut().zip(kj) {
                                *s += ds * x;
                            }
                            let dkj = &mut dk[j * d + cols.start..j * d + cols.end];
                            for (s, x) in dkj.iter_mut().zip(qi) {
                                *s += ds * x;
                            }
                        }
                    }
                }
                for (id, delta) in [(q, dq), (k, dk), (v, dv)] {
                    let slot = self.grad_slot(grads, *id).data_mut();
                    for (s, x) in slot.iter_mut().zip(&delta) {
                        *s += x;
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let upstream = gd[0] / labels.len() as f64;
                let gl = self.grad_slot(grads, *logits);
                let classes = gl.cols();
                for (r, &label) in labels.iter().enumerate() {
                    let row = gl.row_mut(r);
                    for c in 0..classes {
                        let target = if c == label { 1.0 } else { 0.0 };
                        row[c] += upstream * (probs[r * classes + c] - target);
                    }
                }
            }
            Op::Sum(x) => {
                let gx = self.grad_slot(grads, *x).data_mut();
                for s in gx.iter_mut() {
                    *s += gd[0];
                }
            }
        }
    }
}
