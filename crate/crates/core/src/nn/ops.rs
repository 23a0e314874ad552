//! Forward-only reference implementations over plain vectors.
//!
//! These follow the textbook formulas one vector at a time and are used
//! for per-point queries and to cross-check the batched tape.

use super::params::ParameterStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// `y = W x + b` for a weight of shape `out x in`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Dense {
    pub fn from_store(store: &ParameterStore, prefix: &str) -> Result<Self> {
        Ok(Self {
            weight: store.expect(&format!("{prefix}.weight"))?.clone(),
            bias: store.expect(&format!("{prefix}.bias"))?.clone(),
        })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.in_dim() || self.bias.len() != self.out_dim() {
            return Err(Error::Shape(format!(
                "dense {}x{} applied to input of length {}",
                self.out_dim(),
                self.in_dim(),
                x.len()
            )));
        }
        Ok((0..self.out_dim())
            .map(|o| {
                let w = self.weight.row(o);
                w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + self.bias.data()[o]
            })
            .collect())
    }
}

/// Three dense layers with ReLU between them and none on the output.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: [Dense; 3],
}

impl Mlp {
    /// Reads `prefix.l1`, `prefix.l2`, `prefix.l3`.
    pub fn from_store(store: &ParameterStore, prefix: &str) -> Result<Self> {
        Ok(Self {
            layers: [
                Dense::from_store(store, &format!("{prefix}.l1"))?,
                Dense::from_store(store, &format!("{prefix}.l2"))?,
                Dense::from_store(store, &format!("{prefix}.l3"))?,
            ],
        })
    }
}

pub fn relu(x: &[f64]) -> Vec<f64> {
    x.iter().map(|v| v.max(0.0)).collect()
}

pub fn mlp_forward(x: &[f64], mlp: &Mlp) -> Result<Vec<f64>> {
    let h1 = relu(&mlp.layers[0].forward(x)?);
    let h2 = relu(&mlp.layers[1].forward(&h1)?);
    mlp.layers[2].forward(&h2)
}

pub fn layer_norm(x: &[f64], gain: &[f64], bias: &[f64]) -> Result<Vec<f64>> {
    if gain.len() != x.len() || bias.len() != x.len() {
        return Err(Error::Shape(format!(
            "layer norm over {} values with gain {} / bias {}",
            x.len(),
            gain.len(),
            bias.len()
        )));
    }
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
    Ok(x.iter()
        .zip(gain.iter().zip(bias))
        .map(|(v, (g, b))| g * (v - mean) * inv + b)
        .collect())
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Returns `(max, ln sum exp(z - max))`. The second term is evaluated as
/// `ln_1p` of the non-maximal contributions, which keeps relative precision
/// when one entry dominates.
pub(crate) fn shifted_log_sum_exp(z: &[f64]) -> (f64, f64) {
    let (arg, max) = z
        .iter()
        .copied()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, v)| {
            if v > best.1 {
                (i, v)
            } else {
                best
            }
        });
    let rest: f64 = z
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != arg)
        .map(|(_, v)| (v - max).exp())
        .sum();
    (max, rest.ln_1p())
}

pub fn log_sum_exp(z: &[f64]) -> f64 {
    let (max, tail) = shifted_log_sum_exp(z);
    max + tail
}

/// `-log softmax(logits)[label]`
pub fn cross_entropy(logits: &[f64], label: usize) -> Result<f64> {
    if label >= logits.len() {
        return Err(Error::OutOfRange(format!(
            "label {label} with {} classes",
            logits.len()
        )));
    }
    let (max, tail) = shifted_log_sum_exp(logits);
    Ok((max - logits[label]) + tail)
}

/// Query/key/value/output projections of one multi-head attention block.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    pub query: Dense,
    pub key: Dense,
    pub value: Dense,
    pub output: Dense,
    pub heads: usize,
}

impl AttentionParams {
    /// Reads `prefix.{q,k,v,o}`.
    pub fn from_store(store: &ParameterStore, prefix: &str, heads: usize) -> Result<Self> {
        let p = Self {
            query: Dense::from_store(store, &format!("{prefix}.q"))?,
            key: Dense::from_store(store, &format!("{prefix}.k"))?,
            value: Dense::from_store(store, &format!("{prefix}.v"))?,
            output: Dense::from_store(store, &format!("{prefix}.o"))?,
            heads,
        };
        if heads == 0 || !p.model_dim().is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "{heads} heads do not divide width {}",
                p.model_dim()
            )));
        }
        Ok(p)
    }

    pub fn model_dim(&self) -> usize {
        self.query.out_dim()
    }
}

/// Standard multi-head attention of one query over a key/value set.
pub fn multi_head_attention(
    q: &[f64],
    keys: &[Vec<f64>],
    values: &[Vec<f64>],
    params: &AttentionParams,
) -> Result<Vec<f64>> {
    if keys.is_empty() {
        return Err(Error::Shape("attention over an empty key set".into()));
    }
    if keys.len() != values.len() {
        return Err(Error::Shape(format!(
            "{} keys but {} values",
            keys.len(),
            values.len()
        )));
    }
    let d = params.model_dim();
    let head_dim = d / params.heads;
    let scale = 1.0 / (head_dim as f64).sqrt();
    let pq = params.query.forward(q)?;
    let pk = keys
        .iter()
        .map(|k| params.key.forward(k))
        .collect::<Result<Vec<_>>>()?;
    let pv = values
        .iter()
        .map(|v| params.value.forward(v))
        .collect::<Result<Vec<_>>>()?;
    let mut concat = vec![0.0; d];
    for h in 0..params.heads {
        let cols = h * head_dim..(h + 1) * head_dim;
        let scores: Vec<f64> = pk
            .iter()
            .map(|k| {
                pq[cols.clone()]
                    .iter()
                    .zip(&k[cols.clone()])
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
                    * scale
            })
            .collect();
        let weights = softmax(&scores);
        for (w, v) in weights.iter().zip(&pv) {
            for c in cols.clone() {
                concat[c] += w * v[c];
            }
        }
    }
    params.output.forward(&concat)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::graph::Graph;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn dense(out: usize, inp: usize, w: Vec<f64>, b: Vec<f64>) -> Dense {
        Dense {
            weight: Tensor::matrix(out, inp, w),
            bias: Tensor::vector(b),
        }
    }

    fn random_dense(rng: &mut ChaCha8Rng, out: usize, inp: usize) -> Dense {
        dense(
            out,
            inp,
            (0..out * inp)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect(),
            (0..out).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
    }

    #[test]
    fn mlp_zero_and_identity() {
        let zero = Mlp {
            layers: [
                dense(2, 3, vec![0.0; 6], vec![0.0; 2]),
                dense(2, 2, vec![0.0; 4], vec![0.0; 2]),
                dense(4, 2, vec![0.0; 8], vec![0.0; 4]),
            ],
        };
        assert_eq!(mlp_forward(&[1.0, -2.0, 3.0], &zero).unwrap(), vec![0.0; 4]);
        let eye = || {
            dense(
                3,
                3,
                vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
                vec![0.0; 3],
            )
        };
        let id = Mlp {
            layers: [eye(), eye(), eye()],
        };
        assert_eq!(
            mlp_forward(&[0.5, 0.0, 2.25], &id).unwrap(),
            vec![0.5, 0.0, 2.25]
        );
        assert!(mlp_forward(&[1.0], &id).is_err());
    }

    #[test]
    fn mlp_matches_hand_evaluation() {
        // 2 -> 3 -> 3 -> 2 with fixed weights; expected values worked by hand
        let mlp = Mlp {
            layers: [
                dense(
                    3,
                    2,
                    vec![1.0, -1.0, 0.5, 2.0, -2.0, 0.25],
                    vec![0.0, 0.5, 1.0],
                ),
                dense(
                    3,
                    3,
                    vec![1.0, 0.0, 1.0, -1.0, 1.0, 0.0, 0.5, 0.5, 0.5],
                    vec![0.1, 0.0, -3.0],
                ),
                dense(2, 3, vec![1.0, 2.0, 3.0, -1.0, 0.0, 1.0], vec![0.0, 1.0]),
            ],
        };
        // x = [2, 1]: z1 = [1, 3.5, -2.75] -> h1 = [1, 3.5, 0]
        // z2 = [1.1, 2.5, -0.75] -> h2 = [1.1, 2.5, 0]
        // y = [1.1 + 5, -1.1 + 1] = [6.1, -0.1]
        let y = mlp_forward(&[2.0, 1.0], &mlp).unwrap();
        assert!(
            (y[0] - 6.1).abs() < 1e-12 && (y[1] + 0.1).abs() < 1e-12,
            "{y:?}"
        );
    }

    #[test]
    fn layer_norm_cases() {
        let z = layer_norm(&[4.0; 3], &[1.0; 3], &[0.0; 3]).unwrap();
        assert_eq!(z, vec![0.0; 3]);
        let b = layer_norm(&[4.0; 3], &[2.0; 3], &[0.5, -1.0, 3.0]).unwrap();
        assert_eq!(b, vec![0.5, -1.0, 3.0]);
        // mean 2, population variance 2/3
        let y = layer_norm(&[1.0, 2.0, 3.0], &[1.0; 3], &[0.0; 3]).unwrap();
        let expected = 1.0 / (2.0f64 / 3.0 + 1e-5).sqrt();
        assert!(
            (y[0] + expected).abs() < 1e-12
                && y[1].abs() < 1e-15
                && (y[2] - expected).abs() < 1e-12
        );
        assert!((expected - 1.2247).abs() < 1e-4);
        assert!(layer_norm(&[1.0, 2.0], &[1.0], &[0.0, 0.0]).is_err());
    }

    #[test]
    fn softmax_cases() {
        for v in softmax(&[0.0, 0.0, 0.0]) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        assert_eq!(softmax(&[7.5]), vec![1.0]);
        let big = softmax(&[1000.0, 0.0]);
        assert!(big.iter().all(|v| v.is_finite()));
        assert!((big[0] - 1.0).abs() < 1e-15 && big[1] < 1e-300);
    }

    #[test]
    fn cross_entropy_cases() {
        assert!((cross_entropy(&[0.3; 8], 5).unwrap() - 8f64.ln()).abs() < 1e-12);
        let tiny = cross_entropy(&[10.0, -10.0], 0).unwrap();
        assert!((tiny - (-20f64).exp().ln_1p()).abs() < 1e-20);
        assert!((tiny - 2.06e-9).abs() < 1e-11);
        assert!((cross_entropy(&[0.0, 0.0], 1).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert!(cross_entropy(&[0.0, 0.0], 2).is_err());
    }

    fn random_attention(rng: &mut ChaCha8Rng, d: usize, heads: usize) -> AttentionParams {
        AttentionParams {
            query: random_dense(rng, d, d),
            key: random_dense(rng, d, d),
            value: random_dense(rng, d, d),
            output: random_dense(rng, d, d),
            heads,
        }
    }

    /// Direct evaluation: per head, slice the projection matrices by rows.
    fn attention_by_hand(q: &[f64], kv: &[Vec<f64>], p: &AttentionParams) -> Vec<f64> {
        let d = q.len();
        let hd = d / p.heads;
        let project = |m: &Dense, x: &[f64], row: usize| -> f64 {
            (0..d)
                .map(|c| m.weight.data()[row * d + c] * x[c])
                .sum::<f64>()
                + m.bias.data()[row]
        };
        let mut concat = vec![0.0; d];
        for h in 0..p.heads {
            let rows: Vec<usize> = (h * hd..(h + 1) * hd).collect();
            let qh: Vec<f64> = rows.iter().map(|&r| project(&p.query, q, r)).collect();
            let logits: Vec<f64> = kv
                .iter()
                .map(|k| {
                    rows.iter()
                        .zip(&qh)
                        .map(|(&r, a)| a * project(&p.key, k, r))
                        .sum::<f64>()
                        / (hd as f64).sqrt()
                })
                .collect();
            let m = logits.iter().cloned().fold(f64::MIN, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for (k, w) in kv.iter().zip(&e) {
                for &r in &rows {
                    concat[r] += w / z * project(&p.value, k, r);
                }
            }
        }
        (0..d).map(|r| project(&p.output, &concat, r)).collect()
    }

    #[test]
    fn attention_matches_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let p = random_attention(&mut rng, 4, 2);
        let q: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let kv: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let got = multi_head_attention(&q, &kv, &kv, &p).unwrap();
        let want = attention_by_hand(&q, &kv, &p);
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }

        // batched tape path agrees too
        let mut store = ParameterStore::new();
        for (name, dense) in [
            ("a.q", &p.query),
            ("a.k", &p.key),
            ("a.v", &p.value),
            ("a.o", &p.output),
        ] {
            store
                .insert(format!("{name}.weight"), dense.weight.clone())
                .unwrap();
            store
                .insert(format!("{name}.bias"), dense.bias.clone())
                .unwrap();
        }
        let mut g = Graph::new(&store);
        let qn = g.constant(Tensor::vector(q.clone()));
        let kn = g.constant(Tensor::from_rows(&kv));
        let out = g
            .multi_head_attention(qn, kn, "a", 2, Arc::new(vec![vec![0, 1, 2]]))
            .unwrap();
        for (a, b) in g.value(out).data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_single_and_duplicate_keys() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = random_attention(&mut rng, 4, 2);
        let k = vec![0.3, -0.2, 0.9, 0.1];
        let one = multi_head_attention(
            &[1.0, 2.0, 3.0, 4.0],
            std::slice::from_ref(&k),
            std::slice::from_ref(&k),
            &p,
        )
        .unwrap();
        let other_q = multi_head_attention(
            &[-5.0, 0.0, 0.5, 0.0],
            std::slice::from_ref(&k),
            std::slice::from_ref(&k),
            &p,
        )
        .unwrap();
        let expected = p.output.forward(&p.value.forward(&k).unwrap()).unwrap();
        for ((a, b), c) in one.iter().zip(&other_q).zip(&expected) {
            assert!((a - c).abs() < 1e-12 && (b - c).abs() < 1e-12);
        }
        let dup = multi_head_attention(
            &[1.0, 2.0, 3.0, 4.0],
            &[k.clone(), k.clone()],
            &[k.clone(), k.clone()],
            &p,
        )
        .unwrap();
        for (a, b) in dup.iter().zip(&one) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(multi_head_attention(&[0.0; 4], &[], &[], &p).is_err());
    }

    proptest! {
        #[test]
        fn softmax_is_a_distribution(z in prop::collection::vec(-50.0f64..50.0, 1..20)) {
            let p = softmax(&z);
            prop_assert!(p.iter().all(|v| *v >= 0.0));
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }

        #[test]
        fn layer_norm_standardizes(x in prop::collection::vec(-10.0f64..10.0, 2..32)) {
            let spread = x.iter().cloned().fold(f64::MIN, f64::max) - x.iter().cloned().fold(f64::MAX, f64::min);
            prop_assume!(spread > 0.5);
            let y = layer_norm(&x, &vec![1.0; x.len()], &vec![0.0; x.len()]).unwrap();
            let n = y.len() as f64;
            let mean = y.iter().sum::<f64>() / n;
            let var = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let xm = x.iter().sum::<f64>() / n;
            let xv = x.iter().map(|v| (v - xm).powi(2)).sum::<f64>() / n;
            prop_assert!(mean.abs() < 1e-12);
            // epsilon shrinks the variance by var / (var + eps)
            prop_assert!((var - xv / (xv + LAYER_NORM_EPS)).abs() < 1e-12);
        }

        #[test]
        fn attention_is_permutation_invariant(seed in 0u64..1000, shift in 1usize..5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = random_attention(&mut rng, 4, 2);
            let q: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let kv: Vec<Vec<f64>> = (0..5).map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
            let mut rotated = kv.clone();
            rotated.rotate_left(shift);
            let a = multi_head_attention(&q, &kv, &kv, &p).unwrap();
            let b = multi_head_attention(&q, &rotated, &rotated, &p).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
