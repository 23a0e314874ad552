use serde::{Deserialize, Serialize};

use super::params::{GradientMap, ParameterStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    #[serde(default = "AdamConfig::default_beta1")]
    pub beta1: f64,
    #[serde(default = "AdamConfig::default_beta2")]
    pub beta2: f64,
    #[serde(default = "AdamConfig::default_eps")]
    pub eps: f64,
}

impl AdamConfig {
    fn default_beta1() -> f64 {
        0.9
    }

    fn default_beta2() -> f64 {
        0.999
    }

    fn default_eps() -> f64 {
        1e-8
    }

    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            beta1: Self::default_beta1(),
            beta2: Self::default_beta2(),
            eps: Self::default_eps(),
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self::with_lr(1e-4)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub first: Vec<Tensor>,
    pub second: Vec<Tensor>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &ParameterStore) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|(_, t)| Tensor::zeros(t.shape()))
                .collect::<Vec<_>>()
        };
        Self {
            first: zeros(),
            second: zeros(),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update, in parameter order.
pub fn adam_step(
    params: &mut ParameterStore,
    grads: &GradientMap,
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    if grads.names() != params.names() || state.first.len() != params.len() {
        return Err(Error::Shape(
            "optimizer state does not match parameters".into(),
        ));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (i, p) in params.tensors_mut().iter_mut().enumerate() {
        let g = grads.tensor_at(i);
        if g.shape() != p.shape() {
            return Err(Error::Shape(format!(
                "gradient {:?} vs parameter {:?}",
                g.shape(),
                p.shape()
            )));
        }
        let m = state.first[i].data_mut();
        let v = state.second[i].data_mut();
        for (((pv, gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
            *mv = cfg.beta1 * *mv + (1.0 - cfg.beta1) * gv;
            *vv = cfg.beta2 * *vv + (1.0 - cfg.beta2) * gv * gv;
            let m_hat = *mv / c1;
            let v_hat = *vv / c2;
            *pv -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::graph::Graph;

    fn scalar_store(v: f64) -> ParameterStore {
        let mut s = ParameterStore::new();
        s.insert("p", Tensor::vector(vec![v])).unwrap();
        s
    }

    fn grads_of(store: &ParameterStore, g: f64) -> GradientMap {
        let mut graph = Graph::new(store);
        let p = graph.param("p").unwrap();
        let scaled = graph.scale(p, g);
        let s = graph.sum(scaled);
        graph.backward(s).unwrap()
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut params = scalar_store(1.0);
        let grads = grads_of(&params, 0.5);
        let mut state = AdamState::new(&params);
        let cfg = AdamConfig::with_lr(0.01);
        adam_step(&mut params, &grads, &mut state, &cfg).unwrap();
        let expected = 1.0 - 0.01 * 0.5 / (0.5 + 1e-8);
        assert!((params.get("p").unwrap().item() - expected).abs() < 1e-15);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn zero_gradient_keeps_parameter_and_decays_moments() {
        let mut params = scalar_store(2.0);
        let mut state = AdamState::new(&params);
        let cfg = AdamConfig::with_lr(0.1);
        {
            let grads = grads_of(&params, 1.0);
            adam_step(&mut params, &grads, &mut state, &cfg).unwrap()
        }
        let after_first = params.get("p").unwrap().item();
        let m1 = state.first[0].item();
        {
            let grads = grads_of(&params, 0.0);
            adam_step(&mut params, &grads, &mut state, &cfg).unwrap()
        }
        assert!((state.first[0].item() - 0.9 * m1).abs() < 1e-18);
        // the decayed first moment still moves the parameter; a fresh state does not
        let mut fresh = AdamState::new(&params);
        let before = params.clone();
        {
            let grads = grads_of(&params, 0.0);
            adam_step(&mut params, &grads, &mut fresh, &cfg).unwrap()
        }
        assert_eq!(params, before);
        assert!(after_first < 2.0);
    }

    #[test]
    fn two_steps_match_hand_recursion() {
        let (g, lr, b1, b2, eps) = (0.3, 0.05, 0.9, 0.999, 1e-8);
        let mut params = scalar_store(1.0);
        let mut state = AdamState::new(&params);
        let cfg = AdamConfig::with_lr(lr);
        for _ in 0..2 {
            {
                let grads = grads_of(&params, g);
                adam_step(&mut params, &grads, &mut state, &cfg).unwrap()
            }
        }
        // m1 = 0.1 g, m2 = 0.19 g; v1 = 0.001 g^2, v2 = 0.001999 g^2
        let step1 = lr * (0.1 * g / (1.0 - b1)) / ((0.001 * g * g / (1.0 - b2)).sqrt() + eps);
        let m2_hat = 0.19 * g / (1.0 - b1 * b1);
        let v2_hat = 0.001999 * g * g / (1.0 - b2 * b2);
        let step2 = lr * m2_hat / (v2_hat.sqrt() + eps);
        let expected = 1.0 - step1 - step2;
        assert!((params.get("p").unwrap().item() - expected).abs() < 1e-12);
    }

    #[test]
    fn zero_learning_rate_is_identity() {
        let mut params = scalar_store(-0.7);
        let before = params.clone();
        let mut state = AdamState::new(&params);
        for g in [1.0, -3.0, 0.2] {
            {
                let grads = grads_of(&params, g);
                adam_step(&mut params, &grads, &mut state, &AdamConfig::with_lr(0.0)).unwrap()
            }
        }
        assert_eq!(params, before);
    }
}
