use std::sync::Arc;

use rand::Rng;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Named trainable tensors, iterated in lexicographic name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterStore {
    names: Arc<Vec<String>>,
    tensors: Vec<Tensor>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts a new parameter, keeping names sorted.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        match self.names.binary_search(&name) {
            Ok(_) => Err(Error::Config(format!("duplicate parameter `{name}`"))),
            Err(pos) => {
                Arc::make_mut(&mut self.names).insert(pos, name);
                self.tensors.insert(pos, tensor);
                Ok(())
            }
        }
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.binary_search_by(|n| n.as_str().cmp(name)).ok()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index_of(name).map(|i| &self.tensors[i])
    }

    pub fn expect(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index_of(name).map(move |i| &mut self.tensors[i])
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensor_at(&self, index: usize) -> &Tensor {
        &self.tensors[index]
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn n_values(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn same_layout(&self, other: &ParameterStore) -> bool {
        self.names == other.names
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.shape() == b.shape())
    }

    /// Adds a weight matrix `out x fan_in` drawn from
    /// `uniform(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn init_weight<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        out: usize,
        fan_in: usize,
        rng: &mut R,
    ) -> Result<()> {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let data = (0..out * fan_in)
            .map(|_| rng.random_range(-bound..=bound))
            .collect();
        self.insert(name, Tensor::matrix(out, fan_in, data))
    }

    pub fn init_constant(&mut self, name: impl Into<String>, len: usize, value: f64) -> Result<()> {
        self.insert(name, Tensor::vector(vec![value; len]))
    }

    /// Adds `prefix.weight` (`out x fan_in`) and a zero `prefix.bias`.
    pub fn init_dense<R: Rng + ?Sized>(
        &mut self,
        prefix: &str,
        fan_in: usize,
        out: usize,
        rng: &mut R,
    ) -> Result<()> {
        self.init_weight(format!("{prefix}.weight"), out, fan_in, rng)?;
        self.init_constant(format!("{prefix}.bias"), out, 0.0)
    }

    /// Rounds every value through `f32`, the checkpoint storage precision.
    pub fn round_to_f32(&self) -> ParameterStore {
        let mut out = self.clone();
        for t in &mut out.tensors {
            for v in t.data_mut() {
                *v = *v as f32 as f64;
            }
        }
        out
    }
}

/// Gradients aligned with a [`ParameterStore`]. Parameters the loss never
/// touched hold zeros and report `reached == false`.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientMap {
    names: Arc<Vec<String>>,
    tensors: Vec<Tensor>,
    reached: Vec<bool>,
}

impl GradientMap {
    pub fn zeros_like(params: &ParameterStore) -> Self {
        Self {
            names: Arc::clone(&params.names),
            tensors: params
                .tensors
                .iter()
                .map(|t| Tensor::zeros(t.shape()))
                .collect(),
            reached: vec![false; params.len()],
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names
            .binary_search_by(|n| n.as_str().cmp(name))
            .ok()
            .map(|i| &self.tensors[i])
    }

    pub fn reached(&self, name: &str) -> bool {
        self.names
            .binary_search_by(|n| n.as_str().cmp(name))
            .is_ok_and(|i| self.reached[i])
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensor_at(&self, index: usize) -> &Tensor {
        &self.tensors[index]
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub(crate) fn accumulate(&mut self, index: usize, grad: &Tensor) {
        self.tensors[index].add_scaled(grad, 1.0);
        self.reached[index] = true;
    }

    /// `self += alpha * other`, in parameter order.
    pub fn add_scaled(&mut self, other: &GradientMap, alpha: f64) {
        assert!(Arc::ptr_eq(&self.names, &other.names) || self.names == other.names);
        for ((a, b), (ra, rb)) in self
            .tensors
            .iter_mut()
            .zip(&other.tensors)
            .zip(self.reached.iter_mut().zip(&other.reached))
        {
            a.add_scaled(b, alpha);
            *ra |= *rb;
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for t in &mut self.tensors {
            for v in t.data_mut() {
                *v *= alpha;
            }
        }
    }

    /// First parameter holding a non-finite gradient, if any.
    pub fn first_non_finite(&self) -> Option<&str> {
        self.names
            .iter()
            .zip(&self.tensors)
            .find(|(_, t)| !t.is_finite())
            .map(|(n, _)| n.as_str())
    }
}
