//! Named parameters with gradient buffers, plus seeded initialisation.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub grad: Tensor,
}

/// Dotted-name → parameter map. Iteration is lexicographic by name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        let grad = Tensor::zeros(value.shape());
        self.params.insert(name, Param { value, grad });
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Param> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))
    }

    pub fn value(&self, name: &str) -> Result<&Tensor> {
        self.get(name).map(|p| &p.value)
    }

    pub fn grad(&self, name: &str) -> Result<&Tensor> {
        self.get(name).map(|p| &p.grad)
    }

    pub fn value_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(name)
            .map(|p| &mut p.value)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))
    }

    /// Replace a value; the new tensor must keep the old shape.
    pub fn set_value(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self.value_mut(name)?;
        if slot.shape() != value.shape() {
            return Err(Error::shape(
                "set_value",
                format!("{name}: {} vs {}", slot.shape(), value.shape()),
            ));
        }
        *slot = value;
        Ok(())
    }

    pub fn accumulate_grad(&mut self, name: &str, g: &Tensor) -> Result<()> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::State(format!("gradient for unknown parameter {name}")))?;
        p.grad.add_assign(g)
    }

    pub fn zero_grads(&mut self) {
        for p in self.params.values_mut() {
            p.grad.data_mut().fill(0.0);
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total scalar count over all parameters.
    pub fn num_elements(&self) -> usize {
        self.params.values().map(|p| p.value.numel()).sum()
    }

    /// Scalar count of parameters whose name starts with `prefix`.
    pub fn num_elements_with_prefix(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, p)| p.value.numel())
            .sum()
    }

    /// Set every value under `prefix` to zero.
    pub fn zero_values_with_prefix(&mut self, prefix: &str) {
        for (_, p) in self.params.iter_mut().filter(|(k, _)| k.starts_with(prefix)) {
            p.value.data_mut().fill(0.0);
        }
    }

    /// Plain gradient descent: `θ ← θ − lr·∇θ`.
    pub fn sgd_step(&mut self, lr: f64) {
        for p in self.params.values_mut() {
            for (v, g) in p.value.data_mut().iter_mut().zip(p.grad.data()) {
                *v -= lr * g;
            }
        }
    }

    /// Copy every entry of `other` into `self` under `prefix.name`.
    pub fn merge_prefixed(&mut self, prefix: &str, other: ParamStore) -> Result<()> {
        for (name, p) in other.params {
            self.insert(format!("{prefix}.{name}"), p.value)?;
        }
        Ok(())
    }
}

/// Deterministic parameter initialiser.
///
/// Weights are drawn from `U(-√(1/fan_in), √(1/fan_in))`; biases start at 0,
/// LayerNorm gains at 1.
#[derive(Clone, Debug)]
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn uniform(&mut self, shape: Shape, bound: f64) -> Tensor {
        Tensor::from_fn(shape, |_, _, _, _| self.rng.gen_range(-bound..=bound))
    }

    pub fn fan_in(&mut self, shape: Shape, fan_in: usize) -> Tensor {
        self.uniform(shape, (1.0 / fan_in as f64).sqrt())
    }

    /// `cin → cout` linear weight.
    pub fn linear(&mut self, cin: usize, cout: usize) -> Tensor {
        self.fan_in(Shape::matrix(cin, cout), cin)
    }

    /// `cout × cin/groups × k × k` convolution kernel.
    pub fn conv(&mut self, cout: usize, cin_per_group: usize, k: usize) -> Tensor {
        self.fan_in(Shape::new(cout, cin_per_group, k, k), cin_per_group * k * k)
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }
}
