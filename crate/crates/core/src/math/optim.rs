use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::array::NumericArray;
use super::autodiff::{Gradients, Graph, Var};
use crate::error::{Error, Result};

/// Named trainable arrays. Iteration order is the lexicographic name order,
/// which keeps checkpoints and update order deterministic.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamStore {
    params: BTreeMap<String, NumericArray>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: NumericArray) {
        self.params.insert(name.into(), value);
    }

    /// Gaussian-initialized `rows x cols` array.
    pub fn insert_normal<R: Rng>(&mut self, name: &str, rows: usize, cols: usize, std: f64, rng: &mut R) {
        let normal = Normal::new(0.0, std).expect("std is positive");
        let data = (0..rows * cols).map(|_| normal.sample(rng)).collect();
        self.insert(name, NumericArray::from_parts(rows, cols, data));
    }

    pub fn get(&self, name: &str) -> Result<&NumericArray> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter {name:?}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut NumericArray> {
        self.params.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &NumericArray)> {
        self.params.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.params.values().map(NumericArray::len).sum()
    }

    /// Registers every parameter as a trainable leaf of `graph`.
    pub fn bind(&self, graph: &mut Graph) -> BoundParams {
        let vars = self
            .params
            .iter()
            .map(|(name, value)| (name.clone(), graph.leaf(value.clone())))
            .collect();
        BoundParams { vars }
    }

    /// Registers every parameter as a constant of `graph` (inference only).
    pub fn bind_frozen(&self, graph: &mut Graph) -> BoundParams {
        let vars = self
            .params
            .iter()
            .map(|(name, value)| (name.clone(), graph.constant(value.clone())))
            .collect();
        BoundParams { vars }
    }
}

/// Graph handles for a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("missing parameter {name:?}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    /// Moves each parameter's gradient out of `grads`, keyed by name.
    pub fn collect(&self, grads: &mut Gradients) -> BTreeMap<String, NumericArray> {
        self.vars
            .iter()
            .filter_map(|(name, &v)| grads.take(v).map(|g| (name.clone(), g)))
            .collect()
    }
}

/// Adaptive-moment optimizer.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: BTreeMap<String, Vec<f64>>,
    second: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update. Parameters without a gradient are left untouched.
    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, NumericArray>) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, g) in grads {
            let Some(p) = params.get_mut(name) else { continue };
            let m = self.first.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.second.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *w -= self.learning_rate * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}
