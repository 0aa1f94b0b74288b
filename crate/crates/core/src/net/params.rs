use std::collections::BTreeMap;
use std::sync::Arc;

use super::NumArray;
use crate::error::{Error, Result};

/// A learnable tensor and its gradient accumulator.
#[derive(Clone, Debug)]
pub struct Param {
    value: Arc<NumArray>,
    grad: Vec<f64>,
}

impl Param {
    pub fn value(&self) -> &NumArray {
        &self.value
    }

    pub(crate) fn shared(&self) -> Arc<NumArray> {
        Arc::clone(&self.value)
    }

    pub fn grad(&self) -> &[f64] {
        &self.grad
    }
}

/// Named parameters in deterministic (lexicographic) order.
///
/// Values are copy-on-write, so cloning a store for an actor snapshot is
/// cheap and later learner updates never leak into the snapshot.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: NumArray) {
        let grad = vec![0.0; value.len()];
        self.entries.insert(name.into(), Param { value: Arc::new(value), grad });
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn param(&self, name: &str) -> Result<&Param> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::Shape(format!("missing parameter '{name}'")))
    }

    pub fn value(&self, name: &str) -> Result<&NumArray> {
        self.param(name).map(|p| p.value())
    }

    pub fn value_mut(&mut self, name: &str) -> Result<&mut NumArray> {
        let p = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::Shape(format!("missing parameter '{name}'")))?;
        Ok(Arc::make_mut(&mut p.value))
    }

    pub fn grad(&self, name: &str) -> Result<&[f64]> {
        self.param(name).map(|p| p.grad())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.entries.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn n_values(&self) -> usize {
        self.entries.values().map(|p| p.value.len()).sum()
    }

    pub fn add_grad(&mut self, name: &str, g: &[f64]) -> Result<()> {
        let p = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::Shape(format!("missing parameter '{name}'")))?;
        if p.grad.len() != g.len() {
            return Err(Error::Shape(format!(
                "gradient for '{name}' has {} values, expected {}",
                g.len(),
                p.grad.len()
            )));
        }
        for (a, b) in p.grad.iter_mut().zip(g) {
            *a += b;
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for p in self.entries.values_mut() {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    pub fn scale_grad(&mut self, factor: f64) {
        for p in self.entries.values_mut() {
            p.grad.iter_mut().for_each(|g| *g *= factor);
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.entries
            .values()
            .flat_map(|p| p.grad.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    /// Mutable access to value and gradient together, for optimizers.
    pub(crate) fn for_each_mut(&mut self, mut f: impl FnMut(&str, &mut [f64], &mut [f64])) {
        for (name, p) in self.entries.iter_mut() {
            let value = Arc::make_mut(&mut p.value);
            f(name, value.data_mut(), &mut p.grad);
        }
    }

    /// True when both stores hold the same names with the same shapes.
    pub fn same_layout(&self, other: &ParamStore) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(other.entries.iter())
                .all(|((a, pa), (b, pb))| a == b && pa.value.shape() == pb.value.shape())
    }

    /// Values only, as a fresh store with zero gradients and unshared buffers.
    pub fn deep_copy(&self) -> ParamStore {
        let mut out = ParamStore::new();
        for (name, p) in &self.entries {
            out.insert(name.clone(), (*p.value).clone());
        }
        out
    }

    /// Bitwise equality of all values.
    pub fn values_equal(&self, other: &ParamStore) -> bool {
        self.same_layout(other)
            && self
                .entries
                .values()
                .zip(other.entries.values())
                .all(|(a, b)| {
                    a.value
                        .data()
                        .iter()
                        .zip(b.value.data())
                        .all(|(x, y)| x.to_bits() == y.to_bits())
                })
    }
}
