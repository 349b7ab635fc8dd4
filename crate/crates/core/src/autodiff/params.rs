use std::collections::BTreeMap;

use rand::Rng;

use super::DenseArray;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
struct Slot {
    value: DenseArray,
    grad: Option<DenseArray>,
}

/// Named learned parameters keyed by dotted path (`decoder.level3.ub.expand.w`),
/// each with a gradient slot filled by [`Graph::backward`](super::Graph::backward).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    slots: BTreeMap<String, Slot>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: DenseArray) -> Result<()> {
        let name = name.into();
        if self.slots.contains_key(&name) {
            return Err(Error::DuplicateParameter(name));
        }
        self.slots.insert(name, Slot { value, grad: None });
        Ok(())
    }

    /// Registers a weight drawn from uniform(-a, a), a = sqrt(6 / (fan_in + fan_out)).
    pub fn insert_xavier<R: Rng>(
        &mut self,
        name: impl Into<String>,
        dims: &[usize],
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Result<()> {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let n: usize = dims.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-a..a)).collect();
        self.insert(name, DenseArray::from_raw(dims.to_vec(), data))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.slots.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&DenseArray> {
        self.slots
            .get(name)
            .map(|s| &s.value)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    /// Replaces a parameter value; dims must stay the same.
    pub fn set(&mut self, name: &str, value: DenseArray) -> Result<()> {
        let slot = self
            .slots
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))?;
        if slot.value.dims() != value.dims() {
            return Err(Error::shape("ParamStore::set", format!("{:?}", slot.value.dims()), format!("{:?}", value.dims())));
        }
        slot.value = value;
        Ok(())
    }

    pub(crate) fn value_mut(&mut self, name: &str) -> Option<&mut DenseArray> {
        self.slots.get_mut(name).map(|s| &mut s.value)
    }

    pub fn grad(&self, name: &str) -> Option<&DenseArray> {
        self.slots.get(name).and_then(|s| s.grad.as_ref())
    }

    pub fn zero_grad(&mut self) {
        for slot in self.slots.values_mut() {
            slot.grad = None;
        }
    }

    /// Gives every parameter without a gradient an explicit zero gradient.
    pub(crate) fn fill_missing_grads(&mut self) {
        for slot in self.slots.values_mut() {
            if slot.grad.is_none() {
                slot.grad = Some(DenseArray::zeros(slot.value.dims()));
            }
        }
    }

    pub(crate) fn accumulate_grad(&mut self, name: &str, grad: &[f64]) -> Result<()> {
        let slot = self
            .slots
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))?;
        let g = slot.grad.get_or_insert_with(|| DenseArray::zeros(slot.value.dims()));
        for (a, b) in g.data_mut().iter_mut().zip(grad) {
            *a += b;
        }
        Ok(())
    }

    /// Multiplies every populated gradient by `factor`.
    pub fn scale_grads(&mut self, factor: f64) {
        for slot in self.slots.values_mut() {
            if let Some(g) = slot.grad.as_mut() {
                g.data_mut().iter_mut().for_each(|v| *v *= factor);
            }
        }
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.slots.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &DenseArray)> {
        self.slots.iter().map(|(k, s)| (k.as_str(), &s.value))
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.slots.values().map(|s| s.value.len()).sum()
    }
}
