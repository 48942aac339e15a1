use serde::{Deserialize, Serialize};

use super::Tensor;

/// Handle to one tensor in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Entry {
    name: String,
    /// Projected onto the nonnegative orthant after every optimizer step.
    nonneg: bool,
    value: Tensor,
}

/// Owns every learnable tensor of a model, in declaration order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    entries: Vec<Entry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.push(name.into(), value, false)
    }

    /// Adds a tensor that must stay elementwise nonnegative.
    pub fn add_nonneg(&mut self, name: impl Into<String>, mut value: Tensor) -> ParamId {
        value.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
        self.push(name.into(), value, true)
    }

    fn push(&mut self, name: String, value: Tensor, nonneg: bool) -> ParamId {
        self.entries.push(Entry {
            name,
            nonneg,
            value,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn is_nonneg(&self, id: ParamId) -> bool {
        self.entries[id.0].nonneg
    }

    /// Clamps every nonnegative-constrained tensor at zero.
    pub fn project(&mut self) {
        for e in self.entries.iter_mut().filter(|e| e.nonneg) {
            e.value.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
        }
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn shapes(&self) -> Vec<[usize; 2]> {
        self.entries.iter().map(|e| e.value.shape()).collect()
    }

    pub fn set_all(&mut self, value: f64) {
        for e in &mut self.entries {
            e.value.data_mut().iter_mut().for_each(|v| *v = value);
        }
    }
}
