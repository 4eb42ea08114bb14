//! Flat parameter storage with named, disjoint slices.

use crate::error::{Error, Result};
use std::collections::BTreeMap;
use std::ops::Range;

/// All learnable parameters of a model in one flat array, addressed through
/// named slices. Slices are disjoint and cover the array.
#[derive(Debug, Clone)]
pub struct ParamStore {
    values: Vec<f64>,
    slices: BTreeMap<String, Range<usize>>,
}

impl ParamStore {
    pub fn builder() -> ParamStoreBuilder {
        ParamStoreBuilder {
            values: Vec::new(),
            slices: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn range(&self, name: &str) -> Result<Range<usize>> {
        self.slices
            .get(name)
            .cloned()
            .ok_or_else(|| Error::contract(format!("unknown parameter slice `{name}`")))
    }

    pub fn slice(&self, name: &str) -> Result<&[f64]> {
        Ok(&self.values[self.range(name)?])
    }

    pub fn slice_mut(&mut self, name: &str) -> Result<&mut [f64]> {
        let r = self.range(name)?;
        Ok(&mut self.values[r])
    }

    pub fn slice_names(&self) -> impl Iterator<Item = &str> {
        self.slices.keys().map(|s| s.as_str())
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Replace every value; lengths must agree.
    pub fn load_values(&mut self, values: Vec<f64>) -> Result<()> {
        if values.len() != self.values.len() {
            return Err(Error::Checkpoint(format!(
                "parameter count mismatch: store has {}, input has {}",
                self.values.len(),
                values.len()
            )));
        }
        self.values = values;
        Ok(())
    }
}

pub struct ParamStoreBuilder {
    values: Vec<f64>,
    slices: BTreeMap<String, Range<usize>>,
}

impl ParamStoreBuilder {
    /// Append a named slice initialized with the given values.
    pub fn slice(mut self, name: &str, init: Vec<f64>) -> Self {
        let start = self.values.len();
        self.values.extend_from_slice(&init);
        let prev = self
            .slices
            .insert(name.to_string(), start..self.values.len());
        assert!(prev.is_none(), "duplicate slice name {name}");
        self
    }

    pub fn build(self) -> ParamStore {
        ParamStore {
            values: self.values,
            slices: self.slices,
        }
    }
}
