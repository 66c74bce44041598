//! Flat parameter storage with a named manifest.

use std::collections::HashSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

use super::matrix::Matrix;
use super::NnError;

/// Handle to one named tensor inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: (usize, usize),
    pub offset: usize,
}

impl ParamEntry {
    pub fn len(&self) -> usize {
        self.shape.0 * self.shape.1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// All learnable values of a model in one flat array.
///
/// Invariants: entries are contiguous in registration order, their sizes sum
/// to `values.len()`, names are unique.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    values: Vec<T>,
    manifest: Vec<ParamEntry>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            values: Vec::new(),
            manifest: Vec::new(),
        }
    }

    /// Rebuilds a store from a manifest and values, checking the invariants.
    pub fn from_parts(manifest: Vec<ParamEntry>, values: Vec<T>) -> Result<Self, NnError> {
        let mut names = HashSet::new();
        let mut offset = 0;
        for entry in &manifest {
            if !names.insert(entry.name.as_str()) {
                return Err(NnError::Manifest(format!("duplicate name {}", entry.name)));
            }
            if entry.offset != offset {
                return Err(NnError::Manifest(format!(
                    "{} starts at {}, expected {offset}",
                    entry.name, entry.offset
                )));
            }
            offset += entry.len();
        }
        if offset != values.len() {
            return Err(NnError::Manifest(format!(
                "manifest covers {offset} values, blob has {}",
                values.len()
            )));
        }
        Ok(Self { values, manifest })
    }

    /// Registers a zero-initialised tensor.
    pub fn add(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
    ) -> Result<ParamId, NnError> {
        let name = name.into();
        if self.manifest.iter().any(|e| e.name == name) {
            return Err(NnError::Manifest(format!("duplicate name {name}")));
        }
        let entry = ParamEntry {
            name,
            shape: (rows, cols),
            offset: self.values.len(),
        };
        self.values
            .resize(self.values.len() + entry.len(), T::zero());
        self.manifest.push(entry);
        Ok(ParamId(self.manifest.len() - 1))
    }

    /// Registers a `fan_in × fan_out` tensor with Glorot-uniform values.
    pub fn add_glorot<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Result<ParamId, NnError> {
        let id = self.add(name, fan_in, fan_out)?;
        let limit = (6.0 / (fan_in + fan_out).max(1) as f64).sqrt();
        for v in self.slice_mut(id) {
            *v = T::of(rng.gen_range(-limit..=limit));
        }
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn manifest(&self) -> &[ParamEntry] {
        &self.manifest
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.manifest[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.manifest
            .iter()
            .position(|e| e.name == name)
            .map(ParamId)
    }

    pub fn slice(&self, id: ParamId) -> &[T] {
        &self.values[self.manifest[id.0].range()]
    }

    pub fn slice_mut(&mut self, id: ParamId) -> &mut [T] {
        let range = self.manifest[id.0].range();
        &mut self.values[range]
    }

    pub fn matrix(&self, id: ParamId) -> Matrix<T> {
        let (r, c) = self.manifest[id.0].shape;
        Matrix::from_vec(r, c, self.slice(id).to_vec()).expect("manifest shape matches slice")
    }

    /// Overwrites all values; the length must match.
    pub fn set_values(&mut self, values: &[T]) -> Result<(), NnError> {
        if values.len() != self.values.len() {
            return Err(NnError::Shape(format!(
                "expected {} parameters, got {}",
                self.values.len(),
                values.len()
            )));
        }
        self.values.copy_from_slice(values);
        Ok(())
    }

    pub fn fill(&mut self, v: T) {
        self.values.iter_mut().for_each(|x| *x = v);
    }
}
