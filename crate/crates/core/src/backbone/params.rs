use ndarray::Array2;

use crate::scalar::Scalar;
use crate::util::sha256_hex;

pub type ParamId = usize;

/// Flat, named parameter storage. One-dimensional parameters are stored as
/// `1 × n` matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Array2<T>>,
    trainable: Vec<bool>,
}

impl<T> Default for ParamStore<T> {
    fn default() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
            trainable: Vec::new(),
        }
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn add(&mut self, name: impl Into<String>, tensor: Array2<T>, trainable: bool) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(tensor);
        self.trainable.push(trainable);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Array2<T> {
        &self.tensors[id]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array2<T> {
        &mut self.tensors[id]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name)
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.trainable[id]
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.trainable[id] = trainable;
    }

    pub fn freeze_all(&mut self) {
        self.trainable.iter_mut().for_each(|t| *t = false);
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        0..self.tensors.len()
    }

    pub fn trainable_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.ids().filter(|&i| self.trainable[i])
    }

    pub fn count(&self) -> usize {
        self.tensors.iter().map(Array2::len).sum()
    }

    pub fn trainable_count(&self) -> usize {
        self.trainable_ids().map(|i| self.tensors[i].len()).sum()
    }

    /// SHA-256 over the listed parameters' names and values (as `f64` bits).
    pub fn checksum_of(&self, ids: impl Iterator<Item = ParamId>) -> String {
        let mut bytes = Vec::new();
        for id in ids {
            bytes.extend_from_slice(self.names[id].as_bytes());
            for v in self.tensors[id].iter() {
                bytes.extend_from_slice(&v.to_f64().unwrap_or(f64::NAN).to_bits().to_le_bytes());
            }
        }
        sha256_hex(&bytes)
    }

    pub fn frozen_checksum(&self) -> String {
        self.checksum_of(self.ids().filter(|&i| !self.trainable[i]))
    }

    pub fn full_checksum(&self) -> String {
        self.checksum_of(self.ids())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array2<T>, bool)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .zip(&self.trainable)
            .map(|((n, t), &tr)| (n.as_str(), t, tr))
    }
}

/// Gradients for the trainable subset of a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Grads<T> {
    slots: Vec<Option<Array2<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn for_store(store: &ParamStore<T>) -> Self {
        Grads {
            slots: store
                .ids()
                .map(|i| store.is_trainable(i).then(|| Array2::zeros(store.get(i).dim())))
                .collect(),
        }
    }

    /// Mutable gradient slot, `None` for frozen parameters.
    pub fn slot(&mut self, id: ParamId) -> Option<&mut Array2<T>> {
        self.slots[id].as_mut()
    }

    pub fn get(&self, id: ParamId) -> Option<&Array2<T>> {
        self.slots[id].as_ref()
    }

    pub fn wants(&self, id: ParamId) -> bool {
        self.slots[id].is_some()
    }

    pub fn add_assign(&mut self, other: &Grads<T>) {
        for (a, b) in self.slots.iter_mut().zip(&other.slots) {
            if let (Some(a), Some(b)) = (a.as_mut(), b.as_ref()) {
                *a += b;
            }
        }
    }

    pub fn scale(&mut self, factor: T) {
        for g in self.slots.iter_mut().flatten() {
            g.mapv_inplace(|v| v * factor);
        }
    }

    pub fn zero(&mut self) {
        for g in self.slots.iter_mut().flatten() {
            g.fill(T::zero());
        }
    }

    pub fn is_finite(&self) -> bool {
        self.slots.iter().flatten().all(|g| g.iter().all(|v| v.is_finite()))
    }
}
