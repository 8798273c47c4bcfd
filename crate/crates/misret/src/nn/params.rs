//! Named parameter tensors with trainability flags.
//!
//! Parameters live outside the autograd tape so read-only forward passes can
//! run concurrently; the tape records gradients keyed by [`ParamId`].

use ndarray::Array2;
use rand_chacha::ChaCha12Rng;
use sha2::{Digest, Sha256};
use std::collections::HashMap;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub value: Array2<f64>,
    pub trainable: bool,
}

/// Ordered collection of named parameters. Registration order is fixed by
/// construction code, which keeps init draws, checkpoints, and optimizer
/// updates deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, value: Array2<f64>, trainable: bool) -> ParamId {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.entries.len());
        self.index.insert(name.to_string(), id.0);
        self.entries.push(ParamEntry {
            name: name.to_string(),
            value,
            trainable,
        });
        id
    }

    /// Weight matrix initialized N(0, std), biases should use `add_zeros`.
    pub fn add_normal(
        &mut self,
        name: &str,
        rows: usize,
        cols: usize,
        std: f64,
        rng: &mut ChaCha12Rng,
    ) -> ParamId {
        let dist = rand_distr::Normal::new(0.0, std).expect("valid std");
        let value = Array2::from_shape_fn((rows, cols), |_| {
            rand_distr::Distribution::sample(&dist, rng)
        });
        self.add(name, value, true)
    }

    pub fn add_zeros(&mut self, name: &str, rows: usize, cols: usize) -> ParamId {
        self.add(name, Array2::zeros((rows, cols)), true)
    }

    pub fn get(&self, id: ParamId) -> &Array2<f64> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array2<f64> {
        &mut self.entries[id.0].value
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn require(&self, name: &str) -> Result<ParamId> {
        self.id_of(name).ok_or_else(|| Error::MissingTensor {
            name: name.to_string(),
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry)> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, e)| (ParamId(i), e))
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.entries[id.0].trainable = trainable;
    }

    /// Apply a trainability rule by name.
    pub fn set_trainable_by(&mut self, rule: impl Fn(&str) -> bool) {
        for e in &mut self.entries {
            e.trainable = rule(&e.name);
        }
    }

    pub fn total_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn trainable_scalars(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.value.len())
            .sum()
    }

    /// SHA-256 over the values of every parameter whose name satisfies the
    /// filter, in registration order. Used by freeze-contract tests.
    pub fn checksum_where(&self, filter: impl Fn(&str) -> bool) -> String {
        let mut hasher = Sha256::new();
        for e in &self.entries {
            if filter(&e.name) {
                hasher.update(e.name.as_bytes());
                for v in e.value.iter() {
                    hasher.update(v.to_le_bytes());
                }
            }
        }
        format!("{:x}", hasher.finalize())
    }

    pub fn checksum(&self) -> String {
        self.checksum_where(|_| true)
    }
}

/// Dense gradient accumulator, one slot per parameter.
#[derive(Debug, Clone)]
pub struct Grads {
    slots: Vec<Option<Array2<f64>>>,
}

impl Grads {
    pub fn zeros(n_params: usize) -> Self {
        Self {
            slots: vec![None; n_params],
        }
    }

    pub fn accumulate(&mut self, id: ParamId, g: &Array2<f64>) {
        match &mut self.slots[id.0] {
            Some(slot) => *slot += g,
            slot @ None => *slot = Some(g.clone()),
        }
    }

    /// Add `scale * other` into self. Slot count must match.
    pub fn add_scaled(&mut self, other: &Grads, scale: f64) {
        assert_eq!(self.slots.len(), other.slots.len());
        for (dst, src) in self.slots.iter_mut().zip(&other.slots) {
            if let Some(src) = src {
                match dst {
                    Some(d) => d.scaled_add(scale, src),
                    d @ None => *d = Some(src * scale),
                }
            }
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Array2<f64>> {
        self.slots[id.0].as_ref()
    }

    pub fn scale_in_place(&mut self, scale: f64) {
        for s in self.slots.iter_mut().flatten() {
            s.mapv_inplace(|v| v * scale);
        }
    }

    /// Global L2 norm over gradients of trainable parameters.
    pub fn global_norm(&self, store: &ParamStore) -> f64 {
        let mut acc = 0.0;
        for (i, s) in self.slots.iter().enumerate() {
            if let Some(g) = s {
                if store.entry(ParamId(i)).trainable {
                    acc += g.iter().map(|v| v * v).sum::<f64>();
                }
            }
        }
        acc.sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.slots
            .iter()
            .flatten()
            .all(|g| g.iter().all(|v| v.is_finite()))
    }
}
