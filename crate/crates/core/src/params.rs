//! Named, grouped parameter storage.
//!
//! Every trainable tensor lives in a [`ParamStore`] under a dotted name. The
//! name prefix decides the learning-rate group and whether decoupled weight
//! decay applies. Initialisation draws from a generator seeded by the store
//! seed and the parameter name, so adding or removing one sub-module never
//! shifts the initial values of another.

use std::collections::HashMap;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Learning-rate group.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParamGroup {
    Encoder,
    Heads,
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Array2<f64>,
    pub group: ParamGroup,
    /// Whether decoupled weight decay applies (false for biases and norms).
    pub decay: bool,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: HashMap<String, ParamId>,
    seed: u64,
}

/// Derive a per-name generator so initialisation is independent of creation order.
pub(crate) fn named_rng(seed: u64, name: &str) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(name.as_bytes());
    let digest = hasher.finalize();
    let mut bytes = [0u8; 32];
    bytes.copy_from_slice(&digest[..32]);
    ChaCha8Rng::from_seed(bytes)
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            ..Self::default()
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Register a tensor. Panics on duplicate names: that is a wiring bug.
    pub fn add(
        &mut self,
        name: impl Into<String>,
        value: Array2<f64>,
        group: ParamGroup,
        decay: bool,
    ) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name `{name}`"
        );
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Param {
            name,
            value,
            group,
            decay,
        });
        id
    }

    pub fn normal(
        &mut self,
        name: &str,
        rows: usize,
        cols: usize,
        std: f64,
        group: ParamGroup,
    ) -> ParamId {
        let mut rng = named_rng(self.seed, name);
        let dist = Normal::new(0.0, std).expect("finite std");
        let value = Array2::from_shape_fn((rows, cols), |_| dist.sample(&mut rng));
        self.add(name, value, group, true)
    }

    pub fn zeros(&mut self, name: &str, rows: usize, cols: usize, group: ParamGroup) -> ParamId {
        self.add(name, Array2::zeros((rows, cols)), group, false)
    }

    pub fn ones(&mut self, name: &str, rows: usize, cols: usize, group: ParamGroup) -> ParamId {
        self.add(name, Array2::ones((rows, cols)), group, false)
    }

    pub fn get(&self, id: ParamId) -> &Array2<f64> {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array2<f64> {
        &mut self.params[id.0].value
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Param)> {
        self.params
            .iter_mut()
            .enumerate()
            .map(|(i, p)| (ParamId(i), p))
    }

    /// SHA-256 over names, shapes and values of every parameter whose name
    /// starts with one of `prefixes`.
    pub fn digest(&self, prefixes: &[&str]) -> String {
        let mut hasher = Sha256::new();
        for p in &self.params {
            if !prefixes.iter().any(|pre| p.name.starts_with(pre)) {
                continue;
            }
            hasher.update(p.name.as_bytes());
            hasher.update((p.value.nrows() as u64).to_le_bytes());
            hasher.update((p.value.ncols() as u64).to_le_bytes());
            for v in p.value.iter() {
                hasher.update(v.to_le_bytes());
            }
        }
        hex::encode(hasher.finalize())
    }

    /// Snapshot of all values, used for best-checkpoint retention.
    pub fn snapshot(&self) -> Vec<Array2<f64>> {
        self.params.iter().map(|p| p.value.clone()).collect()
    }

    pub fn restore(&mut self, snapshot: &[Array2<f64>]) {
        assert_eq!(snapshot.len(), self.params.len(), "snapshot size mismatch");
        for (p, v) in self.params.iter_mut().zip(snapshot) {
            p.value.assign(v);
        }
    }
}

/// Per-parameter gradient accumulator, indexed like the store.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub fn new(n_params: usize) -> Self {
        Self {
            grads: vec![None; n_params],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Array2<f64>> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn accumulate(&mut self, id: ParamId, g: &Array2<f64>) {
        match &mut self.grads[id.0] {
            Some(existing) => *existing += g,
            slot @ None => *slot = Some(g.clone()),
        }
    }

    pub fn merge(&mut self, other: &Gradients) {
        for (i, g) in other.grads.iter().enumerate() {
            if let Some(g) = g {
                self.accumulate(ParamId(i), g);
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.grads.iter_mut().flatten() {
            g.mapv_inplace(|v| v * factor);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flatten()
            .map(|g| g.iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Array2<f64>)> {
        self.grads
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|g| (ParamId(i), g)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_independent_of_registration_order() {
        let mut a = ParamStore::new(7);
        a.normal("x.w", 3, 4, 0.1, ParamGroup::Heads);
        let y_a = a.normal("y.w", 2, 2, 0.1, ParamGroup::Heads);

        let mut b = ParamStore::new(7);
        let y_b = b.normal("y.w", 2, 2, 0.1, ParamGroup::Heads);
        assert_eq!(a.get(y_a), b.get(y_b));
    }

    #[test]
    fn digest_tracks_values() {
        let mut s = ParamStore::new(1);
        let id = s.normal("enc.w", 2, 2, 1.0, ParamGroup::Encoder);
        let before = s.digest(&["enc."]);
        s.get_mut(id)[[0, 0]] += 1.0;
        assert_ne!(before, s.digest(&["enc."]));
        assert_eq!(s.digest(&["other."]), ParamStore::new(1).digest(&["x"]));
    }
}
