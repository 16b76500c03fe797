//! Named parameter storage, shape declarations and the learning-rate tier
//! policy.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::graph::Mat;

/// Learning-rate tier of a parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tier {
    /// Normalization affine parameters inside the pretrained towers.
    Norm,
    /// Every parameter of an added module.
    Module,
    Frozen,
}

/// How a parameter is initialized for random (toy) weights.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Normal(f64),
    Identity,
}

/// Declared parameter: name, shape, initializer.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: (usize, usize),
    pub init: Init,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, shape: (usize, usize), init: Init) -> Self {
        Self {
            name: name.into(),
            shape,
            init,
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.0 * self.shape.1
    }

    /// Materializes the initial value. The random stream depends only on the
    /// seed and the parameter name, so declaration order never matters.
    pub fn materialize(&self, seed: u64) -> Mat {
        let (r, c) = self.shape;
        match self.init {
            Init::Zeros => Mat::zeros((r, c)),
            Init::Ones => Mat::ones((r, c)),
            Init::Identity => Mat::eye(r.max(c)).slice_move(ndarray::s![..r, ..c]),
            Init::Normal(std) => {
                let mut rng = ChaCha8Rng::seed_from_u64(name_seed(seed, &self.name));
                let normal = Normal::new(0.0, std).expect("finite std");
                Mat::from_shape_simple_fn((r, c), || normal.sample(&mut rng))
            }
        }
    }
}

pub(crate) fn name_seed(seed: u64, name: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

/// Name → value map. Values are shared so cloning a store is cheap.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    values: BTreeMap<String, Arc<Mat>>,
}

impl ParamStore {
    pub fn from_specs(specs: &[ParamSpec], seed: u64) -> Self {
        let mut store = Self::default();
        for spec in specs {
            store.insert(&spec.name, spec.materialize(seed));
        }
        store
    }

    pub fn insert(&mut self, name: &str, value: Mat) {
        self.values.insert(name.to_string(), Arc::new(value));
    }

    pub fn insert_arc(&mut self, name: &str, value: Arc<Mat>) {
        self.values.insert(name.to_string(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Mat> {
        self.values.get(name).map(|v| v.as_ref())
    }

    pub fn get_arc(&self, name: &str) -> Option<Arc<Mat>> {
        self.values.get(name).cloned()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.values.contains_key(name)
    }

    /// Mutable access; clones the buffer if it is shared.
    pub fn get_mut(&mut self, name: &str) -> Option<&mut Mat> {
        self.values.get_mut(name).map(Arc::make_mut)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.values.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Mat)> {
        self.values.iter().map(|(k, v)| (k.as_str(), v.as_ref()))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.values.values().map(|v| v.len()).sum()
    }

    /// SHA-256 over (name, shape, little-endian values) of the selected
    /// parameters, in name order.
    pub fn hash_where(&self, mut keep: impl FnMut(&str) -> bool) -> String {
        let mut h = Sha256::new();
        for (name, value) in &self.values {
            if !keep(name) {
                continue;
            }
            h.update(name.as_bytes());
            h.update((value.nrows() as u64).to_le_bytes());
            h.update((value.ncols() as u64).to_le_bytes());
            for v in value.iter() {
                h.update(v.to_le_bytes());
            }
        }
        hex(&h.finalize())
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Partition of every parameter name into learning-rate tiers.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParameterPolicy {
    pub tiers: BTreeMap<String, Tier>,
}

impl ParameterPolicy {
    pub fn tier(&self, name: &str) -> Option<Tier> {
        self.tiers.get(name).copied()
    }

    pub fn names_in(&self, tier: Tier) -> impl Iterator<Item = &str> {
        self.tiers
            .iter()
            .filter(move |(_, t)| **t == tier)
            .map(|(n, _)| n.as_str())
    }

    /// Names that receive gradients (everything not frozen).
    pub fn trainable(&self) -> BTreeSet<String> {
        self.tiers
            .iter()
            .filter(|(_, t)| **t != Tier::Frozen)
            .map(|(n, _)| n.clone())
            .collect()
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        matches!(self.tier(name), Some(Tier::Frozen) | None)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normal_init_depends_on_seed_and_name_only() {
        let a = ParamSpec::new("x.weight", (3, 4), Init::Normal(0.02));
        let b = ParamSpec::new("y.weight", (3, 4), Init::Normal(0.02));
        assert_eq!(a.materialize(7), a.materialize(7));
        assert_ne!(a.materialize(7), a.materialize(8));
        assert_ne!(a.materialize(7), b.materialize(7));
    }

    #[test]
    fn identity_init_is_eye() {
        let spec = ParamSpec::new("p", (3, 3), Init::Identity);
        assert_eq!(spec.materialize(0), Mat::eye(3));
    }

    #[test]
    fn hash_tracks_values_and_filter() {
        let mut s = ParamStore::default();
        s.insert("a", Mat::zeros((2, 2)));
        s.insert("b", Mat::ones((1, 2)));
        let h0 = s.hash_where(|n| n == "a");
        s.get_mut("b").unwrap()[[0, 0]] = 5.0;
        assert_eq!(h0, s.hash_where(|n| n == "a"));
        s.get_mut("a").unwrap()[[0, 0]] = 1e-300;
        assert_ne!(h0, s.hash_where(|n| n == "a"));
    }
}
