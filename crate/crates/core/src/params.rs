//! Named parameter storage and deterministic initialization.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Result, SanError};
use crate::tensor::{GradientMap, Tensor};

/// Initial slope of every PReLU unit.
pub const PRELU_INIT: f64 = 0.25;

/// All learnable tensors of a model, keyed by dotted name. Iteration order is
/// lexicographic, which fixes checkpoint layout and update order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, t: Tensor) {
        self.tensors.insert(name.to_string(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Parameters whose name starts with `prefix`.
    pub fn subset(&self, prefix: &str) -> ParamStore {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .filter(|(n, _)| n.starts_with(prefix))
                .map(|(n, t)| (n.clone(), t.clone()))
                .collect(),
        }
    }

    /// Overwrites every tensor of `other` into `self`; names and shapes must
    /// already exist here.
    pub fn overwrite_from(&mut self, other: &ParamStore) -> Result<()> {
        for (name, t) in &other.tensors {
            let slot = self
                .tensors
                .get_mut(name)
                .ok_or_else(|| SanError::Checkpoint(format!("unexpected parameter {name:?}")))?;
            if slot.shape() != t.shape() {
                return Err(SanError::Checkpoint(format!(
                    "parameter {name:?} has shape {:?}, expected {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t.clone();
        }
        Ok(())
    }

    /// Checks that `other` has exactly the same names and shapes.
    pub fn check_compatible(&self, other: &ParamStore) -> Result<()> {
        for (name, t) in &self.tensors {
            match other.tensors.get(name) {
                None => return Err(SanError::Checkpoint(format!("missing parameter {name:?}"))),
                Some(o) if o.shape() != t.shape() => {
                    return Err(SanError::Checkpoint(format!(
                        "parameter {name:?} has shape {:?}, expected {:?}",
                        o.shape(),
                        t.shape()
                    )))
                }
                Some(_) => {}
            }
        }
        if let Some(extra) = other.tensors.keys().find(|n| !self.tensors.contains_key(*n)) {
            return Err(SanError::Checkpoint(format!("unexpected parameter {extra:?}")));
        }
        Ok(())
    }

    /// True when every gradient has the shape of its parameter.
    pub fn matches_gradients(&self, grads: &GradientMap) -> bool {
        grads
            .iter()
            .all(|(n, g)| self.tensors.get(n).is_some_and(|p| p.shape() == g.shape()))
    }
}

/// RNG derived from `(seed, name)` only, so initialization does not depend on
/// the order in which modules are built.
pub fn named_rng(seed: u64, name: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    let digest: [u8; 32] = h.finalize().into();
    ChaCha8Rng::from_seed(digest)
}

/// Uniform(−a, a) with `a = sqrt(6 / (fan_in + fan_out))`.
pub fn glorot(seed: u64, name: &str, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let mut rng = named_rng(seed, name);
    let n = shape.iter().product();
    let data = (0..n).map(|_| a * (2.0 * rng.gen::<f64>() - 1.0)).collect();
    Tensor::from_parts(shape.to_vec(), data)
}

/// Builder used by the model components to register their parameters.
pub struct Initializer<'a> {
    pub seed: u64,
    pub store: &'a mut ParamStore,
}

impl Initializer<'_> {
    /// `[out×in]` weight plus `[out]` bias named `{name}.w` / `{name}.b`.
    pub fn linear(&mut self, name: &str, input: usize, output: usize) {
        let w = format!("{name}.w");
        self.store
            .insert(&w, glorot(self.seed, &w, &[output, input], input, output));
        self.store.insert(&format!("{name}.b"), Tensor::zeros(&[output]));
    }

    /// `[K×C×k×k]` kernels plus `[K]` bias.
    pub fn conv(&mut self, name: &str, input: usize, output: usize, k: usize) {
        let w = format!("{name}.w");
        let t = glorot(self.seed, &w, &[output, input, k, k], input * k * k, output * k * k);
        self.store.insert(&w, t);
        self.store.insert(&format!("{name}.b"), Tensor::zeros(&[output]));
    }

    pub fn prelu(&mut self, name: &str, channels: usize) {
        self.store.insert(name, Tensor::full(&[channels], PRELU_INIT));
    }

    pub fn matrix(&mut self, name: &str, rows: usize, cols: usize) {
        self.store
            .insert(name, glorot(self.seed, name, &[rows, cols], cols, rows));
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) {
        self.store.insert(name, Tensor::zeros(shape));
    }
}
