//! Named parameter storage and deterministic initialization.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Learnable arrays keyed by canonical slash-separated paths such as
/// `stage2/sft0/cfia/q_proj/weight`. Insertion order is the canonical order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    paths: Vec<String>,
    tensors: Vec<Tensor>,
    index: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a new array. Panics on a duplicate path, which is a model-construction bug.
    pub fn insert(&mut self, path: impl Into<String>, value: Tensor) -> ParamId {
        let path = path.into();
        let id = self.tensors.len();
        if self.index.insert(path.clone(), id).is_some() {
            panic!("duplicate parameter path `{path}`");
        }
        self.paths.push(path);
        self.tensors.push(value);
        ParamId(id)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn path(&self, id: ParamId) -> &str {
        &self.paths[id.0]
    }

    pub fn find(&self, path: &str) -> Option<ParamId> {
        self.index.get(path).map(|&i| ParamId(i))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of learnable scalars.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.paths
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (p, t))| (ParamId(i), p.as_str(), t))
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.tensors.iter_mut()
    }
}

/// Creates parameters under a path prefix, drawing from a seeded stream.
pub struct ParamBuilder<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
    zero_residual: bool,
}

/// Seeded random stream owned by a model under construction.
pub struct InitRng(ChaCha8Rng);

impl InitRng {
    pub fn new(seed: u64) -> Self {
        Self(ChaCha8Rng::seed_from_u64(seed))
    }
}

impl<'a> ParamBuilder<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut InitRng, zero_residual: bool) -> Self {
        Self {
            store,
            rng: &mut rng.0,
            prefix: String::new(),
            zero_residual,
        }
    }

    /// Child builder whose paths are nested under `name`.
    pub fn sub(&mut self, name: &str) -> ParamBuilder<'_> {
        let prefix = if self.prefix.is_empty() {
            String::from(name)
        } else {
            format!("{}/{}", self.prefix, name)
        };
        ParamBuilder {
            store: self.store,
            rng: self.rng,
            prefix,
            zero_residual: self.zero_residual,
        }
    }

    fn path(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            String::from(name)
        } else {
            format!("{}/{}", self.prefix, name)
        }
    }

    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn uniform(&mut self, name: &str, shape: &[usize], fan_in: usize) -> ParamId {
        let bound = 1.0 / libm::sqrt(fan_in.max(1) as f64);
        let rng = &mut *self.rng;
        let t = Tensor::from_fn(shape, |_| rng.gen_range(-bound..bound));
        self.store.insert(self.path(name), t)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.store.insert(self.path(name), Tensor::zeros(shape))
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.store.insert(self.path(name), Tensor::full(shape, 1.0))
    }

    /// Weight of a projection that closes a residual branch: zero when the builder is in
    /// zero-residual mode (the block starts as the identity), uniform otherwise.
    pub fn residual(&mut self, name: &str, shape: &[usize], fan_in: usize) -> ParamId {
        if self.zero_residual {
            self.zeros(name, shape)
        } else {
            self.uniform(name, shape, fan_in)
        }
    }

    pub fn zero_residual(&self) -> bool {
        self.zero_residual
    }
}
