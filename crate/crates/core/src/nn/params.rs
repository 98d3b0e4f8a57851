use std::sync::Arc;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use sha2::{Digest, Sha256};

use super::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId {
    store: u64,
    idx: usize,
}

impl ParamId {
    pub fn index(self) -> usize {
        self.idx
    }
}

static NEXT_STORE: AtomicU64 = AtomicU64::new(1);

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Arc<Tensor>,
}

/// Named parameter tensors of one model. Values are reference counted so a
/// forward graph can borrow them without copying; the optimizer writes
/// through `Arc::make_mut` once the graph is gone.
///
/// Each store carries a tag so one graph can mix parameters of several
/// stores; clones share the tag of their source.
#[derive(Clone, Debug)]
pub struct ParamStore {
    tag: u64,
    params: Vec<Param>,
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self {
            tag: NEXT_STORE.fetch_add(1, Ordering::Relaxed),
            params: Vec::new(),
        }
    }

    fn id(&self, idx: usize) -> ParamId {
        ParamId {
            store: self.tag,
            idx,
        }
    }

    /// Whether `id` was issued by this store (or a clone of it).
    pub fn owns(&self, id: ParamId) -> bool {
        id.store == self.tag && id.idx < self.params.len()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(
            self.params.iter().all(|p| p.name != name),
            "duplicate parameter {name}"
        );
        self.params.push(Param {
            name,
            value: Arc::new(value),
        });
        self.id(self.params.len() - 1)
    }

    pub fn randn<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        std: f32,
        rng: &mut R,
    ) -> ParamId {
        self.add(name, Tensor::randn(shape, std, rng))
    }

    pub fn zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::zeros(shape))
    }

    pub fn ones(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::full(shape, 1.0))
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[self.check(id)].value
    }

    pub(crate) fn shared(&self, id: ParamId) -> Arc<Tensor> {
        Arc::clone(&self.params[self.check(id)].value)
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        let i = self.check(id);
        Arc::make_mut(&mut self.params[i].value)
    }

    fn check(&self, id: ParamId) -> usize {
        assert_eq!(id.store, self.tag, "parameter id from another store");
        id.idx
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (self.id(i), p))
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(|i| self.id(i))
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// SHA-256 over names, shapes and the exact bit patterns of every value.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for p in &self.params {
            h.update(p.name.as_bytes());
            for d in p.value.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in p.value.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Copies values from `other` for every parameter with a matching name
    /// and shape. Returns the number of tensors copied.
    pub fn load_matching(&mut self, other: &ParamStore) -> usize {
        let mut n = 0;
        for p in &mut self.params {
            if let Some(src) = other.params.iter().find(|q| q.name == p.name) {
                if src.value.shape() == p.value.shape() {
                    p.value = Arc::clone(&src.value);
                    n += 1;
                }
            }
        }
        n
    }
}
