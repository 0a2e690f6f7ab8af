use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::scalar::Scalar;

/// Index of a trainable tensor in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Index of a non-trainable state tensor (batch-norm running statistics).
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct BufferId(pub(crate) usize);

#[derive(Clone, Debug)]
pub struct ParamEntry<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub(crate) data: Arc<Vec<T>>,
}

impl<T> ParamEntry<T> {
    pub fn values(&self) -> &[T] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

#[derive(Clone, Debug)]
pub struct BufferEntry<T> {
    pub name: String,
    pub(crate) data: Vec<T>,
}

impl<T> BufferEntry<T> {
    pub fn values(&self) -> &[T] {
        &self.data
    }
}

/// Registry of trainable leaves and state buffers, in creation order.
///
/// Creation order is the registry order used by checkpoints and the
/// optimizer. Initialization draws from a seeded ChaCha stream so identical
/// construction sequences give bit-identical parameters.
#[derive(Clone, Debug)]
pub struct ParamStore<T> {
    params: Vec<ParamEntry<T>>,
    buffers: Vec<BufferEntry<T>>,
    rng: ChaCha8Rng,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new(seed: u64) -> Self {
        Self {
            params: Vec::new(),
            buffers: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn push(&mut self, name: String, shape: Vec<usize>, data: Vec<T>) -> ParamId {
        debug_assert!(
            !self.params.iter().any(|p| p.name == name),
            "duplicate parameter name {name}"
        );
        self.params.push(ParamEntry {
            name,
            shape,
            data: Arc::new(data),
        });
        ParamId(self.params.len() - 1)
    }

    /// Uniform init in `[-bound, bound]`.
    pub fn uniform(&mut self, name: impl Into<String>, shape: &[usize], bound: f64) -> ParamId {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| T::lit(self.rng.gen_range(-bound..=bound)))
            .collect();
        self.push(name.into(), shape.to_vec(), data)
    }

    pub fn constant(&mut self, name: impl Into<String>, shape: &[usize], value: f64) -> ParamId {
        let n: usize = shape.iter().product();
        self.push(name.into(), shape.to_vec(), vec![T::lit(value); n])
    }

    pub fn buffer(&mut self, name: impl Into<String>, len: usize, value: f64) -> BufferId {
        self.buffers.push(BufferEntry {
            name: name.into(),
            data: vec![T::lit(value); len],
        });
        BufferId(self.buffers.len() - 1)
    }

    pub fn params(&self) -> &[ParamEntry<T>] {
        &self.params
    }

    pub fn buffers(&self) -> &[BufferEntry<T>] {
        &self.buffers
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn buffer_ids(&self) -> Vec<BufferId> {
        (0..self.buffers.len()).map(BufferId).collect()
    }

    pub fn get(&self, id: ParamId) -> &ParamEntry<T> {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &[T] {
        &self.params[id.0].data
    }

    pub(crate) fn shared(&self, id: ParamId) -> &Arc<Vec<T>> {
        &self.params[id.0].data
    }

    /// Mutable access; copies the block first if a live graph still shares it.
    pub fn value_mut(&mut self, id: ParamId) -> &mut [T] {
        Arc::make_mut(&mut self.params[id.0].data).as_mut_slice()
    }

    pub fn buffer_value(&self, id: BufferId) -> &[T] {
        &self.buffers[id.0].data
    }

    pub fn buffer_mut(&mut self, id: BufferId) -> &mut [T] {
        &mut self.buffers[id.0].data
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.len()).sum()
    }

    pub fn scalar_count_of(&self, ids: &[ParamId]) -> usize {
        ids.iter().map(|&id| self.params[id.0].len()).sum()
    }

    /// Ids whose name starts with `prefix`.
    pub fn with_prefix(&self, prefix: &str) -> Vec<ParamId> {
        self.ids()
            .filter(|&id| self.params[id.0].name.starts_with(prefix))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_values() {
        let mut a = ParamStore::<f64>::new(7);
        let mut b = ParamStore::<f64>::new(7);
        let pa = a.uniform("w", &[3, 4], 0.5);
        let pb = b.uniform("w", &[3, 4], 0.5);
        assert_eq!(a.value(pa), b.value(pb));
        assert!(a.value(pa).iter().all(|v| v.abs() <= 0.5));
    }

    #[test]
    fn prefix_lookup() {
        let mut s = ParamStore::<f64>::new(0);
        s.constant("seg.enc.w", &[2], 0.0);
        s.constant("seg.dec.w", &[2], 0.0);
        s.constant("com.w", &[2], 0.0);
        assert_eq!(s.with_prefix("seg.").len(), 2);
        assert_eq!(s.find("com.w"), Some(ParamId(2)));
        assert_eq!(s.scalar_count(), 6);
    }
}
