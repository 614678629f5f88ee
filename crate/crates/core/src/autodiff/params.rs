use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Index of a parameter inside its [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered collection of trainable tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(tensor.with_requires_grad(true));
        ParamId(self.tensors.len() - 1)
    }

    /// Uniform with variance `1/fan_in`, so a linear layer preserves the
    /// second moment of unit-variance inputs.
    pub fn add_unit_gain(
        &mut self,
        name: impl Into<String>,
        shape: Vec<usize>,
        fan_in: usize,
        rng: &mut ChaCha8Rng,
    ) -> ParamId {
        let bound = (3.0 / fan_in.max(1) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
        self.add(name, Tensor::new(shape, data).expect("shape product matches"))
    }

    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn add_uniform(
        &mut self,
        name: impl Into<String>,
        shape: Vec<usize>,
        fan_in: usize,
        rng: &mut ChaCha8Rng,
    ) -> ParamId {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
        self.add(name, Tensor::new(shape, data).expect("shape product matches"))
    }

    pub fn add_const(&mut self, name: impl Into<String>, shape: Vec<usize>, value: f64) -> ParamId {
        let n: usize = shape.iter().product();
        self.add(name, Tensor::new(shape, vec![value; n]).expect("shape product matches"))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Registers every parameter as a graph leaf. Frozen stores produce
    /// constants, so no gradient flows into them.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|t| g.leaf(t.clone().with_requires_grad(trainable)))
            .collect();
        Bound { vars }
    }

    /// Hash over names, shapes and the exact bits of every value.
    pub fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for (n, t) in self.names.iter().zip(&self.tensors) {
            n.hash(&mut h);
            t.shape().hash(&mut h);
            for v in t.data() {
                v.to_bits().hash(&mut h);
            }
        }
        h.finish()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    /// Copies values from `other`, which must have identical names and shapes.
    pub fn copy_from(&mut self, other: &ParamStore) -> Result<()> {
        if self.names != other.names {
            return Err(Error::Checkpoint("parameter names differ".into()));
        }
        for (dst, src) in self.tensors.iter_mut().zip(&other.tensors) {
            if dst.shape() != src.shape() {
                return Err(Error::Checkpoint(format!(
                    "shape {:?} vs {:?}",
                    dst.shape(),
                    src.shape()
                )));
            }
            dst.data_mut().copy_from_slice(src.data());
        }
        Ok(())
    }
}

/// A [`ParamStore`] as registered in one graph.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Per-parameter gradients after `Graph::backward`.
    pub fn grads(&self, g: &Graph) -> Vec<Option<Vec<f64>>> {
        self.vars.iter().map(|&v| g.grad(v).map(<[f64]>::to_vec)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn uniform_init_respects_bound_and_seed() {
        let mut a = ParamStore::new();
        let mut b = ParamStore::new();
        let id = a.add_uniform("w", vec![4, 8, 3], 24, &mut ChaCha8Rng::seed_from_u64(3));
        b.add_uniform("w", vec![4, 8, 3], 24, &mut ChaCha8Rng::seed_from_u64(3));
        let bound = 1.0 / 24f64.sqrt();
        assert!(a.get(id).data().iter().all(|v| v.abs() <= bound));
        assert_eq!(a.fingerprint(), b.fingerprint());
    }

    #[test]
    fn fingerprint_tracks_single_bit() {
        let mut s = ParamStore::new();
        let id = s.add_const("a", vec![3], 1.0);
        let f0 = s.fingerprint();
        let v = s.get(id).data()[1];
        s.get_mut(id).data_mut()[1] = f64::from_bits(v.to_bits() + 1);
        assert_ne!(f0, s.fingerprint());
    }

    #[test]
    fn frozen_binding_yields_no_grads() {
        let mut s = ParamStore::new();
        let id = s.add_const("a", vec![2], 1.5);
        let mut g = Graph::new();
        let b = s.bind(&mut g, false);
        let y = g.sum(b.var(id));
        g.backward(y).unwrap();
        assert!(b.grads(&g)[0].is_none());

        let mut g = Graph::new();
        let b = s.bind(&mut g, true);
        let y = g.sum(b.var(id));
        g.backward(y).unwrap();
        assert_eq!(b.grads(&g)[0].as_deref(), Some(&[1.0, 1.0][..]));
    }
}
