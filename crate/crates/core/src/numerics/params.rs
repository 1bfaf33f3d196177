use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use super::tensor::{Scalar, Tensor};
use crate::error::{ensure, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Parameter<T = f32> {
    /// Dotted path, e.g. `lm.blocks.0.attn.q.w`.
    pub name: String,
    pub tensor: Tensor<T>,
    pub trainable: bool,
}

#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Ones,
    Normal(f64),
    Uniform(f64),
}

impl Init {
    pub fn sample<T: Scalar, R: Rng + ?Sized>(self, shape: &[usize], rng: &mut R) -> Tensor<T> {
        let n: usize = shape.iter().product();
        let data: Vec<T> = match self {
            Init::Zeros => vec![T::zero(); n],
            Init::Ones => vec![T::one(); n],
            Init::Normal(std) => (0..n)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(rng);
                    T::of(z * std)
                })
                .collect(),
            Init::Uniform(bound) => (0..n).map(|_| T::of(rng.random_range(-bound..bound))).collect(),
        };
        Tensor::new(shape.to_vec(), data).expect("init shape")
    }
}

/// Flat, name-indexed collection of model parameters.
///
/// Model structs only hold [`ParamId`]s; the weights live here so the same
/// model layout can run against `f32` and `f64` copies of the store.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T = f32> {
    params: Vec<Parameter<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>, trainable: bool) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter name {name}");
        let id = self.params.len();
        self.index.insert(name.clone(), id);
        self.params.push(Parameter {
            name,
            tensor,
            trainable,
        });
        ParamId(id)
    }

    pub fn init<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        init: Init,
        rng: &mut R,
    ) -> ParamId {
        let t = init.sample(shape, rng);
        self.add(name, t, true)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].tensor
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Result<&Parameter<T>> {
        self.id(name)
            .map(|id| self.get(id))
            .ok_or_else(|| Error::Config(format!("no parameter named {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    pub fn num_elements(&self, trainable_only: bool) -> usize {
        self.params
            .iter()
            .filter(|p| !trainable_only || p.trainable)
            .map(|p| p.tensor.numel())
            .sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            match &mut p.tensor.grad {
                Some(g) => g.iter_mut().for_each(|x| *x = T::zero()),
                None if p.trainable => p.tensor.grad = Some(vec![T::zero(); p.tensor.numel()]),
                None => {}
            }
        }
    }

    /// Marks every parameter whose name starts with `prefix` as (non-)trainable.
    pub fn set_trainable_prefix(&mut self, prefix: &str, trainable: bool) -> usize {
        let mut n = 0;
        for p in self.params.iter_mut().filter(|p| p.name.starts_with(prefix)) {
            p.trainable = trainable;
            if !trainable {
                p.tensor.grad = None;
            }
            n += 1;
        }
        n
    }

    /// Copies values for every name present in both stores and returns how many
    /// were copied. Shapes must agree.
    pub fn copy_values_from(&mut self, other: &ParamStore<T>, prefix: &str) -> Result<usize> {
        let mut n = 0;
        for p in other.params.iter().filter(|p| p.name.starts_with(prefix)) {
            if let Some(&i) = self.index.get(&p.name) {
                let dst = &mut self.params[i].tensor;
                ensure!(
                    dst.shape() == p.tensor.shape(),
                    Config,
                    "shape mismatch for {}: {:?} vs {:?}",
                    p.name,
                    dst.shape(),
                    p.tensor.shape()
                );
                dst.data_mut().copy_from_slice(p.tensor.data());
                n += 1;
            }
        }
        Ok(n)
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    tensor: p.tensor.cast(),
                    trainable: p.trainable,
                })
                .collect(),
            index: self.index.clone(),
        }
    }

    /// SHA-256 over names, shapes and little-endian `f64` values of every
    /// parameter under `prefix`.
    pub fn content_hash(&self, prefix: &str) -> String {
        let mut h = Sha256::new();
        for p in self.params.iter().filter(|p| p.name.starts_with(prefix)) {
            h.update(p.name.as_bytes());
            for d in p.tensor.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for x in p.tensor.data() {
                h.update(x.as_f64().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn hash_tracks_values_under_prefix_only() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut s = ParamStore::<f32>::new();
        let a = s.init("lm.a", &[2, 2], Init::Normal(1.0), &mut rng);
        s.init("vq.b", &[3], Init::Normal(1.0), &mut rng);
        let h = s.content_hash("lm.");
        let vq = s.id("vq.b").unwrap();
        s.get_mut(vq).tensor.data_mut()[0] += 1.0;
        assert_eq!(h, s.content_hash("lm."));
        s.get_mut(a).tensor.data_mut()[0] += 1.0;
        assert_ne!(h, s.content_hash("lm."));
    }

    #[test]
    fn freezing_by_prefix() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut s = ParamStore::<f32>::new();
        s.init("lm.a", &[2], Init::Zeros, &mut rng);
        s.init("lmx.a", &[2], Init::Zeros, &mut rng);
        assert_eq!(s.set_trainable_prefix("lm.", false), 1);
        assert!(!s.by_name("lm.a").unwrap().trainable);
        assert!(s.by_name("lmx.a").unwrap().trainable);
    }
}
