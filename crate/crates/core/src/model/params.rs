use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Ordered, named collection of trainable tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Float> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.tensors.iter_mut()
    }

    /// Replaces every tensor with the same-named, same-shaped one from `other`.
    pub fn load_from(&mut self, other: &ParamStore<T>) -> Result<()> {
        if other.len() != self.len() {
            return Err(Error::Config(format!(
                "checkpoint holds {} parameters, model expects {}",
                other.len(),
                self.len()
            )));
        }
        for (i, (name, t)) in other.iter().enumerate() {
            if name != self.names[i] || t.shape() != self.tensors[i].shape() {
                return Err(Error::Config(format!(
                    "checkpoint parameter {name} {:?} does not match model parameter {} {:?}",
                    t.shape(),
                    self.names[i],
                    self.tensors[i].shape()
                )));
            }
        }
        self.tensors.clone_from(&other.tensors);
        Ok(())
    }

    pub fn cast<U: Float>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }

    /// Records every parameter as a leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|t| {
                if trainable {
                    tape.param(t.shape().to_vec(), t.data().to_vec())
                } else {
                    tape.constant(t.shape().to_vec(), t.data().to_vec())
                }
                .expect("stored tensors are well formed")
            })
            .collect();
        Bound { vars }
    }

    /// Gradients of every parameter after `tape.backward`, zeros where the
    /// loss did not depend on a parameter.
    pub fn grads(&self, tape: &Tape<T>, bound: &Bound) -> Vec<Vec<T>> {
        self.tensors
            .iter()
            .zip(&bound.vars)
            .map(|(t, &v)| tape.grad(v).map_or_else(|| vec![T::zero(); t.numel()], <[T]>::to_vec))
            .collect()
    }

    /// Order-sensitive FNV-1a digest of names, shapes and raw values.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= u64::from(b);
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        for (name, t) in self.iter() {
            eat(name.as_bytes());
            for &e in t.shape() {
                eat(&(e as u64).to_le_bytes());
            }
            for &v in t.data() {
                eat(&v.as_f64().to_le_bytes());
            }
        }
        h
    }
}

/// The tape variables of a bound [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Helper that registers freshly initialized parameters under a name prefix.
pub struct Init<'a, T, R> {
    pub store: &'a mut ParamStore<T>,
    pub rng: &'a mut R,
    prefix: String,
}

impl<'a, T: Float, R: Rng> Init<'a, T, R> {
    pub fn new(store: &'a mut ParamStore<T>, rng: &'a mut R) -> Self {
        Self {
            store,
            rng,
            prefix: String::new(),
        }
    }

    /// Runs `f` with `name.` appended to the prefix.
    pub fn scope<X>(&mut self, name: &str, f: impl FnOnce(&mut Init<'_, T, R>) -> X) -> X {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        let mut inner = Init {
            store: self.store,
            rng: self.rng,
            prefix,
        };
        f(&mut inner)
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn tensor(&mut self, name: &str, tensor: Tensor<T>) -> ParamId {
        let name = self.full_name(name);
        self.store.add(name, tensor)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.tensor(name, Tensor::zeros(shape.to_vec()))
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.tensor(name, Tensor::full(shape.to_vec(), T::one()))
    }

    /// `U(−1/√fan_in, 1/√fan_in)`.
    pub fn uniform(&mut self, name: &str, shape: &[usize], fan_in: usize) -> ParamId {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let dist = Uniform::new(-bound, bound).expect("positive bound");
        let rng = &mut *self.rng;
        let t = Tensor::from_fn(shape.to_vec(), |_| T::lit(dist.sample(rng)));
        self.tensor(name, t)
    }
}
