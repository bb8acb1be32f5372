use std::cell::{Cell, RefCell};
use std::collections::{BTreeMap, HashSet};
use std::rc::Rc;

use rand::Rng;

use crate::{Float, Gradients, Tensor};

/// Parameter initialisation schemes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Constant(f64),
    Normal { std: f64 },
    Uniform { bound: f64 },
}

impl Init {
    /// He-normal for a ReLU layer with the given fan-in.
    pub fn he(fan_in: usize) -> Self {
        Init::Normal {
            std: (2.0 / fan_in as f64).sqrt(),
        }
    }

    pub fn sample<T: Float, R: Rng + ?Sized>(&self, shape: &[usize], rng: &mut R) -> Tensor<T> {
        match *self {
            Init::Zeros => Tensor::zeros(shape),
            Init::Ones => Tensor::ones(shape),
            Init::Constant(c) => Tensor::full(shape, T::from_f64_lossy(c)),
            Init::Normal { std } => Tensor::randn(shape, std, rng),
            Init::Uniform { bound } => Tensor::rand_uniform(shape, -bound, bound, rng),
        }
    }
}

struct VarInner<T: Float> {
    name: String,
    value: RefCell<Tensor<T>>,
    trainable: Cell<bool>,
}

/// A named, mutable parameter. Each call to [`Var::get`] within one step
/// returns the same leaf tensor, so gradients accumulate across uses.
pub struct Var<T: Float = f32>(Rc<VarInner<T>>);

impl<T: Float> Clone for Var<T> {
    fn clone(&self) -> Self {
        Var(Rc::clone(&self.0))
    }
}

impl<T: Float> std::fmt::Debug for Var<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var({}, {:?})", self.0.name, self.shape())
    }
}

impl<T: Float> Var<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>, trainable: bool) -> Self {
        let value = if trainable { value.requires_grad_() } else { value.detach() };
        Var(Rc::new(VarInner {
            name: name.into(),
            value: RefCell::new(value),
            trainable: Cell::new(trainable),
        }))
    }

    pub fn name(&self) -> &str {
        &self.0.name
    }

    pub fn get(&self) -> Tensor<T> {
        self.0.value.borrow().clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.0.value.borrow().shape().to_vec()
    }

    pub fn numel(&self) -> usize {
        self.0.value.borrow().numel()
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.0.value.borrow().to_vec()
    }

    pub fn is_trainable(&self) -> bool {
        self.0.trainable.get()
    }

    pub fn set_trainable(&self, trainable: bool) {
        self.0.trainable.set(trainable);
        let t = self.get();
        *self.0.value.borrow_mut() = if trainable { t.requires_grad_() } else { t.detach() };
    }

    /// Replaces the value; the shape is unchanged.
    pub fn set_data(&self, data: Vec<T>) {
        let shape = self.shape();
        let t = Tensor::from_vec(data, &shape);
        *self.0.value.borrow_mut() = if self.is_trainable() { t.requires_grad_() } else { t };
    }

    pub fn grad<'g>(&self, grads: &'g Gradients<T>) -> Option<&'g [T]> {
        grads.get(&self.get())
    }
}

/// Ordered collection of named parameters.
#[derive(Debug)]
pub struct VarStore<T: Float = f32> {
    vars: Vec<Var<T>>,
    names: HashSet<String>,
}

impl<T: Float> Default for VarStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> VarStore<T> {
    pub fn new() -> Self {
        VarStore {
            vars: Vec::new(),
            names: HashSet::new(),
        }
    }

    /// Creates and registers a trainable parameter.
    pub fn var<R: Rng + ?Sized>(&mut self, name: &str, shape: &[usize], init: Init, rng: &mut R) -> Var<T> {
        let v = Var::new(name, init.sample(shape, rng), true);
        self.push(v.clone());
        v
    }

    pub fn push(&mut self, var: Var<T>) {
        assert!(
            self.names.insert(var.name().to_string()),
            "duplicate parameter name {}",
            var.name()
        );
        self.vars.push(var);
    }

    pub fn vars(&self) -> &[Var<T>] {
        &self.vars
    }

    pub fn trainable(&self) -> Vec<Var<T>> {
        self.vars.iter().filter(|v| v.is_trainable()).cloned().collect()
    }

    pub fn freeze(&self) {
        for v in &self.vars {
            v.set_trainable(false);
        }
    }

    pub fn num_params(&self) -> usize {
        self.vars.iter().map(Var::numel).sum()
    }

    pub fn get(&self, name: &str) -> Option<&Var<T>> {
        self.vars.iter().find(|v| v.name() == name)
    }

    /// FNV-1a over names, shapes and value bit patterns.
    pub fn checksum(&self) -> u64 {
        let mut h = Fnv64::new();
        for v in &self.vars {
            h.write(v.name().as_bytes());
            for d in v.shape() {
                h.write(&(d as u64).to_le_bytes());
            }
            for x in v.to_vec() {
                h.write(&x.to_f64_lossy().to_bits().to_le_bytes());
            }
        }
        h.finish()
    }

    pub fn named_values(&self) -> Vec<(String, Vec<usize>, Vec<T>)> {
        self.vars
            .iter()
            .map(|v| (v.name().to_string(), v.shape(), v.to_vec()))
            .collect()
    }

    /// Loads values by name; every registered parameter must be present with a matching shape.
    pub fn load(&self, values: &BTreeMap<String, (Vec<usize>, Vec<T>)>) -> Result<(), LoadError> {
        for v in &self.vars {
            let (shape, data) = values
                .get(v.name())
                .ok_or_else(|| LoadError::Missing(v.name().to_string()))?;
            if *shape != v.shape() {
                return Err(LoadError::Shape {
                    name: v.name().to_string(),
                    expected: v.shape(),
                    found: shape.clone(),
                });
            }
            v.set_data(data.clone());
        }
        Ok(())
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum LoadError {
    #[error("parameter `{0}` missing from checkpoint")]
    Missing(String),
    #[error("parameter `{name}` has shape {found:?}, expected {expected:?}")]
    Shape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
}

/// 64-bit FNV-1a.
#[derive(Debug, Clone)]
pub struct Fnv64(u64);

impl Fnv64 {
    pub fn new() -> Self {
        Fnv64(0xcbf2_9ce4_8422_2325)
    }

    pub fn write(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= u64::from(b);
            self.0 = self.0.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }

    pub fn finish(&self) -> u64 {
        self.0
    }
}

impl Default for Fnv64 {
    fn default() -> Self {
        Self::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn same_seed_same_checksum() {
        let mk = || {
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            let mut vs = VarStore::<f32>::new();
            vs.var("w", &[3, 4], Init::he(4), &mut rng);
            vs.var("b", &[3], Init::Zeros, &mut rng);
            vs.checksum()
        };
        assert_eq!(mk(), mk());
    }

    #[test]
    fn frozen_vars_produce_no_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut vs = VarStore::<f64>::new();
        let w = vs.var("w", &[2], Init::Ones, &mut rng);
        vs.freeze();
        let loss = w.get().sqr().sum_all();
        assert!(!loss.requires_grad());
        assert!(w.grad(&loss.backward()).is_none());
    }
}
