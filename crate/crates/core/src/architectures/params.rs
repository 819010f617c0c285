use indexmap::IndexMap;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::numerics::{Bindings, Real, Tensor};

/// How a parameter is initialized.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Normal(f64),
    /// Uniform on `[-bound, bound]`.
    Uniform(f64),
}

/// Declared parameter: name, shape and initializer.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, shape: &[usize], init: Init) -> Self {
        Self { name: name.into(), shape: shape.to_vec(), init }
    }

    /// Linear-layer weight `[fan_in, fan_out]` with the usual `1/√fan_in` bound.
    pub fn linear(name: impl Into<String>, fan_in: usize, fan_out: usize) -> Self {
        Self::new(name, &[fan_in, fan_out], Init::Uniform(1.0 / (fan_in as f64).sqrt()))
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn sample(&self, rng: &mut ChaCha8Rng) -> Tensor {
        match self.init {
            Init::Zeros => Tensor::zeros(&self.shape),
            Init::Ones => Tensor::ones(&self.shape),
            Init::Normal(std) => {
                let d = Normal::new(0.0, std).expect("finite std");
                Tensor::from_fn(&self.shape, |_| d.sample(rng) as f32)
            }
            Init::Uniform(bound) => {
                let d = Uniform::new_inclusive(-bound, bound);
                Tensor::from_fn(&self.shape, |_| rng.sample(d) as f32)
            }
        }
    }
}

/// Named parameter tensors in declaration order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T = f32> {
    map: IndexMap<String, Tensor<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { map: IndexMap::new() }
    }

    /// Inserts a parameter; returns the previous value if the name existed.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Option<Tensor<T>> {
        self.map.insert(name.into(), value)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.map.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.map.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor<T>> {
        self.map.shift_remove(name)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.map.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.map.values().map(Tensor::len).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore { map: self.map.iter().map(|(k, v)| (k.clone(), v.cast())).collect() }
    }

    /// Names starting with any of `prefixes`.
    pub fn matching<'a>(&'a self, prefixes: &'a [String]) -> impl Iterator<Item = &'a str> + 'a {
        self.names().filter(move |n| prefixes.iter().any(|p| n.starts_with(p.as_str())))
    }

    /// True when both stores have the same names, shapes and bit patterns.
    pub fn bitwise_eq(&self, other: &Self) -> bool {
        self.map.len() == other.map.len()
            && self.map.iter().zip(&other.map).all(|((ka, va), (kb, vb))| ka == kb && va.bitwise_eq(vb))
    }
}

impl ParamStore<f32> {
    /// Samples every spec in order from one generator.
    pub fn from_specs(specs: &[ParamSpec], rng: &mut ChaCha8Rng) -> Self {
        let mut store = Self::new();
        for spec in specs {
            let prev = store.insert(spec.name.clone(), spec.sample(rng));
            assert!(prev.is_none(), "duplicate parameter name {}", spec.name);
        }
        store
    }
}

impl<T: Real> Bindings<T> for ParamStore<T> {
    fn lookup(&self, name: &str) -> Option<&Tensor<T>> {
        self.map.get(name)
    }
}

impl<T> FromIterator<(String, Tensor<T>)> for ParamStore<T> {
    fn from_iter<I: IntoIterator<Item = (String, Tensor<T>)>>(iter: I) -> Self {
        Self { map: iter.into_iter().collect() }
    }
}
