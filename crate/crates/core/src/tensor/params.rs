use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{Element, Tensor};
use crate::error::{Error, Result};

/// Named trainable arrays, iterated in key order.
///
/// Keys follow `<network>/<layer>/<tensor-role>`, e.g. `generator/conv1/weight`.
#[derive(Clone, Default)]
pub struct ParamStore<E: Element> {
    entries: BTreeMap<String, Tensor<E>>,
}

impl<E: Element> std::fmt::Debug for ParamStore<E> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_map()
            .entries(self.entries.iter().map(|(k, v)| (k, v.shape())))
            .finish()
    }
}

impl<E: Element> ParamStore<E> {
    pub fn new() -> Self {
        ParamStore {
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<E>) {
        self.entries.insert(name.into(), value.detach().into_leaf());
    }

    /// Gaussian-initialised entry (zero mean, given std).
    pub fn insert_normal<R: Rng>(&mut self, name: impl Into<String>, shape: &[usize], std: f64, rng: &mut R) {
        let normal = Normal::new(0.0, std).expect("std must be finite and non-negative");
        let n: usize = shape.iter().product();
        let data: Vec<E> = (0..n).map(|_| E::from_f64_lossy(normal.sample(rng))).collect();
        self.insert(name, Tensor::from_vec(data, shape).expect("shape matches data"));
    }

    pub fn insert_zeros(&mut self, name: impl Into<String>, shape: &[usize]) {
        self.insert(name, Tensor::zeros(shape));
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<E>> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::Configuration(format!("missing parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    /// Replaces the values of an existing entry, keeping its shape.
    pub fn set_data(&mut self, name: &str, data: Vec<E>) -> Result<()> {
        let old = self.get(name)?;
        let t = Tensor::from_vec(data, old.shape())?;
        let requires_grad = old.requires_grad();
        let t = if requires_grad { t.into_leaf() } else { t };
        self.entries.insert(name.to_string(), t);
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<E>)> {
        self.entries.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|t| t.numel()).sum()
    }

    /// Copy whose entries do not require gradients (shares storage).
    pub fn frozen(&self) -> Self {
        ParamStore {
            entries: self.entries.iter().map(|(k, v)| (k.clone(), v.detach())).collect(),
        }
    }

    /// Copy whose entries are fresh gradient leaves (shares storage).
    pub fn trainable(&self) -> Self {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), v.detach().into_leaf()))
                .collect(),
        }
    }

    /// Entries whose key starts with `prefix`.
    pub fn with_prefix(&self, prefix: &str) -> Self {
        ParamStore {
            entries: self
                .entries
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    pub fn extend(&mut self, other: &ParamStore<E>) {
        for (k, v) in other.iter() {
            self.entries.insert(k.clone(), v.clone());
        }
    }

    /// Bitwise equality of names, shapes and values.
    pub fn bit_identical(&self, other: &ParamStore<E>) -> bool {
        self.entries.len() == other.entries.len()
            && self.entries.iter().zip(other.entries.iter()).all(|((ka, va), (kb, vb))| {
                ka == kb
                    && va.shape() == vb.shape()
                    && va
                        .data()
                        .iter()
                        .zip(vb.data())
                        .all(|(a, b)| a.to_f64().map(f64::to_bits) == b.to_f64().map(f64::to_bits))
            })
    }

    /// Largest absolute elementwise difference over shared keys.
    pub fn max_abs_diff(&self, other: &ParamStore<E>) -> f64 {
        let mut m = 0.0f64;
        for (k, a) in self.iter() {
            if let Ok(b) = other.get(k) {
                for (x, y) in a.data().iter().zip(b.data()) {
                    let d = (*x - *y).abs().to_f64().unwrap_or(f64::INFINITY);
                    if d > m || d.is_nan() {
                        m = d;
                    }
                }
            }
        }
        m
    }

    pub fn cast<F: Element>(&self) -> ParamStore<F> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|(k, v)| {
                    let t = v.cast::<F>();
                    (k.clone(), if v.requires_grad() { t.into_leaf() } else { t })
                })
                .collect(),
        }
    }
}
