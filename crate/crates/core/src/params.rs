//! Named parameter tensors and their registration on a [`Graph`].

use std::collections::BTreeMap;
use std::ops::Index;

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::scalar::Scalar;

/// Parameters keyed by dotted name (`"encoder.conv0.weight"`). The first
/// path segment is the owning module's namespace.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<F> {
    tensors: BTreeMap<String, ArrayD<F>>,
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        Self {
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: ArrayD<F>) {
        self.tensors.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&ArrayD<F>> {
        self.tensors.get(name).ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut ArrayD<F>> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ArrayD<F>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut ArrayD<F>)> {
        self.tensors.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    /// Names under `namespace.`.
    pub fn names_in<'a>(&'a self, namespace: &'a str) -> impl Iterator<Item = &'a String> + 'a {
        self.tensors
            .keys()
            .filter(move |k| k.split('.').next() == Some(namespace))
    }

    pub fn namespaces(&self) -> Vec<String> {
        let mut out: Vec<String> = self
            .tensors
            .keys()
            .filter_map(|k| k.split('.').next().map(str::to_string))
            .collect();
        out.dedup();
        out
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(|t| t.iter().all(|v| v.is_finite()))
    }

    pub fn cast<G: Scalar>(&self) -> ParamStore<G> {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.mapv(|x| G::of(x.as_f64()))))
                .collect(),
        }
    }

    /// Adds every tensor to the graph, trainable or as constants.
    pub fn register(&self, g: &mut Graph<F>, trainable: bool) -> ParamVars {
        ParamVars {
            vars: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), g.leaf(v.clone(), trainable)))
                .collect(),
        }
    }
}

/// Graph handles of a registered [`ParamStore`].
#[derive(Debug, Clone, Default)]
pub struct ParamVars {
    vars: BTreeMap<String, Var>,
}

impl ParamVars {
    pub fn get(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

impl FromIterator<(String, Var)> for ParamVars {
    fn from_iter<I: IntoIterator<Item = (String, Var)>>(iter: I) -> Self {
        Self {
            vars: iter.into_iter().collect(),
        }
    }
}

impl Index<&str> for ParamVars {
    type Output = Var;

    fn index(&self, name: &str) -> &Var {
        self.vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` was never registered"))
    }
}

pub fn zeros<F: Scalar>(shape: &[usize]) -> ArrayD<F> {
    ArrayD::zeros(IxDyn(shape))
}

pub fn normal<F: Scalar>(rng: &mut impl Rng, std: f64, shape: &[usize]) -> ArrayD<F> {
    let dist = Normal::new(0.0, std).expect("std is finite and non-negative");
    ArrayD::from_shape_simple_fn(IxDyn(shape), || F::of(dist.sample(rng)))
}

/// He-normal weights for a layer with `fan_in` inputs feeding a ReLU.
pub fn he_normal<F: Scalar>(rng: &mut impl Rng, fan_in: usize, shape: &[usize]) -> ArrayD<F> {
    normal(rng, (2.0 / fan_in.max(1) as f64).sqrt(), shape)
}
