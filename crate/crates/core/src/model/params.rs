//! Named parameter sets and their binding onto a graph.

use crate::error::{Error, Result};
use crate::tensor::{Gradients, Graph, Precision, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use std::collections::BTreeMap;

/// Ordered `name -> tensor` map. Iteration order is the lexicographic name
/// order, which makes every traversal (checkpoints, updates) deterministic.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Params {
    map: BTreeMap<String, Tensor>,
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.map.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.map
            .get(name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.map
            .get_mut(name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Total number of scalar values.
    pub fn numel(&self) -> usize {
        self.map.values().map(Tensor::numel).sum()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.map.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    /// Entries whose name starts with `prefix`, with the prefix removed.
    pub fn strip_prefix(&self, prefix: &str) -> Params {
        let map = self
            .map
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(prefix).map(|s| (s.to_string(), v.clone())))
            .collect();
        Params { map }
    }

    /// Entries whose name starts with `prefix`, names kept.
    pub fn select(&self, prefix: &str) -> Params {
        let map = self
            .map
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        Params { map }
    }

    /// Copy with `prefix` prepended to every name.
    pub fn with_prefix(&self, prefix: &str) -> Params {
        let map = self
            .map
            .iter()
            .map(|(k, v)| (format!("{prefix}{k}"), v.clone()))
            .collect();
        Params { map }
    }

    pub fn extend(&mut self, other: Params) {
        self.map.extend(other.map);
    }

    pub fn round(&mut self, precision: Precision) {
        for t in self.map.values_mut() {
            precision.round_slice(t.data_mut());
        }
    }

    /// Errors unless both sets hold the same names with the same shapes.
    pub fn check_congruent(&self, other: &Params) -> Result<()> {
        let missing: Vec<String> = other
            .map
            .keys()
            .filter(|k| !self.map.contains_key(*k))
            .cloned()
            .collect();
        let unexpected: Vec<String> = self
            .map
            .keys()
            .filter(|k| !other.map.contains_key(*k))
            .cloned()
            .collect();
        if !missing.is_empty() || !unexpected.is_empty() {
            return Err(Error::ParamMismatch { missing, unexpected });
        }
        for (k, v) in &self.map {
            let o = &other.map[k];
            if v.shape() != o.shape() {
                return Err(Error::ParamMismatch {
                    missing: vec![format!("{k}{:?}", o.shape())],
                    unexpected: vec![format!("{k}{:?}", v.shape())],
                });
            }
        }
        Ok(())
    }

    /// Places every tensor on `g`, as trainable leaves or as constants.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Result<Bound> {
        let mut vars = BTreeMap::new();
        for (k, v) in &self.map {
            let var = if trainable {
                g.param(v.clone())?
            } else {
                g.input(v.clone())?
            };
            vars.insert(k.clone(), var);
        }
        Ok(Bound { vars })
    }
}

/// Graph handles for a bound [`Params`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::invalid(format!("parameter {name} is not bound")))
    }

    /// Points `name` at another variable, e.g. a leaf under test.
    pub fn replace(&mut self, name: &str, v: Var) {
        self.vars.insert(name.to_string(), v);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }

    /// Bound parameters that carry a gradient on `g`.
    pub fn tracked(&self, g: &Graph) -> usize {
        self.vars.values().filter(|&&v| g.requires_grad(v)).count()
    }

    /// Gradient per bound name; parameters the loss never reached get zeros.
    pub fn grads(&self, g: &Graph, grads: &Gradients) -> Params {
        let map = self
            .vars
            .iter()
            .map(|(k, &v)| {
                let t = grads
                    .get(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(g.shape(v).to_vec()));
                (k.clone(), t)
            })
            .collect();
        Params { map }
    }
}

/// Seeded initializers.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(rng: ChaCha8Rng) -> Self {
        Self { rng }
    }

    /// Normal(0, std) truncated to two standard deviations by resampling.
    pub fn trunc_normal(&mut self, shape: &[usize], std: f64) -> Tensor {
        Tensor::from_fn(shape.to_vec(), |_| loop {
            let z: f64 = StandardNormal.sample(&mut self.rng);
            if z.abs() <= 2.0 {
                break z * std;
            }
        })
    }

    pub fn uniform(&mut self, shape: &[usize], bound: f64) -> Tensor {
        Tensor::from_fn(shape.to_vec(), |_| self.rng.random_range(-bound..bound))
    }

    pub fn into_rng(self) -> ChaCha8Rng {
        self.rng
    }
}

/// Applies `x̂·gamma + beta` after a plain layer norm over the last axis.
pub(crate) fn layer_norm(g: &mut Graph, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let n = g.layernorm(x, 1e-6)?;
    let n = g.mul_bcast(n, p.var(&format!("{prefix}.g"))?)?;
    g.add_bcast(n, p.var(&format!("{prefix}.b"))?)
}

/// `x·W + b` on the last axis.
pub(crate) fn linear(g: &mut Graph, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let y = g.matmul(x, p.var(&format!("{prefix}.w"))?)?;
    g.add_bcast(y, p.var(&format!("{prefix}.b"))?)
}

pub(crate) fn init_linear(params: &mut Params, init: &mut Init, prefix: &str, i: usize, o: usize) {
    params.insert(format!("{prefix}.w"), init.trunc_normal(&[i, o], 0.02));
    params.insert(format!("{prefix}.b"), Tensor::zeros(vec![o]));
}

pub(crate) fn init_norm(params: &mut Params, prefix: &str, d: usize) {
    params.insert(format!("{prefix}.g"), Tensor::ones(vec![d]));
    params.insert(format!("{prefix}.b"), Tensor::zeros(vec![d]));
}
