//! Named parameter storage and initialization.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Ordered map from module path (`"dcformer.enc1.0.attn.qkv.weight"`) to tensor.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        let name = name.into();
        if let Some(&i) = self.index.get(&name) {
            self.tensors[i] = t;
        } else {
            self.index.insert(name.clone(), self.names.len());
            self.names.push(name);
            self.tensors.push(t);
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.tensors[i])
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter_mut())
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Zeroes every parameter whose name satisfies `pred`.
    pub fn zero_matching(&mut self, pred: impl Fn(&str) -> bool) {
        for (name, t) in self.iter_mut() {
            if pred(name) {
                t.data_mut().fill(0.0);
            }
        }
    }

    /// Copies values from `other`, requiring identical names and shapes.
    ///
    /// Nothing is modified when any parameter is missing or mis-shaped; the
    /// error names the first offending parameter in this store's order.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        for (name, t) in self.iter() {
            match other.get(name) {
                None => return Err(Error::shape(format!("parameter `{name}` missing from source"))),
                Some(src) if src.shape() != t.shape() => {
                    return Err(Error::shape(format!(
                        "parameter `{name}`: expected shape {:?}, found {:?}",
                        t.shape(),
                        src.shape()
                    )))
                }
                Some(_) => {}
            }
        }
        for (name, t) in self.iter_mut() {
            *t = other.get(name).expect("validated above").clone();
        }
        Ok(())
    }
}

/// How a freshly built model sets its weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitPolicy {
    /// Uniform fan-in weights everywhere.
    Standard,
    /// Standard, but every residual-branch output layer (and the network's
    /// output convolution) starts at zero so the model is the identity.
    ZeroResidual,
    /// Every parameter, including norm gains, is zero.
    AllZero,
}

/// Draws initial tensors in a fixed order from one RNG stream.
pub struct Initializer<'a> {
    pub store: &'a mut ParamStore,
    pub rng: ChaCha8Rng,
    pub policy: InitPolicy,
}

impl Initializer<'_> {
    fn uniform(&mut self, shape: &[usize], bound: f64) -> Tensor {
        if self.policy == InitPolicy::AllZero {
            return Tensor::zeros(shape);
        }
        Tensor::from_fn(shape, |_| self.rng.random_range(-bound..bound))
    }

    /// Fan-in scaled weight; `residual_out` marks a residual-branch output.
    pub fn weight(&mut self, name: &str, shape: &[usize], fan_in: usize, residual_out: bool) {
        let t = if residual_out && self.policy != InitPolicy::Standard {
            Tensor::zeros(shape)
        } else {
            self.uniform(shape, 1.0 / (fan_in as f64).sqrt())
        };
        self.store.insert(name, t);
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) {
        self.store.insert(name, Tensor::zeros(shape));
    }

    /// Ones, or zeros under [`InitPolicy::AllZero`].
    pub fn ones(&mut self, name: &str, shape: &[usize]) {
        let v = if self.policy == InitPolicy::AllZero { 0.0 } else { 1.0 };
        self.store.insert(name, Tensor::full(shape, v));
    }
}
