//! Named parameter storage.
//!
//! Parameters live as plain `f64` buffers so a trained model is `Send + Sync`
//! and can be shared across threads for inference. Each forward pass binds
//! the store to fresh leaf tensors, and the gradients are read back from
//! those leaves after `backward`.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub type SeededRng = rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, shape: &[usize], data: Vec<f64>) -> Result<()> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::Dimension {
                op: "param insert",
                lhs: shape.to_vec(),
                rhs: vec![data.len()],
            });
        }
        if self.index.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        self.index.insert(name.to_string(), self.params.len());
        self.params.push(Param {
            name: name.to_string(),
            shape: shape.to_vec(),
            data,
        });
        Ok(())
    }

    /// Glorot-uniform matrix `fan_in × fan_out`.
    pub fn insert_xavier(&mut self, name: &str, fan_in: usize, fan_out: usize, rng: &mut SeededRng) -> Result<()> {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        let data = (0..fan_in * fan_out).map(|_| dist.sample(rng)).collect();
        self.insert(name, &[fan_in, fan_out], data)
    }

    pub fn insert_normal(&mut self, name: &str, shape: &[usize], std: f64, rng: &mut impl Rng) -> Result<()> {
        let dist = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
        let n = shape.iter().product();
        let data = (0..n).map(|_| dist.sample(rng)).collect();
        self.insert(name, shape, data)
    }

    pub fn insert_constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<()> {
        self.insert(name, shape, vec![value; shape.iter().product()])
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.index.get(name).map(|&i| &mut self.params[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    /// Fresh gradient-tracking leaves for one forward/backward pass.
    pub fn bind(&self) -> Bound {
        let tensors = self
            .params
            .iter()
            .map(|p| Tensor::param(&p.shape, p.data.clone()).expect("shape checked on insert"))
            .collect();
        Bound {
            tensors,
            index: self.index.clone(),
        }
    }

    /// Constant (non-tracking) tensors, for inference.
    pub fn bind_frozen(&self) -> Bound {
        let tensors = self
            .params
            .iter()
            .map(|p| Tensor::new(&p.shape, p.data.clone()).expect("shape checked on insert"))
            .collect();
        Bound {
            tensors,
            index: self.index.clone(),
        }
    }
}

/// Parameters bound to tensors for a single graph.
pub struct Bound {
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Tensor> {
        self.index
            .get(name)
            .map(|&i| self.tensors[i].clone())
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))
    }

    /// Gradients in store order; parameters backward never reached get zeros.
    pub fn grads(&self) -> Vec<Vec<f64>> {
        self.tensors
            .iter()
            .map(|t| t.grad().unwrap_or_else(|| vec![0.0; t.numel()]))
            .collect()
    }
}
