use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

use super::{Graph, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub tensor: Tensor,
}

/// Ordered, named collection of trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    /// Registers a parameter and returns its index.
    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> usize {
        self.params.push(Param {
            name: name.into(),
            tensor: tensor.with_requires_grad(true),
        });
        self.params.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, index: usize) -> &Param {
        &self.params[index]
    }

    pub fn get_mut(&mut self, index: usize) -> &mut Param {
        &mut self.params[index]
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    /// Total number of scalar parameters.
    pub fn num_elements(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    /// Records every parameter on `graph`, returning handles in store order.
    pub fn bind(&self, graph: &mut Graph) -> Vec<Var> {
        self.params.iter().map(|p| graph.param(&p.tensor)).collect()
    }

    /// Accumulates the gradients computed on `graph` into the parameters.
    /// A parameter the loss never reached gets a zero gradient.
    pub fn absorb_grads(&mut self, graph: &Graph, vars: &[Var]) -> Result<()> {
        for (p, v) in self.params.iter_mut().zip(vars) {
            match graph.grad(*v) {
                Some(g) => p.tensor.accumulate_grad(g)?,
                None => {
                    let zeros = vec![0.0; p.tensor.numel()];
                    p.tensor.accumulate_grad(&zeros)?;
                }
            }
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(|p| p.tensor.zero_grad());
    }

    /// SHA-256 over names, shapes and raw values, as lowercase hex.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for p in &self.params {
            h.update((p.name.len() as u64).to_le_bytes());
            h.update(p.name.as_bytes());
            for d in p.tensor.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in p.tensor.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Stochastic gradient descent with heavy-ball momentum and L2 weight decay:
/// `v ← μ·v + g + λ·p`, `p ← p − η·v`.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            lr,
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    /// One update over every parameter; gradients are left in place.
    pub fn step(&mut self, params: &mut ParamStore) -> Result<()> {
        if let Some(p) = params.iter().find(|p| p.tensor.grad().is_none()) {
            return Err(Error::MissingGrad(p.name.clone()));
        }
        if self.velocity.len() != params.len() {
            self.velocity = params.iter().map(|p| vec![0.0; p.tensor.numel()]).collect();
        }
        for (p, v) in params.iter_mut().zip(&mut self.velocity) {
            let grad = p.tensor.grad().map(<[f64]>::to_vec).unwrap_or_default();
            let values = p.tensor.data_mut();
            for ((w, vel), g) in values.iter_mut().zip(v.iter_mut()).zip(grad) {
                *vel = self.momentum * *vel + g + self.weight_decay * *w;
                *w -= self.lr * *vel;
            }
        }
        Ok(())
    }
}
