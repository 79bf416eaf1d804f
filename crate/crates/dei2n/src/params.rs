//! Named parameter storage, shared by the model, the optimizer, checkpoints,
//! and the gradient checker.
//!
//! A [`ParamSet`] is an ordered list of named f64 tensors. Order is
//! significant everywhere: initialization draws, optimizer state, checkpoint
//! layout, and gradient accumulation all follow insertion order, which is
//! what makes runs bit-reproducible.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, TensorId};

#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl ParamTensor {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Ordered, name-addressable collection of parameter tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    tensors: Vec<ParamTensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a tensor and returns its index. Names must be unique.
    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) -> usize {
        let name = name.into();
        debug_assert!(
            self.index_of(&name).is_none(),
            "duplicate parameter name {name}"
        );
        let numel: usize = shape.iter().product();
        assert_eq!(numel, data.len(), "parameter {name}: shape/data mismatch");
        self.tensors.push(ParamTensor { name, shape, data });
        self.tensors.len() - 1
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.tensors.iter().position(|t| t.name == name)
    }

    pub fn get(&self, name: &str) -> Option<&ParamTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn tensors(&self) -> &[ParamTensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [ParamTensor] {
        &mut self.tensors
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn total_len(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    /// Inserts every tensor into `g` as a gradient-tracked leaf, in order.
    /// The returned ids are parallel to `tensors()`.
    pub fn bind(&self, g: &mut Graph) -> Vec<TensorId> {
        self.tensors
            .iter()
            .map(|t| g.param(t.data.clone(), t.shape.clone()))
            .collect()
    }

    /// L2 norm per tensor, for divergence diagnostics.
    pub fn norms(&self) -> Vec<(String, f64)> {
        self.tensors
            .iter()
            .map(|t| {
                let sq: f64 = t.data.iter().map(|v| v * v).sum();
                (t.name.clone(), sq.sqrt())
            })
            .collect()
    }
}

// ── Initializers ────────────────────────────────────────────────────────────

/// Uniform draw in [-lim, lim], one value per element.
pub fn uniform_init(rng: &mut ChaCha8Rng, n: usize, lim: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-lim..lim)).collect()
}

/// Glorot-style scaled uniform for a dense layer of the given fan-in/out.
pub fn glorot_init(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Vec<f64> {
    let lim = (6.0 / (fan_in + fan_out) as f64).sqrt();
    uniform_init(rng, fan_in * fan_out, lim)
}
