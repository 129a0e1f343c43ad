//! Named parameter storage with gradient slots.

use crate::nn::graph::{Gradients, Graph, NodeId};
use crate::nn::tensor::Tensor;
use crate::{Error, Result};
use rand::Rng;
use rand_chacha::ChaCha20Rng;

/// A named collection of trainable tensors. Iteration order is insertion
/// order, so checkpoints and optimizer state are deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParameterSet {
    names: Vec<String>,
    values: Vec<Tensor>,
    grads: Vec<Tensor>,
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> usize {
        let grad = Tensor::zeros(value.shape());
        self.names.push(name.into());
        self.values.push(value);
        self.grads.push(grad);
        self.values.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, idx: usize) -> &str {
        &self.names[idx]
    }

    pub fn value(&self, idx: usize) -> &Tensor {
        &self.values[idx]
    }

    pub fn value_mut(&mut self, idx: usize) -> &mut Tensor {
        &mut self.values[idx]
    }

    pub fn grad(&self, idx: usize) -> &Tensor {
        &self.grads[idx]
    }

    pub fn grad_mut(&mut self, idx: usize) -> &mut Tensor {
        &mut self.grads[idx]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(self.values.iter())
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            for v in g.data_mut() {
                *v = 0.0;
            }
        }
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Replace every value from another set with identical names/shapes.
    pub fn load_from(&mut self, other: &ParameterSet) -> Result<()> {
        if self.names != other.names {
            return Err(Error::Checkpoint("parameter name mismatch".into()));
        }
        for (dst, src) in self.values.iter_mut().zip(&other.values) {
            if dst.shape() != src.shape() {
                return Err(Error::Checkpoint("parameter shape mismatch".into()));
            }
            *dst = src.clone();
        }
        Ok(())
    }
}

/// Leaf nodes for one [`ParameterSet`] on a graph, in set order.
pub struct ParamNodes {
    pub ids: Vec<NodeId>,
}

/// Register every parameter as a graph leaf.
pub fn bind(graph: &mut Graph, params: &ParameterSet) -> ParamNodes {
    let ids = params.values.iter().map(|v| graph.leaf(v.clone())).collect();
    ParamNodes { ids }
}

/// Zero the set's gradient slots, then pull this backward pass's gradients
/// into them.
pub fn apply_grads(params: &mut ParameterSet, nodes: &ParamNodes, grads: &Gradients) {
    params.zero_grads();
    accumulate_grads(params, nodes, grads);
}

/// Pull gradients into the set's slots without zeroing first (explicit
/// retention across passes).
pub fn accumulate_grads(params: &mut ParameterSet, nodes: &ParamNodes, grads: &Gradients) {
    for (idx, id) in nodes.ids.iter().enumerate() {
        if let Some(g) = grads.try_get(*id) {
            params.grads[idx].add_assign(g);
        }
    }
}

/// Kaiming-uniform fan-in initialization with the gain for LeakyReLU.
pub fn kaiming_uniform(shape: &[usize], negative_slope: f64, rng: &mut ChaCha20Rng) -> Tensor {
    let fan_in: usize = shape[1..].iter().product::<usize>().max(1);
    let gain = (2.0 / (1.0 + negative_slope * negative_slope)).sqrt();
    let bound = gain * (3.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("kaiming shape")
}

/// Rows drawn uniformly on the unit sphere; no row is all-zero.
pub fn unit_sphere_rows(rows: usize, dim: usize, rng: &mut ChaCha20Rng) -> Tensor {
    let mut data = Vec::with_capacity(rows * dim);
    for _ in 0..rows {
        loop {
            let row: Vec<f64> = (0..dim)
                .map(|_| {
                    // Box-Muller
                    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
                    let u2: f64 = rng.gen_range(0.0..1.0);
                    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
                })
                .collect();
            let norm: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 1e-8 {
                data.extend(row.iter().map(|v| v / norm));
                break;
            }
        }
    }
    Tensor::new(vec![rows, dim], data).expect("sphere shape")
}
