//! Named parameter storage and plain gradient descent.

use std::collections::HashMap;
use std::sync::Arc;

use crate::array::DenseArray;
use crate::error::{Result, TensorError};
use crate::tape::{Gradients, Tape, Var};

/// Ordered, named set of learnable arrays.
///
/// Insertion order is stable, so iteration, serialization and gradient
/// vectors all line up by position.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Arc<DenseArray>>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: DenseArray) -> Result<usize> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(TensorError::InvalidArgument(format!(
                "duplicate parameter name {name}"
            )));
        }
        let id = self.values.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(Arc::new(value));
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.numel()).sum()
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&DenseArray> {
        self.id(name).map(|i| self.values[i].as_ref())
    }

    pub fn value(&self, id: usize) -> &DenseArray {
        &self.values[id]
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &DenseArray)> {
        self.names
            .iter()
            .map(String::as_str)
            .zip(self.values.iter().map(Arc::as_ref))
    }

    /// Replaces a parameter's value; the shape must not change.
    pub fn set(&mut self, id: usize, value: DenseArray) -> Result<()> {
        if self.values[id].shape() != value.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "set_param",
                lhs: self.values[id].shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        self.values[id] = Arc::new(value);
        Ok(())
    }

    pub fn value_mut(&mut self, id: usize) -> &mut DenseArray {
        Arc::make_mut(&mut self.values[id])
    }

    /// Places every parameter on `tape` as a differentiable leaf.
    pub fn bind(&self, tape: &Tape) -> Vec<Var> {
        self.values.iter().map(|v| tape.leaf(Arc::clone(v))).collect()
    }

    /// Gradients for the bound parameters, aligned with this store.
    pub fn collect_grads(&self, bound: &[Var], grads: &Gradients) -> Vec<Option<DenseArray>> {
        bound.iter().map(|v| grads.get(v).cloned()).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// One step of plain stochastic gradient descent: `p ← p − lr·g`.
///
/// Parameters without a gradient are left untouched.
pub fn sgd_update(params: &mut ParamStore, grads: &[Option<DenseArray>], lr: f64) -> Result<()> {
    if !(lr >= 0.0) {
        return Err(TensorError::InvalidArgument(format!(
            "learning rate must be non-negative, got {lr}"
        )));
    }
    if grads.len() != params.len() {
        return Err(TensorError::InvalidArgument(format!(
            "{} gradients for {} parameters",
            grads.len(),
            params.len()
        )));
    }
    for (id, g) in grads.iter().enumerate() {
        let Some(g) = g else { continue };
        if g.shape() != params.value(id).shape() {
            return Err(TensorError::ShapeMismatch {
                op: "sgd_update",
                lhs: params.value(id).shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
    }
    if lr == 0.0 {
        return Ok(());
    }
    for (id, g) in grads.iter().enumerate() {
        if let Some(g) = g {
            let p = params.value_mut(id);
            for (pv, gv) in p.data_mut().iter_mut().zip(g.data()) {
                *pv -= lr * gv;
            }
        }
    }
    Ok(())
}

/// L2 norm over all present gradients.
pub fn grad_norm(grads: &[Option<DenseArray>]) -> f64 {
    grads
        .iter()
        .flatten()
        .flat_map(|g| g.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}
