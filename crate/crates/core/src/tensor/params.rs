use std::collections::HashMap;

use super::{Gradients, Result, SeededRng, Tensor, TensorError};

/// Index of a parameter inside its [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Ordered collection of named, trainable leaf tensors.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers `value` under `name`. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = self.tensors.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(value.detach().requires_grad());
        ParamId(id)
    }

    /// Glorot-uniform matrix `[fan_in × fan_out]`.
    pub fn xavier(&mut self, name: impl Into<String>, fan_in: usize, fan_out: usize, rng: &mut SeededRng) -> ParamId {
        self.add(name, rng.xavier(&[fan_in, fan_out], fan_in, fan_out))
    }

    pub fn zeros(&mut self, name: impl Into<String>, dims: &[usize]) -> ParamId {
        self.add(name, Tensor::zeros(dims))
    }

    pub fn ones(&mut self, name: impl Into<String>, dims: &[usize]) -> ParamId {
        self.add(name, Tensor::full(dims, 1.0))
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id_of(name).map(|id| self.get(id))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub(crate) fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    /// Overwrites the values of `name`, which must exist with matching dims.
    pub fn set(&mut self, name: &str, dims: &[usize], values: &[f64]) -> Result<()> {
        let id = self
            .id_of(name)
            .ok_or_else(|| TensorError::Contract(format!("unknown parameter {name}")))?;
        let t = &mut self.tensors[id.0];
        if t.dims() != dims {
            return Err(TensorError::Shape {
                op: "param_set",
                lhs: t.dims().to_vec(),
                rhs: dims.to_vec(),
            });
        }
        t.set_leaf_data(values);
        Ok(())
    }

    /// Names of parameters whose gradient is present and non-zero.
    pub fn touched(&self, grads: &Gradients) -> Vec<String> {
        self.ids()
            .filter(|&id| {
                grads
                    .get(self.get(id))
                    .is_some_and(|g| g.iter().any(|v| *v != 0.0))
            })
            .map(|id| self.name(id).to_string())
            .collect()
    }
}
