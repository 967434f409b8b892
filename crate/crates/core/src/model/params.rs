use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::tensor::Tensor;
use super::ModelError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named learnable tensors in insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<ParamId, ModelError> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(ModelError::Config(format!("duplicate parameter {name}")));
        }
        let id = ParamId(self.tensors.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor);
        Ok(id)
    }

    /// Adds a tensor with entries drawn from `normal(0, std)`.
    pub fn add_normal<R: Rng>(
        &mut self,
        name: &str,
        shape: Vec<usize>,
        std: f64,
        rng: &mut R,
    ) -> Result<ParamId, ModelError> {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0, std).map_err(|e| ModelError::Config(e.to_string()))?;
        let data = (0..n).map(|_| dist.sample(rng)).collect();
        self.add(name, Tensor::new(shape, data)?)
    }

    pub fn add_filled(
        &mut self,
        name: &str,
        shape: Vec<usize>,
        value: f64,
    ) -> Result<ParamId, ModelError> {
        let n: usize = shape.iter().product();
        self.add(name, Tensor::new(shape, vec![value; n])?)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
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

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn element_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }
}

/// Per-parameter gradient buffers; `None` for parameters a graph never touched.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn empty(params: &ParamStore) -> Self {
        Self {
            grads: vec![None; params.len()],
        }
    }

    pub(crate) fn from_parts(grads: Vec<Option<Vec<f64>>>) -> Self {
        Self { grads }
    }

    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `id`, zeros when untouched.
    pub fn dense(&self, id: ParamId, params: &ParamStore) -> Vec<f64> {
        self.get(id)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; params.get(id).len()])
    }

    pub fn accumulate(&mut self, other: &Gradients) {
        for (mine, theirs) in self.grads.iter_mut().zip(&other.grads) {
            match (mine.as_mut(), theirs) {
                (Some(m), Some(t)) => m.iter_mut().zip(t).for_each(|(a, b)| *a += b),
                (None, Some(t)) => *mine = Some(t.clone()),
                _ => {}
            }
        }
    }

    pub fn scale(&mut self, c: f64) {
        for g in self.grads.iter_mut().flatten() {
            g.iter_mut().for_each(|v| *v *= c);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().flatten().flatten().all(|v| v.is_finite())
    }

    /// Copies the buffers into each parameter's gradient slot.
    pub fn attach(&self, params: &mut ParamStore) -> Result<(), ModelError> {
        for id in params.ids().collect::<Vec<_>>() {
            let g = self.dense(id, params);
            params.get_mut(id).set_grad(g)?;
        }
        Ok(())
    }
}
