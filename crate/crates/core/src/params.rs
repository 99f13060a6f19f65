//! Named parameter storage shared by the model, the tape, and the optimizer.

use crate::error::{DstError, Result};
use crate::tensor::Tensor;
use std::collections::HashMap;

pub type ParamId = usize;

#[derive(Debug, Clone)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    trainable: Vec<bool>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore { names: Vec::new(), tensors: Vec::new(), trainable: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor, trainable: bool) -> ParamId {
        let id = self.tensors.len();
        self.names.push(name.into());
        self.tensors.push(tensor);
        self.trainable.push(trainable);
        id
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id]
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.trainable[id]
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.trainable[id] = trainable;
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        0..self.tensors.len()
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        (0..self.tensors.len()).filter(|&i| self.trainable[i]).collect()
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients keyed by parameter id, produced by `Tape::backward`.
#[derive(Debug, Default)]
pub struct Gradients {
    map: HashMap<ParamId, Tensor>,
}

impl Gradients {
    pub fn new() -> Self {
        Gradients { map: HashMap::new() }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.map.get(&id)
    }

    pub fn get_mut(&mut self, id: ParamId) -> Option<&mut Tensor> {
        self.map.get_mut(&id)
    }

    pub fn accumulate(&mut self, id: ParamId, grad: &Tensor) -> Result<()> {
        match self.map.get_mut(&id) {
            Some(existing) => {
                if !existing.same_shape(grad) {
                    return Err(DstError::ShapeMismatch {
                        expected: existing.shape().to_vec(),
                        got: grad.shape().to_vec(),
                    });
                }
                for (a, b) in existing.data_mut().iter_mut().zip(grad.data()) {
                    *a += b;
                }
            }
            None => {
                self.map.insert(id, grad.clone());
            }
        }
        Ok(())
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.map.keys().copied()
    }
}
