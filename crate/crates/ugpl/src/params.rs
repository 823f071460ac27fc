//! Named parameter and buffer storage shared by all model components.
//!
//! Trainable parameters are leased onto a [`crate::autograd::Tape`] per
//! forward pass; buffers hold non-trainable state (batch-norm running
//! statistics). Both are checkpointed by name.

use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BufferId(usize);

impl BufferId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
struct Entry {
    name: String,
    value: Tensor,
}

/// Registry of named parameters and buffers.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Entry>,
    buffers: Vec<Entry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(
            !self.params.iter().any(|e| e.name == name),
            "duplicate param {name}"
        );
        self.params.push(Entry { name, value });
        ParamId(self.params.len() - 1)
    }

    pub fn register_buffer(&mut self, name: impl Into<String>, value: Tensor) -> BufferId {
        let name = name.into();
        debug_assert!(
            !self.buffers.iter().any(|e| e.name == name),
            "duplicate buffer {name}"
        );
        self.buffers.push(Entry { name, value });
        BufferId(self.buffers.len() - 1)
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|e| e.value.numel()).sum()
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn buffer(&self, id: BufferId) -> &Tensor {
        &self.buffers[id.0].value
    }

    pub fn buffer_mut(&mut self, id: BufferId) -> &mut Tensor {
        &mut self.buffers[id.0].value
    }

    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    /// Zeroed gradient sink matching every parameter's shape.
    pub fn zero_grads(&self) -> Vec<Tensor> {
        self.params
            .iter()
            .map(|e| Tensor::zeros(e.value.shape().to_vec()))
            .collect()
    }

    /// All (name, tensor) pairs, parameters then buffers, in registration
    /// order. This is the checkpoint serialization order.
    pub fn named_entries(&self) -> Vec<(&str, &Tensor)> {
        self.params
            .iter()
            .chain(self.buffers.iter())
            .map(|e| (e.name.as_str(), &e.value))
            .collect()
    }

    /// Overwrite parameters and buffers from (name → tensor) pairs. Every
    /// entry in the store must be present with a matching shape.
    pub fn load_named(
        &mut self,
        entries: &std::collections::HashMap<String, Tensor>,
    ) -> Result<(), String> {
        for e in self.params.iter_mut().chain(self.buffers.iter_mut()) {
            let src = entries
                .get(&e.name)
                .ok_or_else(|| format!("checkpoint missing entry {}", e.name))?;
            if src.shape() != e.value.shape() {
                return Err(format!(
                    "checkpoint entry {} has shape {:?}, expected {:?}",
                    e.name,
                    src.shape(),
                    e.value.shape()
                ));
            }
            e.value = src.clone();
        }
        Ok(())
    }
}

/// Hierarchical name builder for registering module parameters.
#[derive(Debug, Clone)]
pub struct Scope {
    prefix: String,
}

impl Scope {
    pub fn root(name: &str) -> Self {
        Scope {
            prefix: name.to_string(),
        }
    }

    pub fn child(&self, name: &str) -> Scope {
        Scope {
            prefix: format!("{}.{}", self.prefix, name),
        }
    }

    pub fn name(&self, leaf: &str) -> String {
        format!("{}.{}", self.prefix, leaf)
    }
}
