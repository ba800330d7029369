use std::collections::HashMap;

use ndarray::ArrayD;

use crate::error::{Error, Result};

pub type Tensor = ArrayD<f64>;

/// Index of a parameter inside its [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// Named parameter tensors of one model, in insertion order.
///
/// Insertion order is part of the persisted checkpoint layout, so models
/// must register parameters deterministically.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = self.values.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(self.values.iter())
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    pub fn param_count(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// Replace every value with the same-shaped tensor from `other`, matched
    /// by name. Used by checkpoint loading.
    pub fn load_from(&mut self, tensors: &HashMap<String, Tensor>) -> Result<()> {
        for (name, value) in self.names.iter().zip(self.values.iter_mut()) {
            let incoming = tensors.get(name).ok_or_else(|| {
                Error::ModelNotReady(format!("checkpoint is missing tensor `{name}`"))
            })?;
            if incoming.shape() != value.shape() {
                return Err(Error::Shape {
                    ctx: "checkpoint tensor",
                    expected: format!("{:?}", value.shape()),
                    got: format!("{:?}", incoming.shape()),
                });
            }
            value.assign(incoming);
        }
        Ok(())
    }

    /// Flat little-endian byte image of all parameters, in insertion order.
    /// Feeds content fingerprints.
    pub fn byte_image(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.param_count() * 8);
        for v in &self.values {
            for x in v.iter() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }
}

/// Parameter gradients collected by one backward pass, keyed by [`ParamId`].
#[derive(Debug, Default)]
pub struct Gradients {
    grads: HashMap<usize, Tensor>,
}

impl Gradients {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn accumulate(&mut self, id: ParamId, grad: &Tensor) {
        match self.grads.get_mut(&id.0) {
            Some(existing) => *existing += grad,
            None => {
                self.grads.insert(id.0, grad.clone());
            }
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(&id.0)
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.grads.keys().copied().map(ParamId)
    }
}
