//! Learnable parameters and non-learnable buffers, addressed by stable ids.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BufferId(pub(crate) usize);

/// Which optimizer owns a parameter. Network weights and architecture logits never mix.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParamGroup {
    Weights,
    Architecture,
}

#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor,
    pub grad: Tensor,
    pub requires_grad: bool,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    buffers: Vec<(String, Tensor)>,
}

/// Serializable copy of every parameter value and buffer in a store.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoreSnapshot {
    pub params: Vec<(String, Tensor)>,
    pub buffers: Vec<(String, Tensor)>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, value: Tensor) -> ParamId {
        let grad = Tensor::zeros_like(&value);
        self.params.push(Parameter { name: name.into(), group, value, grad, requires_grad: true });
        ParamId(self.params.len() - 1)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor) -> BufferId {
        self.buffers.push((name.into(), value));
        BufferId(self.buffers.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn buffer(&self, id: BufferId) -> &Tensor {
        &self.buffers[id.0].1
    }

    pub fn buffer_mut(&mut self, id: BufferId) -> &mut Tensor {
        &mut self.buffers[id.0].1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self, group: ParamGroup) -> Vec<ParamId> {
        self.iter().filter(|(_, p)| p.group == group).map(|(id, _)| id).collect()
    }

    /// Number of learnable scalars in `group`.
    pub fn num_scalars(&self, group: ParamGroup) -> usize {
        self.params.iter().filter(|p| p.group == group).map(|p| p.value.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    pub fn set_requires_grad(&mut self, group: ParamGroup, on: bool) {
        for p in self.params.iter_mut().filter(|p| p.group == group) {
            p.requires_grad = on;
        }
    }

    pub fn snapshot(&self) -> StoreSnapshot {
        StoreSnapshot {
            params: self.params.iter().map(|p| (p.name.clone(), p.value.clone())).collect(),
            buffers: self.buffers.clone(),
        }
    }

    /// Overwrites values from a snapshot taken of an identically built store.
    pub fn restore(&mut self, snap: &StoreSnapshot) -> Result<()> {
        if snap.params.len() != self.params.len() || snap.buffers.len() != self.buffers.len() {
            return Err(Error::Config(format!(
                "snapshot has {} params / {} buffers, model has {} / {}",
                snap.params.len(),
                snap.buffers.len(),
                self.params.len(),
                self.buffers.len()
            )));
        }
        for (p, (name, value)) in self.params.iter_mut().zip(&snap.params) {
            if &p.name != name || p.value.shape() != value.shape() {
                return Err(Error::Config(format!(
                    "snapshot entry {name} {:?} does not match {} {:?}",
                    value.shape(),
                    p.name,
                    p.value.shape()
                )));
            }
            p.value = value.clone();
        }
        for ((name, buf), (snap_name, value)) in self.buffers.iter_mut().zip(&snap.buffers) {
            if name != snap_name || buf.shape() != value.shape() {
                return Err(Error::Config(format!("snapshot buffer {snap_name} does not match {name}")));
            }
            *buf = value.clone();
        }
        Ok(())
    }
}
