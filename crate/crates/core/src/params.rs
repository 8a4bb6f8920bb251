//! Named parameter storage and gradient bookkeeping.

use crate::autodiff::{Graph, Var};
use crate::tensor::Tensor;
use crate::Rng;
use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ParamId(pub u32);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub tensor: Tensor,
}

/// Flat, append-only list of named tensors. Ids are positions.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        self.entries.push(ParamEntry {
            name: name.into(),
            tensor,
        });
        ParamId(self.entries.len() as u32 - 1)
    }

    /// Gaussian-initialized parameter.
    pub fn add_normal(&mut self, name: impl Into<String>, shape: &[usize], std: f64, rng: &mut Rng) -> ParamId {
        let mut t = Tensor::zeros(shape);
        rng.fill_normal(t.data_mut(), std);
        self.add(name, t)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0 as usize].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0 as usize].tensor
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0 as usize].name
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len() as u32).map(ParamId)
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries
            .iter()
            .position(|e| e.name == name)
            .map(|i| ParamId(i as u32))
    }

    pub fn numel(&self, ids: impl IntoIterator<Item = ParamId>) -> usize {
        ids.into_iter().map(|id| self.get(id).numel()).sum()
    }

    /// Little-endian `f64` bytes of the given parameters, in id order.
    pub fn snapshot_bytes(&self, ids: impl IntoIterator<Item = ParamId>) -> Vec<u8> {
        let mut ids: Vec<ParamId> = ids.into_iter().collect();
        ids.sort();
        let mut out = Vec::new();
        for id in ids {
            out.extend_from_slice(self.name(id).as_bytes());
            out.extend_from_slice(&self.get(id).to_f64_le_bytes());
        }
        out
    }
}

pub type TrainMask = BTreeSet<ParamId>;

/// Gradients keyed by parameter.
pub type Grads = BTreeMap<ParamId, Vec<f64>>;

/// A graph plus the parameters bound into it for one forward pass.
pub struct Session<'a> {
    pub graph: Graph,
    store: &'a ParamStore,
    trainable: Option<&'a TrainMask>,
    bound: BTreeMap<ParamId, Var>,
}

impl<'a> Session<'a> {
    /// Records a tape; only parameters in `trainable` receive gradients.
    pub fn train(store: &'a ParamStore, trainable: &'a TrainMask) -> Self {
        Session {
            graph: Graph::new(),
            store,
            trainable: Some(trainable),
            bound: BTreeMap::new(),
        }
    }

    /// Evaluation only.
    pub fn eval(store: &'a ParamStore) -> Self {
        Session {
            graph: Graph::no_grad(),
            store,
            trainable: None,
            bound: BTreeMap::new(),
        }
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    /// Leaf for parameter `id`, bound once per session.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let requires = self.trainable.is_some_and(|m| m.contains(&id));
        let v = self.graph.leaf(self.store.get(id).clone(), requires);
        self.bound.insert(id, v);
        v
    }

    /// Gradients of every bound trainable parameter after `backward`.
    /// Parameters the loss does not reach get zero gradients.
    pub fn grads(&self) -> Grads {
        let mut out = Grads::new();
        if let Some(mask) = self.trainable {
            for (&id, &v) in &self.bound {
                if mask.contains(&id) {
                    let g = self
                        .graph
                        .grad(v)
                        .map(|g| g.to_vec())
                        .unwrap_or_else(|| alloc::vec![0.0; self.store.get(id).numel()]);
                    out.insert(id, g);
                }
            }
        }
        out
    }
}
