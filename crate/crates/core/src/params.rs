//! Named parameter storage and the per-step binding of parameters onto a tape.

use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::{NodeId, Tape};
use crate::error::{ensure, Result};
use crate::init;
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Trainable,
    /// Non-trainable state such as batch-norm running statistics.
    Buffer,
}

#[derive(Debug, Clone)]
pub struct ParamEntry<R> {
    pub name: String,
    pub value: Tensor<R>,
    pub kind: ParamKind,
}

/// Parameters in creation order. Names are unique.
#[derive(Debug, Clone)]
pub struct ParamStore<R> {
    entries: Vec<ParamEntry<R>>,
    seed: u64,
}

impl<R: Real> ParamStore<R> {
    pub fn new(seed: u64) -> Self {
        Self {
            entries: Vec::new(),
            seed,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn add(&mut self, name: &str, value: Tensor<R>, kind: ParamKind) -> ParamId {
        assert!(self.find(name).is_none(), "duplicate parameter name {name}");
        self.entries.push(ParamEntry {
            name: name.to_string(),
            value,
            kind,
        });
        ParamId(self.entries.len() - 1)
    }

    /// Uniform init in `[-bound, bound)`. The stream is seeded from the store
    /// seed and the parameter name, so values do not depend on build order.
    pub fn add_uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> ParamId {
        let mut rng = init::rng(self.seed ^ fnv1a(name));
        let t = init::uniform(&mut rng, shape, bound);
        self.add(name, t, ParamKind::Trainable)
    }

    pub fn add_constant(
        &mut self,
        name: &str,
        shape: &[usize],
        value: f64,
        kind: ParamKind,
    ) -> ParamId {
        self.add(name, Tensor::full(shape, R::from_f64(value)), kind)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries
            .iter()
            .position(|e| e.name == name)
            .map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<R> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<R> {
        &mut self.entries[id.0].value
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<R> {
        &self.entries[id.0]
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn entries(&self) -> &[ParamEntry<R>] {
        &self.entries
    }

    pub fn trainable_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.ids()
            .filter(|&id| self.entries[id.0].kind == ParamKind::Trainable)
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.trainable_ids().map(|id| self.get(id).numel()).sum()
    }

    /// Overwrites a parameter by name, checking the shape.
    pub fn set_by_name(&mut self, name: &str, value: Tensor<R>) -> Result<()> {
        let Some(id) = self.find(name) else {
            crate::error::bail!(Data, "unknown parameter '{}'", name);
        };
        ensure!(
            self.get(id).shape() == value.shape(),
            Shape,
            "parameter '{}' has shape {:?}, got {:?}",
            name,
            self.get(id).shape(),
            value.shape()
        );
        self.entries[id.0].value = value;
        Ok(())
    }

    pub fn cast<S: Real>(&self) -> ParamStore<S> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    value: e.value.cast(),
                    kind: e.kind,
                })
                .collect(),
            seed: self.seed,
        }
    }
}

fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; running averages are updated.
    Train,
    /// Frozen running statistics.
    Eval,
}

/// One forward/backward evaluation: a tape plus the parameter bindings on it.
pub struct Session<'a, R: Real> {
    pub tape: Tape<R>,
    pub params: &'a mut ParamStore<R>,
    pub mode: Mode,
    bound: Vec<Option<NodeId>>,
}

impl<'a, R: Real> Session<'a, R> {
    pub fn new(params: &'a mut ParamStore<R>, mode: Mode) -> Self {
        let n = params.len();
        Self {
            tape: Tape::new(),
            params,
            mode,
            bound: vec![None; n],
        }
    }

    /// Leaf for a parameter; bound at most once per session.
    pub fn param(&mut self, id: ParamId) -> NodeId {
        if let Some(node) = self.bound[id.0] {
            return node;
        }
        let entry = &self.params.entries[id.0];
        let node = match entry.kind {
            ParamKind::Trainable => self.tape.leaf(entry.value.clone()),
            ParamKind::Buffer => self.tape.constant(entry.value.clone()),
        };
        self.bound[id.0] = Some(node);
        node
    }

    pub fn constant(&mut self, value: Tensor<R>) -> NodeId {
        self.tape.constant(value)
    }

    pub fn input(&mut self, value: Tensor<R>) -> NodeId {
        self.tape.constant(value)
    }

    pub fn training(&self) -> bool {
        self.mode == Mode::Train
    }

    /// Gradients of bound trainable parameters after `tape.backward`.
    pub fn param_grads(&self) -> Vec<(ParamId, &Tensor<R>)> {
        self.bound
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.and_then(|n| self.tape.grad(n)).map(|g| (ParamId(i), g)))
            .collect()
    }

    pub fn bound_node(&self, id: ParamId) -> Option<NodeId> {
        self.bound[id.0]
    }
}
