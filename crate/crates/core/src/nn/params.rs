use std::collections::HashMap;

use rand::Rng;

use crate::tensor::checkpoint::{Checkpoint, CheckpointError};
use crate::tensor::{Result, Tape, Tensor, TensorError, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How the optimizer treats a stored tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Trainable, with weight decay.
    Weight,
    /// Trainable, no weight decay (biases, norm affines).
    NoDecay,
    /// Architecture logits.
    Arch,
    /// Non-trainable state such as BN running statistics.
    Buffer,
}

impl ParamKind {
    pub fn trainable(self) -> bool {
        self != ParamKind::Buffer
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub tensor: Tensor,
    pub kind: ParamKind,
}

/// Named, ordered collection of all tensors a model owns.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor, kind: ParamKind) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name}"
        );
        self.by_name.insert(name.clone(), self.entries.len());
        self.entries.push(ParamEntry { name, tensor, kind });
        ParamId(self.entries.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].tensor
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn kind(&self, id: ParamId) -> ParamKind {
        self.entries[id.0].kind
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    /// Element count of trainable tensors (weights, biases, affines, logits).
    pub fn trainable_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.kind.trainable())
            .map(|e| e.tensor.len())
            .sum()
    }

    pub fn buffer_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| !e.kind.trainable())
            .map(|e| e.tensor.len())
            .sum()
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::new(
            self.entries
                .iter()
                .map(|e| (e.name.clone(), e.tensor.detached()))
                .collect(),
        )
    }

    /// Overwrites every stored tensor with the same-named checkpoint tensor.
    pub fn load_checkpoint(&mut self, ck: &Checkpoint) -> Result<(), CheckpointError> {
        for e in &mut self.entries {
            let t = ck.get(&e.name)?;
            if t.shape() != e.tensor.shape() {
                return Err(CheckpointError::Malformed(format!(
                    "tensor {:?} has shape {:?}, model expects {:?}",
                    e.name,
                    t.shape(),
                    e.tensor.shape()
                )));
            }
            e.tensor = t.detached();
        }
        Ok(())
    }

    pub fn apply_buffer_updates(&mut self, updates: Vec<(ParamId, Vec<f32>)>) {
        for (id, data) in updates {
            self.entries[id.0].tensor.data_mut().copy_from_slice(&data);
        }
    }
}

/// Whether normalization layers use batch statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// One forward pass: a tape plus the parameter bindings it has made.
pub struct Graph<'p> {
    pub tape: Tape,
    store: &'p ParamStore,
    bound: HashMap<ParamId, Var>,
    mode: Mode,
    buffer_updates: Vec<(ParamId, Vec<f32>)>,
}

impl<'p> Graph<'p> {
    pub fn new(store: &'p ParamStore, mode: Mode, grad: bool) -> Self {
        Graph {
            tape: if grad { Tape::new() } else { Tape::no_grad() },
            store,
            bound: HashMap::new(),
            mode,
            buffer_updates: Vec::new(),
        }
    }

    /// Training pass: gradients on, batch statistics.
    pub fn train(store: &'p ParamStore) -> Self {
        Graph::new(store, Mode::Train, true)
    }

    /// Inference pass: no gradients, running statistics.
    pub fn eval(store: &'p ParamStore) -> Self {
        Graph::new(store, Mode::Eval, false)
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    /// Binds a stored tensor onto the tape once per pass.
    pub fn param(&mut self, id: ParamId) -> Result<Var> {
        if let Some(&v) = self.bound.get(&id) {
            return Ok(v);
        }
        let e = self.store.entry(id);
        let t = e.tensor.detached().with_requires_grad(e.kind.trainable());
        let v = self.tape.leaf(t)?;
        self.bound.insert(id, v);
        Ok(v)
    }

    pub fn input(&mut self, t: Tensor) -> Result<Var> {
        self.tape.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.tape.value(v)
    }

    pub(crate) fn record_buffer(&mut self, id: ParamId, data: Vec<f32>) {
        self.buffer_updates.push((id, data));
    }

    pub fn take_buffer_updates(&mut self) -> Vec<(ParamId, Vec<f32>)> {
        std::mem::take(&mut self.buffer_updates)
    }

    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.tape.backward(loss)
    }

    /// Gradients for every bound trainable parameter, in binding order of id.
    pub fn param_grads(&self) -> Vec<(ParamId, Tensor)> {
        let mut out: Vec<(ParamId, Tensor)> = self
            .bound
            .iter()
            .filter_map(|(&id, &v)| self.tape.grad(v).map(|g| (id, g)))
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }

    pub fn grad_of(&self, id: ParamId) -> Option<Tensor> {
        self.bound.get(&id).and_then(|&v| self.tape.grad(v))
    }
}

/// Allocates and initializes parameters under a dotted name prefix.
pub struct ParamBuilder<'a, R: Rng> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut R,
    prefix: String,
}

impl<'a, R: Rng> ParamBuilder<'a, R> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut R) -> Self {
        ParamBuilder {
            store,
            rng,
            prefix: String::new(),
        }
    }

    pub fn name(&self, leaf: &str) -> String {
        if self.prefix.is_empty() {
            leaf.to_string()
        } else {
            format!("{}.{}", self.prefix, leaf)
        }
    }

    /// Runs `f` with `segment` appended to the prefix.
    pub fn scoped<T>(&mut self, segment: &str, f: impl FnOnce(&mut Self) -> T) -> T {
        let saved = self.prefix.clone();
        self.prefix = self.name(segment);
        let out = f(self);
        self.prefix = saved;
        out
    }

    pub fn add(&mut self, leaf: &str, t: Tensor, kind: ParamKind) -> ParamId {
        let name = self.name(leaf);
        self.store.add(name, t, kind)
    }
}

pub(crate) fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}
