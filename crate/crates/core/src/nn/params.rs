use std::collections::{BTreeMap, HashMap};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Gradients, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Weights are optimized; buffers (batch-norm running statistics) are not.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamKind {
    Weight,
    Buffer,
}

#[derive(Debug, Clone)]
pub struct ParamEntry<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub kind: ParamKind,
    pub frozen: bool,
}

/// Named, ordered parameter storage shared by every model.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, kind: ParamKind) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::invalid("param_store", format!("duplicate parameter `{name}`")));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push(ParamEntry {
            name,
            value,
            kind,
            frozen: false,
        });
        Ok(ParamId(self.entries.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<T> {
        &self.entries[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn entries(&self) -> impl Iterator<Item = (ParamId, &ParamEntry<T>)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        let e = &self.entries[id.0];
        e.kind == ParamKind::Weight && !e.frozen
    }

    /// Freezes every parameter whose name starts with `prefix`; returns how many matched.
    pub fn freeze_prefix(&mut self, prefix: &str) -> usize {
        let mut n = 0;
        for e in self.entries.iter_mut().filter(|e| e.name.starts_with(prefix)) {
            e.frozen = true;
            n += 1;
        }
        n
    }

    pub fn num_trainable(&self) -> usize {
        self.ids()
            .filter(|&id| self.is_trainable(id))
            .map(|id| self.value(id).numel())
            .sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    value: e.value.cast(),
                    kind: e.kind,
                    frozen: e.frozen,
                })
                .collect(),
            index: self.index.clone(),
        }
    }

    /// Copies every parameter of `other` whose name, with `prefix` prepended, exists here.
    pub fn copy_from(&mut self, other: &ParamStore<T>, prefix: &str) -> Result<usize> {
        let mut n = 0;
        for e in &other.entries {
            let name = format!("{prefix}{}", e.name);
            let id = self
                .find(&name)
                .ok_or_else(|| Error::Checkpoint(format!("no parameter `{name}` to load into")))?;
            if self.value(id).shape() != e.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}`: shape {:?} vs {:?}",
                    self.value(id).shape(),
                    e.value.shape()
                )));
            }
            *self.value_mut(id) = e.value.clone();
            n += 1;
        }
        Ok(n)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

/// One forward pass: binds stored parameters into a graph on first use and
/// collects batch-norm running-statistic updates for the caller to apply.
pub struct Session<'a, T: Scalar> {
    pub graph: &'a mut Graph<T>,
    store: &'a ParamStore<T>,
    bound: BTreeMap<ParamId, Var>,
    mode: Mode,
    no_grad: bool,
    stat_updates: Vec<(ParamId, Tensor<T>)>,
    rng: ChaCha8Rng,
}

impl<'a, T: Scalar> Session<'a, T> {
    pub fn new(graph: &'a mut Graph<T>, store: &'a ParamStore<T>, mode: Mode) -> Self {
        Session {
            graph,
            store,
            bound: BTreeMap::new(),
            mode,
            no_grad: false,
            stat_updates: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    /// Seeds the stream used for dropout masks.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        self
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let requires_grad = !self.no_grad && self.store.is_trainable(id);
        let v = self.graph.leaf(self.store.value(id).clone(), requires_grad);
        self.bound.insert(id, v);
        v
    }

    /// Binds a parameter to an existing graph variable instead of its stored value.
    pub fn bind(&mut self, id: ParamId, v: Var) {
        self.bound.insert(id, v);
    }

    pub fn buffer(&self, id: ParamId) -> &Tensor<T> {
        self.store.value(id)
    }

    pub(crate) fn record_stat(&mut self, id: ParamId, value: Tensor<T>) {
        if !self.no_grad {
            self.stat_updates.push((id, value));
        }
    }

    pub fn take_stat_updates(&mut self) -> Vec<(ParamId, Tensor<T>)> {
        std::mem::take(&mut self.stat_updates)
    }

    /// Runs `f` in eval mode with every parameter it touches held constant.
    pub fn frozen<R>(&mut self, f: impl FnOnce(&mut Self) -> R) -> R {
        let (mode, no_grad) = (self.mode, self.no_grad);
        self.mode = Mode::Eval;
        self.no_grad = true;
        let out = f(self);
        self.mode = mode;
        self.no_grad = no_grad;
        out
    }

    /// Gradient of every bound trainable parameter, zero when unreachable from the loss.
    pub fn param_grads(&self, grads: &Gradients<T>) -> Vec<(ParamId, Tensor<T>)> {
        self.bound
            .iter()
            .filter(|(id, v)| self.store.is_trainable(**id) && self.graph.requires_grad(**v))
            .map(|(&id, &v)| {
                let g = grads
                    .get(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(self.store.value(id).shape()));
                (id, g)
            })
            .collect()
    }
}

/// Applies collected running-statistic updates, skipping frozen entries.
pub fn apply_stat_updates<T: Scalar>(store: &mut ParamStore<T>, updates: Vec<(ParamId, Tensor<T>)>) {
    for (id, v) in updates {
        if !store.entry(id).frozen {
            *store.value_mut(id) = v;
        }
    }
}
