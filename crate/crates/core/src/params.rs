//! Named parameter storage, graph binding and the Adam optimizer.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Grads, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Disjoint parameter partitions of the model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ParamGroup {
    /// Shared encoder.
    Encoder,
    /// Decoder of one task.
    Head(usize),
    /// Task-specific input layer of the joint-space mapping.
    MappingInput(usize),
    /// Shared mapping trunk.
    MappingTrunk,
    /// Auxiliary network producing the per-layer modulation vectors.
    Conditioner,
    /// Per-task log-variances for uncertainty weighting.
    Uncertainty,
    /// Dedicated `s → t` network of the direct/perceptual baselines.
    PairNet(usize, usize),
    Discriminator,
}

impl ParamGroup {
    pub fn is_mapping(self) -> bool {
        matches!(
            self,
            ParamGroup::MappingInput(_) | ParamGroup::MappingTrunk | ParamGroup::Conditioner | ParamGroup::PairNet(..)
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    by_name: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter {name}");
        self.by_name.insert(name.clone(), self.entries.len());
        self.entries.push(ParamEntry { name, group, value });
        ParamId(self.entries.len() - 1)
    }

    /// Kaiming-style uniform initialisation `U(−√(6/fan_in), √(6/fan_in))`.
    pub fn add_uniform(
        &mut self,
        name: impl Into<String>,
        group: ParamGroup,
        shape: &[usize],
        fan_in: usize,
        rng: &mut impl Rng,
    ) -> ParamId {
        let bound = (6.0 / fan_in as f64).sqrt();
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
        self.add(name, group, Tensor::from_vec(shape, data).expect("sized"))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn group_ids(&self, group: ParamGroup) -> Vec<ParamId> {
        self.ids().filter(|&id| self.entries[id.0].group == group).collect()
    }

    /// Total scalar count over parameters accepted by `filter`.
    pub fn count(&self, filter: impl Fn(ParamGroup) -> bool) -> usize {
        self.entries.iter().filter(|e| filter(e.group)).map(|e| e.value.len()).sum()
    }

    /// Replaces every value from `(name, tensor)` pairs; names and shapes must
    /// match the existing layout.
    pub fn load_values(&mut self, values: Vec<(String, Tensor)>) -> Result<()> {
        if values.len() != self.entries.len() {
            return Err(Error::Format(format!(
                "expected {} parameter arrays, got {}",
                self.entries.len(),
                values.len()
            )));
        }
        for (name, t) in values {
            let id = self.id(&name).ok_or_else(|| Error::Format(format!("unknown parameter {name}")))?;
            if self.entries[id.0].value.shape() != t.shape() {
                return Err(Error::Format(format!("shape mismatch for {name}")));
            }
            self.entries[id.0].value = t;
        }
        Ok(())
    }
}

/// A graph under construction together with the parameters bound into it.
///
/// Parameters whose group is frozen enter the graph as constants and so
/// receive no gradient.
pub struct Session<'a> {
    pub graph: Graph,
    store: &'a ParamStore,
    bound: Vec<Option<Var>>,
    bound_const: Vec<Option<Var>>,
    frozen: Vec<ParamGroup>,
    freeze_all_but: Option<Box<dyn Fn(ParamGroup) -> bool + 'a>>,
    frozen_scope: bool,
}

impl<'a> Session<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Self {
            graph: Graph::new(),
            store,
            bound: vec![None; store.len()],
            bound_const: vec![None; store.len()],
            frozen: Vec::new(),
            freeze_all_but: None,
            frozen_scope: false,
        }
    }

    /// Session in which only groups accepted by `trainable` get gradients.
    pub fn with_trainable(store: &'a ParamStore, trainable: impl Fn(ParamGroup) -> bool + 'a) -> Self {
        let mut s = Self::new(store);
        s.freeze_all_but = Some(Box::new(trainable));
        s
    }

    pub fn freeze(&mut self, group: ParamGroup) {
        self.frozen.push(group);
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    fn is_trainable(&self, group: ParamGroup) -> bool {
        !self.frozen.contains(&group) && self.freeze_all_but.as_ref().map_or(true, |f| f(group))
    }

    /// Runs `f` with every parameter lookup returning a constant copy, so
    /// the computation inside contributes no parameter gradients.
    pub fn with_frozen<T>(&mut self, f: impl FnOnce(&mut Self) -> T) -> T {
        let prev = std::mem::replace(&mut self.frozen_scope, true);
        let out = f(self);
        self.frozen_scope = prev;
        out
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if self.frozen_scope {
            if let Some(v) = self.bound_const[id.0] {
                return v;
            }
            let v = self.graph.stop_gradient(self.store.entry(id).value.clone());
            self.bound_const[id.0] = Some(v);
            return v;
        }
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let entry = self.store.entry(id);
        let v = if self.is_trainable(entry.group) {
            self.graph.variable(entry.value.clone())
        } else {
            self.graph.constant(entry.value.clone())
        };
        self.bound[id.0] = Some(v);
        v
    }

    /// Backpropagates `loss` and returns gradients aligned with the store.
    /// Parameters that were never bound, or are frozen, get `None`.
    pub fn backward(&self, loss: Var) -> ParamGrads {
        let mut grads = self.graph.backward(loss);
        ParamGrads { grads: self.bound.iter().map(|b| b.and_then(|v| grads.take(v))).collect() }
    }

    /// Session over a graph that replays recorded stop-gradient values.
    pub fn replaying(store: &'a ParamStore, stops: Vec<Tensor>) -> Self {
        let mut s = Self::new(store);
        s.graph = Graph::with_stop_values(stops);
        s
    }

    pub fn raw_backward(&self, loss: Var) -> Grads {
        self.graph.backward(loss)
    }
}

pub struct ParamGrads {
    grads: Vec<Option<Tensor>>,
}

impl ParamGrads {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().flatten().all(Tensor::is_finite)
    }
}

/// Adam with per-group learning-rate multipliers.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    steps: Vec<u64>,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: store.entries.iter().map(|e| Tensor::zeros(e.value.shape())).collect(),
            v: store.entries.iter().map(|e| Tensor::zeros(e.value.shape())).collect(),
            steps: vec![0; store.len()],
        }
    }

    /// Updates every parameter that has a gradient; `lr` gives the step size
    /// per group.
    pub fn step(&mut self, store: &mut ParamStore, grads: &ParamGrads, lr: impl Fn(ParamGroup) -> f64) {
        for (i, entry) in store.entries.iter_mut().enumerate() {
            let Some(g) = grads.grads[i].as_ref() else {
                continue;
            };
            self.steps[i] += 1;
            let t = self.steps[i] as i32;
            let bc1 = 1.0 - self.beta1.powi(t);
            let bc2 = 1.0 - self.beta2.powi(t);
            let rate = lr(entry.group);
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (((p, &gi), mi), vi) in
                entry.value.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut())
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                *p -= rate * (*mi / bc1) / ((*vi / bc2).sqrt() + self.eps);
            }
        }
    }
}
