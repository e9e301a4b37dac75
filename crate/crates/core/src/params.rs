//! Named parameter storage and per-forward binding onto a [`Graph`].

use crate::autodiff::{Gradients, Graph, NormStats, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Index of a tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    /// `false` for buffers such as batch-norm running statistics.
    pub trainable: bool,
    pub grad: Option<Vec<f64>>,
}

/// Ordered collection of named tensors. Insertion order is the checkpoint
/// order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    fn insert(&mut self, name: String, value: Tensor, trainable: bool) -> ParamId {
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.params.push(Param { name, value, trainable, grad: None });
        ParamId(self.params.len() - 1)
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.insert(name.into(), value, true)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.insert(name.into(), value, false)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn trainable_count(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Overwrites values from `(name, tensor)` pairs. Every stored name must be
    /// present with a matching shape.
    pub fn load_named(&mut self, tensors: &[(String, Tensor)], prefix: &str) -> Result<()> {
        for p in &mut self.params {
            let full = format!("{prefix}{}", p.name);
            let (_, t) = tensors
                .iter()
                .find(|(n, _)| *n == full)
                .ok_or_else(|| Error::Checkpoint(format!("checkpoint lacks tensor {full}")))?;
            if t.shape() != p.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {full} has shape {:?}, expected {:?}",
                    t.shape(),
                    p.value.shape()
                )));
            }
            p.value = t.clone();
        }
        Ok(())
    }

    pub fn named_tensors(&self, prefix: &str) -> Vec<(String, Tensor)> {
        self.params.iter().map(|p| (format!("{prefix}{}", p.name), p.value.clone())).collect()
    }
}

/// Whether layers run with batch statistics (and record running statistics)
/// or with the stored running statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Momentum of the batch-norm running averages.
pub const BN_MOMENTUM: f64 = 0.1;

/// Leaves of one [`ParamStore`] bound into a [`Session`].
#[derive(Debug)]
pub struct Binding {
    id: usize,
    vars: Vec<Var>,
}

impl Binding {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

struct StatUpdate {
    binding: usize,
    mean_id: ParamId,
    var_id: ParamId,
    mean: Vec<f64>,
    var: Vec<f64>,
}

/// One forward pass over a fresh graph. Any number of stores can be bound;
/// a store bound without gradient tracking is frozen for this pass.
pub struct Session {
    pub graph: Graph,
    mode: Mode,
    bindings: usize,
    stat_updates: Vec<StatUpdate>,
}

impl Session {
    pub fn new(mode: Mode) -> Self {
        Session { graph: Graph::new(), mode, bindings: 0, stat_updates: Vec::new() }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// Adds every tensor of `store` as a leaf. Trainable tensors require grad
    /// only when `track_grads`.
    pub fn bind(&mut self, store: &ParamStore, track_grads: bool) -> Binding {
        let vars = store
            .iter()
            .map(|p| self.graph.leaf(p.value.clone(), track_grads && p.trainable))
            .collect();
        self.bindings += 1;
        Binding { id: self.bindings - 1, vars }
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.graph.constant(t)
    }

    /// Batch norm through the session. In train mode the batch statistics are
    /// queued for a running-average update applied by [`Session::commit`].
    pub fn batch_norm(&mut self, p: &Binding, x: Var, bn: &BatchNormParams) -> Result<Var> {
        let (gamma, beta) = (p.var(bn.gamma), p.var(bn.beta));
        match self.mode {
            Mode::Train => {
                let (y, stats) = self.graph.batch_norm(x, gamma, beta, NormStats::Batch, bn.eps)?;
                let (mean, var) = stats.expect("batch statistics");
                self.stat_updates.push(StatUpdate {
                    binding: p.id,
                    mean_id: bn.running_mean,
                    var_id: bn.running_var,
                    mean,
                    var,
                });
                Ok(y)
            }
            Mode::Eval => {
                let mean = self.graph.value(p.var(bn.running_mean)).data().to_vec();
                let var = self.graph.value(p.var(bn.running_var)).data().to_vec();
                let stats = NormStats::Running { mean: &mean, var: &var };
                Ok(self.graph.batch_norm(x, gamma, beta, stats, bn.eps)?.0)
            }
        }
    }

    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        self.graph.backward(loss)
    }

    /// Accumulates `grads` of the tensors bound by `p` into `store` and
    /// applies its queued running-statistic updates.
    pub fn commit(&self, store: &mut ParamStore, p: &Binding, grads: Option<&Gradients>) {
        if let Some(grads) = grads {
            for (param, &v) in store.iter_mut().zip(&p.vars) {
                if let Some(g) = grads.get(v) {
                    match &mut param.grad {
                        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
                        None => param.grad = Some(g.to_vec()),
                    }
                }
            }
        }
        for u in self.stat_updates.iter().filter(|u| u.binding == p.id) {
            let keep = 1.0 - BN_MOMENTUM;
            for (r, m) in store.get_mut(u.mean_id).value.data_mut().iter_mut().zip(&u.mean) {
                *r = keep * *r + BN_MOMENTUM * m;
            }
            for (r, v) in store.get_mut(u.var_id).value.data_mut().iter_mut().zip(&u.var) {
                *r = keep * *r + BN_MOMENTUM * v;
            }
        }
    }
}

/// Handles for one batch-norm layer.
#[derive(Clone, Debug)]
pub struct BatchNormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub eps: f64,
}

impl BatchNormParams {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        let ones = Tensor::full(&[channels], 1.0).expect("channels >= 1");
        let zeros = Tensor::zeros(&[channels]).expect("channels >= 1");
        BatchNormParams {
            gamma: store.add(format!("{name}.gamma"), ones.clone()),
            beta: store.add(format!("{name}.beta"), zeros.clone()),
            running_mean: store.add_buffer(format!("{name}.running_mean"), zeros),
            running_var: store.add_buffer(format!("{name}.running_var"), ones),
            eps: 1e-5,
        }
    }
}
