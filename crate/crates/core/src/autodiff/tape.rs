//! Define-by-run reverse-mode differentiation.
//!
//! Every differentiable operation appends a node holding its output value
//! and a vector-Jacobian product closure. [`Tape::backward`] walks the nodes
//! in reverse execution order, so gradient accumulation order is fixed and
//! repeated runs are bitwise identical.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Vector-Jacobian product: maps the output cotangent to one cotangent per
/// parent (`None` where a parent receives no gradient).
pub type BackwardFn<T> = Box<dyn Fn(&Tensor<T>) -> Result<Vec<Option<Tensor<T>>>>>;

struct Node<T> {
    value: Rc<Tensor<T>>,
    parents: Vec<usize>,
    backward: Option<BackwardFn<T>>,
    param: Option<ParamId>,
    requires_grad: bool,
}

/// Counters for attention score computation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct AttentionStats {
    /// Number of score matrices formed (one per head per batch item).
    pub score_matrices: u64,
    /// Total query-key score entries formed.
    pub score_entries: u64,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    record: bool,
    attention: AttentionStats,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    /// A tape that records backward rules.
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), record: true, attention: AttentionStats::default() }
    }

    /// A tape for inference: values only, no backward rules are kept.
    pub fn inference() -> Self {
        Tape { nodes: Vec::new(), record: false, attention: AttentionStats::default() }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn attention_stats(&self) -> AttentionStats {
        self.attention
    }

    pub(crate) fn count_scores(&mut self, matrices: u64, entries: u64) {
        self.attention.score_matrices += matrices;
        self.attention.score_entries += entries;
    }

    fn push(&mut self, value: Tensor<T>, parents: Vec<usize>, backward: Option<BackwardFn<T>>, param: Option<ParamId>, requires_grad: bool) -> Var {
        let id = self.nodes.len();
        self.nodes.push(Node { value: Rc::new(value), parents, backward, param, requires_grad });
        Var(id)
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Vec::new(), None, None, false)
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        let rg = self.record;
        self.push(value, Vec::new(), None, None, rg)
    }

    /// Load a parameter; its gradient flows back into `store` on
    /// [`Tape::backward_into`].
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let rg = self.record;
        self.push(store.value(id).clone(), Vec::new(), None, Some(id), rg)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub(crate) fn value_rc(&self, v: Var) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes[v.0].value)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Whether an op over `parents` needs a backward rule.
    pub(crate) fn needs_grad(&self, parents: &[Var]) -> bool {
        self.record && parents.iter().any(|p| self.nodes[p.0].requires_grad)
    }

    /// Record an operation. `backward` is only called if some parent
    /// requires a gradient; it must return one entry per parent.
    pub fn push_op<F>(&mut self, value: Tensor<T>, parents: &[Var], backward: F) -> Var
    where
        F: Fn(&Tensor<T>) -> Result<Vec<Option<Tensor<T>>>> + 'static,
    {
        if self.needs_grad(parents) {
            let ids = parents.iter().map(|p| p.0).collect();
            self.push(value, ids, Some(Box::new(backward)), None, true)
        } else {
            self.push(value, Vec::new(), None, None, false)
        }
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.nodes.is_empty() {
            return Err(Error::EmptyTape);
        }
        let root = self.nodes.get(loss.0).ok_or(Error::ForeignVar(loss.0))?;
        if root.value.numel() != 1 {
            return Err(Error::NonScalarLoss(root.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(root.value.shape().to_vec()));
        let mut leaves = Vec::new();
        for id in (0..=loss.0).rev() {
            let Some(grad) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            match &node.backward {
                Some(rule) => {
                    let parent_grads = rule(&grad)?;
                    debug_assert_eq!(parent_grads.len(), node.parents.len());
                    for (&pid, g) in node.parents.iter().zip(parent_grads) {
                        let Some(g) = g else { continue };
                        if !self.nodes[pid].requires_grad {
                            continue;
                        }
                        match &mut grads[pid] {
                            Some(acc) => acc.add_assign(&g)?,
                            slot @ None => *slot = Some(g),
                        }
                    }
                }
                None if node.requires_grad => leaves.push((id, grad)),
                None => {}
            }
        }
        Ok(Gradients { leaves, params: self.nodes.iter().map(|n| n.param).collect() })
    }

    /// Reverse sweep that adds every parameter gradient into `store`.
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore<T>) -> Result<()> {
        self.backward(loss)?.accumulate_into(store)
    }
}

/// Gradients of a scalar with respect to the tape's differentiable leaves.
pub struct Gradients<T> {
    leaves: Vec<(usize, Tensor<T>)>,
    params: Vec<Option<ParamId>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.leaves.iter().find(|(id, _)| *id == v.0).map(|(_, g)| g)
    }

    /// Add parameter gradients into the store, in tape order.
    pub fn accumulate_into(&self, store: &mut ParamStore<T>) -> Result<()> {
        // Leaves were collected in reverse tape order; apply in forward order.
        for (id, grad) in self.leaves.iter().rev() {
            if let Some(pid) = self.params[*id] {
                store.accumulate_grad(pid, grad)?;
            }
        }
        Ok(())
    }
}
