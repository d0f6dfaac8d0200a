//! Append-only tape for reverse-mode differentiation.
//!
//! Every op appends one node holding its output value, the indices of its
//! inputs and (when any input requires a gradient) a backward rule. Inputs
//! always precede their consumers, so a single reverse sweep over node
//! indices visits each node once in a valid topological order.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

static NEXT_TAPE_ID: AtomicUsize = AtomicUsize::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: usize,
    index: usize,
}

impl Var {
    pub fn index(self) -> usize {
        self.index
    }
}

/// What a backward rule receives.
pub struct BackwardArgs<'a, T> {
    /// Gradient of the loss with respect to this node's output.
    pub grad: &'a Tensor<T>,
    pub inputs: &'a [&'a Tensor<T>],
    pub output: &'a Tensor<T>,
    /// `needs[i]` is true when input `i` requires a gradient.
    pub needs: &'a [bool],
}

/// Backward rule: one optional gradient per input, shaped like that input.
pub type BackwardFn<T> =
    Box<dyn Fn(&BackwardArgs<'_, T>) -> Result<Vec<Option<Tensor<T>>>> + Send + Sync>;

/// Forward closure re-run during backward by [`Tape::checkpoint`].
pub type CheckpointFn<T> = Arc<dyn Fn(&mut Tape<T>, &[Var]) -> Result<Var> + Send + Sync>;

struct Node<T> {
    op: &'static str,
    value: Tensor<T>,
    inputs: Vec<usize>,
    requires_grad: bool,
    backward: Option<BackwardFn<T>>,
}

pub struct Tape<T> {
    id: usize,
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every recorded node; previously issued vars become foreign.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.id = NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed);
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op: "leaf",
            value,
            inputs: Vec::new(),
            requires_grad,
            backward: None,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        assert_eq!(v.tape, self.id, "var from another tape");
        &self.nodes[v.index].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.index].requires_grad
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.index].op
    }

    pub(crate) fn check(&self, v: Var) -> Result<()> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::ForeignVar(v.index));
        }
        Ok(())
    }

    /// Appends an op node. The output is checked for NaN/Inf; the backward
    /// rule is only kept when some input requires a gradient.
    pub fn record<F>(&mut self, op: &'static str, inputs: &[Var], value: Tensor<T>, backward: F) -> Result<Var>
    where
        F: Fn(&BackwardArgs<'_, T>) -> Result<Vec<Option<Tensor<T>>>> + Send + Sync + 'static,
    {
        for &v in inputs {
            self.check(v)?;
        }
        let value = value.check_finite(op)?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.index].requires_grad);
        self.nodes.push(Node {
            op,
            value,
            inputs: inputs.iter().map(|v| v.index).collect(),
            requires_grad,
            backward: if requires_grad {
                Some(Box::new(backward))
            } else {
                None
            },
        });
        Ok(Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        })
    }

    /// Gradients of a scalar `loss` with respect to every leaf that
    /// requires one. The tape is left untouched, so repeated calls return
    /// bitwise-identical results.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        self.check(loss)?;
        let shape = self.value(loss).shape();
        if self.value(loss).numel() != 1 {
            return Err(Error::NonScalarLoss(shape.to_vec()));
        }
        let seed = Tensor::full(shape, T::one());
        self.backward_with_seed(loss, seed)
    }

    /// Vector-Jacobian product seeded with `seed` at `out`.
    pub fn backward_with_seed(&self, out: Var, seed: Tensor<T>) -> Result<Gradients<T>> {
        self.check(out)?;
        if seed.shape() != self.value(out).shape() {
            return Err(crate::error::shape_err(
                "backward",
                format!("seed {:?} vs output {:?}", seed.shape(), self.value(out).shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=out.index).map(|_| None).collect();
        grads[out.index] = Some(seed);
        let mut visited = 0;
        for i in (0..=out.index).rev() {
            let node = &self.nodes[i];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(grad) = grads[i].take() else {
                continue;
            };
            visited += 1;
            let inputs: Vec<&Tensor<T>> = node.inputs.iter().map(|&j| &self.nodes[j].value).collect();
            let needs: Vec<bool> = node.inputs.iter().map(|&j| self.nodes[j].requires_grad).collect();
            let input_grads = backward(&BackwardArgs {
                grad: &grad,
                inputs: &inputs,
                output: &node.value,
                needs: &needs,
            })?;
            debug_assert_eq!(input_grads.len(), node.inputs.len(), "{}", node.op);
            for (&j, g) in node.inputs.iter().zip(input_grads) {
                let Some(g) = g else { continue };
                if !self.nodes[j].requires_grad {
                    continue;
                }
                if g.shape() != self.nodes[j].value.shape() {
                    return Err(crate::error::shape_err(
                        node.op,
                        format!(
                            "backward produced {:?} for input of shape {:?}",
                            g.shape(),
                            self.nodes[j].value.shape()
                        ),
                    ));
                }
                match &mut grads[j] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                            *a += *b;
                        }
                    }
                    slot @ None => *slot = Some(g),
                }
            }
        }
        // Interior gradients were consumed above; only leaves remain.
        Ok(Gradients {
            tape: self.id,
            grads,
            visited,
        })
    }

    /// Runs `f` on a private tape and records only its output. During
    /// backward `f` is re-run to rebuild the activations it needs, trading
    /// compute for memory.
    pub fn checkpoint(&mut self, inputs: &[Var], f: CheckpointFn<T>) -> Result<Var> {
        for &v in inputs {
            self.check(v)?;
        }
        let value = {
            let mut sub = Tape::new();
            let vars: Vec<Var> = inputs
                .iter()
                .map(|&v| sub.leaf(self.value(v).clone(), false))
                .collect();
            let out = f(&mut sub, &vars)?;
            sub.value(out).clone()
        };
        self.record("checkpoint", inputs, value, move |args| {
            let mut sub = Tape::new();
            let vars: Vec<Var> = args
                .inputs
                .iter()
                .zip(args.needs)
                .map(|(t, &need)| sub.leaf((*t).clone(), need))
                .collect();
            let out = f(&mut sub, &vars)?;
            let g = sub.backward_with_seed(out, args.grad.clone())?;
            Ok(vars.iter().map(|&v| g.get(v).cloned()).collect())
        })
    }
}

/// Leaf gradients produced by one backward pass.
pub struct Gradients<T> {
    tape: usize,
    grads: Vec<Option<Tensor<T>>>,
    visited: usize,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for a leaf var; `None` if it does not require one or the
    /// loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.index).and_then(|g| g.as_ref())
    }

    /// Gradient for `v`, or zeros shaped like `like` when the loss does not
    /// reach it.
    pub fn get_or_zeros(&self, v: Var, like: &[usize]) -> Tensor<T> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(like))
    }

    /// Number of op nodes whose backward rule ran.
    pub fn nodes_visited(&self) -> usize {
        self.visited
    }
}
