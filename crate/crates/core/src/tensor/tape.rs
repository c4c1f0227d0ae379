//! Reverse-mode tape.
//!
//! Every differentiable op appends a node holding the tensors its backward
//! rule needs. Nodes are appended in evaluation order, so walking them in
//! reverse visits each node after all of its consumers.

use std::cell::RefCell;
use std::collections::hash_map::Entry;
use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;

use super::{fmt_shape, Scalar, Shape, Tensor};
use crate::{Error, Result};

/// Differentiable operator kinds, used in diagnostics and fault injection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Conv2d,
    LayerNorm,
    PixelShuffle,
    Add,
    Mul,
    ChannelScale,
    Gelu,
    L1Loss,
    Sum,
    SliceChannels,
    ConcatChannels,
}

impl OpKind {
    pub fn name(self) -> &'static str {
        match self {
            OpKind::Conv2d => "conv2d",
            OpKind::LayerNorm => "layer_norm",
            OpKind::PixelShuffle => "pixel_shuffle",
            OpKind::Add => "add",
            OpKind::Mul => "mul",
            OpKind::ChannelScale => "channel_scale",
            OpKind::Gelu => "gelu",
            OpKind::L1Loss => "l1_loss",
            OpKind::Sum => "sum",
            OpKind::SliceChannels => "slice_channels",
            OpKind::ConcatChannels => "concat_channels",
        }
    }

    pub fn from_name(name: &str) -> Option<OpKind> {
        use OpKind::*;
        [
            Conv2d,
            LayerNorm,
            PixelShuffle,
            Add,
            Mul,
            ChannelScale,
            Gelu,
            L1Loss,
            Sum,
            SliceChannels,
            ConcatChannels,
        ]
        .into_iter()
        .find(|k| k.name() == name)
    }
}

pub(crate) struct Node<S> {
    pub op: super::ops::Op<S>,
    pub inputs: Vec<Option<usize>>,
}

struct Inner<S> {
    generation: u64,
    nodes: Vec<Node<S>>,
    grads: HashMap<usize, Tensor<S>>,
    fault: Option<OpKind>,
}

/// Records operations for reverse-mode differentiation.
///
/// A tape created with [`Tape::no_grad`] records nothing: values are freed as
/// soon as their [`Var`]s are dropped, which keeps inference memory flat.
pub struct Tape<S: Scalar = f32> {
    recording: bool,
    inner: RefCell<Inner<S>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> fmt::Debug for Tape<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let inner = self.inner.borrow();
        f.debug_struct("Tape")
            .field("recording", &self.recording)
            .field("generation", &inner.generation)
            .field("nodes", &inner.nodes.len())
            .finish()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self::with_recording(true)
    }

    pub fn no_grad() -> Self {
        Self::with_recording(false)
    }

    fn with_recording(recording: bool) -> Self {
        Tape {
            recording,
            inner: RefCell::new(Inner {
                generation: 0,
                nodes: Vec::new(),
                grads: HashMap::new(),
                fault: None,
            }),
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn generation(&self) -> u64 {
        self.inner.borrow().generation
    }

    /// Registers an input tensor. Gradients are tracked only when
    /// `requires_grad` is set and the tape is recording.
    pub fn leaf(&self, value: Tensor<S>, requires_grad: bool) -> Var<'_, S> {
        let node = if requires_grad && self.recording {
            let mut inner = self.inner.borrow_mut();
            inner.nodes.push(Node {
                op: super::ops::Op::Leaf,
                inputs: Vec::new(),
            });
            Some(inner.nodes.len() - 1)
        } else {
            None
        };
        Var {
            tape: self,
            node,
            generation: self.generation(),
            value: Rc::new(value),
        }
    }

    pub fn constant(&self, value: Tensor<S>) -> Var<'_, S> {
        self.leaf(value, false)
    }

    pub(crate) fn check(&self, v: &Var<'_, S>) -> Result<()> {
        if !std::ptr::eq(v.tape, self) {
            return Err(Error::invalid("tape", "variable belongs to a different tape"));
        }
        if v.generation != self.generation() {
            return Err(Error::StaleTensor);
        }
        Ok(())
    }

    pub(crate) fn record(
        &self,
        kind: OpKind,
        inputs: &[&Var<'_, S>],
        value: Tensor<S>,
        op: impl FnOnce() -> super::ops::Op<S>,
    ) -> Result<Var<'_, S>> {
        for v in inputs {
            self.check(v)?;
        }
        if !value.all_finite() {
            return Err(Error::NonFinite { op: kind.name() });
        }
        let ids: Vec<Option<usize>> = inputs.iter().map(|v| v.node).collect();
        let node = if self.recording && ids.iter().any(Option::is_some) {
            let mut inner = self.inner.borrow_mut();
            inner.nodes.push(Node { op: op(), inputs: ids });
            Some(inner.nodes.len() - 1)
        } else {
            None
        };
        Ok(Var {
            tape: self,
            node,
            generation: self.generation(),
            value: Rc::new(value),
        })
    }

    /// Back-propagates from a scalar `loss`, accumulating into the gradients
    /// of every tracked leaf. Calling it again without [`Tape::zero_grad`]
    /// adds the same contribution a second time.
    pub fn backward(&self, loss: &Var<'_, S>) -> Result<()> {
        self.check(loss)?;
        if loss.value.len() != 1 {
            return Err(Error::NotScalar {
                numel: loss.value.len(),
            });
        }
        let Some(root) = loss.node else {
            return Ok(());
        };
        let mut inner = self.inner.borrow_mut();
        let Inner {
            nodes,
            grads: leaf_grads,
            fault,
            ..
        } = &mut *inner;
        let mut pending: Vec<Option<Tensor<S>>> = (0..=root).map(|_| None).collect();
        pending[root] = Some(Tensor::ones(loss.value.shape()));
        for id in (0..=root).rev() {
            let Some(g) = pending[id].take() else {
                continue;
            };
            let node = &nodes[id];
            let Some(kind) = node.op.kind() else {
                match leaf_grads.entry(id) {
                    Entry::Occupied(e) => e.into_mut().add_assign(&g)?,
                    Entry::Vacant(e) => {
                        e.insert(g);
                    }
                }
                continue;
            };
            let needs: Vec<bool> = node.inputs.iter().map(Option::is_some).collect();
            let mut input_grads = node.op.backward(&g, &needs)?;
            if *fault == Some(kind) {
                for t in input_grads.iter_mut().flatten() {
                    *t = t.map(|v| v * S::of(1.1) + S::of(1e-3));
                }
            }
            for (slot, ig) in node.inputs.iter().zip(input_grads) {
                if let (Some(i), Some(gi)) = (slot, ig) {
                    match &mut pending[*i] {
                        Some(acc) => acc.add_assign(&gi)?,
                        p @ None => *p = Some(gi),
                    }
                }
            }
        }
        Ok(())
    }

    /// Accumulated gradient of a leaf, if any has reached it.
    pub fn grad(&self, v: &Var<'_, S>) -> Option<Tensor<S>> {
        let id = v.node?;
        self.inner.borrow().grads.get(&id).cloned()
    }

    pub fn zero_grad(&self) {
        self.inner.borrow_mut().grads.clear();
    }

    /// Drops every recorded node and gradient. Variables created before the
    /// reset are rejected by later operations.
    pub fn reset(&self) {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.clear();
        inner.grads.clear();
        inner.generation += 1;
    }

    /// Test hook: perturbs the gradients produced by one backward rule.
    #[doc(hidden)]
    pub fn inject_backward_fault(&self, kind: Option<OpKind>) {
        self.inner.borrow_mut().fault = kind;
    }
}

/// A value on a [`Tape`].
#[derive(Clone)]
pub struct Var<'t, S: Scalar = f32> {
    pub(crate) tape: &'t Tape<S>,
    pub(crate) node: Option<usize>,
    generation: u64,
    pub(crate) value: Rc<Tensor<S>>,
}

impl<S: Scalar> fmt::Debug for Var<'_, S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "Var({}, node={:?})",
            fmt_shape(self.value.shape()),
            self.node
        )
    }
}

impl<'t, S: Scalar> Var<'t, S> {
    pub fn value(&self) -> &Tensor<S> {
        &self.value
    }

    pub fn shape(&self) -> Shape {
        self.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.node.is_some()
    }

    pub fn tape(&self) -> &'t Tape<S> {
        self.tape
    }

    pub(crate) fn rc(&self) -> Rc<Tensor<S>> {
        Rc::clone(&self.value)
    }

    pub fn to_tensor(&self) -> Tensor<S> {
        (*self.value).clone()
    }

    pub fn into_tensor(self) -> Tensor<S> {
        Rc::try_unwrap(self.value).unwrap_or_else(|rc| (*rc).clone())
    }
}
