//! Reverse-mode automatic differentiation over a Wengert tape.
//!
//! Forward operations are methods on [`Tape`]; each appends a node holding
//! its output value and, when recording, the parents and whatever the
//! backward rule needs. [`Tape::backward`] replays the nodes in reverse
//! insertion order, which is a reverse topological order because a node can
//! only reference earlier nodes. Gradient accumulation therefore happens in a
//! fixed order and is bit-reproducible.

mod backward;
pub(crate) mod kernels;
mod ops;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
pub(crate) enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
    },
    MatMulT {
        a: Var,
        b: Var,
    },
    MatMulCols {
        a: Var,
        w: Var,
        start: usize,
        len: usize,
    },
    MatMulRows {
        a: Var,
        w: Var,
        start: usize,
        len: usize,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        a: Var,
        c: T,
    },
    RowScale {
        x: Var,
        s: Var,
    },
    Silu {
        x: Var,
    },
    RmsNorm {
        x: Var,
        gain: Var,
        inv_rms: Vec<T>,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    CausalAttention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<T>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        count: usize,
        probs: Vec<T>,
    },
    Sum {
        x: Var,
    },
    Mean {
        x: Var,
    },
    Reshape {
        x: Var,
    },
    GatherRows {
        x: Var,
        rows: Vec<usize>,
    },
    ScatterAddRows {
        src: Var,
        rows: Vec<usize>,
    },
    ScatterRows {
        base: Var,
        src: Var,
        rows: Vec<usize>,
    },
    GatherEntries {
        x: Var,
        entries: Vec<(usize, usize)>,
    },
    TopKRenorm {
        probs: Var,
        selected: Vec<Vec<usize>>,
    },
    MixStates {
        p: Var,
        states: Vec<Var>,
    },
    ExpectedIndex {
        p: Var,
    },
    ComplementRatio {
        x: Var,
        c: T,
    },
    LoadBalance {
        probs: Var,
        fractions: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recorded forward computation of one step.
pub struct Tape<T: Real = f64> {
    nodes: Vec<Node<T>>,
    recording: bool,
    flops: u64,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    /// A recording tape.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            recording: true,
            flops: 0,
        }
    }

    /// A tape that keeps forward values only; `backward` finds no gradients.
    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            recording: false,
            flops: 0,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    /// Forward matrix-multiply FLOPs executed so far (2 per multiply-add).
    pub fn matmul_flops(&self) -> u64 {
        self.flops
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Differentiable input (a parameter or a value under test).
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        let requires_grad = self.recording;
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, parents: &[Var], op: impl FnOnce() -> Op<T>) -> Var {
        let requires_grad = self.recording && parents.iter().any(|p| self.nodes[p.0].requires_grad);
        let op = if requires_grad { op() } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Gradients of a single-element `loss` with respect to every node that
    /// requires one.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        backward::run(self, loss)
    }
}

/// Gradient map produced by [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

#[cfg(test)]
mod tests;
