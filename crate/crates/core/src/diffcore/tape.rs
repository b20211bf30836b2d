use std::sync::Arc;

use super::tensor::Tensor;
use crate::error::{arg_err, shape_err, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Read access to recorded values while an op computes its input gradients.
pub struct BackCtx<'a> {
    tape: &'a Tape,
}

impl BackCtx<'_> {
    pub fn value(&self, v: Var) -> &Tensor {
        self.tape.value(v)
    }
}

/// Gradient rule of a recorded operation.
///
/// `needs[i]` tells whether input `i` requires a gradient; entries of the returned
/// vector for inputs that do not may be `None`.
pub trait Backward: Send + Sync {
    fn backward(
        &self,
        ctx: &BackCtx<'_>,
        inputs: &[Var],
        output: &Tensor,
        grad: &Tensor,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>>;
}

type CheckpointFn = dyn Fn(&mut Tape, &[Var]) -> Result<Vec<Var>> + Send + Sync;

enum NodeKind {
    Leaf,
    Op(Box<dyn Backward>),
    /// Recomputed sub-graph; its outputs are the `Slot` nodes that follow it.
    Checkpoint { f: Arc<CheckpointFn>, out_shapes: Vec<Vec<usize>> },
    Slot { offset: usize, len: usize, total: usize },
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    inputs: Vec<Var>,
    kind: NodeKind,
}

/// Ordered record of executed operations.
///
/// Every op appends one node. [`Tape::backward`] walks the nodes in exact reverse
/// order and accumulates gradients additively, so a value used twice receives the
/// sum of both contributions.
pub struct Tape {
    nodes: Vec<Node>,
    leaf_grads: Vec<Option<Tensor>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), leaf_grads: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push_node(Node { value, requires_grad, inputs: Vec::new(), kind: NodeKind::Leaf })
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward pass for a leaf.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.leaf_grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor> {
        self.leaf_grads.get_mut(v.0).and_then(|g| g.take())
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
    }

    /// Records an op result. The op is dropped when no input needs a gradient.
    pub fn push_op(&mut self, value: Tensor, inputs: &[Var], op: impl Backward + 'static) -> Var {
        let requires_grad = inputs.iter().any(|&v| self.requires_grad(v));
        let kind = if requires_grad { NodeKind::Op(Box::new(op)) } else { NodeKind::Leaf };
        self.push_node(Node { value, requires_grad, inputs: inputs.to_vec(), kind })
    }

    fn push_node(&mut self, node: Node) -> Var {
        self.nodes.push(node);
        Var(self.nodes.len() - 1)
    }

    /// Runs `f` on a private tape and keeps only its outputs. During backward the
    /// sub-graph is recomputed from the stored inputs, trading compute for memory.
    ///
    /// `f` must be a deterministic function of its inputs.
    pub fn checkpoint<F>(&mut self, inputs: &[Var], f: F) -> Result<Vec<Var>>
    where
        F: Fn(&mut Tape, &[Var]) -> Result<Vec<Var>> + Send + Sync + 'static,
    {
        let mut inner = Tape::new();
        let leaves: Vec<Var> =
            inputs.iter().map(|&v| inner.leaf(self.value(v).clone(), false)).collect();
        let outs = f(&mut inner, &leaves)?;
        if outs.is_empty() {
            return arg_err("checkpointed function returned no outputs");
        }
        let values: Vec<Tensor> = outs.iter().map(|&o| inner.value(o).clone()).collect();
        drop(inner);

        let requires_grad = inputs.iter().any(|&v| self.requires_grad(v));
        let out_shapes: Vec<Vec<usize>> = values.iter().map(|t| t.shape().to_vec()).collect();
        let total: usize = values.iter().map(Tensor::numel).sum();
        let group = self.push_node(Node {
            value: Tensor::scalar(0.0),
            requires_grad,
            inputs: inputs.to_vec(),
            kind: if requires_grad {
                NodeKind::Checkpoint { f: Arc::new(f), out_shapes }
            } else {
                NodeKind::Leaf
            },
        });
        let mut offset = 0;
        let mut result = Vec::with_capacity(values.len());
        for value in values {
            let len = value.numel();
            let kind = if requires_grad {
                NodeKind::Slot { offset, len, total }
            } else {
                NodeKind::Leaf
            };
            result.push(self.push_node(Node { value, requires_grad, inputs: vec![group], kind }));
            offset += len;
        }
        Ok(result)
    }

    /// Reverse pass from a scalar loss.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return arg_err(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            ));
        }
        self.backward_with_seeds(&[(loss, Tensor::scalar(1.0))])
    }

    /// Reverse pass seeded with explicit output gradients.
    pub fn backward_with_seeds(&mut self, seeds: &[(Var, Tensor)]) -> Result<()> {
        let Some(last) = seeds.iter().map(|(v, _)| v.0).max() else {
            return Ok(());
        };
        let mut grads: Vec<Option<Tensor>> = vec![None; last + 1];
        for (v, seed) in seeds {
            if seed.shape() != self.shape(*v) {
                return shape_err(format!(
                    "seed shape {:?} does not match output {:?}",
                    seed.shape(),
                    self.shape(*v)
                ));
            }
            accumulate(&mut grads[v.0], seed.clone())?;
        }
        if self.leaf_grads.len() < self.nodes.len() {
            self.leaf_grads.resize(self.nodes.len(), None);
        }

        for i in (0..=last).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            match &node.kind {
                NodeKind::Leaf => {
                    if node.inputs.is_empty() {
                        accumulate(&mut self.leaf_grads[i], g)?;
                    }
                }
                NodeKind::Slot { offset, len, total } => {
                    let parent = node.inputs[0].0;
                    let slot = grads[parent].get_or_insert_with(|| Tensor::zeros(&[*total]));
                    let dst = &mut slot.data_mut()[*offset..*offset + *len];
                    for (d, s) in dst.iter_mut().zip(g.data()) {
                        *d += s;
                    }
                }
                NodeKind::Op(op) => {
                    let needs: Vec<bool> =
                        node.inputs.iter().map(|&v| self.nodes[v.0].requires_grad).collect();
                    let ctx = BackCtx { tape: self };
                    let in_grads = op.backward(&ctx, &node.inputs, &node.value, &g, &needs)?;
                    let inputs = node.inputs.clone();
                    for ((inp, ig), need) in inputs.into_iter().zip(in_grads).zip(needs) {
                        if let (Some(ig), true) = (ig, need) {
                            accumulate(&mut grads[inp.0], ig)?;
                        }
                    }
                }
                NodeKind::Checkpoint { f, out_shapes } => {
                    let inputs = node.inputs.clone();
                    let in_grads = self.replay_checkpoint(f.as_ref(), out_shapes, &inputs, &g)?;
                    for (inp, ig) in inputs.into_iter().zip(in_grads) {
                        if let Some(ig) = ig {
                            accumulate(&mut grads[inp.0], ig)?;
                        }
                    }
                }
            }
        }
        Ok(())
    }

    fn replay_checkpoint(
        &self,
        f: &CheckpointFn,
        out_shapes: &[Vec<usize>],
        inputs: &[Var],
        packed_grad: &Tensor,
    ) -> Result<Vec<Option<Tensor>>> {
        let mut inner = Tape::new();
        let leaves: Vec<Var> = inputs
            .iter()
            .map(|&v| inner.leaf(self.value(v).clone(), self.requires_grad(v)))
            .collect();
        let outs = f(&mut inner, &leaves)?;
        if outs.len() != out_shapes.len() {
            return arg_err("checkpointed function changed its output count on replay");
        }
        let mut offset = 0;
        let mut seeds = Vec::with_capacity(outs.len());
        for (&o, shape) in outs.iter().zip(out_shapes) {
            let len: usize = shape.iter().product();
            let seed = packed_grad.data()[offset..offset + len].to_vec();
            seeds.push((o, Tensor::from_parts(shape.clone(), seed)));
            offset += len;
        }
        inner.backward_with_seeds(&seeds)?;
        Ok(leaves.iter().map(|&l| inner.take_grad(l)).collect())
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) -> Result<()> {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => {
            *slot = Some(g);
            Ok(())
        }
    }
}
