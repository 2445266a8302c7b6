//! Reverse-mode differentiation over a linear tape.
//!
//! Every op appends its output node to the tape and, when any input needs a
//! gradient, a record holding the input ids and a [`BackwardRule`]. Because
//! records are appended in execution order, replaying them in reverse is a
//! valid topological order.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::array::DenseArray;
use crate::error::{Error, Result};

pub(crate) mod kernels;
mod ops;

pub use ops::GELU_TANH_COEFF;
pub(crate) use ops::{crop_data, pad_data};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    idx: usize,
}

impl Var {
    pub fn tape_id(&self) -> u64 {
        self.tape
    }

    pub fn index(&self) -> usize {
        self.idx
    }
}

/// Computes input gradients of one recorded op from the output gradient.
///
/// `needs[i]` is false when input `i` does not require a gradient; the rule may
/// return `None` for it.
pub(crate) trait BackwardRule {
    fn backward(
        &self,
        inputs: &[&DenseArray],
        output: &DenseArray,
        grad: &DenseArray,
        needs: &[bool],
    ) -> Vec<Option<DenseArray>>;
}

struct Node {
    value: DenseArray,
    grad: Option<DenseArray>,
    requires_grad: bool,
}

struct Record {
    inputs: Vec<usize>,
    output: usize,
    rule: Box<dyn BackwardRule>,
}

pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    records: Vec<Record>,
    backward_done: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            records: Vec::new(),
            backward_done: false,
        }
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn num_records(&self) -> usize {
        self.records.len()
    }

    /// A leaf that receives a gradient.
    pub fn leaf(&mut self, value: DenseArray) -> Var {
        self.push_node(value, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: DenseArray) -> Var {
        self.push_node(value, false)
    }

    fn push_node(&mut self, value: DenseArray, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
        });
        Var {
            tape: self.id,
            idx: self.nodes.len() - 1,
        }
    }

    pub(crate) fn check(&self, v: Var) -> Result<usize> {
        if v.tape != self.id {
            return Err(Error::DetachedTape {
                node_tape: v.tape,
                tape: self.id,
            });
        }
        Ok(v.idx)
    }

    pub fn value(&self, v: Var) -> &DenseArray {
        assert_eq!(v.tape, self.id, "node from tape {} read on tape {}", v.tape, self.id);
        &self.nodes[v.idx].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.idx].requires_grad
    }

    /// Gradient accumulated by the last [`Tape::backward`], if any reached `v`.
    pub fn grad(&self, v: Var) -> Option<&DenseArray> {
        assert_eq!(v.tape, self.id);
        self.nodes[v.idx].grad.as_ref()
    }

    /// Clears gradients so `backward` may run again.
    pub fn reset_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.backward_done = false;
    }

    /// Records an op output. The backward rule is kept only when some input
    /// requires a gradient.
    pub(crate) fn record(
        &mut self,
        inputs: &[Var],
        value: DenseArray,
        rule: impl BackwardRule + 'static,
    ) -> Result<Var> {
        let mut ids = Vec::with_capacity(inputs.len());
        for &v in inputs {
            ids.push(self.check(v)?);
        }
        let requires_grad = ids.iter().any(|&i| self.nodes[i].requires_grad);
        let out = self.push_node(value, requires_grad);
        if requires_grad {
            self.records.push(Record {
                inputs: ids,
                output: out.idx,
                rule: Box::new(rule),
            });
        }
        Ok(out)
    }

    /// Backpropagates from a scalar `loss`, filling gradients of every node
    /// that requires one and lies upstream of `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let loss_idx = self.check(loss)?;
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        let shape = self.nodes[loss_idx].value.shape().to_vec();
        if shape.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarLoss(shape));
        }
        self.backward_done = true;
        if !self.nodes[loss_idx].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<DenseArray>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss_idx] = Some(DenseArray::full(shape, 1.0));

        for rec in self.records.iter().rev() {
            if rec.output > loss_idx {
                continue;
            }
            let Some(g) = grads[rec.output].take() else {
                continue;
            };
            let inputs: Vec<&DenseArray> = rec.inputs.iter().map(|&i| &self.nodes[i].value).collect();
            let needs: Vec<bool> = rec.inputs.iter().map(|&i| self.nodes[i].requires_grad).collect();
            let in_grads = rec.rule.backward(&inputs, &self.nodes[rec.output].value, &g, &needs);
            debug_assert_eq!(in_grads.len(), rec.inputs.len());
            for ((&i, gi), need) in rec.inputs.iter().zip(in_grads).zip(needs) {
                let (Some(gi), true) = (gi, need) else {
                    continue;
                };
                debug_assert_eq!(gi.shape(), self.nodes[i].value.shape());
                match &mut grads[i] {
                    Some(acc) => acc.add_assign(&gi),
                    slot => *slot = Some(gi),
                }
            }
            grads[rec.output] = Some(g);
        }

        for (node, g) in self.nodes.iter_mut().zip(grads) {
            if node.requires_grad {
                node.grad = g;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gives_ones() {
        let mut t = Tape::new();
        let x = t.leaf(DenseArray::new(vec![3], vec![1.0, -2.0, 5.0]).unwrap());
        let s = t.sum(x).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn sum_of_squares_gives_twice_x() {
        let mut t = Tape::new();
        let xs = vec![0.5, -1.5, 2.0, 3.0];
        let x = t.leaf(DenseArray::new(vec![2, 2], xs.clone()).unwrap());
        let sq = t.mul(x, x).unwrap();
        let s = t.sum(sq).unwrap();
        t.backward(s).unwrap();
        let want: Vec<f64> = xs.iter().map(|v| 2.0 * v).collect();
        assert_eq!(t.grad(x).unwrap().data(), want.as_slice());
    }

    #[test]
    fn backward_twice_is_an_error() {
        let mut t = Tape::new();
        let x = t.leaf(DenseArray::ones(vec![2]));
        let s = t.sum(x).unwrap();
        t.backward(s).unwrap();
        assert!(matches!(t.backward(s), Err(Error::BackwardTwice)));
        t.reset_grads();
        assert!(t.backward(s).is_ok());
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut t = Tape::new();
        let x = t.leaf(DenseArray::ones(vec![2]));
        assert!(matches!(t.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn node_from_other_tape_rejected() {
        let mut a = Tape::new();
        let mut b = Tape::new();
        let x = a.leaf(DenseArray::ones(vec![2]));
        let y = b.leaf(DenseArray::ones(vec![2]));
        assert!(matches!(b.add(x, y), Err(Error::DetachedTape { .. })));
        assert!(matches!(b.backward(x), Err(Error::DetachedTape { .. })));
    }

    #[test]
    fn constants_record_nothing() {
        let mut t = Tape::new();
        let x = t.constant(DenseArray::ones(vec![4]));
        let y = t.scale(x, 2.0).unwrap();
        let _ = t.sum(y).unwrap();
        assert_eq!(t.num_records(), 0);
    }

    #[test]
    fn gradient_accumulates_over_fanout() {
        let mut t = Tape::new();
        let x = t.leaf(DenseArray::new(vec![2], vec![1.0, 2.0]).unwrap());
        let a = t.scale(x, 3.0).unwrap();
        let b = t.add(a, x).unwrap();
        let s = t.sum(b).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap().data(), &[4.0, 4.0]);
    }
}
