//! Define-by-run reverse-mode differentiation.
//!
//! Every primitive executed through a [`Var`] appends one node to the
//! [`Tape`]. A node records its operation only when at least one input
//! requires a gradient, so inference through a tape of constant leaves keeps
//! no backward state. Nodes are appended in execution order, which is a valid
//! topological order; [`Tape::backward`] walks it in reverse.

mod conv;
mod elementwise;
mod layout;
mod linalg;
mod norm;
mod spectral;

use std::cell::{Cell, RefCell};
use std::sync::Arc;

pub use conv::ConvKind;
pub use elementwise::{OpTag, LEAKY_SLOPE};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::ssm::ScanMode;
use crate::tensor::Tensor;

pub type NodeId = usize;

pub(crate) struct Node<T> {
    value: Arc<Tensor<T>>,
    requires_grad: bool,
    op: Option<Op<T>>,
    /// Accumulated gradient, leaves only.
    grad: Option<Tensor<T>>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) enum Unary {
    Exp,
    Softplus,
    Silu,
    LeakyRelu(f64),
    Sqrt,
    Abs,
    Scale(f64),
    Shift(f64),
}

pub(crate) enum Op<T> {
    Binary(elementwise::BinaryKind, NodeId, NodeId),
    Unary(Unary, NodeId),
    Sum(NodeId),
    Mean(NodeId),
    MatMul(NodeId, NodeId),
    Reshape(NodeId),
    Permute(NodeId, Vec<usize>),
    Concat(Vec<NodeId>),
    Im2col3x3(NodeId),
    Depthwise3x3 { x: NodeId, w: NodeId, b: NodeId },
    CausalConv1d { x: NodeId, w: NodeId, b: NodeId },
    LayerNorm { x: NodeId, gamma: NodeId, beta: NodeId, xhat: Vec<T>, rstd: Vec<T> },
    SelectiveScan(Box<crate::ssm::kernel::ScanSaved<T>>),
    Dft2(NodeId),
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Binary(_, a, b) | Op::MatMul(a, b) => vec![*a, *b],
            Op::Unary(_, x) | Op::Sum(x) | Op::Mean(x) | Op::Reshape(x) | Op::Permute(x, _) => vec![*x],
            Op::Im2col3x3(x) | Op::Dft2(x) => vec![*x],
            Op::Concat(xs) => xs.clone(),
            Op::Depthwise3x3 { x, w, b } | Op::CausalConv1d { x, w, b } => vec![*x, *w, *b],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::SelectiveScan(s) => s.inputs.to_vec(),
        }
    }
}

/// Recording of one forward computation.
pub struct Tape<T: Real> {
    nodes: RefCell<Vec<Node<T>>>,
    /// Running hash of the sign of every input to a piecewise-linear op
    /// (LeakyReLU, abs); `None` unless tracking was requested.
    kinks: Cell<Option<u64>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Real> {
    tape: &'t Tape<T>,
    id: NodeId,
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            kinks: Cell::new(None),
        }
    }

    /// A tape that fingerprints which side of zero each LeakyReLU/abs input
    /// falls on. Two evaluations with equal fingerprints lie on the same
    /// linear piece of every kink.
    pub fn with_kink_tracking() -> Self {
        let tape = Self::new();
        tape.kinks.set(Some(0xcbf2_9ce4_8422_2325));
        tape
    }

    pub fn kink_fingerprint(&self) -> Option<u64> {
        self.kinks.get()
    }

    pub(crate) fn record_signs(&self, values: &[T]) {
        if let Some(mut h) = self.kinks.get() {
            for v in values {
                h = (h ^ u64::from(*v > T::zero())).wrapping_mul(0x0100_0000_01b3);
            }
            self.kinks.set(Some(h));
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var<'_, T> {
        self.leaf_shared(Arc::new(value), requires_grad)
    }

    pub fn leaf_shared(&self, value: Arc<Tensor<T>>, requires_grad: bool) -> Var<'_, T> {
        self.push_node(Node {
            value,
            requires_grad,
            op: None,
            grad: None,
        })
    }

    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, false)
    }

    fn push_node(&self, node: Node<T>) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    pub(crate) fn push(&self, value: Tensor<T>, op: Op<T>) -> Var<'_, T> {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            op.inputs().iter().any(|&i| nodes[i].requires_grad)
        };
        self.push_node(Node {
            value: Arc::new(value),
            requires_grad,
            op: requires_grad.then_some(op),
            grad: None,
        })
    }

    pub(crate) fn value_of(&self, id: NodeId) -> Arc<Tensor<T>> {
        self.nodes.borrow()[id].value.clone()
    }

    /// Accumulated gradient of a leaf, if any has been propagated to it.
    pub fn grad(&self, v: Var<'_, T>) -> Option<Tensor<T>> {
        self.nodes.borrow()[v.id].grad.clone()
    }

    pub fn take_grad(&self, v: Var<'_, T>) -> Option<Tensor<T>> {
        self.nodes.borrow_mut()[v.id].grad.take()
    }

    pub fn zero_grad(&self) {
        for n in self.nodes.borrow_mut().iter_mut() {
            n.grad = None;
        }
    }

    /// Propagates `d loss / d leaf` into every reachable leaf that requires a
    /// gradient. Repeated calls accumulate.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<()> {
        let leaf_grads = {
            let nodes = self.nodes.borrow();
            let root = &nodes[loss.id];
            if root.value.len() != 1 {
                return Err(Error::NonScalarLoss(root.value.shape().to_vec()));
            }
            let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.id).map(|_| None).collect();
            grads[loss.id] = Some(Tensor::full(root.value.shape().to_vec(), T::one()));
            let needs = |i: NodeId| nodes[i].requires_grad;
            let mut leaf_grads = Vec::new();
            for id in (0..=loss.id).rev() {
                let Some(g) = grads[id].take() else { continue };
                let node = &nodes[id];
                match &node.op {
                    None => {
                        if node.requires_grad {
                            leaf_grads.push((id, g));
                        }
                    }
                    Some(op) => {
                        for (input, gi) in backward_op(op, &node.value, &g, &nodes, &needs)? {
                            if !needs(input) {
                                continue;
                            }
                            match &mut grads[input] {
                                Some(acc) => acc.add_assign(&gi),
                                slot @ None => *slot = Some(gi),
                            }
                        }
                    }
                }
            }
            leaf_grads
        };
        let mut nodes = self.nodes.borrow_mut();
        for (id, g) in leaf_grads {
            match &mut nodes[id].grad {
                Some(acc) => acc.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }
}

type Contributions<T> = Vec<(NodeId, Tensor<T>)>;

fn backward_op<T: Real>(
    op: &Op<T>,
    out: &Tensor<T>,
    g: &Tensor<T>,
    nodes: &[Node<T>],
    needs: &dyn Fn(NodeId) -> bool,
) -> Result<Contributions<T>> {
    let val = |i: NodeId| -> &Tensor<T> { &nodes[i].value };
    Ok(match op {
        Op::Binary(kind, a, b) => elementwise::binary_backward(*kind, *a, *b, val(*a), val(*b), g, needs),
        Op::Unary(u, x) => vec![(*x, elementwise::unary_backward(*u, val(*x), out, g))],
        Op::Sum(x) => vec![(*x, Tensor::full(val(*x).shape().to_vec(), g.item()))],
        Op::Mean(x) => {
            let n = T::lit(val(*x).len() as f64);
            vec![(*x, Tensor::full(val(*x).shape().to_vec(), g.item() / n))]
        }
        Op::MatMul(a, b) => linalg::matmul_backward(*a, *b, val(*a), val(*b), g, needs),
        Op::Reshape(x) => vec![(*x, g.clone().reshape(val(*x).shape().to_vec())?)],
        Op::Permute(x, axes) => vec![(*x, layout::permute_backward(g, axes)?)],
        Op::Concat(xs) => layout::concat_backward(xs, &xs.iter().map(|&i| val(i)).collect::<Vec<_>>(), g),
        Op::Im2col3x3(x) => vec![(*x, conv::col2im3x3(g, val(*x).shape()))],
        Op::Depthwise3x3 { x, w, b } => conv::depthwise_backward(*x, *w, *b, val(*x), val(*w), g, needs),
        Op::CausalConv1d { x, w, b } => conv::causal_conv1d_backward(*x, *w, *b, val(*x), val(*w), g, needs),
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        } => norm::layer_norm_backward(*x, *gamma, *beta, val(*gamma), xhat, rstd, g, needs),
        Op::SelectiveScan(saved) => {
            let vals: Vec<&Tensor<T>> = saved.inputs.iter().map(|&i| val(i)).collect();
            crate::ssm::kernel::selective_scan_backward(saved, &vals, g)
        }
        Op::Dft2(x) => vec![(*x, spectral::dft2_backward(g))],
    })
}

impl<'t, T: Real> Var<'t, T> {
    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Arc<Tensor<T>> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    pub fn grad(&self) -> Option<Tensor<T>> {
        self.tape.grad(*self)
    }

    fn same_tape(&self, other: &Var<'_, T>) {
        assert!(std::ptr::eq(self.tape, other.tape), "vars belong to different tapes");
    }

    pub fn sum(&self) -> Var<'t, T> {
        let s = self.value().sum();
        self.tape.push(Tensor::scalar(s), Op::Sum(self.id))
    }

    pub fn mean(&self) -> Var<'t, T> {
        let v = self.value();
        let s = v.sum() / T::lit(v.len().max(1) as f64);
        self.tape.push(Tensor::scalar(s), Op::Mean(self.id))
    }

    /// Fused selective scan over a batch of sequences; see
    /// [`crate::ssm::kernel`] for the contract.
    pub fn selective_scan(
        &self,
        delta: Var<'t, T>,
        a: Var<'t, T>,
        b: Var<'t, T>,
        c: Var<'t, T>,
        d: Var<'t, T>,
        mode: ScanMode,
    ) -> Result<Var<'t, T>> {
        for v in [&delta, &a, &b, &c, &d] {
            self.same_tape(v);
        }
        let ids = [self.id, delta.id, a.id, b.id, c.id, d.id];
        let vals: Vec<Arc<Tensor<T>>> = ids.iter().map(|&i| self.tape.value_of(i)).collect();
        let refs: Vec<&Tensor<T>> = vals.iter().map(|v| v.as_ref()).collect();
        let (y, saved) = crate::ssm::kernel::selective_scan_forward(&refs, ids, mode)?;
        Ok(self.tape.push(y, Op::SelectiveScan(Box::new(saved))))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gives_unit_gradient() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_f64([2, 3], &[1., 2., 3., 4., 5., 6.]).unwrap(), true);
        let loss = x.sum();
        tape.backward(loss).unwrap();
        assert_eq!(x.grad().unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn square_sum_gradient_is_twice_input() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_f64([2], &[1., 2.]).unwrap(), true);
        let loss = x.mul(x).unwrap().sum();
        tape.backward(loss).unwrap();
        assert_eq!(x.grad().unwrap().data(), &[2., 4.]);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_f64([2], &[1., 2.]).unwrap(), true);
        let loss = x.mul(x).unwrap().sum();
        tape.backward(loss).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(x.grad().unwrap().data(), &[4., 8.]);
        tape.zero_grad();
        assert!(x.grad().is_none());
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::zeros([2]), true);
        assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn constants_record_no_ops() {
        let tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::ones([3]));
        let y = x.exp().sum();
        assert!(!y.requires_grad());
        assert!(tape.nodes.borrow().iter().all(|n| n.op.is_none()));
    }
}
