use std::cell::RefCell;
use std::collections::HashMap;

use super::ops::{self, BinaryOp, ReduceOp, UnaryOp};
use super::Tensor;
use crate::{Error, Real, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Everything a backward rule may look at.
pub struct BackwardArgs<'a> {
    /// Gradient of the loss with respect to this operation's output.
    pub grad: &'a Tensor,
    pub inputs: &'a [Tensor],
    pub output: &'a Tensor,
    /// Which inputs actually need a gradient.
    pub needs: &'a [bool],
}

/// Returns one optional gradient per input, each shaped like its input.
pub type BackwardFn = Box<dyn Fn(&BackwardArgs<'_>) -> Result<Vec<Option<Tensor>>> + Send>;

struct Node {
    value: Tensor,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

/// Execution record for reverse-mode differentiation.
///
/// Operations append nodes in execution order, so the node list is already
/// topologically sorted; [`Graph::backward`] walks it once in reverse.
/// Gradients are kept for leaves only.
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    grads: RefCell<Vec<Option<Tensor>>>,
    params: RefCell<HashMap<usize, Var>>,
    grad_enabled: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
            grads: RefCell::new(Vec::new()),
            params: RefCell::new(HashMap::new()),
            grad_enabled: true,
        }
    }

    /// A graph that records values only; nothing requires a gradient.
    pub fn no_grad() -> Self {
        Graph {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, node: Node) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var(nodes.len() - 1)
    }

    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var {
        self.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
            requires_grad: requires_grad && self.grad_enabled,
        })
    }

    pub fn constant(&self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Registers a trainable tensor. The same buffer always maps to the
    /// same leaf, so a parameter used twice accumulates both gradients.
    pub fn param(&self, value: &Tensor) -> Var {
        let id = value.buffer_id();
        if let Some(&v) = self.params.borrow().get(&id) {
            return v;
        }
        let v = self.leaf(value.clone(), true);
        self.params.borrow_mut().insert(id, v);
        v
    }

    pub fn value(&self, v: Var) -> Tensor {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    /// Records an operation. `backward` is dropped when no input needs a
    /// gradient.
    pub fn record(
        &self,
        inputs: &[Var],
        value: Tensor,
        backward: impl Fn(&BackwardArgs<'_>) -> Result<Vec<Option<Tensor>>> + Send + 'static,
    ) -> Var {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            inputs.iter().any(|p| nodes[p.0].requires_grad)
        };
        self.push(Node {
            value,
            parents: inputs.iter().map(|p| p.0).collect(),
            backward: requires_grad.then(|| Box::new(backward) as BackwardFn),
            requires_grad,
        })
    }

    /// Accumulates d(loss)/d(leaf) for every reachable leaf that requires
    /// a gradient. Repeated calls add to existing gradients.
    pub fn backward(&self, loss: Var) -> Result<()> {
        let nodes = self.nodes.borrow();
        let loss_value = &nodes[loss.0].value;
        if loss_value.numel() != 1 {
            return Err(Error::NonScalarLoss(loss_value.shape().to_vec()));
        }
        let mut grads = self.grads.borrow_mut();
        grads.resize(nodes.len(), None);
        let seed = Tensor::full(loss_value.shape().to_vec(), 1.0)?;
        accumulate(&mut grads[loss.0], seed)?;

        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(grad) = grads[i].take() else {
                continue;
            };
            let inputs: Vec<Tensor> = node.parents.iter().map(|&p| nodes[p].value.clone()).collect();
            let needs: Vec<bool> = node.parents.iter().map(|&p| nodes[p].requires_grad).collect();
            let parent_grads = backward(&BackwardArgs {
                grad: &grad,
                inputs: &inputs,
                output: &node.value,
                needs: &needs,
            })?;
            for ((&p, g), &need) in node.parents.iter().zip(parent_grads).zip(&needs) {
                if let (Some(g), true) = (g, need) {
                    debug_assert_eq!(g.shape(), nodes[p].value.shape(), "gradient shape");
                    accumulate(&mut grads[p], g)?;
                }
            }
        }
        Ok(())
    }

    /// Gradient of a leaf after [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        self.grads.borrow().get(v.0).cloned().flatten()
    }

    /// Gradient of a tensor registered with [`Graph::param`].
    pub fn grad_of(&self, value: &Tensor) -> Option<Tensor> {
        let v = *self.params.borrow().get(&value.buffer_id())?;
        self.grad(v)
    }

    pub fn binary(&self, op: BinaryOp, a: Var, b: Var) -> Result<Var> {
        let value = ops::binary(op, &self.value(a), &self.value(b))?;
        Ok(self.record(&[a, b], value, move |args| {
            let (x, y) = (&args.inputs[0], &args.inputs[1]);
            let g = args.grad;
            let (ga, gb) = match op {
                BinaryOp::Add => (g.clone(), g.clone()),
                BinaryOp::Sub => (g.clone(), ops::unary(UnaryOp::Neg, g)),
                BinaryOp::Mul => (
                    ops::binary(BinaryOp::Mul, g, y)?,
                    ops::binary(BinaryOp::Mul, g, x)?,
                ),
                BinaryOp::Div => {
                    let ga = ops::binary(BinaryOp::Div, g, y)?;
                    // d(x/y)/dy = -(x/y)/y
                    let gb = ops::binary(BinaryOp::Mul, &ga, args.output)?;
                    (ga, ops::unary(UnaryOp::Neg, &gb))
                }
            };
            let ga = args.needs[0].then(|| ops::sum_to_shape(&ga, x.shape())).transpose()?;
            let gb = args.needs[1].then(|| ops::sum_to_shape(&gb, y.shape())).transpose()?;
            Ok(vec![ga, gb])
        }))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Mul, a, b)
    }

    pub fn div(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Div, a, b)
    }

    pub fn add_scalar(&self, a: Var, s: Real) -> Result<Var> {
        let s = self.constant(Tensor::scalar(s));
        self.add(a, s)
    }

    pub fn mul_scalar(&self, a: Var, s: Real) -> Result<Var> {
        let s = self.constant(Tensor::scalar(s));
        self.mul(a, s)
    }

    pub fn unary(&self, op: UnaryOp, a: Var) -> Var {
        let value = ops::unary(op, &self.value(a));
        self.record(&[a], value, move |args| {
            let (x, y, g) = (&args.inputs[0], args.output, args.grad);
            let local: Vec<Real> = match op {
                UnaryOp::Neg => return Ok(vec![Some(ops::unary(UnaryOp::Neg, g))]),
                UnaryOp::Square => x.data().iter().map(|&v| 2.0 * v).collect(),
                UnaryOp::Sqrt => y.data().iter().map(|&v| 0.5 / v).collect(),
                UnaryOp::Relu => x
                    .data()
                    .iter()
                    .map(|&v| if v > 0.0 { 1.0 } else { 0.0 })
                    .collect(),
                UnaryOp::Tanh => y.data().iter().map(|&v| 1.0 - v * v).collect(),
                UnaryOp::Exp => y.data().to_vec(),
                UnaryOp::Sigmoid => y.data().iter().map(|&v| v * (1.0 - v)).collect(),
            };
            let data = g.data().iter().zip(&local).map(|(a, b)| a * b).collect();
            Ok(vec![Some(Tensor::from_parts(x.shape().to_vec(), data))])
        })
    }

    pub fn neg(&self, a: Var) -> Var {
        self.unary(UnaryOp::Neg, a)
    }

    pub fn square(&self, a: Var) -> Var {
        self.unary(UnaryOp::Square, a)
    }

    pub fn sqrt(&self, a: Var) -> Var {
        self.unary(UnaryOp::Sqrt, a)
    }

    pub fn relu(&self, a: Var) -> Var {
        self.unary(UnaryOp::Relu, a)
    }

    pub fn tanh(&self, a: Var) -> Var {
        self.unary(UnaryOp::Tanh, a)
    }

    pub fn exp(&self, a: Var) -> Var {
        self.unary(UnaryOp::Exp, a)
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        self.unary(UnaryOp::Sigmoid, a)
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let value = ops::matmul(&self.value(a), &self.value(b))?;
        Ok(self.record(&[a, b], value, |args| {
            let (x, y, g) = (&args.inputs[0], &args.inputs[1], args.grad);
            let ga = args.needs[0].then(|| ops::matmul_t(g, false, y, true)).transpose()?;
            let gb = args.needs[1].then(|| ops::matmul_t(x, true, g, false)).transpose()?;
            Ok(vec![ga, gb])
        }))
    }

    pub fn permute(&self, a: Var, perm: &[usize]) -> Result<Var> {
        let value = ops::permute(&self.value(a), perm)?;
        let mut inverse = vec![0; perm.len()];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p] = i;
        }
        Ok(self.record(&[a], value, move |args| {
            Ok(vec![Some(ops::permute(args.grad, &inverse)?)])
        }))
    }

    pub fn transpose(&self, a: Var, d0: usize, d1: usize) -> Result<Var> {
        let rank = self.shape(a).len();
        if d0 >= rank || d1 >= rank {
            return Err(Error::AxisOutOfRange {
                axis: d0.max(d1),
                rank,
            });
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(d0, d1);
        self.permute(a, &perm)
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshape(shape.to_vec())?;
        Ok(self.record(&[a], value, |args| {
            Ok(vec![Some(args.grad.reshape(args.inputs[0].shape().to_vec())?)])
        }))
    }

    pub fn broadcast_to(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = ops::broadcast_to(&self.value(a), shape)?;
        Ok(self.record(&[a], value, |args| {
            Ok(vec![Some(ops::sum_to_shape(args.grad, args.inputs[0].shape())?)])
        }))
    }

    /// Reduction along `axis`; the axis is removed from the shape.
    pub fn reduce(&self, op: ReduceOp, a: Var, axis: usize) -> Result<Var> {
        let x = self.value(a);
        let value = ops::reduce(op, &x, axis)?;
        Ok(self.record(&[a], value, move |args| {
            let x = &args.inputs[0];
            let (outer, len, inner) = ops::split_axis(x.shape(), axis)?;
            let (g, src) = (args.grad.data(), x.data());
            let out = args.output.data();
            let mut gx = vec![0.0; x.numel()];
            for o in 0..outer {
                for i in 0..inner {
                    let gi = g[o * inner + i];
                    let at = |l: usize| (o * len + l) * inner + i;
                    match op {
                        ReduceOp::Sum => (0..len).for_each(|l| gx[at(l)] = gi),
                        ReduceOp::Mean => (0..len).for_each(|l| gx[at(l)] = gi / len as Real),
                        ReduceOp::Max => {
                            let m = out[o * inner + i];
                            if let Some(l) = (0..len).find(|&l| src[at(l)] == m) {
                                gx[at(l)] = gi;
                            }
                        }
                        ReduceOp::Variance => {
                            let mean = (0..len).map(|l| src[at(l)]).sum::<Real>() / len as Real;
                            for l in 0..len {
                                gx[at(l)] = gi * 2.0 * (src[at(l)] - mean) / len as Real;
                            }
                        }
                    }
                }
            }
            Ok(vec![Some(Tensor::from_parts(x.shape().to_vec(), gx))])
        }))
    }

    pub fn sum(&self, a: Var, axis: usize) -> Result<Var> {
        self.reduce(ReduceOp::Sum, a, axis)
    }

    pub fn mean(&self, a: Var, axis: usize) -> Result<Var> {
        self.reduce(ReduceOp::Mean, a, axis)
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum_all(&self, a: Var) -> Result<Var> {
        let n = self.value(a).numel();
        let flat = self.reshape(a, &[n])?;
        self.sum(flat, 0)
    }

    pub fn mean_all(&self, a: Var) -> Result<Var> {
        let n = self.value(a).numel();
        let flat = self.reshape(a, &[n])?;
        self.mean(flat, 0)
    }

    pub fn softmax(&self, a: Var, axis: usize) -> Result<Var> {
        let value = ops::softmax(&self.value(a), axis)?;
        Ok(self.record(&[a], value, move |args| {
            let y = args.output;
            let (outer, len, inner) = ops::split_axis(y.shape(), axis)?;
            let (g, yd) = (args.grad.data(), y.data());
            let mut gx = vec![0.0; y.numel()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |l: usize| (o * len + l) * inner + i;
                    let dot: Real = (0..len).map(|l| g[at(l)] * yd[at(l)]).sum();
                    for l in 0..len {
                        gx[at(l)] = yd[at(l)] * (g[at(l)] - dot);
                    }
                }
            }
            Ok(vec![Some(Tensor::from_parts(y.shape().to_vec(), gx))])
        }))
    }

    pub fn concat(&self, parts: &[Var], axis: usize) -> Result<Var> {
        let values: Vec<Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let value = ops::concat(&values, axis)?;
        Ok(self.record(parts, value, move |args| {
            let mut start = 0;
            let mut out = Vec::with_capacity(args.inputs.len());
            for (x, &need) in args.inputs.iter().zip(args.needs) {
                let len = x.shape()[axis];
                out.push(need.then(|| ops::narrow(args.grad, axis, start, len)).transpose()?);
                start += len;
            }
            Ok(out)
        }))
    }

    pub fn flip(&self, a: Var, axis: usize) -> Result<Var> {
        let value = ops::flip(&self.value(a), axis)?;
        Ok(self.record(&[a], value, move |args| {
            Ok(vec![Some(ops::flip(args.grad, axis)?)])
        }))
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) -> Result<()> {
    *slot = Some(match slot.take() {
        None => g,
        Some(prev) => ops::binary(BinaryOp::Add, &prev, &g)?,
    });
    Ok(())
}
