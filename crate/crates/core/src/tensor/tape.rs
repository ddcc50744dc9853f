use std::cell::RefCell;
use std::rc::Rc;

use super::kernels::{argmax_all_mask, argmax_mask, forward};
use super::{Array, Op, Result, Tensor, TensorError, Var};

struct Node {
    op: Op,
    inputs: Vec<usize>,
    value: Rc<Array>,
}

/// A single-threaded computation record. Cloning shares the record.
#[derive(Clone, Default)]
pub struct Tape {
    nodes: Rc<RefCell<Vec<Node>>>,
}

/// One entry of the record as seen from outside.
#[derive(Debug, Clone, PartialEq)]
pub struct RecordEntry {
    pub tag: &'static str,
    pub operands: Vec<usize>,
    pub result: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplayReport {
    pub entries: usize,
    /// Ids whose recomputed value differed bitwise from the stored one.
    pub mismatched: Vec<usize>,
}

impl ReplayReport {
    pub fn is_identical(&self) -> bool {
        self.mismatched.is_empty()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a differentiable leaf.
    pub fn var(&self, value: Array) -> Tensor {
        let value = Rc::new(super::standard(value));
        let id = self.push(Op::Leaf, Vec::new(), Rc::clone(&value));
        Tensor::from_parts(
            value,
            Some(Var {
                tape: self.clone(),
                id,
            }),
        )
    }

    pub fn scalar(&self, v: f64) -> Tensor {
        self.var(Array::from_elem(ndarray::IxDyn(&[]), v))
    }

    /// Registers an existing tensor's value as a new leaf of this record.
    pub fn watch(&self, t: &Tensor) -> Tensor {
        self.var(t.value().clone())
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn same(&self, other: &Tape) -> bool {
        Rc::ptr_eq(&self.nodes, &other.nodes)
    }

    pub fn entries(&self) -> Vec<RecordEntry> {
        self.nodes
            .borrow()
            .iter()
            .enumerate()
            .map(|(i, n)| RecordEntry {
                tag: n.op.tag(),
                operands: n.inputs.clone(),
                result: i,
            })
            .collect()
    }

    /// Re-executes every recorded primitive from the stored leaves and compares bits.
    pub fn replay(&self) -> Result<ReplayReport> {
        let nodes = self.nodes.borrow();
        let mut values: Vec<Rc<Array>> = Vec::with_capacity(nodes.len());
        let mut mismatched = Vec::new();
        for (i, node) in nodes.iter().enumerate() {
            let value = if node.op == Op::Leaf {
                Rc::clone(&node.value)
            } else {
                let args: Vec<&Array> = node.inputs.iter().map(|&j| values[j].as_ref()).collect();
                Rc::new(forward(&node.op, &args)?)
            };
            let same = value.shape() == node.value.shape()
                && value
                    .iter()
                    .zip(node.value.iter())
                    .all(|(a, b)| a.to_bits() == b.to_bits());
            if !same {
                mismatched.push(i);
            }
            values.push(value);
        }
        Ok(ReplayReport {
            entries: nodes.len(),
            mismatched,
        })
    }

    fn push(&self, op: Op, inputs: Vec<usize>, value: Rc<Array>) -> usize {
        let mut nodes = self.nodes.borrow_mut();
        debug_assert!(inputs.iter().all(|&i| i < nodes.len()));
        nodes.push(Node { op, inputs, value });
        nodes.len() - 1
    }

    fn node(&self, id: usize) -> (Op, Vec<usize>, Rc<Array>) {
        let nodes = self.nodes.borrow();
        let n = &nodes[id];
        (n.op.clone(), n.inputs.clone(), Rc::clone(&n.value))
    }

    fn value(&self, id: usize) -> Rc<Array> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn handle(&self, id: usize, value: Rc<Array>) -> Tensor {
        Tensor::from_parts(
            value,
            Some(Var {
                tape: self.clone(),
                id,
            }),
        )
    }
}

/// Applies a primitive, recording it when any operand is recorded.
pub(crate) fn apply(op: Op, operands: &[&Tensor]) -> Result<Tensor> {
    let args: Vec<&Array> = operands.iter().map(|t| t.value()).collect();
    let value = Rc::new(forward(&op, &args)?);
    let tape = match operands.iter().find_map(|t| t.tape()) {
        Some(t) => t.clone(),
        None => return Ok(Tensor::from_parts(value, None)),
    };
    let mut inputs = Vec::with_capacity(operands.len());
    for t in operands {
        match &t.var {
            Some(v) if v.tape.same(&tape) => inputs.push(v.id),
            Some(_) => return Err(TensorError::ForeignRecord),
            None => inputs.push(tape.push(Op::Leaf, Vec::new(), Rc::clone(&t.value))),
        }
    }
    let id = tape.push(op, inputs, Rc::clone(&value));
    Ok(tape.handle(id, value))
}

/// Gradients of a scalar `output` with respect to `inputs`.
///
/// The returned tensors are recorded, so they can be differentiated again.
/// Inputs the output does not depend on get zero gradients.
pub fn grad(output: &Tensor, inputs: &[&Tensor]) -> Result<Vec<Tensor>> {
    backward(output, inputs, true)
}

/// Like [`grad`] but returns constants, skipping the cost of recording the backward pass.
pub fn grad_detached(output: &Tensor, inputs: &[&Tensor]) -> Result<Vec<Tensor>> {
    backward(output, inputs, false)
}

fn backward(output: &Tensor, inputs: &[&Tensor], record: bool) -> Result<Vec<Tensor>> {
    if output.len() != 1 {
        return Err(TensorError::NonScalarOutput(output.shape().to_vec()));
    }
    let out_var = output.var.as_ref().ok_or(TensorError::NotInRecord(0))?;
    let tape = out_var.tape.clone();
    let mut input_ids = Vec::with_capacity(inputs.len());
    for (k, t) in inputs.iter().enumerate() {
        match &t.var {
            Some(v) if v.tape.same(&tape) => input_ids.push(v.id),
            _ => return Err(TensorError::NotInRecord(k)),
        }
    }

    let root = out_var.id;
    // Nodes lying on some path from an input to the output.
    let mut needed = vec![false; root + 1];
    {
        let nodes = tape.nodes.borrow();
        for &i in &input_ids {
            if i <= root {
                needed[i] = true;
            }
        }
        for i in 0..=root {
            if !needed[i] && nodes[i].inputs.iter().any(|&j| needed[j]) {
                needed[i] = true;
            }
        }
    }

    let mut adjoint: Vec<Option<Tensor>> = vec![None; root + 1];
    if needed[root] {
        adjoint[root] = Some(Tensor::ones(output.shape()));
    }
    for id in (0..=root).rev() {
        let Some(upstream) = adjoint[id].clone() else {
            continue;
        };
        let (op, operand_ids, value) = tape.node(id);
        if op == Op::Leaf || operand_ids.iter().all(|&j| !needed[j]) {
            continue;
        }
        let wrap = |i: usize, v: Rc<Array>| {
            if record {
                tape.handle(i, v)
            } else {
                Tensor::from_parts(v, None)
            }
        };
        let operands: Vec<Tensor> = operand_ids
            .iter()
            .map(|&j| wrap(j, tape.value(j)))
            .collect();
        let result = wrap(id, value);
        let want: Vec<bool> = operand_ids.iter().map(|&j| needed[j]).collect();
        let grads = vjp(&op, &operands, &result, &upstream, &want)?;
        for ((g, &j), w) in grads.into_iter().zip(&operand_ids).zip(&want) {
            if !w {
                continue;
            }
            let Some(g) = g else { continue };
            adjoint[j] = Some(match adjoint[j].take() {
                Some(acc) => acc.add(&g)?,
                None => g,
            });
        }
    }

    Ok(input_ids
        .iter()
        .zip(inputs)
        .map(|(&i, t)| {
            let g = if i <= root { adjoint[i].clone() } else { None };
            g.unwrap_or_else(|| Tensor::zeros(t.shape()))
        })
        .collect())
}

fn unbroadcast(g: Tensor, shape: &[usize]) -> Result<Tensor> {
    if g.shape() == shape {
        Ok(g)
    } else {
        g.sum_to(shape)
    }
}

fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Vector-Jacobian products of one primitive, written with primitives.
fn vjp(op: &Op, x: &[Tensor], y: &Tensor, g: &Tensor, want: &[bool]) -> Result<Vec<Option<Tensor>>> {
    let one = |t: Tensor| Ok(vec![Some(t)]);
    match op {
        Op::Leaf => Ok(vec![]),
        Op::Add | Op::Sub => {
            let ga = if want[0] { Some(unbroadcast(g.clone(), x[0].shape())?) } else { None };
            let gb = match (want[1], op) {
                (false, _) => None,
                (true, Op::Add) => Some(unbroadcast(g.clone(), x[1].shape())?),
                (true, _) => Some(unbroadcast(g.neg()?, x[1].shape())?),
            };
            Ok(vec![ga, gb])
        }
        Op::Mul => {
            let ga = if want[0] { Some(unbroadcast(g.mul(&x[1])?, x[0].shape())?) } else { None };
            let gb = if want[1] { Some(unbroadcast(g.mul(&x[0])?, x[1].shape())?) } else { None };
            Ok(vec![ga, gb])
        }
        Op::Div => {
            let ga = if want[0] { Some(unbroadcast(g.div(&x[1])?, x[0].shape())?) } else { None };
            let gb = if want[1] {
                // -g * y / b
                Some(unbroadcast(g.mul(y)?.div(&x[1])?.neg()?, x[1].shape())?)
            } else {
                None
            };
            Ok(vec![ga, gb])
        }
        Op::Neg => one(g.neg()?),
        Op::Scale(c) => one(g.scale(*c)?),
        Op::Offset(_) => one(g.clone()),
        Op::PowScalar(c) => {
            let c = *c;
            if c == 1.0 {
                return one(g.clone());
            }
            let d = if c == 2.0 {
                x[0].scale(2.0)?
            } else {
                x[0].powf(c - 1.0)?.scale(c)?
            };
            one(g.mul(&d)?)
        }
        Op::Exp => one(g.mul(y)?),
        Op::Log => one(g.div(&x[0])?),
        Op::Sigmoid => {
            // y (1 - y)
            let d = y.mul(&y.neg()?.offset(1.0)?)?;
            one(g.mul(&d)?)
        }
        Op::Relu => {
            let mask = x[0].value().mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
            one(g.mul(&Tensor::constant(mask))?)
        }
        Op::MatMul => {
            let ga = if want[0] { Some(g.matmul(&x[1].transpose()?)?) } else { None };
            let gb = if want[1] { Some(x[0].transpose()?.matmul(g)?) } else { None };
            Ok(vec![ga, gb])
        }
        Op::SumAxis(_) | Op::SumAll => one(g.broadcast_to(x[0].shape())?),
        Op::MaxAxis(axis) => {
            let mask = Tensor::constant(argmax_mask(x[0].value(), *axis));
            one(g.broadcast_to(x[0].shape())?.mul(&mask)?)
        }
        Op::MaxAll => {
            let mask = Tensor::constant(argmax_all_mask(x[0].value()));
            one(g.broadcast_to(x[0].shape())?.mul(&mask)?)
        }
        Op::BroadcastTo(_) => one(unbroadcast(g.clone(), x[0].shape())?),
        Op::SumTo(_) => one(g.broadcast_to(x[0].shape())?),
        Op::Reshape(_) => one(g.reshape(x[0].shape())?),
        Op::Slice { axis, start, .. } => one(g.embed(*axis, *start, x[0].shape()[*axis])?),
        Op::Embed { axis, start, .. } => {
            let len = x[0].shape()[*axis];
            one(g.slice(*axis, *start, start + len)?)
        }
        Op::Concat(axis) => {
            let mut start = 0;
            let mut out = Vec::with_capacity(x.len());
            for (t, &w) in x.iter().zip(want) {
                let len = t.shape()[*axis];
                out.push(if w { Some(g.slice(*axis, start, start + len)?) } else { None });
                start += len;
            }
            Ok(out)
        }
        Op::Permute(perm) => one(g.permute(&inverse_permutation(perm))?),
        Op::Flip(axes) => one(g.flip(axes)?),
        Op::Conv2d => {
            let (kh, kw) = (x[1].shape()[2], x[1].shape()[3]);
            let gx = if want[0] { Some(g.conv2d(&x[1].conv_adjoint_kernel()?)?) } else { None };
            let gk = if want[1] { Some(x[0].conv2d_kernel_grad(g, kh, kw)?) } else { None };
            Ok(vec![gx, gk])
        }
        Op::ConvKernelGrad { .. } => {
            // y = K-grad(input, upstream); g has the kernel's shape.
            let gi = if want[0] { Some(x[1].conv2d(&g.conv_adjoint_kernel()?)?) } else { None };
            let gu = if want[1] { Some(x[0].conv2d(g)?) } else { None };
            Ok(vec![gi, gu])
        }
        Op::Unfold2d { kh, kw, sh, sw } => {
            let s = x[0].shape();
            one(g.fold2d(*kh, *kw, *sh, *sw, s[2], s[3])?)
        }
        Op::Fold2d { kh, kw, sh, sw, .. } => one(g.unfold2d(*kh, *kw, *sh, *sw)?),
    }
}
