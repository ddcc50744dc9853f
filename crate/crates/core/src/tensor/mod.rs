//! Dense f64 tensors with a reverse-mode computation record.
//!
//! Every operation on a [`Tensor`] that carries a node handle is appended to
//! the owning [`Tape`]. [`grad`] walks the record backwards and expresses each
//! vector-Jacobian product with the same primitives, so the returned gradients
//! are ordinary recorded tensors and can be differentiated again.
//!
//! ```
//! use metapool::tensor::{grad, Tape};
//!
//! let tape = Tape::new();
//! let x = tape.scalar(2.0);
//! let y = x.powf(3.0).unwrap();
//! let dy = grad(&y, &[&x]).unwrap().remove(0);
//! let d2y = grad(&dy, &[&x]).unwrap().remove(0);
//! assert_eq!(dy.item(), 12.0);
//! assert_eq!(d2y.item(), 12.0);
//! ```

mod check;
pub mod io;
mod kernels;
mod ops;
mod tape;

use std::fmt;
use std::rc::Rc;

use ndarray::{ArrayD, IxDyn};
use thiserror::Error;

pub use check::{finite_difference_check, relative_error};
pub use kernels::window_count;
pub use tape::{grad, grad_detached, RecordEntry, ReplayReport, Tape};

/// Owned storage behind every tensor.
pub type Array = ArrayD<f64>;

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: domain error at operand {operand}, flat index {index} (value {value})")]
    Domain {
        op: &'static str,
        operand: usize,
        index: usize,
        value: f64,
    },
    #[error("{op}: non-finite result at flat index {index}")]
    NonFinite { op: &'static str, index: usize },
    #[error("{op}: {reason}")]
    InvalidArgument { op: &'static str, reason: String },
    #[error("gradient requested of a non-scalar output with shape {0:?}")]
    NonScalarOutput(Vec<usize>),
    #[error("input {0} is not part of the output's computation record")]
    NotInRecord(usize),
    #[error("operands belong to different computation records")]
    ForeignRecord,
}

impl TensorError {
    pub(crate) fn invalid(op: &'static str, reason: impl Into<String>) -> Self {
        TensorError::InvalidArgument {
            op,
            reason: reason.into(),
        }
    }
}

/// Primitive operation tags. Parameters that are not tensors live in the tag.
#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Scale(f64),
    Offset(f64),
    PowScalar(f64),
    Exp,
    Log,
    Sigmoid,
    Relu,
    MatMul,
    /// Sum along one axis, keeping it with extent 1.
    SumAxis(usize),
    SumAll,
    /// Max along one axis, keeping it with extent 1. Ties go to the lowest index.
    MaxAxis(usize),
    MaxAll,
    BroadcastTo(Vec<usize>),
    /// Sum broadcast axes away so the result has the given shape.
    SumTo(Vec<usize>),
    Reshape(Vec<usize>),
    Slice {
        axis: usize,
        start: usize,
        end: usize,
    },
    /// Zero-padded embedding of the operand into `len` positions along `axis`.
    Embed {
        axis: usize,
        start: usize,
        len: usize,
    },
    Concat(usize),
    Permute(Vec<usize>),
    Flip(Vec<usize>),
    /// Same-padded, stride-1 cross-correlation `B×C×H×W ⊛ O×C×kh×kw`.
    Conv2d,
    /// Kernel gradient of [`Op::Conv2d`] from `(input, upstream)`.
    ConvKernelGrad { kh: usize, kw: usize },
    /// `B×C×H×W` to `B×C×windows×(kh·kw)`, windows in raster order.
    Unfold2d {
        kh: usize,
        kw: usize,
        sh: usize,
        sw: usize,
    },
    /// Adjoint of [`Op::Unfold2d`]; overlapping contributions are summed.
    Fold2d {
        kh: usize,
        kw: usize,
        sh: usize,
        sw: usize,
        h: usize,
        w: usize,
    },
}

impl Op {
    pub fn tag(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::Neg => "neg",
            Op::Scale(_) => "scale",
            Op::Offset(_) => "offset",
            Op::PowScalar(_) => "pow",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::Sigmoid => "sigmoid",
            Op::Relu => "relu",
            Op::MatMul => "matmul",
            Op::SumAxis(_) => "sum_axis",
            Op::SumAll => "sum",
            Op::MaxAxis(_) => "max_axis",
            Op::MaxAll => "max",
            Op::BroadcastTo(_) => "broadcast",
            Op::SumTo(_) => "sum_to",
            Op::Reshape(_) => "reshape",
            Op::Slice { .. } => "slice",
            Op::Embed { .. } => "embed",
            Op::Concat(_) => "concat",
            Op::Permute(_) => "permute",
            Op::Flip(_) => "flip",
            Op::Conv2d => "conv2d",
            Op::ConvKernelGrad { .. } => "conv2d_kernel_grad",
            Op::Unfold2d { .. } => "unfold2d",
            Op::Fold2d { .. } => "fold2d",
        }
    }
}

#[derive(Clone)]
pub(crate) struct Var {
    pub(crate) tape: Tape,
    pub(crate) id: usize,
}

/// An n-dimensional f64 array, optionally linked to a node of a [`Tape`].
#[derive(Clone)]
pub struct Tensor {
    value: Rc<Array>,
    var: Option<Var>,
}

impl Tensor {
    /// A constant (not recorded) tensor. The array is copied into standard layout.
    pub fn constant(value: Array) -> Self {
        Tensor {
            value: Rc::new(standard(value)),
            var: None,
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(TensorError::invalid(
                "from_vec",
                format!("shape {shape:?} needs {n} elements, got {}", data.len()),
            ));
        }
        let arr = Array::from_shape_vec(IxDyn(shape), data)
            .map_err(|e| TensorError::invalid("from_vec", e.to_string()))?;
        Ok(Tensor::constant(arr))
    }

    pub fn scalar(v: f64) -> Self {
        Tensor::constant(Array::from_elem(IxDyn(&[]), v))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor::constant(Array::zeros(IxDyn(shape)))
    }

    pub fn ones(shape: &[usize]) -> Self {
        Tensor::constant(Array::ones(IxDyn(shape)))
    }

    pub(crate) fn from_parts(value: Rc<Array>, var: Option<Var>) -> Self {
        Tensor { value, var }
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn value(&self) -> &Array {
        &self.value
    }

    /// Row-major element slice.
    pub fn data(&self) -> &[f64] {
        self.value
            .as_slice()
            .expect("tensor storage is always standard layout")
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.data().to_vec()
    }

    /// The single element of a one-element tensor.
    ///
    /// Panics if the tensor has more than one element.
    pub fn item(&self) -> f64 {
        assert_eq!(self.len(), 1, "item() on tensor of shape {:?}", self.shape());
        self.data()[0]
    }

    /// Node id in the owning record, if any.
    pub fn node_id(&self) -> Option<usize> {
        self.var.as_ref().map(|v| v.id)
    }

    pub fn tape(&self) -> Option<&Tape> {
        self.var.as_ref().map(|v| &v.tape)
    }

    pub fn is_recorded(&self) -> bool {
        self.var.is_some()
    }

    /// Same values, cut from the record.
    pub fn detach(&self) -> Tensor {
        Tensor {
            value: Rc::clone(&self.value),
            var: None,
        }
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape())
            .field("node", &self.node_id())
            .field("values", &self.value)
            .finish()
    }
}

pub(crate) fn standard(a: Array) -> Array {
    if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().into_owned()
    }
}

/// Numpy-style result shape for trailing-aligned broadcasting.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}
