use super::tape::apply;
use super::{Op, Result, Tensor, TensorError};

impl Tensor {
    /// Applies any primitive by tag. The typed methods below are thin wrappers.
    pub fn apply_primitive(op: Op, operands: &[&Tensor]) -> Result<Tensor> {
        apply(op, operands)
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        apply(Op::Add, &[self, other])
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        apply(Op::Sub, &[self, other])
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        apply(Op::Mul, &[self, other])
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        apply(Op::Div, &[self, other])
    }

    pub fn neg(&self) -> Result<Tensor> {
        apply(Op::Neg, &[self])
    }

    pub fn scale(&self, c: f64) -> Result<Tensor> {
        apply(Op::Scale(c), &[self])
    }

    pub fn offset(&self, c: f64) -> Result<Tensor> {
        apply(Op::Offset(c), &[self])
    }

    pub fn powf(&self, c: f64) -> Result<Tensor> {
        apply(Op::PowScalar(c), &[self])
    }

    pub fn square(&self) -> Result<Tensor> {
        self.powf(2.0)
    }

    pub fn exp(&self) -> Result<Tensor> {
        apply(Op::Exp, &[self])
    }

    pub fn log(&self) -> Result<Tensor> {
        apply(Op::Log, &[self])
    }

    pub fn sigmoid(&self) -> Result<Tensor> {
        apply(Op::Sigmoid, &[self])
    }

    pub fn relu(&self) -> Result<Tensor> {
        apply(Op::Relu, &[self])
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        apply(Op::MatMul, &[self, other])
    }

    pub fn transpose(&self) -> Result<Tensor> {
        if self.shape().len() != 2 {
            return Err(TensorError::invalid("transpose", "expected a matrix"));
        }
        self.permute(&[1, 0])
    }

    /// Sum along `axis`, keeping it with extent 1.
    pub fn sum_axis(&self, axis: usize) -> Result<Tensor> {
        apply(Op::SumAxis(axis), &[self])
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum(&self) -> Result<Tensor> {
        apply(Op::SumAll, &[self])
    }

    pub fn mean(&self) -> Result<Tensor> {
        let n = self.len() as f64;
        self.sum()?.scale(1.0 / n)
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Tensor> {
        let n = self.shape().get(axis).copied().unwrap_or(1) as f64;
        self.sum_axis(axis)?.scale(1.0 / n)
    }

    /// Max along `axis`, keeping it with extent 1.
    pub fn max_axis(&self, axis: usize) -> Result<Tensor> {
        apply(Op::MaxAxis(axis), &[self])
    }

    pub fn max(&self) -> Result<Tensor> {
        apply(Op::MaxAll, &[self])
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Tensor> {
        apply(Op::BroadcastTo(shape.to_vec()), &[self])
    }

    pub fn sum_to(&self, shape: &[usize]) -> Result<Tensor> {
        apply(Op::SumTo(shape.to_vec()), &[self])
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if shape == self.shape() {
            return Ok(self.clone());
        }
        apply(Op::Reshape(shape.to_vec()), &[self])
    }

    pub fn slice(&self, axis: usize, start: usize, end: usize) -> Result<Tensor> {
        apply(Op::Slice { axis, start, end }, &[self])
    }

    pub fn embed(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        apply(Op::Embed { axis, start, len }, &[self])
    }

    pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        apply(Op::Concat(axis), parts)
    }

    pub fn permute(&self, perm: &[usize]) -> Result<Tensor> {
        apply(Op::Permute(perm.to_vec()), &[self])
    }

    pub fn flip(&self, axes: &[usize]) -> Result<Tensor> {
        apply(Op::Flip(axes.to_vec()), &[self])
    }

    /// Same-padded stride-1 cross-correlation of `B×C×H×W` with `O×C×kh×kw`.
    pub fn conv2d(&self, kernel: &Tensor) -> Result<Tensor> {
        apply(Op::Conv2d, &[self, kernel])
    }

    /// Kernel gradient of [`Tensor::conv2d`] with `self` as the input.
    pub fn conv2d_kernel_grad(&self, upstream: &Tensor, kh: usize, kw: usize) -> Result<Tensor> {
        apply(Op::ConvKernelGrad { kh, kw }, &[self, upstream])
    }

    /// Channel-swapped, spatially flipped kernel whose convolution is the input adjoint.
    pub(crate) fn conv_adjoint_kernel(&self) -> Result<Tensor> {
        self.permute(&[1, 0, 2, 3])?.flip(&[2, 3])
    }

    pub fn unfold2d(&self, kh: usize, kw: usize, sh: usize, sw: usize) -> Result<Tensor> {
        apply(Op::Unfold2d { kh, kw, sh, sw }, &[self])
    }

    pub fn fold2d(&self, kh: usize, kw: usize, sh: usize, sw: usize, h: usize, w: usize) -> Result<Tensor> {
        apply(
            Op::Fold2d {
                kh,
                kw,
                sh,
                sw,
                h,
                w,
            },
            &[self],
        )
    }

    /// `max(self, floor)` written as `relu(self - floor) + floor`.
    pub fn clamp_min(&self, floor: f64) -> Result<Tensor> {
        self.offset(-floor)?.relu()?.offset(floor)
    }

    /// Log-sum-exp along `axis` (kept with extent 1), shifted by the detached maximum.
    pub fn logsumexp_axis(&self, axis: usize) -> Result<Tensor> {
        let m = self.max_axis(axis)?.detach();
        self.sub(&m)?.exp()?.sum_axis(axis)?.log()?.add(&m)
    }
}
