use ndarray::{concatenate, Axis, IxDyn, Slice};

use super::{broadcast_shape, standard, Array, Op, Result, TensorError};

fn mismatch(op: &Op, lhs: &[usize], rhs: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op: op.tag(),
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn arity(op: &Op, args: &[&Array], n: usize) -> Result<()> {
    if args.len() != n {
        return Err(TensorError::invalid(
            op.tag(),
            format!("expected {n} operands, got {}", args.len()),
        ));
    }
    Ok(())
}

fn check_axis(op: &Op, a: &Array, axis: usize) -> Result<()> {
    if axis >= a.ndim() {
        return Err(TensorError::invalid(
            op.tag(),
            format!("axis {axis} out of range for rank {}", a.ndim()),
        ));
    }
    Ok(())
}

fn domain(op: &Op, operand: usize, a: &Array, bad: impl Fn(f64) -> bool) -> Result<()> {
    if let Some((index, &value)) = a.iter().enumerate().find(|(_, &v)| bad(v)) {
        return Err(TensorError::Domain {
            op: op.tag(),
            operand,
            index,
            value,
        });
    }
    Ok(())
}

/// Evaluates one primitive. Shared by the forward pass and by replay.
pub(crate) fn forward(op: &Op, args: &[&Array]) -> Result<Array> {
    let out = match op {
        Op::Leaf => return Err(TensorError::invalid("leaf", "leaves are not evaluated")),
        Op::Add | Op::Sub | Op::Mul | Op::Div => {
            arity(op, args, 2)?;
            let (a, b) = (args[0], args[1]);
            if broadcast_shape(a.shape(), b.shape()).is_none() {
                return Err(mismatch(op, a.shape(), b.shape()));
            }
            match op {
                Op::Add => a + b,
                Op::Sub => a - b,
                Op::Mul => a * b,
                _ => {
                    domain(op, 1, b, |v| v == 0.0)?;
                    a / b
                }
            }
        }
        Op::Neg => {
            arity(op, args, 1)?;
            args[0].mapv(|v| -v)
        }
        Op::Scale(c) => {
            arity(op, args, 1)?;
            args[0].mapv(|v| v * c)
        }
        Op::Offset(c) => {
            arity(op, args, 1)?;
            args[0].mapv(|v| v + c)
        }
        Op::PowScalar(c) => {
            arity(op, args, 1)?;
            let c = *c;
            if c.fract() != 0.0 {
                domain(op, 0, args[0], |v| v < 0.0)?;
            }
            if c < 0.0 {
                domain(op, 0, args[0], |v| v == 0.0)?;
            }
            if c == 2.0 {
                args[0].mapv(|v| v * v)
            } else {
                args[0].mapv(|v| v.powf(c))
            }
        }
        Op::Exp => {
            arity(op, args, 1)?;
            args[0].mapv(f64::exp)
        }
        Op::Log => {
            arity(op, args, 1)?;
            domain(op, 0, args[0], |v| v <= 0.0)?;
            args[0].mapv(f64::ln)
        }
        Op::Sigmoid => {
            arity(op, args, 1)?;
            args[0].mapv(sigmoid)
        }
        Op::Relu => {
            arity(op, args, 1)?;
            args[0].mapv(|v| if v > 0.0 { v } else { 0.0 })
        }
        Op::MatMul => {
            arity(op, args, 2)?;
            let (a, b) = (args[0], args[1]);
            if a.ndim() != 2 || b.ndim() != 2 || a.shape()[1] != b.shape()[0] {
                return Err(mismatch(op, a.shape(), b.shape()));
            }
            let a2 = a.view().into_dimensionality::<ndarray::Ix2>().unwrap();
            let b2 = b.view().into_dimensionality::<ndarray::Ix2>().unwrap();
            a2.dot(&b2).into_dyn()
        }
        Op::SumAxis(axis) => {
            arity(op, args, 1)?;
            check_axis(op, args[0], *axis)?;
            args[0].sum_axis(Axis(*axis)).insert_axis(Axis(*axis))
        }
        Op::SumAll => {
            arity(op, args, 1)?;
            Array::from_elem(IxDyn(&[]), args[0].sum())
        }
        Op::MaxAxis(axis) => {
            arity(op, args, 1)?;
            check_axis(op, args[0], *axis)?;
            args[0]
                .map_axis(Axis(*axis), |lane| {
                    lane.iter().copied().fold(f64::NEG_INFINITY, f64::max)
                })
                .insert_axis(Axis(*axis))
        }
        Op::MaxAll => {
            arity(op, args, 1)?;
            let m = args[0].iter().copied().fold(f64::NEG_INFINITY, f64::max);
            Array::from_elem(IxDyn(&[]), m)
        }
        Op::BroadcastTo(shape) => {
            arity(op, args, 1)?;
            match args[0].broadcast(IxDyn(shape)) {
                Some(v) => v.to_owned(),
                None => return Err(mismatch(op, args[0].shape(), shape)),
            }
        }
        Op::SumTo(shape) => {
            arity(op, args, 1)?;
            sum_to(op, args[0], shape)?
        }
        Op::Reshape(shape) => {
            arity(op, args, 1)?;
            let n: usize = shape.iter().product();
            if n != args[0].len() {
                return Err(mismatch(op, args[0].shape(), shape));
            }
            standard(args[0].clone())
                .into_shape_with_order(IxDyn(shape))
                .map_err(|e| TensorError::invalid("reshape", e.to_string()))?
        }
        Op::Slice { axis, start, end } => {
            arity(op, args, 1)?;
            check_axis(op, args[0], *axis)?;
            if start >= end || *end > args[0].shape()[*axis] {
                return Err(TensorError::invalid(
                    "slice",
                    format!(
                        "range {start}..{end} invalid for extent {}",
                        args[0].shape()[*axis]
                    ),
                ));
            }
            args[0]
                .slice_axis(Axis(*axis), Slice::from(*start..*end))
                .to_owned()
        }
        Op::Embed { axis, start, len } => {
            arity(op, args, 1)?;
            check_axis(op, args[0], *axis)?;
            let a = args[0];
            let extent = a.shape()[*axis];
            if start + extent > *len {
                return Err(TensorError::invalid(
                    "embed",
                    format!("{extent} values at {start} exceed length {len}"),
                ));
            }
            let mut shape = a.shape().to_vec();
            shape[*axis] = *len;
            let mut out = Array::zeros(IxDyn(&shape));
            out.slice_axis_mut(Axis(*axis), Slice::from(*start..start + extent))
                .assign(a);
            out
        }
        Op::Concat(axis) => {
            if args.is_empty() {
                return Err(TensorError::invalid("concat", "no operands"));
            }
            check_axis(op, args[0], *axis)?;
            for a in &args[1..] {
                let ok = a.ndim() == args[0].ndim()
                    && (0..a.ndim()).all(|d| d == *axis || a.shape()[d] == args[0].shape()[d]);
                if !ok {
                    return Err(mismatch(op, args[0].shape(), a.shape()));
                }
            }
            let views: Vec<_> = args.iter().map(|a| a.view()).collect();
            concatenate(Axis(*axis), &views)
                .map_err(|e| TensorError::invalid("concat", e.to_string()))?
        }
        Op::Permute(perm) => {
            arity(op, args, 1)?;
            let mut seen = vec![false; perm.len()];
            let valid = perm.len() == args[0].ndim()
                && perm.iter().all(|&p| p < perm.len() && !std::mem::replace(&mut seen[p], true));
            if !valid {
                return Err(TensorError::invalid(
                    "permute",
                    format!("{perm:?} is not a permutation of rank {}", args[0].ndim()),
                ));
            }
            args[0].view().permuted_axes(IxDyn(perm)).to_owned()
        }
        Op::Flip(axes) => {
            arity(op, args, 1)?;
            let mut v = args[0].view();
            for &ax in axes {
                check_axis(op, args[0], ax)?;
                v.invert_axis(Axis(ax));
            }
            v.to_owned()
        }
        Op::Conv2d => {
            arity(op, args, 2)?;
            conv2d(op, args[0], args[1])?
        }
        Op::ConvKernelGrad { kh, kw } => {
            arity(op, args, 2)?;
            conv2d_kernel_grad(op, args[0], args[1], *kh, *kw)?
        }
        Op::Unfold2d { kh, kw, sh, sw } => {
            arity(op, args, 1)?;
            unfold2d(op, args[0], *kh, *kw, *sh, *sw)?
        }
        Op::Fold2d {
            kh,
            kw,
            sh,
            sw,
            h,
            w,
        } => {
            arity(op, args, 1)?;
            fold2d(op, args[0], *kh, *kw, *sh, *sw, *h, *w)?
        }
    };
    let out = standard(out);
    if let Some(index) = out.iter().position(|v| !v.is_finite()) {
        return Err(TensorError::NonFinite {
            op: op.tag(),
            index,
        });
    }
    Ok(out)
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn sum_to(op: &Op, a: &Array, shape: &[usize]) -> Result<Array> {
    if broadcast_shape(a.shape(), shape).as_deref() != Some(a.shape()) || shape.len() > a.ndim() {
        return Err(mismatch(op, a.shape(), shape));
    }
    let lead = a.ndim() - shape.len();
    let mut out = a.clone();
    for _ in 0..lead {
        out = out.sum_axis(Axis(0));
    }
    for (d, &target) in shape.iter().enumerate() {
        if target == 1 && out.shape()[d] != 1 {
            out = out.sum_axis(Axis(d)).insert_axis(Axis(d));
        }
    }
    Ok(out)
}

/// One-hot mask of the first maximum along `axis`.
pub(crate) fn argmax_mask(a: &Array, axis: usize) -> Array {
    let mut mask = Array::zeros(a.raw_dim());
    for (lane, mut mlane) in a
        .lanes(Axis(axis))
        .into_iter()
        .zip(mask.lanes_mut(Axis(axis)))
    {
        let mut best = 0;
        for (i, &v) in lane.iter().enumerate() {
            if v > lane[best] {
                best = i;
            }
        }
        mlane[best] = 1.0;
    }
    mask
}

pub(crate) fn argmax_all_mask(a: &Array) -> Array {
    let mut mask = Array::zeros(a.raw_dim());
    let data = a.as_slice().expect("standard layout");
    let mut best = 0;
    for (i, &v) in data.iter().enumerate() {
        if v > data[best] {
            best = i;
        }
    }
    mask.as_slice_mut().unwrap()[best] = 1.0;
    mask
}

fn dims4(op: &Op, a: &Array) -> Result<[usize; 4]> {
    if a.ndim() != 4 {
        return Err(TensorError::invalid(
            op.tag(),
            format!("expected a rank-4 operand, got shape {:?}", a.shape()),
        ));
    }
    let s = a.shape();
    Ok([s[0], s[1], s[2], s[3]])
}

fn conv2d(op: &Op, x: &Array, k: &Array) -> Result<Array> {
    let [b, c, h, w] = dims4(op, x)?;
    let [o, kc, kh, kw] = dims4(op, k)?;
    if kc != c {
        return Err(mismatch(op, x.shape(), k.shape()));
    }
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(TensorError::invalid("conv2d", "kernel extents must be odd"));
    }
    let (ph, pw) = (kh / 2, kw / 2);
    let xs = x.as_slice().unwrap();
    let ks = k.as_slice().unwrap();
    let mut out = vec![0.0; b * o * h * w];
    for bi in 0..b {
        for oi in 0..o {
            let dst = &mut out[(bi * o + oi) * h * w..(bi * o + oi + 1) * h * w];
            for ci in 0..c {
                let src = &xs[(bi * c + ci) * h * w..(bi * c + ci + 1) * h * w];
                for u in 0..kh {
                    for v in 0..kw {
                        let kv = ks[((oi * c + ci) * kh + u) * kw + v];
                        if kv == 0.0 {
                            continue;
                        }
                        // output row y reads input row y + u - ph
                        let y0 = ph.saturating_sub(u);
                        let y1 = (h + ph).saturating_sub(u).min(h);
                        let x0 = pw.saturating_sub(v);
                        let x1 = (w + pw).saturating_sub(v).min(w);
                        for y in y0..y1 {
                            let sy = y + u - ph;
                            let drow = &mut dst[y * w + x0..y * w + x1];
                            let srow = &src[sy * w + x0 + v - pw..sy * w + x1 + v - pw];
                            for (d, s) in drow.iter_mut().zip(srow) {
                                *d += kv * s;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(Array::from_shape_vec(IxDyn(&[b, o, h, w]), out).unwrap())
}

fn conv2d_kernel_grad(op: &Op, x: &Array, g: &Array, kh: usize, kw: usize) -> Result<Array> {
    let [b, c, h, w] = dims4(op, x)?;
    let [gb, o, gh, gw] = dims4(op, g)?;
    if gb != b || gh != h || gw != w {
        return Err(mismatch(op, x.shape(), g.shape()));
    }
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(TensorError::invalid(op.tag(), "kernel extents must be odd"));
    }
    let (ph, pw) = (kh / 2, kw / 2);
    let xs = x.as_slice().unwrap();
    let gs = g.as_slice().unwrap();
    let mut out = vec![0.0; o * c * kh * kw];
    for bi in 0..b {
        for oi in 0..o {
            let grad = &gs[(bi * o + oi) * h * w..(bi * o + oi + 1) * h * w];
            for ci in 0..c {
                let src = &xs[(bi * c + ci) * h * w..(bi * c + ci + 1) * h * w];
                for u in 0..kh {
                    for v in 0..kw {
                        let y0 = ph.saturating_sub(u);
                        let y1 = (h + ph).saturating_sub(u).min(h);
                        let x0 = pw.saturating_sub(v);
                        let x1 = (w + pw).saturating_sub(v).min(w);
                        let mut acc = 0.0;
                        for y in y0..y1 {
                            let sy = y + u - ph;
                            let grow = &grad[y * w + x0..y * w + x1];
                            let srow = &src[sy * w + x0 + v - pw..sy * w + x1 + v - pw];
                            acc += grow.iter().zip(srow).map(|(a, b)| a * b).sum::<f64>();
                        }
                        out[((oi * c + ci) * kh + u) * kw + v] += acc;
                    }
                }
            }
        }
    }
    Ok(Array::from_shape_vec(IxDyn(&[o, c, kh, kw]), out).unwrap())
}

/// Number of window positions along one axis, or `None` if windows do not tile exactly.
pub fn window_count(extent: usize, window: usize, stride: usize) -> Option<usize> {
    if window == 0 || stride == 0 || window > extent || (extent - window) % stride != 0 {
        None
    } else {
        Some((extent - window) / stride + 1)
    }
}

fn geometry(op: &Op, h: usize, w: usize, kh: usize, kw: usize, sh: usize, sw: usize) -> Result<(usize, usize)> {
    match (window_count(h, kh, sh), window_count(w, kw, sw)) {
        (Some(oh), Some(ow)) => Ok((oh, ow)),
        _ => Err(TensorError::invalid(
            op.tag(),
            format!("{h}x{w} input is not tiled by {kh}x{kw} windows with stride {sh}x{sw}"),
        )),
    }
}

fn unfold2d(op: &Op, x: &Array, kh: usize, kw: usize, sh: usize, sw: usize) -> Result<Array> {
    let [b, c, h, w] = dims4(op, x)?;
    let (oh, ow) = geometry(op, h, w, kh, kw, sh, sw)?;
    let xs = x.as_slice().unwrap();
    let area = kh * kw;
    let mut out = Vec::with_capacity(b * c * oh * ow * area);
    for plane in xs.chunks_exact(h * w) {
        for r in 0..oh {
            for q in 0..ow {
                for u in 0..kh {
                    let row = (r * sh + u) * w + q * sw;
                    out.extend_from_slice(&plane[row..row + kw]);
                }
            }
        }
    }
    Ok(Array::from_shape_vec(IxDyn(&[b, c, oh * ow, area]), out).unwrap())
}

#[allow(clippy::too_many_arguments)]
fn fold2d(op: &Op, cols: &Array, kh: usize, kw: usize, sh: usize, sw: usize, h: usize, w: usize) -> Result<Array> {
    let [b, c, windows, area] = dims4(op, cols)?;
    let (oh, ow) = geometry(op, h, w, kh, kw, sh, sw)?;
    if windows != oh * ow || area != kh * kw {
        return Err(mismatch(op, cols.shape(), &[b, c, oh * ow, kh * kw]));
    }
    let cs = cols.as_slice().unwrap();
    let mut out = vec![0.0; b * c * h * w];
    for (plane, src) in out.chunks_exact_mut(h * w).zip(cs.chunks_exact(windows * area)) {
        let mut it = src.iter();
        for r in 0..oh {
            for q in 0..ow {
                for u in 0..kh {
                    let row = (r * sh + u) * w + q * sw;
                    for d in &mut plane[row..row + kw] {
                        *d += it.next().unwrap();
                    }
                }
            }
        }
    }
    Ok(Array::from_shape_vec(IxDyn(&[b, c, h, w]), out).unwrap())
}
