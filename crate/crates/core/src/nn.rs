//! Non-pooling layers, losses and optimizers, plus the small convolutional
//! classifier used by the character experiments:
//!
//! ```text
//! conv 3×3 (same padding) → batch norm → ReLU → 2×2/stride-2 pooling → linear → softmax
//! ```
//!
//! Layers are plain functions over recorded tensors so that the inner SGD
//! step stays differentiable with respect to whatever the weights depend on.

use ndarray::{Array1, Axis, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pooling::{self, PoolConfig, PoolingError, WindowGeometry, WindowedPoolingParams};
use crate::tensor::{Array, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("label {label} at position {index} is outside 0..{classes}")]
    InvalidLabel {
        index: usize,
        label: usize,
        classes: usize,
    },
    #[error("batch norm needs at least two values per channel in training mode, got {0}")]
    DegenerateBatch(usize),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Pooling(#[from] PoolingError),
}

pub type Result<T, E = NnError> = std::result::Result<T, E>;

/// Same-padded 3×3 (any odd size) convolution plus a per-output-channel bias.
///
/// `input` is `C×H×W` or `B×C×H×W`, `kernels` is `O×C×kh×kw`, `bias` has length `O`.
pub fn conv2d(input: &Tensor, kernels: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (x, promoted) = match input.shape() {
        [c, h, w] => (input.reshape(&[1, *c, *h, *w])?, true),
        [_, _, _, _] => (input.clone(), false),
        s => return Err(NnError::Shape(format!("conv input must be rank 3 or 4, got {s:?}"))),
    };
    let ks = kernels.shape();
    if ks.len() != 4 || ks[1] != x.shape()[1] {
        return Err(NnError::Shape(format!(
            "kernel {ks:?} does not match {} input channels",
            x.shape()[1]
        )));
    }
    if bias.shape() != [ks[0]] {
        return Err(NnError::Shape(format!("bias {:?} for {} filters", bias.shape(), ks[0])));
    }
    let y = x.conv2d(kernels)?.add(&bias.reshape(&[ks[0], 1, 1])?)?;
    if promoted {
        let s = y.shape().to_vec();
        Ok(y.reshape(&s[1..])?)
    } else {
        Ok(y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BnMode {
    /// Normalize with batch statistics and update the running estimates.
    Train,
    /// Normalize with the running estimates.
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub mean: Array1<f64>,
    pub var: Array1<f64>,
    pub momentum: f64,
    pub eps: f64,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: Array1::zeros(channels),
            var: Array1::ones(channels),
            momentum: 0.1,
            eps: 1e-5,
        }
    }
}

/// Per-channel batch normalization of `B×C×H×W`.
///
/// Running statistics are updated (with the unbiased batch variance) only in
/// [`BnMode::Train`], and only when `stats` is given mutably.
pub fn batchnorm(
    x: &Tensor,
    scale: &Tensor,
    shift: &Tensor,
    mode: BnMode,
    stats: &mut RunningStats,
) -> Result<Tensor> {
    let s = x.shape().to_vec();
    if s.len() != 4 {
        return Err(NnError::Shape(format!("batch norm expects B×C×H×W, got {s:?}")));
    }
    let c = s[1];
    if scale.shape() != [c] || shift.shape() != [c] || stats.mean.len() != c {
        return Err(NnError::Shape(format!("batch norm parameters do not match {c} channels")));
    }
    let scale = scale.reshape(&[1, c, 1, 1])?;
    let shift = shift.reshape(&[1, c, 1, 1])?;
    let normalized = match mode {
        BnMode::Train => {
            let n = s[0] * s[2] * s[3];
            if n < 2 {
                return Err(NnError::DegenerateBatch(n));
            }
            let mean = x.mean_axis(0)?.mean_axis(2)?.mean_axis(3)?;
            let centered = x.sub(&mean)?;
            let var = centered.square()?.mean_axis(0)?.mean_axis(2)?.mean_axis(3)?;
            let m = stats.momentum;
            let unbiased = n as f64 / (n as f64 - 1.0);
            for ch in 0..c {
                let bm = mean.data()[ch];
                let bv = var.data()[ch] * unbiased;
                stats.mean[ch] = (1.0 - m) * stats.mean[ch] + m * bm;
                stats.var[ch] = (1.0 - m) * stats.var[ch] + m * bv;
            }
            centered.div(&var.offset(stats.eps)?.powf(0.5)?)?
        }
        BnMode::Eval => {
            let mean = Tensor::constant(stats.mean.clone().into_shape_with_order((1, c, 1, 1)).unwrap().into_dyn());
            let denom = stats.var.mapv(|v| (v + stats.eps).sqrt());
            let denom = Tensor::constant(denom.into_shape_with_order((1, c, 1, 1)).unwrap().into_dyn());
            x.sub(&mean)?.div(&denom)?
        }
    };
    Ok(normalized.mul(&scale)?.add(&shift)?)
}

/// `features (B×F) · weights (F×K) + bias (K)`.
pub fn linear(features: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<Tensor> {
    match (features.shape(), weights.shape(), bias.shape()) {
        ([_, f], [f2, k], [k2]) if f == f2 && k == k2 => Ok(features.matmul(weights)?.add(bias)?),
        (a, b, c) => Err(NnError::Shape(format!("linear {a:?} · {b:?} + {c:?}"))),
    }
}

/// Row-wise log-softmax of `B×K` logits, shifted by the detached row maximum.
pub fn log_softmax(logits: &Tensor) -> Result<Tensor> {
    Ok(logits.sub(&logits.logsumexp_axis(1)?)?)
}

/// Mean cross-entropy of softmax(logits) against `labels`, with the class probabilities.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(Tensor, Array)> {
    let (b, k) = match logits.shape() {
        [b, k] => (*b, *k),
        s => return Err(NnError::Shape(format!("logits must be B×K, got {s:?}"))),
    };
    if labels.len() != b {
        return Err(NnError::Shape(format!("{} labels for {b} rows", labels.len())));
    }
    let mut onehot = Array::zeros(IxDyn(&[b, k]));
    for (index, &label) in labels.iter().enumerate() {
        if label >= k {
            return Err(NnError::InvalidLabel { index, label, classes: k });
        }
        onehot[[index, label]] = 1.0;
    }
    let ls = log_softmax(logits)?;
    let probs = ls.value().mapv(f64::exp);
    let loss = ls.mul(&Tensor::constant(onehot))?.sum()?.scale(-1.0 / b as f64)?;
    Ok((loss, probs))
}

pub fn linear_softmax_xent(
    features: &Tensor,
    weights: &Tensor,
    bias: &Tensor,
    labels: &[usize],
) -> Result<(Tensor, Array)> {
    softmax_cross_entropy(&linear(features, weights, bias)?, labels)
}

pub fn mse_loss(prediction: &Tensor, target: &Tensor) -> Result<Tensor> {
    if prediction.shape() != target.shape() {
        return Err(NnError::Shape(format!(
            "prediction {:?} vs target {:?}",
            prediction.shape(),
            target.shape()
        )));
    }
    Ok(prediction.sub(target)?.square()?.mean()?)
}

/// `θ' = θ − α·g` on recorded tensors; the result stays differentiable.
pub fn sgd_step(params: &[Tensor], grads: &[Tensor], lr: f64) -> Result<Vec<Tensor>> {
    check_pairs(params.iter().map(Tensor::shape), grads.iter().map(Tensor::shape), params.len(), grads.len())?;
    params
        .iter()
        .zip(grads)
        .map(|(p, g)| Ok(p.sub(&g.scale(lr)?)?))
        .collect()
}

/// In-place `θ ← θ − α·g` on plain arrays.
pub fn sgd_update(params: &mut [Array], grads: &[Array], lr: f64) -> Result<()> {
    check_pairs(params.iter().map(|a| a.shape()), grads.iter().map(|a| a.shape()), params.len(), grads.len())?;
    for (p, g) in params.iter_mut().zip(grads) {
        p.scaled_add(-lr, g);
    }
    Ok(())
}

fn check_pairs<'a>(
    a: impl Iterator<Item = &'a [usize]>,
    b: impl Iterator<Item = &'a [usize]>,
    na: usize,
    nb: usize,
) -> Result<()> {
    if na != nb {
        return Err(NnError::Shape(format!("{na} parameters but {nb} gradients")));
    }
    for (i, (x, y)) in a.zip(b).enumerate() {
        if x != y {
            return Err(NnError::Shape(format!("parameter {i}: {x:?} vs gradient {y:?}")));
        }
    }
    Ok(())
}

/// Bias-corrected Adam.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<Array>,
    pub v: Vec<Array>,
    pub t: u64,
}

impl Adam {
    pub fn new(lr: f64, params: &[Array]) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: params.iter().map(|p| Array::zeros(p.raw_dim())).collect(),
            v: params.iter().map(|p| Array::zeros(p.raw_dim())).collect(),
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [Array], grads: &[Array]) -> Result<()> {
        check_pairs(params.iter().map(|a| a.shape()), grads.iter().map(|a| a.shape()), params.len(), grads.len())?;
        check_pairs(params.iter().map(|a| a.shape()), self.m.iter().map(|a| a.shape()), params.len(), self.m.len())?;
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            ndarray::Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
            });
        }
        Ok(())
    }
}

/// Outer-loop optimizer: plain descent with rate η, or Adam.
#[derive(Debug, Clone, PartialEq)]
pub enum Optimizer {
    Sgd { lr: f64 },
    Adam(Adam),
}

impl Optimizer {
    pub fn step(&mut self, params: &mut [Array], grads: &[Array]) -> Result<()> {
        match self {
            Optimizer::Sgd { lr } => sgd_update(params, grads, *lr),
            Optimizer::Adam(adam) => adam.step(params, grads),
        }
    }
}

/// `Uniform(−s, s)` with `s = fan_in^(−1/2)`.
pub fn uniform_init(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Array {
    let s = 1.0 / (fan_in as f64).sqrt();
    Array::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-s..s))
}

/// Pooling stage of the classifier.
#[derive(Debug, Clone, PartialEq)]
pub enum PoolLayer {
    Meta(WindowedPoolingParams),
    Max,
    Avg,
}

impl PoolLayer {
    pub fn kind(&self) -> &'static str {
        match self {
            PoolLayer::Meta(_) => "meta",
            PoolLayer::Max => "max",
            PoolLayer::Avg => "avg",
        }
    }
}

/// Pooling as seen by one forward pass: either the parameterized layer with
/// (possibly recorded) logits, or a fixed baseline.
#[derive(Clone)]
pub enum PoolForward<'a> {
    Param {
        geometry: &'a WindowGeometry,
        shape_logits: Tensor,
        exponent_logits: Tensor,
        config: PoolConfig,
    },
    Max,
    Avg,
}

impl<'a> PoolForward<'a> {
    /// Frozen view of a pooling layer.
    pub fn frozen(layer: &'a PoolLayer) -> Self {
        match layer {
            PoolLayer::Meta(p) => PoolForward::Param {
                geometry: &p.geometry,
                shape_logits: Tensor::constant(p.shape_logits.clone()),
                exponent_logits: Tensor::constant(p.exponent_logits.clone()),
                config: p.config,
            },
            PoolLayer::Max => PoolForward::Max,
            PoolLayer::Avg => PoolForward::Avg,
        }
    }

    fn apply(&self, x: &Tensor) -> Result<Tensor> {
        Ok(match self {
            PoolForward::Param {
                geometry,
                shape_logits,
                exponent_logits,
                config,
            } => pooling::pool_windows(x, geometry, shape_logits, exponent_logits, config)?,
            PoolForward::Max => pooling::max_pool(x, (2, 2), (2, 2))?,
            PoolForward::Avg => pooling::avg_pool(x, (2, 2), (2, 2))?,
        })
    }
}

/// Geometry of the classifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvNetSpec {
    pub in_channels: usize,
    pub filters: usize,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
}

/// Names of the θ tensors, in storage order.
pub const THETA_NAMES: [&str; 6] = ["conv.weight", "conv.bias", "bn.scale", "bn.shift", "fc.weight", "fc.bias"];

impl ConvNetSpec {
    pub fn pooled(&self) -> (usize, usize) {
        (self.height / 2, self.width / 2)
    }

    pub fn features(&self) -> usize {
        let (h, w) = self.pooled();
        self.filters * h * w
    }

    pub fn theta_shapes(&self) -> Vec<Vec<usize>> {
        let f = self.filters;
        vec![
            vec![f, self.in_channels, 3, 3],
            vec![f],
            vec![f],
            vec![f],
            vec![self.features(), self.classes],
            vec![self.classes],
        ]
    }

    pub fn pool_geometry(&self) -> std::result::Result<WindowGeometry, PoolingError> {
        WindowGeometry::for_input(self.height, self.width, (2, 2), (2, 2))
    }

    /// Seeded θ: uniform fan-in weights, zero biases, unit scale, zero shift.
    pub fn init_theta(&self, seed: u64) -> Vec<Array> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shapes = self.theta_shapes();
        vec![
            uniform_init(&shapes[0], self.in_channels * 9, &mut rng),
            Array::zeros(IxDyn(&shapes[1])),
            Array::ones(IxDyn(&shapes[2])),
            Array::zeros(IxDyn(&shapes[3])),
            uniform_init(&shapes[4], self.features(), &mut rng),
            Array::zeros(IxDyn(&shapes[5])),
        ]
    }

    pub fn check_theta(&self, theta: &[Array]) -> Result<()> {
        let shapes = self.theta_shapes();
        if theta.len() != shapes.len() {
            return Err(NnError::Shape(format!("expected {} θ tensors, got {}", shapes.len(), theta.len())));
        }
        for ((t, s), name) in theta.iter().zip(&shapes).zip(THETA_NAMES) {
            if t.shape() != &s[..] {
                return Err(NnError::Shape(format!("{name}: expected {s:?}, got {:?}", t.shape())));
            }
        }
        Ok(())
    }

    /// Class logits for `B×C×H×W` images.
    pub fn logits(
        &self,
        theta: &[Tensor],
        pool: &PoolForward<'_>,
        images: &Tensor,
        bn: BnMode,
        stats: &mut RunningStats,
    ) -> Result<Tensor> {
        if theta.len() != THETA_NAMES.len() {
            return Err(NnError::Shape(format!("expected {} θ tensors, got {}", THETA_NAMES.len(), theta.len())));
        }
        let b = images.shape()[0];
        let h = conv2d(images, &theta[0], &theta[1])?;
        let h = batchnorm(&h, &theta[2], &theta[3], bn, stats)?.relu()?;
        let h = pool.apply(&h)?.reshape(&[b, self.features()])?;
        linear(&h, &theta[4], &theta[5])
    }

    pub fn loss(
        &self,
        theta: &[Tensor],
        pool: &PoolForward<'_>,
        images: &Tensor,
        labels: &[usize],
        bn: BnMode,
        stats: &mut RunningStats,
    ) -> Result<(Tensor, Array)> {
        softmax_cross_entropy(&self.logits(theta, pool, images, bn, stats)?, labels)
    }
}

/// Index of the largest entry per row; ties go to the lowest index.
pub fn argmax_rows(probs: &Array) -> Vec<usize> {
    probs
        .axis_iter(Axis(0))
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
                .0
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{finite_difference_check, grad, Tape};
    use ndarray::{arr1, arr2};

    fn rand_array(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Array {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array::from_shape_fn(IxDyn(shape), |_| rng.gen_range(lo..hi))
    }

    #[test]
    fn conv_examples() {
        let x = Tensor::constant(rand_array(&[1, 4, 4], -1.0, 1.0, 1));
        let zeros = Tensor::zeros(&[2, 1, 3, 3]);
        let bias = Tensor::constant(arr1(&[0.5, -1.0]).into_dyn());
        let y = conv2d(&x, &zeros, &bias).unwrap();
        assert_eq!(y.shape(), &[2, 4, 4]);
        assert!(y.data()[..16].iter().all(|&v| v == 0.5));
        assert!(y.data()[16..].iter().all(|&v| v == -1.0));

        let mut k = Array::zeros(IxDyn(&[1, 1, 3, 3]));
        k[[0, 0, 1, 1]] = 1.0;
        let y = conv2d(&x, &Tensor::constant(k), &Tensor::zeros(&[1])).unwrap();
        assert_eq!(y.value(), x.value());

        let wrong = Tensor::zeros(&[1, 2, 3, 3]);
        assert!(matches!(conv2d(&x, &wrong, &Tensor::zeros(&[1])), Err(NnError::Shape(_))));
    }

    #[test]
    fn conv_matches_nested_loops() {
        let x = rand_array(&[1, 4, 4], -1.0, 1.0, 2);
        let k = rand_array(&[1, 1, 3, 3], -1.0, 1.0, 3);
        let y = conv2d(&Tensor::constant(x.clone()), &Tensor::constant(k.clone()), &Tensor::zeros(&[1])).unwrap();
        for r in 0..4 {
            for c in 0..4 {
                let mut acc = 0.0;
                for i in 0..3 {
                    for j in 0..3 {
                        let (rr, cc) = (r as isize + i as isize - 1, c as isize + j as isize - 1);
                        if (0..4).contains(&rr) && (0..4).contains(&cc) {
                            acc += x[[0, rr as usize, cc as usize]] * k[[0, 0, i, j]];
                        }
                    }
                }
                assert_eq!(y.value()[[0, r, c]], acc);
            }
        }
    }

    #[test]
    fn batchnorm_examples() {
        let mut stats = RunningStats::new(1);
        let ones = Tensor::ones(&[1]);
        let zero = Tensor::zeros(&[1]);
        let constant = Tensor::constant(Array::from_elem(IxDyn(&[2, 1, 2, 2]), 3.0));
        let y = batchnorm(&constant, &ones, &zero, BnMode::Train, &mut stats).unwrap();
        assert!(y.data().iter().all(|v| v.abs() < 1e-12));

        let x = Tensor::from_vec(&[2, 1, 1, 1], vec![1.0, 3.0]).unwrap();
        let y = batchnorm(&x, &ones, &zero, BnMode::Train, &mut RunningStats::new(1)).unwrap();
        let expect = 1.0 / (1.0f64 + 1e-5).sqrt();
        assert!((y.data()[0] + expect).abs() < 1e-12 && (y.data()[1] - expect).abs() < 1e-12);

        let mut stats = RunningStats { mean: arr1(&[2.0]), var: arr1(&[4.0]), momentum: 0.1, eps: 1e-5 };
        let before = stats.clone();
        let scale = Tensor::constant(arr1(&[3.0]).into_dyn());
        let shift = Tensor::constant(arr1(&[0.5]).into_dyn());
        let y = batchnorm(&x, &scale, &shift, BnMode::Eval, &mut stats).unwrap();
        let hand = |v: f64| (v - 2.0) / (4.0f64 + 1e-5).sqrt() * 3.0 + 0.5;
        assert!((y.data()[0] - hand(1.0)).abs() < 1e-12 && (y.data()[1] - hand(3.0)).abs() < 1e-12);
        assert_eq!(stats, before);

        let single = Tensor::from_vec(&[1, 1, 1, 1], vec![1.0]).unwrap();
        assert!(matches!(
            batchnorm(&single, &ones, &zero, BnMode::Train, &mut RunningStats::new(1)),
            Err(NnError::DegenerateBatch(1))
        ));
    }

    #[test]
    fn running_stats_update_in_training_mode() {
        let x = Tensor::from_vec(&[2, 1, 1, 1], vec![1.0, 3.0]).unwrap();
        let mut stats = RunningStats::new(1);
        batchnorm(&x, &Tensor::ones(&[1]), &Tensor::zeros(&[1]), BnMode::Train, &mut stats).unwrap();
        assert!((stats.mean[0] - 0.2).abs() < 1e-12);
        assert!((stats.var[0] - (0.9 + 0.1 * 2.0)).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_examples() {
        let uniform = Tensor::zeros(&[3, 5]);
        let (loss, probs) = softmax_cross_entropy(&uniform, &[0, 2, 4]).unwrap();
        assert!((loss.item() - 5f64.ln()).abs() < 1e-12);
        for row in probs.axis_iter(Axis(0)) {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
        let mut sat = Array::zeros(IxDyn(&[1, 5]));
        sat[[0, 3]] = 50.0;
        let (loss, _) = softmax_cross_entropy(&Tensor::constant(sat), &[3]).unwrap();
        assert!(loss.item() < 1e-20);
        assert!(matches!(
            softmax_cross_entropy(&uniform, &[0, 5, 1]),
            Err(NnError::InvalidLabel { index: 1, label: 5, classes: 5 })
        ));
    }

    #[test]
    fn cross_entropy_gradients() {
        let labels = [1, 0, 3];
        let feats = rand_array(&[3, 4], -1.0, 1.0, 5);
        let w = rand_array(&[4, 5], -1.0, 1.0, 6);
        let b = rand_array(&[5], -1.0, 1.0, 7);
        let (fc, wc, bc) = (Tensor::constant(feats.clone()), Tensor::constant(w.clone()), Tensor::constant(b.clone()));
        let f = |x: &Tensor, w: &Tensor, b: &Tensor| Ok(linear_softmax_xent(x, w, b, &labels).unwrap().0);
        assert!(finite_difference_check(|v| f(v, &wc, &bc), &feats, 1e-6).unwrap() <= 1e-4);
        assert!(finite_difference_check(|v| f(&fc, v, &bc), &w, 1e-6).unwrap() <= 1e-4);
        assert!(finite_difference_check(|v| f(&fc, &wc, v), &b, 1e-6).unwrap() <= 1e-4);
    }

    #[test]
    fn mse_examples() {
        let a = Tensor::constant(arr1(&[0.0, 0.0]).into_dyn());
        let b = Tensor::constant(arr1(&[1.0, 1.0]).into_dyn());
        assert_eq!(mse_loss(&a, &a).unwrap().item(), 0.0);
        assert_eq!(mse_loss(&a, &b).unwrap().item(), 1.0);
        let tape = Tape::new();
        let p = tape.var(arr1(&[1.0, 4.0]).into_dyn());
        let t = Tensor::constant(arr1(&[0.0, 1.0]).into_dyn());
        let g = grad(&mse_loss(&p, &t).unwrap(), &[&p]).unwrap().remove(0);
        assert_eq!(g.to_vec(), vec![1.0, 3.0]);
        assert!(mse_loss(&a, &Tensor::zeros(&[3])).is_err());
    }

    #[test]
    fn sgd_examples() {
        let theta = Tensor::scalar(1.0);
        let out = sgd_step(&[theta.clone()], &[Tensor::scalar(2.0)], 0.1).unwrap();
        assert!((out[0].item() - 0.8).abs() < 1e-15);
        let out = sgd_step(&[theta.clone()], &[Tensor::scalar(0.0)], 0.1).unwrap();
        assert_eq!(out[0].item(), 1.0);

        // L = (θ − W)², α = 0.25: θ' = θ − 2α(θ − W), so dθ'/dW = 2α = 0.5.
        let tape = Tape::new();
        let w = tape.scalar(1.0);
        let th = tape.scalar(0.0);
        let loss = th.sub(&w).unwrap().square().unwrap();
        let g = grad(&loss, &[&th]).unwrap();
        let next = sgd_step(&[th.clone()], &g, 0.25).unwrap().remove(0);
        assert_eq!(next.item(), 0.5);
        assert_eq!(grad(&next, &[&w]).unwrap()[0].item(), 0.5);

        let mut arrs = vec![arr1(&[1.0, 2.0]).into_dyn()];
        sgd_update(&mut arrs, &[arr1(&[1.0, 1.0]).into_dyn()], 0.5).unwrap();
        assert_eq!(arrs[0], arr1(&[0.5, 1.5]).into_dyn());
        assert!(sgd_update(&mut arrs, &[arr1(&[1.0]).into_dyn()], 0.5).is_err());
    }

    #[test]
    fn adam_examples() {
        let mut params = vec![arr1(&[0.0]).into_dyn()];
        let mut adam = Adam::new(0.001, &params);
        adam.step(&mut params, &[arr1(&[5.0]).into_dyn()]).unwrap();
        assert!((params[0][[0]] + 0.001).abs() < 1e-10);

        let mut still = vec![arr2(&[[1.0, -2.0]]).into_dyn()];
        let mut adam = Adam::new(0.001, &still);
        for _ in 0..10 {
            adam.step(&mut still, &[Array::zeros(IxDyn(&[1, 2]))]).unwrap();
        }
        assert_eq!(still[0], arr2(&[[1.0, -2.0]]).into_dyn());
        assert_eq!(adam.t, 10);

        let run = || {
            let mut p = vec![arr1(&[0.3, 0.1]).into_dyn()];
            let mut a = Adam::new(0.01, &p);
            for i in 0..5 {
                a.step(&mut p, &[arr1(&[i as f64, -1.0]).into_dyn()]).unwrap();
            }
            (p, a)
        };
        assert_eq!(run(), run());
    }

    fn small_net() -> ConvNetSpec {
        ConvNetSpec { in_channels: 1, filters: 2, height: 4, width: 4, classes: 3 }
    }

    #[test]
    fn network_gradients_match_finite_differences() {
        let spec = small_net();
        let theta = spec.init_theta(3);
        let images = Tensor::constant(rand_array(&[3, 1, 4, 4], 0.0, 1.0, 4));
        let labels = [0, 2, 1];
        let geom = spec.pool_geometry().unwrap();
        let pool = pooling::init_windowed_params(geom, None, 0.2, 5).unwrap();
        let layer = PoolLayer::Meta(pool);
        for (k, name) in THETA_NAMES.iter().enumerate() {
            let f = |v: &Tensor| {
                let mut t: Vec<Tensor> = theta.iter().map(|a| Tensor::constant(a.clone())).collect();
                t[k] = v.clone();
                let mut stats = RunningStats::new(spec.filters);
                Ok(spec
                    .loss(&t, &PoolForward::frozen(&layer), &images, &labels, BnMode::Train, &mut stats)
                    .unwrap()
                    .0)
            };
            let err = finite_difference_check(f, &theta[k], 1e-6).unwrap();
            assert!(err <= 1e-4, "{name}: {err}");
        }
    }

    #[test]
    fn batchnorm_gradient_matches_finite_differences() {
        let x = rand_array(&[2, 2, 2, 2], -1.0, 1.0, 8);
        let scale = Tensor::constant(arr1(&[1.5, 0.5]).into_dyn());
        let shift = Tensor::constant(arr1(&[0.1, -0.2]).into_dyn());
        let weights = Tensor::constant(rand_array(&[2, 2, 2, 2], -1.0, 1.0, 9));
        let f = |v: &Tensor| {
            let y = batchnorm(v, &scale, &shift, BnMode::Train, &mut RunningStats::new(2)).unwrap();
            y.mul(&weights)?.sum()
        };
        assert!(finite_difference_check(f, &x, 1e-6).unwrap() <= 1e-4);
    }

    #[test]
    fn full_size_forward_shapes() {
        let spec = ConvNetSpec { in_channels: 1, filters: 4, height: 28, width: 28, classes: 5 };
        let theta: Vec<Tensor> = spec.init_theta(0).into_iter().map(Tensor::constant).collect();
        let images = Tensor::constant(rand_array(&[2, 1, 28, 28], 0.0, 1.0, 1));
        assert_eq!(spec.pool_geometry().unwrap().grid, (14, 14));
        for layer in [PoolLayer::Max, PoolLayer::Avg] {
            let (_, probs) = spec
                .loss(&theta, &PoolForward::frozen(&layer), &images, &[0, 4], BnMode::Train, &mut RunningStats::new(4))
                .unwrap();
            assert_eq!(probs.shape(), &[2, 5]);
            for row in probs.axis_iter(Axis(0)) {
                assert!((row.sum() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn init_is_seeded_and_shaped() {
        let spec = small_net();
        let a = spec.init_theta(1);
        assert_eq!(a, spec.init_theta(1));
        spec.check_theta(&a).unwrap();
        let bound = 1.0 / 3.0;
        assert!(a[0].iter().all(|v| v.abs() < bound));
        assert!(a[1].iter().all(|&v| v == 0.0) && a[5].iter().all(|&v| v == 0.0));
        assert!(spec.check_theta(&a[..5]).is_err());
    }

    #[test]
    fn argmax_prefers_lowest_index() {
        let p = arr2(&[[0.2, 0.5, 0.5], [0.9, 0.05, 0.05]]).into_dyn();
        assert_eq!(argmax_rows(&p), vec![1, 0]);
    }
}
