//! Self-checks run by `metapool verify`: gradients against central
//! differences, Lp limits, meta-gradient fidelity through the inner step,
//! and the synthetic targets against an independent reimplementation.
//!
//! [`Fault::FlipSign`] negates every analytic gradient before comparison; it
//! exists so the failure path of the command can be exercised.

use ndarray::{arr1, arr2, Array2, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{gen_synthetic_tasks, SyntheticKind, SyntheticTaskSpec, GROUND_TRUTH_WINDOW_2D};
use crate::meta::{pipeline_loss, task_gradient, InnerTarget, MetaConfig, Order, Task};
use crate::nn::{self, BnMode, ConvNetSpec, PoolForward, RunningStats};
use crate::pooling::{self, pool_dense, pool_windows, Mode, Normalization, PoolConfig, WindowGeometry};
use crate::tensor::{grad_detached, relative_error, Array, Tape, Tensor};

pub const GRADIENT_TOLERANCE: f64 = 1e-4;
pub const META_GRADIENT_TOLERANCE: f64 = 1e-3;
pub const MEAN_TOLERANCE: f64 = 1e-12;
pub const MAX_LIMIT_TOLERANCE: f64 = 1e-3;
pub const LIMIT_EXPONENT: f64 = 1e4;
pub const LIMIT_CASES: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    /// Negate analytic gradients.
    FlipSign,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteReport {
    pub name: &'static str,
    pub passed: bool,
    /// Worst observed error per check.
    pub checks: Vec<(String, f64, f64)>,
    pub error: Option<String>,
}

impl SuiteReport {
    fn from_checks(name: &'static str, checks: crate::tensor::Result<Vec<(String, f64, f64)>>) -> Self {
        match checks {
            Ok(checks) => SuiteReport { name, passed: checks.iter().all(|(_, e, tol)| *e <= *tol), checks, error: None },
            Err(e) => SuiteReport { name, passed: false, checks: vec![], error: Some(e.to_string()) },
        }
    }

    /// One-line verdict.
    pub fn verdict(&self) -> String {
        let status = if self.passed { "PASS" } else { "FAIL" };
        if let Some(e) = &self.error {
            return format!("{status} {}: error: {e}", self.name);
        }
        let worst = self
            .checks
            .iter()
            .max_by(|a, b| (a.1 / a.2).total_cmp(&(b.1 / b.2)))
            .map(|(n, e, t)| format!("worst {n} {e:.3e} (tol {t:.0e})"))
            .unwrap_or_default();
        let failed: Vec<&str> = self.checks.iter().filter(|(_, e, t)| e > t).map(|(n, _, _)| n.as_str()).collect();
        if failed.is_empty() {
            format!("{status} {}: {} checks, {worst}", self.name, self.checks.len())
        } else {
            format!("{status} {}: {} of {} checks failed ({}), {worst}", self.name, failed.len(), self.checks.len(), failed.join(", "))
        }
    }
}

fn sign(fault: Option<Fault>) -> f64 {
    if fault == Some(Fault::FlipSign) { -1.0 } else { 1.0 }
}

/// Worst relative error of the (possibly sign-flipped) recorded gradient.
fn fd_worst<F>(f: F, point: &Array, s: f64) -> crate::tensor::Result<f64>
where
    F: Fn(&Tensor) -> crate::tensor::Result<Tensor>,
{
    let h = 1e-5;
    let tape = Tape::new();
    let x = tape.var(point.clone());
    let analytic = grad_detached(&f(&x)?, &[&x])?.remove(0).value().mapv(|g| g * s);
    let mut probe = point.as_standard_layout().into_owned();
    let mut worst = 0.0f64;
    for i in 0..probe.len() {
        let orig = probe.as_slice().unwrap()[i];
        probe.as_slice_mut().unwrap()[i] = orig + h;
        let up = f(&Tensor::constant(probe.clone()))?.item();
        probe.as_slice_mut().unwrap()[i] = orig - h;
        let down = f(&Tensor::constant(probe.clone()))?.item();
        probe.as_slice_mut().unwrap()[i] = orig;
        worst = worst.max(relative_error(analytic.as_slice().unwrap()[i], (up - down) / (2.0 * h)));
    }
    Ok(worst)
}

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Array {
    Array::from_shape_fn(IxDyn(shape), |_| rng.gen_range(lo..hi))
}

/// Scalar probe `Σ r ⊙ y` with fixed random `r`, so every output entry matters.
fn probe(y: &Tensor, r: &Array) -> crate::tensor::Result<Tensor> {
    y.mul(&Tensor::constant(r.clone()))?.sum()
}

pub fn gradient_suite(fault: Option<Fault>) -> SuiteReport {
    SuiteReport::from_checks("gradient-check", gradient_checks(sign(fault)))
}

fn gradient_checks(s: f64) -> crate::tensor::Result<Vec<(String, f64, f64)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut out = Vec::new();
    let mut push = |name: &str, e: f64| out.push((name.to_string(), e, GRADIENT_TOLERANCE));
    let perr = |e: pooling::PoolingError| crate::tensor::TensorError::invalid("pooling", e.to_string());
    let nerr = |e: nn::NnError| crate::tensor::TensorError::invalid("nn", e.to_string());

    // Dense pooling, both normalizations, w.r.t. input, W~ and p~.
    for norm in [Normalization::InputSize, Normalization::SelectedWeight] {
        let cfg = PoolConfig::new(0.2, Mode::MetaTraining).with_normalization(norm);
        let x = uniform(&[3, 4], 0.1, 1.0, &mut rng);
        let w = uniform(&[2, 4], 0.3, 0.7, &mut rng);
        let p = uniform(&[2], -0.5, 1.5, &mut rng);
        let r = uniform(&[3, 2], -1.0, 1.0, &mut rng);
        let tag = format!("{norm:?}");
        let (xc, wc, pc) = (Tensor::constant(x.clone()), Tensor::constant(w.clone()), Tensor::constant(p.clone()));
        push(&format!("pool_dense/{tag}/x"), fd_worst(|t| probe(&pool_dense(t, &wc, &pc, &cfg).map_err(perr)?, &r), &x, s)?);
        push(&format!("pool_dense/{tag}/W"), fd_worst(|t| probe(&pool_dense(&xc, t, &pc, &cfg).map_err(perr)?, &r), &w, s)?);
        push(&format!("pool_dense/{tag}/p"), fd_worst(|t| probe(&pool_dense(&xc, &wc, t, &cfg).map_err(perr)?, &r), &p, s)?);
    }

    // Windowed pooling, shared and per-channel.
    let g = WindowGeometry::for_input(4, 4, (2, 2), (2, 2)).map_err(perr)?;
    let cfg = PoolConfig::new(0.2, Mode::MetaTraining);
    let img = uniform(&[2, 2, 4, 4], 0.1, 1.0, &mut rng);
    let r = uniform(&[2, 2, 2, 2], -1.0, 1.0, &mut rng);
    for (tag, wshape, pshape) in [("shared", vec![4, 4], vec![4]), ("per-channel", vec![2, 4, 4], vec![2, 4])] {
        let w = uniform(&wshape, 0.3, 0.7, &mut rng);
        let p = uniform(&pshape, -0.5, 1.0, &mut rng);
        let (ic, wc, pc) = (Tensor::constant(img.clone()), Tensor::constant(w.clone()), Tensor::constant(p.clone()));
        push(&format!("pool_windows/{tag}/x"), fd_worst(|t| probe(&pool_windows(t, &g, &wc, &pc, &cfg).map_err(perr)?, &r), &img, s)?);
        push(&format!("pool_windows/{tag}/W"), fd_worst(|t| probe(&pool_windows(&ic, &g, t, &pc, &cfg).map_err(perr)?, &r), &w, s)?);
        push(&format!("pool_windows/{tag}/p"), fd_worst(|t| probe(&pool_windows(&ic, &g, &wc, t, &cfg).map_err(perr)?, &r), &p, s)?);
    }

    // Baseline pools (distinct values, so the max is differentiable).
    push("max_pool", fd_worst(|t| probe(&pooling::max_pool(t, (2, 2), (2, 2)).map_err(perr)?, &r), &img, s)?);
    push("avg_pool", fd_worst(|t| probe(&pooling::avg_pool(t, (2, 2), (2, 2)).map_err(perr)?, &r), &img, s)?);

    // Convolution.
    let x = uniform(&[2, 2, 5, 5], -1.0, 1.0, &mut rng);
    let k = uniform(&[3, 2, 3, 3], -0.5, 0.5, &mut rng);
    let b = uniform(&[3], -0.5, 0.5, &mut rng);
    let r = uniform(&[2, 3, 5, 5], -1.0, 1.0, &mut rng);
    let (xc, kc, bc) = (Tensor::constant(x.clone()), Tensor::constant(k.clone()), Tensor::constant(b.clone()));
    push("conv2d/input", fd_worst(|t| probe(&nn::conv2d(t, &kc, &bc).map_err(nerr)?, &r), &x, s)?);
    push("conv2d/kernel", fd_worst(|t| probe(&nn::conv2d(&xc, t, &bc).map_err(nerr)?, &r), &k, s)?);
    push("conv2d/bias", fd_worst(|t| probe(&nn::conv2d(&xc, &kc, t).map_err(nerr)?, &r), &b, s)?);

    // Batch normalization (training statistics).
    let x = uniform(&[3, 2, 2, 2], -1.0, 1.0, &mut rng);
    let gamma = uniform(&[2], 0.5, 1.5, &mut rng);
    let beta = uniform(&[2], -0.5, 0.5, &mut rng);
    let r = uniform(&[3, 2, 2, 2], -1.0, 1.0, &mut rng);
    let bn = |x: &Tensor, gm: &Tensor, bt: &Tensor| {
        probe(&nn::batchnorm(x, gm, bt, BnMode::Train, &mut RunningStats::new(2)).map_err(nerr)?, &r)
    };
    let (xc, gc, bc) = (Tensor::constant(x.clone()), Tensor::constant(gamma.clone()), Tensor::constant(beta.clone()));
    push("batchnorm/input", fd_worst(|t| bn(t, &gc, &bc), &x, s)?);
    push("batchnorm/scale", fd_worst(|t| bn(&xc, t, &bc), &gamma, s)?);
    push("batchnorm/shift", fd_worst(|t| bn(&xc, &gc, t), &beta, s)?);

    // Linear + softmax cross-entropy.
    let feats = uniform(&[4, 3], -1.0, 1.0, &mut rng);
    let wts = uniform(&[3, 5], -1.0, 1.0, &mut rng);
    let bias = uniform(&[5], -0.5, 0.5, &mut rng);
    let labels = [0, 3, 4, 1];
    let (fc, wc, bc) = (Tensor::constant(feats.clone()), Tensor::constant(wts.clone()), Tensor::constant(bias.clone()));
    let xent = |f: &Tensor, w: &Tensor, b: &Tensor| Ok(nn::linear_softmax_xent(f, w, b, &labels).map_err(nerr)?.0);
    push("linear_xent/features", fd_worst(|t| xent(t, &wc, &bc), &feats, s)?);
    push("linear_xent/weight", fd_worst(|t| xent(&fc, t, &bc), &wts, s)?);
    push("linear_xent/bias", fd_worst(|t| xent(&fc, &wc, t), &bias, s)?);

    // Whole classifier through the parameterized pool, w.r.t. the conv kernel and W~.
    // p ≥ 1 here: below 1 the pool's derivative is unbounded at the ReLU floor.
    let net = ConvNetSpec { in_channels: 1, filters: 2, height: 4, width: 4, classes: 3 };
    let theta = net.init_theta(5);
    // Keep every pre-ReLU activation clear of the kink so differences do not straddle it.
    let images = loop {
        let images = Tensor::constant(uniform(&[3, 1, 4, 4], 0.0, 1.0, &mut rng));
        let th: Vec<Tensor> = theta.iter().map(|a| Tensor::constant(a.clone())).collect();
        let h = nn::conv2d(&images, &th[0], &th[1]).map_err(nerr)?;
        let h = nn::batchnorm(&h, &th[2], &th[3], BnMode::Train, &mut RunningStats::new(2)).map_err(nerr)?;
        if h.value().iter().all(|v| v.abs() > 1e-3) {
            break images;
        }
    };
    let geometry = net.pool_geometry().map_err(perr)?;
    let wl = uniform(&[4, 4], 0.3, 0.7, &mut rng);
    let pl = uniform(&[4], 0.0, 0.8, &mut rng);
    let cls = |th: Vec<Tensor>, w: Tensor| {
        let pool = PoolForward::Param { geometry: &geometry, shape_logits: w, exponent_logits: Tensor::constant(pl.clone()), config: cfg };
        Ok(net.loss(&th, &pool, &images, &[0, 1, 2], BnMode::Train, &mut RunningStats::new(2)).map_err(nerr)?.0)
    };
    let consts = |a: &[Array]| a.iter().map(|a| Tensor::constant(a.clone())).collect::<Vec<_>>();
    push(
        "classifier/conv.weight",
        fd_worst(
            |t| {
                let mut th = consts(&theta);
                th[0] = t.clone();
                cls(th, Tensor::constant(wl.clone()))
            },
            &theta[0],
            s,
        )?,
    );
    push("classifier/W", fd_worst(|t| cls(consts(&theta), t.clone()), &wl, s)?);
    Ok(out)
}

pub fn lp_limit_suite() -> SuiteReport {
    SuiteReport::from_checks("lp-limit", lp_limit_checks())
}

fn lp_limit_checks() -> crate::tensor::Result<Vec<(String, f64, f64)>> {
    let perr = |e: pooling::PoolingError| crate::tensor::TensorError::invalid("pooling", e.to_string());
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let cfg = PoolConfig::new(0.2, Mode::Evaluation);
    let (mut mean_err, mut max_err) = (0.0f64, 0.0f64);
    for _ in 0..LIMIT_CASES {
        let j = rng.gen_range(2..=8);
        let x: Vec<f64> = (0..j).map(|_| rng.gen_range(0.1..=1.0)).collect();
        let xt = Tensor::constant(arr1(&x).into_dyn());
        let ones = Tensor::constant(Array::ones(IxDyn(&[1, j])));
        let at = |p: f64| -> crate::tensor::Result<f64> {
            Ok(pool_dense(&xt, &ones, &Tensor::constant(arr1(&[p.ln()]).into_dyn()), &cfg).map_err(perr)?.data()[0])
        };
        let mean = x.iter().sum::<f64>() / j as f64;
        let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        mean_err = mean_err.max((at(1.0)? - mean).abs() / mean);
        max_err = max_err.max((at(LIMIT_EXPONENT)? - max).abs() / max);
    }
    Ok(vec![
        ("p=1 vs mean".into(), mean_err, MEAN_TOLERANCE),
        (format!("p={LIMIT_EXPONENT:e} vs max"), max_err, MAX_LIMIT_TOLERANCE),
    ])
}

pub fn second_order_suite(fault: Option<Fault>) -> SuiteReport {
    SuiteReport::from_checks("second-order-fidelity", second_order_checks(sign(fault)))
}

fn meta_err(e: crate::meta::MetaError) -> crate::tensor::TensorError {
    crate::tensor::TensorError::invalid("meta", e.to_string())
}

/// Meta-gradient from [`task_gradient`] against central differences of the
/// whole two-level pipeline.
fn meta_fd_worst<D, F>(loss: &F, meta: &[Array], inner: &[Array], task: &Task<D>, cfg: &MetaConfig, s: f64) -> crate::tensor::Result<f64>
where
    F: Fn(&[Tensor], &[Tensor], &D) -> crate::meta::Result<Tensor>,
{
    let tg = task_gradient(loss, meta, inner, task, cfg).map_err(meta_err)?;
    let h = 1e-6;
    let mut worst = 0.0f64;
    for (k, g) in tg.grads.iter().enumerate() {
        for i in 0..g.len() {
            let mut up = meta.to_vec();
            up[k].as_slice_mut().unwrap()[i] += h;
            let mut down = meta.to_vec();
            down[k].as_slice_mut().unwrap()[i] -= h;
            let fd = (pipeline_loss(loss, &up, inner, task, cfg).map_err(meta_err)?
                - pipeline_loss(loss, &down, inner, task, cfg).map_err(meta_err)?)
                / (2.0 * h);
            worst = worst.max(relative_error(s * g.as_slice().unwrap()[i], fd));
        }
    }
    Ok(worst)
}

fn second_order_checks(s: f64) -> crate::tensor::Result<Vec<(String, f64, f64)>> {
    let mut out = Vec::new();
    let scalar = |v: f64| Array::from_elem(IxDyn(&[]), v);

    // L(θ, W) = (θ − W)² for both splits; θ = 0, W = 1, α = 0.25.
    let toy = |m: &[Tensor], th: &[Tensor], _: &()| -> crate::meta::Result<Tensor> { Ok(th[0].sub(&m[0])?.square()?) };
    let task = Task { id: 0, train: (), val: () };
    let cfg = MetaConfig { inner_lr: 0.25, target: InnerTarget::OtherLayers, order: Order::Second, ..MetaConfig::default() };
    let tg = task_gradient(&toy, &[scalar(1.0)], &[scalar(0.0)], &task, &cfg).map_err(meta_err)?;
    out.push(("scalar toy vs 0.5".into(), relative_error(s * tg.grads[0].sum(), 0.5), META_GRADIENT_TOLERANCE));
    out.push((
        "scalar toy vs differences".into(),
        meta_fd_worst(&toy, &[scalar(1.0)], &[scalar(0.0)], &task, &cfg, s)?,
        META_GRADIENT_TOLERANCE,
    ));

    // Pooling-only networks, the pooling parameters adapted in the inner step.
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for (j, norm) in [(2, Normalization::InputSize), (4, Normalization::InputSize), (4, Normalization::SelectedWeight)] {
        let pcfg = PoolConfig::new(0.2, Mode::MetaTraining).with_normalization(norm);
        let loss = move |m: &[Tensor], _: &[Tensor], d: &(Array, Array)| -> crate::meta::Result<Tensor> {
            let y = pool_dense(&Tensor::constant(d.0.clone()), &m[0], &m[1], &pcfg)?;
            Ok(nn::mse_loss(&y, &Tensor::constant(d.1.clone()))?)
        };
        let split = |rows: usize, rng: &mut ChaCha8Rng| (uniform(&[rows, j], 0.1, 1.0, rng), uniform(&[rows, 1], 0.2, 0.9, rng));
        let task = Task { id: 0, train: split(1, &mut rng), val: split(3, &mut rng) };
        let meta = vec![uniform(&[1, j], 0.35, 0.65, &mut rng), uniform(&[1], -0.2, 0.5, &mut rng)];
        for order_target in [InnerTarget::MetaParams] {
            let cfg = MetaConfig { target: order_target, ..MetaConfig::default() };
            out.push((
                format!("pooling-only J={j} {norm:?}"),
                meta_fd_worst(&loss, &meta, &[], &task, &cfg, s)?,
                META_GRADIENT_TOLERANCE,
            ));
        }
    }

    // Pooling meta-parameters with a linear readout θ adapted in the inner step.
    let pcfg = PoolConfig::new(0.2, Mode::MetaTraining);
    let loss = |m: &[Tensor], th: &[Tensor], d: &(Array, Array)| -> crate::meta::Result<Tensor> {
        let y = pool_dense(&Tensor::constant(d.0.clone()), &m[0], &m[1], &pcfg)?;
        Ok(nn::mse_loss(&y.matmul(&th[0])?, &Tensor::constant(d.1.clone()))?)
    };
    let task = Task {
        id: 0,
        train: (uniform(&[2, 4], 0.1, 1.0, &mut rng), uniform(&[2, 1], 0.0, 1.0, &mut rng)),
        val: (uniform(&[3, 4], 0.1, 1.0, &mut rng), uniform(&[3, 1], 0.0, 1.0, &mut rng)),
    };
    let meta = vec![uniform(&[2, 4], 0.35, 0.65, &mut rng), uniform(&[2], -0.2, 0.5, &mut rng)];
    let theta = vec![arr2(&[[0.7], [-0.4]]).into_dyn()];
    let cfg = MetaConfig { target: InnerTarget::OtherLayers, ..MetaConfig::default() };
    out.push(("pooling + readout J=4".into(), meta_fd_worst(&loss, &meta, &theta, &task, &cfg, s)?, META_GRADIENT_TOLERANCE));
    Ok(out)
}

pub fn synthetic_oracle_suite() -> SuiteReport {
    SuiteReport::from_checks("synthetic-oracle", synthetic_oracle_checks())
}

/// Mismatch counts, so the tolerance is zero.
fn synthetic_oracle_checks() -> crate::tensor::Result<Vec<(String, f64, f64)>> {
    let derr = |e: crate::data::DataError| crate::tensor::TensorError::invalid("data", e.to_string());
    // 1D: outputs select input pairs through the block pattern; the first
    // half takes the larger entry, the second half the mean.
    let spec = SyntheticTaskSpec::one_d(50, 21);
    let tasks = gen_synthetic_tasks(&spec).map_err(derr)?;
    let mut mismatches_1d = 0usize;
    for t in &tasks.tasks {
        for split in [&t.train, &t.val] {
            for (x, y) in split.x.outer_iter().zip(split.y.outer_iter()) {
                let j = x.len();
                for k in 0..j / 2 {
                    let selected: Vec<f64> = (0..j).filter(|&i| i / 2 == k).map(|i| x[i]).collect();
                    let expect = if 2 * k < j / 2 {
                        selected.iter().copied().fold(f64::NEG_INFINITY, f64::max)
                    } else {
                        selected.iter().sum::<f64>() / selected.len() as f64
                    };
                    mismatches_1d += usize::from(y[k] != expect);
                }
            }
        }
    }
    // 2D: each 2×2 window selects its left column.
    let (h, w) = (12, 12);
    let spec = SyntheticTaskSpec { kind: SyntheticKind::TwoD { height: h, width: w }, ..SyntheticTaskSpec::two_d(h, w, 50, 22) };
    let tasks = gen_synthetic_tasks(&spec).map_err(derr)?;
    let mut mismatches_2d = 0usize;
    let mut cases = 0usize;
    for t in &tasks.tasks {
        for split in [&t.train, &t.val] {
            for s in 0..split.x.shape()[0] {
                cases += 1;
                let img = Array2::from_shape_fn((h, w), |(r, c)| split.x[[s, 0, r, c]]);
                for r in 0..h / 2 {
                    for c in 0..w / 2 {
                        let selected: Vec<f64> = GROUND_TRUTH_WINDOW_2D
                            .iter()
                            .enumerate()
                            .filter(|(_, &m)| m == 1.0)
                            .map(|(k, _)| img[[2 * r + k / 2, 2 * c + k % 2]])
                            .collect();
                        let expect = if r < h / 4 {
                            selected.iter().copied().fold(f64::NEG_INFINITY, f64::max)
                        } else {
                            selected.iter().sum::<f64>() / selected.len() as f64
                        };
                        mismatches_2d += usize::from(split.y[[s, 0, r, c]] != expect);
                    }
                }
            }
        }
    }
    Ok(vec![
        (format!("1D targets ({} cases)", 50 * spec.sets_per_task), mismatches_1d as f64, 0.0),
        (format!("2D targets ({cases} cases)"), mismatches_2d as f64, 0.0),
    ])
}

/// Every suite, in reporting order.
pub fn run_all(fault: Option<Fault>) -> Vec<SuiteReport> {
    vec![gradient_suite(fault), lp_limit_suite(), second_order_suite(fault), synthetic_oracle_suite()]
}
