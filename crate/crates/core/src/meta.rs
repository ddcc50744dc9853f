//! Two-level meta-learning.
//!
//! Each task adapts a set of *inner* tensors with SGD on its training split;
//! the *meta* tensors are then moved along the total derivative of the
//! validation loss after adaptation. Three configurations are covered by the
//! same machinery:
//!
//! * pooling meta-learning: meta = `[W~, p~]`, inner = θ ([`InnerTarget::OtherLayers`]);
//! * pooling-only networks: the meta tensors themselves are adapted once
//!   ([`InnerTarget::MetaParams`]);
//! * MAML: meta = θ with pooling frozen, again [`InnerTarget::MetaParams`].
//!
//! With [`Order::Second`] the inner gradient is recorded, so the validation
//! loss is differentiated through the inner update.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use std::borrow::Cow;

use crate::data::{EpisodeSplit, LabeledImages};
use crate::nn::{self, argmax_rows, Adam, BnMode, ConvNetSpec, NnError, Optimizer, PoolForward, PoolLayer, RunningStats};
use crate::pooling::{Mode, PoolingError};
use crate::tensor::{grad, grad_detached, Array, Tape, Tensor, TensorError};

/// Losses above this abort meta-training.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

#[derive(Debug, Error)]
pub enum MetaError {
    #[error("loss {loss} diverged at epoch {epoch}")]
    Diverged { epoch: usize, loss: f64 },
    #[error("epoch {epoch}: {source}")]
    Epoch {
        epoch: usize,
        #[source]
        source: Box<MetaError>,
    },
    #[error("empty task minibatch")]
    EmptyBatch,
    #[error("empty split: {0}")]
    EmptySplit(&'static str),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("pooling must be in evaluation mode during adaptation")]
    PoolingNotFrozen,
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Pooling(#[from] PoolingError),
}

pub type Result<T, E = MetaError> = std::result::Result<T, E>;

/// One episode: disjoint training and validation splits.
#[derive(Debug, Clone, PartialEq)]
pub struct Task<D> {
    pub id: usize,
    pub train: D,
    pub val: D,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskSet<D> {
    pub tasks: Vec<Task<D>>,
}

impl<D> TaskSet<D> {
    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    /// `n` tasks without replacement when `N ≥ n`, with replacement otherwise.
    pub fn sample(&self, n: usize, rng: &mut ChaCha8Rng) -> Vec<&Task<D>> {
        let total = self.tasks.len();
        if total == 0 {
            return Vec::new();
        }
        if total >= n {
            index::sample(rng, total, n).into_iter().map(|i| &self.tasks[i]).collect()
        } else {
            (0..n).map(|_| &self.tasks[rng.gen_range(0..total)]).collect()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum InnerTarget {
    /// Adapt θ; the meta tensors enter the inner loss unchanged.
    OtherLayers,
    /// Adapt the meta tensors themselves.
    MetaParams,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Order {
    /// Differentiate through the inner update.
    Second,
    /// Treat the inner gradient as a constant.
    First,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OuterOptimizer {
    Adam,
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaConfig {
    /// Inner learning rate α.
    pub inner_lr: f64,
    /// Outer learning rate η.
    pub outer_lr: f64,
    pub outer_optimizer: OuterOptimizer,
    /// Task minibatch size n.
    pub batch: usize,
    pub epochs: usize,
    pub inner_steps: usize,
    pub temperature: f64,
    pub target: InnerTarget,
    pub order: Order,
    pub seed: u64,
}

impl Default for MetaConfig {
    fn default() -> Self {
        MetaConfig {
            inner_lr: 0.1,
            outer_lr: 0.001,
            outer_optimizer: OuterOptimizer::Adam,
            batch: 32,
            epochs: 10_000,
            inner_steps: 1,
            temperature: 0.2,
            target: InnerTarget::OtherLayers,
            order: Order::Second,
            seed: 0,
        }
    }
}

impl MetaConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(MetaError::Config(m.to_string()));
        if !(self.inner_lr > 0.0) {
            return bad("inner learning rate must be positive");
        }
        if !(self.outer_lr > 0.0) {
            return bad("outer learning rate must be positive");
        }
        if self.batch == 0 {
            return bad("task batch size must be at least 1");
        }
        if !(self.temperature > 0.0) {
            return bad("temperature must be positive");
        }
        Ok(())
    }

    pub fn optimizer(&self, params: &[Array]) -> Optimizer {
        match self.outer_optimizer {
            OuterOptimizer::Adam => Optimizer::Adam(Adam::new(self.outer_lr, params)),
            OuterOptimizer::Sgd => Optimizer::Sgd { lr: self.outer_lr },
        }
    }
}

/// Per-task result of the two-level computation.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskGradient {
    /// Total derivative of the post-adaptation validation loss w.r.t. each meta tensor.
    pub grads: Vec<Array>,
    /// Training loss before adaptation.
    pub train_loss: f64,
    /// Validation loss after adaptation.
    pub val_loss: f64,
}

fn guard(loss: &Tensor) -> Result<f64> {
    let v = loss.item();
    if !v.is_finite() || v > DIVERGENCE_LIMIT {
        return Err(MetaError::Diverged { epoch: 0, loss: v });
    }
    Ok(v)
}

fn inner_update(loss: &Tensor, params: &[Tensor], alpha: f64, order: Order) -> Result<Vec<Tensor>> {
    let refs: Vec<&Tensor> = params.iter().collect();
    let g = match order {
        Order::Second => grad(loss, &refs)?,
        Order::First => grad_detached(loss, &refs)?,
    };
    Ok(nn::sgd_step(params, &g, alpha)?)
}

/// Meta-gradient of one task.
///
/// `loss(meta, inner, split)` evaluates the model; for
/// [`InnerTarget::MetaParams`] the `inner` slice passed to it is constant.
pub fn task_gradient<D, F>(
    loss: &F,
    meta: &[Array],
    inner: &[Array],
    task: &Task<D>,
    cfg: &MetaConfig,
) -> Result<TaskGradient>
where
    F: Fn(&[Tensor], &[Tensor], &D) -> Result<Tensor>,
{
    let tape = Tape::new();
    let m: Vec<Tensor> = meta.iter().map(|a| tape.var(a.clone())).collect();
    let mut train_loss = None;
    let val = match cfg.target {
        InnerTarget::OtherLayers => {
            let mut theta: Vec<Tensor> = inner.iter().map(|a| tape.var(a.clone())).collect();
            for _ in 0..cfg.inner_steps {
                let l = loss(&m, &theta, &task.train)?;
                train_loss.get_or_insert(guard(&l)?);
                theta = inner_update(&l, &theta, cfg.inner_lr, cfg.order)?;
            }
            loss(&m, &theta, &task.val)?
        }
        InnerTarget::MetaParams => {
            let fixed: Vec<Tensor> = inner.iter().map(|a| Tensor::constant(a.clone())).collect();
            let mut adapted = m.clone();
            for _ in 0..cfg.inner_steps {
                let l = loss(&adapted, &fixed, &task.train)?;
                train_loss.get_or_insert(guard(&l)?);
                adapted = inner_update(&l, &adapted, cfg.inner_lr, cfg.order)?;
            }
            loss(&adapted, &fixed, &task.val)?
        }
    };
    let val_loss = guard(&val)?;
    let train_loss = match train_loss {
        Some(v) => v,
        None => guard(&loss(&m, &inner.iter().map(|a| Tensor::constant(a.clone())).collect::<Vec<_>>(), &task.train)?)?,
    };
    let refs: Vec<&Tensor> = m.iter().collect();
    let grads = grad_detached(&val, &refs)?.into_iter().map(|g| g.value().clone()).collect();
    Ok(TaskGradient {
        grads,
        train_loss,
        val_loss,
    })
}

/// Validation loss after inner adaptation, evaluated without recording the
/// outer level. Used as the finite-difference oracle of [`task_gradient`].
pub fn pipeline_loss<D, F>(loss: &F, meta: &[Array], inner: &[Array], task: &Task<D>, cfg: &MetaConfig) -> Result<f64>
where
    F: Fn(&[Tensor], &[Tensor], &D) -> Result<Tensor>,
{
    let (mut meta, mut inner) = (meta.to_vec(), inner.to_vec());
    for _ in 0..cfg.inner_steps {
        let tape = Tape::new();
        let (m, th): (Vec<Tensor>, Vec<Tensor>) = match cfg.target {
            InnerTarget::OtherLayers => (
                meta.iter().map(|a| Tensor::constant(a.clone())).collect(),
                inner.iter().map(|a| tape.var(a.clone())).collect(),
            ),
            InnerTarget::MetaParams => (
                meta.iter().map(|a| tape.var(a.clone())).collect(),
                inner.iter().map(|a| Tensor::constant(a.clone())).collect(),
            ),
        };
        let l = loss(&m, &th, &task.train)?;
        let (params, target) = match cfg.target {
            InnerTarget::OtherLayers => (&th, &mut inner),
            InnerTarget::MetaParams => (&m, &mut meta),
        };
        let refs: Vec<&Tensor> = params.iter().collect();
        let g: Vec<Array> = grad_detached(&l, &refs)?.into_iter().map(|g| g.value().clone()).collect();
        nn::sgd_update(target, &g, cfg.inner_lr)?;
    }
    let m: Vec<Tensor> = meta.into_iter().map(Tensor::constant).collect();
    let th: Vec<Tensor> = inner.into_iter().map(Tensor::constant).collect();
    Ok(loss(&m, &th, &task.val)?.item())
}

/// Summed meta-gradient of a minibatch, accumulated in task-id order.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchGradient {
    pub grads: Vec<Array>,
    pub mean_train_loss: f64,
    pub mean_val_loss: f64,
}

pub fn batch_gradient<D, F>(
    loss: &F,
    meta: &[Array],
    inner: &[Array],
    batch: &[&Task<D>],
    cfg: &MetaConfig,
) -> Result<BatchGradient>
where
    F: Fn(&[Tensor], &[Tensor], &D) -> Result<Tensor>,
{
    if batch.is_empty() {
        return Err(MetaError::EmptyBatch);
    }
    let mut order: Vec<&Task<D>> = batch.to_vec();
    order.sort_by_key(|t| t.id);
    let per_task: Vec<TaskGradient> = order
        .iter()
        .map(|t| task_gradient(loss, meta, inner, t, cfg))
        .collect::<Result<_>>()?;
    let mut grads: Vec<Array> = meta.iter().map(|a| Array::zeros(a.raw_dim())).collect();
    for tg in &per_task {
        for (acc, g) in grads.iter_mut().zip(&tg.grads) {
            *acc += g;
        }
    }
    let n = per_task.len() as f64;
    Ok(BatchGradient {
        grads,
        mean_train_loss: per_task.iter().map(|t| t.train_loss).sum::<f64>() / n,
        mean_val_loss: per_task.iter().map(|t| t.val_loss).sum::<f64>() / n,
    })
}

/// One outer update of `meta` from a task minibatch.
pub fn outer_step<D, F>(
    loss: &F,
    meta: &mut [Array],
    inner: &[Array],
    batch: &[&Task<D>],
    cfg: &MetaConfig,
    optimizer: &mut Optimizer,
) -> Result<BatchGradient>
where
    F: Fn(&[Tensor], &[Tensor], &D) -> Result<Tensor>,
{
    let g = batch_gradient(loss, meta, inner, batch, cfg)?;
    optimizer.step(meta, &g.grads)?;
    Ok(g)
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_train_loss: f64,
    pub mean_val_loss: f64,
    pub p_min: f64,
    pub p_max: f64,
    #[serde(rename = "W_saturation_fraction")]
    pub w_saturation_fraction: f64,
}

/// Pooling statistics reported in the log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoolingSummary {
    pub p_min: f64,
    pub p_max: f64,
    pub w_saturation_fraction: f64,
}

/// `p = exp(p~)` range and the fraction of relaxed `W` entries outside `[0.05, 0.95]`.
pub fn pooling_summary(shape_logits: &Array, exponent_logits: &Array, temperature: f64) -> PoolingSummary {
    let (p_min, p_max) = exponent_logits
        .iter()
        .map(|v| v.exp())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(p), hi.max(p)));
    let saturated = shape_logits
        .iter()
        .map(|&v| crate::pooling::sigmoid_shape(v, temperature))
        .filter(|&w| !(0.05..=0.95).contains(&w))
        .count();
    PoolingSummary {
        p_min,
        p_max,
        w_saturation_fraction: saturated as f64 / shape_logits.len().max(1) as f64,
    }
}

/// Runs `cfg.epochs` outer steps. Task sampling is seeded by `cfg.seed`.
///
/// `summary` maps the current meta tensors to the pooling statistics of the
/// log; `on_epoch` sees every record as it is produced.
pub fn meta_train<D, F, S, L>(
    tasks: &TaskSet<D>,
    init: Vec<Array>,
    inner: &[Array],
    loss: &F,
    cfg: &MetaConfig,
    summary: S,
    mut on_epoch: L,
) -> Result<(Vec<Array>, Vec<EpochRecord>)>
where
    F: Fn(&[Tensor], &[Tensor], &D) -> Result<Tensor>,
    S: Fn(&[Array]) -> PoolingSummary,
    L: FnMut(&EpochRecord),
{
    cfg.validate()?;
    if cfg.epochs > 0 && tasks.is_empty() {
        return Err(MetaError::EmptyBatch);
    }
    let mut meta = init;
    let mut optimizer = cfg.optimizer(&meta);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let batch = tasks.sample(cfg.batch, &mut rng);
        let step = outer_step(loss, &mut meta, inner, &batch, cfg, &mut optimizer).map_err(|e| match e {
            MetaError::Diverged { loss, .. } => MetaError::Diverged { epoch, loss },
            other => MetaError::Epoch {
                epoch,
                source: Box::new(other),
            },
        })?;
        if let Some(i) = meta.iter().flat_map(|a| a.iter()).position(|v| !v.is_finite()) {
            return Err(MetaError::Epoch {
                epoch,
                source: Box::new(MetaError::Config(format!("non-finite meta-parameter at flat index {i}"))),
            });
        }
        let s = summary(&meta);
        let record = EpochRecord {
            epoch,
            mean_train_loss: step.mean_train_loss,
            mean_val_loss: step.mean_val_loss,
            p_min: s.p_min,
            p_max: s.p_max,
            w_saturation_fraction: s.w_saturation_fraction,
        };
        on_epoch(&record);
        log.push(record);
    }
    Ok((meta, log))
}

/// Anything that yields a batch of labeled images.
pub trait ImageBatch {
    fn batch(&self) -> Cow<'_, LabeledImages>;
}

impl ImageBatch for LabeledImages {
    fn batch(&self) -> Cow<'_, LabeledImages> {
        Cow::Borrowed(self)
    }
}

impl ImageBatch for EpisodeSplit<'_> {
    fn batch(&self) -> Cow<'_, LabeledImages> {
        Cow::Owned(self.materialize())
    }
}

/// Cross-entropy of the classifier with BN in training mode on the given batch.
pub fn classifier_loss(
    net: &ConvNetSpec,
    theta: &[Tensor],
    pool: &PoolForward<'_>,
    data: &LabeledImages,
) -> Result<(Tensor, Array)> {
    if data.labels.is_empty() {
        return Err(MetaError::EmptySplit("no images"));
    }
    let mut stats = RunningStats::new(net.filters);
    let images = Tensor::constant(data.images.clone());
    Ok(net.loss(theta, pool, &images, &data.labels, BnMode::Train, &mut stats)?)
}

/// Pooling meta-learning on classification tasks: meta = `[W~, p~]`, inner = θ.
/// θ is the same starting point for every task; its updates are discarded.
pub fn meta_train_pooling<D: ImageBatch>(
    net: &ConvNetSpec,
    tasks: &TaskSet<D>,
    init: &crate::pooling::WindowedPoolingParams,
    theta: &[Array],
    cfg: &MetaConfig,
    on_epoch: impl FnMut(&EpochRecord),
) -> Result<(crate::pooling::WindowedPoolingParams, Vec<EpochRecord>)> {
    net.check_theta(theta)?;
    let mut config = init.config;
    config.mode = Mode::MetaTraining;
    config.temperature = cfg.temperature;
    let geometry = init.geometry;
    let loss = |meta: &[Tensor], th: &[Tensor], d: &D| {
        let pool = PoolForward::Param {
            geometry: &geometry,
            shape_logits: meta[0].clone(),
            exponent_logits: meta[1].clone(),
            config,
        };
        Ok(classifier_loss(net, th, &pool, &d.batch())?.0)
    };
    let cfg = MetaConfig {
        target: InnerTarget::OtherLayers,
        ..cfg.clone()
    };
    let t = cfg.temperature;
    let (meta, log) = meta_train(
        tasks,
        vec![init.shape_logits.clone(), init.exponent_logits.clone()],
        theta,
        &loss,
        &cfg,
        |m| pooling_summary(&m[0], &m[1], t),
        on_epoch,
    )?;
    let mut out = init.clone();
    out.config = config;
    let mut it = meta.into_iter();
    out.shape_logits = it.next().unwrap();
    out.exponent_logits = it.next().unwrap();
    Ok((out, log))
}

/// MAML: meta-learns the initial θ through the same two-level structure with
/// the pooling layer frozen (binary `W` for the parameterized layer).
pub fn maml_init<D: ImageBatch>(
    net: &ConvNetSpec,
    tasks: &TaskSet<D>,
    pool: &PoolLayer,
    theta: Vec<Array>,
    cfg: &MetaConfig,
    on_epoch: impl FnMut(&EpochRecord),
) -> Result<(Vec<Array>, Vec<EpochRecord>)> {
    net.check_theta(&theta)?;
    let pool = frozen(pool)?;
    let view = PoolForward::frozen(&pool);
    let loss = |meta: &[Tensor], _: &[Tensor], d: &D| Ok(classifier_loss(net, meta, &view, &d.batch())?.0);
    let cfg = MetaConfig {
        target: InnerTarget::MetaParams,
        ..cfg.clone()
    };
    let s = match &pool {
        PoolLayer::Meta(p) => pooling_summary(&p.shape_logits, &p.exponent_logits, p.config.temperature),
        _ => PoolingSummary {
            p_min: f64::NAN,
            p_max: f64::NAN,
            w_saturation_fraction: f64::NAN,
        },
    };
    meta_train(tasks, theta, &[], &loss, &cfg, |_| s, on_epoch)
}

/// The pooling layer switched to evaluation mode.
pub fn frozen(pool: &PoolLayer) -> Result<PoolLayer> {
    Ok(match pool {
        PoolLayer::Meta(p) => {
            let mut p = p.clone();
            p.config.mode = Mode::Evaluation;
            PoolLayer::Meta(p)
        }
        other => other.clone(),
    })
}

/// Statistics used for batch norm when classifying the validation split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum BnEval {
    /// Statistics of the batch being classified.
    #[default]
    Batch,
    /// Running statistics accumulated while adapting on the training split.
    Running,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adapted {
    pub theta: Vec<Array>,
    pub stats: RunningStats,
}

/// SGD on θ over the training split with the pooling layer frozen.
pub fn adapt(
    net: &ConvNetSpec,
    pool: &PoolLayer,
    theta_init: &[Array],
    train: &LabeledImages,
    steps: usize,
    lr: f64,
) -> Result<Adapted> {
    if let PoolLayer::Meta(p) = pool {
        if p.config.mode != Mode::Evaluation {
            return Err(MetaError::PoolingNotFrozen);
        }
    }
    if train.labels.is_empty() {
        return Err(MetaError::EmptySplit("training split"));
    }
    net.check_theta(theta_init)?;
    let view = PoolForward::frozen(pool);
    let images = Tensor::constant(train.images.clone());
    let mut theta = theta_init.to_vec();
    let mut stats = RunningStats::new(net.filters);
    for _ in 0..steps {
        let tape = Tape::new();
        let vars: Vec<Tensor> = theta.iter().map(|a| tape.var(a.clone())).collect();
        let (l, _) = net.loss(&vars, &view, &images, &train.labels, BnMode::Train, &mut stats)?;
        guard(&l)?;
        let refs: Vec<&Tensor> = vars.iter().collect();
        let g: Vec<Array> = grad_detached(&l, &refs)?.into_iter().map(|g| g.value().clone()).collect();
        nn::sgd_update(&mut theta, &g, lr)?;
    }
    Ok(Adapted { theta, stats })
}

/// Fraction of `data` classified correctly by adapted weights.
pub fn evaluate(net: &ConvNetSpec, pool: &PoolLayer, adapted: &Adapted, data: &LabeledImages, bn: BnEval) -> Result<f64> {
    if data.labels.is_empty() {
        return Err(MetaError::EmptySplit("validation split"));
    }
    let view = PoolForward::frozen(pool);
    let theta: Vec<Tensor> = adapted.theta.iter().map(|a| Tensor::constant(a.clone())).collect();
    let images = Tensor::constant(data.images.clone());
    let logits = match bn {
        BnEval::Batch => net.logits(&theta, &view, &images, BnMode::Train, &mut RunningStats::new(net.filters))?,
        BnEval::Running => net.logits(&theta, &view, &images, BnMode::Eval, &mut adapted.stats.clone())?,
    };
    let predicted = argmax_rows(logits.value());
    let correct = predicted.iter().zip(&data.labels).filter(|(p, l)| p == l).count();
    Ok(correct as f64 / data.labels.len() as f64)
}

/// Adapts θ on `task.train` and reports accuracy on `task.val`.
pub fn adapt_and_eval(
    net: &ConvNetSpec,
    pool: &PoolLayer,
    theta_init: &[Array],
    task: &Task<LabeledImages>,
    steps: usize,
    lr: f64,
    bn: BnEval,
) -> Result<(f64, Adapted)> {
    let adapted = adapt(net, pool, theta_init, &task.train, steps, lr)?;
    let acc = evaluate(net, pool, &adapted, &task.val, bn)?;
    Ok((acc, adapted))
}

/// Shape of a meta tensor list, for diagnostics.
pub fn shapes(params: &[Array]) -> Vec<Vec<usize>> {
    params.iter().map(|a| a.shape().to_vec()).collect()
}

#[cfg(test)]
pub(crate) fn scalar(v: f64) -> Array {
    Array::from_elem(ndarray::IxDyn(&[]), v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pooling::{pool_dense, Normalization, PoolConfig};
    use crate::tensor::relative_error;
    use ndarray::{arr1, arr2};

    type Toy = ();

    fn toy_loss(meta: &[Tensor], inner: &[Tensor], _: &Toy) -> Result<Tensor> {
        Ok(inner[0].sub(&meta[0])?.square()?)
    }

    fn toy_task() -> Task<Toy> {
        Task { id: 0, train: (), val: () }
    }

    fn toy_cfg(order: Order) -> MetaConfig {
        MetaConfig {
            inner_lr: 0.25,
            target: InnerTarget::OtherLayers,
            order,
            ..MetaConfig::default()
        }
    }

    #[test]
    fn scalar_toy_inner_step() {
        let cfg = toy_cfg(Order::Second);
        // Zero gradient leaves θ alone: θ = W.
        let tg = task_gradient(&toy_loss, &[scalar(1.0)], &[scalar(1.0)], &toy_task(), &cfg).unwrap();
        assert_eq!(tg.val_loss, 0.0);
        // θ' = 0 − 0.25·2(0 − 1) = 0.5, val loss (0.5 − 1)² = 0.25.
        let tg = task_gradient(&toy_loss, &[scalar(1.0)], &[scalar(0.0)], &toy_task(), &cfg).unwrap();
        assert_eq!(tg.val_loss, 0.25);
        assert_eq!(tg.train_loss, 1.0);
    }

    #[test]
    fn scalar_toy_meta_gradients() {
        let second = task_gradient(&toy_loss, &[scalar(1.0)], &[scalar(0.0)], &toy_task(), &toy_cfg(Order::Second)).unwrap();
        assert!((second.grads[0].sum() - 0.5).abs() < 1e-15);
        let first = task_gradient(&toy_loss, &[scalar(1.0)], &[scalar(0.0)], &toy_task(), &toy_cfg(Order::First)).unwrap();
        assert!((first.grads[0].sum() - 1.0).abs() < 1e-15);

        let cfg = toy_cfg(Order::Second);
        let h = 1e-5;
        let f = |w: f64| pipeline_loss(&toy_loss, &[scalar(w)], &[scalar(0.0)], &toy_task(), &cfg).unwrap();
        let fd = (f(1.0 + h) - f(1.0 - h)) / (2.0 * h);
        assert!(relative_error(fd, 0.5) < 1e-3);
    }

    #[test]
    fn meta_params_target_updates_meta_tensors_once() {
        // Pooling-only network: L = (f(x) − y)², meta = [W~, p~] adapted directly.
        let loss = |meta: &[Tensor], _: &[Tensor], d: &(Array, Array)| -> Result<Tensor> {
            let cfg = PoolConfig::new(0.2, Mode::MetaTraining);
            let y = pool_dense(&Tensor::constant(d.0.clone()), &meta[0], &meta[1], &cfg)?;
            Ok(nn::mse_loss(&y, &Tensor::constant(d.1.clone()))?)
        };
        let task = Task {
            id: 0,
            train: (arr2(&[[0.3, 0.9]]).into_dyn(), arr2(&[[0.9]]).into_dyn()),
            val: (arr2(&[[0.8, 0.2], [0.4, 0.5]]).into_dyn(), arr2(&[[0.8], [0.5]]).into_dyn()),
        };
        let meta = vec![arr2(&[[0.55, 0.45]]).into_dyn(), arr1(&[0.3]).into_dyn()];
        let cfg = MetaConfig {
            target: InnerTarget::MetaParams,
            ..MetaConfig::default()
        };
        let tg = task_gradient(&loss, &meta, &[], &task, &cfg).unwrap();
        let h = 1e-6;
        for (k, g) in tg.grads.iter().enumerate() {
            for i in 0..g.len() {
                let mut up = meta.clone();
                up[k].as_slice_mut().unwrap()[i] += h;
                let mut down = meta.clone();
                down[k].as_slice_mut().unwrap()[i] -= h;
                let fd = (pipeline_loss(&loss, &up, &[], &task, &cfg).unwrap()
                    - pipeline_loss(&loss, &down, &[], &task, &cfg).unwrap())
                    / (2.0 * h);
                let err = relative_error(g.as_slice().unwrap()[i], fd);
                assert!(err < 1e-3, "meta {k}[{i}]: {} vs {fd}", g.as_slice().unwrap()[i]);
            }
        }
    }

    #[test]
    fn identical_tasks_sum_linearly() {
        let cfg = toy_cfg(Order::Second);
        let tasks: Vec<Task<Toy>> = (0..4).map(|id| Task { id, train: (), val: () }).collect();
        let refs: Vec<&Task<Toy>> = tasks.iter().collect();
        let g = batch_gradient(&toy_loss, &[scalar(1.0)], &[scalar(0.0)], &refs, &cfg).unwrap();
        assert!((g.grads[0].sum() - 4.0 * 0.5).abs() < 1e-15);
        let empty: Vec<&Task<Toy>> = vec![];
        assert!(matches!(
            batch_gradient(&toy_loss, &[scalar(1.0)], &[scalar(0.0)], &empty, &cfg),
            Err(MetaError::EmptyBatch)
        ));
    }

    #[test]
    fn batch_sum_is_independent_of_arrival_order() {
        let loss = |meta: &[Tensor], inner: &[Tensor], d: &f64| -> Result<Tensor> {
            Ok(inner[0].sub(&meta[0].scale(*d)?)?.square()?.add(&meta[0].powf(4.0)?.scale(0.1)?)?)
        };
        let tasks: Vec<Task<f64>> = (0..7)
            .map(|id| Task { id, train: 0.3 + id as f64 * 0.71, val: 1.7 - id as f64 * 0.13 })
            .collect();
        let forward: Vec<&Task<f64>> = tasks.iter().collect();
        let mut backward = forward.clone();
        backward.reverse();
        backward.swap(1, 4);
        let cfg = toy_cfg(Order::Second);
        let a = batch_gradient(&loss, &[scalar(0.7)], &[scalar(-0.2)], &forward, &cfg).unwrap();
        let b = batch_gradient(&loss, &[scalar(0.7)], &[scalar(-0.2)], &backward, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_epochs_return_initial_params() {
        let tasks = TaskSet { tasks: vec![toy_task()] };
        let init = vec![scalar(0.3)];
        let summary = |_: &[Array]| PoolingSummary { p_min: 1.0, p_max: 1.0, w_saturation_fraction: 0.0 };
        let cfg = MetaConfig { epochs: 0, ..toy_cfg(Order::Second) };
        let (out, log) = meta_train(&tasks, init.clone(), &[scalar(0.0)], &toy_loss, &cfg, summary, |_| {}).unwrap();
        assert_eq!(out, init);
        assert!(log.is_empty());
    }

    #[test]
    fn meta_train_reduces_toy_loss_and_is_deterministic() {
        // Tasks pull W toward different targets; meta-training finds a good start.
        let loss = |meta: &[Tensor], inner: &[Tensor], d: &f64| -> Result<Tensor> {
            Ok(inner[0].add(&meta[0])?.offset(-*d)?.square()?)
        };
        let tasks = TaskSet {
            tasks: (0..20).map(|id| Task { id, train: 1.0 + (id % 5) as f64 * 0.1, val: 1.0 + (id % 5) as f64 * 0.1 }).collect(),
        };
        let summary = |_: &[Array]| PoolingSummary { p_min: 1.0, p_max: 1.0, w_saturation_fraction: 0.0 };
        let cfg = MetaConfig { inner_lr: 0.1, outer_lr: 0.05, batch: 4, epochs: 200, seed: 3, ..toy_cfg(Order::Second) };
        let run = || meta_train(&tasks, vec![scalar(-2.0)], &[scalar(0.0)], &loss, &cfg, summary, |_| {}).unwrap();
        let (a, log) = run();
        let (b, _) = run();
        assert_eq!(a, b);
        let k = log.len() / 10;
        let head: f64 = log[..k].iter().map(|r| r.mean_val_loss).sum::<f64>() / k as f64;
        let tail: f64 = log[log.len() - k..].iter().map(|r| r.mean_val_loss).sum::<f64>() / k as f64;
        assert!(tail < head, "{tail} !< {head}");
    }

    #[test]
    fn divergence_is_reported_with_epoch() {
        let loss = |meta: &[Tensor], inner: &[Tensor], _: &Toy| -> Result<Tensor> {
            Ok(inner[0].add(&meta[0])?.square()?.scale(1e5)?)
        };
        let tasks = TaskSet { tasks: vec![toy_task()] };
        let summary = |_: &[Array]| PoolingSummary { p_min: 1.0, p_max: 1.0, w_saturation_fraction: 0.0 };
        let cfg = MetaConfig {
            epochs: 10,
            batch: 1,
            outer_optimizer: OuterOptimizer::Sgd,
            outer_lr: 1.0,
            ..toy_cfg(Order::Second)
        };
        let err = meta_train(&tasks, vec![scalar(5.0)], &[scalar(0.0)], &loss, &cfg, summary, |_| {}).unwrap_err();
        assert!(matches!(err, MetaError::Diverged { epoch: 0, .. }), "{err}");
    }

    #[test]
    fn sampling_without_replacement() {
        let set = TaskSet { tasks: (0..10).map(|id| Task { id, train: (), val: () }).collect() };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut ids: Vec<usize> = set.sample(10, &mut rng).iter().map(|t| t.id).collect();
        ids.sort();
        assert_eq!(ids, (0..10).collect::<Vec<_>>());
        assert_eq!(set.sample(15, &mut rng).len(), 15);
    }

    #[test]
    fn config_validation() {
        assert!(MetaConfig::default().validate().is_ok());
        assert!(MetaConfig { inner_lr: 0.0, ..MetaConfig::default() }.validate().is_err());
        assert!(MetaConfig { batch: 0, ..MetaConfig::default() }.validate().is_err());
    }

    #[test]
    fn selected_weight_pooling_only_gradient() {
        let loss = |meta: &[Tensor], _: &[Tensor], d: &(Array, Array)| -> Result<Tensor> {
            let cfg = PoolConfig::new(0.2, Mode::MetaTraining).with_normalization(Normalization::SelectedWeight);
            let y = pool_dense(&Tensor::constant(d.0.clone()), &meta[0], &meta[1], &cfg)?;
            Ok(nn::mse_loss(&y, &Tensor::constant(d.1.clone()))?)
        };
        let task = Task {
            id: 0,
            train: (arr2(&[[0.3, 0.9, 0.2, 0.6]]).into_dyn(), arr2(&[[0.9]]).into_dyn()),
            val: (arr2(&[[0.8, 0.2, 0.1, 0.3]]).into_dyn(), arr2(&[[0.8]]).into_dyn()),
        };
        let meta = vec![arr2(&[[0.55, 0.45, 0.6, 0.4]]).into_dyn(), arr1(&[0.8]).into_dyn()];
        let cfg = MetaConfig { target: InnerTarget::MetaParams, ..MetaConfig::default() };
        let tg = task_gradient(&loss, &meta, &[], &task, &cfg).unwrap();
        let h = 1e-6;
        let mut up = meta.clone();
        up[1][[0]] += h;
        let mut down = meta.clone();
        down[1][[0]] -= h;
        let fd = (pipeline_loss(&loss, &up, &[], &task, &cfg).unwrap() - pipeline_loss(&loss, &down, &[], &task, &cfg).unwrap()) / (2.0 * h);
        assert!(relative_error(tg.grads[1][[0]], fd) < 1e-3);
    }
}
