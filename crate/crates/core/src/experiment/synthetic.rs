//! Kernel-recovery runs on synthetic pooling tasks.
//!
//! The network is a single parameterized pooling layer; its `W~` and `p~`
//! are both the meta-parameters and the tensors adapted in the inner step.

use std::path::Path;

use ndarray::{Array2, Axis, IxDyn};
use serde::{Deserialize, Serialize};

use super::artifacts::{save_checkpoint, write_csv, write_json, write_json_lines, write_pgm};
use super::{ExperimentConfig, ExperimentError, ExperimentKind, Result};
use crate::data::{
    gen_synthetic_tasks, ground_truth_w_1d, Regression, SyntheticKind, SyntheticTaskSpec, GROUND_TRUTH_WINDOW_2D,
};
use crate::meta::{meta_train, pooling_summary, EpochRecord, InnerTarget, MetaConfig, TaskSet};
use crate::nn::mse_loss;
use crate::pooling::{
    empty_rows, init_pooling_params, init_windowed_params, pool_dense, pool_windows, transform_shape, Mode, PoolConfig,
    WindowGeometry,
};
use crate::tensor::{Array, Tensor};

pub const P_MAX_THRESHOLD: f64 = 5.0;
pub const P_AVG_RANGE: (f64, f64) = (0.8, 1.2);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticMetrics {
    pub experiment: String,
    pub config_hash: String,
    pub seed: u64,
    pub epochs: usize,
    /// Fraction of binary `W` entries equal to the ground truth.
    pub w_match_fraction: f64,
    /// Fraction of outputs whose `p` meets its half's target (≥ 5 for max, [0.8, 1.2] for mean).
    pub p_pass_fraction: f64,
    /// Mean squared error of the frozen evaluation-mode layer on held-out tasks.
    pub heldout_mse: f64,
    pub p_max_half_mean: f64,
    pub p_avg_half_mean: f64,
    pub final_mean_val_loss: Option<f64>,
    pub empty_rows: Vec<usize>,
    pub assumptions: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct SyntheticOutcome {
    pub shape_logits: Array,
    pub exponent_logits: Array,
    /// Evaluation-mode `W`: `I×J` (1D) or windows × window area (2D).
    pub binary_w: Array,
    pub p: Array,
    pub geometry: Option<WindowGeometry>,
    pub log: Vec<EpochRecord>,
    pub metrics: SyntheticMetrics,
}

fn spec_for(cfg: &ExperimentConfig, tasks: usize, seed: u64) -> SyntheticTaskSpec {
    let kind = match cfg.kind {
        ExperimentKind::Synthetic2d => SyntheticKind::TwoD { height: cfg.height, width: cfg.width },
        _ => SyntheticKind::OneD { inputs: cfg.input_len },
    };
    SyntheticTaskSpec { kind, tasks, sets_per_task: cfg.sets_per_task, train_per_task: cfg.train_per_task, seed }
}

/// Seed of the held-out task set, derived from the run seed.
pub fn heldout_seed(seed: u64) -> u64 {
    seed ^ 0x9e37_79b9_7f4a_7c15
}

enum Layer {
    Dense,
    Windows(WindowGeometry),
}

impl Layer {
    fn forward(&self, x: &Tensor, w: &Tensor, p: &Tensor, cfg: &PoolConfig) -> crate::pooling::Result<Tensor> {
        match self {
            Layer::Dense => pool_dense(x, w, p, cfg),
            Layer::Windows(g) => pool_windows(x, g, w, p, cfg),
        }
    }
}

/// Meta-trains the pooling layer on a synthetic task set and scores the result.
pub fn run_synthetic(cfg: &ExperimentConfig, on_epoch: impl FnMut(&EpochRecord)) -> Result<SyntheticOutcome> {
    if cfg.kind == ExperimentKind::Character {
        return Err(ExperimentError::Invalid("run_synthetic needs a synthetic experiment kind".into()));
    }
    cfg.validate()?;
    let tasks = gen_synthetic_tasks(&spec_for(cfg, cfg.tasks, cfg.seed))?;
    let heldout = gen_synthetic_tasks(&spec_for(cfg, cfg.heldout_tasks, heldout_seed(cfg.seed)))?;

    let (layer, init_w, init_p) = match cfg.kind {
        ExperimentKind::Synthetic2d => {
            let g = WindowGeometry::for_input(cfg.height, cfg.width, (2, 2), (2, 2))?;
            let p = init_windowed_params(g, None, cfg.temperature, cfg.seed)?;
            (Layer::Windows(g), p.shape_logits, p.exponent_logits)
        }
        _ => {
            let p = init_pooling_params(cfg.input_len / 2, cfg.input_len, cfg.temperature, cfg.seed)?;
            (Layer::Dense, p.shape_logits.into_dyn(), p.exponent_logits.into_dyn())
        }
    };
    let train_cfg = PoolConfig::new(cfg.temperature, Mode::MetaTraining).with_normalization(cfg.normalization);
    let loss = |meta: &[Tensor], _: &[Tensor], d: &Regression| -> crate::meta::Result<Tensor> {
        let y = layer.forward(&Tensor::constant(d.x.clone()), &meta[0], &meta[1], &train_cfg)?;
        Ok(mse_loss(&y, &Tensor::constant(d.y.clone()))?)
    };
    let meta_cfg = MetaConfig { target: InnerTarget::MetaParams, ..cfg.meta_config() };
    let t = cfg.temperature;
    let (meta, log) = meta_train(
        &tasks,
        vec![init_w, init_p],
        &[],
        &loss,
        &meta_cfg,
        |m| pooling_summary(&m[0], &m[1], t),
        on_epoch,
    )?;
    let (shape_logits, exponent_logits) = (meta[0].clone(), meta[1].clone());

    let eval_cfg = train_cfg.with_mode(Mode::Evaluation);
    let binary_w = transform_shape(&Tensor::constant(shape_logits.clone()), t, Mode::Evaluation)?.value().clone();
    let p = exponent_logits.mapv(f64::exp);
    let heldout_mse = heldout_error(&layer, &heldout, &shape_logits, &exponent_logits, &eval_cfg)?;

    let (truth, max_outputs) = match &layer {
        Layer::Dense => (ground_truth_w_1d(cfg.input_len).into_dyn(), cfg.input_len / 4),
        Layer::Windows(g) => {
            let rows = g.positions();
            let truth = Array2::from_shape_fn((rows, 4), |(_, j)| GROUND_TRUTH_WINDOW_2D[j]).into_dyn();
            // Windows in the top half of the output rows are max-pooled.
            (truth, (g.grid.0 / 2) * g.grid.1)
        }
    };
    let matches = binary_w.iter().zip(truth.iter()).filter(|(a, b)| a == b).count();
    let w_match_fraction = matches as f64 / truth.len() as f64;
    let pv: Vec<f64> = p.iter().copied().collect();
    let pass = pv
        .iter()
        .enumerate()
        .filter(|&(k, &v)| if k < max_outputs { v >= P_MAX_THRESHOLD } else { (P_AVG_RANGE.0..=P_AVG_RANGE.1).contains(&v) })
        .count();
    let mean = |s: &[f64]| if s.is_empty() { f64::NAN } else { s.iter().sum::<f64>() / s.len() as f64 };
    let binary2: Array2<f64> = binary_w.clone().into_dimensionality().map_err(|e| ExperimentError::Invalid(e.to_string()))?;

    let mut assumptions = vec![format!("normalization = {:?}", cfg.normalization)];
    if cfg.kind == ExperimentKind::Synthetic2d {
        assumptions.push("2D max/mean split: top half of output rows max, bottom half mean".into());
        assumptions.push("2D layer: 2x2 windows, stride 2, independent W and p per window".into());
    }
    let metrics = SyntheticMetrics {
        experiment: cfg.kind.name().into(),
        config_hash: cfg.hash(),
        seed: cfg.seed,
        epochs: cfg.epochs,
        w_match_fraction,
        p_pass_fraction: pass as f64 / pv.len() as f64,
        heldout_mse,
        p_max_half_mean: mean(&pv[..max_outputs]),
        p_avg_half_mean: mean(&pv[max_outputs..]),
        final_mean_val_loss: log.last().map(|r| r.mean_val_loss),
        empty_rows: empty_rows(&binary2),
        assumptions,
    };
    let geometry = match layer {
        Layer::Windows(g) => Some(g),
        Layer::Dense => None,
    };
    Ok(SyntheticOutcome { shape_logits, exponent_logits, binary_w, p, geometry, log, metrics })
}

fn heldout_error(
    layer: &Layer,
    tasks: &TaskSet<Regression>,
    w: &Array,
    p: &Array,
    cfg: &PoolConfig,
) -> Result<f64> {
    let (w, p) = (Tensor::constant(w.clone()), Tensor::constant(p.clone()));
    let mut total = 0.0;
    for t in &tasks.tasks {
        let y = layer.forward(&Tensor::constant(t.val.x.clone()), &w, &p, cfg)?;
        total += mse_loss(&y, &Tensor::constant(t.val.y.clone()))?.item();
    }
    Ok(total / tasks.len() as f64)
}

/// `W` laid out spatially: each window's row placed at its position.
pub fn window_image(binary_w: &Array, g: &WindowGeometry) -> Array {
    let (kh, kw) = g.window;
    let (gh, gw) = g.grid;
    let mut img = Array::zeros(IxDyn(&[gh * kh, gw * kw]));
    for (k, row) in binary_w.axis_iter(Axis(0)).enumerate() {
        let (r, c) = (k / gw, k % gw);
        for (j, &v) in row.iter().enumerate() {
            img[[r * kh + j / kw, c * kw + j % kw]] = v;
        }
    }
    img
}

/// Writes checkpoint, `W.csv`, `p.csv`, heatmaps, `log.jsonl` and `metrics.json` under `out`.
pub fn write_synthetic_artifacts(cfg: &ExperimentConfig, outcome: &SyntheticOutcome, out: &Path) -> Result<()> {
    save_checkpoint(
        &out.join("checkpoint"),
        cfg.kind.name(),
        cfg.seed,
        &cfg.hash(),
        &[("pool.shape_logits", &outcome.shape_logits), ("pool.exponent_logits", &outcome.exponent_logits)],
        outcome.metrics.assumptions.clone(),
    )?;
    write_csv(&out.join("W.csv"), &outcome.binary_w)?;
    write_csv(&out.join("p.csv"), &outcome.p)?;
    match &outcome.geometry {
        None => {
            write_pgm(&out.join("W.pgm"), &outcome.binary_w)?;
            write_pgm(&out.join("p.pgm"), &outcome.p)?;
        }
        Some(g) => {
            write_pgm(&out.join("W.pgm"), &window_image(&outcome.binary_w, g))?;
            let pmap = outcome.p.clone().into_shape_with_order(IxDyn(&[g.grid.0, g.grid.1])).unwrap();
            write_pgm(&out.join("p.pgm"), &pmap)?;
        }
    }
    write_json_lines(&out.join("log.jsonl"), &outcome.log)?;
    write_json(&out.join("metrics.json"), &outcome.metrics)?;
    super::artifacts::write_atomic(&out.join("config.txt"), cfg.canonical().as_bytes())
}
