//! Few-shot character recognition with a conv → BN → ReLU → pool → linear
//! classifier.
//!
//! Stages, each usable on its own from the CLI:
//!
//! 1. pooling meta-learning with a fixed random θ (inner updates discarded);
//! 2. MAML initialization of θ with the pooling layer frozen, per pooling kind;
//! 3. adaptation and evaluation on held-out episodes;
//! 4. re-evaluation of the adapted weights on salt-and-pepper corrupted
//!    validation images.

use std::path::{Path, PathBuf};

use ndarray::{concatenate, Array1, Axis, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::artifacts::{save_checkpoint, write_atomic, write_csv, write_json, write_json_lines, write_pgm, Checkpoint};
use super::synthetic::window_image;
use super::{DatasetSource, ExperimentConfig, ExperimentError, ExperimentKind, PoolingKind, Result};
use crate::data::{
    add_salt_pepper, augment_rotations, generate_glyphs, load_character_dataset, split_classes, ClassImageStore,
    EpisodeSplit, GlyphSpec,
};
use crate::meta::{
    adapt, evaluate, frozen, maml_init, meta_train_pooling, pooling_summary, Adapted, EpochRecord, TaskSet,
};
use crate::nn::{ConvNetSpec, PoolLayer, RunningStats, THETA_NAMES};
use crate::pooling::{init_windowed_params, Mode, WindowedPoolingParams};
use crate::tensor::Array;

const META_TASK_SALT: u64 = 1;
const EVAL_EPISODE_SALT: u64 = 2;
const THETA_SALT: u64 = 3;
const NOISE_SALT: u64 = 4;
const GLYPH_SALT: u64 = 5;

/// Independent stream seed for one purpose of a run.
pub fn sub_seed(seed: u64, salt: u64) -> u64 {
    ChaCha8Rng::seed_from_u64(seed ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15)).gen()
}

/// Meta-train (possibly rotation-augmented) and held-out class stores.
#[derive(Debug, Clone)]
pub struct CharacterData {
    pub meta_train: ClassImageStore,
    pub heldout: ClassImageStore,
}

fn require_character(cfg: &ExperimentConfig) -> Result<()> {
    if cfg.kind != ExperimentKind::Character {
        return Err(ExperimentError::Invalid(format!("expected a character config, got kind {}", cfg.kind.name())));
    }
    cfg.validate()
}

pub fn load_data(cfg: &ExperimentConfig) -> Result<CharacterData> {
    require_character(cfg)?;
    let min = cfg.shot + cfg.queries.max(cfg.meta_queries);
    let store = match &cfg.dataset {
        DatasetSource::Bundled => generate_glyphs(&GlyphSpec {
            classes: cfg.glyph_classes,
            instances: cfg.glyph_instances,
            size: cfg.height,
            seed: sub_seed(cfg.seed, GLYPH_SALT),
        })?,
        DatasetSource::Directory(root) => {
            if !root.is_dir() {
                return Err(ExperimentError::Invalid(format!("dataset root {} does not exist", root.display())));
            }
            load_character_dataset(root, cfg.height, cfg.width, min)?
        }
    };
    if store.height != cfg.height || store.width != cfg.width {
        return Err(ExperimentError::Invalid(format!(
            "images are {}×{}, config expects {}×{}",
            store.height, store.width, cfg.height, cfg.width
        )));
    }
    if cfg.meta_train_classes >= store.len() {
        return Err(ExperimentError::Invalid(format!(
            "meta_train_classes {} leaves no held-out classes out of {}",
            cfg.meta_train_classes,
            store.len()
        )));
    }
    let (meta, heldout) = split_classes(&store, cfg.meta_train_classes, cfg.seed)?;
    let meta_train = if cfg.augment { augment_rotations(&meta)? } else { meta };
    Ok(CharacterData { meta_train, heldout })
}

pub fn net_spec(cfg: &ExperimentConfig) -> ConvNetSpec {
    ConvNetSpec { in_channels: 1, filters: cfg.filters, height: cfg.height, width: cfg.width, classes: cfg.way }
}

/// Episodes drawn from the meta-train classes.
pub fn meta_tasks<'a>(cfg: &ExperimentConfig, data: &'a CharacterData) -> Result<TaskSet<EpisodeSplit<'a>>> {
    let seed = sub_seed(cfg.seed, META_TASK_SALT);
    Ok(crate::data::sample_episodes(&data.meta_train, cfg.way, cfg.shot, cfg.meta_queries, cfg.meta_tasks, seed)?)
}

/// The evaluation episodes, drawn from the held-out classes.
pub fn eval_episodes<'a>(cfg: &ExperimentConfig, data: &'a CharacterData) -> Result<TaskSet<EpisodeSplit<'a>>> {
    let seed = sub_seed(cfg.seed, EVAL_EPISODE_SALT);
    Ok(crate::data::sample_episodes(&data.heldout, cfg.way, cfg.shot, cfg.queries, cfg.episodes, seed)?)
}

/// Random θ used for pooling meta-learning and as the MAML starting point.
pub fn initial_theta(cfg: &ExperimentConfig) -> Vec<Array> {
    net_spec(cfg).init_theta(sub_seed(cfg.seed, THETA_SALT))
}

pub fn initial_pooling(cfg: &ExperimentConfig) -> Result<WindowedPoolingParams> {
    let geometry = net_spec(cfg).pool_geometry()?;
    let channels = if cfg.channel_sharing { None } else { Some(cfg.filters) };
    let mut p = init_windowed_params(geometry, channels, cfg.temperature, cfg.seed)?;
    p.config = p.config.with_normalization(cfg.normalization);
    Ok(p)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolingMetrics {
    pub experiment: String,
    pub config_hash: String,
    pub seed: u64,
    pub epochs: usize,
    pub p_min: f64,
    pub p_max: f64,
    pub p_mean: f64,
    pub w_saturation_fraction: f64,
    /// Fraction of binary `W` entries that are 1.
    pub w_selected_fraction: f64,
    /// Windows (per channel when not shared) with no selected entry.
    pub empty_windows: usize,
    pub final_mean_val_loss: Option<f64>,
    pub assumptions: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct PoolingStage {
    pub pool: WindowedPoolingParams,
    pub theta: Vec<Array>,
    pub log: Vec<EpochRecord>,
}

pub fn assumptions(cfg: &ExperimentConfig) -> Vec<String> {
    vec![
        format!("images area-resized to {}×{}, polarity inverted", cfg.height, cfg.width),
        format!("normalization = {:?}", cfg.normalization),
        format!("rotation augmentation of meta-train classes = {}", cfg.augment),
        format!("adaptation steps = {}", cfg.adapt_steps),
        format!("batch norm at evaluation = {:?}", cfg.bn_eval),
    ]
}

pub fn train_pooling(
    cfg: &ExperimentConfig,
    data: &CharacterData,
    on_epoch: impl FnMut(&EpochRecord),
) -> Result<PoolingStage> {
    require_character(cfg)?;
    let net = net_spec(cfg);
    let tasks = meta_tasks(cfg, data)?;
    let theta = initial_theta(cfg);
    let (pool, log) = meta_train_pooling(&net, &tasks, &initial_pooling(cfg)?, &theta, &cfg.meta_config(), on_epoch)?;
    Ok(PoolingStage { pool, theta, log })
}

/// Binary `W` as rows of window entries: `(P, J)` or `(C·P, J)`.
fn binary_rows(pool: &WindowedPoolingParams) -> Result<Array> {
    let mut p = pool.clone();
    p.config.mode = Mode::Evaluation;
    let w = p.shape_matrix()?;
    let j = pool.geometry.area();
    let n = w.len() / j;
    Ok(w.into_shape_with_order(IxDyn(&[n, j])).expect("contiguous"))
}

pub fn pooling_metrics(cfg: &ExperimentConfig, stage: &PoolingStage) -> Result<PoolingMetrics> {
    let s = pooling_summary(&stage.pool.shape_logits, &stage.pool.exponent_logits, cfg.temperature);
    let w = binary_rows(&stage.pool)?;
    let p = stage.pool.exponents();
    Ok(PoolingMetrics {
        experiment: cfg.kind.name().into(),
        config_hash: cfg.hash(),
        seed: cfg.seed,
        epochs: cfg.epochs,
        p_min: s.p_min,
        p_max: s.p_max,
        p_mean: p.mean().unwrap_or(f64::NAN),
        w_saturation_fraction: s.w_saturation_fraction,
        w_selected_fraction: w.mean().unwrap_or(f64::NAN),
        empty_windows: w.outer_iter().filter(|r| r.iter().all(|&v| v == 0.0)).count(),
        final_mean_val_loss: stage.log.last().map(|r| r.mean_val_loss),
        assumptions: assumptions(cfg),
    })
}

/// Checkpoint, `W.csv`, `p.csv`, heatmaps, log and metrics of stage 1.
pub fn write_pooling_stage(cfg: &ExperimentConfig, stage: &PoolingStage, out: &Path) -> Result<()> {
    let mut tensors: Vec<(String, &Array)> = vec![
        ("pool.shape_logits".into(), &stage.pool.shape_logits),
        ("pool.exponent_logits".into(), &stage.pool.exponent_logits),
    ];
    tensors.extend(THETA_NAMES.iter().zip(&stage.theta).map(|(n, a)| (format!("theta.{n}"), a)));
    let refs: Vec<(&str, &Array)> = tensors.iter().map(|(n, a)| (n.as_str(), *a)).collect();
    save_checkpoint(&out.join("checkpoint"), cfg.kind.name(), cfg.seed, &cfg.hash(), &refs, assumptions(cfg))?;

    let w = binary_rows(&stage.pool)?;
    let p = stage.pool.exponents();
    write_csv(&out.join("W.csv"), &w)?;
    write_csv(&out.join("p.csv"), &p)?;
    let g = &stage.pool.geometry;
    let per_channel = w.len() / (g.positions() * g.area());
    let images: Vec<Array> = (0..per_channel)
        .map(|c| {
            let rows = w.slice_axis(Axis(0), (c * g.positions()..(c + 1) * g.positions()).into()).to_owned();
            window_image(&rows, g)
        })
        .collect();
    let views: Vec<_> = images.iter().map(|a| a.view()).collect();
    write_pgm(&out.join("W.pgm"), &concatenate(Axis(0), &views).expect("equal widths"))?;
    let pmap = p.into_shape_with_order(IxDyn(&[per_channel * g.grid.0, g.grid.1])).expect("contiguous");
    write_pgm(&out.join("p.pgm"), &pmap)?;
    write_json_lines(&out.join("log.jsonl"), &stage.log)?;
    write_json(&out.join("metrics.json"), &pooling_metrics(cfg, stage)?)?;
    write_atomic(&out.join("config.txt"), cfg.canonical().as_bytes())
}

/// Reads stage-1 parameters, checking them against the config's network.
pub fn load_pooling_stage(cfg: &ExperimentConfig, dir: &Path) -> Result<(WindowedPoolingParams, Vec<Array>)> {
    let ck = Checkpoint::open(dir)?;
    if ck.manifest.kind != ExperimentKind::Character.name() {
        return Err(ExperimentError::Checkpoint(format!(
            "{} holds a {} checkpoint, expected character",
            dir.display(),
            ck.manifest.kind
        )));
    }
    let mut pool = initial_pooling(cfg)?;
    let w = ck.tensor("pool.shape_logits")?;
    let p = ck.tensor("pool.exponent_logits")?;
    if w.shape() != pool.shape_logits.shape() || p.shape() != pool.exponent_logits.shape() {
        return Err(ExperimentError::Checkpoint(format!(
            "pooling shapes {:?}/{:?} do not fit the configured network ({:?}/{:?})",
            w.shape(),
            p.shape(),
            pool.shape_logits.shape(),
            pool.exponent_logits.shape()
        )));
    }
    pool.shape_logits = w;
    pool.exponent_logits = p;
    let theta = THETA_NAMES.iter().map(|n| ck.tensor(&format!("theta.{n}"))).collect::<Result<Vec<_>>>()?;
    net_spec(cfg)
        .check_theta(&theta)
        .map_err(|e| ExperimentError::Checkpoint(format!("{}: {e}", dir.display())))?;
    Ok((pool, theta))
}

/// Frozen (evaluation-mode) pooling layer of the requested kind.
pub fn pool_layer(kind: PoolingKind, learned: Option<&WindowedPoolingParams>) -> Result<PoolLayer> {
    Ok(match kind {
        PoolingKind::Meta => {
            let p = learned.ok_or_else(|| ExperimentError::Invalid("meta pooling needs learned parameters".into()))?;
            frozen(&PoolLayer::Meta(p.clone()))?
        }
        PoolingKind::Max => PoolLayer::Max,
        PoolingKind::Avg => PoolLayer::Avg,
    })
}

/// MAML-initialized θ for one pooling layer.
pub fn train_maml(
    cfg: &ExperimentConfig,
    data: &CharacterData,
    layer: &PoolLayer,
    theta: Vec<Array>,
    on_epoch: impl FnMut(&EpochRecord),
) -> Result<(Vec<Array>, Vec<EpochRecord>)> {
    let tasks = meta_tasks(cfg, data)?;
    let mcfg = crate::meta::MetaConfig { epochs: cfg.maml_epochs, batch: cfg.maml_batch, ..cfg.meta_config() };
    Ok(maml_init(&net_spec(cfg), &tasks, layer, theta, &mcfg, on_epoch)?)
}

#[derive(Debug, Clone)]
pub struct EvalStage {
    pub pooling: PoolingKind,
    pub accuracies: Vec<f64>,
    pub adapted: Vec<Adapted>,
}

/// Mean and sample standard deviation.
pub fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() > 1 { values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (mean, var.sqrt())
}

impl EvalStage {
    pub fn summary(&self) -> (f64, f64) {
        mean_sd(&self.accuracies)
    }
}

/// Adapts θ on every evaluation episode and scores its validation split.
pub fn evaluate_episodes(
    cfg: &ExperimentConfig,
    data: &CharacterData,
    pooling: PoolingKind,
    layer: &PoolLayer,
    theta_init: &[Array],
) -> Result<EvalStage> {
    let net = net_spec(cfg);
    let episodes = eval_episodes(cfg, data)?;
    let mut accuracies = Vec::with_capacity(episodes.len());
    let mut adapted = Vec::with_capacity(episodes.len());
    for task in &episodes.tasks {
        let a = adapt(&net, layer, theta_init, &task.train.materialize(), cfg.adapt_steps, cfg.adapt_lr)?;
        accuracies.push(evaluate(&net, layer, &a, &task.val.materialize(), cfg.bn_eval)?);
        adapted.push(a);
    }
    Ok(EvalStage { pooling, accuracies, adapted })
}

pub fn adapted_dir(out: &Path, pooling: PoolingKind) -> PathBuf {
    out.join(format!("adapted_{}", pooling.name()))
}

pub fn maml_dir(out: &Path, pooling: PoolingKind) -> PathBuf {
    out.join(format!("maml_{}", pooling.name()))
}

pub fn write_maml(cfg: &ExperimentConfig, pooling: PoolingKind, theta: &[Array], log: &[EpochRecord], out: &Path) -> Result<()> {
    let dir = maml_dir(out, pooling);
    let names: Vec<String> = THETA_NAMES.iter().map(|n| format!("theta.{n}")).collect();
    let refs: Vec<(&str, &Array)> = names.iter().map(String::as_str).zip(theta).collect();
    save_checkpoint(&dir, cfg.kind.name(), cfg.seed, &cfg.hash(), &refs, vec![format!("pooling = {}", pooling.name())])?;
    write_json_lines(&dir.join("log.jsonl"), log)
}

pub fn load_maml(cfg: &ExperimentConfig, dir: &Path) -> Result<Vec<Array>> {
    let ck = Checkpoint::open(dir)?;
    let theta = THETA_NAMES.iter().map(|n| ck.tensor(&format!("theta.{n}"))).collect::<Result<Vec<_>>>()?;
    net_spec(cfg)
        .check_theta(&theta)
        .map_err(|e| ExperimentError::Checkpoint(format!("{}: {e}", dir.display())))?;
    Ok(theta)
}

/// `accuracy_<kind>.csv` (one row per episode, then `mean` and `sd` rows) and
/// the adapted weights of every episode.
pub fn write_eval_stage(cfg: &ExperimentConfig, stage: &EvalStage, out: &Path) -> Result<()> {
    let mut csv = String::from("episode,accuracy\n");
    for (i, a) in stage.accuracies.iter().enumerate() {
        csv.push_str(&format!("{i},{a}\n"));
    }
    let (mean, sd) = stage.summary();
    csv.push_str(&format!("mean,{mean}\nsd,{sd}\n"));
    write_atomic(&out.join(format!("accuracy_{}.csv", stage.pooling.name())), csv.as_bytes())?;

    let mut owned: Vec<(String, Array)> = Vec::new();
    for (e, a) in stage.adapted.iter().enumerate() {
        for (n, t) in THETA_NAMES.iter().zip(&a.theta) {
            owned.push((format!("episode{e:04}.{n}"), t.clone()));
        }
        owned.push((format!("episode{e:04}.bn.running_mean"), a.stats.mean.clone().into_dyn()));
        owned.push((format!("episode{e:04}.bn.running_var"), a.stats.var.clone().into_dyn()));
    }
    let refs: Vec<(&str, &Array)> = owned.iter().map(|(n, a)| (n.as_str(), a)).collect();
    save_checkpoint(
        &adapted_dir(out, stage.pooling),
        cfg.kind.name(),
        cfg.seed,
        &cfg.hash(),
        &refs,
        vec![format!("pooling = {}", stage.pooling.name()), format!("episodes = {}", stage.adapted.len())],
    )
}

/// Adapted weights written by [`write_eval_stage`].
pub fn load_adapted(cfg: &ExperimentConfig, out: &Path, pooling: PoolingKind) -> Result<Vec<Adapted>> {
    let dir = adapted_dir(out, pooling);
    if !dir.join("manifest.json").is_file() {
        return Err(ExperimentError::MissingAdapted(dir));
    }
    let ck = Checkpoint::open(&dir)?;
    let net = net_spec(cfg);
    let mut adapted = Vec::with_capacity(cfg.episodes);
    for e in 0..cfg.episodes {
        let prefix = format!("episode{e:04}");
        if !ck.has(&format!("{prefix}.{}", THETA_NAMES[0])) {
            return Err(ExperimentError::Checkpoint(format!(
                "{} has no weights for episode {e} of {}",
                dir.display(),
                cfg.episodes
            )));
        }
        let theta = THETA_NAMES.iter().map(|n| ck.tensor(&format!("{prefix}.{n}"))).collect::<Result<Vec<_>>>()?;
        net.check_theta(&theta).map_err(|err| ExperimentError::Checkpoint(format!("{}: {err}", dir.display())))?;
        let mut stats = RunningStats::new(cfg.filters);
        stats.mean = to_1d(ck.tensor(&format!("{prefix}.bn.running_mean"))?);
        stats.var = to_1d(ck.tensor(&format!("{prefix}.bn.running_var"))?);
        adapted.push(Adapted { theta, stats });
    }
    Ok(adapted)
}

fn to_1d(a: Array) -> Array1<f64> {
    a.into_iter().collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseRow {
    pub pooling: PoolingKind,
    pub ratio: f64,
    pub mean_accuracy: f64,
    pub sd: f64,
}

/// Ratio 0 (sanity row) followed by the configured ratios.
pub fn noise_ratios(cfg: &ExperimentConfig) -> Vec<f64> {
    std::iter::once(0.0).chain(cfg.noise_ratios.iter().copied().filter(|&r| r != 0.0)).collect()
}

/// Accuracy of the stored adapted weights on corrupted validation splits.
/// The corruption depends on seed, episode and ratio only, so every pooling
/// kind sees identical images.
pub fn noise_curve(
    cfg: &ExperimentConfig,
    data: &CharacterData,
    pooling: PoolingKind,
    layer: &PoolLayer,
    adapted: &[Adapted],
) -> Result<Vec<NoiseRow>> {
    let net = net_spec(cfg);
    let episodes = eval_episodes(cfg, data)?;
    if adapted.len() != episodes.len() {
        return Err(ExperimentError::Checkpoint(format!(
            "{} adapted weight sets for {} episodes",
            adapted.len(),
            episodes.len()
        )));
    }
    let base = sub_seed(cfg.seed, NOISE_SALT);
    let mut rows = Vec::new();
    for (r, ratio) in noise_ratios(cfg).into_iter().enumerate() {
        let mut acc = Vec::with_capacity(episodes.len());
        for (e, (task, a)) in episodes.tasks.iter().zip(adapted).enumerate() {
            let mut val = task.val.materialize();
            val.images = add_salt_pepper(&val.images, ratio, sub_seed(base, (r * 1_000_003 + e) as u64))?;
            acc.push(evaluate(&net, layer, a, &val, cfg.bn_eval)?);
        }
        let (mean_accuracy, sd) = mean_sd(&acc);
        rows.push(NoiseRow { pooling, ratio, mean_accuracy, sd });
    }
    Ok(rows)
}

pub fn write_noise(rows: &[NoiseRow], path: &Path) -> Result<()> {
    let mut csv = String::from("pooling,ratio,mean_accuracy,sd\n");
    for r in rows {
        csv.push_str(&format!("{},{},{},{}\n", r.pooling.name(), r.ratio, r.mean_accuracy, r.sd));
    }
    write_atomic(path, csv.as_bytes())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KindSummary {
    pub pooling: PoolingKind,
    pub mean_accuracy: f64,
    pub sd: f64,
}

#[derive(Debug, Clone)]
pub struct CharacterOutcome {
    pub pooling: PoolingStage,
    pub evals: Vec<EvalStage>,
    pub noise: Vec<NoiseRow>,
}

impl CharacterOutcome {
    pub fn eval(&self, kind: PoolingKind) -> Option<&EvalStage> {
        self.evals.iter().find(|e| e.pooling == kind)
    }

    pub fn noise_at(&self, kind: PoolingKind, ratio: f64) -> Option<&NoiseRow> {
        self.noise.iter().find(|r| r.pooling == kind && r.ratio == ratio)
    }
}

/// Progress notices from [`run_character`].
#[derive(Debug, Clone, Copy)]
pub enum Progress<'a> {
    Pooling(&'a EpochRecord),
    Maml(PoolingKind, &'a EpochRecord),
    Evaluated(PoolingKind, f64),
}

/// All stages for every pooling kind; artifacts go to `out` when given.
pub fn run_character(
    cfg: &ExperimentConfig,
    out: Option<&Path>,
    mut progress: impl FnMut(Progress<'_>),
) -> Result<CharacterOutcome> {
    let data = load_data(cfg)?;
    let pooling = train_pooling(cfg, &data, |r| progress(Progress::Pooling(r)))?;
    if let Some(out) = out {
        write_pooling_stage(cfg, &pooling, out)?;
    }
    let mut evals = Vec::new();
    let mut noise = Vec::new();
    for kind in PoolingKind::ALL {
        let layer = pool_layer(kind, Some(&pooling.pool))?;
        let (theta, log) = train_maml(cfg, &data, &layer, pooling.theta.clone(), |r| progress(Progress::Maml(kind, r)))?;
        let stage = evaluate_episodes(cfg, &data, kind, &layer, &theta)?;
        progress(Progress::Evaluated(kind, stage.summary().0));
        noise.extend(noise_curve(cfg, &data, kind, &layer, &stage.adapted)?);
        if let Some(out) = out {
            write_maml(cfg, kind, &theta, &log, out)?;
            write_eval_stage(cfg, &stage, out)?;
        }
        evals.push(stage);
    }
    if let Some(out) = out {
        write_noise(&noise, &out.join("noise.csv"))?;
        let summary: Vec<KindSummary> = evals
            .iter()
            .map(|e| {
                let (mean_accuracy, sd) = e.summary();
                KindSummary { pooling: e.pooling, mean_accuracy, sd }
            })
            .collect();
        write_json(&out.join("summary.json"), &summary)?;
    }
    Ok(CharacterOutcome { pooling, evals, noise })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ExperimentConfig {
        ExperimentConfig::parse(
            "kind = character\nheight = 8\nwidth = 8\nfilters = 2\nglyph_classes = 10\nglyph_instances = 6\n\
             meta_train_classes = 6\nqueries = 3\nmeta_queries = 2\nmeta_tasks = 6\nbatch = 2\nepochs = 2\n\
             maml_epochs = 1\nmaml_batch = 2\nepisodes = 3\nadapt_steps = 2\nway = 3\n",
        )
        .unwrap()
    }

    #[test]
    fn data_split_is_disjoint_and_augmented() {
        let cfg = tiny();
        let d = load_data(&cfg).unwrap();
        assert_eq!(d.meta_train.len(), 24);
        assert_eq!(d.heldout.len(), 4);
        let held: Vec<&str> = d.heldout.names();
        assert!(d.meta_train.names().iter().all(|n| !held.iter().any(|h| n.starts_with(h))));
    }

    #[test]
    fn missing_dataset_root_names_the_path() {
        let mut cfg = tiny();
        cfg.dataset = DatasetSource::Directory(PathBuf::from("/no/such/glyphs"));
        let err = load_data(&cfg).unwrap_err().to_string();
        assert!(err.contains("/no/such/glyphs"), "{err}");
    }

    #[test]
    fn ratio_zero_reproduces_clean_accuracy_and_artifacts_round_trip() {
        let cfg = tiny();
        let data = load_data(&cfg).unwrap();
        let stage = train_pooling(&cfg, &data, |_| {}).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_pooling_stage(&cfg, &stage, dir.path()).unwrap();
        let (pool, theta) = load_pooling_stage(&cfg, &dir.path().join("checkpoint")).unwrap();
        assert_eq!(pool.shape_logits, stage.pool.shape_logits);
        assert_eq!(theta, stage.theta);

        let layer = pool_layer(PoolingKind::Meta, Some(&pool)).unwrap();
        let eval = evaluate_episodes(&cfg, &data, PoolingKind::Meta, &layer, &theta).unwrap();
        let rows = noise_curve(&cfg, &data, PoolingKind::Meta, &layer, &eval.adapted).unwrap();
        assert_eq!(rows.len(), 7);
        assert_eq!(rows[0].ratio, 0.0);
        assert_eq!(rows[0].mean_accuracy, eval.summary().0);

        assert!(matches!(load_adapted(&cfg, dir.path(), PoolingKind::Meta), Err(ExperimentError::MissingAdapted(_))));
        write_eval_stage(&cfg, &eval, dir.path()).unwrap();
        let back = load_adapted(&cfg, dir.path(), PoolingKind::Meta).unwrap();
        assert_eq!(back, eval.adapted);
        let csv = std::fs::read_to_string(dir.path().join("accuracy_meta.csv")).unwrap();
        assert_eq!(csv.lines().count(), 1 + 3 + 2);
    }

    #[test]
    fn mean_sd_matches_hand_values() {
        let (m, s) = mean_sd(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((s - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
    }
}
