use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use metapool::experiment::character::{self, CharacterData};
use metapool::experiment::synthetic::{run_synthetic, write_synthetic_artifacts};
use metapool::experiment::verify::{self, Fault};
use metapool::experiment::{ExperimentConfig, ExperimentKind, PoolingKind};
use metapool::meta::EpochRecord;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Parser)]
#[command(name = "metapool", version, about = "Meta-learned parameterized Lp pooling")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// Experiment config (flat `key = value`).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the config output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Print the training log every N epochs (0 = never).
    #[arg(long, default_value_t = 100)]
    log_every: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum PoolingArg {
    Meta,
    Max,
    Avg,
}

impl From<PoolingArg> for PoolingKind {
    fn from(p: PoolingArg) -> Self {
        match p {
            PoolingArg::Meta => PoolingKind::Meta,
            PoolingArg::Max => PoolingKind::Max,
            PoolingArg::Avg => PoolingKind::Avg,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum FaultArg {
    FlipSign,
}

#[derive(Subcommand)]
enum Command {
    /// Meta-train the pooling layer; writes checkpoint/, W.csv, p.csv, heatmaps and log.jsonl.
    MetaTrain {
        #[command(flatten)]
        common: Common,
    },
    /// MAML-initialize θ with the pooling layer frozen; writes maml_<pooling>/.
    MamlInit {
        #[command(flatten)]
        common: Common,
        /// Pooling meta-training checkpoint directory (needed for --pooling meta).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "meta")]
        pooling: PoolingArg,
    },
    /// Adapt and evaluate on the held-out episodes; writes accuracy_<pooling>.csv and adapted_<pooling>/.
    AdaptEval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "meta")]
        pooling: PoolingArg,
    },
    /// Re-evaluate the adapted weights on salt-and-pepper corrupted images; writes noise.csv.
    EvalNoise {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// One pooling kind; all three when omitted.
        #[arg(long, value_enum)]
        pooling: Option<PoolingArg>,
    },
    /// Run the gradient, Lp-limit, second-order and synthetic-oracle checks.
    Verify {
        /// Test hook: corrupt the analytic gradients before checking.
        #[arg(long, value_enum)]
        inject_fault: Option<FaultArg>,
    },
}

fn load(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(&common.config).with_context(|| format!("loading {}", common.config.display()))?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.out = out.clone();
    }
    Ok(cfg)
}

fn logger(every: usize, label: &'static str) -> impl FnMut(&EpochRecord) {
    move |r| {
        if every > 0 && r.epoch % every == 0 {
            eprintln!(
                "{label} epoch {:>6}  train {:.5}  val {:.5}  p [{:.3}, {:.3}]  saturated {:.3}",
                r.epoch, r.mean_train_loss, r.mean_val_loss, r.p_min, r.p_max, r.w_saturation_fraction
            );
        }
    }
}

fn require_character(cfg: &ExperimentConfig, command: &str) -> Result<()> {
    if cfg.kind != ExperimentKind::Character {
        bail!("{command} needs a character config, got kind {}", cfg.kind.name());
    }
    Ok(())
}

/// Checkpoint directory: explicit flag, else `<out>/checkpoint`.
fn checkpoint_dir(cfg: &ExperimentConfig, flag: &Option<PathBuf>) -> PathBuf {
    flag.clone().unwrap_or_else(|| cfg.out.join("checkpoint"))
}

/// Learned pooling and starting θ. Baselines without a checkpoint start from the seeded θ.
fn pooling_and_theta(
    cfg: &ExperimentConfig,
    kind: PoolingKind,
    checkpoint: &Option<PathBuf>,
) -> Result<(metapool::nn::PoolLayer, Vec<metapool::tensor::Array>)> {
    let dir = checkpoint_dir(cfg, checkpoint);
    if kind != PoolingKind::Meta && checkpoint.is_none() && !dir.join("manifest.json").exists() {
        return Ok((character::pool_layer(kind, None)?, character::initial_theta(cfg)));
    }
    let (pool, theta) =
        character::load_pooling_stage(cfg, &dir).with_context(|| format!("reading checkpoint {}", dir.display()))?;
    Ok((character::pool_layer(kind, Some(&pool))?, theta))
}

fn maml(
    cfg: &ExperimentConfig,
    data: &CharacterData,
    kind: PoolingKind,
    checkpoint: &Option<PathBuf>,
    every: usize,
) -> Result<(metapool::nn::PoolLayer, Vec<metapool::tensor::Array>)> {
    let (layer, theta) = pooling_and_theta(cfg, kind, checkpoint)?;
    let (theta, log) = character::train_maml(cfg, data, &layer, theta, logger(every, "maml"))?;
    character::write_maml(cfg, kind, &theta, &log, &cfg.out)?;
    println!("wrote {}", character::maml_dir(&cfg.out, kind).display());
    Ok((layer, theta))
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::MetaTrain { common } => {
            let cfg = load(&common)?;
            match cfg.kind {
                ExperimentKind::Character => {
                    let data = character::load_data(&cfg)?;
                    let stage = character::train_pooling(&cfg, &data, logger(common.log_every, "meta"))?;
                    character::write_pooling_stage(&cfg, &stage, &cfg.out)?;
                    let m = character::pooling_metrics(&cfg, &stage)?;
                    println!(
                        "p in [{:.3}, {:.3}], selected fraction {:.3}, empty windows {}",
                        m.p_min, m.p_max, m.w_selected_fraction, m.empty_windows
                    );
                }
                _ => {
                    let outcome = run_synthetic(&cfg, logger(common.log_every, "meta"))?;
                    write_synthetic_artifacts(&cfg, &outcome, &cfg.out)?;
                    let m = &outcome.metrics;
                    println!(
                        "W match {:.4}, p pass {:.4}, held-out MSE {:.3e}",
                        m.w_match_fraction, m.p_pass_fraction, m.heldout_mse
                    );
                    if !m.empty_rows.is_empty() {
                        eprintln!("warning: empty W rows {:?} output 0", m.empty_rows);
                    }
                }
            }
            println!("wrote {}", cfg.out.display());
            Ok(true)
        }
        Command::MamlInit { common, checkpoint, pooling } => {
            let cfg = load(&common)?;
            require_character(&cfg, "maml-init")?;
            let data = character::load_data(&cfg)?;
            maml(&cfg, &data, pooling.into(), &checkpoint, common.log_every)?;
            Ok(true)
        }
        Command::AdaptEval { common, checkpoint, pooling } => {
            let cfg = load(&common)?;
            require_character(&cfg, "adapt-eval")?;
            let kind: PoolingKind = pooling.into();
            let data = character::load_data(&cfg)?;
            let maml_dir = character::maml_dir(&cfg.out, kind);
            let (layer, theta) = if maml_dir.join("manifest.json").exists() {
                let (layer, _) = pooling_and_theta(&cfg, kind, &checkpoint)?;
                let theta = character::load_maml(&cfg, &maml_dir)?;
                eprintln!("using MAML initialization from {}", maml_dir.display());
                (layer, theta)
            } else {
                maml(&cfg, &data, kind, &checkpoint, common.log_every)?
            };
            let stage = character::evaluate_episodes(&cfg, &data, kind, &layer, &theta)?;
            character::write_eval_stage(&cfg, &stage, &cfg.out)?;
            let (mean, sd) = stage.summary();
            println!("{} pooling: accuracy {:.2} ± {:.2} % over {} episodes", kind.name(), 100.0 * mean, 100.0 * sd, stage.accuracies.len());
            Ok(true)
        }
        Command::EvalNoise { common, checkpoint, pooling } => {
            let cfg = load(&common)?;
            require_character(&cfg, "eval-noise")?;
            let kinds: Vec<PoolingKind> = match pooling {
                Some(p) => vec![p.into()],
                None => PoolingKind::ALL.to_vec(),
            };
            let data = character::load_data(&cfg)?;
            let mut rows = Vec::new();
            for kind in kinds {
                let adapted = character::load_adapted(&cfg, &cfg.out, kind)?;
                let (layer, _) = pooling_and_theta(&cfg, kind, &checkpoint)?;
                rows.extend(character::noise_curve(&cfg, &data, kind, &layer, &adapted)?);
            }
            let path = cfg.out.join("noise.csv");
            character::write_noise(&rows, &path)?;
            for r in &rows {
                println!("{:<4} ratio {:.2}: {:.2} ± {:.2} %", r.pooling.name(), r.ratio, 100.0 * r.mean_accuracy, 100.0 * r.sd);
            }
            println!("wrote {}", path.display());
            Ok(true)
        }
        Command::Verify { inject_fault } => {
            let fault = inject_fault.map(|FaultArg::FlipSign| Fault::FlipSign);
            let reports = verify::run_all(fault);
            for r in &reports {
                println!("{}", r.verdict());
            }
            Ok(reports.iter().all(|r| r.passed))
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
