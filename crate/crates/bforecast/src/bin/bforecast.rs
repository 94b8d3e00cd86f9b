//! Command line driver: dataset generation, training, whole-frame
//! prediction, boundary precision-recall evaluation, and trail rendering.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data or I/O
//! error, 3 numeric failure (non-finite values).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use bforecast::config::{Config, ConfigError};
use bforecast::data::{load_sequence, FrameSequence, T_IN};
use bforecast::eval::{default_thresholds, horizon_report, EvalError};
use bforecast::models::{Arch, Mode, ModelError, ModelSpec};
use bforecast::predict::{
    blind_frames, last_input_baseline, predict_recursive, predict_seq2seq, render_trail,
    write_comparison_ppm, PredictError, RolloutConfig,
};
use bforecast::sim::{generate_dataset, DatasetSpec, Manifest, SimError, WorldOptions};
use bforecast::train::{train, LoadedDataset, TrainError, TrainOptions};
use bforecast::{data, pgm, Model32};

#[derive(Parser)]
#[command(name = "bforecast", version, about = "Future boundary-frame extrapolation toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration file (INI-style; BF_<SECTION>_<KEY> env vars override).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; the resolved config is archived there.
    #[arg(long)]
    out: PathBuf,
    /// Overrides the seed configured for this command.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a billiard-world dataset from the [generate] section.
    Generate(Common),
    /// Train the [model] on the [train] dataset.
    Train(Common),
    /// Roll a trained model forward over one sequence.
    Predict {
        #[command(flatten)]
        common: Common,
        /// Trained weights (model.bfw).
        #[arg(long)]
        weights: PathBuf,
    },
    /// Boundary precision-recall over a dataset at the [eval] horizons.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        weights: Option<PathBuf>,
        /// Worker threads for per-sequence rollouts.
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
    /// Render long-rollout trail images for one sequence.
    Trails {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        weights: PathBuf,
    },
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Config(ConfigError),
    Sim(SimError),
    Train(TrainError),
    Model(ModelError),
    Predict(PredictError),
    Eval(EvalError),
    Data(data::DataError),
    Io(String, std::io::Error),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "{m}"),
            CliError::Config(e) => write!(f, "{e}"),
            CliError::Sim(e) => write!(f, "{e}"),
            CliError::Train(e) => write!(f, "{e}"),
            CliError::Model(e) => write!(f, "{e}"),
            CliError::Predict(e) => write!(f, "{e}"),
            CliError::Eval(e) => write!(f, "{e}"),
            CliError::Data(e) => write!(f, "{e}"),
            CliError::Io(p, e) => write!(f, "{p}: {e}"),
        }
    }
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Config(ConfigError::Io { .. }) => 2,
            CliError::Config(_) => 1,
            CliError::Train(TrainError::NonFinite { .. }) => 3,
            CliError::Predict(PredictError::NonFinite { .. }) => 3,
            _ => 2,
        }
    }
}

macro_rules! from_err {
    ($variant:ident, $ty:ty) => {
        impl From<$ty> for CliError {
            fn from(e: $ty) -> Self {
                CliError::$variant(e)
            }
        }
    };
}
from_err!(Config, ConfigError);
from_err!(Sim, SimError);
from_err!(Train, TrainError);
from_err!(Model, ModelError);
from_err!(Predict, PredictError);
from_err!(Eval, EvalError);
from_err!(Data, data::DataError);

type Result<T> = std::result::Result<T, CliError>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap prints help/version through this path too; keep its text
            // but normalize usage failures to exit code 1.
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Generate(c) => cmd_generate(&c),
        Command::Train(c) => cmd_train(&c),
        Command::Predict { common, weights } => cmd_predict(&common, &weights),
        Command::Eval { common, weights, workers } => cmd_eval(&common, weights.as_deref(), workers),
        Command::Trails { common, weights } => cmd_trails(&common, &weights),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("bforecast: {e}");
            ExitCode::from(e.code())
        }
    }
}

fn io_ctx(path: &Path, e: std::io::Error) -> CliError {
    CliError::Io(path.display().to_string(), e)
}

/// Load the config and archive its resolved form under `out`.
fn setup(common: &Common) -> Result<Config> {
    let cfg = Config::load(&common.config)?;
    std::fs::create_dir_all(&common.out).map_err(|e| io_ctx(&common.out, e))?;
    let archived = common.out.join("config_resolved.cfg");
    std::fs::write(&archived, cfg.to_text()).map_err(|e| io_ctx(&archived, e))?;
    Ok(cfg)
}

fn cmd_generate(common: &Common) -> Result<()> {
    let cfg = setup(common)?;
    let groups: Vec<(usize, usize)> = [
        (1, cfg.get_usize("generate", "single", 0)?),
        (2, cfg.get_usize("generate", "double", 0)?),
        (3, cfg.get_usize("generate", "triple", 0)?),
    ]
    .into_iter()
    .filter(|&(_, n)| n > 0)
    .collect();
    if groups.is_empty() {
        return Err(CliError::Usage("[generate] single/double/triple are all zero".into()));
    }
    let collision_min = cfg.get_u64("generate", "collision_min", 0)?;
    let collision_max = cfg.get_u64("generate", "collision_max", collision_min)?;
    let spec = DatasetSpec {
        groups,
        length_limit: cfg.get_usize("generate", "length_limit", 200)?,
        collision_budget: (collision_min > 0).then_some((collision_min, collision_max)),
        options: WorldOptions {
            near_wall_bias: cfg.get_f64("generate", "near_wall_bias", 0.0)?,
            exclude_zero_velocity: cfg.get_bool("generate", "exclude_zero_velocity", true)?,
        },
        min_length: cfg.get_usize("generate", "min_length", T_IN + 1)?,
        base_seed: common.seed.unwrap_or(cfg.get_u64("generate", "seed", 0)?),
    };
    let manifest = generate_dataset(&spec, &common.out)?;
    let frames: usize = manifest.sequences.iter().map(|e| e.length).sum();
    println!("generated {} sequences ({frames} frames) into {}", manifest.sequences.len(), common.out.display());
    Ok(())
}

fn model_spec(cfg: &Config) -> Result<ModelSpec> {
    let arch: Arch = cfg.require("model", "arch")?.parse()?;
    let mode: Mode = cfg.get("model", "mode").unwrap_or("recursive").parse()?;
    let context = cfg.get_bool("model", "context", false)?;
    let horizon = cfg.get_usize("model", "horizon", 1)?;
    let extent = if context { 96 } else { 32 };
    let spec = ModelSpec::new(arch, mode, context, extent, horizon)?;
    match cfg.get_usize("model", "hidden", 0)? {
        0 => Ok(spec),
        h => Ok(spec.with_hidden(h)?),
    }
}

fn cmd_train(common: &Common) -> Result<()> {
    let cfg = setup(common)?;
    let spec = model_spec(&cfg)?;
    let seed = common.seed.unwrap_or(cfg.get_u64("train", "seed", 0)?);
    let mut model = match cfg.get("train", "init_weights") {
        None => Model32::build(spec.clone(), seed)?,
        Some(path) => {
            let mut model = Model32::load(Path::new(path))?;
            // Recursive models reuse one step's parameters for every horizon,
            // so a horizon change is a valid warm start (multi-step fine-tuning).
            let compatible = model.spec == spec
                || (spec.mode == Mode::Recursive
                    && ModelSpec { horizon: spec.horizon, ..model.spec.clone() } == spec);
            if !compatible {
                return Err(CliError::Usage(format!(
                    "init_weights {path} was trained for a different model spec"
                )));
            }
            model.spec = spec.clone();
            model
        }
    };
    let dataset = LoadedDataset::load(Path::new(cfg.require("train", "dataset")?))?;
    let opts = TrainOptions {
        epochs: cfg.get_usize("train", "epochs", 20)?,
        batch: cfg.get_usize("train", "batch", 32)?,
        lr: cfg.get_f64("train", "lr", 1e-3)?,
        samples_per_epoch: cfg.get_usize("train", "samples_per_epoch", 0)?,
        static_keep: cfg.get_f64("train", "static_keep", 1.0)?,
        teacher_forcing: cfg.get_bool("train", "teacher_forcing", false)?,
        self_input_depth: cfg.get_usize("train", "self_input_depth", 0)?,
        val_fraction: cfg.get_f64("train", "val_fraction", 0.1)?,
        val_samples: cfg.get_usize("train", "val_samples", 0)?,
        seed,
        out_dir: Some(common.out.clone()),
    };
    let report = train(&mut model, &dataset, &opts)?;
    for s in &report.stats {
        match s.val_loss {
            Some(v) => println!("epoch {:>3}  train {:.6}  val {:.6}  {:.1}s", s.epoch, s.train_loss, v, s.seconds),
            None => println!("epoch {:>3}  train {:.6}  {:.1}s", s.epoch, s.train_loss, s.seconds),
        }
    }
    println!("weights written to {}", common.out.join("model.bfw").display());
    Ok(())
}

/// Roll `model` out `horizon` frames from the first T observed frames.
fn rollout(
    model: &Model32,
    observed: &[bforecast::sim::BoundaryFrame],
    horizon: usize,
    binarize_feedback: Option<f64>,
) -> Result<Vec<bforecast::sim::BoundaryFrame>> {
    match model.spec.mode {
        Mode::Recursive => {
            let rc = RolloutConfig { horizon, binarize_feedback };
            Ok(predict_recursive(model, observed, &rc)?)
        }
        Mode::Seq2Seq => {
            if horizon > model.spec.horizon {
                return Err(CliError::Usage(format!(
                    "horizon {horizon} exceeds the model's {} seq2seq horizons",
                    model.spec.horizon
                )));
            }
            let mut frames = predict_seq2seq(model, observed)?;
            frames.truncate(horizon);
            Ok(frames)
        }
    }
}

fn binarize_feedback(cfg: &Config, section: &str) -> Result<Option<f64>> {
    if cfg.get(section, "binarize_feedback").is_none() {
        return Ok(None);
    }
    Ok(Some(cfg.get_f64(section, "binarize_feedback", 0.5)?))
}

fn cmd_predict(common: &Common, weights: &Path) -> Result<()> {
    let cfg = setup(common)?;
    let model = Model32::load(weights)?;
    let seq = load_sequence(Path::new(cfg.require("predict", "sequence")?))?;
    let horizon = cfg.get_usize("predict", "horizon", 20)?;
    let preds = if cfg.get_bool("predict", "baseline", false)? {
        last_input_baseline(&seq.frames[..T_IN], horizon)?
    } else {
        rollout(&model, &seq.frames[..T_IN], horizon, binarize_feedback(&cfg, "predict")?)?
    };

    let out_seq = FrameSequence::new(
        seq.frames[..T_IN].iter().cloned().chain(preds.iter().cloned()).collect(),
        format!("{}_predicted", seq.source_id),
    )?;
    let pred_dir = common.out.join("predicted");
    data::save_sequence(&pred_dir, &out_seq)?;
    let trail = render_trail(&preds)?;
    pgm::write_pgm(&common.out.join("trail_pred.pgm"), &trail.to_gray())
        .map_err(PredictError::from)?;
    let mut compared = 0;
    for (k, pred) in preds.iter().enumerate() {
        if let Some(gt) = seq.frames.get(T_IN + k) {
            write_comparison_ppm(&common.out.join(format!("compare_{:04}.ppm", k + 1)), gt, pred)?;
            compared += 1;
        }
    }
    println!(
        "predicted {horizon} frames into {} ({compared} horizons compared against ground truth)",
        pred_dir.display()
    );
    Ok(())
}

fn cmd_eval(common: &Common, weights: Option<&Path>, workers: usize) -> Result<()> {
    let cfg = setup(common)?;
    let horizons = cfg.get_usize_list("eval", "horizons", &[1, 5, 20])?;
    let tolerance = cfg.get_usize("eval", "tolerance", 1)?;
    let baseline = cfg.get_bool("eval", "baseline", false)?;
    let blind = cfg.get_bool("eval", "blind", false)?;
    let mask_border = cfg.get_bool("eval", "mask_border", false)?;
    let feedback = binarize_feedback(&cfg, "eval")?;
    let max_h = *horizons.iter().max().ok_or_else(|| CliError::Usage("no horizons".into()))?;
    let model = match (weights, baseline) {
        (Some(w), false) => Some(Model32::load(w)?),
        (None, true) => None,
        (None, false) => return Err(CliError::Usage("eval needs --weights or baseline = true".into())),
        (Some(_), true) => return Err(CliError::Usage("baseline = true ignores --weights; drop one".into())),
    };

    let dataset_dir = PathBuf::from(cfg.require("eval", "dataset")?);
    let manifest = Manifest::load(&dataset_dir.join("manifest.json"))?;
    let usable: Vec<_> = manifest
        .sequences
        .iter()
        .filter(|e| e.length >= T_IN + max_h)
        .collect();
    if usable.is_empty() {
        return Err(CliError::Usage(format!("no sequence is {} frames long", T_IN + max_h)));
    }

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| CliError::Usage(format!("worker pool: {e}")))?;
    // (prediction, ground truth) frames per sequence, horizon-aligned.
    type SeqFrames = Vec<(bforecast::sim::BoundaryFrame, bforecast::sim::BoundaryFrame)>;
    let per_seq: Vec<Result<SeqFrames>> = pool.install(|| {
        use rayon::prelude::*;
        usable
            .par_iter()
            .map(|entry| -> Result<SeqFrames> {
                let seq = load_sequence(&dataset_dir.join(&entry.dir))?;
                let observed = if blind {
                    blind_frames(&seq.frames[..T_IN])
                } else {
                    seq.frames[..T_IN].to_vec()
                };
                let preds = match &model {
                    Some(m) => rollout(m, &observed, max_h, feedback)?,
                    None => last_input_baseline(&observed, max_h)?,
                };
                let mut pairs: SeqFrames = horizons
                    .iter()
                    .map(|&h| (preds[h - 1].clone(), seq.frames[T_IN - 1 + h].clone()))
                    .collect();
                if mask_border {
                    // Score ball boundaries only: the static table border
                    // would otherwise dominate every count.
                    for (p, g) in &mut pairs {
                        *p = blind_frames(std::slice::from_ref(p)).pop().unwrap();
                        *g = blind_frames(std::slice::from_ref(g)).pop().unwrap();
                    }
                }
                Ok(pairs)
            })
            .collect()
    });
    let per_seq: Vec<SeqFrames> = per_seq.into_iter().collect::<Result<_>>()?;

    let by_horizon: Vec<(usize, Vec<_>)> = horizons
        .iter()
        .enumerate()
        .map(|(i, &h)| (h, per_seq.iter().map(|s| (&s[i].0, &s[i].1)).collect()))
        .collect();
    let report = horizon_report(&by_horizon, &default_thresholds(), tolerance)?;
    print!("{}", report.to_text());
    report.save_json(&common.out.join("report.json"))?;
    let csv_path = common.out.join("report.csv");
    std::fs::write(&csv_path, report.to_csv()).map_err(|e| io_ctx(&csv_path, e))?;
    println!("report written to {}", common.out.display());
    Ok(())
}

fn cmd_trails(common: &Common, weights: &Path) -> Result<()> {
    let cfg = setup(common)?;
    let model = Model32::load(weights)?;
    let seq = load_sequence(Path::new(cfg.require("trails", "sequence")?))?;
    let horizon = cfg.get_usize("trails", "horizon", 100)?;
    let preds = rollout(&model, &seq.frames[..T_IN], horizon, binarize_feedback(&cfg, "trails")?)?;

    let pred_trail = render_trail(&preds)?;
    pgm::write_pgm(&common.out.join("trail_pred.pgm"), &pred_trail.to_gray())
        .map_err(PredictError::from)
        .map_err(CliError::from)?;
    let gt_end = (T_IN + horizon).min(seq.frames.len());
    if gt_end > T_IN {
        let gt_trail = render_trail(&seq.frames[T_IN..gt_end])?;
        pgm::write_pgm(&common.out.join("trail_gt.pgm"), &gt_trail.to_gray())
            .map_err(PredictError::from)
            .map_err(CliError::from)?;
        write_comparison_ppm(&common.out.join("trail_compare.ppm"), &gt_trail, &pred_trail)?;
    }
    println!("trails over {horizon} steps written to {}", common.out.display());
    Ok(())
}
