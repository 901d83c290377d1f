//! `diffgnss` command line. Exit codes: 0 success, 1 usage or input error
//! (bad flags, missing files, invalid configuration), 2 runtime failure.
//!
//! Configuration precedence: command-line flags, then the `--config` JSON
//! file, then built-in defaults.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use diffgnss_core::eval::{
    evaluate, export_report, position_compare, read_predictions, uncertainty_study, write_predictions, Corrections,
    PositionOptions,
};
use diffgnss_core::gnss::{
    augment, build_windows, load_observations, save_observations, FeatureWindow, NormStats, SceneLabel, Sequence,
};
use diffgnss_core::par;
use diffgnss_core::synth::{make_benchmark_suite, SuiteConfig};
use diffgnss_core::train::{normalized, predict_windows, train, Checkpoint, TrainConfig};

#[derive(Debug, Parser)]
#[command(name = "diffgnss", version, about = "Coarse-to-fine pseudorange error estimation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic benchmark suite as train/valid/test observation CSVs.
    Synth(SynthArgs),
    /// Build feature windows and normalization statistics from observation CSVs.
    Prepare(PrepareArgs),
    /// Train a model; writes checkpoint.dgns and metrics.csv.
    Train(TrainArgs),
    /// Predict per-satellite errors for every window of an observation CSV.
    Infer(InferArgs),
    /// Score predictions; writes metrics.csv, per_scene.csv, cdf.csv, traces.csv, summary.json.
    Evaluate(EvaluateArgs),
    /// Compare raw and corrected single-point positioning.
    Position(PositionArgs),
    /// Refined MAE and mean uncertainty for several DDIM evaluation counts.
    Study(StudyArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Suite seed.
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Suite configuration JSON (segments per scene, epochs per segment, window).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Keep only this scene (open_sky, wooded, high_rise, bridge).
    #[arg(long)]
    pub scene: Option<SceneLabel>,
}

#[derive(Debug, Args)]
pub struct PrepareArgs {
    /// Directory holding train.csv, valid.csv and test.csv.
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for windows_{train,valid,test}.json and norm.json.
    #[arg(long)]
    pub out: PathBuf,
    /// Training configuration JSON; only its window settings are used.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ModelFlags {
    /// Training configuration JSON.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Ablation flag: no_diffusion, no_temporal_cond, no_spatial_cond,
    /// no_coarse_embed, no_uncertainty or backbone=<mamba|uni_mamba|lstm|transformer>. Repeatable.
    #[arg(long = "ablate")]
    pub ablate: Vec<String>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Directory holding train.csv and valid.csv.
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub model: ModelFlags,
    /// Training seed (parameter init, shuffling, diffusion noise).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of epochs.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Initial learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    /// Hidden width H.
    #[arg(long)]
    pub hidden: Option<usize>,
    /// Wall-clock training budget in seconds; results then depend on machine speed.
    #[arg(long)]
    pub max_seconds: Option<f64>,
    /// DDIM evaluations used for validation during training.
    #[arg(long)]
    pub ddim_steps: Option<usize>,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    /// Checkpoint file.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Observation CSV, or a directory containing test.csv.
    #[arg(long)]
    pub data: PathBuf,
    /// Predictions CSV to write.
    #[arg(long)]
    pub out: PathBuf,
    /// DDIM evaluations (default: value stored in the checkpoint).
    #[arg(long)]
    pub ddim_steps: Option<usize>,
    /// Seed of the initial diffusion noise.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Keep only this scene.
    #[arg(long)]
    pub scene: Option<SceneLabel>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Predictions CSV from `infer`.
    #[arg(long)]
    pub predictions: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Observation CSV (or directory with test.csv); adds the positioning block.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Keep only this scene.
    #[arg(long)]
    pub scene: Option<SceneLabel>,
    /// Drop satellites with uncertainty >= 0.5 from corrected positioning.
    #[arg(long)]
    pub exclude_uncertain: bool,
}

#[derive(Debug, Args)]
pub struct PositionArgs {
    /// Observation CSV, or a directory containing test.csv.
    #[arg(long)]
    pub data: PathBuf,
    /// Predictions CSV; omit together with --oracle to use ground-truth errors.
    #[arg(long, required_unless_present = "oracle")]
    pub predictions: Option<PathBuf>,
    /// Correct with the ground-truth errors of the observation file.
    #[arg(long, conflicts_with = "predictions")]
    pub oracle: bool,
    /// Output JSON file (errors in meters).
    #[arg(long)]
    pub out: PathBuf,
    /// Keep only this scene.
    #[arg(long)]
    pub scene: Option<SceneLabel>,
    /// Drop satellites with uncertainty >= 0.5 instead of correcting them.
    #[arg(long)]
    pub exclude_uncertain: bool,
}

#[derive(Debug, Args)]
pub struct StudyArgs {
    /// Checkpoint file.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Observation CSV, or a directory containing test.csv.
    #[arg(long)]
    pub data: PathBuf,
    /// Output CSV: iterations,mae_m,rmse_m,mean_u.
    #[arg(long)]
    pub out: PathBuf,
    /// Comma-separated DDIM evaluation counts.
    #[arg(long, value_delimiter = ',', default_values_t = [1usize, 2, 5, 10])]
    pub iterations: Vec<usize>,
    /// Seed of the initial diffusion noise.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Keep only this scene.
    #[arg(long)]
    pub scene: Option<SceneLabel>,
}

/// Input problems found before any work starts; exit code 1.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn require_file(p: &Path) -> anyhow::Result<()> {
    if p.is_file() {
        Ok(())
    } else {
        Err(usage(format!("file not found: {}", p.display())))
    }
}

/// `path` itself, or `path/name` when `path` is a directory.
fn resolve(path: &Path, name: &str) -> anyhow::Result<PathBuf> {
    let p = if path.is_dir() { path.join(name) } else { path.to_path_buf() };
    require_file(&p)?;
    Ok(p)
}

fn load_seqs(path: &Path, scene: Option<SceneLabel>) -> anyhow::Result<Vec<Sequence>> {
    let seqs = load_observations(path)?;
    Ok(match scene {
        Some(s) => seqs.into_iter().filter(|q| q.epochs.first().is_some_and(|e| e.scene == s)).collect(),
        None => seqs,
    })
}

fn windows(seqs: &[Sequence], cfg: &TrainConfig, aug: bool) -> anyhow::Result<Vec<FeatureWindow>> {
    let mut out = Vec::new();
    for s in seqs.iter().filter(|s| s.epochs.len() >= cfg.window.length) {
        out.extend(if aug { augment(s, &cfg.window)? } else { build_windows(s, &cfg.window)? });
    }
    Ok(out)
}

fn create_dir(p: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(p).with_context(|| format!("creating {}", p.display()))
}

fn write_file(p: &Path, bytes: impl AsRef<[u8]>) -> anyhow::Result<()> {
    fs::write(p, bytes).with_context(|| format!("writing {}", p.display()))
}

fn train_config(flags: &ModelFlags) -> anyhow::Result<TrainConfig> {
    let mut cfg = match &flags.config {
        Some(p) => {
            require_file(p)?;
            TrainConfig::load(p).map_err(|e| usage(format!("{}: {e}", p.display())))?
        }
        None => TrainConfig::default(),
    };
    for a in &flags.ablate {
        cfg.model.ablations.set(a).map_err(usage)?;
    }
    Ok(cfg)
}

fn cmd_synth(a: &SynthArgs) -> anyhow::Result<()> {
    let cfg: SuiteConfig = match &a.config {
        Some(p) => {
            require_file(p)?;
            let text = fs::read_to_string(p).with_context(|| p.display().to_string())?;
            serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", p.display())))?
        }
        None => SuiteConfig::default(),
    };
    let suite = make_benchmark_suite(a.seed, &cfg)?;
    create_dir(&a.out)?;
    let keep = |v: Vec<Sequence>| -> Vec<Sequence> {
        v.into_iter().filter(|s| a.scene.is_none_or(|sc| s.epochs.first().is_some_and(|e| e.scene == sc))).collect()
    };
    for (name, seqs) in [("train.csv", suite.train), ("valid.csv", suite.valid), ("test.csv", suite.test)] {
        save_observations(&keep(seqs), &a.out.join(name))?;
    }
    write_file(&a.out.join("suite.json"), serde_json::to_string_pretty(&cfg)? + "\n")?;
    Ok(())
}

fn cmd_prepare(a: &PrepareArgs) -> anyhow::Result<()> {
    let cfg = train_config(&ModelFlags { config: a.config.clone(), ablate: Vec::new() })?;
    let paths = ["train.csv", "valid.csv", "test.csv"].map(|n| a.data.join(n));
    for p in &paths {
        require_file(p)?;
    }
    let train_w = windows(&load_observations(&paths[0])?, &cfg, cfg.augment)?;
    let norm = NormStats::compute(&train_w);
    create_dir(&a.out)?;
    write_file(&a.out.join("norm.json"), serde_json::to_string_pretty(&norm)? + "\n")?;
    for (split, w) in [
        ("train", train_w),
        ("valid", windows(&load_observations(&paths[1])?, &cfg, false)?),
        ("test", windows(&load_observations(&paths[2])?, &cfg, false)?),
    ] {
        write_file(&a.out.join(format!("windows_{split}.json")), serde_json::to_string(&normalized(&w, &norm))?)?;
    }
    Ok(())
}

fn cmd_train(a: &TrainArgs) -> anyhow::Result<()> {
    let mut cfg = train_config(&a.model)?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if let Some(lr) = a.lr {
        cfg.lr0 = lr;
    }
    if let Some(h) = a.hidden {
        cfg.model.hidden = h;
    }
    if let Some(k) = a.ddim_steps {
        cfg.model.diffusion.ddim_steps = k;
    }
    if a.max_seconds.is_some() {
        cfg.max_seconds = a.max_seconds;
    }
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    let tr = resolve(&a.data, "train.csv")?;
    let va = resolve(&a.data, "valid.csv")?;
    let ck = train(&cfg, &windows(&load_observations(&tr)?, &cfg, cfg.augment)?, &windows(&load_observations(&va)?, &cfg, false)?)?;
    create_dir(&a.out)?;
    ck.save(&a.out.join("checkpoint.dgns"))?;
    let mut log = String::from("epoch,lr,loss,loss_pri,loss_res,loss_un,loss_prr,valid_mae_coarse_m,valid_mae_m,valid_rmse_m,valid_mean_u\n");
    for h in &ck.history {
        let t = &h.train;
        log += &format!(
            "{},{},{},{},{},{},{},{},{},{},{}\n",
            h.epoch, h.lr, t.total, t.pri, t.res, t.un, t.prr, h.valid_mae_init, h.valid_mae_fine, h.valid_rmse_fine, h.valid_mean_u
        );
    }
    write_file(&a.out.join("metrics.csv"), log)?;
    if ck.diverged {
        log::warn!("training diverged; checkpoint holds the last finite parameters");
    }
    Ok(())
}

fn load_checkpoint(p: &Path) -> anyhow::Result<Checkpoint> {
    require_file(p)?;
    Ok(Checkpoint::load(p)?)
}

fn cmd_infer(a: &InferArgs) -> anyhow::Result<()> {
    let ck = load_checkpoint(&a.checkpoint)?;
    let data = resolve(&a.data, "test.csv")?;
    let model = ck.model()?;
    let k = a.ddim_steps.unwrap_or(ck.config.model.diffusion.ddim_steps);
    model.schedule.ddim_timesteps(k).map_err(|e| usage(e.to_string()))?;
    let w = normalized(&windows(&load_seqs(&data, a.scene)?, &ck.config, false)?, &ck.norm);
    let recs = predict_windows(&model, &ck.params, &w, k, a.seed, par::threads())?;
    let mut buf = Vec::new();
    write_predictions(&recs, &mut buf)?;
    write_file(&a.out, buf)
}

fn read_preds(p: &Path, scene: Option<SceneLabel>) -> anyhow::Result<Vec<diffgnss_core::model::PredictionRecord>> {
    require_file(p)?;
    let f = fs::File::open(p).with_context(|| p.display().to_string())?;
    let mut recs = read_predictions(std::io::BufReader::new(f)).with_context(|| p.display().to_string())?;
    if let Some(s) = scene {
        recs.retain(|r| r.scene == s);
    }
    Ok(recs)
}

fn cmd_evaluate(a: &EvaluateArgs) -> anyhow::Result<()> {
    let recs = read_preds(&a.predictions, a.scene)?;
    let data = a.data.as_deref().map(|d| resolve(d, "test.csv")).transpose()?;
    let mut report = evaluate(&recs)?;
    if let Some(d) = data {
        let seqs = load_seqs(&d, a.scene)?;
        let opts = PositionOptions { exclude_uncertain: a.exclude_uncertain, ..Default::default() };
        report.positioning = Some(position_compare(&seqs, &Corrections::from_predictions(&recs), &opts));
    }
    export_report(&report, &a.out)?;
    Ok(())
}

fn cmd_position(a: &PositionArgs) -> anyhow::Result<()> {
    let data = resolve(&a.data, "test.csv")?;
    let corr = match &a.predictions {
        Some(p) => Some(Corrections::from_predictions(&read_preds(p, a.scene)?)),
        None => None,
    };
    let seqs = load_seqs(&data, a.scene)?;
    let corr = corr.unwrap_or_else(|| Corrections::oracle(&seqs));
    let opts = PositionOptions { exclude_uncertain: a.exclude_uncertain, ..Default::default() };
    let block = position_compare(&seqs, &corr, &opts);
    write_file(&a.out, serde_json::to_string_pretty(&block)? + "\n")
}

fn cmd_study(a: &StudyArgs) -> anyhow::Result<()> {
    let ck = load_checkpoint(&a.checkpoint)?;
    let data = resolve(&a.data, "test.csv")?;
    if a.iterations.is_empty() || a.iterations.contains(&0) {
        return Err(usage("--iterations needs positive counts"));
    }
    let model = ck.model()?;
    let w = normalized(&windows(&load_seqs(&data, a.scene)?, &ck.config, false)?, &ck.norm);
    let rows = uncertainty_study(&model, &ck.params, &w, &a.iterations, a.seed, par::threads())?;
    let mut out = String::from("iterations,mae_m,rmse_m,mean_u\n");
    for r in rows {
        out += &format!("{},{},{},{}\n", r.iterations, r.mae, r.rmse, r.mean_u);
    }
    write_file(&a.out, out)
}

pub fn execute(cli: &Cli) -> anyhow::Result<()> {
    match &cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Prepare(a) => cmd_prepare(a),
        Command::Train(a) => cmd_train(a),
        Command::Infer(a) => cmd_infer(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Position(a) => cmd_position(a),
        Command::Study(a) => cmd_study(a),
    }
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code. Messages go to `err`.
pub fn run<I, T>(args: I, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            if code == 0 {
                print!("{e}");
            } else {
                let _ = write!(err, "{e}");
            }
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e:#}");
            if e.downcast_ref::<Usage>().is_some() {
                1
            } else {
                2
            }
        }
    }
}
