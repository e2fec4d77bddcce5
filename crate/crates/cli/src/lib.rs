//! Subcommands of the `diffmask` driver. Every run writes into a fresh
//! directory and starts by recording its fully resolved [`RunConfig`], which
//! `replay` can execute again.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use diffmask::baselines::{equispaced_mask, poisson_disc_mask};
use diffmask::experiment::{
    desk_acs, evaluate_mask, expected_central_fraction, magnitudes, render_pgm, render_pgm_windowed, rho_for_steps,
    Reconstruction, Window, DESK_PRIOR_IMAGES,
};
use diffmask::forward::{acceleration, make_coils, BinaryMask, CoilSet, PatternKind};
use diffmask::learner::{learn_mask, write_theta, write_training_log, MaskParams, TrainConfig};
use diffmask::metrics::{summarize, MetricReport, MetricRow, PSNR_CAP};
use diffmask::phantom::{read_image, write_image, Dataset, PhantomSpec, ScaleRecord, SplitSizes};
use diffmask::posterior::SamplerConfig;
use diffmask::score::{
    read_checkpoint, train_denoiser, write_checkpoint, DenoiserNet, DenoiserSpec, DenoiserTrainConfig, GmmPrior,
    ScoreModel,
};
use diffmask::tensor::{ComplexImage, Rng};

pub const CONFIG_VERSION: u32 = 1;
pub const CONFIG_FILE: &str = "config.json";
pub const MANIFEST_FILE: &str = "manifest.json";
/// Environment variable naming the directory that holds run directories.
pub const OUT_ENV: &str = "DIFFMASK_OUT";
/// Residual renders are magnified by this factor.
pub const RESIDUAL_SCALE: f64 = 4.0;

const COIL_TAG: u64 = 0xc011;
const TRAIN_TAG: u64 = 0x7a11;
const MASK_TAG: u64 = 0x3a5c;
const EVAL_TAG: u64 = 0xe7a1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub version: u32,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub command: Command,
}

#[derive(Clone, Debug, PartialEq, Subcommand, Serialize, Deserialize)]
#[serde(tag = "subcommand", rename_all = "kebab-case")]
pub enum Command {
    /// Generate train/val/test phantoms and a manifest.
    GenData(GenDataArgs),
    /// Fit the denoiser used as the learned score.
    TrainScore(TrainScoreArgs),
    /// Learn a sampling distribution on the training split.
    LearnMask(LearnMaskArgs),
    /// Reconstruct a split with one mask and write images, residuals and metrics.
    Reconstruct(ReconstructArgs),
    /// Mean and std of SSIM/PSNR for several masks under one sampler setting.
    Evaluate(EvaluateArgs),
    /// Like `evaluate`, over the product of step, churn and rho lists.
    Sweep(SweepArgs),
    /// Run a recorded config.json again into a new directory.
    Replay(ReplayArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenData(_) => "gen-data",
            Command::TrainScore(_) => "train-score",
            Command::LearnMask(_) => "learn-mask",
            Command::Reconstruct(_) => "reconstruct",
            Command::Evaluate(_) => "evaluate",
            Command::Sweep(_) => "sweep",
            Command::Replay(_) => "replay",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Args, Serialize, Deserialize)]
pub struct GenDataArgs {
    #[arg(long, default_value_t = 32)]
    pub size: usize,
    #[arg(long, default_value_t = 20)]
    pub train: usize,
    #[arg(long, default_value_t = 5)]
    pub val: usize,
    #[arg(long, default_value_t = 20)]
    pub test: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreKind {
    /// Equal-weight Gaussian mixture on the training images.
    Gmm,
    /// A denoiser checkpoint from `train-score`.
    Checkpoint,
}

#[derive(Clone, Debug, PartialEq, Args, Serialize, Deserialize)]
pub struct ScoreArgs {
    #[arg(long, value_enum, default_value_t = ScoreKind::Gmm)]
    pub score: ScoreKind,
    /// Required with `--score checkpoint`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Per-component variance of the mixture score.
    #[arg(long, default_value_t = 0.05)]
    pub gmm_variance: f64,
}

#[derive(Clone, Debug, PartialEq, Args, Serialize, Deserialize)]
pub struct SetupArgs {
    /// Directory written by `gen-data`.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 4)]
    pub coils: usize,
    /// Complex standard deviation of the measurement noise.
    #[arg(long, default_value_t = 0.0)]
    pub noise_std: f64,
}

#[derive(Clone, Debug, PartialEq, Args, Serialize, Deserialize)]
pub struct TrainScoreArgs {
    /// Train on this dataset's train split instead of fresh phantoms.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Number of fresh phantoms when `--data` is absent.
    #[arg(long, default_value_t = DESK_PRIOR_IMAGES)]
    pub prior_images: usize,
    #[arg(long, default_value_t = 32)]
    pub size: usize,
    #[arg(long, default_value_t = 40)]
    pub epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, value_delimiter = ',', default_value = "64,64")]
    pub hidden: Vec<usize>,
    /// Data scale of the skip/output preconditioning; 0 disables it.
    #[arg(long, default_value_t = 0.3)]
    pub sigma_data: f64,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
}

#[derive(Clone, Debug, PartialEq, Args, Serialize, Deserialize)]
pub struct LearnMaskArgs {
    #[command(flatten)]
    pub setup: SetupArgs,
    #[command(flatten)]
    pub score: ScoreArgs,
    #[arg(long, value_parser = parse_pattern, default_value = "line")]
    pub pattern: PatternKind,
    /// Target acceleration.
    #[arg(long = "R", alias = "r", default_value_t = 8.0)]
    pub r: f64,
    /// Calibration width; defaults to 2 for LINE and 4 for POINT.
    #[arg(long)]
    pub acs: Option<usize>,
    #[arg(long, default_value_t = 400)]
    pub epochs: usize,
    /// Use only the first N training images.
    #[arg(long)]
    pub train_images: Option<usize>,
    #[arg(long, default_value_t = 1e-2)]
    pub lr: f64,
    #[arg(long, default_value_t = 1.0)]
    pub tau: f64,
    /// Train at this single noise level instead of the log-normal draw.
    #[arg(long)]
    pub fixed_sigma: Option<f64>,
    #[arg(long, default_value_t = 40)]
    pub val_every: usize,
    #[arg(long, default_value_t = 100)]
    pub val_steps: usize,
}

#[derive(Clone, Debug, PartialEq, Args, Serialize, Deserialize)]
pub struct SamplerArgs {
    #[arg(long, default_value_t = 100)]
    pub steps: usize,
    /// DPS step size; defaults to the step-count schedule.
    #[arg(long)]
    pub rho: Option<f64>,
    #[arg(long, default_value_t = 0.0)]
    pub s_churn: f64,
}

#[derive(Clone, Debug, PartialEq, Args, Serialize, Deserialize)]
pub struct ReconstructArgs {
    #[command(flatten)]
    pub setup: SetupArgs,
    #[command(flatten)]
    pub score: ScoreArgs,
    /// Mask file written by `learn-mask` or by hand.
    #[arg(long)]
    pub mask: PathBuf,
    #[command(flatten)]
    pub sampler: SamplerArgs,
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Reconstruct only the first N images of the split.
    #[arg(long)]
    pub limit: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Args, Serialize, Deserialize)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub setup: SetupArgs,
    #[command(flatten)]
    pub score: ScoreArgs,
    /// Mask file, `equispaced:R` or `poisson:R`; repeatable.
    #[arg(long = "mask", required = true)]
    pub masks: Vec<String>,
    #[command(flatten)]
    pub sampler: SamplerArgs,
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long)]
    pub limit: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Args, Serialize, Deserialize)]
pub struct SweepArgs {
    #[command(flatten)]
    pub setup: SetupArgs,
    #[command(flatten)]
    pub score: ScoreArgs,
    #[arg(long = "mask", required = true)]
    pub masks: Vec<String>,
    #[arg(long, value_delimiter = ',', default_value = "100")]
    pub steps: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "0")]
    pub s_churn: Vec<f64>,
    /// Empty means the step-count schedule.
    #[arg(long, value_delimiter = ',')]
    pub rho: Vec<f64>,
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long)]
    pub limit: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Args, Serialize, Deserialize)]
pub struct ReplayArgs {
    pub config: PathBuf,
}

fn parse_pattern(s: &str) -> std::result::Result<PatternKind, String> {
    s.parse().map_err(|e: diffmask::Error| e.to_string())
}

/// `--out`, then `$DIFFMASK_OUT`, then `./runs`.
pub fn out_root(flag: Option<PathBuf>) -> PathBuf {
    flag.or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from)).unwrap_or_else(|| PathBuf::from("runs"))
}

/// Fills in defaults that depend on other flags and makes input paths absolute.
pub fn resolve(command: Command, seed: u64, out_dir: PathBuf) -> Result<RunConfig> {
    let abs = |p: &Path| fs::canonicalize(p).with_context(|| format!("cannot open {}", p.display()));
    let fix_setup = |s: &mut SetupArgs| -> Result<()> {
        s.data = abs(&s.data)?;
        Ok(())
    };
    let fix_score = |s: &mut ScoreArgs| -> Result<()> {
        if let Some(p) = &s.checkpoint {
            s.checkpoint = Some(abs(p)?);
        } else if s.score == ScoreKind::Checkpoint {
            bail!("--score checkpoint needs --checkpoint");
        }
        Ok(())
    };
    let fix_masks = |masks: &mut Vec<String>| -> Result<()> {
        for m in masks.iter_mut() {
            if parse_baseline(m)?.is_none() {
                *m = abs(Path::new(m.as_str()))?.display().to_string();
            }
        }
        Ok(())
    };
    let mut command = command;
    match &mut command {
        Command::GenData(_) => {}
        Command::TrainScore(a) => {
            if let Some(d) = &a.data {
                a.data = Some(abs(d)?);
            }
        }
        Command::LearnMask(a) => {
            fix_setup(&mut a.setup)?;
            fix_score(&mut a.score)?;
            a.acs.get_or_insert(desk_acs(a.pattern));
        }
        Command::Reconstruct(a) => {
            fix_setup(&mut a.setup)?;
            fix_score(&mut a.score)?;
            a.mask = abs(&a.mask)?;
            a.sampler.rho.get_or_insert(rho_for_steps(a.sampler.steps));
        }
        Command::Evaluate(a) => {
            fix_setup(&mut a.setup)?;
            fix_score(&mut a.score)?;
            fix_masks(&mut a.masks)?;
            a.sampler.rho.get_or_insert(rho_for_steps(a.sampler.steps));
        }
        Command::Sweep(a) => {
            fix_setup(&mut a.setup)?;
            fix_score(&mut a.score)?;
            fix_masks(&mut a.masks)?;
        }
        Command::Replay(_) => bail!("replay is not a recordable command"),
    }
    Ok(RunConfig { version: CONFIG_VERSION, seed, out_dir, command })
}

/// Creates `dir`, refusing to reuse a non-empty directory.
pub fn create_run_dir(dir: &Path) -> Result<()> {
    if dir.exists() && fs::read_dir(dir)?.next().is_some() {
        bail!("run directory {} already has content; choose another --name", dir.display());
    }
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    Ok(BufWriter::new(File::create_new(path).with_context(|| format!("cannot create {}", path.display()))?))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut out = create(path)?;
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    out.flush()?;
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut out = create(path)?;
    out.write_all(text.as_bytes())?;
    out.flush()?;
    Ok(())
}

pub fn read_config(path: &Path) -> Result<RunConfig> {
    let file = File::open(path).with_context(|| format!("cannot open {}", path.display()))?;
    let cfg: RunConfig =
        serde_json::from_reader(BufReader::new(file)).with_context(|| format!("bad config {}", path.display()))?;
    ensure!(cfg.version == CONFIG_VERSION, "unsupported config version {}", cfg.version);
    Ok(cfg)
}

/// Writes `config.json` into a fresh `cfg.out_dir` and executes the command.
pub fn run(cfg: &RunConfig) -> Result<()> {
    create_run_dir(&cfg.out_dir)?;
    write_json(&cfg.out_dir.join(CONFIG_FILE), cfg)?;
    let out = cfg.out_dir.as_path();
    match &cfg.command {
        Command::GenData(a) => gen_data(a, cfg.seed, out),
        Command::TrainScore(a) => train_score(a, cfg.seed, out),
        Command::LearnMask(a) => learn(a, cfg.seed, out),
        Command::Reconstruct(a) => reconstruct(a, cfg.seed, out),
        Command::Evaluate(a) => {
            let rho = a.sampler.rho.unwrap_or_else(|| rho_for_steps(a.sampler.steps));
            let grid = [(a.sampler.steps, a.sampler.s_churn, rho)];
            evaluate_grid(&a.setup, &a.score, &a.masks, &grid, &a.split, a.limit, cfg.seed, out)
        }
        Command::Sweep(a) => {
            let mut grid = Vec::new();
            for &steps in &a.steps {
                for &churn in &a.s_churn {
                    if a.rho.is_empty() {
                        grid.push((steps, churn, rho_for_steps(steps)));
                    }
                    for &rho in &a.rho {
                        grid.push((steps, churn, rho));
                    }
                }
            }
            evaluate_grid(&a.setup, &a.score, &a.masks, &grid, &a.split, a.limit, cfg.seed, out)
        }
        Command::Replay(_) => bail!("a recorded config cannot hold a replay"),
    }
}

// ------------------------------------------------------------------ datasets

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub split: String,
    pub file: String,
    pub scale: ScaleRecord,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub seed: u64,
    pub spec: PhantomSpec,
    pub entries: Vec<ManifestEntry>,
}

fn gen_data(a: &GenDataArgs, seed: u64, out: &Path) -> Result<()> {
    let spec = PhantomSpec { height: a.size, width: a.size, ..PhantomSpec::default() };
    let data = Dataset::generate(&spec, SplitSizes { train: a.train, val: a.val, test: a.test }, seed)?;
    let mut entries = Vec::new();
    for (split, samples) in [("train", &data.train), ("val", &data.val), ("test", &data.test)] {
        for s in samples {
            let file = format!("images/{}.cimg", s.id);
            let mut w = create(&out.join(&file))?;
            write_image(&s.image, &mut w)?;
            w.flush()?;
            entries.push(ManifestEntry { id: s.id.clone(), split: split.into(), file, scale: s.scale });
        }
    }
    println!("wrote {} images to {}", entries.len(), out.display());
    write_json(&out.join(MANIFEST_FILE), &Manifest { version: CONFIG_VERSION, seed, spec, entries })
}

pub fn read_manifest(data: &Path) -> Result<Manifest> {
    let path = data.join(MANIFEST_FILE);
    let file = File::open(&path).with_context(|| format!("cannot open {}", path.display()))?;
    serde_json::from_reader(BufReader::new(file)).with_context(|| format!("bad manifest {}", path.display()))
}

/// `(id, image)` pairs of one split in manifest order.
pub fn load_split(data: &Path, split: &str) -> Result<Vec<(String, ComplexImage)>> {
    let manifest = read_manifest(data)?;
    manifest
        .entries
        .iter()
        .filter(|e| e.split == split)
        .map(|e| {
            let path = data.join(&e.file);
            let file = File::open(&path).with_context(|| format!("cannot open {}", path.display()))?;
            let img = read_image(BufReader::new(file)).with_context(|| format!("bad image {}", path.display()))?;
            Ok((e.id.clone(), img))
        })
        .collect()
}

fn images_of(pairs: &[(String, ComplexImage)]) -> Vec<ComplexImage> {
    pairs.iter().map(|(_, x)| x.clone()).collect()
}

fn shape_of(data: &Path) -> Result<(usize, usize)> {
    let m = read_manifest(data)?;
    Ok((m.spec.height, m.spec.width))
}

fn coils_for(setup: &SetupArgs, seed: u64) -> Result<CoilSet> {
    let (h, w) = shape_of(&setup.data)?;
    Ok(make_coils(h, w, setup.coils, &mut Rng::new(seed).derive(COIL_TAG))?)
}

fn load_score(args: &ScoreArgs, data: &Path) -> Result<Box<dyn ScoreModel>> {
    match args.score {
        ScoreKind::Gmm => {
            let train = images_of(&load_split(data, "train")?);
            Ok(Box::new(GmmPrior::from_images(&train, args.gmm_variance)?))
        }
        ScoreKind::Checkpoint => {
            let path = args.checkpoint.as_ref().context("--score checkpoint needs --checkpoint")?;
            let file = File::open(path).with_context(|| format!("cannot open {}", path.display()))?;
            let net: DenoiserNet =
                read_checkpoint(BufReader::new(file)).with_context(|| format!("bad checkpoint {}", path.display()))?;
            Ok(Box::new(net))
        }
    }
}

// ------------------------------------------------------------------ training

fn train_score(a: &TrainScoreArgs, seed: u64, out: &Path) -> Result<()> {
    let images = match &a.data {
        Some(d) => images_of(&load_split(d, "train")?),
        None => {
            let spec = PhantomSpec { height: a.size, width: a.size, ..PhantomSpec::default() };
            diffmask::experiment::phantom_images(&spec, a.prior_images, seed)?
        }
    };
    ensure!(!images.is_empty(), "no training images");
    let (h, w) = images[0].shape();
    let sigma_data = (a.sigma_data > 0.0).then_some(a.sigma_data);
    let spec = DenoiserSpec::new(h, w, a.hidden.clone(), sigma_data)?;
    let cfg =
        DenoiserTrainConfig { epochs: a.epochs, lr: a.lr, batch_size: a.batch_size, ..DenoiserTrainConfig::new(spec) };
    let (net, report) = train_denoiser(&images, &cfg, &mut Rng::new(seed).derive(TRAIN_TAG))?;

    let mut ck = create(&out.join("model.dmnet"))?;
    write_checkpoint(&net, &mut ck)?;
    ck.flush()?;
    let mut csv = create(&out.join("loss.csv"))?;
    writeln!(csv, "epoch,loss")?;
    for (e, l) in report.epoch_losses.iter().enumerate() {
        writeln!(csv, "{e},{l}")?;
    }
    csv.flush()?;
    write_json(&out.join("train_report.json"), &report)?;
    let drop = 1.0 - report.probe_final / report.probe_initial;
    println!(
        "probe loss {:.4} -> {:.4} ({:.0}% lower) after {} steps",
        report.probe_initial,
        report.probe_final,
        100.0 * drop,
        report.steps
    );
    if a.epochs > 0 && drop < 0.2 {
        eprintln!("warning: probe loss fell by less than 20%");
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LearnSummary {
    pub best_epoch: Option<usize>,
    pub best_val_error: Option<f64>,
    pub target_r: f64,
    pub expected_r: f64,
    pub top_mask_r: f64,
    pub sampled_mask_r: f64,
    pub expected_central_fraction: Option<f64>,
}

fn learn(a: &LearnMaskArgs, seed: u64, out: &Path) -> Result<()> {
    let (h, w) = shape_of(&a.setup.data)?;
    let mut train = images_of(&load_split(&a.setup.data, "train")?);
    if let Some(n) = a.train_images {
        train.truncate(n);
    }
    let val = images_of(&load_split(&a.setup.data, "val")?);
    let score = load_score(&a.score, &a.setup.data)?;
    let coils = coils_for(&a.setup, seed)?;
    let acs = a.acs.unwrap_or_else(|| desk_acs(a.pattern));
    let init = MaskParams::new(a.pattern, h, w, a.r, acs, a.tau)?;
    let cfg = TrainConfig {
        epochs: a.epochs,
        lr: a.lr,
        noise_std: a.setup.noise_std,
        fixed_sigma: a.fixed_sigma,
        seed,
        val_every: a.val_every,
        validation: SamplerConfig::new(a.val_steps, rho_for_steps(a.val_steps), 0.0, seed),
        ..TrainConfig::default()
    };
    let (params, report) = learn_mask(init, &train, &val, score.as_ref(), &coils, &cfg)?;

    let mut th = create(&out.join("theta.dmtheta"))?;
    write_theta(&params, &mut th)?;
    th.flush()?;
    let mut log = create(&out.join("training_log.csv"))?;
    write_training_log(&report.log, &mut log)?;
    log.flush()?;

    let probs = params.probabilities()?;
    let expected_r = probs.len() as f64 / probs.iter().sum::<f64>();
    let top = params.top_mask()?;
    let sampled = params.sample_mask(&mut Rng::new(seed).derive(MASK_TAG))?;
    write_text(&out.join("mask.txt"), &sampled.to_text())?;
    write_text(&out.join("top_mask.txt"), &top.to_text())?;

    let grid: Vec<f64> = (0..h * w).map(|i| probs[a.pattern.site_of(w, i / w, i % w)]).collect();
    let header = format!("R target {} expected {expected_r} top {}", a.r, acceleration(&top)?);
    write_pgm(&out.join("probabilities.pgm"), &grid, h, w, Some(Window { min: 0.0, max: 1.0 }), &header)?;
    write_pgm(&out.join("mask.pgm"), &sampled.weights(), h, w, Some(Window { min: 0.0, max: 1.0 }), "")?;

    let summary = LearnSummary {
        best_epoch: report.best_epoch,
        best_val_error: report.best_val_error,
        target_r: a.r,
        expected_r,
        top_mask_r: acceleration(&top)?,
        sampled_mask_r: acceleration(&sampled)?,
        expected_central_fraction: expected_central_fraction(&params)?,
    };
    println!(
        "best validation error {:?} at epoch {:?}; sampled mask R = {:.3}",
        summary.best_val_error, summary.best_epoch, summary.sampled_mask_r
    );
    write_json(&out.join("learn_report.json"), &summary)
}

// ------------------------------------------------------------ reconstruction

/// P5 render; `comment` (if any) goes in an extra header line after the window.
fn write_pgm(path: &Path, values: &[f64], h: usize, w: usize, window: Option<Window>, comment: &str) -> Result<()> {
    let mut bytes = match window {
        Some(win) => render_pgm_windowed(values, h, w, win)?,
        None => render_pgm(values, h, w)?.0,
    };
    if !comment.is_empty() {
        let at = bytes.iter().enumerate().filter(|(_, b)| **b == b'\n').nth(1).map(|(i, _)| i + 1).unwrap_or(0);
        let line = format!("# {}\n", comment.replace('\n', " "));
        bytes.splice(at..at, line.into_bytes());
    }
    let mut out = create(path)?;
    out.write_all(&bytes)?;
    out.flush()?;
    Ok(())
}

fn read_mask(path: &Path) -> Result<BinaryMask> {
    let text = fs::read_to_string(path).with_context(|| format!("cannot read mask {}", path.display()))?;
    BinaryMask::from_text(&text).with_context(|| format!("bad mask {}", path.display()))
}

fn split_images(setup: &SetupArgs, split: &str, limit: Option<usize>) -> Result<Vec<(String, ComplexImage)>> {
    let mut pairs = load_split(&setup.data, split)?;
    if let Some(n) = limit {
        pairs.truncate(n);
    }
    ensure!(!pairs.is_empty(), "split `{split}` of {} has no images", setup.data.display());
    Ok(pairs)
}

fn reconstruct(a: &ReconstructArgs, seed: u64, out: &Path) -> Result<()> {
    let mask = read_mask(&a.mask)?;
    let pairs = split_images(&a.setup, &a.split, a.limit)?;
    let images = images_of(&pairs);
    ensure!(mask.shape() == images[0].shape(), "mask shape {:?} does not match the images", mask.shape());
    let score = load_score(&a.score, &a.setup.data)?;
    let coils = coils_for(&a.setup, seed)?;
    let rho = a.sampler.rho.unwrap_or_else(|| rho_for_steps(a.sampler.steps));
    let sampler = SamplerConfig::new(a.sampler.steps, rho, a.sampler.s_churn, seed);
    let recs = evaluate_mask(
        score.as_ref(),
        &coils,
        &mask,
        &images,
        &sampler,
        a.setup.noise_std,
        seed.wrapping_add(EVAL_TAG),
    )?;

    let (h, w) = mask.shape();
    let r = acceleration(&mask)?;
    let mask_id = file_id(&a.mask);
    let mut report = MetricReport::default();
    for ((id, x0), rec) in pairs.iter().zip(&recs) {
        let mut f = create(&out.join("recon").join(format!("{id}.cimg")))?;
        write_image(&rec.image, &mut f)?;
        f.flush()?;
        let reference = magnitudes(x0);
        let window = Window { min: 0.0, max: reference.iter().cloned().fold(0.0, f64::max) };
        write_pgm(&out.join("recon").join(format!("{id}.pgm")), &magnitudes(&rec.image), h, w, Some(window), "")?;
        let residual: Vec<f64> = magnitudes(&(&rec.image - x0)).iter().map(|v| RESIDUAL_SCALE * v).collect();
        let note = format!("residual magnitude x{RESIDUAL_SCALE}");
        write_pgm(&out.join("residual").join(format!("{id}.pgm")), &residual, h, w, Some(window), &note)?;
        report.push(MetricRow { image_id: id.clone(), mask_id: mask_id.clone(), r, ssim: rec.ssim, psnr: rec.psnr });
    }
    let mut csv = create(&out.join("metrics.csv"))?;
    report.write_csv(&mut csv)?;
    csv.flush()?;
    let s = report.ssim_summary();
    println!("{} images, R = {r:.3}: SSIM {:.4} +- {:.4}, PSNR {:.2}", s.n, s.mean, s.std, report.psnr_summary().mean);
    Ok(())
}

fn file_id(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "mask".into())
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Baseline {
    Equispaced(f64),
    Poisson(f64),
}

fn parse_baseline(spec: &str) -> Result<Option<Baseline>> {
    let Some((kind, r)) = spec.split_once(':') else { return Ok(None) };
    let parse = || r.parse::<f64>().with_context(|| format!("bad acceleration in `{spec}`"));
    match kind {
        "equispaced" => Ok(Some(Baseline::Equispaced(parse()?))),
        "poisson" => Ok(Some(Baseline::Poisson(parse()?))),
        _ => Ok(None),
    }
}

/// `(id, mask)` for a mask file or a `equispaced:R` / `poisson:R` baseline.
fn mask_from_spec(spec: &str, shape: (usize, usize), seed: u64) -> Result<(String, BinaryMask)> {
    let (h, w) = shape;
    Ok(match parse_baseline(spec)? {
        Some(Baseline::Equispaced(r)) => {
            (format!("equispaced-{r}"), equispaced_mask(h, w, r, desk_acs(PatternKind::Line))?)
        }
        Some(Baseline::Poisson(r)) => {
            let mut rng = Rng::new(seed).derive(MASK_TAG);
            (format!("poisson-{r}"), poisson_disc_mask(h, w, r, desk_acs(PatternKind::Point), &mut rng)?.mask)
        }
        None => (file_id(Path::new(spec)), read_mask(Path::new(spec))?),
    })
}

pub const SUMMARY_HEADER: &str = "mask_id,R,steps,rho,s_churn,n,ssim_mean,ssim_std,psnr_mean,psnr_std";

#[allow(clippy::too_many_arguments)]
fn evaluate_grid(
    setup: &SetupArgs,
    score_args: &ScoreArgs,
    masks: &[String],
    grid: &[(usize, f64, f64)],
    split: &str,
    limit: Option<usize>,
    seed: u64,
    out: &Path,
) -> Result<()> {
    let pairs = split_images(setup, split, limit)?;
    let images = images_of(&pairs);
    let score = load_score(score_args, &setup.data)?;
    let coils = coils_for(setup, seed)?;
    let masks: Vec<(String, BinaryMask)> =
        masks.iter().map(|m| mask_from_spec(m, images[0].shape(), seed)).collect::<Result<_>>()?;
    let mut summary = create(&out.join("summary.csv"))?;
    writeln!(summary, "{SUMMARY_HEADER}")?;
    let mut per_image = create(&out.join("metrics.csv"))?;
    writeln!(per_image, "image_id,mask_id,R,steps,rho,s_churn,SSIM,PSNR")?;
    for (id, mask) in &masks {
        ensure!(mask.shape() == images[0].shape(), "mask {id} has shape {:?}", mask.shape());
        let r = acceleration(mask)?;
        for &(steps, churn, rho) in grid {
            let sampler = SamplerConfig::new(steps, rho, churn, seed);
            let recs: Vec<Reconstruction> = evaluate_mask(
                score.as_ref(),
                &coils,
                mask,
                &images,
                &sampler,
                setup.noise_std,
                seed.wrapping_add(EVAL_TAG),
            )?;
            for ((image_id, _), rec) in pairs.iter().zip(&recs) {
                writeln!(
                    per_image,
                    "{image_id},{id},{r},{steps},{rho},{churn},{},{}",
                    rec.ssim,
                    rec.psnr.min(PSNR_CAP)
                )?;
            }
            let s = summarize(&recs.iter().map(|x| x.ssim).collect::<Vec<_>>());
            let p = summarize(&recs.iter().map(|x| x.psnr.min(PSNR_CAP)).collect::<Vec<_>>());
            writeln!(summary, "{id},{r},{steps},{rho},{churn},{},{},{},{},{}", s.n, s.mean, s.std, p.mean, p.std)?;
            println!("{id} R={r:.2} steps={steps} rho={rho:.3} churn={churn}: SSIM {:.4} +- {:.4}", s.mean, s.std);
        }
    }
    summary.flush()?;
    per_image.flush()?;
    Ok(())
}
