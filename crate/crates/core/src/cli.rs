//! The `pdsr` command line.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::data::{self, DatasetManifest, ImagePair};
use crate::error::{Error, Result};
use crate::losses::BandExtractor;
use crate::metrics;
use crate::model::Model;
use crate::tensor::Tensor;
use crate::trainer::{StageOrder, TrainMode, TrainingReport, Trainer};
use crate::wavelet;

pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";
pub const REPORT_FILE: &str = "report.csv";
pub const RESOLVED_CONFIG_FILE: &str = "config.resolved.json";
pub const METRICS_FILE: &str = "metrics.csv";

#[derive(Debug, Parser)]
#[command(name = "pdsr", version, about = "Two-stage super-resolution trained with an ADMM low-frequency constraint")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Crop HR images, build bicubic LR inputs and write a manifest.
    Prepare {
        #[arg(long)]
        hr_dir: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 4)]
        scale: usize,
        #[arg(long, default_value_t = 16)]
        patch_size_lr: usize,
    },
    /// Pretrain, then run the selected phase-2 trainer.
    Train {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_enum, default_value_t = Mode::Pdadmm)]
        mode: Mode,
    },
    /// Score a checkpoint on a manifest.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write both stage outputs and the low-frequency difference map.
        #[arg(long)]
        save_images: bool,
        /// Pixels dropped from each side before PSNR, SSIM and the proxy.
        #[arg(long, default_value_t = 0)]
        crop_border: usize,
    },
    /// Interpolate two models' outputs and score each blend.
    Curve {
        /// Distortion-oriented model (alpha = 1).
        #[arg(long)]
        checkpoint_o: PathBuf,
        /// Perception-oriented model (alpha = 0).
        #[arg(long)]
        checkpoint_p: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0,0.25,0.5,0.75,1")]
        alphas: Vec<f64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        crop_border: usize,
    },
    /// Run PD-ADMM with a different low-frequency extractor.
    AblateLf {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_enum)]
        extractor: Extractor,
    },
    /// Write a seeded synthetic texture corpus.
    Synth {
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 64)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Debug, clap::Args)]
pub struct RunArgs {
    /// JSON config; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// `key.path=value` override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Output directory for checkpoint, report and resolved config.
    #[arg(long)]
    pub out: PathBuf,
    /// Start from the weights of this checkpoint instead of a fresh model.
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Continue from the checkpoint already in the output directory.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Pdadmm,
    Baseline,
    PoSwap,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Extractor {
    Dwt,
    Gaussian,
}

/// Process exit code for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Divergence { .. } => 1,
        Error::Io { .. } | Error::Format(_) => 3,
        _ => 2,
    }
}

/// Runs one command, printing a short summary to stdout.
pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Prepare {
            hr_dir,
            out_dir,
            scale,
            patch_size_lr,
        } => {
            let m = cmd_prepare(&hr_dir, &out_dir, scale, patch_size_lr)?;
            println!("wrote {} pairs to {}", m.len(), out_dir.join(data::MANIFEST_FILE).display());
        }
        Command::Train { run, mode } => {
            let (cfg, mode) = train_setup(&run, mode)?;
            let report = cmd_train(&cfg, mode, &run)?;
            summarize(&report);
        }
        Command::AblateLf { run, extractor } => {
            let mut cfg = RunConfig::resolve(run.config.as_deref(), &run.overrides)?;
            cfg.admm.extractor = match extractor {
                Extractor::Dwt => BandExtractor::HaarLow,
                Extractor::Gaussian => BandExtractor::GAUSSIAN_ABLATION,
            };
            println!("extractor: {}", cfg.admm.extractor.label());
            let report = cmd_train(&cfg, TrainMode::PdAdmm, &run)?;
            summarize(&report);
        }
        Command::Eval {
            checkpoint,
            manifest,
            out,
            save_images,
            crop_border,
        } => {
            print_flags(&[
                ("checkpoint", checkpoint.display().to_string()),
                ("manifest", manifest.display().to_string()),
                ("save_images", save_images.to_string()),
                ("crop_border", crop_border.to_string()),
            ]);
            let csv = cmd_eval(&checkpoint, &manifest, &out, save_images, crop_border)?;
            print!("{}", csv.lines().last().map(|l| format!("{l}\n")).unwrap_or_default());
        }
        Command::Curve {
            checkpoint_o,
            checkpoint_p,
            manifest,
            alphas,
            out,
            crop_border,
        } => {
            print_flags(&[
                ("checkpoint_o", checkpoint_o.display().to_string()),
                ("checkpoint_p", checkpoint_p.display().to_string()),
                ("manifest", manifest.display().to_string()),
                ("alphas", format!("{alphas:?}")),
                ("crop_border", crop_border.to_string()),
            ]);
            let csv = cmd_curve(&checkpoint_o, &checkpoint_p, &manifest, &alphas, crop_border)?;
            write_file(&out, csv.as_bytes())?;
            print!("{csv}");
        }
        Command::Synth {
            out_dir,
            count,
            size,
            seed,
        } => {
            let paths = data::write_synth_corpus(&out_dir, count, size, seed)?;
            println!("wrote {} images to {}", paths.len(), out_dir.display());
        }
    }
    Ok(())
}

fn print_flags(flags: &[(&str, String)]) {
    let map: serde_json::Map<String, serde_json::Value> = flags
        .iter()
        .map(|(k, v)| (k.to_string(), serde_json::Value::String(v.clone())))
        .collect();
    println!("{}", serde_json::to_string_pretty(&map).expect("flags serialize"));
}

fn summarize(report: &TrainingReport) {
    if let Some(r) = report.last() {
        println!(
            "round {}: loss_o {:.6} primal_residual_l1 {:.6} psnr_val {:.3} lf_mae_val {:.6}",
            r.round, r.loss_o, r.primal_residual_l1, r.psnr_val, r.lf_mae_val
        );
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn cmd_prepare(hr_dir: &Path, out_dir: &Path, scale: usize, patch_size_lr: usize) -> Result<DatasetManifest> {
    if !hr_dir.is_dir() {
        return Err(Error::Config(format!("input directory {} does not exist", hr_dir.display())));
    }
    data::prepare_dataset(hr_dir, out_dir, scale, patch_size_lr)
}

fn train_setup(run: &RunArgs, mode: Mode) -> Result<(RunConfig, TrainMode)> {
    let mut cfg = RunConfig::resolve(run.config.as_deref(), &run.overrides)?;
    let mode = match mode {
        Mode::Pdadmm => TrainMode::PdAdmm,
        Mode::Baseline => TrainMode::Baseline,
        Mode::PoSwap => {
            cfg.admm.order = StageOrder::PerceptualFirst;
            cfg.admm.extractor = BandExtractor::HaarHigh;
            TrainMode::PdAdmm
        }
    };
    Ok((cfg, mode))
}

fn load_manifest(path: Option<&Path>, what: &str) -> Result<DatasetManifest> {
    let path = path.ok_or_else(|| Error::Config(format!("data.{what} is not set")))?;
    if !path.exists() {
        return Err(Error::Config(format!("{what} manifest {} does not exist", path.display())));
    }
    DatasetManifest::load(path)
}

fn check_scale(model_scale: usize, manifest: &DatasetManifest) -> Result<()> {
    if model_scale != manifest.scale {
        return Err(Error::contract(
            "scale",
            format!("model upsamples x{model_scale} but the manifest is x{}", manifest.scale),
        ));
    }
    Ok(())
}

/// Trains in `run.out`, writing the resolved config, checkpoint and report.
pub fn cmd_train(cfg: &RunConfig, mode: TrainMode, run: &RunArgs) -> Result<TrainingReport> {
    cfg.validate()?;
    let json = cfg.to_json();
    println!("{json}");
    fs::create_dir_all(&run.out).map_err(|e| Error::io(&run.out, e))?;
    write_file(&run.out.join(RESOLVED_CONFIG_FILE), format!("{json}\n").as_bytes())?;

    let manifest = load_manifest(cfg.data.train.as_deref(), "train")?;
    check_scale(cfg.model.scale, &manifest)?;
    let (train, _) = data::extract_patch_pairs(&manifest, manifest.patch_size_lr, cfg.data.patches, cfg.data.patch_seed)?;
    let val = match &cfg.data.val {
        Some(p) => {
            let m = load_manifest(Some(p), "val")?;
            check_scale(cfg.model.scale, &m)?;
            m.load_images()?
        }
        None => Vec::new(),
    };

    let model = match &run.init {
        Some(p) => {
            let m = Checkpoint::load(p)?.model;
            if m.config != cfg.model {
                return Err(Error::Config(format!(
                    "model settings in {} differ from the config",
                    p.display()
                )));
            }
            m
        }
        None => Model::init(cfg.model)?,
    };

    let ckpt_path = run.out.join(CHECKPOINT_FILE);
    let mut trainer = Trainer::new(&train, &val, model, cfg.train_config(), mode)?.checkpoint_to(&ckpt_path);
    if run.resume && ckpt_path.is_file() {
        trainer = trainer.resume(Checkpoint::load(&ckpt_path)?)?;
    }
    let tag = trainer.tag();
    let outcome = trainer.run()?;
    outcome.state.to_checkpoint(&tag).save(&ckpt_path)?;
    outcome.report.write_csv(&run.out.join(REPORT_FILE))?;
    Ok(outcome.report)
}

/// Stage outputs in pipeline order `(first, final)` for one `[3,h,w]` image.
fn stage_outputs(model: &Model, lr: &Tensor) -> Result<(Tensor, Tensor)> {
    let (c, h, w) = (lr.shape()[0], lr.shape()[1], lr.shape()[2]);
    let (first, second) = model.super_resolve(&lr.reshape(&[1, c, h, w])?)?;
    let shape = [c, h * model.config.scale, w * model.config.scale];
    Ok((first.into_reshaped(&shape)?, second.into_reshaped(&shape)?))
}

fn load_model(path: &Path) -> Result<Model> {
    Ok(Checkpoint::load(path)?.model)
}

fn image_name(manifest: &DatasetManifest, pair: &ImagePair) -> String {
    manifest
        .entries
        .iter()
        .find(|e| e.id == pair.id)
        .and_then(|e| e.hr.file_stem())
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| pair.id.to_string())
}

/// Gain applied to the mean absolute LL difference in saved maps.
const LF_MAP_GAIN: f64 = 8.0;

fn lf_difference_map(first: &Tensor, last: &Tensor, levels: usize) -> Result<Tensor> {
    let lift = |t: &Tensor| {
        let mut s = vec![1];
        s.extend_from_slice(t.shape());
        t.reshape(&s)
    };
    let a = wavelet::ll_multilevel(&lift(first)?, levels)?;
    let b = wavelet::ll_multilevel(&lift(last)?, levels)?;
    let (c, h, w) = (a.shape()[1], a.shape()[2], a.shape()[3]);
    let norm = LF_MAP_GAIN / (c as f64 * f64::powi(2.0, levels as i32));
    let diff = a.sub(&b)?;
    let d = diff.data();
    Ok(Tensor::from_fn(&[1, h, w], |i| {
        (0..c).map(|k| d[k * h * w + i].abs()).sum::<f64>() * norm
    }))
}

/// Writes `metrics.csv` (and images if asked) under `out`; returns the CSV.
/// Per-image and mean metrics of both stage outputs. `crop` pixels are
/// dropped from each side before comparing with ground truth; the
/// stage-to-stage `lf_mae` always uses the full frame.
pub fn cmd_eval(checkpoint: &Path, manifest_path: &Path, out: &Path, save_images: bool, crop: usize) -> Result<String> {
    let model = load_model(checkpoint)?;
    let manifest = load_manifest(Some(manifest_path), "eval")?;
    check_scale(model.config.scale, &manifest)?;
    let images = manifest.load_images()?;
    if images.is_empty() {
        return Err(Error::contract("eval", "manifest has no images"));
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut csv = String::from("image,psnr_y,ssim_y,perceptual_proxy,psnr_y_first,ssim_y_first,lf_mae\n");
    let mut sums = [0.0f64; 6];
    for pair in &images {
        let (first, last) = stage_outputs(&model, &pair.lr)?;
        let (cf, cl, hr) = (
            metrics::crop_border(&first, crop)?,
            metrics::crop_border(&last, crop)?,
            metrics::crop_border(&pair.hr, crop)?,
        );
        let row = [
            metrics::psnr_y(&cl, &hr)?,
            metrics::ssim_y(&cl, &hr)?,
            metrics::perceptual_proxy(&cl, &hr)?,
            metrics::psnr_y(&cf, &hr)?,
            metrics::ssim_y(&cf, &hr)?,
            metrics::lf_mae(&last, &first)?,
        ];
        let name = image_name(&manifest, pair);
        write!(csv, "{name}").expect("string write");
        for (s, v) in sums.iter_mut().zip(row) {
            *s += v;
            write!(csv, ",{v}").expect("string write");
        }
        csv.push('\n');
        if save_images {
            let dir = out.join("images");
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            data::save_png(&dir.join(format!("{name}_first.png")), &first)?;
            data::save_png(&dir.join(format!("{name}_final.png")), &last)?;
            let map = lf_difference_map(&first, &last, model.config.levels())?;
            data::save_png(&dir.join(format!("{name}_lfdiff.png")), &map)?;
        }
    }
    csv.push_str("mean");
    for s in sums {
        write!(csv, ",{}", s / images.len() as f64).expect("string write");
    }
    csv.push('\n');
    write_file(&out.join(METRICS_FILE), csv.as_bytes())?;
    Ok(csv)
}

/// Trade-off curve between two models' final outputs.
pub fn cmd_curve(
    checkpoint_o: &Path,
    checkpoint_p: &Path,
    manifest_path: &Path,
    alphas: &[f64],
    crop: usize,
) -> Result<String> {
    let model_o = load_model(checkpoint_o)?;
    let model_p = load_model(checkpoint_p)?;
    if model_o.config.scale != model_p.config.scale {
        return Err(Error::contract("curve", "the two checkpoints upsample by different factors"));
    }
    let manifest = load_manifest(Some(manifest_path), "curve")?;
    check_scale(model_o.config.scale, &manifest)?;
    let images = manifest.load_images()?;
    let mut y_o = Vec::with_capacity(images.len());
    let mut y_p = Vec::with_capacity(images.len());
    let mut gt = Vec::with_capacity(images.len());
    for pair in &images {
        y_o.push(metrics::crop_border(&stage_outputs(&model_o, &pair.lr)?.1, crop)?);
        y_p.push(metrics::crop_border(&stage_outputs(&model_p, &pair.lr)?.1, crop)?);
        gt.push(metrics::crop_border(&pair.hr, crop)?);
    }
    let points = metrics::build_tradeoff_curve(&y_o, &y_p, &gt, alphas)?;
    Ok(metrics::curve_csv(&points))
}
