//! `pnerv`: train, evaluate, compress and analyze pyramidal neural video
//! representations from the command line.
//!
//! Exit codes: 0 on success, 1 on pipeline failure (with a structured JSON
//! error on stderr), 2 on usage errors.

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};
use pnerv_core::codec;
use pnerv_core::kfc;
use pnerv_core::metrics::QualityReport;
use pnerv_core::model::{load_checkpoint, save_checkpoint, PNeRVConfig, PNeRVModel};
use pnerv_core::trainer::{self, TrainConfig, TrainMode};
use pnerv_core::uat;
use pnerv_core::video::{load_video, VideoClip};
use serde::Deserialize;
use std::path::{Path, PathBuf};

mod gradcheck;

#[derive(Parser)]
#[command(name = "pnerv", version, about = "Pyramidal neural video representation toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Overfit a model to a video and write a checkpoint plus a CSV loss log.
    Train(TrainArgs),
    /// Score a checkpoint against a video; prints a quality report as JSON.
    Eval(EvalArgs),
    /// Quantize a checkpoint and embeddings to an 8-bit bitstream.
    Compress(CompressArgs),
    /// Expand a bitstream back into a checkpoint.
    Decompress(DecompressArgs),
    /// Profile a clip's rate of dynamics and capacity bound.
    Analyze(AnalyzeArgs),
    /// Parameter/FLOP budgets of the upscaling operators.
    Budget(BudgetArgs),
    /// Finite-difference validation of every differentiable operation.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Input video: an .rgbv file or a directory of P6 PPM frames.
    #[arg(long)]
    video: PathBuf,
    /// JSON config file with optional "model" and "train" sections.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output checkpoint path.
    #[arg(long)]
    out: PathBuf,
    /// Training protocol.
    #[arg(long, value_enum)]
    mode: Option<CliMode>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Peak learning rate of the cosine schedule.
    #[arg(long)]
    lr: Option<f64>,
    /// Overrides both the model-init and training seeds.
    #[arg(long)]
    seed: Option<u64>,
    /// CSV log path; defaults to the checkpoint path with extension "csv".
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum CliMode {
    Regression,
    Interpolation,
}

impl From<CliMode> for TrainMode {
    fn from(m: CliMode) -> TrainMode {
        match m {
            CliMode::Regression => TrainMode::Regression,
            CliMode::Interpolation => TrainMode::Interpolation,
        }
    }
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    video: PathBuf,
    #[arg(long)]
    model: PathBuf,
}

#[derive(Args)]
struct CompressArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    video: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DecompressArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long)]
    video: PathBuf,
    /// Comma-separated error levels to invert the modulus at.
    #[arg(long, value_delimiter = ',')]
    eps: Vec<f64>,
}

#[derive(Args)]
struct BudgetArgs {
    /// Report per-shortcut budgets of this config instead of the flagship
    /// upscale shapes.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Channel count of the upscaled map.
    #[arg(long, default_value_t = 16)]
    channels: u64,
    #[arg(long, default_value_t = 2)]
    in_h: u64,
    #[arg(long, default_value_t = 4)]
    in_w: u64,
    #[arg(long, default_value_t = 320)]
    out_h: u64,
    #[arg(long, default_value_t = 640)]
    out_w: u64,
    /// Kernel size of the PixelShuffle expansion conv.
    #[arg(long, default_value_t = 1)]
    kernel: u64,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// JSON config file: both sections optional, field names mirror the structs.
#[derive(Deserialize, Default)]
struct FileConfig {
    #[serde(default)]
    model: Option<PNeRVConfig>,
    #[serde(default)]
    train: Option<TrainConfig>,
}

fn read_file_config(path: Option<&Path>) -> anyhow::Result<FileConfig> {
    let Some(path) = path else { return Ok(FileConfig::default()) };
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
}

/// Print any serializable value as JSON with sorted keys.
fn print_json<T: serde::Serialize>(value: &T) -> anyhow::Result<()> {
    let v = serde_json::to_value(value)?;
    println!("{}", serde_json::to_string_pretty(&v)?);
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Compress(args) => cmd_compress(args),
        Command::Decompress(args) => cmd_decompress(args),
        Command::Analyze(args) => cmd_analyze(args),
        Command::Budget(args) => cmd_budget(args),
        Command::Gradcheck(args) => cmd_gradcheck(args),
    };
    if let Err(e) = outcome {
        eprintln!("{}", serde_json::json!({ "error": format!("{e:#}") }));
        std::process::exit(1);
    }
}

fn load_clip(path: &Path) -> anyhow::Result<VideoClip> {
    load_video(path).with_context(|| format!("loading video {}", path.display()))
}

fn cmd_train(args: TrainArgs) -> anyhow::Result<()> {
    let clip = load_clip(&args.video)?;
    let file_cfg = read_file_config(args.config.as_deref())?;
    let mut model_cfg = file_cfg.model.unwrap_or_default();
    let mut train_cfg = file_cfg.train.unwrap_or_default();
    if let Some(mode) = args.mode {
        train_cfg.mode = mode.into();
    }
    if let Some(epochs) = args.epochs {
        train_cfg.epochs = epochs;
    }
    if let Some(lr) = args.lr {
        train_cfg.lr_max = lr;
    }
    if let Some(seed) = args.seed {
        model_cfg.seed = seed;
        train_cfg.seed = seed;
    }
    if (model_cfg.out_height(), model_cfg.out_width()) != (clip.height(), clip.width()) {
        bail!(
            "config decodes {}x{} but the video is {}x{}",
            model_cfg.out_height(),
            model_cfg.out_width(),
            clip.height(),
            clip.width()
        );
    }

    let mut model = PNeRVModel::build(model_cfg)?;
    let report = trainer::train(&mut model, &clip, &train_cfg)?;
    save_checkpoint(&model, Some(train_cfg.mode.as_str().to_string()), &args.out)?;

    let log_path = args.log.unwrap_or_else(|| args.out.with_extension("csv"));
    let mut csv = Vec::new();
    report.write_csv(&mut csv)?;
    std::fs::write(&log_path, csv)?;

    print_json(&serde_json::json!({
        "checkpoint": args.out.display().to_string(),
        "log": log_path.display().to_string(),
        "epochs": report.epochs.len(),
        "trained_frames": report.trained_frames,
        "final_loss": report.final_loss(),
        "final_psnr": report.final_psnr(),
    }))
}

fn cmd_eval(args: EvalArgs) -> anyhow::Result<()> {
    let clip = load_clip(&args.video)?;
    let (model, meta) = load_checkpoint(&args.model)?;
    if (model.config().out_height(), model.config().out_width()) != (clip.height(), clip.width()) {
        bail!(
            "model decodes {}x{} but the video is {}x{}",
            model.config().out_height(),
            model.config().out_width(),
            clip.height(),
            clip.width()
        );
    }
    // Interpolation-trained checkpoints are scored on their held-out
    // (even-numbered) frames.
    let mode = match meta.trained_mode.as_deref() {
        Some("interpolation") => TrainMode::Interpolation,
        _ => TrainMode::Regression,
    };
    let frames = trainer::eval_frames(mode, clip.frame_count());
    let mut preds = Vec::with_capacity(frames.len());
    let mut targets = Vec::with_capacity(frames.len());
    for &t in &frames {
        let e = model.encode(&clip, t)?;
        preds.push(model.decode_frame(&e)?);
        targets.push(clip.frame(t)?.clone());
    }
    let report = QualityReport::compare(frames, &preds, &targets)?;
    print_json(&report)
}

fn cmd_compress(args: CompressArgs) -> anyhow::Result<()> {
    let clip = load_clip(&args.video)?;
    let (model, _) = load_checkpoint(&args.model)?;
    let embeddings = model.encode_all(&clip)?;
    let rate = codec::compress(&model, &embeddings, &args.out)?;
    // Quality through the quantized path, measured against the source.
    let rd = codec::rate_distortion(&model, &clip)?;
    print_json(&serde_json::json!({
        "bitstream": args.out.display().to_string(),
        "rate": rate,
        "quantized_psnr": rd.psnr,
        "quantized_ms_ssim": rd.ms_ssim,
    }))
}

fn cmd_decompress(args: DecompressArgs) -> anyhow::Result<()> {
    let bytes = std::fs::read(&args.input)
        .with_context(|| format!("reading bitstream {}", args.input.display()))?;
    let blob = codec::read_blob(&bytes[..])?;
    let (model, embeddings) = codec::decompress_from_slice(&bytes)?;
    save_checkpoint(&model, blob.meta.trained_mode.clone(), &args.out)?;
    let model_bits: u64 = blob
        .model_tensors
        .iter()
        .map(|(_, q)| q.codes.len() as u64 * 8)
        .sum();
    let embed_bits = embeddings.total_elems() as u64 * 8;
    let (h, w) = (model.config().out_height(), model.config().out_width());
    print_json(&serde_json::json!({
        "checkpoint": args.out.display().to_string(),
        "frames": embeddings.frame_count(),
        "bpp": pnerv_core::metrics::bpp(model_bits, embed_bits, embeddings.frame_count(), h, w),
    }))
}

fn cmd_analyze(args: AnalyzeArgs) -> anyhow::Result<()> {
    let clip = load_clip(&args.video)?;
    if clip.frame_count() < 2 {
        bail!("dynamics analysis needs at least two frames");
    }
    let profile = uat::DynamicsProfile::of_clip(&clip)?;
    let d_out = 3 * clip.height() * clip.width();
    let diam = (clip.frame_count() - 1) as f64;
    let per_eps: Vec<serde_json::Value> = args
        .eps
        .iter()
        .map(|&eps| {
            let omega_inv = uat::dual_modulus(&profile, eps);
            let bound = uat::param_bound(&uat::BoundQuery {
                d_in: 1,
                d_out,
                diam,
                epsilon: eps,
                omega_inv: omega_inv as f64,
            })
            .map(|b| serde_json::to_value(b).unwrap())
            .unwrap_or(serde_json::Value::Null);
            serde_json::json!({
                "eps": eps,
                "omega_inv": omega_inv,
                // Up to the suppressed big-O constant (fixed at 1).
                "param_bound": bound,
            })
        })
        .collect();
    print_json(&serde_json::json!({
        "T": profile.frame_count,
        "norm": profile.norm,
        "omega_table": profile.omega,
        "queries": per_eps,
    }))
}

fn cmd_budget(args: BudgetArgs) -> anyhow::Result<()> {
    if let Some(cfg_path) = &args.config {
        let file_cfg = read_file_config(Some(cfg_path))?;
        let cfg = file_cfg
            .model
            .ok_or_else(|| anyhow!("config file has no \"model\" section"))?;
        cfg.validate()?;
        let (tc, th, tw) = cfg.embed_temporal_shape;
        let rows: Vec<serde_json::Value> = (2..=5)
            .map(|l| {
                let (lh, lw) = cfg.layer_dims(l);
                serde_json::json!({
                    "layer": l,
                    "from": [tc, th, tw],
                    "to": [tc, lh, lw],
                    "operators": budget_rows(tc as u64, th as u64, tw as u64, lh as u64, lw as u64, 1),
                })
            })
            .collect();
        return print_json(&serde_json::json!({ "shortcuts": rows }));
    }

    let (c, ih, iw, oh, ow, k) =
        (args.channels, args.in_h, args.in_w, args.out_h, args.out_w, args.kernel);
    let kfc_budget = kfc::kfc_param_count(c, ih, iw, oh, ow);
    let ps_budget = kfc::pixelshuffle_param_count(c, k, oh / ih);
    let ratio = kfc_budget.total_params() as f64 / ps_budget.total_params() as f64;
    print_json(&serde_json::json!({
        "shapes": { "channels": c, "in": [ih, iw], "out": [oh, ow], "kernel": k, "rate": oh / ih },
        "operators": budget_rows(c, ih, iw, oh, ow, k),
        "kfc_kernel_params": kfc_budget.kernel_params,
        "kfc_total_params": kfc_budget.total_params(),
        "pixelshuffle_params": ps_budget.total_params(),
        "ratio_kfc_total_to_pixelshuffle": ratio,
    }))
}

/// One budget row per operator kind at a `(c, ih, iw) -> (c, oh, ow)`
/// upscale. Subpixel operators are reported at the axis rate `oh / ih`.
fn budget_rows(c: u64, ih: u64, iw: u64, oh: u64, ow: u64, kernel: u64) -> Vec<serde_json::Value> {
    let rate = if ih > 0 { (oh / ih).max(1) } else { 1 };
    let entries = [
        kfc::kfc_param_count(c, ih, iw, oh, ow),
        kfc::pixelshuffle_flops(c, kernel, rate, ih, iw),
        kfc::deconv_budget(c, rate, ih, iw),
        kfc::bilinear_budget(c, 3, rate, ih, iw),
    ];
    entries
        .iter()
        .map(|b| {
            serde_json::json!({
                "kind": b.kind,
                "kernel_params": b.kernel_params,
                "bias_params": b.bias_params,
                "total_params": b.total_params(),
                "macs": b.macs,
                "extra_adds": b.extra_adds,
                "total_flops": b.total_flops(),
            })
        })
        .collect()
}

fn cmd_gradcheck(args: GradcheckArgs) -> anyhow::Result<()> {
    let results = gradcheck::run_suite(args.seed)?;
    let mut failed = 0;
    for r in &results {
        let status = if r.passed { "PASS" } else { "FAIL" };
        println!("{status} {name}: max_rel_err = {err:.3e}", name = r.name, err = r.max_rel_err);
        if !r.passed {
            failed += 1;
        }
    }
    if failed > 0 {
        bail!("{failed} gradient check(s) failed");
    }
    Ok(())
}
