//! Command-line front end: synthetic dataset generation, toy training,
//! dual-protocol evaluation, and the gradient-check suites.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use tinydet::checks::{run_gradcheck, CheckModule};
use tinydet::eval::{
    evaluate, load_detection_file, load_ground_truth_file, EvalConfig, Similarity,
};
use tinydet::harness::scene::{load_dataset, save_dataset};
use tinydet::harness::train::predict_dataset;
use tinydet::harness::{
    build_detector, gen_dataset, train, DetectorConfig, SceneConfig, TrainConfig,
};

#[derive(Parser)]
#[command(name = "tinydet", about = "Small-object detection toy harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic rectangle dataset (PGM images plus gt.json).
    GenData(GenDataArgs),
    /// Train the toy detector and write history and weights.
    TrainToy(TrainToyArgs),
    /// Score a detection file against ground truth.
    Eval(EvalArgs),
    /// Verify analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 200)]
    images: usize,
    /// Image side in pixels (multiple of 32).
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    objects_min: usize,
    #[arg(long, default_value_t = 3)]
    objects_max: usize,
    /// Smallest object side in pixels.
    #[arg(long, default_value_t = 3)]
    min_size: usize,
    /// Largest object side in pixels.
    #[arg(long, default_value_t = 8)]
    max_size: usize,
    /// Background clutter amplitude.
    #[arg(long, default_value_t = 0.15)]
    clutter: f64,
}

#[derive(Args)]
struct TrainToyArgs {
    /// Dataset directory from gen-data; a default 200-image 64x64 dataset
    /// is generated in memory when absent.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Detector configuration JSON; defaults to the full model.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for history.json, weights.bin and the manifest.
    #[arg(long)]
    out: PathBuf,
    /// Passes over the dataset; 12 epochs of 25 batches = 300 steps at
    /// the defaults.
    #[arg(long, default_value_t = 12)]
    epochs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.01)]
    lr: f64,
    #[arg(long, default_value_t = 5e-4)]
    weight_decay: f64,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
}

#[derive(Args)]
struct EvalArgs {
    /// Ground-truth JSON (images / annotations / categories).
    #[arg(long)]
    gt: PathBuf,
    /// Detection JSON (image_id / category_id / bbox / score records).
    #[arg(long)]
    dets: PathBuf,
    /// iou, safit, or both.
    #[arg(long, default_value = "both")]
    protocol: String,
    /// Size constant for the similarity measures; derived from the ground
    /// truth when absent.
    #[arg(long = "size-constant")]
    size_constant: Option<f64>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// all, rhwd, grm, csha, or losses.
    #[arg(long, default_value = "all")]
    module: CheckModule,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Serialize)]
struct ManifestEntry {
    name: String,
    len: usize,
    kind: &'static str,
}

fn cmd_gen_data(args: GenDataArgs) -> tinydet::Result<()> {
    let cfg = SceneConfig {
        size: args.size,
        objects_min: args.objects_min,
        objects_max: args.objects_max,
        min_size: args.min_size,
        max_size: args.max_size,
        clutter: args.clutter,
        seed: args.seed,
    };
    cfg.validate()?;
    let dataset = gen_dataset(&cfg, args.images)?;
    save_dataset(&args.out, &dataset)?;
    eprintln!(
        "wrote {} images and gt.json to {}",
        dataset.images.len(),
        args.out.display()
    );
    Ok(())
}

fn cmd_train_toy(args: TrainToyArgs) -> tinydet::Result<()> {
    let dataset = match &args.data {
        Some(dir) => load_dataset(dir)?,
        None => gen_dataset(&SceneConfig::default(), 200)?,
    };
    let det_cfg = match &args.config {
        Some(path) => DetectorConfig::from_json_file(path)?,
        None => DetectorConfig::default(),
    };
    let image_size = dataset.images[0].h;
    let mut detector = build_detector(&det_cfg, image_size, args.seed)?;
    let train_cfg = TrainConfig {
        lr: args.lr,
        weight_decay: args.weight_decay,
        batch_size: args.batch_size,
        seed: args.seed,
        ..TrainConfig::default()
    };
    let history = train(&mut detector, &dataset, args.epochs, &train_cfg)?;
    std::fs::create_dir_all(&args.out)?;
    std::fs::write(
        args.out.join("history.json"),
        serde_json::to_string_pretty(&history)?,
    )?;

    // Flat little-endian f64 weights with a sidecar manifest: learnable
    // parameters first, then the normalization running statistics.
    let mut manifest = Vec::new();
    let mut bytes = Vec::new();
    for (name, values) in detector.param_entries() {
        manifest.push(ManifestEntry { name, len: values.len(), kind: "parameter" });
        for v in values {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    for (name, values) in detector.buffer_entries() {
        manifest.push(ManifestEntry { name, len: values.len(), kind: "buffer" });
        for v in values {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(args.out.join("weights.bin"), &bytes)?;
    std::fs::write(
        args.out.join("weights.manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;

    // A final prediction pass over the training set for convenience.
    let dets = predict_dataset(
        &mut detector,
        &dataset,
        train_cfg.eval_score_threshold,
        train_cfg.eval_nms_threshold,
    )?;
    tinydet::eval::save_detection_file(&args.out.join("detections.json"), &dets)?;
    eprintln!(
        "trained {} steps; final loss {:.4}; artifacts in {}",
        history.step_total.len(),
        history.step_total.last().copied().unwrap_or(f64::NAN),
        args.out.display()
    );
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> tinydet::Result<()> {
    match args.protocol.as_str() {
        "iou" | "safit" | "both" => {}
        other => {
            return Err(tinydet::Error::Config(format!(
                "unknown protocol '{other}' (expected iou|safit|both)"
            )))
        }
    }
    let gt_file = load_ground_truth_file(&args.gt)?;
    let gts = gt_file.to_ground_truths()?;
    let dets = load_detection_file(&args.dets)?;
    let report = evaluate(&dets, &gts, &EvalConfig { size_constant: args.size_constant })?;
    let out = match args.protocol.as_str() {
        "iou" => serde_json::json!({
            "protocol": Similarity::Iou,
            "report": report.iou,
            "num_gt": report.num_gt,
            "num_detections": report.num_detections,
        }),
        "safit" => serde_json::json!({
            "protocol": Similarity::Safit,
            "report": report.safit,
            "num_gt": report.num_gt,
            "num_detections": report.num_detections,
            "size_constant": report.size_constant,
        }),
        _ => serde_json::to_value(&report)?,
    };
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(())
}

fn cmd_gradcheck(args: GradcheckArgs) -> tinydet::Result<bool> {
    let reports = run_gradcheck(args.module, args.seed)?;
    let all_pass = reports.iter().all(|(_, r)| r.pass);
    let named: Vec<serde_json::Value> = reports
        .iter()
        .map(|(name, r)| serde_json::json!({ "check": name, "report": r }))
        .collect();
    println!(
        "{}",
        serde_json::to_string_pretty(&serde_json::json!({
            "module": args.module,
            "pass": all_pass,
            "checks": named,
        }))?
    );
    Ok(all_pass)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::GenData(args) => cmd_gen_data(args).map(|()| true),
        Command::TrainToy(args) => cmd_train_toy(args).map(|()| true),
        Command::Eval(args) => cmd_eval(args).map(|()| true),
        Command::Gradcheck(args) => cmd_gradcheck(args),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
