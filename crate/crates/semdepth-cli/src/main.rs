//! Batch command-line surface for the semdepth toolkit.
//!
//! Subcommands: `toygen` (synthetic dataset), `prepare` (AFOV unification
//! and resize), `train`, `eval`, `segment` (label generation), `analyze`
//! (depth/accuracy heat maps), `compare` (windowed metric tables). Every
//! command is deterministic given its config and seed, prints a single
//! summary line, and lists the paths it wrote. Exit codes: 0 success, 1
//! runtime failure, 2 usage error.

use clap::{Args, Parser, Subcommand};
use semdepth::adapt::{
    apply_crop_resize, generate_toy_dataset, load_manifest, lyft_reference_afov_deg,
    plan_afov_crop, registry_by_name, write_dataset,
};
use semdepth::analysis::{
    accuracy_heatmap, default_distance_ranges, depth_heatmap, emit_report, write_accuracy_heatmap,
    Normalization, RunSummary, DEFAULT_ERROR_BIN_M, DEFAULT_ERROR_MAX_M, DEFAULT_ERROR_MIN_M,
};
use semdepth::core::DepthMap;
use semdepth::harness::{
    evaluate, generate_segmentation, train, EvalResult, HarnessError, RunConfig, RunLog,
};
use semdepth::kv::KvMap;
use semdepth::metrics::MetricReport;
use semdepth::models::Model;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "semdepth",
    about = "Semantic-segmentation-assisted depth estimation toolkit",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a deterministic synthetic toy dataset.
    Toygen(ToygenArgs),
    /// Crop a dataset to a reference field of view and resize it.
    Prepare(PrepareArgs),
    /// Train a model from a run-config file.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a manifest.
    Eval(EvalArgs),
    /// Generate one-hot semantic predictions for a manifest.
    Segment(SegmentArgs),
    /// Statistical analyses.
    #[command(subcommand)]
    Analyze(AnalyzeCommand),
    /// Windowed-average metric tables and relative superiority from run logs.
    Compare(CompareArgs),
}

#[derive(Args)]
struct ToygenArgs {
    /// Number of samples.
    #[arg(long)]
    n: usize,
    /// Square image size in pixels (divisible by 32).
    #[arg(long)]
    size: usize,
    #[arg(long)]
    seed: u64,
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
    /// Class registry name.
    #[arg(long, default_value = "common")]
    registry: String,
    #[arg(long, default_value_t = 0.75)]
    train_fraction: f64,
    #[arg(long, default_value_t = 0)]
    split_seed: u64,
}

#[derive(Args)]
struct PrepareArgs {
    /// Source dataset manifest.
    #[arg(long)]
    manifest: PathBuf,
    /// Reference dataset whose AFOV to match (currently: lyft).
    #[arg(long, default_value = "lyft")]
    target_afov_ref: String,
    /// Output size WxH after the crop.
    #[arg(long, default_value = "1216x352")]
    target_size: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Run-config file (flat dotted keys).
    #[arg(long)]
    config: PathBuf,
    /// Override config keys, e.g. --set train.seed=7 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Optional CSV output path for the metric report.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SegmentArgs {
    /// U-Net checkpoint directory.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
}

#[derive(Subcommand)]
enum AnalyzeCommand {
    /// Per-row depth-distribution heat map of a dataset.
    DepthHeatmap(DepthHeatmapArgs),
    /// Error histograms per distance range for a checkpoint.
    AccuracyHeatmap(AccuracyHeatmapArgs),
}

#[derive(Args)]
struct DepthHeatmapArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Histogram range in meters.
    #[arg(long, default_value_t = 100.0)]
    range: f64,
    /// Bin size in meters.
    #[arg(long, default_value_t = 0.2)]
    bin: f64,
    /// Normalization: global or per_row.
    #[arg(long, default_value = "global")]
    norm: String,
}

#[derive(Args)]
struct AccuracyHeatmapArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CompareArgs {
    /// Run logs as NAME=PATH (repeatable).
    #[arg(long = "log", value_name = "NAME=PATH", required = true)]
    logs: Vec<String>,
    /// Split whose evaluations are averaged.
    #[arg(long, default_value = "test")]
    split: String,
    /// Inclusive evaluation-epoch window FROM:TO.
    #[arg(long, default_value = "1:1000000")]
    window: String,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    if let Ok(device) = std::env::var("SEMDEPTH_DEVICE") {
        if !device.eq_ignore_ascii_case("cpu") && !device.is_empty() {
            eprintln!("error: SEMDEPTH_DEVICE={device:?} is not supported (only \"cpu\")");
            return ExitCode::from(2);
        }
    }
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Result<(), Box<dyn std::error::Error>> {
    match cli.command {
        Command::Toygen(args) => toygen(args),
        Command::Prepare(args) => prepare(args),
        Command::Train(args) => do_train(args),
        Command::Eval(args) => do_eval(args),
        Command::Segment(args) => segment(args),
        Command::Analyze(AnalyzeCommand::DepthHeatmap(args)) => analyze_depth(args),
        Command::Analyze(AnalyzeCommand::AccuracyHeatmap(args)) => analyze_accuracy(args),
        Command::Compare(args) => compare(args),
    }
}

fn toygen(args: ToygenArgs) -> Result<(), Box<dyn std::error::Error>> {
    let registry = registry_by_name(&args.registry)?;
    let samples = generate_toy_dataset(args.n, args.size, &registry, args.seed)?;
    let manifest =
        write_dataset(&args.out, &samples, &registry, args.split_seed, args.train_fraction)?;
    println!(
        "toygen: wrote {} samples of {}x{} (seed {}) under {}",
        args.n,
        args.size,
        args.size,
        args.seed,
        args.out.display()
    );
    println!("{}", manifest.display());
    Ok(())
}

fn parse_size(s: &str) -> Result<(usize, usize), Box<dyn std::error::Error>> {
    let (w, h) = s
        .split_once('x')
        .ok_or_else(|| format!("target size must look like 1216x352, got {s:?}"))?;
    Ok((w.parse()?, h.parse()?))
}

fn prepare(args: PrepareArgs) -> Result<(), Box<dyn std::error::Error>> {
    let manifest = load_manifest(&args.manifest)?;
    let (target_h, target_v) = match args.target_afov_ref.as_str() {
        "lyft" => lyft_reference_afov_deg(),
        other => return Err(format!("unknown AFOV reference {other:?}").into()),
    };
    let (tw, th) = parse_size(&args.target_size)?;
    let plan =
        plan_afov_crop(&manifest.intrinsics(), target_h, target_v)?.with_target_size(tw, th);
    let mut out_samples = Vec::with_capacity(manifest.len());
    for frame in &manifest.frames {
        let sample = manifest.load_sample(frame)?;
        out_samples.push(apply_crop_resize(&sample, &plan)?);
    }
    let out_manifest = write_dataset(
        &args.out,
        &out_samples,
        &manifest.registry,
        manifest.split_seed,
        manifest.train_fraction,
    )?;
    println!(
        "prepare: {} frames cropped to {}x{} (achieved AFOV {:.2}°/{:.2}°), resized to {}x{}",
        manifest.len(),
        plan.crop_width_px,
        plan.crop_height_px,
        plan.achieved_afov_deg.0,
        plan.achieved_afov_deg.1,
        tw,
        th
    );
    println!("{}", out_manifest.display());
    Ok(())
}

fn do_train(args: TrainArgs) -> Result<(), Box<dyn std::error::Error>> {
    let mut kv = KvMap::load(&args.config)?;
    for pair in &args.overrides {
        let (key, value) = pair
            .split_once('=')
            .ok_or_else(|| format!("--set expects KEY=VALUE, got {pair:?}"))?;
        kv.set(key.trim(), value.trim());
    }
    let base = args.config.parent().unwrap_or_else(|| Path::new("."));
    let config = RunConfig::from_kv(&kv, base)?;
    let outcome = train(&config)?;
    let last_loss = outcome
        .run_log
        .records
        .iter()
        .rev()
        .find(|r| r.metric == "loss")
        .map(|r| r.value);
    println!(
        "train: {} finished; final train loss {}",
        config.model_spec.variant.as_str(),
        last_loss.map_or("n/a".to_string(), |v| format!("{v:.4}"))
    );
    println!("{}", outcome.run_log_path.display());
    println!("{}", outcome.final_checkpoint.display());
    Ok(())
}

fn do_eval(args: EvalArgs) -> Result<(), Box<dyn std::error::Error>> {
    let model = Model::load(&args.checkpoint)?;
    let manifest = load_manifest(&args.manifest)?;
    match evaluate(&model, &manifest)? {
        EvalResult::Depth(report) => {
            println!(
                "eval: {} on {} ({} px): mape {:.4} rmse {:.4} delta1 {:.4}",
                model.spec().variant.as_str(),
                manifest.dataset_id,
                report.n_valid_pixels,
                report.mape,
                report.rmse,
                report.delta1
            );
            if let Some(out) = args.out {
                let text = format!("{}\n{}\n", MetricReport::CSV_HEADER, report.to_csv_row());
                std::fs::write(&out, text)?;
                println!("{}", out.display());
            }
        }
        EvalResult::Segmentation(summary) => {
            println!(
                "eval: {} on {}: mean IoU {:.4} over {} present classes",
                model.spec().variant.as_str(),
                manifest.dataset_id,
                summary.mean_iou,
                summary.absent.iter().filter(|a| !**a).count()
            );
            if let Some(out) = args.out {
                let mut text = String::from("class,iou,absent\n");
                for (k, (v, a)) in summary.per_class.iter().zip(&summary.absent).enumerate() {
                    text.push_str(&format!("{k},{v},{a}\n"));
                }
                std::fs::write(&out, text)?;
                println!("{}", out.display());
            }
        }
    }
    Ok(())
}

fn segment(args: SegmentArgs) -> Result<(), Box<dyn std::error::Error>> {
    let model = Model::load(&args.checkpoint)?;
    let manifest = load_manifest(&args.manifest)?;
    let written = generate_segmentation(&model, &manifest)?;
    println!(
        "segment: wrote {} one-hot label maps for {}",
        written.len(),
        manifest.dataset_id
    );
    for p in written.iter().take(3) {
        println!("{}", p.display());
    }
    if written.len() > 3 {
        println!("... and {} more", written.len() - 3);
    }
    Ok(())
}

fn analyze_depth(args: DepthHeatmapArgs) -> Result<(), Box<dyn std::error::Error>> {
    let manifest = load_manifest(&args.manifest)?;
    if !manifest.has_depth {
        return Err(HarnessError::ManifestLacksDepth(manifest.dataset_id.clone()).into());
    }
    let norm = match args.norm.as_str() {
        "global" => Normalization::Global,
        "per_row" => Normalization::PerRow,
        other => return Err(format!("unknown normalization {other:?}").into()),
    };
    let samples = manifest.load_all()?;
    let depths: Vec<&DepthMap> = samples.iter().filter_map(|s| s.depth.as_ref()).collect();
    let hm = depth_heatmap(&depths, args.range, args.bin, norm)?;
    let files = emit_report(&[], &[(manifest.dataset_id.clone(), &hm)], &args.out)?;
    println!(
        "analyze depth-heatmap: {} ({} rows x {} bins, {} empty rows, {})",
        manifest.dataset_id,
        hm.rows(),
        hm.bins(),
        hm.empty_rows.len(),
        norm.as_str()
    );
    for f in files {
        println!("{}", f.display());
    }
    Ok(())
}

fn analyze_accuracy(args: AccuracyHeatmapArgs) -> Result<(), Box<dyn std::error::Error>> {
    let model = Model::load(&args.checkpoint)?;
    let manifest = load_manifest(&args.manifest)?;
    if !manifest.has_depth {
        return Err(HarnessError::ManifestLacksDepth(manifest.dataset_id.clone()).into());
    }
    let samples = manifest.load_all()?;
    let mut pairs = Vec::new();
    for sample in &samples {
        let out = model.forward(sample)?;
        let pred = DepthMap::prediction(out.depth.ok_or("checkpoint is not a depth model")?);
        pairs.push((pred, sample.depth.clone().expect("depth checked above")));
    }
    let pair_refs: Vec<(&DepthMap, &DepthMap)> = pairs.iter().map(|(p, g)| (p, g)).collect();
    let hm = accuracy_heatmap(
        &pair_refs,
        &default_distance_ranges(),
        DEFAULT_ERROR_MIN_M,
        DEFAULT_ERROR_MAX_M,
        DEFAULT_ERROR_BIN_M,
    )?;
    let name = format!("{}_{}", model.spec().variant.as_str(), manifest.dataset_id);
    let files = write_accuracy_heatmap(&args.out, &name, &hm)?;
    println!(
        "analyze accuracy-heatmap: {} ranges x {} error bins ({} empty ranges)",
        hm.values.dim().0,
        hm.values.dim().1,
        hm.empty_ranges.len()
    );
    for f in files {
        println!("{}", f.display());
    }
    Ok(())
}

fn compare(args: CompareArgs) -> Result<(), Box<dyn std::error::Error>> {
    let (from, to) = args
        .window
        .split_once(':')
        .ok_or("window must look like FROM:TO")
        .and_then(|(a, b)| {
            Ok((a.parse().map_err(|_| "bad window")?, b.parse().map_err(|_| "bad window")?))
        })
        .map_err(|e: &str| e.to_string())?;
    let mut runs = Vec::new();
    for spec in &args.logs {
        let (name, path) = spec
            .split_once('=')
            .ok_or_else(|| format!("--log expects NAME=PATH, got {spec:?}"))?;
        runs.push(RunSummary {
            name: name.to_string(),
            log: RunLog::load(Path::new(path))?,
            split: args.split.clone(),
            window: (from, to),
            trainable_params: None,
            runtime_s: None,
        });
    }
    let files = emit_report(&runs, &[], &args.out)?;
    println!(
        "compare: {} runs over split {:?}, evaluation epochs {}..={}",
        runs.len(),
        args.split,
        from,
        to
    );
    for f in files {
        println!("{}", f.display());
    }
    Ok(())
}
