//! Training and evaluation orchestration: run configs, the Adam training
//! loop with cadenced evaluation and checkpointing, pixel-weighted
//! manifest evaluation, segmentation generation, and windowed metric
//! averages over run logs.

use crate::adapt::{load_manifest, write_predicted_semantics, AdaptError, DatasetManifest};
use crate::core::{DepthMap, Sample, SemanticLabelMap};
use crate::kv::{KvError, KvMap};
use crate::metrics::{MetricAccumulator, MetricReport, MetricsError};
use crate::models::{
    assemble_batch, build, parameter_count, run_graph, BatchInput, GraphOutputs, Model,
    ModelError, ModelSpec, Variant,
};
use crate::nn::{Adam, Graph, NodeId, Tensor4};
use ndarray::{Array4, s};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Adapt(#[from] AdaptError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("config: {0}")]
    BadConfig(String),
    #[error("manifest lacks depth (dataset {0})")]
    ManifestLacksDepth(String),
    #[error("manifest lacks semantic labels (dataset {0})")]
    ManifestLacksSemantic(String),
    #[error("loss became non-finite at step {step}; last good checkpoint: {last_checkpoint:?}")]
    NonFiniteLoss { step: usize, last_checkpoint: Option<PathBuf> },
    #[error("empty evaluation window {from}..={to} for split {split:?} metric {metric:?}")]
    EmptyWindow { metric: String, split: String, from: usize, to: usize },
    #[error("run log: {0}")]
    BadRunLog(String),
    #[error("io error at {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

impl From<KvError> for HarnessError {
    fn from(e: KvError) -> Self {
        HarnessError::BadConfig(e.to_string())
    }
}

/// Training loss selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    /// Masked MAPE on the depth output.
    Mape,
    /// Depth MAPE plus the mean of per-class branch MAPEs (semantic-decoder
    /// variants; each branch is supervised only on its class's pixels).
    MapePerClass,
    /// Depth MAPE plus one aggregate MAPE over all branch outputs.
    MapeComposite,
    /// `1 − mean soft IoU` for segmentation.
    Iou,
}

impl LossKind {
    pub fn default_for(variant: Variant) -> LossKind {
        if variant == Variant::Unet {
            LossKind::Iou
        } else if variant.has_semantic_decoders() {
            LossKind::MapePerClass
        } else {
            LossKind::Mape
        }
    }

    pub fn parse(s: &str) -> Result<Self, HarnessError> {
        match s {
            "mape" => Ok(LossKind::Mape),
            "mape_per_class" => Ok(LossKind::MapePerClass),
            "mape_composite" => Ok(LossKind::MapeComposite),
            "iou" => Ok(LossKind::Iou),
            other => Err(HarnessError::BadConfig(format!("unknown loss {other:?}"))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            LossKind::Mape => "mape",
            LossKind::MapePerClass => "mape_per_class",
            LossKind::MapeComposite => "mape_composite",
            LossKind::Iou => "iou",
        }
    }
}

/// Evaluation cadence during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalCadence {
    PerEpoch,
    EveryKBatches(usize),
}

/// A complete training run description.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub model_spec: ModelSpec,
    pub train_manifests: Vec<PathBuf>,
    /// (split label, manifest paths) evaluated at the configured cadence.
    pub eval_sets: Vec<(String, Vec<PathBuf>)>,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: Option<usize>,
    pub max_batches: Option<usize>,
    pub eval_cadence: EvalCadence,
    pub loss: LossKind,
    pub seed: u64,
    pub output_dir: PathBuf,
}

impl RunConfig {
    /// Parses a flat key/value config. Relative manifest paths resolve
    /// against `base_dir`. Unknown keys are rejected.
    pub fn from_kv(kv: &KvMap, base_dir: &Path) -> Result<RunConfig, HarnessError> {
        for key in kv.keys() {
            let known = matches!(
                key,
                "model.variant"
                    | "model.input_width"
                    | "model.input_height"
                    | "model.n_classes"
                    | "model.width_scale"
                    | "model.seed"
                    | "data.train_manifests"
                    | "train.batch_size"
                    | "train.learning_rate"
                    | "train.epochs"
                    | "train.max_batches"
                    | "train.eval_every"
                    | "train.loss"
                    | "train.seed"
                    | "out.dir"
            ) || key.starts_with("eval.");
            if !known {
                return Err(HarnessError::BadConfig(format!("unknown key {key:?}")));
            }
        }
        let variant = Variant::parse(kv.require("model.variant")?)?;
        let model_spec = ModelSpec {
            variant,
            input_width: kv.require_parsed("model.input_width")?,
            input_height: kv.require_parsed("model.input_height")?,
            n_classes: kv.require_parsed("model.n_classes")?,
            width_scale: kv.parsed_or("model.width_scale", 1.0)?,
            seed: kv.parsed_or("model.seed", 0)?,
        };
        let resolve = |p: &str| {
            let path = Path::new(p);
            if path.is_absolute() {
                path.to_path_buf()
            } else {
                base_dir.join(path)
            }
        };
        let train_manifests: Vec<PathBuf> = kv
            .require("data.train_manifests")?
            .split(',')
            .map(|p| resolve(p.trim()))
            .collect();
        let mut eval_sets = Vec::new();
        for key in kv.keys().filter(|k| k.starts_with("eval.")) {
            let label = key.trim_start_matches("eval.").to_string();
            let paths = kv
                .require(key)?
                .split(',')
                .map(|p| resolve(p.trim()))
                .collect();
            eval_sets.push((label, paths));
        }
        let epochs: Option<usize> = match kv.get("train.epochs") {
            Some(v) => Some(v.parse().map_err(|_| {
                HarnessError::BadConfig(format!("train.epochs: bad value {v:?}"))
            })?),
            None => None,
        };
        let max_batches: Option<usize> = match kv.get("train.max_batches") {
            Some(v) => Some(v.parse().map_err(|_| {
                HarnessError::BadConfig(format!("train.max_batches: bad value {v:?}"))
            })?),
            None => None,
        };
        let eval_cadence = match kv.get("train.eval_every").unwrap_or("per_epoch") {
            "per_epoch" => EvalCadence::PerEpoch,
            k => EvalCadence::EveryKBatches(k.parse().map_err(|_| {
                HarnessError::BadConfig(format!("train.eval_every: bad value {k:?}"))
            })?),
        };
        let loss = match kv.get("train.loss") {
            Some(v) => LossKind::parse(v)?,
            None => LossKind::default_for(variant),
        };
        let config = RunConfig {
            model_spec,
            train_manifests,
            eval_sets,
            batch_size: kv.parsed_or("train.batch_size", 2)?,
            learning_rate: kv.parsed_or("train.learning_rate", 0.001)?,
            epochs,
            max_batches,
            eval_cadence,
            loss,
            seed: kv.parsed_or("train.seed", 0)?,
            output_dir: resolve(kv.get("out.dir").unwrap_or("run_out")),
        };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        self.model_spec.validate()?;
        if self.batch_size == 0 {
            return Err(HarnessError::BadConfig("batch_size must be at least 1".into()));
        }
        match (self.epochs, self.max_batches) {
            (None, None) => {
                Err(HarnessError::BadConfig("set train.epochs or train.max_batches".into()))
            }
            (Some(_), Some(_)) => Err(HarnessError::BadConfig(
                "train.epochs and train.max_batches are mutually exclusive".into(),
            )),
            _ => Ok(()),
        }
    }
}

/// One run-log record; `wall_time_s` is informational and excluded from
/// equality so fixed-seed runs compare identical.
#[derive(Debug, Clone)]
pub struct LogRecord {
    pub step: usize,
    pub split: String,
    pub metric: String,
    pub value: f64,
    pub wall_time_s: f64,
}

impl PartialEq for LogRecord {
    fn eq(&self, other: &Self) -> bool {
        self.step == other.step
            && self.split == other.split
            && self.metric == other.metric
            && self.value == other.value
    }
}

/// Ordered training/evaluation records.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunLog {
    pub records: Vec<LogRecord>,
}

pub const RUN_LOG_HEADER: &str = "step,split,metric_name,value,wall_time_s";

impl RunLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(RUN_LOG_HEADER);
        out.push('\n');
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.step, r.split, r.metric, r.value, r.wall_time_s
            ));
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<RunLog, HarnessError> {
        let mut lines = text.lines();
        match lines.next() {
            Some(h) if h == RUN_LOG_HEADER => {}
            other => {
                return Err(HarnessError::BadRunLog(format!(
                    "expected header {RUN_LOG_HEADER:?}, got {other:?}"
                )))
            }
        }
        let mut records = Vec::new();
        for (i, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split(',').collect();
            if parts.len() != 5 {
                return Err(HarnessError::BadRunLog(format!("line {}: {line:?}", i + 2)));
            }
            let parse_err = |what: &str| HarnessError::BadRunLog(format!("line {}: bad {what}", i + 2));
            records.push(LogRecord {
                step: parts[0].parse().map_err(|_| parse_err("step"))?,
                split: parts[1].to_string(),
                metric: parts[2].to_string(),
                value: parts[3].parse().map_err(|_| parse_err("value"))?,
                wall_time_s: parts[4].parse().map_err(|_| parse_err("wall_time"))?,
            });
        }
        Ok(RunLog { records })
    }

    pub fn load(path: &Path) -> Result<RunLog, HarnessError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| HarnessError::Io { path: path.display().to_string(), source })?;
        Self::from_csv(&text)
    }

    /// Steps at which the given split was evaluated, in order. The 1-based
    /// position in this list is the record's evaluation epoch.
    pub fn eval_steps(&self, split: &str) -> Vec<usize> {
        let mut steps: Vec<usize> =
            self.records.iter().filter(|r| r.split == split).map(|r| r.step).collect();
        steps.dedup();
        steps
    }

    pub fn value_at(&self, split: &str, metric: &str, step: usize) -> Option<f64> {
        self.records
            .iter()
            .find(|r| r.split == split && r.metric == metric && r.step == step)
            .map(|r| r.value)
    }
}

/// Arithmetic mean of a metric over the evaluation epochs
/// `from_epoch..=to_epoch` (1-based ordinals of the split's evaluations).
pub fn windowed_average(
    log: &RunLog,
    metric: &str,
    split: &str,
    from_epoch: usize,
    to_epoch: usize,
) -> Result<f64, HarnessError> {
    let steps = log.eval_steps(split);
    let mut sum = 0.0;
    let mut n = 0usize;
    for (i, step) in steps.iter().enumerate() {
        let epoch = i + 1;
        if epoch < from_epoch || epoch > to_epoch {
            continue;
        }
        if let Some(v) = log.value_at(split, metric, *step) {
            sum += v;
            n += 1;
        }
    }
    if n == 0 {
        return Err(HarnessError::EmptyWindow {
            metric: metric.to_string(),
            split: split.to_string(),
            from: from_epoch,
            to: to_epoch,
        });
    }
    Ok(sum / n as f64)
}

/// Aggregated segmentation evaluation over a manifest: global per-class
/// intersection/union counts, with classes absent from both sides flagged.
#[derive(Debug, Clone, PartialEq)]
pub struct IouSummary {
    pub per_class: Vec<f64>,
    pub absent: Vec<bool>,
    pub mean_iou: f64,
}

/// Result of evaluating a checkpoint on a manifest.
#[derive(Debug, Clone, PartialEq)]
pub enum EvalResult {
    Depth(MetricReport),
    Segmentation(IouSummary),
}

fn depth_targets(samples: &[&Sample]) -> Result<(Tensor4, Tensor4), HarnessError> {
    let first = samples[0];
    let (h, w) = (first.image.height(), first.image.width());
    let n = samples.len();
    let mut gt = Array4::zeros((n, 1, h, w));
    let mut mask = Array4::zeros((n, 1, h, w));
    for (i, s) in samples.iter().enumerate() {
        let d = s
            .depth
            .as_ref()
            .ok_or_else(|| HarnessError::ManifestLacksDepth(s.dataset_id.clone()))?;
        for r in 0..h {
            for c in 0..w {
                gt[[i, 0, r, c]] = d.values[[r, c]];
                mask[[i, 0, r, c]] = if d.valid_mask[[r, c]] { 1.0 } else { 0.0 };
            }
        }
    }
    Ok((gt, mask))
}

fn semantic_targets(samples: &[&Sample]) -> Result<Tensor4, HarnessError> {
    let first = samples[0];
    let (h, w) = (first.image.height(), first.image.width());
    let sem0 = first
        .semantic
        .as_ref()
        .ok_or_else(|| HarnessError::ManifestLacksSemantic(first.dataset_id.clone()))?;
    let n_classes = sem0.channels();
    let mut gt = Array4::zeros((samples.len(), n_classes, h, w));
    for (i, s) in samples.iter().enumerate() {
        let sem = s
            .semantic
            .as_ref()
            .ok_or_else(|| HarnessError::ManifestLacksSemantic(s.dataset_id.clone()))?;
        for r in 0..h {
            for c in 0..w {
                for k in 0..n_classes {
                    gt[[i, k, r, c]] = sem.data[[r, c, k]];
                }
            }
        }
    }
    Ok(gt)
}

/// Builds the configured loss node over the forward outputs; returns the
/// scalar node.
pub fn build_loss_node(
    g: &mut Graph,
    out: &GraphOutputs,
    input: &BatchInput,
    samples: &[&Sample],
    loss: LossKind,
) -> Result<NodeId, HarnessError> {
    match loss {
        LossKind::Iou => {
            let seg = out.segmentation.expect("segmentation variant");
            let gt = semantic_targets(samples)?;
            Ok(g.soft_iou_loss(seg, gt))
        }
        LossKind::Mape => {
            let depth = out.depth.expect("depth variant");
            let (gt, mask) = depth_targets(samples)?;
            Ok(g.masked_mape_loss(depth, gt, mask))
        }
        LossKind::MapePerClass | LossKind::MapeComposite => {
            let depth = out.depth.expect("depth variant");
            let (gt, mask) = depth_targets(samples)?;
            let depth_loss = g.masked_mape_loss(depth, gt.clone(), mask.clone());
            let branches = out
                .branch_depths
                .as_ref()
                .ok_or_else(|| {
                    HarnessError::BadConfig(format!(
                        "loss {} requires a semantic-decoder variant",
                        loss.as_str()
                    ))
                })?;
            let class_masks =
                input.class_masks.as_ref().expect("branched input provides class masks");
            if loss == LossKind::MapeComposite {
                let n = branches.len();
                let sd = out.semantic_depth.expect("branched variants expose semantic_depth");
                let (nb, _, h, w) = gt.dim();
                let mut gt_exp = Array4::zeros((nb, n, h, w));
                let mut mask_exp = Array4::zeros((nb, n, h, w));
                for (k, cm) in class_masks.iter().enumerate().take(n) {
                    gt_exp.slice_mut(s![.., k..k + 1, .., ..]).assign(&gt);
                    let mk = cm * &mask;
                    mask_exp.slice_mut(s![.., k..k + 1, .., ..]).assign(&mk);
                }
                let sem_loss = g.masked_mape_loss(sd, gt_exp, mask_exp);
                Ok(g.add(depth_loss, sem_loss))
            } else {
                let mut branch_losses = Vec::new();
                for (k, branch) in branches.iter().enumerate() {
                    let mk = &class_masks[k] * &mask;
                    if mk.iter().all(|v| *v == 0.0) {
                        continue; // class absent from this batch
                    }
                    branch_losses.push(g.masked_mape_loss(*branch, gt.clone(), mk));
                }
                if branch_losses.is_empty() {
                    return Ok(depth_loss);
                }
                let mut acc = branch_losses[0];
                for b in &branch_losses[1..] {
                    acc = g.add(acc, *b);
                }
                let mean = g.scale(acc, 1.0 / branch_losses.len() as f64);
                Ok(g.add(depth_loss, mean))
            }
        }
    }
}

/// Pixel-weighted evaluation of a model over loaded samples.
pub fn evaluate_samples(model: &Model, samples: &[Sample]) -> Result<EvalResult, HarnessError> {
    if model.spec().variant == Variant::Unet {
        let n_classes = model.spec().n_classes;
        let mut inter = vec![0u64; n_classes];
        let mut union = vec![0u64; n_classes];
        for sample in samples {
            let sem = sample.semantic.as_ref().ok_or_else(|| {
                HarnessError::ManifestLacksSemantic(sample.dataset_id.clone())
            })?;
            let out = model.forward(sample)?;
            let seg = out.segmentation.expect("unet output");
            let pred_arg = seg.argmax();
            let gt_arg = sem.argmax();
            for r in 0..seg.height() {
                for c in 0..seg.width() {
                    let (p, t) = (pred_arg[[r, c]], gt_arg[[r, c]]);
                    if p == t {
                        inter[p] += 1;
                        union[p] += 1;
                    } else {
                        union[p] += 1;
                        union[t] += 1;
                    }
                }
            }
        }
        let mut per_class = Vec::with_capacity(n_classes);
        let mut absent = Vec::with_capacity(n_classes);
        let mut sum = 0.0;
        let mut n_present = 0usize;
        for k in 0..n_classes {
            if union[k] == 0 {
                per_class.push(1.0);
                absent.push(true);
            } else {
                let v = inter[k] as f64 / union[k] as f64;
                per_class.push(v);
                absent.push(false);
                sum += v;
                n_present += 1;
            }
        }
        let mean_iou = if n_present == 0 { 1.0 } else { sum / n_present as f64 };
        Ok(EvalResult::Segmentation(IouSummary { per_class, absent, mean_iou }))
    } else {
        let mut acc = MetricAccumulator::new();
        for sample in samples {
            let gt = sample
                .depth
                .as_ref()
                .ok_or_else(|| HarnessError::ManifestLacksDepth(sample.dataset_id.clone()))?;
            let out = model.forward(sample)?;
            let pred = DepthMap::prediction(out.depth.expect("depth variant"));
            acc.add(&pred, gt)?;
        }
        Ok(EvalResult::Depth(acc.finalize()?))
    }
}

/// Loads a manifest and evaluates the model on all its frames.
pub fn evaluate(model: &Model, manifest: &DatasetManifest) -> Result<EvalResult, HarnessError> {
    if model.spec().variant.is_depth() && !manifest.has_depth {
        return Err(HarnessError::ManifestLacksDepth(manifest.dataset_id.clone()));
    }
    if model.spec().variant == Variant::Unet && !manifest.has_semantic {
        return Err(HarnessError::ManifestLacksSemantic(manifest.dataset_id.clone()));
    }
    let samples = manifest.load_all()?;
    evaluate_samples(model, &samples)
}

/// Runs a U-Net checkpoint over a manifest and writes argmax-binarized
/// one-hot predictions next to the dataset (`semantic_pred/`).
pub fn generate_segmentation(
    model: &Model,
    manifest: &DatasetManifest,
) -> Result<Vec<PathBuf>, HarnessError> {
    if model.spec().variant != Variant::Unet {
        return Err(HarnessError::BadConfig(format!(
            "segmentation generation needs a UNET checkpoint, got {}",
            model.spec().variant.as_str()
        )));
    }
    let mut outputs = Vec::new();
    for frame in &manifest.frames {
        let sample = manifest.load_sample(frame)?;
        let out = model.forward(&sample)?;
        let soft = out.segmentation.expect("unet output");
        let arg = soft.argmax();
        let (h, w) = arg.dim();
        let mut onehot = ndarray::Array3::zeros((h, w, soft.channels()));
        for r in 0..h {
            for c in 0..w {
                onehot[[r, c, arg[[r, c]]]] = 1.0;
            }
        }
        outputs.push((
            frame.clone(),
            SemanticLabelMap::new(onehot, manifest.registry.name()),
        ));
    }
    Ok(write_predicted_semantics(manifest, &outputs)?)
}

/// Everything a finished (or aborted) run leaves behind.
pub struct TrainOutcome {
    pub run_log: RunLog,
    pub final_checkpoint: PathBuf,
    pub run_log_path: PathBuf,
    pub model: Model,
}

fn record_eval(
    result: &EvalResult,
    step: usize,
    split: &str,
    wall: f64,
    log: &mut RunLog,
) {
    match result {
        EvalResult::Depth(report) => {
            for name in MetricReport::METRIC_NAMES {
                log.records.push(LogRecord {
                    step,
                    split: split.to_string(),
                    metric: name.to_string(),
                    value: report.get(name).expect("known metric"),
                    wall_time_s: wall,
                });
            }
        }
        EvalResult::Segmentation(summary) => {
            log.records.push(LogRecord {
                step,
                split: split.to_string(),
                metric: "mean_iou".to_string(),
                value: summary.mean_iou,
                wall_time_s: wall,
            });
            for (k, v) in summary.per_class.iter().enumerate() {
                log.records.push(LogRecord {
                    step,
                    split: split.to_string(),
                    metric: format!("iou_{k}"),
                    value: *v,
                    wall_time_s: wall,
                });
            }
        }
    }
}

/// Trains per the config: forward → masked loss → Adam, evaluating every
/// eval set and writing a checkpoint at the configured cadence, with the
/// run log flushed append-only to `<out>/run_log.csv`. Deterministic given
/// the seed.
pub fn train(config: &RunConfig) -> Result<TrainOutcome, HarnessError> {
    config.validate()?;
    let mut train_samples: Vec<Sample> = Vec::new();
    for path in &config.train_manifests {
        let manifest = load_manifest(path)?;
        train_samples.extend(manifest.load_all()?);
    }
    let mut eval_samples: Vec<(String, Vec<Sample>)> = Vec::new();
    for (label, paths) in &config.eval_sets {
        let mut samples = Vec::new();
        for path in paths {
            samples.extend(load_manifest(path)?.load_all()?);
        }
        eval_samples.push((label.clone(), samples));
    }

    let steps_per_epoch = train_samples.len() / config.batch_size;
    if steps_per_epoch == 0 {
        return Err(HarnessError::BadConfig(format!(
            "batch size {} exceeds the {}-sample training set",
            config.batch_size,
            train_samples.len()
        )));
    }
    let total_steps = match (config.epochs, config.max_batches) {
        (Some(e), None) => e * steps_per_epoch,
        (None, Some(b)) => b,
        _ => unreachable!("validated"),
    };
    let eval_every = match config.eval_cadence {
        EvalCadence::PerEpoch => steps_per_epoch,
        EvalCadence::EveryKBatches(k) => {
            if k == 0 {
                return Err(HarnessError::BadConfig("eval cadence must be positive".into()));
            }
            k
        }
    };

    let io_err = |path: &Path, source: std::io::Error| HarnessError::Io {
        path: path.display().to_string(),
        source,
    };
    std::fs::create_dir_all(&config.output_dir)
        .map_err(|e| io_err(&config.output_dir, e))?;
    let log_path = config.output_dir.join("run_log.csv");
    let mut log_file =
        std::fs::File::create(&log_path).map_err(|e| io_err(&log_path, e))?;
    log_file
        .write_all(format!("{RUN_LOG_HEADER}\n").as_bytes())
        .map_err(|e| io_err(&log_path, e))?;

    let mut model = build(&config.model_spec)?;
    let mut adam = {
        let (_, _, params) = model.parts_mut();
        Adam::new(params, config.learning_rate)
    };
    let mut rng = ChaCha20Rng::seed_from_u64(config.seed);
    let start = Instant::now();
    let mut log = RunLog::default();
    let mut last_checkpoint: Option<PathBuf> = None;
    let mut order: Vec<usize> = (0..train_samples.len()).collect();
    let mut cursor = steps_per_epoch; // trigger a shuffle on the first step
    let mut loss_sum = 0.0;
    let mut loss_count = 0usize;
    let mut flushed = 0usize;

    for step in 1..=total_steps {
        if cursor >= steps_per_epoch {
            for i in (1..order.len()).rev() {
                let j = rng.gen_range(0..=i);
                order.swap(i, j);
            }
            cursor = 0;
        }
        let batch_ids = &order[cursor * config.batch_size..(cursor + 1) * config.batch_size];
        cursor += 1;
        let batch: Vec<&Sample> = batch_ids.iter().map(|&i| &train_samples[i]).collect();

        let input = assemble_batch(&config.model_spec, &batch)?;
        let loss_value = {
            let (_, arch, params) = model.parts_mut();
            params.zero_grads();
            let mut g = Graph::train(params);
            let out = run_graph(arch, &mut g, &input);
            let loss = build_loss_node(&mut g, &out, &input, &batch, config.loss)?;
            let value = g.scalar(loss);
            if value.is_finite() {
                g.backward(loss);
            }
            value
        };
        if !loss_value.is_finite() {
            let csv = log.to_csv();
            let _ = std::fs::write(&log_path, csv);
            return Err(HarnessError::NonFiniteLoss { step, last_checkpoint });
        }
        {
            let (_, _, params) = model.parts_mut();
            adam.step(params);
        }
        loss_sum += loss_value;
        loss_count += 1;

        if step % eval_every == 0 || step == total_steps {
            let wall = start.elapsed().as_secs_f64();
            log.records.push(LogRecord {
                step,
                split: "train".to_string(),
                metric: "loss".to_string(),
                value: loss_sum / loss_count as f64,
                wall_time_s: wall,
            });
            loss_sum = 0.0;
            loss_count = 0;
            for (label, samples) in &eval_samples {
                let result = evaluate_samples(&model, samples)?;
                record_eval(&result, step, label, wall, &mut log);
            }
            let ckpt_dir = config.output_dir.join(format!("checkpoints/step_{step:07}"));
            model.save(&ckpt_dir)?;
            last_checkpoint = Some(ckpt_dir);

            // Append-only flush of new records.
            let mut chunk = String::new();
            for r in &log.records[flushed..] {
                chunk.push_str(&format!(
                    "{},{},{},{},{}\n",
                    r.step, r.split, r.metric, r.value, r.wall_time_s
                ));
            }
            flushed = log.records.len();
            log_file.write_all(chunk.as_bytes()).map_err(|e| io_err(&log_path, e))?;
        }
    }

    let final_checkpoint = last_checkpoint.unwrap_or_else(|| {
        let dir = config.output_dir.join("checkpoints/step_0000000");
        let _ = model.save(&dir);
        dir
    });
    Ok(TrainOutcome { run_log: log, final_checkpoint, run_log_path: log_path, model })
}

/// Convenience for reporting: number of trainable parameters of the spec.
pub fn spec_parameter_count(spec: &ModelSpec) -> Result<usize, HarnessError> {
    Ok(parameter_count(&build(spec)?))
}
