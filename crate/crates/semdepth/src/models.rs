//! Model factory: assembles the encoder-decoder depth networks (M-series)
//! and the batch-normalized zero-padded U-Net segmenter from the building
//! blocks, driven by a declarative [`ModelSpec`].
//!
//! The depth family shares one body: a ResNet-50-style encoder, a 1×1
//! bottleneck convolution, and a chain of interleaved up-sampling blocks
//! back to input resolution, ending in a linear 3×3 head. Variants differ
//! in what they feed the body (raw image, image+labels, Sobel edges,
//! semantic edges), whether the decoder fans out into per-class semantic
//! decoders, and whether branch outputs are semantically masked. The slim
//! variants truncate the encoder after the third stage and halve the
//! decoder widths.

use crate::blocks::{
    semantic_edges, semantic_mask, sobel_edges, BlocksError, ResidualKind, ResidualUnit,
    UpSamplingBlock,
};
use crate::core::{Sample, SemanticLabelMap};
use crate::kv::KvMap;
use crate::nn::{
    init_batch_norm, init_channel, init_he_conv, BnParams, ConvGeometry, Graph, NodeId, ParamId,
    ParamSet, PoolGeometry, Tensor4,
};
use ndarray::{Array2, Array3, Array4, s};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error("variant {0} requires a semantic label map in its input sample")]
    MissingSemantic(&'static str),
    #[error("input sample is {got_h}x{got_w} but the model expects {want_h}x{want_w}")]
    InputSize { got_h: usize, got_w: usize, want_h: usize, want_w: usize },
    #[error("semantic input has {got} channels, model expects {want}")]
    SemanticChannels { got: usize, want: usize },
    #[error(transparent)]
    Blocks(#[from] BlocksError),
    #[error("checkpoint io at {path}: {source}")]
    CheckpointIo { path: String, source: std::io::Error },
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
}

/// Network variants. M18–M21 are the slim counterparts of M7/M6/M0/M1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    M0,
    M1,
    M2,
    M3,
    M4,
    M5,
    M6,
    M7,
    M18,
    M19,
    M20,
    M21,
    Unet,
}

impl Variant {
    pub const ALL: [Variant; 13] = [
        Variant::M0,
        Variant::M1,
        Variant::M2,
        Variant::M3,
        Variant::M4,
        Variant::M5,
        Variant::M6,
        Variant::M7,
        Variant::M18,
        Variant::M19,
        Variant::M20,
        Variant::M21,
        Variant::Unet,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::M0 => "M0",
            Variant::M1 => "M1",
            Variant::M2 => "M2",
            Variant::M3 => "M3",
            Variant::M4 => "M4",
            Variant::M5 => "M5",
            Variant::M6 => "M6",
            Variant::M7 => "M7",
            Variant::M18 => "M18",
            Variant::M19 => "M19",
            Variant::M20 => "M20",
            Variant::M21 => "M21",
            Variant::Unet => "UNET",
        }
    }

    pub fn parse(s: &str) -> Result<Self, ModelError> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| ModelError::InvalidSpec(format!("unknown variant {s:?}")))
    }

    /// Variants that consume the semantic label map.
    pub fn uses_semantic(self) -> bool {
        matches!(
            self,
            Variant::M1
                | Variant::M2
                | Variant::M3
                | Variant::M4
                | Variant::M5
                | Variant::M7
                | Variant::M18
                | Variant::M21
        )
    }

    pub fn is_slim(self) -> bool {
        matches!(self, Variant::M18 | Variant::M19 | Variant::M20 | Variant::M21)
    }

    pub fn is_depth(self) -> bool {
        self != Variant::Unet
    }

    /// Variants with per-class semantic decoders.
    pub fn has_semantic_decoders(self) -> bool {
        matches!(self, Variant::M2 | Variant::M3 | Variant::M4 | Variant::M5)
    }
}

/// Declarative model description; everything needed to rebuild the network
/// deterministically.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub variant: Variant,
    pub input_width: usize,
    pub input_height: usize,
    pub n_classes: usize,
    pub width_scale: f64,
    pub seed: u64,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<(), ModelError> {
        if !self.input_width.is_multiple_of(32) || !self.input_height.is_multiple_of(32) {
            return Err(ModelError::InvalidSpec(format!(
                "input {}x{} not divisible by 32",
                self.input_width, self.input_height
            )));
        }
        if !(self.width_scale > 0.0 && self.width_scale <= 1.0) {
            return Err(ModelError::InvalidSpec(format!(
                "width_scale {} outside (0, 1]",
                self.width_scale
            )));
        }
        let needs_classes = self.variant.uses_semantic() || self.variant == Variant::Unet;
        if needs_classes && self.n_classes == 0 {
            return Err(ModelError::InvalidSpec(format!(
                "variant {} needs n_classes >= 1",
                self.variant.as_str()
            )));
        }
        Ok(())
    }

    fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::new();
        kv.set("variant", self.variant.as_str());
        kv.set("input_width", self.input_width);
        kv.set("input_height", self.input_height);
        kv.set("n_classes", self.n_classes);
        kv.set("width_scale", self.width_scale);
        kv.set("seed", self.seed);
        kv
    }

    fn from_kv(kv: &KvMap) -> Result<Self, ModelError> {
        let err = |e: crate::kv::KvError| ModelError::InvalidSpec(e.to_string());
        Ok(ModelSpec {
            variant: Variant::parse(kv.require("variant").map_err(err)?)?,
            input_width: kv.require_parsed("input_width").map_err(err)?,
            input_height: kv.require_parsed("input_height").map_err(err)?,
            n_classes: kv.require_parsed("n_classes").map_err(err)?,
            width_scale: kv.require_parsed("width_scale").map_err(err)?,
            seed: kv.require_parsed("seed").map_err(err)?,
        })
    }
}

/// Outputs of a forward pass at input resolution.
#[derive(Debug, Clone)]
pub struct ModelOutputs {
    /// Depth map in meters, present for every depth variant.
    pub depth: Option<Array2<f64>>,
    /// Per-class depth layers (semantic-decoder variants M2–M5).
    pub semantic_depth: Option<Array3<f64>>,
    /// Softmax class probabilities (U-Net).
    pub segmentation: Option<SemanticLabelMap>,
}

fn scaled(base: usize, scale: f64) -> usize {
    ((base as f64 * scale).round() as usize).max(1)
}

enum InputKind {
    Rgb,
    RgbSemantic,
    Edges,
    SemanticEdges,
}

impl InputKind {
    fn channels(&self, n_classes: usize) -> usize {
        match self {
            InputKind::Rgb => 3,
            InputKind::RgbSemantic => 3 + n_classes,
            InputKind::Edges => 1,
            InputKind::SemanticEdges => n_classes,
        }
    }
}

fn input_kind(variant: Variant) -> InputKind {
    match variant {
        Variant::M0 | Variant::M20 | Variant::Unet => InputKind::Rgb,
        Variant::M1 | Variant::M2 | Variant::M3 | Variant::M4 | Variant::M5 | Variant::M21 => {
            InputKind::RgbSemantic
        }
        Variant::M6 | Variant::M19 => InputKind::Edges,
        Variant::M7 | Variant::M18 => InputKind::SemanticEdges,
    }
}

struct BranchLayout {
    /// Up blocks in the common decoder before the fan-out.
    common_ups: usize,
    /// Concat a downsampled semantically-masked image at branch entry.
    inject_masked_image: bool,
    /// Multiply branch outputs by their class channel.
    mask_outputs: bool,
}

fn branch_layout(variant: Variant) -> Option<BranchLayout> {
    match variant {
        Variant::M2 | Variant::M3 => {
            Some(BranchLayout { common_ups: 2, inject_masked_image: false, mask_outputs: false })
        }
        Variant::M4 => {
            Some(BranchLayout { common_ups: 1, inject_masked_image: true, mask_outputs: false })
        }
        Variant::M5 => {
            Some(BranchLayout { common_ups: 4, inject_masked_image: true, mask_outputs: true })
        }
        _ => None,
    }
}

struct FcrnBranch {
    ups: Vec<UpSamplingBlock>,
    head: ParamId,
    head_bias: ParamId,
}

enum FcrnTail {
    Single { ups: Vec<UpSamplingBlock>, head: ParamId, head_bias: ParamId },
    Branched { layout: BranchLayout, branches: Vec<FcrnBranch> },
}

struct Fcrn {
    stem_conv: ParamId,
    stem_bn: BnParams,
    stages: Vec<Vec<ResidualUnit>>,
    mid_conv: ParamId,
    mid_bn: BnParams,
    common_ups: Vec<UpSamplingBlock>,
    tail: FcrnTail,
}

struct DoubleConv {
    c1: ParamId,
    b1: BnParams,
    c2: ParamId,
    b2: BnParams,
}

impl DoubleConv {
    fn new(
        params: &mut ParamSet,
        rng: &mut ChaCha20Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
    ) -> Self {
        let c1 = init_he_conv(params, rng, &format!("{name}.c1"), c_out, c_in, (3, 3));
        let b1 = init_batch_norm(params, &format!("{name}.b1"), c_out);
        let c2 = init_he_conv(params, rng, &format!("{name}.c2"), c_out, c_out, (3, 3));
        let b2 = init_batch_norm(params, &format!("{name}.b2"), c_out);
        Self { c1, b1, c2, b2 }
    }

    fn apply(&self, g: &mut Graph, x: NodeId) -> NodeId {
        let h = g.conv2d(x, self.c1, None, ConvGeometry::same((3, 3)));
        let h = g.batch_norm(h, self.b1);
        let h = g.relu(h);
        let h = g.conv2d(h, self.c2, None, ConvGeometry::same((3, 3)));
        let h = g.batch_norm(h, self.b2);
        g.relu(h)
    }
}

struct UnetLevel {
    enc: DoubleConv,
    up_conv: ParamId,
    up_bn: BnParams,
    concat_bn: BnParams,
    dec: DoubleConv,
}

struct Unet {
    levels: Vec<UnetLevel>,
    bottom: DoubleConv,
    head: ParamId,
    head_bias: ParamId,
}

/// Opaque network wiring; apply it to a graph with [`run_graph`].
pub struct Arch(ArchKind);

enum ArchKind {
    Fcrn(Fcrn),
    Unet(Unet),
}

/// A built network: spec, parameter set, and wiring.
pub struct Model {
    spec: ModelSpec,
    params: ParamSet,
    arch: Arch,
}

const FULL_STAGES: [(usize, usize, usize); 4] =
    [(256, 3, 1), (512, 4, 2), (1024, 6, 2), (2048, 3, 2)];
const SLIM_STAGES: [(usize, usize, usize); 3] = [(256, 3, 1), (512, 4, 2), (1024, 6, 2)];
const FULL_UPS: [usize; 5] = [512, 256, 128, 64, 32];
const SLIM_UPS: [usize; 4] = [256, 128, 64, 32];
const UNET_WIDTHS: [usize; 5] = [64, 128, 256, 512, 1024];
const UNET_BOTTOM: usize = 2048;

/// Builds the network described by `spec` with He/ones/zeros initialization
/// drawn from a ChaCha stream seeded by `spec.seed`.
pub fn build(spec: &ModelSpec) -> Result<Model, ModelError> {
    spec.validate()?;
    let mut params = ParamSet::new();
    let mut rng = ChaCha20Rng::seed_from_u64(spec.seed);
    let arch = Arch(match spec.variant {
        Variant::Unet => ArchKind::Unet(build_unet(spec, &mut params, &mut rng)),
        _ => ArchKind::Fcrn(build_fcrn(spec, &mut params, &mut rng)?),
    });
    Ok(Model { spec: spec.clone(), params, arch })
}

fn build_fcrn(
    spec: &ModelSpec,
    params: &mut ParamSet,
    rng: &mut ChaCha20Rng,
) -> Result<Fcrn, ModelError> {
    let sc = spec.width_scale;
    let in_ch = input_kind(spec.variant).channels(spec.n_classes);
    let stem = scaled(64, sc);
    let stem_conv = init_he_conv(params, rng, "stem.conv", stem, in_ch, (7, 7));
    let stem_bn = init_batch_norm(params, "stem.bn", stem);

    let stage_plan: &[(usize, usize, usize)] =
        if spec.variant.is_slim() { &SLIM_STAGES } else { &FULL_STAGES };
    let mut stages = Vec::new();
    let mut ch = stem;
    for (si, (out, depth, stride)) in stage_plan.iter().enumerate() {
        let out = scaled(*out, sc);
        let mut units = Vec::new();
        for b in 0..*depth {
            let name = format!("stage{}.unit{}", si + 1, b);
            let unit = if b == 0 {
                ResidualUnit::new(params, rng, &name, ResidualKind::Projection, ch, out, *stride)?
            } else {
                ResidualUnit::new(params, rng, &name, ResidualKind::Skip, out, out, 1)?
            };
            units.push(unit);
            ch = out;
        }
        stages.push(units);
    }

    let up_plan: &[usize] = if spec.variant.is_slim() { &SLIM_UPS } else { &FULL_UPS };
    let mid = scaled(if spec.variant.is_slim() { 512 } else { 1024 }, sc);
    let mid_conv = init_he_conv(params, rng, "mid.conv", mid, ch, (1, 1));
    let mid_bn = init_batch_norm(params, "mid.bn", mid);

    let make_ups = |params: &mut ParamSet,
                        rng: &mut ChaCha20Rng,
                        tag: &str,
                        widths: &[usize],
                        mut ch: usize,
                        extra_in: usize|
     -> Result<Vec<UpSamplingBlock>, ModelError> {
        let mut ups = Vec::new();
        for (i, w) in widths.iter().enumerate() {
            let w = scaled(*w, sc);
            let in_ch = if i == 0 { ch + extra_in } else { ch };
            ups.push(UpSamplingBlock::new(params, rng, &format!("{tag}{i}"), in_ch, w)?);
            ch = w;
        }
        Ok(ups)
    };

    let tail = match branch_layout(spec.variant) {
        None => {
            let ups = make_ups(params, rng, "up", up_plan, mid, 0)?;
            let last = scaled(*up_plan.last().expect("nonempty"), sc);
            let head = init_he_conv(params, rng, "head.conv", 1, last, (3, 3));
            let head_bias = init_channel(params, "head.bias", 1, 0.0, true);
            FcrnTail::Single { ups, head, head_bias }
        }
        Some(layout) => {
            let k = layout.common_ups;
            let common = make_ups(params, rng, "up", &up_plan[..k], mid, 0)?;
            let entry_ch = scaled(up_plan[k - 1], sc);
            let extra = if layout.inject_masked_image { 3 } else { 0 };
            let mut branches = Vec::new();
            for b in 0..spec.n_classes {
                let ups = make_ups(
                    params,
                    rng,
                    &format!("branch{b}.up"),
                    &up_plan[k..],
                    entry_ch,
                    extra,
                )?;
                let last = scaled(*up_plan.last().expect("nonempty"), sc);
                let head =
                    init_he_conv(params, rng, &format!("branch{b}.head"), 1, last, (3, 3));
                let head_bias =
                    init_channel(params, &format!("branch{b}.head_bias"), 1, 0.0, true);
                branches.push(FcrnBranch { ups, head, head_bias });
            }
            return Ok(Fcrn {
                stem_conv,
                stem_bn,
                stages,
                mid_conv,
                mid_bn,
                common_ups: common,
                tail: FcrnTail::Branched { layout, branches },
            });
        }
    };
    Ok(Fcrn { stem_conv, stem_bn, stages, mid_conv, mid_bn, common_ups: Vec::new(), tail })
}

fn build_unet(spec: &ModelSpec, params: &mut ParamSet, rng: &mut ChaCha20Rng) -> Unet {
    let sc = spec.width_scale;
    let mut levels = Vec::new();
    let mut ch = 3;
    let widths: Vec<usize> = UNET_WIDTHS.iter().map(|w| scaled(*w, sc)).collect();
    let bottom_w = scaled(UNET_BOTTOM, sc);
    for (i, w) in widths.iter().enumerate() {
        let enc = DoubleConv::new(params, rng, &format!("enc{i}"), ch, *w);
        let upper = if i + 1 < widths.len() { widths[i + 1] } else { bottom_w };
        let up_conv = init_he_conv(params, rng, &format!("upconv{i}"), *w, upper, (3, 3));
        let up_bn = init_batch_norm(params, &format!("upbn{i}"), *w);
        let concat_bn = init_batch_norm(params, &format!("catbn{i}"), 2 * *w);
        let dec = DoubleConv::new(params, rng, &format!("dec{i}"), 2 * *w, *w);
        levels.push(UnetLevel { enc, up_conv, up_bn, concat_bn, dec });
        ch = *w;
    }
    let bottom = DoubleConv::new(params, rng, "bottom", ch, bottom_w);
    let head = init_he_conv(params, rng, "head", spec.n_classes, widths[0], (1, 1));
    let head_bias = init_channel(params, "head.bias", spec.n_classes, 0.0, true);
    Unet { levels, bottom, head, head_bias }
}

/// Batched network inputs assembled from samples.
pub struct BatchInput {
    /// Main input tensor (N, C, H, W); C depends on the variant.
    pub x: Tensor4,
    /// Per-class semantically-masked images downsampled to the branch entry
    /// resolution (M4/M5).
    pub masked_entry: Option<Vec<Tensor4>>,
    /// Per-class binary masks at full resolution (M5 output masking and the
    /// per-class losses of M2/M3): each (N, 1, H, W).
    pub class_masks: Option<Vec<Tensor4>>,
}

/// Node handles produced by a forward graph pass.
pub struct GraphOutputs {
    pub depth: Option<NodeId>,
    pub branch_depths: Option<Vec<NodeId>>,
    pub semantic_depth: Option<NodeId>,
    pub segmentation: Option<NodeId>,
}

fn image_chw(sample: &Sample) -> Tensor4 {
    let (h, w, _) = sample.image.data.dim();
    let mut out = Array4::zeros((1, 3, h, w));
    for r in 0..h {
        for c in 0..w {
            for k in 0..3 {
                out[[0, k, r, c]] = sample.image.data[[r, c, k]];
            }
        }
    }
    out
}

fn semantic_chw(m: &SemanticLabelMap) -> Tensor4 {
    let (h, w, n) = m.data.dim();
    let mut out = Array4::zeros((1, n, h, w));
    for r in 0..h {
        for c in 0..w {
            for k in 0..n {
                out[[0, k, r, c]] = m.data[[r, c, k]];
            }
        }
    }
    out
}

fn area_downsample(img: &Array3<f64>, factor: usize) -> Array3<f64> {
    if factor == 1 {
        return img.clone();
    }
    let (h, w, ch) = img.dim();
    let (oh, ow) = (h / factor, w / factor);
    let mut out = Array3::zeros((oh, ow, ch));
    let norm = (factor * factor) as f64;
    for r in 0..oh {
        for c in 0..ow {
            for k in 0..ch {
                let mut acc = 0.0;
                for dr in 0..factor {
                    for dc in 0..factor {
                        acc += img[[r * factor + dr, c * factor + dc, k]];
                    }
                }
                out[[r, c, k]] = acc / norm;
            }
        }
    }
    out
}

fn concat_batch(parts: Vec<Tensor4>) -> Tensor4 {
    let (_, c, h, w) = parts[0].dim();
    let mut out = Array4::zeros((parts.len(), c, h, w));
    for (i, p) in parts.iter().enumerate() {
        out.slice_mut(s![i..i + 1, .., .., ..]).assign(p);
    }
    out
}

impl Model {
    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    /// Mutable split used by the training loop: the wiring applies itself
    /// to a graph that mutably borrows the parameters.
    pub fn parts_mut(&mut self) -> (&ModelSpec, &Arch, &mut ParamSet) {
        (&self.spec, &self.arch, &mut self.params)
    }

    /// Assembles the variant-specific network input from samples.
    pub fn assemble_batch(&self, samples: &[&Sample]) -> Result<BatchInput, ModelError> {
        assemble_batch(&self.spec, samples)
    }

    /// Single-sample inference in eval mode (running batch-norm statistics).
    pub fn forward(&self, sample: &Sample) -> Result<ModelOutputs, ModelError> {
        let input = self.assemble_batch(&[sample])?;
        let mut g = Graph::eval(&self.params);
        let out = run_graph(&self.arch, &mut g, &input);
        let (h, w) = (self.spec.input_height, self.spec.input_width);
        let depth = out.depth.map(|d| {
            let v = g.value(d);
            Array2::from_shape_fn((h, w), |(r, c)| v[[0, 0, r, c]])
        });
        let semantic_depth = out.semantic_depth.map(|sd| {
            let v = g.value(sd);
            let n = v.dim().1;
            Array3::from_shape_fn((h, w, n), |(r, c, k)| v[[0, k, r, c]])
        });
        let segmentation = out.segmentation.map(|sg| {
            let v = g.value(sg);
            let n = v.dim().1;
            SemanticLabelMap::new(
                Array3::from_shape_fn((h, w, n), |(r, c, k)| v[[0, k, r, c]]),
                "predicted",
            )
        });
        Ok(ModelOutputs { depth, semantic_depth, segmentation })
    }
}

/// Exact count of trainable scalars.
pub fn parameter_count(model: &Model) -> usize {
    model.params().n_trainable_scalars()
}

/// Assembles the network input for a batch of samples.
pub fn assemble_batch(spec: &ModelSpec, samples: &[&Sample]) -> Result<BatchInput, ModelError> {
    let (want_h, want_w) = (spec.input_height, spec.input_width);
    let mut xs = Vec::with_capacity(samples.len());
    let needs_sem = spec.variant.uses_semantic();
    let layout = branch_layout(spec.variant);
    let mut masked_all: Vec<Vec<Tensor4>> = Vec::new();
    let mut masks_all: Vec<Vec<Tensor4>> = Vec::new();

    for sample in samples {
        let (h, w) = (sample.image.height(), sample.image.width());
        if (h, w) != (want_h, want_w) {
            return Err(ModelError::InputSize { got_h: h, got_w: w, want_h, want_w });
        }
        let semantic = if needs_sem {
            let sem = sample
                .semantic
                .as_ref()
                .ok_or(ModelError::MissingSemantic(spec.variant.as_str()))?;
            if sem.channels() != spec.n_classes {
                return Err(ModelError::SemanticChannels {
                    got: sem.channels(),
                    want: spec.n_classes,
                });
            }
            Some(sem)
        } else {
            None
        };

        let x = match input_kind(spec.variant) {
            InputKind::Rgb => image_chw(sample),
            InputKind::RgbSemantic => {
                let img = image_chw(sample);
                let sem = semantic_chw(semantic.expect("checked above"));
                let (_, ci, hh, ww) = img.dim();
                let cs = sem.dim().1;
                let mut out = Array4::zeros((1, ci + cs, hh, ww));
                out.slice_mut(s![.., ..ci, .., ..]).assign(&img);
                out.slice_mut(s![.., ci.., .., ..]).assign(&sem);
                out
            }
            InputKind::Edges => {
                let e = sobel_edges(&sample.image);
                let mut out = Array4::zeros((1, 1, h, w));
                out.slice_mut(s![0, 0, .., ..]).assign(&e);
                out
            }
            InputKind::SemanticEdges => {
                let e = sobel_edges(&sample.image);
                let se = semantic_edges(&e, semantic.expect("checked above"))?;
                let n = se.dim().2;
                Array4::from_shape_fn((1, n, h, w), |(_, k, r, c)| se[[r, c, k]])
            }
        };
        xs.push(x);

        if let Some(layout) = &layout {
            let sem = semantic.expect("branched variants use semantics");
            if layout.inject_masked_image {
                // Branch entry resolution: encoder output (H/32 full) after
                // `common_ups` doublings.
                let factor = 32 >> layout.common_ups;
                let mut per_class = Vec::with_capacity(spec.n_classes);
                for cls in 0..spec.n_classes {
                    let masked = semantic_mask(&sample.image, sem, cls)?;
                    let small = area_downsample(&masked.data, factor);
                    let (sh, sw, _) = small.dim();
                    per_class.push(Array4::from_shape_fn((1, 3, sh, sw), |(_, k, r, c)| {
                        small[[r, c, k]]
                    }));
                }
                masked_all.push(per_class);
            }
            let mut per_class_masks = Vec::with_capacity(spec.n_classes);
            for cls in 0..spec.n_classes {
                per_class_masks.push(Array4::from_shape_fn((1, 1, h, w), |(_, _, r, c)| {
                    sem.data[[r, c, cls]]
                }));
            }
            masks_all.push(per_class_masks);
        }
    }

    let x = concat_batch(xs);
    let masked_entry = if masked_all.is_empty() {
        None
    } else {
        Some(
            (0..masked_all[0].len())
                .map(|cls| concat_batch(masked_all.iter().map(|m| m[cls].clone()).collect()))
                .collect(),
        )
    };
    let class_masks = if masks_all.is_empty() {
        None
    } else {
        Some(
            (0..masks_all[0].len())
                .map(|cls| concat_batch(masks_all.iter().map(|m| m[cls].clone()).collect()))
                .collect(),
        )
    };
    Ok(BatchInput { x, masked_entry, class_masks })
}

/// Applies the network to an assembled batch inside an existing graph.
pub fn run_graph(arch: &Arch, g: &mut Graph, input: &BatchInput) -> GraphOutputs {
    match &arch.0 {
        ArchKind::Fcrn(f) => run_fcrn(f, g, input),
        ArchKind::Unet(u) => run_unet(u, g, input),
    }
}

fn run_fcrn(f: &Fcrn, g: &mut Graph, input: &BatchInput) -> GraphOutputs {
    let x = g.input(input.x.clone());
    let h = g.conv2d(x, f.stem_conv, None, ConvGeometry::strided(7, 2));
    let h = g.batch_norm(h, f.stem_bn);
    let h = g.relu(h);
    let mut h = g.max_pool(h, PoolGeometry { kernel: (3, 3), stride: (2, 2), pad: (1, 1) });
    for stage in &f.stages {
        for unit in stage {
            h = unit.apply(g, h);
        }
    }
    let h = g.conv2d(h, f.mid_conv, None, ConvGeometry::strided(1, 1));
    let h = g.batch_norm(h, f.mid_bn);
    let mut h = g.relu(h);
    for up in &f.common_ups {
        h = up.apply(g, h);
    }
    match &f.tail {
        FcrnTail::Single { ups, head, head_bias } => {
            let mut t = h;
            for up in ups {
                t = up.apply(g, t);
            }
            let depth = g.conv2d(t, *head, Some(*head_bias), ConvGeometry::same((3, 3)));
            GraphOutputs {
                depth: Some(depth),
                branch_depths: None,
                semantic_depth: None,
                segmentation: None,
            }
        }
        FcrnTail::Branched { layout, branches } => {
            let mut branch_nodes = Vec::with_capacity(branches.len());
            for (cls, branch) in branches.iter().enumerate() {
                let mut t = if layout.inject_masked_image {
                    let masked = input
                        .masked_entry
                        .as_ref()
                        .expect("branched input provides masked images")[cls]
                        .clone();
                    let m = g.input(masked);
                    g.concat_c(&[h, m])
                } else {
                    h
                };
                for up in &branch.ups {
                    t = up.apply(g, t);
                }
                let mut out =
                    g.conv2d(t, branch.head, Some(branch.head_bias), ConvGeometry::same((3, 3)));
                if layout.mask_outputs {
                    let mask = input
                        .class_masks
                        .as_ref()
                        .expect("branched input provides class masks")[cls]
                        .clone();
                    out = g.mul_const(out, mask);
                }
                branch_nodes.push(out);
            }
            let semantic_depth = g.concat_c(&branch_nodes);
            let depth = g.sum_c(semantic_depth);
            GraphOutputs {
                depth: Some(depth),
                branch_depths: Some(branch_nodes),
                semantic_depth: Some(semantic_depth),
                segmentation: None,
            }
        }
    }
}

fn run_unet(u: &Unet, g: &mut Graph, input: &BatchInput) -> GraphOutputs {
    let mut x = g.input(input.x.clone());
    let mut skips = Vec::with_capacity(u.levels.len());
    for level in &u.levels {
        let e = level.enc.apply(g, x);
        skips.push(e);
        x = g.max_pool(e, PoolGeometry { kernel: (2, 2), stride: (2, 2), pad: (0, 0) });
    }
    x = u.bottom.apply(g, x);
    for (level, skip) in u.levels.iter().zip(skips.iter()).rev() {
        let up = g.upsample_nearest2(x);
        let up = g.conv2d(up, level.up_conv, None, ConvGeometry::same((3, 3)));
        let up = g.batch_norm(up, level.up_bn);
        let up = g.relu(up);
        let cat = g.concat_c(&[*skip, up]);
        let cat = g.batch_norm(cat, level.concat_bn);
        x = level.dec.apply(g, cat);
    }
    let logits = g.conv2d(x, u.head, Some(u.head_bias), ConvGeometry::strided(1, 1));
    let seg = g.softmax_c(logits);
    GraphOutputs { depth: None, branch_depths: None, semantic_depth: None, segmentation: Some(seg) }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"SDCKPT01";
const SPEC_FILE: &str = "model.txt";
const TENSORS_FILE: &str = "tensors.bin";

impl Model {
    /// Writes the checkpoint directory: the model spec as text plus one
    /// binary tensor archive covering every parameter (including batch-norm
    /// running statistics), bit-exact.
    pub fn save(&self, dir: &Path) -> Result<(), ModelError> {
        let io = |source: std::io::Error| ModelError::CheckpointIo {
            path: dir.display().to_string(),
            source,
        };
        std::fs::create_dir_all(dir).map_err(io)?;
        self.spec
            .to_kv()
            .save(&dir.join(SPEC_FILE))
            .map_err(|e| ModelError::CorruptCheckpoint(e.to_string()))?;
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for id in self.params.ids() {
            let name = self.params.name(id).as_bytes();
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name);
            let v = self.params.value(id);
            let (a, b, c, d) = v.dim();
            for dim in [a, b, c, d] {
                buf.extend_from_slice(&(dim as u64).to_le_bytes());
            }
            for x in v.iter() {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
        let mut file = std::fs::File::create(dir.join(TENSORS_FILE)).map_err(io)?;
        file.write_all(&buf).map_err(io)?;
        Ok(())
    }

    /// Rebuilds the model from a checkpoint directory; forward outputs are
    /// reproduced bit-for-bit.
    pub fn load(dir: &Path) -> Result<Model, ModelError> {
        let io = |source: std::io::Error| ModelError::CheckpointIo {
            path: dir.display().to_string(),
            source,
        };
        let kv = KvMap::load(&dir.join(SPEC_FILE))
            .map_err(|e| ModelError::CorruptCheckpoint(e.to_string()))?;
        let spec = ModelSpec::from_kv(&kv)?;
        let mut model = build(&spec)?;

        let mut bytes = Vec::new();
        std::fs::File::open(dir.join(TENSORS_FILE))
            .map_err(io)?
            .read_to_end(&mut bytes)
            .map_err(io)?;
        let mut cursor = 0usize;
        let take = |cursor: &mut usize, n: usize| -> Result<&[u8], ModelError> {
            if *cursor + n > bytes.len() {
                return Err(ModelError::CorruptCheckpoint("unexpected end of archive".into()));
            }
            let s = &bytes[*cursor..*cursor + n];
            *cursor += n;
            Ok(s)
        };
        if take(&mut cursor, 8)? != CHECKPOINT_MAGIC {
            return Err(ModelError::CorruptCheckpoint("bad magic".into()));
        }
        let count =
            u64::from_le_bytes(take(&mut cursor, 8)?.try_into().expect("8 bytes")) as usize;
        if count != model.params.len() {
            return Err(ModelError::CorruptCheckpoint(format!(
                "archive has {count} tensors, model has {}",
                model.params.len()
            )));
        }
        for id in model.params.ids().collect::<Vec<_>>() {
            let name_len =
                u32::from_le_bytes(take(&mut cursor, 4)?.try_into().expect("4 bytes")) as usize;
            let name = String::from_utf8(take(&mut cursor, name_len)?.to_vec())
                .map_err(|_| ModelError::CorruptCheckpoint("non-utf8 tensor name".into()))?;
            if name != model.params.name(id) {
                return Err(ModelError::CorruptCheckpoint(format!(
                    "tensor order mismatch: archive {name:?}, model {:?}",
                    model.params.name(id)
                )));
            }
            let mut dims = [0usize; 4];
            for d in &mut dims {
                *d = u64::from_le_bytes(take(&mut cursor, 8)?.try_into().expect("8 bytes"))
                    as usize;
            }
            let want = model.params.value(id).dim();
            if (dims[0], dims[1], dims[2], dims[3]) != want {
                return Err(ModelError::CorruptCheckpoint(format!(
                    "tensor {name:?} shape {dims:?} does not match model {want:?}"
                )));
            }
            let n = dims.iter().product::<usize>();
            let raw = take(&mut cursor, n * 8)?;
            let mut data = Vec::with_capacity(n);
            for i in 0..n {
                data.push(f64::from_le_bytes(raw[i * 8..(i + 1) * 8].try_into().expect("8")));
            }
            let arr = Array4::from_shape_vec((dims[0], dims[1], dims[2], dims[3]), data)
                .expect("checked shape");
            *model.params.value_mut(id) = arr;
        }
        if cursor != bytes.len() {
            return Err(ModelError::CorruptCheckpoint("trailing bytes".into()));
        }
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::core::{CameraIntrinsics, DepthMap, ImageTensor, DEFAULT_DEPTH_CAP_M};
    use ndarray::Array2;
    use rand::Rng;

    fn spec(variant: Variant, size: usize, n_classes: usize) -> ModelSpec {
        ModelSpec {
            variant,
            input_width: size,
            input_height: size,
            n_classes,
            width_scale: 0.1,
            seed: 7,
        }
    }

    /// Random sample with every class present at least once.
    fn sample(size: usize, n_classes: usize, seed: u64) -> Sample {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let image = ImageTensor::new(Array3::from_shape_fn((size, size, 3), |_| {
            rng.gen_range(0.0..1.0)
        }))
        .unwrap();
        let mut sem = Array3::zeros((size, size, n_classes));
        for r in 0..size {
            for c in 0..size {
                let k = if r < n_classes { r } else { rng.gen_range(0..n_classes) };
                sem[[r, c, k]] = 1.0;
            }
        }
        let depth = Array2::from_shape_fn((size, size), |_| rng.gen_range(1.0..50.0));
        Sample {
            image,
            semantic: Some(SemanticLabelMap::new(sem, "test")),
            depth: Some(DepthMap::new(
                depth,
                Array2::from_elem((size, size), true),
                DEFAULT_DEPTH_CAP_M,
            )),
            intrinsics: CameraIntrinsics::new(size as f64, size as f64, size as f64).unwrap(),
            dataset_id: "test".into(),
            frame_id: "0".into(),
        }
    }

    #[test]
    fn resolution_contract_for_representative_variants() {
        let n = 3;
        let s = sample(32, n, 1);
        for variant in [Variant::M0, Variant::M2, Variant::M5, Variant::M21, Variant::M18] {
            let model = build(&spec(variant, 32, n)).unwrap();
            let out = model.forward(&s).unwrap();
            let d = out.depth.expect("depth variant");
            assert_eq!(d.dim(), (32, 32), "{}", variant.as_str());
        }
        let unet = build(&spec(Variant::Unet, 32, n)).unwrap();
        let out = unet.forward(&s).unwrap();
        let seg = out.segmentation.expect("unet output");
        assert_eq!(seg.data.dim(), (32, 32, n));
        assert!(out.depth.is_none());
    }

    #[test]
    fn unet_probabilities_sum_to_one() {
        let n = 4;
        let model = build(&spec(Variant::Unet, 32, n)).unwrap();
        let out = model.forward(&sample(32, n, 2)).unwrap().segmentation.unwrap();
        for r in 0..32 {
            for c in 0..32 {
                let sum: f64 = (0..n).map(|k| out.data[[r, c, k]]).sum();
                assert!((sum - 1.0).abs() < 1e-5, "({r},{c}) sum {sum}");
                for k in 0..n {
                    let v = out.data[[r, c, k]];
                    assert!((0.0..=1.0).contains(&v));
                }
            }
        }
    }

    #[test]
    fn m2_depth_is_channel_sum_of_semantic_depth() {
        let n = 3;
        let model = build(&spec(Variant::M2, 32, n)).unwrap();
        let out = model.forward(&sample(32, n, 3)).unwrap();
        let depth = out.depth.unwrap();
        let sd = out.semantic_depth.unwrap();
        for r in 0..32 {
            for c in 0..32 {
                let sum: f64 = (0..n).map(|k| sd[[r, c, k]]).sum();
                assert!((depth[[r, c]] - sum).abs() < 1e-9, "({r},{c})");
            }
        }
    }

    #[test]
    fn m5_branches_are_zero_outside_their_class() {
        let n = 3;
        let model = build(&spec(Variant::M5, 32, n)).unwrap();
        let s = sample(32, n, 4);
        let sem = s.semantic.as_ref().unwrap().clone();
        let out = model.forward(&s).unwrap();
        let sd = out.semantic_depth.unwrap();
        for r in 0..32 {
            for c in 0..32 {
                for k in 0..n {
                    if sem.data[[r, c, k]] == 0.0 {
                        assert_eq!(sd[[r, c, k]], 0.0, "({r},{c},{k})");
                    }
                }
            }
        }
    }

    #[test]
    fn m0_and_m6_accept_the_same_sample() {
        let s = sample(32, 3, 5);
        let mut bare = s.clone();
        bare.semantic = None;
        for variant in [Variant::M0, Variant::M6] {
            let model = build(&spec(variant, 32, 3)).unwrap();
            model.forward(&s).unwrap();
            model.forward(&bare).unwrap(); // semantic is ignored
        }
    }

    #[test]
    fn semantic_variant_without_labels_names_the_variant() {
        let mut s = sample(32, 3, 6);
        s.semantic = None;
        for variant in [Variant::M1, Variant::M7, Variant::M21, Variant::M18, Variant::M5] {
            let model = build(&spec(variant, 32, 3)).unwrap();
            match model.forward(&s) {
                Err(ModelError::MissingSemantic(name)) => assert_eq!(name, variant.as_str()),
                other => panic!("expected MissingSemantic, got {other:?}"),
            }
        }
    }

    #[test]
    fn single_conv_parameter_count() {
        let mut params = ParamSet::new();
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        init_he_conv(&mut params, &mut rng, "w", 8, 3, (3, 3));
        init_channel(&mut params, "b", 8, 0.0, true);
        assert_eq!(params.n_trainable_scalars(), 224); // 3·3·3·8 + 8
    }

    #[test]
    fn slim_variants_have_fewer_parameters() {
        let n = 5;
        let count = |variant| {
            parameter_count(
                &build(&ModelSpec {
                    variant,
                    input_width: 32,
                    input_height: 32,
                    n_classes: n,
                    width_scale: 1.0,
                    seed: 1,
                })
                .unwrap(),
            )
        };
        assert!(count(Variant::M18) < count(Variant::M7));
        assert!(count(Variant::M21) < count(Variant::M1));
        assert!(count(Variant::M20) < count(Variant::M0));
        assert!(count(Variant::M19) < count(Variant::M6));
    }

    #[test]
    fn unet_parameter_count_independent_of_input_size() {
        let a = parameter_count(&build(&spec(Variant::Unet, 32, 4)).unwrap());
        let b = parameter_count(&build(&spec(Variant::Unet, 64, 4)).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn fixed_seed_means_bit_stable_forward() {
        let n = 3;
        let s = sample(32, n, 8);
        let a = build(&spec(Variant::M21, 32, n)).unwrap();
        let b = build(&spec(Variant::M21, 32, n)).unwrap();
        let da = a.forward(&s).unwrap().depth.unwrap();
        let db = b.forward(&s).unwrap().depth.unwrap();
        assert_eq!(da, db);
        // Different seed gives different parameters.
        let mut other = spec(Variant::M21, 32, n);
        other.seed = 8;
        let c = build(&other).unwrap();
        assert_ne!(da, c.forward(&s).unwrap().depth.unwrap());
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let n = 3;
        let s = sample(32, n, 9);
        let model = build(&spec(Variant::M21, 32, n)).unwrap();
        let before = model.forward(&s).unwrap().depth.unwrap();
        let dir = tempfile::tempdir().unwrap();
        model.save(dir.path()).unwrap();
        let loaded = Model::load(dir.path()).unwrap();
        assert_eq!(loaded.spec(), model.spec());
        let after = loaded.forward(&s).unwrap().depth.unwrap();
        assert_eq!(before, after, "checkpoint must reproduce forward bits");
    }

    #[test]
    fn truncated_checkpoint_is_detected() {
        let model = build(&spec(Variant::M20, 32, 1)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        model.save(dir.path()).unwrap();
        let bin = dir.path().join("tensors.bin");
        let bytes = std::fs::read(&bin).unwrap();
        std::fs::write(&bin, &bytes[..bytes.len() - 9]).unwrap();
        assert!(matches!(Model::load(dir.path()), Err(ModelError::CorruptCheckpoint(_))));
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut s = spec(Variant::M0, 33, 1);
        s.input_width = 33;
        assert!(build(&s).is_err());
        let mut s = spec(Variant::M1, 32, 0);
        s.n_classes = 0;
        assert!(build(&s).is_err());
        let mut s = spec(Variant::M0, 32, 1);
        s.width_scale = 0.0;
        assert!(build(&s).is_err());
    }

    #[test]
    fn wrong_input_size_is_reported() {
        let model = build(&spec(Variant::M0, 64, 1)).unwrap();
        match model.forward(&sample(32, 1, 1)) {
            Err(ModelError::InputSize { got_h: 32, want_h: 64, .. }) => {}
            other => panic!("{other:?}"),
        }
    }
}
