//! Dataset adaptation: AFOV-unifying crops, resizing, RGB↔one-hot label
//! conversion, cross-dataset class merging, unit normalization, splits, and
//! the synthetic toy-scene generator.

pub mod datasets;
pub mod manifest;
pub mod toy;

pub use datasets::{
    afov_table, common_registry, lyft_reference_afov_deg, merge_to_common, registry_by_name,
    source_registry, AfovRow, DatasetId,
};
pub use manifest::{
    load_manifest, write_predicted_semantics, write_dataset, DatasetManifest, DepthUnit,
};
pub use toy::{generate_toy_dataset, generate_toy_dataset_with_desc, ToyBoxDesc, ToySceneDesc};

use crate::core::{
    afov_of, CameraIntrinsics, ClassRegistry, CoreError, DepthMap, ImageTensor, Sample,
    SemanticLabelMap,
};
use ndarray::{Array2, Array3};
use std::collections::HashMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AdaptError {
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error("target AFOV {0}° outside (0, 180)")]
    InvalidTargetAfov(f64),
    #[error("{field}: expected {expected}, got {got}")]
    DimensionMismatch { field: &'static str, expected: String, got: String },
    #[error("registry mismatch: map uses {map_registry:?}, table source is {table_source:?}")]
    RegistryMismatch { map_registry: String, table_source: String },
    #[error("merge table: {0}")]
    InvalidMergeTable(String),
    #[error("unknown registry {0:?}")]
    UnknownRegistry(String),
    #[error("unknown depth unit descriptor {0:?}")]
    UnknownDepthUnit(String),
    #[error("toy generator: size {0} not divisible by 32")]
    IndivisibleSize(usize),
    #[error("toy generator: {0}")]
    ToyScene(String),
    #[error("train fraction {0} outside (0, 1)")]
    InvalidTrainFraction(f64),
    #[error("split too small: {n_frames} frame(s) cannot be split at fraction {fraction}")]
    SplitTooSmall { n_frames: usize, fraction: f64 },
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("missing files:\n{}", .0.join("\n"))]
    MissingFiles(Vec<String>),
    #[error("io error at {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("image error at {path}: {message}")]
    Image { path: String, message: String },
}

/// Raw dimension in pixels snaps to the nearest integer when within this
/// distance; this absorbs the rounding of published AFOV targets (printed
/// at two decimals) so exact-fit sources keep their exact dimension.
const CROP_SNAP_PX: f64 = 0.01;

/// AFOV-unifying crop: dimensions, centered origin, resize target and the
/// field of view actually achieved by the integer crop.
#[derive(Debug, Clone, PartialEq)]
pub struct CropPlan {
    pub source_intrinsics: CameraIntrinsics,
    pub crop_width_px: usize,
    pub crop_height_px: usize,
    /// (row, col) of the crop's top-left corner; centered with floor division.
    pub crop_origin: (usize, usize),
    /// Output (width, height) after resizing the crop.
    pub target_size: (usize, usize),
    /// (horizontal°, vertical°) recomputed from the final integer crop.
    pub achieved_afov_deg: (f64, f64),
}

impl CropPlan {
    pub fn with_target_size(mut self, width: usize, height: usize) -> Self {
        self.target_size = (width, height);
        self
    }

    /// True when an axis was clamped to the source size because the source
    /// AFOV was already at or below the target (AFOV can only be decreased).
    pub fn is_clamped(&self) -> bool {
        self.crop_width_px == self.source_intrinsics.width_px as usize
            || self.crop_height_px == self.source_intrinsics.height_px as usize
    }
}

fn crop_dim(focal_px: f64, target_afov_deg: f64, even: bool) -> usize {
    let raw = 2.0 * focal_px * (target_afov_deg.to_radians() / 2.0).tan();
    let snapped = if (raw - raw.round()).abs() <= CROP_SNAP_PX { raw.round() } else { raw.ceil() };
    let mut dim = snapped as usize;
    if even && dim % 2 == 1 {
        dim += 1;
    }
    dim.max(1)
}

/// Plans the centered crop that reduces a source camera to the target AFOV.
///
/// Per axis the crop dimension is `2·f·tan(θ/2)` rounded up (horizontal
/// additionally to the next even integer), clamped to the source dimension
/// when the source AFOV is already smaller than the target. The achieved
/// AFOV is recomputed from the final integer dimensions.
pub fn plan_afov_crop(
    src: &CameraIntrinsics,
    target_h_afov_deg: f64,
    target_v_afov_deg: f64,
) -> Result<CropPlan, AdaptError> {
    CameraIntrinsics::new(src.focal_length_px, src.width_px, src.height_px)?;
    for t in [target_h_afov_deg, target_v_afov_deg] {
        if !(t > 0.0 && t < 180.0) {
            return Err(AdaptError::InvalidTargetAfov(t));
        }
    }
    let src_w = src.width_px as usize;
    let src_h = src.height_px as usize;
    let crop_w = crop_dim(src.focal_length_px, target_h_afov_deg, true).min(src_w);
    let crop_h = crop_dim(src.focal_length_px, target_v_afov_deg, false).min(src_h);
    let origin = ((src_h - crop_h) / 2, (src_w - crop_w) / 2);
    let achieved = (
        afov_of(crop_w as f64, src.focal_length_px)?,
        afov_of(crop_h as f64, src.focal_length_px)?,
    );
    Ok(CropPlan {
        source_intrinsics: *src,
        crop_width_px: crop_w,
        crop_height_px: crop_h,
        crop_origin: origin,
        target_size: (1216, 352),
        achieved_afov_deg: achieved,
    })
}

fn resize_bilinear(src: &Array3<f64>, out_h: usize, out_w: usize) -> Array3<f64> {
    let (h, w, ch) = src.dim();
    let mut out = Array3::zeros((out_h, out_w, ch));
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    for r in 0..out_h {
        let fy = ((r as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let wy = fy - y0 as f64;
        for c in 0..out_w {
            let fx = ((c as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let wx = fx - x0 as f64;
            for k in 0..ch {
                let top = src[[y0, x0, k]] * (1.0 - wx) + src[[y0, x1, k]] * wx;
                let bot = src[[y1, x0, k]] * (1.0 - wx) + src[[y1, x1, k]] * wx;
                out[[r, c, k]] = top * (1.0 - wy) + bot * wy;
            }
        }
    }
    out
}

fn nearest_index(dst: usize, scale: f64, limit: usize) -> usize {
    (((dst as f64 + 0.5) * scale).floor() as usize).min(limit - 1)
}

fn resize_nearest3(src: &Array3<f64>, out_h: usize, out_w: usize) -> Array3<f64> {
    let (h, w, ch) = src.dim();
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    Array3::from_shape_fn((out_h, out_w, ch), |(r, c, k)| {
        src[[nearest_index(r, sy, h), nearest_index(c, sx, w), k]]
    })
}

fn resize_nearest2<T: Copy>(src: &Array2<T>, out_h: usize, out_w: usize) -> Array2<T> {
    let (h, w) = src.dim();
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    Array2::from_shape_fn((out_h, out_w), |(r, c)| {
        src[[nearest_index(r, sy, h), nearest_index(c, sx, w)]]
    })
}

/// Applies a [`CropPlan`]: centered crop, then resize to the plan's target
/// size. Images are resampled bilinearly; label maps, depth values and
/// validity masks use nearest-neighbor so no value is invented. The focal
/// length is rescaled by `target_width / crop_width`.
pub fn apply_crop_resize(s: &Sample, plan: &CropPlan) -> Result<Sample, AdaptError> {
    let (h, w) = (s.image.height(), s.image.width());
    let (src_h, src_w) =
        (plan.source_intrinsics.height_px as usize, plan.source_intrinsics.width_px as usize);
    if (h, w) != (src_h, src_w) {
        return Err(AdaptError::DimensionMismatch {
            field: "image",
            expected: format!("{src_h}x{src_w}"),
            got: format!("{h}x{w}"),
        });
    }
    let (r0, c0) = plan.crop_origin;
    let (ch, cw) = (plan.crop_height_px, plan.crop_width_px);
    let (tw, th) = plan.target_size;

    let image_crop = s.image.data.slice(ndarray::s![r0..r0 + ch, c0..c0 + cw, ..]).to_owned();
    let image = ImageTensor::new(resize_bilinear(&image_crop, th, tw))?;

    let semantic = match &s.semantic {
        Some(sem) => {
            if (sem.height(), sem.width()) != (src_h, src_w) {
                return Err(AdaptError::DimensionMismatch {
                    field: "semantic",
                    expected: format!("{src_h}x{src_w}"),
                    got: format!("{}x{}", sem.height(), sem.width()),
                });
            }
            let crop = sem.data.slice(ndarray::s![r0..r0 + ch, c0..c0 + cw, ..]).to_owned();
            Some(SemanticLabelMap::new(resize_nearest3(&crop, th, tw), sem.registry_name.clone()))
        }
        None => None,
    };

    let depth = match &s.depth {
        Some(d) => {
            if (d.height(), d.width()) != (src_h, src_w) {
                return Err(AdaptError::DimensionMismatch {
                    field: "depth",
                    expected: format!("{src_h}x{src_w}"),
                    got: format!("{}x{}", d.height(), d.width()),
                });
            }
            let vals = d.values.slice(ndarray::s![r0..r0 + ch, c0..c0 + cw]).to_owned();
            let mask = d.valid_mask.slice(ndarray::s![r0..r0 + ch, c0..c0 + cw]).to_owned();
            Some(DepthMap::new(
                resize_nearest2(&vals, th, tw),
                resize_nearest2(&mask, th, tw),
                d.cap_m,
            ))
        }
        None => None,
    };

    let intrinsics = CameraIntrinsics::new(
        plan.source_intrinsics.focal_length_px * tw as f64 / cw as f64,
        tw as f64,
        th as f64,
    )?;
    Ok(Sample {
        image,
        semantic,
        depth,
        intrinsics,
        dataset_id: s.dataset_id.clone(),
        frame_id: s.frame_id.clone(),
    })
}

/// Decodes an RGB label image into a one-hot map over the registry. Pixels
/// whose RGB matches no registry code fall into channel 0 (`Unlabeled`);
/// their count is returned for diagnostics.
pub fn rgb_to_onehot(
    label_image: &Array3<u8>,
    registry: &ClassRegistry,
) -> (SemanticLabelMap, usize) {
    let (h, w, _) = label_image.dim();
    let lut: HashMap<[u8; 3], usize> =
        registry.iter().enumerate().map(|(i, (_, rgb))| (rgb, i)).collect();
    let mut data = Array3::zeros((h, w, registry.len()));
    let mut unmatched = 0usize;
    for r in 0..h {
        for c in 0..w {
            let rgb = [label_image[[r, c, 0]], label_image[[r, c, 1]], label_image[[r, c, 2]]];
            let idx = match lut.get(&rgb) {
                Some(&i) => i,
                None => {
                    unmatched += 1;
                    0
                }
            };
            data[[r, c, idx]] = 1.0;
        }
    }
    (SemanticLabelMap::new(data, registry.name()), unmatched)
}

/// Encodes a label map back to RGB: per pixel the argmax channel's registry
/// color (ties resolve to the lowest channel, i.e. `Unlabeled` on uniform
/// maps).
pub fn onehot_to_rgb(
    m: &SemanticLabelMap,
    registry: &ClassRegistry,
) -> Result<Array3<u8>, AdaptError> {
    if m.channels() != registry.len() {
        return Err(AdaptError::DimensionMismatch {
            field: "semantic channels",
            expected: registry.len().to_string(),
            got: m.channels().to_string(),
        });
    }
    let arg = m.argmax();
    let (h, w) = arg.dim();
    let mut out = Array3::zeros((h, w, 3));
    for r in 0..h {
        for c in 0..w {
            let rgb = registry.rgb(arg[[r, c]]);
            for k in 0..3 {
                out[[r, c, k]] = rgb[k];
            }
        }
    }
    Ok(out)
}

/// Mapping from every class of a source registry to a class of a target
/// registry ("removed" classes map to `Unlabeled`).
#[derive(Debug, Clone)]
pub struct MergeTable {
    source: ClassRegistry,
    target: ClassRegistry,
    mapping: Vec<usize>,
}

impl MergeTable {
    /// Builds a table from (source_class, target_class) name pairs; every
    /// source class must be mapped exactly once and every target name must
    /// exist in the target registry.
    pub fn new(
        source: ClassRegistry,
        target: ClassRegistry,
        pairs: &[(String, String)],
    ) -> Result<Self, AdaptError> {
        let mut mapping = vec![usize::MAX; source.len()];
        for (from, to) in pairs {
            let si = source.index_of(from).ok_or_else(|| {
                AdaptError::InvalidMergeTable(format!("unknown source class {from:?}"))
            })?;
            let ti = target.index_of(to).ok_or_else(|| {
                AdaptError::InvalidMergeTable(format!("unknown target class {to:?}"))
            })?;
            if mapping[si] != usize::MAX {
                return Err(AdaptError::InvalidMergeTable(format!(
                    "source class {from:?} mapped twice"
                )));
            }
            mapping[si] = ti;
        }
        if let Some(missing) = mapping.iter().position(|m| *m == usize::MAX) {
            return Err(AdaptError::InvalidMergeTable(format!(
                "source class {:?} has no mapping",
                source.class_name(missing)
            )));
        }
        Ok(Self { source, target, mapping })
    }

    pub fn source(&self) -> &ClassRegistry {
        &self.source
    }

    pub fn target(&self) -> &ClassRegistry {
        &self.target
    }

    pub fn target_index(&self, source_index: usize) -> usize {
        self.mapping[source_index]
    }
}

/// Re-bins a label map onto the merge table's target registry: each target
/// channel is the sum of the source channels that map into it, so per-pixel
/// mass is preserved and one-hot inputs stay one-hot.
pub fn merge_classes(
    m: &SemanticLabelMap,
    table: &MergeTable,
) -> Result<SemanticLabelMap, AdaptError> {
    if m.registry_name != table.source.name() {
        return Err(AdaptError::RegistryMismatch {
            map_registry: m.registry_name.clone(),
            table_source: table.source.name().to_string(),
        });
    }
    if m.channels() != table.source.len() {
        return Err(AdaptError::DimensionMismatch {
            field: "semantic channels",
            expected: table.source.len().to_string(),
            got: m.channels().to_string(),
        });
    }
    let (h, w, n) = m.data.dim();
    let mut out = Array3::zeros((h, w, table.target.len()));
    for r in 0..h {
        for c in 0..w {
            for k in 0..n {
                let v = m.data[[r, c, k]];
                if v != 0.0 {
                    out[[r, c, table.mapping[k]]] += v;
                }
            }
        }
    }
    Ok(SemanticLabelMap::new(out, table.target.name()))
}

/// Raw, on-disk representation of a frame before normalization.
#[derive(Debug, Clone)]
pub struct RawSample {
    pub image_u8: Array3<u8>,
    pub semantic_rgb: Option<Array3<u8>>,
    pub depth_counts: Option<Array2<u16>>,
    pub depth_unit: DepthUnit,
    pub depth_cap_m: f64,
    pub intrinsics: CameraIntrinsics,
    pub dataset_id: String,
    pub frame_id: String,
}

/// Converts a raw frame to the in-memory convention: image in `[0,1]`,
/// labels one-hot, depth in meters with `raw == 0` or `> cap` marked
/// invalid.
pub fn normalize_and_convert(
    raw: &RawSample,
    registry: &ClassRegistry,
) -> Result<Sample, AdaptError> {
    let image = ImageTensor::new(raw.image_u8.mapv(|v| v as f64 / 255.0))?;
    let semantic = raw.semantic_rgb.as_ref().map(|rgb| rgb_to_onehot(rgb, registry).0);
    let depth = raw.depth_counts.as_ref().map(|counts| {
        let scale = raw.depth_unit.meters_per_count();
        let values = counts.mapv(|c| c as f64 * scale);
        let mask = ndarray::Zip::from(counts)
            .and(&values)
            .map_collect(|&c, &v| c > 0 && v <= raw.depth_cap_m);
        DepthMap::new(values, mask, raw.depth_cap_m)
    });
    Ok(Sample {
        image,
        semantic,
        depth,
        intrinsics: raw.intrinsics,
        dataset_id: raw.dataset_id.clone(),
        frame_id: raw.frame_id.clone(),
    })
}

/// Deterministic shuffled split of frame ids into disjoint, exhaustive
/// train/test lists. Errors when either side would be empty.
pub fn split_dataset(
    frames: &[String],
    train_fraction: f64,
    seed: u64,
) -> Result<(Vec<String>, Vec<String>), AdaptError> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(AdaptError::InvalidTrainFraction(train_fraction));
    }
    let n_train = (frames.len() as f64 * train_fraction).round() as usize;
    if n_train == 0 || n_train >= frames.len() {
        return Err(AdaptError::SplitTooSmall { n_frames: frames.len(), fraction: train_fraction });
    }
    let mut order: Vec<usize> = (0..frames.len()).collect();
    // Fisher-Yates with a seeded stream so the split is reproducible.
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(seed);
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    let train = order[..n_train].iter().map(|&i| frames[i].clone()).collect();
    let test = order[n_train..].iter().map(|&i| frames[i].clone()).collect();
    Ok((train, test))
}
