//! Synthetic desk-scale scenes: a flat road plane plus fronto-parallel
//! boxes, rendered with exact pinhole depth, exact one-hot labels, and a
//! per-class base color shaded in proportion to depth.
//!
//! The renderer is intentionally simple but exactly analyzable: ground depth
//! at pixel row `r` is `f·h_cam / (r + 0.5 − S/2)`, boxes are billboards of
//! constant depth, and the image color of a pixel with depth `z` is
//! `base_rgb · (1 − 0.75·min(z, cap)/cap)`. The rendered base colors of
//! Building and Vegetation are parallel grays whose shaded ranges overlap:
//! a gray in the overlap band is a near building or a far vegetation
//! patch, so depth from color alone is ambiguous there while the semantic
//! channel disambiguates — the property the SSIDE networks exploit. Both
//! classes cover many pixels, which keeps the ambiguity harmless for
//! segmentation training.

use crate::adapt::AdaptError;
use crate::core::{
    CameraIntrinsics, ClassRegistry, DepthMap, ImageTensor, Sample, SemanticLabelMap,
    DEFAULT_DEPTH_CAP_M,
};
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

/// Camera height above the road plane in meters.
pub const TOY_CAMERA_HEIGHT_M: f64 = 1.5;
/// Shading slope: fraction of the base color removed at the depth cap.
pub const TOY_SHADING_SLOPE: f64 = 0.75;

/// One rendered box: class, constant depth, and the covered pixel rectangle
/// (`row_range`/`col_range` are half-open).
#[derive(Debug, Clone, PartialEq)]
pub struct ToyBoxDesc {
    pub class_index: usize,
    pub depth_m: f64,
    pub row_range: (usize, usize),
    pub col_range: (usize, usize),
}

/// Scene description emitted next to each sample; the analytic ground truth
/// that tests check the renderer against.
#[derive(Debug, Clone, PartialEq)]
pub struct ToySceneDesc {
    pub camera_height_m: f64,
    pub focal_px: f64,
    /// Image row of the horizon in pixel-center coordinates.
    pub horizon: f64,
    pub boxes: Vec<ToyBoxDesc>,
}

/// Ground-plane depth at pixel row `r` for image size `size` (pixel centers
/// at `r + 0.5`, principal point at `size/2`). `None` above the horizon.
pub fn toy_ground_depth(size: usize, row: usize) -> Option<f64> {
    let f = size as f64;
    let below = row as f64 + 0.5 - size as f64 / 2.0;
    if below <= 0.0 {
        None
    } else {
        Some(f * TOY_CAMERA_HEIGHT_M / below)
    }
}

struct ClassProfile {
    name: &'static str,
    width_m: (f64, f64),
    height_m: (f64, f64),
    /// Depth placement range; small classes stay near the camera so they
    /// project at segmentable sizes.
    depth_m: (f64, f64),
}

const BOX_PROFILES: &[ClassProfile] = &[
    ClassProfile { name: "Building", width_m: (6.0, 14.0), height_m: (5.0, 10.0), depth_m: (8.0, 45.0) },
    ClassProfile { name: "Car", width_m: (1.8, 2.6), height_m: (1.4, 1.8), depth_m: (5.0, 22.0) },
    ClassProfile { name: "Vegetation", width_m: (2.0, 4.0), height_m: (2.5, 5.0), depth_m: (6.0, 28.0) },
    ClassProfile { name: "Pole", width_m: (0.5, 0.8), height_m: (3.5, 6.0), depth_m: (4.0, 7.0) },
    ClassProfile { name: "Person", width_m: (0.55, 0.9), height_m: (1.6, 1.9), depth_m: (4.0, 8.0) },
    ClassProfile { name: "Bicycle", width_m: (1.4, 1.9), height_m: (1.0, 1.4), depth_m: (4.0, 8.0) },
];

/// Rendered appearance per class. Building [0.36]³ and Vegetation [0.40]³
/// are deliberately parallel so their shaded grays overlap (near building
/// vs far vegetation); every other class is chromatically unique.
const RENDER_COLORS: &[(&str, [f64; 3])] = &[
    ("Road", [0.50, 0.25, 0.50]),
    ("Sky", [0.27, 0.51, 0.71]),
    ("Building", [0.36, 0.36, 0.36]),
    ("Vegetation", [0.40, 0.40, 0.40]),
    ("Car", [0.05, 0.05, 0.60]),
    ("Pole", [0.95, 0.55, 0.05]),
    ("Person", [0.85, 0.10, 0.25]),
    ("Bicycle", [0.90, 0.85, 0.10]),
    ("Sidewalk", [0.95, 0.15, 0.90]),
    ("Terrain", [0.60, 0.95, 0.60]),
];

fn render_color(registry: &ClassRegistry, class_index: usize) -> [f64; 3] {
    let name = registry.class_name(class_index);
    for (n, rgb) in RENDER_COLORS {
        if *n == name {
            return *rgb;
        }
    }
    let rgb = registry.rgb(class_index);
    [rgb[0] as f64 / 255.0, rgb[1] as f64 / 255.0, rgb[2] as f64 / 255.0]
}

fn shade(depth_m: f64, cap_m: f64) -> f64 {
    1.0 - TOY_SHADING_SLOPE * depth_m.min(cap_m) / cap_m
}

/// Renders one scene. Exposed so tests can check analytic box extents; most
/// callers want [`generate_toy_dataset`].
pub fn toy_scene(
    size: usize,
    registry: &ClassRegistry,
    seed: u64,
    dataset_id: &str,
    frame_id: &str,
) -> Result<(Sample, ToySceneDesc), AdaptError> {
    if !size.is_multiple_of(32) {
        return Err(AdaptError::IndivisibleSize(size));
    }
    let road = registry
        .index_of("Road")
        .ok_or_else(|| AdaptError::ToyScene("registry lacks a Road class".into()))?;
    let sky = registry
        .index_of("Sky")
        .ok_or_else(|| AdaptError::ToyScene("registry lacks a Sky class".into()))?;
    let profiles: Vec<(usize, &ClassProfile)> = BOX_PROFILES
        .iter()
        .filter_map(|p| registry.index_of(p.name).map(|i| (i, p)))
        .collect();
    if profiles.is_empty() {
        return Err(AdaptError::ToyScene("registry has no box class".into()));
    }

    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let s = size as f64;
    let f = s;
    let cy = s / 2.0;
    let cx = s / 2.0;
    let cap = DEFAULT_DEPTH_CAP_M;

    // Base layers: sky above the horizon, road plane below.
    let mut depth = Array2::zeros((size, size));
    let mut valid = Array2::from_elem((size, size), false);
    let mut class = Array2::from_elem((size, size), sky);
    for r in 0..size {
        if let Some(z) = toy_ground_depth(size, r) {
            for c in 0..size {
                depth[[r, c]] = z;
                valid[[r, c]] = z <= cap;
                class[[r, c]] = road;
            }
        }
    }

    // Boxes, far to near so nearer ones paint over.
    let n_boxes = rng.gen_range(3..=6usize);
    let mut boxes: Vec<(usize, f64, f64, f64, f64)> = Vec::new(); // class, z, x, w, h
    let mut attempts = 0;
    while boxes.len() < n_boxes && attempts < 64 {
        attempts += 1;
        let (class_index, profile) = profiles[rng.gen_range(0..profiles.len())];
        let z = rng.gen_range(profile.depth_m.0..profile.depth_m.1);
        let w = rng.gen_range(profile.width_m.0..profile.width_m.1);
        let h = rng.gen_range(profile.height_m.0..profile.height_m.1);
        let half_view = z * cx / f;
        let x = rng.gen_range(-0.7..0.7) * half_view;
        // Skip boxes that would project to slivers.
        if f * w / z < 2.0 || f * h / z < 2.0 {
            continue;
        }
        boxes.push((class_index, z, x, w, h));
    }
    if boxes.is_empty() {
        return Err(AdaptError::ToyScene("no visible box could be placed".into()));
    }
    boxes.sort_by(|a, b| b.1.partial_cmp(&a.1).expect("finite depths"));

    let mut descs = Vec::new();
    for (class_index, z, x, w, h) in boxes {
        let col_lo = cx + f * (x - w / 2.0) / z;
        let col_hi = cx + f * (x + w / 2.0) / z;
        let row_hi = cy + f * TOY_CAMERA_HEIGHT_M / z; // ground contact
        let row_lo = cy + f * (TOY_CAMERA_HEIGHT_M - h) / z;
        // Pixels whose centers land inside [lo, hi).
        let r0 = (row_lo - 0.5).ceil().max(0.0) as usize;
        let r1 = ((row_hi - 0.5).ceil().max(0.0) as usize).min(size);
        let c0 = (col_lo - 0.5).ceil().max(0.0) as usize;
        let c1 = ((col_hi - 0.5).ceil().max(0.0) as usize).min(size);
        if r0 >= r1 || c0 >= c1 {
            continue;
        }
        for r in r0..r1 {
            for c in c0..c1 {
                depth[[r, c]] = z;
                valid[[r, c]] = true;
                class[[r, c]] = class_index;
            }
        }
        descs.push(ToyBoxDesc { class_index, depth_m: z, row_range: (r0, r1), col_range: (c0, c1) });
    }

    // Paint image and one-hot labels from the class/depth layers.
    let mut image = Array3::zeros((size, size, 3));
    let mut onehot = Array3::zeros((size, size, registry.len()));
    for r in 0..size {
        for c in 0..size {
            let k = class[[r, c]];
            onehot[[r, c, k]] = 1.0;
            let rgb = render_color(registry, k);
            let factor = if k == sky { 1.0 } else { shade(depth[[r, c]], cap) };
            for ch in 0..3 {
                image[[r, c, ch]] = rgb[ch] * factor;
            }
        }
    }

    let sample = Sample {
        image: ImageTensor::new(image).expect("H×W×3 by construction"),
        semantic: Some(SemanticLabelMap::new(onehot, registry.name())),
        depth: Some(DepthMap::new(depth, valid, cap)),
        intrinsics: CameraIntrinsics::new(f, s, s).expect("positive"),
        dataset_id: dataset_id.to_string(),
        frame_id: frame_id.to_string(),
    };
    let desc =
        ToySceneDesc { camera_height_m: TOY_CAMERA_HEIGHT_M, focal_px: f, horizon: cy, boxes: descs };
    Ok((sample, desc))
}

/// Deterministic toy dataset: `n_samples` rendered scenes of `size×size`
/// (size divisible by 32). The same `(n, size, registry, seed)` always
/// yields bit-identical samples, and sample `i` does not depend on `n`.
pub fn generate_toy_dataset(
    n_samples: usize,
    size: usize,
    registry: &ClassRegistry,
    seed: u64,
) -> Result<Vec<Sample>, AdaptError> {
    Ok(generate_toy_dataset_with_desc(n_samples, size, registry, seed)?
        .into_iter()
        .map(|(s, _)| s)
        .collect())
}

/// As [`generate_toy_dataset`] but keeps the analytic scene descriptions.
pub fn generate_toy_dataset_with_desc(
    n_samples: usize,
    size: usize,
    registry: &ClassRegistry,
    seed: u64,
) -> Result<Vec<(Sample, ToySceneDesc)>, AdaptError> {
    if n_samples == 0 {
        return Err(AdaptError::ToyScene("n_samples must be at least 1".into()));
    }
    if !size.is_multiple_of(32) {
        return Err(AdaptError::IndivisibleSize(size));
    }
    let mut master = ChaCha20Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n_samples);
    for i in 0..n_samples {
        let sample_seed = master.gen::<u64>();
        out.push(toy_scene(size, registry, sample_seed, "toy", &format!("{i:05}"))?);
    }
    Ok(out)
}
