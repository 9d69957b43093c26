//! Shared domain types and pinhole field-of-view geometry.
//!
//! Everything downstream (dataset adaptation, networks, metrics, analysis)
//! speaks in terms of these types. They are immutable after construction
//! and safe to share across threads; the free functions are pure.

use ndarray::{Array2, Array3};
use thiserror::Error;

/// Depth values above this are treated as invalid unless a dataset
/// overrides the cap. Matches the LIDAR-comparable range the synthetic
/// datasets are clipped to.
pub const DEFAULT_DEPTH_CAP_M: f64 = 100.0;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("afov_of: {name} must be strictly positive, got {value}")]
    NonPositive { name: &'static str, value: f64 },
    #[error("registry: {0}")]
    Registry(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
}

/// Ordered set of semantic classes. The index of an entry is its one-hot
/// channel; entry 0 is always `Unlabeled` with RGB `[0,0,0]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassRegistry {
    name: String,
    entries: Vec<(String, [u8; 3])>,
}

impl ClassRegistry {
    /// Builds a registry, enforcing distinct names, distinct RGB codes and
    /// the `Unlabeled`-first convention.
    pub fn new(
        name: impl Into<String>,
        entries: Vec<(String, [u8; 3])>,
    ) -> Result<Self, CoreError> {
        if entries.is_empty() {
            return Err(CoreError::Registry("registry must have at least one class".into()));
        }
        if entries[0].0 != "Unlabeled" || entries[0].1 != [0, 0, 0] {
            return Err(CoreError::Registry(
                "entry 0 must be \"Unlabeled\" with rgb [0,0,0]".into(),
            ));
        }
        for (i, (name_i, rgb_i)) in entries.iter().enumerate() {
            for (name_j, rgb_j) in entries.iter().skip(i + 1) {
                if name_i == name_j {
                    return Err(CoreError::Registry(format!("duplicate class name {name_i:?}")));
                }
                if rgb_i == rgb_j {
                    return Err(CoreError::Registry(format!(
                        "classes {name_i:?} and {name_j:?} share rgb code {rgb_i:?}"
                    )));
                }
            }
        }
        Ok(Self { name: name.into(), entries })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn class_name(&self, index: usize) -> &str {
        &self.entries[index].0
    }

    pub fn rgb(&self, index: usize) -> [u8; 3] {
        self.entries[index].1
    }

    pub fn index_of(&self, class_name: &str) -> Option<usize> {
        self.entries.iter().position(|(n, _)| n == class_name)
    }

    pub fn index_of_rgb(&self, rgb: [u8; 3]) -> Option<usize> {
        self.entries.iter().position(|(_, c)| *c == rgb)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, [u8; 3])> {
        self.entries.iter().map(|(n, c)| (n.as_str(), *c))
    }
}

/// RGB image with values in `[0,1]`, stored `H×W×3`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    pub data: Array3<f64>,
}

impl ImageTensor {
    pub fn new(data: Array3<f64>) -> Result<Self, CoreError> {
        if data.shape()[2] != 3 {
            return Err(CoreError::ShapeMismatch(format!(
                "image must be H×W×3, got {:?}",
                data.shape()
            )));
        }
        Ok(Self { data })
    }

    pub fn height(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[1]
    }
}

/// `H×W×n` semantic label map over a [`ClassRegistry`].
///
/// Ground-truth maps are binary with per-pixel channel sums of exactly 1;
/// predicted maps carry per-channel values in `[0,1]`. Binary maps are held
/// to the one-hot invariant by [`validate_sample`].
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticLabelMap {
    pub data: Array3<f64>,
    pub registry_name: String,
}

impl SemanticLabelMap {
    pub fn new(data: Array3<f64>, registry_name: impl Into<String>) -> Self {
        Self { data, registry_name: registry_name.into() }
    }

    pub fn height(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[2]
    }

    /// True when every value is exactly 0 or 1 and each pixel has exactly
    /// one active channel.
    pub fn is_one_hot(&self) -> bool {
        let (h, w, _) = self.data.dim();
        for r in 0..h {
            for c in 0..w {
                let mut sum = 0.0;
                for v in self.data.slice(ndarray::s![r, c, ..]).iter() {
                    if *v != 0.0 && *v != 1.0 {
                        return false;
                    }
                    sum += *v;
                }
                if sum != 1.0 {
                    return false;
                }
            }
        }
        true
    }

    /// Per-pixel argmax channel (ties resolve to the lowest index).
    pub fn argmax(&self) -> Array2<usize> {
        let (h, w, n) = self.data.dim();
        let mut out = Array2::zeros((h, w));
        for r in 0..h {
            for c in 0..w {
                let mut best = 0usize;
                let mut best_v = self.data[[r, c, 0]];
                for k in 1..n {
                    let v = self.data[[r, c, k]];
                    if v > best_v {
                        best_v = v;
                        best = k;
                    }
                }
                out[[r, c]] = best;
            }
        }
        out
    }
}

/// Per-pixel depth in meters plus a validity mask.
///
/// Invalid pixels (no LIDAR return, sky holes, beyond the cap) are excluded
/// from every metric and loss; their stored values are meaningless.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub values: Array2<f64>,
    pub valid_mask: Array2<bool>,
    pub cap_m: f64,
}

impl DepthMap {
    pub fn new(values: Array2<f64>, valid_mask: Array2<bool>, cap_m: f64) -> Self {
        Self { values, valid_mask, cap_m }
    }

    /// Prediction wrapper: every pixel valid, default cap.
    pub fn prediction(values: Array2<f64>) -> Self {
        let mask = Array2::from_elem(values.dim(), true);
        Self { values, valid_mask: mask, cap_m: DEFAULT_DEPTH_CAP_M }
    }

    pub fn height(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn n_valid(&self) -> usize {
        self.valid_mask.iter().filter(|v| **v).count()
    }
}

/// Pinhole camera description; the source of angular field of view.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    pub focal_length_px: f64,
    pub width_px: f64,
    pub height_px: f64,
}

impl CameraIntrinsics {
    pub fn new(focal_length_px: f64, width_px: f64, height_px: f64) -> Result<Self, CoreError> {
        for (name, value) in [
            ("focal_length_px", focal_length_px),
            ("width_px", width_px),
            ("height_px", height_px),
        ] {
            if !(value > 0.0) {
                return Err(CoreError::NonPositive { name, value });
            }
        }
        Ok(Self { focal_length_px, width_px, height_px })
    }

    pub fn horizontal_afov_deg(&self) -> f64 {
        afov_of(self.width_px, self.focal_length_px).expect("positive by construction")
    }

    pub fn vertical_afov_deg(&self) -> f64 {
        afov_of(self.height_px, self.focal_length_px).expect("positive by construction")
    }
}

/// One dataset frame: image plus optional semantic label map and depth map.
#[derive(Debug, Clone)]
pub struct Sample {
    pub image: ImageTensor,
    pub semantic: Option<SemanticLabelMap>,
    pub depth: Option<DepthMap>,
    pub intrinsics: CameraIntrinsics,
    pub dataset_id: String,
    pub frame_id: String,
}

/// Angular field of view in degrees of a sensor dimension `dim_px` seen
/// through focal length `focal_length_px`: `2·atan(dim/(2f))`.
///
/// Strictly increasing in `dim_px`, strictly decreasing in
/// `focal_length_px`, always in `(0, 180)`.
pub fn afov_of(dim_px: f64, focal_length_px: f64) -> Result<f64, CoreError> {
    if !(dim_px > 0.0) {
        return Err(CoreError::NonPositive { name: "dim_px", value: dim_px });
    }
    if !(focal_length_px > 0.0) {
        return Err(CoreError::NonPositive { name: "focal_length_px", value: focal_length_px });
    }
    Ok((dim_px / (2.0 * focal_length_px)).atan().to_degrees() * 2.0)
}

/// Checks every type invariant of a [`Sample`] and reports violations as
/// human-readable strings. Returns an empty list iff the sample is
/// well-formed. Never panics or errors: this is a diagnostic surface.
pub fn validate_sample(s: &Sample) -> Vec<String> {
    let mut violations = Vec::new();
    let (h, w) = (s.image.height(), s.image.width());
    if h == 0 || w == 0 {
        violations.push(format!("image: empty dimensions {h}x{w}"));
    }
    for ((r, c, k), v) in s.image.data.indexed_iter() {
        if !(0.0..=1.0).contains(v) || !v.is_finite() {
            violations.push(format!("image: value {v} outside [0,1] at ({r},{c},{k})"));
            break;
        }
    }

    if let Some(sem) = &s.semantic {
        if (sem.height(), sem.width()) != (h, w) {
            violations.push(format!(
                "semantic: size {}x{} does not match image {h}x{w}",
                sem.height(),
                sem.width()
            ));
        } else {
            let binary = sem.data.iter().all(|v| *v == 0.0 || *v == 1.0);
            if binary {
                'scan: for r in 0..sem.height() {
                    for c in 0..sem.width() {
                        let sum: f64 = sem.data.slice(ndarray::s![r, c, ..]).sum();
                        if sum != 1.0 {
                            violations.push(format!("semantic: not one-hot at ({r},{c})"));
                            break 'scan;
                        }
                    }
                }
            } else if let Some(v) = sem.data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                violations.push(format!("semantic: value {v} outside [0,1]"));
            }
        }
    }

    if let Some(depth) = &s.depth {
        if (depth.height(), depth.width()) != (h, w) {
            violations.push(format!(
                "depth: size {}x{} does not match image {h}x{w}",
                depth.height(),
                depth.width()
            ));
        }
        if depth.valid_mask.dim() != depth.values.dim() {
            violations.push("depth: valid_mask shape differs from values".into());
        } else {
            for ((r, c), v) in depth.values.indexed_iter() {
                if !depth.valid_mask[[r, c]] {
                    continue;
                }
                if !(*v > 0.0) || !v.is_finite() {
                    violations.push(format!("depth: non-positive valid value {v} at ({r},{c})"));
                    break;
                }
                if *v > depth.cap_m {
                    violations.push(format!("depth: exceeds cap ({v} > {} at ({r},{c}))", depth.cap_m));
                    break;
                }
            }
        }
    }

    if let Err(e) =
        CameraIntrinsics::new(s.intrinsics.focal_length_px, s.intrinsics.width_px, s.intrinsics.height_px)
    {
        violations.push(format!("intrinsics: {e}"));
    }
    violations
}
