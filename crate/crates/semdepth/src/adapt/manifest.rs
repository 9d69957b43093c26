//! On-disk dataset layout and manifests.
//!
//! A dataset lives at `<root>/{image,semantic,depth}/<frame_id>.png`:
//! images and RGB label maps as 8-bit PNG, depth as 16-bit single-channel
//! PNG whose unit is declared by the manifest's `depth_unit`. The manifest
//! itself is a flat `key = value` file with keys `dataset_id`, `root`,
//! `focal_length_px`, `depth_unit`, `registry_name`, `split_seed`,
//! `train_fraction` (optional `depth_cap_m`). An optional `split` key of
//! `train` or `test` restricts the manifest to that side of the
//! deterministic split.

use crate::adapt::{normalize_and_convert, onehot_to_rgb, AdaptError, RawSample};
use crate::core::{CameraIntrinsics, ClassRegistry, Sample, SemanticLabelMap, DEFAULT_DEPTH_CAP_M};
use crate::kv::KvMap;
use ndarray::{Array2, Array3};
use std::path::{Path, PathBuf};

/// Meters per raw depth count. Parses `mm`, `cm`, `m`, fractions like
/// `1/256`, or a bare float.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DepthUnit {
    meters_per_count: f64,
    descriptor: DepthUnitKind,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum DepthUnitKind {
    Millimeters,
    Centimeters,
    Meters,
    Fraction(u32, u32),
    Scale(f64),
}

impl DepthUnit {
    pub fn parse(descriptor: &str) -> Result<Self, AdaptError> {
        let trimmed = descriptor.trim();
        let (kind, scale) = match trimmed {
            "mm" | "millimeters" => (DepthUnitKind::Millimeters, 1e-3),
            "cm" | "centimeters" => (DepthUnitKind::Centimeters, 1e-2),
            "m" | "meters" => (DepthUnitKind::Meters, 1.0),
            other => {
                if let Some((num, den)) = other.split_once('/') {
                    let num: u32 = num
                        .trim()
                        .parse()
                        .map_err(|_| AdaptError::UnknownDepthUnit(other.to_string()))?;
                    let den: u32 = den
                        .trim()
                        .parse()
                        .map_err(|_| AdaptError::UnknownDepthUnit(other.to_string()))?;
                    if den == 0 {
                        return Err(AdaptError::UnknownDepthUnit(other.to_string()));
                    }
                    (DepthUnitKind::Fraction(num, den), num as f64 / den as f64)
                } else {
                    let scale: f64 = other
                        .parse()
                        .map_err(|_| AdaptError::UnknownDepthUnit(other.to_string()))?;
                    if !(scale > 0.0) {
                        return Err(AdaptError::UnknownDepthUnit(other.to_string()));
                    }
                    (DepthUnitKind::Scale(scale), scale)
                }
            }
        };
        Ok(Self { meters_per_count: scale, descriptor: kind })
    }

    pub fn meters_per_count(&self) -> f64 {
        self.meters_per_count
    }

    pub fn descriptor(&self) -> String {
        match self.descriptor {
            DepthUnitKind::Millimeters => "mm".into(),
            DepthUnitKind::Centimeters => "cm".into(),
            DepthUnitKind::Meters => "m".into(),
            DepthUnitKind::Fraction(n, d) => format!("{n}/{d}"),
            DepthUnitKind::Scale(s) => format!("{s}"),
        }
    }
}

/// A loaded dataset manifest: frame ids, per-frame file paths, intrinsics,
/// registry and split policy. All listed files were verified to exist at
/// load time.
#[derive(Debug, Clone)]
pub struct DatasetManifest {
    pub dataset_id: String,
    pub root: PathBuf,
    pub frames: Vec<String>,
    pub focal_length_px: f64,
    pub depth_unit: DepthUnit,
    pub registry: ClassRegistry,
    pub split_seed: u64,
    pub train_fraction: f64,
    pub depth_cap_m: f64,
    pub has_semantic: bool,
    pub has_depth: bool,
    image_size: (usize, usize),
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// (height, width) of the frames, read from the first image.
    pub fn image_size(&self) -> (usize, usize) {
        self.image_size
    }

    pub fn intrinsics(&self) -> CameraIntrinsics {
        CameraIntrinsics::new(
            self.focal_length_px,
            self.image_size.1 as f64,
            self.image_size.0 as f64,
        )
        .expect("validated at load")
    }

    pub fn image_path(&self, frame: &str) -> PathBuf {
        self.root.join("image").join(format!("{frame}.png"))
    }

    pub fn semantic_path(&self, frame: &str) -> PathBuf {
        self.root.join("semantic").join(format!("{frame}.png"))
    }

    pub fn depth_path(&self, frame: &str) -> PathBuf {
        self.root.join("depth").join(format!("{frame}.png"))
    }

    /// Loads and normalizes one frame.
    pub fn load_sample(&self, frame: &str) -> Result<Sample, AdaptError> {
        let image_u8 = read_rgb8(&self.image_path(frame))?;
        let semantic_rgb =
            if self.has_semantic { Some(read_rgb8(&self.semantic_path(frame))?) } else { None };
        let depth_counts =
            if self.has_depth { Some(read_gray16(&self.depth_path(frame))?) } else { None };
        let raw = RawSample {
            image_u8,
            semantic_rgb,
            depth_counts,
            depth_unit: self.depth_unit,
            depth_cap_m: self.depth_cap_m,
            intrinsics: self.intrinsics(),
            dataset_id: self.dataset_id.clone(),
            frame_id: frame.to_string(),
        };
        normalize_and_convert(&raw, &self.registry)
    }

    /// Loads every frame in manifest order.
    pub fn load_all(&self) -> Result<Vec<Sample>, AdaptError> {
        self.frames.iter().map(|f| self.load_sample(f)).collect()
    }

    /// Deterministic train/test frame split per the manifest policy.
    pub fn split(&self) -> Result<(Vec<String>, Vec<String>), AdaptError> {
        crate::adapt::split_dataset(&self.frames, self.train_fraction, self.split_seed)
    }

    /// Manifest restricted to the given frames (split views).
    pub fn subset(&self, frames: Vec<String>) -> DatasetManifest {
        DatasetManifest { frames, ..self.clone() }
    }
}

fn io_err(path: &Path, source: std::io::Error) -> AdaptError {
    AdaptError::Io { path: path.display().to_string(), source }
}

fn image_err(path: &Path, err: image::ImageError) -> AdaptError {
    AdaptError::Image { path: path.display().to_string(), message: err.to_string() }
}

fn read_rgb8(path: &Path) -> Result<Array3<u8>, AdaptError> {
    let img = image::open(path).map_err(|e| image_err(path, e))?.to_rgb8();
    let (w, h) = img.dimensions();
    Ok(Array3::from_shape_fn((h as usize, w as usize, 3), |(r, c, k)| {
        img.get_pixel(c as u32, r as u32).0[k]
    }))
}

fn read_gray16(path: &Path) -> Result<Array2<u16>, AdaptError> {
    let img = image::open(path).map_err(|e| image_err(path, e))?.to_luma16();
    let (w, h) = img.dimensions();
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(r, c)| {
        img.get_pixel(c as u32, r as u32).0[0]
    }))
}

fn write_rgb8(path: &Path, data: &Array3<u8>) -> Result<(), AdaptError> {
    let (h, w, _) = data.dim();
    let mut img = image::RgbImage::new(w as u32, h as u32);
    for r in 0..h {
        for c in 0..w {
            img.put_pixel(
                c as u32,
                r as u32,
                image::Rgb([data[[r, c, 0]], data[[r, c, 1]], data[[r, c, 2]]]),
            );
        }
    }
    img.save(path).map_err(|e| image_err(path, e))
}

fn write_gray16(path: &Path, data: &Array2<u16>) -> Result<(), AdaptError> {
    let (h, w) = data.dim();
    let mut img = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::new(w as u32, h as u32);
    for r in 0..h {
        for c in 0..w {
            img.put_pixel(c as u32, r as u32, image::Luma([data[[r, c]]]));
        }
    }
    img.save(path).map_err(|e| image_err(path, e))
}

/// Parses a manifest file, scans the dataset directories and verifies every
/// listed file exists. Frame ids come from the sorted contents of `image/`.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest, AdaptError> {
    let kv = KvMap::load(path).map_err(|e| AdaptError::Manifest(e.to_string()))?;
    let dataset_id =
        kv.require("dataset_id").map_err(|e| AdaptError::Manifest(e.to_string()))?.to_string();
    let root_raw = kv.require("root").map_err(|e| AdaptError::Manifest(e.to_string()))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let root = if Path::new(root_raw).is_absolute() {
        PathBuf::from(root_raw)
    } else {
        base.join(root_raw)
    };
    let focal_length_px: f64 = kv
        .require_parsed("focal_length_px")
        .map_err(|e| AdaptError::Manifest(e.to_string()))?;
    let depth_unit = DepthUnit::parse(
        kv.require("depth_unit").map_err(|e| AdaptError::Manifest(e.to_string()))?,
    )?;
    let registry = crate::adapt::registry_by_name(
        kv.require("registry_name").map_err(|e| AdaptError::Manifest(e.to_string()))?,
    )?;
    let split_seed: u64 =
        kv.parsed_or("split_seed", 0).map_err(|e| AdaptError::Manifest(e.to_string()))?;
    let train_fraction: f64 =
        kv.parsed_or("train_fraction", 0.75).map_err(|e| AdaptError::Manifest(e.to_string()))?;
    let depth_cap_m: f64 = kv
        .parsed_or("depth_cap_m", DEFAULT_DEPTH_CAP_M)
        .map_err(|e| AdaptError::Manifest(e.to_string()))?;

    let image_dir = root.join("image");
    let mut frames = Vec::new();
    for entry in std::fs::read_dir(&image_dir).map_err(|e| io_err(&image_dir, e))? {
        let entry = entry.map_err(|e| io_err(&image_dir, e))?;
        let name = entry.file_name().to_string_lossy().to_string();
        if let Some(stem) = name.strip_suffix(".png") {
            frames.push(stem.to_string());
        }
    }
    frames.sort();
    if frames.is_empty() {
        return Err(AdaptError::Manifest(format!("no frames under {}", image_dir.display())));
    }

    let has_semantic = root.join("semantic").is_dir();
    let has_depth = root.join("depth").is_dir();
    let mut missing = Vec::new();
    for frame in &frames {
        for (enabled, p) in [
            (has_semantic, root.join("semantic").join(format!("{frame}.png"))),
            (has_depth, root.join("depth").join(format!("{frame}.png"))),
        ] {
            if enabled && !p.is_file() {
                missing.push(p.display().to_string());
            }
        }
    }
    if !missing.is_empty() {
        return Err(AdaptError::MissingFiles(missing));
    }

    // Optional restriction to one side of the deterministic split.
    if let Some(side) = kv.get("split") {
        let (train, test) = crate::adapt::split_dataset(&frames, train_fraction, split_seed)?;
        frames = match side {
            "train" => train,
            "test" => test,
            other => {
                return Err(AdaptError::Manifest(format!(
                    "split must be train or test, got {other:?}"
                )))
            }
        };
        frames.sort();
    }

    let first = image_dir.join(format!("{}.png", frames[0]));
    let (w, h) = image::image_dimensions(&first).map_err(|e| image_err(&first, e))?;
    Ok(DatasetManifest {
        dataset_id,
        root,
        frames,
        focal_length_px,
        depth_unit,
        registry,
        split_seed,
        train_fraction,
        depth_cap_m,
        has_semantic,
        has_depth,
        image_size: (h as usize, w as usize),
    })
}

/// Depth counts per meter used for toy datasets written to disk (1/256 m
/// per count keeps sub-centimeter precision up to 256 m in 16 bits).
pub const TOY_DEPTH_UNIT: &str = "1/256";

/// Writes samples as a dataset directory tree plus manifest, and returns
/// the manifest path. Used by the toy generator and the prepare pipeline.
pub fn write_dataset(
    out_root: &Path,
    samples: &[Sample],
    registry: &ClassRegistry,
    split_seed: u64,
    train_fraction: f64,
) -> Result<PathBuf, AdaptError> {
    let unit = DepthUnit::parse(TOY_DEPTH_UNIT)?;
    for sub in ["image", "semantic", "depth"] {
        let dir = out_root.join(sub);
        std::fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
    }
    let mut focal = None;
    for s in samples {
        let frame = &s.frame_id;
        let img_u8 = s.image.data.mapv(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8);
        write_rgb8(&out_root.join("image").join(format!("{frame}.png")), &img_u8)?;
        if let Some(sem) = &s.semantic {
            let rgb = onehot_to_rgb(sem, registry)?;
            write_rgb8(&out_root.join("semantic").join(format!("{frame}.png")), &rgb)?;
        }
        if let Some(d) = &s.depth {
            let scale = unit.meters_per_count();
            let counts = ndarray::Zip::from(&d.values).and(&d.valid_mask).map_collect(|&v, &m| {
                if m {
                    (v / scale).round().clamp(1.0, u16::MAX as f64) as u16
                } else {
                    0u16
                }
            });
            write_gray16(&out_root.join("depth").join(format!("{frame}.png")), &counts)?;
        }
        focal = Some(s.intrinsics.focal_length_px);
    }
    let mut kv = KvMap::new();
    kv.set("dataset_id", samples.first().map(|s| s.dataset_id.as_str()).unwrap_or("toy"));
    kv.set("root", ".");
    kv.set("focal_length_px", focal.unwrap_or(1.0));
    kv.set("depth_unit", TOY_DEPTH_UNIT);
    kv.set("registry_name", registry.name());
    kv.set("split_seed", split_seed);
    kv.set("train_fraction", train_fraction);
    let manifest_path = out_root.join("manifest.txt");
    kv.save(&manifest_path).map_err(|e| AdaptError::Manifest(e.to_string()))?;
    // Companion manifests restricted to each side of the split.
    for side in ["train", "test"] {
        let mut side_kv = kv.clone();
        side_kv.set("split", side);
        side_kv
            .save(&out_root.join(format!("manifest_{side}.txt")))
            .map_err(|e| AdaptError::Manifest(e.to_string()))?;
    }
    Ok(manifest_path)
}

/// Writes predicted one-hot maps alongside a dataset (under
/// `semantic_pred/`), returning the written paths.
pub fn write_predicted_semantics(
    manifest: &DatasetManifest,
    frames_and_maps: &[(String, SemanticLabelMap)],
) -> Result<Vec<PathBuf>, AdaptError> {
    let dir = manifest.root.join("semantic_pred");
    std::fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
    let mut written = Vec::new();
    for (frame, map) in frames_and_maps {
        let rgb = onehot_to_rgb(map, &manifest.registry)?;
        let path = dir.join(format!("{frame}.png"));
        write_rgb8(&path, &rgb)?;
        written.push(path);
    }
    Ok(written)
}
