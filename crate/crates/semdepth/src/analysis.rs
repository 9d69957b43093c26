//! Statistical analyses: per-row depth-distribution heat maps, Euclidean
//! heat-map distance, accuracy heat maps (error histograms by distance
//! range), and report emission (CSV tables, PNG heat maps, SVG curves).

use crate::core::DepthMap;
use crate::harness::{windowed_average, HarnessError, RunLog};
use crate::metrics::MetricReport;
use ndarray::Array2;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("heat maps have different shapes: {a:?} vs {b:?}")]
    ShapeMismatch { a: (usize, usize), b: (usize, usize) },
    #[error("heat maps have different normalizations")]
    NormalizationMismatch,
    #[error("frames have different heights: {a} vs {b}")]
    HeightMismatch { a: usize, b: usize },
    #[error("no valid depth pixels in the dataset")]
    NoValidPixels,
    #[error("invalid binning: {0}")]
    BadBins(String),
    #[error("prediction/ground-truth shapes differ: {a:?} vs {b:?}")]
    PairShapeMismatch { a: (usize, usize), b: (usize, usize) },
    #[error("empty inputs: {0}")]
    EmptyInput(&'static str),
    #[error("io error at {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error(transparent)]
    Harness(#[from] HarnessError),
    #[error("png encode at {path}: {message}")]
    Png { path: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Normalization {
    /// All cells sum to 100.
    Global,
    /// Every row with data sums to 100; empty rows stay zero and are
    /// flagged.
    PerRow,
}

impl Normalization {
    pub fn as_str(&self) -> &'static str {
        match self {
            Normalization::Global => "global",
            Normalization::PerRow => "per_row",
        }
    }
}

/// Stack of per-image-row depth histograms as percentages: `rows = image
/// height`, `cols = range/bin` (352×500 in the reference configuration).
#[derive(Debug, Clone, PartialEq)]
pub struct DepthHeatMap {
    pub values: Array2<f64>,
    pub range_m: f64,
    pub bin_m: f64,
    pub normalization: Normalization,
    /// Image rows that had no valid depth pixels.
    pub empty_rows: Vec<usize>,
}

impl DepthHeatMap {
    pub fn rows(&self) -> usize {
        self.values.dim().0
    }

    pub fn bins(&self) -> usize {
        self.values.dim().1
    }
}

/// Histograms the valid depths of each image row over all frames. Values
/// at or beyond `range_m` land in the last bin.
pub fn depth_heatmap(
    depths: &[&DepthMap],
    range_m: f64,
    bin_m: f64,
    normalization: Normalization,
) -> Result<DepthHeatMap, AnalysisError> {
    if depths.is_empty() {
        return Err(AnalysisError::EmptyInput("depth_heatmap needs at least one frame"));
    }
    if !(range_m > 0.0 && bin_m > 0.0 && bin_m <= range_m) {
        return Err(AnalysisError::BadBins(format!("range {range_m} m, bin {bin_m} m")));
    }
    let bins = (range_m / bin_m).round() as usize;
    let height = depths[0].height();
    for d in depths {
        if d.height() != height {
            return Err(AnalysisError::HeightMismatch { a: height, b: d.height() });
        }
    }
    let mut counts = Array2::<f64>::zeros((height, bins));
    let mut total = 0.0f64;
    for d in depths {
        for ((r, c), &valid) in d.valid_mask.indexed_iter() {
            if !valid {
                continue;
            }
            let v = d.values[[r, c]];
            let bin = ((v / bin_m).floor() as usize).min(bins - 1);
            counts[[r, bin]] += 1.0;
            total += 1.0;
        }
    }
    if total == 0.0 {
        return Err(AnalysisError::NoValidPixels);
    }
    let mut empty_rows = Vec::new();
    match normalization {
        Normalization::Global => {
            counts.mapv_inplace(|c| c * 100.0 / total);
            for r in 0..height {
                if counts.row(r).sum() == 0.0 {
                    empty_rows.push(r);
                }
            }
        }
        Normalization::PerRow => {
            for r in 0..height {
                let row_sum: f64 = counts.row(r).sum();
                if row_sum == 0.0 {
                    empty_rows.push(r);
                } else {
                    counts.row_mut(r).mapv_inplace(|c| c * 100.0 / row_sum);
                }
            }
        }
    }
    Ok(DepthHeatMap { values: counts, range_m, bin_m, normalization, empty_rows })
}

/// Euclidean distance between two heat maps of identical shape and
/// normalization: `√Σ(a−b)²`.
pub fn heatmap_distance(a: &DepthHeatMap, b: &DepthHeatMap) -> Result<f64, AnalysisError> {
    if a.values.dim() != b.values.dim() {
        return Err(AnalysisError::ShapeMismatch { a: a.values.dim(), b: b.values.dim() });
    }
    if a.normalization != b.normalization {
        return Err(AnalysisError::NormalizationMismatch);
    }
    let mut sum = 0.0;
    ndarray::Zip::from(&a.values).and(&b.values).for_each(|&x, &y| {
        sum += (x - y) * (x - y);
    });
    Ok(sum.sqrt())
}

/// Error histograms per ground-truth distance range, row-normalized to
/// percent. Errors are `pred − gt` in meters, clamped into the outer bins.
#[derive(Debug, Clone, PartialEq)]
pub struct AccuracyHeatMap {
    pub values: Array2<f64>,
    /// Distance range edges (length = ranges + 1).
    pub range_edges: Vec<f64>,
    pub error_min_m: f64,
    pub error_bin_m: f64,
    /// Ranges that contained no valid pixels.
    pub empty_ranges: Vec<usize>,
    /// Display-only exponent for color mapping; stored values are raw.
    pub display_power: f64,
}

/// Default distance ranges: [0,5), [5,10), …, [95,100).
pub fn default_distance_ranges() -> Vec<f64> {
    (0..=20).map(|i| i as f64 * 5.0).collect()
}

pub const DEFAULT_ERROR_MIN_M: f64 = -5.0;
pub const DEFAULT_ERROR_MAX_M: f64 = 5.0;
pub const DEFAULT_ERROR_BIN_M: f64 = 0.1;
pub const DEFAULT_DISPLAY_POWER: f64 = 0.5;

/// Buckets valid pixels by ground-truth distance range and histograms the
/// signed error within each range.
pub fn accuracy_heatmap(
    pairs: &[(&DepthMap, &DepthMap)],
    range_edges: &[f64],
    error_min_m: f64,
    error_max_m: f64,
    error_bin_m: f64,
) -> Result<AccuracyHeatMap, AnalysisError> {
    if pairs.is_empty() {
        return Err(AnalysisError::EmptyInput("accuracy_heatmap needs at least one pair"));
    }
    if range_edges.len() < 2 || range_edges.windows(2).any(|w| w[1] <= w[0]) {
        return Err(AnalysisError::BadBins("range edges must be strictly increasing".into()));
    }
    if !(error_bin_m > 0.0 && error_max_m > error_min_m) {
        return Err(AnalysisError::BadBins("bad error bins".into()));
    }
    let n_ranges = range_edges.len() - 1;
    let n_bins = ((error_max_m - error_min_m) / error_bin_m).round() as usize;
    let mut counts = Array2::<f64>::zeros((n_ranges, n_bins));
    for (pred, gt) in pairs {
        if pred.values.dim() != gt.values.dim() {
            return Err(AnalysisError::PairShapeMismatch {
                a: pred.values.dim(),
                b: gt.values.dim(),
            });
        }
        for ((r, c), &valid) in gt.valid_mask.indexed_iter() {
            if !valid {
                continue;
            }
            let t = gt.values[[r, c]];
            let range = match range_edges.windows(2).position(|w| t >= w[0] && t < w[1]) {
                Some(i) => i,
                None => continue, // outside the requested ranges
            };
            let err = pred.values[[r, c]] - t;
            let bin =
                (((err - error_min_m) / error_bin_m).floor() as isize).clamp(0, n_bins as isize - 1)
                    as usize;
            counts[[range, bin]] += 1.0;
        }
    }
    let mut empty_ranges = Vec::new();
    for i in 0..n_ranges {
        let sum: f64 = counts.row(i).sum();
        if sum == 0.0 {
            empty_ranges.push(i);
        } else {
            counts.row_mut(i).mapv_inplace(|c| c * 100.0 / sum);
        }
    }
    Ok(AccuracyHeatMap {
        values: counts,
        range_edges: range_edges.to_vec(),
        error_min_m,
        error_bin_m,
        empty_ranges,
        display_power: DEFAULT_DISPLAY_POWER,
    })
}

/// Relative superiority in percent of `new` over `base` for a metric:
/// positive means improvement, negative regression.
pub fn superiority_pct(new: f64, base: f64, higher_is_better: bool) -> f64 {
    if base == 0.0 {
        return 0.0;
    }
    if higher_is_better {
        100.0 * (new - base) / base
    } else {
        100.0 * (base - new) / base
    }
}

/// One training run to include in the report tables.
pub struct RunSummary {
    pub name: String,
    pub log: RunLog,
    /// Split whose evaluations feed the windowed averages.
    pub split: String,
    /// Inclusive evaluation-epoch window.
    pub window: (usize, usize),
    pub trainable_params: Option<usize>,
    /// Single-prediction runtime, when measured.
    pub runtime_s: Option<f64>,
}

fn io_err(path: &Path, source: std::io::Error) -> AnalysisError {
    AnalysisError::Io { path: path.display().to_string(), source }
}

fn write_heatmap_png(path: &Path, values: &Array2<f64>, power: f64) -> Result<(), AnalysisError> {
    let (h, w) = values.dim();
    let max = values.iter().fold(0.0f64, |a, &b| a.max(b));
    let mut img = image::GrayImage::new(w as u32, h as u32);
    for r in 0..h {
        for c in 0..w {
            let norm = if max > 0.0 { (values[[r, c]] / max).powf(power) } else { 0.0 };
            img.put_pixel(c as u32, r as u32, image::Luma([(norm * 255.0).round() as u8]));
        }
    }
    img.save(path)
        .map_err(|e| AnalysisError::Png { path: path.display().to_string(), message: e.to_string() })
}

fn write_csv_grid(path: &Path, values: &Array2<f64>) -> Result<(), AnalysisError> {
    let mut out = String::new();
    for row in values.rows() {
        let cells: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| io_err(path, e))
}

fn write_curve_svg(
    path: &Path,
    points: &[(usize, f64)],
    title: &str,
) -> Result<(), AnalysisError> {
    const W: f64 = 640.0;
    const H: f64 = 400.0;
    const MARGIN: f64 = 50.0;
    let xs: Vec<f64> = points.iter().map(|(s, _)| *s as f64).collect();
    let ys: Vec<f64> = points.iter().map(|(_, v)| *v).collect();
    let (x0, x1) = (xs.iter().cloned().fold(f64::MAX, f64::min), xs.iter().cloned().fold(0.0, f64::max));
    let (mut y0, mut y1) =
        (ys.iter().cloned().fold(f64::MAX, f64::min), ys.iter().cloned().fold(f64::MIN, f64::max));
    if y0 == y1 {
        y0 -= 1.0;
        y1 += 1.0;
    }
    let sx = |x: f64| {
        if x1 > x0 {
            MARGIN + (x - x0) / (x1 - x0) * (W - 2.0 * MARGIN)
        } else {
            W / 2.0
        }
    };
    let sy = |y: f64| H - MARGIN - (y - y0) / (y1 - y0) * (H - 2.0 * MARGIN);
    let mut poly = String::new();
    for (s, v) in points {
        poly.push_str(&format!("{:.2},{:.2} ", sx(*s as f64), sy(*v)));
    }
    let svg = format!(
        concat!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\">\n",
            "<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n",
            "<text x=\"{tx}\" y=\"20\" font-family=\"monospace\" font-size=\"14\">{title}</text>\n",
            "<line x1=\"{m}\" y1=\"{ybase}\" x2=\"{xmax}\" y2=\"{ybase}\" stroke=\"black\"/>\n",
            "<line x1=\"{m}\" y1=\"{m}\" x2=\"{m}\" y2=\"{ybase}\" stroke=\"black\"/>\n",
            "<text x=\"{m}\" y=\"{ylab}\" font-family=\"monospace\" font-size=\"11\">{ymin:.4} .. {ymax:.4}</text>\n",
            "<polyline fill=\"none\" stroke=\"steelblue\" stroke-width=\"1.5\" points=\"{poly}\"/>\n",
            "</svg>\n"
        ),
        w = W,
        h = H,
        m = MARGIN,
        tx = MARGIN,
        title = title,
        ybase = H - MARGIN,
        xmax = W - MARGIN,
        ylab = H - MARGIN + 16.0,
        ymin = y0,
        ymax = y1,
        poly = poly.trim_end()
    );
    std::fs::write(path, svg).map_err(|e| io_err(path, e))
}

/// Writes an accuracy heat map as a PNG (power-norm display transform)
/// plus a sidecar CSV of raw percentages.
pub fn write_accuracy_heatmap(
    out_dir: &Path,
    name: &str,
    hm: &AccuracyHeatMap,
) -> Result<Vec<PathBuf>, AnalysisError> {
    std::fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;
    let png = out_dir.join(format!("accuracy_heatmap_{name}.png"));
    write_heatmap_png(&png, &hm.values, hm.display_power)?;
    let csv = out_dir.join(format!("accuracy_heatmap_{name}.csv"));
    write_csv_grid(&csv, &hm.values)?;
    Ok(vec![png, csv])
}

/// Writes the report artifacts: a windowed-average metric table (thesis
/// column order), a pairwise relative-superiority table, heat-map
/// PNG+CSV pairs, and per-metric training curves as SVG. Returns every
/// path written. File names are deterministic.
pub fn emit_report(
    runs: &[RunSummary],
    heatmaps: &[(String, &DepthHeatMap)],
    out_dir: &Path,
) -> Result<Vec<PathBuf>, AnalysisError> {
    if runs.is_empty() && heatmaps.is_empty() {
        return Err(AnalysisError::EmptyInput("emit_report needs runs or heat maps"));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;
    let mut written = Vec::new();

    // Windowed-average table, one row per run.
    let mut averages: Vec<Vec<Option<f64>>> = Vec::new();
    if !runs.is_empty() {
        let mut csv = String::from("model");
        for name in MetricReport::METRIC_NAMES {
            csv.push(',');
            csv.push_str(name);
        }
        csv.push_str(",trainable_params,runtime_s\n");
        for run in runs {
            let mut row_vals = Vec::new();
            csv.push_str(&run.name);
            for name in MetricReport::METRIC_NAMES {
                let v = windowed_average(&run.log, name, &run.split, run.window.0, run.window.1)
                    .ok();
                row_vals.push(v);
                match v {
                    Some(v) => csv.push_str(&format!(",{v}")),
                    None => csv.push(','),
                }
            }
            match run.trainable_params {
                Some(p) => csv.push_str(&format!(",{p}")),
                None => csv.push(','),
            }
            match run.runtime_s {
                Some(t) => csv.push_str(&format!(",{t}\n")),
                None => csv.push_str(",\n"),
            }
            averages.push(row_vals);
        }
        let path = out_dir.join("windowed_metrics.csv");
        std::fs::write(&path, csv).map_err(|e| io_err(&path, e))?;
        written.push(path);
    }

    // Pairwise relative superiority (positive = first run better).
    if runs.len() >= 2 {
        let mut csv = String::from("comparison");
        for name in MetricReport::METRIC_NAMES {
            csv.push(',');
            csv.push_str(name);
        }
        csv.push_str(",trainable_params,runtime\n");
        for (i, a) in runs.iter().enumerate() {
            for (j, b) in runs.iter().enumerate() {
                if i == j {
                    continue;
                }
                csv.push_str(&format!("{}_relative_to_{}", a.name, b.name));
                for (k, name) in MetricReport::METRIC_NAMES.iter().enumerate() {
                    match (averages[i][k], averages[j][k]) {
                        (Some(x), Some(y)) => {
                            let sup = superiority_pct(x, y, MetricReport::higher_is_better(name));
                            csv.push_str(&format!(",{sup}"));
                        }
                        _ => csv.push(','),
                    }
                }
                match (a.trainable_params, b.trainable_params) {
                    (Some(x), Some(y)) => {
                        csv.push_str(&format!(",{}", superiority_pct(x as f64, y as f64, false)))
                    }
                    _ => csv.push(','),
                }
                match (a.runtime_s, b.runtime_s) {
                    (Some(x), Some(y)) => {
                        csv.push_str(&format!(",{}\n", superiority_pct(x, y, false)))
                    }
                    _ => csv.push_str(",\n"),
                }
            }
        }
        let path = out_dir.join("relative_superiority.csv");
        std::fs::write(&path, csv).map_err(|e| io_err(&path, e))?;
        written.push(path);
    }

    for (name, hm) in heatmaps {
        let png = out_dir.join(format!("depth_heatmap_{}_{}.png", name, hm.normalization.as_str()));
        write_heatmap_png(&png, &hm.values, DEFAULT_DISPLAY_POWER)?;
        written.push(png);
        let csv = out_dir.join(format!("depth_heatmap_{}_{}.csv", name, hm.normalization.as_str()));
        write_csv_grid(&csv, &hm.values)?;
        written.push(csv);
    }

    for run in runs {
        let splits: std::collections::BTreeSet<&str> =
            run.log.records.iter().map(|r| r.split.as_str()).collect();
        for split in splits {
            let metrics: std::collections::BTreeSet<&str> = run
                .log
                .records
                .iter()
                .filter(|r| r.split == split)
                .map(|r| r.metric.as_str())
                .collect();
            for metric in metrics {
                let points: Vec<(usize, f64)> = run
                    .log
                    .records
                    .iter()
                    .filter(|r| r.split == split && r.metric == metric)
                    .map(|r| (r.step, r.value))
                    .collect();
                if points.len() < 2 {
                    continue;
                }
                let path =
                    out_dir.join(format!("curve_{}_{}_{}.svg", run.name, split, metric));
                write_curve_svg(&path, &points, &format!("{} {split} {metric}", run.name))?;
                written.push(path);
            }
        }
    }
    Ok(written)
}
