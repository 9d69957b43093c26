//! Depth-map evaluation metrics, per-class IoU, and the two training losses.
//!
//! All computations are restricted to the ground-truth validity mask. Depth
//! metrics: MAPE and MSPE in percent, RMSE in meters, RMSElog and SILog with
//! natural logs, log10 with base-10 logs, and the three δ-thresholds at
//! `1.25^i`. Predictions `≤ 0` are clamped to 1e-3 m before the log- and
//! ratio-based metrics and the number of clamped pixels is reported.

use crate::core::{DepthMap, SemanticLabelMap};
use ndarray::{Array2, Array3};
use thiserror::Error;

/// Clamp applied to non-positive predictions before log/ratio metrics.
pub const LOG_CLAMP_M: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("shape mismatch: prediction {pred:?} vs ground truth {gt:?}")]
    ShapeMismatch { pred: Vec<usize>, gt: Vec<usize> },
    #[error("no valid pixels in ground truth")]
    NoValidPixels,
    #[error("ground truth has non-positive value {value} inside the valid mask at ({row},{col})")]
    NonPositiveGroundTruth { value: f64, row: usize, col: usize },
    #[error("prediction value {0} outside [0,1]")]
    ValueOutOfRange(f64),
}

/// One row of the evaluation table; serializes to CSV via
/// [`MetricReport::CSV_HEADER`] and [`MetricReport::to_csv_row`].
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub mape: f64,
    pub mspe: f64,
    pub rmse: f64,
    pub rmse_log: f64,
    pub log10: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
    pub silog: f64,
    pub n_valid_pixels: usize,
    pub n_clamped_predictions: usize,
}

impl MetricReport {
    pub const CSV_HEADER: &'static str =
        "mape,mspe,rmse,rmse_log,log10,delta1,delta2,delta3,silog,n_valid_pixels,n_clamped_predictions";

    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.mape,
            self.mspe,
            self.rmse,
            self.rmse_log,
            self.log10,
            self.delta1,
            self.delta2,
            self.delta3,
            self.silog,
            self.n_valid_pixels,
            self.n_clamped_predictions
        )
    }

    /// Metric value by its CSV column name.
    pub fn get(&self, name: &str) -> Option<f64> {
        Some(match name {
            "mape" => self.mape,
            "mspe" => self.mspe,
            "rmse" => self.rmse,
            "rmse_log" => self.rmse_log,
            "log10" => self.log10,
            "delta1" => self.delta1,
            "delta2" => self.delta2,
            "delta3" => self.delta3,
            "silog" => self.silog,
            _ => return None,
        })
    }

    /// Metric names in report order (the order of the thesis table columns).
    pub const METRIC_NAMES: [&'static str; 9] =
        ["mape", "mspe", "rmse", "rmse_log", "log10", "delta1", "delta2", "delta3", "silog"];

    /// Whether a larger value of the named metric is better.
    pub fn higher_is_better(name: &str) -> bool {
        matches!(name, "delta1" | "delta2" | "delta3")
    }
}

/// Streaming pixel-weighted accumulator so multi-frame evaluations aggregate
/// exactly as one concatenated pixel vector would.
#[derive(Debug, Clone, Default)]
pub struct MetricAccumulator {
    n: usize,
    n_clamped: usize,
    sum_abs_pct: f64,
    sum_sq_pct: f64,
    sum_sq: f64,
    sum_sq_log: f64,
    sum_abs_log10: f64,
    cnt_delta: [usize; 3],
    sum_d: f64,
    sum_d2: f64,
}

impl MetricAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    /// Folds one prediction/ground-truth pair into the running sums.
    pub fn add(&mut self, pred: &DepthMap, gt: &DepthMap) -> Result<(), MetricsError> {
        if pred.values.dim() != gt.values.dim() {
            return Err(MetricsError::ShapeMismatch {
                pred: pred.values.shape().to_vec(),
                gt: gt.values.shape().to_vec(),
            });
        }
        for ((r, c), &valid) in gt.valid_mask.indexed_iter() {
            if !valid {
                continue;
            }
            let t = gt.values[[r, c]];
            if !(t > 0.0) {
                return Err(MetricsError::NonPositiveGroundTruth { value: t, row: r, col: c });
            }
            let y = pred.values[[r, c]];
            let y_log = if y <= 0.0 {
                self.n_clamped += 1;
                LOG_CLAMP_M
            } else {
                y
            };
            self.n += 1;
            let diff = y - t;
            self.sum_abs_pct += diff.abs() / t;
            self.sum_sq_pct += diff * diff / t;
            self.sum_sq += diff * diff;
            let d = y_log.ln() - t.ln();
            self.sum_sq_log += d * d;
            self.sum_abs_log10 += (y_log.log10() - t.log10()).abs();
            self.sum_d += d;
            self.sum_d2 += d * d;
            let ratio = (y_log / t).max(t / y_log);
            for (i, cnt) in self.cnt_delta.iter_mut().enumerate() {
                if ratio < 1.25f64.powi(i as i32 + 1) {
                    *cnt += 1;
                }
            }
        }
        Ok(())
    }

    pub fn n_valid(&self) -> usize {
        self.n
    }

    pub fn finalize(&self) -> Result<MetricReport, MetricsError> {
        if self.n == 0 {
            return Err(MetricsError::NoValidPixels);
        }
        let n = self.n as f64;
        Ok(MetricReport {
            mape: 100.0 / n * self.sum_abs_pct,
            mspe: 100.0 / n * self.sum_sq_pct,
            rmse: (self.sum_sq / n).sqrt(),
            rmse_log: (self.sum_sq_log / n).sqrt(),
            log10: self.sum_abs_log10 / n,
            delta1: self.cnt_delta[0] as f64 / n,
            delta2: self.cnt_delta[1] as f64 / n,
            delta3: self.cnt_delta[2] as f64 / n,
            silog: self.sum_d2 / n - (self.sum_d / n).powi(2),
            n_valid_pixels: self.n,
            n_clamped_predictions: self.n_clamped,
        })
    }
}

/// All nine depth metrics over the ground-truth validity mask.
pub fn depth_metrics(pred: &DepthMap, gt: &DepthMap) -> Result<MetricReport, MetricsError> {
    let mut acc = MetricAccumulator::new();
    acc.add(pred, gt)?;
    acc.finalize()
}

/// Mean absolute percentage error in percent; identical to the `mape` field
/// of [`depth_metrics`] and differentiable with respect to the prediction on
/// valid pixels (see [`mape_loss_grad`]).
pub fn mape_loss(pred: &DepthMap, gt: &DepthMap) -> Result<f64, MetricsError> {
    let (value, _n) = masked_mape(&pred.values, &gt.values, &gt.valid_mask)?;
    Ok(value)
}

/// Gradient of [`mape_loss`] with respect to the prediction:
/// `(100/n)·sign(y−y*)/y*` on valid pixels, zero elsewhere.
pub fn mape_loss_grad(pred: &DepthMap, gt: &DepthMap) -> Result<Array2<f64>, MetricsError> {
    if pred.values.dim() != gt.values.dim() {
        return Err(MetricsError::ShapeMismatch {
            pred: pred.values.shape().to_vec(),
            gt: gt.values.shape().to_vec(),
        });
    }
    let n = gt.n_valid();
    if n == 0 {
        return Err(MetricsError::NoValidPixels);
    }
    let mut grad = Array2::zeros(pred.values.dim());
    for ((r, c), &valid) in gt.valid_mask.indexed_iter() {
        if !valid {
            continue;
        }
        let t = gt.values[[r, c]];
        if !(t > 0.0) {
            return Err(MetricsError::NonPositiveGroundTruth { value: t, row: r, col: c });
        }
        let diff = pred.values[[r, c]] - t;
        grad[[r, c]] = 100.0 / n as f64 * signum_or_zero(diff) / t;
    }
    Ok(grad)
}

fn signum_or_zero(v: f64) -> f64 {
    if v == 0.0 {
        0.0
    } else {
        v.signum()
    }
}

fn masked_mape(
    pred: &Array2<f64>,
    gt: &Array2<f64>,
    mask: &Array2<bool>,
) -> Result<(f64, usize), MetricsError> {
    if pred.dim() != gt.dim() {
        return Err(MetricsError::ShapeMismatch {
            pred: pred.shape().to_vec(),
            gt: gt.shape().to_vec(),
        });
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for ((r, c), &valid) in mask.indexed_iter() {
        if !valid {
            continue;
        }
        let t = gt[[r, c]];
        if !(t > 0.0) {
            return Err(MetricsError::NonPositiveGroundTruth { value: t, row: r, col: c });
        }
        sum += (pred[[r, c]] - t).abs() / t;
        n += 1;
    }
    if n == 0 {
        return Err(MetricsError::NoValidPixels);
    }
    Ok((100.0 / n as f64 * sum, n))
}

/// Per-class intersection-over-union report.
#[derive(Debug, Clone, PartialEq)]
pub struct IouReport {
    /// IoU per channel; classes absent from both maps report 1.0.
    pub per_class: Vec<f64>,
    /// Classes absent from both prediction and ground truth.
    pub absent: Vec<bool>,
}

impl IouReport {
    /// Mean IoU over classes present in at least one of the two maps.
    pub fn mean_present(&self) -> f64 {
        let mut sum = 0.0;
        let mut cnt = 0usize;
        for (v, absent) in self.per_class.iter().zip(&self.absent) {
            if !absent {
                sum += v;
                cnt += 1;
            }
        }
        if cnt == 0 {
            1.0
        } else {
            sum / cnt as f64
        }
    }
}

/// Hard IoU per class. The prediction is binarized by per-pixel argmax
/// first (ties to the lowest channel); the ground truth is used as-is with
/// a 0.5 threshold per channel.
pub fn iou_per_class(
    pred: &SemanticLabelMap,
    gt: &SemanticLabelMap,
) -> Result<IouReport, MetricsError> {
    if pred.data.dim() != gt.data.dim() {
        return Err(MetricsError::ShapeMismatch {
            pred: pred.data.shape().to_vec(),
            gt: gt.data.shape().to_vec(),
        });
    }
    let (h, w, n) = gt.data.dim();
    let pred_arg = pred.argmax();
    let mut inter = vec![0usize; n];
    let mut union = vec![0usize; n];
    for r in 0..h {
        for c in 0..w {
            let p = pred_arg[[r, c]];
            for k in 0..n {
                let in_gt = gt.data[[r, c, k]] >= 0.5;
                let in_pred = p == k;
                if in_gt && in_pred {
                    inter[k] += 1;
                }
                if in_gt || in_pred {
                    union[k] += 1;
                }
            }
        }
    }
    let mut per_class = Vec::with_capacity(n);
    let mut absent = Vec::with_capacity(n);
    for k in 0..n {
        if union[k] == 0 {
            per_class.push(1.0);
            absent.push(true);
        } else {
            per_class.push(inter[k] as f64 / union[k] as f64);
            absent.push(false);
        }
    }
    Ok(IouReport { per_class, absent })
}

/// Differentiable segmentation loss `1 − mean_c softIoU_c` with the
/// product/union relaxation `softIoU = Σ(p·g) / Σ(p + g − p·g)`.
///
/// Lives in `[0,1]` and decreases as predictions improve. Channels empty in
/// both maps contribute a perfect IoU of 1.
pub fn iou_loss(pred: &SemanticLabelMap, gt: &SemanticLabelMap) -> Result<f64, MetricsError> {
    let (loss, _) = soft_iou_loss_parts(&pred.data, &gt.data)?;
    Ok(loss)
}

/// Gradient of [`iou_loss`] with respect to the prediction tensor.
pub fn iou_loss_grad(
    pred: &SemanticLabelMap,
    gt: &SemanticLabelMap,
) -> Result<Array3<f64>, MetricsError> {
    let (_, grad) = soft_iou_loss_parts(&pred.data, &gt.data)?;
    Ok(grad)
}

fn soft_iou_loss_parts(
    pred: &Array3<f64>,
    gt: &Array3<f64>,
) -> Result<(f64, Array3<f64>), MetricsError> {
    if pred.dim() != gt.dim() {
        return Err(MetricsError::ShapeMismatch {
            pred: pred.shape().to_vec(),
            gt: gt.shape().to_vec(),
        });
    }
    if let Some(v) = pred.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(MetricsError::ValueOutOfRange(*v));
    }
    let (h, w, n) = gt.dim();
    let mut inter = vec![0.0f64; n];
    let mut union = vec![0.0f64; n];
    for r in 0..h {
        for c in 0..w {
            for k in 0..n {
                let p = pred[[r, c, k]];
                let g = gt[[r, c, k]];
                inter[k] += p * g;
                union[k] += p + g - p * g;
            }
        }
    }
    let mut mean_iou = 0.0;
    for k in 0..n {
        mean_iou += if union[k] == 0.0 { 1.0 } else { inter[k] / union[k] };
    }
    mean_iou /= n as f64;

    let mut grad = Array3::zeros((h, w, n));
    for r in 0..h {
        for c in 0..w {
            for k in 0..n {
                if union[k] == 0.0 {
                    continue;
                }
                let g = gt[[r, c, k]];
                // d(I/U)/dp = (g·U − I·(1−g)) / U²; loss = 1 − mean.
                let d = (g * union[k] - inter[k] * (1.0 - g)) / (union[k] * union[k]);
                grad[[r, c, k]] = -d / n as f64;
            }
        }
    }
    Ok((1.0 - mean_iou, grad))
}
