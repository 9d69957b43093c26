//! Semantic-segmentation-assisted single-image depth estimation toolkit.
//!
//! The crate covers the full experimental pipeline for comparing SIDE
//! (single-image depth estimation) networks against SSIDE variants that
//! additionally consume a semantic label map:
//!
//! * [`core`] — shared domain types (images, one-hot label maps, masked
//!   depth maps, pinhole intrinsics) and angular-field-of-view geometry.
//! * [`adapt`] — dataset ingestion and unification: AFOV-matched cropping,
//!   RGB↔one-hot label conversion, class merging across datasets, unit
//!   normalization, deterministic splits, and a synthetic toy-scene
//!   generator with analytic ground-truth depth.
//! * [`metrics`] — the nine depth metrics (MAPE, MSPE, RMSE, RMSElog,
//!   log10, δ-thresholds, SILog), per-class IoU, and the two training
//!   losses, all restricted to valid pixels.
//! * [`nn`] — a small deterministic f64 autodiff engine (conv/bn/pool/
//!   interleave/softmax + Adam) that the network code builds on.
//! * [`blocks`] — FCRN-style building blocks: residual units, interleaved
//!   up-sampling blocks, Sobel edges, semantic masking and semantic edges.
//! * [`models`] — the M-series depth network family (M0–M7, slim M18–M21)
//!   and the batch-normalized zero-padded U-Net segmenter.
//! * [`harness`] — training/evaluation loops, run logs, and checkpoints.
//! * [`analysis`] — depth-distribution heat maps, heat-map distances,
//!   accuracy heat maps, and report emission (CSV/PNG/SVG).

// Negated comparisons like `!(v > 0.0)` are used deliberately: they also
// reject NaN, which `v <= 0.0` would let through.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adapt;
pub mod analysis;
pub mod blocks;
pub mod core;
pub mod harness;
pub mod kv;
pub mod nn;
pub mod metrics;
pub mod models;

pub use crate::core::{
    afov_of, validate_sample, CameraIntrinsics, ClassRegistry, CoreError, DepthMap, ImageTensor,
    Sample, SemanticLabelMap, DEFAULT_DEPTH_CAP_M,
};
