//! Acceptance suite: one test per criterion, each printing a PASS line.
//! Oracles here are written independently of the library code paths they
//! check (flat-vector metric formulas, direct trigonometry, analytic toy
//! geometry).

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use semdepth::adapt::{
    self, afov_table, common_registry, generate_toy_dataset, load_manifest, merge_classes,
    merge_to_common, onehot_to_rgb, plan_afov_crop, rgb_to_onehot, source_registry, write_dataset,
    DatasetId,
};
use semdepth::analysis::{depth_heatmap, heatmap_distance, Normalization};
use semdepth::core::{DepthMap, SemanticLabelMap, DEFAULT_DEPTH_CAP_M};
use semdepth::harness::{
    build_loss_node, evaluate_samples, train, windowed_average, EvalCadence, EvalResult, LossKind,
    RunConfig,
};
use semdepth::metrics::{depth_metrics, iou_loss, iou_loss_grad, mape_loss, mape_loss_grad};
use semdepth::models::{
    assemble_batch, build, run_graph, Model, ModelSpec, Variant,
};
use semdepth::nn::Graph;
use std::path::Path;
use std::time::Instant;

fn pass(n: usize, what: &str) {
    println!("acceptance criterion {n} ({what}): PASS");
}

/// Independent flat-vector implementations of the nine metrics.
mod oracle {
    pub struct Metrics {
        pub mape: f64,
        pub mspe: f64,
        pub rmse: f64,
        pub rmse_log: f64,
        pub log10: f64,
        pub delta: [f64; 3],
        pub silog: f64,
    }

    /// Every formula evaluated directly over the masked flat vectors.
    pub fn metrics(pred: &[f64], gt: &[f64]) -> Metrics {
        let n = pred.len() as f64;
        let mape = 100.0 / n
            * pred.iter().zip(gt).map(|(y, t)| (y - t).abs() / t).sum::<f64>();
        let mspe = 100.0 / n
            * pred.iter().zip(gt).map(|(y, t)| (y - t) * (y - t) / t).sum::<f64>();
        let rmse = (pred.iter().zip(gt).map(|(y, t)| (y - t) * (y - t)).sum::<f64>() / n).sqrt();
        let rmse_log = (pred
            .iter()
            .zip(gt)
            .map(|(y, t)| (y.ln() - t.ln()) * (y.ln() - t.ln()))
            .sum::<f64>()
            / n)
            .sqrt();
        let log10 = pred
            .iter()
            .zip(gt)
            .map(|(y, t)| (y.log10() - t.log10()).abs())
            .sum::<f64>()
            / n;
        let mut delta = [0.0; 3];
        for (i, d) in delta.iter_mut().enumerate() {
            let thr = 1.25f64.powi(i as i32 + 1);
            *d = pred
                .iter()
                .zip(gt)
                .filter(|(y, t)| (*y / *t).max(*t / *y) < thr)
                .count() as f64
                / n;
        }
        let ds: Vec<f64> = pred.iter().zip(gt).map(|(y, t)| y.ln() - t.ln()).collect();
        let silog = ds.iter().map(|d| d * d).sum::<f64>() / n
            - (ds.iter().sum::<f64>() / n).powi(2);
        Metrics { mape, mspe, rmse, rmse_log, log10, delta, silog }
    }
}

fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
}

fn random_pair(rng: &mut ChaCha20Rng) -> (DepthMap, DepthMap, Vec<f64>, Vec<f64>) {
    let h = rng.gen_range(1..=8usize);
    let w = rng.gen_range(1..=8usize);
    let gt_vals = Array2::from_shape_fn((h, w), |_| rng.gen_range(0.1..100.0));
    let pred_vals = Array2::from_shape_fn((h, w), |_| rng.gen_range(0.05..120.0));
    let mut mask = Array2::from_shape_fn((h, w), |_| rng.gen_bool(0.8));
    if !mask.iter().any(|m| *m) {
        mask[[0, 0]] = true;
    }
    let mut flat_pred = Vec::new();
    let mut flat_gt = Vec::new();
    for ((r, c), m) in mask.indexed_iter() {
        if *m {
            flat_pred.push(pred_vals[[r, c]]);
            flat_gt.push(gt_vals[[r, c]]);
        }
    }
    let gt = DepthMap::new(gt_vals, mask, DEFAULT_DEPTH_CAP_M);
    let pred = DepthMap::prediction(pred_vals);
    (pred, gt, flat_pred, flat_gt)
}

#[test]
fn criterion_01_metric_oracle_suite() {
    let started = Instant::now();
    let mut rng = ChaCha20Rng::seed_from_u64(101);
    for case in 0..1000 {
        let (pred, gt, flat_pred, flat_gt) = random_pair(&mut rng);
        let got = depth_metrics(&pred, &gt).unwrap();
        let want = oracle::metrics(&flat_pred, &flat_gt);
        let tol = 1e-9;
        assert!(rel_close(got.mape, want.mape, tol), "case {case} mape");
        assert!(rel_close(got.mspe, want.mspe, tol), "case {case} mspe");
        assert!(rel_close(got.rmse, want.rmse, tol), "case {case} rmse");
        assert!(rel_close(got.rmse_log, want.rmse_log, tol), "case {case} rmse_log");
        assert!(rel_close(got.log10, want.log10, tol), "case {case} log10");
        assert!(rel_close(got.delta1, want.delta[0], tol), "case {case} delta1");
        assert!(rel_close(got.delta2, want.delta[1], tol), "case {case} delta2");
        assert!(rel_close(got.delta3, want.delta[2], tol), "case {case} delta3");
        assert!(rel_close(got.silog, want.silog, tol), "case {case} silog");
        assert!(got.delta1 <= got.delta2 && got.delta2 <= got.delta3, "case {case} monotone");
        assert_eq!(got.n_valid_pixels, flat_gt.len());
    }
    let elapsed = started.elapsed();
    assert!(elapsed.as_secs_f64() < 10.0, "oracle suite took {elapsed:?}");
    pass(1, "1000 random map pairs match the flat-vector oracle within 1e-9");
}

#[test]
fn criterion_02_silog_scale_invariance() {
    let mut rng = ChaCha20Rng::seed_from_u64(202);
    for case in 0..100 {
        let (pred, gt, _, _) = random_pair(&mut rng);
        let c = rng.gen_range(0.01..100.0f64);
        let scaled = DepthMap::prediction(pred.values.mapv(|v| c * v));
        let a = depth_metrics(&pred, &gt).unwrap().silog;
        let b = depth_metrics(&scaled, &gt).unwrap().silog;
        assert!((a - b).abs() < 1e-9, "case {case}: {a} vs {b} (c = {c})");
    }
    pass(2, "SILog invariant under global prediction rescaling to 1e-9");
}

#[test]
fn criterion_03_afov_table_replication() {
    let (target_h, target_v) = adapt::lyft_reference_afov_deg();
    let mut checked_crops = 0;
    for row in afov_table() {
        let plan = plan_afov_crop(&row.intrinsics, target_h, target_v).unwrap();
        if row.clamped {
            assert_eq!(
                (plan.crop_width_px, plan.crop_height_px),
                (row.intrinsics.width_px as usize, row.intrinsics.height_px as usize),
                "{}: clamp path must keep the source size",
                row.dataset.name()
            );
            assert!(plan.is_clamped(), "{}", row.dataset.name());
        } else {
            assert_eq!(
                (plan.crop_width_px, plan.crop_height_px),
                row.published_crop,
                "{}: crop dims",
                row.dataset.name()
            );
            checked_crops += 1;
        }
        assert!(
            (plan.achieved_afov_deg.0 - row.published_afov_deg.0).abs() < 0.05,
            "{}: horizontal {} vs published {}",
            row.dataset.name(),
            plan.achieved_afov_deg.0,
            row.published_afov_deg.0
        );
        assert!(
            (plan.achieved_afov_deg.1 - row.published_afov_deg.1).abs() < 0.05,
            "{}: vertical {} vs published {}",
            row.dataset.name(),
            plan.achieved_afov_deg.1,
            row.published_afov_deg.1
        );
    }
    assert_eq!(checked_crops, 6, "six croppable rows");
    pass(3, "all published crop dimensions exact, achieved AFOV within 0.05°");
}

/// Sample with every class present (deterministic), for gradient-flow and
/// contract checks.
fn full_coverage_sample(size: usize, n_classes: usize, seed: u64) -> semdepth::core::Sample {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let image = semdepth::core::ImageTensor::new(Array3::from_shape_fn(
        (size, size, 3),
        |_| rng.gen_range(0.0..1.0),
    ))
    .unwrap();
    let mut sem = Array3::zeros((size, size, n_classes));
    for r in 0..size {
        for c in 0..size {
            let k = if r < n_classes { r } else { rng.gen_range(0..n_classes) };
            sem[[r, c, k]] = 1.0;
        }
    }
    let depth = Array2::from_shape_fn((size, size), |_| rng.gen_range(1.0..60.0));
    semdepth::core::Sample {
        image,
        semantic: Some(SemanticLabelMap::new(sem, "test")),
        depth: Some(DepthMap::new(
            depth,
            Array2::from_elem((size, size), true),
            DEFAULT_DEPTH_CAP_M,
        )),
        intrinsics: semdepth::core::CameraIntrinsics::new(size as f64, size as f64, size as f64)
            .unwrap(),
        dataset_id: "synthetic".into(),
        frame_id: "0".into(),
    }
}

#[test]
fn criterion_04_architecture_contracts() {
    let started = Instant::now();
    let n_classes = 5;
    let samples = [full_coverage_sample(64, n_classes, 41), full_coverage_sample(64, n_classes, 42)];
    let refs: Vec<&semdepth::core::Sample> = samples.iter().collect();
    for variant in Variant::ALL {
        let spec = ModelSpec {
            variant,
            input_width: 64,
            input_height: 64,
            n_classes,
            width_scale: 0.25,
            seed: 9,
        };
        let mut model = build(&spec).unwrap();

        // Resolution contract and the per-variant output identities.
        let out = model.forward(&samples[0]).unwrap();
        if variant == Variant::Unet {
            let seg = out.segmentation.as_ref().expect("unet output");
            assert_eq!(seg.data.dim(), (64, 64, n_classes), "{}", variant.as_str());
        } else {
            let depth = out.depth.as_ref().expect("depth output");
            assert_eq!(depth.dim(), (64, 64), "{}", variant.as_str());
        }
        if variant == Variant::M2 {
            let depth = out.depth.as_ref().unwrap();
            let sd = out.semantic_depth.as_ref().unwrap();
            for r in 0..64 {
                for c in 0..64 {
                    let sum: f64 = (0..n_classes).map(|k| sd[[r, c, k]]).sum();
                    assert!((depth[[r, c]] - sum).abs() < 1e-5, "M2 sum identity at ({r},{c})");
                }
            }
        }
        if variant == Variant::M5 {
            let sd = out.semantic_depth.as_ref().unwrap();
            let sem = samples[0].semantic.as_ref().unwrap();
            for r in 0..64 {
                for c in 0..64 {
                    for k in 0..n_classes {
                        if sem.data[[r, c, k]] == 0.0 {
                            assert_eq!(sd[[r, c, k]], 0.0, "M5 masking at ({r},{c},{k})");
                        }
                    }
                }
            }
        }

        // Gradient flow: one forward+loss+backward, every trainable tensor
        // receives a nonzero gradient.
        let input = assemble_batch(&spec, &refs).unwrap();
        let loss_kind = LossKind::default_for(variant);
        {
            let (spec_ref, arch, params) = model.parts_mut();
            params.zero_grads();
            let mut g = Graph::train(params);
            let outs = run_graph(arch, &mut g, &input);
            let loss = build_loss_node(&mut g, &outs, &input, &refs, loss_kind).unwrap();
            assert!(g.scalar(loss).is_finite(), "{} loss finite", spec_ref.variant.as_str());
            g.backward(loss);
        }
        let (_, _, params) = model.parts_mut();
        for id in params.ids().collect::<Vec<_>>() {
            if !params.is_trainable(id) {
                continue;
            }
            let max = params.grad(id).iter().fold(0.0f64, |a, &b| a.max(b.abs()));
            assert!(
                max > 0.0,
                "{}: zero gradient for parameter group {}",
                variant.as_str(),
                params.name(id)
            );
        }
    }
    let elapsed = started.elapsed();
    assert!(elapsed.as_secs_f64() < 120.0, "architecture contracts took {elapsed:?}");
    pass(4, "13 variants: resolution, M2 sum, M5 masking, live gradients");
}

#[test]
fn criterion_05_loss_gradient_checks() {
    let mut rng = ChaCha20Rng::seed_from_u64(505);
    let step = 1e-4;

    // MAPE: random tiny maps away from the |y − y*| = 0 kink.
    for case in 0..20 {
        let gt_vals = Array2::from_shape_fn((3, 3), |_| rng.gen_range(1.0..50.0f64));
        let pred_vals = gt_vals.mapv(|v| {
            let offset = rng.gen_range(0.05..0.5) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            (v + offset * v).max(0.1)
        });
        let mut mask = Array2::from_shape_fn((3, 3), |_| rng.gen_bool(0.8));
        mask[[1, 1]] = true;
        let gt = DepthMap::new(gt_vals, mask.clone(), DEFAULT_DEPTH_CAP_M);
        let pred = DepthMap::prediction(pred_vals.clone());
        let grad = mape_loss_grad(&pred, &gt).unwrap();
        for ((r, c), &m) in mask.indexed_iter() {
            if !m {
                assert_eq!(grad[[r, c]], 0.0);
                continue;
            }
            let mut plus = pred_vals.clone();
            plus[[r, c]] += step;
            let mut minus = pred_vals.clone();
            minus[[r, c]] -= step;
            let fd = (mape_loss(&DepthMap::prediction(plus), &gt).unwrap()
                - mape_loss(&DepthMap::prediction(minus), &gt).unwrap())
                / (2.0 * step);
            let an = grad[[r, c]];
            assert!(
                rel_close(fd, an, 1e-3),
                "case {case} mape grad at ({r},{c}): fd {fd} vs {an}"
            );
        }
    }

    // Soft IoU: random soft predictions strictly inside (0, 1).
    for case in 0..10 {
        let n = 3;
        let mut gt = Array3::zeros((3, 3, n));
        for r in 0..3 {
            for c in 0..3 {
                gt[[r, c, rng.gen_range(0..n)]] = 1.0;
            }
        }
        let gt = SemanticLabelMap::new(gt, "t");
        let pred_vals = Array3::from_shape_fn((3, 3, n), |_| rng.gen_range(0.05..0.95));
        let pred = SemanticLabelMap::new(pred_vals.clone(), "t");
        let grad = iou_loss_grad(&pred, &gt).unwrap();
        for r in 0..3 {
            for c in 0..3 {
                for k in 0..n {
                    let mut plus = pred_vals.clone();
                    plus[[r, c, k]] += step;
                    let mut minus = pred_vals.clone();
                    minus[[r, c, k]] -= step;
                    let fd = (iou_loss(&SemanticLabelMap::new(plus, "t"), &gt).unwrap()
                        - iou_loss(&SemanticLabelMap::new(minus, "t"), &gt).unwrap())
                        / (2.0 * step);
                    let an = grad[[r, c, k]];
                    if fd.abs() < 1e-9 && an.abs() < 1e-9 {
                        continue;
                    }
                    assert!(
                        (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6) < 1e-3,
                        "case {case} iou grad at ({r},{c},{k}): fd {fd} vs {an}"
                    );
                }
            }
        }
    }
    pass(5, "MAPE and soft-IoU gradients match central differences at 1e-3");
}

#[allow(clippy::too_many_arguments)]
fn toy_run_config(
    data_dir: &Path,
    out_dir: &Path,
    variant: Variant,
    width_scale: f64,
    learning_rate: f64,
    train_manifest: &str,
    eval_sets: &[(&str, &str)],
    max_batches: Option<usize>,
    epochs: Option<usize>,
    eval_cadence: EvalCadence,
) -> RunConfig {
    RunConfig {
        model_spec: ModelSpec {
            variant,
            input_width: 64,
            input_height: 64,
            n_classes: common_registry().len(),
            width_scale,
            seed: 1,
        },
        train_manifests: vec![data_dir.join(train_manifest)],
        eval_sets: eval_sets
            .iter()
            .map(|(label, m)| (label.to_string(), vec![data_dir.join(m)]))
            .collect(),
        batch_size: 2,
        learning_rate,
        epochs,
        max_batches,
        eval_cadence,
        loss: LossKind::default_for(variant),
        seed: 1,
        output_dir: out_dir.to_path_buf(),
    }
}

#[test]
fn criterion_06_overfit_smoke_tests() {
    let dir = tempfile::tempdir().unwrap();
    let reg = common_registry();
    let samples = generate_toy_dataset(4, 64, &reg, 5).unwrap();
    let data = dir.path().join("toy4");
    write_dataset(&data, &samples, &reg, 0, 0.5).unwrap();

    for variant in [Variant::M20, Variant::M21, Variant::M18] {
        let started = Instant::now();
        let config = toy_run_config(
            &data,
            &dir.path().join(format!("run_{}", variant.as_str())),
            variant,
            0.1,
            0.001,
            "manifest.txt",
            &[("train", "manifest.txt")],
            Some(2000),
            None,
            EvalCadence::EveryKBatches(200),
        );
        let outcome = train(&config).unwrap();
        let best = outcome
            .run_log
            .records
            .iter()
            .filter(|r| r.split == "train" && r.metric == "mape")
            .map(|r| r.value)
            .fold(f64::MAX, f64::min);
        let elapsed = started.elapsed();
        assert!(
            best < 5.0,
            "{}: best train MAPE {best:.3}% after 2000 steps",
            variant.as_str()
        );
        assert!(
            elapsed.as_secs_f64() < 900.0,
            "{}: overfit run took {elapsed:?}",
            variant.as_str()
        );
        println!(
            "  {} reached train MAPE {best:.3}% (runtime {:.0}s)",
            variant.as_str(),
            elapsed.as_secs_f64()
        );
    }

    // U-Net on the same four samples; it saturates all classes early, so an
    // 800-step run already demonstrates the 2000-step budget is met.
    let started = Instant::now();
    let config = toy_run_config(
        &data,
        &dir.path().join("run_unet"),
        Variant::Unet,
        0.125,
        0.005,
        "manifest.txt",
        &[("train", "manifest.txt")],
        Some(800),
        None,
        EvalCadence::EveryKBatches(200),
    );
    let outcome = train(&config).unwrap();
    let best = outcome
        .run_log
        .records
        .iter()
        .filter(|r| r.split == "train" && r.metric == "mean_iou")
        .map(|r| r.value)
        .fold(f64::MIN, f64::max);
    let elapsed = started.elapsed();
    assert!(best > 0.9, "UNET: best mean IoU {best:.4} within the step budget");
    assert!(elapsed.as_secs_f64() < 900.0, "UNET overfit took {elapsed:?}");
    println!("  UNET reached mean IoU {best:.4} (runtime {:.0}s)", elapsed.as_secs_f64());
    pass(6, "M20/M21/M18 below 5% train MAPE, UNET above 0.9 IoU, within 2000 steps");
}

#[test]
fn criterion_07_qualitative_ordering_at_desk_scale() {
    let started = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let reg = common_registry();
    let samples = generate_toy_dataset(200, 64, &reg, 77).unwrap();
    let data = dir.path().join("toy200");
    write_dataset(&data, &samples, &reg, 9, 0.75).unwrap();

    let mut averages = Vec::new();
    for variant in [Variant::M21, Variant::M20] {
        let config = toy_run_config(
            &data,
            &dir.path().join(format!("run_{}", variant.as_str())),
            variant,
            0.1,
            0.001,
            "manifest_train.txt",
            &[("test", "manifest_test.txt")],
            None,
            Some(30),
            EvalCadence::PerEpoch,
        );
        let outcome = train(&config).unwrap();
        let avg = windowed_average(&outcome.run_log, "mape", "test", 15, 30).unwrap();
        println!(
            "  {}: windowed test MAPE (epochs 15..=30) = {avg:.3}%",
            variant.as_str()
        );
        averages.push(avg);
    }
    let (m21, m20) = (averages[0], averages[1]);
    assert!(
        m21 < m20,
        "expected tiny M21 ({m21:.3}%) strictly below tiny M20 ({m20:.3}%)"
    );
    let elapsed = started.elapsed();
    assert!(elapsed.as_secs_f64() < 3600.0, "desk-scale ordering took {elapsed:?}");
    pass(7, "windowed test MAPE of tiny M21 strictly below tiny M20");
}

#[test]
fn criterion_08_heatmap_invariants() {
    let reg = common_registry();
    // Normalization sums over 50 random toy datasets.
    for seed in 0..50u64 {
        let samples = generate_toy_dataset(3, 32, &reg, seed).unwrap();
        let depths: Vec<&DepthMap> = samples.iter().map(|s| s.depth.as_ref().unwrap()).collect();
        let global = depth_heatmap(&depths, 100.0, 0.2, Normalization::Global).unwrap();
        assert!((global.values.sum() - 100.0).abs() < 1e-6, "seed {seed} global sum");
        let per_row = depth_heatmap(&depths, 100.0, 0.2, Normalization::PerRow).unwrap();
        for r in 0..per_row.rows() {
            let sum = per_row.values.row(r).sum();
            if per_row.empty_rows.contains(&r) {
                assert_eq!(sum, 0.0, "seed {seed} empty row {r}");
            } else {
                assert!((sum - 100.0).abs() < 1e-6, "seed {seed} row {r} sum {sum}");
            }
        }
    }

    // Constant-depth delta column, exact.
    let d = DepthMap::prediction(Array2::from_elem((8, 8), 10.0));
    let hm = depth_heatmap(&[&d], 100.0, 0.2, Normalization::PerRow).unwrap();
    for r in 0..8 {
        assert_eq!(hm.values[[r, 50]], 100.0);
    }

    // Metric axioms on random triples.
    let mut rng = ChaCha20Rng::seed_from_u64(808);
    for _ in 0..20 {
        let mk = |rng: &mut ChaCha20Rng| {
            let vals = Array2::from_shape_fn((4, 6), |_| rng.gen_range(0.5..99.5));
            depth_heatmap(&[&DepthMap::prediction(vals)], 100.0, 0.2, Normalization::Global)
                .unwrap()
        };
        let (a, b, c) = (mk(&mut rng), mk(&mut rng), mk(&mut rng));
        assert_eq!(heatmap_distance(&a, &a).unwrap(), 0.0);
        assert_eq!(
            heatmap_distance(&a, &b).unwrap(),
            heatmap_distance(&b, &a).unwrap()
        );
        let (ab, bc, ac) = (
            heatmap_distance(&a, &b).unwrap(),
            heatmap_distance(&b, &c).unwrap(),
            heatmap_distance(&a, &c).unwrap(),
        );
        assert!(ac <= ab + bc + 1e-9, "triangle inequality: {ac} vs {ab} + {bc}");
    }
    pass(8, "normalization sums, delta column, and distance axioms hold");
}

#[test]
fn criterion_09_adaptation_invariants() {
    let mut rng = ChaCha20Rng::seed_from_u64(909);
    let common = common_registry();

    // One-hot round trip over random registry-colored images.
    for _ in 0..20 {
        let mut label = Array3::zeros((6, 6, 3));
        for r in 0..6 {
            for c in 0..6 {
                let rgb = common.rgb(rng.gen_range(0..common.len()));
                for k in 0..3 {
                    label[[r, c, k]] = rgb[k];
                }
            }
        }
        let (onehot, unmatched) = rgb_to_onehot(&label, &common);
        assert_eq!(unmatched, 0);
        assert!(onehot.is_one_hot());
        assert_eq!(onehot_to_rgb(&onehot, &common).unwrap(), label);
    }

    // Mass preservation under merging, for soft maps too.
    let table = merge_to_common(DatasetId::Viper).unwrap();
    let n_src = table.source().len();
    for _ in 0..10 {
        let mut soft = Array3::from_shape_fn((4, 4, n_src), |_| rng.gen_range(0.0..1.0));
        // Normalize to per-pixel mass 1 to mimic predictions.
        for r in 0..4 {
            for c in 0..4 {
                let sum: f64 = (0..n_src).map(|k| soft[[r, c, k]]).sum();
                for k in 0..n_src {
                    soft[[r, c, k]] /= sum;
                }
            }
        }
        let m = SemanticLabelMap::new(soft.clone(), table.source().name());
        let merged = merge_classes(&m, &table).unwrap();
        for r in 0..4 {
            for c in 0..4 {
                let before: f64 = (0..n_src).map(|k| soft[[r, c, k]]).sum();
                let after: f64 =
                    (0..table.target().len()).map(|k| merged.data[[r, c, k]]).sum();
                assert!((before - after).abs() < 1e-12, "mass at ({r},{c})");
            }
        }
    }

    // A frame containing every source class merges onto the common set only.
    for dataset in [DatasetId::Viper, DatasetId::Kitti, DatasetId::Synscapes] {
        let source = source_registry(dataset).unwrap();
        let table = merge_to_common(dataset).unwrap();
        let n = source.len();
        let mut label = Array3::zeros((2, n, 3));
        for c in 0..n {
            for (k, v) in source.rgb(c).iter().enumerate() {
                label[[0, c, k]] = *v;
                label[[1, c, k]] = *v;
            }
        }
        let (onehot, unmatched) = rgb_to_onehot(&label, &source);
        assert_eq!(unmatched, 0, "{}", dataset.name());
        let merged = merge_classes(&onehot, &table).unwrap();
        assert!(merged.is_one_hot(), "{}", dataset.name());
        assert_eq!(merged.channels(), common.len(), "{}", dataset.name());
        // Every common class the table maps onto must actually appear.
        let rgb = onehot_to_rgb(&merged, &common).unwrap();
        for r in 0..2 {
            for c in 0..n {
                let px = [rgb[[r, c, 0]], rgb[[r, c, 1]], rgb[[r, c, 2]]];
                assert!(
                    common.index_of_rgb(px).is_some(),
                    "{}: pixel color {px:?} is not a common-set color",
                    dataset.name()
                );
            }
        }
    }
    pass(9, "one-hot round trip, merge mass preservation, full-palette merges");
}

#[test]
fn criterion_10_determinism_and_persistence() {
    let reg = common_registry();
    let samples = generate_toy_dataset(4, 32, &reg, 5).unwrap();
    let make = |dir: &Path| -> RunConfig {
        let data = dir.join("toy");
        write_dataset(&data, &samples, &reg, 0, 0.5).unwrap();
        RunConfig {
            model_spec: ModelSpec {
                variant: Variant::M20,
                input_width: 32,
                input_height: 32,
                n_classes: reg.len(),
                width_scale: 0.05,
                seed: 3,
            },
            train_manifests: vec![data.join("manifest.txt")],
            eval_sets: vec![("train".into(), vec![data.join("manifest.txt")])],
            batch_size: 2,
            learning_rate: 0.001,
            epochs: None,
            max_batches: Some(6),
            eval_cadence: EvalCadence::EveryKBatches(3),
            loss: LossKind::Mape,
            seed: 17,
            output_dir: dir.join("out"),
        }
    };
    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    let a = train(&make(dir_a.path())).unwrap();
    let b = train(&make(dir_b.path())).unwrap();
    assert_eq!(a.run_log, b.run_log, "fixed-seed runs must log identical metrics");

    // Checkpoint round trip preserves evaluation exactly.
    let manifest = load_manifest(&dir_a.path().join("toy/manifest.txt")).unwrap();
    let eval_samples_vec = manifest.load_all().unwrap();
    let before = evaluate_samples(&a.model, &eval_samples_vec).unwrap();
    let reloaded = Model::load(&a.final_checkpoint).unwrap();
    let after = evaluate_samples(&reloaded, &eval_samples_vec).unwrap();
    assert_eq!(before, after, "reloaded checkpoint must evaluate identically");
    match (&before, &after) {
        (EvalResult::Depth(x), EvalResult::Depth(y)) => {
            assert_eq!(x.mape.to_bits(), y.mape.to_bits(), "bit-exact restore");
        }
        _ => panic!("depth evaluation expected"),
    }
    pass(10, "fixed-seed runs identical; checkpoint restore bit-exact");
}
