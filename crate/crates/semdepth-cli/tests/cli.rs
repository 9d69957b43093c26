//! End-to-end tests of the command-line surface: determinism of toygen,
//! the train → eval → analyze → compare pipeline on a tiny toy run, and
//! the error/exit-code contract.

use std::path::Path;
use std::process::{Command, Output};

fn semdepth(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_semdepth"))
        .args(args)
        .env_remove("SEMDEPTH_DEVICE")
        .output()
        .expect("binary runs")
}

fn tree_digest(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files = Vec::new();
    fn walk(dir: &Path, root: &Path, out: &mut Vec<(String, Vec<u8>)>) {
        let mut entries: Vec<_> =
            std::fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
        entries.sort();
        for path in entries {
            if path.is_dir() {
                walk(&path, root, out);
            } else {
                let rel = path.strip_prefix(root).unwrap().display().to_string();
                out.push((rel, std::fs::read(&path).unwrap()));
            }
        }
    }
    walk(root, root, &mut files);
    files
}

#[test]
fn toygen_is_deterministic_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        let res = semdepth(&[
            "toygen",
            "--n",
            "4",
            "--size",
            "64",
            "--seed",
            "7",
            "--out",
            out.to_str().unwrap(),
        ]);
        assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    }
    assert_eq!(tree_digest(&a), tree_digest(&b), "identical output trees expected");
}

#[test]
fn train_eval_analyze_compare_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("toy");
    let res = semdepth(&[
        "toygen",
        "--n",
        "4",
        "--size",
        "32",
        "--seed",
        "3",
        "--out",
        data.to_str().unwrap(),
    ]);
    assert!(res.status.success());
    let manifest = data.join("manifest.txt");

    let config_path = dir.path().join("run.cfg");
    std::fs::write(
        &config_path,
        format!(
            concat!(
                "model.variant = M20\n",
                "model.input_width = 32\n",
                "model.input_height = 32\n",
                "model.n_classes = 11\n",
                "model.width_scale = 0.05\n",
                "model.seed = 5\n",
                "data.train_manifests = {m}\n",
                "eval.train = {m}\n",
                "train.batch_size = 2\n",
                "train.max_batches = 3\n",
                "train.eval_every = 3\n",
                "train.seed = 5\n",
                "out.dir = {out}\n",
            ),
            m = manifest.display(),
            out = dir.path().join("run").display()
        ),
    )
    .unwrap();
    let res = semdepth(&["train", "--config", config_path.to_str().unwrap()]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let stdout = String::from_utf8_lossy(&res.stdout);
    assert!(stdout.contains("train: M20 finished"), "{stdout}");
    let run_log = dir.path().join("run/run_log.csv");
    assert!(run_log.is_file());
    let checkpoint = dir.path().join("run/checkpoints/step_0000003");
    assert!(checkpoint.join("tensors.bin").is_file());

    let res = semdepth(&[
        "eval",
        "--checkpoint",
        checkpoint.to_str().unwrap(),
        "--manifest",
        manifest.to_str().unwrap(),
        "--out",
        dir.path().join("eval.csv").to_str().unwrap(),
    ]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let eval_csv = std::fs::read_to_string(dir.path().join("eval.csv")).unwrap();
    assert!(eval_csv.starts_with("mape,"));

    let res = semdepth(&[
        "analyze",
        "depth-heatmap",
        "--manifest",
        manifest.to_str().unwrap(),
        "--out",
        dir.path().join("analysis").to_str().unwrap(),
        "--norm",
        "per_row",
    ]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    assert!(dir.path().join("analysis/depth_heatmap_toy_per_row.png").is_file());

    let res = semdepth(&[
        "analyze",
        "accuracy-heatmap",
        "--checkpoint",
        checkpoint.to_str().unwrap(),
        "--manifest",
        manifest.to_str().unwrap(),
        "--out",
        dir.path().join("analysis").to_str().unwrap(),
    ]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));

    let res = semdepth(&[
        "compare",
        "--log",
        &format!("m20={}", run_log.display()),
        "--split",
        "train",
        "--out",
        dir.path().join("cmp").to_str().unwrap(),
    ]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    assert!(dir.path().join("cmp/windowed_metrics.csv").is_file());

    // Segmentation generation with a one-step U-Net checkpoint.
    let unet_cfg = dir.path().join("unet.cfg");
    std::fs::write(
        &unet_cfg,
        format!(
            concat!(
                "model.variant = UNET\n",
                "model.input_width = 32\n",
                "model.input_height = 32\n",
                "model.n_classes = 11\n",
                "model.width_scale = 0.05\n",
                "data.train_manifests = {m}\n",
                "train.batch_size = 2\n",
                "train.max_batches = 1\n",
                "train.eval_every = 1\n",
                "out.dir = {out}\n",
            ),
            m = manifest.display(),
            out = dir.path().join("unet_run").display()
        ),
    )
    .unwrap();
    assert!(semdepth(&["train", "--config", unet_cfg.to_str().unwrap()]).status.success());
    let res = semdepth(&[
        "segment",
        "--checkpoint",
        dir.path().join("unet_run/checkpoints/step_0000001").to_str().unwrap(),
        "--manifest",
        manifest.to_str().unwrap(),
    ]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    assert!(data.join("semantic_pred/00000.png").is_file());
}

#[test]
fn prepare_unifies_afov_and_resizes() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("toy");
    assert!(semdepth(&[
        "toygen", "--n", "2", "--size", "64", "--seed", "4", "--out",
        data.to_str().unwrap()
    ])
    .status
    .success());
    let out = dir.path().join("unified");
    let res = semdepth(&[
        "prepare",
        "--manifest",
        data.join("manifest.txt").to_str().unwrap(),
        "--target-afov-ref",
        "lyft",
        "--target-size",
        "32x32",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let stdout = String::from_utf8_lossy(&res.stdout);
    assert!(stdout.contains("prepare: 2 frames"), "{stdout}");
    // The prepared dataset loads and has the requested size.
    let img = image::image_dimensions(out.join("image/00000.png")).unwrap();
    assert_eq!(img, (32, 32));
    assert!(out.join("manifest.txt").is_file());
}

#[test]
fn flag_overrides_are_order_independent() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("toy");
    assert!(semdepth(&[
        "toygen", "--n", "2", "--size", "32", "--seed", "1", "--out",
        data.to_str().unwrap()
    ])
    .status
    .success());
    let manifest = data.join("manifest.txt");
    let config_path = dir.path().join("run.cfg");
    std::fs::write(
        &config_path,
        format!(
            concat!(
                "model.variant = M20\n",
                "model.input_width = 32\n",
                "model.input_height = 32\n",
                "model.n_classes = 11\n",
                "model.width_scale = 0.05\n",
                "data.train_manifests = {m}\n",
                "train.batch_size = 2\n",
                "train.max_batches = 1\n",
                "train.eval_every = 1\n",
            ),
            m = manifest.display()
        ),
    )
    .unwrap();
    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    let run = |out: &Path, flags: [&str; 4]| {
        let res = semdepth(&[
            "train",
            "--config",
            config_path.to_str().unwrap(),
            "--set",
            flags[0],
            "--set",
            flags[1],
            "--set",
            flags[2],
            "--set",
            flags[3],
            "--set",
            &format!("out.dir={}", out.display()),
        ]);
        assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    };
    run(&out_a, ["train.seed=9", "model.seed=4", "train.learning_rate=0.01", "train.loss=mape"]);
    run(&out_b, ["train.loss=mape", "train.learning_rate=0.01", "train.seed=9", "model.seed=4"]);
    let strip_wall = |p: &Path| {
        std::fs::read_to_string(p.join("run_log.csv"))
            .unwrap()
            .lines()
            .map(|l| l.rsplit_once(',').map(|(a, _)| a.to_string()).unwrap_or_default())
            .collect::<Vec<_>>()
    };
    assert_eq!(strip_wall(&out_a), strip_wall(&out_b));
}

#[test]
fn eval_without_depth_exits_one_with_message() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("toy");
    assert!(semdepth(&[
        "toygen", "--n", "2", "--size", "32", "--seed", "2", "--out",
        data.to_str().unwrap()
    ])
    .status
    .success());
    // Train a one-step checkpoint first.
    let manifest = data.join("manifest.txt");
    let config_path = dir.path().join("run.cfg");
    std::fs::write(
        &config_path,
        format!(
            concat!(
                "model.variant = M20\n",
                "model.input_width = 32\n",
                "model.input_height = 32\n",
                "model.n_classes = 11\n",
                "model.width_scale = 0.05\n",
                "data.train_manifests = {m}\n",
                "train.batch_size = 2\n",
                "train.max_batches = 1\n",
                "train.eval_every = 1\n",
                "out.dir = {out}\n",
            ),
            m = manifest.display(),
            out = dir.path().join("run").display()
        ),
    )
    .unwrap();
    assert!(semdepth(&["train", "--config", config_path.to_str().unwrap()]).status.success());
    // Strip the depth directory and re-evaluate.
    std::fs::remove_dir_all(data.join("depth")).unwrap();
    let res = semdepth(&[
        "eval",
        "--checkpoint",
        dir.path().join("run/checkpoints/step_0000001").to_str().unwrap(),
        "--manifest",
        manifest.to_str().unwrap(),
    ]);
    assert_eq!(res.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&res.stderr);
    assert!(stderr.contains("manifest lacks depth"), "{stderr}");
}

#[test]
fn usage_errors_exit_two() {
    let res = semdepth(&["toygen", "--no-such-flag"]);
    assert_eq!(res.status.code(), Some(2));
    let res = semdepth(&["definitely-not-a-command"]);
    assert_eq!(res.status.code(), Some(2));
}

#[test]
fn unsupported_device_is_a_usage_error() {
    let res = Command::new(env!("CARGO_BIN_EXE_semdepth"))
        .args(["toygen", "--n", "1", "--size", "32", "--seed", "0", "--out", "/tmp/x"])
        .env("SEMDEPTH_DEVICE", "cuda:0")
        .output()
        .unwrap();
    assert_eq!(res.status.code(), Some(2));
}
