use std::path::Path;
use std::process::{Command, Output};

use fedtier::mnist::{
    encode_idx_images, encode_idx_labels, TEST_IMAGES, TEST_LABELS, TRAIN_IMAGES, TRAIN_LABELS,
};
use fedtier::nn::IMAGE_PIXELS;
use fedtier::rng::DetRng;

fn fedtier(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fedtier"))
        .args(args)
        .env_remove("FEDTIER_MNIST_DIR")
        .output()
        .expect("binary runs")
}

/// Label l lights up a horizontal band at rows 2l..2l+3, plus noise.
fn fake_images(labels: &[u8], seed: u64) -> Vec<u8> {
    let mut rng = DetRng::new(seed);
    let mut px = Vec::with_capacity(labels.len() * IMAGE_PIXELS);
    for &l in labels {
        for i in 0..IMAGE_PIXELS {
            let row = i / 28;
            let on = row >= 2 * l as usize + 2 && row < 2 * l as usize + 5;
            let base = if on { 200 } else { 10 };
            px.push(base + rng.below(40) as u8);
        }
    }
    px
}

fn write_fake_mnist(dir: &Path) {
    let train: Vec<u8> = (0..600).map(|i| (i % 10) as u8).collect();
    let test: Vec<u8> = (0..200).map(|i| (i % 10) as u8).collect();
    std::fs::write(
        dir.join(TRAIN_IMAGES),
        encode_idx_images(&fake_images(&train, 1), train.len()),
    )
    .unwrap();
    std::fs::write(dir.join(TRAIN_LABELS), encode_idx_labels(&train)).unwrap();
    std::fs::write(
        dir.join(TEST_IMAGES),
        encode_idx_images(&fake_images(&test, 2), test.len()),
    )
    .unwrap();
    std::fs::write(dir.join(TEST_LABELS), encode_idx_labels(&test)).unwrap();
}

fn write_config(path: &Path, topology: &str) {
    let text = format!(
        r#"{{"topology":"{topology}","scenario":"s2","sparse_per_label":5,"rounds":2,"seed":4,
            "train":{{"batch_size":16}}}}"#
    );
    std::fs::write(path, text).unwrap();
}

#[test]
fn list_scenarios_prints_all_three() {
    let out = fedtier(&["--list-scenarios"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    for name in ["s1", "s2", "custom"] {
        assert!(text.lines().any(|l| l.starts_with(name)), "{text}");
    }
}

#[test]
fn config_errors_exit_with_code_1() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(fedtier(&[]).status.code(), Some(1));

    let missing = dir.path().join("nope.json");
    assert_eq!(
        fedtier(&["--config", missing.to_str().unwrap()])
            .status
            .code(),
        Some(1)
    );

    let bad = dir.path().join("bad.json");
    std::fs::write(
        &bad,
        r#"{"topology":"standard","scenario":"s1","rounds":0}"#,
    )
    .unwrap();
    let out = fedtier(&["--config", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("rounds"));
}

#[test]
fn missing_data_exits_with_code_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    write_config(&cfg, "standard");
    assert_eq!(
        fedtier(&["--config", cfg.to_str().unwrap()]).status.code(),
        Some(2)
    );
    let out = fedtier(&[
        "--config",
        cfg.to_str().unwrap(),
        "--mnist-dir",
        "/nonexistent/mnist",
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn runs_both_topologies_and_compares_them() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("mnist");
    std::fs::create_dir(&data).unwrap();
    write_fake_mnist(&data);

    let mut outs = Vec::new();
    for topology in ["standard", "three_tier"] {
        let cfg = dir.path().join(format!("{topology}.json"));
        write_config(&cfg, topology);
        let out_dir = dir.path().join(topology);
        let out = fedtier(&[
            "--config",
            cfg.to_str().unwrap(),
            "--mnist-dir",
            data.to_str().unwrap(),
            "--out",
            out_dir.to_str().unwrap(),
            "--quiet",
        ]);
        assert!(
            out.status.success(),
            "{}",
            String::from_utf8_lossy(&out.stderr)
        );
        assert!(out.stderr.is_empty());
        for f in ["metrics.csv", "metrics.json", "accuracy.svg"] {
            assert!(out_dir.join(f).is_file(), "{f} missing");
        }
        let csv = std::fs::read_to_string(out_dir.join("metrics.csv")).unwrap();
        assert_eq!(csv.lines().count(), 1 + 2 * 2);
        outs.push(out_dir);
    }
    assert!(!outs[0].join("registry").exists());
    let index = std::fs::read_to_string(outs[1].join("registry/index.json")).unwrap();
    assert_eq!(
        serde_json::from_str::<serde_json::Value>(&index)
            .unwrap()
            .as_array()
            .unwrap()
            .len(),
        2
    );

    let a = outs[0].join("metrics.csv");
    let b = outs[1].join("metrics.csv");
    let out = fedtier(&["compare", a.to_str().unwrap(), b.to_str().unwrap()]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.trim_start().starts_with("client_id"), "{text}");
    assert_eq!(text.lines().count(), 3);

    let missing = dir.path().join("absent.csv");
    let out = fedtier(&["compare", a.to_str().unwrap(), missing.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn seed_override_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("mnist");
    std::fs::create_dir(&data).unwrap();
    write_fake_mnist(&data);
    let cfg = dir.path().join("cfg.json");
    write_config(&cfg, "three_tier");

    let run = |seed: &str, name: &str| {
        let out_dir = dir.path().join(name);
        let out = fedtier(&[
            "--config",
            cfg.to_str().unwrap(),
            "--mnist-dir",
            data.to_str().unwrap(),
            "--out",
            out_dir.to_str().unwrap(),
            "--seed",
            seed,
            "-q",
        ]);
        assert!(out.status.success());
        std::fs::read(out_dir.join("metrics.json")).unwrap()
    };
    assert_eq!(run("9", "a"), run("9", "b"));
}
