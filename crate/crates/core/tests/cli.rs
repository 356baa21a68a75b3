use std::path::Path;
use std::process::{Command, Output};

use fixlab::data::{write_image, RgbImage};

fn fixlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fixlab")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn config(dir: &Path, extra: &str) -> std::path::PathBuf {
    let text = format!(
        r#"
seed = 3
out = "{}"

[dataset]
kind = "synthetic"
side = 32
train_per_class = 4
test_per_class = 2

[model]
families = ["standard", "coarse", "retinal"]
width = 4

[train.optimizer]
kind = "adam"
lr = 0.002
batch_size = 20
epochs = 1

[[attack]]
algorithm = "pgd"
metric = "linf"
iterations = 2
step_const = 0.1

[[attack]]
algorithm = "transfer"
iterations = 2

[sweep]
eps = [0.0, 0.01, 0.5]
delta_eps = [0.01]
{extra}
"#,
        dir.join("run").display()
    );
    let p = dir.join("run.toml");
    std::fs::write(&p, text).unwrap();
    p
}

fn read(p: impl AsRef<Path>) -> Vec<u8> {
    std::fs::read(p).unwrap()
}

#[test]
fn train_sweep_resume_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "");
    let cfg = cfg.to_str().unwrap();
    let run = dir.path().join("run");

    // sweeping before training is a configuration error
    assert_eq!(fixlab(&["sweep", "--config", cfg]).status.code(), Some(2));

    let out = fixlab(&["train", "--config", cfg]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let ckpt = read(run.join("models/retinal.fvrb"));
    let manifest: serde_json::Value = serde_json::from_slice(&read(run.join("models/retinal.manifest.json"))).unwrap();
    assert_eq!(manifest["seed"], 3);
    assert_eq!(manifest["models"][0]["max_offset"], 8);
    let steps: Vec<f64> = manifest["attacks"].as_array().unwrap().iter().map(|a| a["step_size"].as_f64().unwrap()).collect();
    assert!((steps[1] - 0.01 / 0.3 * 0.1).abs() < 1e-15);

    // identical config and seed give identical checkpoints
    assert!(fixlab(&["train", "--config", cfg]).status.success());
    assert_eq!(read(run.join("models/retinal.fvrb")), ckpt);

    let out = fixlab(&["sweep", "--config", cfg]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let curves = read(run.join("sweep/curves.csv"));
    let text = String::from_utf8(curves.clone()).unwrap();
    assert_eq!(text.lines().count(), 1 + 3 * 2 * 3);
    assert!(run.join("sweep/deltas.svg").exists());
    assert!(run.join("sweep/retinal_pgd-linf-i2-c0.1-misclassify_1.curve.csv").exists());

    // truncate a record file, resume, and compare
    let rec = run.join("sweep/records/coarse.jsonl");
    let bytes = read(&rec);
    std::fs::write(&rec, &bytes[..bytes.len() / 3]).unwrap();
    assert!(fixlab(&["sweep", "--config", cfg, "--resume"]).status.success());
    assert_eq!(read(run.join("sweep/curves.csv")), curves);
    assert_eq!(read(&rec), bytes);

    // a fresh sweep reproduces the CSVs byte for byte
    assert!(fixlab(&["sweep", "--config", cfg]).status.success());
    assert_eq!(read(run.join("sweep/curves.csv")), curves);

    std::fs::remove_file(run.join("sweep/deltas.svg")).unwrap();
    let out_dir = run.join("sweep");
    assert!(fixlab(&["report", "--out", out_dir.to_str().unwrap(), "--config", cfg]).status.success());
    assert!(run.join("sweep/deltas.svg").exists());
}

#[test]
fn config_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "");
    let text = std::fs::read_to_string(&cfg).unwrap().replace("seed = 3", "");
    std::fs::write(&cfg, text).unwrap();
    let out = fixlab(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("seed"));
    assert_eq!(fixlab(&["train", "--config", "/nonexistent.toml"]).status.code(), Some(2));
}

#[test]
fn warp_preview_counts() {
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("checker.png");
    let pixels = (0..64 * 64).flat_map(|p| {
        let v = if (p % 64 / 8 + p / 64 / 8) % 2 == 0 { 255 } else { 0 };
        [v, v, v]
    });
    write_image(&RgbImage { width: 64, height: 64, pixels: pixels.collect() }, &img).unwrap();
    let img = img.to_str().unwrap();

    let out = dir.path().join("retina");
    let o = fixlab(&["warp-preview", "--image", img, "--family", "retinal", "--side", "64", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(std::fs::read_dir(&out).unwrap().count(), 5);

    let out = dir.path().join("cortex");
    let o = fixlab(&[
        "warp-preview", "--image", img, "--family", "cortical", "--side", "64", "--fixations", "1", "--format", "ppm",
        "--out", out.to_str().unwrap(),
    ]);
    assert!(o.status.success());
    let files: Vec<_> = std::fs::read_dir(&out).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(files.len(), 4);
    for f in files {
        let im = fixlab::data::read_image(&f).unwrap();
        assert_eq!((im.width, im.height), (8, 8));
    }

    let o = fixlab(&["warp-preview", "--image", img, "--family", "standard", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("no sampling mechanism"));
}
