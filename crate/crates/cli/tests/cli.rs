//! End-to-end runs of the `hwau` binary on small phantom sets.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use hwau_core::data::{read_volume, write_volume, Manifest, Split};

fn hwau(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hwau"))
        .args(args)
        .env("RUST_LOG", "warn")
        .env("HWAU_NUM_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn run_dir(o: &Output) -> PathBuf {
    let text = stdout(o);
    let line = text.lines().find_map(|l| l.strip_prefix("run_dir ")).expect("run_dir line");
    PathBuf::from(line)
}

/// A small, fast configuration rooted in `root`.
fn small_config(root: &Path) -> PathBuf {
    let path = root.join("small.toml");
    let text = format!(
        r#"seed = 3
output_root = {:?}

[phantom]
count = 10

[phantom.spec]
extents = [16, 16, 16]

[model]
base_width = 4

[train]
epochs = 2
crop = [16, 16, 16]
"#,
        root.join("runs").display().to_string()
    );
    std::fs::write(&path, text).unwrap();
    path
}

fn phantoms(root: &Path, cfg: &Path) -> PathBuf {
    let data = root.join("data");
    let o = hwau(&["phantom", "--config", cfg.to_str().unwrap(), "--out", data.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    data.join("manifest.txt")
}

fn error_line(o: &Output) -> serde_json::Value {
    let err = stderr(o);
    let last = err.lines().last().expect("an error line");
    serde_json::from_str(last).unwrap_or_else(|e| panic!("{last:?}: {e}"))
}

#[test]
fn phantom_writes_seven_one_two_split() {
    let root = tempfile::tempdir().unwrap();
    let cfg = small_config(root.path());
    let manifest = Manifest::read(&phantoms(root.path(), &cfg)).unwrap();
    let counts = [Split::Train, Split::Val, Split::Test].map(|s| manifest.of_split(s).count());
    assert_eq!(counts, [7, 1, 2]);
    for e in &manifest.entries {
        assert!(manifest.load(e).is_ok());
    }
    assert!(root.path().join("data/config.toml").exists());
}

#[test]
fn eval_of_ground_truth_is_perfect() {
    let root = tempfile::tempdir().unwrap();
    let cfg = small_config(root.path());
    let manifest_path = phantoms(root.path(), &cfg);
    let manifest = Manifest::read(&manifest_path).unwrap();
    let preds = root.path().join("preds");
    for e in manifest.of_split(Split::Test) {
        std::fs::create_dir_all(preds.join(&e.id)).unwrap();
        for (c, m) in e.masks.iter().enumerate() {
            let v = read_volume(&manifest.base.join(m)).unwrap();
            write_volume(&preds.join(&e.id).join(format!("pred{c}.hwav")), &v).unwrap();
        }
    }
    let o = hwau(&[
        "eval",
        "--config",
        cfg.to_str().unwrap(),
        "--manifest",
        manifest_path.to_str().unwrap(),
        "--predictions",
        preds.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(run_dir(&o).join("report.json")).unwrap()).unwrap();
    let cases = report[0]["cases"].as_array().unwrap();
    assert_eq!(cases.len(), 2);
    for case in cases {
        for d in case["dice"].as_array().unwrap() {
            assert_eq!(d.as_f64(), Some(100.0));
        }
        for h in case["hd95"].as_array().unwrap() {
            assert!(h.is_null() || h.as_f64() == Some(0.0), "{h}");
        }
    }
    assert!(stdout(&o).contains("| predictions | 100.00 | 100.00 | 100.00 |"), "{}", stdout(&o));
}

#[test]
fn train_then_infer_then_eval() {
    let root = tempfile::tempdir().unwrap();
    let cfg = small_config(root.path());
    let manifest_path = phantoms(root.path(), &cfg);
    let o = hwau(&["train", "--config", cfg.to_str().unwrap(), "--manifest", manifest_path.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let train_dir = run_dir(&o);
    for f in ["config.toml", "invocation.json", "metrics.jsonl", "best.ckpt", "last.ckpt"] {
        assert!(train_dir.join(f).exists(), "{f}");
    }
    let log = std::fs::read_to_string(train_dir.join("metrics.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2);
    for line in log.lines() {
        let rec: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(rec["train_loss"].as_f64().unwrap().is_finite());
        assert_eq!(rec["val_dice"].as_array().unwrap().len(), 2);
    }

    // The archived config alone is enough to rebuild the model.
    let archived = train_dir.join("config.toml");
    let ckpt = train_dir.join("last.ckpt");
    let manifest = Manifest::read(&manifest_path).unwrap();
    let case = manifest.of_split(Split::Test).next().unwrap();
    let images: Vec<String> = case.images.iter().map(|p| manifest.base.join(p).display().to_string()).collect();
    let mut args = vec!["infer", "--config", archived.to_str().unwrap(), "--checkpoint", ckpt.to_str().unwrap(), "--id", &case.id];
    args.extend(images.iter().map(String::as_str));
    let o = hwau(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    let pred = read_volume(&run_dir(&o).join(&case.id).join("pred0.hwav")).unwrap();
    assert_eq!(pred.extents, [16, 16, 16]);
    assert!(pred.voxels.iter().all(|&p| (0.0..=1.0).contains(&p)));

    let o = hwau(&[
        "eval",
        "--config",
        archived.to_str().unwrap(),
        "--checkpoint",
        ckpt.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let table = stdout(&o);
    assert!(table.starts_with("| config | dice_modality-0-mask (%)"), "{table}");
    assert!(table.contains("| checkpoint |"));
}

#[test]
fn ablate_emits_four_rows() {
    let root = tempfile::tempdir().unwrap();
    let cfg = small_config(root.path());
    let o = hwau(&["ablate", "--config", cfg.to_str().unwrap(), "--override", "train.epochs=1"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let dir = run_dir(&o);
    let table = std::fs::read_to_string(dir.join("report.md")).unwrap();
    let names: Vec<&str> = table.lines().skip(2).map(|l| l.split('|').nth(1).unwrap().trim()).collect();
    assert_eq!(names, ["none", "tfm", "sgc+tfm", "hwa+sgc+tfm"]);
    for n in names {
        assert!(dir.join(n).join("best.ckpt").exists());
    }
}

#[test]
fn config_errors_exit_two_with_one_json_line() {
    let root = tempfile::tempdir().unwrap();
    let cfg = small_config(root.path());
    for bad in ["train.learning_rate=1", "model.base_width=0", "train.crop=[8,16,16]"] {
        let o = hwau(&["train", "--config", cfg.to_str().unwrap(), "--override", bad]);
        assert_eq!(o.status.code(), Some(2), "{bad}: {}", stderr(&o));
        let e = error_line(&o);
        assert_eq!(e["error"], "config");
        assert_eq!(e["code"], 2);
    }
    let o = hwau(&["eval", "--config", cfg.to_str().unwrap(), "--predictions", "x"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(error_line(&o)["reason"].as_str().unwrap().contains("data.manifest"));
    assert!(!root.path().join("runs").exists(), "nothing is written before validation");
}

#[test]
fn data_errors_exit_three() {
    let root = tempfile::tempdir().unwrap();
    let cfg = small_config(root.path());
    let o = hwau(&["train", "--config", cfg.to_str().unwrap(), "--manifest", "/nonexistent/manifest.txt"]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert_eq!(error_line(&o)["error"], "data");

    let manifest_path = phantoms(root.path(), &cfg);
    let manifest = Manifest::read(&manifest_path).unwrap();
    let victim = manifest.base.join(&manifest.entries[0].images[0]);
    let bytes = std::fs::read(&victim).unwrap();
    std::fs::write(&victim, &bytes[..bytes.len() - 3]).unwrap();
    let o = hwau(&["train", "--config", cfg.to_str().unwrap(), "--manifest", manifest_path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn divergence_exits_four() {
    let root = tempfile::tempdir().unwrap();
    let cfg = small_config(root.path());
    let o = hwau(&["train", "--config", cfg.to_str().unwrap(), "--override", "train.lr0=1e30"]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
    let e = error_line(&o);
    assert_eq!(e["error"], "numerical");
    assert!(e["reason"].as_str().unwrap().contains("non-finite"));
}

#[test]
fn mismatched_checkpoint_is_a_config_error() {
    let root = tempfile::tempdir().unwrap();
    let cfg = small_config(root.path());
    let manifest_path = phantoms(root.path(), &cfg);
    let o = hwau(&["train", "--config", cfg.to_str().unwrap(), "--manifest", manifest_path.to_str().unwrap(), "--override", "train.epochs=1"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let ckpt = run_dir(&o).join("last.ckpt");
    let o = hwau(&[
        "eval",
        "--config",
        cfg.to_str().unwrap(),
        "--manifest",
        manifest_path.to_str().unwrap(),
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--override",
        "model.base_width=8",
    ]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(error_line(&o)["reason"].as_str().unwrap().contains("does not match"));
}

#[test]
fn help_documents_flags() {
    let o = hwau(&["--help"]);
    let text = stdout(&o);
    for flag in ["--config", "--seed", "--device-threads", "--override", "HWAU_NUM_THREADS"] {
        assert!(text.contains(flag), "{flag}");
    }
}
