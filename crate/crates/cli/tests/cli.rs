use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn kae(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kae"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn ok(args: &[&str]) -> Output {
    let out = kae(args);
    assert_eq!(code(&out), 0, "kae {args:?} failed: {}", stderr(&out));
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Every file under `dir`, keyed by relative path.
fn tree(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut files = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                files.insert(
                    path.strip_prefix(dir).unwrap().to_path_buf(),
                    fs::read(&path).unwrap(),
                );
            }
        }
    }
    files
}

/// Small 3-class dataset: 2 train and 2 test clouds per class, 32 points.
fn small_dataset(tmp: &TempDir) -> PathBuf {
    let dir = tmp.path().join("data");
    ok(&[
        "synth",
        "--classes",
        "sphere,box,torus",
        "--train",
        "2",
        "--test",
        "2",
        "--n",
        "32",
        "--seed",
        "3",
        "--out",
        p(&dir),
    ]);
    dir.join("manifest.json")
}

fn train_small(manifest: &Path, out: &Path, extra: &[&str]) {
    let mut args = vec![
        "train",
        "--manifest",
        p(manifest),
        "--k",
        "4",
        "--seed",
        "1",
        "--out",
        p(out),
    ];
    args.extend_from_slice(extra);
    ok(&args);
}

fn read_points(path: &Path) -> Vec<[f64; 3]> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| {
            let v: Vec<f64> = l.split_whitespace().map(|t| t.parse().unwrap()).collect();
            [v[0], v[1], v[2]]
        })
        .collect()
}

#[test]
fn synth_writes_every_cloud_and_manifest() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("synth");
    ok(&[
        "synth",
        "--classes",
        "sphere,box,torus",
        "--train",
        "50",
        "--test",
        "20",
        "--n",
        "256",
        "--seed",
        "7",
        "--out",
        p(&out),
    ]);
    let files = tree(&out);
    let xyz = files
        .keys()
        .filter(|f| f.extension().is_some_and(|e| e == "xyz"))
        .count();
    assert_eq!(xyz, 210);
    assert!(files.contains_key(Path::new("manifest.json")));
    assert!(files.contains_key(Path::new("effective-config.json")));
    assert_eq!(files.len(), 212);

    let again = tmp.path().join("again");
    ok(&[
        "synth",
        "--classes",
        "sphere,box,torus",
        "--train",
        "50",
        "--test",
        "20",
        "--n",
        "256",
        "--seed",
        "7",
        "--out",
        p(&again),
    ]);
    let mut second = tree(&again);
    let mut first = files;
    // The echoed output directory is the only intended difference.
    first.remove(Path::new("effective-config.json"));
    second.remove(Path::new("effective-config.json"));
    assert_eq!(first, second);
}

#[test]
fn synth_rejects_unknown_class() {
    let tmp = TempDir::new().unwrap();
    let out = kae(&[
        "synth",
        "--classes",
        "sphere,pyramid",
        "--out",
        p(tmp.path()),
    ]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("pyramid"), "{}", stderr(&out));
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(code(&kae(&["synth", "--bogus"])), 2);
    assert_eq!(code(&kae(&["frobnicate"])), 2);
    assert_eq!(code(&kae(&["synth"])), 2, "missing --out");
    let tmp = TempDir::new().unwrap();
    assert_eq!(
        code(&kae(&["synth", "--train", "x", "--out", p(tmp.path())])),
        2
    );
}

#[test]
fn config_file_is_overridden_by_flags() {
    let tmp = TempDir::new().unwrap();
    let cfg = tmp.path().join("cfg.json");
    fs::write(&cfg, r#"{"synth.classes": "sphere,box", "synth.train": 1, "synth.test": 1, "synth.n": 16, "seed": 4, "train.epochs": 3}"#).unwrap();
    let out = tmp.path().join("a");
    ok(&["synth", "--config", p(&cfg), "--n", "20", "--out", p(&out)]);
    let eff: BTreeMap<String, Value> =
        serde_json::from_str(&fs::read_to_string(out.join("effective-config.json")).unwrap())
            .unwrap();
    assert_eq!(eff["synth.n"], 20);
    assert_eq!(eff["synth.seed"], 4);
    assert_eq!(eff["synth.classes"], "sphere,box");
    assert_eq!(
        fs::read_to_string(out.join("train/sphere_0000.xyz"))
            .unwrap()
            .lines()
            .count(),
        20
    );

    // The echoed config reproduces the run.
    let replay = tmp.path().join("b");
    ok(&[
        "synth",
        "--config",
        p(&out.join("effective-config.json")),
        "--out",
        p(&replay),
    ]);
    for f in [
        "manifest.json",
        "train/sphere_0000.xyz",
        "test/box_0000.xyz",
    ] {
        assert_eq!(
            fs::read(out.join(f)).unwrap(),
            fs::read(replay.join(f)).unwrap(),
            "{f}"
        );
    }

    fs::write(&cfg, r#"{"synth.colour": "red"}"#).unwrap();
    assert_eq!(
        code(&kae(&["synth", "--config", p(&cfg), "--out", p(&out)])),
        2
    );
    fs::write(&cfg, r#"{"synth.n": "many"}"#).unwrap();
    assert_eq!(
        code(&kae(&["synth", "--config", p(&cfg), "--out", p(&out)])),
        2
    );
    assert_eq!(
        code(&kae(&[
            "synth",
            "--config",
            p(&tmp.path().join("none.json")),
            "--out",
            p(&out)
        ])),
        1
    );
}

#[test]
fn train_writes_checkpoint_and_one_csv_row_per_epoch() {
    let tmp = TempDir::new().unwrap();
    let manifest = small_dataset(&tmp);
    let out = tmp.path().join("run");
    train_small(&manifest, &out, &["--epochs", "100"]);
    assert!(out.join("checkpoint.json").is_file());
    assert!(out.join("effective-config.json").is_file());
    let csv = fs::read_to_string(out.join("loss.csv")).unwrap();
    assert_eq!(csv.lines().count(), 101);
    assert!(csv.starts_with("epoch,"));
}

#[test]
fn train_is_bit_reproducible() {
    let tmp = TempDir::new().unwrap();
    let manifest = small_dataset(&tmp);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    train_small(&manifest, &a, &["--epochs", "3"]);
    train_small(&manifest, &b, &["--epochs", "3"]);
    for f in ["checkpoint.json", "loss.csv"] {
        assert_eq!(
            fs::read(a.join(f)).unwrap(),
            fs::read(b.join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn zero_aux_weight_matches_default() {
    let tmp = TempDir::new().unwrap();
    let manifest = small_dataset(&tmp);
    let (a, b, c) = (
        tmp.path().join("a"),
        tmp.path().join("b"),
        tmp.path().join("c"),
    );
    train_small(&manifest, &a, &["--epochs", "2"]);
    train_small(&manifest, &b, &["--epochs", "2", "--aux-weight", "0"]);
    train_small(&manifest, &c, &["--epochs", "2", "--aux-weight", "1"]);
    let ckpt = |d: &Path| fs::read(d.join("checkpoint.json")).unwrap();
    assert_eq!(ckpt(&a), ckpt(&b));
    assert_ne!(ckpt(&a), ckpt(&c));
    assert_eq!(
        code(&kae(&[
            "train",
            "--manifest",
            p(&manifest),
            "--aux-weight",
            "-1",
            "--out",
            p(&a)
        ])),
        2
    );
}

#[test]
fn resume_matches_uninterrupted_training() {
    let tmp = TempDir::new().unwrap();
    let manifest = small_dataset(&tmp);
    let (full, part, resumed) = (
        tmp.path().join("full"),
        tmp.path().join("part"),
        tmp.path().join("resumed"),
    );
    train_small(&manifest, &full, &["--epochs", "4", "--aux-weight", "1"]);
    train_small(&manifest, &part, &["--epochs", "2", "--aux-weight", "1"]);
    let ckpt = part.join("checkpoint.json");
    ok(&[
        "train",
        "--manifest",
        p(&manifest),
        "--epochs",
        "4",
        "--resume",
        p(&ckpt),
        "--out",
        p(&resumed),
    ]);
    for f in ["checkpoint.json", "loss.csv"] {
        assert_eq!(
            fs::read(full.join(f)).unwrap(),
            fs::read(resumed.join(f)).unwrap(),
            "{f}"
        );
    }
    let clash = kae(&[
        "train",
        "--manifest",
        p(&manifest),
        "--k",
        "6",
        "--resume",
        p(&ckpt),
        "--out",
        p(&resumed),
    ]);
    assert_eq!(code(&clash), 2);
}

#[test]
fn periodic_checkpoints() {
    let tmp = TempDir::new().unwrap();
    let manifest = small_dataset(&tmp);
    let out = tmp.path().join("run");
    train_small(
        &manifest,
        &out,
        &["--epochs", "4", "--checkpoint-interval", "2"],
    );
    assert!(out.join("checkpoints/epoch-0002.json").is_file());
    assert_eq!(
        fs::read(out.join("checkpoints/epoch-0004.json")).unwrap(),
        fs::read(out.join("checkpoint.json")).unwrap()
    );
}

#[test]
fn train_data_errors() {
    let tmp = TempDir::new().unwrap();
    let manifest = small_dataset(&tmp);
    let out = tmp.path().join("run");
    let missing = kae(&[
        "train",
        "--manifest",
        p(&tmp.path().join("nope.json")),
        "--out",
        p(&out),
    ]);
    assert_eq!(code(&missing), 1);

    let cloud = manifest.parent().unwrap().join("train/box_0001.xyz");
    let text = fs::read_to_string(&cloud).unwrap();
    let fewer: Vec<&str> = text.lines().take(20).collect();
    fs::write(&cloud, fewer.join("\n")).unwrap();
    let inconsistent = kae(&[
        "train",
        "--manifest",
        p(&manifest),
        "--epochs",
        "1",
        "--out",
        p(&out),
    ]);
    assert_eq!(code(&inconsistent), 2, "{}", stderr(&inconsistent));

    fs::write(&cloud, "1 2 oops\n").unwrap();
    assert_eq!(
        code(&kae(&[
            "train",
            "--manifest",
            p(&manifest),
            "--epochs",
            "1",
            "--out",
            p(&out)
        ])),
        1
    );
}

#[test]
fn detect_modes_and_outputs() {
    let tmp = TempDir::new().unwrap();
    let manifest = small_dataset(&tmp);
    let run = tmp.path().join("run");
    train_small(&manifest, &run, &["--epochs", "2"]);
    let ckpt = run.join("checkpoint.json");
    let input = manifest.parent().unwrap().join("test/torus_0000.xyz");
    let original = read_points(&input);

    let nms = tmp.path().join("nms");
    ok(&[
        "detect",
        "--ckpt",
        p(&ckpt),
        "--in",
        p(&input),
        "--k",
        "8",
        "--mode",
        "nms",
        "--out",
        p(&nms),
    ]);
    let picked = read_points(&nms.join("torus_0000.keypoints.xyz"));
    assert_eq!(picked.len(), 8);
    assert!(picked.iter().all(|q| original.contains(q)));

    let soft = tmp.path().join("soft");
    ok(&[
        "detect",
        "--ckpt",
        p(&ckpt),
        "--in",
        p(&input),
        "--mode",
        "soft",
        "--ply",
        "--out",
        p(&soft),
    ]);
    let kp = read_points(&soft.join("torus_0000.keypoints.xyz"));
    assert_eq!(kp.len(), 4);
    for a in 0..3 {
        let lo = original.iter().map(|q| q[a]).fold(f64::INFINITY, f64::min);
        let hi = original
            .iter()
            .map(|q| q[a])
            .fold(f64::NEG_INFINITY, f64::max);
        assert!(kp.iter().all(|q| q[a] >= lo - 1e-9 && q[a] <= hi + 1e-9));
    }

    let ply = fs::read_to_string(soft.join("torus_0000.ply")).unwrap();
    let mut lines = ply.lines();
    assert_eq!(lines.next(), Some("ply"));
    assert_eq!(lines.next(), Some("format ascii 1.0"));
    let mut vertices = None;
    for line in lines.by_ref() {
        if let Some(n) = line.strip_prefix("element vertex ") {
            vertices = Some(n.parse::<usize>().unwrap());
        }
        if line == "end_header" {
            break;
        }
    }
    let body: Vec<&str> = lines.collect();
    assert_eq!(vertices, Some(32 + 4));
    assert_eq!(body.len(), 36);
    let red = body.iter().filter(|l| l.ends_with(" 255 0 0")).count();
    assert_eq!(red, 4);
    for l in body {
        let f: Vec<&str> = l.split_whitespace().collect();
        assert_eq!(f.len(), 6);
        f[..3]
            .iter()
            .for_each(|t| assert!(t.parse::<f32>().is_ok()));
        f[3..].iter().for_each(|t| assert!(t.parse::<u8>().is_ok()));
    }
}

#[test]
fn detect_errors() {
    let tmp = TempDir::new().unwrap();
    let manifest = small_dataset(&tmp);
    let run = tmp.path().join("run");
    train_small(&manifest, &run, &["--epochs", "1"]);
    let ckpt = run.join("checkpoint.json");
    let input = manifest.parent().unwrap().join("test/box_0000.xyz");
    let out = tmp.path().join("det");

    let missing = kae(&[
        "detect",
        "--ckpt",
        p(&tmp.path().join("none.json")),
        "--in",
        p(&input),
        "--out",
        p(&out),
    ]);
    assert_eq!(code(&missing), 1);
    assert_eq!(
        code(&kae(&[
            "detect",
            "--ckpt",
            p(&ckpt),
            "--in",
            p(&input),
            "--mode",
            "hard",
            "--out",
            p(&out)
        ])),
        2
    );
    assert_eq!(
        code(&kae(&[
            "detect",
            "--ckpt",
            p(&ckpt),
            "--in",
            p(&input),
            "--k",
            "5",
            "--out",
            p(&out)
        ])),
        2
    );

    let short = tmp.path().join("short.xyz");
    fs::write(&short, "0 0 0\n1 0 0\n0 1 0\n").unwrap();
    assert_eq!(
        code(&kae(&[
            "detect",
            "--ckpt",
            p(&ckpt),
            "--in",
            p(&short),
            "--out",
            p(&out)
        ])),
        2
    );
}

#[test]
fn eval_reports_one_row_per_detector() {
    let tmp = TempDir::new().unwrap();
    let manifest = small_dataset(&tmp);
    let run = tmp.path().join("run");
    ok(&[
        "train",
        "--manifest",
        p(&manifest),
        "--k",
        "8",
        "--epochs",
        "2",
        "--seed",
        "1",
        "--out",
        p(&run),
    ]);
    let ckpt = run.join("checkpoint.json");

    let out = tmp.path().join("eval");
    let args = [
        "eval",
        "--manifest",
        p(&manifest),
        "--ckpt",
        p(&ckpt),
        "--detectors",
        "kae-soft,fps,random",
        "--k",
        "8",
        "--epochs",
        "50",
        "--out",
        p(&out),
    ];
    ok(&args);
    let report: Value =
        serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    let rows = report["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 3);
    assert!(rows
        .iter()
        .all(|r| r["classifier_hash"] == report["classifier_hash"]));
    assert!(out.join("report.txt").is_file());
    assert!(out.join("effective-config.json").is_file());

    let before = tree(&out);
    ok(&args);
    assert_eq!(before, tree(&out), "report not reproducible");

    let fps = tmp.path().join("fps");
    ok(&[
        "eval",
        "--manifest",
        p(&manifest),
        "--detectors",
        "fps",
        "--out",
        p(&fps),
    ]);
    let no_ckpt = kae(&[
        "eval",
        "--manifest",
        p(&manifest),
        "--detectors",
        "kae-soft",
        "--out",
        p(&fps),
    ]);
    assert_eq!(code(&no_ckpt), 2);
    assert_eq!(
        code(&kae(&[
            "eval",
            "--manifest",
            p(&manifest),
            "--detectors",
            "usip",
            "--out",
            p(&fps)
        ])),
        2
    );
}
