use std::path::Path;
use std::process::{Command, Output};

fn disc_grade(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_disc-grade"))
        .args(args)
        .env_remove("DISC_GRADE_DATA_DIR")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(o: Output) -> Output {
    assert!(o.status.success(), "exit {:?}\n{}", o.status.code(), stderr(&o));
    o
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let o = disc_grade(&["split", "--no-such-flag"]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(disc_grade(&["--help"]).status.code(), Some(0));
}

#[test]
fn missing_config_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.toml");
    let o = disc_grade(&[
        "pretrain",
        "--config",
        p(&missing),
        "--data-dir",
        p(dir.path()),
        "--split",
        p(&dir.path().join("split.csv")),
        "--out",
        p(&dir.path().join("o")),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("nope.toml"), "{}", stderr(&o));
}

#[test]
fn data_commands_and_stage_guard() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(disc_grade(&[
        "gen-phantom",
        "--patients",
        "6",
        "--seed",
        "3",
        "--image-size",
        "128",
        "--slices",
        "3",
        "--out",
        p(&data),
    ]));
    let manifest = data.join("manifest.csv");
    assert!(manifest.is_file() && data.join("run_manifest.json").is_file());

    let split = dir.path().join("split.csv");
    let o = ok(disc_grade(&[
        "split",
        "--manifest",
        p(&manifest),
        "--seed",
        "1",
        "--out",
        p(&split),
    ]));
    assert!(String::from_utf8_lossy(&o.stdout).contains("train:"));
    let rm: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("run_manifest.json")).unwrap()).unwrap();
    assert_eq!(rm["command"], "split");
    assert!(rm["inputs"]
        .as_object()
        .unwrap()
        .keys()
        .any(|k| k.ends_with("manifest.csv")));

    let rois = dir.path().join("rois");
    ok(disc_grade(&[
        "preprocess",
        "--manifest",
        p(&manifest),
        "--out",
        p(&rois),
    ]));
    let index = std::fs::read_to_string(rois.join("index.csv")).unwrap();
    assert_eq!(index.lines().count(), 1 + 30);

    let pre = dir.path().join("pre");
    ok(disc_grade(&[
        "pretrain",
        "--manifest",
        p(&manifest),
        "--split",
        p(&split),
        "--out",
        p(&pre),
        "--preset",
        "tiny",
        "--epochs",
        "1",
    ]));
    let o = disc_grade(&[
        "evaluate",
        "--manifest",
        p(&manifest),
        "--ckpt",
        p(&pre.join("best.safetensors")),
        "--split",
        p(&split),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("stage mismatch"), "{}", stderr(&o));
}

#[test]
fn run_all_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let out = dir.path().join(name);
        ok(disc_grade(&[
            "run-all",
            "--tiny",
            "--seed",
            "2",
            "--patients",
            "10",
            "--pretrain-epochs",
            "1",
            "--finetune-epochs",
            "1",
            "--roi-epochs",
            "1",
            "--out",
            p(&out),
        ]));
        out
    };
    let a = run("a");
    let b = run("b");
    let metrics = |d: &Path| std::fs::read_to_string(d.join("metrics.json")).unwrap();
    assert_eq!(metrics(&a), metrics(&b));
    for f in ["finetune_recall.csv", "confusion.csv", "finetune_loss.png"] {
        assert!(a.join("report").join(f).is_file(), "{f} missing");
    }
}
