use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_planesweep"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn listing(dir: &Path) -> Vec<String> {
    let mut names: Vec<String> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    names
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn generate_writes_one_scene_directory() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path().join("d");
    ok(&["generate", "--spec", "planes", "--n-views", "3", "--seed", "7", "--out", p(&d)]);
    let names = listing(&d);
    assert_eq!(names.iter().filter(|n| n.ends_with(".pgm")).count(), 4);
    assert_eq!(names.iter().filter(|n| n.ends_with(".pfm")).count(), 1);
    assert_eq!(names.iter().filter(|n| n.ends_with(".txt")).count(), 1);
}

#[test]
fn generate_many_uses_scene_subdirectories() {
    let tmp = tempfile::tempdir().unwrap();
    ok(&["generate", "--spec", "sphere-field", "--seed", "3", "--count", "2", "--out", p(tmp.path())]);
    assert_eq!(listing(tmp.path()), ["scene_3", "scene_4"]);
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let out = run(&["generate", "--bogus"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    assert_eq!(run(&["nonsense"]).status.code(), Some(2));
    assert_eq!(run(&["generate", "--spec", "cubes", "--out", "x"]).status.code(), Some(2));
}

#[test]
fn runtime_failure_exits_one_with_diagnostic() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(&[
        "infer",
        "--checkpoint",
        p(&tmp.path().join("missing")),
        "--scene",
        p(tmp.path()),
        "--out",
        p(&tmp.path().join("o")),
    ]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("missing"), "{err}");
}

#[test]
fn train_infer_eval_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let scene = root.join("scene");
    let ckpt = root.join("ckpt");
    ok(&["generate", "--n-views", "3", "--seed", "2", "--out", p(&scene)]);

    let config = root.join("net.txt");
    fs::write(&config, "channels = 2\nlabels = 4\nreg_channels = 2\nsteps = 2\n").unwrap();
    ok(&["train", "--config", p(&config), "--scenes", "2", "--seed", "1", "--out", p(&ckpt)]);
    assert_eq!(listing(&ckpt), ["config.txt", "loss.csv", "params.bin"]);
    let curve = fs::read_to_string(ckpt.join("loss.csv")).unwrap();
    assert_eq!(curve.lines().count(), 3);
    assert!(curve.starts_with("step,loss,initial,refined\n"));

    for views in ["1", "3"] {
        let out = root.join(format!("pred{views}"));
        ok(&["infer", "--checkpoint", p(&ckpt), "--scene", p(&scene), "--views", views, "--out", p(&out)]);
        let meta = fs::read_to_string(out.join("meta.txt")).unwrap();
        assert!(meta.contains(&format!("views = {views}\n")), "{meta}");
        assert!(out.join("depth.pfm").is_file() && out.join("depth_initial.pfm").is_file());
        let csv = ok(&["eval", "--pred", p(&out), "--gt", p(&scene)]);
        assert_eq!(csv.lines().count(), 3, "{csv}");
    }
    let too_many = run(&["infer", "--checkpoint", p(&ckpt), "--scene", p(&scene), "--views", "4", "--out", p(root)]);
    assert_eq!(too_many.status.code(), Some(1));
}

#[test]
fn eval_of_ground_truth_against_itself() {
    let tmp = tempfile::tempdir().unwrap();
    ok(&["generate", "--seed", "5", "--out", p(tmp.path())]);
    let csv = ok(&["eval", "--pred", p(tmp.path()), "--gt", p(tmp.path())]);
    let mean = csv.lines().last().unwrap();
    assert_eq!(mean, "mean,0,0,0,0,0,1,1,1,1", "{csv}");
}

#[test]
fn config_with_unknown_key_fails() {
    let tmp = tempfile::tempdir().unwrap();
    let config = tmp.path().join("net.txt");
    fs::write(&config, "chanels = 2\n").unwrap();
    let out = run(&["train", "--config", p(&config), "--out", p(&tmp.path().join("c"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("chanels"));
}

#[test]
fn gradcheck_passes() {
    let out = ok(&["gradcheck", "--per-tensor", "1"]);
    assert!(out.contains("conv3d") && out.contains("pipeline"));
    assert!(!out.contains("FAIL"));
}

#[test]
fn ablate_prints_one_row_per_variant() {
    let tmp = tempfile::tempdir().unwrap();
    let csv = tmp.path().join("ablate.csv");
    let out = ok(&[
        "ablate",
        "--steps",
        "1",
        "--train-scenes",
        "1",
        "--test-scenes",
        "1",
        "--out",
        p(&csv),
    ]);
    for name in ["concat+agg+inverse", "abs-diff", "no-aggregation", "uniform-sampling"] {
        assert!(out.contains(name), "{out}");
    }
    assert_eq!(fs::read_to_string(csv).unwrap().lines().count(), 5);
}
