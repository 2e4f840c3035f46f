use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use rearrange_core::io::{read_scene_dir, scene_paths, Manifest};
use rearrange_core::synth::{evaluate_success, Variant};

fn rearrange(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_rearrange"));
    cmd.args(args);
    for (k, _) in std::env::vars().filter(|(k, _)| k.starts_with("RR_")) {
        cmd.env_remove(k);
    }
    cmd.envs(envs.iter().copied());
    cmd.output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = rearrange(args, &[]);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn generate_zero_scenes() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["generate", "--count", "0", "--out", p(dir.path())]);
    let manifest: Manifest = rearrange_core::io::read_json(&dir.path().join("manifest.json")).unwrap();
    assert!(manifest.scenes.is_empty());
    assert!(scene_paths(dir.path()).unwrap().is_empty());
}

#[test]
fn generate_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        ok(&["generate", "--count", "4", "--seed", "17", "--variant", "grouping-by-shape", "--out", p(out)]);
    }
    for name in ["scene_0.json", "scene_3.json", "manifest.json"] {
        assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap());
    }
}

#[test]
fn generated_uniform_scenes_pass_self_evaluation() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["generate", "--count", "100", "--variant", "uniform-spacing", "--out", p(dir.path())]);
    let scenes = read_scene_dir(dir.path()).unwrap();
    assert_eq!(scenes.len(), 100);
    for s in &scenes {
        assert!(evaluate_success(s, s, Variant::UniformSpacing).unwrap().success);
    }
}

#[test]
fn settings_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("gen.json");
    fs::write(&config, r#"{"count": 3, "seed": 5}"#).unwrap();

    let from_file = dir.path().join("file");
    ok(&["generate", "--config", p(&config), "--out", p(&from_file)]);
    assert_eq!(scene_paths(&from_file).unwrap().len(), 3);

    let from_env = dir.path().join("env");
    let out = rearrange(
        &["generate", "--config", p(&config), "--out", p(&from_env)],
        &[("RR_COUNT", "2")],
    );
    assert!(out.status.success());
    assert_eq!(scene_paths(&from_env).unwrap().len(), 2);

    let from_flag = dir.path().join("flag");
    let out = rearrange(
        &["generate", "--config", p(&config), "--count", "1", "--out", p(&from_flag)],
        &[("RR_COUNT", "2")],
    );
    assert!(out.status.success());
    assert_eq!(scene_paths(&from_flag).unwrap().len(), 1);
}

#[test]
fn unknown_config_keys_fail() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("gen.json");
    fs::write(&config, r#"{"count": 3, "colour": "red"}"#).unwrap();
    let out = rearrange(&["generate", "--config", p(&config), "--out", p(dir.path())], &[]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("colour"));
}

#[test]
fn eval_rejects_mismatched_sets() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&["generate", "--count", "3", "--out", p(&a)]);
    ok(&["generate", "--count", "2", "--out", p(&b)]);
    let out = rearrange(&["eval", "--pred", p(&a), "--gt", p(&b)], &[]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("mismatched"));
}

#[test]
fn perturb_render_and_score() {
    let dir = tempfile::tempdir().unwrap();
    let (clean, messy) = (dir.path().join("clean"), dir.path().join("messy"));
    ok(&["generate", "--count", "2", "--out", p(&clean)]);
    ok(&["perturb", "--input", p(&clean), "--out", p(&messy), "--sigma-t", "0.05", "--seed", "3"]);
    assert_eq!(scene_paths(&messy).unwrap().len(), 2);

    let svg = dir.path().join("s.svg");
    ok(&["render", "--input", p(&messy.join("scene_1.json")), "--out", p(&svg)]);
    let text = fs::read_to_string(&svg).unwrap();
    assert_eq!(text.matches("<rect").count(), 14);

    let csv = ok(&["score-regularity", "--input", p(&clean), "--samples", "20"]);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "scene,rate_x,rate_y,rate");
    assert_eq!(lines.len(), 4);
    assert!(lines[3].starts_with("mean,"));

    let curve = dir.path().join("curve.csv");
    ok(&[
        "score-regularity", "--input", p(&clean), "--samples", "20", "--curve", p(&curve), "--noise-levels", "0,0.2",
    ]);
    let text = fs::read_to_string(&curve).unwrap();
    let rows: Vec<f64> = text.lines().skip(1).map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert_eq!(text.lines().next(), Some("sigma,rate"));
    assert_eq!(rows.len(), 2);
    assert!(rows[0] > rows[1]);
}

#[test]
fn train_denoise_eval_render() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path();
    ok(&["generate", "--count", "2", "--seed", "1", "--out", p(&run.join("gt"))]);
    ok(&["perturb", "--input", p(&run.join("gt")), "--out", p(&run.join("messy")), "--seed", "2"]);
    ok(&[
        "train", "--variant", "symmetry-parallelism", "--scene-count", "8", "--steps", "3", "--batch-size", "2",
        "--log-every", "1", "--out", p(&run.join("model")),
    ]);
    let ckpt = run.join("model/ckpt_3.json");
    assert!(ckpt.exists());
    assert_eq!(fs::read_to_string(run.join("model/train_log.csv")).unwrap().lines().count(), 4);

    let single = run.join("single");
    let summary = ok(&[
        "denoise", "--input", p(&run.join("messy/scene_0.json")), "--checkpoint", p(&ckpt), "--inference", "grad",
        "--seed", "4", "--out", p(&single),
    ]);
    assert!(summary.contains("\"termination\""));
    let trajectory: Vec<serde_json::Value> =
        serde_json::from_str(&fs::read_to_string(single.join("trajectory.json")).unwrap()).unwrap();
    assert!(trajectory.len() >= 2);
    assert!(single.join("final.json").exists());

    let frames = run.join("frames");
    ok(&["render", "--input", p(&single.join("trajectory.json")), "--out", p(&frames)]);
    assert_eq!(fs::read_dir(&frames).unwrap().count(), trajectory.len());

    ok(&[
        "denoise", "--input", p(&run.join("messy")), "--checkpoint", p(&ckpt), "--variant", "direct", "--out",
        p(&run.join("pred")),
    ]);
    let csv = ok(&[
        "eval", "--pred", p(&run.join("pred")), "--initial", p(&run.join("messy")), "--gt", p(&run.join("gt")),
        "--variant", "symmetry-parallelism", "--samples", "10",
    ]);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(
        lines[0],
        "scene,success,distance_moved,emd_to_gt,boundary_violation,relation_rate_n2,relation_rate_n3"
    );
    assert_eq!(lines.len(), 4);
    assert!(lines[1].split(',').all(|f| !f.is_empty()));
}
