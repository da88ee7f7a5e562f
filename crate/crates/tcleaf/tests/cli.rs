//! The `tcleaf` binary end to end: exit codes, artifacts and replay.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use tcleaf::cli::{BoxJson, ImageDetections};
use tcleaf::dataset::{load_split, Split};
use tcleaf::manifest::RunManifest;

struct Out {
    code: i32,
    stdout: String,
    stderr: String,
}

impl Out {
    fn run_dir(&self) -> PathBuf {
        let line = self.stdout.lines().find_map(|l| l.strip_prefix("run directory: ")).unwrap_or_else(|| panic!("no run directory in {:?}", self.stdout));
        PathBuf::from(line)
    }
}

fn tcleaf(out: &Path, args: &[&str], env: &[(&str, &str)]) -> Out {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_tcleaf"));
    cmd.arg("--out").arg(out).args(args).env_remove("TCLEAF_SEED");
    for (k, v) in env {
        cmd.env(k, v);
    }
    let o = cmd.output().expect("binary runs");
    Out { code: o.status.code().unwrap_or(-1), stdout: String::from_utf8_lossy(&o.stdout).into(), stderr: String::from_utf8_lossy(&o.stderr).into() }
}

fn ok(out: &Path, args: &[&str]) -> Out {
    let o = tcleaf(out, args, &[]);
    assert_eq!(o.code, 0, "{args:?}\nstdout:\n{}\nstderr:\n{}", o.stdout, o.stderr);
    o
}

const SMALL: &[&str] = &["--train-scenes", "4", "--val-scenes", "2", "--batch-size", "2"];

fn small_train(out: &Path, extra: &[&str], env: &[(&str, &str)]) -> Out {
    let mut args = vec!["train", "--epochs", "2"];
    args.extend_from_slice(SMALL);
    args.extend_from_slice(extra);
    let o = tcleaf(out, &args, env);
    assert_eq!(o.code, 0, "stdout:\n{}\nstderr:\n{}", o.stdout, o.stderr);
    o
}

#[test]
fn usage_errors_exit_2_and_help_exits_0() {
    let t = tempfile::tempdir().unwrap();
    assert_eq!(tcleaf(t.path(), &["--bogus"], &[]).code, 2);
    assert_eq!(tcleaf(t.path(), &["train", "--epochs", "many"], &[]).code, 2);
    assert_eq!(tcleaf(t.path(), &["--help"], &[]).code, 0);
    assert_eq!(tcleaf(t.path(), &["gradcheck", "--module", "no_such_op"], &[]).code, 2);
    assert_eq!(tcleaf(t.path(), &["flops", "--heads", "0"], &[]).code, 2);
    assert_eq!(tcleaf(t.path(), &["train", "--epochs", "1"], &[("TCLEAF_SEED", "abc")]).code, 2);
}

#[test]
fn missing_checkpoint_is_a_usage_error() {
    let t = tempfile::tempdir().unwrap();
    let missing = t.path().join("nope.ckpt");
    let m = missing.to_str().unwrap();
    for cmd in ["infer", "eval"] {
        let o = tcleaf(t.path(), &[cmd, "--checkpoint", m], &[]);
        assert_eq!(o.code, 2, "{cmd}: {}", o.stderr);
        assert!(o.stderr.contains("nope.ckpt"));
    }
}

#[test]
fn gradcheck_single_op_and_negative_control() {
    let t = tempfile::tempdir().unwrap();
    let o = ok(t.path(), &["gradcheck", "--module", "matmul"]);
    let rows: Vec<&str> = o.stdout.lines().filter(|l| l.ends_with("PASS") || l.ends_with("FAIL")).collect();
    assert_eq!(rows.len(), 1);
    assert!(rows[0].starts_with("matmul") && rows[0].ends_with("PASS"));
    assert!(o.run_dir().join("gradcheck.txt").exists());

    let o = tcleaf(t.path(), &["gradcheck", "--module", "negative_control"], &[]);
    assert_eq!(o.code, 1);
    assert!(o.stdout.contains("FAIL"));
}

#[test]
fn audit_shapes_passes_at_reduced_size() {
    let t = tempfile::tempdir().unwrap();
    let o = ok(t.path(), &["audit-shapes", "--image-size", "320"]);
    assert_eq!(o.stdout.lines().filter(|l| l.trim() == "PASS").count(), 1);
    assert!(o.run_dir().join("shapes.txt").exists());
    // A size the stride ladder cannot divide is rejected up front.
    assert_eq!(tcleaf(t.path(), &["audit-shapes", "--image-size", "100"], &[]).code, 2);
}

#[test]
fn flops_single_variant_and_ratio_verdict() {
    let t = tempfile::tempdir().unwrap();
    let o = ok(t.path(), &["flops", "--attn", "ea", "--heads", "1", "--len", "4", "--dim", "2", "--features", "3"]);
    assert!(o.stdout.starts_with("EA ops "));
    // The default configuration falls short of the ratio target and says so.
    let o = tcleaf(t.path(), &["flops"], &[]);
    assert_eq!(o.code, 1);
    assert!(o.stdout.contains("ratio MHSA/EA") && o.stdout.lines().any(|l| l == "FAIL"));
}

#[test]
fn eval_of_perfect_detections_is_one() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("data");
    ok(t.path(), &["synth", "--dest", data.to_str().unwrap(), "--train", "1", "--val", "4"]);
    let manifest = data.join("manifest.json");
    let val = load_split(&manifest, Split::Val, 3).unwrap();
    let perfect: Vec<ImageDetections> = val
        .iter()
        .map(|s| ImageDetections { image: s.source.clone(), detections: s.boxes.iter().map(|b| BoxJson { score: 1.0, ..BoxJson::from(b) }).collect() })
        .collect();
    let dets = t.path().join("dets.json");
    fs::write(&dets, serde_json::to_string(&perfect).unwrap()).unwrap();
    let o = ok(t.path(), &["eval", "--detections", dets.to_str().unwrap(), "--data", manifest.to_str().unwrap()]);
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(o.run_dir().join("report.json")).unwrap()).unwrap();
    assert_eq!(report["map50"], 1.0);
    assert_eq!(report["map50_95"], 1.0);

    let short = t.path().join("short.json");
    fs::write(&short, serde_json::to_string(&perfect[..2]).unwrap()).unwrap();
    assert_eq!(tcleaf(t.path(), &["eval", "--detections", short.to_str().unwrap(), "--data", manifest.to_str().unwrap()], &[]).code, 2);
}

#[test]
fn train_infer_eval_plotdata_and_replay() {
    let t = tempfile::tempdir().unwrap();
    let o = small_train(t.path(), &["--seed", "4"], &[]);
    let dir = o.run_dir();
    let log = fs::read_to_string(dir.join("log.csv")).unwrap();
    assert_eq!(log.lines().count(), 3, "{log}");
    assert!(dir.join("best.ckpt").exists() && dir.join("config.txt").exists());

    let ckpt = dir.join("best.ckpt");
    let c = ckpt.to_str().unwrap();
    let o = ok(t.path(), &["infer", "--checkpoint", c, "--val-scenes", "3"]);
    let dets: Vec<ImageDetections> = serde_json::from_str(&fs::read_to_string(o.run_dir().join("detections.json")).unwrap()).unwrap();
    assert_eq!(dets.len(), 3);
    let o = ok(t.path(), &["eval", "--checkpoint", c, "--val-scenes", "3", "--interp", "101"]);
    assert!(o.run_dir().join("report.csv").exists());

    let logp = dir.join("log.csv");
    let o = ok(t.path(), &["plotdata", "--log", logp.to_str().unwrap(), "--log", logp.to_str().unwrap()]);
    let curves = fs::read_to_string(o.run_dir().join("curves.csv")).unwrap();
    assert_eq!(curves.lines().count(), 5);
    assert!(curves.starts_with("run,epoch,map50,map50_95"));

    let before_ckpt = fs::read(&ckpt).unwrap();
    let manifest = dir.join("manifest.json");
    let o = ok(t.path(), &["replay", manifest.to_str().unwrap()]);
    assert_eq!(o.run_dir(), dir);
    assert_eq!(fs::read_to_string(dir.join("log.csv")).unwrap(), log);
    assert_eq!(fs::read(&ckpt).unwrap(), before_ckpt);
}

#[test]
fn seed_override_matches_the_flag() {
    let t = tempfile::tempdir().unwrap();
    let by_flag = small_train(t.path(), &["--seed", "5"], &[]).run_dir();
    let by_env = small_train(t.path(), &[], &[("TCLEAF_SEED", "5")]).run_dir();
    let m = RunManifest::read(&by_env.join("manifest.json")).unwrap();
    assert_eq!(m.seed, 5);
    // The override beats an explicit flag too.
    let overridden = small_train(t.path(), &["--seed", "9"], &[("TCLEAF_SEED", "5")]).run_dir();
    let log = |d: &Path| fs::read_to_string(d.join("log.csv")).unwrap();
    assert_eq!(log(&by_flag), log(&by_env));
    assert_eq!(log(&by_flag), log(&overridden));
}
