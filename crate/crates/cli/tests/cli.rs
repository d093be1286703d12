use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use serde_json::Value;
use tempfile::TempDir;

const FAST: &[&str] = &[
    "--set",
    "train.train_size=64",
    "--set",
    "train.val_size=32",
    "--batch-size",
    "16",
];

fn vimctl(cwd: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vimctl"))
        .current_dir(cwd)
        .env("VIM_OUTPUT_ROOT", cwd.join("runs"))
        .args(args)
        .output()
        .expect("spawn vimctl")
}

fn ok(cwd: &Path, args: &[&str]) -> String {
    let out = vimctl(cwd, args);
    assert!(
        out.status.success(),
        "vimctl {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn with_fast<'a>(args: &[&'a str]) -> Vec<&'a str> {
    let mut v = args.to_vec();
    v.extend_from_slice(FAST);
    v
}

/// Fails with `code` and reports a one-line JSON error of the matching kind.
fn fails(cwd: &Path, args: &[&str], code: i32, kind: &str) {
    let out = vimctl(cwd, args);
    assert_eq!(out.status.code(), Some(code), "vimctl {args:?}: {}", String::from_utf8_lossy(&out.stderr));
    let err = String::from_utf8(out.stderr).unwrap();
    let line = err.lines().last().expect("error line");
    let v: Value = serde_json::from_str(line).unwrap_or_else(|e| panic!("not JSON ({e}): {line}"));
    assert_eq!(v["error"], kind);
    assert_eq!(v["code"], code);
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

/// Backbone plus a two-module zoo, built once and shared by the tests.
struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn path(&self) -> &Path {
        self.dir.path()
    }
    fn backbone(&self) -> PathBuf {
        self.path().join("pre/backbone.vimt")
    }
    fn zoo(&self) -> PathBuf {
        self.path().join("zoo.vimz")
    }
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = TempDir::new().unwrap();
        let p = dir.path();
        ok(p, &with_fast(&["pretrain", "--steps", "20", "--run-dir", "pre"]));
        for (task, run) in [("cls-shape:v0", "mid0"), ("cls-shape:v1", "mid1")] {
            ok(
                p,
                &with_fast(&[
                    "train-mid", "--backbone", "pre/backbone.vimt", "--task", task, "--zoo", "zoo.vimz",
                    "--steps", "30", "--lr", "0.003", "--run-dir", run,
                ]),
            );
        }
        Fixture { dir }
    })
}

fn train_down(f: &Fixture, run: &str, extra: &[&str]) -> PathBuf {
    let backbone = f.backbone();
    let zoo = f.zoo();
    let mut args = vec![
        "train-down",
        "--backbone",
        backbone.to_str().unwrap(),
        "--zoo",
        zoo.to_str().unwrap(),
        "--task",
        "cls-shape:v2",
        "--steps",
        "20",
        "--run-dir",
        run,
    ];
    args.extend_from_slice(extra);
    ok(f.path(), &with_fast(&args));
    f.path().join(run)
}

fn loss_curve(run: &Path) -> Vec<Value> {
    std::fs::read_to_string(run.join("metrics.jsonl"))
        .unwrap()
        .lines()
        .map(|l| {
            let v: Value = serde_json::from_str(l).unwrap();
            serde_json::json!([v["step"], v["loss"], v["metric"]])
        })
        .collect()
}

#[test]
fn midstream_runs_fill_the_zoo() {
    let f = fixture();
    let rows: Value = serde_json::from_str(&ok(f.path(), &["zoo", "list", "--zoo", "zoo.vimz", "--json"])).unwrap();
    let rows = rows.as_array().unwrap();
    assert_eq!(rows.len(), 3);
    assert_eq!(rows[0]["kind"], "zero");
    assert_eq!(rows[1]["task"], "cls-shape:v0");
    assert_eq!(rows[2]["task"], "cls-shape:v1");
    for r in &rows[1..] {
        let m = r["midstream_metric"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&m));
    }

    let table = ok(f.path(), &["zoo", "list", "--zoo", "zoo.vimz"]);
    assert_eq!(table.lines().count(), 2 + 3);

    let summary = read_json(&f.path().join("mid0/summary.json"));
    assert_eq!(summary["frozen"], true);
    assert_eq!(summary["command"], "train-mid");
    assert!(f.path().join("mid0/module.vimz").exists());
    assert!(f.path().join("mid0/head.vimt").exists());

    let pre = read_json(&f.path().join("pre/summary.json"));
    assert!(pre.get("frozen").is_none());
    assert_eq!(std::fs::read_to_string(f.path().join("mid0/metrics.jsonl")).unwrap().lines().count(), 30);

    ok(f.path(), &["zoo", "validate", "--zoo", "zoo.vimz", "--backbone", "pre/backbone.vimt"]);
}

#[test]
fn downstream_eval_and_export_are_reproducible() {
    let f = fixture();
    let run = train_down(f, "down-reparam", &["--strategy", "reparam", "--topk", "2"]);
    for file in ["config.txt", "metrics.jsonl", "summary.json", "agg_state.vimt", "head.vimt", "zoo.vimz",
        "tuned_modules.vimt", "agg_weights.csv", "agg_weights.json", "eval.json"]
    {
        assert!(run.join(file).exists(), "missing {file}");
    }
    let summary = read_json(&run.join("summary.json"));
    assert_eq!(summary["frozen"], true);
    assert_eq!(summary["strategy"], "reparam");

    let stored = read_json(&run.join("eval.json"));
    let line = ok(f.path(), &["eval", "--run", "down-reparam", "--out", "re-eval"]);
    let fresh: Value = serde_json::from_str(line.trim()).unwrap();
    assert_eq!(fresh, stored);
    assert_eq!(fresh["metric"], summary["final_metric"]);

    let csv = std::fs::read(run.join("agg_weights.csv")).unwrap();
    ok(f.path(), &["export-weights", "--run", "down-reparam", "--out", "export"]);
    assert_eq!(std::fs::read(f.path().join("export/agg_weights.csv")).unwrap(), csv);
    assert_eq!(
        std::fs::read(f.path().join("export/agg_weights.json")).unwrap(),
        std::fs::read(run.join("agg_weights.json")).unwrap()
    );

    // tiny has 2 layers, so 4 sites; columns are the zero module plus two trained.
    let text = String::from_utf8(csv).unwrap();
    let lines: Vec<_> = text.lines().collect();
    assert_eq!(lines[0].split(',').count(), 2 + 3);
    assert_eq!(lines.len(), 1 + 4);
    for row in &lines[1..] {
        let w: Vec<f64> = row.split(',').skip(2).map(|x| x.parse().unwrap()).collect();
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-5, "{row}");
        assert!(w.iter().filter(|&&x| x > 0.0).count() <= 2, "{row}");
    }
}

#[test]
fn saved_config_reproduces_the_run() {
    let f = fixture();
    let first = train_down(f, "down-a", &["--weights", "vector", "--freeze-modules"]);
    let cfg = first.join("config.txt");
    let other = TempDir::new().unwrap();
    ok(other.path(), &["--config", cfg.to_str().unwrap(), "train-down", "--run-dir", "down-b"]);
    let second = other.path().join("down-b");

    assert_eq!(loss_curve(&first), loss_curve(&second));
    let a = read_json(&first.join("summary.json"));
    let b = read_json(&second.join("summary.json"));
    assert_eq!(a["final_metric"], b["final_metric"]);
    assert_eq!(a["fingerprint_after"], b["fingerprint_after"]);
    assert_eq!(
        std::fs::read(first.join("agg_weights.csv")).unwrap(),
        std::fs::read(second.join("agg_weights.csv")).unwrap()
    );
    assert_eq!(std::fs::read_to_string(&cfg).unwrap(), std::fs::read_to_string(second.join("config.txt")).unwrap());
}

#[test]
fn top1_export_selects_one_module_per_site() {
    let f = fixture();
    let run = train_down(f, "down-top1", &["--topk", "1"]);
    let text = std::fs::read_to_string(run.join("agg_weights.csv")).unwrap();
    for row in text.lines().skip(1) {
        let w: Vec<f64> = row.split(',').skip(2).map(|x| x.parse().unwrap()).collect();
        assert_eq!(w.iter().filter(|&&x| x > 0.0).count(), 1, "{row}");
        assert!(w.iter().any(|&x| x == 1.0), "{row}");
    }
}

#[test]
fn zoo_subset_and_add() {
    let f = fixture();
    let p = f.path();
    ok(p, &["zoo", "subset", "--zoo", "zoo.vimz", "--output", "first.vimz", "--first", "1"]);
    ok(p, &["zoo", "subset", "--zoo", "zoo.vimz", "--output", "v1.vimz", "--task", "cls-shape:v1"]);
    let count = |z: &str| -> usize {
        let v: Value = serde_json::from_str(&ok(p, &["zoo", "list", "--zoo", z, "--json"])).unwrap();
        v.as_array().unwrap().len()
    };
    assert_eq!(count("first.vimz"), 2);
    assert_eq!(count("v1.vimz"), 2);

    let first_bytes = std::fs::read(p.join("first.vimz")).unwrap();
    ok(p, &["zoo", "add", "--zoo", "first.vimz", "--from", "v1.vimz", "--report-only"]);
    assert_eq!(std::fs::read(p.join("first.vimz")).unwrap(), first_bytes);
    ok(p, &["zoo", "add", "--zoo", "first.vimz", "--from", "v1.vimz"]);
    assert_eq!(count("first.vimz"), 3);
    ok(p, &["zoo", "validate", "--zoo", "first.vimz"]);

    // Adding the same module again is a duplicate id.
    fails(p, &["zoo", "add", "--zoo", "first.vimz", "--from", "v1.vimz"], 3, "validation");
    fails(p, &["zoo", "subset", "--zoo", "zoo.vimz", "--output", "x.vimz"], 2, "usage");
}

#[test]
fn sweep_over_zoo_size_writes_a_table() {
    let f = fixture();
    let backbone = f.backbone();
    let zoo = f.zoo();
    let out = ok(
        f.path(),
        &with_fast(&[
            "sweep", "--axis", "zoo-size", "--values", "0,2", "--seeds", "2", "--steps", "10",
            "--backbone", backbone.to_str().unwrap(), "--zoo", zoo.to_str().unwrap(),
            "--task", "cls-shape:v2", "--run-dir", "sweep",
        ]),
    );
    assert!(out.trim_end().ends_with("sweep.csv"));
    let csv = std::fs::read_to_string(f.path().join("sweep/sweep.csv")).unwrap();
    let lines: Vec<_> = csv.lines().collect();
    assert_eq!(lines[0], "axis,value,seeds,mean,std,metrics");
    assert_eq!(lines.len(), 3);
    for (line, value) in lines[1..].iter().zip(["0", "2"]) {
        let cols: Vec<_> = line.split(',').collect();
        assert_eq!(cols[0], "zoo-size");
        assert_eq!(cols[1], value);
        assert_eq!(cols[2], "2");
        let mean: f64 = cols[3].parse().unwrap();
        assert!((0.0..=1.0).contains(&mean));
    }
    assert!(f.path().join("sweep/sweep.json").exists());
}

#[test]
fn error_exit_codes() {
    let f = fixture();
    let p = f.path();
    fails(p, &["train-down", "--no-such-flag"], 2, "usage");
    fails(p, &["--set", "train.stepz=3", "pretrain"], 2, "usage");
    fails(p, &["--set", "train.steps=many", "pretrain"], 2, "usage");
    fails(p, &["train-down", "--task", "nonsense:v0", "--zoo", "zoo.vimz"], 2, "usage");
    fails(p, &["zoo", "list", "--zoo", "missing.vimz"], 5, "io");
    fails(p, &["--config", "missing.txt", "pretrain"], 5, "io");

    // A pretrain run holds no aggregation state.
    fails(p, &["eval", "--run", "pre"], 3, "validation");

    let bytes = std::fs::read(f.zoo()).unwrap();
    std::fs::write(p.join("cut.vimz"), &bytes[..bytes.len() - 7]).unwrap();
    fails(p, &["zoo", "validate", "--zoo", "cut.vimz"], 3, "validation");
    let mut flipped = bytes.clone();
    let mid = flipped.len() / 2;
    flipped[mid] ^= 0x40;
    std::fs::write(p.join("flipped.vimz"), &flipped).unwrap();
    fails(p, &["zoo", "list", "--zoo", "flipped.vimz"], 3, "validation");

    // A zoo trained on one backbone does not bind to another.
    ok(p, &with_fast(&["pretrain", "--steps", "1", "--seed", "9", "--run-dir", "pre9"]));
    fails(p, &["zoo", "validate", "--zoo", "zoo.vimz", "--backbone", "pre9/backbone.vimt"], 3, "validation");
}

#[test]
fn diverging_training_exits_with_training_code() {
    let f = fixture();
    fails(
        f.path(),
        &with_fast(&[
            "--set", "train.optimizer=sgd", "train-mid", "--backbone", "pre/backbone.vimt", "--lr", "1e30",
            "--steps", "20", "--run-dir", "boom",
        ]),
        4,
        "training",
    );
}
