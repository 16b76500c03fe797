use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_sketchprompt"));
    c.env("SOURCE_DATE_EPOCH", "0").env("RUST_LOG", "warn");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn sketchprompt")
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

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const TOY: &[&str] = &[
    "--set", "weights=toy",
    "--set", "image_size=56",
    "--set", "patch_size=8",
    "--set", "num_layers=2",
    "--set", "embed_dim=64",
    "--set", "num_heads=4",
    "--set", "text_dim=32",
    "--set", "text_width=32",
    "--set", "text_layers=1",
    "--set", "text_heads=2",
    "--set", "text_context=16",
    "--set", "text_vocab=512",
    "--set", "batch_size=6",
    "--set", "lr_norm=1e-3",
    "--set", "lr_module=1e-2",
    "--set", "max_steps=8",
    "--set", "checkpoint_every=4",
];

struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn new() -> Self {
        let dir = TempDir::new().unwrap();
        let f = Self { dir };
        ok(&["synth-data", "--out", s(&f.path("data")), "--categories", "3", "--instances", "4"]);
        ok(&["prepare-splits", "--data", s(&f.path("data")), "--unseen", "1", "--out", s(&f.path("split"))]);
        f
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn train(&self, out: &str, extra: &[&str]) -> Output {
        let data = self.path("data");
        let split = self.path("split/split.json");
        let out = self.path(out);
        let mut args = vec!["train", "--data", s(&data), "--split", s(&split), "--out", s(&out)];
        args.extend_from_slice(TOY);
        args.extend_from_slice(extra);
        run(&args)
    }
}

#[test]
fn pipeline_from_synthetic_data_to_report() {
    let f = Fixture::new();
    let (data, split) = (f.path("data"), f.path("split/split.json"));
    ok(&["select-support", "--data", s(&data), "--split", s(&split), "--out", s(&f.path("sup"))]);
    assert!(f.train("run", &[]).status.success());
    assert!(f.path("run/final.ckpt").exists());
    assert!(f.path("run/checkpoints/step-000004.ckpt").exists());
    let log = std::fs::read_to_string(f.path("run/train.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 8);

    let ckpt = f.path("run/final.ckpt");
    let support = f.path("sup/support.json");
    ok(&[
        "embed", "--checkpoint", s(&ckpt), "--data", s(&data), "--split", s(&split),
        "--support", s(&support), "--out", s(&f.path("emb")),
    ]);
    let (q, g) = (f.path("emb/sketches.bin"), f.path("emb/photos.bin"));
    let text = ok(&["eval-fg", "--embeddings", s(&q), s(&g), "--split", s(&split)]);
    let report: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(report["protocol"], "fine_grained");
    let acc1 = report["aggregate"]["acc@1"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc1));
    assert_eq!(report["timestamp"], "1970-01-01T00:00:00Z");

    // Features straight from the checkpoint give the same numbers.
    let direct = ok(&[
        "eval-fg", "--checkpoint", s(&ckpt), "--data", s(&data), "--split", s(&split),
        "--support", s(&support),
    ]);
    let direct: serde_json::Value = serde_json::from_str(&direct).unwrap();
    assert_eq!(direct["aggregate"], report["aggregate"]);

    let table = ok(&["eval-cat", "--embeddings", s(&q), s(&g), "--split", s(&split), "--table"]);
    assert!(table.lines().next().unwrap().contains("map@200"));

    let check = ok(&["oracle-check", "--embeddings", s(&q), s(&g), "--split", s(&split)]);
    assert!(check.contains("\"agree\": true"));

    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(f.path("emb/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "embed");
    assert_eq!(manifest["artifacts"].as_array().unwrap().len(), 2);

    let img = data.join("photo").join(split_unseen(&split)).join("i0.png");
    ok(&[
        "visualize", "--checkpoint", s(&ckpt), "--image", s(&img), "--category", &split_unseen(&split),
        "--data", s(&data), "--out", s(&f.path("vis")),
    ]);
    let csv = std::fs::read_to_string(f.path("vis/similarity.csv")).unwrap();
    assert_eq!(csv.lines().count(), 7);
    assert!(csv.lines().all(|l| l.split(',').count() == 7));
    assert!(f.path("vis/similarity_prompt2.csv").exists());
    assert!(f.path("vis/overlay.png").exists());
}

fn split_unseen(split: &Path) -> String {
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(split).unwrap()).unwrap();
    v["unseen"][0].as_str().unwrap().to_string()
}

#[test]
fn training_twice_and_resuming_give_identical_checkpoints() {
    let f = Fixture::new();
    assert!(f.train("a", &[]).status.success());
    assert!(f.train("b", &[]).status.success());
    let a = std::fs::read(f.path("a/final.ckpt")).unwrap();
    assert_eq!(a, std::fs::read(f.path("b/final.ckpt")).unwrap());

    let mid = f.path("a/checkpoints/step-000004.ckpt");
    assert!(f.train("c", &["--resume", s(&mid)]).status.success());
    assert_eq!(a, std::fs::read(f.path("c/final.ckpt")).unwrap());
}

#[test]
fn mismatched_hashes_are_refused_unless_forced() {
    let f = Fixture::new();
    let (data, split) = (f.path("data"), f.path("split/split.json"));
    assert!(f.train("a", &[]).status.success());
    assert!(f.train("b", &["--seed", "5"]).status.success());
    for run_dir in ["a", "b"] {
        let ckpt = f.path(&format!("{run_dir}/final.ckpt"));
        ok(&[
            "embed", "--checkpoint", s(&ckpt), "--data", s(&data), "--split", s(&split),
            "--out", s(&f.path(&format!("emb-{run_dir}"))),
        ]);
    }
    let q = f.path("emb-a/sketches.bin");
    let g = f.path("emb-b/photos.bin");
    let refused = run(&["oracle-check", "--embeddings", s(&q), s(&g), "--split", s(&split)]);
    assert_eq!(refused.status.code(), Some(1));
    let forced = run(&["oracle-check", "--embeddings", s(&q), s(&g), "--split", s(&split), "--force"]);
    assert!(forced.status.success());
}

#[test]
fn param_audit_reports_side_way_count() {
    let text = ok(&["param-audit", "--mode", "sideway", "--ls", "16"]);
    let line = text.lines().find(|l| l.starts_with("side_way")).unwrap();
    assert_eq!(line.split_whitespace().nth(1), Some("589824"));
    let direct = ok(&["param-audit", "--mode", "direct"]);
    assert!(!direct.contains("side_way"));
}

#[test]
fn dry_run_writes_nothing() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("never");
    let text = ok(&["synth-data", "--out", s(&out), "--dry-run"]);
    assert!(text.contains("# resolved configuration"));
    assert!(!out.exists());
}

#[test]
fn exit_codes() {
    assert_eq!(run(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(run(&["param-audit", "--set", "bogus=1"]).status.code(), Some(1));
    assert_eq!(run(&["oracle-check"]).status.code(), Some(1));
    let missing = run(&["eval-fg", "--embeddings", "/nonexistent/q.bin", "/nonexistent/g.bin", "--split", "/nonexistent/s.json"]);
    assert_eq!(missing.status.code(), Some(2));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}

#[test]
fn oracle_check_random_mode_agrees() {
    let text = ok(&["oracle-check", "--random", "40", "--seed", "9"]);
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(v["agree"], true);
    assert_eq!(v["trials"], 40);
}
