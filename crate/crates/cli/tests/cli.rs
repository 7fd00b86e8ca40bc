use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn latr(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_latr"))
        .current_dir(dir)
        .env_remove("LATR_OUTPUT_DIR")
        .args(["--deterministic", "--quiet"])
        .args(args)
        .output()
        .expect("spawn latr")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(o: Output) -> Output {
    assert_eq!(code(&o), 0, "stderr: {}", stderr(&o));
    o
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn usage_errors_exit_one_and_help_exits_zero() {
    let d = tempfile::tempdir().unwrap();
    assert_eq!(code(&latr(d.path(), &["bogus"])), 1);
    assert_eq!(code(&latr(d.path(), &["train", "--set", "no_equals_sign"])), 1);
    assert_eq!(code(&latr(d.path(), &["train", "--profile", "huge"])), 1);
    assert_eq!(code(&latr(d.path(), &["--help"])), 0);
}

#[test]
fn invalid_config_lists_every_problem() {
    let d = tempfile::tempdir().unwrap();
    let o = latr(d.path(), &["train", "--set", "head.lambda=-1", "--set", "training.batch_size=1"]);
    assert_eq!(code(&o), 1);
    let err = stderr(&o);
    assert!(err.contains("lambda") && err.contains("batch_size"), "{err}");
    fs::write(d.path().join("bad.toml"), "[head]\nunknown_key = 3\n").unwrap();
    assert_eq!(code(&latr(d.path(), &["train", "--config", "bad.toml"])), 1);
}

#[test]
fn config_prints_resolved_profile() {
    let d = tempfile::tempdir().unwrap();
    let o = ok(latr(d.path(), &["config", "--profile", "paper", "--set", "training.epochs=7"]));
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("embed_dim = 768"));
    assert!(text.contains("epochs = 7"));
    fs::write(d.path().join("c.toml"), format!("profile = \"paper\"\n{text}")).unwrap();
    let again = ok(latr(d.path(), &["config", "--config", "c.toml"]));
    assert_eq!(String::from_utf8(again.stdout).unwrap(), text);
}

#[test]
fn zero_epochs_writes_only_the_initial_checkpoint() {
    let d = tempfile::tempdir().unwrap();
    ok(latr(d.path(), &["train", "--set", "training.epochs=0", "--output", "run"]));
    let run = d.path().join("run");
    assert!(run.join("last.ckpt").is_file());
    assert!(!run.join("best.ckpt").exists());
    assert!(!run.join("metrics.jsonl").exists());
}

#[test]
fn training_is_deterministic_and_resumable() {
    let d = tempfile::tempdir().unwrap();
    let args = |out: &'static str| ["train", "--set", "training.epochs=4", "--set", "eval.every=2", "--output", out];
    ok(latr(d.path(), &args("a")));
    ok(latr(d.path(), &args("b")));
    let read = |p: &str| fs::read(d.path().join(p)).unwrap();
    assert_eq!(read("a/last.ckpt"), read("b/last.ckpt"));
    assert_eq!(read("a/metrics.jsonl"), read("b/metrics.jsonl"));
    let lines = String::from_utf8(read("a/metrics.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 4);
    let first: serde_json::Value = serde_json::from_str(lines.lines().next().unwrap()).unwrap();
    assert_eq!(first["unfrozen_block"], 2);
    assert!(d.path().join("a/best.ckpt").is_file());
    let summary = json(&d.path().join("a/summary.json"));
    assert_eq!(summary["epochs_completed"], 4);

    ok(latr(d.path(), &["train", "--set", "training.epochs=4", "--set", "eval.every=2", "--set", "training.epochs=2", "--output", "c"]));
    ok(latr(d.path(), &["train", "--resume", "c/last.ckpt", "--set", "training.epochs=4", "--output", "c"]));
    assert_eq!(read("a/last.ckpt"), read("c/last.ckpt"));
    assert_eq!(read("a/metrics.jsonl"), read("c/metrics.jsonl"));
}

#[test]
fn output_directory_from_environment() {
    let d = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_latr"))
        .current_dir(d.path())
        .env("LATR_OUTPUT_DIR", "from_env")
        .args(["--quiet", "train", "--set", "training.epochs=0"])
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(d.path().join("from_env/last.ckpt").is_file());
}

#[test]
fn eval_and_embed_pipeline() {
    let d = tempfile::tempdir().unwrap();
    ok(latr(d.path(), &["synth", "--out", "market"]));
    assert_eq!(fs::read_dir(d.path().join("market/bounding_box_train")).unwrap().count(), 96);
    ok(latr(d.path(), &["train", "--data", "market", "--set", "training.epochs=12", "--set", "eval.every=0", "--output", "run"]));

    let o = ok(latr(d.path(), &["eval", "--checkpoint", "run/last.ckpt", "--data", "market", "--output", "ev1"]));
    let table = String::from_utf8(o.stdout).unwrap();
    assert!(table.contains("rank-1") && table.contains("rank-5") && table.contains("rank-10") && table.contains("mAP"));
    ok(latr(d.path(), &["eval", "--checkpoint", "run/last.ckpt", "--data", "market", "--output", "ev2"]));
    let (a, b) = (json(&d.path().join("ev1/eval.json")), json(&d.path().join("ev2/eval.json")));
    assert_eq!(a, b);
    assert_eq!(a["schema_version"], 1);
    assert_eq!(a["embedding_dim"], 64);
    assert_eq!(a["queries"], 16);
    assert!(a["rank1"].as_f64().unwrap() >= 0.95, "{a}");
    assert_eq!(fs::read_to_string(d.path().join("ev1/eval.txt")).unwrap(), table);

    ok(latr(d.path(), &["embed", "--checkpoint", "run/last.ckpt", "--images", "market/query", "--out", "q1.emb"]));
    ok(latr(d.path(), &["embed", "--checkpoint", "run/last.ckpt", "--images", "market/query", "--out", "q2.emb"]));
    let q1 = fs::read(d.path().join("q1.emb")).unwrap();
    assert_eq!(q1, fs::read(d.path().join("q2.emb")).unwrap());
    assert_eq!(q1.len(), 24 + 16 * (8 + 64 * 4));
    ok(latr(d.path(), &["embed", "--checkpoint", "run/last.ckpt", "--images", "market/bounding_box_test", "--out", "g.emb"]));
    let o = ok(latr(d.path(), &[
        "eval", "--checkpoint", "run/last.ckpt", "--query-embeddings", "q1.emb", "--gallery-embeddings", "g.emb", "--output", "ev3",
    ]));
    assert_eq!(String::from_utf8(o.stdout).unwrap(), table);

    ok(latr(d.path(), &["embed", "--checkpoint", "run/last.ckpt", "--images", "market/query", "--out", "q.jsonl", "--format", "jsonl"]));
    assert_eq!(fs::read_to_string(d.path().join("q.jsonl")).unwrap().lines().count(), 16);

    fs::create_dir(d.path().join("empty")).unwrap();
    ok(latr(d.path(), &["embed", "--checkpoint", "run/last.ckpt", "--images", "empty", "--out", "e.emb"]));
    assert_eq!(fs::read(d.path().join("e.emb")).unwrap().len(), 24);

    ok(latr(d.path(), &["train", "--set", "training.epochs=0", "--set", "head.embed_dim=8", "--set", "backbone.embed_dim=8", "--set", "backbone.mlp_hidden_dim=16", "--output", "small"]));
    ok(latr(d.path(), &["embed", "--checkpoint", "small/last.ckpt", "--images", "market/bounding_box_test", "--out", "g8.emb"]));
    let o = latr(d.path(), &["eval", "--checkpoint", "run/last.ckpt", "--data", "market", "--gallery-embeddings", "g8.emb"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("dimension"), "{}", stderr(&o));

    for f in fs::read_dir(d.path().join("market/query")).unwrap() {
        fs::remove_file(f.unwrap().path()).unwrap();
    }
    let o = latr(d.path(), &["eval", "--checkpoint", "run/last.ckpt", "--data", "market", "--output", "ev4"]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));

    fs::write(d.path().join("junk.ckpt"), b"NOTACKPT").unwrap();
    assert_eq!(code(&latr(d.path(), &["eval", "--checkpoint", "junk.ckpt"])), 2);
    assert_eq!(code(&latr(d.path(), &["eval", "--checkpoint", "missing.ckpt"])), 2);
}

#[test]
fn paper_checkpoint_embeds_to_10752() {
    let d = tempfile::tempdir().unwrap();
    ok(latr(d.path(), &["train", "--profile", "paper", "--set", "training.epochs=0", "--output", "paper"]));
    ok(latr(d.path(), &["synth", "--set", "data.synthetic.num_identities=1", "--set", "head.num_classes=1", "--set", "data.synthetic.images_per_identity=6", "--out", "few"]));
    ok(latr(d.path(), &["embed", "--checkpoint", "paper/last.ckpt", "--images", "few/query", "--out", "p.emb"]));
    let bytes = fs::read(d.path().join("p.emb")).unwrap();
    assert_eq!(u32::from_le_bytes(bytes[16..20].try_into().unwrap()), 10752);
    assert_eq!(u32::from_le_bytes(bytes[20..24].try_into().unwrap()), 2);
}

#[test]
fn gradcheck_reports_and_fails_on_corruption() {
    let d = tempfile::tempdir().unwrap();
    let o = latr(d.path(), &["gradcheck", "--corrupt", "--no-end-to-end"]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(!String::from_utf8(o.stdout).unwrap().contains("PASS"));

    let o = ok(latr(d.path(), &["gradcheck", "--set", "backbone.num_blocks=1", "--report", "gc.json"]));
    let out = String::from_utf8(o.stdout).unwrap();
    assert!(out.contains("end_to_end.loss") && !out.contains("FAIL"));
    let report = json(&d.path().join("gc.json"));
    assert_eq!(report["passed"], true);
    assert_eq!(report["schema_version"], 1);
    assert!(report["checks"].as_array().unwrap().len() > 20);
}
