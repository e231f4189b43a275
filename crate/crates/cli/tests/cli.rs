use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use maskrec::tokenizer::SidCatalog;

const TINY: &str = r#"
seed = 7

[data.synthetic]
n_users = 80
n_items = 24
n_clusters = 4
seq_len = 6

[tokenizer]
m = 2
c = 4
iters = 20

[model]
embed_dim = 16
heads = 2
mlp_hidden = 32

[train]
steps = 6
batch_size = 8
eval_every = 3
eval_users = 10

[eval]
max_users = 12
"#;

fn maskrec(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_maskrec"))
        .current_dir(dir)
        .env("MADREC_THREADS", "2")
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let o = maskrec(dir, args);
    assert!(
        o.status.success(),
        "{args:?} failed:\n{}",
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stdout).unwrap()
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
    ok(dir.path(), &["synth", "--config", "tiny.toml", "--out", "data"]);
    dir
}

fn reports(dir: &Path) -> Vec<String> {
    let mut v: Vec<String> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .filter(|n| n.starts_with("report_") && n.ends_with(".json"))
        .collect();
    v.sort();
    v
}

#[test]
fn tokenize_writes_loadable_catalog() {
    let dir = setup();
    let d = dir.path();
    let out = ok(d, &["tokenize", "--config", "tiny.toml", "--embeddings", "data/embeddings.bin", "--out", "tok"]);
    assert!(out.contains("layer"), "stats table printed: {out}");
    let cat = SidCatalog::read(&d.join("tok/catalog.sid")).unwrap();
    assert_eq!((cat.m(), cat.c(), cat.item_count()), (2, 4, 24));
    let again = SidCatalog::from_bytes(&cat.to_bytes()).unwrap();
    assert_eq!(again.tokens(), cat.tokens());
    assert!(d.join("tok/codebooks.bin").exists());
    assert!(d.join("tok/config.toml").exists());
    let inputs = fs::read_to_string(d.join("tok/inputs.json")).unwrap();
    assert!(inputs.contains("embeddings.bin"));

    ok(d, &["tokenize", "--config", "tiny.toml", "--embeddings", "data/embeddings.bin", "--out", "rnd", "--randomize"]);
    let rnd = SidCatalog::read(&d.join("rnd/catalog.sid")).unwrap();
    assert_ne!(rnd.tokens(), cat.tokens());
}

#[test]
fn missing_embeddings_fail_with_path() {
    let dir = tempfile::tempdir().unwrap();
    let o = maskrec(dir.path(), &["tokenize", "--embeddings", "absent/emb.bin", "--out", "tok"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("absent/emb.bin"));
}

#[test]
fn unknown_config_key_rejected() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.toml"), "[train]\nlearning_rate = 0.1\n").unwrap();
    let o = maskrec(dir.path(), &["synth", "--config", "bad.toml", "--out", "x"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("learning_rate"));
}

#[test]
fn train_and_sweep_evaluations() {
    let dir = setup();
    let d = dir.path();
    ok(d, &["tokenize", "--config", "tiny.toml", "--embeddings", "data/embeddings.bin", "--out", "tok"]);
    ok(d, &["train", "--config", "tiny.toml", "--split", "data/split.json", "--catalog", "tok/catalog.sid", "--out", "run"]);
    for f in ["best.ckpt", "last.ckpt", "loss.csv", "catalog.sid", "config.toml", "inputs.json"] {
        assert!(d.join("run").join(f).exists(), "{f} missing");
    }
    let resolved = fs::read_to_string(d.join("run/config.toml")).unwrap();
    assert!(resolved.contains("lr = 0.005"), "defaults echoed");

    ok(
        d,
        &["eval", "--config", "tiny.toml", "--checkpoint", "run/best.ckpt", "--split", "data/split.json", "--strategy", "random,greedy,left_to_right", "--out", "ev_s"],
    );
    assert_eq!(
        reports(&d.join("ev_s")),
        ["report_greedy.json", "report_left_to_right.json", "report_random.json"]
    );

    ok(
        d,
        &["eval", "--config", "tiny.toml", "--checkpoint", "run/best.ckpt", "--split", "data/split.json", "--nfe", "1,2,3", "--out", "ev_n"],
    );
    assert_eq!(reports(&d.join("ev_n")).len(), 3);
    let curve = fs::read_to_string(d.join("ev_n/nfe_curve.csv")).unwrap();
    assert_eq!(curve.lines().count(), 4);

    ok(
        d,
        &["infer", "--config", "tiny.toml", "--checkpoint", "run/best.ckpt", "--split", "data/split.json", "--top-k", "5", "--out", "inf"],
    );
    let preds = fs::read_to_string(d.join("inf/predictions.jsonl")).unwrap();
    assert_eq!(preds.lines().count(), 12);
}

#[test]
fn nfe_sweep_on_five_slot_tuples() {
    let dir = setup();
    let d = dir.path();
    ok(
        d,
        &["tokenize", "--config", "tiny.toml", "--set", "tokenizer.m=4", "--set", "tokenizer.c=2", "--embeddings", "data/embeddings.bin", "--out", "tok"],
    );
    ok(
        d,
        &["train", "--config", "tiny.toml", "--split", "data/split.json", "--catalog", "tok/catalog.sid", "--out", "run"],
    );
    ok(
        d,
        &["eval", "--config", "tiny.toml", "--checkpoint", "run/best.ckpt", "--split", "data/split.json", "--nfe", "2,3,4,5", "--out", "ev"],
    );
    assert_eq!(
        reports(&d.join("ev")),
        ["report_greedy_nfe2.json", "report_greedy_nfe3.json", "report_greedy_nfe4.json", "report_greedy_nfe5.json"]
    );
}

#[test]
fn item_id_mode_and_unified_dense_eval() {
    let dir = setup();
    let d = dir.path();
    ok(d, &["train", "--config", "tiny.toml", "--split", "data/split.json", "--item-ids", "--out", "ids"]);
    let cat = SidCatalog::read(&d.join("ids/catalog.sid")).unwrap();
    assert_eq!((cat.m(), cat.c()), (1, 24));

    ok(d, &["tokenize", "--config", "tiny.toml", "--embeddings", "data/embeddings.bin", "--out", "tok"]);
    ok(
        d,
        &["train", "--config", "tiny.toml", "--set", "dense.enabled=true", "--set", "dense.rank=4", "--set", "dense.hidden=8", "--split", "data/split.json", "--catalog", "tok/catalog.sid", "--embeddings", "data/embeddings.bin", "--out", "dense"],
    );
    ok(
        d,
        &["eval", "--config", "tiny.toml", "--set", "dense.enabled=true", "--checkpoint", "dense/best.ckpt", "--split", "data/split.json", "--embeddings", "data/embeddings.bin", "--dense-mode", "unified", "--out", "ev"],
    );
    let users = fs::read_to_string(d.join("ev/users_greedy.csv")).unwrap();
    assert_eq!(users.lines().count(), 13);
}

#[test]
fn sparsify_keeps_evaluation_data() {
    let dir = setup();
    let d = dir.path();
    ok(d, &["sparsify", "--split", "data/split.json", "--fraction", "0.5", "--out", "sp"]);
    let a = maskrec::data::EvalSplit::read(&d.join("data/split.json")).unwrap();
    let b = maskrec::data::EvalSplit::read(&d.join("sp/split.json")).unwrap();
    for (x, y) in a.users.iter().zip(&b.users) {
        assert_eq!(x.test_context, y.test_context);
        assert_eq!(x.valid_targets, y.valid_targets);
        assert!(y.train.len() <= x.train.len());
    }
}
