use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use pick_kie::autodiff::DType;
use pick_kie::data::{load_corpus, save_predictions};
use pick_kie::model::checkpoint_precision;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_pick-kie"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tiny_cfg() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/tiny.cfg")
}

const SMALL: &[&str] = &[
    "--d-model", "8", "--d-hidden", "8", "--blocks", "1", "--heads", "2", "--d-ff", "16",
    "--conv-channels", "2", "--t-cap", "8", "--epochs", "1", "--lr", "1e-3",
];

fn gen(dir: &Path, mode: &str, count: &str, seed: &str) {
    let o = run(&["gen-synth", "--mode", mode, "--count", count, "--seed", seed, "--out", path(dir)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

fn dir_contents(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap())
        })
        .collect();
    v.sort();
    v
}

#[test]
fn gen_synth_is_reproducible() {
    let t = tempfile::tempdir().unwrap();
    let (a, b, c) = (t.path().join("a"), t.path().join("b"), t.path().join("c"));
    gen(&a, "fixed", "5", "7");
    gen(&b, "fixed", "5", "7");
    gen(&c, "fixed", "5", "8");
    let da = dir_contents(&a);
    assert_eq!(da.len(), 5);
    assert_eq!(da, dir_contents(&b));
    assert_ne!(da, dir_contents(&c));
    assert_eq!(load_corpus(&a).unwrap().len(), 5);
}

#[test]
fn gradcheck_passes_on_the_tiny_config() {
    let o = run(&["gradcheck", "--config", path(&tiny_cfg())]);
    let out = String::from_utf8(o.stdout.clone()).unwrap();
    assert_eq!(code(&o), 0, "{out}{}", stderr(&o));
    let last = out.lines().last().unwrap();
    let worst: f64 = last.split_whitespace().nth(3).unwrap().parse().unwrap();
    assert!(worst <= 1e-4, "{last}");
    assert!(out.contains("graph.adjacency_w") && out.contains("graph.relation_w") && out.contains("decoder.crf.transitions"));
}

#[test]
fn failed_gradcheck_is_a_numeric_failure() {
    let o = run(&["gradcheck", "--tolerance", "0", "--max-entries", "2"]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
}

#[test]
fn gold_predictions_score_one() {
    let t = tempfile::tempdir().unwrap();
    let (data, pred) = (t.path().join("data"), t.path().join("pred"));
    gen(&data, "variable", "6", "3");
    fs::create_dir_all(&pred).unwrap();
    for d in load_corpus(&data).unwrap() {
        save_predictions(&d.id, &d.gold_spans(), pred.join(format!("{}.json", d.id))).unwrap();
    }
    let o = run(&["eval", "--data", path(&data), "--predictions", path(&pred)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(report["format"], "pick-kie/1");
    assert_eq!(report["overall_micro"]["mEF"], 1.0);
    assert_eq!(report["per_entity"]["CASH"]["mEF"], 1.0);
}

#[test]
fn train_eval_predict_round_trip() {
    let t = tempfile::tempdir().unwrap();
    let (data, run_dir) = (t.path().join("data"), t.path().join("run"));
    gen(&data, "fixed", "6", "1");
    let mut args = vec!["train", "--data", path(&data), "--out", path(&run_dir)];
    args.extend_from_slice(SMALL);
    let o = run(&args);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let log = fs::read_to_string(run_dir.join("metrics.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 1);
    let line: serde_json::Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    assert!(line["loss"].as_f64().unwrap().is_finite());
    assert!(line["val_mEF"].is_number());

    let ck = run_dir.join("model.ckpt");
    let o = run(&["eval", "--data", path(&data), "--checkpoint", path(&ck)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(report["overall_micro"]["mEF"].as_f64().unwrap() >= 0.0);

    let doc = fs::read_dir(&data).unwrap().next().unwrap().unwrap().path();
    let o = run(&["predict", "--checkpoint", path(&ck), "--data", path(&doc)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let pred: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(pred["format"], "pick-kie/1");
    assert!(pred["predictions"].is_array());

    let out_dir = t.path().join("pred");
    let o = run(&["predict", "--checkpoint", path(&ck), "--data", path(&data), "--out", path(&out_dir)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(fs::read_dir(&out_dir).unwrap().count(), 6);
}

#[test]
fn precision_comes_from_the_environment() {
    let t = tempfile::tempdir().unwrap();
    let (data, run_dir) = (t.path().join("data"), t.path().join("run"));
    gen(&data, "fixed", "4", "2");
    let mut args = vec!["train", "--data", path(&data), "--out", path(&run_dir)];
    args.extend_from_slice(SMALL);
    let o = bin().args(&args).env("PICK_KIE_PRECISION", "f32").output().unwrap();
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let bytes = fs::read(run_dir.join("model.ckpt")).unwrap();
    assert_eq!(checkpoint_precision(&bytes).unwrap(), DType::F32);

    let o = bin().args(&args).env("PICK_KIE_PRECISION", "f16").output().unwrap();
    assert_eq!(code(&o), 1);
}

#[test]
fn layer_sweep_prints_a_table() {
    let t = tempfile::tempdir().unwrap();
    let (data, test, run_dir) = (t.path().join("data"), t.path().join("test"), t.path().join("run"));
    gen(&data, "variable", "4", "5");
    gen(&test, "variable", "2", "6");
    let mut args = vec![
        "train", "--data", path(&data), "--test", path(&test), "--out", path(&run_dir), "--layers", "1,2",
        "--ablate", "image",
    ];
    args.extend_from_slice(SMALL);
    let o = run(&args);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let table = String::from_utf8(o.stdout).unwrap();
    assert_eq!(table.lines().count(), 3, "{table}");
    assert!(table.lines().next().unwrap().contains("layers"));
    let rows: serde_json::Value = serde_json::from_str(&fs::read_to_string(run_dir.join("sweep.json")).unwrap()).unwrap();
    assert_eq!(rows.as_array().unwrap().len(), 2);
}

#[test]
fn exit_codes_classify_failures() {
    let t = tempfile::tempdir().unwrap();
    assert_eq!(code(&run(&["train", "--bogus"])), 1);
    assert_eq!(code(&run(&[])), 1);
    assert_eq!(code(&run(&["--help"])), 0);
    let missing = t.path().join("missing");
    assert_eq!(code(&run(&["train", "--data", path(&missing), "--out", path(t.path())])), 2);
    assert_eq!(code(&run(&["train", "--data", path(t.path()), "--lr", "abc"])), 1);

    let bad = t.path().join("bad");
    fs::create_dir_all(&bad).unwrap();
    fs::write(bad.join("x.json"), "{\"format\": \"pick-kie/1\"").unwrap();
    assert_eq!(code(&run(&["train", "--data", path(&bad), "--out", path(t.path())])), 2);

    let ck = t.path().join("junk.ckpt");
    fs::write(&ck, b"not a checkpoint").unwrap();
    let empty = t.path().join("empty");
    fs::create_dir_all(&empty).unwrap();
    assert_eq!(code(&run(&["eval", "--data", path(&empty), "--checkpoint", path(&ck)])), 2);
}
