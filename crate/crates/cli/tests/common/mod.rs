#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

pub fn clonegrade(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_clonegrade"))
        .args(args)
        .env_remove("ARBITER_API_KEY")
        .output()
        .expect("binary runs")
}

pub fn ok(args: &[&str]) -> serde_json::Value {
    let out = clonegrade(args);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("summary line is JSON")
}

/// The error line a failing run prints on stderr.
pub fn error_line(out: &Output) -> serde_json::Value {
    let text = String::from_utf8_lossy(&out.stderr);
    let line = text.lines().last().expect("stderr has an error line");
    serde_json::from_str(line).expect("error line is JSON")
}

/// Runs every stage on the bundled fixture into `dir`, with the mock
/// arbiter. `arbitrate_extra` is appended to the arbitrate call.
pub fn run_fixture_pipeline(dir: &Path, arbitrate_extra: &[&str]) {
    let fx = fixtures();
    let s = |p: PathBuf| p.display().to_string();
    let config = s(fx.join("config.toml"));
    let d = |name: &str| s(dir.join(name));
    let c = ["--config", config.as_str()];
    let run = |rest: &[&str]| {
        let mut args: Vec<&str> = rest.to_vec();
        args.extend_from_slice(&c);
        ok(&args)
    };
    run(&[
        "curate",
        "--fragments",
        &s(fx.join("fragments.jsonl")),
        "--pairs",
        &s(fx.join("pairs.jsonl")),
        "--out",
        &d("curated"),
    ]);
    run(&["featurize", "--curated", &d("curated"), "--out", &d("features")]);
    run(&[
        "import-embeddings",
        "--input",
        &s(fx.join("embeddings.tfem")),
        "--dim",
        "16",
        "--out",
        &d("emb"),
    ]);
    run(&["train-prior", "--curated", &d("curated"), "--features", &d("features"), "--out", &d("prior")]);
    let emb = d("emb/embeddings.tfem");
    let inputs = [
        "--curated",
        &d("curated"),
        "--features",
        &d("features"),
        "--prior",
        &d("prior"),
        "--embeddings",
        &emb,
    ]
    .map(String::from);
    let inputs: Vec<&str> = inputs.iter().map(String::as_str).collect();
    let mut train = vec!["train-fusion", "--out"];
    let fusion_dir = d("fusion");
    train.push(&fusion_dir);
    train.extend(&inputs);
    run(&train);
    let ckpt = d("fusion/model.tfck");
    let pred_dir = d("pred");
    let mut predict = vec!["predict", "--checkpoint", &ckpt, "--out", &pred_dir];
    predict.extend(&inputs);
    run(&predict);
    let preds = d("pred/predictions.jsonl");
    let mock = s(fx.join("mock_verdicts.json"));
    let arb_dir = d("arb");
    let curated = d("curated");
    let mut arbitrate = vec![
        "arbitrate",
        "--predictions",
        &preds,
        "--curated",
        &curated,
        "--mock",
        &mock,
        "--out",
        &arb_dir,
    ];
    arbitrate.extend_from_slice(arbitrate_extra);
    run(&arbitrate);
    let decisions = d("arb/decisions.jsonl");
    let truths = d("curated/test.jsonl");
    let report = d("report.json");
    let csv = d("confusion.csv");
    run(&[
        "evaluate",
        "--decisions",
        &decisions,
        "--predictions",
        &preds,
        "--truths",
        &truths,
        "--out",
        &report,
        "--confusion-csv",
        &csv,
    ]);
}

/// Relative path -> contents for every file under `dir`.
pub fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                let rel = p.strip_prefix(root).unwrap().display().to_string();
                out.insert(rel, std::fs::read(&p).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}
