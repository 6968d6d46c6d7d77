use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dialogue_sid::cli::{BatchGridSummary, FinetuneReport};
use dialogue_sid::corpus::Corpus;
use dialogue_sid::encoder::Checkpoint;
use dialogue_sid::eval::EvalReport;

const CORPUS: &str = r#"{"num_speakers": 10, "num_dialogues": 60, "frames": 5, "seed": 4}"#;
const MODEL: &str = r#"{"num_layers": 1, "hidden_dim": 8, "embed_dim": 6}"#;
const TRIALS: &str = r#"{"targets_per_speaker": 10}"#;

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dialogue-sid")).args(args).output().unwrap()
}

fn ok(args: &[&str]) {
    let out = bin(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn config(dir: &Path, name: &str, corpus: &str, train: &str) -> PathBuf {
    let path = dir.join(name);
    let out = dir.join(name.trim_end_matches(".json"));
    fs::write(
        &path,
        format!(
            r#"{{"corpus": {corpus}, "eval": {TRIALS}, "output_dir": "{}",
                "train": {{"encoder": {MODEL}, "validation": {TRIALS}, {train}}}}}"#,
            p(&out)
        ),
    )
    .unwrap();
    path
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

#[test]
fn gen_corpus_clean_and_repeatable() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = r#"{"num_speakers": 10, "num_dialogues": 40, "frames": 3, "contamination_rate": 0.0, "seed": 1}"#;
    let cfg = config(dir.path(), "c.json", corpus, r#""iterations": 1"#);
    let (a, b) = (dir.path().join("a.jsonl"), dir.path().join("b.jsonl"));
    ok(&["gen-corpus", "--config", p(&cfg), "--out", p(&a)]);
    ok(&["gen-corpus", "--config", p(&cfg), "--out", p(&b)]);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let c = Corpus::load(&a).unwrap();
    assert_eq!(c.len(), 40);
    assert_eq!(c.contaminated_count(), 0);
    assert!(a.with_extension("config.json").exists());
}

#[test]
fn invalid_config_exits_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, r#"{"train": {"iterations": 5, "unknown_field": 1}}"#).unwrap();
    let out = bin(&["pretrain", "--config", p(&cfg)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!out.stderr.is_empty());
    let out = bin(&["eval", "--checkpoint", p(&dir.path().join("missing.json")), "--out", p(&dir.path().join("r.json"))]);
    assert_eq!(out.status.code(), Some(2));
    let missing = dir.path().join("missing.jsonl");
    let out = bin(&["eval", "--checkpoint", p(&cfg), "--corpus", p(&missing), "--out", p(&dir.path().join("r.json"))]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn pretrain_writes_one_row_per_step() {
    let dir = tempfile::tempdir().unwrap();
    let off = config(
        dir.path(),
        "off.json",
        CORPUS,
        r#""rejection": {"mode": "off"}, "batch": {"n": 4, "m": 2}, "iterations": 10, "eval_every": 5"#,
    );
    ok(&["pretrain", "--config", p(&off)]);
    let out = dir.path().join("off");
    let rows = csv_rows(&out.join("metrics.csv"));
    assert_eq!(rows.len(), 10);
    assert!(rows.iter().all(|r| r[4].parse::<f64>().unwrap() == 0.0));
    for f in ["best.ckpt.json", "last.ckpt.json", "effective_config.json"] {
        assert!(out.join(f).exists(), "{f}");
    }

    let soft = config(
        dir.path(),
        "soft.json",
        CORPUS,
        r#""rejection": {"mode": "soft", "temperature_learnable": true}, "batch": {"n": 4, "m": 2}, "iterations": 10, "eval_every": 5"#,
    );
    ok(&["pretrain", "--config", p(&soft)]);
    let rows = csv_rows(&dir.path().join("soft").join("metrics.csv"));
    let temps: Vec<&str> = rows.iter().map(|r| r[5].as_str()).collect();
    assert!(temps.windows(2).any(|w| w[0] != w[1]), "{temps:?}");
}

#[test]
fn batch_grid_summary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "g.json", CORPUS, r#""batch": {"n": 4, "m": 2}, "iterations": 6, "eval_every": 3"#);
    ok(&["pretrain", "--config", p(&cfg), "--batch-sizes", "6,2,4"]);
    let out = dir.path().join("g");
    let summary: BatchGridSummary = serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary.baseline_batch_size, 2);
    assert_eq!(summary.runs.iter().map(|r| r.batch_size).collect::<Vec<_>>(), vec![2, 4, 6]);
    assert_eq!(summary.runs[0].relative_improvement, Some(0.0));
    for n in [2, 4, 6] {
        assert!(out.join(format!("batch_{n}")).join("best.ckpt.json").exists());
    }
}

#[test]
fn finetune_with_and_without_init() {
    let dir = tempfile::tempdir().unwrap();
    let pre = config(dir.path(), "pre.json", CORPUS, r#""batch": {"n": 4, "m": 2}, "iterations": 6, "eval_every": 3"#);
    ok(&["pretrain", "--config", p(&pre)]);
    let init = dir.path().join("pre").join("best.ckpt.json");

    let zero = config(dir.path(), "zero.json", CORPUS, r#""mode": "finetune", "batch": {"n": 3, "m": 2}, "iterations": 0"#);
    ok(&["finetune", "--config", p(&zero), "--init", p(&init)]);
    let a = Checkpoint::load(&init).unwrap();
    let b = Checkpoint::load(&dir.path().join("zero").join("best.ckpt.json")).unwrap();
    assert_eq!(a.encoder, b.encoder);

    let ft = config(dir.path(), "ft.json", CORPUS, r#""mode": "finetune", "batch": {"n": 3, "m": 2}, "iterations": 6, "eval_every": 3"#);
    ok(&["finetune", "--config", p(&ft), "--init", p(&init)]);
    let out = dir.path().join("ft");
    let report: FinetuneReport = serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert!((0.0..=1.0).contains(&report.pretrained_eer));
    assert!((0.0..=1.0).contains(&report.scratch_eer));
    assert!(out.join("scratch").join("best.ckpt.json").exists());
    assert_eq!(csv_rows(&out.join("metrics.csv")).len(), 6);

    let scratch = config(dir.path(), "sc.json", CORPUS, r#""mode": "finetune", "batch": {"n": 3, "m": 2}, "iterations": 4, "eval_every": 2"#);
    ok(&["finetune", "--config", p(&scratch)]);
    assert!(dir.path().join("sc").join("best.ckpt.json").exists());
    assert!(!dir.path().join("sc").join("report.json").exists());
}

#[test]
fn eval_report_and_diagnostics() {
    let dir = tempfile::tempdir().unwrap();
    let pre = config(dir.path(), "pre.json", CORPUS, r#""batch": {"n": 4, "m": 2}, "iterations": 4, "eval_every": 2"#);
    ok(&["pretrain", "--config", p(&pre)]);
    let ck = dir.path().join("pre").join("best.ckpt.json");
    let (plain, diag) = (dir.path().join("plain.json"), dir.path().join("diag.json"));
    ok(&["eval", "--checkpoint", p(&ck), "--config", p(&pre), "--out", p(&plain)]);
    ok(&["eval", "--checkpoint", p(&ck), "--config", p(&pre), "--out", p(&diag), "--diagnose-rejection"]);
    let read = |f: &Path| -> EvalReport { serde_json::from_str(&fs::read_to_string(f).unwrap()).unwrap() };
    let (a, b) = (read(&plain), read(&diag));
    assert!(a.rejection_auc.is_none());
    assert!(b.rejection_auc.is_some());
    assert_eq!(a.eer, b.eer);

    let again = dir.path().join("again.json");
    ok(&["eval", "--checkpoint", p(&ck), "--config", p(&pre), "--out", p(&again)]);
    assert_eq!(fs::read(&plain).unwrap(), fs::read(&again).unwrap());
}
