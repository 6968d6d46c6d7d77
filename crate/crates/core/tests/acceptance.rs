//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails. Run with `cargo test --test acceptance`.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use dialogue_sid::cli::{dialogue_weights, held_out_eer};
use dialogue_sid::corpus::{generate_corpus, Corpus, CorpusSpec, EpisodicBatchSpec};
use dialogue_sid::encoder::{EncoderHyper, EncoderParams, UtteranceFeatures};
use dialogue_sid::eval::{compute_eer, rejection_auc, TrialParams, TrialSet};
use dialogue_sid::losses::{compute_loss, cosine, EmbeddingBatch, LossKind, LossScaleParams};
use dialogue_sid::numeric::{check_gradient, Matrix, FD_STEP};
use dialogue_sid::rejection::{
    batch_objective, hard_weights, soft_weights, weighted_batch_loss, RejectionConfig, RejectionMode,
};
use dialogue_sid::rng::stream;
use dialogue_sid::trainer::{finetune, pretrain, TrainConfig, TrainMode, TrainOutcome};
use rand::Rng;
use rand_distr::StandardNormal;

const GRAD_TOL: f64 = 1e-4;
const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
const PRETRAIN_ITERS: u64 = 2000;
const FINETUNE_ITERS: u64 = 300;

struct Outcome {
    id: u32,
    name: &'static str,
    pass: bool,
    detail: String,
}

fn gaussian(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

fn batch_from(n: usize, m: usize, x: &[f64], d: usize) -> EmbeddingBatch {
    EmbeddingBatch::new(n, m, Matrix::from_vec(n * m, d, x.to_vec()).unwrap()).unwrap()
}

// ---------------------------------------------------------------- criterion 1

fn criterion_gradients() -> Outcome {
    let start = Instant::now();
    let mut worst: BTreeMap<&str, f64> = BTreeMap::new();
    let mut record = |k: &'static str, e: f64| {
        let w = worst.entry(k).or_insert(0.0);
        *w = w.max(e);
    };
    let d = 4;
    for seed in 0..20u64 {
        let mut rng = stream(seed, "acceptance-grad");
        let n = rng.random_range(2..=4);
        let m = rng.random_range(2..=3);
        let x = gaussian(n * m, d, &mut rng);
        let scale = LossScaleParams {
            w: rng.random_range(0.5..12.0),
            b: rng.random_range(-6.0..2.0),
        };
        let batch = EmbeddingBatch::new(n, m, x.clone()).unwrap();

        for (kind, label) in [(LossKind::Ava, "ava"), (LossKind::Ge2e, "ge2e"), (LossKind::Aproto, "aproto")] {
            let l = compute_loss(kind, &batch, &scale, None).unwrap();
            let f = |p: &[f64]| compute_loss(kind, &batch_from(n, m, p, d), &scale, None).unwrap().total();
            let r = check_gradient(f, x.as_slice(), l.grad.as_slice(), FD_STEP).unwrap();
            record(label, r.max_relative_error);
            if let Some(sg) = &l.scale_grads {
                let dw: f64 = sg.iter().map(|g| g.dw).sum();
                let db: f64 = sg.iter().map(|g| g.db).sum();
                let g = |p: &[f64]| {
                    compute_loss(kind, &batch, &LossScaleParams { w: p[0], b: p[1] }, None).unwrap().total()
                };
                let r = check_gradient(g, &[scale.w, scale.b], &[dw, db], FD_STEP).unwrap();
                record(if kind == LossKind::Ge2e { "ge2e (w,b)" } else { "aproto (w,b)" }, r.max_relative_error);
            }
        }

        // weighted sum with frozen weights
        let weights: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        let kind = [LossKind::Ava, LossKind::Ge2e, LossKind::Aproto][seed as usize % 3];
        let per = compute_loss(kind, &batch, &scale, None).unwrap();
        let wl = weighted_batch_loss(&per, &weights).unwrap();
        let f = |p: &[f64]| {
            let l = compute_loss(kind, &batch_from(n, m, p, d), &scale, None).unwrap();
            weighted_batch_loss(&l, &weights).unwrap().loss
        };
        let r = check_gradient(f, x.as_slice(), wl.embedding_grad.as_slice(), FD_STEP).unwrap();
        record("weighted sum", r.max_relative_error);

        // temperature
        let cfg = RejectionConfig {
            mode: RejectionMode::Soft,
            threshold: rng.random_range(-0.5..0.8),
            temperature: rng.random_range(0.5..15.0),
            temperature_learnable: true,
        };
        let obj = batch_objective(kind, &batch, &scale, &cfg).unwrap();
        let f = |p: &[f64]| {
            let c = RejectionConfig { temperature: p[0], ..cfg };
            batch_objective(kind, &batch, &scale, &c).unwrap().weighted.loss
        };
        let r = check_gradient(f, &[cfg.temperature], &[obj.report.temperature_grad], FD_STEP).unwrap();
        record("temperature", r.max_relative_error);

        // encoder
        let hyper = EncoderHyper {
            input_dim: 3,
            num_layers: 1 + (seed as usize % 2),
            hidden_dim: 4,
            embed_dim: 3,
        };
        let params = EncoderParams::init(hyper, &mut rng).unwrap();
        let utts: Vec<UtteranceFeatures> = (0..3)
            .map(|k| UtteranceFeatures::new(gaussian(2 + k, 3, &mut rng)).unwrap())
            .collect();
        let refs: Vec<&UtteranceFeatures> = utts.iter().collect();
        let upstream = gaussian(3, 3, &mut rng);
        let (_, caches) = params.forward_batch(&refs).unwrap();
        let analytic = params.backward_batch(&caches, &upstream).unwrap();
        let f = |p: &[f64]| {
            let q = EncoderParams::from_vec(hyper, p.to_vec()).unwrap();
            let e = q.encode_batch(&refs).unwrap();
            e.as_slice().iter().zip(upstream.as_slice()).map(|(a, b)| a * b).sum()
        };
        let r = check_gradient(f, params.as_slice(), &analytic, FD_STEP).unwrap();
        record("encoder", r.max_relative_error);
    }
    let secs = start.elapsed().as_secs_f64();
    let max = worst.values().cloned().fold(0.0, f64::max);
    let detail = worst.iter().map(|(k, v)| format!("{k} {v:.1e}")).collect::<Vec<_>>().join(", ");
    Outcome {
        id: 1,
        name: "gradient suite",
        pass: max < GRAD_TOL && secs < 60.0,
        detail: format!("20 instances each; worst relative error: {detail}; {secs:.1}s"),
    }
}

// ---------------------------------------------------------------- criterion 2

/// Pair-by-pair evaluation: the positive against the query's leave-one-out
/// centroid, then every utterance of every other dialogue.
fn brute_force_ava(x: &Matrix, n: usize, m: usize) -> Vec<(f64, usize)> {
    let row = |i: usize, j: usize| x.row(i * m + j);
    let mut out = Vec::new();
    for i in 0..n {
        for j in 0..m {
            let mut centroid = vec![0.0; x.cols()];
            for k in (0..m).filter(|&k| k != j) {
                for (c, v) in centroid.iter_mut().zip(row(i, k)) {
                    *c += v / (m - 1) as f64;
                }
            }
            let positive = cosine(row(i, j), &centroid);
            let mut terms = vec![positive];
            for k in (0..n).filter(|&k| k != i) {
                for l in 0..m {
                    terms.push(cosine(row(i, j), row(k, l)));
                }
            }
            let denom: f64 = terms.iter().map(|t| t.exp()).sum();
            out.push((-(positive.exp() / denom).ln(), terms.len()));
        }
    }
    out
}

fn criterion_ava_oracle() -> Outcome {
    let mut max_err: f64 = 0.0;
    let mut counts_ok = true;
    let mut cases = 0;
    for n in 2..=4 {
        for m in 2..=3 {
            for seed in 0..5u64 {
                let x = gaussian(n * m, 5, &mut stream(seed * 100 + (n * 10 + m) as u64, "acceptance-ava"));
                let loss = compute_loss(LossKind::Ava, &EmbeddingBatch::new(n, m, x.clone()).unwrap(), &LossScaleParams::default(), None)
                    .unwrap();
                for (idx, (value, terms)) in brute_force_ava(&x, n, m).into_iter().enumerate() {
                    max_err = max_err.max((loss.values.as_slice()[idx] - value).abs());
                    counts_ok &= terms == m * (n - 1) + 1 && loss.denominator_terms[idx] == terms;
                }
                cases += 1;
            }
        }
    }
    Outcome {
        id: 2,
        name: "AvA oracle equivalence",
        pass: max_err < 1e-10 && counts_ok,
        detail: format!("{cases} batches over N in 2..=4, M in 2..=3; max |diff| {max_err:.1e}; term counts exact: {counts_ok}"),
    }
}

// ---------------------------------------------------------------- criterion 3

/// Sweeps thresholds below all scores, between every pair of adjacent
/// distinct scores and above all scores; interpolates linearly where
/// FAR - FRR first becomes non-positive.
fn midpoint_eer(targets: &[f64], nontargets: &[f64]) -> f64 {
    let mut all: Vec<f64> = targets.iter().chain(nontargets).cloned().collect();
    all.sort_by(f64::total_cmp);
    all.dedup();
    let mut thresholds = vec![all[0] - 1.0];
    thresholds.extend(all.windows(2).map(|w| 0.5 * (w[0] + w[1])));
    thresholds.push(all[all.len() - 1] + 1.0);
    let rates = |th: f64| {
        let far = nontargets.iter().filter(|&&s| s >= th).count() as f64 / nontargets.len() as f64;
        let frr = targets.iter().filter(|&&s| s < th).count() as f64 / targets.len() as f64;
        (far, frr)
    };
    let mut prev = rates(thresholds[0]);
    if prev.0 - prev.1 <= 0.0 {
        return prev.0;
    }
    for &th in &thresholds[1..] {
        let cur = rates(th);
        let (d0, d1) = (prev.0 - prev.1, cur.0 - cur.1);
        if d1 <= 0.0 {
            if d1 == 0.0 {
                return cur.0;
            }
            let a = d0 / (d0 - d1);
            return prev.0 + a * (cur.0 - prev.0);
        }
        prev = cur;
    }
    unreachable!("the top threshold rejects everything")
}

fn criterion_eer_oracle() -> Outcome {
    let mut max_err: f64 = 0.0;
    for seed in 0..50u64 {
        let mut rng = stream(seed, "acceptance-eer");
        let nt = rng.random_range(1..=100);
        let nn = rng.random_range(1..=100);
        let shift: f64 = rng.random_range(0.0..2.0);
        // coarse rounding produces ties on purpose
        let draw = |rng: &mut dyn rand::RngCore, mu: f64| {
            let v: f64 = rand::Rng::sample(rng, StandardNormal);
            ((v + mu) * 8.0).round() / 8.0
        };
        let t: Vec<f64> = (0..nt).map(|_| draw(&mut rng, shift)).collect();
        let n: Vec<f64> = (0..nn).map(|_| draw(&mut rng, 0.0)).collect();
        let got = compute_eer(&TrialSet::from_scores(&t, &n)).unwrap().eer;
        max_err = max_err.max((got - midpoint_eer(&t, &n)).abs());
    }
    let separated = compute_eer(&TrialSet::from_scores(&[0.9, 0.8, 0.7], &[0.1, 0.2, 0.3])).unwrap().eer;
    let identical = compute_eer(&TrialSet::from_scores(&[0.1, 0.4, 0.6, 0.9], &[0.1, 0.4, 0.6, 0.9])).unwrap().eer;
    Outcome {
        id: 3,
        name: "EER oracle",
        pass: max_err < 1e-9 && separated == 0.0 && identical == 0.5,
        detail: format!("50 random sets, max |diff| {max_err:.1e}; separated {separated}; identical {identical}"),
    }
}

// ---------------------------------------------------------------- criterion 8

fn criterion_hard_soft() -> Outcome {
    let mut max_gap: f64 = 0.0;
    let mut checked = 0;
    for seed in 0..50u64 {
        let mut rng = stream(seed, "acceptance-hardsoft");
        let t = rng.random_range(-0.9..0.9);
        let c: Vec<f64> = (0..64).map(|_| rng.random_range(-1.0..1.0)).collect();
        let cfg = RejectionConfig {
            mode: RejectionMode::Soft,
            threshold: t,
            temperature: 1e5,
            temperature_learnable: false,
        };
        let soft = soft_weights(&c, &cfg, &vec![0.0; c.len()]).unwrap().weights;
        let (hard, _) = hard_weights(&c, &RejectionConfig { mode: RejectionMode::Hard, ..cfg }).unwrap();
        for i in (0..c.len()).filter(|&i| (c[i] - t).abs() > 1e-3) {
            max_gap = max_gap.max((soft[i] - hard[i]).abs());
            checked += 1;
        }
    }
    Outcome {
        id: 8,
        name: "hard/soft consistency",
        pass: max_gap < 1e-3,
        detail: format!("T = 1e5, {checked} dialogues away from the threshold, max |soft - hard| {max_gap:.1e}"),
    }
}

// ---------------------------------------------------------------- experiments

fn pretrain_corpus(seed: u64) -> Corpus {
    generate_corpus(&CorpusSpec { seed, ..Default::default() }).unwrap()
}

/// Fresh dialogues and sessions from the same speakers, used only for scoring.
fn test_corpus(seed: u64) -> Corpus {
    generate_corpus(&CorpusSpec {
        seed: 1000 + seed,
        world_seed: Some(seed),
        num_dialogues: 600,
        contamination_rate: 0.0,
        ..Default::default()
    })
    .unwrap()
}

fn pretrain_config(kind: LossKind, rejection: RejectionMode, n: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        mode: TrainMode::Pretrain,
        loss_kind: Some(kind),
        rejection: match rejection {
            RejectionMode::Off => RejectionConfig::off(),
            mode => RejectionConfig { mode, ..Default::default() },
        },
        batch: EpisodicBatchSpec { n, m: 2 },
        iterations: PRETRAIN_ITERS,
        eval_every: 250,
        seed,
        ..Default::default()
    }
}

struct Run {
    outcome: TrainOutcome,
    test_eer: f64,
    secs: f64,
}

struct Experiments {
    corpora: BTreeMap<u64, Corpus>,
    tests: BTreeMap<u64, Corpus>,
    runs: HashMap<(LossKind, bool, usize, u64), Run>,
}

impl Experiments {
    fn new() -> Self {
        Experiments {
            corpora: SEEDS.iter().map(|&s| (s, pretrain_corpus(s))).collect(),
            tests: SEEDS.iter().map(|&s| (s, test_corpus(s))).collect(),
            runs: HashMap::new(),
        }
    }

    fn run(&mut self, kind: LossKind, soft: bool, n: usize, seed: u64) -> &Run {
        let key = (kind, soft, n, seed);
        if !self.runs.contains_key(&key) {
            let mode = if soft { RejectionMode::Soft } else { RejectionMode::Off };
            let cfg = pretrain_config(kind, mode, n, seed);
            let start = Instant::now();
            let outcome = pretrain(&cfg, &self.corpora[&seed]).unwrap();
            let secs = start.elapsed().as_secs_f64();
            let test_eer = held_out_eer(&outcome.best.encoder, &self.tests[&seed], 0.0, &TrialParams::default()).unwrap();
            eprintln!(
                "  pretrain {kind:?} {} N={n} seed={seed}: test EER {test_eer:.4} ({secs:.0}s)",
                if soft { "soft" } else { "off" }
            );
            self.runs.insert(key, Run { outcome, test_eer, secs });
        }
        &self.runs[&key]
    }
}

fn criterion_rejection_auc(ex: &mut Experiments) -> Outcome {
    let mut aucs = Vec::new();
    let mut slowest: f64 = 0.0;
    for &seed in &SEEDS {
        let run = ex.run(LossKind::Ava, true, 32, seed);
        slowest = slowest.max(run.secs);
        let ck = run.outcome.best.clone();
        let corpus = &ex.corpora[&seed];
        let flags: Vec<bool> = corpus.dialogues.iter().map(|d| d.is_contaminated).collect();
        aucs.push(rejection_auc(&dialogue_weights(&ck, corpus).unwrap(), &flags).unwrap());
    }
    let mean = aucs.iter().sum::<f64>() / aucs.len() as f64;
    Outcome {
        id: 4,
        name: "rejection effectiveness",
        pass: mean >= 0.8 && slowest < 300.0,
        detail: format!(
            "AvA + soft rejection, p = 0.3: per-seed AUC [{}], mean {mean:.3}; slowest seed {slowest:.0}s",
            aucs.iter().map(|a| format!("{a:.3}")).collect::<Vec<_>>().join(", ")
        ),
    }
}

fn criterion_rejection_helps(ex: &mut Experiments) -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for kind in [LossKind::Ava, LossKind::Ge2e, LossKind::Aproto] {
        let mut wins = 0;
        for &seed in &SEEDS {
            let soft = ex.run(kind, true, 32, seed).test_eer;
            let off = ex.run(kind, false, 32, seed).test_eer;
            wins += (soft < off) as usize;
        }
        pass &= wins >= 4;
        parts.push(format!("{kind:?} {wins}/5"));
    }
    Outcome {
        id: 5,
        name: "rejection improves pretraining",
        pass,
        detail: format!("seeds where soft rejection beats no rejection: {}", parts.join(", ")),
    }
}

fn criterion_batch_size(ex: &mut Experiments) -> Outcome {
    let mean = |ex: &mut Experiments, n: usize| {
        SEEDS.iter().map(|&s| ex.run(LossKind::Ava, true, n, s).test_eer).sum::<f64>() / SEEDS.len() as f64
    };
    let small = mean(ex, 8);
    let large = mean(ex, 32);
    Outcome {
        id: 6,
        name: "batch-size trend",
        pass: large <= small,
        detail: format!("AvA + soft rejection mean test EER: N=8 {small:.4}, N=32 {large:.4}"),
    }
}

fn labeled_corpus(speakers: usize, seed: u64) -> Corpus {
    generate_corpus(&CorpusSpec {
        num_speakers: speakers,
        num_dialogues: 8 * speakers,
        contamination_rate: 0.0,
        seed: 2000 + seed,
        world_seed: Some(seed),
        ..Default::default()
    })
    .unwrap()
}

fn finetune_config(seed: u64) -> TrainConfig {
    TrainConfig {
        mode: TrainMode::Finetune,
        batch: EpisodicBatchSpec { n: 8, m: 2 },
        iterations: FINETUNE_ITERS,
        eval_every: 50,
        held_out_fraction: 0.2,
        seed,
        ..Default::default()
    }
}

fn criterion_finetune(ex: &mut Experiments) -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for speakers in [16, 64] {
        let mut wins = 0;
        let mut pairs = Vec::new();
        for &seed in &SEEDS {
            let init = ex.run(LossKind::Ava, true, 32, seed).outcome.best.encoder.clone();
            let labeled = labeled_corpus(speakers, seed);
            let cfg = finetune_config(seed);
            let tuned = finetune(&cfg, &labeled, Some(&init)).unwrap();
            let scratch = finetune(&cfg, &labeled, None).unwrap();
            let test = &ex.tests[&seed];
            let a = held_out_eer(&tuned.best.encoder, test, 0.0, &TrialParams::default()).unwrap();
            let b = held_out_eer(&scratch.best.encoder, test, 0.0, &TrialParams::default()).unwrap();
            wins += (a < b) as usize;
            pairs.push(format!("{a:.3}/{b:.3}"));
        }
        pass &= wins >= 4;
        parts.push(format!("{speakers} speakers {wins}/5 (pretrained/scratch EER {})", pairs.join(" ")));
    }
    Outcome {
        id: 7,
        name: "pretraining helps fine-tuning",
        pass,
        detail: parts.join("; "),
    }
}

// ---------------------------------------------------------------- criterion 9

fn cli(args: &[&str]) -> i32 {
    Command::new(env!("CARGO_BIN_EXE_dialogue-sid"))
        .args(args)
        .output()
        .expect("run CLI")
        .status
        .code()
        .unwrap_or(-1)
}

fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn criterion_determinism() -> Outcome {
    let root = tempfile::tempdir().unwrap();
    let dir = root.path();
    let s = |p: &Path| p.to_str().unwrap().to_string();
    let corpus = r#"{"num_speakers": 10, "num_dialogues": 80, "frames": 6, "seed": 3}"#;
    let model = r#"{"num_layers": 1, "hidden_dim": 8, "embed_dim": 6}"#;
    let trials = r#"{"targets_per_speaker": 10}"#;
    let write = |name: &str, body: String| {
        let p = dir.join(name);
        fs::write(&p, body).unwrap();
        p
    };
    let pre = write(
        "pre.json",
        format!(
            r#"{{"corpus": {corpus}, "eval": {trials}, "output_dir": "{}",
                "train": {{"batch": {{"n": 4, "m": 2}}, "iterations": 12, "eval_every": 5,
                           "encoder": {model}, "validation": {trials}, "diagnostics": true}}}}"#,
            s(&dir.join("pre"))
        ),
    );
    let grid = write(
        "grid.json",
        fs::read_to_string(&pre).unwrap().replace(&s(&dir.join("pre")), &s(&dir.join("grid"))),
    );
    let fine = write(
        "fine.json",
        format!(
            r#"{{"corpus": {corpus}, "eval": {trials}, "output_dir": "{}",
                "train": {{"mode": "finetune", "batch": {{"n": 3, "m": 2}}, "iterations": 8, "eval_every": 4,
                           "encoder": {model}, "validation": {trials}}}}}"#,
            s(&dir.join("fine"))
        ),
    );
    let corpus_out = dir.join("gen").join("corpus.jsonl");
    let report = dir.join("eval").join("report.json");
    let ckpt = dir.join("pre").join("best.ckpt.json");

    let first: Vec<(Vec<String>, Vec<String>)> = vec![
        (
            vec!["gen-corpus".into(), "--config".into(), s(&pre), "--out".into(), s(&corpus_out)],
            vec!["gen-corpus".into(), "--config".into(), s(&corpus_out.with_extension("config.json")), "--out".into(), s(&corpus_out)],
        ),
        (
            vec!["pretrain".into(), "--config".into(), s(&pre), "--corpus".into(), s(&corpus_out)],
            vec!["pretrain".into(), "--config".into(), s(&dir.join("pre").join("effective_config.json"))],
        ),
        (
            vec!["pretrain".into(), "--config".into(), s(&grid), "--batch-sizes".into(), "2,4".into()],
            vec!["pretrain".into(), "--config".into(), s(&dir.join("grid").join("effective_config.json")), "--batch-sizes".into(), "2,4".into()],
        ),
        (
            vec!["finetune".into(), "--config".into(), s(&fine), "--init".into(), s(&ckpt)],
            vec!["finetune".into(), "--config".into(), s(&dir.join("fine").join("effective_config.json")), "--init".into(), s(&ckpt)],
        ),
        (
            vec!["eval".into(), "--checkpoint".into(), s(&ckpt), "--corpus".into(), s(&corpus_out), "--config".into(), s(&pre), "--out".into(), s(&report), "--diagnose-rejection".into()],
            vec!["eval".into(), "--checkpoint".into(), s(&ckpt), "--config".into(), s(&report.with_extension("config.json")), "--out".into(), s(&report), "--diagnose-rejection".into()],
        ),
    ];
    let mut failures = Vec::new();
    let mut files = 0;
    for (cmd, rerun) in &first {
        let args: Vec<&str> = cmd.iter().map(String::as_str).collect();
        if cli(&args) != 0 {
            failures.push(format!("{} failed", cmd[0]));
            continue;
        }
        // the affected output tree, snapshotted before the rerun
        let out_dir = match cmd[0].as_str() {
            "gen-corpus" => dir.join("gen"),
            "eval" => dir.join("eval"),
            "finetune" => dir.join("fine"),
            _ => PathBuf::from(cmd[2].replace("pre.json", "pre").replace("grid.json", "grid")),
        };
        let before = snapshot(&out_dir);
        let args: Vec<&str> = rerun.iter().map(String::as_str).collect();
        if cli(&args) != 0 {
            failures.push(format!("{} rerun failed", cmd[0]));
            continue;
        }
        let after = snapshot(&out_dir);
        files += before.len();
        if before != after {
            let diff: Vec<String> = before
                .keys()
                .chain(after.keys())
                .filter(|k| before.get(*k) != after.get(*k))
                .map(|k| k.display().to_string())
                .collect();
            failures.push(format!("{} differs in {}", cmd[0], diff.join(", ")));
        }
    }
    let bad_config = write("bad.json", r#"{"corpus": {"contamination_rate": 3}}"#.into());
    let code = cli(&["gen-corpus", "--config", &s(&bad_config), "--out", &s(&dir.join("x.jsonl"))]);
    if code != 2 {
        failures.push(format!("invalid config exit code {code}"));
    }
    Outcome {
        id: 9,
        name: "CLI determinism",
        pass: failures.is_empty() && files > 0,
        detail: if failures.is_empty() {
            format!("5 commands rerun from echoed configs, {files} files byte-identical")
        } else {
            failures.join("; ")
        },
    }
}

fn main() {
    // libtest flags such as --nocapture are accepted and ignored
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    if !filter.is_empty() && !filter.iter().any(|f| "acceptance".contains(f.as_str())) {
        return;
    }
    let start = Instant::now();
    let mut results = vec![
        criterion_gradients(),
        criterion_ava_oracle(),
        criterion_eer_oracle(),
        criterion_hard_soft(),
        criterion_determinism(),
    ];
    let mut ex = Experiments::new();
    results.push(criterion_rejection_auc(&mut ex));
    results.push(criterion_rejection_helps(&mut ex));
    results.push(criterion_batch_size(&mut ex));
    results.push(criterion_finetune(&mut ex));
    results.sort_by_key(|r| r.id);

    println!();
    for r in &results {
        println!("{} [{}] {}: {}", if r.pass { "PASS" } else { "FAIL" }, r.id, r.name, r.detail);
    }
    let failed = results.iter().filter(|r| !r.pass).count();
    println!("acceptance: {} passed, {failed} failed in {:.0}s", results.len() - failed, start.elapsed().as_secs_f64());
    if failed > 0 {
        std::process::exit(1);
    }
}
