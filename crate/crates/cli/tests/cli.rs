use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use taiyan::human_eval::{key_from_csv, unshuffle, AnswerSet, Bundle};
use taiyan::text::strip_marks;
use tempfile::TempDir;

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn taiyan<A: AsRef<std::ffi::OsStr> + std::fmt::Debug>(args: &[A]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_taiyan"))
        .args(args)
        .env("TAIYAN_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn ok<A: AsRef<std::ffi::OsStr> + std::fmt::Debug>(args: &[A]) -> String {
    let out = taiyan(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code<A: AsRef<std::ffi::OsStr> + std::fmt::Debug>(args: &[A]) -> i32 {
    taiyan(args).status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn json(text: &str) -> serde_json::Value {
    serde_json::from_str(text).unwrap()
}

fn close(v: &serde_json::Value, want: f64) {
    let got = v.as_f64().unwrap_or_else(|| panic!("not a number: {v}"));
    assert!((got - want).abs() < 1e-12, "{got} vs {want}");
}

/// A 1-layer model trained for a few steps on the fixture text.
fn tiny_model(dir: &Path) -> (PathBuf, PathBuf) {
    let vocab = dir.join("vocab.txt");
    let config = dir.join("run.json");
    let ckpt = dir.join("model.tyck");
    fs::write(
        &config,
        r#"{"model": {"n_layers": 1, "d_model": 16, "n_heads": 2, "max_seq_len": 64},
            "train": {"total_steps": 4, "seq_len": 16, "batch_size": 2}}"#,
    )
    .unwrap();
    let pre = fixture("pretrain.txt");
    let tasks = fixture("tasks.jsonl");
    ok(&["vocab", "--corpus", s(&pre), s(&tasks), "--out", s(&vocab)]);
    ok(&[
        "train",
        "--mode",
        "pretrain",
        "--corpus",
        s(&pre),
        "--vocab",
        s(&vocab),
        "--config",
        s(&config),
        "--out",
        s(&ckpt),
    ]);
    (ckpt, vocab)
}

#[test]
fn train_writes_checkpoint_log_and_manifest() {
    let dir = TempDir::new().unwrap();
    let (ckpt, _) = tiny_model(dir.path());
    let log = fs::read_to_string(dir.path().join("model.tyck.loss.csv")).unwrap();
    assert_eq!(log.lines().next(), Some("step,lr,loss"));
    assert_eq!(log.lines().count(), 5);
    let m = json(&fs::read_to_string(dir.path().join("model.tyck.manifest.json")).unwrap());
    assert_eq!(m["seed"], 0);
    assert_eq!(m["config"]["train"]["total_steps"], 4);
    assert_eq!(m["config"]["model"]["n_layers"], 1);
    let sha = taiyan::pipeline::sha256_file(&ckpt).unwrap();
    assert_eq!(m["checkpoint_sha256"], sha.as_str());
}

#[test]
fn sft_training_reports_rejections() {
    let dir = TempDir::new().unwrap();
    let (ckpt, vocab) = tiny_model(dir.path());
    let config = dir.path().join("sft.json");
    fs::write(
        &config,
        format!(
            r#"{{"init": {:?}, "train": {{"total_steps": 2, "seq_len": 64, "batch_size": 2}}}}"#,
            s(&ckpt)
        ),
    )
    .unwrap();
    let out = dir.path().join("sft.tyck");
    ok(&[
        "train",
        "--mode",
        "sft",
        "--corpus",
        s(&fixture("tasks.jsonl")),
        "--vocab",
        s(&vocab),
        "--config",
        s(&config),
        "--out",
        s(&out),
    ]);
    let rejections = fs::read_to_string(dir.path().join("sft.tyck.rejections.csv")).unwrap();
    assert_eq!(rejections.lines().count(), 2);
    assert!(rejections.lines().nth(1).unwrap().starts_with("4,"));
    assert!(out.exists());
}

#[test]
fn punctuate_reconstructs_every_line() {
    let dir = TempDir::new().unwrap();
    let (ckpt, vocab) = tiny_model(dir.path());
    let input = dir.path().join("in.txt");
    let lines = ["學而時習之不亦說乎", "", "人不知而不慍", "龘龘"];
    fs::write(&input, lines.join("\n") + "\n").unwrap();
    let out = ok(&["punctuate", "--ckpt", s(&ckpt), "--vocab", s(&vocab), "--in", s(&input)]);
    let got: Vec<&str> = out.lines().collect();
    assert_eq!(got.len(), lines.len());
    for (g, want) in got.iter().zip(lines) {
        assert_eq!(strip_marks(g), want);
    }
    assert_eq!(got[1], "");

    let gold = dir.path().join("gold.txt");
    fs::write(&gold, "學而時習之，不亦說乎？\n\n人不知而不慍。\n龘龘。\n").unwrap();
    let flags = dir.path().join("flags.csv");
    ok(&[
        "punctuate",
        "--ckpt",
        s(&ckpt),
        "--vocab",
        s(&vocab),
        "--in",
        s(&input),
        "--flags",
        s(&gold),
        "--flags-out",
        s(&flags),
    ]);
    let flags = fs::read_to_string(flags).unwrap();
    assert_eq!(flags.lines().next(), Some("document,boundary,kind,left,right"));
}

#[test]
fn infer_runs_each_task() {
    let dir = TempDir::new().unwrap();
    let (ckpt, vocab) = tiny_model(dir.path());
    let base = ["infer", "--ckpt", s(&ckpt), "--vocab", s(&vocab)];
    let run = |extra: &[&'static str]| -> Vec<String> { base.iter().chain(extra).map(|a| a.to_string()).collect() };
    let out = ok(&run(&["--task", "punctuation", "--text", "學而時習之"]));
    assert_eq!(strip_marks(out.trim_end()), "學而時習之");
    ok(&run(&["--task", "translation", "--text", "學而時習之"]));
    ok(&run(&[
        "--task",
        "word-explanation",
        "--text",
        "學而時習之",
        "--word",
        "習",
    ]));
    assert_eq!(
        code(&run(&[
            "--task",
            "word-explanation",
            "--text",
            "學而時習之",
            "--word",
            "樂"
        ])),
        2
    );
    assert_eq!(code(&run(&["--task", "word-explanation", "--text", "學而時習之"])), 2);
}

#[test]
fn exit_codes() {
    let dir = TempDir::new().unwrap();
    let missing = dir.path().join("missing.txt");
    let vocab = dir.path().join("v.txt");
    assert_eq!(code(&["vocab", "--corpus", s(&missing), "--out", s(&vocab)]), 3);

    let bad = dir.path().join("bad.tyck");
    fs::write(&bad, b"not a checkpoint").unwrap();
    ok(&["vocab", "--corpus", s(&fixture("pretrain.txt")), "--out", s(&vocab)]);
    assert_eq!(
        code(&[
            "infer",
            "--ckpt",
            s(&bad),
            "--vocab",
            s(&vocab),
            "--task",
            "translation",
            "--text",
            "學"
        ]),
        2
    );

    let ratings = dir.path().join("r.csv");
    fs::write(&ratings, "item,system,evaluator,score\nq1,a,e1,7\n").unwrap();
    assert_eq!(
        code(&[
            "human-eval",
            "aggregate",
            "--ratings",
            s(&ratings),
            "--scale",
            "five-point"
        ]),
        2
    );

    let gold = fixture("suite/punct_gold.txt");
    let short = dir.path().join("short.txt");
    fs::write(&short, "州城西南隅，有黃鶴樓者。\n").unwrap();
    assert_eq!(code(&["eval", "seg-punct", "--gold", s(&gold), "--pred", s(&short)]), 2);

    let config = dir.path().join("run.json");
    fs::write(&config, r#"{"train": {"learning_rate": 1}}"#).unwrap();
    let out = dir.path().join("m.tyck");
    let pre = fixture("pretrain.txt");
    assert_eq!(
        code(&[
            "train",
            "--mode",
            "pretrain",
            "--corpus",
            s(&pre),
            "--vocab",
            s(&vocab),
            "--config",
            s(&config),
            "--out",
            s(&out)
        ]),
        2
    );
}

// Hand-computed values for the suite fixture:
// seg-punct "rough" drops the first comma and swaps the second for 。, so
// segmentation is 3/3 precise and 3/4 recalled (F1 6/7), punctuation 2/3 and
// 2/4 (F1 4/7). Allusion: 2 of 3 detections right; labels tp 2, fp 1, fn 1.
// Explanation: taiyan 1,1,0.5,1 and gpt4 0.5,0,1,0.5. Translation "long"
// adds one char to a 4-char reference: BLEU 100 * 0.2^(1/4), chrF 100 * 163/223.
#[test]
fn eval_suite_matches_hand_computed_report() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("report");
    let r = json(&ok(&[
        "eval",
        "suite",
        "--config",
        s(&fixture("suite/suite.json")),
        "--out",
        s(&out),
    ]));
    let rough = &r["seg_punct"][1];
    assert_eq!(rough["system"], "rough");
    close(&rough["seg_p"], 1.0);
    close(&rough["seg_r"], 0.75);
    close(&rough["seg_f1"], 6.0 / 7.0);
    close(&rough["punct_p"], 2.0 / 3.0);
    close(&rough["punct_r"], 0.5);
    close(&rough["punct_f1"], 4.0 / 7.0);
    close(&rough["text_error_rate"], 0.0);
    close(&r["seg_punct"][0]["punct_f1"], 1.0);
    close(&r["allusion"][0]["detection_acc"], 2.0 / 3.0);
    close(&r["allusion"][0]["ident_f1"], 2.0 / 3.0);
    assert_eq!(r["explanation"][0]["system"], "taiyan");
    close(&r["explanation"][0]["accuracy"], 0.875);
    close(&r["explanation"][0]["strict_accuracy"], 0.75);
    close(&r["explanation"][1]["accuracy"], 0.5);
    close(&r["explanation"][1]["strict_accuracy"], 0.25);
    close(&r["translate"][0]["bleu"], 100.0);
    close(&r["translate"][0]["chrf"], 100.0);
    close(&r["translate"][1]["bleu"], 100.0 * 0.2f64.powf(0.25));
    close(&r["translate"][1]["chrf"], 100.0 * 163.0 / 223.0);
    for f in [
        "seg_punct.csv",
        "allusion.csv",
        "explanation.csv",
        "translate.csv",
        "summary.json",
    ] {
        assert!(out.join(f).exists(), "{f}");
    }
    let csv = fs::read_to_string(out.join("explanation.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("system,accuracy,strict_accuracy"));
}

#[test]
fn eval_single_tasks_write_csv() {
    let dir = TempDir::new().unwrap();
    let csv = dir.path().join("t.csv");
    let r = json(&ok(&[
        "eval",
        "translate",
        "--refs",
        s(&fixture("suite/translate_refs.txt")),
        "--hyps",
        s(&fixture("suite/translate_long.txt")),
        "--system",
        "long",
        "--csv",
        s(&csv),
    ]));
    assert_eq!(r["system"], "long");
    assert!((r["bleu"].as_f64().unwrap() - 66.87).abs() < 0.01);
    assert!(fs::read_to_string(csv).unwrap().starts_with("system,bleu,chrf\nlong,"));
    let r = json(&ok(&[
        "eval",
        "allusion",
        "--gold",
        s(&fixture("suite/allusion_gold.jsonl")),
        "--pred",
        s(&fixture("suite/allusion_sys.jsonl")),
    ]));
    close(&r["detection_acc"], 2.0 / 3.0);
    let r = json(&ok(&[
        "eval",
        "seg-punct",
        "--gold",
        s(&fixture("suite/punct_gold.txt")),
        "--pred",
        s(&fixture("suite/punct_rough.txt")),
    ]));
    close(&r["seg_f1"], 6.0 / 7.0);
}

/// Pearson correlation of mid-ranks, ranks counted pairwise.
fn oracle_spearman(x: &[f64], y: &[f64]) -> f64 {
    let rank = |v: &[f64]| -> Vec<f64> {
        v.iter()
            .map(|a| {
                let below = v.iter().filter(|b| *b < a).count() as f64;
                let equal = v.iter().filter(|b| *b == a).count() as f64;
                below + (equal + 1.0) / 2.0
            })
            .collect()
    };
    let (rx, ry) = (rank(x), rank(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

// Ratings fixture, scores per (item, evaluator) as human/gpt4/taiyan:
// q1: e1 4/3/5, e2 3/3/4; q2: e1 4/4/4, e2 3/2/5; q3: e1 5/4/3, e2 2/3/5.
// Means 21/6, 19/6, 26/6. q2/e1 is a three-way tie and q3/e1 a human win,
// so win rates are 2/6, 1/6, 5/6.
#[test]
fn aggregate_fixture_ratings() {
    let dir = TempDir::new().unwrap();
    let csv = dir.path().join("summary.csv");
    let r = json(&ok(&[
        "human-eval",
        "aggregate",
        "--ratings",
        s(&fixture("ratings.csv")),
        "--scale",
        "five-point",
        "--csv",
        s(&csv),
    ]));
    let sys = &r["systems"];
    let want = [("human", 21.0, 2.0), ("gpt4", 19.0, 1.0), ("taiyan", 26.0, 5.0)];
    for (row, (name, total, wins)) in sys.as_array().unwrap().iter().zip(want) {
        assert_eq!(row["system"], name);
        close(&row["mean_score"], total / 6.0);
        close(&row["win_rate"], wins / 6.0);
    }
    let e1 = [4.0, 3.0, 5.0, 4.0, 4.0, 4.0, 5.0, 4.0, 3.0];
    let e2 = [3.0, 3.0, 4.0, 3.0, 2.0, 5.0, 2.0, 3.0, 5.0];
    let rho = oracle_spearman(&e1, &e2);
    assert!((rho + (3.0f64 / 32.0).sqrt()).abs() < 1e-12, "{rho}");
    close(&r["inter_rater"]["mean_spearman"], rho);
    assert_eq!(r["inter_rater"]["skipped"].as_array().unwrap().len(), 0);
    assert!(fs::read_to_string(csv)
        .unwrap()
        .starts_with("system,mean_score,win_rate\nhuman,3.5,"));
}

#[test]
fn bundles_round_trip_through_key() {
    let dir = TempDir::new().unwrap();
    let answers = dir.path().join("answers.jsonl");
    fs::write(
        &answers,
        concat!(
            r#"{"item": "q1", "answers": {"human": "甲", "gpt4": "乙", "taiyan": "丙"}}"#,
            "\n",
            r#"{"item": "q2", "answers": {"human": "丁", "gpt4": "戊", "taiyan": "己"}}"#,
            "\n"
        ),
    )
    .unwrap();
    let read = |out: &Path| {
        let bundles: Vec<Bundle> = fs::read_to_string(out.join("bundles.jsonl"))
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        (bundles, fs::read_to_string(out.join("key.csv")).unwrap())
    };
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        ok(&[
            "human-eval",
            "bundle",
            "--answers",
            s(&answers),
            "--seed",
            "7",
            "--out",
            s(out),
        ]);
    }
    let (bundles, key) = read(&a);
    assert_eq!(read(&b), (bundles.clone(), key.clone()));
    for bundle in &bundles {
        assert!(!serde_json::to_string(bundle).unwrap().contains("taiyan"));
    }
    let restored = unshuffle(&bundles, &key_from_csv(&key).unwrap()).unwrap();
    let original: Vec<AnswerSet> = fs::read_to_string(&answers)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(restored, original);
}

#[test]
fn sense_drift_fixture_is_reproducible() {
    let dir = TempDir::new().unwrap();
    let run = |prefix: &Path| {
        ok(&[
            "sense-drift",
            "--corpus",
            s(&fixture("sense_corpus")),
            "--keyword",
            "文",
            "--glosses",
            s(&fixture("sense_glosses.csv")),
            "--out",
            s(prefix),
        ]);
        fs::read_to_string(prefix.with_extension("csv")).unwrap()
    };
    let first = run(&dir.path().join("one"));
    assert_eq!(first, run(&dir.path().join("two")));
    let rows: Vec<&str> = first.lines().collect();
    assert_eq!(rows[0], "period,cluster_representative,frequency");
    assert_eq!(rows[1], "Pre-Qin,文辭著作,0.25");
    assert_eq!(rows[2], "Pre-Qin,花紋色彩,0.75");
    assert_eq!(rows[5], "Wei-Jin-NS,文辭著作,0");
    assert_eq!(rows[9], "Song,文辭著作,0.6");
    assert!(dir.path().join("one.svg").exists());
    assert!(dir.path().join("one.manifest.json").exists());
}

#[test]
fn sense_drift_rejects_glosses_outside_the_corpus() {
    let dir = TempDir::new().unwrap();
    let glosses = dir.path().join("g.csv");
    let mut text = fs::read_to_string(fixture("sense_glosses.csv")).unwrap();
    text.push_str("Qing,不在語料中的文,文辭著作\n");
    fs::write(&glosses, text).unwrap();
    let (corpus, out) = (fixture("sense_corpus"), dir.path().join("x"));
    let args = [
        "sense-drift",
        "--corpus",
        s(&corpus),
        "--keyword",
        "文",
        "--glosses",
        s(&glosses),
        "--out",
        s(&out),
    ];
    assert_eq!(code(&args), 2);
}
