use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_dualcls"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const TINY_CONFIG: &str = r#"{
  "train": { "epochs": 2, "batch_size": 8, "learning_rate": 0.001, "warmup_steps": 5, "lambda": 0.5, "seed": 3 },
  "encoder": { "d_model": 8, "n_layers": 1, "n_heads": 2, "d_ff": 16, "max_len": 16 }
}"#;

/// One small trained run shared by the read-only tests.
struct Fixture {
    _dir: tempfile::TempDir,
    corpus: PathBuf,
    run_dir: PathBuf,
}

fn fixture() -> &'static Fixture {
    static FIXTURE: OnceLock<Fixture> = OnceLock::new();
    FIXTURE.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let corpus = dir.path().join("corpus.tsv");
        let config = dir.path().join("config.json");
        let run_dir = dir.path().join("run");
        fs::write(&config, TINY_CONFIG).unwrap();
        let out = run(&[
            "gen-corpus",
            "--languages",
            "3",
            "--pairs",
            "120",
            "--min-len",
            "2",
            "--max-len",
            "5",
            "--vocab-size",
            "10",
            "--seed",
            "1",
            "--output",
            s(&corpus),
        ]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        let out = run(&[
            "train",
            "--config",
            s(&config),
            "--corpus",
            s(&corpus),
            "--run-dir",
            s(&run_dir),
        ]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        Fixture {
            _dir: dir,
            corpus,
            run_dir,
        }
    })
}

fn checkpoint() -> PathBuf {
    fixture().run_dir.join("checkpoint")
}

#[test]
fn gen_corpus_writes_requested_pairs_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.tsv"), dir.path().join("b.tsv"));
    for p in [&a, &b] {
        let out = run(&[
            "gen-corpus",
            "--languages",
            "3",
            "--pairs",
            "2000",
            "--seed",
            "7",
            "--output",
            s(p),
        ]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
    }
    let text = fs::read_to_string(&a).unwrap();
    assert_eq!(text.lines().count(), 2000);
    assert_eq!(text, fs::read_to_string(&b).unwrap());
    assert!(text.lines().all(|l| l.split('\t').count() == 4));
}

#[test]
fn gen_corpus_appends_monolingual_pairs() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("c.tsv");
    let out = run(&[
        "gen-corpus",
        "--languages",
        "2",
        "--pairs",
        "10",
        "--monolingual-pairs",
        "5",
        "--output",
        s(&p),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = fs::read_to_string(&p).unwrap();
    let same: Vec<_> = text
        .lines()
        .filter(|l| {
            let f: Vec<&str> = l.split('\t').collect();
            f[2] == f[3]
        })
        .collect();
    assert_eq!(same.len(), 5);
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("x.tsv");
    assert_eq!(
        code(&run(&["gen-corpus", "--languages", "1", "--output", s(&p)])),
        2
    );
    assert_eq!(
        code(&run(&[
            "gen-corpus",
            "--min-len",
            "5",
            "--max-len",
            "3",
            "--output",
            s(&p)
        ])),
        2
    );
    assert_eq!(
        code(&run(&["gen-corpus", "--bogus", "1", "--output", s(&p)])),
        2
    );
    assert_eq!(code(&run(&["gen-corpus", "-o", s(&p)])), 2);
    assert_eq!(code(&run(&["frobnicate"])), 2);
    assert_eq!(code(&run(&["train", "--run-dir", s(dir.path())])), 2);
    assert!(!p.exists());
    assert_eq!(code(&run(&["--help"])), 0);
}

#[test]
fn train_populates_the_run_directory() {
    let f = fixture();
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(f.run_dir.join("run_manifest.json")).unwrap())
            .unwrap();
    assert_eq!(manifest["corpus_sha256"].as_str().unwrap().len(), 64);
    assert_eq!(manifest["seeds"]["train"], 3);
    assert_eq!(manifest["config"]["train"]["lambda"], 0.5);
    assert!(
        manifest["finished_unix"].as_u64().unwrap() >= manifest["started_unix"].as_u64().unwrap()
    );
    let metrics = fs::read_to_string(f.run_dir.join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 2);
    for line in metrics.lines() {
        let r: serde_json::Value = serde_json::from_str(line).unwrap();
        for key in ["train", "validation"] {
            let (m, a, t) = (
                r[key]["mlm"].as_f64().unwrap(),
                r[key]["alignment"].as_f64().unwrap(),
                r[key]["total"].as_f64().unwrap(),
            );
            assert!((t - (m + 0.5 * a)).abs() < 1e-12);
        }
        assert!(r["rankme"].as_f64().unwrap() >= 1.0);
    }
    assert!(f.run_dir.join("checkpoint/manifest.json").is_file());
    assert!(f.run_dir.join("checkpoint/params.bin").is_file());
}

#[test]
fn train_runs_are_reproducible_including_zero_lambda() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("config.json");
    fs::write(&config, TINY_CONFIG).unwrap();
    let again = dir.path().join("again");
    let out = run(&[
        "train",
        "--config",
        s(&config),
        "--corpus",
        s(&f.corpus),
        "--run-dir",
        s(&again),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(
        fs::read(f.run_dir.join("metrics.jsonl")).unwrap(),
        fs::read(again.join("metrics.jsonl")).unwrap()
    );
    assert_eq!(
        fs::read(f.run_dir.join("checkpoint/params.bin")).unwrap(),
        fs::read(again.join("checkpoint/params.bin")).unwrap()
    );

    fs::write(
        &config,
        TINY_CONFIG.replace("\"lambda\": 0.5", "\"lambda\": 0.0"),
    )
    .unwrap();
    let baseline = dir.path().join("baseline");
    let out = run(&[
        "train",
        "--config",
        s(&config),
        "--corpus",
        s(&f.corpus),
        "--run-dir",
        s(&baseline),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let out = run(&[
        "eval",
        "--checkpoint",
        s(&baseline.join("checkpoint")),
        "--corpus",
        s(&f.corpus),
    ]);
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["total"], v["mlm"]);
}

#[test]
fn train_runtime_errors_exit_with_one_and_name_the_problem() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.tsv");
    let out = run(&[
        "train",
        "--corpus",
        s(&missing),
        "--run-dir",
        s(&dir.path().join("r")),
    ]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("nope.tsv"), "{}", stderr(&out));

    let config = dir.path().join("bad.json");
    fs::write(&config, r#"{"train": {"learnin_rate": 0.1}}"#).unwrap();
    let out = run(&[
        "train",
        "--config",
        s(&config),
        "--corpus",
        s(&fixture().corpus),
        "--run-dir",
        s(&dir.path().join("r2")),
    ]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("learnin_rate"), "{}", stderr(&out));

    fs::write(&config, r#"{"train": {"temperature": -1.0}}"#).unwrap();
    let out = run(&[
        "train",
        "--config",
        s(&config),
        "--corpus",
        s(&fixture().corpus),
        "--run-dir",
        s(&dir.path().join("r3")),
    ]);
    assert_eq!(code(&out), 1);
    assert!(
        stderr(&out).contains("train.temperature"),
        "{}",
        stderr(&out)
    );
}

#[test]
fn eval_uses_stored_lambda_and_is_repeatable() {
    let ckpt = checkpoint();
    let args = [
        "eval",
        "--checkpoint",
        s(&ckpt),
        "--corpus",
        s(&fixture().corpus),
    ];
    let first = run(&args);
    assert_eq!(code(&first), 0, "{}", stderr(&first));
    let v: serde_json::Value = serde_json::from_slice(&first.stdout).unwrap();
    let (m, a, t) = (
        v["mlm"].as_f64().unwrap(),
        v["alignment"].as_f64().unwrap(),
        v["total"].as_f64().unwrap(),
    );
    assert!((t - (m + 0.5 * a)).abs() < 1e-12);
    assert_eq!(run(&args).stdout, first.stdout);
}

#[test]
fn eval_and_diagnose_reject_missing_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let gone = dir.path().join("gone");
    let out = run(&[
        "eval",
        "--checkpoint",
        s(&gone),
        "--corpus",
        s(&fixture().corpus),
    ]);
    assert_eq!(code(&out), 1);
    let out = run(&[
        "diagnose",
        "--checkpoint",
        s(&gone),
        "--corpus",
        s(&fixture().corpus),
        "--output",
        s(dir.path()),
    ]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("gone"), "{}", stderr(&out));
}

#[test]
fn diagnose_writes_deterministic_reports() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out_dir in [&a, &b] {
        let out = run(&[
            "diagnose",
            "--checkpoint",
            s(&checkpoint()),
            "--corpus",
            s(&fixture().corpus),
            "--output",
            s(out_dir),
            "--seed",
            "4",
        ]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
    }
    for name in [
        "cosine_table.tsv",
        "spectrum.json",
        "curves.json",
        "embeddings.jsonl",
    ] {
        assert_eq!(
            fs::read(a.join(name)).unwrap(),
            fs::read(b.join(name)).unwrap(),
            "{name}"
        );
    }
    let tsv = fs::read_to_string(a.join("cosine_table.tsv")).unwrap();
    assert!(tsv.starts_with(
        "language_pair\tsame_lang_unrelated\tdiff_lang_related\tdiff_lang_unrelated\tcounts\n"
    ));
    assert_eq!(tsv.lines().count(), 4);
    let spectrum: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(a.join("spectrum.json")).unwrap()).unwrap();
    let ratios: Vec<f64> = spectrum["variance_ratios"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_f64().unwrap())
        .collect();
    assert!((ratios.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    let curves: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(a.join("curves.json")).unwrap()).unwrap();
    assert_eq!(curves["positive"].as_array().unwrap().len(), 2);
}

#[test]
fn export_writes_two_records_per_pair() {
    let dir = tempfile::tempdir().unwrap();
    let out_path = dir.path().join("emb.jsonl");
    let out = run(&[
        "export-embeddings",
        "--checkpoint",
        s(&checkpoint()),
        "--corpus",
        s(&fixture().corpus),
        "--output",
        s(&out_path),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = fs::read_to_string(&out_path).unwrap();
    assert_eq!(text.lines().count(), 240);
    let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    assert_eq!(first["pair_index"], 0);
    assert_eq!(first["side"], "a");
    assert_eq!(first["vector"].as_array().unwrap().len(), 8);

    let val_path = dir.path().join("val.jsonl");
    let out = run(&[
        "export-embeddings",
        "--checkpoint",
        s(&checkpoint()),
        "--corpus",
        s(&fixture().corpus),
        "--output",
        s(&val_path),
        "--split",
        "validation",
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(fs::read_to_string(&val_path).unwrap().lines().count(), 24);

    let out = run(&[
        "export-embeddings",
        "--checkpoint",
        s(&checkpoint()),
        "--corpus",
        s(&fixture().corpus),
        "--output",
        s(&dir.path().join("missing/dir/e.jsonl")),
    ]);
    assert_eq!(code(&out), 1);
}
