use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_mental-perceiver");

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).env_remove("MP_THREADS").output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const SMALL: &str = r#"
seed = 5

[model]
input_width = 8
audio_width = 4
latent_width = 8
query_width = 8
output_width = 8
depth = 2
heads = 2

[train]
learning_rate = 1e-2
epochs = 3
batch_size = 8
"#;

fn small_corpus(dir: &Path) -> String {
    let path = dir.join("corpus.jsonl");
    let p = path.to_str().unwrap();
    let o = run(&[
        "gen-synth", "--seed", "3", "--per-class", "10", "--text-width", "8", "--audio-width", "4", "-o", p,
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    p.to_owned()
}

#[test]
fn gen_synth_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = small_corpus(dir.path());
    let first = std::fs::read(&a).unwrap();
    let b = small_corpus(dir.path());
    assert_eq!(first, std::fs::read(b).unwrap());
    assert_eq!(first.iter().filter(|&&c| c == b'\n').count(), 20);
}

#[test]
fn train_evaluate_predict() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = small_corpus(dir.path());
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, SMALL).unwrap();
    let run_dir = dir.path().join("run");
    let o = run(&[
        "train",
        "-c",
        cfg.to_str().unwrap(),
        "--corpus",
        &corpus,
        "-o",
        run_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for f in ["best.ckpt", "config.toml", "priors.json", "epochs.jsonl"] {
        assert!(run_dir.join(f).exists(), "{f}");
    }
    let epochs = std::fs::read_to_string(run_dir.join("epochs.jsonl")).unwrap();
    assert_eq!(epochs.lines().count(), 3);

    let ckpt = run_dir.join("best.ckpt");
    let report = dir.path().join("report");
    let o = run(&["evaluate", ckpt.to_str().unwrap(), "-o", report.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let table = String::from_utf8(o.stdout).unwrap();
    assert!(table.contains("participant"), "{table}");
    let jsonl = std::fs::read_to_string(report.join("report.jsonl")).unwrap();
    assert_eq!(jsonl.lines().count(), 2);
    for line in jsonl.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["split"], "test");
        assert!(v["uar"].as_f64().unwrap() <= 1.0);
    }

    let o = run(&["predict", ckpt.to_str().unwrap(), "--split", "validation"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = String::from_utf8(o.stdout).unwrap();
    assert!(csv.starts_with("participant_id,level,p_disorder,predicted,label"));
    assert_eq!(csv.lines().count(), 3);

    // same seed, same run
    let again = dir.path().join("again");
    let o = run(&[
        "train",
        "-c",
        cfg.to_str().unwrap(),
        "--corpus",
        &corpus,
        "-o",
        again.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0);
    assert_eq!(epochs, std::fs::read_to_string(again.join("epochs.jsonl")).unwrap());

    let mut bytes = std::fs::read(&ckpt).unwrap();
    bytes[..6].copy_from_slice(b"NOTCKP");
    let bad = dir.path().join("bad.ckpt");
    std::fs::write(&bad, bytes).unwrap();
    let o = run(&["evaluate", bad.to_str().unwrap(), "--corpus", &corpus]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("invalid checkpoint magic"), "{}", stderr(&o));
}

#[test]
fn usage_and_config_errors_exit_1() {
    assert_eq!(code(&run(&[])), 1);
    assert_eq!(code(&run(&["train", "--bogus"])), 1);
    assert_eq!(code(&run(&["--help"])), 0);

    let dir = tempfile::tempdir().unwrap();
    let corpus = small_corpus(dir.path());
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[model]\nseed = 1\n").unwrap();
    let out = dir.path().join("run");
    let o = run(&["train", "-c", cfg.to_str().unwrap(), "--corpus", &corpus, "-o", out.to_str().unwrap()]);
    assert_eq!(code(&o), 1, "{}", stderr(&o));

    let o = Command::new(BIN)
        .args(["compute-priors", "--corpus", &corpus, "-o", dir.path().join("p.json").to_str().unwrap()])
        .env("MP_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(code(&o), 1);
    let o = Command::new(BIN)
        .args(["compute-priors", "--corpus", &corpus, "-o", dir.path().join("p.json").to_str().unwrap()])
        .env("MP_THREADS", "1")
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

#[test]
fn bad_data_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("broken.jsonl");
    std::fs::write(&path, "{\"participant_id\": \"a\", \"label\": 7}\n").unwrap();
    let o = run(&["compute-priors", "--corpus", path.to_str().unwrap(), "-o", "/dev/null"]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    let o = run(&["compute-priors", "--corpus", dir.path().join("missing.jsonl").to_str().unwrap(), "-o", "x"]);
    assert_eq!(code(&o), 2);
}
