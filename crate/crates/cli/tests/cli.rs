use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn vdistill(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vdistill"))
        .args(args)
        .env_remove("VDISTILL_SEED")
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = vdistill(args);
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

#[test]
fn tokenizer_model_and_training_commands_chain() {
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name);
    let (corpus, base, ext) = (p("corpus.txt"), p("base.tok"), p("ext.tok"));

    ok(&["gen-corpus", "--docs", "30", "--seed", "2", "--out", s(&corpus)]);
    ok(&["train-tokenizer", "--corpus", s(&corpus), "--vocab-size", "280", "--out", s(&base)]);
    let added = ok(&[
        "extend-vocab",
        "--base",
        s(&base),
        "--corpus",
        s(&corpus),
        "--add",
        "4",
        "--fresh-vocab-size",
        "400",
        "--out",
        s(&ext),
    ]);
    assert!(!added.trim().is_empty());

    let ids = ok(&["tokenize", "--tokenizer", s(&base), "--text", "import numpy"]);
    assert!(ids.trim().split(' ').all(|t| t.parse::<u32>().is_ok()), "{ids}");

    let text = p("doc.txt");
    fs::write(&text, fs::read_to_string(&corpus).unwrap().split("\n\n").next().unwrap()).unwrap();
    let aligned = ok(&["align", "--tokenizer-base", s(&base), "--tokenizer-ext", s(&ext), "--file", s(&text)]);
    let lines: Vec<&str> = aligned.lines().collect();
    assert_eq!(lines[0].trim_end(), "Similar mappings:");
    assert!(lines[1].starts_with('['));
    assert!(lines.iter().any(|l| l.trim_end() == "Divergent mappings:"));

    let (teacher, student) = (p("teacher.ckpt"), p("student.ckpt"));
    ok(&[
        "pretrain", "--tokenizer", s(&base), "--corpus", s(&corpus), "--d-model", "16", "--n-layers", "1",
        "--n-heads", "2", "--d-ff", "32", "--max-seq", "64", "--epochs", "1", "--out", s(&teacher),
    ]);
    assert!(fs::read(&teacher).unwrap().starts_with(b"VDCKPT1"));
    ok(&["init-extension", "--model", s(&teacher), "--tokenizer-ext", s(&ext), "--out", s(&student)]);

    let conf = p("p1.conf");
    fs::write(&conf, "# phase one\nphase = p1\nepochs = 1\nlr = 1.0\nstrategy = random_ce\n").unwrap();
    let (trained, metrics) = (p("trained.ckpt"), p("metrics"));
    ok(&[
        "train", "--config", s(&conf), "--lr", "1e-3", "--model", s(&student), "--tokenizer-base", s(&base),
        "--tokenizer-ext", s(&ext), "--corpus", s(&corpus), "--out", s(&trained), "--metrics-dir", s(&metrics),
    ]);
    let kl = fs::read_to_string(metrics.join("train_kl_losses.csv")).unwrap();
    assert!(kl.starts_with("epoch,random_ce\n"), "{kl}");
    assert_eq!(kl.lines().count(), 3);

    let sim = p("sim.csv");
    ok(&["analyze-similarity", "--model", s(&trained), "--tokenizer-ext", s(&ext), "--which", "head", "--out", s(&sim)]);
    assert!(fs::read_to_string(&sim).unwrap().starts_with("epoch,first,intermediate,last\n"));
}

#[test]
fn pipeline_lists_its_stages() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(&["pipeline", "--out", s(dir.path()), "--list-stages"]);
    let stages: Vec<&str> = out.lines().collect();
    assert_eq!(stages.first(), Some(&"corpus"));
    assert_eq!(stages.last(), Some(&"p3-report"));
    assert!(stages.contains(&"p2-baseline") && !stages.contains(&"p1-baseline"));
}

#[test]
fn pipeline_stage_without_upstream_names_it() {
    let dir = tempfile::tempdir().unwrap();
    let out = vdistill(&["pipeline", "--out", s(dir.path()), "--stage", "teacher"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("teacher") && err.contains("corpus/train.json"), "{err}");
}

#[test]
fn seed_falls_back_to_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let run = |env: Option<&str>, flag: Option<&str>, name: &str| {
        let path = dir.path().join(name);
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_vdistill"));
        cmd.args(["gen-corpus", "--docs", "3", "--out", s(&path)]).env_remove("VDISTILL_SEED");
        if let Some(v) = env {
            cmd.env("VDISTILL_SEED", v);
        }
        if let Some(v) = flag {
            cmd.args(["--seed", v]);
        }
        assert!(cmd.output().unwrap().status.success());
        fs::read_to_string(path).unwrap()
    };
    let by_env = run(Some("7"), None, "a");
    assert_eq!(by_env, run(None, Some("7"), "b"));
    assert_ne!(by_env, run(None, None, "c"));
    assert_eq!(run(Some("7"), Some("0"), "d"), run(None, None, "e"));
}

#[test]
fn bad_input_exits_with_a_message() {
    let out = vdistill(&["tokenize", "--tokenizer", "/nonexistent/tok", "--text", "x"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
    let out = vdistill(&["train-tokenizer"]);
    assert!(!out.status.success());
}

#[test]
fn pipeline_runs_from_a_json_config() {
    let dir = tempfile::tempdir().unwrap();
    let conf = dir.path().join("run.json");
    fs::write(
        &conf,
        r#"{"n_train": 8, "n_val": 2, "base_vocab_size": 280, "n_add": 3, "d_model": 16, "n_layers": 1,
            "n_heads": 2, "d_ff": 32, "max_seq": 32}"#,
    )
    .unwrap();
    let out = dir.path().join("run");
    let args = [
        "pipeline", "--out", s(&out), "--config", s(&conf), "--seed", "3", "--pretrain-epochs", "1", "--p1-epochs",
        "1", "--stop-after", "p1-report",
    ];
    ok(&args);
    let kl = fs::read_to_string(out.join("metrics/p1/train_kl_losses.csv")).unwrap();
    assert_eq!(kl.lines().next(), Some("epoch,random_ce,mean_ce,random_klce,mean_klce"));
    assert!(!out.join("checkpoints/p2_baseline.ckpt").exists());
    let again = ok(&args);
    assert!(again.starts_with("0 stages ran, 11 up to date"), "{again}");
}
