use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use bar_core::corpus::load_corpus;
use bar_core::inference::{read_trace, EvalReport};
use bar_core::trainer::read_metrics;

fn bar() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_bar"));
    c.env_remove("BAR_RUN_DIR");
    c
}

fn run(args: &[&str]) -> Output {
    bar().args(args).output().expect("binary runs")
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn small_train(dir: &Path, extra: &[&str]) -> Output {
    let cfg = fixture("config.toml");
    let mut args = vec![
        "train",
        "--config",
        s(&cfg),
        "--run-dir",
        s(dir),
        "--iterations",
        "30",
        "--half-period",
        "5",
    ];
    args.extend_from_slice(extra);
    run(&args)
}

#[test]
fn gen_is_deterministic_and_loads_back() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.bar");
    let b = dir.path().join("b.bar");
    for p in [&a, &b] {
        let o = run(&["gen", "--seed", "7", "--samples", "500", "--clips", "8,12", "--out", s(p)]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let corpus = load_corpus(&a).unwrap();
    assert_eq!(corpus.len(), 500);
    assert!(corpus.iter().all(|x| (8..=12).contains(&x.num_clips())));
}

#[test]
fn gen_jsonl_matches_binary() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.bar");
    let b = dir.path().join("b.jsonl");
    assert!(run(&["gen", "--samples", "20", "--out", s(&a)]).status.success());
    assert!(run(&["gen", "--samples", "20", "--format", "jsonl", "--out", s(&b)]).status.success());
    assert_eq!(load_corpus(&a).unwrap(), load_corpus(&b).unwrap());
}

#[test]
fn gen_rejects_inverted_range_with_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["gen", "--segment-fraction", "0.5,0.2", "--out", s(&dir.path().join("x"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("segment fraction"));
    let o = run(&["gen", "--snr", "-1", "--out", s(&dir.path().join("x"))]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn unknown_config_key_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[train]\nlearning_rate = 0.5\n").unwrap();
    let o = run(&["train", "--config", s(&cfg), "--run-dir", s(&dir.path().join("r"))]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    let o = run(&["train", "--bogus-flag"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn train_writes_run_dir_and_no_intra_echo() {
    let dir = tempfile::tempdir().unwrap();
    let run_dir = dir.path().join("r");
    let o = small_train(&run_dir, &["--no-intra"]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["checkpoint.json", "config.toml", "metrics.jsonl", "train_state.json", "heldout.bar"] {
        assert!(run_dir.join(f).exists(), "missing {f}");
    }
    let echo: toml::Table = std::fs::read_to_string(run_dir.join("config.toml")).unwrap().parse().unwrap();
    assert_eq!(echo["train"]["intra_weight"].as_float(), Some(0.0));
    assert_eq!(echo["ablation"]["no_intra"].as_bool(), Some(true));
    assert_eq!(read_metrics(&run_dir.join("metrics.jsonl")).unwrap().len(), 30);
}

#[test]
fn echoed_config_reproduces_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let first = dir.path().join("a");
    assert!(small_train(&first, &["--fixed-amplitude", "5"]).status.success());
    let second = dir.path().join("b");
    let echo = first.join("config.toml");
    let o = run(&["train", "--config", s(&echo), "--run-dir", s(&second)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(
        std::fs::read(first.join("metrics.jsonl")).unwrap(),
        std::fs::read(second.join("metrics.jsonl")).unwrap()
    );
    assert_eq!(
        std::fs::read(first.join("checkpoint.json")).unwrap(),
        std::fs::read(second.join("checkpoint.json")).unwrap()
    );
}

#[test]
fn resume_reproduces_losses_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let straight = dir.path().join("straight");
    assert!(small_train(&straight, &[]).status.success());

    let resumed = dir.path().join("resumed");
    let cfg = fixture("config.toml");
    let first = run(&["train", "--config", s(&cfg), "--run-dir", s(&resumed), "--iterations", "13", "--half-period", "5"]);
    assert!(first.status.success(), "{}", stderr(&first));
    let o = run(&[
        "train", "--config", s(&cfg), "--run-dir", s(&resumed), "--iterations", "30", "--half-period", "5", "--resume",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));

    let a = read_metrics(&straight.join("metrics.jsonl")).unwrap();
    let b = read_metrics(&resumed.join("metrics.jsonl")).unwrap();
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.iteration, y.iteration);
        assert_eq!(x.loss.to_bits(), y.loss.to_bits(), "iteration {}", x.iteration);
    }
    assert_eq!(
        std::fs::read(straight.join("checkpoint.json")).unwrap(),
        std::fs::read(resumed.join("checkpoint.json")).unwrap()
    );
}

#[test]
fn run_dir_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let run_dir = dir.path().join("env");
    let o = bar()
        .env("BAR_RUN_DIR", &run_dir)
        .args(["train", "--config", s(&fixture("config.toml")), "--iterations", "4"])
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(run_dir.join("checkpoint.json").exists());
    let o = bar().env("BAR_RUN_DIR", &run_dir).args(["eval"]).output().unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn fixture_eval_reproduces_stored_table() {
    let (cfg, ckpt, corpus) = (fixture("config.toml"), fixture("checkpoint.json"), fixture("corpus.jsonl"));
    let args = ["eval", "--config", s(&cfg), "--checkpoint", s(&ckpt), "--corpus", s(&corpus)];
    let o = run(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    let printed: String = stdout(&o)
        .lines()
        .map(|l| match l.find(", ") {
            Some(i) if l.starts_with("mean tIoU") && l.ends_with("s/query") => format!("{}\n", &l[..i]),
            _ => format!("{l}\n"),
        })
        .collect();
    let stored = std::fs::read_to_string(fixture("metrics_table.txt")).unwrap();
    assert_eq!(printed, stored);

    let dir = tempfile::tempdir().unwrap();
    let json = dir.path().join("m.json");
    let mut with_json = args.to_vec();
    with_json.extend(["--json", s(&json)]);
    assert!(run(&with_json).status.success());
    let mut got: serde_json::Value = serde_json::from_slice(&std::fs::read(&json).unwrap()).unwrap();
    got.as_object_mut().unwrap().remove("mean_seconds_per_query");
    let want: serde_json::Value = serde_json::from_slice(&std::fs::read(fixture("metrics.json")).unwrap()).unwrap();
    assert_eq!(got, want);
}

#[test]
fn eval_thresholds_workers_and_traces() {
    let (cfg, ckpt, corpus_path) = (fixture("config.toml"), fixture("checkpoint.json"), fixture("corpus.jsonl"));
    let common = ["--config", s(&cfg), "--checkpoint", s(&ckpt), "--corpus", s(&corpus_path)];
    let dir = tempfile::tempdir().unwrap();
    let traces = dir.path().join("traces");
    let one = dir.path().join("one.json");
    let four = dir.path().join("four.json");

    let mut args = vec!["eval", "--thresholds", "0.3,0.5,0.7", "--trace-dir", s(&traces), "--json", s(&one)];
    args.extend(common);
    let o = run(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    let rows = stdout(&o).lines().filter(|l| l.trim_start().starts_with("0.")).count();
    assert_eq!(rows, 3);

    let corpus = load_corpus(&corpus_path).unwrap();
    let files: Vec<_> = std::fs::read_dir(&traces).unwrap().collect();
    assert_eq!(files.len(), corpus.len());
    for sample in &corpus {
        let t = read_trace(&traces.join(format!("{}.trace.jsonl", sample.video_id))).unwrap();
        assert_eq!(t.header.video_id, sample.video_id);
        assert_eq!(t.rows.iter().filter(|r| r.is_best).count(), 1);
    }

    let mut args = vec!["eval", "--workers", "4", "--json", s(&four)];
    args.extend(common);
    assert!(run(&args).status.success());
    let a: EvalReport = serde_json::from_slice(&std::fs::read(&one).unwrap()).unwrap();
    let b: EvalReport = serde_json::from_slice(&std::fs::read(&four).unwrap()).unwrap();
    assert_eq!((a.rows, a.mean_tiou), (b.rows, b.mean_tiou));

    let mut args = vec!["eval", "--thresholds", "1.5"];
    args.extend(common);
    assert_eq!(run(&args).status.code(), Some(2));
}

#[test]
fn trace_command_exports_one_query() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("t.jsonl");
    let o = run(&[
        "trace",
        "--config",
        s(&fixture("config.toml")),
        "--checkpoint",
        s(&fixture("checkpoint.json")),
        "--corpus",
        s(&fixture("corpus.jsonl")),
        "--index",
        "2",
        "--out",
        s(&out),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let t = read_trace(&out).unwrap();
    assert_eq!(t.rows.len(), 13);
    assert_eq!(t.rows[0].t, 0);
}

#[test]
fn gradcheck_passes_and_reports_every_case() {
    let dir = tempfile::tempdir().unwrap();
    let json = dir.path().join("g.json");
    let o = run(&["gradcheck", "--json", s(&json)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(&json).unwrap()).unwrap();
    let cases = report["cases"].as_array().unwrap();
    assert!(cases.len() > 30);
    for c in cases {
        assert!(c["max_rel_error"].as_f64().unwrap() <= 1e-4, "{c}");
    }
    assert!(stdout(&o).contains("max rel err"));
}

#[test]
fn gradcheck_fault_exits_1_naming_the_op() {
    let o = run(&["gradcheck", "--inject-fault", "sigmoid"]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.contains("sigmoid"), "{err}");
    let o = run(&["gradcheck", "--inject-fault", "no_such_op"]);
    assert_eq!(o.status.code(), Some(2));
}
