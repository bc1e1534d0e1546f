use std::path::Path;
use std::process::{Command, Output};

fn tkl(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tkl"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

const SMALL: &[&str] = &[
    "--set",
    "synthetic.documents=40",
    "--set",
    "synthetic.queries=12",
    "--set",
    "synthetic.train_queries=6",
    "--set",
    "synthetic.validation_queries=3",
    "--set",
    "synthetic.test_queries=3",
    "--set",
    "synthetic.min_len=150",
    "--set",
    "synthetic.max_len=300",
    "--set",
    "synthetic.hard_window=100",
    "--set",
    "synthetic.pool_size=8",
    "--set",
    "synthetic.hard_negatives=2",
    "--set",
    "synthetic.vocabulary=150",
];

fn synthetic_dir() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["synthetic", "--out", "data"];
    args.extend_from_slice(SMALL);
    let out = tkl(dir.path(), &args);
    assert!(out.status.success(), "{}", stderr(&out));
    dir
}

#[test]
fn eval_three_query_fixture() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("qrels"),
        "q1 0 d1 2\nq1 0 d2 0\nq1 0 d3 1\nq2 0 d4 1\nq3 0 d5 0\n",
    )
    .unwrap();
    std::fs::write(
        dir.path().join("run"),
        "q1 Q0 d2 1 3.0 x\nq1 Q0 d1 2 2.0 x\nq1 Q0 d3 3 1.0 x\nq2 Q0 d6 1 2.0 x\nq2 Q0 d4 2 1.0 x\nq3 Q0 d5 1 1.0 x\n",
    )
    .unwrap();
    let out = tkl(dir.path(), &["eval", "--qrels", "qrels", "--run", "base=run", "--csv", "m.csv"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let csv = std::fs::read_to_string(dir.path().join("m.csv")).unwrap();
    let row: Vec<&str> = csv.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(row[0], "base");
    let value = |i: usize| row[i].parse::<f64>().unwrap();

    let l2 = |r: f64| (r + 1.0).log2();
    let q1 = (3.0 / l2(2.0) + 1.0 / l2(3.0)) / (3.0 / l2(1.0) + 1.0 / l2(2.0));
    let q2 = (1.0 / l2(2.0)) / (1.0 / l2(1.0));
    assert!((value(1) - (q1 + q2) / 2.0).abs() < 1e-9);
    assert!((value(2) - 0.5).abs() < 1e-9);
    let ap1 = (1.0 / 2.0 + 2.0 / 3.0) / 2.0;
    assert!((value(3) - (ap1 + 0.5) / 2.0).abs() < 1e-9);
    assert_eq!(row[4], "2");
}

#[test]
fn empty_triples_fail_cleanly() {
    let dir = synthetic_dir();
    std::fs::write(dir.path().join("data/triples.tsv"), "").unwrap();
    let out = tkl(dir.path(), &["--config", "data/config.toml", "train"]);
    assert!(!out.status.success());
    let err = stderr(&out);
    assert!(err.contains("error[empty-input]"), "{err}");
    assert!(!dir.path().join("data/model/model.ckpt").exists());
}

#[test]
fn rerank_is_byte_identical_across_runs_and_workers() {
    let dir = synthetic_dir();
    let train = tkl(
        dir.path(),
        &["--config", "data/config.toml", "--set", "train.max_steps=2", "train"],
    );
    assert!(train.status.success(), "{}", stderr(&train));
    let mut outputs = Vec::new();
    for (name, workers) in [("a", "1"), ("b", "1"), ("c", "3")] {
        let run = format!("{name}.run");
        let regions = format!("{name}.jsonl");
        let out = tkl(
            dir.path(),
            &[
                "--config",
                "data/config.toml",
                "--workers",
                workers,
                "rerank",
                "--run",
                "data/test.run",
                "--out",
                &run,
                "--regions",
                &regions,
            ],
        );
        assert!(out.status.success(), "{}", stderr(&out));
        outputs.push((
            std::fs::read(dir.path().join(&run)).unwrap(),
            std::fs::read(dir.path().join(&regions)).unwrap(),
        ));
    }
    assert!(!outputs[0].0.is_empty());
    assert_eq!(outputs[0], outputs[1]);
    assert_eq!(outputs[0], outputs[2]);
}

#[test]
fn config_errors_name_their_class() {
    let dir = tempfile::tempdir().unwrap();
    let out = tkl(dir.path(), &["--set", "model.windw=3", "gradcheck"]);
    assert!(!out.status.success());
    assert!(stderr(&out).starts_with("error[config]"), "{}", stderr(&out));

    let out = tkl(dir.path(), &["eval", "--qrels", "missing", "--run", "missing"]);
    assert!(stderr(&out).starts_with("error[io]"), "{}", stderr(&out));
}

#[test]
fn gradcheck_passes_on_probe_model() {
    let dir = tempfile::tempdir().unwrap();
    let out = tkl(dir.path(), &["gradcheck", "--doc-len", "60"]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(!String::from_utf8_lossy(&out.stdout).contains("MISMATCH"));
}
