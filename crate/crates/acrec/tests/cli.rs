//! End-to-end tests of the `acrec` binary: every subcommand, artifact
//! round-trips, determinism, config-file handling and exit codes.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};

struct Run {
    status: i32,
    stdout: String,
    stderr: String,
}

fn acrec(dir: &Path, args: &[&str], stdin: Option<&str>) -> Run {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_acrec"));
    cmd.current_dir(dir).args(args);
    cmd.stdin(Stdio::piped()).stdout(Stdio::piped()).stderr(Stdio::piped());
    let mut child = cmd.spawn().expect("spawn acrec");
    if let Some(text) = stdin {
        child.stdin.as_mut().unwrap().write_all(text.as_bytes()).unwrap();
    }
    drop(child.stdin.take());
    let out = child.wait_with_output().expect("wait for acrec");
    Run {
        status: out.status.code().unwrap_or(-1),
        stdout: String::from_utf8_lossy(&out.stdout).into_owned(),
        stderr: String::from_utf8_lossy(&out.stderr).into_owned(),
    }
}

fn gen_small(dir: &Path, name: &str, extra: &[&str]) -> PathBuf {
    let mut args = vec![
        "gen", "--sessions", "600", "--catalog", "100", "--len-min", "3", "--len-max", "7",
        "--rec-rate", "0.25", "--seed", "11", "--out", name,
    ];
    args.extend_from_slice(extra);
    let run = acrec(dir, &args, None);
    assert_eq!(run.status, 0, "gen failed: {}", run.stderr);
    dir.join(name)
}

#[test]
fn gen_is_deterministic_and_validates_config() {
    let dir = tempfile::tempdir().unwrap();
    gen_small(dir.path(), "a.jsonl", &[]);
    gen_small(dir.path(), "b.jsonl", &[]);
    let a = std::fs::read(dir.path().join("a.jsonl")).unwrap();
    let b = std::fs::read(dir.path().join("b.jsonl")).unwrap();
    assert_eq!(a, b, "same seed must produce byte-identical logs");
    let ta = std::fs::read(dir.path().join("a.jsonl.truth")).unwrap();
    let tb = std::fs::read(dir.path().join("b.jsonl.truth")).unwrap();
    assert_eq!(ta, tb);

    let bad = acrec(dir.path(), &["gen", "--slate-size", "9", "--out", "x.jsonl"], None);
    assert_eq!(bad.status, 1);
    assert!(bad.stderr.contains("slate_size"), "{}", bad.stderr);
}

#[test]
fn pipeline_round_trip_train_eval_predict() {
    let dir = tempfile::tempdir().unwrap();
    let log = gen_small(dir.path(), "log.jsonl", &[]);

    let train = acrec(
        dir.path(),
        &[
            "train", "--data", log.to_str().unwrap(), "--out-dir", "run", "--variant", "late",
            "--iterations", "80", "--seed", "3",
        ],
        None,
    );
    assert_eq!(train.status, 0, "train failed: {}", train.stderr);
    assert!(train.stdout.contains("precision@10"), "{}", train.stdout);
    assert!(dir.path().join("run/checkpoint.bin").exists());
    assert!(dir.path().join("run/vocab.tsv").exists());
    assert!(dir.path().join("run/history.csv").exists());

    let eval = acrec(
        dir.path(),
        &[
            "eval", "--checkpoint", "run/checkpoint.bin", "--vocab", "run/vocab.tsv",
            "--data", log.to_str().unwrap(), "--k", "10", "--out", "metrics.csv",
        ],
        None,
    );
    assert_eq!(eval.status, 0, "eval failed: {}", eval.stderr);
    let csv = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert!(csv.starts_with("model,K,global,view,click"), "{csv}");
    assert!(csv.lines().nth(1).unwrap().starts_with("late,10,"), "{csv}");

    // predict on a session with an unknown item
    let session = r#"{"user_id":"q","events":[{"item":"i1"},{"item":"never-seen-id","recs":["i6","i error"]}]}"#;
    let predict = acrec(
        dir.path(),
        &["predict", "--checkpoint", "run/checkpoint.bin", "--vocab", "run/vocab.tsv", "--k", "5"],
        Some(session),
    );
    assert_eq!(predict.status, 0, "predict failed: {}", predict.stderr);
    let lines: Vec<&str> = predict.stdout.lines().collect();
    assert_eq!(lines.len(), 5);
    let total: f64 = lines.iter().map(|l| l.split('\t').nth(1).unwrap().parse::<f64>().unwrap()).sum();
    assert!(total > 0.0 && total <= 1.0 + 1e-9, "probability sum {total}");

    let again = acrec(
        dir.path(),
        &["predict", "--checkpoint", "run/checkpoint.bin", "--vocab", "run/vocab.tsv", "--k", "5"],
        Some(session),
    );
    assert_eq!(predict.stdout, again.stdout, "predict must be deterministic");

    // single-event session still predicts
    let one = r#"{"user_id":"q","events":[{"item":"i1"}]}"#;
    let single = acrec(
        dir.path(),
        &["predict", "--checkpoint", "run/checkpoint.bin", "--vocab", "run/vocab.tsv", "--k", "3"],
        Some(one),
    );
    assert_eq!(single.status, 0);
    assert_eq!(single.stdout.lines().count(), 3);
}

#[test]
fn train_is_deterministic_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let log = gen_small(dir.path(), "log.jsonl", &[]);
    for out in ["r1", "r2"] {
        let run = acrec(
            dir.path(),
            &[
                "train", "--data", log.to_str().unwrap(), "--out-dir", out, "--variant",
                "early", "--iterations", "60", "--seed", "5",
            ],
            None,
        );
        assert_eq!(run.status, 0, "{}", run.stderr);
    }
    let c1 = std::fs::read(dir.path().join("r1/checkpoint.bin")).unwrap();
    let c2 = std::fs::read(dir.path().join("r2/checkpoint.bin")).unwrap();
    assert_eq!(c1, c2, "checkpoints must be byte-identical");

    // history matches on iteration,loss,lr; wall-clock seconds may differ
    let strip = |p: &str| -> Vec<String> {
        std::fs::read_to_string(dir.path().join(p))
            .unwrap()
            .lines()
            .map(|l| l.rsplit_once(',').map(|(head, _)| head.to_string()).unwrap_or_default())
            .collect()
    };
    assert_eq!(strip("r1/history.csv"), strip("r2/history.csv"));
}

#[test]
fn clicks_variant_needs_click_events() {
    let dir = tempfile::tempdir().unwrap();
    let log = gen_small(dir.path(), "norecs.jsonl", &["--rec-rate", "0"]);
    let run = acrec(
        dir.path(),
        &[
            "train", "--data", log.to_str().unwrap(), "--out-dir", "run", "--variant", "clicks",
            "--iterations", "10",
        ],
        None,
    );
    assert_eq!(run.status, 1, "expected config error, got: {}", run.stderr);
    assert!(run.stderr.contains("click"), "{}", run.stderr);
}

#[test]
fn eval_precision_monotone_in_k_and_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let log = gen_small(dir.path(), "log.jsonl", &[]);
    let train = acrec(
        dir.path(),
        &[
            "train", "--data", log.to_str().unwrap(), "--out-dir", "run", "--variant",
            "navigation", "--iterations", "60", "--seed", "2",
        ],
        None,
    );
    assert_eq!(train.status, 0, "{}", train.stderr);

    let mut precisions = Vec::new();
    for k in ["1", "10"] {
        let run = acrec(
            dir.path(),
            &[
                "eval", "--checkpoint", "run/checkpoint.bin", "--vocab", "run/vocab.tsv",
                "--data", log.to_str().unwrap(), "--k", k, "--out", "m.csv",
            ],
            None,
        );
        assert_eq!(run.status, 0, "{}", run.stderr);
        let csv = std::fs::read_to_string(dir.path().join("m.csv")).unwrap();
        let global: f64 =
            csv.lines().nth(1).unwrap().split(',').nth(2).unwrap().parse().unwrap();
        precisions.push(global);
    }
    assert!(precisions[0] <= precisions[1], "P@1 {} > P@10 {}", precisions[0], precisions[1]);

    // byte-identical metrics for identical invocations
    let r1 = acrec(
        dir.path(),
        &[
            "eval", "--checkpoint", "run/checkpoint.bin", "--vocab", "run/vocab.tsv",
            "--data", log.to_str().unwrap(), "--out", "m1.csv", "--seed", "4",
        ],
        None,
    );
    let r2 = acrec(
        dir.path(),
        &[
            "eval", "--checkpoint", "run/checkpoint.bin", "--vocab", "run/vocab.tsv",
            "--data", log.to_str().unwrap(), "--out", "m2.csv", "--seed", "4",
        ],
        None,
    );
    assert_eq!(r1.status, 0);
    assert_eq!(r2.status, 0);
    let m1 = std::fs::read(dir.path().join("m1.csv")).unwrap();
    let m2 = std::fs::read(dir.path().join("m2.csv")).unwrap();
    assert_eq!(m1, m2);
}

#[test]
fn four_variant_comparison_table() {
    let dir = tempfile::tempdir().unwrap();
    let log = gen_small(dir.path(), "log.jsonl", &[]);
    for variant in ["navigation", "clicks", "late", "early"] {
        let train = acrec(
            dir.path(),
            &[
                "train", "--data", log.to_str().unwrap(), "--out-dir", variant, "--variant",
                variant, "--iterations", "50", "--seed", "6",
            ],
            None,
        );
        assert_eq!(train.status, 0, "{variant}: {}", train.stderr);
        let eval = acrec(
            dir.path(),
            &[
                "eval", "--checkpoint", &format!("{variant}/checkpoint.bin"), "--vocab",
                &format!("{variant}/vocab.tsv"), "--data", log.to_str().unwrap(), "--out",
                "table.csv", "--append",
            ],
            None,
        );
        assert_eq!(eval.status, 0, "{variant}: {}", eval.stderr);
    }
    let table = std::fs::read_to_string(dir.path().join("table.csv")).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines.len(), 5, "header + 4 model rows:\n{table}");
    for (i, variant) in ["navigation", "clicks", "late", "early"].iter().enumerate() {
        assert!(lines[i + 1].starts_with(variant), "{}", lines[i + 1]);
    }
}

#[test]
fn gradcheck_all_variants_and_negative_control() {
    let dir = tempfile::tempdir().unwrap();
    for variant in ["navigation", "early", "late", "clicks"] {
        for mask in ["all", "clicks_only"] {
            let run = acrec(
                dir.path(),
                &["gradcheck", "--variant", variant, "--mask-mode", mask, "--seed", "1"],
                None,
            );
            assert_eq!(run.status, 0, "{variant}/{mask}: {}\n{}", run.stdout, run.stderr);
        }
    }
    // identical seed → identical report
    let a = acrec(dir.path(), &["gradcheck", "--variant", "late", "--seed", "9"], None);
    let b = acrec(dir.path(), &["gradcheck", "--variant", "late", "--seed", "9"], None);
    assert_eq!(a.stdout, b.stdout);

    let corrupt = acrec(dir.path(), &["gradcheck", "--variant", "late", "--corrupt"], None);
    assert_eq!(corrupt.status, 3, "corrupted gradient must fail: {}", corrupt.stdout);
}

#[test]
fn config_file_merging_and_unknown_keys() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("gen.cfg"),
        "sessions=50\ncatalog=64\nseed=2\n# comment\nrec_rate=0.2\n",
    )
    .unwrap();
    let run = acrec(
        dir.path(),
        &["gen", "--config", "gen.cfg", "--sessions", "70", "--out", "a.jsonl"],
        None,
    );
    assert_eq!(run.status, 0, "{}", run.stderr);
    // CLI flag overrides the file value; echo reflects the resolved config
    assert!(run.stderr.contains("sessions=70"), "{}", run.stderr);
    assert!(run.stderr.contains("catalog=64"), "{}", run.stderr);
    let lines = std::fs::read_to_string(dir.path().join("a.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 70);

    std::fs::write(dir.path().join("bad.cfg"), "sessions=10\nbananas=3\n").unwrap();
    let bad = acrec(dir.path(), &["gen", "--config", "bad.cfg", "--out", "b.jsonl"], None);
    assert_eq!(bad.status, 1);
    assert!(bad.stderr.contains("bananas"), "{}", bad.stderr);
}

#[test]
fn missing_data_file_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let run = acrec(dir.path(), &["train", "--data", "nope.jsonl", "--out-dir", "x"], None);
    assert_eq!(run.status, 2, "{}", run.stderr);
}

#[test]
fn malformed_log_line_reports_line_number() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("bad.jsonl"),
        "{\"user_id\":\"u\",\"events\":[{\"item\":\"a\"},{\"item\":\"b\"}]}\nnot json\n",
    )
    .unwrap();
    let run = acrec(dir.path(), &["train", "--data", "bad.jsonl", "--out-dir", "x"], None);
    assert_eq!(run.status, 2);
    assert!(run.stderr.contains("line 2"), "{}", run.stderr);
}
