mod common;

use common::*;
use tvfair::arith::TaskVector;
use tvfair::ckpt::read_checkpoint;

fn fixture(dir: &std::path::Path) {
    let base = ckpt(&[("a", vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]), ("b", vec![], vec![0.5])]);
    let task = ckpt(&[("a", vec![2, 2], vec![1.5, 1.0, 3.25, 4.0]), ("b", vec![], vec![-0.5])]);
    save(dir, "base.ckpt", &base);
    save(dir, "task.ckpt", &task);
}

fn listing(dir: &std::path::Path) -> Vec<String> {
    let mut v: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    v.sort();
    v
}

#[test]
fn merge_at_zero_then_diff_is_zero() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fixture(d);
    assert!(run(d, &["diff", "task.ckpt", "base.ckpt", "-o", "tv.ckpt"]).status.success());
    let o = run(d, &["merge", "base.ckpt", "--vec", "tv.ckpt:0.0", "--vec", "tv.ckpt:0", "-o", "m.ckpt"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(run(d, &["diff", "m.ckpt", "base.ckpt", "-o", "z.ckpt"]).status.success());
    let z = TaskVector::from_checkpoint(&read_checkpoint(d.join("z.ckpt")).unwrap()).unwrap();
    assert!(z.deltas().all(|(_, t)| t.values.iter().all(|v| v.to_bits() == 0)));
    let m = read_checkpoint(d.join("m.ckpt")).unwrap();
    let b = read_checkpoint(d.join("base.ckpt")).unwrap();
    assert!(m.tensors().zip(b.tensors()).all(|(x, y)| x == y));
    assert!(d.join("m.ckpt.manifest.json").exists());
}

#[test]
fn apply_and_inject_move_along_the_vector() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fixture(d);
    run(d, &["diff", "task.ckpt", "base.ckpt", "-o", "tv.ckpt"]);
    assert!(run(d, &["apply", "base.ckpt", "tv.ckpt", "--lambda", "1", "-o", "t2.ckpt"]).status.success());
    let t2 = read_checkpoint(d.join("t2.ckpt")).unwrap();
    assert_eq!(t2.get("a").unwrap().to_f32_vec(), vec![1.5, 1.0, 3.25, 4.0]);
    let o = run(d, &["inject", "task.ckpt", "tv.ckpt", "--lambda", "-1", "-o", "back.ckpt"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let back = read_checkpoint(d.join("back.ckpt")).unwrap();
    assert_eq!(back.get("b").unwrap().to_f32_vec(), vec![0.5]);
}

#[test]
fn eval_prints_two_group_gaps() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("p.jsonl"), TWO_GROUP_PREDS).unwrap();
    let o = run(d, &["eval", "--preds", "p.jsonl", "--attribute", "sex"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("DPD: 0.5\n"), "{out}");
    assert!(out.contains("EOD: 0.5\n"), "{out}");
    // no file flags: stdout only
    assert_eq!(listing(d), vec!["p.jsonl"]);

    let o = run(d, &["eval", "--preds", "p.jsonl", "--attribute", "sex", "--format", "json", "--csv", "r.csv"]);
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["overall"]["overall_dpd"], 0.5);
    assert!(d.join("r.csv").exists() && d.join("r.csv.manifest.json").exists());
}

#[test]
fn eval_reports_missing_attribute() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("p.jsonl"), TWO_GROUP_PREDS).unwrap();
    let o = run(d, &["eval", "--preds", "p.jsonl", "--attribute", "race"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("error[E_MISSING_ATTRIBUTE]"), "{}", stderr(&o));
}

#[test]
fn usage_errors_exit_2_and_write_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fixture(d);
    let before = listing(d);
    for args in [
        vec!["diff", "task.ckpt", "base.ckpt", "-o", "x.ckpt", "--bogus"],
        vec!["merge", "base.ckpt", "--vec", "task.ckpt", "-o", "x.ckpt"],
        vec!["merge", "base.ckpt", "--vec", "task.ckpt:nan", "-o", "x.ckpt"],
        vec!["apply", "base.ckpt", "task.ckpt", "--lambda", "inf", "-o", "x.ckpt"],
        vec!["inject", "task.ckpt", "base.ckpt", "-o", "x.ckpt"],
        vec!["frobnicate"],
    ] {
        let o = run(d, &args);
        assert_eq!(o.status.code(), Some(2), "{args:?}: {}", stderr(&o));
        let err = stderr(&o);
        assert!(err.starts_with("error"), "{args:?}: {err}");
        if args.contains(&"--bogus") {
            assert!(err.contains("Usage: tvfair diff"), "{err}");
        }
        assert_eq!(listing(d), before, "{args:?} left files behind");
    }
}

#[test]
fn zero_threads_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fixture(d);
    let o = tvfair()
        .current_dir(d)
        .env("TVFAIR_THREADS", "0")
        .args(["diff", "task.ckpt", "base.ckpt", "-o", "tv.ckpt"])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).starts_with("error[E_THREADS]"));
    assert!(!d.join("tv.ckpt").exists());
    let o = run(d, &["--threads", "1", "diff", "task.ckpt", "base.ckpt", "-o", "tv.ckpt"]);
    assert!(o.status.success());
}

#[test]
fn runtime_errors_carry_stable_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fixture(d);
    std::fs::write(d.join("junk.ckpt"), b"\x05\x00\x00\x00\x00\x00\x00\x00{\"a\":").unwrap();
    save(d, "other.ckpt", &ckpt(&[("a", vec![4], vec![0.0; 4]), ("b", vec![], vec![0.0])]));
    save(d, "fewer.ckpt", &ckpt(&[("a", vec![2, 2], vec![0.0; 4])]));
    let cases: [(&[&str], &str); 5] = [
        (&["diff", "junk.ckpt", "base.ckpt", "-o", "x"], "E_CKPT_"),
        (&["diff", "missing.ckpt", "base.ckpt", "-o", "x"], "E_IO"),
        (&["diff", "other.ckpt", "base.ckpt", "-o", "x"], "E_SHAPE_MISMATCH"),
        (&["diff", "fewer.ckpt", "base.ckpt", "-o", "x"], "E_NAME_MISMATCH"),
        (&["apply", "base.ckpt", "task.ckpt", "--lambda", "1", "-o", "x"], "E_NOT_TASK_VECTOR"),
    ];
    for (args, code) in cases {
        let o = run(d, args);
        assert_eq!(o.status.code(), Some(1), "{args:?}");
        let err = stderr(&o);
        assert!(err.starts_with(&format!("error[{code}")), "{args:?}: {err}");
        assert_eq!(err.lines().count(), 1, "{err}");
        assert!(!d.join("x").exists());
    }
    // --intersect lets the mismatched-name case through
    let o = run(d, &["diff", "fewer.ckpt", "base.ckpt", "-o", "x", "--intersect"]);
    assert!(o.status.success());
    assert!(stderr(&o).contains("skipped"));
}

#[test]
fn repeated_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fixture(d);
    let args = ["diff", "task.ckpt", "base.ckpt", "-o", "tv.ckpt"];
    run(d, &args);
    let first = std::fs::read(d.join("tv.ckpt")).unwrap();
    let m1 = manifest_sans_duration(&d.join("tv.ckpt.manifest.json"));
    run(d, &args);
    assert_eq!(std::fs::read(d.join("tv.ckpt")).unwrap(), first);
    assert_eq!(manifest_sans_duration(&d.join("tv.ckpt.manifest.json")), m1);
    assert_eq!(m1["command"], "diff");
}

#[test]
fn toy_pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let spec = r#"{"attribute": "g", "size": 200, "vocab_size": 60,
        "groups": [{"name": "A", "proportion": 0.5}, {"name": "B", "proportion": 0.5}]}"#;
    std::fs::write(d.join("spec.json"), spec).unwrap();
    let steps: [&[&str]; 6] = [
        &["gen-data", "--spec", "spec.json", "--seed", "3", "-o", "data"],
        &["train-toy", "--data", "data", "--seed", "3", "--epochs", "2", "--dim", "128", "--hidden", "4", "-o", "fft.ckpt"],
        &["train-toy", "--data", "data", "--group", "B", "--seed", "3", "--epochs", "2", "--dim", "128", "--hidden", "4", "-o", "b.ckpt"],
        &["train-toy", "--data", "data", "--lora", "--rank", "2", "--base", "fft.ckpt", "--seed", "3", "--epochs", "1", "-o", "lora.ckpt"],
        &["predict", "fft.ckpt", "--data", "data", "-o", "preds.jsonl"],
        &["eval", "--preds", "preds.jsonl", "--attribute", "g", "--json", "report.json"],
    ];
    for args in steps {
        let o = run(d, args);
        assert!(o.status.success(), "{args:?}: {}", stderr(&o));
    }
    assert!(d.join("data/manifest.json").exists());
    let lines = std::fs::read_to_string(d.join("preds.jsonl")).unwrap();
    let records = tvfair::metrics::read_predictions_str(&lines).unwrap();
    assert!(!records.is_empty() && records.iter().all(|r| (0.0..=1.0).contains(&r.score)));
    let b = read_checkpoint(d.join("b.ckpt")).unwrap();
    assert_eq!(b.metadata().get("subset").map(String::as_str), Some("B"));
}
