use std::process::{Command, Output};

fn spinfer(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_spinfer")).args(args).output().expect("spawn spinfer")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn kernel_csv_has_fixed_columns_and_paired_rows() {
    let o =
        spinfer(&["kernel", "--shapes", "16x32x20,8x8x3", "--ratios", "0.75,0.9", "--threads", "1,2", "--reps", "3"]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("m,k,n,ratio,threads,path,median_ns,min_ns,speedup_vs_dense,equiv"));
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 2 * 2 * 2 * 2);
    for pair in rows.chunks(2) {
        assert_eq!((pair[0][5], pair[1][5]), ("sparse", "dense"));
        assert_eq!(pair[0][..5], pair[1][..5]);
        assert!(pair.iter().all(|r| r[9] == "true" && !r[6].is_empty()));
    }
}

#[test]
fn json_report_goes_to_the_requested_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("k.json");
    let o = spinfer(
        &[
            "kernel",
            "--shapes",
            "4x4x4",
            "--ratios",
            "0.5",
            "--threads",
            "1",
            "--reps",
            "3",
            "--format",
            "json",
            "--out",
        ]
        .into_iter()
        .chain([path.to_str().unwrap()])
        .collect::<Vec<_>>(),
    );
    assert_eq!(o.status.code(), Some(0));
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    assert_eq!(v.as_array().unwrap().len(), 2);
    assert_eq!(v[0]["path"], "sparse");
}

#[test]
fn generated_model_benchmarks_within_a_loose_budget() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("toy.snn");
    let p = path.to_str().unwrap();
    assert_eq!(spinfer(&["gen", "--preset", "toy", "--ratio", "0.8", "--out", p]).status.code(), Some(0));
    let o = spinfer(&[
        "model",
        "--model",
        p,
        "--budget-ms",
        "1000",
        "--seq-lens",
        "16",
        "--threads",
        "1",
        "--reps",
        "3",
        "--batches",
        "1,2",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    let row: Vec<&str> = text.lines().nth(1).unwrap().split(',').collect();
    assert_eq!((row[0], row[2], row[4]), ("toy", "16", "met"));
    assert!(row[5].parse::<f64>().unwrap() >= 1.0, "at least 1/budget sequences per second");
}

#[test]
fn bad_arguments_exit_two() {
    for args in [
        &["kernel", "--ratios", "1.5"][..],
        &["kernel", "--reps", "2"],
        &["model", "--preset", "nope"],
        &["verify", "--threads", "0"],
    ] {
        assert_eq!(spinfer(args).status.code(), Some(2), "{args:?}");
    }
}

#[test]
fn verify_reports_each_check() {
    let o = spinfer(&["verify", "--shapes", "32x32x16", "--ratios", "0.8", "--threads", "1"]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    for name in ["kernel-oracle", "kernel-edge-cases", "lut-exhaustive", "fusion", "runtime-reuse"] {
        assert!(text.contains(&format!("PASS {name}:")), "{text}");
    }
}
