//! End-to-end checks of the `ibcnn` binary: exit codes and output files.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: [&str; 8] = [
    "--set",
    "dataset.n_train=200",
    "--set",
    "dataset.n_test=100",
    "--set",
    "train.epochs=1",
    "--set",
    "train.learning_rate=0.2",
];

fn ibcnn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ibcnn")).args(args).output().unwrap()
}

fn tiny(out: &Path, args: &[&str]) -> Output {
    let mut all = vec!["--out", out.to_str().unwrap()];
    all.extend_from_slice(&TINY);
    all.extend_from_slice(args);
    ibcnn(&all)
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn read_csv(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut r = csv::Reader::from_path(path).unwrap();
    let header = r.headers().unwrap().iter().map(String::from).collect();
    let rows = r.records().map(|rec| rec.unwrap().iter().map(String::from).collect()).collect();
    (header, rows)
}

fn column(header: &[String], name: &str) -> usize {
    header.iter().position(|h| h == name).unwrap_or_else(|| panic!("no column {name}"))
}

#[test]
fn help_and_version_exit_zero() {
    assert_eq!(ibcnn(&["--help"]).status.code(), Some(0));
    assert_eq!(ibcnn(&["train", "--help"]).status.code(), Some(0));
    assert_eq!(ibcnn(&["--version"]).status.code(), Some(0));
}

#[test]
fn usage_errors_exit_one() {
    let cases: [&[&str]; 6] = [
        &["--bogus", "train"],
        &[],
        &["--head", "nope", "train"],
        &["--set", "train.epochs", "train"],
        &["--set", "train.batch_size=0", "train"],
        &["--config", "/definitely/not/here.toml", "train"],
    ];
    for args in cases {
        let o = ibcnn(args);
        assert_eq!(o.status.code(), Some(1), "{args:?}: {}", stderr(&o));
    }
    let o = ibcnn(&["--head", "nope", "train"]);
    assert!(stderr(&o).contains("head"), "{}", stderr(&o));
    let o = ibcnn(&["--set", "train.batch_size=0", "train"]);
    assert!(stderr(&o).contains("batch_size"), "{}", stderr(&o));
}

#[test]
fn missing_checkpoint_is_runtime_error_naming_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("absent.ibck");
    let o = ibcnn(&["eval", "--checkpoint", missing.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("absent.ibck"), "{}", stderr(&o));
}

#[test]
fn train_is_reproducible_and_eval_reads_its_checkpoint() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for dir in [&a, &b] {
        let o = tiny(dir.path(), &["--head", "ibcnn", "train"]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    }
    // config.toml records `out`, so only the hash-stamped outputs are compared
    for name in ["train_log.csv", "checkpoint.ibck"] {
        let x = fs::read(a.path().join(name)).unwrap();
        let y = fs::read(b.path().join(name)).unwrap();
        assert!(x == y, "{name} differs between identical runs");
    }

    let (header, rows) = read_csv(&a.path().join("train_log.csv"));
    assert_eq!(rows.len(), 2);
    let (h, s) = (column(&header, "config_hash"), column(&header, "seed"));
    assert!(rows.iter().all(|r| r[h].len() == 16 && r[s] == "7"));

    let ckpt = a.path().join("checkpoint.ibck");
    let eval_dir = a.path().join("eval");
    let o = tiny(&eval_dir, &["eval", "--checkpoint", ckpt.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let (header, rows) = read_csv(&eval_dir.join("eval.csv"));
    assert_eq!(rows.len(), 1);
    let f1: f64 = rows[0][column(&header, "f1")].parse().unwrap();
    assert!((0.0..=1.0).contains(&f1));
}

#[test]
fn eval_on_a_synthesized_container() {
    let dir = tempfile::tempdir().unwrap();
    let o = tiny(dir.path(), &["synth"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let o = tiny(dir.path(), &["--head", "cnn", "train"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let ckpt = dir.path().join("checkpoint.ibck");
    let data = dir.path().join("test.ibds");
    let o = tiny(
        dir.path(),
        &["eval", "--checkpoint", ckpt.to_str().unwrap(), "--dataset", data.to_str().unwrap()],
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));

    fs::write(&data, b"IBDS garbage").unwrap();
    let o = ibcnn(&["eval", "--checkpoint", ckpt.to_str().unwrap(), "--dataset", data.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn compare_writes_runs_and_aggregates() {
    let dir = tempfile::tempdir().unwrap();
    let o = tiny(dir.path(), &["--repeats", "2", "compare", "--heads", "cnn,ibcnn"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let (header, rows) = read_csv(&dir.path().join("compare.csv"));
    assert_eq!(header.len(), 13);
    assert_eq!(rows.len(), 2 * 2 + 2);
    let (h, s, kind, head) = (
        column(&header, "config_hash"),
        column(&header, "seed"),
        column(&header, "row"),
        column(&header, "head"),
    );
    assert_eq!(rows.iter().filter(|r| r[kind] == "run").count(), 4);
    for name in ["cnn", "ibcnn"] {
        assert_eq!(rows.iter().filter(|r| r[head] == name).count(), 3);
    }
    assert!(rows.iter().all(|r| !r[h].is_empty() && !r[s].is_empty()));
}

#[test]
fn sweep_records_failed_points_and_exits_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let o = tiny(
        dir.path(),
        &[
            "--repeats",
            "1",
            "sweep",
            "--param",
            "learning-rate",
            "--grid",
            "0.2,1e300",
            "--heads",
            "cnn,ibcnn",
        ],
    );
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    let (header, rows) = read_csv(&dir.path().join("sweep.csv"));
    assert_eq!(header.len(), 11);
    assert_eq!(rows.len(), 4);
    let (h, value, status, f1, error) = (
        column(&header, "config_hash"),
        column(&header, "value"),
        column(&header, "status"),
        column(&header, "f1_mean"),
        column(&header, "error"),
    );
    for r in &rows {
        match r[value].as_str() {
            "0.2" => {
                assert_eq!(r[status], "ok");
                assert!(r[f1].parse::<f64>().is_ok());
            }
            "1e300" => {
                assert_eq!(r[status], "failed");
                assert!(r[f1].is_empty() && r[error].contains("diverged"), "{r:?}");
            }
            v => panic!("unexpected grid value {v}"),
        }
    }
    assert_ne!(rows[0][h], rows[3][h], "grid points share a config hash");
}
