use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn tsvr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tsvr")).args(args).output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Two classes of length-16 series: a rising ramp and a falling ramp, each
/// rotated by its index.
fn write_toy(root: &Path) {
    let dir = root.join("data/toy");
    fs::create_dir_all(&dir).unwrap();
    let row = |label: usize, i: usize| {
        let vals: Vec<String> = (0..16)
            .map(|t| {
                let x = ((t + i) % 16) as f32;
                format!("{}", if label == 1 { x } else { 15.0 - x })
            })
            .collect();
        format!("{label}\t{}\n", vals.join("\t"))
    };
    let train: String = (0..6).map(|i| row(1 + i % 2, i)).collect();
    let test: String = (6..10).map(|i| row(1 + i % 2, i)).collect();
    fs::write(dir.join("toy_TRAIN.tsv"), train).unwrap();
    fs::write(dir.join("toy_TEST.tsv"), test).unwrap();
}

fn write_config(root: &Path) -> String {
    let text = format!(
        "data-root = {}\ncache-dir = {}\noutput-dir = {}\ndatasets = toy\n\
         width = 64\nheight = 48\nfilters = 8\nepochs = 3\nbatch-size = 4\n\
         samples-per-dataset = 4\nshifts-per-sample = 2\nrestarts = 2\n",
        root.join("data").display(),
        root.join("cache").display(),
        root.join("out").display()
    );
    let p = root.join("run.conf");
    fs::write(&p, text).unwrap();
    p.display().to_string()
}

#[test]
fn full_run_and_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    write_toy(dir.path());
    let conf = write_config(dir.path());

    let o = tsvr(&["render", "--config", &conf]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("rendered 10 images"));

    let o = tsvr(&["train", "--config", &conf]);
    assert!(o.status.success(), "{}", stderr(&o));
    let loss = fs::read_to_string(dir.path().join("out/loss.csv")).unwrap();
    assert_eq!(loss.lines().count(), 4);

    let o = tsvr(&["evaluate", "--config", &conf, "--mode", "ldvr,pdvr,ed"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let scores = fs::read_to_string(dir.path().join("out/scores_nmi.csv")).unwrap();
    assert!(scores.starts_with("dataset,ldvr,pdvr,ed\ntoy,"));
    assert!(dir.path().join("out/ranks_nmi.csv").is_file());

    let o = tsvr(&["dump-activations", "--config", &conf, "--dataset", "toy", "--samples", "0"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let pgms = fs::read_dir(dir.path().join("out/activations")).unwrap().count();
    assert_eq!(pgms, 8);

    // Usage errors.
    assert_eq!(tsvr(&["evaluate", "--config", &conf, "--mode", "fancy"]).status.code(), Some(2));
    assert_eq!(tsvr(&["train", "--no-such-flag"]).status.code(), Some(2));
    assert_eq!(tsvr(&["train", "--config", "/nonexistent/run.conf"]).status.code(), Some(2));
    // Data errors.
    let o = tsvr(&["evaluate", "--config", &conf, "--datasets", "absent"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("absent"));
}

#[test]
fn corrupt_line_is_reported_with_file_and_line() {
    let dir = tempfile::tempdir().unwrap();
    write_toy(dir.path());
    let conf = write_config(dir.path());
    let train = dir.path().join("data/toy/toy_TRAIN.tsv");
    let mut text = fs::read_to_string(&train).unwrap();
    text.push_str("1\t0.5\tbanana\n");
    fs::write(&train, text).unwrap();
    let o = tsvr(&["render", "--config", &conf]);
    assert_eq!(o.status.code(), Some(3));
    let msg = stderr(&o);
    assert!(msg.contains("toy_TRAIN.tsv") && msg.contains("toy_TRAIN.tsv:7:"), "{msg}");
}

#[test]
fn divergence_is_a_numeric_failure() {
    let dir = tempfile::tempdir().unwrap();
    write_toy(dir.path());
    let conf = write_config(dir.path());
    let o = tsvr(&["train", "--config", &conf, "--lr", "3e38"]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
    assert!(stderr(&o).contains("epoch"));
    assert_eq!(tsvr(&["train", "--config", &conf, "--lr", "inf"]).status.code(), Some(2));
}

#[test]
fn flags_override_file_and_runs_are_reproducible() {
    let run = || {
        let dir = tempfile::tempdir().unwrap();
        write_toy(dir.path());
        let conf = write_config(dir.path());
        assert!(tsvr(&["train", "--config", &conf, "--seed", "5"]).status.success());
        assert!(tsvr(&["evaluate", "--config", &conf, "--seed", "5", "--mode", "ldvr,pdvr"]).status.success());
        (
            fs::read(dir.path().join("out/head.tsv1")).unwrap(),
            fs::read(dir.path().join("out/scores_nmi.csv")).unwrap(),
        )
    };
    assert_eq!(run(), run());
}
