mod common;

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use common::SMOKE;

fn fracadapt(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fracadapt")).current_dir(dir).args(args).output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn usage_and_config_errors_exit_64() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(fracadapt(d, &["frobnicate"]).status.code(), Some(64));
    assert_eq!(fracadapt(d, &["train-base"]).status.code(), Some(64), "seed is mandatory");
    assert_eq!(fracadapt(d, &["--seed", "1", "--patients", "0", "gen-cohort"]).status.code(), Some(64));
    assert_eq!(fracadapt(d, &["--seed", "1", "--pairing", "organ", "report"]).status.code(), Some(64));
    assert_eq!(fracadapt(d, &["--seed", "1", "gen-cohort", "--institute", "c"]).status.code(), Some(64));
    fs::write(d.join("bad.toml"), "seed = 1\n[train]\nsteps = 3\n").unwrap();
    let o = fracadapt(d, &["--config", "bad.toml", "train-base"]);
    assert_eq!(o.status.code(), Some(64));
    assert!(stderr(&o).contains("steps"), "{}", stderr(&o));
    assert_eq!(fracadapt(d, &["--help"]).status.code(), Some(0));
}

#[test]
fn missing_data_exits_65_and_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let o = fracadapt(dir.path(), &["--seed", "1", "--out", "nowhere", "train-base"]);
    assert_eq!(o.status.code(), Some(65));
    assert!(stderr(&o).contains("nowhere/cohort/institute-a"), "{}", stderr(&o));
    fs::write(dir.path().join("m.csv"), "patient,fraction\n").unwrap();
    let o = fracadapt(dir.path(), &["--seed", "1", "report", "--metrics", "m.csv"]);
    assert_eq!(o.status.code(), Some(65));
    assert!(stderr(&o).contains("m.csv"));
}

#[test]
fn subcommands_chain_and_single_images_segment() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("smoke.toml"), SMOKE).unwrap();
    for cmd in ["gen-cohort", "train-base", "adapt", "predict", "evaluate", "report"] {
        let o = fracadapt(d, &["--config", "smoke.toml", "--patients", "1", cmd]);
        assert!(o.status.success(), "{cmd}: {}", stderr(&o));
    }
    assert!(d.join("out/report/tables.txt").is_file());
    let o = fracadapt(
        d,
        &[
            "predict",
            "--checkpoint",
            "out/models/base_a/base.ckpt",
            "--image",
            "out/cohort/institute-b/patient-000/fraction-1/image.mha",
            "--output",
            "seg.mha",
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let seg = fracadapt::volume::read_labels(d.join("seg.mha")).unwrap();
    assert_eq!(seg.dims(), [71, 71, 21]);
}
