use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn vf(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vf"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .env("VF_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn files(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<(PathBuf, Vec<u8>)>) {
        for e in fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out);
    out.sort();
    out
}

/// A 40-clip dataset and a two-episode micro CNN run on it.
fn trained(dir: &Path) {
    assert_eq!(code(&vf(&["gen-data", "--count", "40", "--seed", "7", "--out", "ds"], dir)), 0);
    let o = vf(
        &["train", "--preset", "cnn-a", "--scale", "micro", "--set", "episodes=2", "--data", "ds", "--out", "run"],
        dir,
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

#[test]
fn help_and_bad_flags() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&vf(&["--help"], dir.path())), 0);
    assert_eq!(code(&vf(&["train", "--help"], dir.path())), 0);
    assert_eq!(code(&vf(&["train", "--nope"], dir.path())), 2);
    assert_eq!(code(&vf(&["gen-data", "--count", "many", "--out", "x"], dir.path())), 2);
}

#[test]
fn gen_data_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    for out in ["a", "b"] {
        let o = vf(&["gen-data", "--count", "100", "--seed", "7", "--out", out], dir.path());
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    let a = files(&dir.path().join("a"));
    assert_eq!(a.len(), 101);
    assert!(a.iter().any(|(p, _)| p == Path::new("manifest.tsv")));
    assert_eq!(a, files(&dir.path().join("b")));
}

#[test]
fn zero_strength_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = vf(&["gen-data", "--strength", "0", "--out", "ds"], dir.path());
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("strength"));
    assert!(!dir.path().join("ds").exists());
}

#[test]
fn train_eval_plot_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    trained(dir);
    let run = dir.join("run");
    for f in ["curves.csv", "result.json", "model.vfck", "config.toml"] {
        assert!(run.join(f).exists(), "{f}");
    }
    assert_eq!(fs::read_to_string(run.join("curves.csv")).unwrap().lines().count(), 3);

    let val = vf(&["eval", "run/model.vfck", "--data", "ds", "--split", "val"], dir);
    let test = vf(&["eval", "run/model.vfck", "--data", "ds", "--split", "test"], dir);
    assert_eq!(code(&val), 0, "{}", stderr(&val));
    assert_eq!(code(&test), 0);
    let out = String::from_utf8_lossy(&val.stdout);
    for field in ["accuracy", "precision", "recall", "mean loss", "confusion"] {
        assert!(out.contains(field), "{out}");
    }
    assert!(run.join("eval-val.json").exists() && run.join("eval-test.json").exists());

    let o = vf(&["plot", "run/curves.csv", "--out", "fig/a.svg"], dir);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let svg = fs::read_to_string(dir.join("fig/a.svg")).unwrap();
    assert_eq!(svg.matches("<polyline").count(), 4);
    let o = vf(&["plot", "run/curves.csv", "--compare", "run/curves.csv", "--out", "b.svg"], dir);
    assert_eq!(code(&o), 0);
    assert_eq!(fs::read_to_string(dir.join("b.svg")).unwrap().matches("stroke-dasharray").count(), 4);
}

#[test]
fn tampered_checkpoint_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    trained(dir);
    let path = dir.join("run/model.vfck");
    let mut bytes = fs::read(&path).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x40;
    fs::write(&path, bytes).unwrap();
    let o = vf(&["eval", "run/model.vfck", "--data", "ds"], dir);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).to_lowercase().contains("checksum"), "{}", stderr(&o));

    // A checkpoint paired with a different architecture fails on the config digest.
    trained(dir);
    let cfg = fs::read_to_string(dir.join("run/config.toml")).unwrap();
    fs::write(dir.join("other.toml"), cfg.replace("width_multiplier = 0.125", "width_multiplier = 0.25")).unwrap();
    let o = vf(&["eval", "run/model.vfck", "--data", "ds", "--config", "other.toml"], dir);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("digest"), "{}", stderr(&o));
}

#[test]
fn budget_truncation_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    assert_eq!(code(&vf(&["gen-data", "--count", "40", "--out", "ds"], dir)), 0);
    let o = vf(
        &["train", "--preset", "cnn-a", "--scale", "micro", "--data", "ds", "--out", "run", "--budget-min", "0.000001"],
        dir,
    );
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    let result = fs::read_to_string(dir.join("run/result.json")).unwrap();
    assert!(result.contains("\"truncated\": true"));
}

#[test]
fn missing_dataset_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let o = vf(&["train", "--preset", "cnn-a", "--data", "no/such/ds", "--out", "run"], dir.path());
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("no/such/ds"), "{}", stderr(&o));
    assert!(!dir.path().join("run").exists());
}

#[test]
fn config_errors_carry_line_numbers() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.toml");
    fs::write(&path, "name = \"x\"\nlearning_rate = 3\n").unwrap();
    let o = vf(&["train", "--config", "run.toml", "--data", "ds", "--out", "run"], dir.path());
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("line 2"), "{}", stderr(&o));
    let o = vf(&["train", "--preset", "vit-2", "--set", "droput=0", "--data", "ds", "--out", "run"], dir.path());
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("droput"));
}

#[test]
fn dropout_override_reaches_the_run_config() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    assert_eq!(code(&vf(&["gen-data", "--count", "40", "--out", "ds"], dir)), 0);
    let o = vf(
        &[
            "train", "--preset", "vit-2", "--scale", "micro", "--set", "dropout=0", "--set", "episodes=1", "--data",
            "ds", "--out", "run",
        ],
        dir,
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let cfg = fs::read_to_string(dir.join("run/config.toml")).unwrap();
    assert!(cfg.contains("dropout = 0.0"), "{cfg}");
}

#[test]
fn gradcheck_catches_an_injected_fault() {
    let dir = tempfile::tempdir().unwrap();
    let o = vf(&["gradcheck", "--component", "attention", "--component", "linear"], dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    let o = vf(&["gradcheck", "--component", "attention", "--inject-sign-flip", "attention"], dir.path());
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stdout).contains("FAIL"));
    assert_eq!(code(&vf(&["gradcheck", "--component", "nonsense"], dir.path())), 2);
}

#[test]
fn plotting_bad_curves_fails_without_output() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("empty.csv"), "").unwrap();
    let o = vf(&["plot", "empty.csv", "--out", "x.svg"], dir.path());
    assert_eq!(code(&o), 1);
    assert!(!dir.path().join("x.svg").exists());
    fs::write(
        dir.path().join("bad.csv"),
        "episode,train_loss,train_acc,val_loss,val_acc,lr,seconds\n1,0.5,0.5,0.5,0.5,0.001,1\n2,x,0.5,0.5,0.5,0.001,2\n",
    )
    .unwrap();
    let o = vf(&["plot", "bad.csv", "--out", "x.svg"], dir.path());
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("row 2"), "{}", stderr(&o));
    assert!(!dir.path().join("x.svg").exists());
}
