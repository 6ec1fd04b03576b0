use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use attnage::data::{generate_dataset, DatasetConfig};
use attnage::Profile;

fn attnage(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_attnage")).args(args).output().expect("spawn attnage")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Every file under `root`, relative path and contents, sorted by path.
fn tree(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push((path.strip_prefix(root).unwrap().to_path_buf(), fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

const SUBCOMMANDS: [&str; 5] = ["gen-data", "train", "eval", "attend", "sweep"];

#[test]
fn help_documents_every_flag() {
    for sub in SUBCOMMANDS {
        let out = attnage(&[sub, "--help"]);
        assert_eq!(code(&out), 0, "{sub}");
        let help = stdout(&out);
        let usage = help.lines().find(|l| l.starts_with("Usage:")).unwrap().to_string();
        for line in help.lines().map(str::trim_start).filter(|l| l.starts_with("--")) {
            let flag = line.split_whitespace().next().unwrap();
            if flag == "--help" {
                continue;
            }
            // a flag is either required (shown in the synopsis) or has a default
            assert!(line.contains("[default:") || usage.contains(flag), "{sub}: {line}");
        }
    }
    for sub in ["train", "sweep"] {
        let help = stdout(&attnage(&[sub, "--help"]));
        assert!(help.contains("0.3 for resnet18, 0.4 for resnet50"), "{sub} help lacks tau defaults");
    }
}

#[test]
fn usage_errors_exit_one_with_synopsis() {
    let cases: [&[&str]; 5] = [
        &[],
        &["frobnicate"],
        &["gen-data", "--out", "x", "--bogus"],
        &["train", "--stage", "global", "--data", "d", "--out", "o", "--variant", "resnet99"],
        &["eval", "--data", "d"],
    ];
    for args in cases {
        let out = attnage(args);
        assert_eq!(code(&out), 1, "{args:?}: {}", stderr(&out));
        assert!(stderr(&out).contains("Usage"), "{args:?}: {}", stderr(&out));
    }
}

#[test]
fn runtime_errors_exit_two() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nothing");
    let out = attnage(&["eval", "--model", p(&missing), "--data", p(&missing), "--branch", "global"]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));

    let data = tmp.path().join("d");
    assert_eq!(code(&attnage(&["gen-data", "--out", p(&data), "--subjects", "4"])), 0);
    let out = attnage(&["train", "--stage", "local", "--data", p(&data), "--out", p(&tmp.path().join("m"))]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("global stage"), "{}", stderr(&out));
}

#[test]
fn gen_data_is_deterministic_and_matches_the_library() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b, lib) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("lib"));
    for dir in [&a, &b] {
        let out = attnage(&["gen-data", "--out", p(dir), "--subjects", "6", "--seed", "7", "--profile", "desk"]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
    }
    generate_dataset(&DatasetConfig::new(6, 7, Profile::Desk), &lib).unwrap();
    let ta = tree(&a);
    assert_eq!(ta.len(), 6 * 3 + 1);
    assert_eq!(ta, tree(&b));
    assert_eq!(ta, tree(&lib));
}

#[test]
fn config_file_supplies_defaults_and_flags_win() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.cfg");
    fs::write(&cfg, "# dataset settings\nsubjects = 3\nseed=5\n").unwrap();
    let (got, want) = (tmp.path().join("got"), tmp.path().join("want"));
    let out = attnage(&["gen-data", "--config", p(&cfg), "--out", p(&got), "--seed", "9"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    generate_dataset(&DatasetConfig::new(3, 9, Profile::Desk), &want).unwrap();
    assert_eq!(tree(&got), tree(&want));

    fs::write(&cfg, "subjects\n").unwrap();
    assert_eq!(code(&attnage(&["gen-data", "--config", p(&cfg), "--out", p(&got)])), 1);
    fs::write(&cfg, "colour=blue\n").unwrap();
    assert_eq!(code(&attnage(&["gen-data", "--config", p(&cfg), "--out", p(&got)])), 1);
}

fn read_pgm_dims(path: &Path) -> (usize, usize) {
    let img = attnage::data::read_pgm(path).unwrap();
    (img.rows(), img.cols())
}

#[test]
fn staged_pipeline_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("d");
    let ckpt = tmp.path().join("ckpt");
    assert_eq!(code(&attnage(&["gen-data", "--out", p(&data), "--subjects", "20"])), 0);
    let quick = ["--epochs", "1", "--head-epochs", "2", "--batch-size", "8"];
    let train = |stage: &str, out: &Path| {
        let mut args = vec!["train", "--stage", stage, "--view", "axial", "--variant", "resnet18", "--profile", "desk"];
        args.extend(["--data", p(&data), "--out", p(out)]);
        args.extend(quick);
        let o = attnage(&args);
        assert_eq!(code(&o), 0, "{stage}: {}", stderr(&o));
    };
    train("global", &ckpt);

    // reruns are byte-identical
    let again = tmp.path().join("again");
    train("global", &again);
    assert_eq!(tree(&ckpt), tree(&again));

    let preds = tmp.path().join("preds");
    let out = attnage(&[
        "eval", "--model", p(&ckpt), "--data", p(&data), "--split", "test", "--branch", "global", "--out", p(&preds),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let line = stdout(&out);
    let fields: Vec<&str> = line.split_whitespace().collect();
    assert_eq!(fields.len(), 3, "{line}");
    assert!(fields[0].strip_prefix("R2=").unwrap().parse::<f64>().is_ok(), "{line}");
    assert!(fields[1].strip_prefix("MAE=").unwrap().parse::<f64>().is_ok(), "{line}");
    assert_eq!(fields[2], "days");
    let csv = fs::read_to_string(preds.join("predictions.csv")).unwrap();
    assert!(csv.starts_with("age_true,age_pred\n"));

    let image = data.join("images/axial_0000.pgm");
    let viz = tmp.path().join("viz/");
    let prefix = format!("{}/", viz.display());
    let out = attnage(&["attend", "--model", p(&ckpt.join("axial.gagb")), "--image", p(&image), "--out-prefix", &prefix]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(read_pgm_dims(&viz.join("heatmap.pgm")), (12, 12));
    assert_eq!(read_pgm_dims(&viz.join("crop.pgm")), (96, 96));
    let coords: Vec<usize> = fs::read_to_string(viz.join("box.txt"))
        .unwrap()
        .split_whitespace()
        .map(|s| s.parse().unwrap())
        .collect();
    assert_eq!(coords.len(), 4);
    assert!(coords[0] <= coords[2] && coords[1] <= coords[3] && coords[2] < 96 && coords[3] < 96);

    train("local", &ckpt);
    train("combine", &ckpt);
    for branch in ["local", "average", "fusion"] {
        let out = attnage(&["eval", "--model", p(&ckpt), "--data", p(&data), "--branch", branch]);
        assert_eq!(code(&out), 0, "{branch}: {}", stderr(&out));
    }

    let sweep = tmp.path().join("sweep");
    let mut args = vec!["sweep", "--from", p(&ckpt), "--taus", "0.3,0.05", "--data", p(&data), "--out", p(&sweep)];
    args.extend(quick);
    let out = attnage(&args);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let csv = fs::read_to_string(sweep.join("sweep.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows[0], "tau,r2_test");
    assert!(rows[1].starts_with("0.05,") && rows[2].starts_with("0.3,"), "{csv}");
    assert!(sweep.join("tau_0.05/axial.gagb").exists());
}
