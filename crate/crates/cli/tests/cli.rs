use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use expcnn_core::data::load_directory;
use expcnn_core::training::{split_dataset, TrainConfig};
use tempfile::TempDir;

fn expcnn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_expcnn"))
        .args(args)
        .output()
        .expect("failed to launch expcnn")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("terminated by signal")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn small_corpus(dir: &TempDir) -> std::path::PathBuf {
    let data = dir.path().join("data");
    let out = expcnn(&["generate", "--out", s(&data), "--count", "12", "--seed", "5", "--size", "16"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    data
}

fn train_small(data: &Path, model: &Path, report: &Path, seed: &str) -> Output {
    expcnn(&[
        "train", "--data", s(data), "--input-size", "12", "--channels", "4,3", "--epochs", "2",
        "--batch", "8", "--split", "0.75", "--seed", seed, "--out", s(model), "--report", s(report),
    ])
}

fn listing(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().into_string().unwrap(), fs::read(e.path()).unwrap())
        })
        .collect();
    files.sort();
    files
}

#[test]
fn generate_writes_pairs_and_manifest() {
    let dir = TempDir::new().unwrap();
    let data = dir.path().join("d");
    let out = expcnn(&["generate", "--out", s(&data), "--count", "10", "--seed", "7", "--size", "64"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(stdout(&out).contains("wrote 20 images"));
    let files = listing(&data);
    assert_eq!(files.len(), 21);
    assert_eq!(files.iter().filter(|(n, _)| n.starts_with("pri.")).count(), 10);
    assert_eq!(files.iter().filter(|(n, _)| n.starts_with("exp.")).count(), 10);
    assert!(files.iter().any(|(n, _)| n == "manifest.tsv"));
}

#[test]
fn generate_is_deterministic() {
    let dir = TempDir::new().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        let out = expcnn(&["generate", "--out", s(d), "--count", "4", "--seed", "9", "--size", "20"]);
        assert_eq!(code(&out), 0);
    }
    assert_eq!(listing(&a), listing(&b));
}

#[test]
fn train_is_deterministic_and_reports_split() {
    let dir = TempDir::new().unwrap();
    let data = small_corpus(&dir);
    let run = |tag: &str| {
        let model = dir.path().join(format!("{tag}.bin"));
        let report = dir.path().join(format!("{tag}.tsv"));
        let out = train_small(&data, &model, &report, "3");
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        (fs::read(model).unwrap(), fs::read_to_string(report).unwrap(), stdout(&out))
    };
    let a = run("a");
    assert_eq!(a, run("b"));
    assert!(a.2.contains("train/test\t18/6"), "{}", a.2);
    let lines: Vec<&str> = a.1.lines().collect();
    assert_eq!(lines[0], "split\tepoch\tloss\tacc");
    assert!(lines[1].starts_with("train\t1\t"));
    assert!(lines[2].starts_with("train\t2\t"));
    assert!(lines[3].starts_with("test\t-\t"));
    assert_eq!(lines.len(), 4);
}

#[test]
fn different_seeds_give_different_models() {
    let dir = TempDir::new().unwrap();
    let data = small_corpus(&dir);
    let (m1, m2) = (dir.path().join("1.bin"), dir.path().join("2.bin"));
    let r = dir.path().join("r.tsv");
    assert_eq!(code(&train_small(&data, &m1, &r, "1")), 0);
    assert_eq!(code(&train_small(&data, &m2, &r, "2")), 0);
    assert_ne!(fs::read(m1).unwrap(), fs::read(m2).unwrap());
}

#[test]
fn eval_reproduces_test_row() {
    let dir = TempDir::new().unwrap();
    let data = small_corpus(&dir);
    let model = dir.path().join("m.bin");
    let report = dir.path().join("r.tsv");
    assert_eq!(code(&train_small(&data, &model, &report, "4")), 0);

    // rebuild the held-out side of the split and evaluate only that
    let set = load_directory(&data, (12, 12)).unwrap();
    let config = TrainConfig {
        train_fraction: 0.75,
        seed: 4,
        ..TrainConfig::default()
    };
    let (_, test) = split_dataset(&set, 0.75, config.split_seed()).unwrap();
    let held_out = dir.path().join("held_out");
    fs::create_dir(&held_out).unwrap();
    for sample in &test.samples {
        fs::copy(data.join(&sample.source_name), held_out.join(&sample.source_name)).unwrap();
    }

    let out = expcnn(&["eval", "--model", s(&model), "--data", s(&held_out)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let test_row = fs::read_to_string(&report)
        .unwrap()
        .lines()
        .find(|l| l.starts_with("test\t"))
        .unwrap()
        .trim_start_matches("test\t-\t")
        .to_string();
    assert_eq!(stdout(&out).trim_end(), test_row);
}

#[test]
fn eval_rejects_corrupt_model() {
    let dir = TempDir::new().unwrap();
    let data = small_corpus(&dir);
    let model = dir.path().join("m.bin");
    let report = dir.path().join("r.tsv");
    assert_eq!(code(&train_small(&data, &model, &report, "0")), 0);
    let mut bytes = fs::read(&model).unwrap();
    bytes.truncate(bytes.len() - 3);
    fs::write(&model, &bytes).unwrap();
    let out = expcnn(&["eval", "--model", s(&model), "--data", s(&data)]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("corrupt"), "{}", stderr(&out));

    fs::write(&model, b"not a model").unwrap();
    let out = expcnn(&["eval", "--model", s(&model), "--data", s(&data)]);
    assert_eq!(code(&out), 1);
}

#[test]
fn eval_on_empty_directory_fails() {
    let dir = TempDir::new().unwrap();
    let data = small_corpus(&dir);
    let model = dir.path().join("m.bin");
    let report = dir.path().join("r.tsv");
    assert_eq!(code(&train_small(&data, &model, &report, "0")), 0);
    let empty = dir.path().join("empty");
    fs::create_dir(&empty).unwrap();
    let out = expcnn(&["eval", "--model", s(&model), "--data", s(&empty)]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("no image files"), "{}", stderr(&out));
}

#[test]
fn train_rejects_ill_named_file() {
    let dir = TempDir::new().unwrap();
    let data = small_corpus(&dir);
    fs::copy(data.join("pri.0000.ppm"), data.join("img.0000.ppm")).unwrap();
    let out = train_small(&data, &dir.path().join("m.bin"), &dir.path().join("r.tsv"), "0");
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("img.0000.ppm"), "{}", stderr(&out));
}

#[cfg(not(feature = "perturb-backward"))]
#[test]
fn gradcheck_passes_with_one_line_per_layer() {
    let out = expcnn(&["gradcheck", "--seed", "0"]);
    assert_eq!(code(&out), 0, "{}", stdout(&out));
    let text = stdout(&out);
    let layers: Vec<&str> = text.lines().filter(|l| l.ends_with("\tok")).collect();
    assert_eq!(layers.len(), 5, "{text}");
    let out = expcnn(&["gradcheck", "--seed", "1", "--arch", "dense"]);
    assert_eq!(code(&out), 0);
    assert_eq!(stdout(&out).lines().filter(|l| l.starts_with("dense\t")).count(), 2);
}

#[cfg(feature = "perturb-backward")]
#[test]
fn gradcheck_detects_perturbed_backward() {
    let out = expcnn(&["gradcheck", "--seed", "0"]);
    assert_eq!(code(&out), 1, "{}", stdout(&out));
    assert!(stdout(&out).contains("FAIL"));
}

#[test]
fn params_prints_counts_and_references() {
    let out = expcnn(&["params"]);
    assert_eq!(code(&out), 0);
    let text = stdout(&out);
    assert!(text.contains("parameters\t2676866"), "{text}");
    assert!(text.contains("Conv-768, Conv-384/2, FC-2"));
    assert!(text.contains("AlexNet"));
    assert!(text.contains("ResNet50"));

    let out = expcnn(&["params", "--arch", "dense", "--hidden", "768"]);
    assert_eq!(code(&out), 0);
    assert!(stdout(&out).contains("parameters\t37751042"));

    let out = expcnn(&["params", "--arch", "conv", "--input-size", "32", "--channels", "16,8"]);
    assert!(stdout(&out).contains("parameters\t1626"));
}

#[test]
fn exit_code_two_on_flag_misuse() {
    let dir = TempDir::new().unwrap();
    let d = s(dir.path());
    let cases: &[&[&str]] = &[
        &[],
        &["frobnicate"],
        &["generate", "--count", "3"],
        &["generate", "--out", d, "--count", "0"],
        &["generate", "--out", d, "--count", "2", "--size", "4"],
        &["generate", "--out", d, "--count", "2", "--colour", "red"],
        &["train", "--data", d],
        &["train", "--data", d, "--out", "m.bin", "--split", "1.5"],
        &["train", "--data", d, "--out", "m.bin", "--lr", "-1"],
        &["train", "--data", d, "--out", "m.bin", "--epochs", "0"],
        &["train", "--data", d, "--out", "m.bin", "--arch", "rnn"],
        &["train", "--data", d, "--out", "m.bin", "--channels", "4,,2"],
        &["eval", "--model", "m.bin"],
        &["gradcheck", "--seed", "x"],
        &["params", "--channels", "8", "--hidden", "8"],
        &["params", "--arch", "conv", "--hidden", "8"],
        &["params", "--channels", "0"],
    ];
    for args in cases {
        let out = expcnn(args);
        assert_eq!(code(&out), 2, "{args:?}: {}", stderr(&out));
    }
}

#[test]
fn exit_code_one_on_runtime_errors() {
    let dir = TempDir::new().unwrap();
    let missing = dir.path().join("missing");
    let file = dir.path().join("file");
    fs::write(&file, b"x").unwrap();
    let cases: Vec<Vec<&str>> = vec![
        vec!["generate", "--out", s(&file), "--count", "1", "--size", "8"],
        vec!["train", "--data", s(&missing), "--out", s(&file)],
        vec!["train", "--data", s(dir.path()), "--out", s(&file)],
        vec!["eval", "--model", s(&missing), "--data", s(dir.path())],
    ];
    for args in &cases {
        let out = expcnn(args);
        assert_eq!(code(&out), 1, "{args:?}: {}", stderr(&out));
        assert!(stderr(&out).starts_with("error:"), "{args:?}");
    }
}
