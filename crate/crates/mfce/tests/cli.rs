//! End-to-end tests of the `mfce` binary: every subcommand, exit codes, and
//! the determinism of the files it writes.

use std::path::Path;
use std::process::Output;

use serde_json::json;

fn mfce(args: &[&str]) -> Output {
    std::process::Command::new(env!("CARGO_BIN_EXE_mfce"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn mfce_with_env(args: &[&str], key: &str, value: &str) -> Output {
    std::process::Command::new(env!("CARGO_BIN_EXE_mfce"))
        .args(args)
        .env(key, value)
        .output()
        .expect("binary runs")
}

fn assert_code(output: &Output, code: i32) {
    assert_eq!(
        output.status.code(),
        Some(code),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&output.stdout),
        String::from_utf8_lossy(&output.stderr)
    );
}

fn base_config(corpus_file: &Path, out_dir: &Path) -> serde_json::Value {
    json!({
        "corpus": {
            "seed": 1, "num_states": 5, "mel_bins": 6,
            "num_utterances": 12, "min_frames": 60, "max_frames": 90
        },
        "model": { "preset": "toy", "width": 6 },
        "train": { "delta": 2, "batch_size": 8, "seed": 3, "epochs": 2 },
        "paths": { "corpus_file": corpus_file, "out_dir": out_dir }
    })
}

fn write_config(dir: &Path, name: &str, value: &serde_json::Value) -> String {
    let path = dir.join(name);
    std::fs::write(&path, serde_json::to_string_pretty(value).unwrap()).unwrap();
    path.to_str().unwrap().to_string()
}

/// Drops the wall_seconds column so deterministic runs compare equal.
fn strip_wall(csv: &str) -> Vec<Vec<String>> {
    csv.lines()
        .map(|line| {
            let mut cells: Vec<String> = line.split(',').map(str::to_string).collect();
            cells.remove(5);
            cells
        })
        .collect()
}

#[test]
fn gen_writes_byte_identical_corpora() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    std::fs::create_dir(&out).unwrap();
    let first = dir.path().join("first.bin");
    let second = dir.path().join("second.bin");
    let config_a = write_config(dir.path(), "a.json", &base_config(&first, &out));
    let config_b = write_config(dir.path(), "b.json", &base_config(&second, &out));

    assert_code(&mfce(&["gen", "--config", &config_a]), 0);
    assert_code(&mfce(&["gen", "--config", &config_b]), 0);
    let a = std::fs::read(&first).unwrap();
    let b = std::fs::read(&second).unwrap();
    assert!(!a.is_empty());
    assert_eq!(a, b);
}

#[test]
fn train_writes_metrics_checkpoints_and_reproduces_them() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus.bin");
    let out_a = dir.path().join("out_a");
    let out_b = dir.path().join("out_b");
    std::fs::create_dir(&out_a).unwrap();
    std::fs::create_dir(&out_b).unwrap();
    let config = write_config(dir.path(), "config.json", &base_config(&corpus, &out_a));

    assert_code(&mfce(&["gen", "--config", &config]), 0);
    assert_code(&mfce(&["train", "--config", &config]), 0);

    let csv = std::fs::read_to_string(out_a.join("metrics.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(
        lines[0],
        "epoch,train_nll,heldout_nll,heldout_fer,labels_processed,wall_seconds,lr"
    );
    assert_eq!(lines.len(), 3, "header plus one row per epoch:\n{csv}");
    for (i, line) in lines[1..].iter().enumerate() {
        let cells: Vec<&str> = line.split(',').collect();
        assert_eq!(cells.len(), 7);
        assert_eq!(cells[0], (i + 1).to_string());
        assert!(cells[1].parse::<f64>().unwrap().is_finite());
        assert!(cells[4].parse::<usize>().unwrap() > 0);
    }
    for epoch in 0..=2 {
        assert!(
            out_a.join(format!("ckpt_epoch{epoch}")).exists(),
            "ckpt_epoch{epoch}"
        );
    }

    assert_code(
        &mfce(&[
            "train",
            "--config",
            &config,
            "--out",
            out_b.to_str().unwrap(),
        ]),
        0,
    );
    let csv_b = std::fs::read_to_string(out_b.join("metrics.csv")).unwrap();
    assert_eq!(strip_wall(&csv), strip_wall(&csv_b));
    for epoch in 0..=2 {
        let name = format!("ckpt_epoch{epoch}");
        assert_eq!(
            std::fs::read(out_a.join(&name)).unwrap(),
            std::fs::read(out_b.join(&name)).unwrap(),
            "{name} should be bitwise reproducible"
        );
    }
}

#[test]
fn inspect_reports_the_receptive_field_and_cost_lines() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus.bin");
    let out = dir.path().join("out");
    std::fs::create_dir(&out).unwrap();

    let mut acoustic = base_config(&corpus, &out);
    acoustic["model"] = json!({ "preset": "acoustic", "width": 4 });
    acoustic["corpus"]["mel_bins"] = json!(16);
    let config = write_config(dir.path(), "acoustic.json", &acoustic);
    let output = mfce(&["inspect", "--config", &config]);
    assert_code(&output, 0);
    let stdout = String::from_utf8(output.stdout).unwrap();
    assert!(stdout.contains("receptive field: 53 frames"), "{stdout}");
    assert_eq!(
        stdout.lines().filter(|l| l.starts_with("delta ")).count(),
        5
    );

    let toy = base_config(&corpus, &out);
    let config = write_config(dir.path(), "toy.json", &toy);
    let output = mfce(&[
        "inspect",
        "--config",
        &config,
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_code(&output, 0);
    let stdout = String::from_utf8(output.stdout).unwrap();
    assert!(stdout.contains("receptive field: 7 frames"), "{stdout}");
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("cost_report.json")).unwrap())
            .unwrap();
    for key in [
        "l_m",
        "delta",
        "analytic_ratio",
        "measured_ratio",
        "sharing_factor",
    ] {
        assert!(report.get(key).is_some(), "cost report is missing {key}");
    }
    assert_eq!(report["l_m"], json!(7));
    assert_eq!(report["delta"], json!(2));
}

#[test]
fn sweep_matches_train_and_merges_the_results() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus.bin");
    let train_out = dir.path().join("train_out");
    let sweep_out = dir.path().join("sweep_out");
    std::fs::create_dir(&train_out).unwrap();
    std::fs::create_dir(&sweep_out).unwrap();

    let mut value = base_config(&corpus, &train_out);
    value["train"]["delta"] = json!(0);
    value["train"]["epochs"] = json!(1);
    let config = write_config(dir.path(), "config.json", &value);

    assert_code(&mfce(&["gen", "--config", &config]), 0);
    assert_code(&mfce(&["train", "--config", &config]), 0);
    let output = mfce_with_env(
        &[
            "sweep",
            "--config",
            &config,
            "--deltas",
            "0,2",
            "--out",
            sweep_out.to_str().unwrap(),
        ],
        "MFCE_THREADS",
        "1",
    );
    assert_code(&output, 0);

    let train_csv = std::fs::read_to_string(train_out.join("metrics.csv")).unwrap();
    let delta0_csv = std::fs::read_to_string(sweep_out.join("delta0/metrics.csv")).unwrap();
    assert_eq!(
        strip_wall(&train_csv),
        strip_wall(&delta0_csv),
        "a sweep at delta 0 must reproduce a plain training run"
    );
    assert!(sweep_out.join("delta2/metrics.csv").exists());
    assert!(sweep_out.join("delta2/ckpt_epoch1").exists());

    let sweep_csv = std::fs::read_to_string(sweep_out.join("sweep.csv")).unwrap();
    let lines: Vec<&str> = sweep_csv.lines().collect();
    assert_eq!(
        lines[0],
        "delta,epoch,heldout_nll,heldout_fer,wall_seconds,labels_processed"
    );
    assert_eq!(lines.len(), 3, "one row per (delta, epoch):\n{sweep_csv}");
    assert!(lines[1].starts_with("0,1,"));
    assert!(lines[2].starts_with("2,1,"));

    // The merged heldout numbers must be the per-delta training numbers.
    let delta0_row: Vec<&str> = delta0_csv.lines().nth(1).unwrap().split(',').collect();
    let merged_row: Vec<&str> = lines[1].split(',').collect();
    assert_eq!(delta0_row[2], merged_row[2], "heldout_nll");
    assert_eq!(delta0_row[3], merged_row[3], "heldout_fer");
}

#[test]
fn config_problems_exit_with_code_2_and_leave_no_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus.bin");
    let out = dir.path().join("out");
    std::fs::create_dir(&out).unwrap();

    // Unknown field.
    let mut bad = base_config(&corpus, &out);
    bad["train"]["learning"] = json!(0.5);
    let config = write_config(dir.path(), "bad.json", &bad);
    assert_code(&mfce(&["train", "--config", &config]), 2);
    assert_eq!(
        std::fs::read_dir(&out).unwrap().count(),
        0,
        "no partial outputs"
    );

    // Invalid JSON.
    let broken = dir.path().join("broken.json");
    std::fs::write(&broken, "{ nope").unwrap();
    assert_code(&mfce(&["gen", "--config", broken.to_str().unwrap()]), 2);
    assert!(!corpus.exists());

    // Missing output directory is never created.
    let missing_out = dir.path().join("does_not_exist");
    let value = base_config(&corpus, &missing_out);
    let config = write_config(dir.path(), "missing_out.json", &value);
    assert_code(&mfce(&["train", "--config", &config]), 2);
    assert!(!missing_out.exists());
    assert_code(&mfce(&["sweep", "--config", &config, "--deltas", "0"]), 2);
    assert!(!missing_out.exists());

    // Corpus parent directory must exist for gen.
    let orphan = dir.path().join("nowhere").join("corpus.bin");
    let value = base_config(&orphan, &out);
    let config = write_config(dir.path(), "orphan.json", &value);
    assert_code(&mfce(&["gen", "--config", &config]), 2);

    // Unknown subcommands and flags are usage errors.
    assert_code(&mfce(&["explode"]), 2);
}

#[test]
fn runtime_failures_exit_with_code_1() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus.bin");
    let out = dir.path().join("out");
    std::fs::create_dir(&out).unwrap();
    let config = write_config(dir.path(), "config.json", &base_config(&corpus, &out));

    // Training without a corpus file is a runtime failure, not a config one.
    let output = mfce(&["train", "--config", &config]);
    assert_code(&output, 1);

    // A corrupt corpus file fails cleanly.
    std::fs::write(&corpus, b"garbage").unwrap();
    assert_code(&mfce(&["train", "--config", &config]), 1);
}
