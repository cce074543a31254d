//! End-to-end tests of the `glab` binary: pipeline plumbing, determinism of
//! manifest reruns, eval identities, and error reporting.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

fn glab() -> Command {
    Command::new(env!("CARGO_BIN_EXE_glab"))
}

fn tmp_dir(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join("glab-cli-tests").join(name);
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}

fn write_cfg(dir: &Path, body: &str) -> PathBuf {
    let path = dir.join("exp.cfg");
    fs::write(&path, body).unwrap();
    path
}

/// Tiny but complete single-label experiment configuration.
fn small_cfg(dir: &Path, out: &str) -> PathBuf {
    write_cfg(
        dir,
        &format!(
            "dataset.mode = single-label\n\
             dataset.count = 24\n\
             dataset.height = 16\n\
             dataset.width = 16\n\
             train.epochs = 4\n\
             train.lr = 0.05\n\
             capture.count = 3\n\
             attack.strategy = DLG\n\
             attack.max_iterations = 60\n\
             bench.strategies = DLG,GGI\n\
             output.dir = {out}\n"
        ),
    )
}

fn run_ok(cmd: &str, cfg: &Path, sets: &[&str]) {
    let mut c = glab();
    c.arg(cmd).arg("--config").arg(cfg);
    for s in sets {
        c.arg("--set").arg(s);
    }
    let output = c.output().unwrap();
    assert!(
        output.status.success(),
        "glab {cmd} failed:\n{}",
        String::from_utf8_lossy(&output.stderr)
    );
}

fn read_all_outputs(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                // Manifests embed the output directory; everything else must
                // reproduce byte-for-byte.
                if rel.starts_with("manifest-") {
                    continue;
                }
                files.push((rel, fs::read(&path).unwrap()));
            }
        }
    }
    files.sort();
    files
}

#[test]
fn pipeline_end_to_end_and_rerun_is_byte_identical() {
    let dir = tmp_dir("pipeline");
    let out_a = dir.join("a");
    let cfg = small_cfg(&dir, &out_a.display().to_string());

    run_ok("train", &cfg, &[]);
    run_ok("capture", &cfg, &[]);
    run_ok("attack", &cfg, &[]);
    run_ok("eval", &cfg, &[]);

    for file in ["model.mgic", "ncb.mgic", "attack_DLG.csv", "metrics_DLG.csv", "train_loss.csv"] {
        assert!(out_a.join(file).exists(), "missing {file}");
    }
    assert!(out_a.join("recon/DLG/rec_000.pgm").exists());
    assert!(out_a.join("truth/truth_000.pgm").exists());
    assert!(out_a.join("captures/cap_000.mgig").exists());

    // Rerun the whole pipeline from the written manifest into a second
    // directory: every CSV and image must match byte-for-byte.
    let manifest = out_a.join("manifest-eval.txt");
    let out_b = dir.join("b");
    for cmd in ["train", "capture", "attack", "eval"] {
        run_ok(cmd, &manifest, &[&format!("output.dir={}", out_b.display())]);
    }
    let a = read_all_outputs(&out_a);
    let b = read_all_outputs(&out_b);
    assert_eq!(a.len(), b.len());
    for ((name_a, bytes_a), (name_b, bytes_b)) in a.iter().zip(&b) {
        assert_eq!(name_a, name_b);
        assert_eq!(bytes_a, bytes_b, "output {name_a} differs between reruns");
    }
}

#[test]
fn eval_of_truth_as_reconstruction_gives_the_sentinel_row() {
    let dir = tmp_dir("eval-identity");
    let out = dir.join("out");
    let cfg = small_cfg(&dir, &out.display().to_string());
    run_ok("train", &cfg, &[]);
    run_ok("capture", &cfg, &[]);
    run_ok("attack", &cfg, &[]);

    // Overwrite each reconstruction with its ground truth.
    for i in 0..3 {
        fs::copy(
            out.join(format!("truth/truth_{i:03}.pgm")),
            out.join(format!("recon/DLG/rec_{i:03}.pgm")),
        )
        .unwrap();
    }
    run_ok("eval", &cfg, &[]);
    let metrics = fs::read_to_string(out.join("metrics_DLG.csv")).unwrap();
    for line in metrics.lines().skip(1) {
        let cells: Vec<&str> = line.split(',').collect();
        assert_eq!(cells[1], "inf", "psnr sentinel missing: {line}");
        let ssim: f64 = cells[2].parse().unwrap();
        assert!((ssim - 1.0).abs() < 1e-12, "ssim not 1.0: {line}");
    }
}

#[test]
fn bench_writes_rows_and_aggregates_for_every_strategy() {
    let dir = tmp_dir("bench");
    let out = dir.join("out");
    let cfg = small_cfg(&dir, &out.display().to_string());
    run_ok("train", &cfg, &[]);
    run_ok("capture", &cfg, &[]);
    run_ok("bench", &cfg, &[]);

    let bench = fs::read_to_string(out.join("bench.csv")).unwrap();
    let rows: Vec<&str> = bench.lines().skip(1).collect();
    assert_eq!(rows.len(), 6, "2 strategies x 3 captures");
    assert!(rows.iter().any(|r| r.starts_with("DLG,")));
    assert!(rows.iter().any(|r| r.starts_with("GGI,")));

    let summary = fs::read_to_string(out.join("bench_summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 3, "header + one row per strategy");
    assert!(out.join("bench/DLG/rec_002.pgm").exists());
    assert!(out.join("bench/GGI/rec_002.pgm").exists());
}

#[test]
fn missing_inputs_and_bad_configs_exit_nonzero() {
    let dir = tmp_dir("errors");
    let out = dir.join("out");
    let cfg = small_cfg(&dir, &out.display().to_string());

    // Attack before train/capture: missing model file.
    let output = glab().arg("attack").arg("--config").arg(&cfg).output().unwrap();
    assert!(!output.status.success());
    assert!(!output.stderr.is_empty());

    // Unknown config key.
    let bad = write_cfg(&dir, "no.such.key = 1\n");
    let output = glab().arg("train").arg("--config").arg(&bad).output().unwrap();
    assert!(!output.status.success());
    assert!(String::from_utf8_lossy(&output.stderr).contains("no.such.key"));

    // Unknown strategy via --set.
    let output = glab()
        .arg("train")
        .arg("--config")
        .arg(&cfg)
        .arg("--set")
        .arg("attack.strategy=XYZ")
        .output()
        .unwrap();
    assert!(!output.status.success());

    // Unknown subcommand.
    let output = glab().arg("frobnicate").output().unwrap();
    assert!(!output.status.success());
}

#[test]
fn set_overrides_are_applied() {
    let dir = tmp_dir("set-override");
    let out = dir.join("out");
    let cfg = small_cfg(&dir, &out.display().to_string());
    run_ok("train", &cfg, &["capture.count=2"]);
    run_ok("capture", &cfg, &["capture.count=2"]);
    assert!(out.join("captures/cap_001.mgig").exists());
    assert!(!out.join("captures/cap_002.mgig").exists());
}
