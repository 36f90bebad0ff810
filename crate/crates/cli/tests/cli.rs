//! The binary end to end on a stack small enough to train in seconds.

use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "\
[run]
dir = artifacts
seed = 5

[train]
clips = 8
heldout = 4
samples = 1024
batch = 4
vae_steps = 3
denoiser_steps = 3
head_steps = 3
vae_crop = 1024

[vae]
res_units = 1

[denoiser]
dim = 16
layers = 2
heads = 2
mlp_mult = 1
tap_layer = 1

[latch]
dim = 16
layers = 1
heads = 2
mlp_mult = 1

[readout]
hidden = 8

[sampler]
steps = 10

[trajectories]
runs = 2
stride = 5

[eval]
runs = 2
controls = beats, intensity
";

fn latch(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_latch")).args(args).output().expect("spawn latch")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn files(dir: &Path, ext: &str) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == ext))
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect();
    v.sort();
    v
}

#[test]
fn usage_errors_exit_one_and_help_exits_zero() {
    assert_eq!(code(&latch(&["--help"])), 0);
    assert_eq!(code(&latch(&["frobnicate"])), 1);
    assert_eq!(code(&latch(&["train", "nothing"])), 1);
    assert_eq!(code(&latch(&["generate", "--backend", "sideways", "--out", "x"])), 1);
}

#[test]
fn missing_checkpoints_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.ini");
    std::fs::write(&cfg, TINY).unwrap();
    let out = latch(&["train", "denoiser", "-c", cfg.to_str().unwrap()]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
    assert!(stderr(&out).contains("train vae"));
    let out = latch(&["evaluate", dir.path().to_str().unwrap()]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
}

#[test]
fn diverging_training_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.ini");
    std::fs::write(&cfg, TINY.replace("batch = 4", "batch = 4\nlr = 1e30\nclip_norm = 1e30")).unwrap();
    let out = latch(&["train", "vae", "-c", cfg.to_str().unwrap()]);
    assert_eq!(code(&out), 3, "{}", stderr(&out));
}

#[test]
fn full_pipeline_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.ini");
    std::fs::write(&cfg, TINY).unwrap();
    let c = cfg.to_str().unwrap();
    let ok = |args: &[&str]| {
        let out = latch(args);
        assert_eq!(code(&out), 0, "{args:?}: {}", stderr(&out));
        String::from_utf8_lossy(&out.stdout).into_owned()
    };
    ok(&["train", "vae", "-c", c]);
    ok(&["train", "denoiser", "-c", c]);
    ok(&["trajectories", "-c", c]);
    let heads = ok(&["train", "latch", "-c", c, "--kind", "beats", "--kind", "intensity", "--mode", "backward"]);
    assert_eq!(heads.lines().count(), 2, "{heads}");
    ok(&["train", "readout", "-c", c, "--kind", "beats"]);

    let runs: Vec<_> = ["a", "b"].iter().map(|n| dir.path().join(n)).collect();
    for (run, jobs) in runs.iter().zip(["1", "2"]) {
        ok(&["generate", "-c", c, "--backend", "latch", "--seed", "9", "--jobs", jobs, "--out", run.to_str().unwrap()]);
    }
    assert_eq!(files(&runs[0], "wav"), files(&runs[1], "wav"));
    assert_eq!(files(&runs[0], "csv"), files(&runs[1], "csv"));
    assert_eq!(files(&runs[0], "wav").len(), 2);

    let summary = ok(&["evaluate", runs[0].to_str().unwrap()]);
    assert!(summary.contains("beats") && summary.contains("spectral FD"), "{summary}");
    let report = std::fs::read_to_string(runs[0].join("report.csv")).unwrap();
    assert_eq!(report.lines().count(), 3, "{report}");
    assert!(report.starts_with("run,backend,seed,class,intensity_mse_db2,pitch_bce,beats_bce"));

    let targets = runs[0].join("run_000_targets.csv");
    let shared = dir.path().join("shared");
    ok(&[
        "generate", "-c", c, "--backend", "readout", "--kind", "beats", "--targets", targets.to_str().unwrap(),
        "--runs", "1", "--out", shared.to_str().unwrap(),
    ]);
    assert_eq!(files(&shared, "wav").len(), 1);

    let plain = dir.path().join("plain");
    ok(&["generate", "-c", c, "--backend", "none", "--mask-fraction", "0", "--out", plain.to_str().unwrap()]);
    assert!(files(&plain, "csv").iter().all(|(n, _)| !n.contains("guidance")));

    let csv = dir.path().join("profile.csv");
    let table = ok(&[
        "profile", "-c", c, "--backend", "none", "--backend", "latch", "--backend", "end_to_end", "--kind", "beats",
        "--runs", "1", "--out", csv.to_str().unwrap(),
    ]);
    assert!(table.contains("end_to_end"), "{table}");
    assert_eq!(std::fs::read_to_string(&csv).unwrap().lines().count(), 4);
}

#[test]
fn selftest_passes() {
    let out = latch(&["selftest"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = String::from_utf8_lossy(&out.stdout);
    assert_eq!(text.lines().filter(|l| l.starts_with("PASS")).count(), 5, "{text}");
}
