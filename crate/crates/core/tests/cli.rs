//! Drives the `cft` binary through a small end-to-end pipeline.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn cft(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cft"))
        .args(["--out", dir.to_str().unwrap(), "--preset", "smoke"])
        .args(args)
        .output()
        .expect("spawn cft")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = cft(dir, args);
    assert!(
        out.status.success(),
        "cft {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn pipeline_from_data_to_drift() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let spec = dir.join("bench.toml");
    fs::write(
        &spec,
        "phase1_per_family = 12\nphase2_per_family = 12\neval_per_family = 3\ndrift_per_family = 3\n",
    )
    .unwrap();
    ok(dir, &["gen", "--spec", spec.to_str().unwrap()]);
    let data = |id: &str| dir.join("data").join(format!("{id}.jsonl")).to_str().unwrap().to_string();
    let path = |name: &str| dir.join(name).to_str().unwrap().to_string();

    ok(
        dir,
        &[
            "train", "--data", &data("phase1_B"), "--vocab", &data("phase1_A"), &data("phase2_multi_A"),
            &data("phase2_multi_B"), &data("english_counterpart"), &data("eval_TA"), &data("eval_LA"),
            &data("drift_prompts"), "--save-base", &path("base.cftl"), "-o", &path("p1.cftl"),
        ],
    );
    assert!(fs::read_to_string(path("p1.log.csv")).unwrap().starts_with("step,"));

    let mask = ok(dir, &["plan", "--strategy", "lf-h2", "--base", &path("base.cftl"), "--phase1", &path("p1.cftl")]);
    assert_eq!(mask.lines().filter(|l| !l.starts_with('#') && !l.trim().is_empty()).count(), 6);

    for (strategy, out) in [("lf-h2", "p2_lf.cftl"), ("gr", "p2_gr.cftl"), ("lora", "p2_lora.cftl")] {
        ok(
            dir,
            &[
                "train", "--data", &data("phase2_multi_A"), "--init", &path("p1.cftl"), "--strategy", strategy,
                "--base", &path("base.cftl"), "--counterpart", &data("english_counterpart"), "--rank", "2",
                "-o", &path(out),
            ],
        );
    }

    let report = ok(
        dir,
        &["eval", "--ckpt", &path("p2_gr.cftl"), "--suites", &data("eval_TA"), &data("eval_LA"), "--compare", &path("p1.cftl"), "--max-new", "6"],
    );
    assert!(report.contains("forgetting") || report.contains("TA"), "{report}");

    let metrics = ok(
        dir,
        &[
            "metrics", "--data-a", &data("phase1_A"), "--data-b", &data("phase2_multi_A"),
            "--ckpt-a", &path("p1.cftl"), "--ckpt-b", &path("p2_lf.cftl"), "--samples", "all",
        ],
    );
    assert!(metrics.contains("DES") || metrics.contains("des"), "{metrics}");

    ok(
        dir,
        &["drift", "--a", &path("p1.cftl"), "--b", &path("p2_lf.cftl"), "--prompts", &data("drift_prompts"), "--project"],
    );
    for f in ["drift.csv", "drift.svg", "projection.csv", "projection.svg"] {
        assert!(dir.join("drift").join(f).exists(), "missing {f}");
    }
}

#[test]
fn bad_inputs_exit_with_code_two() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nope.cftl");
    let out = cft(tmp.path(), &["eval", "--ckpt", missing.to_str().unwrap(), "--suites", "x.jsonl"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(cft(tmp.path(), &["--preset", "nonexistent", "study"]).status.code(), Some(2));
    assert_eq!(cft(tmp.path(), &["frobnicate"]).status.code(), Some(2));
}
