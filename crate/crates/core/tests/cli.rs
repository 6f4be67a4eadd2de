use std::fs;

use detxai::cli::main_with;

fn run(args: &[&str]) -> i32 {
    main_with(std::iter::once("detxai").chain(args.iter().copied()))
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(run(&["bogus"]), 2);
    assert_eq!(run(&["eval-ap", "--annotations", "a.json"]), 2);
    assert_eq!(run(&["eval-ap", "--annotations", "/nonexistent/a.json", "--detections", "d.json"]), 2);
    assert_eq!(run(&["--help"]), 0);
}

#[test]
fn pipeline_runs_and_undefined_metrics_exit_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let d = |p: &str| dir.path().join(p).to_string_lossy().into_owned();
    fs::write(
        d("spec.json"),
        r#"{"source_images": 30, "auxiliary_images": 20, "target_images": 30, "seeds": [4]}"#,
    )
    .unwrap();
    fs::write(d("train.json"), r#"{"epochs": 1, "batch_size": 4}"#).unwrap();
    assert_eq!(run(&["synth", "--config", &d("spec.json"), "--out", &d("data")]), 0);
    assert_eq!(
        run(&[
            "pretrain", "--data", &d("data/source/train"), "--val", &d("data/source/val"),
            "--config", &d("train.json"), "--out", &d("bb.mmdl"),
        ]),
        0
    );
    assert_eq!(
        run(&[
            "train", "--data", &d("data/target/train"), "--val", &d("data/target/val"),
            "--config", &d("train.json"), "--regime", "freeze_backbone", "--backbone", &d("bb.mmdl"),
            "--out", &d("m.mmdl"),
        ]),
        0
    );
    let test = d("data/target/test");
    let ann = d("data/target/test/annotations.json");
    assert_eq!(run(&["predict", "--params", &d("m.mmdl"), "--data", &test, "--out", &d("dets.json")]), 0);
    assert_eq!(
        run(&[
            "explain", "--params", &d("m.mmdl"), "--data", &test, "--detections", &d("dets.json"),
            "--out", &d("xai"), "--heatmaps",
        ]),
        0
    );
    assert!(dir.path().join("xai/manifest.json").exists());
    assert_eq!(
        run(&["eval-ap", "--annotations", &ann, "--detections", &d("dets.json"), "--format", "json", "--out", &d("ap.json")]),
        0
    );
    assert!(fs::read_to_string(d("ap.json")).unwrap().contains("mean_ap"));

    fs::write(d("none.json"), "[]").unwrap();
    assert_eq!(
        run(&["eval-xai", "--annotations", &ann, "--detections", &d("none.json"), "--manifest", &d("none_manifest.json")]),
        2
    );
    fs::write(d("none_manifest.json"), r#"{"entries": []}"#).unwrap();
    assert_eq!(
        run(&["eval-xai", "--annotations", &ann, "--detections", &d("none.json"), "--manifest", &d("none_manifest.json")]),
        3
    );
}
