use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn usseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_usseg"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = usseg(args);
    assert!(
        out.status.success(),
        "usseg {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn lr_plot_anchors() {
    let csv = ok(&["lr-plot", "--iters", "3200"]);
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows[0], "iter,lr");
    assert_eq!(rows.len(), 3202);
    assert_eq!(rows[1], "0,0.001");
    assert_eq!(rows[1601], "1600,0.008");
    assert_eq!(rows[3201], "3200,0.001");
    let mid: f32 = rows[801].split(',').nth(1).unwrap().parse().unwrap();
    assert_eq!(mid, 0.0045);
}

#[test]
fn phantom_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.nrrd");
    let b = dir.path().join("b.nrrd");
    let c = dir.path().join("c.nrrd");
    for (path, seed) in [(&a, "7"), (&b, "7"), (&c, "8")] {
        ok(&["phantom", "--output", p(path), "--dims", "32,32,32", "--seed", seed]);
    }
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert_ne!(fs::read(&a).unwrap(), fs::read(&c).unwrap());
}

#[test]
fn eval_of_identical_maps_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let lm = dir.path().join("lm.nrrd");
    ok(&["phantom", "--output", p(&lm), "--dims", "32,32,32", "--seed", "1"]);
    let csv = ok(&["eval", "--pred", p(&lm), "--ref", p(&lm)]);
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows[0], "class,dice,sensitivity,specificity");
    assert_eq!(rows.len(), 4);
    for row in &rows[1..] {
        let vals: Vec<&str> = row.split(',').collect();
        assert_eq!(&vals[1..], ["1.000000"; 3], "{row}");
    }
}

#[test]
fn convert_round_trips_through_sidecar() {
    let dir = tempfile::tempdir().unwrap();
    let lm = dir.path().join("lm.nrrd");
    let raw = dir.path().join("lm.json");
    let back = dir.path().join("back.nrrd");
    ok(&["phantom", "--output", p(&lm), "--dims", "32,32,32", "--seed", "2"]);
    ok(&["convert", "--labels", "--input", p(&lm), "--output", p(&raw)]);
    ok(&["convert", "--labels", "--input", p(&raw), "--output", p(&back)]);
    assert_eq!(fs::read(&lm).unwrap(), fs::read(&back).unwrap());
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(usseg(&["no-such-command"]).status.code(), Some(2));
    assert_eq!(usseg(&["phantom"]).status.code(), Some(2));
    assert_eq!(usseg(&["phantom", "--output", "x.nrrd", "--seed", "abc"]).status.code(), Some(2));
}

#[test]
fn runtime_errors_print_one_line_and_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let out = usseg(&["phantom", "--output", p(&dir.path().join("x.nrrd")), "--dims", "8,8,8"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with("error: kind=validation message=\""), "{err}");

    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "sede = 3\n").unwrap();
    let out = usseg(&["train", "--config", p(&cfg), "--data-dir", p(dir.path()), "--output-dir", "o"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8(out.stderr).unwrap().starts_with("error: kind=config"));

    let out = usseg(&["eval", "--pred", "missing.nrrd", "--ref", "missing.nrrd"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8(out.stderr).unwrap().starts_with("error: kind=io"));
}

#[test]
fn crf_rejects_negative_weight() {
    let out = usseg(&["crf", "--prob", "a.json", "--input", "b.nrrd", "--output", "c.json", "--w-spatial=-1"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8(out.stderr).unwrap().starts_with("error: kind="));
}

#[test]
fn tiny_pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let lm = d.join("ph.nrrd");
    ok(&["phantom", "--output", p(&lm), "--dims", "32,32,32", "--seed", "3"]);
    let data = d.join("data");
    ok(&["simulate", "--labels", p(&lm), "--output-dir", p(&data), "--per-case", "2", "--seed", "4"]);
    assert!(data.join("ph_s0_image.nrrd").exists());
    assert!(data.join("ph_s1_labels.nrrd").exists());

    let cfg = d.join("run.toml");
    fs::write(
        &cfg,
        "seed = 3\nbatch_size = 2\niterations = 3\nwidths = [2, 2, 2, 2, 2, 2, 2, 2]\nhead_widths = [4, 4, 3]\ncheckpoint_every = 2\n",
    )
    .unwrap();
    let run = d.join("run");
    ok(&["--deterministic", "train", "--config", p(&cfg), "--data-dir", p(&data), "--output-dir", p(&run)]);
    let loss = fs::read_to_string(run.join("loss.csv")).unwrap();
    assert_eq!(loss.lines().next(), Some("iter,lr,loss"));
    assert_eq!(loss.lines().count(), 4);
    assert!(run.join("checkpoints/iter_000002/manifest.json").exists());
    assert!(run.join("final/params.bin").exists());

    let img = data.join("ph_s0_image.nrrd");
    let prob = d.join("prob.json");
    let labels = d.join("pred.nrrd");
    ok(&[
        "infer",
        "--checkpoint",
        p(&run.join("final")),
        "--input",
        p(&img),
        "--prob-output",
        p(&prob),
        "--labels-output",
        p(&labels),
    ]);
    let refined = d.join("refined.json");
    let refined_labels = d.join("refined.nrrd");
    ok(&[
        "crf",
        "--prob",
        p(&prob),
        "--input",
        p(&img),
        "--output",
        p(&refined),
        "--labels-output",
        p(&refined_labels),
        "--crf-iterations",
        "2",
    ]);
    let csv = ok(&["eval", "--pred", p(&refined_labels), "--ref", p(&data.join("ph_s0_labels.nrrd"))]);
    assert_eq!(csv.lines().count(), 4);

    // Fine-tuning with a different activation is refused before training.
    let out = usseg(&[
        "train",
        "--config",
        p(&cfg),
        "--activation",
        "relu",
        "--init",
        p(&run.join("final")),
        "--data-dir",
        p(&data),
        "--output-dir",
        p(&d.join("ft")),
    ]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.starts_with("error: kind=config") && err.contains("activation"), "{err}");
}
