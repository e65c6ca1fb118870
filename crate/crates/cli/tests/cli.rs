use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use necroscope::quantify::{count_pixels, necrosis_ratio};
use necroscope::slide_store::load_manifest;

const BIN: &str = env!("CARGO_BIN_EXE_necroscope");
const WORKER: &str = env!("CARGO_BIN_EXE_chromatic-worker");

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(out.stdout.is_empty(), "results must not go to stdout");
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn synth(dir: &Path, name: &str, spec: &str) -> PathBuf {
    let spec_path = dir.join(format!("{name}.json"));
    std::fs::write(&spec_path, spec).unwrap();
    let out = dir.join(name);
    ok(&["synth", "--spec", p(&spec_path), "--out", p(&out)]);
    out
}

const SMALL: &str = r#"{"seed": 5, "cases": 3, "slides_per_case": [1, 2], "slide_width": 520, "slide_height": 300}"#;

fn tree(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut files = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let bytes = std::fs::read(&path).unwrap();
                files.push((path.strip_prefix(root).unwrap().to_path_buf(), bytes));
            }
        }
    }
    files.sort();
    files
}

#[test]
fn synth_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let a = synth(dir.path(), "a", SMALL);
    let b = synth(dir.path(), "b", SMALL);
    let ds = load_manifest(&a).unwrap();
    assert_eq!(ds.cases().len(), 3);
    for s in ds.slides() {
        assert!(ds.mask_path(&s.id).exists());
    }
    // Only the recorded output path differs.
    let strip = |files: Vec<(PathBuf, Vec<u8>)>| {
        files
            .into_iter()
            .filter(|(path, _)| !path.ends_with("run_config_synth.json"))
            .collect::<Vec<_>>()
    };
    assert!(strip(tree(&a)) == strip(tree(&b)));
}

#[test]
fn oracle_masks_equal_truth_and_ratios_are_exact() {
    let dir = tempfile::tempdir().unwrap();
    let ds_path = synth(dir.path(), "ds", SMALL);
    let out = dir.path().join("run");
    ok(&["segment", "--dataset", p(&ds_path), "--out", p(&out), "--backend", "oracle"]);
    let ds = load_manifest(&ds_path).unwrap();
    for s in ds.slides() {
        let pred = std::fs::read(out.join("masks").join(format!("{}.png", s.id))).unwrap();
        let truth = std::fs::read(ds.mask_path(&s.id)).unwrap();
        assert!(pred == truth, "{}", s.id);
    }
    ok(&["quantify", "--dataset", p(&ds_path), "--out", p(&out)]);
    let cases: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("cases.json")).unwrap()).unwrap();
    for (case, row) in ds.cases().iter().zip(cases.as_array().unwrap()) {
        let counts = case
            .slides
            .iter()
            .map(|id| count_pixels(&ds.mask(id).unwrap()))
            .sum();
        let truth = necrosis_ratio(&counts).unwrap();
        assert_eq!(row["necrotic"].as_u64().unwrap(), truth.necrotic());
        assert_eq!(row["tumor"].as_u64().unwrap(), truth.tumor());
    }
    let csv = std::fs::read_to_string(out.join("cases.csv")).unwrap();
    assert!(csv.starts_with("case_id,p_VT,p_NT,r_DL,grade,r_PR,abs_diff,flags\n"));
    assert_eq!(csv.lines().count(), 4);
}

#[test]
fn worker_count_does_not_change_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let ds_path = synth(
        dir.path(),
        "ds",
        r#"{"seed": 8, "cases": 2, "slide_width": 1100, "slide_height": 900, "noise_epsilon": 0.3}"#,
    );
    let one = dir.path().join("one");
    let eight = dir.path().join("eight");
    for (out, workers) in [(&one, "1"), (&eight, "8")] {
        ok(&[
            "segment", "--dataset", p(&ds_path), "--out", p(out), "--backend", "chromatic",
            "--mislabel-rate", "0.02", "--seed", "4", "--workers", workers,
        ]);
    }
    assert!(tree(&one.join("masks")) == tree(&eight.join("masks")));
}

#[test]
fn external_worker_matches_in_process_chromatic() {
    let dir = tempfile::tempdir().unwrap();
    let ds_path = synth(dir.path(), "ds", SMALL);
    let internal = dir.path().join("internal");
    let external = dir.path().join("external");
    ok(&["segment", "--dataset", p(&ds_path), "--out", p(&internal), "--backend", "chromatic"]);
    ok(&[
        "segment", "--dataset", p(&ds_path), "--out", p(&external), "--backend", "external",
        "--external-cmd", WORKER, "--batch-size", "4", "--workers", "2",
    ]);
    assert!(tree(&internal.join("masks")) == tree(&external.join("masks")));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let ds_path = synth(dir.path(), "ds", SMALL);
    let out = dir.path().join("run");
    let missing = run(&["segment", "--dataset", p(&dir.path().join("nope")), "--out", p(&out)]);
    assert_eq!(missing.status.code(), Some(2));
    let no_dataset = run(&["quantify", "--out", p(&out)]);
    assert_eq!(no_dataset.status.code(), Some(2));
    let no_masks = run(&["quantify", "--dataset", p(&ds_path), "--out", p(&dir.path().join("empty"))]);
    assert_eq!(no_masks.status.code(), Some(2));
    let failing = run(&[
        "segment", "--dataset", p(&ds_path), "--out", p(&out), "--backend", "external", "--external-cmd", "false",
    ]);
    assert_eq!(failing.status.code(), Some(3));
    let log: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("run_log.json")).unwrap()).unwrap();
    assert!(log["slides"][0]["error"].is_string());
    let bad_rate = run(&["segment", "--dataset", p(&ds_path), "--out", p(&out), "--mislabel-rate", "2"]);
    assert_eq!(bad_rate.status.code(), Some(2));
}

#[test]
fn config_file_supplies_flags_and_flags_win() {
    let dir = tempfile::tempdir().unwrap();
    let ds_path = synth(dir.path(), "ds", SMALL);
    let out = dir.path().join("run");
    let cfg = dir.path().join("cfg.json");
    let text = serde_json::json!({ "dataset": ds_path, "out": out, "backend": "oracle", "workers": 3 });
    std::fs::write(&cfg, text.to_string()).unwrap();
    ok(&["--config", p(&cfg), "segment", "--workers", "2"]);
    let resolved: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("run_config_segment.json")).unwrap()).unwrap();
    assert_eq!(resolved["args"]["resolved"]["workers"], 2);
    assert_eq!(resolved["args"]["resolved"]["backend"], "oracle");

    std::fs::write(&cfg, r#"{"wrokers": 2}"#).unwrap();
    assert_eq!(run(&["--config", p(&cfg), "segment"]).status.code(), Some(2));
}

#[test]
fn analysis_commands_write_their_tables() {
    let dir = tempfile::tempdir().unwrap();
    let ds_path = synth(
        dir.path(),
        "ds",
        r#"{"seed": 21, "cases": 40, "slide_width": 256, "slide_height": 256, "granularity": 16}"#,
    );
    let out = dir.path().join("run");
    let (d, o) = (p(&ds_path), p(&out));
    ok(&["segment", "--dataset", d, "--out", o, "--backend", "chromatic", "--workers", "4"]);
    ok(&["evaluate", "--dataset", d, "--out", o]);
    let report = std::fs::read_to_string(out.join("report.csv")).unwrap();
    let grades: Vec<&str> = report.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(grades, ["IV", "III", "II", "I", "All"]);
    assert!(out.join("scatter.svg").exists() && out.join("scatter.csv").exists());
    let miou = std::fs::read_to_string(out.join("miou.csv")).unwrap();
    assert!(miou.lines().skip(1).all(|l| l.ends_with(",1.000000")));

    ok(&["sweep", "--dataset", d, "--out", o]);
    let sweep = std::fs::read_to_string(out.join("sweep.csv")).unwrap();
    let lines: Vec<&str> = sweep.lines().collect();
    assert_eq!(lines[0], "cutoff,os_p,os_argmin,pfs_p,pfs_argmin");
    assert_eq!(lines.len(), 6);
    assert!(lines.iter().any(|l| l.contains(",true")));

    ok(&["survival", "--dataset", d, "--out", o, "--cutoff", "0.5", "--endpoint", "os"]);
    assert!(out.join("km_os.svg").exists());
    assert!(std::fs::read_to_string(out.join("km_os_responders.csv")).unwrap().starts_with("time,n_risk,d,S\n"));
    let logrank: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("logrank_os.json")).unwrap()).unwrap();
    let p_value = logrank["logrank"]["p_value"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&p_value));

    ok(&["overlay", "--dataset", d, "--out", o, "--alpha", "0.5", "--level", "2"]);
    let overlay = image::open(out.join("overlays").join("case-000-s0.png")).unwrap();
    assert_eq!((overlay.width(), overlay.height()), (128, 128));
}
