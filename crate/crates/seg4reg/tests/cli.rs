//! End-to-end CLI contract tests: exit codes, idempotence, and the
//! per-command behaviors that make up the pipeline.

use std::path::{Path, PathBuf};
use std::process::Command;

use seg4reg::data::synthetic::SyntheticSpec;
use seg4reg::metrics::EvalReport;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_seg4reg"))
}

fn small_spec(dir: &Path) -> PathBuf {
    let spec = SyntheticSpec {
        height: 32,
        width: 16,
        vertebra_width: 5.0,
        max_amplitude: 2.0,
        ..SyntheticSpec::default()
    };
    let path = dir.join("spec.json");
    std::fs::write(&path, serde_json::to_string_pretty(&spec).unwrap()).unwrap();
    path
}

fn synth(spec: &Path, n: usize, seed: u64, out: &Path) {
    let o = bin()
        .args(["synth", "--spec"])
        .arg(spec)
        .args(["--n", &n.to_string(), "--seed", &seed.to_string(), "--out"])
        .arg(out)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

fn write_config(path: &Path, train: &Path, test: &Path, out_dir: &Path, epochs: [usize; 5]) {
    let stages: Vec<_> = epochs
        .iter()
        .map(|e| serde_json::json!({ "epochs": e, "lr": 1e-3, "weight_decay": 1e-5 }))
        .collect();
    let cfg = serde_json::json!({
        "data": { "train_dir": train, "test_dir": test, "target_size": [32, 16] },
        "train": { "seed": 5, "batch_size": 4, "out_dir": out_dir, "stages": stages }
    });
    std::fs::write(path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
}

#[test]
fn synth_rejects_out_of_frame_spec() {
    let work = tempfile::tempdir().unwrap();
    let spec = SyntheticSpec {
        max_amplitude: 50.0,
        ..SyntheticSpec::default()
    };
    let spec_path = work.path().join("bad.json");
    std::fs::write(&spec_path, serde_json::to_string(&spec).unwrap()).unwrap();
    let o = bin()
        .args(["synth", "--spec"])
        .arg(&spec_path)
        .args(["--n", "1", "--out"])
        .arg(work.path().join("d"))
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn prepare_is_idempotent_and_tolerates_degenerate_vertebrae() {
    let work = tempfile::tempdir().unwrap();
    let spec = small_spec(work.path());
    let data = work.path().join("data");
    synth(&spec, 3, 11, &data);

    let out1 = work.path().join("prep1");
    let o = bin()
        .args(["prepare", "--data"])
        .arg(&data)
        .args(["--out"])
        .arg(&out1)
        .output()
        .unwrap();
    assert!(o.status.success());
    assert_eq!(std::fs::read_dir(out1.join("masks")).unwrap().count(), 3);
    assert!(out1.join("manifest.json").is_file());

    // rerun on unchanged input: byte-identical outputs
    let before = std::fs::read(out1.join("manifest.json")).unwrap();
    let o = bin()
        .args(["prepare", "--data"])
        .arg(&data)
        .args(["--out"])
        .arg(&out1)
        .output()
        .unwrap();
    assert!(o.status.success());
    assert_eq!(std::fs::read(out1.join("manifest.json")).unwrap(), before);

    // collapse one vertebra to a line: warning on stdout, still exit 0
    let degenerate = work.path().join("degen");
    copy_tree(&data, &degenerate);
    let lm_path = degenerate.join("landmarks/synth_00000.txt");
    let mut lines: Vec<String> = std::fs::read_to_string(&lm_path)
        .unwrap()
        .lines()
        .map(String::from)
        .collect();
    for (k, line) in lines.iter_mut().enumerate().take(4) {
        *line = format!("10.0 {}", 2.0 + k as f64);
    }
    std::fs::write(&lm_path, lines.join("\n") + "\n").unwrap();
    let o = bin()
        .args(["prepare", "--data"])
        .arg(&degenerate)
        .args(["--out"])
        .arg(work.path().join("prep2"))
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&o.stdout).contains("degenerate"));
}

fn copy_tree(from: &Path, to: &Path) {
    std::fs::create_dir_all(to).unwrap();
    for entry in std::fs::read_dir(from).unwrap() {
        let p = entry.unwrap().path();
        let dest = to.join(p.file_name().unwrap());
        if p.is_dir() {
            copy_tree(&p, &dest);
        } else {
            std::fs::copy(&p, &dest).unwrap();
        }
    }
}

#[test]
fn train_exit_codes_and_resume_flow() {
    let work = tempfile::tempdir().unwrap();
    let spec = small_spec(work.path());
    let train_dir = work.path().join("train");
    let test_dir = work.path().join("test");
    synth(&spec, 8, 21, &train_dir);
    synth(&spec, 3, 22, &test_dir);

    // malformed data: angle out of range -> exit 2
    let broken = work.path().join("broken");
    copy_tree(&train_dir, &broken);
    let csv = std::fs::read_to_string(broken.join("angles.csv")).unwrap();
    let mut lines: Vec<&str> = csv.lines().collect();
    let bad_row = format!("{},95.0,0.0,0.0", lines[1].split(',').next().unwrap());
    lines[1] = &bad_row;
    std::fs::write(broken.join("angles.csv"), lines.join("\n") + "\n").unwrap();
    let cfg_bad = work.path().join("cfg_bad.json");
    write_config(
        &cfg_bad,
        &broken,
        &test_dir,
        &work.path().join("runx"),
        [1; 5],
    );
    let o = bin()
        .args(["train", "--config"])
        .arg(&cfg_bad)
        .output()
        .unwrap();
    assert_eq!(
        o.status.code(),
        Some(2),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );

    // stage 4 without stages 1..3 -> exit 4
    let run_dir = work.path().join("run");
    let cfg = work.path().join("cfg.json");
    write_config(&cfg, &train_dir, &test_dir, &run_dir, [1; 5]);
    let o = bin()
        .args(["train", "--config"])
        .arg(&cfg)
        .args(["--stage", "4"])
        .output()
        .unwrap();
    assert_eq!(
        o.status.code(),
        Some(4),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );

    // stage-by-stage, then resume to completion
    for stage in ["1", "2"] {
        let o = bin()
            .args(["train", "--config"])
            .arg(&cfg)
            .args(["--stage", stage])
            .output()
            .unwrap();
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let o = bin()
        .args(["train", "--config"])
        .arg(&cfg)
        .args(["--resume"])
        .arg(&run_dir)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for stage in 1..=5 {
        assert!(run_dir.join(format!("stage{stage}/report.json")).is_file());
    }

    // rerunning a complete schedule is an explicit no-op
    let o = bin()
        .args(["train", "--config"])
        .arg(&cfg)
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&o.stdout).contains("already complete"));

    // the resumed run matches an uninterrupted run bit for bit
    let run2 = work.path().join("run2");
    let cfg2 = work.path().join("cfg2.json");
    write_config(&cfg2, &train_dir, &test_dir, &run2, [1; 5]);
    let o = bin()
        .args(["train", "--config"])
        .arg(&cfg2)
        .output()
        .unwrap();
    assert!(o.status.success());
    for stage in 1..=5 {
        for f in ["segnet.bin", "regnet.bin"] {
            // the metadata differs (config hash covers out_dir); the
            // parameters themselves must be bit-identical
            let (a, _) = seg4reg::checkpoint::load_checkpoint(
                &run_dir.join(format!("stage{stage}")).join(f),
            )
            .unwrap();
            let (b, _) =
                seg4reg::checkpoint::load_checkpoint(&run2.join(format!("stage{stage}")).join(f))
                    .unwrap();
            assert!(a.bit_identical(&b), "stage {stage} {f} params differ");
        }
    }

    // eval: report writes, parses back, and reruns byte-identically
    let report_path = work.path().join("report.json");
    let o = bin()
        .args(["eval", "--ckpt"])
        .arg(&run_dir)
        .args(["--data"])
        .arg(&test_dir)
        .args(["--out"])
        .arg(&report_path)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(&report_path).unwrap();
    let report = EvalReport::from_json(&text).unwrap();
    assert_eq!(report.samples, 3);
    assert!(report_path.with_extension("csv").is_file());
    let stdout = String::from_utf8_lossy(&o.stdout).to_string();
    assert!(stdout.contains("SMAPE"));
    assert!(
        stdout.contains("8.47") && stdout.contains("7.32"),
        "reference footnote missing"
    );
    let o2 = bin()
        .args(["eval", "--ckpt"])
        .arg(&run_dir)
        .args(["--data"])
        .arg(&test_dir)
        .args(["--out"])
        .arg(&report_path)
        .output()
        .unwrap();
    assert!(o2.status.success());
    assert_eq!(std::fs::read_to_string(&report_path).unwrap(), text);

    // eval on a missing checkpoint -> exit 2
    let o = bin()
        .args(["eval", "--ckpt"])
        .arg(work.path().join("nowhere"))
        .args(["--data"])
        .arg(&test_dir)
        .args(["--out"])
        .arg(work.path().join("r.json"))
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn prepared_manifest_feeds_training_directly() {
    let work = tempfile::tempdir().unwrap();
    let spec = small_spec(work.path());
    let raw = work.path().join("raw");
    synth(&spec, 6, 51, &raw);
    // strip the generator's masks so only prepare can supply them
    std::fs::remove_dir_all(raw.join("masks")).unwrap();
    let prepared = work.path().join("prepared");
    let o = bin()
        .args(["prepare", "--data"])
        .arg(&raw)
        .args(["--out"])
        .arg(&prepared)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let test_dir = work.path().join("test");
    synth(&spec, 2, 52, &test_dir);
    let cfg = work.path().join("cfg.json");
    write_config(
        &cfg,
        &prepared,
        &test_dir,
        &work.path().join("run"),
        [1, 1, 0, 0, 0],
    );
    let o = bin()
        .args(["train", "--config"])
        .arg(&cfg)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn figures_follow_sample_count() {
    let work = tempfile::tempdir().unwrap();
    let spec = small_spec(work.path());
    let train_dir = work.path().join("train");
    let test_dir = work.path().join("test");
    synth(&spec, 6, 31, &train_dir);
    synth(&spec, 4, 32, &test_dir);
    let run_dir = work.path().join("run");
    let cfg = work.path().join("cfg.json");
    write_config(&cfg, &train_dir, &test_dir, &run_dir, [1, 1, 1, 1, 1]);
    let o = bin()
        .args(["train", "--config"])
        .arg(&cfg)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let figs = work.path().join("figs");
    let o = bin()
        .args(["cam", "--ckpt"])
        .arg(&run_dir)
        .args(["--data"])
        .arg(&test_dir)
        .args(["--out"])
        .arg(&figs)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    // two figures per sample without the baseline flag
    assert_eq!(std::fs::read_dir(&figs).unwrap().count(), 4 * 2);
}

#[test]
fn ablate_guard_refuses_large_datasets_without_force() {
    let work = tempfile::tempdir().unwrap();
    let spec = small_spec(work.path());
    let train_dir = work.path().join("train");
    let test_dir = work.path().join("test");
    synth(&spec, 1001, 41, &train_dir);
    synth(&spec, 2, 42, &test_dir);
    let cfg = work.path().join("cfg.json");
    write_config(
        &cfg,
        &train_dir,
        &test_dir,
        &work.path().join("run"),
        [1; 5],
    );
    let grid = work.path().join("grid.json");
    std::fs::write(
        &grid,
        serde_json::to_string(&serde_json::json!([
            { "ar": false, "roie": false, "tcl": false, "input": "img" }
        ]))
        .unwrap(),
    )
    .unwrap();
    let o = bin()
        .args(["ablate", "--config"])
        .arg(&cfg)
        .args(["--grid"])
        .arg(&grid)
        .args(["--seeds", "1", "--out"])
        .arg(work.path().join("ab"))
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("--force"));
}
