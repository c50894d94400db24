use std::fs;
use std::path::Path;
use std::process::Command;

fn volflow(args: &[&str]) -> String {
    let out = Command::new(env!("CARGO_BIN_EXE_volflow"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "volflow {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn full_chain_on_tiny_synthetic_data() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let raw = d.join("raw");
    let prep = d.join("prep");
    fs::create_dir_all(&prep).unwrap();

    volflow(&[
        "synth",
        "--out-dir",
        p(&raw),
        "--count",
        "2",
        "--size",
        "32",
        "--seed",
        "5",
    ]);
    for i in 0..2 {
        let name = format!("case{i:03}");
        volflow(&[
            "preprocess",
            "--in",
            p(&raw.join(format!("{name}.rvol"))),
            "--out",
            p(&prep.join(format!("{name}.rvol"))),
            "--mask-out",
            p(&prep.join(format!("{name}_mask.rvol"))),
            "--hu-min",
            "-1020",
        ]);
    }

    let train_cfg = d.join("train.cfg");
    fs::write(
        &train_cfg,
        "levels = 1\nflows_per_level = 1\npatch_edge = 8\ncoupling_hidden = 4\n\
         iterations = 3 # smoke run\nbatch_size = 2\neval_patches = 2\nlog_every = 1\n",
    )
    .unwrap();
    let model = d.join("m.rflw");
    let log = d.join("log.csv");
    volflow(&[
        "train",
        "--data",
        p(&prep),
        "--config",
        p(&train_cfg),
        "--out",
        p(&model),
        "--log",
        p(&log),
    ]);
    let log_text = fs::read_to_string(&log).unwrap();
    assert!(log_text.starts_with("step,bits_per_dim,grad_norm,wallclock_s\n"));
    assert_eq!(log_text.lines().count(), 4);

    let pipe_cfg = d.join("pipe.cfg");
    fs::write(&pipe_cfg, "patch_edge = 16\noverlap = 4\n").unwrap();
    let cal = d.join("cal.json");
    volflow(&[
        "calibrate",
        "--volumes",
        p(&prep),
        "--model",
        p(&model),
        "--config",
        p(&pipe_cfg),
        "--patch-edge",
        "8",
        "--out",
        p(&cal),
    ]);

    let map = d.join("map.rvol");
    let result = d.join("result.json");
    volflow(&[
        "score",
        "--volume",
        p(&prep.join("case000.rvol")),
        "--mask",
        p(&prep.join("case000_mask.rvol")),
        "--model",
        p(&model),
        "--calibration",
        p(&cal),
        "--config",
        p(&pipe_cfg),
        "--patch-edge",
        "8",
        "--out-map",
        p(&map),
        "--out-json",
        p(&result),
    ]);
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(&result).unwrap()).unwrap();
    assert_eq!(json["n_patches"], 343);
    assert_eq!(json["threshold_T"], 5.0);
    let map_bytes = fs::read(&map).unwrap();
    assert_eq!(&map_bytes[..4], b"RVL1");
    assert_eq!(map_bytes[33], 2, "value space byte marks a log-likelihood map");
    assert_eq!(map_bytes.len(), 34 + 4 * 32 * 32 * 32);

    let test_csv = d.join("test.csv");
    fs::write(&test_csv, "id,score,label\na,0.1,0\nb,0.4,0\nc,0.35,1\nd,0.8,1\n").unwrap();
    let metrics = d.join("metrics.json");
    let roc = d.join("roc.csv");
    let stdout = volflow(&[
        "evaluate",
        "--scores",
        p(&test_csv),
        "--threshold-from",
        "0.5",
        "--out",
        p(&metrics),
        "--roc-csv",
        p(&roc),
    ]);
    assert!(stdout.contains("AUROC 0.7500"));
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(&metrics).unwrap()).unwrap();
    assert_eq!(m["auroc"], 0.75);
}

#[test]
fn rejects_bad_arguments() {
    let out = Command::new(env!("CARGO_BIN_EXE_volflow"))
        .args([
            "evaluate",
            "--scores",
            "/nonexistent.csv",
            "--threshold-from",
            "1",
            "--out",
            "/tmp/x.json",
        ])
        .output()
        .unwrap();
    assert!(!out.status.success());
    let out = Command::new(env!("CARGO_BIN_EXE_volflow"))
        .arg("no-such-command")
        .output()
        .unwrap();
    assert!(!out.status.success());
}
