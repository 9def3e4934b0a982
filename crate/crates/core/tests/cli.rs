use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn binflow(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_binflow")).args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn data_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist-5k")
}

fn manifest(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

fn small_toy(out: &Path, extra: &[&str]) -> Output {
    let out = out.to_str().unwrap();
    let mut args = vec!["toy", "--steps", "40", "--batch", "64", "--ber-samples", "128", "--seed", "3", "--out", out];
    args.extend_from_slice(extra);
    binflow(&args)
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(code(&binflow(&["toy", "--steps", "5"])), 2);
    assert_eq!(code(&binflow(&["toy", "--bogus", "1"])), 2);
    assert_eq!(code(&binflow(&["frobnicate"])), 2);
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    assert_eq!(code(&binflow(&["toy", "--pred", "v", "--loss", "bce", "--out", out])), 2);
    assert_eq!(code(&binflow(&["toy", "--sampler", "cosine", "--out", out])), 2);
    let report = dir.path().join("r.json");
    let report = report.to_str().unwrap();
    assert_eq!(code(&binflow(&["analyze", "--case", "binary", "--s", "0", "--report", report])), 2);
    assert_eq!(code(&binflow(&["analyze", "--case", "binary", "--s", "-1", "--report", report])), 2);
    assert_eq!(code(&binflow(&["--help"])), 0);
}

#[test]
fn missing_inputs_exit_3_with_hint() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let out = out.to_str().unwrap();
    let res = binflow(&["bmnist", "--images", "/nonexistent/images", "--labels", "/nonexistent/labels", "--out", out]);
    assert_eq!(code(&res), 3);
    assert!(String::from_utf8_lossy(&res.stderr).contains("hint:"));
    assert_eq!(code(&binflow(&["toy", "--config", "/nonexistent.cfg", "--out", out])), 3);
}

#[test]
fn analyze_report_lists_required_keys() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("binary.json");
    let res = binflow(&["analyze", "--case", "binary", "--s", "0.8", "--report", path.to_str().unwrap()]);
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
    let r: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    for key in ["case", "slope_integrand", "slope_integral", "u_peak", "t_peak", "mass_above"] {
        assert!(r.get(key).is_some(), "missing {key}");
    }
    assert!((r["u_peak"].as_f64().unwrap() - 2.56).abs() <= 0.01);

    let path = dir.path().join("continuous.json");
    let res = binflow(&["analyze", "--case", "continuous", "--s", "0.8", "--report", path.to_str().unwrap()]);
    assert_eq!(code(&res), 0);
    let r: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    assert!((r["slope_integral"].as_f64().unwrap() + 1.0).abs() <= 0.1);
}

#[test]
fn toy_is_byte_reproducible() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    assert_eq!(code(&small_toy(a.path(), &[])), 0);
    assert_eq!(code(&small_toy(b.path(), &[])), 0);
    let files = manifest(a.path())["files"].as_array().unwrap().clone();
    assert!(files.len() >= 4);
    for f in &files {
        let f = f.as_str().unwrap();
        assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap(), "{f}");
    }
    let (mut ma, mut mb) = (manifest(a.path()), manifest(b.path()));
    assert_eq!(ma["status"], "complete");
    for m in [&mut ma, &mut mb] {
        m["duration_secs"] = serde_json::Value::Null;
        m["out_dir"] = serde_json::Value::Null;
    }
    assert_eq!(ma, mb);
}

#[test]
fn flags_override_config_file_over_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("toy.cfg");
    std::fs::write(&cfg, "# toy settings\nsteps = 30\nlr = 0.001\n").unwrap();
    let cfg = cfg.to_str().unwrap();
    let from_file = dir.path().join("file");
    let res = binflow(&["toy", "--config", cfg, "--batch", "32", "--ber-samples", "64", "--out", from_file.to_str().unwrap()]);
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
    let m = manifest(&from_file);
    assert_eq!(m["config"]["steps"], 30);
    assert_eq!(m["config"]["lr"], 0.001);
    assert_eq!(m["config"]["batch"], 32);
    assert_eq!(m["config"]["d"], 16);
    let from_flag = dir.path().join("flag");
    let res = binflow(&["toy", "--config", cfg, "--steps", "20", "--batch", "32", "--ber-samples", "64", "--out", from_flag.to_str().unwrap()]);
    assert_eq!(code(&res), 0);
    assert_eq!(manifest(&from_flag)["config"]["steps"], 20);
    let lines = std::fs::read_to_string(from_flag.join("loss_history.csv")).unwrap().lines().count();
    assert_eq!(lines, 21);

    std::fs::write(dir.path().join("bad.cfg"), "stepz = 3\n").unwrap();
    let bad = dir.path().join("bad.cfg");
    assert_eq!(code(&binflow(&["toy", "--config", bad.to_str().unwrap(), "--out", from_flag.to_str().unwrap()])), 2);
}

#[test]
fn mismatched_uniform_toy_records_divergence() {
    let dir = tempfile::tempdir().unwrap();
    let res = binflow(&[
        "toy", "--data", "bpsk", "--pred", "x", "--loss", "vmse", "--sampler", "uniform", "--seed", "7", "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
    let m = manifest(dir.path());
    let events = m["divergence_events"].as_array().unwrap();
    assert_eq!(events.len(), 1, "{m}");
    assert!(m["summary"]["completed_steps"].as_u64().unwrap() < 5000);
}

#[test]
fn bmnist_smoke_run_on_a_subset() {
    let dir = tempfile::tempdir().unwrap();
    let images = data_dir().join("images-idx3-ubyte");
    let labels = data_dir().join("labels-idx1-ubyte");
    let res = binflow(&[
        "bmnist",
        "--images",
        images.to_str().unwrap(),
        "--labels",
        labels.to_str().unwrap(),
        "--downscale",
        "2",
        "--subset",
        "100",
        "--steps",
        "200",
        "--samples-per-class",
        "2",
        "--objective",
        "x-xmse/uniform",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
    let m = manifest(dir.path());
    assert_eq!(m["config"]["images"], 100);
    assert_eq!(m["config"]["height"], 14);
    let files: Vec<&str> = m["files"].as_array().unwrap().iter().map(|v| v.as_str().unwrap()).collect();
    assert!(files.contains(&"metrics.csv"));
    assert!(files.iter().any(|f| f.ends_with("_samples.pgm")));
    for f in files {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let metrics = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 3);
    assert!(metrics.lines().nth(2).unwrap().starts_with("x-xmse/uniform,200,false,"));
}

#[test]
fn bmnist_cache_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cache = dir.path().join("set.bnfm");
    let run = |name: &str, images: &Path| {
        let out = dir.path().join(name);
        let res = binflow(&[
            "bmnist",
            "--images",
            images.to_str().unwrap(),
            "--labels",
            data_dir().join("labels-idx1-ubyte").to_str().unwrap(),
            "--cache",
            cache.to_str().unwrap(),
            "--subset",
            "50",
            "--steps",
            "5",
            "--hidden",
            "16",
            "--samples-per-class",
            "1",
            "--sample-steps",
            "2",
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
        std::fs::read(out.join("c0_x-xmse_uniform_loss.csv")).unwrap()
    };
    let first = run("a", &data_dir().join("images-idx3-ubyte"));
    assert!(cache.exists());
    let second = run("b", Path::new("/nonexistent/images"));
    assert_eq!(first, second);
}

#[test]
fn mimo_with_map_reports_every_snr() {
    let dir = tempfile::tempdir().unwrap();
    let res = binflow(&[
        "mimo",
        "--n",
        "2",
        "--snr-sweep",
        "0,6,12",
        "--cells",
        "x-bce,x-vmse",
        "--steps",
        "40",
        "--batch",
        "64",
        "--hidden",
        "32",
        "--eval-bits",
        "2000",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
    let csv = std::fs::read_to_string(dir.path().join("ber.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "snr_db,detector,ber,bit_count");
    for snr in ["0", "6", "12"] {
        assert!(csv.lines().any(|l| l.starts_with(&format!("{snr},map,"))), "{csv}");
        assert!(csv.lines().any(|l| l.starts_with(&format!("{snr},x-bce/uniform,"))), "{csv}");
    }
    let m = manifest(dir.path());
    assert!(m["summary"]["snr_definition"].as_str().unwrap().contains("1/(2N)"));
}
