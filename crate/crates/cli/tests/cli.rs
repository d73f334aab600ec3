use std::fs;
use std::process::Command;

fn plab(args: &[&str]) -> (bool, String, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_plab")).args(args).output().unwrap();
    (
        out.status.success(),
        String::from_utf8(out.stdout).unwrap(),
        String::from_utf8(out.stderr).unwrap(),
    )
}

const TINY: &str = "model.hidden = 8,8\ndata.train = 96\ndata.test = 32\ndata.dim = 6\ndata.classes = 3\n\
                    data.batch = 16\nstream.tasks = 2\nstream.epochs = 2\neval.diversity_batch = 8\neval.probe = 16\n";

#[test]
fn run_writes_outputs_and_analyze_reads_the_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.cfg");
    fs::write(&cfg, TINY).unwrap();
    let out = dir.path().join("out");
    let (ok, stdout, stderr) = plab(&["run", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--seed", "3"]);
    assert!(ok, "{stderr}");
    assert_eq!(stdout.lines().filter(|l| l.starts_with(|c: char| c.is_ascii_digit())).count(), 2);
    for f in ["metrics.csv", "manifest.json", "checkpoint.bin"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let manifest = fs::read_to_string(out.join("manifest.json")).unwrap();
    assert!(manifest.contains("\"master\": 3"));

    let (ok, stdout, stderr) = plab(&["analyze", "--checkpoint", out.join("checkpoint.bin").to_str().unwrap()]);
    assert!(ok, "{stderr}");
    let rows: Vec<&str> = stdout.lines().skip(1).collect();
    assert_eq!(rows.len(), 3);
    assert!(rows[0].starts_with("1\t8x6\t"));
}

#[test]
fn bad_config_fails_loudly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "model.hiden = 8\n").unwrap();
    let (ok, _, stderr) = plab(&["run", "--config", cfg.to_str().unwrap()]);
    assert!(!ok);
    assert!(stderr.contains("model.hiden"), "{stderr}");
    let (ok, _, _) = plab(&["run", "--config", dir.path().join("missing.cfg").to_str().unwrap()]);
    assert!(!ok);
}

#[test]
fn sweep_prints_one_row_per_cell() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.cfg");
    fs::write(&cfg, TINY).unwrap();
    let out = dir.path().join("grid");
    let (ok, stdout, stderr) = plab(&[
        "sweep",
        "--config",
        cfg.to_str().unwrap(),
        "--lambdas",
        "0.01,0.001",
        "--kinds",
        "spectral,l2",
        "--seeds",
        "0,1",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(ok, "{stderr}");
    assert_eq!(stdout.lines().count(), 1 + 2 * 2 * 2);
    assert!(out.join("summary.csv").exists());
    assert!(out.join("spectral_lambda0.01_seed1/metrics.csv").exists());
    let (ok, _, _) = plab(&["sweep", "--config", cfg.to_str().unwrap(), "--lambdas", "0.1", "--kinds", "bogus"]);
    assert!(!ok);
}

#[test]
fn demos_report_the_closed_forms() {
    let (ok, stdout, _) = plab(&["demo-a1", "--c", "1,10,100", "--alpha", "0.01"]);
    assert!(ok);
    assert!(stdout.contains("10\t10.100000\t10.000000\t0.100000\t100.000000\t0.010000\t100.000000"), "{stdout}");
    assert!(stdout.contains("fastest at every step size: true"));

    let (ok, stdout, _) = plab(&["demo-s32", "--a", "0.5,0.1,0.02"]);
    assert!(ok);
    assert!(stdout.contains("steps strictly increase as a decreases: true"), "{stdout}");

    let (ok, stdout, _) = plab(&["demo-s32", "--a", "0.1", "--json"]);
    assert!(ok);
    let v: serde_json::Value = serde_json::from_str(&stdout).unwrap();
    let g = v["rows"][0]["grad_theta2"][1].as_f64().unwrap();
    assert!((g - (0.01 - 1.0) * 0.1).abs() < 1e-12);

    let (ok, _, _) = plab(&["demo-s32", "--a", "2"]);
    assert!(!ok);
}
