use std::path::Path;
use std::process::{Command, Output};

fn qprecode(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qprecode"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn qprecode")
}

fn ok(args: &[&str]) -> String {
    let o = qprecode(args);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

fn body(path: &Path) -> String {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with('#'))
        .map(|l| format!("{l}\n"))
        .collect()
}

#[test]
fn power_writes_csv_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("p.csv");
    let o = out.to_str().unwrap();
    let stdout = ok(&["power", "--mode", "rfdac", "--bits", "1", "--m", "32", "--k", "4", "--bandwidth-list", "1e6,2e6", "--out", o]);
    assert!(stdout.contains("manifest"));
    let text = std::fs::read_to_string(&out).unwrap();
    let header: Vec<&str> = text.lines().filter(|l| l.starts_with('#')).collect();
    assert!(header.iter().any(|l| l.contains("config-hash")), "{header:?}");
    let b = body(&out);
    let mut lines = b.lines();
    assert_eq!(lines.next(), Some("B_hz,p_dacs_w,p_gnn_w,p_total_w,req_flops_per_s"));
    assert_eq!(lines.count(), 2);
    let mut man = out.clone().into_os_string();
    man.push(".manifest.json");
    assert!(Path::new(&man).exists());
}

#[test]
fn eval_linear_rerun_is_identical() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str, threads: &str| {
        let out = dir.path().join(name);
        ok(&[
            "--threads", threads, "eval-linear", "--precoder", "mrt", "--bits", "1", "--m", "8", "--k", "2", "--snr-list", "0,10",
            "--seed", "5", "--n-test-channels", "4", "--n-symbols", "50", "--out", out.to_str().unwrap(),
        ]);
        body(&out)
    };
    let a = run("a.csv", "1");
    assert_eq!(a, run("b.csv", "2"));
    assert_eq!(a.lines().count(), 3);
}

#[test]
fn config_file_and_flag_override() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("q.cfg");
    let out = dir.path().join("q.json");
    std::fs::write(&cfg, format!("scenario = design-quantizer\nbits = 2\nout = {}\n", out.display())).unwrap();
    ok(&["design-quantizer", "--config", cfg.to_str().unwrap()]);
    let q: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(q["levels"].as_array().unwrap().len(), 4);
    ok(&["design-quantizer", "--config", cfg.to_str().unwrap(), "--bits", "3"]);
    let q: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(q["levels"].as_array().unwrap().len(), 8);
}

#[test]
fn bad_configs_fail() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "scenario = power\nmode = baseband\nbits = 1\nm = 8\nk = 1\nbandwidth_list_hz = 1e6\nout = x.csv\ntypo = 3\n").unwrap();
    let o = qprecode(&["power", "--config", cfg.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("typo"));

    let o = qprecode(&["design-quantizer", "--config", cfg.to_str().unwrap()]);
    assert!(!o.status.success(), "scenario mismatch must fail");

    let o = qprecode(&["power", "--mode", "baseband", "--bits", "1"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("missing"));
}

#[test]
fn gen_channels_then_eval_from_file() {
    let dir = tempfile::tempdir().unwrap();
    let ch = dir.path().join("ch.bin");
    ok(&["gen-channels", "--model", "los", "--m", "8", "--k", "2", "--count", "3", "--seed", "1", "--out", ch.to_str().unwrap()]);
    let out = dir.path().join("r.csv");
    ok(&[
        "eval-linear", "--precoder", "zf", "--bits", "inf", "--m", "8", "--k", "2", "--snr-list", "10", "--seed", "1",
        "--channels", ch.to_str().unwrap(), "--n-symbols", "20", "--out", out.to_str().unwrap(),
    ]);
    let b = body(&out);
    assert!(b.lines().nth(1).unwrap().ends_with(",3"), "{b}");
}
