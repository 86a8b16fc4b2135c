use std::path::Path;

use qprecode::dataset::ChannelDataset;
use qprecode::gnn::checkpoint::Checkpoint;
use qprecode::harness::{self, csv_body, manifest_path, sha256_hex, ExperimentConfig, HarnessError};
use qprecode::quantizer::ScalarQuantizer;

fn cfg(text: &str, out: &Path) -> ExperimentConfig {
    ExperimentConfig::parse(&format!("{text}out = {}\n", out.display())).unwrap()
}

fn body(path: &Path) -> String {
    csv_body(&std::fs::read_to_string(path).unwrap())
}

#[test]
fn eval_linear_is_reproducible_and_manifest_matches() {
    let dir = tempfile::tempdir().unwrap();
    let text = "scenario = eval-linear\nprecoder = mrt,zf\nbits = 1,inf\nm = 8\nk = 2\nsnr_list_db = -10,0,10\nseed = 3\nn_test_channels = 6\nn_symbols = 64\n";
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    let ma = harness::run(&cfg(text, &a)).unwrap();
    let mb = harness::run(&cfg(&format!("{text}threads = 3\n"), &b)).unwrap();
    assert_eq!(body(&a), body(&b));
    assert_eq!(ma.body_sha256, mb.body_sha256);
    assert_eq!(cfg(text, &a).hash(), cfg(&format!("{text}threads = 3\n"), &a).hash());
    assert_ne!(ma.provenance.config_hash, mb.provenance.config_hash);
    assert_eq!(ma.rows, 2 * 2 * 3);
    assert_eq!(ma.body_sha256, sha256_hex(body(&a).as_bytes()));

    let text_a = std::fs::read_to_string(&a).unwrap();
    assert!(text_a.starts_with('#'));
    let header = body(&a).lines().next().unwrap().to_string();
    assert_eq!(header, "precoder,bits,k,snr_db,rate_mean,rate_std,n_channels");

    let man: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(manifest_path(&a)).unwrap()).unwrap();
    assert_eq!(man["body_sha256"], ma.body_sha256.as_str());
}

#[test]
fn unquantized_zf_beats_one_bit_mrt_at_high_snr() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("r.csv");
    let text = "scenario = eval-linear\nprecoder = mrt,zf\nbits = 1,inf\nm = 16\nk = 2\nsnr_list_db = 20\nseed = 1\nn_test_channels = 20\nn_symbols = 200\n";
    harness::run(&cfg(text, &out)).unwrap();
    let b = body(&out);
    let mut lines = b.lines();
    let cols: Vec<&str> = lines.next().unwrap().split(',').collect();
    let col = |n: &str| cols.iter().position(|c| *c == n).unwrap();
    let rate = |p: &str, bits: &str| -> f64 {
        b.lines()
            .skip(1)
            .map(|l| l.split(',').collect::<Vec<_>>())
            .find(|r| r[col("precoder")] == p && r[col("bits")] == bits)
            .map(|r| r[col("rate_mean")].parse().unwrap())
            .unwrap()
    };
    assert!(rate("zf", "inf") > rate("mrt", "1"));
    assert!(rate("zf", "inf") > rate("zf", "1"));
}

#[test]
fn gen_channels_and_design_quantizer_outputs_load() {
    let dir = tempfile::tempdir().unwrap();
    let ch = dir.path().join("sub/ch.bin");
    let m = harness::run(&cfg("scenario = gen-channels\nmodel = los\nm = 4\nk = 3\ncount = 7\nseed = 9\n", &ch)).unwrap();
    let ds = ChannelDataset::load(&ch).unwrap();
    assert_eq!((ds.len(), m.rows), (7, 7));
    assert_eq!(ds, ChannelDataset::generate(qprecode::ChannelModel::LosUla, 4, 3, 7, 9).unwrap());

    let qp = dir.path().join("q.json");
    harness::run(&cfg("scenario = design-quantizer\nbits = 3\n", &qp)).unwrap();
    let q = ScalarQuantizer::load(&qp).unwrap();
    assert_eq!(q.num_levels(), 8);
}

#[test]
fn eval_reads_channel_file() {
    let dir = tempfile::tempdir().unwrap();
    let ch = dir.path().join("ch.bin");
    harness::run(&cfg("scenario = gen-channels\nmodel = rayleigh\nm = 4\nk = 2\ncount = 3\nseed = 2\n", &ch)).unwrap();
    let out = dir.path().join("e.csv");
    let text = format!("scenario = eval-linear\nprecoder = zf\nbits = 2\nm = 4\nk = 2\nsnr_list_db = 0\nseed = 0\nn_symbols = 32\nchannels = {}\n", ch.display());
    harness::run(&cfg(&text, &out)).unwrap();
    // Wrong dimensions against the file are rejected.
    let bad = text.replace("m = 4", "m = 5");
    assert!(harness::run(&cfg(&bad, &dir.path().join("x.csv"))).is_err());
}

#[test]
fn train_then_evaluate_and_resume() {
    let dir = tempfile::tempdir().unwrap();
    let ck = dir.path().join("g.qpgn");
    let text = "scenario = train\nm = 3\nk = 1\nbits = 1\nd_h = 4\nn_h = 1\nepochs = 2\nseed = 4\nbatch = 4\nn_s_train = 8\nn_train_channels = 8\nn_val_channels = 4\n";
    let m1 = harness::run(&cfg(text, &ck)).unwrap();
    let best = Checkpoint::load(&ck).unwrap();
    assert!(best.optimizer.is_none());
    assert!(harness::latest_path(&ck).exists());
    let log = std::fs::read_to_string(harness::log_path(&ck)).unwrap();
    assert!(csv_body(&log).starts_with("epoch,step,loss,val_rate,wall_ms"));

    // A second run over the finished `.latest` leaves the result unchanged.
    let m2 = harness::run(&cfg(text, &ck)).unwrap();
    assert_eq!(m1.body_sha256, m2.body_sha256);

    let ev = dir.path().join("ev.csv");
    let t = format!("scenario = eval-gnn\ncheckpoint = {}\nsnr_list_db = 0,10\nseed = 1\nn_test_channels = 3\nn_symbols = 16\n", ck.display());
    let me = harness::run(&cfg(&t, &ev)).unwrap();
    assert_eq!(me.rows, 2);

    let nm = dir.path().join("nm.csv");
    let t = format!("scenario = nmse\nprecoder = mrt,gnn\nbits = 1\ncheckpoint = {}\nm = 3\nk = 1\nseed = 1\nn_test_channels = 3\nn_symbols = 16\n", ck.display());
    assert_eq!(harness::run(&cfg(&t, &nm)).unwrap().rows, 2);

    let rad = dir.path().join("rad.csv");
    let t = format!("scenario = radiation\nprecoder = gnn\nbits = 1\ncheckpoint = {}\nm = 3\nuser_angles_deg = 60\nseed = 1\nn_symbols = 32\nangle_step_deg = 10\n", ck.display());
    assert_eq!(harness::run(&cfg(&t, &rad)).unwrap().rows, 19);
}

#[test]
fn config_errors_are_reported() {
    let err = ExperimentConfig::parse("scenario = power\nmode = baseband\nbits = 4\nm = 32\nk = 4\nout = x\nfoo = 1\n").unwrap_err();
    assert!(matches!(err, HarnessError::UnknownKey(_)), "{err:?}");
    let err = ExperimentConfig::parse("scenario = power\nmode = baseband\n").unwrap_err();
    match err {
        HarnessError::MissingKeys(k) => assert!(k.contains(&"bandwidth_list_hz".to_string())),
        e => panic!("{e:?}"),
    }
    let dir = tempfile::tempdir().unwrap();
    let c = cfg("scenario = power\nmode = baseband\nbits = 4\nm = 32\nk = 4\nd_h = 128\nbandwidth_list_hz = 1e6\n", &dir.path().join("p.csv"));
    assert!(harness::run(&c).is_err());
}

#[test]
fn power_sweep_rows() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("p.csv");
    let c = cfg("scenario = power\nmode = baseband\nbits = 4\nm = 32\nk = 4\nd_h = 128\nn_h = 4\nbandwidth_list_hz = 1e6,1e7,1e8\n", &out);
    let m = harness::run(&c).unwrap();
    assert_eq!(m.rows, 3);
    let b = body(&out);
    assert_eq!(b.lines().next().unwrap(), "B_hz,p_dacs_w,p_gnn_w,p_total_w,req_flops_per_s");
}

#[test]
fn shipped_presets_parse() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../presets");
    let dir = tempfile::tempdir().unwrap();
    let mut n = 0;
    for tier in ["full", "desk"] {
        for e in std::fs::read_dir(root.join(tier)).unwrap() {
            let p = e.unwrap().path();
            let mut c = ExperimentConfig::load(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
            n += 1;
            if c.scenario == harness::Scenario::Power {
                let out = dir.path().join(p.file_name().unwrap()).with_extension("csv");
                c.set("out", out.display().to_string()).unwrap();
                assert!(harness::run(&c).unwrap().rows > 0);
            }
        }
    }
    assert!(n >= 40, "{n} presets");
}
