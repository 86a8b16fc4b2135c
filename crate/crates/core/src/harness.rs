//! Experiment orchestration: strict key-value configs, seeded sweeps,
//! CSV output with a provenance header and a JSON run manifest.
//!
//! Config files hold one `key = value` pair per line; `#` starts a
//! comment. Lists are comma separated. Unknown keys are rejected.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::channel::{gen_los_ula, symbols_for_channel, ChannelMatrix, ChannelModel, CMatrix};
use crate::dataset::{ChannelDataset, DatasetError};
use crate::energy::{power_row, DacMode, EnergyError, GnnShape, PowerModel, PowerRow};
use crate::gnn::checkpoint::{Checkpoint, CheckpointError};
use crate::gnn::{GnnConfig, GnnError, GnnWeights};
use crate::metrics::{
    angle_grid, estimate_bussgang, nmse_db, noise_variance, radiation_pattern, rate_from_snidr,
    snidr_from_samples, MetricsError, RadiationPoint,
};
use crate::precoders::{linear_quantized_tx, PrecoderError, PrecoderKind};
use crate::quantizer::{QuantizerError, Resolution, ScalarQuantizer};
use crate::trainer::{gnn_outputs, train, CheckpointPlan, TrainConfig, TrainError, TrainState};

/// Symbols per channel for rate and NMSE evaluation.
pub const N_EVAL: usize = 1000;
/// Symbols for a radiation pattern.
pub const N_RADIATION: usize = 10_000;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("missing required config keys: {}", .0.join(", "))]
    MissingKeys(Vec<String>),
    #[error("bad value for `{key}`: {msg}")]
    Value { key: String, msg: String },
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Precoder(#[from] PrecoderError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Quantizer(#[from] QuantizerError),
    #[error(transparent)]
    Gnn(#[from] GnnError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Energy(#[from] EnergyError),
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io { path: path.to_path_buf(), source }
}

/// Parsed `key = value` pairs in file order of first appearance.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>, HarnessError> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| HarnessError::Syntax { line: i + 1, msg: format!("expected `key = value`, got `{line}`") })?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(HarnessError::Syntax { line: i + 1, msg: "empty key".into() });
        }
        if out.insert(k.to_string(), v.to_string()).is_some() {
            return Err(HarnessError::Syntax { line: i + 1, msg: format!("duplicate key `{k}`") });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scenario {
    GenChannels,
    DesignQuantizer,
    EvalLinear,
    Train,
    EvalGnn,
    Radiation,
    Nmse,
    Power,
}

impl Scenario {
    pub const ALL: [Scenario; 8] = [
        Scenario::GenChannels,
        Scenario::DesignQuantizer,
        Scenario::EvalLinear,
        Scenario::Train,
        Scenario::EvalGnn,
        Scenario::Radiation,
        Scenario::Nmse,
        Scenario::Power,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scenario::GenChannels => "gen-channels",
            Scenario::DesignQuantizer => "design-quantizer",
            Scenario::EvalLinear => "eval-linear",
            Scenario::Train => "train",
            Scenario::EvalGnn => "eval-gnn",
            Scenario::Radiation => "radiation",
            Scenario::Nmse => "nmse",
            Scenario::Power => "power",
        }
    }

    fn required(self) -> &'static [&'static str] {
        match self {
            Scenario::GenChannels => &["model", "m", "k", "count", "seed", "out"],
            Scenario::DesignQuantizer => &["bits", "out"],
            Scenario::EvalLinear => &["precoder", "bits", "m", "k", "snr_list_db", "seed", "out"],
            Scenario::Train => &["m", "k", "bits", "d_h", "n_h", "epochs", "seed", "out"],
            Scenario::EvalGnn => &["checkpoint", "snr_list_db", "seed", "out"],
            Scenario::Radiation => &["precoder", "bits", "m", "user_angles_deg", "seed", "out"],
            Scenario::Nmse => &["precoder", "bits", "m", "k", "seed", "out"],
            Scenario::Power => &["mode", "bits", "m", "k", "bandwidth_list_hz", "out"],
        }
    }
}

impl std::str::FromStr for Scenario {
    type Err = HarnessError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Scenario::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| HarnessError::Value { key: "scenario".into(), msg: format!("unknown scenario `{s}`") })
    }
}

pub const KNOWN_KEYS: &[&str] = &[
    "scenario",
    "seed",
    "model",
    "m",
    "k",
    "count",
    "bits",
    "precoder",
    "d_h",
    "n_h",
    "snr_list_db",
    "snr_train_db",
    "n_test_channels",
    "n_val_channels",
    "n_train_channels",
    "n_symbols",
    "n_s_train",
    "epochs",
    "batch",
    "lr",
    "tau",
    "user_angles_deg",
    "angle_step_deg",
    "mode",
    "bandwidth_list_hz",
    "threads",
    "channels",
    "val",
    "checkpoint",
    "out",
];

/// A validated experiment description. Values stay as strings until a
/// runner asks for them in a typed form, so the canonical text (and its
/// hash) is exactly what the user wrote.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub scenario: Scenario,
    values: BTreeMap<String, String>,
}

impl ExperimentConfig {
    pub fn from_map(values: BTreeMap<String, String>) -> Result<Self, HarnessError> {
        if let Some(k) = values.keys().find(|k| !KNOWN_KEYS.contains(&k.as_str())) {
            return Err(HarnessError::UnknownKey(k.clone()));
        }
        let scenario: Scenario = values
            .get("scenario")
            .ok_or_else(|| HarnessError::MissingKeys(vec!["scenario".into()]))?
            .parse()?;
        let missing: Vec<String> = scenario.required().iter().filter(|k| !values.contains_key(**k)).map(|k| k.to_string()).collect();
        if !missing.is_empty() {
            return Err(HarnessError::MissingKeys(missing));
        }
        Ok(ExperimentConfig { scenario, values })
    }

    pub fn parse(text: &str) -> Result<Self, HarnessError> {
        Self::from_map(parse_kv(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, HarnessError> {
        let p = path.as_ref();
        Self::parse(&std::fs::read_to_string(p).map_err(io_err(p))?)
    }

    /// Sorted `key = value` lines, without `threads` (results do not
    /// depend on it).
    pub fn canonical(&self) -> String {
        self.values.iter().filter(|(k, _)| k.as_str() != "threads").fold(String::new(), |mut s, (k, v)| {
            let _ = writeln!(s, "{k} = {v}");
            s
        })
    }

    pub fn hash(&self) -> String {
        sha256_hex(self.canonical().as_bytes())
    }

    pub fn values(&self) -> &BTreeMap<String, String> {
        &self.values
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    pub fn get<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>, HarnessError>
    where
        T::Err: std::fmt::Display,
    {
        self.raw(key)
            .map(|v| v.parse::<T>().map_err(|e| HarnessError::Value { key: key.into(), msg: format!("`{v}`: {e}") }))
            .transpose()
    }

    pub fn req<T: std::str::FromStr>(&self, key: &str) -> Result<T, HarnessError>
    where
        T::Err: std::fmt::Display,
    {
        self.get(key)?.ok_or_else(|| HarnessError::MissingKeys(vec![key.into()]))
    }

    pub fn or<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T, HarnessError>
    where
        T::Err: std::fmt::Display,
    {
        Ok(self.get(key)?.unwrap_or(default))
    }

    pub fn list<T: std::str::FromStr>(&self, key: &str) -> Result<Vec<T>, HarnessError>
    where
        T::Err: std::fmt::Display,
    {
        let Some(v) = self.raw(key) else {
            return Err(HarnessError::MissingKeys(vec![key.into()]));
        };
        v.split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| s.parse::<T>().map_err(|e| HarnessError::Value { key: key.into(), msg: format!("`{s}`: {e}") }))
            .collect()
    }

    pub fn bits_list(&self) -> Result<Vec<Option<u32>>, HarnessError> {
        let raw = self.list::<String>("bits")?;
        raw.iter().map(|s| parse_bits(s).map_err(|msg| HarnessError::Value { key: "bits".into(), msg })).collect()
    }

    pub fn path(&self, key: &str) -> Option<PathBuf> {
        self.raw(key).map(PathBuf::from)
    }

    pub fn set(&mut self, key: &str, value: impl Into<String>) -> Result<(), HarnessError> {
        if !KNOWN_KEYS.contains(&key) {
            return Err(HarnessError::UnknownKey(key.into()));
        }
        self.values.insert(key.into(), value.into());
        Ok(())
    }
}

/// `"inf"` means no quantization.
pub fn parse_bits(s: &str) -> Result<Option<u32>, String> {
    if s.eq_ignore_ascii_case("inf") {
        return Ok(None);
    }
    s.parse::<u32>().map(Some).map_err(|e| format!("`{s}`: {e}"))
}

pub fn bits_label(b: Option<u32>) -> String {
    b.map_or_else(|| "inf".into(), |b| b.to_string())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// `git describe --always --dirty` of the working directory, or
/// `"unknown"` outside a repository.
pub fn git_describe() -> String {
    std::process::Command::new("git")
        .args(["describe", "--always", "--dirty"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| "unknown".into())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Provenance {
    pub git_describe: String,
    pub config_hash: String,
    pub seed: u64,
}

impl Provenance {
    pub fn new(cfg: &ExperimentConfig) -> Result<Self, HarnessError> {
        Ok(Provenance { git_describe: git_describe(), config_hash: cfg.hash(), seed: cfg.or("seed", 0u64)? })
    }

    pub fn header(&self) -> String {
        format!("# git-describe: {}\n# config-hash: {}\n# seed: {}\n", self.git_describe, self.config_hash, self.seed)
    }
}

/// A CSV table: a header row and data rows, without provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub columns: Vec<&'static str>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn body(&self) -> String {
        let mut s = self.columns.join(",");
        s.push('\n');
        for r in &self.rows {
            s.push_str(&r.join(","));
            s.push('\n');
        }
        s
    }
}

/// Format a float so that the text round-trips; infinities as `inf`/`-inf`.
pub fn fmt_f64(x: f64) -> String {
    if x.is_infinite() {
        if x > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{x:?}")
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub subcommand: &'static str,
    pub provenance: Provenance,
    pub config: BTreeMap<String, String>,
    pub outputs: Vec<String>,
    pub body_sha256: String,
    pub rows: usize,
}

/// Write `<out>` (header + body) and `<out>.manifest.json`. Returns the manifest.
pub fn write_outputs(cfg: &ExperimentConfig, out: &Path, table: &Table, extra: &[PathBuf]) -> Result<Manifest, HarnessError> {
    let prov = Provenance::new(cfg)?;
    let body = table.body();
    ensure_parent(out)?;
    std::fs::write(out, format!("{}{}", prov.header(), body)).map_err(io_err(out))?;
    write_manifest(cfg, out, sha256_hex(body.as_bytes()), table.rows.len(), extra)
}

fn ensure_parent(out: &Path) -> Result<(), HarnessError> {
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    Ok(())
}

/// Write `<out>.manifest.json` for outputs already on disk.
pub fn write_manifest(cfg: &ExperimentConfig, out: &Path, body_sha256: String, rows: usize, extra: &[PathBuf]) -> Result<Manifest, HarnessError> {
    let mut outputs = vec![out.display().to_string()];
    outputs.extend(extra.iter().map(|p| p.display().to_string()));
    let manifest = Manifest {
        subcommand: cfg.scenario.name(),
        provenance: Provenance::new(cfg)?,
        config: cfg.values().clone(),
        outputs,
        body_sha256,
        rows,
    };
    let mp = manifest_path(out);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(&mp, text + "\n").map_err(io_err(&mp))?;
    Ok(manifest)
}

pub fn manifest_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

/// Strip the `#` provenance lines from a CSV file's text.
pub fn csv_body(text: &str) -> String {
    text.lines().filter(|l| !l.starts_with('#')).fold(String::new(), |mut s, l| {
        s.push_str(l);
        s.push('\n');
        s
    })
}

/// Map `f` over `0..n` on up to `threads` workers; results in index order.
pub fn par_map<T: Send, F: Fn(usize) -> T + Sync>(n: usize, threads: usize, f: F) -> Vec<T> {
    let threads = threads.clamp(1, n.max(1));
    if threads == 1 {
        return (0..n).map(f).collect();
    }
    let chunk = n.div_ceil(threads);
    std::thread::scope(|sc| {
        let handles: Vec<_> = (0..threads)
            .map(|w| {
                let f = &f;
                sc.spawn(move || (w * chunk..((w + 1) * chunk).min(n)).map(f).collect::<Vec<T>>())
            })
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("worker panicked")).collect()
    })
}

pub fn default_threads() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

/// Mean and standard error of the mean (0 for a single sample).
pub fn mean_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RateRow {
    pub precoder: String,
    pub bits: String,
    pub k: usize,
    pub snr_db: f64,
    pub rate_mean: f64,
    pub rate_std: f64,
    pub n_channels: usize,
}

pub fn rate_table(rows: &[RateRow]) -> Table {
    Table {
        columns: vec!["precoder", "bits", "k", "snr_db", "rate_mean", "rate_std", "n_channels"],
        rows: rows
            .iter()
            .map(|r| {
                vec![
                    r.precoder.clone(),
                    r.bits.clone(),
                    r.k.to_string(),
                    fmt_f64(r.snr_db),
                    fmt_f64(r.rate_mean),
                    fmt_f64(r.rate_std),
                    r.n_channels.to_string(),
                ]
            })
            .collect(),
    }
}

/// Something that maps (channel, symbols K×N) to DAC outputs M×N.
pub trait Transmitter: Sync {
    fn label(&self) -> String;
    fn bits(&self) -> Option<u32>;
    fn transmit(&self, h: &ChannelMatrix, s: &CMatrix, p_t: f64) -> Result<CMatrix, HarnessError>;
}

pub struct LinearTx {
    pub kind: PrecoderKind,
    pub res: Resolution,
}

impl LinearTx {
    pub fn new(kind: PrecoderKind, bits: Option<u32>) -> Result<Self, HarnessError> {
        Ok(LinearTx { kind, res: Resolution::design(bits)? })
    }
}

impl Transmitter for LinearTx {
    fn label(&self) -> String {
        self.kind.to_string()
    }
    fn bits(&self) -> Option<u32> {
        match &self.res {
            Resolution::Finite(q) => Some(q.bits()),
            Resolution::Infinite => None,
        }
    }
    fn transmit(&self, h: &ChannelMatrix, s: &CMatrix, p_t: f64) -> Result<CMatrix, HarnessError> {
        let batch = crate::channel::SymbolBatch::from_matrix(s.transpose(), 0).map_err(|e| HarnessError::Invalid(e.to_string()))?;
        Ok(linear_quantized_tx(h, self.kind, &self.res, &batch, p_t)?)
    }
}

pub struct GnnTx {
    pub cfg: GnnConfig,
    pub weights: GnnWeights,
    pub q: ScalarQuantizer,
}

impl GnnTx {
    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self, HarnessError> {
        let q = crate::quantizer::lloyd_max(c.config.bits, Default::default())?;
        Ok(GnnTx { cfg: c.config, weights: c.weights.clone(), q })
    }
}

impl Transmitter for GnnTx {
    fn label(&self) -> String {
        "gnn".into()
    }
    fn bits(&self) -> Option<u32> {
        Some(self.cfg.bits)
    }
    fn transmit(&self, h: &ChannelMatrix, s: &CMatrix, p_t: f64) -> Result<CMatrix, HarnessError> {
        if (h.m(), h.k()) != (self.cfg.m, self.cfg.k) {
            return Err(HarnessError::Invalid(format!(
                "channel is {}x{}, checkpoint expects {}x{}",
                h.m(),
                h.k(),
                self.cfg.m,
                self.cfg.k
            )));
        }
        Ok(gnn_outputs(h.entries(), s, &self.weights, &self.cfg, &self.q, p_t)?)
    }
}

/// Per-channel outputs are independent of the noise level, so each channel
/// is transmitted once and scored at every SNR. `P_T = M`.
pub fn rate_sweep(tx: &dyn Transmitter, ds: &ChannelDataset, snr_db: &[f64], n_s: usize, threads: usize) -> Result<Vec<RateRow>, HarnessError> {
    if ds.is_empty() {
        return Err(HarnessError::Invalid("no test channels".into()));
    }
    let p_t = ds.m as f64;
    let per_channel: Vec<Result<Vec<f64>, HarnessError>> = par_map(ds.len(), threads, |i| {
        let h = ds.channel(i);
        let s = symbols_for_channel(ds.k, n_s, ds.seed, i as u64).as_columns();
        let y = tx.transmit(&h, &s, p_t)?;
        snr_db
            .iter()
            .map(|&snr| Ok(rate_from_snidr(&snidr_from_samples(&h, &s, &y, noise_variance(p_t, snr))?)))
            .collect()
    });
    let per_channel: Vec<Vec<f64>> = per_channel.into_iter().collect::<Result<_, _>>()?;
    Ok(snr_db
        .iter()
        .enumerate()
        .map(|(j, &snr)| {
            let xs: Vec<f64> = per_channel.iter().map(|r| r[j]).collect();
            let (mean, se) = mean_stderr(&xs);
            RateRow {
                precoder: tx.label(),
                bits: bits_label(tx.bits()),
                k: ds.k,
                snr_db: snr,
                rate_mean: mean,
                rate_std: se,
                n_channels: xs.len(),
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NmseRow {
    pub precoder: String,
    pub bits: String,
    pub nmse_db: f64,
    pub n_channels: usize,
}

pub fn nmse_table_csv(rows: &[NmseRow]) -> Table {
    Table {
        columns: vec!["precoder", "bits", "nmse_db", "n_channels"],
        rows: rows.iter().map(|r| vec![r.precoder.clone(), r.bits.clone(), fmt_f64(r.nmse_db), r.n_channels.to_string()]).collect(),
    }
}

/// Noiseless NMSE averaged over channels in the linear domain.
pub fn nmse_row(tx: &dyn Transmitter, ds: &ChannelDataset, n_s: usize, threads: usize) -> Result<NmseRow, HarnessError> {
    if ds.is_empty() {
        return Err(HarnessError::Invalid("no test channels".into()));
    }
    let p_t = ds.m as f64;
    let vals: Vec<Result<f64, HarnessError>> = par_map(ds.len(), threads, |i| {
        let h = ds.channel(i);
        let s = symbols_for_channel(ds.k, n_s, ds.seed, i as u64).as_columns();
        let y = tx.transmit(&h, &s, p_t)?;
        let r = h.entries().transpose() * y;
        Ok(10f64.powf(nmse_db(&s, &r)? / 10.0))
    });
    let vals: Vec<f64> = vals.into_iter().collect::<Result<_, _>>()?;
    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
    Ok(NmseRow {
        precoder: tx.label(),
        bits: bits_label(tx.bits()),
        nmse_db: (10.0 * mean.log10()).max(crate::metrics::NMSE_FLOOR_DB),
        n_channels: vals.len(),
    })
}

/// Radiation pattern of one LOS realization with users at `angles_deg`,
/// estimated from `n_s` symbols of sub-stream `seed`.
pub fn radiation_run(tx: &dyn Transmitter, m: usize, angles_deg: &[f64], n_s: usize, seed: u64, step_deg: f64) -> Result<Vec<RadiationPoint>, HarnessError> {
    let h = gen_los_ula(m, angles_deg).map_err(|e| HarnessError::Invalid(e.to_string()))?;
    let s = symbols_for_channel(angles_deg.len(), n_s, seed, 0).as_columns();
    let y = tx.transmit(&h, &s, m as f64)?;
    let est = estimate_bussgang(&s, &y)?;
    Ok(radiation_pattern(&est, &angle_grid(0.0, 180.0, step_deg)))
}

pub fn radiation_csv(points: &[RadiationPoint]) -> Table {
    Table {
        columns: vec!["angle_deg", "p_lin_db", "p_dist_db", "p_sdr_db"],
        rows: points
            .iter()
            .map(|p| vec![fmt_f64(p.angle_deg), fmt_f64(p.p_lin_db()), fmt_f64(p.p_dist_db()), fmt_f64(p.p_sdr_db())])
            .collect(),
    }
}

pub fn power_csv(rows: &[PowerRow]) -> Table {
    Table {
        columns: vec!["B_hz", "p_dacs_w", "p_gnn_w", "p_total_w", "req_flops_per_s"],
        rows: rows
            .iter()
            .map(|r| vec![fmt_f64(r.b_hz), fmt_f64(r.p_dacs_w), fmt_f64(r.p_gnn_w), fmt_f64(r.p_total_w), fmt_f64(r.req_flops_per_s)])
            .collect(),
    }
}

pub fn power_sweep(model: &PowerModel, mode: DacMode, m: usize, k: usize, bits: u32, gnn: Option<GnnShape>, bandwidths: &[f64]) -> Result<Vec<PowerRow>, HarnessError> {
    bandwidths.iter().map(|&b| Ok(power_row(model, mode, m, k, bits, gnn, b)?)).collect()
}


/// Seed offsets so that generated train, validation and test sets from
/// one `seed` never share channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataRole {
    Train = 0,
    Val = 1,
    Test = 2,
}

pub fn dataset_seed(seed: u64, role: DataRole) -> u64 {
    seed.wrapping_mul(3).wrapping_add(role as u64)
}

fn single_k(cfg: &ExperimentConfig) -> Result<usize, HarnessError> {
    let ks = cfg.list::<usize>("k")?;
    match ks.as_slice() {
        [k] => Ok(*k),
        _ => Err(HarnessError::Value { key: "k".into(), msg: "expected a single value".into() }),
    }
}

fn out_path(cfg: &ExperimentConfig) -> Result<PathBuf, HarnessError> {
    cfg.path("out").ok_or_else(|| HarnessError::MissingKeys(vec!["out".into()]))
}

fn generated(cfg: &ExperimentConfig, key: &str, n_key: &str, n_default: usize, role: DataRole, m: usize, k: usize) -> Result<ChannelDataset, HarnessError> {
    if let Some(p) = cfg.path(key) {
        let ds = ChannelDataset::load(&p)?;
        ds.expect_dims(m, k)?;
        return Ok(ds);
    }
    let model: ChannelModel = cfg.or("model", ChannelModel::Rayleigh)?;
    let n = cfg.or(n_key, n_default)?;
    Ok(ChannelDataset::generate(model, m, k, n, dataset_seed(cfg.req("seed")?, role))?)
}

/// Test channels: the `channels` file if given, else `n_test_channels`
/// generated from `seed`.
pub fn test_channels(cfg: &ExperimentConfig, m: usize, k: usize) -> Result<ChannelDataset, HarnessError> {
    generated(cfg, "channels", "n_test_channels", 10_000, DataRole::Test, m, k)
}

fn threads_of(cfg: &ExperimentConfig) -> Result<usize, HarnessError> {
    Ok(cfg.get::<usize>("threads")?.unwrap_or_else(default_threads).max(1))
}

fn load_gnn(path: &Path) -> Result<GnnTx, HarnessError> {
    GnnTx::from_checkpoint(&Checkpoint::load(path)?)
}

/// Run the scenario described by `cfg`, writing its outputs and manifest.
pub fn run(cfg: &ExperimentConfig) -> Result<Manifest, HarnessError> {
    let out = out_path(cfg)?;
    let threads = threads_of(cfg)?;
    match cfg.scenario {
        Scenario::GenChannels => {
            let model: ChannelModel = cfg.req("model")?;
            let ds = ChannelDataset::generate(model, cfg.req("m")?, single_k(cfg)?, cfg.req("count")?, cfg.req("seed")?)?;
            ensure_parent(&out)?;
            ds.save(&out)?;
            let bytes = std::fs::read(&out).map_err(io_err(&out))?;
            write_manifest(cfg, &out, sha256_hex(&bytes), ds.len(), &[])
        }
        Scenario::DesignQuantizer => {
            let bits = match cfg.bits_list()?.as_slice() {
                [Some(b)] => *b,
                _ => return Err(HarnessError::Value { key: "bits".into(), msg: "expected one finite resolution".into() }),
            };
            let q = crate::quantizer::lloyd_max(bits, Default::default())?;
            let text = q.to_json();
            ensure_parent(&out)?;
            std::fs::write(&out, &text).map_err(io_err(&out))?;
            write_manifest(cfg, &out, sha256_hex(text.as_bytes()), q.num_levels(), &[])
        }
        Scenario::EvalLinear => {
            let m: usize = cfg.req("m")?;
            let snr: Vec<f64> = cfg.list("snr_list_db")?;
            let n_s = cfg.or("n_symbols", N_EVAL)?;
            let kinds: Vec<PrecoderKind> = cfg.list("precoder")?;
            let mut rows = Vec::new();
            for k in cfg.list::<usize>("k")? {
                let ds = test_channels(cfg, m, k)?;
                for &kind in &kinds {
                    for b in cfg.bits_list()? {
                        let tx = LinearTx::new(kind, b)?;
                        log::info!("{} b={} K={k}", kind, bits_label(b));
                        rows.extend(rate_sweep(&tx, &ds, &snr, n_s, threads)?);
                    }
                }
            }
            write_outputs(cfg, &out, &rate_table(&rows), &[])
        }
        Scenario::EvalGnn => {
            let snr: Vec<f64> = cfg.list("snr_list_db")?;
            let n_s = cfg.or("n_symbols", N_EVAL)?;
            let mut rows = Vec::new();
            for p in cfg.list::<PathBuf>("checkpoint")? {
                let tx = load_gnn(&p)?;
                let ds = test_channels(cfg, tx.cfg.m, tx.cfg.k)?;
                rows.extend(rate_sweep(&tx, &ds, &snr, n_s, threads)?);
            }
            write_outputs(cfg, &out, &rate_table(&rows), &[])
        }
        Scenario::Nmse => {
            let m: usize = cfg.req("m")?;
            let k = single_k(cfg)?;
            let n_s = cfg.or("n_symbols", N_EVAL)?;
            let ds = test_channels(cfg, m, k)?;
            let mut rows = Vec::new();
            for name in cfg.list::<String>("precoder")? {
                if name == "gnn" {
                    for p in cfg.list::<PathBuf>("checkpoint")? {
                        rows.push(nmse_row(&load_gnn(&p)?, &ds, n_s, threads)?);
                    }
                    continue;
                }
                let kind: PrecoderKind = name.parse().map_err(|msg| HarnessError::Value { key: "precoder".into(), msg })?;
                for b in cfg.bits_list()? {
                    rows.push(nmse_row(&LinearTx::new(kind, b)?, &ds, n_s, threads)?);
                }
            }
            write_outputs(cfg, &out, &nmse_table_csv(&rows), &[])
        }
        Scenario::Radiation => {
            let m: usize = cfg.req("m")?;
            let angles: Vec<f64> = cfg.list("user_angles_deg")?;
            let n_s = cfg.or("n_symbols", N_RADIATION)?;
            let step = cfg.or("angle_step_deg", 0.5)?;
            let seed = cfg.req("seed")?;
            let name: String = cfg.req("precoder")?;
            let tx: Box<dyn Transmitter> = if name == "gnn" {
                Box::new(load_gnn(&cfg.path("checkpoint").ok_or_else(|| HarnessError::MissingKeys(vec!["checkpoint".into()]))?)?)
            } else {
                let kind = name.parse().map_err(|msg| HarnessError::Value { key: "precoder".into(), msg })?;
                match cfg.bits_list()?.as_slice() {
                    [b] => Box::new(LinearTx::new(kind, *b)?),
                    _ => return Err(HarnessError::Value { key: "bits".into(), msg: "expected a single value".into() }),
                }
            };
            let pts = radiation_run(tx.as_ref(), m, &angles, n_s, seed, step)?;
            write_outputs(cfg, &out, &radiation_csv(&pts), &[])
        }
        Scenario::Power => {
            let mode: DacMode = cfg.req("mode")?;
            let bits = match cfg.bits_list()?.as_slice() {
                [Some(b)] => *b,
                _ => return Err(HarnessError::Value { key: "bits".into(), msg: "expected one finite resolution".into() }),
            };
            let gnn = match (cfg.get::<usize>("d_h")?, cfg.get::<usize>("n_h")?) {
                (Some(d_h), Some(n_h)) => Some(GnnShape { d_h, n_h }),
                (None, None) => None,
                _ => return Err(HarnessError::Invalid("give both d_h and n_h, or neither for a linear precoder".into())),
            };
            let rows = power_sweep(&PowerModel::default(), mode, cfg.req("m")?, single_k(cfg)?, bits, gnn, &cfg.list::<f64>("bandwidth_list_hz")?)?;
            write_outputs(cfg, &out, &power_csv(&rows), &[])
        }
        Scenario::Train => run_train(cfg, &out),
    }
}

/// Training config from the `train` scenario keys.
pub fn train_config(cfg: &ExperimentConfig) -> Result<TrainConfig, HarnessError> {
    let d = TrainConfig::default();
    Ok(TrainConfig {
        lr: cfg.or("lr", d.lr)?,
        batch_channels: cfg.or("batch", d.batch_channels)?,
        n_s: cfg.or("n_s_train", d.n_s)?,
        tau: cfg.or("tau", d.tau)?,
        epochs: cfg.req("epochs")?,
        p_t: None,
        snr_train_db: cfg.or("snr_train_db", d.snr_train_db)?,
        seed: cfg.req("seed")?,
        adam: d.adam,
    })
}

/// Path of the resumable checkpoint that accompanies `out`.
pub fn latest_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".latest");
    PathBuf::from(s)
}

pub fn log_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".log.csv");
    PathBuf::from(s)
}

/// Train, writing the best checkpoint to `out`, a resumable one to
/// `<out>.latest` and the step log to `<out>.log.csv`. An existing
/// `<out>.latest` with the same training settings is resumed.
fn run_train(cfg: &ExperimentConfig, out: &Path) -> Result<Manifest, HarnessError> {
    let m: usize = cfg.req("m")?;
    let k = single_k(cfg)?;
    let bits = match cfg.bits_list()?.as_slice() {
        [Some(b)] => *b,
        _ => return Err(HarnessError::Value { key: "bits".into(), msg: "expected one finite resolution".into() }),
    };
    let gcfg = GnnConfig::new(m, k, bits, cfg.req("d_h")?, cfg.req("n_h")?)?;
    let tc = train_config(cfg)?;
    let train_ds = generated(cfg, "channels", "n_train_channels", 100_000, DataRole::Train, m, k)?;
    let val_ds = generated(cfg, "val", "n_val_channels", 1000, DataRole::Val, m, k)?;
    let q = crate::quantizer::lloyd_max(bits, Default::default())?;
    let latest = latest_path(out);
    let logp = log_path(out);
    ensure_parent(out)?;
    let resumed = match Checkpoint::load(&latest) {
        Ok(c) => {
            let st = TrainState::from_checkpoint(&c)?;
            if c.config != gcfg || st.meta.train != tc || st.meta.train_seed != train_ds.seed || st.meta.n_train != train_ds.len() {
                return Err(HarnessError::Invalid(format!("{} was written by a different training setup", latest.display())));
            }
            log::info!("resuming from {} at epoch {}", latest.display(), st.meta.epoch);
            Some(st)
        }
        Err(CheckpointError::Io(e)) if e.kind() == std::io::ErrorKind::NotFound => None,
        Err(e) => return Err(e.into()),
    };
    let fresh = resumed.is_none();
    let mut state = resumed.unwrap_or_else(|| TrainState::fresh(&gcfg, &tc, &train_ds));
    if !fresh {
        // The best weights so far live in `out`.
        if let Ok(b) = Checkpoint::load(out) {
            state.best_weights = b.weights;
        }
    }
    let file = std::fs::OpenOptions::new().create(true).write(true).append(!fresh).truncate(fresh).open(&logp).map_err(io_err(&logp))?;
    let mut w = std::io::BufWriter::new(file);
    if fresh {
        use std::io::Write;
        write!(w, "{}", Provenance::new(cfg)?.header()).map_err(io_err(&logp))?;
    }
    let plan = CheckpointPlan { best: Some(out.to_path_buf()), latest: Some(latest.clone()), every_steps: 100 };
    let outcome = train(state, &gcfg, &q, &train_ds, &val_ds, &plan, w, fresh)?;
    log::info!("best validation rate {:?} at epoch {:?}", outcome.meta.best_val_rate, outcome.meta.best_epoch);
    let bytes = std::fs::read(out).map_err(io_err(out))?;
    write_manifest(cfg, out, sha256_hex(&bytes), outcome.meta.val_history.len(), &[latest, logp])
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = "scenario = eval-linear\nprecoder = mrt\nbits = 1, inf\nm = 8\nk = 1\nsnr_list_db = 0,20\nseed = 3\nout = x.csv\n";

    #[test]
    fn strict_parsing() {
        let c = ExperimentConfig::parse(BASE).unwrap();
        assert_eq!(c.scenario, Scenario::EvalLinear);
        assert_eq!(c.bits_list().unwrap(), vec![Some(1), None]);
        assert_eq!(c.list::<f64>("snr_list_db").unwrap(), vec![0.0, 20.0]);
        let e = ExperimentConfig::parse(&format!("{BASE}colour = red\n")).unwrap_err();
        assert!(matches!(&e, HarnessError::UnknownKey(k) if k == "colour"), "{e}");
        let e = ExperimentConfig::parse("scenario = eval-linear\nm = 8\n").unwrap_err();
        match e {
            HarnessError::MissingKeys(v) => assert_eq!(v, ["precoder", "bits", "k", "snr_list_db", "seed", "out"]),
            e => panic!("{e}"),
        }
        assert!(matches!(parse_kv("a = 1\na = 2"), Err(HarnessError::Syntax { line: 2, .. })));
        assert!(matches!(parse_kv("novalue"), Err(HarnessError::Syntax { line: 1, .. })));
        assert!(ExperimentConfig::parse("scenario = fly\n").is_err());
    }

    #[test]
    fn hash_ignores_order_and_comments() {
        let a = ExperimentConfig::parse(BASE).unwrap();
        let mut lines: Vec<&str> = BASE.lines().collect();
        lines.reverse();
        let b = ExperimentConfig::parse(&format!("# c\n{}\n", lines.join("\n"))).unwrap();
        assert_eq!(a.hash(), b.hash());
        let mut c = a.clone();
        c.set("seed", "4").unwrap();
        assert_ne!(a.hash(), c.hash());
        assert!(c.set("nope", "1").is_err());
    }

    #[test]
    fn par_map_keeps_order() {
        let v = par_map(103, 4, |i| i * i);
        assert_eq!(v, (0..103).map(|i| i * i).collect::<Vec<_>>());
        assert!(par_map(0, 3, |i| i).is_empty());
    }

    #[test]
    fn single_channel_has_zero_stderr() {
        assert_eq!(mean_stderr(&[2.5]), (2.5, 0.0));
        let (m, s) = mean_stderr(&[1.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 1.0).abs() < 1e-15);
    }

    #[test]
    fn rate_sweep_is_deterministic_across_thread_counts() {
        let ds = ChannelDataset::generate(ChannelModel::Rayleigh, 8, 2, 6, 1).unwrap();
        let tx = LinearTx::new(PrecoderKind::Zf, Some(2)).unwrap();
        let a = rate_sweep(&tx, &ds, &[0.0, 10.0], 200, 1).unwrap();
        let b = rate_sweep(&tx, &ds, &[0.0, 10.0], 200, 3).unwrap();
        assert_eq!(a, b);
        assert!(a[1].rate_mean > a[0].rate_mean);
        let one = ChannelDataset::generate(ChannelModel::Rayleigh, 8, 2, 1, 1).unwrap();
        assert_eq!(rate_sweep(&tx, &one, &[5.0], 200, 1).unwrap()[0].rate_std, 0.0);
    }

    #[test]
    fn unquantized_mrt_radiation_has_no_distortion() {
        let tx = LinearTx::new(PrecoderKind::Mrt, None).unwrap();
        let pts = radiation_run(&tx, 16, &[60.0], 2000, 1, 0.5).unwrap();
        assert_eq!(pts.len(), 361);
        assert!(pts.iter().all(|p| p.p_dist_db() < -100.0));
        let best = pts.iter().max_by(|a, b| a.p_lin.total_cmp(&b.p_lin)).unwrap();
        assert!((best.angle_deg - 60.0).abs() <= 0.5);
    }

    #[test]
    fn float_format_round_trips() {
        for x in [0.1, -2.5e-300, 1.0 / 3.0, 12345.0] {
            assert_eq!(fmt_f64(x).parse::<f64>().unwrap(), x);
        }
        assert_eq!(fmt_f64(f64::INFINITY), "inf");
    }
}
