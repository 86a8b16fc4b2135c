use std::collections::BTreeMap;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use qprecode::harness::{self, ExperimentConfig, Scenario};

/// Quantized massive-MIMO precoding simulator.
///
/// Every subcommand accepts `--config FILE` (plain `key = value` lines);
/// flags given on the command line override values from the file.
#[derive(Parser)]
#[command(name = "qprecode", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
    /// Worker threads for sweeps (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a channel dataset file.
    GenChannels(GenChannels),
    /// Design a Lloyd-Max quantizer and write it as JSON.
    DesignQuantizer(DesignQuantizer),
    /// Rate sweep of quantized MRT/ZF.
    EvalLinear(EvalLinear),
    /// Train the GNN precoder.
    Train(Train),
    /// Rate sweep of trained GNN checkpoints.
    EvalGnn(EvalGnn),
    /// Radiation pattern of one LOS realization.
    Radiation(Radiation),
    /// Noiseless NMSE table.
    Nmse(Nmse),
    /// DAC and GNN power versus bandwidth.
    Power(Power),
}

#[derive(Args)]
struct Common {
    /// Key-value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GenChannels {
    #[command(flatten)]
    c: Common,
    /// rayleigh or los
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    count: Option<usize>,
}

#[derive(Args)]
struct DesignQuantizer {
    #[command(flatten)]
    c: Common,
    #[arg(long)]
    bits: Option<String>,
}

#[derive(Args)]
struct EvalLinear {
    #[command(flatten)]
    c: Common,
    /// mrt, zf or a comma list
    #[arg(long)]
    precoder: Option<String>,
    /// Comma list of resolutions, `inf` for none.
    #[arg(long)]
    bits: Option<String>,
    #[arg(long)]
    m: Option<usize>,
    /// User count, or a comma list.
    #[arg(long)]
    k: Option<String>,
    #[arg(long)]
    snr_list: Option<String>,
    /// Test channel file; generated from the seed if absent.
    #[arg(long)]
    channels: Option<PathBuf>,
    #[arg(long)]
    n_test_channels: Option<usize>,
    #[arg(long)]
    n_symbols: Option<usize>,
}

#[derive(Args)]
struct Train {
    #[command(flatten)]
    c: Common,
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    bits: Option<u32>,
    #[arg(long)]
    dh: Option<usize>,
    #[arg(long)]
    nh: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Training channel file; generated from the seed if absent.
    #[arg(long)]
    channels: Option<PathBuf>,
    /// Validation channel file; generated from the seed if absent.
    #[arg(long)]
    val: Option<PathBuf>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    n_s: Option<usize>,
    #[arg(long)]
    n_train_channels: Option<usize>,
    #[arg(long)]
    n_val_channels: Option<usize>,
}

#[derive(Args)]
struct EvalGnn {
    #[command(flatten)]
    c: Common,
    /// Checkpoint file, or a comma list.
    #[arg(long)]
    checkpoint: Option<String>,
    #[arg(long)]
    snr_list: Option<String>,
    #[arg(long)]
    channels: Option<PathBuf>,
    #[arg(long)]
    n_test_channels: Option<usize>,
    #[arg(long)]
    n_symbols: Option<usize>,
}

#[derive(Args)]
struct Radiation {
    #[command(flatten)]
    c: Common,
    /// mrt, zf or gnn
    #[arg(long)]
    precoder: Option<String>,
    #[arg(long)]
    bits: Option<String>,
    #[arg(long)]
    m: Option<usize>,
    /// Comma list of user angles in degrees.
    #[arg(long)]
    angles: Option<String>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    step: Option<f64>,
    #[arg(long)]
    n_symbols: Option<usize>,
}

#[derive(Args)]
struct Nmse {
    #[command(flatten)]
    c: Common,
    /// Comma list of mrt, zf, gnn.
    #[arg(long)]
    precoder: Option<String>,
    #[arg(long)]
    bits: Option<String>,
    /// Checkpoints for the gnn rows, comma separated.
    #[arg(long)]
    checkpoint: Option<String>,
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    channels: Option<PathBuf>,
    #[arg(long)]
    n_test_channels: Option<usize>,
    #[arg(long)]
    n_symbols: Option<usize>,
}

#[derive(Args)]
struct Power {
    #[command(flatten)]
    c: Common,
    /// baseband or rfdac
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    bits: Option<u32>,
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    /// GNN width; omit together with --nh for a linear precoder.
    #[arg(long)]
    dh: Option<usize>,
    #[arg(long)]
    nh: Option<usize>,
    /// Comma list of bandwidths in Hz.
    #[arg(long)]
    bandwidth_list: Option<String>,
}

type Overrides = Vec<(&'static str, Option<String>)>;

fn s<T: ToString>(v: &Option<T>) -> Option<String> {
    v.as_ref().map(|x| x.to_string())
}

fn p(v: &Option<PathBuf>) -> Option<String> {
    v.as_ref().map(|x| x.display().to_string())
}

fn common(c: &Common) -> Overrides {
    vec![("seed", s(&c.seed)), ("out", p(&c.out))]
}

impl Cmd {
    fn parts(&self) -> (Scenario, &Common, Overrides) {
        match self {
            Cmd::GenChannels(a) => (
                Scenario::GenChannels,
                &a.c,
                vec![("model", s(&a.model)), ("m", s(&a.m)), ("k", s(&a.k)), ("count", s(&a.count))],
            ),
            Cmd::DesignQuantizer(a) => (Scenario::DesignQuantizer, &a.c, vec![("bits", s(&a.bits))]),
            Cmd::EvalLinear(a) => (
                Scenario::EvalLinear,
                &a.c,
                vec![
                    ("precoder", s(&a.precoder)),
                    ("bits", s(&a.bits)),
                    ("m", s(&a.m)),
                    ("k", s(&a.k)),
                    ("snr_list_db", s(&a.snr_list)),
                    ("channels", p(&a.channels)),
                    ("n_test_channels", s(&a.n_test_channels)),
                    ("n_symbols", s(&a.n_symbols)),
                ],
            ),
            Cmd::Train(a) => (
                Scenario::Train,
                &a.c,
                vec![
                    ("m", s(&a.m)),
                    ("k", s(&a.k)),
                    ("bits", s(&a.bits)),
                    ("d_h", s(&a.dh)),
                    ("n_h", s(&a.nh)),
                    ("epochs", s(&a.epochs)),
                    ("channels", p(&a.channels)),
                    ("val", p(&a.val)),
                    ("batch", s(&a.batch)),
                    ("lr", s(&a.lr)),
                    ("tau", s(&a.tau)),
                    ("n_s_train", s(&a.n_s)),
                    ("n_train_channels", s(&a.n_train_channels)),
                    ("n_val_channels", s(&a.n_val_channels)),
                ],
            ),
            Cmd::EvalGnn(a) => (
                Scenario::EvalGnn,
                &a.c,
                vec![
                    ("checkpoint", s(&a.checkpoint)),
                    ("snr_list_db", s(&a.snr_list)),
                    ("channels", p(&a.channels)),
                    ("n_test_channels", s(&a.n_test_channels)),
                    ("n_symbols", s(&a.n_symbols)),
                ],
            ),
            Cmd::Radiation(a) => (
                Scenario::Radiation,
                &a.c,
                vec![
                    ("precoder", s(&a.precoder)),
                    ("bits", s(&a.bits)),
                    ("m", s(&a.m)),
                    ("user_angles_deg", s(&a.angles)),
                    ("checkpoint", p(&a.checkpoint)),
                    ("angle_step_deg", s(&a.step)),
                    ("n_symbols", s(&a.n_symbols)),
                ],
            ),
            Cmd::Nmse(a) => (
                Scenario::Nmse,
                &a.c,
                vec![
                    ("precoder", s(&a.precoder)),
                    ("bits", s(&a.bits)),
                    ("checkpoint", s(&a.checkpoint)),
                    ("m", s(&a.m)),
                    ("k", s(&a.k)),
                    ("channels", p(&a.channels)),
                    ("n_test_channels", s(&a.n_test_channels)),
                    ("n_symbols", s(&a.n_symbols)),
                ],
            ),
            Cmd::Power(a) => (
                Scenario::Power,
                &a.c,
                vec![
                    ("mode", s(&a.mode)),
                    ("bits", s(&a.bits)),
                    ("m", s(&a.m)),
                    ("k", s(&a.k)),
                    ("d_h", s(&a.dh)),
                    ("n_h", s(&a.nh)),
                    ("bandwidth_list_hz", s(&a.bandwidth_list)),
                ],
            ),
        }
    }
}

fn build_config(cli: &Cli) -> Result<ExperimentConfig> {
    let (scenario, c, mut over) = cli.cmd.parts();
    over.extend(common(c));
    over.push(("threads", s(&cli.threads)));
    let mut map = match &c.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            harness::parse_kv(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        None => BTreeMap::new(),
    };
    match map.get("scenario") {
        Some(v) if v != scenario.name() => bail!("config is for `{v}`, not `{}`", scenario.name()),
        _ => {
            map.insert("scenario".into(), scenario.name().into());
        }
    }
    for (k, v) in over {
        if let Some(v) = v {
            map.insert(k.into(), v);
        }
    }
    Ok(ExperimentConfig::from_map(map)?)
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let cfg = build_config(&cli)?;
    let manifest = harness::run(&cfg)?;
    for o in &manifest.outputs {
        println!("wrote {o}");
    }
    println!("manifest {}", harness::manifest_path(std::path::Path::new(&manifest.outputs[0])).display());
    Ok(())
}
