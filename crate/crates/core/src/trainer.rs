//! Self-supervised training of the GNN precoder: straight-through
//! Gumbel-softmax level selection, batch power normalization, the negative
//! sum rate as loss, hand-written reverse pass and Adam.

use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use num_complex::Complex64;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::channel::{symbols_for_channel, CMatrix};
use crate::dataset::ChannelDataset;
use crate::gnn::checkpoint::{Checkpoint, CheckpointError, OptimizerState};
use crate::gnn::{self, argmax, softmax_into, GnnConfig, GnnError, GnnWeights, RMatrix};
use crate::linalg::solve_hpd;
use crate::metrics::{nmse_db, noise_variance, rate_from_snidr, snidr_from_samples, MetricsError};
use crate::quantizer::ScalarQuantizer;
use crate::rng::{substream, Stream};

/// Uniform draws are clamped to `(GUMBEL_EPS, 1 − GUMBEL_EPS)`.
pub const GUMBEL_EPS: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("DAC outputs carry zero power, normalization undefined")]
    ZeroPower,
    #[error("non-finite loss: {0}")]
    NonFinite(String),
    #[error("training set is empty")]
    EmptyDataset,
    #[error(transparent)]
    Gnn(#[from] GnnError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_channels: usize,
    pub n_s: usize,
    pub tau: f64,
    pub epochs: usize,
    /// Total transmit power; `None` means `P_T = M`.
    pub p_t: Option<f64>,
    pub snr_train_db: f64,
    pub seed: u64,
    pub adam: AdamParams,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 5e-3,
            batch_channels: 128,
            n_s: 125,
            tau: 1.0,
            epochs: 20,
            p_t: None,
            snr_train_db: 20.0,
            seed: 0,
            adam: AdamParams::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, k: usize) -> Result<(), TrainError> {
        if !(self.tau > 0.0) {
            return Err(TrainError::Config(format!("temperature must be positive, got {}", self.tau)));
        }
        if self.n_s < k + 1 {
            return Err(TrainError::Config(format!("need N_s >= K+1 = {}, got {}", k + 1, self.n_s)));
        }
        if self.batch_channels == 0 {
            return Err(TrainError::Config("batch size must be positive".into()));
        }
        if !(self.lr > 0.0) {
            return Err(TrainError::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if let Some(p) = self.p_t {
            if !(p > 0.0) {
                return Err(TrainError::Config(format!("transmit power must be positive, got {p}")));
            }
        }
        Ok(())
    }

    pub fn power(&self, m: usize) -> f64 {
        self.p_t.unwrap_or(m as f64)
    }
}

pub fn gumbel_from_uniform(u: f64) -> f64 {
    let u = u.clamp(GUMBEL_EPS, 1.0 - GUMBEL_EPS);
    -(-u.ln()).ln()
}

/// Standard Gumbel noise, one value per (symbol, antenna, real part, level).
#[derive(Debug, Clone, PartialEq)]
pub struct GumbelDraw {
    pub t: usize,
    pub m: usize,
    pub levels: usize,
    pub noise: Vec<f64>,
}

impl GumbelDraw {
    pub fn sample<R: Rng + ?Sized>(rng: &mut R, t: usize, m: usize, levels: usize) -> Self {
        let noise = (0..t * m * 2 * levels).map(|_| gumbel_from_uniform(rng.random::<f64>())).collect();
        GumbelDraw { t, m, levels, noise }
    }

    pub fn zeros(t: usize, m: usize, levels: usize) -> Self {
        GumbelDraw { t, m, levels, noise: vec![0.0; t * m * 2 * levels] }
    }

    /// Noise for symbol `t`, antenna `m`, part 0 (real) or 1 (imaginary).
    pub fn slice(&self, t: usize, m: usize, part: usize) -> &[f64] {
        let o = ((t * self.m + m) * 2 + part) * self.levels;
        &self.noise[o..o + self.levels]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StSelection {
    pub index: usize,
    pub hard: Vec<f64>,
    pub soft: Vec<f64>,
}

/// Hard one-hot sample at `argmax(a + g)` and its tempered softmax relaxation.
pub fn st_gumbel_softmax(logits: &[f64], g: &[f64], tau: f64) -> StSelection {
    let z: Vec<f64> = logits.iter().zip(g).map(|(a, b)| (a + b) / tau).collect();
    let mut soft = vec![0.0; z.len()];
    softmax_into(&z, &mut soft);
    let index = argmax(&z);
    let mut hard = vec![0.0; z.len()];
    hard[index] = 1.0;
    StSelection { index, hard, soft }
}

/// Gradient of a loss with respect to the logits, given its gradient `u`
/// with respect to the soft selection.
pub fn softmax_backward(soft: &[f64], u: &[f64], tau: f64) -> Vec<f64> {
    let dot: f64 = soft.iter().zip(u).map(|(s, x)| s * x).sum();
    soft.iter().zip(u).map(|(s, x)| s * (x - dot) / tau).collect()
}

/// Which selection feeds the forward value.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelectMode {
    /// Hard samples forward, soft gradients backward.
    StraightThrough,
    /// Soft selections in both passes; a smooth surrogate for gradient checks.
    Soft,
}

/// Result of [`forward_train`].
#[derive(Debug, Clone)]
pub struct TrainForward {
    /// Normalized DAC outputs `α·y` (M×T).
    pub y: CMatrix,
    /// Outputs before normalization.
    pub y_raw: CMatrix,
    pub alpha: f64,
    /// `(1/T) Σ_t ‖y_t‖²` before normalization.
    pub mean_power: f64,
    soft: Vec<f64>,
    tape: gnn::Tape,
}

/// Parameters of one training pass on a channel.
#[derive(Debug, Clone, Copy)]
pub struct PassParams<'a> {
    pub cfg: &'a GnnConfig,
    pub q: &'a ScalarQuantizer,
    pub tau: f64,
    pub p_t: f64,
    pub sigma2: f64,
    pub mode: SelectMode,
}

/// GNN forward on every symbol vector in `s` (K×T), per-antenna Gumbel
/// level selection and power normalization over the batch.
pub fn forward_train(h: &CMatrix, s: &CMatrix, w: &GnnWeights, p: &PassParams, g: &GumbelDraw) -> Result<TrainForward, TrainError> {
    let (m, t, l) = (h.nrows(), s.ncols(), p.cfg.levels());
    if p.q.num_levels() != l {
        return Err(TrainError::Config(format!("quantizer has {} levels, network {l}", p.q.num_levels())));
    }
    if (g.t, g.m, g.levels) != (t, m, l) {
        return Err(TrainError::Config("Gumbel draw shape does not match the batch".into()));
    }
    let (logits, tape) = gnn::forward_taped(p.cfg, w, h, s)?;
    let lv = p.q.levels();
    let mut y_raw = CMatrix::zeros(m, t);
    let mut soft = vec![0.0; t * m * 2 * l];
    for tt in 0..t {
        for mm in 0..m {
            let col = logits.column(tt * m + mm);
            let a: Vec<f64> = col.iter().copied().collect();
            let mut parts = [0.0; 2];
            for (part, val) in parts.iter_mut().enumerate() {
                let sel = st_gumbel_softmax(&a[part * l..(part + 1) * l], g.slice(tt, mm, part), p.tau);
                *val = match p.mode {
                    SelectMode::StraightThrough => lv[sel.index],
                    SelectMode::Soft => sel.soft.iter().zip(lv).map(|(a, b)| a * b).sum(),
                };
                let o = ((tt * m + mm) * 2 + part) * l;
                soft[o..o + l].copy_from_slice(&sel.soft);
            }
            y_raw[(mm, tt)] = Complex64::new(parts[0], parts[1]);
        }
    }
    let mean_power = y_raw.iter().map(|z| z.norm_sqr()).sum::<f64>() / t as f64;
    if !(mean_power > 0.0) {
        return Err(TrainError::ZeroPower);
    }
    let alpha = (p.p_t / mean_power).sqrt();
    let y = &y_raw * Complex64::new(alpha, 0.0);
    Ok(TrainForward { y, y_raw, alpha, mean_power, soft, tape })
}

/// Sum rate of the sample-based Bussgang estimate and its gradient with
/// respect to the DAC outputs. Gradients use the convention
/// `dJ = ℜ Σ conj(G) dY`. Returns `(R_sum, ∂R_sum/∂Y)`.
pub fn sum_rate_with_grad(h: &CMatrix, s: &CMatrix, y: &CMatrix, sigma2: f64) -> Result<(f64, CMatrix), MetricsError> {
    let (k, t) = (s.nrows(), s.ncols());
    if y.ncols() != t || h.ncols() != k || h.nrows() != y.nrows() {
        return Err(MetricsError::Mismatch("channel, symbols and outputs disagree".into()));
    }
    if t < k + 1 {
        return Err(MetricsError::TooFewSamples { need: k + 1, got: t });
    }
    if !(sigma2 > 0.0) {
        return Err(MetricsError::NonPositiveNoise(sigma2));
    }
    let z = h.transpose() * y;
    let ss = s * s.adjoint();
    // Pᴴ = (S Sᴴ)⁻¹ S, so A = Z P = Z (Pᴴ)ᴴ.
    let p_h = solve_hpd(&ss, s).ok_or(MetricsError::SingularSymbols)?;
    let a = &z * p_h.adjoint();
    let e = &z - &a * s;
    let tf = t as f64;
    let mut rate = 0.0;
    let mut g_a = CMatrix::zeros(k, k);
    let mut g_e = CMatrix::zeros(k, t);
    let ln2 = std::f64::consts::LN_2;
    for u in 0..k {
        let num = a[(u, u)].norm_sqr();
        let interf: f64 = (0..k).filter(|&j| j != u).map(|j| a[(u, j)].norm_sqr()).sum();
        let dist: f64 = e.row(u).iter().map(|v| v.norm_sqr()).sum::<f64>() / tf;
        let den = interf + dist + sigma2;
        rate += ((num + den) / den).log2();
        let d_num = 1.0 / (ln2 * (num + den));
        let d_den = 1.0 / (ln2 * (num + den)) - 1.0 / (ln2 * den);
        for j in 0..k {
            let c = if j == u { d_num } else { d_den };
            g_a[(u, j)] = a[(u, j)] * (2.0 * c);
        }
        for tt in 0..t {
            g_e[(u, tt)] = e[(u, tt)] * (2.0 * d_den / tf);
        }
    }
    // E = Z − A S and A = Z P.
    let g_a_tot = g_a - &g_e * s.adjoint();
    let g_z = &g_e + g_a_tot * &p_h;
    Ok((rate, h.conjugate() * g_z))
}

/// Loss `−R_sum` of one forward pass and its gradient for every weight.
pub fn loss_and_grad(h: &CMatrix, s: &CMatrix, w: &GnnWeights, p: &PassParams, g: &GumbelDraw) -> Result<(f64, GnnWeights), TrainError> {
    let fwd = forward_train(h, s, w, p, g)?;
    let (rate, g_rate) = sum_rate_with_grad(h, s, &fwd.y, p.sigma2)?;
    let loss = -rate;
    if !loss.is_finite() {
        return Err(TrainError::NonFinite(format!("rate {rate}, mean output power {}", fwd.mean_power)));
    }
    let g_yt = g_rate * Complex64::new(-1.0, 0.0);
    let (t, m, l) = (s.ncols(), h.nrows(), p.cfg.levels());
    // Through the normalization α = √(P_T / P).
    let sdot: f64 = g_yt.iter().zip(fwd.y_raw.iter()).map(|(a, b)| (a.conj() * b).re).sum();
    let coef = sdot * fwd.alpha / (t as f64 * fwd.mean_power);
    let g_y = g_yt * Complex64::new(fwd.alpha, 0.0) - &fwd.y_raw * Complex64::new(coef, 0.0);
    let lv = p.q.levels();
    let mut d_logits = RMatrix::zeros(2 * l, t * m);
    let mut u = vec![0.0; l];
    for tt in 0..t {
        for mm in 0..m {
            for part in 0..2 {
                let gv = if part == 0 { g_y[(mm, tt)].re } else { g_y[(mm, tt)].im };
                for (ui, li) in u.iter_mut().zip(lv) {
                    *ui = gv * li;
                }
                let o = ((tt * m + mm) * 2 + part) * l;
                let da = softmax_backward(&fwd.soft[o..o + l], &u, p.tau);
                for (i, v) in da.into_iter().enumerate() {
                    d_logits[(part * l + i, tt * m + mm)] = v;
                }
            }
        }
    }
    let grads = gnn::backward(p.cfg, w, &fwd.tape, &d_logits);
    Ok((loss, grads))
}

fn round_f32(w: &mut GnnWeights) {
    for (_, _, m) in w.entries_mut() {
        m.apply(|x| *x = *x as f32 as f64);
    }
}

/// One bias-corrected Adam update. Weights and moments are kept at f32
/// precision so a checkpoint captures the optimizer exactly.
pub fn adam_step(w: &mut GnnWeights, grads: &GnnWeights, state: &mut OptimizerState, lr: f64, ap: &AdamParams) {
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - ap.beta1.powi(t);
    let bc2 = 1.0 - ap.beta2.powi(t);
    let ws = w.entries_mut();
    let gs = grads.entries();
    let ms = state.m.entries_mut();
    let vs = state.v.entries_mut();
    for (((wm, gm), mm), vm) in ws.into_iter().zip(gs).zip(ms).zip(vs) {
        let (wm, gm, mm, vm) = (wm.2, gm.2, mm.2, vm.2);
        for i in 0..wm.len() {
            let g = gm[i];
            let m1 = ap.beta1 * mm[i] + (1.0 - ap.beta1) * g;
            let v1 = ap.beta2 * vm[i] + (1.0 - ap.beta2) * g * g;
            let step = lr * (m1 / bc1) / ((v1 / bc2).sqrt() + ap.eps);
            mm[i] = m1 as f32 as f64;
            vm[i] = v1 as f32 as f64;
            wm[i] = (wm[i] - step) as f32 as f64;
        }
    }
    round_f32(w);
}

/// Mean rate and NMSE of argmax inference over `channels`, one symbol
/// batch per channel from `symbols`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GnnScore {
    pub rate_mean: f64,
    pub rate_std: f64,
    pub nmse_db: f64,
}

/// Argmax inference on one channel, normalized to `P_T` over the batch.
pub fn gnn_outputs(h: &CMatrix, s: &CMatrix, w: &GnnWeights, cfg: &GnnConfig, q: &ScalarQuantizer, p_t: f64) -> Result<CMatrix, TrainError> {
    let y = gnn::infer_batch(h, s, w, cfg, q)?;
    let power = y.iter().map(|z| z.norm_sqr()).sum::<f64>() / s.ncols() as f64;
    if !(power > 0.0) {
        return Err(TrainError::ZeroPower);
    }
    Ok(y * Complex64::new((p_t / power).sqrt(), 0.0))
}

/// Rates are per channel at noise variance `sigma2`; NMSE is noiseless
/// and averaged in the linear domain over channels.
pub fn evaluate_gnn(
    ds: &ChannelDataset,
    n_s: usize,
    w: &GnnWeights,
    cfg: &GnnConfig,
    q: &ScalarQuantizer,
    p_t: f64,
    sigma2: f64,
) -> Result<GnnScore, TrainError> {
    if ds.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut rates = Vec::with_capacity(ds.len());
    let mut nmse_lin = 0.0;
    for i in 0..ds.len() {
        let h = ds.channel(i);
        let s = symbols_for_channel(ds.k, n_s, ds.seed, i as u64).as_columns();
        let y = gnn_outputs(h.entries(), &s, w, cfg, q, p_t)?;
        rates.push(rate_from_snidr(&snidr_from_samples(&h, &s, &y, sigma2)?));
        let r = h.entries().transpose() * &y;
        nmse_lin += 10f64.powf(nmse_db(&s, &r)? / 10.0);
    }
    let n = rates.len() as f64;
    let mean = rates.iter().sum::<f64>() / n;
    let var = rates.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    Ok(GnnScore { rate_mean: mean, rate_std: var.sqrt(), nmse_db: 10.0 * (nmse_lin / n).log10() })
}

/// Where and how often [`train`] writes checkpoints.
#[derive(Debug, Clone, Default)]
pub struct CheckpointPlan {
    /// Best-validation weights.
    pub best: Option<PathBuf>,
    /// Latest weights plus optimizer state, for resuming.
    pub latest: Option<PathBuf>,
    /// Also write `latest` every this many steps (0: only at epoch ends).
    pub every_steps: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainMeta {
    pub train: TrainConfig,
    pub epoch: usize,
    /// Batches already applied within `epoch`.
    pub batch_in_epoch: usize,
    pub best_val_rate: Option<f64>,
    pub best_epoch: Option<usize>,
    pub val_history: Vec<f64>,
    pub train_seed: u64,
    pub n_train: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub weights: GnnWeights,
    pub best_weights: GnnWeights,
    pub meta: TrainMeta,
    pub initial_val_rate: f64,
}

/// Training state that can be resumed.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub weights: GnnWeights,
    pub best_weights: GnnWeights,
    pub opt: OptimizerState,
    pub meta: TrainMeta,
}

impl TrainState {
    pub fn fresh(cfg: &GnnConfig, tc: &TrainConfig, train: &ChannelDataset) -> Self {
        let weights = GnnWeights::init(cfg, tc.seed);
        TrainState {
            best_weights: weights.clone(),
            weights,
            opt: OptimizerState::new(cfg),
            meta: TrainMeta {
                train: tc.clone(),
                epoch: 0,
                batch_in_epoch: 0,
                best_val_rate: None,
                best_epoch: None,
                val_history: vec![],
                train_seed: train.seed,
                n_train: train.len(),
            },
        }
    }

    pub fn checkpoint(&self, cfg: &GnnConfig) -> Checkpoint {
        Checkpoint {
            config: *cfg,
            seed: self.meta.train.seed,
            weights: self.weights.clone(),
            metadata: serde_json::to_value(&self.meta).expect("metadata serializes"),
            optimizer: Some(self.opt.clone()),
        }
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self, TrainError> {
        let meta: TrainMeta = serde_json::from_value(c.metadata.clone())
            .map_err(|e| TrainError::Config(format!("checkpoint has no resumable training metadata: {e}")))?;
        let opt = c.optimizer.clone().ok_or_else(|| TrainError::Config("checkpoint has no optimizer state".into()))?;
        Ok(TrainState { weights: c.weights.clone(), best_weights: c.weights.clone(), opt, meta })
    }
}

fn batches_per_epoch(n: usize, bs: usize) -> usize {
    n.div_ceil(bs)
}

fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut substream(seed, Stream::Shuffle, epoch as u64));
    idx
}

/// Apply one optimizer step on batch `b` of `epoch`. Returns the mean loss.
pub fn train_step(
    state: &mut TrainState,
    cfg: &GnnConfig,
    q: &ScalarQuantizer,
    train: &ChannelDataset,
    order: &[usize],
    batch: usize,
) -> Result<f64, TrainError> {
    let tc = state.meta.train.clone();
    let (m, k) = (train.m, train.k);
    let p_t = tc.power(m);
    let pass = PassParams {
        cfg,
        q,
        tau: tc.tau,
        p_t,
        sigma2: noise_variance(p_t, tc.snr_train_db),
        mode: SelectMode::StraightThrough,
    };
    let lo = batch * tc.batch_channels;
    let hi = (lo + tc.batch_channels).min(order.len());
    let per_epoch = batches_per_epoch(train.len(), tc.batch_channels) as u64;
    let global = state.meta.epoch as u64 * per_epoch + batch as u64;
    let mut rng = substream(tc.seed, Stream::Gumbel, global);
    let mut grads = GnnWeights::zeros(cfg);
    let mut loss = 0.0;
    let scale = 1.0 / (hi - lo) as f64;
    for &i in &order[lo..hi] {
        let h = train.channel(i);
        let s = symbols_for_channel(k, tc.n_s, train.seed, i as u64).as_columns();
        let g = GumbelDraw::sample(&mut rng, tc.n_s, m, cfg.levels());
        let (j, gr) = loss_and_grad(h.entries(), &s, &state.weights, &pass, &g)?;
        loss += j * scale;
        grads.axpy(scale, &gr);
    }
    adam_step(&mut state.weights, &grads, &mut state.opt, tc.lr, &tc.adam);
    Ok(loss)
}

/// Run (or continue) training until `meta.train.epochs` epochs are done.
///
/// Writes one CSV row per step to `log` (`epoch,step,loss,val_rate,wall_ms`;
/// `val_rate` is filled on the last step of each epoch), validates once per
/// epoch and keeps the best-validation weights.
pub fn train<W: Write>(
    mut state: TrainState,
    cfg: &GnnConfig,
    q: &ScalarQuantizer,
    train: &ChannelDataset,
    val: &ChannelDataset,
    plan: &CheckpointPlan,
    mut log: W,
    write_header: bool,
) -> Result<TrainOutcome, TrainError> {
    let tc = state.meta.train.clone();
    tc.validate(train.k)?;
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    if (train.m, train.k) != (cfg.m, cfg.k) || (val.m, val.k) != (cfg.m, cfg.k) {
        return Err(TrainError::Config(format!(
            "datasets are {}x{} / {}x{}, network configured for {}x{}",
            train.m, train.k, val.m, val.k, cfg.m, cfg.k
        )));
    }
    let p_t = tc.power(cfg.m);
    let sigma2 = noise_variance(p_t, tc.snr_train_db);
    let validate = |w: &GnnWeights| evaluate_gnn(val, tc.n_s, w, cfg, q, p_t, sigma2).map(|s| s.rate_mean);
    let initial_val_rate = validate(&state.weights)?;
    if write_header {
        writeln!(log, "epoch,step,loss,val_rate,wall_ms")?;
    }
    let start = Instant::now();
    let per_epoch = batches_per_epoch(train.len(), tc.batch_channels);
    while state.meta.epoch < tc.epochs {
        let epoch = state.meta.epoch;
        let order = epoch_order(tc.seed, epoch, train.len());
        while state.meta.batch_in_epoch < per_epoch {
            let b = state.meta.batch_in_epoch;
            let loss = train_step(&mut state, cfg, q, train, &order, b)?;
            state.meta.batch_in_epoch += 1;
            let step = state.opt.step;
            let last = state.meta.batch_in_epoch == per_epoch;
            let val_field = if last {
                let v = validate(&state.weights)?;
                state.meta.val_history.push(v);
                if state.meta.best_val_rate.is_none_or(|b| v > b) {
                    state.meta.best_val_rate = Some(v);
                    state.meta.best_epoch = Some(epoch);
                    state.best_weights = state.weights.clone();
                    if let Some(p) = &plan.best {
                        let mut c = state.checkpoint(cfg);
                        c.optimizer = None;
                        c.save(p)?;
                    }
                }
                log::info!("epoch {epoch}: validation rate {v:.4}");
                format!("{v:.10}")
            } else {
                String::new()
            };
            writeln!(log, "{epoch},{step},{loss:.10},{val_field},{}", start.elapsed().as_millis())?;
            if last {
                state.meta.epoch += 1;
                state.meta.batch_in_epoch = 0;
            }
            let periodic = plan.every_steps > 0 && step.is_multiple_of(plan.every_steps);
            if let Some(p) = &plan.latest {
                if last || periodic {
                    state.checkpoint(cfg).save(p)?;
                }
            }
            if last {
                break;
            }
        }
    }
    log.flush()?;
    Ok(TrainOutcome {
        weights: state.weights,
        best_weights: state.best_weights,
        meta: state.meta,
        initial_val_rate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{gen_rayleigh, gen_symbols, ChannelModel};
    use crate::metrics::snidr_from_samples;
    use crate::quantizer::{lloyd_max, LloydOptions};

    fn q1() -> ScalarQuantizer {
        lloyd_max(1, LloydOptions::default()).unwrap()
    }

    #[test]
    fn gumbel_fixed_point_and_mean() {
        assert!(gumbel_from_uniform((-1.0f64).exp()).abs() < 1e-15);
        let mut r = substream(1, Stream::Gumbel, 0);
        let g = GumbelDraw::sample(&mut r, 1000, 10, 100);
        let mean = g.noise.iter().sum::<f64>() / g.noise.len() as f64;
        assert!((mean - 0.5772156649).abs() < 0.01, "{mean}");
        assert!(g.noise.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn st_selection_limits() {
        let a = [0.3, -1.0, 2.0];
        let g = [0.1, 0.5, -0.2];
        let s = st_gumbel_softmax(&a, &g, 1e-6);
        assert_eq!(s.index, 2);
        assert!((s.soft[2] - 1.0).abs() < 1e-12);
        let flat = st_gumbel_softmax(&[0.0; 3], &[0.2, 0.9, -0.4], 1.0);
        assert_eq!(flat.index, 1);
        assert_eq!(flat.hard, vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn softmax_backward_matches_finite_differences() {
        let a = [0.4, -0.3, 1.1, 0.05];
        let g = [0.2, -0.7, 0.1, 0.9];
        let l = [-1.5, -0.5, 0.5, 1.5];
        let tau = 0.7;
        let f = |a: &[f64]| -> f64 {
            let s = st_gumbel_softmax(a, &g, tau).soft;
            s.iter().zip(&l).map(|(x, y)| x * y).sum()
        };
        let s = st_gumbel_softmax(&a, &g, tau).soft;
        let an = softmax_backward(&s, &l, tau);
        for i in 0..4 {
            let h = 1e-5;
            let mut p = a;
            p[i] += h;
            let mut m = a;
            m[i] -= h;
            let fd = (f(&p) - f(&m)) / (2.0 * h);
            assert!((fd - an[i]).abs() <= 1e-4 * fd.abs().max(1e-8), "{i}: {fd} vs {}", an[i]);
        }
    }

    #[test]
    fn rate_with_grad_matches_metrics_and_fd() {
        let h = gen_rayleigh(4, 2, 1).unwrap();
        let s = gen_symbols(2, 12, 2).unwrap().as_columns();
        let y = CMatrix::from_fn(4, 12, |i, j| Complex64::new((i as f64 * 0.7 + j as f64).sin(), (i as f64 - 0.3 * j as f64).cos()));
        let (r, g) = sum_rate_with_grad(h.entries(), &s, &y, 0.3).unwrap();
        let want = rate_from_snidr(&snidr_from_samples(&h, &s, &y, 0.3).unwrap());
        assert!((r - want).abs() < 1e-12);
        let eps = 1e-6;
        for (i, j) in [(0, 0), (3, 5), (2, 11)] {
            for dir in [Complex64::new(1.0, 0.0), Complex64::new(0.0, 1.0)] {
                let mut yp = y.clone();
                yp[(i, j)] += dir * eps;
                let mut ym = y.clone();
                ym[(i, j)] -= dir * eps;
                let fd = (sum_rate_with_grad(h.entries(), &s, &yp, 0.3).unwrap().0 - sum_rate_with_grad(h.entries(), &s, &ym, 0.3).unwrap().0) / (2.0 * eps);
                let an = (g[(i, j)].conj() * dir).re;
                assert!((fd - an).abs() < 1e-6 * (1.0 + fd.abs()), "{fd} vs {an}");
            }
        }
    }

    #[test]
    fn forward_train_normalizes_and_uses_level_alphabet() {
        let cfg = GnnConfig::new(4, 1, 1, 6, 1).unwrap();
        let w = GnnWeights::init(&cfg, 3);
        let q = q1();
        let h = gen_rayleigh(4, 1, 4).unwrap();
        let s = gen_symbols(1, 30, 5).unwrap().as_columns();
        let mut r = substream(0, Stream::Gumbel, 0);
        let g = GumbelDraw::sample(&mut r, 30, 4, 2);
        let p = PassParams { cfg: &cfg, q: &q, tau: 1.0, p_t: 4.0, sigma2: 0.04, mode: SelectMode::StraightThrough };
        let f = forward_train(h.entries(), &s, &w, &p, &g).unwrap();
        let pw = f.y.iter().map(|z| z.norm_sqr()).sum::<f64>() / 30.0;
        assert!((pw - 4.0).abs() < 1e-9);
        let l = q.levels()[1];
        for z in f.y_raw.iter() {
            assert!((z.re.abs() - l).abs() < 1e-15 && (z.im.abs() - l).abs() < 1e-15);
        }
        // Hard values equal argmax(logits + g) mapped through the levels.
        let logits = gnn::logits_batch(&cfg, &w, h.entries(), &s).unwrap();
        for t in 0..30 {
            for m in 0..4 {
                let c = logits.column(t * 4 + m);
                let re = argmax(&[c[0] + g.slice(t, m, 0)[0], c[1] + g.slice(t, m, 0)[1]]);
                assert_eq!(f.y_raw[(m, t)].re, q.levels()[re]);
            }
        }
    }

    #[test]
    fn zero_weights_sample_levels_uniformly() {
        let cfg = GnnConfig::new(2, 1, 2, 4, 1).unwrap();
        let w = GnnWeights::zeros(&cfg);
        let q = lloyd_max(2, LloydOptions::default()).unwrap();
        let h = gen_rayleigh(2, 1, 1).unwrap();
        let s = gen_symbols(1, 25_000, 2).unwrap().as_columns();
        let mut r = substream(3, Stream::Gumbel, 0);
        let g = GumbelDraw::sample(&mut r, 25_000, 2, 4);
        let p = PassParams { cfg: &cfg, q: &q, tau: 1.0, p_t: 2.0, sigma2: 0.02, mode: SelectMode::StraightThrough };
        let f = forward_train(h.entries(), &s, &w, &p, &g).unwrap();
        let mut counts = [0usize; 4];
        for z in f.y_raw.iter() {
            for v in [z.re, z.im] {
                counts[q.levels().iter().position(|&l| l == v).unwrap()] += 1;
            }
        }
        let n = 100_000.0;
        for c in counts {
            assert!((c as f64 / n - 0.25).abs() < 0.02 * 0.25, "{counts:?}");
        }
    }

    #[test]
    fn adam_examples() {
        let cfg = GnnConfig::new(2, 1, 1, 3, 1).unwrap();
        let w0 = GnnWeights::init(&cfg, 1);
        let mut w = w0.clone();
        let mut st = OptimizerState::new(&cfg);
        adam_step(&mut w, &GnnWeights::zeros(&cfg), &mut st, 0.01, &AdamParams::default());
        assert_eq!(w, w0);
        let mut w = w0.clone();
        let mut g = GnnWeights::zeros(&cfg);
        for (_, _, m) in g.entries_mut() {
            m.fill(-3.0);
        }
        let mut st = OptimizerState::new(&cfg);
        adam_step(&mut w, &g, &mut st, 0.01, &AdamParams::default());
        for ((_, _, a), (_, _, b)) in w.entries().into_iter().zip(w0.entries()) {
            for (x, y) in a.iter().zip(b.iter()) {
                let d = x - y;
                assert!(d > 0.0 && d <= 0.01 * (1.0 + 1e-5), "{d}");
            }
        }
    }

    #[test]
    fn output_layer_gradient_is_nonzero_from_zero_output_layer() {
        let cfg = GnnConfig::new(3, 1, 1, 4, 1).unwrap();
        let mut w = GnnWeights::init(&cfg, 2);
        let last = w.layers.len() - 1;
        for (n, _, m) in w.entries_mut() {
            if n == last {
                m.fill(0.0);
            }
        }
        let q = q1();
        let h = gen_rayleigh(3, 1, 3).unwrap();
        let s = gen_symbols(1, 16, 4).unwrap().as_columns();
        let mut r = substream(0, Stream::Gumbel, 1);
        let g = GumbelDraw::sample(&mut r, 16, 3, 2);
        let p = PassParams { cfg: &cfg, q: &q, tau: 1.0, p_t: 3.0, sigma2: 0.03, mode: SelectMode::StraightThrough };
        let (j, gr) = loss_and_grad(h.entries(), &s, &w, &p, &g).unwrap();
        assert!(j.is_finite() && j <= 0.0);
        assert!(gr.layers[last].self_bs.iter().chain(gr.layers[last].neigh_bs.iter()).any(|&x| x != 0.0));
    }

    #[test]
    fn tiny_training_is_deterministic_and_resumable() {
        let cfg = GnnConfig::new(3, 1, 1, 4, 1).unwrap();
        let tc = TrainConfig { batch_channels: 4, n_s: 10, epochs: 2, seed: 5, ..TrainConfig::default() };
        let train_ds = ChannelDataset::generate(ChannelModel::Rayleigh, 3, 1, 10, 11).unwrap();
        let val_ds = ChannelDataset::generate(ChannelModel::Rayleigh, 3, 1, 4, 12).unwrap();
        let q = q1();
        let run = |st: TrainState| {
            let mut log = Vec::new();
            let out = train(st, &cfg, &q, &train_ds, &val_ds, &CheckpointPlan::default(), &mut log, true).unwrap();
            (out, String::from_utf8(log).unwrap())
        };
        let (a, log_a) = run(TrainState::fresh(&cfg, &tc, &train_ds));
        let (b, _) = run(TrainState::fresh(&cfg, &tc, &train_ds));
        assert_eq!(a.weights, b.weights);
        assert_eq!(a.meta.val_history, b.meta.val_history);
        assert_eq!(log_a.lines().count(), 1 + 2 * 3);

        // Interrupt after the first epoch, round-trip through a checkpoint, continue.
        let full_first = {
            let mut s = TrainState::fresh(&cfg, &tc, &train_ds);
            let order = epoch_order(tc.seed, 0, 10);
            for bidx in 0..3 {
                train_step(&mut s, &cfg, &q, &train_ds, &order, bidx).unwrap();
                s.meta.batch_in_epoch += 1;
            }
            s.meta.epoch = 1;
            s.meta.batch_in_epoch = 0;
            s
        };
        let bytes = full_first.checkpoint(&cfg).to_bytes().unwrap();
        let restored = TrainState::from_checkpoint(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(restored.weights, full_first.weights);
        let mut x = full_first.clone();
        let mut y = restored.clone();
        let order = epoch_order(tc.seed, 1, 10);
        train_step(&mut x, &cfg, &q, &train_ds, &order, 0).unwrap();
        train_step(&mut y, &cfg, &q, &train_ds, &order, 0).unwrap();
        assert_eq!(x.weights, y.weights);
        assert_eq!(x.opt, y.opt);
        let (resumed, _) = run(restored);
        assert_eq!(resumed.weights, a.weights);
    }

    #[test]
    fn gradient_matches_finite_differences_per_family() {
        let cfg = GnnConfig::new(2, 1, 1, 4, 1).unwrap();
        let w = GnnWeights::init(&cfg, 9);
        let q = q1();
        let h = gen_rayleigh(2, 1, 10).unwrap();
        let s = gen_symbols(1, 8, 11).unwrap().as_columns();
        let mut r = substream(2, Stream::Gumbel, 0);
        let g = GumbelDraw::sample(&mut r, 8, 2, 2);
        let p = PassParams { cfg: &cfg, q: &q, tau: 1.0, p_t: 2.0, sigma2: 0.02, mode: SelectMode::Soft };
        let (_, grads) = loss_and_grad(h.entries(), &s, &w, &p, &g).unwrap();
        let loss = |w: &GnnWeights| loss_and_grad(h.entries(), &s, w, &p, &g).unwrap().0;
        let mut checked = 0;
        for (n, f, gm) in grads.entries() {
            // Largest-gradient entry of each matrix, to stay clear of round-off.
            let (idx, &an) = gm.iter().enumerate().max_by(|a, b| a.1.abs().total_cmp(&b.1.abs())).unwrap();
            if an.abs() < 1e-7 {
                continue;
            }
            let eps = 1e-6;
            let shift = |d: f64| {
                let mut v = w.clone();
                v.layers[n].get_mut(f).unwrap()[idx] += d;
                loss(&v)
            };
            let fd = (shift(eps) - shift(-eps)) / (2.0 * eps);
            let rel = (fd - an).abs() / fd.abs().max(an.abs());
            assert!(rel < 1e-3, "layer {n} {}: fd {fd} vs {an}", f.name());
            checked += 1;
        }
        assert!(checked >= 10, "{checked}");
    }
}
