//! Empirical Bussgang decomposition with respect to the symbols, SNIDR,
//! achievable sum rate, NMSE and radiation patterns.
//!
//! Matrices follow one layout throughout: DAC outputs `Y` are M×N, symbols
//! `S` are K×N (one column per channel use), received samples are K×N.

use num_complex::Complex64;
use thiserror::Error;

use crate::channel::{steering_vector, CMatrix, ChannelMatrix};
use crate::linalg::{hermitian_part, solve_hpd};

/// Reported NMSE when the equalized symbols are exact.
pub const NMSE_FLOOR_DB: f64 = -300.0;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("batch sizes differ: {0}")]
    Mismatch(String),
    #[error("need at least K+1 = {need} samples, got {got}")]
    TooFewSamples { need: usize, got: usize },
    #[error("symbol covariance is singular")]
    SingularSymbols,
    #[error("noise variance must be positive, got {0}")]
    NonPositiveNoise(f64),
    #[error("antenna {0} carries no power")]
    ZeroPowerAntenna(usize),
    #[error("user {0} has a vanishing end-to-end gain")]
    DegenerateLink(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct BussgangEstimate {
    /// M×K linear gain.
    pub g: CMatrix,
    /// M×M distortion covariance, Hermitian by construction.
    pub c_q: CMatrix,
    pub n_samples: usize,
}

fn check_batch(s: &CMatrix, cols: usize) -> Result<(), MetricsError> {
    if s.ncols() != cols {
        return Err(MetricsError::Mismatch(format!(
            "{} symbols vs {} outputs",
            s.ncols(),
            cols
        )));
    }
    let need = s.nrows() + 1;
    if cols < need {
        return Err(MetricsError::TooFewSamples { need, got: cols });
    }
    Ok(())
}

/// Least-squares gain `Z Sᴴ (S Sᴴ)⁻¹` of the rows of `z` onto the symbols.
fn ls_gain(z: &CMatrix, s: &CMatrix) -> Result<CMatrix, MetricsError> {
    let ss = s * s.adjoint();
    let zs = z * s.adjoint();
    // (S Sᴴ)⁻¹ is Hermitian: solve for its product with (Z Sᴴ)ᴴ and take the adjoint.
    let t = solve_hpd(&ss, &zs.adjoint()).ok_or(MetricsError::SingularSymbols)?;
    Ok(t.adjoint())
}

/// `Ĝ = Y Sᴴ (S Sᴴ)⁻¹`, `q̂ = Y − Ĝ S`, `Ĉ_q = q̂ q̂ᴴ / N`.
pub fn estimate_bussgang(s: &CMatrix, y: &CMatrix) -> Result<BussgangEstimate, MetricsError> {
    check_batch(s, y.ncols())?;
    let g = ls_gain(y, s)?;
    let q = y - &g * s;
    let n = y.ncols();
    let c_q = hermitian_part(&(&q * q.adjoint())) / Complex64::new(n as f64, 0.0);
    Ok(BussgangEstimate {
        g,
        c_q,
        n_samples: n,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AntennaBussgang {
    pub alpha: Vec<f64>,
    /// `1 − α_m`.
    pub beta: Vec<f64>,
    /// Directly measured `E|x_m − y_m|² / E|x_m|²`.
    pub nmsqe: Vec<f64>,
}

/// Per-antenna gains `α_m = ℜ E[y_m x_m*] / E|x_m|²` from DAC inputs and outputs (M×N).
pub fn per_antenna_bussgang(x: &CMatrix, y: &CMatrix) -> Result<AntennaBussgang, MetricsError> {
    if x.shape() != y.shape() {
        return Err(MetricsError::Mismatch(format!(
            "{:?} inputs vs {:?} outputs",
            x.shape(),
            y.shape()
        )));
    }
    let mut out = AntennaBussgang {
        alpha: vec![],
        beta: vec![],
        nmsqe: vec![],
    };
    for m in 0..x.nrows() {
        let (xr, yr) = (x.row(m), y.row(m));
        let px: f64 = xr.iter().map(|z| z.norm_sqr()).sum();
        if !(px > 0.0) {
            return Err(MetricsError::ZeroPowerAntenna(m));
        }
        let cross: f64 = yr
            .iter()
            .zip(xr.iter())
            .map(|(a, b)| (a * b.conj()).re)
            .sum();
        let err: f64 = yr
            .iter()
            .zip(xr.iter())
            .map(|(a, b)| (a - b).norm_sqr())
            .sum();
        let alpha = cross / px;
        out.alpha.push(alpha);
        out.beta.push(1.0 - alpha);
        out.nmsqe.push(err / px);
    }
    Ok(out)
}

fn check_noise(sigma2: f64) -> Result<(), MetricsError> {
    if sigma2 > 0.0 {
        Ok(())
    } else {
        Err(MetricsError::NonPositiveNoise(sigma2))
    }
}

/// SNIDR from the effective K×K gain `A = Hᵀ Ĝ` and per-user received
/// distortion powers `d_k = h_kᵀ Ĉ_q h_k*`.
fn snidr_from_parts(a: &CMatrix, d: &[f64], sigma2: f64) -> Vec<f64> {
    (0..a.nrows())
        .map(|k| {
            let sig = a[(k, k)].norm_sqr();
            let interf: f64 = (0..a.ncols())
                .filter(|&j| j != k)
                .map(|j| a[(k, j)].norm_sqr())
                .sum();
            sig / (interf + d[k] + sigma2)
        })
        .collect()
}

pub fn snidr(
    h: &ChannelMatrix,
    est: &BussgangEstimate,
    sigma2: f64,
) -> Result<Vec<f64>, MetricsError> {
    check_noise(sigma2)?;
    if est.g.nrows() != h.m() || est.g.ncols() != h.k() {
        return Err(MetricsError::Mismatch(format!(
            "estimate {:?} vs channel {}x{}",
            est.g.shape(),
            h.m(),
            h.k()
        )));
    }
    let ht = h.entries().transpose();
    let a = &ht * &est.g;
    let d: Vec<f64> = (0..h.k())
        .map(|k| {
            let hk = ht.row(k);
            (hk * &est.c_q * hk.adjoint())[(0, 0)].re
        })
        .collect();
    Ok(snidr_from_parts(&a, &d, sigma2))
}

/// Same value as [`snidr`] on [`estimate_bussgang`], without forming the
/// M×M covariance.
pub fn snidr_from_samples(
    h: &ChannelMatrix,
    s: &CMatrix,
    y: &CMatrix,
    sigma2: f64,
) -> Result<Vec<f64>, MetricsError> {
    check_noise(sigma2)?;
    check_batch(s, y.ncols())?;
    if y.nrows() != h.m() || s.nrows() != h.k() {
        return Err(MetricsError::Mismatch(format!(
            "outputs {:?}, symbols {:?}, channel {}x{}",
            y.shape(),
            s.shape(),
            h.m(),
            h.k()
        )));
    }
    let z = h.entries().transpose() * y;
    let a = ls_gain(&z, s)?;
    let e = &z - &a * s;
    let n = y.ncols() as f64;
    let d: Vec<f64> = e
        .row_iter()
        .map(|r| r.iter().map(|v| v.norm_sqr()).sum::<f64>() / n)
        .collect();
    Ok(snidr_from_parts(&a, &d, sigma2))
}

pub fn rate_from_snidr(snidr: &[f64]) -> f64 {
    snidr.iter().map(|&g| (1.0 + g).log2()).sum()
}

pub fn sum_rate(
    h: &ChannelMatrix,
    est: &BussgangEstimate,
    sigma2: f64,
) -> Result<f64, MetricsError> {
    Ok(rate_from_snidr(&snidr(h, est, sigma2)?))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub snidr_per_user: Vec<f64>,
    pub r_sum: f64,
    pub nmse_db: Option<f64>,
    pub snr_db: f64,
}

impl EvalReport {
    pub fn new(snidr_per_user: Vec<f64>, snr_db: f64) -> Self {
        let r_sum = rate_from_snidr(&snidr_per_user);
        EvalReport {
            snidr_per_user,
            r_sum,
            nmse_db: None,
            snr_db,
        }
    }
}

/// Noise variance for a transmit power and an SNR `P_T/σ²` in dB.
pub fn noise_variance(p_t: f64, snr_db: f64) -> f64 {
    p_t / 10f64.powf(snr_db / 10.0)
}

pub fn to_db(x: f64) -> f64 {
    10.0 * x.log10()
}

/// NMSE in dB between the symbols `s` and the noiseless received samples
/// `r = Hᵀ Y` (both K×N), after a per-user scalar equalizer
/// `ĝ_k = Σ r_k s_k* / Σ |s_k|²`. Averaged over users in the linear domain.
pub fn nmse_db(s: &CMatrix, r: &CMatrix) -> Result<f64, MetricsError> {
    if s.shape() != r.shape() {
        return Err(MetricsError::Mismatch(format!(
            "{:?} symbols vs {:?} received",
            s.shape(),
            r.shape()
        )));
    }
    let k = s.nrows();
    let mut total = 0.0;
    for u in 0..k {
        let (sr, rr) = (s.row(u), r.row(u));
        let ps: f64 = sr.iter().map(|z| z.norm_sqr()).sum();
        let pr: f64 = rr.iter().map(|z| z.norm_sqr()).sum();
        let cross: Complex64 = rr.iter().zip(sr.iter()).map(|(a, b)| a * b.conj()).sum();
        let g = cross / ps;
        if !(g.norm_sqr() > 1e-24 * pr.max(f64::MIN_POSITIVE) / ps) {
            return Err(MetricsError::DegenerateLink(u));
        }
        let err: f64 = rr
            .iter()
            .zip(sr.iter())
            .map(|(a, b)| (b - a / g).norm_sqr())
            .sum();
        total += err / ps;
    }
    let v = total / k as f64;
    if v > 0.0 {
        Ok(to_db(v).max(NMSE_FLOOR_DB))
    } else {
        Ok(NMSE_FLOOR_DB)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RadiationPoint {
    pub angle_deg: f64,
    pub p_lin: f64,
    pub p_dist: f64,
    /// `p_lin / p_dist`, `+∞` when the distortion vanishes.
    pub p_sdr: f64,
}

impl RadiationPoint {
    pub fn p_lin_db(&self) -> f64 {
        to_db(self.p_lin)
    }
    pub fn p_dist_db(&self) -> f64 {
        to_db(self.p_dist)
    }
    pub fn p_sdr_db(&self) -> f64 {
        to_db(self.p_sdr)
    }
}

/// Beam patterns of the linear part `Ĝ Ĝᴴ` and of the distortion `Ĉ_q`
/// seen by a probe user at each angle.
pub fn radiation_pattern(est: &BussgangEstimate, angles_deg: &[f64]) -> Vec<RadiationPoint> {
    let m = est.g.nrows();
    let ggh = &est.g * est.g.adjoint();
    angles_deg
        .iter()
        .map(|&phi| {
            let a = steering_vector(m, phi);
            let at = a.transpose();
            let ac = a.conjugate();
            let p_lin = (&at * &ggh * &ac)[(0, 0)].re.max(0.0);
            let p_dist = (&at * &est.c_q * &ac)[(0, 0)].re.max(0.0);
            let p_sdr = if p_dist > 0.0 {
                p_lin / p_dist
            } else {
                f64::INFINITY
            };
            RadiationPoint {
                angle_deg: phi,
                p_lin,
                p_dist,
                p_sdr,
            }
        })
        .collect()
}

/// `[start, start + step, ..., end]` inclusive of `end` within rounding.
pub fn angle_grid(start: f64, end: f64, step: f64) -> Vec<f64> {
    let n = ((end - start) / step + 1e-9).floor() as usize;
    (0..=n).map(|i| start + i as f64 * step).collect()
}
