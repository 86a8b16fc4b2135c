//! Linear precoders and the quantized linear transmit chain.

use std::fmt;
use std::str::FromStr;

use num_complex::Complex64;
use thiserror::Error;

use crate::channel::{CMatrix, ChannelMatrix, SymbolBatch};
use crate::linalg::{frobenius_sq, hpd_condition_number, solve_hpd};
use crate::quantizer::{quantize_complex_vec, QuantizerError, Resolution};

/// Gram matrices with a larger 2-norm condition number are rejected by [`zf`].
pub const ZF_CONDITION_CAP: f64 = 1e10;

#[derive(Debug, Error)]
pub enum PrecoderError {
    #[error("channel is all zero, power normalization undefined")]
    ZeroChannel,
    #[error("zero forcing needs K <= M, got M={m}, K={k}")]
    ZfInfeasible { m: usize, k: usize },
    #[error("Gram matrix condition number {cond:.3e} exceeds the cap {cap:.0e}")]
    IllConditioned { cond: f64, cap: f64 },
    #[error("transmit power must be positive, got {0}")]
    NonPositivePower(f64),
    #[error("symbol batch has {got} users, channel has {want}")]
    UserMismatch { got: usize, want: usize },
    #[error(transparent)]
    Quantizer(#[from] QuantizerError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PrecoderKind {
    Mrt,
    Zf,
}

impl PrecoderKind {
    pub fn name(self) -> &'static str {
        match self {
            PrecoderKind::Mrt => "mrt",
            PrecoderKind::Zf => "zf",
        }
    }
}

impl fmt::Display for PrecoderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PrecoderKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "mrt" => Ok(PrecoderKind::Mrt),
            "zf" => Ok(PrecoderKind::Zf),
            other => Err(format!("unknown precoder '{other}' (expected mrt or zf)")),
        }
    }
}

/// `W` (M×K) scaled so that `Tr(W Wᴴ) = P_T`.
#[derive(Debug, Clone, PartialEq)]
pub struct PrecodingMatrix {
    w: CMatrix,
    p_t: f64,
    alpha: f64,
}

impl PrecodingMatrix {
    pub fn w(&self) -> &CMatrix {
        &self.w
    }

    pub fn p_t(&self) -> f64 {
        self.p_t
    }

    /// The normalization constant applied to the unnormalized precoder.
    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// Per real dimension variance of `x_m = w_mᵀ s` for unit-variance
    /// symbols, `‖w_m‖² / 2`. This is the DAC input scale.
    pub fn dac_scales(&self) -> Vec<f64> {
        self.w
            .row_iter()
            .map(|r| r.iter().map(|z| z.norm_sqr()).sum::<f64>() / 2.0)
            .collect()
    }

    /// `X = W S` with symbols as columns (M×N_s).
    pub fn apply(&self, s: &SymbolBatch) -> Result<CMatrix, PrecoderError> {
        if s.k() != self.w.ncols() {
            return Err(PrecoderError::UserMismatch {
                got: s.k(),
                want: self.w.ncols(),
            });
        }
        Ok(&self.w * s.as_columns())
    }
}

fn normalize(raw: CMatrix, p_t: f64) -> Result<PrecodingMatrix, PrecoderError> {
    let power = frobenius_sq(&raw);
    if !(power > 0.0) {
        return Err(PrecoderError::ZeroChannel);
    }
    let alpha = (p_t / power).sqrt();
    Ok(PrecodingMatrix {
        w: raw * Complex64::new(alpha, 0.0),
        p_t,
        alpha,
    })
}

fn check_power(p_t: f64) -> Result<(), PrecoderError> {
    if p_t > 0.0 && p_t.is_finite() {
        Ok(())
    } else {
        Err(PrecoderError::NonPositivePower(p_t))
    }
}

/// `W = α H*`.
pub fn mrt(h: &ChannelMatrix, p_t: f64) -> Result<PrecodingMatrix, PrecoderError> {
    check_power(p_t)?;
    normalize(h.entries().conjugate(), p_t)
}

/// `W = α H* (Hᵀ H*)⁻¹`, computed with a Cholesky solve of the Gram matrix.
pub fn zf(h: &ChannelMatrix, p_t: f64) -> Result<PrecodingMatrix, PrecoderError> {
    check_power(p_t)?;
    let (m, k) = (h.m(), h.k());
    if k > m {
        return Err(PrecoderError::ZfInfeasible { m, k });
    }
    let ht = h.entries().transpose();
    let gram = &ht * h.entries().conjugate();
    let cond = hpd_condition_number(&gram);
    if !(cond <= ZF_CONDITION_CAP) {
        return Err(PrecoderError::IllConditioned {
            cond,
            cap: ZF_CONDITION_CAP,
        });
    }
    // Gram is Hermitian, so (Gram⁻¹ Hᵀ)ᴴ = H* Gram⁻¹.
    let z = solve_hpd(&gram, &ht).ok_or(PrecoderError::IllConditioned {
        cond,
        cap: ZF_CONDITION_CAP,
    })?;
    normalize(z.adjoint(), p_t)
}

pub fn precode(
    kind: PrecoderKind,
    h: &ChannelMatrix,
    p_t: f64,
) -> Result<PrecodingMatrix, PrecoderError> {
    match kind {
        PrecoderKind::Mrt => mrt(h, p_t),
        PrecoderKind::Zf => zf(h, p_t),
    }
}

/// Quantize every column of `x` with the per-antenna scales `rho`.
pub fn quantize_columns(
    x: &CMatrix,
    res: &Resolution,
    rho: &[f64],
) -> Result<CMatrix, PrecoderError> {
    let q = match res {
        Resolution::Infinite => return Ok(x.clone()),
        Resolution::Finite(q) => q,
    };
    let mut y = CMatrix::zeros(x.nrows(), x.ncols());
    for (j, col) in x.column_iter().enumerate() {
        let v: Vec<Complex64> = col.iter().copied().collect();
        let out = quantize_complex_vec(&v, q, rho)?;
        y.column_mut(j)
            .iter_mut()
            .zip(out)
            .for_each(|(d, o)| *d = o);
    }
    Ok(y)
}

/// Precode, then pass each antenna stream through its DAC pair.
/// Returns the DAC outputs `Y` (M×N_s).
pub fn linear_quantized_tx(
    h: &ChannelMatrix,
    kind: PrecoderKind,
    res: &Resolution,
    s: &SymbolBatch,
    p_t: f64,
) -> Result<CMatrix, PrecoderError> {
    let w = precode(kind, h, p_t)?;
    let x = w.apply(s)?;
    quantize_columns(&x, res, &w.dac_scales())
}
