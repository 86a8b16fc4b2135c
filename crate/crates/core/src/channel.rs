//! Channel matrices and symbol batches.
//!
//! `H` is stored as an `M x K` complex matrix: row `m` is a transmit antenna,
//! column `k` a single-antenna user. Symbol batches are `N_s x K`, one row
//! per channel use.

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::Rng;
use std::f64::consts::PI;
use thiserror::Error;

use crate::rng::{self, Stream};

pub type CMatrix = DMatrix<Complex64>;

#[derive(Debug, Error, PartialEq)]
pub enum ChannelError {
    #[error("channel dimensions must be positive, got M={m}, K={k}")]
    EmptyDimension { m: usize, k: usize },
    #[error("user angle {0} deg is outside [0, 180]")]
    AngleOutOfRange(f64),
    #[error("symbol batch needs at least one symbol")]
    EmptyBatch,
}

/// Channel generator tag persisted with datasets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChannelModel {
    Rayleigh,
    LosUla,
}

impl ChannelModel {
    pub fn tag(self) -> u8 {
        match self {
            ChannelModel::Rayleigh => 0,
            ChannelModel::LosUla => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(ChannelModel::Rayleigh),
            1 => Some(ChannelModel::LosUla),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ChannelModel::Rayleigh => "rayleigh",
            ChannelModel::LosUla => "los",
        }
    }
}

impl std::fmt::Display for ChannelModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for ChannelModel {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "rayleigh" => Ok(ChannelModel::Rayleigh),
            "los" => Ok(ChannelModel::LosUla),
            other => Err(format!("unknown channel model '{other}' (expected rayleigh or los)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelMatrix {
    entries: CMatrix,
    model: ChannelModel,
}

impl ChannelMatrix {
    pub fn new(entries: CMatrix, model: ChannelModel) -> Result<Self, ChannelError> {
        if entries.nrows() == 0 || entries.ncols() == 0 {
            return Err(ChannelError::EmptyDimension {
                m: entries.nrows(),
                k: entries.ncols(),
            });
        }
        Ok(Self { entries, model })
    }

    pub fn entries(&self) -> &CMatrix {
        &self.entries
    }

    pub fn into_entries(self) -> CMatrix {
        self.entries
    }

    pub fn model(&self) -> ChannelModel {
        self.model
    }

    /// Number of transmit antennas.
    pub fn m(&self) -> usize {
        self.entries.nrows()
    }

    /// Number of users.
    pub fn k(&self) -> usize {
        self.entries.ncols()
    }
}

/// i.i.d. CN(0, 1) draws, `N_s x K`.
#[derive(Debug, Clone, PartialEq)]
pub struct SymbolBatch {
    symbols: CMatrix,
    seed: u64,
}

impl SymbolBatch {
    pub fn from_matrix(symbols: CMatrix, seed: u64) -> Result<Self, ChannelError> {
        if symbols.nrows() == 0 {
            return Err(ChannelError::EmptyBatch);
        }
        if symbols.ncols() == 0 {
            return Err(ChannelError::EmptyDimension {
                m: symbols.nrows(),
                k: 0,
            });
        }
        Ok(Self { symbols, seed })
    }

    pub fn symbols(&self) -> &CMatrix {
        &self.symbols
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.symbols.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.nrows() == 0
    }

    pub fn k(&self) -> usize {
        self.symbols.ncols()
    }

    /// Symbols laid out `K x N_s` (one column per channel use).
    pub fn as_columns(&self) -> CMatrix {
        self.symbols.transpose()
    }
}

pub fn rayleigh_from_rng<R: Rng + ?Sized>(
    m: usize,
    k: usize,
    rng: &mut R,
) -> Result<ChannelMatrix, ChannelError> {
    if m == 0 || k == 0 {
        return Err(ChannelError::EmptyDimension { m, k });
    }
    // Row-major fill so the draw order does not depend on the storage layout.
    let mut h = CMatrix::zeros(m, k);
    for i in 0..m {
        for j in 0..k {
            h[(i, j)] = rng::complex_normal(rng);
        }
    }
    ChannelMatrix::new(h, ChannelModel::Rayleigh)
}

/// i.i.d. Rayleigh fading channel, entries CN(0, 1).
pub fn gen_rayleigh(m: usize, k: usize, seed: u64) -> Result<ChannelMatrix, ChannelError> {
    let mut r = rng::substream(seed, Stream::Channel, 0);
    rayleigh_from_rng(m, k, &mut r)
}

/// Pure line-of-sight channel of a half-wavelength ULA:
/// `h[m,k] = exp(-j m pi cos(phi_k))`.
pub fn gen_los_ula(m: usize, angles_deg: &[f64]) -> Result<ChannelMatrix, ChannelError> {
    if m == 0 || angles_deg.is_empty() {
        return Err(ChannelError::EmptyDimension {
            m,
            k: angles_deg.len(),
        });
    }
    let mut h = CMatrix::zeros(m, angles_deg.len());
    for (k, &phi) in angles_deg.iter().enumerate() {
        if !(0.0..=180.0).contains(&phi) {
            return Err(ChannelError::AngleOutOfRange(phi));
        }
        h.set_column(k, &steering_vector(m, phi));
    }
    ChannelMatrix::new(h, ChannelModel::LosUla)
}

/// ULA response towards `phi_deg`; also used to probe radiation patterns.
pub fn steering_vector(m: usize, phi_deg: f64) -> nalgebra::DVector<Complex64> {
    let c = phi_deg.to_radians().cos();
    nalgebra::DVector::from_fn(m, |i, _| Complex64::from_polar(1.0, -(i as f64) * PI * c))
}

/// Integer user angles drawn from U{0, ..., 180}. Co-located users are allowed.
pub fn random_los_angles<R: Rng + ?Sized>(k: usize, rng: &mut R) -> Vec<f64> {
    (0..k)
        .map(|_| rng.random_range(0..=180u32) as f64)
        .collect()
}

pub fn symbols_from_rng<R: Rng + ?Sized>(k: usize, n_s: usize, rng: &mut R) -> CMatrix {
    let mut s = CMatrix::zeros(n_s, k);
    for t in 0..n_s {
        for j in 0..k {
            s[(t, j)] = rng::complex_normal(rng);
        }
    }
    s
}

pub fn gen_symbols(k: usize, n_s: usize, seed: u64) -> Result<SymbolBatch, ChannelError> {
    if n_s == 0 {
        return Err(ChannelError::EmptyBatch);
    }
    if k == 0 {
        return Err(ChannelError::EmptyDimension { m: n_s, k });
    }
    let mut r = rng::substream(seed, Stream::Symbol, 0);
    SymbolBatch::from_matrix(symbols_from_rng(k, n_s, &mut r), seed)
}

/// Symbol batch attached to channel `index` of an experiment.
pub fn symbols_for_channel(k: usize, n_s: usize, seed: u64, index: u64) -> SymbolBatch {
    let mut r = rng::substream(seed, Stream::Symbol, index);
    SymbolBatch {
        symbols: symbols_from_rng(k, n_s, &mut r),
        seed,
    }
}
