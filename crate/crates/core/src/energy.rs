//! GNN operation counts and power models for current-steering DACs and
//! GNN inference.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gnn::reference::{LayerCounts, OpCount};

#[derive(Debug, Error, PartialEq)]
pub enum EnergyError {
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("RF-DAC sampling rate {f_s} Hz in Nyquist zone {n} is below the bandwidth {b} Hz")]
    Undersampled { f_s: f64, b: f64, n: u32 },
}

/// Real multiplications and additions of one GNN forward pass (one symbol
/// vector), split by layer class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopReport {
    pub mul: u64,
    pub add: u64,
    pub total: u64,
    pub input: (u64, u64),
    pub hidden: (u64, u64),
    pub output: (u64, u64),
}

impl FlopReport {
    fn from_parts(c: LayerCounts) -> Self {
        let t = c.total();
        FlopReport {
            mul: t.mul,
            add: t.add,
            total: t.total(),
            input: (c.input.mul, c.input.add),
            hidden: (c.hidden.mul, c.hidden.add),
            output: (c.output.mul, c.output.add),
        }
    }

    pub fn counts(&self) -> LayerCounts {
        let oc = |(mul, add)| OpCount { mul, add };
        LayerCounts { input: oc(self.input), hidden: oc(self.hidden), output: oc(self.output) }
    }
}

/// Edge update: three `o×a` products and two vector sums, per edge.
fn edge_terms(m: u64, k: u64, a: u64, o: u64) -> OpCount {
    OpCount { mul: 3 * m * k * o * a, add: m * k * (3 * o * (a - 1) + 2 * o) }
}

/// Node update for `n` nodes that average `deg` neighbours each.
fn node_terms(n: u64, deg: u64, a: u64, o: u64) -> OpCount {
    OpCount {
        mul: n * (o + o * a + o * o),
        add: n * ((deg - 1) * o + o * (a - 1) + o * (o - 1) + o),
    }
}

fn layer_terms(m: u64, k: u64, a: u64, o: u64, with_users: bool) -> OpCount {
    let mut c = edge_terms(m, k, a, o);
    c += node_terms(m, k, a, o);
    if with_users {
        c += node_terms(k, m, a, o);
    }
    c
}

/// Closed-form operation counts. Returns an error if any argument is 0 or
/// `bits` is too large for the output layer width to fit.
pub fn gnn_flops(m: usize, k: usize, d_h: usize, n_h: usize, bits: u32) -> Result<FlopReport, EnergyError> {
    if m == 0 || k == 0 || d_h == 0 || n_h == 0 || bits == 0 {
        return Err(EnergyError::Invalid(format!("need all of (M, K, d_h, N_h, b) >= 1, got ({m}, {k}, {d_h}, {n_h}, {bits})")));
    }
    if bits > 30 {
        return Err(EnergyError::Invalid(format!("b = {bits} is out of range")));
    }
    let (m, k, d) = (m as u64, k as u64, d_h as u64);
    let out = 2u64 << bits;
    let input = layer_terms(m, k, 2, d, true);
    let one = layer_terms(m, k, d, d, true);
    let hidden = OpCount { mul: one.mul * n_h as u64, add: one.add * n_h as u64 };
    let output = layer_terms(m, k, d, out, false);
    Ok(FlopReport::from_parts(LayerCounts { input, hidden, output }))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DacMode {
    Baseband,
    Rfdac,
}

impl std::str::FromStr for DacMode {
    type Err = EnergyError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "baseband" => Ok(DacMode::Baseband),
            "rfdac" => Ok(DacMode::Rfdac),
            _ => Err(EnergyError::Invalid(format!("unknown DAC mode `{s}` (baseband|rfdac)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerModel {
    pub v_dd: f64,
    pub i_0: f64,
    pub c_p: f64,
    /// Accelerator efficiency in FLOP/s per watt.
    pub eta: f64,
    pub roll_off: f64,
    pub f_c: f64,
    /// Nyquist zone used by RF-DACs.
    pub n_zone: u32,
}

impl Default for PowerModel {
    fn default() -> Self {
        PowerModel { v_dd: 3.0, i_0: 10e-6, c_p: 1e-12, eta: 646.6e12, roll_off: 0.1, f_c: 3.5e9, n_zone: 2 }
    }
}

impl PowerModel {
    pub fn validate(&self) -> Result<(), EnergyError> {
        let vals = [("V_dd", self.v_dd), ("I_0", self.i_0), ("C_p", self.c_p), ("eta", self.eta), ("f_c", self.f_c)];
        for (n, v) in vals {
            if !(v > 0.0 && v.is_finite()) {
                return Err(EnergyError::Invalid(format!("{n} must be positive, got {v}")));
            }
        }
        if !(self.roll_off >= 0.0) || self.n_zone == 0 {
            return Err(EnergyError::Invalid("roll-off must be >= 0 and the Nyquist zone >= 1".into()));
        }
        Ok(())
    }

    /// Per-DAC power at sampling rate `f_s`.
    pub fn dac_power(&self, bits: u32, f_s: f64) -> f64 {
        let static_p = 0.5 * self.v_dd * self.i_0 * ((1u64 << bits) - 1) as f64;
        static_p + bits as f64 * self.c_p * (f_s / 2.0) * self.v_dd * self.v_dd
    }

    /// Two DACs per antenna.
    pub fn dac_total(&self, m: usize, bits: u32, f_s: f64) -> f64 {
        2.0 * m as f64 * self.dac_power(bits, f_s)
    }

    pub fn sampling_rate(&self, mode: DacMode, b: f64) -> Result<f64, EnergyError> {
        sampling_rate(mode, b, self.f_c, self.n_zone)
    }

    pub fn symbol_rate(&self, b: f64) -> f64 {
        b / (1.0 + self.roll_off)
    }

    /// GNN power at bandwidth `b` and the FLOP/s it requires.
    pub fn gnn_power(&self, b: f64, flops: &FlopReport) -> GnnPower {
        let req = self.symbol_rate(b) * flops.total as f64;
        GnnPower { watts: req / self.eta, flops_per_s: req }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GnnPower {
    pub watts: f64,
    pub flops_per_s: f64,
}

pub fn sampling_rate(mode: DacMode, b: f64, f_c: f64, n_zone: u32) -> Result<f64, EnergyError> {
    if !(b > 0.0) {
        return Err(EnergyError::Invalid(format!("bandwidth must be positive, got {b}")));
    }
    match mode {
        DacMode::Baseband => Ok(4.0 * b),
        DacMode::Rfdac => {
            if n_zone == 0 || !(f_c > 0.0) {
                return Err(EnergyError::Invalid("RF-DAC needs f_c > 0 and a zone >= 1".into()));
            }
            let f_s = 4.0 * f_c / (2 * n_zone - 1) as f64;
            if f_s < b {
                return Err(EnergyError::Undersampled { f_s, b, n: n_zone });
            }
            Ok(f_s)
        }
    }
}

/// One row of a power sweep: DAC, GNN and total power in watts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PowerRow {
    pub b_hz: f64,
    pub p_dacs_w: f64,
    pub p_gnn_w: f64,
    pub p_total_w: f64,
    pub req_flops_per_s: f64,
}

/// GNN architecture for the processing term; `None` for a linear precoder
/// whose processing power is not modelled.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GnnShape {
    pub d_h: usize,
    pub n_h: usize,
}

pub fn power_row(
    model: &PowerModel,
    mode: DacMode,
    m: usize,
    k: usize,
    bits: u32,
    gnn: Option<GnnShape>,
    b: f64,
) -> Result<PowerRow, EnergyError> {
    let f_s = model.sampling_rate(mode, b)?;
    let p_dacs_w = model.dac_total(m, bits, f_s);
    let g = match gnn {
        Some(s) => model.gnn_power(b, &gnn_flops(m, k, s.d_h, s.n_h, bits)?),
        None => GnnPower { watts: 0.0, flops_per_s: 0.0 },
    };
    Ok(PowerRow { b_hz: b, p_dacs_w, p_gnn_w: g.watts, p_total_w: p_dacs_w + g.watts, req_flops_per_s: g.flops_per_s })
}

/// Bandwidth at which a GNN with `gnn_bits` DACs stops drawing less total
/// power than a linear precoder with `lin_bits` DACs (baseband sampling),
/// or `None` if it never does within `(0, b_max]`.
pub fn crossover_bandwidth(
    model: &PowerModel,
    m: usize,
    k: usize,
    gnn: GnnShape,
    gnn_bits: u32,
    lin_bits: u32,
    b_max: f64,
) -> Result<Option<f64>, EnergyError> {
    let diff = |b: f64| -> Result<f64, EnergyError> {
        let g = power_row(model, DacMode::Baseband, m, k, gnn_bits, Some(gnn), b)?;
        let l = power_row(model, DacMode::Baseband, m, k, lin_bits, None, b)?;
        Ok(g.p_total_w - l.p_total_w)
    };
    let mut lo = b_max * 1e-9;
    let mut hi = b_max;
    if diff(lo)? >= 0.0 || diff(hi)? < 0.0 {
        return Ok(None);
    }
    // Both sides are affine in b, but bisect anyway to stay model-agnostic.
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if diff(mid)? < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(Some(0.5 * (lo + hi)))
}
