//! Scalar Lloyd-Max quantizers for a standard normal source and the
//! per-antenna complex DAC model built on top of them.
//!
//! Cells are left-half-open: cell `i` is `(t[i], t[i+1]]` with
//! `t[0] = -inf` and `t[L] = +inf`, so an input sitting exactly on a
//! threshold maps to the lower-index level.

use std::fmt::Write as _;
use std::path::Path;

use num_complex::Complex64;
use rand_distr::{Distribution, StandardNormal};
use serde_json::Value;
use thiserror::Error;

use crate::rng::{self, Stream};

pub const MAX_BITS: u32 = 8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QuantizerError {
    #[error("bit width {0} outside 1..=8")]
    InvalidBits(u32),
    #[error("Lloyd-Max did not converge within {iterations} iterations (residual {residual:e})")]
    NotConverged {
        best: Box<ScalarQuantizer>,
        iterations: usize,
        residual: f64,
    },
    #[error("cannot quantize NaN")]
    NanInput,
    #[error("normalisation factor rho[{index}] = {value} must be positive")]
    NonPositiveScale { index: usize, value: f64 },
    #[error("length mismatch: {inputs} inputs but {scales} scale factors")]
    LengthMismatch { inputs: usize, scales: usize },
    #[error("malformed quantizer: {0}")]
    Malformed(String),
    #[error("i/o error: {0}")]
    Io(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScalarQuantizer {
    bits: u32,
    levels: Vec<f64>,
    thresholds: Vec<f64>,
}

/// Options of the multi-start Lloyd-Max search.
#[derive(Debug, Clone, Copy)]
pub struct LloydOptions {
    pub n_init: usize,
    pub tol: f64,
    pub max_iter: usize,
    pub seed: u64,
}

impl Default for LloydOptions {
    fn default() -> Self {
        Self {
            n_init: 16,
            tol: 1e-10,
            max_iter: 10_000,
            seed: 0,
        }
    }
}

fn pdf(x: f64) -> f64 {
    if x.is_infinite() {
        0.0
    } else {
        (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
    }
}

/// Upper tail `P(X > x)`.
fn upper_tail(x: f64) -> f64 {
    0.5 * libm::erfc(x / std::f64::consts::SQRT_2)
}

/// `P(a < X <= b)` without cancellation in either tail.
fn cell_mass(a: f64, b: f64) -> f64 {
    if a >= 0.0 {
        upper_tail(a) - upper_tail(b)
    } else if b <= 0.0 {
        upper_tail(-b) - upper_tail(-a)
    } else {
        1.0 - upper_tail(b) - upper_tail(-a)
    }
}

/// `x * pdf(x)`, zero at the infinities.
fn xpdf(x: f64) -> f64 {
    if x.is_infinite() {
        0.0
    } else {
        x * pdf(x)
    }
}

struct Cell {
    centroid: f64,
    dc_da: f64,
    dc_db: f64,
}

fn cell(a: f64, b: f64) -> Option<Cell> {
    let mass = cell_mass(a, b);
    if !(mass > 0.0) {
        return None;
    }
    let centroid = (pdf(a) - pdf(b)) / mass;
    let dc_da = if a.is_infinite() {
        0.0
    } else {
        pdf(a) * (centroid - a) / mass
    };
    let dc_db = if b.is_infinite() {
        0.0
    } else {
        pdf(b) * (b - centroid) / mass
    };
    Some(Cell {
        centroid,
        dc_da,
        dc_db,
    })
}

fn midpoints(levels: &[f64]) -> Vec<f64> {
    let mut t = Vec::with_capacity(levels.len() + 1);
    t.push(f64::NEG_INFINITY);
    t.extend(levels.windows(2).map(|w| 0.5 * (w[0] + w[1])));
    t.push(f64::INFINITY);
    t
}

/// Cells of the nearest-neighbour partition induced by `levels`.
fn cells(levels: &[f64]) -> Option<Vec<Cell>> {
    let t = midpoints(levels);
    t.windows(2).map(|w| cell(w[0], w[1])).collect()
}

fn residual(levels: &[f64], cells: &[Cell]) -> f64 {
    levels
        .iter()
        .zip(cells)
        .map(|(l, c)| (c.centroid - l).abs())
        .fold(0.0, f64::max)
}

/// One Newton step on `centroid(l) - l = 0`. The Jacobian is tridiagonal.
fn newton_direction(levels: &[f64], cells: &[Cell]) -> Option<Vec<f64>> {
    let n = levels.len();
    let mut lower = vec![0.0; n];
    let mut diag = vec![0.0; n];
    let mut upper = vec![0.0; n];
    let mut rhs = vec![0.0; n];
    for i in 0..n {
        let c = &cells[i];
        lower[i] = 0.5 * c.dc_da;
        upper[i] = 0.5 * c.dc_db;
        diag[i] = 0.5 * (c.dc_da + c.dc_db) - 1.0;
        rhs[i] = -(c.centroid - levels[i]);
    }
    // Thomas algorithm.
    for i in 1..n {
        if diag[i - 1] == 0.0 {
            return None;
        }
        let w = lower[i] / diag[i - 1];
        diag[i] -= w * upper[i - 1];
        rhs[i] -= w * rhs[i - 1];
    }
    let mut delta = vec![0.0; n];
    for i in (0..n).rev() {
        let acc = rhs[i]
            - if i + 1 < n {
                upper[i] * delta[i + 1]
            } else {
                0.0
            };
        if diag[i] == 0.0 {
            return None;
        }
        delta[i] = acc / diag[i];
    }
    delta.iter().all(|d| d.is_finite()).then_some(delta)
}

/// Damped Newton: halve the step until the residual drops.
fn newton_step(levels: &[f64], cur: &[Cell], res: f64) -> Option<(Vec<f64>, Vec<Cell>, f64)> {
    let delta = newton_direction(levels, cur)?;
    let mut scale = 1.0;
    for _ in 0..20 {
        let next: Vec<f64> = levels
            .iter()
            .zip(&delta)
            .map(|(l, d)| l + scale * d)
            .collect();
        if next.windows(2).all(|w| w[0] < w[1]) {
            if let Some(cc) = cells(&next) {
                let r = residual(&next, &cc);
                if r < res {
                    return Some((next, cc, r));
                }
            }
        }
        scale *= 0.5;
    }
    None
}

struct Run {
    levels: Vec<f64>,
    residual: f64,
    iterations: usize,
}

fn lloyd_run(mut levels: Vec<f64>, tol: f64, max_iter: usize) -> Option<Run> {
    let mut cur = cells(&levels)?;
    let mut res = residual(&levels, &cur);
    let mut it = 0;
    while res >= tol && it < max_iter {
        it += 1;
        // Plain Lloyd update, polished by Newton once close to a fixed point.
        let next = if res < 1e-3 {
            newton_step(&levels, &cur, res)
        } else {
            None
        };
        let (l, c, r) = match next {
            Some(x) => x,
            None => {
                let l: Vec<f64> = cur.iter().map(|c| c.centroid).collect();
                let c = cells(&l)?;
                let r = residual(&l, &c);
                (l, c, r)
            }
        };
        levels = l;
        cur = c;
        res = r;
    }
    Some(Run {
        levels,
        residual: res,
        iterations: it,
    })
}

/// Multi-start Lloyd-Max design for a N(0, 1) source.
///
/// Each start is a sorted draw of `2^bits` standard normal samples. The
/// lowest-MSQE converged quantizer is returned; if no start meets `tol`
/// within `max_iter` iterations the best iterate is carried in the error.
pub fn lloyd_max(bits: u32, opts: LloydOptions) -> Result<ScalarQuantizer, QuantizerError> {
    if !(1..=MAX_BITS).contains(&bits) {
        return Err(QuantizerError::InvalidBits(bits));
    }
    let n = 1usize << bits;
    let mut best_ok: Option<(f64, ScalarQuantizer)> = None;
    let mut best_any: Option<(f64, ScalarQuantizer, usize)> = None;
    for start in 0..opts.n_init.max(1) {
        let mut r = rng::substream(
            opts.seed,
            Stream::LloydInit,
            (bits as u64) << 32 | start as u64,
        );
        let mut init: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut r)).collect();
        init.sort_by(f64::total_cmp);
        init.dedup();
        if init.len() != n {
            continue;
        }
        let Some(run) = lloyd_run(init, opts.tol, opts.max_iter) else {
            continue;
        };
        let q = ScalarQuantizer::from_levels(bits, run.levels.clone())?;
        let mse = q.msqe();
        if run.residual < opts.tol {
            if best_ok.as_ref().is_none_or(|(m, _)| mse < *m) {
                best_ok = Some((mse, q));
            }
        } else if best_any.as_ref().is_none_or(|(r, _, _)| run.residual < *r) {
            best_any = Some((run.residual, q, run.iterations));
        }
    }
    match (best_ok, best_any) {
        (Some((_, q)), _) => Ok(q),
        (None, Some((residual, q, iterations))) => Err(QuantizerError::NotConverged {
            best: Box::new(q),
            iterations,
            residual,
        }),
        (None, None) => Err(QuantizerError::Malformed(
            "every initialisation degenerated".into(),
        )),
    }
}

impl ScalarQuantizer {
    /// Nearest-neighbour quantizer: thresholds are the level midpoints.
    pub fn from_levels(bits: u32, levels: Vec<f64>) -> Result<Self, QuantizerError> {
        let thresholds = midpoints(&levels);
        Self::new(bits, levels, thresholds)
    }

    pub fn new(bits: u32, levels: Vec<f64>, thresholds: Vec<f64>) -> Result<Self, QuantizerError> {
        if !(1..=MAX_BITS).contains(&bits) {
            return Err(QuantizerError::InvalidBits(bits));
        }
        let n = 1usize << bits;
        if levels.len() != n || thresholds.len() != n + 1 {
            return Err(QuantizerError::Malformed(format!(
                "{} levels / {} thresholds for b={bits}",
                levels.len(),
                thresholds.len()
            )));
        }
        if thresholds[0] != f64::NEG_INFINITY || thresholds[n] != f64::INFINITY {
            return Err(QuantizerError::Malformed(
                "outer thresholds must be -inf and +inf".into(),
            ));
        }
        if !levels.windows(2).all(|w| w[0] < w[1]) || !thresholds.windows(2).all(|w| w[0] < w[1]) {
            return Err(QuantizerError::Malformed(
                "levels and thresholds must be strictly increasing".into(),
            ));
        }
        for (i, l) in levels.iter().enumerate() {
            if !(thresholds[i] <= *l && *l <= thresholds[i + 1]) {
                return Err(QuantizerError::Malformed(format!(
                    "level {i} lies outside its cell"
                )));
            }
        }
        Ok(Self {
            bits,
            levels,
            thresholds,
        })
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    pub fn levels(&self) -> &[f64] {
        &self.levels
    }

    pub fn thresholds(&self) -> &[f64] {
        &self.thresholds
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    /// Index `i` with `x` in `(t[i], t[i+1]]`.
    pub fn cell_index(&self, x: f64) -> Result<usize, QuantizerError> {
        if x.is_nan() {
            return Err(QuantizerError::NanInput);
        }
        let inner = &self.thresholds[1..self.levels.len()];
        Ok(inner.partition_point(|t| *t < x))
    }

    pub fn quantize(&self, x: f64) -> Result<f64, QuantizerError> {
        Ok(self.levels[self.cell_index(x)?])
    }

    /// Mean-squared quantization error for a N(0, 1) input, via closed-form
    /// partial moments of the normal density.
    pub fn msqe(&self) -> f64 {
        self.levels
            .iter()
            .zip(self.thresholds.windows(2))
            .map(|(&l, w)| {
                let (a, b) = (w[0], w[1]);
                let p = cell_mass(a, b);
                let m1 = pdf(a) - pdf(b);
                let m2 = p + xpdf(a) - xpdf(b);
                m2 - 2.0 * l * m1 + l * l * p
            })
            .sum()
    }

    pub fn to_json(&self) -> String {
        fn num(x: f64) -> String {
            if x == f64::INFINITY {
                "\"inf\"".into()
            } else if x == f64::NEG_INFINITY {
                "\"-inf\"".into()
            } else {
                format!("{x:.16e}")
            }
        }
        let join = |v: &[f64]| v.iter().map(|&x| num(x)).collect::<Vec<_>>().join(", ");
        let mut s = String::new();
        let _ = writeln!(s, "{{");
        let _ = writeln!(s, "  \"b\": {},", self.bits);
        let _ = writeln!(s, "  \"levels\": [{}],", join(&self.levels));
        let _ = writeln!(s, "  \"thresholds\": [{}]", join(&self.thresholds));
        let _ = writeln!(s, "}}");
        s
    }

    pub fn from_json(text: &str) -> Result<Self, QuantizerError> {
        let v: Value =
            serde_json::from_str(text).map_err(|e| QuantizerError::Malformed(e.to_string()))?;
        let bits = v["b"]
            .as_u64()
            .ok_or_else(|| QuantizerError::Malformed("missing b".into()))?
            as u32;
        let list = |key: &str| -> Result<Vec<f64>, QuantizerError> {
            v[key]
                .as_array()
                .ok_or_else(|| QuantizerError::Malformed(format!("missing {key}")))?
                .iter()
                .map(|x| match x {
                    Value::Number(n) => n
                        .as_f64()
                        .ok_or_else(|| QuantizerError::Malformed("bad number".into())),
                    Value::String(s) if s == "inf" => Ok(f64::INFINITY),
                    Value::String(s) if s == "-inf" => Ok(f64::NEG_INFINITY),
                    other => Err(QuantizerError::Malformed(format!(
                        "unexpected value {other}"
                    ))),
                })
                .collect()
        };
        Self::new(bits, list("levels")?, list("thresholds")?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), QuantizerError> {
        std::fs::write(path, self.to_json()).map_err(|e| QuantizerError::Io(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, QuantizerError> {
        let text = std::fs::read_to_string(path).map_err(|e| QuantizerError::Io(e.to_string()))?;
        Self::from_json(&text)
    }
}

/// DAC resolution of a transmit chain; `Infinite` bypasses quantization.
#[derive(Debug, Clone, PartialEq)]
pub enum Resolution {
    Finite(ScalarQuantizer),
    Infinite,
}

impl Resolution {
    pub fn design(bits: Option<u32>) -> Result<Self, QuantizerError> {
        match bits {
            None => Ok(Resolution::Infinite),
            Some(b) => Ok(Resolution::Finite(lloyd_max(b, LloydOptions::default())?)),
        }
    }

    pub fn label(&self) -> String {
        match self {
            Resolution::Finite(q) => q.bits().to_string(),
            Resolution::Infinite => "inf".into(),
        }
    }
}

/// `y[m] = sqrt(rho[m]) * (Q(re x[m] / sqrt(rho[m])) + j Q(im x[m] / sqrt(rho[m])))`.
pub fn quantize_complex_vec(
    x: &[Complex64],
    q: &ScalarQuantizer,
    rho: &[f64],
) -> Result<Vec<Complex64>, QuantizerError> {
    if x.len() != rho.len() {
        return Err(QuantizerError::LengthMismatch {
            inputs: x.len(),
            scales: rho.len(),
        });
    }
    x.iter()
        .zip(rho)
        .enumerate()
        .map(|(m, (z, &r))| {
            if !(r > 0.0) {
                return Err(QuantizerError::NonPositiveScale { index: m, value: r });
            }
            let s = r.sqrt();
            Ok(Complex64::new(q.quantize(z.re / s)?, q.quantize(z.im / s)?) * s)
        })
        .collect()
}
