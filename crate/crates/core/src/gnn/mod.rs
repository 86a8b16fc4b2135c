//! Message-passing GNN on the complete bipartite antenna/user graph.
//!
//! Features are stored as `d × n` column matrices over a batch of `T`
//! symbol vectors that share one channel. Column layouts:
//! edges `(t·M + m)·K + k`, antenna nodes `t·M + m`, user nodes `t·K + k`.
//!
//! Neighbourhood means are taken over sorted values so that reordering
//! antennas or users permutes the outputs bit-exactly.

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::channel::CMatrix;
use crate::linalg::gemm;
use crate::quantizer::ScalarQuantizer;
use crate::rng::{substream, Stream};

pub mod checkpoint;
pub mod reference;

pub type RMatrix = DMatrix<f64>;

pub const DEFAULT_LEAKY_SLOPE: f64 = 0.01;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GnnError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GnnConfig {
    pub m: usize,
    pub k: usize,
    pub bits: u32,
    pub d_h: usize,
    pub n_h: usize,
    pub leaky_slope: f64,
}

impl GnnConfig {
    pub fn new(m: usize, k: usize, bits: u32, d_h: usize, n_h: usize) -> Result<Self, GnnError> {
        let c = GnnConfig {
            m,
            k,
            bits,
            d_h,
            n_h,
            leaky_slope: DEFAULT_LEAKY_SLOPE,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), GnnError> {
        if self.m == 0 || self.k == 0 {
            return Err(GnnError::Config(format!(
                "graph needs M, K >= 1, got M={}, K={}",
                self.m, self.k
            )));
        }
        if !(1..=crate::quantizer::MAX_BITS).contains(&self.bits) {
            return Err(GnnError::Config(format!(
                "bits must be in 1..=8, got {}",
                self.bits
            )));
        }
        if self.d_h == 0 || self.n_h == 0 {
            return Err(GnnError::Config(format!(
                "need d_h >= 1 and N_h >= 1, got d_h={}, N_h={}",
                self.d_h, self.n_h
            )));
        }
        if !(self.leaky_slope.is_finite() && self.leaky_slope >= 0.0) {
            return Err(GnnError::Config(format!(
                "bad leaky slope {}",
                self.leaky_slope
            )));
        }
        Ok(())
    }

    /// Levels per real dimension, `2^b`.
    pub fn levels(&self) -> usize {
        1 << self.bits
    }

    /// Antenna output width `2^{b+1}`: real-part logits then imaginary-part logits.
    pub fn output_dim(&self) -> usize {
        2 << self.bits
    }

    /// Feature widths `d_0, ..., d_{N-1}` with `N = N_h + 2` layers.
    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![2];
        d.extend(std::iter::repeat_n(self.d_h, self.n_h + 1));
        d.push(self.output_dim());
        d
    }

    pub fn num_layers(&self) -> usize {
        self.n_h + 2
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Family {
    Edge,
    Bs,
    Ue,
    SelfBs,
    NeighBs,
    SelfUe,
    NeighUe,
}

impl Family {
    pub const ALL: [Family; 7] = [
        Family::Edge,
        Family::Bs,
        Family::Ue,
        Family::SelfBs,
        Family::NeighBs,
        Family::SelfUe,
        Family::NeighUe,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Family::Edge => "edge",
            Family::Bs => "bs",
            Family::Ue => "ue",
            Family::SelfBs => "self_bs",
            Family::NeighBs => "neigh_bs",
            Family::SelfUe => "self_ue",
            Family::NeighUe => "neigh_ue",
        }
    }
}

/// Weights of one layer. The output layer has no user update, so its
/// `self_ue`/`neigh_ue` are `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub edge: RMatrix,
    pub bs: RMatrix,
    pub ue: RMatrix,
    pub self_bs: RMatrix,
    pub neigh_bs: RMatrix,
    pub self_ue: Option<RMatrix>,
    pub neigh_ue: Option<RMatrix>,
}

impl LayerWeights {
    pub fn zeros(d_in: usize, d_out: usize, is_output: bool) -> Self {
        let z = || RMatrix::zeros(d_out, d_in);
        LayerWeights {
            edge: z(),
            bs: z(),
            ue: z(),
            self_bs: z(),
            neigh_bs: RMatrix::zeros(d_out, d_out),
            self_ue: (!is_output).then(z),
            neigh_ue: (!is_output).then(|| RMatrix::zeros(d_out, d_out)),
        }
    }

    pub fn d_in(&self) -> usize {
        self.edge.ncols()
    }

    pub fn d_out(&self) -> usize {
        self.edge.nrows()
    }

    pub fn is_output(&self) -> bool {
        self.self_ue.is_none()
    }

    pub fn get(&self, f: Family) -> Option<&RMatrix> {
        match f {
            Family::Edge => Some(&self.edge),
            Family::Bs => Some(&self.bs),
            Family::Ue => Some(&self.ue),
            Family::SelfBs => Some(&self.self_bs),
            Family::NeighBs => Some(&self.neigh_bs),
            Family::SelfUe => self.self_ue.as_ref(),
            Family::NeighUe => self.neigh_ue.as_ref(),
        }
    }

    pub fn get_mut(&mut self, f: Family) -> Option<&mut RMatrix> {
        match f {
            Family::Edge => Some(&mut self.edge),
            Family::Bs => Some(&mut self.bs),
            Family::Ue => Some(&mut self.ue),
            Family::SelfBs => Some(&mut self.self_bs),
            Family::NeighBs => Some(&mut self.neigh_bs),
            Family::SelfUe => self.self_ue.as_mut(),
            Family::NeighUe => self.neigh_ue.as_mut(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GnnWeights {
    pub layers: Vec<LayerWeights>,
}

impl GnnWeights {
    pub fn zeros(cfg: &GnnConfig) -> Self {
        let d = cfg.dims();
        let n = cfg.num_layers();
        GnnWeights {
            layers: (0..n)
                .map(|i| LayerWeights::zeros(d[i], d[i + 1], i + 1 == n))
                .collect(),
        }
    }

    /// Uniform in `±√(6 / (fan_in + fan_out))` per matrix, one RNG
    /// sub-stream per matrix, filled row by row.
    pub fn init(cfg: &GnnConfig, seed: u64) -> Self {
        let mut w = Self::zeros(cfg);
        for (idx, (_, _, mat)) in w.entries_mut().into_iter().enumerate() {
            let mut rng = substream(seed, Stream::Init, idx as u64);
            let a = (6.0 / (mat.nrows() + mat.ncols()) as f64).sqrt();
            for i in 0..mat.nrows() {
                for j in 0..mat.ncols() {
                    // Stored at f32 precision so checkpoints reproduce it exactly.
                    mat[(i, j)] = rng.random_range(-a..a) as f32 as f64;
                }
            }
        }
        w
    }

    /// Every matrix with its layer index and family, in storage order.
    pub fn entries(&self) -> Vec<(usize, Family, &RMatrix)> {
        let mut v = Vec::new();
        for (n, l) in self.layers.iter().enumerate() {
            for f in Family::ALL {
                if let Some(m) = l.get(f) {
                    v.push((n, f, m));
                }
            }
        }
        v
    }

    pub fn entries_mut(&mut self) -> Vec<(usize, Family, &mut RMatrix)> {
        let mut v = Vec::new();
        for (n, l) in self.layers.iter_mut().enumerate() {
            let LayerWeights {
                edge,
                bs,
                ue,
                self_bs,
                neigh_bs,
                self_ue,
                neigh_ue,
            } = l;
            v.push((n, Family::Edge, edge));
            v.push((n, Family::Bs, bs));
            v.push((n, Family::Ue, ue));
            v.push((n, Family::SelfBs, self_bs));
            v.push((n, Family::NeighBs, neigh_bs));
            if let Some(m) = self_ue.as_mut() {
                v.push((n, Family::SelfUe, m));
            }
            if let Some(m) = neigh_ue.as_mut() {
                v.push((n, Family::NeighUe, m));
            }
        }
        v
    }

    pub fn num_params(&self) -> usize {
        self.entries().iter().map(|(_, _, m)| m.len()).sum()
    }

    /// Shapes match `cfg` and every entry is finite.
    pub fn check(&self, cfg: &GnnConfig) -> Result<(), GnnError> {
        let want = Self::zeros(cfg);
        if want.layers.len() != self.layers.len() {
            return Err(GnnError::Dimension(format!(
                "{} layers, config needs {}",
                self.layers.len(),
                want.layers.len()
            )));
        }
        for ((n, f, a), (_, _, b)) in self.entries().into_iter().zip(want.entries()) {
            if a.shape() != b.shape() {
                return Err(GnnError::Dimension(format!(
                    "layer {n} {}: {:?}, expected {:?}",
                    f.name(),
                    a.shape(),
                    b.shape()
                )));
            }
            if a.iter().any(|x| !x.is_finite()) {
                return Err(GnnError::Dimension(format!(
                    "layer {n} {} has non-finite entries",
                    f.name()
                )));
            }
        }
        if self.entries().len() != want.entries().len() {
            return Err(GnnError::Dimension(
                "weight family layout differs from config".into(),
            ));
        }
        Ok(())
    }

    /// `self += a · other`.
    pub fn axpy(&mut self, a: f64, other: &GnnWeights) {
        for ((_, _, x), (_, _, y)) in self.entries_mut().into_iter().zip(other.entries()) {
            x.zip_apply(y, |p, q| *p += a * q);
        }
    }

    pub fn scale(&mut self, a: f64) {
        for (_, _, x) in self.entries_mut() {
            *x *= a;
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.entries()
            .iter()
            .flat_map(|(_, _, m)| m.iter())
            .fold(0.0, |acc, x| acc.max(x.abs()))
    }
}

/// Node and edge features for `t` graphs sharing `m` antennas and `k` users.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    pub m: usize,
    pub k: usize,
    pub t: usize,
    pub edge: RMatrix,
    pub bs: RMatrix,
    pub ue: RMatrix,
}

/// Features of a single graph.
pub type GraphState = Graph;

impl Graph {
    pub fn edge_col(&self, t: usize, m: usize, k: usize) -> usize {
        (t * self.m + m) * self.k + k
    }

    pub fn dim(&self) -> usize {
        self.edge.nrows()
    }
}

/// Input features: edges `[ℜh, ℑh]`, antennas `[0, 0]`, users `[ℜs, ℑs]`.
/// `s` is K×T, one column per symbol vector.
pub fn init_inputs_batch(h: &CMatrix, s: &CMatrix) -> Result<Graph, GnnError> {
    let (m, k, t) = (h.nrows(), h.ncols(), s.ncols());
    if s.nrows() != k {
        return Err(GnnError::Dimension(format!(
            "symbols have {} users, channel has {k}",
            s.nrows()
        )));
    }
    if m == 0 || k == 0 {
        return Err(GnnError::Dimension("empty graph".into()));
    }
    let mut edge = RMatrix::zeros(2, t * m * k);
    for tt in 0..t {
        for mm in 0..m {
            for kk in 0..k {
                let c = (tt * m + mm) * k + kk;
                edge[(0, c)] = h[(mm, kk)].re;
                edge[(1, c)] = h[(mm, kk)].im;
            }
        }
    }
    let mut ue = RMatrix::zeros(2, t * k);
    for tt in 0..t {
        for kk in 0..k {
            ue[(0, tt * k + kk)] = s[(kk, tt)].re;
            ue[(1, tt * k + kk)] = s[(kk, tt)].im;
        }
    }
    Ok(Graph {
        m,
        k,
        t,
        edge,
        bs: RMatrix::zeros(2, t * m),
        ue,
    })
}

pub fn init_inputs(h: &CMatrix, s: &[Complex64]) -> Result<GraphState, GnnError> {
    init_inputs_batch(h, &CMatrix::from_column_slice(s.len(), 1, s))
}

fn lrelu(a: f64, slope: f64) -> f64 {
    if a > 0.0 {
        a
    } else {
        slope * a
    }
}

fn lrelu_grad(a: f64, slope: f64) -> f64 {
    if a > 0.0 {
        1.0
    } else {
        slope
    }
}

/// Order-independent mean: sort, then sum.
fn sorted_mean(buf: &mut [f64]) -> f64 {
    if buf.len() == 1 {
        return buf[0];
    }
    buf.sort_unstable_by(f64::total_cmp);
    buf.iter().sum::<f64>() / buf.len() as f64
}

/// Antenna messages: mean over users of the edge features (d × TM).
fn mean_over_users(e: &RMatrix, m: usize, k: usize, t: usize) -> RMatrix {
    let d = e.nrows();
    let mut out = RMatrix::zeros(d, t * m);
    if k == 1 {
        out.copy_from(e);
        return out;
    }
    let mut buf = vec![0.0; k];
    for node in 0..t * m {
        for f in 0..d {
            for (kk, b) in buf.iter_mut().enumerate() {
                *b = e[(f, node * k + kk)];
            }
            out[(f, node)] = sorted_mean(&mut buf);
        }
    }
    out
}

/// User messages: mean over antennas of the edge features (d × TK).
fn mean_over_antennas(e: &RMatrix, m: usize, k: usize, t: usize) -> RMatrix {
    let d = e.nrows();
    let mut out = RMatrix::zeros(d, t * k);
    let mut buf = vec![0.0; m * d];
    for tt in 0..t {
        for kk in 0..k {
            for mm in 0..m {
                let col = e.column((tt * m + mm) * k + kk);
                for f in 0..d {
                    buf[f * m + mm] = col[f];
                }
            }
            for f in 0..d {
                out[(f, tt * k + kk)] = sorted_mean(&mut buf[f * m..(f + 1) * m]);
            }
        }
    }
    out
}

fn matmul(a: &RMatrix, b: &RMatrix) -> RMatrix {
    let mut c = RMatrix::zeros(a.nrows(), b.ncols());
    gemm(1.0, a, false, b, false, 0.0, &mut c);
    c
}

/// Intermediate values of one layer kept for the backward pass.
#[derive(Debug, Clone)]
struct LayerCache {
    pre_e: RMatrix,
    msg_bs: RMatrix,
    pre_bs: RMatrix,
    msg_ue: Option<RMatrix>,
    pre_ue: Option<RMatrix>,
}

fn layer_impl(g: &Graph, w: &LayerWeights, slope: f64) -> Result<(Graph, LayerCache), GnnError> {
    let (m, k, t) = (g.m, g.k, g.t);
    if g.dim() != w.d_in() || g.bs.nrows() != w.d_in() || g.ue.nrows() != w.d_in() {
        return Err(GnnError::Dimension(format!(
            "features have width {}, layer expects {}",
            g.dim(),
            w.d_in()
        )));
    }
    let d = w.d_out();
    let pe = matmul(&w.edge, &g.edge);
    let pb = matmul(&w.bs, &g.bs);
    let pu = matmul(&w.ue, &g.ue);
    let mut pre_e = pe;
    for tt in 0..t {
        for mm in 0..m {
            let bcol = pb.column(tt * m + mm);
            for kk in 0..k {
                let ucol = pu.column(tt * k + kk);
                let mut col = pre_e.column_mut((tt * m + mm) * k + kk);
                for f in 0..d {
                    col[f] = col[f] + bcol[f] + ucol[f];
                }
            }
        }
    }
    let e_out = pre_e.map(|a| lrelu(a, slope));
    let msg_bs = mean_over_users(&e_out, m, k, t);
    let mut pre_bs = matmul(&w.self_bs, &g.bs);
    gemm(1.0, &w.neigh_bs, false, &msg_bs, false, 1.0, &mut pre_bs);
    let (bs, ue, msg_ue, pre_ue) = match (&w.self_ue, &w.neigh_ue) {
        (Some(su), Some(nu)) => {
            let msg_ue = mean_over_antennas(&e_out, m, k, t);
            let mut pre_ue = matmul(su, &g.ue);
            gemm(1.0, nu, false, &msg_ue, false, 1.0, &mut pre_ue);
            let bs = pre_bs.map(|a| lrelu(a, slope));
            let ue = pre_ue.map(|a| lrelu(a, slope));
            (bs, ue, Some(msg_ue), Some(pre_ue))
        }
        // Output layer: linear antenna logits, no user update.
        _ => (pre_bs.clone(), RMatrix::zeros(0, t * k), None, None),
    };
    let next = Graph {
        m,
        k,
        t,
        edge: e_out,
        bs,
        ue,
    };
    Ok((
        next,
        LayerCache {
            pre_e,
            msg_bs,
            pre_bs,
            msg_ue,
            pre_ue,
        },
    ))
}

/// One message-passing layer. In the output layer only the antenna
/// features (the logits) are meaningful; user features come back empty.
pub fn layer_forward(g: &Graph, w: &LayerWeights, slope: f64) -> Result<Graph, GnnError> {
    Ok(layer_impl(g, w, slope)?.0)
}

/// Antenna logits (`2^{b+1}` × TM) for a batch of symbol vectors.
pub fn logits_batch(
    cfg: &GnnConfig,
    w: &GnnWeights,
    h: &CMatrix,
    s: &CMatrix,
) -> Result<RMatrix, GnnError> {
    let mut g = init_inputs_batch(h, s)?;
    for l in &w.layers {
        g = layer_forward(&g, l, cfg.leaky_slope)?;
    }
    Ok(g.bs)
}

/// Everything [`backward`] needs from a forward pass.
#[derive(Debug, Clone)]
pub struct Tape {
    graphs: Vec<Graph>,
    caches: Vec<LayerCache>,
}

pub fn forward_taped(
    cfg: &GnnConfig,
    w: &GnnWeights,
    h: &CMatrix,
    s: &CMatrix,
) -> Result<(RMatrix, Tape), GnnError> {
    let mut graphs = vec![init_inputs_batch(h, s)?];
    let mut caches = Vec::with_capacity(w.layers.len());
    for l in &w.layers {
        let (next, cache) = layer_impl(graphs.last().unwrap(), l, cfg.leaky_slope)?;
        graphs.push(next);
        caches.push(cache);
    }
    let logits = graphs.last().unwrap().bs.clone();
    Ok((logits, Tape { graphs, caches }))
}

/// Reverse pass from the logit gradient to every weight matrix.
pub fn backward(cfg: &GnnConfig, w: &GnnWeights, tape: &Tape, d_logits: &RMatrix) -> GnnWeights {
    let slope = cfg.leaky_slope;
    let mut grads = GnnWeights::zeros(cfg);
    let n = w.layers.len();
    let mut d_e: Option<RMatrix> = None;
    let mut d_b = d_logits.clone();
    let mut d_u: Option<RMatrix> = None;
    for i in (0..n).rev() {
        let (lw, cache, input) = (&w.layers[i], &tape.caches[i], &tape.graphs[i]);
        let gw = &mut grads.layers[i];
        let (m, k, t) = (input.m, input.k, input.t);
        let d = lw.d_out();

        let d_pre_b = if lw.is_output() {
            d_b.clone()
        } else {
            d_b.zip_map(&cache.pre_bs, |g, a| g * lrelu_grad(a, slope))
        };
        gemm(1.0, &d_pre_b, false, &input.bs, true, 1.0, &mut gw.self_bs);
        gemm(
            1.0,
            &d_pre_b,
            false,
            &cache.msg_bs,
            true,
            1.0,
            &mut gw.neigh_bs,
        );
        let mut d_msg_b = RMatrix::zeros(d, t * m);
        gemm(1.0, &lw.neigh_bs, true, &d_pre_b, false, 0.0, &mut d_msg_b);

        let mut d_pre_u = None;
        let mut d_msg_u = None;
        if let (Some(nu), Some(pre_ue), Some(msg_ue), Some(du)) =
            (&lw.neigh_ue, &cache.pre_ue, &cache.msg_ue, &d_u)
        {
            let dp = du.zip_map(pre_ue, |g, a| g * lrelu_grad(a, slope));
            gemm(
                1.0,
                &dp,
                false,
                &input.ue,
                true,
                1.0,
                gw.self_ue.as_mut().unwrap(),
            );
            gemm(
                1.0,
                &dp,
                false,
                msg_ue,
                true,
                1.0,
                gw.neigh_ue.as_mut().unwrap(),
            );
            let mut dm = RMatrix::zeros(d, t * k);
            gemm(1.0, nu, true, &dp, false, 0.0, &mut dm);
            d_pre_u = Some(dp);
            d_msg_u = Some(dm);
        }

        // Edge gradient: downstream use plus both mean aggregations.
        let mut d_pre_e = match d_e.take() {
            Some(x) => x,
            None => RMatrix::zeros(d, t * m * k),
        };
        let (inv_k, inv_m) = (1.0 / k as f64, 1.0 / m as f64);
        for tt in 0..t {
            for mm in 0..m {
                let bcol = d_msg_b.column(tt * m + mm);
                for kk in 0..k {
                    let c = (tt * m + mm) * k + kk;
                    let mut col = d_pre_e.column_mut(c);
                    let pre = cache.pre_e.column(c);
                    match &d_msg_u {
                        Some(du) => {
                            let ucol = du.column(tt * k + kk);
                            for f in 0..d {
                                col[f] = (col[f] + bcol[f] * inv_k + ucol[f] * inv_m)
                                    * lrelu_grad(pre[f], slope);
                            }
                        }
                        None => {
                            for f in 0..d {
                                col[f] = (col[f] + bcol[f] * inv_k) * lrelu_grad(pre[f], slope);
                            }
                        }
                    }
                }
            }
        }
        gemm(1.0, &d_pre_e, false, &input.edge, true, 1.0, &mut gw.edge);
        let mut d_pb = RMatrix::zeros(d, t * m);
        let mut d_pu = RMatrix::zeros(d, t * k);
        for tt in 0..t {
            for mm in 0..m {
                for kk in 0..k {
                    let col = d_pre_e.column((tt * m + mm) * k + kk);
                    let mut b = d_pb.column_mut(tt * m + mm);
                    b += &col;
                    let mut u = d_pu.column_mut(tt * k + kk);
                    u += &col;
                }
            }
        }
        gemm(1.0, &d_pb, false, &input.bs, true, 1.0, &mut gw.bs);
        gemm(1.0, &d_pu, false, &input.ue, true, 1.0, &mut gw.ue);

        if i == 0 {
            break;
        }
        let d_in = lw.d_in();
        let mut de = RMatrix::zeros(d_in, t * m * k);
        gemm(1.0, &lw.edge, true, &d_pre_e, false, 0.0, &mut de);
        let mut db = RMatrix::zeros(d_in, t * m);
        gemm(1.0, &lw.bs, true, &d_pb, false, 0.0, &mut db);
        gemm(1.0, &lw.self_bs, true, &d_pre_b, false, 1.0, &mut db);
        let mut du = RMatrix::zeros(d_in, t * k);
        gemm(1.0, &lw.ue, true, &d_pu, false, 0.0, &mut du);
        if let (Some(su), Some(dp)) = (&lw.self_ue, &d_pre_u) {
            gemm(1.0, su, true, dp, false, 1.0, &mut du);
        }
        d_e = Some(de);
        d_b = db;
        d_u = Some(du);
    }
    grads
}

/// Per-antenna probability vectors over the `2^b` levels of each real dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbOutput {
    /// M×L, row m is `p_{ℜ,m}`.
    pub p_re: RMatrix,
    /// M×L, row m is `p_{ℑ,m}`.
    pub p_im: RMatrix,
}

/// Max-shifted softmax of `a` into `out`.
pub fn softmax_into(a: &[f64], out: &mut [f64]) {
    let mx = a.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &x) in out.iter_mut().zip(a) {
        *o = (x - mx).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Lowest index among the maxima.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Split each antenna's logits into real and imaginary halves and apply a
/// softmax to each. `logits` is `2L × M` for one symbol vector.
pub fn probabilities(logits: &RMatrix, levels: usize) -> ProbOutput {
    let m = logits.ncols();
    let mut p_re = RMatrix::zeros(m, levels);
    let mut p_im = RMatrix::zeros(m, levels);
    let mut buf = vec![0.0; levels];
    for a in 0..m {
        let col: Vec<f64> = logits.column(a).iter().copied().collect();
        softmax_into(&col[..levels], &mut buf);
        p_re.row_mut(a)
            .iter_mut()
            .zip(&buf)
            .for_each(|(d, s)| *d = *s);
        softmax_into(&col[levels..], &mut buf);
        p_im.row_mut(a)
            .iter_mut()
            .zip(&buf)
            .for_each(|(d, s)| *d = *s);
    }
    ProbOutput { p_re, p_im }
}

fn check_cfg_dims(cfg: &GnnConfig, w: &GnnWeights) -> Result<(), GnnError> {
    let want = cfg.output_dim();
    match w.layers.last() {
        Some(l) if l.d_out() == want => Ok(()),
        _ => Err(GnnError::Dimension(format!(
            "weights do not produce {want} logits per antenna"
        ))),
    }
}

pub fn forward(
    h: &CMatrix,
    s: &[Complex64],
    w: &GnnWeights,
    cfg: &GnnConfig,
) -> Result<ProbOutput, GnnError> {
    check_cfg_dims(cfg, w)?;
    let logits = logits_batch(cfg, w, h, &CMatrix::from_column_slice(s.len(), 1, s))?;
    Ok(probabilities(&logits, cfg.levels()))
}

/// Argmax level selection for every antenna and every symbol vector in
/// `s` (K×T). Returns the unnormalized DAC outputs (M×T).
pub fn infer_batch(
    h: &CMatrix,
    s: &CMatrix,
    w: &GnnWeights,
    cfg: &GnnConfig,
    q: &ScalarQuantizer,
) -> Result<CMatrix, GnnError> {
    check_cfg_dims(cfg, w)?;
    if q.num_levels() != cfg.levels() {
        return Err(GnnError::Dimension(format!(
            "quantizer has {} levels, network {}",
            q.num_levels(),
            cfg.levels()
        )));
    }
    let logits = logits_batch(cfg, w, h, s)?;
    let (m, t, l) = (h.nrows(), s.ncols(), cfg.levels());
    let lv = q.levels();
    let mut y = CMatrix::zeros(m, t);
    let mut buf = vec![0.0; l];
    for tt in 0..t {
        for mm in 0..m {
            let col = logits.column(tt * m + mm);
            let a: Vec<f64> = col.iter().copied().collect();
            softmax_into(&a[..l], &mut buf);
            let i = argmax(&buf);
            softmax_into(&a[l..], &mut buf);
            let j = argmax(&buf);
            y[(mm, tt)] = Complex64::new(lv[i], lv[j]);
        }
    }
    Ok(y)
}

/// `y_m = l_i + j l_j` with `i, j` the argmax of each probability half.
pub fn infer(
    h: &CMatrix,
    s: &[Complex64],
    w: &GnnWeights,
    cfg: &GnnConfig,
    q: &ScalarQuantizer,
) -> Result<Vec<Complex64>, GnnError> {
    let y = infer_batch(h, &CMatrix::from_column_slice(s.len(), 1, s), w, cfg, q)?;
    Ok(y.iter().copied().collect())
}
