//! Literal per-edge, per-node forward pass for one symbol vector, with an
//! operation counter.
//!
//! Counting rules: an `r×c` matrix-vector product costs `r·c` multiplies
//! and `r·(c−1)` adds, summing `n` vectors of width `d` costs `(n−1)·d`
//! adds, a mean costs `d` multiplies on top of its sum, activations are
//! free. Every product of the update equations is evaluated as written,
//! so the antenna term `W_bs z_bs` is recomputed for each edge.

use num_complex::Complex64;

use super::{lrelu, GnnConfig, GnnWeights, RMatrix};
use crate::channel::CMatrix;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct OpCount {
    pub mul: u64,
    pub add: u64,
}

impl OpCount {
    pub fn total(&self) -> u64 {
        self.mul + self.add
    }
}

impl std::ops::AddAssign for OpCount {
    fn add_assign(&mut self, o: OpCount) {
        self.mul += o.mul;
        self.add += o.add;
    }
}

/// Counts split by layer class; `hidden` is summed over all hidden layers.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LayerCounts {
    pub input: OpCount,
    pub hidden: OpCount,
    pub output: OpCount,
}

impl LayerCounts {
    pub fn total(&self) -> OpCount {
        let mut t = self.input;
        t += self.hidden;
        t += self.output;
        t
    }
}

fn matvec(w: &RMatrix, x: &[f64], c: &mut OpCount) -> Vec<f64> {
    let (r, n) = w.shape();
    let mut out = vec![0.0; r];
    for (i, o) in out.iter_mut().enumerate() {
        let mut acc = w[(i, 0)] * x[0];
        for j in 1..n {
            acc += w[(i, j)] * x[j];
        }
        *o = acc;
    }
    c.mul += (r * n) as u64;
    c.add += (r * (n - 1)) as u64;
    out
}

fn vsum(vs: &[&[f64]], c: &mut OpCount) -> Vec<f64> {
    let mut out = vs[0].to_vec();
    for v in &vs[1..] {
        for (o, x) in out.iter_mut().zip(v.iter()) {
            *o += x;
        }
    }
    c.add += ((vs.len() - 1) * out.len()) as u64;
    out
}

fn mean(vs: &[&[f64]], c: &mut OpCount) -> Vec<f64> {
    let n = vs.len() as f64;
    let mut out = vsum(vs, c);
    out.iter_mut().for_each(|x| *x /= n);
    c.mul += out.len() as u64;
    out
}

/// Returns the antenna logits (`2^{b+1}` × M) and the operation counts.
pub fn counted_forward(
    cfg: &GnnConfig,
    w: &GnnWeights,
    h: &CMatrix,
    s: &[Complex64],
) -> (RMatrix, LayerCounts) {
    let (m, k) = (h.nrows(), h.ncols());
    let slope = cfg.leaky_slope;
    let mut z_e: Vec<Vec<f64>> = (0..m * k)
        .map(|i| vec![h[(i / k, i % k)].re, h[(i / k, i % k)].im])
        .collect();
    let mut z_b: Vec<Vec<f64>> = vec![vec![0.0, 0.0]; m];
    let mut z_u: Vec<Vec<f64>> = s.iter().map(|v| vec![v.re, v.im]).collect();
    let mut counts = LayerCounts::default();
    let n_layers = w.layers.len();
    for (n, l) in w.layers.iter().enumerate() {
        let mut c = OpCount::default();
        let is_output = l.is_output();
        let mut e_new = Vec::with_capacity(m * k);
        for mm in 0..m {
            for kk in 0..k {
                let a = matvec(&l.edge, &z_e[mm * k + kk], &mut c);
                let b = matvec(&l.bs, &z_b[mm], &mut c);
                let u = matvec(&l.ue, &z_u[kk], &mut c);
                let pre = vsum(&[&a, &b, &u], &mut c);
                e_new.push(
                    pre.into_iter()
                        .map(|x| lrelu(x, slope))
                        .collect::<Vec<f64>>(),
                );
            }
        }
        let mut u_new = Vec::new();
        if !is_output {
            for kk in 0..k {
                let nb: Vec<&[f64]> = (0..m).map(|mm| e_new[mm * k + kk].as_slice()).collect();
                let msg = mean(&nb, &mut c);
                let a = matvec(l.self_ue.as_ref().unwrap(), &z_u[kk], &mut c);
                let b = matvec(l.neigh_ue.as_ref().unwrap(), &msg, &mut c);
                u_new.push(
                    vsum(&[&a, &b], &mut c)
                        .into_iter()
                        .map(|x| lrelu(x, slope))
                        .collect::<Vec<f64>>(),
                );
            }
        }
        let mut b_new = Vec::with_capacity(m);
        for mm in 0..m {
            let nb: Vec<&[f64]> = (0..k).map(|kk| e_new[mm * k + kk].as_slice()).collect();
            let msg = mean(&nb, &mut c);
            let a = matvec(&l.self_bs, &z_b[mm], &mut c);
            let b = matvec(&l.neigh_bs, &msg, &mut c);
            let pre = vsum(&[&a, &b], &mut c);
            b_new.push(if is_output {
                pre
            } else {
                pre.into_iter().map(|x| lrelu(x, slope)).collect()
            });
        }
        if n == 0 {
            counts.input += c;
        } else if n + 1 == n_layers {
            counts.output += c;
        } else {
            counts.hidden += c;
        }
        z_e = e_new;
        z_b = b_new;
        z_u = u_new;
    }
    let d = z_b[0].len();
    (RMatrix::from_fn(d, m, |f, mm| z_b[mm][f]), counts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{gen_rayleigh, gen_symbols};
    use crate::gnn::logits_batch;

    #[test]
    fn reference_matches_batched_forward() {
        let cfg = GnnConfig::new(5, 3, 2, 6, 2).unwrap();
        let w = GnnWeights::init(&cfg, 21);
        let h = gen_rayleigh(5, 3, 22).unwrap();
        let s = gen_symbols(3, 1, 23).unwrap().as_columns();
        let fast = logits_batch(&cfg, &w, h.entries(), &s).unwrap();
        let sv: Vec<Complex64> = s.iter().copied().collect();
        let (slow, _) = counted_forward(&cfg, &w, h.entries(), &sv);
        assert!((fast - slow).abs().max() < 1e-12);
    }

    #[test]
    fn counter_primitives() {
        let mut c = OpCount::default();
        let w = RMatrix::from_element(3, 4, 1.0);
        let _ = matvec(&w, &[1.0; 4], &mut c);
        assert_eq!(c, OpCount { mul: 12, add: 9 });
        let v = [1.0, 2.0];
        let out = mean(&[&v, &v, &v], &mut c);
        assert_eq!(out, vec![1.0, 2.0]);
        assert_eq!(c, OpCount { mul: 14, add: 13 });
    }
}
