//! Plain-loop encoder used as an independent oracle for the taped model.
//! Shares parameters with the model under test but none of its code.

use cxl_core::encoder::{layer_param, EncoderConfig, LM_BIAS, LM_WEIGHT, MASK_EMB, WORD_EMB};
use cxl_core::numerics::{ParamSet, Tensor};
use cxl_core::text::NUM_SPECIAL;

pub type Rows = Vec<Vec<f64>>;

pub struct Reference<'a> {
    pub cfg: &'a EncoderConfig,
    pub params: &'a ParamSet,
}

fn tensor<'a>(p: &'a ParamSet, name: &str) -> &'a Tensor {
    p.get(name).unwrap_or_else(|| panic!("missing {name}"))
}

fn times(x: &[f64], w: &Tensor) -> Vec<f64> {
    let (rows, cols) = (w.shape()[0], w.shape()[1]);
    assert_eq!(x.len(), rows);
    (0..cols)
        .map(|c| (0..rows).map(|r| x[r] * w.data()[r * cols + c]).sum())
        .collect()
}

fn norm(x: &[f64], gamma: &[f64], beta: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let inv = 1.0 / (var + 1e-12).sqrt();
    (0..x.len()).map(|i| (x[i] - mean) * inv * gamma[i] + beta[i]).collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

/// Sinusoid of a signed distance: `sin` in the first half, `cos` in the second.
pub fn sinusoid(dist: f64, d: usize) -> Vec<f64> {
    let half = d / 2;
    let mut out = vec![0.0; d];
    for c in 0..half {
        let freq = (10000f64).powf(-(2.0 * c as f64) / d as f64);
        out[c] = (dist * freq).sin();
        out[half + c] = (dist * freq).cos();
    }
    out
}

impl<'a> Reference<'a> {
    fn p(&self, l: usize, s: &str) -> &'a Tensor {
        tensor(self.params, &layer_param(l, s))
    }

    fn embed(&self, ids: &[usize]) -> Rows {
        let e = tensor(self.params, WORD_EMB);
        ids.iter().map(|&i| e.row(i).to_vec()).collect()
    }

    /// One attention block. `visible(i, k)` decides whether query row `i`
    /// may read key `k`; a row with nothing visible outputs zeros.
    fn attend(
        &self,
        l: usize,
        queries: &Rows,
        kv: &Rows,
        qpos: &[i64],
        kpos: &[i64],
        visible: &dyn Fn(usize, usize) -> bool,
    ) -> Rows {
        let (nh, dh, d) = (self.cfg.n_heads, self.cfg.d_head, self.cfg.d_model);
        let u = self.p(l, "attn.r_w_bias").data();
        let w = self.p(l, "attn.r_r_bias").data();
        let keys: Rows = kv.iter().map(|x| times(x, self.p(l, "attn.k"))).collect();
        let vals: Rows = kv.iter().map(|x| times(x, self.p(l, "attn.v"))).collect();
        let mut out = Vec::new();
        for (i, qrow) in queries.iter().enumerate() {
            let q = times(qrow, self.p(l, "attn.q"));
            let mut merged = vec![0.0; nh * dh];
            for h in 0..nh {
                let sl = h * dh..(h + 1) * dh;
                let mut scores: Vec<Option<f64>> = Vec::new();
                for k in 0..kv.len() {
                    if !visible(i, k) {
                        scores.push(None);
                        continue;
                    }
                    let r = times(&sinusoid((qpos[i] - kpos[k]) as f64, d), self.p(l, "attn.r"));
                    let mut s = 0.0;
                    for j in sl.clone() {
                        s += (q[j] + u[j]) * keys[k][j] + (q[j] + w[j]) * r[j];
                    }
                    scores.push(Some(s / (dh as f64).sqrt()));
                }
                let max = scores.iter().flatten().cloned().fold(f64::NEG_INFINITY, f64::max);
                if max == f64::NEG_INFINITY {
                    continue;
                }
                let exps: Vec<f64> = scores.iter().map(|s| s.map_or(0.0, |s| (s - max).exp())).collect();
                let z: f64 = exps.iter().sum();
                for k in 0..kv.len() {
                    for j in sl.clone() {
                        merged[j] += exps[k] / z * vals[k][j];
                    }
                }
            }
            out.push(times(&merged, self.p(l, "attn.o")));
        }
        out
    }

    fn finish(&self, l: usize, attn: &Rows, residual: &Rows) -> Rows {
        attn.iter()
            .zip(residual)
            .map(|(a, r)| {
                let sum: Vec<f64> = a.iter().zip(r).map(|(x, y)| x + y).collect();
                let h = norm(
                    &sum,
                    self.p(l, "attn.ln.gamma").data(),
                    self.p(l, "attn.ln.beta").data(),
                );
                let mut f: Vec<f64> = times(&h, self.p(l, "ff.w1"))
                    .iter()
                    .zip(self.p(l, "ff.b1").data())
                    .map(|(x, b)| gelu(x + b))
                    .collect();
                f = times(&f, self.p(l, "ff.w2"));
                let f: Vec<f64> = f
                    .iter()
                    .zip(self.p(l, "ff.b2").data())
                    .zip(&h)
                    .map(|((x, b), y)| x + b + y)
                    .collect();
                norm(&f, self.p(l, "ff.ln.gamma").data(), self.p(l, "ff.ln.beta").data())
            })
            .collect()
    }

    /// Content stream. `mems[l]` rows precede the sequence as keys of layer
    /// `l`; positions start at `offset`.
    pub fn content(
        &self,
        ids: &[usize],
        visible: &dyn Fn(usize, usize) -> bool,
        mems: Option<&[Rows]>,
        offset: i64,
    ) -> Rows {
        let mlen = mems.map_or(0, |m| m[0].len());
        let qpos: Vec<i64> = (0..ids.len()).map(|i| (mlen + i) as i64 + offset).collect();
        let kpos: Vec<i64> = (0..mlen + ids.len()).map(|k| k as i64 + offset).collect();
        let mut h = self.embed(ids);
        for l in 0..self.cfg.n_layers {
            let mut kv = mems.map_or(Vec::new(), |m| m[l].clone());
            kv.extend(h.iter().cloned());
            let a = self.attend(l, &h, &kv, &qpos, &kpos, visible);
            h = self.finish(l, &a, &h);
        }
        h
    }

    /// Both streams where `rank[p]` is the factorization rank of position `p`.
    pub fn two_stream(&self, ids: &[usize], rank: &[usize]) -> (Rows, Rows) {
        let pos: Vec<i64> = (0..ids.len() as i64).collect();
        let mut h = self.embed(ids);
        let m = tensor(self.params, MASK_EMB).data().to_vec();
        let mut g: Rows = vec![m; ids.len()];
        let content = |i: usize, k: usize| rank[k] <= rank[i];
        let query = |i: usize, k: usize| rank[k] < rank[i];
        for l in 0..self.cfg.n_layers {
            let ah = self.attend(l, &h, &h, &pos, &pos, &content);
            let ag = self.attend(l, &g, &h, &pos, &pos, &query);
            let hn = self.finish(l, &ah, &h);
            g = self.finish(l, &ag, &g);
            h = hn;
        }
        (h, g)
    }

    /// Log-probability of the true token at each target, targets in the
    /// given order.
    pub fn target_log_probs(&self, ids: &[usize], rank: &[usize], targets: &[usize]) -> Vec<f64> {
        let (_, g) = self.two_stream(ids, rank);
        let w = tensor(self.params, LM_WEIGHT);
        let b = tensor(self.params, LM_BIAS).data();
        targets
            .iter()
            .map(|&t| {
                let logits: Vec<f64> = times(&g[t], w).iter().zip(b).map(|(x, y)| x + y).collect();
                let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + logits.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
                logits[ids[t] - NUM_SPECIAL] - lse
            })
            .collect()
    }
}

pub fn max_abs_diff(a: &Rows, b: &[f64], width: usize) -> f64 {
    a.iter()
        .flatten()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
        .max(if a.len() * width == b.len() { 0.0 } else { f64::INFINITY })
}
