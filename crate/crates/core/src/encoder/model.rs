//! Relative-position transformer encoder with content and query streams.
//!
//! Each layer computes, per head, the score between query row `i` and key
//! `k` as
//!
//! ```text
//! ((q_i + u) . k_k + (q_i + w) . r(pos_i - pos_k)) / sqrt(d_head)
//! ```
//!
//! where `r(d)` is a projected sinusoid of the signed distance and `u`, `w`
//! are learned per-head biases. Only distances enter the score, never
//! absolute positions. Each attention block and each feed-forward block is
//! followed by a residual connection and layer normalization.
//!
//! The content stream carries token identity. The query stream starts from
//! a shared learned vector, reads keys and values from the content stream,
//! and is what the language-model head reads at target positions.

use std::sync::Arc;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{EncoderConfig, EncoderError, PermutationPlan};
use crate::numerics::{concat, ParamSet, Tape, Tensor, Var};
use crate::text::NUM_SPECIAL;

const LN_EPS: f64 = 1e-12;

pub const WORD_EMB: &str = "word_emb";
pub const MASK_EMB: &str = "mask_emb";
pub const LM_WEIGHT: &str = "lm.w";
pub const LM_BIAS: &str = "lm.b";

pub fn layer_param(layer: usize, suffix: &str) -> String {
    format!("layer{layer}.{suffix}")
}

const LAYER_SUFFIXES: [&str; 15] = [
    "attn.q",
    "attn.k",
    "attn.v",
    "attn.o",
    "attn.r",
    "attn.r_w_bias",
    "attn.r_r_bias",
    "attn.ln.gamma",
    "attn.ln.beta",
    "ff.w1",
    "ff.b1",
    "ff.w2",
    "ff.b2",
    "ff.ln.gamma",
    "ff.ln.beta",
];

struct LayerVars<'t> {
    q: Var<'t>,
    k: Var<'t>,
    v: Var<'t>,
    o: Var<'t>,
    r: Var<'t>,
    r_w_bias: Var<'t>,
    r_r_bias: Var<'t>,
    attn_gamma: Var<'t>,
    attn_beta: Var<'t>,
    w1: Var<'t>,
    b1: Var<'t>,
    w2: Var<'t>,
    b2: Var<'t>,
    ff_gamma: Var<'t>,
    ff_beta: Var<'t>,
}

/// Output of a content-stream pass.
pub struct ContentPass<'t> {
    /// Last-layer hidden states, `[len, d_model]`.
    pub hidden: Var<'t>,
    /// Input to each layer (the embedding output for layer 0).
    pub layer_inputs: Vec<Var<'t>>,
}

/// Optional dropout source; training passes `Some`.
pub type DropoutRng<'a> = Option<&'a mut dyn RngCore>;

#[derive(Debug, Clone)]
pub struct Encoder {
    config: EncoderConfig,
    params: ParamSet,
}

impl Encoder {
    /// Parameter names and shapes in canonical order.
    pub fn parameter_shapes(config: &EncoderConfig) -> Vec<(String, Vec<usize>)> {
        let (d, inner, hd) = (config.d_model, config.d_inner, config.n_heads * config.d_head);
        let mut out = vec![
            (WORD_EMB.to_string(), vec![config.vocab_size, d]),
            (MASK_EMB.to_string(), vec![1, d]),
        ];
        for l in 0..config.n_layers {
            for suffix in LAYER_SUFFIXES {
                let shape = match suffix {
                    "attn.q" | "attn.k" | "attn.v" | "attn.r" => vec![d, hd],
                    "attn.o" => vec![hd, d],
                    "attn.r_w_bias" | "attn.r_r_bias" => vec![hd],
                    "ff.w1" => vec![d, inner],
                    "ff.b1" => vec![inner],
                    "ff.w2" => vec![inner, d],
                    _ => vec![d],
                };
                out.push((layer_param(l, suffix), shape));
            }
        }
        out.push((LM_WEIGHT.to_string(), vec![d, config.num_regular()]));
        out.push((LM_BIAS.to_string(), vec![config.num_regular()]));
        out
    }

    /// Seeded initialization: weight matrices `N(0, 1/fan_in)`, embeddings
    /// `N(0, 1)`, biases zero, layer-norm gains one, language-model head zero.
    pub fn init(config: EncoderConfig, seed: u64) -> Result<Self, EncoderError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        for (name, shape) in Self::parameter_shapes(&config) {
            let t = if name == WORD_EMB || name == MASK_EMB {
                Tensor::randn(&shape, 1.0, &mut rng)
            } else if name.starts_with("lm.") || shape.len() == 1 && !name.ends_with("gamma") {
                Tensor::zeros(&shape)
            } else if name.ends_with("gamma") {
                Tensor::ones(&shape)
            } else {
                Tensor::randn(&shape, 1.0 / (shape[0] as f64).sqrt(), &mut rng)
            };
            params.insert(name, t)?;
        }
        Ok(Encoder { config, params })
    }

    /// Wraps existing parameters after checking names and shapes.
    pub fn from_params(config: EncoderConfig, params: ParamSet) -> Result<Self, EncoderError> {
        config.validate()?;
        let expected = Self::parameter_shapes(&config);
        if expected.len() != params.len() {
            return Err(EncoderError::Checkpoint(format!(
                "expected {} parameters, found {}",
                expected.len(),
                params.len()
            )));
        }
        for (name, shape) in &expected {
            match params.get(name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => {
                    return Err(EncoderError::Checkpoint(format!(
                        "{name}: shape {:?}, expected {shape:?}",
                        t.shape()
                    )))
                }
                None => return Err(EncoderError::Checkpoint(format!("missing parameter {name}"))),
            }
        }
        Ok(Encoder { config, params })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn into_params(self) -> ParamSet {
        self.params
    }

    fn layer_vars<'t>(&self, params: &ParamSet, tape: &'t Tape, l: usize) -> Result<LayerVars<'t>, EncoderError> {
        let p = |s: &str| params.var(tape, &layer_param(l, s));
        Ok(LayerVars {
            q: p("attn.q")?,
            k: p("attn.k")?,
            v: p("attn.v")?,
            o: p("attn.o")?,
            r: p("attn.r")?,
            r_w_bias: p("attn.r_w_bias")?,
            r_r_bias: p("attn.r_r_bias")?,
            attn_gamma: p("attn.ln.gamma")?,
            attn_beta: p("attn.ln.beta")?,
            w1: p("ff.w1")?,
            b1: p("ff.b1")?,
            w2: p("ff.w2")?,
            b2: p("ff.b2")?,
            ff_gamma: p("ff.ln.gamma")?,
            ff_beta: p("ff.ln.beta")?,
        })
    }

    fn check_ids(&self, ids: &[usize]) -> Result<(), EncoderError> {
        if ids.is_empty() {
            return Err(EncoderError::EmptySequence);
        }
        if let Some(&id) = ids.iter().find(|&&i| i >= self.config.vocab_size) {
            return Err(EncoderError::TokenOutOfRange {
                id,
                vocab_size: self.config.vocab_size,
            });
        }
        Ok(())
    }

    /// Sinusoid embeddings of the signed distances `-(klen-1) ..= klen-1`,
    /// row `r` holding distance `r - (klen - 1)`.
    fn relative_table(&self, klen: usize) -> Tensor {
        let d = self.config.d_model;
        let half = d / 2;
        let rows = 2 * klen - 1;
        let mut data = vec![0.0; rows * d];
        for r in 0..rows {
            let dist = r as f64 - (klen as f64 - 1.0);
            for c in 0..half {
                let inv_freq = 1.0 / 10000f64.powf(2.0 * c as f64 / d as f64);
                data[r * d + c] = (dist * inv_freq).sin();
                data[r * d + half + c] = (dist * inv_freq).cos();
            }
        }
        Tensor::new(vec![rows, d], data).expect("table shape")
    }

    /// For each (query row, key) pair, the flat index into a
    /// `[qlen, 2*klen-1]` score matrix holding their relative distance.
    fn relative_index(query_pos: &[i64], key_pos: &[i64]) -> Arc<Vec<usize>> {
        let klen = key_pos.len() as i64;
        let width = (2 * klen - 1) as usize;
        let mut idx = Vec::with_capacity(query_pos.len() * key_pos.len());
        for (i, &qp) in query_pos.iter().enumerate() {
            for &kp in key_pos {
                let col = (qp - kp + klen - 1) as usize;
                debug_assert!(col < width);
                idx.push(i * width + col);
            }
        }
        Arc::new(idx)
    }

    #[allow(clippy::too_many_arguments)]
    fn attend<'t>(
        &self,
        lv: &LayerVars<'t>,
        query_in: Var<'t>,
        keys: Var<'t>,
        values: Var<'t>,
        rel_keys: Var<'t>,
        rel_index: &Arc<Vec<usize>>,
        mask: &[bool],
    ) -> Result<Var<'t>, EncoderError> {
        let dh = self.config.d_head;
        let qlen = query_in.shape()[0];
        let klen = keys.shape()[0];
        let scale = 1.0 / (dh as f64).sqrt();
        let q = query_in.matmul(lv.q)?;
        let mut heads = Vec::with_capacity(self.config.n_heads);
        for h in 0..self.config.n_heads {
            let qh = q.slice(1, h * dh, dh)?;
            let kh = keys.slice(1, h * dh, dh)?;
            let vh = values.slice(1, h * dh, dh)?;
            let rh = rel_keys.slice(1, h * dh, dh)?;
            let content_bias = lv.r_w_bias.slice(0, h * dh, dh)?;
            let position_bias = lv.r_r_bias.slice(0, h * dh, dh)?;

            let ac = qh.add_row(content_bias)?.matmul(kh.transpose()?)?;
            let bd_full = qh.add_row(position_bias)?.matmul(rh.transpose()?)?;
            let bd = bd_full.gather(Arc::clone(rel_index), vec![qlen, klen])?;
            let scores = ac.add(bd)?.scale(scale);
            let probs = scores.masked_softmax(mask)?;
            heads.push(probs.matmul(vh)?);
        }
        let merged = if heads.len() == 1 { heads[0] } else { concat(&heads, 1)? };
        Ok(merged.matmul(lv.o)?)
    }

    fn dropout<'t>(&self, x: Var<'t>, rng: &mut DropoutRng<'_>) -> Result<Var<'t>, EncoderError> {
        let rate = self.config.dropout;
        match rng.as_deref_mut() {
            Some(r) if rate > 0.0 => {
                let keep = 1.0 / (1.0 - rate);
                let n = x.with_value(Tensor::numel);
                let factors = (0..n)
                    .map(|_| if r.random::<f64>() < rate { 0.0 } else { keep })
                    .collect();
                Ok(x.scale_by(factors)?)
            }
            _ => Ok(x),
        }
    }

    /// Residual + norm around attention, then the feed-forward block.
    fn finish_layer<'t>(
        &self,
        lv: &LayerVars<'t>,
        attn: Var<'t>,
        residual: Var<'t>,
        rng: &mut DropoutRng<'_>,
    ) -> Result<Var<'t>, EncoderError> {
        let attn = self.dropout(attn, rng)?;
        let h = attn.add(residual)?.layer_norm(lv.attn_gamma, lv.attn_beta, LN_EPS)?;
        let ff = h.matmul(lv.w1)?.add_row(lv.b1)?.gelu();
        let ff = ff.matmul(lv.w2)?.add_row(lv.b2)?;
        let ff = self.dropout(ff, rng)?;
        Ok(ff.add(h)?.layer_norm(lv.ff_gamma, lv.ff_beta, LN_EPS)?)
    }

    /// Content stream over `ids` with an explicit `[len, mem_len + len]`
    /// visibility mask. `mems`, when given, hold one `[mlen, d_model]`
    /// tensor per layer, prepended to that layer's keys and values.
    /// `offset` shifts every absolute position; scores only depend on
    /// differences.
    pub fn content_pass<'t>(
        &self,
        tape: &'t Tape,
        ids: &[usize],
        mask: &[bool],
        mems: Option<&[Tensor]>,
        offset: i64,
        mut rng: DropoutRng<'_>,
    ) -> Result<ContentPass<'t>, EncoderError> {
        self.content_pass_with(&self.params, tape, ids, mask, mems, offset, &mut rng)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn content_pass_with<'t>(
        &self,
        params: &ParamSet,
        tape: &'t Tape,
        ids: &[usize],
        mask: &[bool],
        mems: Option<&[Tensor]>,
        offset: i64,
        rng: &mut DropoutRng<'_>,
    ) -> Result<ContentPass<'t>, EncoderError> {
        self.check_ids(ids)?;
        let len = ids.len();
        let mlen = match mems {
            Some(m) => {
                if m.len() != self.config.n_layers {
                    return Err(EncoderError::Memory(format!(
                        "{} memory tensors for {} layers",
                        m.len(),
                        self.config.n_layers
                    )));
                }
                let mlen = m[0].shape()[0];
                if m.iter().any(|t| t.shape() != [mlen, self.config.d_model]) {
                    return Err(EncoderError::Memory("inconsistent memory shapes".into()));
                }
                mlen
            }
            None => 0,
        };
        let klen = mlen + len;
        if mask.len() != len * klen {
            return Err(EncoderError::PlanInvariant(format!(
                "mask has {} entries, expected {}",
                mask.len(),
                len * klen
            )));
        }
        let query_pos: Vec<i64> = (0..len).map(|i| (mlen + i) as i64 + offset).collect();
        let key_pos: Vec<i64> = (0..klen).map(|k| k as i64 + offset).collect();
        let rel_index = Self::relative_index(&query_pos, &key_pos);
        let table = tape.constant(self.relative_table(klen));

        let mut h = params.var(tape, WORD_EMB)?.embedding(ids)?;
        h = self.dropout(h, rng)?;
        let mut layer_inputs = Vec::with_capacity(self.config.n_layers);
        for l in 0..self.config.n_layers {
            layer_inputs.push(h);
            let lv = self.layer_vars(params, tape, l)?;
            let kv_src = match mems {
                Some(m) => concat(&[tape.constant(m[l].clone()), h], 0)?,
                None => h,
            };
            let keys = kv_src.matmul(lv.k)?;
            let values = kv_src.matmul(lv.v)?;
            let rel_keys = table.matmul(lv.r)?;
            let attn = self.attend(&lv, h, keys, values, rel_keys, &rel_index, mask)?;
            h = self.finish_layer(&lv, attn, h, rng)?;
        }
        Ok(ContentPass {
            hidden: h,
            layer_inputs,
        })
    }

    /// Content stream where every key is visible except those flagged
    /// invisible in `key_visible` (padding). Memory positions are always
    /// visible.
    pub fn content_mask(len: usize, mlen: usize, key_visible: &[bool]) -> Vec<bool> {
        let klen = mlen + len;
        (0..len * klen)
            .map(|i| {
                let k = i % klen;
                k < mlen || key_visible[k - mlen]
            })
            .collect()
    }

    /// Last-layer hidden states for an unpadded sequence, all positions
    /// mutually visible.
    pub fn hidden_states(&self, ids: &[usize]) -> Result<Tensor, EncoderError> {
        let tape = Tape::new();
        let mask = vec![true; ids.len() * ids.len()];
        let pass = self.content_pass(&tape, ids, &mask, None, 0, None)?;
        Ok(pass.hidden.value().as_ref().clone())
    }

    /// Both streams under `plan`. Returns (content, query) last-layer states.
    pub fn two_stream<'t>(
        &self,
        tape: &'t Tape,
        ids: &[usize],
        plan: &PermutationPlan,
        rng: DropoutRng<'_>,
    ) -> Result<(Var<'t>, Var<'t>), EncoderError> {
        self.two_stream_with(&self.params, tape, ids, plan, rng)
    }

    pub fn two_stream_with<'t>(
        &self,
        params: &ParamSet,
        tape: &'t Tape,
        ids: &[usize],
        plan: &PermutationPlan,
        mut rng: DropoutRng<'_>,
    ) -> Result<(Var<'t>, Var<'t>), EncoderError> {
        self.check_ids(ids)?;
        let len = ids.len();
        if plan.len() != len {
            return Err(EncoderError::PlanInvariant(format!(
                "plan length {} for sequence of length {len}",
                plan.len()
            )));
        }
        let d = self.config.d_model;
        let content_mask = plan.content_mask();
        let query_mask = plan.query_mask();
        let pos: Vec<i64> = (0..len as i64).collect();
        let rel_index = Self::relative_index(&pos, &pos);
        let table = tape.constant(self.relative_table(len));

        let mut h = params.var(tape, WORD_EMB)?.embedding(ids)?;
        h = self.dropout(h, &mut rng)?;
        let broadcast: Vec<usize> = (0..len).flat_map(|_| 0..d).collect();
        let mut g = params.var(tape, MASK_EMB)?.gather(Arc::new(broadcast), vec![len, d])?;
        g = self.dropout(g, &mut rng)?;
        for l in 0..self.config.n_layers {
            let lv = self.layer_vars(params, tape, l)?;
            let keys = h.matmul(lv.k)?;
            let values = h.matmul(lv.v)?;
            let rel_keys = table.matmul(lv.r)?;
            let attn_h = self.attend(&lv, h, keys, values, rel_keys, &rel_index, &content_mask)?;
            let attn_g = self.attend(&lv, g, keys, values, rel_keys, &rel_index, &query_mask)?;
            let h_next = self.finish_layer(&lv, attn_h, h, &mut rng)?;
            g = self.finish_layer(&lv, attn_g, g, &mut rng)?;
            h = h_next;
        }
        Ok((h, g))
    }

    /// Log-probability of the true token at every target of `plan`, in
    /// factorization order. `None` when the plan has no targets.
    pub fn target_log_probs<'t>(
        &self,
        tape: &'t Tape,
        ids: &[usize],
        plan: &PermutationPlan,
        rng: DropoutRng<'_>,
    ) -> Result<Option<Var<'t>>, EncoderError> {
        self.target_log_probs_with(&self.params, tape, ids, plan, rng)
    }

    pub fn target_log_probs_with<'t>(
        &self,
        params: &ParamSet,
        tape: &'t Tape,
        ids: &[usize],
        plan: &PermutationPlan,
        rng: DropoutRng<'_>,
    ) -> Result<Option<Var<'t>>, EncoderError> {
        plan.check_targets(ids)?;
        let targets = plan.targets();
        if targets.is_empty() {
            return Ok(None);
        }
        let (_, g) = self.two_stream_with(params, tape, ids, plan, rng)?;
        let at_targets = g.select_rows(targets)?;
        let logits = at_targets
            .matmul(params.var(tape, LM_WEIGHT)?)?
            .add_row(params.var(tape, LM_BIAS)?)?;
        let classes: Vec<usize> = targets.iter().map(|&p| ids[p] - NUM_SPECIAL).collect();
        Ok(Some(logits.log_softmax().pick(&classes)?))
    }

    /// Random dropout-free perturbation of every parameter; used to move
    /// away from the zero-initialized head in gradient checks.
    pub fn jitter<R: Rng + ?Sized>(&mut self, std: f64, rng: &mut R) {
        let ids: Vec<_> = self.params.iter().map(|(id, _, _)| id).collect();
        for id in ids {
            let t = self.params.by_id_mut(id);
            let shape = t.shape().to_vec();
            let noise = Tensor::randn(&shape, std, rng);
            t.data_mut().iter_mut().zip(noise.data()).for_each(|(a, b)| *a += b);
        }
    }
}
