use std::collections::BTreeMap;

use super::EncoderError;
use crate::text::NUM_SPECIAL;

/// Architecture of the relative-position encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_head: usize,
    /// Feed-forward width.
    pub d_inner: usize,
    pub max_len: usize,
    pub vocab_size: usize,
    /// Recurrence memory length; 0 disables it.
    pub mem_len: usize,
    /// Share of non-special positions predicted per permutation.
    pub predict_fraction: f64,
    pub dropout: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            n_layers: 4,
            d_model: 64,
            n_heads: 4,
            d_head: 16,
            d_inner: 256,
            max_len: 128,
            vocab_size: 0,
            mem_len: 0,
            predict_fraction: 1.0 / 6.0,
            dropout: 0.0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), EncoderError> {
        let bad = |m: String| Err(EncoderError::Config(m));
        for (name, v) in [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_head", self.d_head),
            ("d_inner", self.d_inner),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.d_model != self.n_heads * self.d_head {
            return bad(format!(
                "d_model {} != n_heads {} x d_head {}",
                self.d_model, self.n_heads, self.d_head
            ));
        }
        if !self.d_model.is_multiple_of(2) {
            return bad(format!(
                "d_model {} must be even for sinusoidal positions",
                self.d_model
            ));
        }
        if self.max_len < 2 {
            return bad(format!("max_len {} must be at least 2", self.max_len));
        }
        if self.vocab_size <= NUM_SPECIAL {
            return bad(format!("vocab_size {} leaves no predictable tokens", self.vocab_size));
        }
        if !(self.predict_fraction > 0.0 && self.predict_fraction <= 1.0) {
            return bad(format!("predict_fraction {} outside (0, 1]", self.predict_fraction));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    pub fn num_regular(&self) -> usize {
        self.vocab_size - NUM_SPECIAL
    }

    pub(crate) fn to_pairs(&self) -> Vec<(String, String)> {
        [
            ("n_layers", self.n_layers.to_string()),
            ("d_model", self.d_model.to_string()),
            ("n_heads", self.n_heads.to_string()),
            ("d_head", self.d_head.to_string()),
            ("d_inner", self.d_inner.to_string()),
            ("max_len", self.max_len.to_string()),
            ("vocab_size", self.vocab_size.to_string()),
            ("mem_len", self.mem_len.to_string()),
            ("predict_fraction", format!("{:?}", self.predict_fraction)),
            ("dropout", format!("{:?}", self.dropout)),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    pub(crate) fn from_pairs(pairs: &BTreeMap<String, String>) -> Result<Self, EncoderError> {
        fn get<T: std::str::FromStr>(p: &BTreeMap<String, String>, k: &str) -> Result<T, EncoderError> {
            p.get(k)
                .ok_or_else(|| EncoderError::Checkpoint(format!("missing config key {k}")))?
                .parse()
                .map_err(|_| EncoderError::Checkpoint(format!("bad value for {k}")))
        }
        let c = EncoderConfig {
            n_layers: get(pairs, "n_layers")?,
            d_model: get(pairs, "d_model")?,
            n_heads: get(pairs, "n_heads")?,
            d_head: get(pairs, "d_head")?,
            d_inner: get(pairs, "d_inner")?,
            max_len: get(pairs, "max_len")?,
            vocab_size: get(pairs, "vocab_size")?,
            mem_len: get(pairs, "mem_len")?,
            predict_fraction: get(pairs, "predict_fraction")?,
            dropout: get(pairs, "dropout")?,
        };
        c.validate()?;
        Ok(c)
    }
}
