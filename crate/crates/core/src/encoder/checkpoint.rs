//! Encoder checkpoints: parameters, config and training provenance.
//!
//! The vocabulary is stored next to the checkpoint as `<file>.vocab`; the
//! checkpoint records its SHA-256 and refuses to load a mismatched one.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use super::{Encoder, EncoderConfig, EncoderError};
use crate::container::Container;
use crate::numerics::{ParamSet, Tensor};
use crate::text::Vocabulary;

pub const ENCODER_MAGIC: &[u8; 5] = b"CXLN1";

const RESERVED_KEYS: [&str; 3] = ["step", "seed", "vocab_sha256"];

#[derive(Debug, Clone)]
pub struct EncoderCheckpoint {
    pub encoder: Encoder,
    pub vocab: Vocabulary,
    pub step: u64,
    pub seed: u64,
    /// Extra named tensors stored alongside the encoder (e.g. a task head).
    pub extras: Vec<(String, Tensor)>,
    /// Extra config entries; keys must not collide with encoder fields.
    pub metadata: BTreeMap<String, String>,
}

pub(crate) fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl EncoderCheckpoint {
    pub fn new(encoder: Encoder, vocab: Vocabulary, step: u64, seed: u64) -> Self {
        EncoderCheckpoint {
            encoder,
            vocab,
            step,
            seed,
            extras: Vec::new(),
            metadata: BTreeMap::new(),
        }
    }

    pub fn vocab_path(path: &Path) -> PathBuf {
        let mut s = path.as_os_str().to_owned();
        s.push(".vocab");
        PathBuf::from(s)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut config: BTreeMap<String, String> = self.encoder.config().to_pairs().into_iter().collect();
        config.extend(self.metadata.clone());
        config.insert("step".into(), self.step.to_string());
        config.insert("seed".into(), self.seed.to_string());
        config.insert(
            "vocab_sha256".into(),
            sha256_hex(self.vocab.to_file_string().as_bytes()),
        );
        let mut records: Vec<(String, Tensor)> = self
            .encoder
            .params()
            .iter()
            .map(|(_, name, t)| (name.to_string(), t.clone()))
            .collect();
        records.extend(self.extras.iter().cloned());
        Container { config, records }.to_bytes(ENCODER_MAGIC)
    }

    pub fn from_bytes(bytes: &[u8], vocab: Vocabulary) -> Result<Self, EncoderError> {
        let c = Container::from_bytes(bytes, ENCODER_MAGIC)?;
        let get = |k: &str| -> Result<&String, EncoderError> {
            c.config
                .get(k)
                .ok_or_else(|| EncoderError::Checkpoint(format!("missing config key {k}")))
        };
        let want = get("vocab_sha256")?;
        let have = sha256_hex(vocab.to_file_string().as_bytes());
        if *want != have {
            return Err(EncoderError::Checkpoint(format!(
                "vocabulary digest {have} does not match checkpoint {want}"
            )));
        }
        let parse_u64 = |k: &str| -> Result<u64, EncoderError> {
            get(k)?
                .parse()
                .map_err(|_| EncoderError::Checkpoint(format!("bad value for {k}")))
        };
        let step = parse_u64("step")?;
        let seed = parse_u64("seed")?;
        let config = EncoderConfig::from_pairs(&c.config)?;
        if config.vocab_size != vocab.len() {
            return Err(EncoderError::Checkpoint(format!(
                "vocab_size {} but vocabulary has {} entries",
                config.vocab_size,
                vocab.len()
            )));
        }
        let encoder_names: std::collections::HashSet<String> =
            Encoder::parameter_shapes(&config).into_iter().map(|(n, _)| n).collect();
        let mut params = ParamSet::new();
        let mut extras = Vec::new();
        for (name, t) in c.records {
            if encoder_names.contains(&name) {
                params.insert(name, t)?;
            } else {
                extras.push((name, t));
            }
        }
        let encoder = Encoder::from_params(config.clone(), params)?;
        let config_keys: std::collections::HashSet<String> = config.to_pairs().into_iter().map(|(k, _)| k).collect();
        let metadata = c
            .config
            .into_iter()
            .filter(|(k, _)| !config_keys.contains(k) && !RESERVED_KEYS.contains(&k.as_str()))
            .collect();
        Ok(EncoderCheckpoint {
            encoder,
            vocab,
            step,
            seed,
            extras,
            metadata,
        })
    }

    /// SHA-256 of the serialized checkpoint.
    pub fn digest(&self) -> String {
        sha256_hex(&self.to_bytes())
    }

    /// Writes the checkpoint and its vocabulary file.
    pub fn save(&self, path: &Path) -> Result<(), EncoderError> {
        std::fs::write(path, self.to_bytes())?;
        self.vocab.save(&Self::vocab_path(path))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, EncoderError> {
        let vocab = Vocabulary::load(&Self::vocab_path(path))?;
        Self::from_bytes(&std::fs::read(path)?, vocab)
    }

    pub fn extra(&self, name: &str) -> Option<&Tensor> {
        self.extras.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture() -> EncoderCheckpoint {
        let vocab = Vocabulary::build(["pt on vent , sats ok"], 1, 100).unwrap();
        let config = EncoderConfig {
            n_layers: 1,
            d_model: 8,
            n_heads: 2,
            d_head: 4,
            d_inner: 8,
            vocab_size: vocab.len(),
            ..EncoderConfig::default()
        };
        EncoderCheckpoint::new(Encoder::init(config, 11).unwrap(), vocab, 5, 11)
    }

    #[test]
    fn round_trip_is_bitwise() {
        let mut ck = fixture();
        ck.extras.push(("meta_head.b".into(), Tensor::scalar(0.25)));
        ck.metadata.insert("task".into(), "pmv".into());
        let bytes = ck.to_bytes();
        let back = EncoderCheckpoint::from_bytes(&bytes, ck.vocab.clone()).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.step, 5);
        assert_eq!(back.metadata.get("task").map(String::as_str), Some("pmv"));
        assert_eq!(back.extra("meta_head.b").unwrap().item(), 0.25);
    }

    #[test]
    fn save_and_load_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("enc.ckpt");
        let ck = fixture();
        ck.save(&path).unwrap();
        let back = EncoderCheckpoint::load(&path).unwrap();
        assert_eq!(back.to_bytes(), ck.to_bytes());
    }

    #[test]
    fn rejects_foreign_vocabulary() {
        let ck = fixture();
        let other = Vocabulary::build(["pt off vent , sats ok"], 1, 100).unwrap();
        assert!(matches!(
            EncoderCheckpoint::from_bytes(&ck.to_bytes(), other),
            Err(EncoderError::Checkpoint(_))
        ));
    }
}
