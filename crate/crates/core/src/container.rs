//! Binary parameter container shared by encoder and aggregator checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic            5 bytes
//! config_len       u32, then config_len bytes of UTF-8 `key=value` lines
//! n_records        u32
//! per record:
//!   name_len       u32, then name bytes (UTF-8)
//!   rank           u32, then rank x u64 extents
//!   data           prod(extents) x f64
//! ```

use std::collections::BTreeMap;

use thiserror::Error;

use crate::numerics::Tensor;

#[derive(Debug, Error)]
pub enum ContainerError {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },
    #[error("truncated container at byte {0}")]
    Truncated(usize),
    #[error("config block: {0}")]
    BadConfig(String),
    #[error("record {name}: {reason}")]
    BadRecord { name: String, reason: String },
    #[error("duplicate record {0}")]
    DuplicateRecord(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub config: BTreeMap<String, String>,
    pub records: Vec<(String, Tensor)>,
}

impl Container {
    pub fn to_bytes(&self, magic: &[u8; 5]) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(magic);
        let mut cfg = String::new();
        for (k, v) in &self.config {
            cfg.push_str(k);
            cfg.push('=');
            cfg.push_str(v);
            cfg.push('\n');
        }
        out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
        out.extend_from_slice(cfg.as_bytes());
        out.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        for (name, t) in &self.records {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], magic: &[u8; 5]) -> Result<Self, ContainerError> {
        let mut r = Reader { bytes, pos: 0 };
        let found = r.take(5)?;
        if found != magic {
            return Err(ContainerError::BadMagic {
                expected: String::from_utf8_lossy(magic).into_owned(),
                found: String::from_utf8_lossy(found).into_owned(),
            });
        }
        let cfg_len = r.u32()? as usize;
        let cfg = std::str::from_utf8(r.take(cfg_len)?).map_err(|e| ContainerError::BadConfig(e.to_string()))?;
        let mut config = BTreeMap::new();
        for line in cfg.lines().filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| ContainerError::BadConfig(format!("line without '=': {line}")))?;
            config.insert(k.to_string(), v.to_string());
        }
        let n = r.u32()? as usize;
        let mut records: Vec<(String, Tensor)> = Vec::with_capacity(n.min(4096));
        let mut seen = std::collections::HashSet::new();
        for _ in 0..n {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|e| ContainerError::BadRecord {
                name: "?".into(),
                reason: e.to_string(),
            })?;
            if !seen.insert(name.clone()) {
                return Err(ContainerError::DuplicateRecord(name));
            }
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>, _>>()?;
            let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let numel = numel.ok_or_else(|| ContainerError::BadRecord {
                name: name.clone(),
                reason: "extent overflow".into(),
            })?;
            let raw = r.take(numel.checked_mul(8).ok_or(ContainerError::Truncated(r.pos))?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| ContainerError::BadRecord {
                name: name.clone(),
                reason: e.to_string(),
            })?;
            records.push((name, t));
        }
        if r.pos != bytes.len() {
            return Err(ContainerError::BadConfig(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        Ok(Container { config, records })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ContainerError> {
        let end = self.pos.checked_add(n).ok_or(ContainerError::Truncated(self.pos))?;
        if end > self.bytes.len() {
            return Err(ContainerError::Truncated(self.pos));
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, ContainerError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, ContainerError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
