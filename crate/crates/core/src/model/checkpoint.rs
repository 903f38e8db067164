//! Binary checkpoint format.
//!
//! ```text
//! "RMCK"                      magic
//! u32 LE                      format version
//! u64 LE + bytes              UTF-8 `key=value` lines (model config, then
//!                             `meta.`-prefixed metadata)
//! u64 LE                      entry count
//! per entry:
//!   u32 LE + bytes            name
//!   u32 LE                    rank
//!   rank x u64 LE             extents
//!   numel x f64 LE            payload
//! ```
//!
//! Parameter values are stored under their own names, prune masks under
//! `<name>#mask`, and the head mask under `head_mask`.

use std::fs;
use std::io::Read;
use std::path::Path;

use super::{ModelConfig, TransformerClassifier};
use crate::error::{Error, Result};
use crate::tensor::{Param, ParamSet, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"RMCK";
pub const CHECKPOINT_VERSION: u32 = 1;
const MASK_SUFFIX: &str = "#mask";
const HEAD_MASK: &str = "head_mask";
const META_PREFIX: &str = "meta.";

/// A model plus free-form string metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: TransformerClassifier,
    pub metadata: Vec<(String, String)>,
}

impl Checkpoint {
    pub fn meta(&self, key: &str) -> Option<&str> {
        self.metadata.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }
}

pub fn save_checkpoint(path: &Path, model: &TransformerClassifier, metadata: &[(String, String)]) -> Result<()> {
    let bytes = encode(model, metadata)?;
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, bytes)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    decode(&fs::read(path)?)
}

fn encode(model: &TransformerClassifier, metadata: &[(String, String)]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());

    let mut kv = String::new();
    for (k, v) in model.config().to_pairs() {
        kv.push_str(&format!("{k}={v}\n"));
    }
    for (k, v) in metadata {
        if k.contains('=') || k.contains('\n') || v.contains('\n') {
            return Err(Error::Input(format!("metadata entry {k:?} cannot be encoded")));
        }
        kv.push_str(&format!("{META_PREFIX}{k}={v}\n"));
    }
    out.extend_from_slice(&(kv.len() as u64).to_le_bytes());
    out.extend_from_slice(kv.as_bytes());

    let mut entries: Vec<(String, &Tensor)> = Vec::new();
    for p in model.params().iter() {
        entries.push((p.name.clone(), &p.value));
        if let Some(mask) = &p.mask {
            entries.push((format!("{}{MASK_SUFFIX}", p.name), mask));
        }
    }
    let cfg = model.config();
    let head_mask = Tensor::new(vec![cfg.num_layers, cfg.num_heads], model.head_masks().to_vec())?;
    entries.push((HEAD_MASK.to_string(), &head_mask));

    out.extend_from_slice(&(entries.len() as u64).to_le_bytes());
    for (name, t) in entries {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &e in t.shape() {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.bytes.len() < n {
            return Err(Error::Format("unexpected end of checkpoint".into()));
        }
        let (head, rest) = self.bytes.split_at(n);
        self.bytes = rest;
        Ok(head)
    }

    fn u32(&mut self) -> Result<u32> {
        let mut buf = [0u8; 4];
        self.take(4)?.read_exact(&mut buf)?;
        Ok(u32::from_le_bytes(buf))
    }

    fn u64(&mut self) -> Result<u64> {
        let mut buf = [0u8; 8];
        self.take(8)?.read_exact(&mut buf)?;
        Ok(u64::from_le_bytes(buf))
    }

    fn len(&mut self, limit: usize) -> Result<usize> {
        let n = self.u64()?;
        usize::try_from(n)
            .ok()
            .filter(|&n| n <= limit)
            .ok_or_else(|| Error::Format(format!("length {n} exceeds remaining {limit} bytes")))
    }
}

fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::Format("bad magic bytes".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let kv_len = r.len(r.bytes.len())?;
    let kv = std::str::from_utf8(r.take(kv_len)?).map_err(|_| Error::Format("config block is not UTF-8".into()))?;
    let mut config_pairs = Vec::new();
    let mut metadata = Vec::new();
    for line in kv.lines() {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("malformed config line {line:?}")))?;
        match k.strip_prefix(META_PREFIX) {
            Some(meta) => metadata.push((meta.to_string(), v.to_string())),
            None => config_pairs.push((k.to_string(), v.to_string())),
        }
    }
    let config = ModelConfig::from_pairs(&config_pairs)?;

    let count = r.len(r.bytes.len())?;
    let mut values: Vec<(String, Tensor)> = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Format("entry name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.len(r.bytes.len())?);
        }
        let numel: usize = shape.iter().product();
        let raw = r.take(
            numel
                .checked_mul(8)
                .ok_or_else(|| Error::Format("payload too large".into()))?,
        )?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        values.push((name, Tensor::new(shape, data)?));
    }
    if !r.bytes.is_empty() {
        return Err(Error::Format("trailing bytes after last entry".into()));
    }

    let mut head_mask = None;
    let mut masks = Vec::new();
    let mut params = ParamSet::new();
    for (name, t) in values {
        if name == HEAD_MASK {
            head_mask = Some(t.into_data());
        } else if let Some(base) = name.strip_suffix(MASK_SUFFIX) {
            masks.push((base.to_string(), t));
        } else {
            params.push(Param::new(name, t));
        }
    }
    for (base, mask) in masks {
        let i = params
            .position(&base)
            .ok_or_else(|| Error::Format(format!("mask for unknown parameter {base}")))?;
        let p = params.get_mut(i);
        if p.value.shape() != mask.shape() {
            return Err(Error::Format(format!("mask shape mismatch for {base}")));
        }
        p.mask = Some(mask);
    }
    let head_mask = head_mask.ok_or_else(|| Error::Format("head_mask entry missing".into()))?;
    let model = TransformerClassifier::from_parts(config, params, head_mask)?;
    Ok(Checkpoint { model, metadata })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut m = TransformerClassifier::new(ModelConfig {
            num_layers: 2,
            ..ModelConfig::default()
        })
        .unwrap();
        m.set_head_mask(1, 3, 0.0);
        let i = m.maskable_params()[2];
        let p = m.params_mut().get_mut(i);
        p.mask.as_mut().unwrap().data_mut()[5] = 0.0;
        p.apply_mask();
        let meta = vec![("config_hash".to_string(), "abc123".to_string())];
        let bytes = encode(&m, &meta).unwrap();
        let back = decode(&bytes).unwrap();
        assert_eq!(back.model, m);
        assert_eq!(back.meta("config_hash"), Some("abc123"));
        for (a, b) in m.params().iter().zip(back.model.params().iter()) {
            let bits_a: Vec<u64> = a.value.data().iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u64> = b.value.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits_a, bits_b);
        }
        assert_eq!(encode(&back.model, &back.metadata).unwrap(), bytes);
    }

    #[test]
    fn header_layout() {
        let m = TransformerClassifier::new(ModelConfig {
            num_layers: 1,
            ..ModelConfig::default()
        })
        .unwrap();
        let bytes = encode(&m, &[]).unwrap();
        assert_eq!(&bytes[..4], b"RMCK");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), CHECKPOINT_VERSION);
        let kv_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let kv = std::str::from_utf8(&bytes[16..16 + kv_len]).unwrap();
        assert!(kv.starts_with("vocab_size=64\n"));
    }

    #[test]
    fn damaged_files_are_rejected() {
        let m = TransformerClassifier::new(ModelConfig {
            num_layers: 1,
            ..ModelConfig::default()
        })
        .unwrap();
        let bytes = encode(&m, &[]).unwrap();
        assert!(decode(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad), Err(Error::Format(_))));
    }
}
