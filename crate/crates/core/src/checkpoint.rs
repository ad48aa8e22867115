//! Binary parameter snapshots.
//!
//! Layout: the ASCII line `FRAMEATTN v1\n`, a `u32` record count, then one
//! record per tensor:
//! `u32` name length, UTF-8 name, `u32` rank, `rank` × `u64` extents and
//! the `f64` payload. All integers and floats are little-endian.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &str = "FRAMEATTN";
pub const VERSION: &str = "v1";

pub fn encode(store: &ParamStore) -> Vec<u8> {
    let mut out = format!("{MAGIC} {VERSION}\n").into_bytes();
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for p in store.iter() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.extend_from_slice(&(p.tensor.rank() as u32).to_le_bytes());
        for &e in p.tensor.shape() {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for v in p.tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }
}

/// Parses a snapshot. Nothing is returned unless every record is intact.
pub fn decode(bytes: &[u8]) -> Result<ParamStore> {
    let newline = bytes.iter().position(|&b| b == b'\n');
    let header = newline
        .and_then(|n| std::str::from_utf8(&bytes[..n]).ok())
        .ok_or_else(|| Error::Format {
            record: "header".into(),
            message: "missing header line".into(),
        })?;
    match header.split_once(' ') {
        Some((MAGIC, VERSION)) => {}
        Some((MAGIC, other)) => {
            return Err(Error::Incompatible(format!(
                "checkpoint version `{other}`, this build reads `{VERSION}`"
            )))
        }
        _ => {
            return Err(Error::Format {
                record: "header".into(),
                message: format!("expected `{MAGIC} {VERSION}`, found `{header}`"),
            })
        }
    }

    let mut r = Reader {
        bytes,
        pos: newline.unwrap() + 1,
    };
    let count = r.u32().ok_or_else(|| Error::Format {
        record: "header".into(),
        message: "truncated record count".into(),
    })?;
    let mut store = ParamStore::new();
    for index in 0..count {
        let mut name = format!("#{index}");
        let truncated = |name: &str, what: &str| Error::Format {
            record: name.to_string(),
            message: format!("truncated {what}"),
        };
        let len = r.u32().ok_or_else(|| truncated(&name, "name length"))? as usize;
        let raw = r.take(len).ok_or_else(|| truncated(&name, "name"))?;
        name = String::from_utf8(raw.to_vec()).map_err(|_| Error::Format {
            record: name.clone(),
            message: "name is not UTF-8".into(),
        })?;
        let rank = r.u32().ok_or_else(|| truncated(&name, "rank"))? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(r.u64().ok_or_else(|| truncated(&name, "extents"))? as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &e| acc.checked_mul(e))
            .filter(|n| n.checked_mul(8).is_some())
            .ok_or_else(|| Error::Format {
                record: name.clone(),
                message: format!("implausible extents {shape:?}"),
            })?;
        let payload = r.take(numel * 8).ok_or_else(|| truncated(&name, "payload"))?;
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let tensor = Tensor::new(shape, data).map_err(|e| Error::Format {
            record: name.clone(),
            message: e.to_string(),
        })?;
        store.add(name, tensor, false);
    }
    if r.pos != bytes.len() {
        return Err(Error::Format {
            record: "trailer".into(),
            message: format!("{} unexpected bytes after the last record", bytes.len() - r.pos),
        });
    }
    Ok(store)
}

pub fn save(store: &ParamStore, path: &Path) -> Result<()> {
    fs::write(path, encode(store)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<ParamStore> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

/// Loads a snapshot into `store`, which must hold identically named and
/// shaped tensors.
pub fn load_into(store: &mut ParamStore, path: &Path) -> Result<()> {
    store.copy_values_from(&load(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Model, ModelConfig};

    fn small() -> (Model, ParamStore) {
        let cfg = ModelConfig {
            window: 8,
            d_model: 4,
            heads: 2,
            experts: 2,
            classes: 3,
            conv_blocks: 1,
            kernel: 3,
            ..ModelConfig::default()
        };
        Model::new(cfg, 5).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let (model, store) = small();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save(&store, &path).unwrap();
        let (_, mut fresh) = Model::new(model.config().clone(), 99).unwrap();
        assert_ne!(fresh, store);
        load_into(&mut fresh, &path).unwrap();
        for (a, b) in fresh.iter().zip(store.iter()) {
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.tensor), bits(&b.tensor));
            assert_eq!(a.decay, b.decay);
        }

        let frame = crate::data::Frame {
            data: (0..24).map(|i| (i as f64 * 0.37).sin()).collect(),
            window: 8,
            channels: 3,
            label: 0,
            chrono_index: 0,
            session_id: "s".into(),
            start: 0,
        };
        let logits = |s: &ParamStore| model.logits(s, &[&frame, &frame]).unwrap();
        assert_eq!(logits(&store), logits(&fresh));
        assert_eq!(encode(&fresh), encode(&store));
    }

    #[test]
    fn header_layout() {
        let (_, store) = small();
        let bytes = encode(&store);
        assert!(bytes.starts_with(b"FRAMEATTN v1\n"));
        let first = store.iter().next().unwrap();
        let n = u32::from_le_bytes(bytes[17..21].try_into().unwrap()) as usize;
        assert_eq!(&bytes[21..21 + n], first.name.as_bytes());
        assert_eq!(u32::from_le_bytes(bytes[13..17].try_into().unwrap()) as usize, store.len());
    }

    #[test]
    fn every_truncation_is_rejected() {
        let (_, store) = small();
        let bytes = encode(&store);
        for cut in 0..bytes.len() {
            let r = decode(&bytes[..cut]);
            assert!(matches!(r, Err(Error::Format { .. })), "cut {cut}: {r:?}");
        }
    }

    #[test]
    fn truncation_names_the_record() {
        let (_, store) = small();
        let bytes = encode(&store);
        let last = store.iter().last().unwrap().name.clone();
        match decode(&bytes[..bytes.len() - 3]) {
            Err(Error::Format { record, message }) => {
                assert_eq!(record, last);
                assert!(message.contains("payload"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn version_mismatch_is_incompatible() {
        let (_, store) = small();
        let mut bytes = encode(&store);
        bytes[11] = b'9';
        assert!(matches!(decode(&bytes), Err(Error::Incompatible(_))));
        assert!(matches!(decode(b"PYTORCH\n"), Err(Error::Format { .. })));
    }

    #[test]
    fn shape_mismatch_on_load_is_incompatible() {
        let (_, store) = small();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save(&store, &path).unwrap();
        let cfg = ModelConfig {
            classes: 5,
            ..small().0.config().clone()
        };
        let (_, mut other) = Model::new(cfg, 0).unwrap();
        assert!(matches!(load_into(&mut other, &path), Err(Error::Incompatible(_))));
    }
}
