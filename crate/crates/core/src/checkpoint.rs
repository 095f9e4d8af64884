//! Binary checkpoint container.
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! magic      4 bytes  "TSVK"
//! version    u32      1
//! meta_len   u32      byte length of the metadata block
//! meta       UTF-8    "key=value\n" lines, keys sorted
//! n_records  u32
//! record*    kind u8 (0 parameter, 1 batch-norm stats, 2 batch-norm stats not yet initialised)
//!            name_len u32, name UTF-8
//!            ndim u32, dims u64 * ndim
//!            values f64 * prod(dims)      (row-major; bn records are [2, C] = mean ++ var)
//!            crc32 u32                    (IEEE, over every preceding byte of the record)
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::network::{SeNetConfig, SeNetwork};
use crate::params::{BnStats, ParameterStore};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"TSVK";
pub const VERSION: u32 = 1;

const KIND_PARAM: u8 = 0;
const KIND_BN: u8 = 1;
const KIND_BN_UNINIT: u8 = 2;

pub type Metadata = BTreeMap<String, String>;

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn encode_record(out: &mut Vec<u8>, kind: u8, name: &str, shape: &[usize], values: impl Iterator<Item = f64>) {
    let start = out.len();
    out.push(kind);
    put_u32(out, name.len() as u32);
    out.extend_from_slice(name.as_bytes());
    put_u32(out, shape.len() as u32);
    for &d in shape {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let crc = crc32fast::hash(&out[start..]);
    put_u32(out, crc);
}

pub fn encode(store: &ParameterStore, meta: &Metadata) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    let meta_text: String = meta.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
    put_u32(&mut out, meta_text.len() as u32);
    out.extend_from_slice(meta_text.as_bytes());
    put_u32(&mut out, (store.len() + store.bn_layers().count()) as u32);
    for p in store.params() {
        encode_record(&mut out, KIND_PARAM, &p.name, p.value.shape(), p.value.data().iter().copied());
    }
    for (name, st) in store.bn_layers() {
        let kind = if st.initialized { KIND_BN } else { KIND_BN_UNINIT };
        let values = st.mean.iter().chain(&st.var).copied();
        encode_record(&mut out, kind, name, &[2, st.mean.len()], values);
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self, n: usize) -> Result<String> {
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("invalid UTF-8".into()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<(ParameterStore, Metadata)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let meta_len = r.u32()? as usize;
    let meta_text = r.string(meta_len)?;
    let mut meta = Metadata::new();
    for line in meta_text.lines() {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Checkpoint(format!("bad metadata line '{line}'")))?;
        meta.insert(k.to_string(), v.to_string());
    }
    let n_records = r.u32()?;
    let mut store = ParameterStore::new();
    for _ in 0..n_records {
        let start = r.pos;
        let kind = r.take(1)?[0];
        let name_len = r.u32()? as usize;
        let name = r.string(name_len)?;
        let ndim = r.u32()? as usize;
        let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let values = (0..n)
            .map(|_| r.u64().map(f64::from_bits))
            .collect::<Result<Vec<_>>>()?;
        let computed = crc32fast::hash(&bytes[start..r.pos]);
        let stored = r.u32()?;
        if computed != stored {
            return Err(Error::Checkpoint(format!("CRC mismatch in record '{name}'")));
        }
        match kind {
            KIND_PARAM => {
                store.add(name, Tensor::new(shape, values)?)?;
            }
            KIND_BN | KIND_BN_UNINIT => {
                let [2, c] = shape[..] else {
                    return Err(Error::Checkpoint(format!("bn record '{name}' has shape {shape:?}")));
                };
                store.add_bn(name.clone(), c);
                let st = store.bn_stats_mut(&name).expect("just added");
                *st = BnStats {
                    mean: values[..c].to_vec(),
                    var: values[c..].to_vec(),
                    initialized: kind == KIND_BN,
                };
            }
            other => return Err(Error::Checkpoint(format!("unknown record kind {other}"))),
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes after last record".into()));
    }
    Ok((store, meta))
}

pub fn save(path: &Path, store: &ParameterStore, meta: &Metadata) -> Result<()> {
    std::fs::write(path, encode(store, meta)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<(ParameterStore, Metadata)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ParameterStore {
        let mut s = ParameterStore::new();
        s.add("a.weight", Tensor::new(vec![2, 3], vec![1.0, -2.5, 3.0, 0.0, 1e-300, -0.0]).unwrap())
            .unwrap();
        s.add("a.bias", Tensor::vector(vec![0.25])).unwrap();
        s.add_bn("a.bn", 2);
        s.bn_stats_mut("a.bn").unwrap().update(&[0.5, 1.5], &[2.0, 3.0], 0.9);
        s.add_bn("b.bn", 1);
        s
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let s = sample();
        let mut meta = Metadata::new();
        meta.insert("config_hash".into(), "abc123".into());
        let bytes = encode(&s, &meta);
        let (back, meta2) = decode(&bytes).unwrap();
        assert_eq!(meta, meta2);
        assert_eq!(encode(&back, &meta2), bytes);
        assert_eq!(back.bn_stats("a.bn").unwrap().mean, vec![0.5, 1.5]);
        assert!(!back.bn_stats("b.bn").unwrap().initialized);
        assert_eq!(back.by_name("a.weight").unwrap().data()[5].to_bits(), (-0.0f64).to_bits());
    }

    #[test]
    fn corruption_detected() {
        let bytes = encode(&sample(), &Metadata::new());
        let mut bad = bytes.clone();
        let last = bad.len() - 20;
        bad[last] ^= 0x01;
        assert!(matches!(decode(&bad), Err(Error::Checkpoint(m)) if m.contains("CRC")));
        assert!(decode(&bytes[..bytes.len() - 3]).is_err());
        let mut wrong_magic = bytes;
        wrong_magic[0] = b'X';
        assert!(decode(&wrong_magic).is_err());
    }
}

pub const META_KIND: &str = "kind";
pub const META_NETWORK: &str = "network";
pub const META_HEAD: &str = "head";
pub const META_HASH: &str = "config_hash";

/// Saves an embedding network with its configuration in the metadata.
pub fn save_network(path: &Path, store: &ParameterStore, net: &SeNetConfig, hash: &str) -> Result<()> {
    let mut meta = Metadata::new();
    meta.insert(META_KIND.into(), "embedding".into());
    meta.insert(META_NETWORK.into(), serde_json::to_string(net).expect("serialisable"));
    meta.insert(META_HASH.into(), hash.into());
    save(path, store, &meta)
}

pub fn load_network(path: &Path) -> Result<(SeNetwork, ParameterStore, Metadata)> {
    let (store, meta) = load(path)?;
    let net_json = meta
        .get(META_NETWORK)
        .ok_or_else(|| Error::Checkpoint(format!("{}: no network configuration", path.display())))?;
    let cfg: SeNetConfig =
        serde_json::from_str(net_json).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    Ok((SeNetwork::new(cfg)?, store, meta))
}
