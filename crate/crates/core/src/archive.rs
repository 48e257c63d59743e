//! Versioned binary container for named tensors.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes  "MDIFFTNS"
//! version    u32      FORMAT_VERSION
//! count      u32      number of tensors
//! per tensor:
//!   name_len u32, name (UTF-8)
//!   rank     u32, extents (u64 each)
//!   values   f64 x product(extents)
//! meta_len   u32, metadata (UTF-8 key = value lines)
//! ```
//!
//! Checkpoints, datasets, audio inputs and generated motion all use this
//! container.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"MDIFFTNS";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Archive {
    pub tensors: Vec<(String, Tensor)>,
    pub meta: BTreeMap<String, String>,
}

impl Archive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_params(store: &ParamStore) -> Self {
        Self {
            tensors: store
                .iter()
                .map(|p| (p.name().to_string(), p.value().clone()))
                .collect(),
            meta: BTreeMap::new(),
        }
    }

    pub fn to_params(&self) -> Result<ParamStore> {
        let mut store = ParamStore::new();
        for (name, t) in &self.tensors {
            store.add(name.clone(), t.clone())?;
        }
        Ok(store)
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.push((name.into(), t));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::Format(format!("archive has no tensor named {name}")))
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.get(key).map(String::as_str)
    }

    pub fn meta_f64(&self, key: &str) -> Result<f64> {
        self.meta(key)
            .ok_or_else(|| Error::Format(format!("archive metadata lacks {key}")))?
            .parse()
            .map_err(|e| Error::Format(format!("metadata {key}: {e}")))
    }

    pub fn set_meta(&mut self, key: impl Into<String>, value: impl ToString) {
        self.meta.insert(key.into(), value.to_string());
    }

    /// Stores each top-level field of `value` as metadata `prefix.field`,
    /// in TOML value syntax.
    pub fn put_config<T: Serialize>(&mut self, prefix: &str, value: &T) -> Result<()> {
        let table = toml::Table::try_from(value).map_err(|e| Error::Format(format!("{prefix}: {e}")))?;
        for (k, v) in table {
            self.set_meta(format!("{prefix}.{k}"), v);
        }
        Ok(())
    }

    /// Reads back a value stored with [`Archive::put_config`].
    pub fn get_config<T: DeserializeOwned>(&self, prefix: &str) -> Result<T> {
        let head = format!("{prefix}.");
        let doc: String = self
            .meta
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(&head).map(|f| format!("{f} = {v}\n")))
            .collect();
        toml::from_str(&doc).map_err(|e| Error::Format(format!("{prefix} in archive metadata: {e}")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &e in t.shape() {
                out.extend_from_slice(&(e as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let meta: String = self
            .meta
            .iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect();
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(meta.as_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Format("bad magic bytes".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Version {
                found: version,
                supported: FORMAT_VERSION,
            });
        }
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| r.u64().map(|e| e as usize))
                .collect::<Result<Vec<_>>>()?;
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &e| acc.checked_mul(e))
                .filter(|&n| n.checked_mul(8).is_some_and(|b| b <= r.remaining()))
                .ok_or_else(|| Error::Format(format!("tensor {name} extents {shape:?} exceed data")))?;
            let data = r
                .take(n * 8)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| Error::Format(format!("tensor {name}: {e}")))?;
            tensors.push((name, t));
        }
        let meta_len = r.u32()? as usize;
        let text = std::str::from_utf8(r.take(meta_len)?)
            .map_err(|_| Error::Format("metadata is not UTF-8".into()))?;
        let mut meta = BTreeMap::new();
        for line in text.lines() {
            let (k, v) = line
                .split_once(" = ")
                .ok_or_else(|| Error::Format(format!("bad metadata line {line:?}")))?;
            meta.insert(k.to_string(), v.to_string());
        }
        if r.remaining() != 0 {
            return Err(Error::Format(format!("{} trailing bytes", r.remaining())));
        }
        Ok(Self { tensors, meta })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(Error::Format(format!(
                "truncated archive: wanted {n} bytes at offset {}",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let mut a = Archive::new();
        a.push("w", Tensor::new([2], vec![1.0, -0.5]).unwrap());
        let b = a.to_bytes();
        assert_eq!(&b[..8], MAGIC);
        assert_eq!(u32::from_le_bytes(b[8..12].try_into().unwrap()), FORMAT_VERSION);
        assert_eq!(u32::from_le_bytes(b[12..16].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(b[16..20].try_into().unwrap()), 1);
        assert_eq!(b[20], b'w');
        // rank 1, extent 2, two f64 values, empty metadata
        assert_eq!(b.len(), 21 + 4 + 8 + 16 + 4);
    }

    #[test]
    fn unknown_version_is_rejected() {
        let mut b = Archive::new().to_bytes();
        b[8..12].copy_from_slice(&7u32.to_le_bytes());
        assert!(matches!(
            Archive::from_bytes(&b),
            Err(Error::Version { found: 7, .. })
        ));
    }

    #[test]
    fn truncation_is_an_error() {
        let mut a = Archive::new();
        a.push("x", Tensor::full([3, 3], 2.0));
        let b = a.to_bytes();
        assert!(Archive::from_bytes(&b[..b.len() - 5]).is_err());
    }

    proptest! {
        #[test]
        fn bit_exact_roundtrip(
            entries in prop::collection::vec(
                ("[a-z][a-z0-9_.]{0,12}", prop::collection::vec(1usize..4, 1..4), any::<u64>()),
                0..5,
            ),
            meta_val in "[ -~]{0,20}",
        ) {
            let mut a = Archive::new();
            for (i, (name, shape, seed)) in entries.into_iter().enumerate() {
                let n: usize = shape.iter().product();
                // raw bit patterns, excluding NaN payload canonicalization concerns
                let data = (0..n).map(|j| f64::from_bits(seed.wrapping_mul(j as u64 + 1) & !(0x7ffu64 << 52) )).collect();
                a.push(format!("{name}{i}"), Tensor::new(shape, data).unwrap());
            }
            a.set_meta("note", meta_val.trim());
            let bytes = a.to_bytes();
            let back = Archive::from_bytes(&bytes).unwrap();
            prop_assert_eq!(back.to_bytes(), bytes);
            for ((n1, t1), (n2, t2)) in a.tensors.iter().zip(&back.tensors) {
                prop_assert_eq!(n1, n2);
                prop_assert_eq!(t1.shape(), t2.shape());
                for (x, y) in t1.data().iter().zip(t2.data()) {
                    prop_assert_eq!(x.to_bits(), y.to_bits());
                }
            }
        }
    }
}
