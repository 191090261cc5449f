//! Named parameter arrays and the checkpoint container.
//!
//! Checkpoint layout (little-endian):
//!
//! ```text
//! "BDLC" | u16 version | u32 entry count
//! per entry: u32 name length | utf-8 name | u32 rank | rank x u32 dims | f64 data
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"BDLC";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Param {
    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }
}

/// Parameters keyed by dotted name, iterated in sorted order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, param: Param) {
        self.entries.insert(name.into(), param);
    }

    pub fn get(&self, name: &str) -> Result<&Param> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter {name:?}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("missing parameter {name:?}")))
    }

    pub fn data(&self, name: &str) -> Result<&[f64]> {
        Ok(&self.get(name)?.data)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.entries.values().map(|p| p.data.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param)> {
        self.entries.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .map(|(k, p)| (k.clone(), Param::zeros(p.shape.clone())))
                .collect(),
        }
    }

    /// Adds `values` into the entry `name`, which must already exist with that length.
    pub fn accumulate(&mut self, name: &str, values: &[f64]) -> Result<()> {
        let p = self.get_mut(name)?;
        if p.data.len() != values.len() {
            return Err(Error::ShapeMismatch(format!(
                "gradient for {name} has {} values, parameter has {}",
                values.len(),
                p.data.len()
            )));
        }
        for (a, b) in p.data.iter_mut().zip(values) {
            *a += b;
        }
        Ok(())
    }

    /// Copies every entry of `source` whose name and shape match one here.
    /// Returns the names copied.
    pub fn inherit_from(&mut self, source: &ParamStore) -> Vec<String> {
        let mut copied = Vec::new();
        for (name, p) in self.entries.iter_mut() {
            if let Some(src) = source.entries.get(name) {
                if src.shape == p.shape {
                    p.data.clone_from(&src.data);
                    copied.push(name.clone());
                }
            }
        }
        copied
    }

    pub fn all_finite(&self) -> bool {
        self.entries.values().all(|p| p.data.iter().all(|v| v.is_finite()))
    }

    pub fn bit_eq(&self, other: &ParamStore) -> bool {
        self.entries.len() == other.entries.len()
            && self.entries.iter().zip(&other.entries).all(|((ka, a), (kb, b))| {
                ka == kb
                    && a.shape == b.shape
                    && a.data.iter().zip(&b.data).all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, p) in &self.entries {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.extend_from_slice(&(p.shape.len() as u32).to_le_bytes());
            for d in &p.shape {
                buf.extend_from_slice(&(*d as u32).to_le_bytes());
            }
            for v in &p.data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0usize;
        let mut take = |n: usize| -> Result<(usize, &[u8])> {
            if bytes.len() - pos < n {
                return Err(Error::Parse {
                    offset: pos,
                    message: format!("truncated checkpoint: need {n} bytes"),
                });
            }
            let at = pos;
            pos += n;
            Ok((at, &bytes[at..at + n]))
        };
        let (_, magic) = take(4)?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::Parse {
                offset: 0,
                message: "bad checkpoint magic".into(),
            });
        }
        let (at, v) = take(2)?;
        let version = u16::from_le_bytes(v.try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(Error::Parse {
                offset: at,
                message: format!("unsupported checkpoint version {version}"),
            });
        }
        let read_u32 = |s: &[u8]| u32::from_le_bytes(s.try_into().unwrap()) as usize;
        let count = read_u32(take(4)?.1);
        let mut store = ParamStore::new();
        for _ in 0..count {
            let name_len = read_u32(take(4)?.1);
            let (at, raw) = take(name_len)?;
            let name = std::str::from_utf8(raw)
                .map_err(|_| Error::Parse {
                    offset: at,
                    message: "parameter name is not utf-8".into(),
                })?
                .to_string();
            let rank = read_u32(take(4)?.1);
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(read_u32(take(4)?.1));
            }
            let n: usize = shape.iter().product();
            let (_, raw) = take(n.checked_mul(8).ok_or_else(|| Error::Parse {
                offset: at,
                message: "parameter too large".into(),
            })?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            store.insert(name, Param { shape, data });
        }
        if pos != bytes.len() {
            return Err(Error::Parse {
                offset: pos,
                message: "trailing bytes after checkpoint".into(),
            });
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ParamStore {
        let mut s = ParamStore::new();
        s.insert(
            "a.weight",
            Param {
                shape: vec![2, 3],
                data: vec![1.0, -2.0, 3.5, f64::MIN_POSITIVE, -0.0, 1e300],
            },
        );
        s.insert(
            "b.bias",
            Param {
                shape: vec![1],
                data: vec![0.25],
            },
        );
        s
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let s = sample();
        let back = ParamStore::from_bytes(&s.to_bytes()).unwrap();
        assert!(s.bit_eq(&back));
    }

    #[test]
    fn truncated_checkpoint() {
        let bytes = sample().to_bytes();
        for cut in [0, 5, 12, bytes.len() - 3] {
            assert!(matches!(
                ParamStore::from_bytes(&bytes[..cut]),
                Err(Error::Parse { .. })
            ));
        }
    }

    #[test]
    fn inherit_copies_matching_shapes_only() {
        let src = sample();
        let mut dst = ParamStore::new();
        dst.insert("a.weight", Param::zeros(vec![2, 3]));
        dst.insert("b.bias", Param::zeros(vec![2]));
        dst.insert("c.only", Param::zeros(vec![1]));
        let copied = dst.inherit_from(&src);
        assert_eq!(copied, vec!["a.weight".to_string()]);
        assert_eq!(dst.data("a.weight").unwrap()[2], 3.5);
        assert_eq!(dst.data("b.bias").unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn accumulate_checks_length() {
        let mut s = sample();
        s.accumulate("b.bias", &[0.75]).unwrap();
        assert_eq!(s.data("b.bias").unwrap(), &[1.0]);
        assert!(s.accumulate("b.bias", &[1.0, 2.0]).is_err());
        assert!(s.accumulate("missing", &[1.0]).is_err());
    }
}
