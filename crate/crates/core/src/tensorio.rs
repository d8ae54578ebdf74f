//! The `TSV1` named-tensor container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "TSV1"  u32 count
//! count × { u32 name_len, name bytes (UTF-8), u32 rank, u32 dims[rank],
//!           u64 byte_len, byte_len bytes of f32 data }
//! ```
//!
//! Entries are written in lexicographic name order, so equal maps encode to
//! identical bytes.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"TSV1";

#[derive(Debug, Clone, PartialEq)]
pub struct TensorEntry {
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl TensorEntry {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let e = Self { dims, data };
        e.validate("<new>")?;
        Ok(e)
    }

    fn validate(&self, name: &str) -> Result<()> {
        if self.dims.iter().any(|&d| d == 0) {
            return Err(Error::Container(format!("tensor {name:?} has a zero dimension")));
        }
        let n: usize = self.dims.iter().product();
        if n != self.data.len() {
            return Err(Error::Container(format!(
                "tensor {name:?}: dims {:?} imply {n} elements, found {}",
                self.dims,
                self.data.len()
            )));
        }
        Ok(())
    }

    /// Bitwise equality, distinguishing NaN payloads and signed zeros.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.dims == other.dims
            && self.data.len() == other.data.len()
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// Named tensors, kept in lexicographic name order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorMap {
    entries: BTreeMap<String, TensorEntry>,
}

impl TensorMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, dims: Vec<usize>, data: Vec<f32>) -> Result<()> {
        let name = name.into();
        let entry = TensorEntry { dims, data };
        entry.validate(&name)?;
        if self.entries.contains_key(&name) {
            return Err(Error::DuplicateName(name));
        }
        self.entries.insert(name, entry);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&TensorEntry> {
        self.entries.get(name)
    }

    /// Looks up `name`, failing unless its dims equal `dims`.
    pub fn require(&self, name: &str, dims: &[usize]) -> Result<&TensorEntry> {
        let e = self
            .entries
            .get(name)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))?;
        if e.dims != dims {
            return Err(Error::Shape(format!(
                "tensor {name:?} has dims {:?}, expected {dims:?}",
                e.dims
            )));
        }
        Ok(e)
    }

    pub fn remove(&mut self, name: &str) -> Option<TensorEntry> {
        self.entries.remove(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &TensorEntry)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn bit_eq(&self, other: &Self) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((ka, va), (kb, vb))| ka == kb && va.bit_eq(vb))
    }
}

pub fn encode(map: &TensorMap) -> Vec<u8> {
    let payload: usize = map
        .entries
        .iter()
        .map(|(k, v)| 16 + k.len() + 4 * v.dims.len() + 4 * v.data.len())
        .sum();
    let mut out = Vec::with_capacity(8 + payload);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(map.entries.len() as u32).to_le_bytes());
    for (name, e) in &map.entries {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(e.dims.len() as u32).to_le_bytes());
        for &d in &e.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.extend_from_slice(&((e.data.len() * 4) as u64).to_le_bytes());
        for v in &e.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| {
                Error::Truncated(format!(
                    "{what}: need {n} bytes at offset {}, file has {}",
                    self.pos,
                    self.buf.len()
                ))
            })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<TensorMap> {
    if bytes.len() < 4 {
        return Err(Error::Truncated("missing magic".into()));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::BadMagic {
            found: bytes[..4].try_into().expect("4 bytes"),
        });
    }
    let mut r = Reader { buf: bytes, pos: 4 };
    let count = r.u32("entry count")?;
    let mut map = TensorMap::new();
    for _ in 0..count {
        let name_len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|_| Error::Container("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32("rank")? as usize;
        let dims = (0..rank)
            .map(|_| r.u32("dims").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let byte_len = r.u64("byte length")?;
        if byte_len % 4 != 0 {
            return Err(Error::Container(format!(
                "tensor {name:?}: byte length {byte_len} is not a multiple of 4"
            )));
        }
        let raw = r.take(
            usize::try_from(byte_len).map_err(|_| Error::Truncated("payload too large".into()))?,
            "payload",
        )?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        map.insert(name, dims, data)?;
    }
    if r.pos != bytes.len() {
        return Err(Error::Container(format!(
            "{} trailing bytes after last entry",
            bytes.len() - r.pos
        )));
    }
    Ok(map)
}

pub fn read_container(path: &Path) -> Result<TensorMap> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

pub fn write_container(path: &Path, map: &TensorMap) -> Result<()> {
    fs::write(path, encode(map)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn one_entry() -> TensorMap {
        let mut m = TensorMap::new();
        m.insert("w", vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        m
    }

    #[test]
    fn minimal_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.tsv1");
        write_container(&p, &one_entry()).unwrap();
        let back = read_container(&p).unwrap();
        assert_eq!(back.len(), 1);
        assert_eq!(back.get("w").unwrap().data, vec![1.0, 2.0, 3.0, 4.0]);
        assert!(back.bit_eq(&one_entry()));
    }

    #[test]
    fn empty_map_is_header_only() {
        assert_eq!(encode(&TensorMap::new()), b"TSV1\0\0\0\0".to_vec());
    }

    #[test]
    fn entries_are_written_in_name_order() {
        let mut m = TensorMap::new();
        m.insert("zeta", vec![1], vec![1.0]).unwrap();
        m.insert("alpha", vec![1], vec![2.0]).unwrap();
        let bytes = encode(&m);
        let a = bytes.windows(5).position(|w| w == b"alpha").unwrap();
        let z = bytes.windows(4).position(|w| w == b"zeta").unwrap();
        assert!(a < z);
        assert_eq!(bytes, encode(&m.clone()));
    }

    #[test]
    fn exact_layout() {
        let bytes = encode(&one_entry());
        let mut expected = b"TSV1".to_vec();
        expected.extend(1u32.to_le_bytes());
        expected.extend(1u32.to_le_bytes());
        expected.extend(b"w");
        expected.extend(2u32.to_le_bytes());
        expected.extend(2u32.to_le_bytes());
        expected.extend(2u32.to_le_bytes());
        expected.extend(16u64.to_le_bytes());
        for v in [1f32, 2.0, 3.0, 4.0] {
            expected.extend(v.to_le_bytes());
        }
        assert_eq!(bytes, expected);
    }

    #[test]
    fn rejects_malformed_files() {
        let good = encode(&one_entry());

        let mut bad = good.clone();
        bad[..4].copy_from_slice(b"XXXX");
        assert!(matches!(decode(&bad), Err(Error::BadMagic { .. })));

        assert!(matches!(decode(&good[..good.len() - 1]), Err(Error::Truncated(_))));

        let mut trailing = good.clone();
        trailing.push(0);
        assert!(matches!(decode(&trailing), Err(Error::Container(_))));

        // dims [2,2] but 3 floats of payload
        let mut mismatch = good[..good.len() - 4].to_vec();
        let len_at = mismatch.len() - 12 - 8;
        mismatch[len_at..len_at + 8].copy_from_slice(&12u64.to_le_bytes());
        assert!(matches!(decode(&mismatch), Err(Error::Container(_))));

        let mut dup = good.clone();
        dup[4..8].copy_from_slice(&2u32.to_le_bytes());
        dup.extend_from_slice(&good[8..]);
        assert!(matches!(decode(&dup), Err(Error::DuplicateName(n)) if n == "w"));
    }

    #[test]
    fn insert_and_require_validate() {
        let mut m = one_entry();
        assert!(matches!(m.insert("w", vec![1], vec![0.0]), Err(Error::DuplicateName(_))));
        assert!(m.insert("v", vec![3], vec![0.0]).is_err());
        assert!(m.insert("z", vec![0], vec![]).is_err());
        assert!(m.require("w", &[2, 2]).is_ok());
        assert!(matches!(m.require("w", &[4]), Err(Error::Shape(_))));
        assert!(matches!(m.require("q", &[4]), Err(Error::MissingTensor(n)) if n == "q"));
    }

    fn arb_map() -> impl Strategy<Value = TensorMap> {
        let entry = prop::collection::vec(1usize..4, 0..4).prop_flat_map(|dims| {
            let n: usize = dims.iter().product();
            (Just(dims), prop::collection::vec(any::<u32>().prop_map(f32::from_bits), n))
        });
        prop::collection::btree_map("[a-z0-9._]{1,12}", entry, 0..6).prop_map(|m| {
            let mut out = TensorMap::new();
            for (k, (dims, data)) in m {
                out.insert(k, dims, data).unwrap();
            }
            out
        })
    }

    proptest! {
        #[test]
        fn round_trip_is_bitwise(m in arb_map()) {
            let back = decode(&encode(&m)).unwrap();
            prop_assert!(back.bit_eq(&m));
        }
    }
}
